//! Computable surrogate of the weighted-POD a posteriori error bound,
//! reported per query for post-hoc correlation with observed errors.
//!
//! The integration upper-bound matrices and ball radii of the bound are
//! unknown in general; the surrogate takes the unit-matrix, zero-radius
//! limit, collapsing both bracketed distance factors to `2 |mu_hat -
//! mu_j|^2`. It is a diagnostic indicator, never an acceptance gate.

use nalgebra::DVector;

use crate::error::Error;
use crate::store::SnapshotStore;
use crate::svd;
use crate::weighting::WeightAssignment;
use crate::Result;

/// Evaluated bound surrogate with per-snapshot distance contributions.
#[derive(Debug, Clone)]
pub struct BoundReport {
    /// `3 n_s sum_{i > n_r} sigma_i^2` over the weighted singular values.
    pub truncation_term: f64,
    /// `3 n_s n_p (sum_k w^k) sum_j w_j^2 2 |mu_hat - mu_j|^2`.
    pub distance_term: f64,
    pub total: f64,
    /// Distance-term contribution of each snapshot.
    pub per_snapshot: Vec<f64>,
}

/// Evaluate the bound surrogate for the weighted basis of dimension `n_r`
/// at `mu_hat`. `weights` runs over all stored snapshots.
pub fn bound_surrogate(
    store: &SnapshotStore,
    weights: &WeightAssignment,
    n_r: usize,
    mu_hat: &DVector<f64>,
) -> Result<BoundReport> {
    let n_s = store.n_snapshots();
    if weights.weights.len() != n_s {
        return Err(Error::DimensionMismatch {
            context: "bound_surrogate weight count",
            expected: n_s,
            got: weights.weights.len(),
        });
    }
    let n_p = store.n_p() as f64;
    let col_weights = store.expand_snapshot_weights(&weights.weights);
    let wsvd = svd::weighted_svd(store.running_svd(), &col_weights)?;

    let truncation_term = 3.0
        * n_s as f64
        * (n_r..wsvd.rank())
            .map(|i| wsvd.singular_values[i] * wsvd.singular_values[i])
            .sum::<f64>();

    let time_weight_sum: f64 = store.time_weights().iter().sum();
    let prefactor = 3.0 * n_s as f64 * n_p * time_weight_sum;
    let per_snapshot: Vec<f64> = store
        .points()
        .iter()
        .zip(&weights.weights)
        .map(|(point, &w)| {
            let dist_sq = (mu_hat - point).norm_squared();
            prefactor * w * w * 2.0 * dist_sq
        })
        .collect();
    let distance_term: f64 = per_snapshot.iter().sum();

    Ok(BoundReport {
        truncation_term,
        distance_term,
        total: truncation_term + distance_term,
        per_snapshot,
    })
}
