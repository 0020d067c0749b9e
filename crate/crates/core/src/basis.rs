//! Reduced-basis construction from the weighted SVD, and directional
//! reduced-basis derivatives obtained by differentiating the small
//! snapshot-correlation eigenproblem.
//!
//! Bases are assembled in inner-product coordinates (`F`-coordinates,
//! where orthonormality is Euclidean) and mapped back through a single
//! triangular solve, so `ΦᵀEΦ = I` holds by construction.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::store::SnapshotStore;
use crate::svd::{self, TruncatedSvd};
use crate::weighting::{self, WeightAssignment};
use crate::Result;

/// Relative singular-value gap below which a mode derivative is treated
/// as degenerate.
pub const GAP_TOL: f64 = 1e-6;

/// Derivative columns with norm at or below this are replaced by the next
/// unused primal vector.
pub const ZERO_COLUMN_TOL: f64 = 1e-12;

/// An E-orthonormal reduced basis, optionally holding normalized
/// mode-derivative columns after the primal block.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    /// Basis matrix, `n_x x (n_primal + n_deriv)`.
    pub phi: DMatrix<f64>,
    pub n_primal: usize,
    pub n_deriv: usize,
    /// Query point the basis was localized at, when one exists.
    pub built_at: Option<DVector<f64>>,
    pub weights_used: WeightAssignment,
}

impl ReducedBasis {
    pub fn n_r(&self) -> usize {
        self.n_primal + self.n_deriv
    }
}

/// Weighted-SVD reduced basis: apply the snapshot weights to the running
/// factorization, take the leading `n_r` left singular vectors, and map
/// them out of inner-product coordinates.
pub fn build_basis(
    store: &SnapshotStore,
    weights: &WeightAssignment,
    n_r: usize,
) -> Result<ReducedBasis> {
    if weights.weights.len() != store.n_snapshots() {
        return Err(Error::DimensionMismatch {
            context: "build_basis weight count",
            expected: store.n_snapshots(),
            got: weights.weights.len(),
        });
    }
    let col_weights = store.expand_snapshot_weights(&weights.weights);
    let wsvd = svd::weighted_svd(store.running_svd(), &col_weights)?;
    if n_r > wsvd.rank() {
        return Err(Error::RankExceeded {
            requested: n_r,
            available: wsvd.rank(),
        });
    }
    let phi_bar = wsvd.left.columns(0, n_r).into_owned();
    let phi = from_ip_coordinates(store.ip_factor(), &phi_bar)?;
    Ok(ReducedBasis {
        phi,
        n_primal: n_r,
        n_deriv: 0,
        built_at: None,
        weights_used: weights.clone(),
    })
}

/// Map columns from F-coordinates back to state coordinates by solving
/// against the upper-triangular inner-product factor.
fn from_ip_coordinates(ip_factor: &DMatrix<f64>, columns: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ip_factor
        .solve_upper_triangular(columns)
        .ok_or(Error::SolveFailed {
            context: "inner-product factor solve",
        })
}

/// Directional snapshot-derivative matrix: for every derivative-bearing
/// snapshot, the contraction of its parametric derivative tensor with the
/// displacement `mu_hat - mu_j` (direction scaled by the distance, so the
/// connecting segment is parameterized on `[0, 1]`).
pub fn directional_snapshot_derivatives(
    store: &SnapshotStore,
    mu_hat: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let indices = store.derivative_indices();
    if indices.is_empty() {
        return Err(Error::NoDerivativeData);
    }
    let n_t = store.n_t();
    let mut out = DMatrix::zeros(store.n_x(), indices.len() * n_t);
    for (a, &j) in indices.iter().enumerate() {
        let block = directional_block(store, j, mu_hat);
        out.view_mut((0, a * n_t), (store.n_x(), n_t)).copy_from(&block);
    }
    Ok(out)
}

fn directional_block(store: &SnapshotStore, j: usize, mu_hat: &DVector<f64>) -> DMatrix<f64> {
    let slices = store.deriv_block(j).expect("derivative-bearing index");
    let displacement = mu_hat - &store.points()[j];
    let mut block = DMatrix::zeros(store.n_x(), store.n_t());
    for (i, slice) in slices.iter().enumerate() {
        block += slice * displacement[i];
    }
    block
}

/// Directional derivative of the weighted snapshot matrix
/// `X W^{1/2} = F A W_k^{1/2} diag(omega_j)`, product rule over the
/// snapshot extrapolation and the weight motion, restricted to the active
/// columns of the derivative-bearing subset.
pub fn weighted_matrix_derivative(
    store: &SnapshotStore,
    weights: &WeightAssignment,
    mu_hat: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let indices = store.derivative_indices();
    if indices.is_empty() {
        return Err(Error::NoDerivativeData);
    }
    if weights.weights.len() != indices.len() {
        return Err(Error::DimensionMismatch {
            context: "weighted_matrix_derivative weight count",
            expected: indices.len(),
            got: weights.weights.len(),
        });
    }
    if weights.active_set.is_empty() {
        return Err(Error::AllWeightsZero);
    }
    let n_t = store.n_t();
    let n_x = store.n_x();
    let mut out = DMatrix::zeros(n_x, weights.active_set.len() * n_t);
    for (slot, &a) in weights.active_set.iter().enumerate() {
        let j = indices[a];
        let omega = weights.weights[a];
        let d_omega = weights.dir_derivs[a];
        let directional = directional_block(store, j, mu_hat);
        let term = store.weighted_block(&directional) * omega
            + store.weighted_block(store.block(j)) * d_omega;
        out.view_mut((0, slot * n_t), (n_x, n_t)).copy_from(&term);
    }
    Ok(out)
}

/// One requested mode derivative.
#[derive(Debug, Clone)]
pub enum ModeDerivative {
    /// Derivative column in state coordinates, pre-normalization.
    Column(DVector<f64>),
    /// Singular-value gap too small to differentiate the mode.
    Degenerate,
}

/// Derivatives of the leading `m` left singular vectors of the weighted
/// snapshot matrix, given its truncated SVD and the directional
/// derivative `dx` of the matrix.
///
/// Works in the small space: with `K = XᵀX` and eigenpairs
/// `(sigma_i^2, v_i)`, each derivative solves one bordered system of the
/// active-column size enforcing `v_iᵀ dv_i = 0`.
pub fn basis_derivatives(
    weighted: &TruncatedSvd,
    dx: &DMatrix<f64>,
    m: usize,
    ip_factor: &DMatrix<f64>,
) -> Result<Vec<ModeDerivative>> {
    let r = weighted.rank();
    if m > r {
        return Err(Error::RankExceeded {
            requested: m,
            available: r,
        });
    }
    let n_cols = weighted.n_cols();
    if dx.nrows() != weighted.n_rows() || dx.ncols() != n_cols {
        return Err(Error::DimensionMismatch {
            context: "basis_derivatives dx shape",
            expected: weighted.n_rows() * n_cols,
            got: dx.nrows() * dx.ncols(),
        });
    }
    if m == 0 {
        return Ok(Vec::new());
    }

    let sigma = &weighted.singular_values;
    let v = &weighted.right;
    let u = &weighted.left;

    // K = V S^2 Vᵀ and dK = dXᵀX + XᵀdX through the factors.
    let mut v_scaled = v.clone();
    for i in 0..r {
        v_scaled.column_mut(i).scale_mut(sigma[i] * sigma[i]);
    }
    let k_small = &v_scaled * v.transpose();

    let mut ut_dx = u.transpose() * dx; // r x n_cols
    for i in 0..r {
        ut_dx.row_mut(i).scale_mut(sigma[i]);
    }
    let xt_dx = v * &ut_dx; // XᵀdX
    let dk = &xt_dx + xt_dx.transpose();

    let apply_x = |z: &DVector<f64>| -> DVector<f64> {
        let mut t = v.transpose() * z;
        for i in 0..r {
            t[i] *= sigma[i];
        }
        u * t
    };

    let mut result = Vec::with_capacity(m);
    for i in 0..m {
        let upper_gap = if i == 0 {
            f64::INFINITY
        } else {
            (sigma[i - 1] - sigma[i]).abs() / sigma[0]
        };
        let next_sigma = if i + 1 < r {
            sigma[i + 1]
        } else if n_cols > r {
            0.0
        } else {
            f64::NEG_INFINITY // no further eigenvalue to collide with
        };
        let lower_gap = if next_sigma.is_finite() {
            (sigma[i] - next_sigma).abs() / sigma[0]
        } else {
            f64::INFINITY
        };
        if upper_gap <= GAP_TOL || lower_gap <= GAP_TOL {
            log::warn!(
                "mode {i} skipped: singular value cluster (gaps {upper_gap:.2e}/{lower_gap:.2e})"
            );
            result.push(ModeDerivative::Degenerate);
            continue;
        }

        let a = v.column(i).into_owned();
        let lambda = sigma[i] * sigma[i];
        let dk_a = &dk * &a;
        let d_lambda = a.dot(&dk_a);

        // Bordered system [[K - lambda I, a], [aᵀ, 0]].
        let mut system = DMatrix::zeros(n_cols + 1, n_cols + 1);
        system
            .view_mut((0, 0), (n_cols, n_cols))
            .copy_from(&k_small);
        for d in 0..n_cols {
            system[(d, d)] -= lambda;
        }
        for d in 0..n_cols {
            system[(d, n_cols)] = a[d];
            system[(n_cols, d)] = a[d];
        }
        let mut rhs = DVector::zeros(n_cols + 1);
        for d in 0..n_cols {
            rhs[d] = -(dk_a[d] - d_lambda * a[d]);
        }
        let solved = match system.lu().solve(&rhs) {
            Some(s) => s,
            None => {
                log::warn!("mode {i} skipped: singular bordered system");
                result.push(ModeDerivative::Degenerate);
                continue;
            }
        };
        let da = solved.rows(0, n_cols).into_owned();

        let s = sigma[i];
        let x_a = apply_x(&a);
        let x_da = apply_x(&da);
        let dphi_bar = (dx * &a + x_da) / s - &x_a * (d_lambda / (2.0 * s * s) / s);
        let dphi = from_ip_coordinates(ip_factor, &DMatrix::from_columns(&[dphi_bar]))?;
        result.push(ModeDerivative::Column(dphi.column(0).into_owned()));
    }
    Ok(result)
}

/// Derivative-enhanced reduced basis: primal modes from the weighted SVD
/// over the derivative-bearing snapshots, paired with their normalized
/// directional derivatives, re-orthonormalized by default.
pub fn build_enhanced_basis(
    store: &SnapshotStore,
    mu_hat: &DVector<f64>,
    c: f64,
    n_r: usize,
) -> Result<ReducedBasis> {
    build_enhanced_basis_opts(store, mu_hat, c, n_r, true)
}

/// [`build_enhanced_basis`] with the final re-orthonormalization pass
/// selectable.
pub fn build_enhanced_basis_opts(
    store: &SnapshotStore,
    mu_hat: &DVector<f64>,
    c: f64,
    n_r: usize,
    reorthonormalize: bool,
) -> Result<ReducedBasis> {
    if n_r < 2 {
        return Err(Error::Config(format!(
            "enhanced basis needs n_r >= 2, got {n_r}"
        )));
    }
    let indices = store.derivative_indices();
    if indices.is_empty() {
        return Err(Error::NoDerivativeData);
    }
    let deriv_points: Vec<DVector<f64>> =
        indices.iter().map(|&j| store.points()[j].clone()).collect();
    let profile = weighting::distance_profile(&deriv_points, mu_hat, c)?;
    let subset_weights = weighting::cubic_weights(&profile);

    // Expand to the full snapshot set; non-derivative snapshots always
    // get zero weight.
    let mut full = vec![0.0; store.n_snapshots()];
    for (a, &j) in indices.iter().enumerate() {
        full[j] = subset_weights.weights[a];
    }
    let col_weights = store.expand_snapshot_weights(&full);
    let wsvd = svd::weighted_svd(store.running_svd(), &col_weights)?;

    let n_primal = n_r.div_ceil(2);
    let n_deriv = n_r / 2;
    if n_primal > wsvd.rank() {
        return Err(Error::RankExceeded {
            requested: n_primal,
            available: wsvd.rank(),
        });
    }

    let dx = weighted_matrix_derivative(store, &subset_weights, mu_hat)?;
    let derivs = basis_derivatives(&wsvd, &dx, n_deriv, store.ip_factor())?;

    // Assemble in F-coordinates: primal singular vectors, then each
    // derivative mapped back, normalized, with degenerate or vanishing
    // columns replaced by the next unused primal vector.
    let n_x = store.n_x();
    let mut psi = DMatrix::zeros(n_x, n_r);
    psi.view_mut((0, 0), (n_x, n_primal))
        .copy_from(&wsvd.left.columns(0, n_primal));
    let mut next_unused = n_primal;
    for (i, mode) in derivs.iter().enumerate() {
        let f_col = match mode {
            ModeDerivative::Column(dphi) => {
                let bar = store.ip_factor() * dphi;
                if bar.norm() > ZERO_COLUMN_TOL {
                    Some(bar)
                } else {
                    None
                }
            }
            ModeDerivative::Degenerate => None,
        };
        let column = match f_col {
            Some(bar) => {
                let norm = bar.norm();
                bar / norm
            }
            None => {
                if next_unused >= wsvd.rank() {
                    return Err(Error::RankExceeded {
                        requested: next_unused + 1,
                        available: wsvd.rank(),
                    });
                }
                let col = wsvd.left.column(next_unused).into_owned();
                next_unused += 1;
                col
            }
        };
        psi.set_column(n_primal + i, &column);
    }

    if reorthonormalize {
        modified_gram_schmidt(&mut psi)?;
    }

    let phi = from_ip_coordinates(store.ip_factor(), &psi)?;
    Ok(ReducedBasis {
        phi,
        n_primal,
        n_deriv,
        built_at: Some(mu_hat.clone()),
        weights_used: subset_weights,
    })
}

/// Two-pass modified Gram-Schmidt on the columns of `m`.
fn modified_gram_schmidt(m: &mut DMatrix<f64>) -> Result<()> {
    let n_cols = m.ncols();
    for j in 0..n_cols {
        let mut col = m.column(j).into_owned();
        for _pass in 0..2 {
            for i in 0..j {
                let prev = m.column(i);
                let coeff = prev.dot(&col);
                col.axpy(-coeff, &prev.into_owned(), 1.0);
            }
        }
        let norm = col.norm();
        if norm < 1e-10 {
            return Err(Error::DegenerateBasis);
        }
        col /= norm;
        m.set_column(j, &col);
    }
    Ok(())
}
