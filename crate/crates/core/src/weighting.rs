//! Distance-based snapshot weighting at a query point: cutoff distance,
//! normalized C1 piecewise-cubic weights, and their directional
//! derivatives.

use nalgebra::DVector;

use crate::error::Error;
use crate::Result;

/// Default cutoff fraction between the minimum and maximum snapshot
/// distance.
pub const DEFAULT_CUTOFF_FRACTION: f64 = 0.8;

/// Weighting mode selected by configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightingMode {
    /// Uniform weights `1/n_s`; reproduces the global POD basis.
    Global,
    /// Distance-based piecewise-cubic weights with cutoff fraction `c`.
    Cubic { c: f64 },
}

/// Snapshot distances from a query point and the derived cutoff.
#[derive(Debug, Clone)]
pub struct DistanceProfile {
    /// `delta_j = |mu_hat - mu_j|_2` per participating snapshot.
    pub deltas: Vec<f64>,
    pub delta_min: f64,
    pub delta_max: f64,
    /// Cutoff `c * delta_min + (1 - c) * delta_max`; snapshots at or
    /// beyond it get zero weight.
    pub delta_hat: f64,
    pub c: f64,
    pub query: DVector<f64>,
}

/// Normalized snapshot weights at a query point.
#[derive(Debug, Clone)]
pub struct WeightAssignment {
    /// Normalized weights, a partition of unity.
    pub weights: Vec<f64>,
    /// Indices with strictly positive weight.
    pub active_set: Vec<usize>,
    /// Directional derivative of each normalized weight, contracted with
    /// the unit vector from the snapshot toward the query point.
    pub dir_derivs: Vec<f64>,
}

impl WeightAssignment {
    /// Uniform `1/n` weights with zero derivatives (global POD).
    pub fn global(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
            active_set: (0..n).collect(),
            dir_derivs: vec![0.0; n],
        }
    }

    pub fn n_active(&self) -> usize {
        self.active_set.len()
    }
}

/// Distances from `query` to each point, with the cutoff blend parameter
/// `c` in `(0, 1]`.
pub fn distance_profile(
    points: &[DVector<f64>],
    query: &DVector<f64>,
    c: f64,
) -> Result<DistanceProfile> {
    if points.is_empty() {
        return Err(Error::EmptyPointList);
    }
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::InvalidCutoffFraction(c));
    }
    let deltas: Vec<f64> = points.iter().map(|p| (query - p).norm()).collect();
    let delta_min = deltas.iter().cloned().fold(f64::INFINITY, f64::min);
    let delta_max = deltas.iter().cloned().fold(0.0_f64, f64::max);
    Ok(DistanceProfile {
        deltas,
        delta_min,
        delta_max,
        delta_hat: c * delta_min + (1.0 - c) * delta_max,
        c,
        query: query.clone(),
    })
}

/// Raw cubic weight at distance `delta`: Hermite blend with value one and
/// zero slope at `delta_min`, value and slope zero at `delta_hat`.
fn raw_weight(profile: &DistanceProfile, delta: f64) -> f64 {
    if delta <= profile.delta_min {
        return 1.0;
    }
    if delta >= profile.delta_hat {
        return 0.0;
    }
    let s = (delta - profile.delta_min) / (profile.delta_hat - profile.delta_min);
    1.0 - 3.0 * s * s + 2.0 * s * s * s
}

/// Slope of the raw cubic weight in `delta`; zero outside the open
/// support interval.
fn raw_weight_slope(profile: &DistanceProfile, delta: f64) -> f64 {
    if delta <= profile.delta_min || delta >= profile.delta_hat {
        return 0.0;
    }
    let h = profile.delta_hat - profile.delta_min;
    let s = (delta - profile.delta_min) / h;
    (-6.0 * s + 6.0 * s * s) / h
}

/// Normalized piecewise-cubic weights for a distance profile.
///
/// A degenerate profile (`delta_min == delta_hat`) puts raw weight one on
/// every index attaining the minimum distance, the support-shrinking
/// limit of the cubic.
pub fn cubic_weights(profile: &DistanceProfile) -> WeightAssignment {
    let raw: Vec<f64> = if profile.delta_hat <= profile.delta_min {
        profile
            .deltas
            .iter()
            .map(|&d| if d <= profile.delta_min { 1.0 } else { 0.0 })
            .collect()
    } else {
        profile.deltas.iter().map(|&d| raw_weight(profile, d)).collect()
    };
    let sum: f64 = raw.iter().sum();
    debug_assert!(sum > 0.0, "minimum-distance snapshot always has raw weight 1");
    let weights: Vec<f64> = raw.iter().map(|&r| r / sum).collect();
    let active_set = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, _)| i)
        .collect();
    let dir_derivs = directional_derivatives(profile, &raw, sum);
    WeightAssignment {
        weights,
        active_set,
        dir_derivs,
    }
}

/// Directional derivatives of the normalized weights.
///
/// Each scalar is the chain-rule derivative of snapshot `j`'s normalized
/// weight through its own distance `delta_j`, contracted with the unit
/// vector `(mu_hat - mu_j)/delta_j`. The cutoffs `delta_min`, `delta_hat`
/// and the other raw weights are held fixed, so the contraction reduces
/// to `(sum - raw_j)/sum^2 * domega/ddelta(delta_j)`. Snapshots at zero
/// distance or outside the cutoff get derivative zero.
pub fn weight_directional_derivatives(profile: &DistanceProfile) -> Vec<f64> {
    let raw: Vec<f64> = profile.deltas.iter().map(|&d| raw_weight(profile, d)).collect();
    let sum: f64 = raw.iter().sum();
    directional_derivatives(profile, &raw, sum)
}

fn directional_derivatives(profile: &DistanceProfile, raw: &[f64], sum: f64) -> Vec<f64> {
    if profile.delta_hat <= profile.delta_min {
        return vec![0.0; profile.deltas.len()];
    }
    profile
        .deltas
        .iter()
        .zip(raw)
        .map(|(&delta, &raw_j)| {
            if delta == 0.0 || delta >= profile.delta_hat {
                0.0
            } else {
                (sum - raw_j) / (sum * sum) * raw_weight_slope(profile, delta)
            }
        })
        .collect()
}
