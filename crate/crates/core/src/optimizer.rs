//! Gradient-based constrained optimizer: box bounds plus one linear
//! equality constraint, driven by a damped-BFGS SQP step with a
//! closed-form KKT subproblem, and an outer loop with periodic
//! re-initialization from the best design and halving of the residual
//! acceptance threshold.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Error;
use crate::Result;

/// Outer-loop schedule parameters.
#[derive(Debug, Clone)]
pub struct Schedule {
    /// Iterations per segment before re-initializing from the best design.
    pub reinit_period: usize,
    /// Required number of threshold halvings before convergence may stop
    /// the loop.
    pub min_halvings: usize,
    /// Initial residual acceptance threshold.
    pub eps_r0: f64,
    pub max_iters: usize,
    pub kkt_tol: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            reinit_period: 25,
            min_halvings: 2,
            eps_r0: 1e-1,
            max_iters: 300,
            kkt_tol: 1e-6,
        }
    }
}

/// Feasibility tolerance on the equality constraint.
pub const FEASIBILITY_TOL: f64 = 1e-8;
const ARMIJO_C: f64 = 1e-4;
const BACKTRACK_FACTOR: f64 = 0.5;
const MAX_LINE_SEARCH_TRIALS: usize = 30;

/// Problem oracle driven by the optimizer. Objective and gradient
/// requests may be served by a reduced model; the constraint is analytic.
pub trait DesignEvaluator {
    fn objective(&mut self, mu: &DVector<f64>) -> Result<f64>;
    fn gradient(&mut self, mu: &DVector<f64>) -> Result<DVector<f64>>;
    /// Equality constraint value and gradient (gradient assumed constant).
    fn constraint(&self, mu: &DVector<f64>) -> (f64, DVector<f64>);
    /// Uniform box bounds.
    fn bounds(&self) -> (f64, f64);
    /// Called at each segment boundary with the restart design and the
    /// halved threshold; returns whether a snapshot was force-stored.
    fn on_segment_boundary(&mut self, _best_mu: &DVector<f64>, _new_eps_r: f64) -> Result<bool> {
        Ok(false)
    }
}

/// Why the outer loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// KKT residual within tolerance after the required halvings.
    KktConverged,
    /// Iteration budget exhausted.
    Budget,
    /// No descent direction available even after re-initialization.
    Stalled,
}

/// Run-level outcome of the outer loop.
#[derive(Debug, Clone, Serialize)]
pub struct OptimizationReport {
    pub iterations: usize,
    pub termination: Termination,
    pub j_initial: f64,
    pub j_best: f64,
    /// Relative objective `j_best / j_initial`.
    pub c_rel: f64,
    pub best_mu: Vec<f64>,
    pub kkt_residual: f64,
    pub halvings: usize,
    /// Threshold value after each halving, starting from the initial one.
    pub eps_r_trace: Vec<f64>,
    /// Segment boundaries at which a best-design snapshot was re-stored.
    pub boundary_restores: usize,
}

/// One accepted SQP step.
pub struct StepOutcome {
    pub mu_next: DVector<f64>,
    pub j_next: f64,
    /// Equality-constraint multiplier from the KKT solve.
    pub multiplier: f64,
    pub line_search_trials: usize,
}

fn clip(mu: &DVector<f64>, lo: f64, hi: f64) -> DVector<f64> {
    mu.map(|x| x.clamp(lo, hi))
}

/// Equality-constrained QP `min 1/2 dᵀBd + gᵀd` s.t. `aᵀd + c = 0` and
/// `lo <= mu + d <= hi`, solved by repeated closed-form KKT solves with
/// bound-violating components clamped (at most `n` passes).
fn solve_qp(
    mu: &DVector<f64>,
    grad: &DVector<f64>,
    c_value: f64,
    c_grad: &DVector<f64>,
    lo: f64,
    hi: f64,
    hessian: &DMatrix<f64>,
) -> Result<(DVector<f64>, f64)> {
    let n = mu.len();
    let mut clamped: Vec<Option<f64>> = vec![None; n]; // fixed displacement
    loop {
        let free: Vec<usize> = (0..n).filter(|&i| clamped[i].is_none()).collect();
        if free.is_empty() {
            let d = DVector::from_fn(n, |i, _| clamped[i].unwrap_or(0.0));
            return Ok((d, 0.0));
        }
        let nf = free.len();
        // Contributions of the fixed displacements.
        let d_fixed = DVector::from_fn(n, |i, _| clamped[i].unwrap_or(0.0));
        let b_times_fixed = hessian * &d_fixed;
        let c_fixed: f64 = (0..n).map(|i| c_grad[i] * d_fixed[i]).sum();

        let mut kkt = DMatrix::zeros(nf + 1, nf + 1);
        let mut rhs = DVector::zeros(nf + 1);
        for (r, &i) in free.iter().enumerate() {
            for (s, &j) in free.iter().enumerate() {
                kkt[(r, s)] = hessian[(i, j)];
            }
            kkt[(r, nf)] = c_grad[i];
            kkt[(nf, r)] = c_grad[i];
            rhs[r] = -(grad[i] + b_times_fixed[i]);
        }
        rhs[nf] = -(c_value + c_fixed);
        let solution = kkt.lu().solve(&rhs).ok_or(Error::StepFailure {
            reason: "singular KKT system",
        })?;

        // Clamp the most violated free component, if any.
        let mut worst: Option<(usize, f64, f64)> = None;
        for (r, &i) in free.iter().enumerate() {
            let target = mu[i] + solution[r];
            let violation = if target < lo {
                lo - target
            } else if target > hi {
                target - hi
            } else {
                0.0
            };
            if violation > 0.0 && worst.map_or(true, |(_, _, v)| violation > v) {
                let bound = if target < lo { lo } else { hi };
                worst = Some((i, bound - mu[i], violation));
            }
        }
        match worst {
            Some((i, fixed_d, _)) => clamped[i] = Some(fixed_d),
            None => {
                let mut d = d_fixed;
                for (r, &i) in free.iter().enumerate() {
                    d[i] = solution[r];
                }
                return Ok((d, solution[nf]));
            }
        }
    }
}

/// One damped quasi-Newton SQP step: KKT subproblem on the linearized
/// constraint with box clamping, then a backtracking line search on the
/// l1 merit function.
pub fn constrained_step<E: DesignEvaluator>(
    evaluator: &mut E,
    mu: &DVector<f64>,
    j_current: f64,
    grad: &DVector<f64>,
    hessian: &DMatrix<f64>,
) -> Result<StepOutcome> {
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "objective gradient",
        });
    }
    let (lo, hi) = evaluator.bounds();
    let (c_value, c_grad) = evaluator.constraint(mu);
    let (d, multiplier) = solve_qp(mu, grad, c_value, &c_grad, lo, hi, hessian)?;

    let scale = 1.0 + mu.norm();
    if d.norm() <= 1e-14 * scale {
        return Ok(StepOutcome {
            mu_next: mu.clone(),
            j_next: j_current,
            multiplier,
            line_search_trials: 0,
        });
    }

    // l1 merit with penalty dominating the multiplier.
    let penalty = 10.0_f64.max(2.0 * multiplier.abs());
    let merit_current = j_current + penalty * c_value.abs();
    let descent = grad.dot(&d) - penalty * c_value.abs();
    if descent >= 0.0 {
        return Err(Error::StepFailure {
            reason: "non-descent direction",
        });
    }

    let mut alpha = 1.0;
    for trial in 1..=MAX_LINE_SEARCH_TRIALS {
        let mu_trial = clip(&(mu + &d * alpha), lo, hi);
        let j_trial = evaluator.objective(&mu_trial)?;
        let (c_trial, _) = evaluator.constraint(&mu_trial);
        let merit_trial = j_trial + penalty * c_trial.abs();
        if merit_trial <= merit_current + ARMIJO_C * alpha * descent {
            return Ok(StepOutcome {
                mu_next: mu_trial,
                j_next: j_trial,
                multiplier,
                line_search_trials: trial,
            });
        }
        alpha *= BACKTRACK_FACTOR;
    }
    Err(Error::StepFailure {
        reason: "line search exhausted",
    })
}

/// Projected-gradient stationarity measure combined with constraint
/// feasibility.
pub fn kkt_residual(
    mu: &DVector<f64>,
    grad: &DVector<f64>,
    multiplier: f64,
    c_value: f64,
    c_grad: &DVector<f64>,
    lo: f64,
    hi: f64,
) -> f64 {
    let lagrangian_grad = grad + c_grad * multiplier;
    let projected = clip(&(mu - &lagrangian_grad), lo, hi);
    let stationarity = (&projected - mu).abs().max();
    stationarity.max(c_value.abs())
}

/// Powell-damped BFGS update of the Hessian approximation.
fn bfgs_update(hessian: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>, fresh: bool) {
    let s_norm = s.norm();
    if s_norm <= 1e-14 {
        return;
    }
    if fresh {
        // Scale the identity to the observed curvature before the first
        // update of a segment.
        let sy = s.dot(y);
        if sy > 1e-12 {
            let gamma = y.dot(y) / sy;
            if gamma.is_finite() && gamma > 1e-8 {
                *hessian = DMatrix::identity(s.len(), s.len()) * gamma;
            }
        }
    }
    let bs = &*hessian * s;
    let s_bs = s.dot(&bs);
    let sy = s.dot(y);
    let y_used = if sy < 0.2 * s_bs {
        let theta = 0.8 * s_bs / (s_bs - sy);
        y * theta + &bs * (1.0 - theta)
    } else {
        y.clone()
    };
    let s_yu = s.dot(&y_used);
    if s_bs <= 1e-16 || s_yu <= 1e-16 {
        return;
    }
    *hessian -= &bs * bs.transpose() / s_bs;
    *hessian += &y_used * y_used.transpose() / s_yu;
}

/// Run the segmented outer loop from `mu_init`.
///
/// Every `reinit_period` iterations the loop restarts from the best
/// design seen, resets the Hessian approximation, halves the residual
/// threshold, and asks the evaluator to store the best design if not
/// already present. Termination requires the KKT residual within
/// tolerance and at least `min_halvings` halvings, or the budget.
pub fn outer_loop<E: DesignEvaluator>(
    evaluator: &mut E,
    schedule: &Schedule,
    mu_init: &DVector<f64>,
) -> Result<OptimizationReport> {
    let (lo, hi) = evaluator.bounds();
    let n = mu_init.len();
    let mut mu = clip(mu_init, lo, hi);
    let mut j = evaluator.objective(&mu)?;
    let mut grad = evaluator.gradient(&mu)?;
    let j_initial = j;
    let mut best_mu = mu.clone();
    let mut best_j = j;

    let mut hessian = DMatrix::identity(n, n);
    let mut fresh_hessian = true;
    let mut eps_r = schedule.eps_r0;
    let mut eps_r_trace = vec![eps_r];
    let mut halvings = 0usize;
    let mut boundary_restores = 0usize;
    let mut kkt = f64::INFINITY;
    let mut iterations = 0usize;
    let mut termination = Termination::Budget;
    let mut failed_after_reset = false;

    while iterations < schedule.max_iters {
        iterations += 1;
        let step = match constrained_step(evaluator, &mu, j, &grad, &hessian) {
            Ok(step) => step,
            Err(Error::StepFailure { .. }) => {
                if failed_after_reset {
                    termination = Termination::Stalled;
                    break;
                }
                // Re-initialize: best design, fresh Hessian.
                failed_after_reset = true;
                mu = best_mu.clone();
                j = best_j;
                grad = evaluator.gradient(&mu)?;
                hessian = DMatrix::identity(n, n);
                fresh_hessian = true;
                continue;
            }
            Err(other) => return Err(other),
        };
        failed_after_reset = false;
        let multiplier = step.multiplier;

        let grad_next = evaluator.gradient(&step.mu_next)?;
        let s = &step.mu_next - &mu;
        let y = &grad_next - &grad; // constant constraint gradient cancels
        bfgs_update(&mut hessian, &s, &y, fresh_hessian);
        fresh_hessian = false;

        mu = step.mu_next;
        j = step.j_next;
        grad = grad_next;
        if j < best_j {
            best_j = j;
            best_mu = mu.clone();
        }

        let (c_value, c_grad) = evaluator.constraint(&mu);
        kkt = kkt_residual(&mu, &grad, multiplier, c_value, &c_grad, lo, hi);
        if kkt <= schedule.kkt_tol && halvings >= schedule.min_halvings {
            termination = Termination::KktConverged;
            break;
        }

        if iterations % schedule.reinit_period == 0 && iterations < schedule.max_iters {
            eps_r /= 2.0;
            halvings += 1;
            eps_r_trace.push(eps_r);
            if evaluator.on_segment_boundary(&best_mu, eps_r)? {
                boundary_restores += 1;
            }
            mu = best_mu.clone();
            j = best_j;
            grad = evaluator.gradient(&mu)?;
            hessian = DMatrix::identity(n, n);
            fresh_hessian = true;
        }
    }

    let c_rel = if j_initial != 0.0 { best_j / j_initial } else { f64::NAN };
    Ok(OptimizationReport {
        iterations,
        termination,
        j_initial,
        j_best: best_j,
        c_rel,
        best_mu: best_mu.iter().copied().collect(),
        kkt_residual: kkt,
        halvings,
        eps_r_trace,
        boundary_restores,
    })
}
