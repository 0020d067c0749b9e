//! Desk-scale high-dimensional model: a damped cantilever mass-spring
//! chain with per-element thickness parameters, implicit-midpoint time
//! integration, a trapezoid-rule compliance objective, a volume equality
//! constraint, direct state sensitivities, and an adjoint gradient.
//!
//! Element `i` carries a spring `k_i = k0 mu_i^3` (bending-like cubic
//! law) anchored chain-wise to the wall and a lumped mass
//! `m_i = rho l mu_i`. The second-order system `M u'' + C u' + K u = f`
//! with Rayleigh damping `C = alpha M + beta K` is reduced to first-order
//! form `z' = A z + b` on the state `z = [u; v]`.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::Result;

/// Parametric chain problem definition.
#[derive(Debug, Clone)]
pub struct ChainProblem {
    /// Element count; also the parameter count, with state size `2 n_e`.
    pub n_e: usize,
    /// Element length (m).
    pub length: f64,
    /// Stiffness coefficient in `k_i = k0 mu_i^3` (N/m).
    pub k0: f64,
    /// Line density in `m_i = rho l mu_i` (kg/m^2).
    pub rho: f64,
    /// Rayleigh mass-damping coefficient.
    pub alpha: f64,
    /// Rayleigh stiffness-damping coefficient.
    pub beta: f64,
    /// Constant vertical force on every mass (N).
    pub force: f64,
    /// Time step size (s).
    pub dt: f64,
    /// Number of time steps past the rest initial state.
    pub n_t: usize,
    /// Thickness bounds (m).
    pub mu_lo: f64,
    pub mu_hi: f64,
    /// Initial uniform thickness (m).
    pub mu0_value: f64,
}

impl Default for ChainProblem {
    fn default() -> Self {
        Self {
            n_e: 24,
            length: 1.0,
            k0: 1e4,
            rho: 1e2,
            alpha: 0.01,
            beta: 0.002,
            force: -1.0,
            dt: 0.1,
            n_t: 200,
            mu_lo: 0.02,
            mu_hi: 0.2,
            mu0_value: 0.1,
        }
    }
}

impl ChainProblem {
    pub fn n_p(&self) -> usize {
        self.n_e
    }

    pub fn n_x(&self) -> usize {
        2 * self.n_e
    }

    /// Uniform initial design.
    pub fn mu0(&self) -> DVector<f64> {
        DVector::from_element(self.n_e, self.mu0_value)
    }

    /// Constant load vector on the displacement degrees of freedom.
    pub fn load(&self) -> DVector<f64> {
        DVector::from_element(self.n_e, self.force)
    }

    fn check_bounds(&self, mu: &DVector<f64>) -> Result<()> {
        if mu.len() != self.n_e {
            return Err(Error::DimensionMismatch {
                context: "chain parameter dimension",
                expected: self.n_e,
                got: mu.len(),
            });
        }
        let slack = 1e-12 * (self.mu_hi - self.mu_lo);
        for (i, &v) in mu.iter().enumerate() {
            if !(v >= self.mu_lo - slack && v <= self.mu_hi + slack) {
                return Err(Error::ParameterOutOfBounds {
                    index: i,
                    value: v,
                    lo: self.mu_lo,
                    hi: self.mu_hi,
                });
            }
        }
        Ok(())
    }

    /// Discrete norm matrix `blkdiag(K(mu0) + M(mu0), M(mu0))`, an
    /// H1-like inner product on the state, evaluated at the initial
    /// design.
    pub fn default_e_matrix(&self) -> DMatrix<f64> {
        let sys = self.assemble(&self.mu0()).expect("mu0 within bounds");
        let n = self.n_e;
        let mut e = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                e[(i, j)] = sys.stiffness[(i, j)];
            }
            e[(i, i)] += sys.mass[i];
            e[(n + i, n + i)] = sys.mass[i];
        }
        e
    }
}

/// Assembled operators at a parameter point.
pub struct AssembledSystem {
    /// Diagonal of the (lumped) mass matrix.
    pub mass: DVector<f64>,
    pub stiffness: DMatrix<f64>,
    pub damping: DMatrix<f64>,
    /// First-order operator `[[0, I], [-M^{-1}K, -M^{-1}C]]`.
    pub a_sys: DMatrix<f64>,
    /// Constant forcing `[0; M^{-1} f]`.
    pub b: DVector<f64>,
}

impl ChainProblem {
    /// Assemble mass, stiffness, damping, and the first-order operator at
    /// `mu`.
    pub fn assemble(&self, mu: &DVector<f64>) -> Result<AssembledSystem> {
        self.check_bounds(mu)?;
        let n = self.n_e;
        let springs: Vec<f64> = mu.iter().map(|&t| self.k0 * t * t * t).collect();
        let mass = DVector::from_fn(n, |i, _| self.rho * self.length * mu[i]);

        // Spring i couples mass i-1 and mass i; mass "-1" is the wall.
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] += springs[i];
            if i + 1 < n {
                k[(i, i)] += springs[i + 1];
                k[(i, i + 1)] -= springs[i + 1];
                k[(i + 1, i)] -= springs[i + 1];
            }
        }

        let mut damping = k.clone() * self.beta;
        for i in 0..n {
            damping[(i, i)] += self.alpha * mass[i];
        }

        let mut a_sys = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            a_sys[(i, n + i)] = 1.0;
            for j in 0..n {
                a_sys[(n + i, j)] = -k[(i, j)] / mass[i];
                a_sys[(n + i, n + j)] = -damping[(i, j)] / mass[i];
            }
        }
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            b[n + i] = self.force / mass[i];
        }

        Ok(AssembledSystem {
            mass,
            stiffness: k,
            damping,
            a_sys,
            b,
        })
    }
}

/// One HDM trajectory with its objective and per-step residual norms.
pub struct HdmSolution {
    /// States `z^k = [u^k; v^k]` for `k = 1..n_t`, column per step.
    pub trajectory: DMatrix<f64>,
    pub objective: f64,
    /// Per-step residual X-norms `|F r^k|_2` of the returned states.
    pub residual_norms: Vec<f64>,
    pub wall_time: Duration,
}

pub(crate) fn step_matrices(
    problem: &ChainProblem,
    sys: &AssembledSystem,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n_x = problem.n_x();
    let half = problem.dt / 2.0;
    let s_minus = DMatrix::identity(n_x, n_x) - &sys.a_sys * half;
    let s_plus = DMatrix::identity(n_x, n_x) + &sys.a_sys * half;
    (s_minus, s_plus)
}

/// Implicit-midpoint integration from an arbitrary initial state.
pub fn integrate(
    problem: &ChainProblem,
    mu: &DVector<f64>,
    z0: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let sys = problem.assemble(mu)?;
    let (s_minus, s_plus) = step_matrices(problem, &sys);
    let lu = s_minus.lu();
    let mut trajectory = DMatrix::zeros(problem.n_x(), problem.n_t);
    let mut prev = z0.clone();
    for k in 0..problem.n_t {
        let rhs = &s_plus * &prev + &sys.b * problem.dt;
        let z = lu.solve(&rhs).ok_or(Error::SolveFailed {
            context: "implicit midpoint step",
        })?;
        trajectory.set_column(k, &z);
        prev = z;
    }
    Ok(trajectory)
}

/// Solve the chain from rest and evaluate the compliance objective.
///
/// `ip_factor` is the factor `F` with `FᵀF = E` used for the residual
/// X-norms.
pub fn solve_hdm(
    problem: &ChainProblem,
    mu: &DVector<f64>,
    ip_factor: &DMatrix<f64>,
) -> Result<HdmSolution> {
    let started = Instant::now();
    let z0 = DVector::zeros(problem.n_x());
    let trajectory = integrate(problem, mu, &z0)?;
    let sys = problem.assemble(mu)?;
    let (s_minus, s_plus) = step_matrices(problem, &sys);
    let residual_norms =
        trajectory_residual_norms(&trajectory, &s_minus, &s_plus, &sys.b, problem.dt, ip_factor);
    let objective = objective(&trajectory, &problem.load(), problem.dt);
    Ok(HdmSolution {
        trajectory,
        objective,
        residual_norms,
        wall_time: started.elapsed(),
    })
}

/// Per-step X-norms of `r^k(z) = S_- z^k - S_+ z^{k-1} - dt b` for a
/// trajectory starting from rest.
pub fn trajectory_residual_norms(
    trajectory: &DMatrix<f64>,
    s_minus: &DMatrix<f64>,
    s_plus: &DMatrix<f64>,
    b: &DVector<f64>,
    dt: f64,
    ip_factor: &DMatrix<f64>,
) -> Vec<f64> {
    let n_t = trajectory.ncols();
    let mut norms = Vec::with_capacity(n_t);
    let mut prev = DVector::zeros(trajectory.nrows());
    for k in 0..n_t {
        let z = trajectory.column(k).into_owned();
        let r = s_minus * &z - s_plus * &prev - b * dt;
        norms.push((ip_factor * r).norm());
        prev = z;
    }
    norms
}

/// Trapezoid-rule compliance `J = sum_k (dt/2)(u^{k-1} + u^k)ᵀ f` with
/// `u^0 = 0`.
pub fn objective(trajectory: &DMatrix<f64>, load: &DVector<f64>, dt: f64) -> f64 {
    let n_u = load.len();
    let n_t = trajectory.ncols();
    let mut j = 0.0;
    let mut prev = DVector::zeros(n_u);
    for k in 0..n_t {
        let u = trajectory.view((0, k), (n_u, 1)).into_owned();
        j += (dt / 2.0) * (&prev + &u).dot(load);
        prev = u.column(0).into_owned();
    }
    j
}

/// Derivatives of the bottom block of `A_sys` and of `b` with respect to
/// one parameter.
pub(crate) struct ParamDerivOps {
    /// `d(M^{-1}K)/dmu_i`, `n_e x n_e`.
    dkm: DMatrix<f64>,
    /// `d(M^{-1}C)/dmu_i`, `n_e x n_e`.
    dcm: DMatrix<f64>,
    /// Bottom block of `db/dmu_i`.
    pub(crate) db_bottom: DVector<f64>,
}

pub(crate) fn param_derivative_ops(
    problem: &ChainProblem,
    mu: &DVector<f64>,
    sys: &AssembledSystem,
) -> Vec<ParamDerivOps> {
    let n = problem.n_e;
    let mk = DMatrix::from_fn(n, n, |i, j| sys.stiffness[(i, j)] / sys.mass[i]);
    let mc = DMatrix::from_fn(n, n, |i, j| sys.damping[(i, j)] / sys.mass[i]);
    let dm_scale = problem.rho * problem.length;

    (0..n)
        .map(|p| {
            // dK/dmu_p: spring p couples masses p-1 and p.
            let dk_coeff = 3.0 * problem.k0 * mu[p] * mu[p];
            let mut dk = DMatrix::zeros(n, n);
            if p == 0 {
                dk[(0, 0)] = dk_coeff;
            } else {
                dk[(p - 1, p - 1)] = dk_coeff;
                dk[(p, p)] = dk_coeff;
                dk[(p - 1, p)] = -dk_coeff;
                dk[(p, p - 1)] = -dk_coeff;
            }

            // d(M^{-1}K) = -M^{-1} dM M^{-1} K + M^{-1} dK, with
            // dM = rho*l * e_p e_pᵀ.
            let mut dkm = DMatrix::from_fn(n, n, |i, j| dk[(i, j)] / sys.mass[i]);
            for j in 0..n {
                dkm[(p, j)] -= dm_scale / sys.mass[p] * mk[(p, j)];
            }

            // dC = alpha dM + beta dK.
            let mut dcm = DMatrix::from_fn(n, n, |i, j| problem.beta * dk[(i, j)] / sys.mass[i]);
            dcm[(p, p)] += problem.alpha * dm_scale / sys.mass[p];
            for j in 0..n {
                dcm[(p, j)] -= dm_scale / sys.mass[p] * mc[(p, j)];
            }

            let mut db_bottom = DVector::zeros(n);
            db_bottom[p] = -dm_scale / sys.mass[p] * problem.force / sys.mass[p];

            ParamDerivOps { dkm, dcm, db_bottom }
        })
        .collect()
}

/// Product `dA_sys/dmu_p * w` using the sparse top structure of the
/// operator derivative.
pub(crate) fn apply_da_sys(ops: &ParamDerivOps, w: &DVector<f64>, n: usize) -> DVector<f64> {
    let u = w.rows(0, n);
    let v = w.rows(n, n);
    let bottom = -(&ops.dkm * u) - (&ops.dcm * v);
    let mut out = DVector::zeros(2 * n);
    out.rows_mut(n, n).copy_from(&bottom);
    out
}

/// Forward (direct) state sensitivities `dz^k/dmu_p` for every parameter,
/// sharing one factorization of the step matrix.
pub fn state_sensitivities(
    problem: &ChainProblem,
    mu: &DVector<f64>,
    solution: &HdmSolution,
) -> Result<Vec<DMatrix<f64>>> {
    let sys = problem.assemble(mu)?;
    let (s_minus, s_plus) = step_matrices(problem, &sys);
    let lu = s_minus.lu();
    let ops = param_derivative_ops(problem, mu, &sys);
    let n = problem.n_e;
    let n_x = problem.n_x();
    let n_t = problem.n_t;
    let dt = problem.dt;

    let mut result = Vec::with_capacity(n);
    for op in &ops {
        let mut slice = DMatrix::zeros(n_x, n_t);
        let mut dz_prev = DVector::zeros(n_x);
        let mut z_prev = DVector::zeros(n_x);
        for k in 0..n_t {
            let z = solution.trajectory.column(k).into_owned();
            let w = &z + &z_prev;
            let mut rhs = apply_da_sys(op, &w, n) * (dt / 2.0) + &s_plus * &dz_prev;
            rhs.rows_mut(n, n).axpy(dt, &op.db_bottom, 1.0);
            let dz = lu.solve(&rhs).ok_or(Error::SolveFailed {
                context: "sensitivity step",
            })?;
            slice.set_column(k, &dz);
            dz_prev = dz;
            z_prev = z;
        }
        result.push(slice);
    }
    Ok(result)
}

/// Reverse-time adjoint gradient of the compliance objective.
pub fn adjoint_gradient(
    problem: &ChainProblem,
    mu: &DVector<f64>,
    solution: &HdmSolution,
) -> Result<DVector<f64>> {
    adjoint_gradient_from_trajectory(problem, mu, &solution.trajectory)
}

/// [`adjoint_gradient`] given only the state trajectory.
pub fn adjoint_gradient_from_trajectory(
    problem: &ChainProblem,
    mu: &DVector<f64>,
    trajectory: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let sys = problem.assemble(mu)?;
    let (s_minus, s_plus) = step_matrices(problem, &sys);
    let lu_t = s_minus.transpose().lu();
    let s_plus_t = s_plus.transpose();
    let n = problem.n_e;
    let n_x = problem.n_x();
    let n_t = problem.n_t;
    let dt = problem.dt;
    let load = problem.load();

    // dJ/dz^k has weight dt at interior steps and dt/2 at the final one
    // (trapezoid rule with the next half-interval missing).
    let mut adjoints = DMatrix::zeros(n_x, n_t);
    let mut lambda_next = DVector::zeros(n_x);
    for k in (0..n_t).rev() {
        let w_k = if k + 1 == n_t { dt / 2.0 } else { dt };
        let mut rhs = &s_plus_t * &lambda_next;
        rhs.rows_mut(0, n).axpy(-w_k, &load, 1.0);
        let lambda = lu_t.solve(&rhs).ok_or(Error::SolveFailed {
            context: "adjoint step",
        })?;
        adjoints.set_column(k, &lambda);
        lambda_next = lambda;
    }

    let ops = param_derivative_ops(problem, mu, &sys);
    let mut grad = DVector::zeros(n);
    let mut z_prev = DVector::zeros(n_x);
    for k in 0..n_t {
        let z = trajectory.column(k).into_owned();
        let w = &z + &z_prev;
        let lambda = adjoints.column(k);
        for (p, op) in ops.iter().enumerate() {
            // dh^k/dmu_p = -(dt/2) dA_sys w - dt db.
            let da_w = apply_da_sys(op, &w, n);
            let mut contribution = -(dt / 2.0) * lambda.dot(&da_w);
            contribution -= dt * lambda.rows(n, n).dot(&op.db_bottom);
            grad[p] += contribution;
        }
        z_prev = z;
    }
    Ok(grad)
}

/// Volume equality constraint `l (sum mu - sum mu0)` and its gradient.
pub fn volume_constraint(
    mu: &DVector<f64>,
    length: f64,
    mu0: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let value = length * (mu.sum() - mu0.sum());
    let grad = DVector::from_element(mu.len(), length);
    (value, grad)
}
