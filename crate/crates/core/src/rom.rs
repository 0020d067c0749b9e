//! POD-Galerkin reduced solver with residual-based acceptance, a frozen-
//! basis reduced adjoint gradient, and the relative trajectory-error
//! metric.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::hdm::{self, ChainProblem, HdmSolution};
use crate::Result;

/// One reduced solve: reduced and lifted trajectories plus the full
/// residual norms used by the acceptance gate.
pub struct RomSolution {
    /// Reduced coordinates, `n_r x n_t`.
    pub reduced_trajectory: DMatrix<f64>,
    /// `Phi a_r^k`, lying in the basis span by construction.
    pub lifted_trajectory: DMatrix<f64>,
    /// Compliance objective evaluated on the lifted trajectory.
    pub objective: f64,
    /// Per-step X-norms of the full residual at the lifted states.
    pub residual_norms: Vec<f64>,
    pub accepted: bool,
    pub wall_time: Duration,
}

/// Galerkin-reduced implicit-midpoint solve. The linear problem makes one
/// reduced factorization exact for every step (the Newton structure of
/// the full model collapses to a single iteration).
pub fn solve_rom(
    problem: &ChainProblem,
    mu: &DVector<f64>,
    phi: &DMatrix<f64>,
    ip_factor: &DMatrix<f64>,
) -> Result<RomSolution> {
    let started = Instant::now();
    let sys = problem.assemble(mu)?;
    let (s_minus, s_plus) = hdm::step_matrices(problem, &sys);
    let n_r = phi.ncols();
    let n_t = problem.n_t;

    let s_minus_phi = &s_minus * phi;
    let s_plus_phi = &s_plus * phi;
    let reduced_minus = phi.transpose() * &s_minus_phi;
    let reduced_plus = phi.transpose() * &s_plus_phi;
    let reduced_b = phi.transpose() * &sys.b;
    let lu = reduced_minus.lu();
    if !lu.is_invertible() {
        return Err(Error::DegenerateBasis);
    }

    let mut reduced_trajectory = DMatrix::zeros(n_r, n_t);
    let mut lifted_trajectory = DMatrix::zeros(problem.n_x(), n_t);
    let mut residual_norms = Vec::with_capacity(n_t);
    // Rest start: a_r^0 = Phiᵀ E z^0 = 0.
    let mut a_prev = DVector::zeros(n_r);
    for k in 0..n_t {
        let rhs = &reduced_plus * &a_prev + &reduced_b * problem.dt;
        let a = lu.solve(&rhs).ok_or(Error::DegenerateBasis)?;
        let lifted = phi * &a;
        let residual = &s_minus_phi * &a - &s_plus_phi * &a_prev - &sys.b * problem.dt;
        residual_norms.push((ip_factor * residual).norm());
        reduced_trajectory.set_column(k, &a);
        lifted_trajectory.set_column(k, &lifted);
        a_prev = a;
    }

    let objective = hdm::objective(&lifted_trajectory, &problem.load(), problem.dt);
    Ok(RomSolution {
        reduced_trajectory,
        lifted_trajectory,
        objective,
        residual_norms,
        accepted: false,
        wall_time: started.elapsed(),
    })
}

/// Residual metric `max_k |r^k|_X / n_x` of a reduced solution.
pub fn residual_metric(rom: &RomSolution, n_x: usize) -> f64 {
    rom.residual_norms.iter().cloned().fold(0.0_f64, f64::max) / n_x as f64
}

/// Acceptance gate: the solution passes when the residual metric is at or
/// below `eps_r` (inclusive).
pub fn residual_acceptance(rom: &RomSolution, eps_r: f64, n_x: usize) -> bool {
    residual_metric(rom, n_x) <= eps_r
}

/// Adjoint gradient of the compliance objective through the reduced
/// recursion, with the basis treated as parameter-independent.
pub fn rom_adjoint_gradient(
    problem: &ChainProblem,
    mu: &DVector<f64>,
    phi: &DMatrix<f64>,
    rom: &RomSolution,
) -> Result<DVector<f64>> {
    let sys = problem.assemble(mu)?;
    let (s_minus, s_plus) = hdm::step_matrices(problem, &sys);
    let reduced_minus = phi.transpose() * (&s_minus * phi);
    let reduced_plus = phi.transpose() * (&s_plus * phi);
    let lu_t = reduced_minus.transpose().lu();
    let reduced_plus_t = reduced_plus.transpose();

    let n = problem.n_e;
    let n_t = problem.n_t;
    let dt = problem.dt;
    let load = problem.load();
    let mut load_full = DVector::zeros(problem.n_x());
    load_full.rows_mut(0, n).copy_from(&load);
    let reduced_load = phi.transpose() * &load_full;

    // Reduced adjoint recursion, mirroring the full-model trapezoid
    // weights on the objective.
    let n_r = phi.ncols();
    let mut adjoints = DMatrix::zeros(n_r, n_t);
    let mut lambda_next = DVector::zeros(n_r);
    for k in (0..n_t).rev() {
        let w_k = if k + 1 == n_t { dt / 2.0 } else { dt };
        let rhs = &reduced_plus_t * &lambda_next - &reduced_load * w_k;
        let lambda = lu_t.solve(&rhs).ok_or(Error::DegenerateBasis)?;
        adjoints.set_column(k, &lambda);
        lambda_next = lambda;
    }

    let ops = hdm::param_derivative_ops(problem, mu, &sys);
    let mut grad = DVector::zeros(n);
    let mut z_prev = DVector::zeros(problem.n_x());
    for k in 0..n_t {
        let z = rom.lifted_trajectory.column(k).into_owned();
        let w = &z + &z_prev;
        // Lift the reduced adjoint once per step.
        let lambda_full = phi * adjoints.column(k);
        for (p, op) in ops.iter().enumerate() {
            let da_w = hdm::apply_da_sys(op, &w, n);
            let mut contribution = -(dt / 2.0) * lambda_full.dot(&da_w);
            contribution -= dt * lambda_full.rows(n, n).dot(&op.db_bottom);
            grad[p] += contribution;
        }
        z_prev = z;
    }
    Ok(grad)
}

/// Relative trajectory error in the time-integrated X-norm:
/// `sqrt(sum_k w^k |y^k - y_r^k|_X^2) / sqrt(sum_k w^k |y^k|_X^2)`.
pub fn relative_error(
    hdm: &HdmSolution,
    rom: &RomSolution,
    time_weights: &DVector<f64>,
    ip_factor: &DMatrix<f64>,
) -> Result<f64> {
    relative_trajectory_error(
        &hdm.trajectory,
        &rom.lifted_trajectory,
        time_weights,
        ip_factor,
    )
}

/// [`relative_error`] on raw trajectory matrices.
pub fn relative_trajectory_error(
    reference: &DMatrix<f64>,
    approximation: &DMatrix<f64>,
    time_weights: &DVector<f64>,
    ip_factor: &DMatrix<f64>,
) -> Result<f64> {
    if reference.shape() != approximation.shape() || reference.ncols() != time_weights.len() {
        return Err(Error::DimensionMismatch {
            context: "relative_error trajectory shape",
            expected: reference.ncols(),
            got: approximation.ncols(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..reference.ncols() {
        let diff = reference.column(k) - approximation.column(k);
        num += time_weights[k] * (ip_factor * diff).norm_squared();
        den += time_weights[k] * (ip_factor * reference.column(k)).norm_squared();
    }
    if den == 0.0 {
        return Err(Error::ZeroReferenceNorm);
    }
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{inner_product_factor, time_weights, SnapshotStore};
    use crate::svd;
    use crate::weighting::WeightAssignment;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn small_problem() -> ChainProblem {
        ChainProblem {
            n_e: 6,
            n_t: 60,
            ..ChainProblem::default()
        }
    }

    /// Full E-orthonormal basis: phi = F^{-1} is square with phiᵀE phi = I.
    fn full_basis(f: &DMatrix<f64>) -> DMatrix<f64> {
        f.solve_upper_triangular(&DMatrix::identity(f.nrows(), f.nrows()))
            .unwrap()
    }

    #[test]
    fn full_rank_basis_reproduces_hdm() {
        let problem = small_problem();
        let e = problem.default_e_matrix();
        let f = inner_product_factor(&e).unwrap();
        let mu = problem.mu0();
        let hdm_sol = hdm::solve_hdm(&problem, &mu, &f).unwrap();
        let phi = full_basis(&f);
        let rom = solve_rom(&problem, &mu, &phi, &f).unwrap();
        let rel = (&rom.lifted_trajectory - &hdm_sol.trajectory).norm() / hdm_sol.trajectory.norm();
        assert!(rel <= 1e-10, "full-rank reproduction error {rel}");
        assert!((rom.objective - hdm_sol.objective).abs() / hdm_sol.objective.abs() <= 1e-10);
    }

    #[test]
    fn training_point_self_projection_has_tiny_residual() {
        let problem = small_problem();
        let e = problem.default_e_matrix();
        let f = inner_product_factor(&e).unwrap();
        let mu = problem.mu0();
        let hdm_sol = hdm::solve_hdm(&problem, &mu, &f).unwrap();

        let mut store = SnapshotStore::new(
            problem.n_p(),
            time_weights(problem.n_t, problem.dt).unwrap(),
            f.clone(),
            1e-12,
            1e-2,
        );
        store
            .append_snapshot(mu.clone(), hdm_sol.trajectory.clone(), None)
            .unwrap();
        let rank = store.running_svd().rank();
        let weights = WeightAssignment {
            weights: vec![1.0],
            active_set: vec![0],
            dir_derivs: vec![0.0],
        };
        let basis = crate::basis::build_basis(&store, &weights, rank).unwrap();
        let rom = solve_rom(&problem, &mu, &basis.phi, &f).unwrap();
        let metric = residual_metric(&rom, problem.n_x());
        assert!(metric <= 1e-10, "training-point residual metric {metric}");
    }

    #[test]
    fn monotone_residual_with_basis_enrichment() {
        let problem = small_problem();
        let e = problem.default_e_matrix();
        let f = inner_product_factor(&e).unwrap();
        let mu = problem.mu0();
        let hdm_sol = hdm::solve_hdm(&problem, &mu, &f).unwrap();
        let mut store = SnapshotStore::new(
            problem.n_p(),
            time_weights(problem.n_t, problem.dt).unwrap(),
            f.clone(),
            1e-12,
            1e-2,
        );
        store
            .append_snapshot(mu.clone(), hdm_sol.trajectory.clone(), None)
            .unwrap();
        let rank = store.running_svd().rank();
        let weights = WeightAssignment {
            weights: vec![1.0],
            active_set: vec![0],
            dir_derivs: vec![0.0],
        };
        let mut previous = f64::INFINITY;
        let mut n_r = 2;
        while n_r <= rank {
            let basis = crate::basis::build_basis(&store, &weights, n_r).unwrap();
            let rom = solve_rom(&problem, &mu, &basis.phi, &f).unwrap();
            let metric = residual_metric(&rom, problem.n_x());
            assert!(
                metric <= previous * (1.0 + 1e-9),
                "metric grew from {previous} to {metric} at n_r = {n_r}"
            );
            previous = metric;
            n_r += 2;
        }
    }

    #[test]
    fn lifted_trajectory_stays_in_span() {
        let problem = small_problem();
        let e = problem.default_e_matrix();
        let f = inner_product_factor(&e).unwrap();
        let mu = problem.mu0();
        // One-column E-orthonormal basis from a random direction.
        let mut rng = StdRng::seed_from_u64(163);
        let raw = DVector::from_fn(problem.n_x(), |_, _| rng.random_range(-1.0_f64..1.0));
        let psi = &raw / raw.norm();
        let phi = f
            .solve_upper_triangular(&DMatrix::from_columns(&[psi]))
            .unwrap();
        let rom = solve_rom(&problem, &mu, &phi, &f).unwrap();
        // Projector onto span(phi) in the E inner product.
        let projector = &phi * (phi.transpose() * &e);
        let residual = &rom.lifted_trajectory - &projector * &rom.lifted_trajectory;
        assert!(residual.norm() <= 1e-12 * rom.lifted_trajectory.norm().max(1.0));
    }

    #[test]
    fn galerkin_residual_orthogonality() {
        let problem = small_problem();
        let e = problem.default_e_matrix();
        let f = inner_product_factor(&e).unwrap();
        let mu = problem.mu0();
        let hdm_sol = hdm::solve_hdm(&problem, &mu, &f).unwrap();
        let weighted = {
            let mut store = SnapshotStore::new(
                problem.n_p(),
                time_weights(problem.n_t, problem.dt).unwrap(),
                f.clone(),
                1e-10,
                1e-2,
            );
            store
                .append_snapshot(mu.clone(), hdm_sol.trajectory.clone(), None)
                .unwrap();
            let weights = WeightAssignment {
                weights: vec![1.0],
                active_set: vec![0],
                dir_derivs: vec![0.0],
            };
            crate::basis::build_basis(&store, &weights, 4).unwrap()
        };
        let phi = weighted.phi;
        let rom = solve_rom(&problem, &mu, &phi, &f).unwrap();

        let sys = problem.assemble(&mu).unwrap();
        let (s_minus, s_plus) = hdm::step_matrices(&problem, &sys);
        let mut a_prev = DVector::zeros(phi.ncols());
        let scale = sys.b.norm() * problem.dt;
        for k in 0..problem.n_t {
            let a = rom.reduced_trajectory.column(k).into_owned();
            let residual =
                &s_minus * (&phi * &a) - &s_plus * (&phi * &a_prev) - &sys.b * problem.dt;
            let projected = phi.transpose() * residual;
            assert!(
                projected.norm() <= 1e-10 * scale.max(1.0),
                "step {k}: projected residual {}",
                projected.norm()
            );
            a_prev = a;
        }
    }

    #[test]
    fn duplicate_basis_column_is_degenerate() {
        let problem = small_problem();
        let f = DMatrix::identity(problem.n_x(), problem.n_x());
        let mut phi = DMatrix::zeros(problem.n_x(), 2);
        phi[(0, 0)] = 1.0;
        phi[(0, 1)] = 1.0;
        assert!(matches!(
            solve_rom(&problem, &problem.mu0(), &phi, &f),
            Err(Error::DegenerateBasis)
        ));
    }

    #[test]
    fn acceptance_gate_is_inclusive() {
        let rom = |norms: Vec<f64>| RomSolution {
            reduced_trajectory: DMatrix::zeros(1, norms.len()),
            lifted_trajectory: DMatrix::zeros(4, norms.len()),
            objective: 0.0,
            residual_norms: norms,
            accepted: false,
            wall_time: Duration::ZERO,
        };
        let n_x = 4;
        let eps = 0.1;
        assert!(residual_acceptance(&rom(vec![0.0, 0.0]), eps, n_x));
        assert!(residual_acceptance(&rom(vec![0.2, eps * n_x as f64]), eps, n_x));
        assert!(!residual_acceptance(
            &rom(vec![1.01 * eps * n_x as f64]),
            eps,
            n_x
        ));
    }

    #[test]
    fn rom_gradient_with_exact_basis_matches_hdm_adjoint() {
        let problem = small_problem();
        let e = problem.default_e_matrix();
        let f = inner_product_factor(&e).unwrap();
        let mu = DVector::from_fn(problem.n_e, |i, _| 0.07 + 0.01 * (i as f64).sin());
        let hdm_sol = hdm::solve_hdm(&problem, &mu, &f).unwrap();
        let hdm_grad = hdm::adjoint_gradient(&problem, &mu, &hdm_sol).unwrap();
        let phi = full_basis(&f);
        let rom = solve_rom(&problem, &mu, &phi, &f).unwrap();
        let rom_grad = rom_adjoint_gradient(&problem, &mu, &phi, &rom).unwrap();
        let rel = (&rom_grad - &hdm_grad).norm() / hdm_grad.norm();
        assert!(rel <= 1e-8, "exact-basis gradient rel err {rel}");
    }

    #[test]
    fn rom_gradient_matches_frozen_basis_finite_difference() {
        let problem = small_problem();
        let e = problem.default_e_matrix();
        let f = inner_product_factor(&e).unwrap();
        let mu = problem.mu0();
        let hdm_sol = hdm::solve_hdm(&problem, &mu, &f).unwrap();
        let mut store = SnapshotStore::new(
            problem.n_p(),
            time_weights(problem.n_t, problem.dt).unwrap(),
            f.clone(),
            1e-10,
            1e-2,
        );
        store
            .append_snapshot(mu.clone(), hdm_sol.trajectory.clone(), None)
            .unwrap();
        let weights = WeightAssignment {
            weights: vec![1.0],
            active_set: vec![0],
            dir_derivs: vec![0.0],
        };
        let basis = crate::basis::build_basis(&store, &weights, 6).unwrap();
        let phi = basis.phi;
        let rom = solve_rom(&problem, &mu, &phi, &f).unwrap();
        let grad = rom_adjoint_gradient(&problem, &mu, &phi, &rom).unwrap();
        for p in [0, 3] {
            let h = 1e-6 * (1.0 + mu[p].abs());
            let mut mu_plus = mu.clone();
            mu_plus[p] += h;
            let mut mu_minus = mu.clone();
            mu_minus[p] -= h;
            let j_plus = solve_rom(&problem, &mu_plus, &phi, &f).unwrap().objective;
            let j_minus = solve_rom(&problem, &mu_minus, &phi, &f).unwrap().objective;
            let fd = (j_plus - j_minus) / (2.0 * h);
            let rel = (grad[p] - fd).abs() / fd.abs();
            assert!(rel <= 1e-4, "parameter {p} rel err {rel}");
        }
    }

    #[test]
    fn zero_forcing_gives_zero_rom_gradient() {
        let problem = ChainProblem {
            force: 0.0,
            ..small_problem()
        };
        let f = DMatrix::identity(problem.n_x(), problem.n_x());
        let phi = DMatrix::identity(problem.n_x(), problem.n_x());
        let rom = solve_rom(&problem, &problem.mu0(), &phi, &f).unwrap();
        let grad = rom_adjoint_gradient(&problem, &problem.mu0(), &phi, &rom).unwrap();
        assert_eq!(grad.norm(), 0.0);
    }

    #[test]
    fn relative_error_closed_forms_and_oracle() {
        let problem = small_problem();
        let f = DMatrix::identity(problem.n_x(), problem.n_x());
        let tw = time_weights(problem.n_t, problem.dt).unwrap();
        let mu = problem.mu0();
        let hdm_sol = hdm::solve_hdm(&problem, &mu, &f).unwrap();

        let same = relative_trajectory_error(&hdm_sol.trajectory, &hdm_sol.trajectory, &tw, &f)
            .unwrap();
        assert_eq!(same, 0.0);

        let zero = DMatrix::zeros(problem.n_x(), problem.n_t);
        let unit = relative_trajectory_error(&hdm_sol.trajectory, &zero, &tw, &f).unwrap();
        assert!((unit - 1.0).abs() < 1e-14);

        assert!(matches!(
            relative_trajectory_error(&zero, &hdm_sol.trajectory, &tw, &f),
            Err(Error::ZeroReferenceNorm)
        ));

        // Naive double-loop evaluation as oracle.
        let mut rng = StdRng::seed_from_u64(167);
        let approx = DMatrix::from_fn(problem.n_x(), problem.n_t, |i, k| {
            hdm_sol.trajectory[(i, k)] + 0.01 * rng.random_range(-1.0..1.0)
        });
        let got = relative_trajectory_error(&hdm_sol.trajectory, &approx, &tw, &f).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..problem.n_t {
            for i in 0..problem.n_x() {
                let d = hdm_sol.trajectory[(i, k)] - approx[(i, k)];
                num += tw[k] * d * d;
                den += tw[k] * hdm_sol.trajectory[(i, k)] * hdm_sol.trajectory[(i, k)];
            }
        }
        let expected = (num / den).sqrt();
        assert!((got - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn rom_exactness_on_identity_e() {
        // Identity inner product, square orthonormal basis: the reduced
        // model is an exact change of coordinates.
        let problem = small_problem();
        let f = DMatrix::identity(problem.n_x(), problem.n_x());
        let mu = problem.mu0();
        let hdm_sol = hdm::solve_hdm(&problem, &mu, &f).unwrap();
        let mut rng = StdRng::seed_from_u64(173);
        let raw = DMatrix::from_fn(problem.n_x(), problem.n_x(), |_, _| {
            rng.random_range(-1.0..1.0)
        });
        let phi = raw.qr().q();
        let rom = solve_rom(&problem, &mu, &phi, &f).unwrap();
        let rel = (&rom.lifted_trajectory - &hdm_sol.trajectory).norm() / hdm_sol.trajectory.norm();
        assert!(rel <= 1e-10);
        let metric = residual_metric(&rom, problem.n_x());
        assert!(metric <= 1e-10);
        let _ = svd::truncated_svd(&rom.lifted_trajectory, 1e-8).unwrap();
    }
}
