//! Thin truncated SVD primitives: direct decomposition with an absolute
//! truncation threshold, incremental column-block append with an
//! orthonormality correction loop, and diagonal-weight recomputation.
//!
//! The incremental update appends the thin SVD of a new column block to a
//! running factorization without refactorizing from scratch; the weighted
//! recomputation rescales the factorized columns by a diagonal weight
//! matrix at a cost independent of the row count beyond a single tall
//! product.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::Result;

/// Iterations allowed for the orthonormality correction loop before the
/// update is declared numerically degenerate.
pub const CORRECTION_ITERATION_CAP: usize = 10;

/// A thin SVD triple `U diag(s) Vᵀ` of a tall-or-wide dense matrix, with
/// everything below an absolute singular-value threshold discarded.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    /// Left singular vectors, `n_rows x rank`, columns near-orthonormal.
    pub left: DMatrix<f64>,
    /// Retained singular values, strictly positive and non-increasing.
    pub singular_values: DVector<f64>,
    /// Right singular vectors, `n_cols x rank`, columns near-orthonormal.
    pub right: DMatrix<f64>,
}

impl TruncatedSvd {
    /// Rank-zero factorization of an `n_rows x n_cols` zero matrix.
    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        Self {
            left: DMatrix::zeros(n_rows, 0),
            singular_values: DVector::zeros(0),
            right: DMatrix::zeros(n_cols, 0),
        }
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn n_rows(&self) -> usize {
        self.left.nrows()
    }

    /// Column count of the factorized source matrix.
    pub fn n_cols(&self) -> usize {
        self.right.nrows()
    }

    /// Dense reconstruction `U diag(s) Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.left.clone();
        for (i, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.singular_values[i];
        }
        scaled * self.right.transpose()
    }

    /// Max-norm deviation of `UᵀU` from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = self.left.transpose() * &self.left;
        let mut defect = 0.0_f64;
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                defect = defect.max((gram[(i, j)] - target).abs());
            }
        }
        defect
    }

    /// Deviation of the left-vector column norms from one, as used by the
    /// correction-loop trigger (diagonal of `UᵀU` only).
    fn column_norm_defect(&self) -> f64 {
        self.left
            .column_iter()
            .map(|c| (c.norm_squared() - 1.0).abs())
            .fold(0.0_f64, f64::max)
    }

    fn truncated(
        left: DMatrix<f64>,
        singular_values: DVector<f64>,
        right: DMatrix<f64>,
        eps_svd: f64,
    ) -> Self {
        let rank = singular_values.iter().take_while(|&&s| s > eps_svd).count();
        Self {
            left: left.columns(0, rank).into_owned(),
            singular_values: singular_values.rows(0, rank).into_owned(),
            right: right.columns(0, rank).into_owned(),
        }
    }
}

fn thin_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    (u, svd.singular_values, v_t.transpose())
}

/// Thin SVD of `m`, keeping only components with singular value strictly
/// above the absolute threshold `eps_svd`.
pub fn truncated_svd(m: &DMatrix<f64>, eps_svd: f64) -> Result<TruncatedSvd> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "truncated_svd input",
        });
    }
    if !(eps_svd >= 0.0) {
        return Err(Error::Config(format!(
            "eps_svd must be non-negative, got {eps_svd}"
        )));
    }
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(TruncatedSvd::empty(m.nrows(), m.ncols()));
    }
    let (u, s, v) = thin_svd(m);
    Ok(TruncatedSvd::truncated(u, s, v, eps_svd))
}

/// Outcome counters for one incremental append.
#[derive(Debug, Clone, Copy, Default)]
pub struct AppendStats {
    /// Correction-loop iterations spent restoring left-vector norms.
    pub correction_iterations: usize,
}

/// Truncated SVD of `[X Y]` from the running factorization of `X` and the
/// thin SVD of the appended block `Y`.
///
/// `raw_columns` must hold `[X Y]` explicitly; the correction loop reads
/// it whenever the left-vector norms drift beyond `eps_orth`.
pub fn incremental_append(
    current: &TruncatedSvd,
    new_block_svd: &TruncatedSvd,
    raw_columns: &DMatrix<f64>,
    eps_orth: f64,
    eps_svd: f64,
) -> Result<TruncatedSvd> {
    incremental_append_with_stats(current, new_block_svd, raw_columns, eps_orth, eps_svd)
        .map(|(svd, _)| svd)
}

/// [`incremental_append`] variant that also reports correction-loop usage.
pub fn incremental_append_with_stats(
    current: &TruncatedSvd,
    new_block_svd: &TruncatedSvd,
    raw_columns: &DMatrix<f64>,
    eps_orth: f64,
    eps_svd: f64,
) -> Result<(TruncatedSvd, AppendStats)> {
    let n_rows = current.n_rows();
    if new_block_svd.n_rows() != n_rows {
        return Err(Error::DimensionMismatch {
            context: "incremental_append block row count",
            expected: n_rows,
            got: new_block_svd.n_rows(),
        });
    }
    if raw_columns.nrows() != n_rows {
        return Err(Error::DimensionMismatch {
            context: "incremental_append raw column row count",
            expected: n_rows,
            got: raw_columns.nrows(),
        });
    }
    let m_x = current.n_cols();
    let m_y = new_block_svd.n_cols();
    if raw_columns.ncols() != m_x + m_y {
        return Err(Error::DimensionMismatch {
            context: "incremental_append raw column count",
            expected: m_x + m_y,
            got: raw_columns.ncols(),
        });
    }

    let r_x = current.rank();
    let r_y = new_block_svd.rank();

    // Rank-zero blocks only pad the right factor with zero rows.
    if r_y == 0 {
        let mut right = DMatrix::zeros(m_x + m_y, r_x);
        right.view_mut((0, 0), (m_x, r_x)).copy_from(&current.right);
        let out = TruncatedSvd::truncated(
            current.left.clone(),
            current.singular_values.clone(),
            right,
            eps_svd,
        );
        return Ok((out, AppendStats::default()));
    }
    if r_x == 0 {
        let mut right = DMatrix::zeros(m_x + m_y, r_y);
        right
            .view_mut((m_x, 0), (m_y, r_y))
            .copy_from(&new_block_svd.right);
        let out = TruncatedSvd::truncated(
            new_block_svd.left.clone(),
            new_block_svd.singular_values.clone(),
            right,
            eps_svd,
        );
        return Ok((out, AppendStats::default()));
    }

    // Orthogonal complement of U_Y with respect to U_X, then its QR.
    let proj = current.left.transpose() * &new_block_svd.left;
    let complement = &new_block_svd.left - &current.left * &proj;
    let qr = complement.qr();
    let q = qr.q();
    let r_mat = qr.r();

    // G = [ S_X  U_Xᵀ U_Y S_Y ]
    //     [  0       R S_Y    ]
    let mut g = DMatrix::zeros(r_x + r_y, r_x + r_y);
    for i in 0..r_x {
        g[(i, i)] = current.singular_values[i];
    }
    let mut proj_scaled = proj.clone();
    let mut r_scaled = r_mat.clone();
    for j in 0..r_y {
        let s = new_block_svd.singular_values[j];
        proj_scaled.column_mut(j).scale_mut(s);
        r_scaled.column_mut(j).scale_mut(s);
    }
    g.view_mut((0, r_x), (r_x, r_y)).copy_from(&proj_scaled);
    g.view_mut((r_x, r_x), (r_y, r_y)).copy_from(&r_scaled);

    let (u_g, s_g, v_g) = thin_svd(&g);

    let mut combined_left = DMatrix::zeros(n_rows, r_x + r_y);
    combined_left
        .view_mut((0, 0), (n_rows, r_x))
        .copy_from(&current.left);
    combined_left
        .view_mut((0, r_x), (n_rows, r_y))
        .copy_from(&q);
    let left = combined_left * u_g;

    let mut combined_right = DMatrix::zeros(m_x + m_y, r_x + r_y);
    combined_right
        .view_mut((0, 0), (m_x, r_x))
        .copy_from(&current.right);
    combined_right
        .view_mut((m_x, r_x), (m_y, r_y))
        .copy_from(&new_block_svd.right);
    let right = combined_right * v_g;

    let mut result = TruncatedSvd {
        left,
        singular_values: s_g,
        right,
    };

    // Correction loop: refactorize through the raw columns until the
    // left-vector norms sit within eps_orth of one.
    let mut stats = AppendStats::default();
    while result.column_norm_defect() > eps_orth {
        if stats.correction_iterations >= CORRECTION_ITERATION_CAP {
            return Err(Error::CorrectionLoopStalled {
                iterations: stats.correction_iterations,
            });
        }
        stats.correction_iterations += 1;
        let projected = raw_columns * &result.right;
        let qr = projected.qr();
        let q_tilde = qr.q();
        let small = q_tilde.transpose() * raw_columns;
        let (u_hat, s_hat, v_hat) = thin_svd(&small);
        result = TruncatedSvd {
            left: q_tilde * u_hat,
            singular_values: s_hat,
            right: v_hat,
        };
    }

    let out = TruncatedSvd::truncated(
        result.left,
        result.singular_values,
        result.right,
        eps_svd,
    );
    Ok((out, stats))
}

/// Truncated SVD of `X W^{1/2}` from the factorization of `X`, where
/// `W^{1/2} = diag(weight_sqrt_diag)` restricted to its nonzero columns.
///
/// Zero-weight columns are dropped before the small SVD, so the output
/// factorizes the `n_rows x n_active` column-selected matrix.
pub fn weighted_svd(current: &TruncatedSvd, weight_sqrt_diag: &DVector<f64>) -> Result<TruncatedSvd> {
    if weight_sqrt_diag.len() != current.n_cols() {
        return Err(Error::DimensionMismatch {
            context: "weighted_svd weight length",
            expected: current.n_cols(),
            got: weight_sqrt_diag.len(),
        });
    }
    for (i, &w) in weight_sqrt_diag.iter().enumerate() {
        if !(w >= 0.0) {
            return Err(Error::NegativeWeight { index: i, value: w });
        }
    }
    let active: Vec<usize> = weight_sqrt_diag
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, _)| i)
        .collect();
    if active.is_empty() {
        return Err(Error::AllWeightsZero);
    }

    let r = current.rank();
    if r == 0 {
        return Ok(TruncatedSvd::empty(current.n_rows(), active.len()));
    }

    // D = S_X V_Xᵀ W^{1/2} on the active columns only.
    let mut d = DMatrix::zeros(r, active.len());
    for (j, &col) in active.iter().enumerate() {
        let w = weight_sqrt_diag[col];
        for i in 0..r {
            d[(i, j)] = current.singular_values[i] * current.right[(col, i)] * w;
        }
    }

    let (u_d, s_d, v_d) = thin_svd(&d);
    let left = &current.left * u_d;
    Ok(TruncatedSvd::truncated(left, s_d, v_d, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Largest principal angle between the spans of two orthonormal column
    /// sets, computed through the projection residual so small angles stay
    /// accurate.
    fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        assert_eq!(a.ncols(), b.ncols());
        let residual = b - a * (a.transpose() * b);
        let sines = residual.svd(false, false).singular_values;
        sines.iter().fold(0.0_f64, |m, &s| m.max(s.clamp(-1.0, 1.0).asin()))
    }

    /// Independent reference decomposition via the symmetric eigenproblem
    /// of MᵀM (or MMᵀ when wide), avoiding the SVD code path entirely.
    fn eig_reference_svd(m: &DMatrix<f64>, eps: f64) -> (DVector<f64>, DMatrix<f64>) {
        let gram = if m.nrows() >= m.ncols() {
            m.transpose() * m
        } else {
            m * m.transpose()
        };
        let eig = nalgebra::SymmetricEigen::new(gram);
        let mut pairs: Vec<(f64, usize)> = eig
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(i, &l)| (l.max(0.0).sqrt(), i))
            .collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let kept: Vec<(f64, usize)> = pairs.into_iter().filter(|(s, _)| *s > eps).collect();
        let svals = DVector::from_iterator(kept.len(), kept.iter().map(|(s, _)| *s));
        let mut left = DMatrix::zeros(m.nrows(), kept.len());
        for (j, (s, idx)) in kept.iter().enumerate() {
            if m.nrows() >= m.ncols() {
                let u = m * eig.eigenvectors.column(*idx) / *s;
                left.set_column(j, &u);
            } else {
                left.set_column(j, &eig.eigenvectors.column(*idx));
            }
        }
        (svals, left)
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let m = DMatrix::zeros(3, 2);
        let svd = truncated_svd(&m, 1e-8).unwrap();
        assert_eq!(svd.rank(), 0);
        assert_eq!(svd.n_rows(), 3);
        assert_eq!(svd.n_cols(), 2);
    }

    #[test]
    fn identity_keeps_unit_singular_values() {
        let m = DMatrix::identity(3, 3);
        let svd = truncated_svd(&m, 1e-8).unwrap();
        assert_eq!(svd.rank(), 3);
        for &s in svd.singular_values.iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 0)] = f64::NAN;
        assert!(matches!(
            truncated_svd(&m, 1e-8),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn gaussian_matrix_matches_eigen_reference() {
        let mut rng = StdRng::seed_from_u64(17);
        // Box-Muller keeps the test free of extra dependencies.
        let mut gauss = || {
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let m = DMatrix::from_fn(50, 12, |_, _| gauss());
        let svd = truncated_svd(&m, 1e-8).unwrap();

        let err = (svd.reconstruct() - &m).norm() / m.norm();
        assert!(err <= 1e-10, "reconstruction error {err}");

        let (ref_svals, ref_left) = eig_reference_svd(&m, 1e-8);
        assert_eq!(svd.rank(), ref_svals.len());
        for i in 0..svd.rank() {
            let rel = (svd.singular_values[i] - ref_svals[i]).abs() / ref_svals[i];
            assert!(rel < 1e-9, "singular value {i} rel err {rel}");
        }
        let angle = max_principal_angle(&svd.left, &ref_left);
        assert!(angle < 1e-6, "principal angle {angle}");
    }

    #[test]
    fn truncation_is_monotone_in_eps() {
        let mut rng = StdRng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 30, 10);
        let mut prev_rank = usize::MAX;
        for eps in [0.0, 1e-8, 1e-2, 1e-1, 1.0, 10.0] {
            let rank = truncated_svd(&m, eps).unwrap().rank();
            assert!(rank <= prev_rank);
            prev_rank = rank;
        }
    }

    #[test]
    fn append_orthogonal_unit_columns() {
        let mut x = DMatrix::zeros(4, 1);
        x[(0, 0)] = 1.0;
        let mut y = DMatrix::zeros(4, 1);
        y[(1, 0)] = 1.0;
        let current = truncated_svd(&x, 1e-8).unwrap();
        let block = truncated_svd(&y, 1e-8).unwrap();
        let mut raw = DMatrix::zeros(4, 2);
        raw.set_column(0, &x.column(0));
        raw.set_column(1, &y.column(0));
        let merged = incremental_append(&current, &block, &raw, 1e-2, 1e-8).unwrap();
        assert_eq!(merged.rank(), 2);
        for &s in merged.singular_values.iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let direct = truncated_svd(&raw, 1e-8).unwrap();
        let angle = max_principal_angle(&merged.left, &direct.left);
        assert!(angle < 1e-10);
    }

    #[test]
    fn appending_duplicate_column_keeps_rank() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 12, 4);
        let y = x.column(1).into_owned();
        let current = truncated_svd(&x, 1e-8).unwrap();
        let block = truncated_svd(&DMatrix::from_columns(&[y.clone()]), 1e-8).unwrap();
        let mut raw = DMatrix::zeros(12, 5);
        raw.view_mut((0, 0), (12, 4)).copy_from(&x);
        raw.set_column(4, &y);
        let merged = incremental_append(&current, &block, &raw, 1e-2, 1e-8).unwrap();
        assert_eq!(merged.rank(), current.rank());
        assert!(merged.singular_values[0] > current.singular_values[0]);
        let err = (merged.reconstruct() - &raw).norm() / raw.norm();
        assert!(err < 1e-10, "reconstruction error {err}");
    }

    #[test]
    fn append_matches_direct_svd() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = random_matrix(&mut rng, 200, 100);
        let y = random_matrix(&mut rng, 200, 20);
        let current = truncated_svd(&x, 1e-8).unwrap();
        let block = truncated_svd(&y, 1e-8).unwrap();
        let mut raw = DMatrix::zeros(200, 120);
        raw.view_mut((0, 0), (200, 100)).copy_from(&x);
        raw.view_mut((0, 100), (200, 20)).copy_from(&y);
        let merged = incremental_append(&current, &block, &raw, 1e-2, 1e-8).unwrap();
        let direct = truncated_svd(&raw, 1e-8).unwrap();
        assert_eq!(merged.rank(), direct.rank());
        for i in 0..merged.rank() {
            let rel = (merged.singular_values[i] - direct.singular_values[i]).abs()
                / direct.singular_values[i];
            assert!(rel <= 1e-8, "singular value {i} rel err {rel}");
        }
        let angle = max_principal_angle(&merged.left, &direct.left);
        assert!(angle <= 1e-6, "principal angle {angle}");
    }

    #[test]
    fn rank_zero_block_append_pads_right_factor() {
        let mut rng = StdRng::seed_from_u64(23);
        let x = random_matrix(&mut rng, 10, 3);
        let current = truncated_svd(&x, 1e-8).unwrap();
        let zero = DMatrix::zeros(10, 2);
        let block = truncated_svd(&zero, 1e-8).unwrap();
        let mut raw = DMatrix::zeros(10, 5);
        raw.view_mut((0, 0), (10, 3)).copy_from(&x);
        let merged = incremental_append(&current, &block, &raw, 1e-2, 1e-8).unwrap();
        assert_eq!(merged.rank(), current.rank());
        assert_eq!(merged.n_cols(), 5);
        let err = (merged.reconstruct() - &raw).norm() / raw.norm();
        assert!(err < 1e-12);
    }

    #[test]
    fn row_mismatch_is_input_error() {
        let current = TruncatedSvd::empty(4, 0);
        let block = TruncatedSvd::empty(5, 2);
        let raw = DMatrix::zeros(4, 2);
        assert!(matches!(
            incremental_append(&current, &block, &raw, 1e-2, 1e-8),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn unit_weights_leave_singular_values_unchanged() {
        let mut rng = StdRng::seed_from_u64(7);
        let m = random_matrix(&mut rng, 40, 15);
        let svd = truncated_svd(&m, 1e-8).unwrap();
        let weights = DVector::from_element(15, 1.0);
        let weighted = weighted_svd(&svd, &weights).unwrap();
        assert_eq!(weighted.rank(), svd.rank());
        for i in 0..svd.rank() {
            let rel = (weighted.singular_values[i] - svd.singular_values[i]).abs()
                / svd.singular_values[i];
            assert!(rel < 1e-12);
        }
        let angle = max_principal_angle(&weighted.left, &svd.left);
        assert!(angle < 1e-8, "principal angle {angle}");
    }

    #[test]
    fn single_unit_weight_selects_one_column() {
        let mut rng = StdRng::seed_from_u64(9);
        let m = random_matrix(&mut rng, 20, 6);
        let svd = truncated_svd(&m, 1e-8).unwrap();
        let mut weights = DVector::zeros(6);
        weights[0] = 1.0;
        let weighted = weighted_svd(&svd, &weights).unwrap();
        assert_eq!(weighted.rank(), 1);
        let col_norm = m.column(0).norm();
        assert!((weighted.singular_values[0] - col_norm).abs() / col_norm < 1e-10);
    }

    #[test]
    fn random_weights_match_direct_svd() {
        let mut rng = StdRng::seed_from_u64(13);
        let m = random_matrix(&mut rng, 100, 40);
        let svd = truncated_svd(&m, 1e-8).unwrap();
        let weights = DVector::from_fn(40, |_, _| rng.random_range(0.0..1.0));
        let weighted = weighted_svd(&svd, &weights).unwrap();
        let mut scaled = m.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= weights[j];
        }
        let direct = truncated_svd(&scaled, 1e-12).unwrap();
        for i in 0..weighted.rank().min(direct.rank()) {
            let rel = (weighted.singular_values[i] - direct.singular_values[i]).abs()
                / direct.singular_values[i];
            assert!(rel <= 1e-8, "singular value {i} rel err {rel}");
        }
    }

    #[test]
    fn negative_and_all_zero_weights_rejected() {
        let m = DMatrix::identity(3, 3);
        let svd = truncated_svd(&m, 1e-8).unwrap();
        let mut weights = DVector::from_element(3, 1.0);
        weights[1] = -0.5;
        assert!(matches!(
            weighted_svd(&svd, &weights),
            Err(Error::NegativeWeight { index: 1, .. })
        ));
        let zeros = DVector::zeros(3);
        assert!(matches!(weighted_svd(&svd, &zeros), Err(Error::AllWeightsZero)));
    }

    #[test]
    fn orthonormality_survives_sequential_appends() {
        let mut rng = StdRng::seed_from_u64(29);
        let mut raw = random_matrix(&mut rng, 200, 10);
        let mut running = truncated_svd(&raw, 1e-8).unwrap();
        for _ in 0..50 {
            let block = random_matrix(&mut rng, 200, 10);
            let block_svd = truncated_svd(&block, 1e-8).unwrap();
            let mut grown = DMatrix::zeros(200, raw.ncols() + 10);
            grown.view_mut((0, 0), (200, raw.ncols())).copy_from(&raw);
            grown
                .view_mut((0, raw.ncols()), (200, 10))
                .copy_from(&block);
            raw = grown;
            running = incremental_append(&running, &block_svd, &raw, 1e-2, 1e-8).unwrap();
        }
        let defect = running.orthonormality_defect();
        assert!(defect <= 1e-8, "orthonormality defect {defect}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        /// Raising the truncation threshold can only shrink the rank.
        #[test]
        fn prop_truncation_monotone(seed in 0u64..1000, eps_lo in 0.0f64..0.5, gap in 0.0f64..2.0) {
            let mut rng = StdRng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, 12, 7);
            let lo = truncated_svd(&m, eps_lo).unwrap().rank();
            let hi = truncated_svd(&m, eps_lo + gap).unwrap().rank();
            proptest::prop_assert!(hi <= lo);
        }
    }
}
