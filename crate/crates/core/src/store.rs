//! Snapshot storage: parameter points, trajectory blocks, optional
//! parametric derivative tensors, time-integration weights, the
//! inner-product factor, and the running truncated SVD of the
//! time-weighted snapshot matrix `F A W_k^{1/2}`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::svd::{self, TruncatedSvd};
use crate::Result;

/// Two parameter points closer than this 2-norm gap count as the same
/// query location.
pub const POINT_MATCH_TOL: f64 = 1e-12;

/// Trapezoid-rule time-integration weights for `n_t` steps of size `dt`:
/// `dt/2` at both ends, `dt` in the interior.
pub fn time_weights(n_t: usize, dt: f64) -> Result<DVector<f64>> {
    if n_t < 2 {
        return Err(Error::TooFewTimeSteps(n_t));
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let mut w = DVector::from_element(n_t, dt);
    w[0] = dt / 2.0;
    w[n_t - 1] = dt / 2.0;
    Ok(w)
}

/// Factor `F` with `FᵀF = E` for a symmetric positive-definite `E`,
/// computed as the transposed Cholesky factor (upper triangular).
pub fn inner_product_factor(e: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if e.nrows() != e.ncols() {
        return Err(Error::DimensionMismatch {
            context: "inner_product_factor matrix shape",
            expected: e.nrows(),
            got: e.ncols(),
        });
    }
    let scale = e.iter().fold(0.0_f64, |m, &x| m.max(x.abs())).max(1.0);
    for i in 0..e.nrows() {
        for j in (i + 1)..e.ncols() {
            if (e[(i, j)] - e[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::NotSpd);
            }
        }
    }
    let chol = nalgebra::Cholesky::new(e.clone()).ok_or(Error::NotSpd)?;
    Ok(chol.l().transpose())
}

#[derive(Serialize, Deserialize)]
struct SnapshotEntry {
    point: Vec<f64>,
    block_file: String,
    deriv_file: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    n_x: usize,
    n_t: usize,
    n_p: usize,
    eps_svd: f64,
    eps_orth: f64,
    time_weights: Vec<f64>,
    ip_factor_file: String,
    snapshots: Vec<SnapshotEntry>,
}

/// Owns all solution trajectories and the running truncated SVD of the
/// time-weighted snapshot matrix.
///
/// Appending is the only mutation; every reader sees a consistent pairing
/// of the raw weighted columns and their factorization.
pub struct SnapshotStore {
    points: Vec<DVector<f64>>,
    blocks: Vec<DMatrix<f64>>,
    deriv_blocks: Vec<Option<Vec<DMatrix<f64>>>>,
    time_weights: DVector<f64>,
    ip_factor: DMatrix<f64>,
    running_svd: TruncatedSvd,
    raw_weighted_columns: DMatrix<f64>,
    eps_svd: f64,
    eps_orth: f64,
    n_p: usize,
}

impl SnapshotStore {
    pub fn new(
        n_p: usize,
        time_weights: DVector<f64>,
        ip_factor: DMatrix<f64>,
        eps_svd: f64,
        eps_orth: f64,
    ) -> Self {
        let n_x = ip_factor.nrows();
        Self {
            points: Vec::new(),
            blocks: Vec::new(),
            deriv_blocks: Vec::new(),
            time_weights,
            ip_factor,
            running_svd: TruncatedSvd::empty(n_x, 0),
            raw_weighted_columns: DMatrix::zeros(n_x, 0),
            eps_svd,
            eps_orth,
            n_p,
        }
    }

    pub fn n_x(&self) -> usize {
        self.ip_factor.nrows()
    }

    pub fn n_t(&self) -> usize {
        self.time_weights.len()
    }

    pub fn n_p(&self) -> usize {
        self.n_p
    }

    /// Number of stored snapshots `n_s`.
    pub fn n_snapshots(&self) -> usize {
        self.points.len()
    }

    /// Number of snapshots carrying parametric derivative data `n_{s,d}`.
    pub fn n_deriv_snapshots(&self) -> usize {
        self.deriv_blocks.iter().filter(|d| d.is_some()).count()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn block(&self, j: usize) -> &DMatrix<f64> {
        &self.blocks[j]
    }

    /// Parametric derivative tensor of snapshot `j`, one `n_x x n_t`
    /// matrix per parameter, when it was collected.
    pub fn deriv_block(&self, j: usize) -> Option<&[DMatrix<f64>]> {
        self.deriv_blocks[j].as_deref()
    }

    pub fn has_derivatives(&self, j: usize) -> bool {
        self.deriv_blocks[j].is_some()
    }

    /// Store indices of the snapshots that carry derivative data, in
    /// append order.
    pub fn derivative_indices(&self) -> Vec<usize> {
        self.deriv_blocks
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_some())
            .map(|(j, _)| j)
            .collect()
    }

    pub fn time_weights(&self) -> &DVector<f64> {
        &self.time_weights
    }

    pub fn ip_factor(&self) -> &DMatrix<f64> {
        &self.ip_factor
    }

    pub fn running_svd(&self) -> &TruncatedSvd {
        &self.running_svd
    }

    pub fn raw_weighted_columns(&self) -> &DMatrix<f64> {
        &self.raw_weighted_columns
    }

    pub fn eps_svd(&self) -> f64 {
        self.eps_svd
    }

    /// Index of a stored point within [`POINT_MATCH_TOL`] of `mu`.
    pub fn find_point(&self, mu: &DVector<f64>) -> Option<usize> {
        self.points.iter().position(|p| (p - mu).norm() <= POINT_MATCH_TOL)
    }

    /// Per-column weight vector repeating each snapshot weight `n_t`
    /// times, as the square-root diagonal of the snapshot weight matrix.
    pub fn expand_snapshot_weights(&self, snapshot_weights: &[f64]) -> DVector<f64> {
        let n_t = self.n_t();
        let mut w = DVector::zeros(snapshot_weights.len() * n_t);
        for (j, &wj) in snapshot_weights.iter().enumerate() {
            for k in 0..n_t {
                w[j * n_t + k] = wj;
            }
        }
        w
    }

    /// Time-weighted block `F A diag(sqrt(w_k))` in inner-product
    /// coordinates.
    pub fn weighted_block(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        let mut weighted = &self.ip_factor * block;
        for (k, mut col) in weighted.column_iter_mut().enumerate() {
            col *= self.time_weights[k].sqrt();
        }
        weighted
    }

    /// Append a trajectory block at a new parameter point, updating the
    /// running SVD incrementally.
    pub fn append_snapshot(
        &mut self,
        mu: DVector<f64>,
        block: DMatrix<f64>,
        deriv: Option<Vec<DMatrix<f64>>>,
    ) -> Result<()> {
        if mu.len() != self.n_p {
            return Err(Error::DimensionMismatch {
                context: "append_snapshot parameter dimension",
                expected: self.n_p,
                got: mu.len(),
            });
        }
        if let Some(idx) = self.find_point(&mu) {
            return Err(Error::DuplicatePoint {
                index: idx,
                gap: (&self.points[idx] - &mu).norm(),
            });
        }
        if block.nrows() != self.n_x() || block.ncols() != self.n_t() {
            return Err(Error::DimensionMismatch {
                context: "append_snapshot block shape",
                expected: self.n_x() * self.n_t(),
                got: block.nrows() * block.ncols(),
            });
        }
        if let Some(d) = &deriv {
            if d.len() != self.n_p {
                return Err(Error::DimensionMismatch {
                    context: "append_snapshot derivative slice count",
                    expected: self.n_p,
                    got: d.len(),
                });
            }
            for slice in d {
                if slice.nrows() != self.n_x() || slice.ncols() != self.n_t() {
                    return Err(Error::DimensionMismatch {
                        context: "append_snapshot derivative shape",
                        expected: self.n_x() * self.n_t(),
                        got: slice.nrows() * slice.ncols(),
                    });
                }
            }
        }

        let weighted = self.weighted_block(&block);
        let block_svd = svd::truncated_svd(&weighted, self.eps_svd)?;

        if self.points.is_empty() {
            self.raw_weighted_columns = weighted;
            self.running_svd = block_svd;
        } else {
            let n_x = self.n_x();
            let old_cols = self.raw_weighted_columns.ncols();
            let mut grown = DMatrix::zeros(n_x, old_cols + self.n_t());
            grown
                .view_mut((0, 0), (n_x, old_cols))
                .copy_from(&self.raw_weighted_columns);
            grown
                .view_mut((0, old_cols), (n_x, self.n_t()))
                .copy_from(&weighted);
            self.running_svd = svd::incremental_append(
                &self.running_svd,
                &block_svd,
                &grown,
                self.eps_orth,
                self.eps_svd,
            )?;
            self.raw_weighted_columns = grown;
        }

        self.points.push(mu);
        self.blocks.push(block);
        self.deriv_blocks.push(deriv);
        Ok(())
    }

    /// Write points, blocks, derivative tensors, and the inner-product
    /// factor to `dir` as CSV matrices plus a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut snapshots = Vec::new();
        for (j, point) in self.points.iter().enumerate() {
            let block_file = format!("block_{j:04}.csv");
            write_matrix_csv(&dir.join(&block_file), &self.blocks[j])?;
            let deriv_file = match &self.deriv_blocks[j] {
                Some(slices) => {
                    let name = format!("deriv_{j:04}.csv");
                    let mut flat = DMatrix::zeros(self.n_x(), self.n_t() * self.n_p);
                    for (i, slice) in slices.iter().enumerate() {
                        flat.view_mut((0, i * self.n_t()), (self.n_x(), self.n_t()))
                            .copy_from(slice);
                    }
                    write_matrix_csv(&dir.join(&name), &flat)?;
                    Some(name)
                }
                None => None,
            };
            snapshots.push(SnapshotEntry {
                point: point.iter().copied().collect(),
                block_file,
                deriv_file,
            });
        }
        write_matrix_csv(&dir.join("ip_factor.csv"), &self.ip_factor)?;
        let manifest = Manifest {
            n_x: self.n_x(),
            n_t: self.n_t(),
            n_p: self.n_p,
            eps_svd: self.eps_svd,
            eps_orth: self.eps_orth,
            time_weights: self.time_weights.iter().copied().collect(),
            ip_factor_file: "ip_factor.csv".to_string(),
            snapshots,
        };
        let file = fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(file, &manifest)?;
        Ok(())
    }

    /// Rebuild a store from [`SnapshotStore::save`] output, replaying the
    /// appends so the running SVD follows the same incremental path.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_reader(fs::File::open(dir.join("manifest.json"))?)?;
        let ip_factor = read_matrix_csv(&dir.join(&manifest.ip_factor_file))?;
        if ip_factor.nrows() != manifest.n_x || ip_factor.ncols() != manifest.n_x {
            return Err(Error::Config("manifest n_x disagrees with ip_factor".into()));
        }
        let tw = DVector::from_vec(manifest.time_weights.clone());
        if tw.len() != manifest.n_t {
            return Err(Error::Config("manifest n_t disagrees with time_weights".into()));
        }
        let mut store = Self::new(manifest.n_p, tw, ip_factor, manifest.eps_svd, manifest.eps_orth);
        for entry in &manifest.snapshots {
            let block = read_matrix_csv(&dir.join(&entry.block_file))?;
            let deriv = match &entry.deriv_file {
                Some(name) => {
                    let flat = read_matrix_csv(&dir.join(name))?;
                    if flat.ncols() != manifest.n_t * manifest.n_p {
                        return Err(Error::Config(format!(
                            "derivative file {name} has wrong column count"
                        )));
                    }
                    let slices = (0..manifest.n_p)
                        .map(|i| {
                            flat.view((0, i * manifest.n_t), (manifest.n_x, manifest.n_t))
                                .into_owned()
                        })
                        .collect();
                    Some(slices)
                }
                None => None,
            };
            store.append_snapshot(DVector::from_vec(entry.point.clone()), block, deriv)?;
        }
        Ok(store)
    }

    /// Order-sensitive FNV-1a hash over dimensions, points, and block
    /// entries; used to certify identical stores across shadow runs.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325_u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(&(self.n_x() as u64).to_le_bytes());
        eat(&(self.n_t() as u64).to_le_bytes());
        eat(&(self.points.len() as u64).to_le_bytes());
        for p in &self.points {
            for &x in p.iter() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        for b in &self.blocks {
            for &x in b.iter() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// 17-significant-digit scientific notation, enough for exact f64
/// round-trip through decimal text.
fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                write!(out, ",")?;
            }
            write!(out, "{:.16e}", m[(i, j)])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::Config(format!("bad float in {path:?}: {e}")))?);
    }
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(Error::Config(format!("ragged rows in {path:?}")));
    }
    Ok(DMatrix::from_fn(n_rows, n_cols, |i, j| rows[i][j]))
}
