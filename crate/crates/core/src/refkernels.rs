//! Validation kernels: dense matrix-matrix multiply (mod2am) and 3-array CSR
//! sparse matrix-vector multiply (mod2as).
//!
//! Both kernels can run for real (timed) or replay their element-level
//! access stream for the virtual machine. The blocked matmul and its trace
//! walk the same tile schedule, so the trace is exactly the order in which
//! the kernel touches memory.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::{short_digest, AccessTrace, ProbeRng, DEFAULT_TRACE_CAP};

/// Cache-block edge of the blocked matmul, in elements.
pub const BLOCK_EDGE: usize = 32;
/// Edge of the register tile held in accumulators inside a cache block.
pub const REGISTER_TILE: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("vector length {found} does not match {expected} columns")]
    LengthMismatch { expected: usize, found: usize },
    #[error("column index {index} out of range for {cols} columns")]
    IndexOutOfRange { index: usize, cols: usize },
    #[error("invalid CSR structure: {0}")]
    InvalidCsr(String),
    #[error("fill ratio must lie in (0, 1], got {0}")]
    FillRatio(f64),
    #[error("trace of {accesses} accesses exceeds the cap of {cap}")]
    TraceTooLong { accesses: u64, cap: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        if data.len() != rows * cols {
            return Err(KernelError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub col_idx: Vec<usize>,
    pub row_ptr: Vec<usize>,
}

impl CsrMatrix {
    /// Builds a CSR matrix, checking every structural invariant.
    pub fn new(
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        col_idx: Vec<usize>,
        row_ptr: Vec<usize>,
    ) -> Result<Self, KernelError> {
        if row_ptr.len() != rows + 1 {
            return Err(KernelError::InvalidCsr(format!(
                "row_ptr has {} entries, expected {}",
                row_ptr.len(),
                rows + 1
            )));
        }
        if row_ptr[0] != 0 {
            return Err(KernelError::InvalidCsr("row_ptr[0] must be 0".into()));
        }
        let nnz = row_ptr[rows];
        if values.len() != nnz || col_idx.len() != nnz {
            return Err(KernelError::InvalidCsr(format!(
                "nnz {nnz} disagrees with {} values / {} column indices",
                values.len(),
                col_idx.len()
            )));
        }
        for (i, w) in row_ptr.windows(2).enumerate() {
            if w[1] < w[0] {
                return Err(KernelError::InvalidCsr(format!("row_ptr decreases at row {i}")));
            }
            let row = &col_idx[w[0]..w[1]];
            if let Some(&c) = row.iter().find(|&&c| c >= cols) {
                return Err(KernelError::IndexOutOfRange { index: c, cols });
            }
            if row.windows(2).any(|p| p[1] <= p[0]) {
                return Err(KernelError::InvalidCsr(format!(
                    "column indices not strictly increasing in row {i}"
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            values,
            col_idx,
            row_ptr,
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            values: vec![1.0; n],
            col_idx: (0..n).collect(),
            row_ptr: (0..=n).collect(),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in self.row_ptr[i]..self.row_ptr[i + 1] {
                d.data[i * self.cols + self.col_idx[j]] = self.values[j];
            }
        }
        d
    }
}

fn check_product_shapes(a: &DenseMatrix, b: &DenseMatrix) -> Result<(), KernelError> {
    if a.cols != b.rows {
        return Err(KernelError::ShapeMismatch(format!(
            "{}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Triple-loop reference product.
pub fn mod2am_naive(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, KernelError> {
    check_product_shapes(a, b)?;
    let (m, n, k) = (a.rows, b.cols, a.cols);
    let mut c = DenseMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data[i * k + p] * b.data[p * n + j];
            }
            c.data[i * n + j] = s;
        }
    }
    Ok(c)
}

/// One register tile within one k-block.
#[derive(Clone, Copy, Debug)]
struct TileStep {
    rows: (usize, usize),
    cols: (usize, usize),
    depth: (usize, usize),
}

/// Blocked schedule: cache blocks (i, j, k), register tiles inside.
fn tile_schedule(m: usize, n: usize, k: usize, mut step: impl FnMut(TileStep)) {
    for ib in (0..m).step_by(BLOCK_EDGE) {
        let ie = (ib + BLOCK_EDGE).min(m);
        for jb in (0..n).step_by(BLOCK_EDGE) {
            let je = (jb + BLOCK_EDGE).min(n);
            for kb in (0..k).step_by(BLOCK_EDGE) {
                let ke = (kb + BLOCK_EDGE).min(k);
                for i0 in (ib..ie).step_by(REGISTER_TILE) {
                    for j0 in (jb..je).step_by(REGISTER_TILE) {
                        step(TileStep {
                            rows: (i0, (i0 + REGISTER_TILE).min(ie)),
                            cols: (j0, (j0 + REGISTER_TILE).min(je)),
                            depth: (kb, ke),
                        });
                    }
                }
            }
        }
    }
}

/// Cache- and register-blocked product. Each output element accumulates its
/// k terms in ascending order, like [`mod2am_naive`].
pub fn mod2am_blocked(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, KernelError> {
    check_product_shapes(a, b)?;
    let (m, n, k) = (a.rows, b.cols, a.cols);
    let mut c = DenseMatrix::zeros(m, n);
    let mut acc = [[0.0f64; REGISTER_TILE]; REGISTER_TILE];
    tile_schedule(m, n, k, |t| {
        let (i0, ie) = t.rows;
        let (j0, je) = t.cols;
        for i in i0..ie {
            for j in j0..je {
                acc[i - i0][j - j0] = c.data[i * n + j];
            }
        }
        for p in t.depth.0..t.depth.1 {
            for i in i0..ie {
                let av = a.data[i * k + p];
                let row = &mut acc[i - i0];
                for j in j0..je {
                    row[j - j0] += av * b.data[p * n + j];
                }
            }
        }
        for i in i0..ie {
            for j in j0..je {
                c.data[i * n + j] = acc[i - i0][j - j0];
            }
        }
    });
    Ok(c)
}

/// Default product: the blocked variant.
pub fn mod2am(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, KernelError> {
    mod2am_blocked(a, b)
}

/// `y = A x` over the CSR arrays.
pub fn mod2as(a: &CsrMatrix, x: &[f64]) -> Result<Vec<f64>, KernelError> {
    if x.len() != a.cols {
        return Err(KernelError::LengthMismatch {
            expected: a.cols,
            found: x.len(),
        });
    }
    if let Some(&c) = a.col_idx.iter().find(|&&c| c >= a.cols) {
        return Err(KernelError::IndexOutOfRange { index: c, cols: a.cols });
    }
    let mut y = vec![0.0; a.rows];
    for (i, yi) in y.iter_mut().enumerate() {
        let mut s = 0.0;
        for j in a.row_ptr[i]..a.row_ptr[i + 1] {
            s += a.values[j] * x[a.col_idx[j]];
        }
        *yi = s;
    }
    Ok(y)
}

/// Dense matrix with entries uniform in (0, 1].
pub fn generate_dense(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ProbeRng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| 1.0 - rng.random::<f64>()).collect();
    DenseMatrix { rows, cols, data }
}

/// Random CSR matrix. Each row draws its nonzero count from
/// Binomial(cols, fill_ratio), then that many distinct columns; values are
/// uniform in (0, 1]. Expected nnz is `rows * cols * fill_ratio`.
pub fn generate_sparse(
    rows: usize,
    cols: usize,
    fill_ratio: f64,
    seed: u64,
) -> Result<CsrMatrix, KernelError> {
    if !(fill_ratio > 0.0 && fill_ratio <= 1.0) {
        return Err(KernelError::FillRatio(fill_ratio));
    }
    let mut rng = ProbeRng::seed_from_u64(seed);
    let per_row = Binomial::new(cols as u64, fill_ratio).expect("fill ratio checked");
    let mut values = Vec::new();
    let mut col_idx = Vec::new();
    let mut row_ptr = Vec::with_capacity(rows + 1);
    row_ptr.push(0);
    for _ in 0..rows {
        let count = per_row.sample(&mut rng) as usize;
        let mut picked = sample(&mut rng, cols, count).into_vec();
        picked.sort_unstable();
        for c in picked {
            col_idx.push(c);
            values.push(1.0 - rng.random::<f64>());
        }
        row_ptr.push(col_idx.len());
    }
    Ok(CsrMatrix {
        rows,
        cols,
        values,
        col_idx,
        row_ptr,
    })
}

/// Dense vector with entries uniform in (0, 1].
pub fn generate_vector(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ProbeRng::seed_from_u64(seed);
    (0..len).map(|_| 1.0 - rng.random::<f64>()).collect()
}

pub fn mod2am_flops(m: usize, n: usize, k: usize) -> u64 {
    2 * (m as u64) * (n as u64) * (k as u64)
}

pub fn mod2as_flops(a: &CsrMatrix) -> u64 {
    2 * a.nnz() as u64
}

/// Replays the blocked matmul's element accesses. A, B and C are laid out
/// back to back in that order.
pub fn mod2am_accesses(m: usize, n: usize, k: usize, mut visit: impl FnMut(u64)) {
    let a_base = 0u64;
    let b_base = (m * k) as u64;
    let c_base = b_base + (k * n) as u64;
    let a_at = |i: usize, p: usize| a_base + (i * k + p) as u64;
    let b_at = |p: usize, j: usize| b_base + (p * n + j) as u64;
    let c_at = |i: usize, j: usize| c_base + (i * n + j) as u64;
    tile_schedule(m, n, k, |t| {
        let (i0, ie) = t.rows;
        let (j0, je) = t.cols;
        for i in i0..ie {
            for j in j0..je {
                visit(c_at(i, j));
            }
        }
        for p in t.depth.0..t.depth.1 {
            for i in i0..ie {
                visit(a_at(i, p));
            }
            for j in j0..je {
                visit(b_at(p, j));
            }
        }
        for i in i0..ie {
            for j in j0..je {
                visit(c_at(i, j));
            }
        }
    });
}

pub fn mod2am_access_count(m: usize, n: usize, k: usize) -> u64 {
    let mut count = 0u64;
    tile_schedule(m, n, k, |t| {
        let tr = (t.rows.1 - t.rows.0) as u64;
        let tc = (t.cols.1 - t.cols.0) as u64;
        let depth = (t.depth.1 - t.depth.0) as u64;
        count += 2 * tr * tc + depth * (tr + tc);
    });
    count
}

/// Replays the CSR matvec's element accesses over the layout
/// values, col_idx, row_ptr, x, y.
pub fn mod2as_accesses(a: &CsrMatrix, mut visit: impl FnMut(u64)) {
    let nnz = a.nnz() as u64;
    let values = 0u64;
    let col_idx = nnz;
    let row_ptr = 2 * nnz;
    let x = row_ptr + a.rows as u64 + 1;
    let y = x + a.cols as u64;
    visit(row_ptr);
    for i in 0..a.rows {
        visit(row_ptr + i as u64 + 1);
        for j in a.row_ptr[i]..a.row_ptr[i + 1] {
            visit(values + j as u64);
            visit(col_idx + j as u64);
            visit(x + a.col_idx[j] as u64);
        }
        visit(y + i as u64);
    }
}

pub fn mod2as_access_count(a: &CsrMatrix) -> u64 {
    2 * a.rows as u64 + 1 + 3 * a.nnz() as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelName {
    Mod2am,
    Mod2as,
}

impl std::fmt::Display for KernelName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelName::Mod2am => "mod2am",
            KernelName::Mod2as => "mod2as",
        })
    }
}

/// One reference input: a kernel plus its problem size and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "lowercase")]
pub enum KernelCase {
    /// Square n x n times n x n.
    Mod2am { n: usize, seed: u64 },
    /// Square rows x rows CSR matrix.
    Mod2as { rows: usize, fill_ratio: f64, seed: u64 },
}

impl KernelCase {
    pub fn name(&self) -> KernelName {
        match self {
            KernelCase::Mod2am { .. } => KernelName::Mod2am,
            KernelCase::Mod2as { .. } => KernelName::Mod2as,
        }
    }

    pub fn label(&self) -> String {
        match self {
            KernelCase::Mod2am { n, .. } => format!("mod2am n={n}"),
            KernelCase::Mod2as { rows, fill_ratio, .. } => {
                format!("mod2as rows={rows} fill={fill_ratio}")
            }
        }
    }

    pub fn digest(&self) -> String {
        let canonical = match self {
            KernelCase::Mod2am { n, seed } => format!("mod2am|{n}|{seed}"),
            KernelCase::Mod2as {
                rows,
                fill_ratio,
                seed,
            } => format!("mod2as|{rows}|{:016x}|{seed}", fill_ratio.to_bits()),
        };
        short_digest(&canonical)
    }

    pub fn sparse_matrix(&self) -> Result<Option<CsrMatrix>, KernelError> {
        match *self {
            KernelCase::Mod2am { .. } => Ok(None),
            KernelCase::Mod2as {
                rows,
                fill_ratio,
                seed,
            } => generate_sparse(rows, rows, fill_ratio, seed).map(Some),
        }
    }

    /// Bytes of all arrays the kernel touches.
    pub fn footprint_bytes(&self) -> Result<u64, KernelError> {
        Ok(match *self {
            KernelCase::Mod2am { n, .. } => 3 * 8 * (n * n) as u64,
            KernelCase::Mod2as { .. } => {
                let a = self.sparse_matrix()?.expect("sparse case");
                8 * (2 * a.nnz() + 2 * a.rows + 1 + a.cols) as u64
            }
        })
    }

    /// (flops, accesses) of one run.
    pub fn counts(&self) -> Result<(u64, u64), KernelError> {
        match *self {
            KernelCase::Mod2am { n, .. } => Ok((mod2am_flops(n, n, n), mod2am_access_count(n, n, n))),
            KernelCase::Mod2as { .. } => {
                let a = self.sparse_matrix()?.expect("sparse case");
                Ok((mod2as_flops(&a), mod2as_access_count(&a)))
            }
        }
    }

    /// Replays the access stream; returns (flops, accesses).
    pub fn replay(&self, mut visit: impl FnMut(u64)) -> Result<(u64, u64), KernelError> {
        match *self {
            KernelCase::Mod2am { n, .. } => {
                mod2am_accesses(n, n, n, &mut visit);
                Ok((mod2am_flops(n, n, n), mod2am_access_count(n, n, n)))
            }
            KernelCase::Mod2as { .. } => {
                let a = self.sparse_matrix()?.expect("sparse case");
                mod2as_accesses(&a, &mut visit);
                Ok((mod2as_flops(&a), mod2as_access_count(&a)))
            }
        }
    }

    /// Problem size as (m, n, k) for mod2am or (rows, cols, nnz) for mod2as.
    pub fn problem_size(&self) -> Result<[u64; 3], KernelError> {
        Ok(match *self {
            KernelCase::Mod2am { n, .. } => [n as u64; 3],
            KernelCase::Mod2as { .. } => {
                let a = self.sparse_matrix()?.expect("sparse case");
                [a.rows as u64, a.cols as u64, a.nnz() as u64]
            }
        })
    }

    /// Runs the kernel for real and times it.
    pub fn run_timed(&self) -> Result<KernelRun, KernelError> {
        match *self {
            KernelCase::Mod2am { n, seed } => {
                let a = generate_dense(n, n, seed);
                let b = generate_dense(n, n, seed.wrapping_add(1));
                let start = Instant::now();
                let c = std::hint::black_box(mod2am_blocked(&a, &b)?);
                let seconds = start.elapsed().as_secs_f64();
                drop(c);
                Ok(KernelRun::new(KernelName::Mod2am, [n as u64; 3], mod2am_flops(n, n, n), seconds))
            }
            KernelCase::Mod2as { seed, .. } => {
                let a = self.sparse_matrix()?.expect("sparse case");
                let x = generate_vector(a.cols, seed.wrapping_add(1));
                let start = Instant::now();
                let y = std::hint::black_box(mod2as(&a, &x)?);
                let seconds = start.elapsed().as_secs_f64();
                drop(y);
                Ok(KernelRun::new(
                    KernelName::Mod2as,
                    [a.rows as u64, a.cols as u64, a.nnz() as u64],
                    mod2as_flops(&a),
                    seconds,
                ))
            }
        }
    }
}

/// Materialised kernel trace, capped like probe traces.
pub fn kernel_trace(case: &KernelCase) -> Result<AccessTrace, KernelError> {
    kernel_trace_capped(case, DEFAULT_TRACE_CAP)
}

pub fn kernel_trace_capped(case: &KernelCase, cap: u64) -> Result<AccessTrace, KernelError> {
    let (_, accesses) = case.counts()?;
    if accesses > cap {
        return Err(KernelError::TraceTooLong { accesses, cap });
    }
    let mut element_indices = Vec::with_capacity(accesses as usize);
    let (flops_total, _) = case.replay(|e| element_indices.push(e))?;
    Ok(AccessTrace {
        element_indices,
        flops_total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelRun {
    pub name: KernelName,
    pub problem_size: [u64; 3],
    pub flops_total: u64,
    pub wall_seconds: f64,
    pub mflops: f64,
}

impl KernelRun {
    pub fn new(name: KernelName, problem_size: [u64; 3], flops_total: u64, seconds: f64) -> Self {
        let wall_seconds = seconds.max(1e-9);
        Self {
            name,
            problem_size,
            flops_total,
            wall_seconds,
            mflops: flops_total as f64 / wall_seconds / 1e6,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_product() {
        let a = DenseMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = DenseMatrix::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let expected = vec![19.0, 22.0, 43.0, 50.0];
        assert_eq!(mod2am_naive(&a, &b).unwrap().data, expected);
        assert_eq!(mod2am_blocked(&a, &b).unwrap().data, expected);
    }

    #[test]
    fn identity_product_is_exact() {
        let a = generate_dense(37, 37, 3);
        assert_eq!(mod2am(&DenseMatrix::identity(37), &a).unwrap(), a);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 3);
        assert!(matches!(mod2am(&a, &b), Err(KernelError::ShapeMismatch(_))));
        assert!(DenseMatrix::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn rectangular_blocked_matches_naive() {
        let a = generate_dense(45, 70, 1);
        let b = generate_dense(70, 33, 2);
        assert_eq!(mod2am_blocked(&a, &b).unwrap(), mod2am_naive(&a, &b).unwrap());
    }

    #[test]
    fn csr_identity_and_empty_rows() {
        let x = vec![3.0, -1.0, 2.5];
        assert_eq!(mod2as(&CsrMatrix::identity(3), &x).unwrap(), x);
        let a = CsrMatrix::new(3, 3, vec![2.0], vec![1], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(mod2as(&a, &x).unwrap(), vec![0.0, -2.0, 0.0]);
    }

    #[test]
    fn csr_errors() {
        assert_eq!(
            mod2as(&CsrMatrix::identity(3), &[1.0]),
            Err(KernelError::LengthMismatch {
                expected: 3,
                found: 1
            })
        );
        assert_eq!(
            CsrMatrix::new(2, 2, vec![1.0], vec![2], vec![0, 1, 1]),
            Err(KernelError::IndexOutOfRange { index: 2, cols: 2 })
        );
        assert!(CsrMatrix::new(2, 2, vec![1.0, 1.0], vec![1, 0], vec![0, 2, 2]).is_err());
        assert!(CsrMatrix::new(2, 2, vec![1.0], vec![0], vec![0, 1]).is_err());
        assert!(CsrMatrix::new(2, 2, vec![1.0], vec![0], vec![1, 1, 1]).is_err());
        let mut bad = CsrMatrix::identity(2);
        bad.col_idx[1] = 5;
        assert!(matches!(
            mod2as(&bad, &[1.0, 1.0]),
            Err(KernelError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn full_fill_is_dense() {
        let a = generate_sparse(7, 9, 1.0, 4).unwrap();
        assert_eq!(a.nnz(), 63);
        assert!(a.values.iter().all(|&v| v > 0.0 && v <= 1.0));
        CsrMatrix::new(a.rows, a.cols, a.values.clone(), a.col_idx.clone(), a.row_ptr.clone()).unwrap();
    }

    #[test]
    fn fill_ratio_range_checked() {
        assert_eq!(generate_sparse(3, 3, 0.0, 1), Err(KernelError::FillRatio(0.0)));
        assert_eq!(generate_sparse(3, 3, 1.5, 1), Err(KernelError::FillRatio(1.5)));
    }

    #[test]
    fn sparse_generation_is_seeded() {
        let a = generate_sparse(100, 100, 0.05, 9).unwrap();
        let b = generate_sparse(100, 100, 0.05, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_sparse(100, 100, 0.05, 10).unwrap());
    }

    #[test]
    fn one_by_one_trace() {
        let t = kernel_trace(&KernelCase::Mod2am { n: 1, seed: 0 }).unwrap();
        assert_eq!(t.flops_total, 2);
        // C load, A, B, C store
        assert_eq!(t.element_indices, vec![2, 0, 1, 2]);
    }

    #[test]
    fn access_counts_match_replay() {
        for n in [1, 5, 33, 64] {
            let mut seen = 0u64;
            mod2am_accesses(n, n, n, |_| seen += 1);
            assert_eq!(seen, mod2am_access_count(n, n, n));
        }
        let a = generate_sparse(50, 50, 0.1, 2).unwrap();
        let mut seen = 0u64;
        mod2as_accesses(&a, |_| seen += 1);
        assert_eq!(seen, mod2as_access_count(&a));
    }

    #[test]
    fn trace_stays_inside_layout() {
        let case = KernelCase::Mod2as {
            rows: 40,
            fill_ratio: 0.2,
            seed: 5,
        };
        let t = kernel_trace(&case).unwrap();
        let footprint = case.footprint_bytes().unwrap() / 8;
        assert!(t.element_indices.iter().all(|&e| e < footprint));
        let case = KernelCase::Mod2am { n: 40, seed: 0 };
        let t = kernel_trace(&case).unwrap();
        assert!(t.element_indices.iter().all(|&e| e < 3 * 1600));
    }

    #[test]
    fn trace_cap_enforced() {
        let case = KernelCase::Mod2am { n: 64, seed: 0 };
        assert!(matches!(
            kernel_trace_capped(&case, 10),
            Err(KernelError::TraceTooLong { .. })
        ));
    }

    #[test]
    fn timed_runs_report_flops() {
        let run = KernelCase::Mod2am { n: 16, seed: 1 }.run_timed().unwrap();
        assert_eq!(run.flops_total, 2 * 16 * 16 * 16);
        assert!(run.mflops > 0.0);
        let case = KernelCase::Mod2as {
            rows: 64,
            fill_ratio: 0.1,
            seed: 1,
        };
        let run = case.run_timed().unwrap();
        assert_eq!(run.flops_total, 2 * run.problem_size[2]);
    }
}
