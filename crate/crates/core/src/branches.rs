//! Parameter containers and forward passes for the three branches of a
//! compressed layer.
//!
//! All three branches map an N×m token matrix to N×n. The low-rank and
//! sparse branches consume the full-precision input; only the binarized
//! branch quantizes it. Forward passes never mutate their containers.

use crate::bitmat::{sign_quantize, xnor_popcount_gemm, BitMatrix};
use crate::dense::{matmul, DenseMatrix};
use crate::error::{Error, Result};

/// Low-rank branch: `x ↦ (x·B)·A` with `B` m×r and `A` r×n.
///
/// Association order is fixed to `(x·B)·A`, which costs N·r·(m+n)
/// multiply-adds instead of N·m·n.
#[derive(Debug, Clone, PartialEq)]
pub struct LrmbParams {
    b_mat: DenseMatrix,
    a_mat: DenseMatrix,
    rank: usize,
}

impl LrmbParams {
    pub fn new(b_mat: DenseMatrix, a_mat: DenseMatrix) -> Result<LrmbParams> {
        let rank = b_mat.cols();
        if rank == 0 || rank != a_mat.rows() {
            return Err(Error::InvalidArgument(format!(
                "low-rank factors disagree: B is {}x{}, A is {}x{}",
                b_mat.rows(),
                b_mat.cols(),
                a_mat.rows(),
                a_mat.cols()
            )));
        }
        if rank > b_mat.rows().min(a_mat.cols()) {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} exceeds min({}, {})",
                b_mat.rows(),
                a_mat.cols()
            )));
        }
        Ok(LrmbParams { b_mat, a_mat, rank })
    }

    pub fn b_mat(&self) -> &DenseMatrix {
        &self.b_mat
    }

    pub fn a_mat(&self) -> &DenseMatrix {
        &self.a_mat
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn in_features(&self) -> usize {
        self.b_mat.rows()
    }

    pub fn out_features(&self) -> usize {
        self.a_mat.cols()
    }

    /// Replaces both factors, revalidating shapes (used by training).
    pub fn set_factors(&mut self, b_mat: DenseMatrix, a_mat: DenseMatrix) -> Result<()> {
        let next = LrmbParams::new(b_mat, a_mat)?;
        if next.in_features() != self.in_features() || next.out_features() != self.out_features() {
            return Err(Error::shape("low-rank factor dims changed"));
        }
        *self = next;
        Ok(())
    }
}

/// One sparse entry: a value at fixed (row, col) coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseEntry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Sparse branch in coordinate format: a row-major-sorted list of unique
/// (row, col, value) triples inside a logical m×n matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SmbParams {
    entries: Vec<SparseEntry>,
    rows: usize,
    cols: usize,
}

impl SmbParams {
    pub fn new(rows: usize, cols: usize, entries: Vec<SparseEntry>) -> Result<SmbParams> {
        for e in &entries {
            if e.row >= rows || e.col >= cols {
                return Err(Error::InvalidInput(format!(
                    "sparse coordinate ({}, {}) outside {}x{}",
                    e.row, e.col, rows, cols
                )));
            }
            if !e.value.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite sparse value at ({}, {})",
                    e.row, e.col
                )));
            }
        }
        for pair in entries.windows(2) {
            let a = (pair[0].row, pair[0].col);
            let b = (pair[1].row, pair[1].col);
            if a >= b {
                return Err(Error::InvalidInput(format!(
                    "sparse entries not strictly row-major sorted at ({}, {})",
                    b.0, b.1
                )));
            }
        }
        Ok(SmbParams { entries, rows, cols })
    }

    pub fn empty(rows: usize, cols: usize) -> SmbParams {
        SmbParams {
            entries: Vec::new(),
            rows,
            cols,
        }
    }

    pub fn entries(&self) -> &[SparseEntry] {
        &self.entries
    }

    /// Number of stored entries (the branch's `k`).
    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Overwrites the values, keeping coordinates fixed.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::shape(format!(
                "expected {} sparse values, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (e, &v) in self.entries.iter_mut().zip(values) {
            if !v.is_finite() {
                return Err(Error::InvalidInput("non-finite sparse value".into()));
            }
            e.value = v;
        }
        Ok(())
    }

    /// Dense m×n reconstruction.
    pub fn densify(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for e in &self.entries {
            out.set(e.row, e.col, e.value);
        }
        out
    }
}

/// Binarized branch: a full-precision latent weight, its packed sign
/// pattern, and the per-output-channel scale vector.
///
/// The latent is stored transposed (n×m, one row per output channel) so the
/// packed rows stream against packed activation rows in the GEMM. `packed`
/// and `k_vec` are derived state: every latent mutation goes through
/// [`BmbParams::set_latent`], which re-signs and re-averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BmbParams {
    latent: DenseMatrix,
    packed: BitMatrix,
    k_vec: Vec<f64>,
}

impl BmbParams {
    /// Builds from an n×m latent (transposed) weight.
    pub fn from_latent(latent: DenseMatrix) -> Result<BmbParams> {
        if !latent.is_finite() {
            return Err(Error::InvalidInput("non-finite latent weight".into()));
        }
        let packed = sign_quantize(&latent)?;
        let k_vec = channel_abs_means(&latent);
        Ok(BmbParams {
            latent,
            packed,
            k_vec,
        })
    }

    pub fn latent(&self) -> &DenseMatrix {
        &self.latent
    }

    pub fn packed(&self) -> &BitMatrix {
        &self.packed
    }

    /// Per-output-channel absolute means of the latent rows.
    pub fn k_vec(&self) -> &[f64] {
        &self.k_vec
    }

    pub fn out_features(&self) -> usize {
        self.latent.rows()
    }

    pub fn in_features(&self) -> usize {
        self.latent.cols()
    }

    /// Replaces the latent weight, re-packing the sign pattern and
    /// recomputing the scale vector.
    pub fn set_latent(&mut self, latent: DenseMatrix) -> Result<()> {
        if latent.rows() != self.latent.rows() || latent.cols() != self.latent.cols() {
            return Err(Error::shape("latent dims changed"));
        }
        *self = BmbParams::from_latent(latent)?;
        Ok(())
    }
}

fn channel_abs_means(latent: &DenseMatrix) -> Vec<f64> {
    (0..latent.rows())
        .map(|r| latent.row(r).iter().map(|v| v.abs()).sum::<f64>() / latent.cols() as f64)
        .collect()
}

/// Low-rank forward: `(x·B)·A`.
pub fn lrmb_forward(p: &LrmbParams, x_in: &DenseMatrix) -> Result<DenseMatrix> {
    if x_in.cols() != p.in_features() {
        return Err(Error::shape(format!(
            "low-rank forward: input has {} features, branch expects {}",
            x_in.cols(),
            p.in_features()
        )));
    }
    let hidden = matmul(x_in, &p.b_mat)?;
    matmul(&hidden, &p.a_mat)
}

/// Sparse forward: scatter-accumulate over the stored triples,
/// equivalent to `x · densify()`.
pub fn smb_forward(p: &SmbParams, x_in: &DenseMatrix) -> Result<DenseMatrix> {
    if x_in.cols() != p.rows {
        return Err(Error::shape(format!(
            "sparse forward: input has {} features, branch expects {}",
            x_in.cols(),
            p.rows
        )));
    }
    let mut out = DenseMatrix::zeros(x_in.rows(), p.cols);
    for i in 0..x_in.rows() {
        for e in &p.entries {
            let cur = out.get(i, e.col);
            out.set(i, e.col, cur + x_in.get(i, e.row) * e.value);
        }
    }
    Ok(out)
}

/// Per-token absolute mean of the input features (the activation-side
/// scale factor of the binarized branch).
pub fn activation_abs_means(x_in: &DenseMatrix) -> Vec<f64> {
    (0..x_in.rows())
        .map(|i| x_in.row(i).iter().map(|v| v.abs()).sum::<f64>() / x_in.cols() as f64)
        .collect()
}

/// Binarized forward: sign the input, run the XNOR-popcount GEMM against
/// the packed weight, then rescale entry (i, c) by
/// `mean|x_in[i,·]| · k_vec[c]`.
pub fn bmb_forward(p: &BmbParams, x_in: &DenseMatrix) -> Result<DenseMatrix> {
    if x_in.cols() != p.in_features() {
        return Err(Error::shape(format!(
            "binary forward: input has {} features, branch expects {}",
            x_in.cols(),
            p.in_features()
        )));
    }
    let x_bits = sign_quantize(x_in)?;
    let raw = xnor_popcount_gemm(&x_bits, &p.packed)?;
    let a_scale = activation_abs_means(x_in);
    let mut out = DenseMatrix::zeros(x_in.rows(), p.out_features());
    for i in 0..out.rows() {
        for c in 0..out.cols() {
            out.set(i, c, raw.get(i, c) as f64 * a_scale[i] * p.k_vec[c]);
        }
    }
    Ok(out)
}
