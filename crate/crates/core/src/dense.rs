//! Minimal dense real-matrix and image-tensor support.
//!
//! Everything is 64-bit, row-major, and deterministic: each output entry of
//! [`matmul`] accumulates its inner products in a fixed left-to-right order,
//! so repeated runs are bit-identical. `im2col`/`col2im` express convolution
//! as matrix multiplication; im2col rows flatten each receptive field
//! channel-major, then row-major within the kernel window, which is the same
//! column order used when conv weights are flattened elsewhere in the crate.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<DenseMatrix> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds from row slices; panics on ragged input (test/construction aid).
    pub fn from_rows(rows: &[Vec<f64>]) -> DenseMatrix {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        DenseMatrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, f(r, c));
            }
        }
        m
    }

    pub fn identity(n: usize) -> DenseMatrix {
        DenseMatrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(format!(
                "elementwise op on {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// Squared Frobenius norm.
    pub fn frob_sq(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Textbook product `a · b`; per output entry the sum runs left to right
/// over the inner index, so results are reproducible bit-for-bit.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Product `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "matmul_nt: {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Batched image tensor, row-major (n, c, h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Tensor4> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!(
                "tensor {n}x{c}x{h}x{w} needs {} entries, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        self.data[((n * self.c + c) * self.h + y) * self.w + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "tensor add on {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        })
    }
}

/// Output spatial extent of a convolution: floor((size + 2·pad − k)/stride) + 1.
pub fn conv_out_extent(size: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if k == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "kernel and stride must be at least 1".into(),
        ));
    }
    if k > padded {
        return Err(Error::shape(format!(
            "kernel {k} larger than padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Unrolls receptive fields into rows: output is
/// (n·h_out·w_out) × (c·kh·kw) with zero padding. Row layout is one
/// window flattened channel-major, then (ky, kx) row-major.
pub fn im2col(x: &Tensor4, kh: usize, kw: usize, pad: usize, stride: usize) -> Result<DenseMatrix> {
    let h_out = conv_out_extent(x.h, kh, pad, stride)?;
    let w_out = conv_out_extent(x.w, kw, pad, stride)?;
    let cols = x.c * kh * kw;
    let mut out = DenseMatrix::zeros(x.n * h_out * w_out, cols);
    for n in 0..x.n {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let row = (n * h_out + oy) * w_out + ox;
                for c in 0..x.c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            let v = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < x.h
                                && (ix as usize) < x.w
                            {
                                x.get(n, c, iy as usize, ix as usize)
                            } else {
                                0.0
                            };
                            out.set(row, c * kh * kw + ky * kw + kx, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`im2col`]: scatter-adds a column-matrix gradient back onto
/// an input-shaped tensor. Needed for backpropagation through conv layers.
pub fn col2im(
    grad: &DenseMatrix,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
) -> Result<Tensor4> {
    let h_out = conv_out_extent(h, kh, pad, stride)?;
    let w_out = conv_out_extent(w, kw, pad, stride)?;
    if grad.rows() != n * h_out * w_out || grad.cols() != c * kh * kw {
        return Err(Error::shape(format!(
            "col2im: grad {}x{} does not match {}x{}",
            grad.rows(),
            grad.cols(),
            n * h_out * w_out,
            c * kh * kw
        )));
    }
    let mut out = Tensor4::zeros(n, c, h, w);
    for img in 0..n {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let row = (img * h_out + oy) * w_out + ox;
                for ch in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                let g = grad.get(row, ch * kh * kw + ky * kw + kx);
                                let cur = out.get(img, ch, iy as usize, ix as usize);
                                out.set(img, ch, iy as usize, ix as usize, cur + g);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor4, factor: usize) -> Result<Tensor4> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be ≥ 1".into()));
    }
    let mut out = Tensor4::zeros(x.n, x.c, x.h * factor, x.w * factor);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h * factor {
                for xx in 0..x.w * factor {
                    out.set(n, c, y, xx, x.get(n, c, y / factor, xx / factor));
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest`]: sums gradients over each replicated block.
pub fn upsample_nearest_backward(grad: &Tensor4, factor: usize) -> Result<Tensor4> {
    if factor == 0 || grad.h % factor != 0 || grad.w % factor != 0 {
        return Err(Error::shape(format!(
            "upsample backward: {}x{} not divisible by factor {}",
            grad.h, grad.w, factor
        )));
    }
    let mut out = Tensor4::zeros(grad.n, grad.c, grad.h / factor, grad.w / factor);
    for n in 0..grad.n {
        for c in 0..grad.c {
            for y in 0..grad.h {
                for x in 0..grad.w {
                    let cur = out.get(n, c, y / factor, x / factor);
                    out.set(n, c, y / factor, x / factor, cur + grad.get(n, c, y, x));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let out = matmul(&DenseMatrix::identity(2), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_row_by_column() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0]]);
        let b = DenseMatrix::from_rows(&[vec![3.0], vec![4.0]]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.get(0, 0), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(4, 2);
        assert!(matmul(&a, &b).is_err());
    }

    /// Independent accumulation order: sum the inner products right to left.
    fn matmul_reversed(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).rev().map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn matmul_matches_reordered_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = DenseMatrix::from_fn(7, 5, |_, _| rng.random_range(-1.0..1.0));
        let b = DenseMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let got = matmul(&a, &b).unwrap();
        let want = matmul_reversed(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_nt_agrees_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DenseMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let b = DenseMatrix::from_fn(3, 6, |_, _| rng.random_range(-1.0..1.0));
        let got = matmul_nt(&a, &b).unwrap();
        let want = matmul(&a, &b.transpose()).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0));
        }
    }

    #[test]
    fn im2col_one_by_one_kernel_is_reshape() {
        let x = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let col = im2col(&x, 1, 1, 0, 1).unwrap();
        assert_eq!(col.rows(), 4);
        assert_eq!(col.cols(), 1);
        assert_eq!(col.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn im2col_padded_window_sums() {
        // 3x3 of ones, 3x3 kernel, pad 1: multiplying with an all-ones kernel
        // row counts the in-bounds pixels of each window.
        let x = Tensor4::from_vec(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let col = im2col(&x, 3, 3, 1, 1).unwrap();
        let kernel = DenseMatrix::from_rows(&[vec![1.0; 9]]);
        let sums = matmul_nt(&col, &kernel).unwrap();
        assert_eq!(sums.get(4, 0), 9.0); // center
        assert_eq!(sums.get(0, 0), 4.0); // corner
    }

    #[test]
    fn im2col_channel_major_layout() {
        let x = Tensor4::from_vec(
            1,
            2,
            2,
            2,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        )
        .unwrap();
        let col = im2col(&x, 2, 2, 0, 1).unwrap();
        assert_eq!(col.rows(), 1);
        // channel-0 window then channel-1 window
        assert_eq!(col.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn im2col_rejects_oversized_kernel() {
        let x = Tensor4::zeros(1, 1, 2, 2);
        assert!(im2col(&x, 3, 3, 0, 1).is_err());
    }

    /// Direct sliding-window convolution oracle.
    fn conv_direct(x: &Tensor4, w: &DenseMatrix, kh: usize, kw: usize, pad: usize) -> Tensor4 {
        let c_out = w.rows();
        let h_out = x.h + 2 * pad - kh + 1;
        let w_out = x.w + 2 * pad - kw + 1;
        let mut out = Tensor4::zeros(x.n, c_out, h_out, w_out);
        for n in 0..x.n {
            for co in 0..c_out {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = 0.0;
                        for ci in 0..x.c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy + ky) as isize - pad as isize;
                                    let ix = (ox + kx) as isize - pad as isize;
                                    if iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < x.h
                                        && (ix as usize) < x.w
                                    {
                                        acc += x.get(n, ci, iy as usize, ix as usize)
                                            * w.get(co, ci * kh * kw + ky * kw + kx);
                                    }
                                }
                            }
                        }
                        out.set(n, co, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_via_im2col_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &(c, h, w, k, pad) in &[
            (1usize, 4usize, 5usize, 1usize, 0usize),
            (2, 6, 6, 3, 1),
            (3, 8, 7, 3, 0),
            (2, 5, 5, 3, 1),
        ] {
            let x = Tensor4::from_vec(
                2,
                c,
                h,
                w,
                (0..2 * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let weight = DenseMatrix::from_fn(4, c * k * k, |_, _| rng.random_range(-1.0..1.0));
            let col = im2col(&x, k, k, pad, 1).unwrap();
            let toks = matmul_nt(&col, &weight).unwrap();
            let direct = conv_direct(&x, &weight, k, k, pad);
            let (h_out, w_out) = (direct.h, direct.w);
            for n in 0..2 {
                for co in 0..4 {
                    for oy in 0..h_out {
                        for ox in 0..w_out {
                            let got = toks.get((n * h_out + oy) * w_out + ox, co);
                            let want = direct.get(n, co, oy, ox);
                            assert!(
                                (got - want).abs() <= 1e-12 * want.abs().max(1.0),
                                "mismatch at {n},{co},{oy},{ox}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), g> == <x, col2im(g)> for random x, g.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = Tensor4::from_vec(
            1,
            2,
            5,
            4,
            (0..40).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let col = im2col(&x, 3, 3, 1, 2).unwrap();
        let g = DenseMatrix::from_fn(col.rows(), col.cols(), |_, _| rng.random_range(-1.0..1.0));
        let lhs: f64 = col.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let back = col2im(&g, 1, 2, 5, 4, 3, 3, 1, 2).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let x = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_nearest(&x, 3).unwrap();
        assert_eq!(up.dims(), (1, 1, 6, 6));
        assert_eq!(up.get(0, 0, 5, 5), 4.0);
        assert_eq!(up.get(0, 0, 0, 2), 1.0);
        let back = upsample_nearest_backward(&up, 3).unwrap();
        assert_eq!(back.get(0, 0, 0, 0), 9.0);
    }
}
