//! Bit-packed ±1 matrices and the exact XNOR-popcount GEMM.
//!
//! A [`BitMatrix`] stores one bit per element, row-major, 64 columns per
//! word, least-significant bit first. Bit 1 encodes +1 and bit 0 encodes −1.
//! Padding bits past the last column of each row are always zero, and the
//! GEMM masks the final word of every row so padding never leaks into a
//! popcount.
//!
//! For ±1 row vectors `a`, `b` of length `m` the dot product is recovered
//! exactly from bit operations:
//!
//! ```text
//! Σ aⱼ·bⱼ = 2·popcount(XNOR(a, b)) − m
//! ```
//!
//! All results are exact integers; there is no floating-point in this module.

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};

const WORD_BITS: usize = 64;

/// Row-major bit-packed ±1 matrix. Bit 1 ↔ +1, bit 0 ↔ −1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    /// All-(−1) matrix (every bit zero).
    pub fn zeros(rows: usize, cols: usize) -> BitMatrix {
        let wpr = Self::words_per_row_for(cols);
        BitMatrix {
            rows,
            cols,
            words: vec![0u64; rows * wpr],
        }
    }

    /// Rebuilds a matrix from raw words, validating length and padding bits.
    pub fn from_words(rows: usize, cols: usize, words: Vec<u64>) -> Result<BitMatrix> {
        let wpr = Self::words_per_row_for(cols);
        if words.len() != rows * wpr {
            return Err(Error::shape(format!(
                "bit matrix {rows}x{cols} needs {} words, got {}",
                rows * wpr,
                words.len()
            )));
        }
        let m = BitMatrix { rows, cols, words };
        if !m.padding_is_zero() {
            return Err(Error::InvalidInput(
                "bit matrix has nonzero padding bits".into(),
            ));
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Words per row (each row padded to a whole number of 64-bit words).
    pub fn words_per_row(&self) -> usize {
        Self::words_per_row_for(self.cols)
    }

    fn words_per_row_for(cols: usize) -> usize {
        cols.div_ceil(WORD_BITS)
    }

    /// Raw packed storage, row-major.
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    fn row_words(&self, r: usize) -> &[u64] {
        let wpr = self.words_per_row();
        &self.words[r * wpr..(r + 1) * wpr]
    }

    /// Mask selecting the valid bits of the last word in a row.
    fn last_word_mask(&self) -> u64 {
        let rem = self.cols % WORD_BITS;
        if rem == 0 {
            !0u64
        } else {
            (1u64 << rem) - 1
        }
    }

    /// Returns the ±1 value at (r, c) as +1 or −1.
    pub fn get(&self, r: usize, c: usize) -> i64 {
        debug_assert!(r < self.rows && c < self.cols);
        let wpr = self.words_per_row();
        let word = self.words[r * wpr + c / WORD_BITS];
        if (word >> (c % WORD_BITS)) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    fn set_bit(&mut self, r: usize, c: usize) {
        let wpr = self.words_per_row();
        self.words[r * wpr + c / WORD_BITS] |= 1u64 << (c % WORD_BITS);
    }

    fn padding_is_zero(&self) -> bool {
        let mask = self.last_word_mask();
        let wpr = self.words_per_row();
        if wpr == 0 {
            return true;
        }
        (0..self.rows).all(|r| self.words[r * wpr + wpr - 1] & !mask == 0)
    }

    /// Unpacks into a dense ±1.0 matrix.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(r, c, self.get(r, c) as f64);
            }
        }
        out
    }
}

/// Packs the element-wise sign of a dense matrix. Sign(0) = +1.
pub fn sign_quantize(m: &DenseMatrix) -> Result<BitMatrix> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidInput(
            "sign_quantize requires at least one row and column".into(),
        ));
    }
    let mut out = BitMatrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let v = m.get(r, c);
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite entry {v} at ({r}, {c})"
                )));
            }
            if v >= 0.0 {
                out.set_bit(r, c);
            }
        }
    }
    Ok(out)
}

/// Dense integer matrix holding exact ±1 GEMM results.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl IntMatrix {
    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }
}

/// Exact ±1 matrix product via XNOR and popcount.
///
/// `x` is N×m and `w` is stored transposed as n×m (one row per output
/// column), so both operands stream row-wise. Entry (i, j) of the N×n
/// result is the integer dot product of row i of `x` with row j of `w`.
pub fn xnor_popcount_gemm(x: &BitMatrix, w: &BitMatrix) -> Result<IntMatrix> {
    if x.cols != w.cols {
        return Err(Error::shape(format!(
            "xnor gemm: x is {}x{} but w is {}x{} (inner dims must match)",
            x.rows, x.cols, w.rows, w.cols
        )));
    }
    let m = x.cols as i64;
    let wpr = x.words_per_row();
    let mask = x.last_word_mask();
    let mut data = vec![0i64; x.rows * w.rows];
    for i in 0..x.rows {
        let xi = x.row_words(i);
        for j in 0..w.rows {
            let wj = w.row_words(j);
            let mut agree: i64 = 0;
            for k in 0..wpr {
                let mut xnor = !(xi[k] ^ wj[k]);
                if k + 1 == wpr {
                    xnor &= mask;
                }
                agree += xnor.count_ones() as i64;
            }
            data[i * w.rows + j] = 2 * agree - m;
        }
    }
    Ok(IntMatrix {
        rows: x.rows,
        cols: w.rows,
        data,
    })
}
