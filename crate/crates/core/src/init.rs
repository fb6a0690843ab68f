//! Decoupled initialization of the three branches from a pretrained weight.
//!
//! The pipeline factors a weight matrix `W` in three steps so each branch
//! owns a disjoint portion of it:
//!
//! 1. truncated SVD: `B·A` keeps the top-r components, `W′ = W − B·A`;
//! 2. top-k extraction: the k largest-magnitude entries of `W′` move into
//!    the sparse branch, leaving exact zeros behind;
//! 3. the remainder becomes the binarized branch's latent weight.
//!
//! By construction `B·A + densify(sparse) + W_bin` reconstructs `W` up to
//! the rounding of the two subtractions. [`InitReport`] records how much
//! residual the final binarization leaves, next to the residual of
//! binarizing `W` directly — the ordering of those two numbers is the
//! whole point of the scheme.

use crate::branches::{BmbParams, LrmbParams, SmbParams, SparseEntry};
use crate::dense::{matmul, DenseMatrix};
use crate::error::{Error, Result};

/// Jacobi sweep cap; well-conditioned desk-scale matrices converge in
/// fewer than ten sweeps.
const MAX_SWEEPS: usize = 64;

/// Relative threshold below which a column pair counts as orthogonal.
const ORTHO_TOL: f64 = 1e-14;

/// Diagnostics from [`decoupled_init`].
#[derive(Debug, Clone, PartialEq)]
pub struct InitReport {
    /// ‖W − α·Sign(W)‖²_F with the scalar scale α = mean|W|.
    pub frob_sq_direct: f64,
    /// ‖W − B·A − W_sparse − scale(k)·Sign(W_bin)‖²_F after three-branch init.
    pub frob_sq_ours: f64,
    /// All singular values of W, descending.
    pub singular_values: Vec<f64>,
}

/// Best rank-r factorization `W ≈ B·A` with singular values absorbed into
/// the left factor: `B = U_r·diag(σ₁..σ_r)`, `A = V_rᵀ`.
///
/// Returns the factors together with the full descending singular-value
/// sequence. Uses one-sided Jacobi rotations; fails with a numerical error
/// if the sweep cap is exhausted.
pub fn truncated_svd(
    w: &DenseMatrix,
    r: usize,
) -> Result<(DenseMatrix, DenseMatrix, Vec<f64>)> {
    let (m, n) = (w.rows(), w.cols());
    let min_dim = m.min(n);
    if r == 0 || r > min_dim {
        return Err(Error::InvalidArgument(format!(
            "rank {r} out of range for {m}x{n} matrix"
        )));
    }
    if !w.is_finite() {
        return Err(Error::InvalidInput("non-finite weight entry".into()));
    }

    let transposed = m < n;
    let work = if transposed { w.transpose() } else { w.clone() };
    let (u, v, sigmas) = jacobi_svd(&work)?;
    // work = u·diag(σ)·vᵀ; if we factored wᵀ the roles of u and v swap.
    let (left, right) = if transposed { (v, u) } else { (u, v) };

    let b = DenseMatrix::from_fn(m, r, |i, j| left.get(i, j) * sigmas[j]);
    let a = DenseMatrix::from_fn(r, n, |i, j| right.get(j, i));
    Ok((b, a, sigmas))
}

/// One-sided Jacobi SVD of an m×n matrix with m ≥ n. Returns thin
/// `(u: m×n, v: n×n, σ: n descending)`.
fn jacobi_svd(a: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix, Vec<f64>)> {
    let (m, n) = (a.rows(), a.cols());
    debug_assert!(m >= n);
    // Column-major working copies keep the rotations cache-friendly.
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut u, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = u.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut sigmas = Vec::with_capacity(n);
    let mut u_out = DenseMatrix::zeros(m, n);
    let mut v_out = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        sigmas.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u_out.set(i, dst, u[src][i] / sigma);
            }
        }
        for i in 0..n {
            v_out.set(i, dst, v[src][i]);
        }
    }
    Ok((u_out, v_out, sigmas))
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = c * *x - s * *y;
        let xq = s * *x + c * *y;
        *x = xp;
        *y = xq;
    }
}

/// Moves the k largest-magnitude entries of `w_prime` into a sparse
/// container and returns the remainder with those positions set to zero.
///
/// Ties at the threshold magnitude break in row-major order, so exactly k
/// entries are selected and the result is reproducible.
pub fn extract_topk(w_prime: &DenseMatrix, k: usize) -> Result<(SmbParams, DenseMatrix)> {
    let (m, n) = (w_prime.rows(), w_prime.cols());
    if k > m * n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {m}x{n} entry count"
        )));
    }
    if !w_prime.is_finite() {
        return Err(Error::InvalidInput("non-finite entry in top-k input".into()));
    }

    let mut order: Vec<usize> = (0..m * n).collect();
    order.sort_by(|&i, &j| {
        let (ai, aj) = (w_prime.data()[i].abs(), w_prime.data()[j].abs());
        aj.partial_cmp(&ai).unwrap().then(i.cmp(&j))
    });

    let mut selected: Vec<usize> = order[..k].to_vec();
    selected.sort_unstable();

    let mut remainder = w_prime.clone();
    let entries: Vec<SparseEntry> = selected
        .iter()
        .map(|&idx| {
            let (row, col) = (idx / n, idx % n);
            let value = w_prime.data()[idx];
            remainder.set(row, col, 0.0);
            SparseEntry { row, col, value }
        })
        .collect();
    Ok((SmbParams::new(m, n, entries)?, remainder))
}

/// Runs the full decoupling chain on an m×n weight, producing the three
/// branch parameter sets and the residual report.
pub fn decoupled_init(
    w: &DenseMatrix,
    r: usize,
    k: usize,
) -> Result<(LrmbParams, SmbParams, BmbParams, InitReport)> {
    let (b, a, sigmas) = truncated_svd(w, r)?;
    let ba = matmul(&b, &a)?;
    let w_prime = w.sub(&ba)?;
    let (sparse, w_bin) = extract_topk(&w_prime, k)?;
    let bmb = BmbParams::from_latent(w_bin.transpose())?;
    let lrmb = LrmbParams::new(b, a)?;

    let report = InitReport {
        frob_sq_direct: direct_binarization_residual(w),
        frob_sq_ours: three_branch_residual(w, &ba, &sparse, &w_bin, bmb.k_vec()),
        singular_values: sigmas,
    };
    Ok((lrmb, sparse, bmb, report))
}

/// ‖W − α·Sign(W)‖²_F with α = mean|W| over the whole matrix.
fn direct_binarization_residual(w: &DenseMatrix) -> f64 {
    let count = (w.rows() * w.cols()) as f64;
    let alpha = w.data().iter().map(|v| v.abs()).sum::<f64>() / count;
    w.data()
        .iter()
        .map(|&v| {
            let s = if v >= 0.0 { 1.0 } else { -1.0 };
            let d = v - alpha * s;
            d * d
        })
        .sum()
}

fn three_branch_residual(
    w: &DenseMatrix,
    ba: &DenseMatrix,
    sparse: &SmbParams,
    w_bin: &DenseMatrix,
    k_vec: &[f64],
) -> f64 {
    let dense_sparse = sparse.densify();
    let mut acc = 0.0;
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let s = if w_bin.get(i, j) >= 0.0 { 1.0 } else { -1.0 };
            let d = w.get(i, j) - ba.get(i, j) - dense_sparse.get(i, j) - k_vec[j] * s;
            acc += d * d;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(values: &[f64]) -> DenseMatrix {
        DenseMatrix::from_fn(values.len(), values.len(), |r, c| {
            if r == c {
                values[r]
            } else {
                0.0
            }
        })
    }

    #[test]
    fn svd_of_diagonal_truncates_to_largest() {
        let w = diag(&[3.0, 2.0, 1.0]);
        let (b, a, sigmas) = truncated_svd(&w, 1).unwrap();
        assert_eq!(sigmas, vec![3.0, 2.0, 1.0]);
        let ba = matmul(&b, &a).unwrap();
        let residual = w.sub(&ba).unwrap().frob_sq();
        assert!((residual - 5.0).abs() < 1e-10, "residual {residual}");
        assert!((ba.get(0, 0) - 3.0).abs() < 1e-12);
        assert!(ba.get(1, 1).abs() < 1e-12);
    }

    #[test]
    fn svd_full_rank_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(m, n) in &[(5usize, 7usize), (7, 5), (6, 6)] {
            let w = DenseMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let (b, a, _) = truncated_svd(&w, m.min(n)).unwrap();
            let ba = matmul(&b, &a).unwrap();
            let err = w.sub(&ba).unwrap().frob_sq().sqrt();
            let scale = w.frob_sq().sqrt();
            assert!(err <= 1e-10 * scale.max(1.0), "err {err} at {m}x{n}");
        }
    }

    #[test]
    fn svd_rank_out_of_range() {
        let w = DenseMatrix::zeros(3, 4);
        assert!(truncated_svd(&w, 0).is_err());
        assert!(truncated_svd(&w, 4).is_err());
    }

    #[test]
    fn svd_residual_matches_tail_energy() {
        // Eckart–Young on a small random matrix: ‖W − BA‖² = Σ_{i>r} σ_i².
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let w = DenseMatrix::from_fn(12, 9, |_, _| rng.random_range(-1.0..1.0));
        for r in 1..=9 {
            let (b, a, sigmas) = truncated_svd(&w, r).unwrap();
            let res = w.sub(&matmul(&b, &a).unwrap()).unwrap().frob_sq();
            let tail: f64 = sigmas[r..].iter().map(|s| s * s).sum();
            assert!(
                (res - tail).abs() <= 1e-8 * tail.max(1e-12),
                "r={r}: residual {res} vs tail {tail}"
            );
        }
    }

    #[test]
    fn topk_single_outlier() {
        let w = DenseMatrix::from_rows(&[vec![0.9, -0.1], vec![0.2, -3.0]]);
        let (sparse, rest) = extract_topk(&w, 1).unwrap();
        assert_eq!(sparse.k(), 1);
        let e = sparse.entries()[0];
        assert_eq!((e.row, e.col, e.value), (1, 1, -3.0));
        assert_eq!(
            rest,
            DenseMatrix::from_rows(&[vec![0.9, -0.1], vec![0.2, 0.0]])
        );
    }

    #[test]
    fn topk_zero_is_noop() {
        let w = DenseMatrix::from_rows(&[vec![0.5, -0.25]]);
        let (sparse, rest) = extract_topk(&w, 0).unwrap();
        assert_eq!(sparse.k(), 0);
        assert_eq!(rest, w);
    }

    #[test]
    fn topk_breaks_ties_row_major() {
        let w = DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![1.0, 1.0]]);
        let (sparse, _) = extract_topk(&w, 3).unwrap();
        let coords: Vec<(usize, usize)> =
            sparse.entries().iter().map(|e| (e.row, e.col)).collect();
        assert_eq!(coords, vec![(0, 0), (0, 1), (1, 0)]);
    }

    #[test]
    fn topk_selection_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (m, n, k) = (16usize, 16usize, 32usize);
        let w = DenseMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let (sparse, rest) = extract_topk(&w, k).unwrap();

        // Sort-all-entries oracle with the same tie rule.
        let mut all: Vec<(usize, f64)> = w.data().iter().cloned().enumerate().collect();
        all.sort_by(|a, b| b.1.abs().partial_cmp(&a.1.abs()).unwrap().then(a.0.cmp(&b.0)));
        let mut oracle: Vec<(usize, usize, f64)> = all[..k]
            .iter()
            .map(|&(idx, v)| (idx / n, idx % n, v))
            .collect();
        oracle.sort_by_key(|&(r, c, _)| (r, c));
        let got: Vec<(usize, usize, f64)> =
            sparse.entries().iter().map(|e| (e.row, e.col, e.value)).collect();
        assert_eq!(got, oracle);

        // Same selected values ⇒ identical removed energy, summed in the
        // same order on both sides.
        let removed: f64 = got.iter().map(|&(_, _, v)| v * v).sum();
        let oracle_sum: f64 = oracle.iter().map(|&(_, _, v)| v * v).sum();
        assert_eq!(removed, oracle_sum);
        let drop = w.frob_sq() - rest.frob_sq();
        assert!((drop - removed).abs() <= 1e-12 * removed.max(1.0));
    }

    #[test]
    fn topk_k_too_large() {
        let w = DenseMatrix::zeros(2, 2);
        assert!(extract_topk(&w, 5).is_err());
    }

    #[test]
    fn decoupled_identity_full_rank_leaves_nothing() {
        let w = DenseMatrix::identity(4);
        let (lrmb, sparse, bmb, report) = decoupled_init(&w, 4, 0).unwrap();
        let ba = matmul(lrmb.b_mat(), lrmb.a_mat()).unwrap();
        assert!(w.sub(&ba).unwrap().frob_sq() < 1e-20);
        assert_eq!(sparse.k(), 0);
        assert!(bmb.latent().frob_sq() < 1e-20);
        assert!(bmb.k_vec().iter().all(|&v| v < 1e-12));
        assert!(report.frob_sq_ours < 1e-18);
    }

    #[test]
    fn decoupled_diagonal_hand_case() {
        let w = diag(&[3.0, 2.0, 1.0]);
        let (_, sparse, bmb, _) = decoupled_init(&w, 1, 1).unwrap();
        assert_eq!(sparse.k(), 1);
        let e = sparse.entries()[0];
        assert_eq!((e.row, e.col), (1, 1));
        assert!((e.value - 2.0).abs() < 1e-12);
        // Remaining latent is diag(0,0,1) transposed.
        let latent = bmb.latent();
        assert!((latent.get(2, 2) - 1.0).abs() < 1e-12);
        assert!(latent.get(0, 0).abs() < 1e-12);
        assert!(latent.get(1, 1).abs() < 1e-12);
    }

    #[test]
    fn decoupled_reconstruction_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for &(m, n, r, k) in &[(10usize, 14usize, 3usize, 20usize), (14, 10, 4, 0), (8, 8, 8, 12)] {
            let w = DenseMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let (lrmb, sparse, bmb, _) = decoupled_init(&w, r, k).unwrap();
            let ba = matmul(lrmb.b_mat(), lrmb.a_mat()).unwrap();
            let rebuilt = ba
                .add(&sparse.densify())
                .unwrap()
                .add(&bmb.latent().transpose())
                .unwrap();
            let err = w.sub(&rebuilt).unwrap().frob_sq().sqrt();
            assert!(err <= 1e-12 * w.frob_sq().sqrt().max(1.0));
        }
    }

    #[test]
    fn extracted_positions_binarize_to_plus_one() {
        // Positions zeroed by the top-k extraction hold exact zeros, and
        // Sign(0) = +1 in the packed plane.
        let w = DenseMatrix::from_rows(&[vec![0.1, -5.0], vec![0.2, 0.3]]);
        let (_, sparse, bmb, _) = decoupled_init(&w, 1, 1).unwrap();
        let e = sparse.entries()[0];
        // latent is transposed: (row, col) in weight space is (col, row) there.
        assert_eq!(bmb.latent().get(e.col, e.row), 0.0);
        assert_eq!(bmb.packed().get(e.col, e.row), 1);
    }

    #[test]
    fn decoupled_beats_direct_on_gaussian_sample() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let w = DenseMatrix::from_fn(32, 32, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let (_, _, _, report) = decoupled_init(&w, 8, 64).unwrap();
        assert!(report.frob_sq_ours < report.frob_sq_direct);
    }
}
