//! Desk-scale quantization-aware training.
//!
//! Backward passes are written by hand. The low-rank factors, sparse
//! values, and full-precision convolutions are smooth paths with exact
//! analytic gradients; the binarized branch trains its latent weight
//! through a straight-through estimator (identity clipped to |x| ≤ 1,
//! zero outside) for the sign, with the scale factors differentiated
//! analytically using the sign subgradient (0 at 0) for |·|.
//!
//! [`train_toy`] distills a compressed student against its full-precision
//! teacher with plain gradient descent on a mean-squared distillation
//! loss. The batch is drawn once from the texture stream and reused every
//! iteration, so a zero learning rate yields a constant loss trace and a
//! fixed seed reproduces the run bit for bit. Sparse coordinates never
//! move; only their values do. After every latent update the binary
//! branch re-packs its sign plane and recomputes its scale vector.

use crate::bitmat::{sign_quantize, xnor_popcount_gemm};
use crate::branches::activation_abs_means;
use crate::dense::{
    col2im, im2col, matmul, matmul_nt, upsample_nearest_backward, DenseMatrix, Tensor4,
};
use crate::error::{Error, Result};
use crate::layer::{
    leaky_relu, tensor_to_tokens, FpConvLayer, FpToyModel, LayerKind, ThreeBranchLayer, ToyModel,
    LEAKY_SLOPE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight-through estimator for Sign: the hardtanh derivative,
/// 1 inside [−1, 1] (endpoints included), 0 outside.
pub fn ste_clip_grad(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Subgradient of |x| used when differentiating the scale means: ±1 off
/// zero, 0 at zero.
fn abs_subgrad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Forward sign convention (Sign(0) = +1), as a float.
fn sign_plus(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Mean squared error between two equally shaped activations.
pub fn distill_loss(student_out: &Tensor4, teacher_out: &Tensor4) -> Result<f64> {
    if student_out.dims() != teacher_out.dims() {
        return Err(Error::shape(format!(
            "distill loss on {:?} vs {:?}",
            student_out.dims(),
            teacher_out.dims()
        )));
    }
    let n = student_out.data().len() as f64;
    Ok(student_out
        .data()
        .iter()
        .zip(teacher_out.data())
        .map(|(&s, &t)| (s - t) * (s - t))
        .sum::<f64>()
        / n)
}

/// Gradients for one compressed layer; shapes mirror the parameters.
#[derive(Debug, Clone)]
pub struct GradSet {
    pub d_b_mat: DenseMatrix,
    pub d_a_mat: DenseMatrix,
    /// One slot per sparse entry, in coordinate order.
    pub d_sparse_values: Vec<f64>,
    /// Transposed (n×m) like the latent it mirrors.
    pub d_latent: DenseMatrix,
}

/// Backward pass of a compressed layer in token form.
///
/// `upstream` is ∂loss/∂output (N×n). Returns the parameter gradients and
/// ∂loss/∂input (N×m). The binary branch routes its sign paths through
/// [`ste_clip_grad`] on both the latent and the input side.
pub fn layer_backward_tokens(
    l: &ThreeBranchLayer,
    x_in: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<(GradSet, DenseMatrix)> {
    let (m, n) = (l.in_features(), l.out_features());
    if x_in.cols() != m || upstream.cols() != n || x_in.rows() != upstream.rows() {
        return Err(Error::shape(format!(
            "backward shapes: x {}x{}, upstream {}x{}, layer {}x{}",
            x_in.rows(),
            x_in.cols(),
            upstream.rows(),
            upstream.cols(),
            m,
            n
        )));
    }
    let rows = x_in.rows();

    // Low-rank branch: out = (x·B)·A.
    let b = l.lrmb().b_mat();
    let a = l.lrmb().a_mat();
    let hidden = matmul(x_in, b)?; // N×r
    let d_a_mat = matmul(&hidden.transpose(), upstream)?; // r×n
    let g_at = matmul_nt(upstream, a)?; // N×r
    let d_b_mat = matmul(&x_in.transpose(), &g_at)?; // m×r
    let mut d_input = matmul_nt(&g_at, b)?; // N×m

    // Sparse branch: out[i, col] += x[i, row]·v.
    let mut d_sparse_values = Vec::with_capacity(l.smb().k());
    for e in l.smb().entries() {
        let mut dv = 0.0;
        for i in 0..rows {
            let g = upstream.get(i, e.col);
            dv += x_in.get(i, e.row) * g;
            let cur = d_input.get(i, e.row);
            d_input.set(i, e.row, cur + e.value * g);
        }
        d_sparse_values.push(dv);
    }

    // Binary branch: out[i,c] = raw[i,c]·a[i]·k[c].
    let latent = l.bmb().latent(); // n×m
    let k_vec = l.bmb().k_vec();
    let x_bits = sign_quantize(x_in)?;
    let raw = xnor_popcount_gemm(&x_bits, l.bmb().packed())?;
    let a_scale = activation_abs_means(x_in);
    let mf = m as f64;

    let mut d_latent = DenseMatrix::zeros(n, m);
    for c in 0..n {
        // Accumulate both latent paths row by row:
        //   sign path  (through Sign(L), STE-gated):  k[c]·Σᵢ G·a·sign(x)
        //   scale path (through k[c], analytic):      (Σᵢ G·a·raw)·sign₀(L)/m
        let mut q = 0.0;
        let mut p_row = vec![0.0; m];
        for i in 0..rows {
            let ga = upstream.get(i, c) * a_scale[i];
            if ga == 0.0 {
                continue;
            }
            q += ga * raw.get(i, c) as f64;
            for j in 0..m {
                p_row[j] += ga * sign_plus(x_in.get(i, j));
            }
        }
        for j in 0..m {
            let lcj = latent.get(c, j);
            let g = ste_clip_grad(lcj) * k_vec[c] * p_row[j] + q * abs_subgrad(lcj) / mf;
            d_latent.set(c, j, g);
        }
    }

    // Input side of the binary branch.
    for i in 0..rows {
        let mut t = 0.0;
        let mut r_row = vec![0.0; m];
        for c in 0..n {
            let gk = upstream.get(i, c) * k_vec[c];
            if gk == 0.0 {
                continue;
            }
            t += gk * raw.get(i, c) as f64;
            for j in 0..m {
                r_row[j] += gk * sign_plus(latent.get(c, j));
            }
        }
        for j in 0..m {
            let xij = x_in.get(i, j);
            let g = ste_clip_grad(xij) * a_scale[i] * r_row[j] + t * abs_subgrad(xij) / mf;
            let cur = d_input.get(i, j);
            d_input.set(i, j, cur + g);
        }
    }

    Ok((
        GradSet {
            d_b_mat,
            d_a_mat,
            d_sparse_values,
            d_latent,
        },
        d_input,
    ))
}

/// Conv-kind wrapper: im2col the input, run the token backward, scatter
/// the input gradient back to image shape.
pub fn layer_backward_conv(
    l: &ThreeBranchLayer,
    x_in: &Tensor4,
    upstream: &Tensor4,
) -> Result<(GradSet, Tensor4)> {
    let LayerKind::Conv { kh, kw, pad, stride } = l.kind() else {
        return Err(Error::shape("conv backward on a linear layer"));
    };
    let (toks, h_out, w_out) = l.conv_tokens(x_in)?;
    if upstream.dims() != (x_in.n, l.out_channels(), h_out, w_out) {
        return Err(Error::shape(format!(
            "upstream {:?} does not match conv output {:?}",
            upstream.dims(),
            (x_in.n, l.out_channels(), h_out, w_out)
        )));
    }
    let g_toks = tensor_to_tokens(upstream);
    let (grads, d_toks) = layer_backward_tokens(l, &toks, &g_toks)?;
    let d_input = col2im(&d_toks, x_in.n, x_in.c, x_in.h, x_in.w, kh, kw, pad, stride)?;
    Ok((grads, d_input))
}

/// Analytic backward of a full-precision convolution. Returns
/// (∂W, ∂bias, ∂input).
pub fn fp_conv_backward(
    l: &FpConvLayer,
    x_in: &Tensor4,
    upstream: &Tensor4,
) -> Result<(DenseMatrix, Vec<f64>, Tensor4)> {
    let (kh, kw, pad, stride) = l.spatial();
    let col = im2col(x_in, kh, kw, pad, stride)?;
    let g = tensor_to_tokens(upstream);
    if g.rows() != col.rows() || g.cols() != l.out_channels() {
        return Err(Error::shape(format!(
            "conv backward: upstream {:?} vs expected {} tokens x {} channels",
            upstream.dims(),
            col.rows(),
            l.out_channels()
        )));
    }
    let d_weight = matmul(&g.transpose(), &col)?; // C_out × K
    let d_bias: Vec<f64> = (0..l.out_channels())
        .map(|c| (0..g.rows()).map(|i| g.get(i, c)).sum())
        .collect();
    let d_col = matmul(&g, l.weight())?; // tokens × K
    let d_input = col2im(&d_col, x_in.n, x_in.c, x_in.h, x_in.w, kh, kw, pad, stride)?;
    Ok((d_weight, d_bias, d_input))
}

/// Training hyperparameters. The defaults mirror the reference setup:
/// learning rate 2·10⁻⁵ and batch size 8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            iterations: 200,
            batch: 8,
            seed: 0,
        }
    }
}

/// Seeded generator of band-limited textures: each channel is a small sum
/// of random low-frequency sinusoids, so images are smooth but not flat.
#[derive(Debug, Clone)]
pub struct TextureStream {
    rng: ChaCha8Rng,
    channels: usize,
    height: usize,
    width: usize,
    waves: usize,
    amplitude: f64,
    max_cycles: f64,
}

impl TextureStream {
    pub fn new(seed: u64, channels: usize, height: usize, width: usize) -> TextureStream {
        TextureStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            channels,
            height,
            width,
            waves: 4,
            amplitude: 4.0,
            max_cycles: 3.0,
        }
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> TextureStream {
        self.amplitude = amplitude;
        self
    }

    /// Bandwidth limit in cycles per image edge.
    pub fn with_max_cycles(mut self, max_cycles: f64) -> TextureStream {
        self.max_cycles = max_cycles;
        self
    }

    /// Next batch of `n` high-resolution textures.
    pub fn next_batch(&mut self, n: usize) -> Tensor4 {
        let mut out = Tensor4::zeros(n, self.channels, self.height, self.width);
        for img in 0..n {
            for c in 0..self.channels {
                for _ in 0..self.waves {
                    let amp = self.amplitude / self.waves as f64
                        * self.rng.random_range(0.5..1.0);
                    let fy = self.rng.random_range(-self.max_cycles..self.max_cycles);
                    let fx = self.rng.random_range(-self.max_cycles..self.max_cycles);
                    let phase = self.rng.random_range(0.0..std::f64::consts::TAU);
                    for y in 0..self.height {
                        for x in 0..self.width {
                            let arg = std::f64::consts::TAU
                                * (fy * y as f64 / self.height as f64
                                    + fx * x as f64 / self.width as f64)
                                + phase;
                            let cur = out.get(img, c, y, x);
                            out.set(img, c, y, x, cur + amp * arg.sin());
                        }
                    }
                }
            }
        }
        out
    }
}

/// Mean over `factor`×`factor` blocks; the low-resolution counterpart of a
/// texture batch.
pub fn box_downsample(x: &Tensor4, factor: usize) -> Result<Tensor4> {
    if factor == 0 || x.h % factor != 0 || x.w % factor != 0 {
        return Err(Error::shape(format!(
            "box downsample: {}x{} not divisible by {}",
            x.h, x.w, factor
        )));
    }
    let mut out = Tensor4::zeros(x.n, x.c, x.h / factor, x.w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h / factor {
                for xx in 0..x.w / factor {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += x.get(n, c, y * factor + dy, xx * factor + dx);
                        }
                    }
                    out.set(n, c, y, xx, acc * inv);
                }
            }
        }
    }
    Ok(out)
}

struct ForwardTrace {
    /// Input to each body layer.
    body_in: Vec<Tensor4>,
    /// Post-residual, pre-rectifier output of each body layer.
    body_z: Vec<Tensor4>,
    up: Tensor4,
    out: Tensor4,
}

fn forward_trace(model: &ToyModel, img: &Tensor4) -> Result<ForwardTrace> {
    let head_out = model.head.forward(img)?;
    let nb = model.body.len();
    let mut body_in = Vec::with_capacity(nb);
    let mut body_z = Vec::with_capacity(nb);
    let mut x = head_out;
    for (i, layer) in model.body.iter().enumerate() {
        body_in.push(x.clone());
        let y = layer.forward_conv(&x)?;
        let z = if layer.in_channels() == layer.out_channels() {
            x.add(&y)?
        } else {
            y
        };
        body_z.push(z.clone());
        x = if i + 1 < nb { leaky_relu(&z, LEAKY_SLOPE) } else { z };
    }
    let up = crate::dense::upsample_nearest(&x, model.upsample)?;
    let out = model.tail.forward(&up)?;
    Ok(ForwardTrace {
        body_in,
        body_z,
        up,
        out,
    })
}

struct ModelGrads {
    head: (DenseMatrix, Vec<f64>),
    body: Vec<GradSet>,
    tail: (DenseMatrix, Vec<f64>),
}

fn backward_trace(
    model: &ToyModel,
    img: &Tensor4,
    trace: &ForwardTrace,
    d_out: &Tensor4,
) -> Result<ModelGrads> {
    let (d_tail_w, d_tail_b, d_up) = fp_conv_backward(&model.tail, &trace.up, d_out)?;
    let mut d = upsample_nearest_backward(&d_up, model.upsample)?;
    let nb = model.body.len();
    let mut body = vec![None; nb];
    for i in (0..nb).rev() {
        if i + 1 < nb {
            // Undo the rectifier between layer i and i+1.
            let z = &trace.body_z[i];
            let mut gated = d.clone();
            for (g, &zv) in gated.data_mut().iter_mut().zip(z.data()) {
                if zv < 0.0 {
                    *g *= LEAKY_SLOPE;
                }
            }
            d = gated;
        }
        let layer = &model.body[i];
        let (grads, d_in) = layer_backward_conv(layer, &trace.body_in[i], &d)?;
        d = if layer.in_channels() == layer.out_channels() {
            d_in.add(&d)?
        } else {
            d_in
        };
        body[i] = Some(grads);
    }
    let (d_head_w, d_head_b, _) = fp_conv_backward(&model.head, img, &d)?;
    Ok(ModelGrads {
        head: (d_head_w, d_head_b),
        body: body.into_iter().map(|g| g.unwrap()).collect(),
        tail: (d_tail_w, d_tail_b),
    })
}

fn sgd_step(model: &mut ToyModel, grads: &ModelGrads, lr: f64) -> Result<()> {
    let step_conv = |layer: &mut FpConvLayer, dw: &DenseMatrix, db: &[f64]| -> Result<()> {
        let w = layer.weight().sub(&dw.scale(lr))?;
        let b: Vec<f64> = layer
            .bias()
            .iter()
            .zip(db)
            .map(|(&v, &g)| v - lr * g)
            .collect();
        layer.set_params(w, b)
    };
    step_conv(&mut model.head, &grads.head.0, &grads.head.1)?;
    step_conv(&mut model.tail, &grads.tail.0, &grads.tail.1)?;
    for (layer, g) in model.body.iter_mut().zip(&grads.body) {
        let b = layer.lrmb().b_mat().sub(&g.d_b_mat.scale(lr))?;
        let a = layer.lrmb().a_mat().sub(&g.d_a_mat.scale(lr))?;
        layer.lrmb_mut().set_factors(b, a)?;
        let values: Vec<f64> = layer
            .smb()
            .entries()
            .iter()
            .zip(&g.d_sparse_values)
            .map(|(e, &dv)| e.value - lr * dv)
            .collect();
        layer.smb_mut().set_values(&values)?;
        let latent = layer.bmb().latent().sub(&g.d_latent.scale(lr))?;
        layer.bmb_mut().set_latent(latent)?;
    }
    Ok(())
}

/// Distills `student` against `teacher` with plain gradient descent on the
/// mean-squared distillation loss. Returns the per-iteration loss trace
/// (the loss of the batch each step was computed on, before the update).
pub fn train_toy(
    student: &mut ToyModel,
    teacher: &FpToyModel,
    stream: &mut TextureStream,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if !cfg.learning_rate.is_finite() || cfg.learning_rate < 0.0 {
        return Err(Error::InvalidArgument(
            "learning rate must be finite and non-negative".into(),
        ));
    }
    if student.upsample != teacher.upsample {
        return Err(Error::shape("student and teacher upsample factors differ"));
    }
    let hr = stream.next_batch(cfg.batch);
    let lr_in = box_downsample(&hr, student.upsample)?;
    let teacher_out = teacher.forward(&lr_in)?;

    let mut trace = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let fwd = forward_trace(student, &lr_in)?;
        let loss = distill_loss(&fwd.out, &teacher_out)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at iteration {iter}"
            )));
        }
        trace.push(loss);

        let numel = fwd.out.data().len() as f64;
        let mut d_out = fwd.out.clone();
        for (d, &t) in d_out.data_mut().iter_mut().zip(teacher_out.data()) {
            *d = 2.0 * (*d - t) / numel;
        }
        let grads = backward_trace(student, &lr_in, &fwd, &d_out)?;
        sgd_step(student, &grads, cfg.learning_rate)?;
    }
    Ok(trace)
}
