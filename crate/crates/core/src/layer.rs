//! Compressed layers, full-precision head/tail convolutions, and toy-model
//! assembly.
//!
//! A [`ThreeBranchLayer`] sums its binarized, low-rank, and sparse branch
//! outputs on the same full-precision input rows. Linear layers operate on
//! token matrices directly; conv layers route through `im2col`, so a 1×1
//! conv and a linear layer of the same dims compute the same thing.
//!
//! The [`ToyModel`] keeps its first and last convolutions full precision and
//! compresses everything in between. Body layers get an identity skip when
//! their channel counts match, with a leaky rectifier between consecutive
//! body layers.

use crate::branches::{
    bmb_forward, lrmb_forward, smb_forward, BmbParams, LrmbParams, SmbParams,
};
use crate::dense::{
    conv_out_extent, im2col, matmul_nt, upsample_nearest, DenseMatrix, Tensor4,
};
use crate::error::{Error, Result};
use crate::init::{decoupled_init, InitReport};

/// Slope of the leaky rectifier between body layers.
pub const LEAKY_SLOPE: f64 = 0.2;

/// How a layer consumes its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Token matrix in, token matrix out.
    Linear,
    /// Image tensor in/out via im2col. Stride-1 3×3 pad-1 is the toy default.
    Conv {
        kh: usize,
        kw: usize,
        pad: usize,
        stride: usize,
    },
}

impl LayerKind {
    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv { .. })
    }

    fn validate(&self) -> Result<()> {
        if let LayerKind::Conv { kh, kw, stride, .. } = *self {
            if kh == 0 || kw == 0 || stride == 0 {
                return Err(Error::InvalidArgument(
                    "conv kernel and stride must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }

    fn window(&self) -> usize {
        match *self {
            LayerKind::Linear => 1,
            LayerKind::Conv { kh, kw, .. } => kh * kw,
        }
    }
}

/// One compressed layer: three branches over shared (m, n) dims.
///
/// For conv kind, `m = C_in·kh·kw` and `n = C_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeBranchLayer {
    kind: LayerKind,
    lrmb: LrmbParams,
    smb: SmbParams,
    bmb: BmbParams,
}

impl ThreeBranchLayer {
    pub fn new(
        kind: LayerKind,
        lrmb: LrmbParams,
        smb: SmbParams,
        bmb: BmbParams,
    ) -> Result<ThreeBranchLayer> {
        kind.validate()?;
        let (m, n) = (lrmb.in_features(), lrmb.out_features());
        if smb.rows() != m || smb.cols() != n {
            return Err(Error::shape(format!(
                "sparse branch is {}x{}, expected {}x{}",
                smb.rows(),
                smb.cols(),
                m,
                n
            )));
        }
        if bmb.in_features() != m || bmb.out_features() != n {
            return Err(Error::shape(format!(
                "binary branch is {}x{} (transposed), expected in {} out {}",
                bmb.out_features(),
                bmb.in_features(),
                m,
                n
            )));
        }
        if m % kind.window() != 0 {
            return Err(Error::shape(format!(
                "in features {m} not divisible by kernel window {}",
                kind.window()
            )));
        }
        Ok(ThreeBranchLayer {
            kind,
            lrmb,
            smb,
            bmb,
        })
    }

    /// Builds the layer from an effective m×n weight (`x · W` convention)
    /// via the decoupled initialization chain.
    pub fn from_weight(
        kind: LayerKind,
        w_eff: &DenseMatrix,
        rank: usize,
        k: usize,
    ) -> Result<(ThreeBranchLayer, InitReport)> {
        let (lrmb, smb, bmb, report) = decoupled_init(w_eff, rank, k)?;
        Ok((ThreeBranchLayer::new(kind, lrmb, smb, bmb)?, report))
    }

    /// Direct-binarization baseline: the whole weight goes into the binary
    /// branch; the side branches are present but zero (rank-`rank` zero
    /// factors, empty sparse list).
    pub fn direct_binarized(
        kind: LayerKind,
        w_eff: &DenseMatrix,
        rank: usize,
    ) -> Result<ThreeBranchLayer> {
        let (m, n) = (w_eff.rows(), w_eff.cols());
        let lrmb = LrmbParams::new(DenseMatrix::zeros(m, rank), DenseMatrix::zeros(rank, n))?;
        let smb = SmbParams::empty(m, n);
        let bmb = BmbParams::from_latent(w_eff.transpose())?;
        ThreeBranchLayer::new(kind, lrmb, smb, bmb)
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn in_features(&self) -> usize {
        self.lrmb.in_features()
    }

    pub fn out_features(&self) -> usize {
        self.lrmb.out_features()
    }

    /// Input channels for conv kind (`m / (kh·kw)`); equals `m` for linear.
    pub fn in_channels(&self) -> usize {
        self.in_features() / self.kind.window()
    }

    pub fn out_channels(&self) -> usize {
        self.out_features()
    }

    pub fn lrmb(&self) -> &LrmbParams {
        &self.lrmb
    }

    pub fn smb(&self) -> &SmbParams {
        &self.smb
    }

    pub fn bmb(&self) -> &BmbParams {
        &self.bmb
    }

    pub fn lrmb_mut(&mut self) -> &mut LrmbParams {
        &mut self.lrmb
    }

    pub fn smb_mut(&mut self) -> &mut SmbParams {
        &mut self.smb
    }

    pub fn bmb_mut(&mut self) -> &mut BmbParams {
        &mut self.bmb
    }

    /// Sum of the three branch forwards on the same token rows.
    pub fn forward_tokens(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let (b, l, s) = self.branch_tokens(x)?;
        b.add(&l)?.add(&s)
    }

    /// The three branch outputs separately (binary, low-rank, sparse).
    pub fn branch_tokens(
        &self,
        x: &DenseMatrix,
    ) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
        Ok((
            bmb_forward(&self.bmb, x)?,
            lrmb_forward(&self.lrmb, x)?,
            smb_forward(&self.smb, x)?,
        ))
    }

    /// Linear-kind forward on a token matrix.
    pub fn forward_linear(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if self.kind != LayerKind::Linear {
            return Err(Error::shape("token input on a conv layer"));
        }
        self.forward_tokens(x)
    }

    /// Conv-kind forward: im2col, branch sum, reshape back to an image.
    pub fn forward_conv(&self, x: &Tensor4) -> Result<Tensor4> {
        let (toks, h_out, w_out) = self.conv_tokens(x)?;
        let out = self.forward_tokens(&toks)?;
        tokens_to_tensor(&out, x.n, h_out, w_out)
    }

    /// Conv-kind forward with the three branch images kept separate
    /// (binary, low-rank, sparse).
    pub fn forward_conv_split(&self, x: &Tensor4) -> Result<(Tensor4, Tensor4, Tensor4)> {
        let (toks, h_out, w_out) = self.conv_tokens(x)?;
        let (b, l, s) = self.branch_tokens(&toks)?;
        Ok((
            tokens_to_tensor(&b, x.n, h_out, w_out)?,
            tokens_to_tensor(&l, x.n, h_out, w_out)?,
            tokens_to_tensor(&s, x.n, h_out, w_out)?,
        ))
    }

    /// im2col of the input, with output spatial extents.
    pub fn conv_tokens(&self, x: &Tensor4) -> Result<(DenseMatrix, usize, usize)> {
        let LayerKind::Conv { kh, kw, pad, stride } = self.kind else {
            return Err(Error::shape("image input on a linear layer"));
        };
        if x.c != self.in_channels() {
            return Err(Error::shape(format!(
                "input has {} channels, layer expects {}",
                x.c,
                self.in_channels()
            )));
        }
        let h_out = conv_out_extent(x.h, kh, pad, stride)?;
        let w_out = conv_out_extent(x.w, kw, pad, stride)?;
        Ok((im2col(x, kh, kw, pad, stride)?, h_out, w_out))
    }
}

/// Reshapes a token matrix (rows = n·h·w pixels, cols = channels) into an
/// image tensor.
pub fn tokens_to_tensor(tokens: &DenseMatrix, n: usize, h: usize, w: usize) -> Result<Tensor4> {
    if tokens.rows() != n * h * w {
        return Err(Error::shape(format!(
            "{} token rows cannot reshape to {n}x{h}x{w} pixels",
            tokens.rows()
        )));
    }
    let c = tokens.cols();
    let mut out = Tensor4::zeros(n, c, h, w);
    for img in 0..n {
        for y in 0..h {
            for x in 0..w {
                let row = (img * h + y) * w + x;
                for ch in 0..c {
                    out.set(img, ch, y, x, tokens.get(row, ch));
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`tokens_to_tensor`]: one row per pixel, one column per channel.
pub fn tensor_to_tokens(t: &Tensor4) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(t.n * t.h * t.w, t.c);
    for img in 0..t.n {
        for y in 0..t.h {
            for x in 0..t.w {
                let row = (img * t.h + y) * t.w + x;
                for ch in 0..t.c {
                    out.set(row, ch, t.get(img, ch, y, x));
                }
            }
        }
    }
    out
}

/// Full-precision convolution layer (used for the model head and tail,
/// and for every layer of the teacher).
#[derive(Debug, Clone, PartialEq)]
pub struct FpConvLayer {
    /// C_out × (C_in·kh·kw), rows flattened channel-major like im2col columns.
    weight: DenseMatrix,
    bias: Vec<f64>,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
}

impl FpConvLayer {
    pub fn new(
        weight: DenseMatrix,
        bias: Vec<f64>,
        kh: usize,
        kw: usize,
        pad: usize,
        stride: usize,
    ) -> Result<FpConvLayer> {
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "conv kernel and stride must be at least 1".into(),
            ));
        }
        if weight.cols() % (kh * kw) != 0 {
            return Err(Error::shape(format!(
                "weight columns {} not divisible by window {}",
                weight.cols(),
                kh * kw
            )));
        }
        if bias.len() != weight.rows() {
            return Err(Error::shape(format!(
                "bias length {} vs {} output channels",
                bias.len(),
                weight.rows()
            )));
        }
        if !weight.is_finite() || !bias.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite conv parameter".into()));
        }
        Ok(FpConvLayer {
            weight,
            bias,
            kh,
            kw,
            pad,
            stride,
        })
    }

    pub fn weight(&self) -> &DenseMatrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn set_params(&mut self, weight: DenseMatrix, bias: Vec<f64>) -> Result<()> {
        if weight.rows() != self.weight.rows() || weight.cols() != self.weight.cols() {
            return Err(Error::shape("conv weight dims changed"));
        }
        let next = FpConvLayer::new(weight, bias, self.kh, self.kw, self.pad, self.stride)?;
        *self = next;
        Ok(())
    }

    pub fn spatial(&self) -> (usize, usize, usize, usize) {
        (self.kh, self.kw, self.pad, self.stride)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.cols() / (self.kh * self.kw)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    /// Effective m×n weight in the `x · W` token convention (the transpose
    /// of the stored C_out × K matrix).
    pub fn effective_weight(&self) -> DenseMatrix {
        self.weight.transpose()
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        if x.c != self.in_channels() {
            return Err(Error::shape(format!(
                "input has {} channels, conv expects {}",
                x.c,
                self.in_channels()
            )));
        }
        let h_out = conv_out_extent(x.h, self.kh, self.pad, self.stride)?;
        let w_out = conv_out_extent(x.w, self.kw, self.pad, self.stride)?;
        let col = im2col(x, self.kh, self.kw, self.pad, self.stride)?;
        let mut toks = matmul_nt(&col, &self.weight)?;
        for row in 0..toks.rows() {
            for (c, &b) in self.bias.iter().enumerate() {
                let v = toks.get(row, c) + b;
                toks.set(row, c, v);
            }
        }
        tokens_to_tensor(&toks, x.n, h_out, w_out)
    }
}

/// Leaky rectifier; the derivative convention at zero follows the
/// non-negative side (slope 1).
pub fn leaky_relu(x: &Tensor4, slope: f64) -> Tensor4 {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Student model: FP head, compressed conv body, nearest-neighbor
/// upsampling, FP tail.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub head: FpConvLayer,
    pub body: Vec<ThreeBranchLayer>,
    pub tail: FpConvLayer,
    pub upsample: usize,
}

/// Full-precision reference model with the same wiring as [`ToyModel`];
/// serves as the distillation teacher and as compression input.
#[derive(Debug, Clone, PartialEq)]
pub struct FpToyModel {
    pub head: FpConvLayer,
    pub body: Vec<FpConvLayer>,
    pub tail: FpConvLayer,
    pub upsample: usize,
}

fn check_chain(mut prev_out: usize, ins_outs: &[(usize, usize)], tail_in: usize) -> Result<()> {
    for &(cin, cout) in ins_outs {
        if cin != prev_out {
            return Err(Error::shape(format!(
                "channel chain broken: layer expects {cin} channels, previous emits {prev_out}"
            )));
        }
        prev_out = cout;
    }
    if tail_in != prev_out {
        return Err(Error::shape(format!(
            "tail expects {tail_in} channels, body emits {prev_out}"
        )));
    }
    Ok(())
}

impl ToyModel {
    pub fn new(
        head: FpConvLayer,
        body: Vec<ThreeBranchLayer>,
        tail: FpConvLayer,
        upsample: usize,
    ) -> Result<ToyModel> {
        if upsample == 0 {
            return Err(Error::InvalidArgument("upsample factor must be ≥ 1".into()));
        }
        for l in &body {
            if !l.kind().is_conv() {
                return Err(Error::shape("toy model body layers must be conv"));
            }
        }
        let chain: Vec<(usize, usize)> = body
            .iter()
            .map(|l| (l.in_channels(), l.out_channels()))
            .collect();
        check_chain(head.out_channels(), &chain, tail.in_channels())?;
        Ok(ToyModel {
            head,
            body,
            tail,
            upsample,
        })
    }

    pub fn forward(&self, img: &Tensor4) -> Result<Tensor4> {
        let mut x = self.head.forward(img)?;
        let nb = self.body.len();
        for (i, layer) in self.body.iter().enumerate() {
            let y = layer.forward_conv(&x)?;
            let y = if layer.in_channels() == layer.out_channels() {
                x.add(&y)?
            } else {
                y
            };
            x = if i + 1 < nb { leaky_relu(&y, LEAKY_SLOPE) } else { y };
        }
        let up = upsample_nearest(&x, self.upsample)?;
        self.tail.forward(&up)
    }

    /// Activation feeding `body[index]`: the head output pushed through the
    /// preceding body layers with the usual skip/rectifier wiring.
    pub fn body_input(&self, img: &Tensor4, index: usize) -> Result<Tensor4> {
        if index >= self.body.len() {
            return Err(Error::InvalidArgument(format!(
                "body index {index} out of range ({} layers)",
                self.body.len()
            )));
        }
        let mut x = self.head.forward(img)?;
        let nb = self.body.len();
        for (i, layer) in self.body.iter().take(index).enumerate() {
            let y = layer.forward_conv(&x)?;
            let y = if layer.in_channels() == layer.out_channels() {
                x.add(&y)?
            } else {
                y
            };
            x = if i + 1 < nb { leaky_relu(&y, LEAKY_SLOPE) } else { y };
        }
        Ok(x)
    }
}

impl FpToyModel {
    pub fn new(
        head: FpConvLayer,
        body: Vec<FpConvLayer>,
        tail: FpConvLayer,
        upsample: usize,
    ) -> Result<FpToyModel> {
        if upsample == 0 {
            return Err(Error::InvalidArgument("upsample factor must be ≥ 1".into()));
        }
        let chain: Vec<(usize, usize)> = body
            .iter()
            .map(|l| (l.in_channels(), l.out_channels()))
            .collect();
        check_chain(head.out_channels(), &chain, tail.in_channels())?;
        Ok(FpToyModel {
            head,
            body,
            tail,
            upsample,
        })
    }

    pub fn forward(&self, img: &Tensor4) -> Result<Tensor4> {
        let mut x = self.head.forward(img)?;
        let nb = self.body.len();
        for (i, layer) in self.body.iter().enumerate() {
            let y = layer.forward(&x)?;
            let y = if layer.in_channels() == layer.out_channels() {
                x.add(&y)?
            } else {
                y
            };
            x = if i + 1 < nb { leaky_relu(&y, LEAKY_SLOPE) } else { y };
        }
        let up = upsample_nearest(&x, self.upsample)?;
        self.tail.forward(&up)
    }

    /// Random model on the standard toy topology: 3×3 stride-1 pad-1
    /// convolutions, an `img_ch → img_ch` head, the given body channel
    /// chain, and a tail back to `img_ch`. Weights are Gaussian with
    /// 1/√fan_in scale, biases zero.
    pub fn seeded(seed: u64, img_ch: usize, body_out: &[usize], upsample: usize) -> FpToyModel {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |c_in: usize, c_out: usize| {
            let fan = (c_in * 9) as f64;
            let scale = 1.0 / fan.sqrt();
            let weight = DenseMatrix::from_fn(c_out, c_in * 9, |_, _| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            });
            FpConvLayer::new(weight, vec![0.0; c_out], 3, 3, 1, 1).unwrap()
        };
        let head = conv(img_ch, img_ch);
        let mut body = Vec::new();
        let mut prev = img_ch;
        for &c in body_out {
            body.push(conv(prev, c));
            prev = c;
        }
        let tail = conv(prev, img_ch);
        FpToyModel::new(head, body, tail, upsample).unwrap()
    }
}

/// Compresses a full-precision toy model into a three-branch student.
///
/// Every body layer runs through the decoupling chain with the given rank
/// and `k = sparsity_mult · max(m, n)` (clamped to the entry count); head
/// and tail are copied untouched. Returns the per-body-layer init reports.
pub fn compress_toy(
    teacher: &FpToyModel,
    rank: usize,
    sparsity_mult: usize,
) -> Result<(ToyModel, Vec<InitReport>)> {
    let mut body = Vec::with_capacity(teacher.body.len());
    let mut reports = Vec::with_capacity(teacher.body.len());
    for fp in &teacher.body {
        let (kh, kw, pad, stride) = fp.spatial();
        let w_eff = fp.effective_weight();
        let k = sparse_budget(w_eff.rows(), w_eff.cols(), sparsity_mult);
        let (layer, report) = ThreeBranchLayer::from_weight(
            LayerKind::Conv { kh, kw, pad, stride },
            &w_eff,
            rank.min(w_eff.rows().min(w_eff.cols())),
            k,
        )?;
        body.push(layer);
        reports.push(report);
    }
    let model = ToyModel::new(teacher.head.clone(), body, teacher.tail.clone(), teacher.upsample)?;
    Ok((model, reports))
}

/// Direct-binarization student over the same topology (baseline for the
/// initialization comparison).
pub fn direct_binarize_toy(teacher: &FpToyModel, rank: usize) -> Result<ToyModel> {
    let mut body = Vec::with_capacity(teacher.body.len());
    for fp in &teacher.body {
        let (kh, kw, pad, stride) = fp.spatial();
        let w_eff = fp.effective_weight();
        body.push(ThreeBranchLayer::direct_binarized(
            LayerKind::Conv { kh, kw, pad, stride },
            &w_eff,
            rank.min(w_eff.rows().min(w_eff.cols())),
        )?);
    }
    let model = ToyModel::new(teacher.head.clone(), body, teacher.tail.clone(), teacher.upsample)?;
    Ok(model)
}

/// `k = mult · max(m, n)`, clamped so tiny layers stay valid.
pub fn sparse_budget(m: usize, n: usize, mult: usize) -> usize {
    (mult * m.max(n)).min(m * n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn identity_conv1x1(ch: usize) -> FpConvLayer {
        FpConvLayer::new(DenseMatrix::identity(ch), vec![0.0; ch], 1, 1, 0, 1).unwrap()
    }

    #[test]
    fn zero_side_branches_reduce_to_binary_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_matrix(&mut rng, 6, 5);
        let layer = ThreeBranchLayer::direct_binarized(LayerKind::Linear, &w, 2).unwrap();
        let x = random_matrix(&mut rng, 4, 6);
        let out = layer.forward_linear(&x).unwrap();
        let bin = crate::branches::bmb_forward(layer.bmb(), &x).unwrap();
        assert_eq!(out, bin);
    }

    #[test]
    fn branch_sum_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_matrix(&mut rng, 8, 7);
        let (layer, _) = ThreeBranchLayer::from_weight(LayerKind::Linear, &w, 2, 6).unwrap();
        let x = random_matrix(&mut rng, 3, 8);
        let out = layer.forward_linear(&x).unwrap();
        let (b, l, s) = layer.branch_tokens(&x).unwrap();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let want = b.get(i, j) + l.get(i, j) + s.get(i, j);
                assert!((out.get(i, j) - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn one_by_one_conv_equals_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_matrix(&mut rng, 4, 4);
        let conv_kind = LayerKind::Conv {
            kh: 1,
            kw: 1,
            pad: 0,
            stride: 1,
        };
        let (conv_layer, _) = ThreeBranchLayer::from_weight(conv_kind, &w, 2, 4).unwrap();
        let (lin_layer, _) = ThreeBranchLayer::from_weight(LayerKind::Linear, &w, 2, 4).unwrap();

        let img = Tensor4::from_vec(
            1,
            4,
            2,
            2,
            (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let conv_out = conv_layer.forward_conv(&img).unwrap();
        let lin_out = lin_layer.forward_linear(&tensor_to_tokens(&img)).unwrap();
        let conv_tokens = tensor_to_tokens(&conv_out);
        for (a, b) in conv_tokens.data().iter().zip(lin_out.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn initialized_layer_tracks_fp_weight() {
        // A layer initialized from W approximates x·W better than the
        // direct-binarized layer on the same weight.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut wins = 0;
        for trial in 0..20 {
            let mut local = ChaCha8Rng::seed_from_u64(100 + trial);
            let w = DenseMatrix::from_fn(24, 24, |_, _| {
                use rand_distr::{Distribution, StandardNormal};
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut local)
            });
            let x = random_matrix(&mut rng, 6, 24);
            let reference = crate::dense::matmul(&x, &w).unwrap();
            let (ours, _) = ThreeBranchLayer::from_weight(LayerKind::Linear, &w, 4, 48).unwrap();
            let direct = ThreeBranchLayer::direct_binarized(LayerKind::Linear, &w, 4).unwrap();
            let e_ours = ours
                .forward_linear(&x)
                .unwrap()
                .sub(&reference)
                .unwrap()
                .frob_sq();
            let e_direct = direct
                .forward_linear(&x)
                .unwrap()
                .sub(&reference)
                .unwrap()
                .frob_sq();
            if e_ours < e_direct {
                wins += 1;
            }
        }
        assert!(wins >= 19, "initialized layer won only {wins}/20 trials");
    }

    #[test]
    fn identity_pipeline_passes_input_through() {
        // Zeroed body branches + identity 1×1 head/tail + unit upsample:
        // the residual skip makes the whole model the identity map.
        let w_zero = DenseMatrix::zeros(3, 3);
        let body = ThreeBranchLayer::direct_binarized(
            LayerKind::Conv {
                kh: 1,
                kw: 1,
                pad: 0,
                stride: 1,
            },
            &w_zero,
            1,
        )
        .unwrap();
        // direct_binarized of a zero weight still has k_vec = 0 ⇒ zero output.
        let model = ToyModel::new(identity_conv1x1(3), vec![body], identity_conv1x1(3), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = Tensor4::from_vec(
            1,
            3,
            4,
            4,
            (0..48).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let out = model.forward(&img).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn upsample_shape_contract() {
        let teacher = FpToyModel::seeded(1, 3, &[8, 8], 4);
        let (student, _) = compress_toy(&teacher, 4, 2).unwrap();
        let img = Tensor4::zeros(1, 3, 16, 16);
        let out = student.forward(&img).unwrap();
        assert_eq!(out.dims(), (1, 3, 64, 64));
    }

    #[test]
    fn forward_is_deterministic() {
        let teacher = FpToyModel::seeded(2, 3, &[8, 8], 2);
        let (student, _) = compress_toy(&teacher, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let img = Tensor4::from_vec(
            2,
            3,
            6,
            6,
            (0..216).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let a = student.forward(&img).unwrap();
        let b = student.forward(&img).unwrap();
        assert_eq!(a.data(), b.data(), "same bits in, same bits out");
    }

    #[test]
    fn channel_chain_is_validated() {
        let teacher = FpToyModel::seeded(3, 3, &[8], 2);
        let bad_tail = FpConvLayer::new(DenseMatrix::zeros(3, 16 * 9), vec![0.0; 3], 3, 3, 1, 1)
            .unwrap();
        assert!(ToyModel::new(
            teacher.head.clone(),
            compress_toy(&teacher, 2, 2).unwrap().0.body,
            bad_tail,
            2
        )
        .is_err());
    }

    #[test]
    fn conv_rejects_wrong_channel_count() {
        let teacher = FpToyModel::seeded(4, 3, &[8], 2);
        let (student, _) = compress_toy(&teacher, 2, 2).unwrap();
        let img = Tensor4::zeros(1, 5, 8, 8);
        assert!(student.forward(&img).is_err());
    }

    #[test]
    fn sparse_budget_clamps() {
        assert_eq!(sparse_budget(27, 32, 2), 64);
        assert_eq!(sparse_budget(2, 3, 2), 6); // 2·3 > 6 clamped
    }
}
