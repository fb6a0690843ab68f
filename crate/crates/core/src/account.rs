//! Parameter/operation accounting, PSNR, and per-branch frequency analysis.
//!
//! Counting convention: binary parameters weigh 1/32 of a full-precision
//! parameter and binary operations 1/64 of a full-precision operation, so
//! `params_total = params_fp + params_bin/32` and
//! `ops_total = ops_fp + ops_bin/64`.
//!
//! Per compressed layer with token count N:
//! * binary params = m·n (the latent plane), binary ops = N·m·n;
//! * FP params = r·(m+n) low-rank factors + k sparse values + n scale
//!   entries (sparse coordinate indices live in the checkpoint, not here);
//! * FP ops = N·r·(m+n) low-rank + N·k sparse + N·m activation-scale
//!   means + 2·N·n scale application.
//!
//! Per full-precision conv with token count N: params = C_out·K + C_out,
//! ops = N·K·C_out + N·C_out (bias adds). Elementwise nonlinearities and
//! nearest-neighbor upsampling are not counted.

use crate::dense::{conv_out_extent, Tensor4};
use crate::error::{Error, Result};
use crate::layer::{FpConvLayer, LayerKind, ThreeBranchLayer, ToyModel};

/// Cost slice for one layer of the report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub index: usize,
    pub label: &'static str,
    pub params_fp: u64,
    pub params_bin: u64,
    pub ops_fp: u64,
    pub ops_bin: u64,
}

/// Model-level cost record. Totals are derived, never stored, so they
/// always honor the /32 and /64 convention.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub params_fp: u64,
    pub params_bin: u64,
    pub ops_fp: u64,
    pub ops_bin: u64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn params_total(&self) -> f64 {
        self.params_fp as f64 + self.params_bin as f64 / 32.0
    }

    pub fn ops_total(&self) -> f64 {
        self.ops_fp as f64 + self.ops_bin as f64 / 64.0
    }

    /// Line-oriented text form, one summary line per field and one line
    /// per layer.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("params_fp {}\n", self.params_fp));
        out.push_str(&format!("params_bin {}\n", self.params_bin));
        out.push_str(&format!("params_total {}\n", self.params_total()));
        out.push_str(&format!("ops_fp {}\n", self.ops_fp));
        out.push_str(&format!("ops_bin {}\n", self.ops_bin));
        out.push_str(&format!("ops_total {}\n", self.ops_total()));
        for l in &self.layers {
            out.push_str(&format!(
                "layer {} {} params_fp {} params_bin {} ops_fp {} ops_bin {}\n",
                l.index, l.label, l.params_fp, l.params_bin, l.ops_fp, l.ops_bin
            ));
        }
        out
    }
}

/// Cost of one compressed layer at the given token count.
pub fn three_branch_layer_cost(l: &ThreeBranchLayer, n_tokens: u64) -> LayerCost {
    let m = l.in_features() as u64;
    let n = l.out_features() as u64;
    let r = l.lrmb().rank() as u64;
    let k = l.smb().k() as u64;
    LayerCost {
        index: 0,
        label: if l.kind().is_conv() { "conv" } else { "linear" },
        params_fp: r * (m + n) + k + n,
        params_bin: m * n,
        ops_fp: n_tokens * r * (m + n) + n_tokens * k + n_tokens * m + 2 * n_tokens * n,
        ops_bin: n_tokens * m * n,
    }
}

/// Cost of one full-precision conv at the given token count.
pub fn fp_conv_layer_cost(l: &FpConvLayer, n_tokens: u64) -> LayerCost {
    let kk = l.in_features() as u64;
    let c_out = l.out_channels() as u64;
    LayerCost {
        index: 0,
        label: "fp_conv",
        params_fp: c_out * kk + c_out,
        params_bin: 0,
        ops_fp: n_tokens * kk * c_out + n_tokens * c_out,
        ops_bin: 0,
    }
}

fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
) -> Result<(usize, usize)> {
    Ok((
        conv_out_extent(h, kh, pad, stride)?,
        conv_out_extent(w, kw, pad, stride)?,
    ))
}

/// Walks the model once with the given input dims and batch size,
/// accumulating per-layer costs.
pub fn cost_report(
    model: &ToyModel,
    input_dims: (usize, usize, usize),
    batch: usize,
) -> Result<CostReport> {
    let (c, mut h, mut w) = input_dims;
    if c != model.head.in_channels() {
        return Err(Error::shape(format!(
            "input has {c} channels, head expects {}",
            model.head.in_channels()
        )));
    }
    let mut layers = Vec::new();
    let mut index = 0;

    let (kh, kw, pad, stride) = model.head.spatial();
    let (nh, nw) = conv_out_dims(h, w, kh, kw, pad, stride)?;
    let mut cost = fp_conv_layer_cost(&model.head, (batch * nh * nw) as u64);
    cost.index = index;
    layers.push(cost);
    index += 1;
    h = nh;
    w = nw;

    for l in &model.body {
        let LayerKind::Conv { kh, kw, pad, stride } = l.kind() else {
            return Err(Error::shape("toy model body layer is not conv"));
        };
        let (nh, nw) = conv_out_dims(h, w, kh, kw, pad, stride)?;
        let mut cost = three_branch_layer_cost(l, (batch * nh * nw) as u64);
        cost.index = index;
        layers.push(cost);
        index += 1;
        h = nh;
        w = nw;
    }

    h *= model.upsample;
    w *= model.upsample;
    let (kh, kw, pad, stride) = model.tail.spatial();
    let (nh, nw) = conv_out_dims(h, w, kh, kw, pad, stride)?;
    let mut cost = fp_conv_layer_cost(&model.tail, (batch * nh * nw) as u64);
    cost.index = index;
    layers.push(cost);

    let report = CostReport {
        params_fp: layers.iter().map(|l| l.params_fp).sum(),
        params_bin: layers.iter().map(|l| l.params_bin).sum(),
        ops_fp: layers.iter().map(|l| l.ops_fp).sum(),
        ops_bin: layers.iter().map(|l| l.ops_bin).sum(),
        layers,
    };
    Ok(report)
}

/// Peak signal-to-noise ratio in dB, capped at 100 (the zero-MSE
/// convention).
pub fn psnr(a: &Tensor4, b: &Tensor4, peak: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "psnr on {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument("peak must be positive".into()));
    }
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(100.0))
}

fn reflect(i: isize, size: usize) -> usize {
    let mut r = i;
    if r < 0 {
        r = -r;
    }
    let last = size as isize - 1;
    if r > last {
        r = 2 * last - r;
    }
    r.clamp(0, last) as usize
}

/// 3×3 box blur with reflect padding, per channel and image.
fn box_blur3(t: &Tensor4) -> Tensor4 {
    let mut out = Tensor4::zeros(t.n, t.c, t.h, t.w);
    for n in 0..t.n {
        for c in 0..t.c {
            for y in 0..t.h {
                for x in 0..t.w {
                    let mut acc = 0.0;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            acc += t.get(
                                n,
                                c,
                                reflect(y as isize + dy, t.h),
                                reflect(x as isize + dx, t.w),
                            );
                        }
                    }
                    out.set(n, c, y, x, acc / 9.0);
                }
            }
        }
    }
    out
}

/// High-frequency energy: squared norm of the map minus its 3×3 box blur.
fn high_freq_energy(t: &Tensor4) -> f64 {
    let blurred = box_blur3(t);
    t.data()
        .iter()
        .zip(blurred.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum()
}

/// Shares of high-frequency energy produced by the (binary, low-rank,
/// sparse) branches of a conv layer on the given input. All-zero totals
/// report as (0, 0, 0).
pub fn branch_freq_proportion(
    l: &ThreeBranchLayer,
    x: &Tensor4,
) -> Result<(f64, f64, f64)> {
    if !l.kind().is_conv() {
        return Err(Error::InvalidArgument(
            "frequency analysis needs a conv (spatial) layer".into(),
        ));
    }
    let (bmb, lrmb, smb) = l.forward_conv_split(x)?;
    let eb = high_freq_energy(&bmb);
    let el = high_freq_energy(&lrmb);
    let es = high_freq_energy(&smb);
    let total = eb + el + es;
    if total == 0.0 {
        return Ok((0.0, 0.0, 0.0));
    }
    Ok((eb / total, el / total, es / total))
}
