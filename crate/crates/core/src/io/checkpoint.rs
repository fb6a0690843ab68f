//! FPW0 and BMC1 checkpoint codecs.
//!
//! FPW0 (full-precision weights): magic, u32 layer count, then per layer a
//! kind byte (0 linear, 1 conv), u32 in-features m, u32 out-features n,
//! conv extras (u8 kh/kw/pad/stride), the m×n effective weight (x·W token
//! convention) as f32 row-major, and n f32 biases.
//!
//! BMC1 (compressed model): same header shape; kind 0/1 layers carry the
//! three branches — u32 r, B (m·r) and A (r·n) as f32, u32 k and k sorted
//! (u32 row, u32 col, f32 value) triples, the packed sign plane as
//! n·ceil(m/64) little-endian u64 words, and n f32 scale entries. Kind 2
//! layers are full-precision convs stored like FPW0 conv layers. The
//! latent weight is not serialized; loading reconstructs it as
//! `scale[c]·sign` per channel, which re-signs and re-averages to exactly
//! the stored plane and scales.

use super::{push_f32, push_u32, push_u64, Reader};
use crate::bitmat::BitMatrix;
use crate::branches::{BmbParams, LrmbParams, SmbParams, SparseEntry};
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::init::InitReport;
use crate::layer::{sparse_budget, FpConvLayer, FpToyModel, LayerKind, ThreeBranchLayer, ToyModel};

const FPW_MAGIC: &[u8; 4] = b"FPW0";
const BMC_MAGIC: &[u8; 4] = b"BMC1";

/// Layer shape tag shared by both formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Linear,
    Conv {
        kh: u8,
        kw: u8,
        pad: u8,
        stride: u8,
    },
}

impl RecordKind {
    fn to_layer_kind(self) -> LayerKind {
        match self {
            RecordKind::Linear => LayerKind::Linear,
            RecordKind::Conv { kh, kw, pad, stride } => LayerKind::Conv {
                kh: kh as usize,
                kw: kw as usize,
                pad: pad as usize,
                stride: stride as usize,
            },
        }
    }
}

/// One full-precision layer: effective m×n weight plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FpLayerRecord {
    pub kind: RecordKind,
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Parsed FPW0 file.
#[derive(Debug, Clone, PartialEq)]
pub struct FpCheckpoint {
    pub layers: Vec<FpLayerRecord>,
}

/// One BMC1 layer.
#[derive(Debug, Clone, PartialEq)]
pub enum BmcLayer {
    Compressed(ThreeBranchLayer),
    Fp(FpConvLayer),
}

/// Parsed BMC1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct BmcCheckpoint {
    pub layers: Vec<BmcLayer>,
}

fn read_kind_dims(r: &mut Reader, conv_kind: u8) -> Result<(RecordKind, usize, usize)> {
    let kind_off = r.offset();
    let kind = r.u8("layer kind")?;
    let m = r.u32("in features")? as usize;
    let n = r.u32("out features")? as usize;
    if m == 0 || n == 0 {
        return Err(Error::format(kind_off, "zero layer dimension"));
    }
    let kind = if kind == conv_kind {
        RecordKind::Conv {
            kh: r.u8("kh")?,
            kw: r.u8("kw")?,
            pad: r.u8("pad")?,
            stride: r.u8("stride")?,
        }
    } else if kind == 0 {
        RecordKind::Linear
    } else {
        return Err(Error::format(kind_off, format!("unknown layer kind {kind}")));
    };
    Ok((kind, m, n))
}

fn read_matrix(r: &mut Reader, rows: usize, cols: usize, what: &str) -> Result<DenseMatrix> {
    let start = r.offset();
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.f32(what)?);
    }
    let m = DenseMatrix::from_vec(rows, cols, data).expect("sized above");
    if !m.is_finite() {
        return Err(Error::format(start, format!("non-finite value in {what}")));
    }
    Ok(m)
}

fn write_kind_dims(out: &mut Vec<u8>, kind: RecordKind, m: usize, n: usize) {
    match kind {
        RecordKind::Linear => {
            out.push(0);
            push_u32(out, m as u32);
            push_u32(out, n as u32);
        }
        RecordKind::Conv { kh, kw, pad, stride } => {
            out.push(1);
            push_u32(out, m as u32);
            push_u32(out, n as u32);
            out.extend_from_slice(&[kh, kw, pad, stride]);
        }
    }
}

pub fn parse_fpw(bytes: &[u8]) -> Result<FpCheckpoint> {
    let mut r = Reader::new(bytes);
    r.expect_magic(FPW_MAGIC)?;
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let (kind, m, n) = read_kind_dims(&mut r, 1)?;
        let weight = read_matrix(&mut r, m, n, "weight")?;
        let bias_off = r.offset();
        let mut bias = Vec::with_capacity(n);
        for _ in 0..n {
            bias.push(r.f32("bias")?);
        }
        if !bias.iter().all(|v| v.is_finite()) {
            return Err(Error::format(bias_off, "non-finite bias"));
        }
        layers.push(FpLayerRecord { kind, weight, bias });
    }
    r.finish()?;
    Ok(FpCheckpoint { layers })
}

pub fn serialize_fpw(cp: &FpCheckpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FPW_MAGIC);
    push_u32(&mut out, cp.layers.len() as u32);
    for l in &cp.layers {
        write_kind_dims(&mut out, l.kind, l.weight.rows(), l.weight.cols());
        for &v in l.weight.data() {
            push_f32(&mut out, v);
        }
        for &v in &l.bias {
            push_f32(&mut out, v);
        }
    }
    out
}

pub fn parse_bmc(bytes: &[u8]) -> Result<BmcCheckpoint> {
    let mut r = Reader::new(bytes);
    r.expect_magic(BMC_MAGIC)?;
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let kind_off = r.offset();
        let kind = r.u8("layer kind")?;
        match kind {
            0 | 1 => {
                let m = r.u32("in features")? as usize;
                let n = r.u32("out features")? as usize;
                if m == 0 || n == 0 {
                    return Err(Error::format(kind_off, "zero layer dimension"));
                }
                let layer_kind = if kind == 1 {
                    LayerKind::Conv {
                        kh: r.u8("kh")? as usize,
                        kw: r.u8("kw")? as usize,
                        pad: r.u8("pad")? as usize,
                        stride: r.u8("stride")? as usize,
                    }
                } else {
                    LayerKind::Linear
                };
                let rank = r.u32("rank")? as usize;
                let b_mat = read_matrix(&mut r, m, rank, "B factor")?;
                let a_mat = read_matrix(&mut r, rank, n, "A factor")?;
                let lrmb = LrmbParams::new(b_mat, a_mat).map_err(|e| {
                    Error::format(kind_off, format!("bad low-rank factors: {e}"))
                })?;

                let k = r.u32("sparse count")? as usize;
                let triples_off = r.offset();
                let mut entries = Vec::with_capacity(k);
                for _ in 0..k {
                    let row = r.u32("sparse row")? as usize;
                    let col = r.u32("sparse col")? as usize;
                    let value = r.f32("sparse value")?;
                    entries.push(SparseEntry { row, col, value });
                }
                let smb = SmbParams::new(m, n, entries).map_err(|e| {
                    Error::format(triples_off, format!("bad sparse entries: {e}"))
                })?;

                let words_off = r.offset();
                let wpr = m.div_ceil(64);
                let mut words = Vec::with_capacity(n * wpr);
                for _ in 0..n * wpr {
                    words.push(r.u64("packed word")?);
                }
                let packed = BitMatrix::from_words(n, m, words).map_err(|e| {
                    Error::format(words_off, format!("bad packed plane: {e}"))
                })?;

                let kvec_off = r.offset();
                let mut k_vec = Vec::with_capacity(n);
                for _ in 0..n {
                    k_vec.push(r.f32("scale entry")?);
                }
                if !k_vec.iter().all(|v| v.is_finite() && *v >= 0.0) {
                    return Err(Error::format(kvec_off, "invalid scale entry"));
                }

                // Rebuild the latent as scale·sign per channel; re-signing it
                // must reproduce the stored plane exactly.
                let latent = DenseMatrix::from_fn(n, m, |c, j| {
                    k_vec[c] * packed.get(c, j) as f64
                });
                let bmb = BmbParams::from_latent(latent)
                    .map_err(|e| Error::format(words_off, format!("bad binary branch: {e}")))?;
                if bmb.packed() != &packed {
                    return Err(Error::format(
                        words_off,
                        "packed plane inconsistent with scales",
                    ));
                }
                let layer = ThreeBranchLayer::new(layer_kind, lrmb, smb, bmb)
                    .map_err(|e| Error::format(kind_off, format!("bad layer: {e}")))?;
                layers.push(BmcLayer::Compressed(layer));
            }
            2 => {
                let m = r.u32("in features")? as usize;
                let n = r.u32("out features")? as usize;
                if m == 0 || n == 0 {
                    return Err(Error::format(kind_off, "zero layer dimension"));
                }
                let kh = r.u8("kh")? as usize;
                let kw = r.u8("kw")? as usize;
                let pad = r.u8("pad")? as usize;
                let stride = r.u8("stride")? as usize;
                let weight = read_matrix(&mut r, m, n, "fp weight")?;
                let bias_off = r.offset();
                let mut bias = Vec::with_capacity(n);
                for _ in 0..n {
                    bias.push(r.f32("fp bias")?);
                }
                if !bias.iter().all(|v| v.is_finite()) {
                    return Err(Error::format(bias_off, "non-finite bias"));
                }
                let layer = FpConvLayer::new(weight.transpose(), bias, kh, kw, pad, stride)
                    .map_err(|e| Error::format(kind_off, format!("bad fp layer: {e}")))?;
                layers.push(BmcLayer::Fp(layer));
            }
            other => {
                return Err(Error::format(
                    kind_off,
                    format!("unknown layer kind {other}"),
                ));
            }
        }
    }
    r.finish()?;
    Ok(BmcCheckpoint { layers })
}

pub fn serialize_bmc(cp: &BmcCheckpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BMC_MAGIC);
    push_u32(&mut out, cp.layers.len() as u32);
    for l in &cp.layers {
        match l {
            BmcLayer::Compressed(layer) => {
                let (m, n) = (layer.in_features(), layer.out_features());
                match layer.kind() {
                    LayerKind::Linear => {
                        out.push(0);
                        push_u32(&mut out, m as u32);
                        push_u32(&mut out, n as u32);
                    }
                    LayerKind::Conv { kh, kw, pad, stride } => {
                        out.push(1);
                        push_u32(&mut out, m as u32);
                        push_u32(&mut out, n as u32);
                        out.extend_from_slice(&[kh as u8, kw as u8, pad as u8, stride as u8]);
                    }
                }
                push_u32(&mut out, layer.lrmb().rank() as u32);
                for &v in layer.lrmb().b_mat().data() {
                    push_f32(&mut out, v);
                }
                for &v in layer.lrmb().a_mat().data() {
                    push_f32(&mut out, v);
                }
                push_u32(&mut out, layer.smb().k() as u32);
                for e in layer.smb().entries() {
                    push_u32(&mut out, e.row as u32);
                    push_u32(&mut out, e.col as u32);
                    push_f32(&mut out, e.value);
                }
                for &w in layer.bmb().packed().words() {
                    push_u64(&mut out, w);
                }
                for &v in layer.bmb().k_vec() {
                    push_f32(&mut out, v);
                }
            }
            BmcLayer::Fp(layer) => {
                out.push(2);
                let w_eff = layer.effective_weight();
                push_u32(&mut out, w_eff.rows() as u32);
                push_u32(&mut out, w_eff.cols() as u32);
                let (kh, kw, pad, stride) = layer.spatial();
                out.extend_from_slice(&[kh as u8, kw as u8, pad as u8, stride as u8]);
                for &v in w_eff.data() {
                    push_f32(&mut out, v);
                }
                for &v in layer.bias() {
                    push_f32(&mut out, v);
                }
            }
        }
    }
    out
}

impl FpCheckpoint {
    pub fn from_model(model: &FpToyModel) -> FpCheckpoint {
        let record = |l: &FpConvLayer| {
            let (kh, kw, pad, stride) = l.spatial();
            FpLayerRecord {
                kind: RecordKind::Conv {
                    kh: kh as u8,
                    kw: kw as u8,
                    pad: pad as u8,
                    stride: stride as u8,
                },
                weight: l.effective_weight(),
                bias: l.bias().to_vec(),
            }
        };
        let mut layers = vec![record(&model.head)];
        layers.extend(model.body.iter().map(record));
        layers.push(record(&model.tail));
        FpCheckpoint { layers }
    }

    /// Assembles a toy teacher: first layer is the head, last the tail,
    /// everything between the body. All layers must be conv.
    pub fn to_model(&self, upsample: usize) -> Result<FpToyModel> {
        if self.layers.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "toy topology needs at least head and tail, got {} layers",
                self.layers.len()
            )));
        }
        let convert = |rec: &FpLayerRecord| -> Result<FpConvLayer> {
            let RecordKind::Conv { kh, kw, pad, stride } = rec.kind else {
                return Err(Error::InvalidInput(
                    "toy topology requires conv layers".into(),
                ));
            };
            FpConvLayer::new(
                rec.weight.transpose(),
                rec.bias.clone(),
                kh as usize,
                kw as usize,
                pad as usize,
                stride as usize,
            )
        };
        let head = convert(&self.layers[0])?;
        let tail = convert(self.layers.last().expect("len >= 2"))?;
        let body = self.layers[1..self.layers.len() - 1]
            .iter()
            .map(convert)
            .collect::<Result<Vec<_>>>()?;
        FpToyModel::new(head, body, tail, upsample)
    }
}

impl BmcCheckpoint {
    pub fn from_model(model: &ToyModel) -> BmcCheckpoint {
        let mut layers = vec![BmcLayer::Fp(model.head.clone())];
        layers.extend(
            model
                .body
                .iter()
                .map(|l| BmcLayer::Compressed(l.clone())),
        );
        layers.push(BmcLayer::Fp(model.tail.clone()));
        BmcCheckpoint { layers }
    }

    /// Assembles a runnable student: first and last layers must be
    /// full-precision convs, interior layers compressed convs.
    pub fn to_model(&self, upsample: usize) -> Result<ToyModel> {
        if self.layers.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "toy topology needs at least head and tail, got {} layers",
                self.layers.len()
            )));
        }
        let BmcLayer::Fp(head) = &self.layers[0] else {
            return Err(Error::InvalidInput(
                "first checkpoint layer must be full precision".into(),
            ));
        };
        let BmcLayer::Fp(tail) = self.layers.last().expect("len >= 2") else {
            return Err(Error::InvalidInput(
                "last checkpoint layer must be full precision".into(),
            ));
        };
        let mut body = Vec::new();
        for l in &self.layers[1..self.layers.len() - 1] {
            match l {
                BmcLayer::Compressed(layer) => body.push(layer.clone()),
                BmcLayer::Fp(_) => {
                    return Err(Error::InvalidInput(
                        "interior checkpoint layers must be compressed".into(),
                    ));
                }
            }
        }
        ToyModel::new(head.clone(), body, tail.clone(), upsample)
    }
}

/// Compresses a full-precision checkpoint layer list.
///
/// With two or more layers the first and last stay full precision (linear
/// records become 1×1 convs) and the interior runs the decoupling chain; a
/// single-layer file compresses that layer. Returns per-compressed-layer
/// init reports keyed by position in the layer list.
pub fn compress_checkpoint(
    fp: &FpCheckpoint,
    rank: usize,
    sparsity_mult: usize,
) -> Result<(BmcCheckpoint, Vec<(usize, InitReport)>)> {
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    if fp.layers.is_empty() {
        return Err(Error::InvalidInput("checkpoint has no layers".into()));
    }
    let n_layers = fp.layers.len();
    let mut layers = Vec::with_capacity(n_layers);
    let mut reports = Vec::new();
    for (i, rec) in fp.layers.iter().enumerate() {
        let keep_fp = n_layers >= 2 && (i == 0 || i + 1 == n_layers);
        if keep_fp {
            let (kh, kw, pad, stride) = match rec.kind {
                RecordKind::Conv { kh, kw, pad, stride } => {
                    (kh as usize, kw as usize, pad as usize, stride as usize)
                }
                RecordKind::Linear => (1, 1, 0, 1),
            };
            layers.push(BmcLayer::Fp(FpConvLayer::new(
                rec.weight.transpose(),
                rec.bias.clone(),
                kh,
                kw,
                pad,
                stride,
            )?));
        } else {
            let (m, n) = (rec.weight.rows(), rec.weight.cols());
            let k = sparse_budget(m, n, sparsity_mult);
            let (layer, report) = ThreeBranchLayer::from_weight(
                rec.kind.to_layer_kind(),
                &rec.weight,
                rank.min(m.min(n)),
                k,
            )?;
            layers.push(BmcLayer::Compressed(layer));
            reports.push((i, report));
        }
    }
    Ok((BmcCheckpoint { layers }, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_fpw(seed: u64, shapes: &[(usize, usize)]) -> FpCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = shapes
            .iter()
            .map(|&(c_in, c_out)| FpLayerRecord {
                kind: RecordKind::Conv {
                    kh: 3,
                    kw: 3,
                    pad: 1,
                    stride: 1,
                },
                weight: DenseMatrix::from_fn(c_in * 9, c_out, |_, _| {
                    rng.random_range(-1.0..1.0)
                }),
                bias: (0..c_out).map(|_| rng.random_range(-0.5..0.5)).collect(),
            })
            .collect();
        FpCheckpoint { layers }
    }

    #[test]
    fn fpw_round_trip_is_byte_identical() {
        let mut cp = random_fpw(1, &[(3, 3), (3, 8), (8, 3)]);
        cp.layers.push(FpLayerRecord {
            kind: RecordKind::Linear,
            weight: DenseMatrix::from_fn(5, 4, |r, c| (r * 4 + c) as f64 * 0.25),
            bias: vec![0.0; 4],
        });
        let bytes = serialize_fpw(&cp);
        let parsed = parse_fpw(&bytes).unwrap();
        assert_eq!(serialize_fpw(&parsed), bytes);
    }

    #[test]
    fn bmc_round_trip_is_byte_identical() {
        let cp = random_fpw(2, &[(3, 3), (3, 8), (8, 8), (8, 3)]);
        let (bmc, reports) = compress_checkpoint(&cp, 4, 2).unwrap();
        assert_eq!(reports.len(), 2);
        let bytes = serialize_bmc(&bmc);
        let parsed = parse_bmc(&bytes).unwrap();
        assert_eq!(serialize_bmc(&parsed), bytes);
    }

    #[test]
    fn compress_keeps_first_and_last_fp() {
        let cp = random_fpw(3, &[(3, 3), (3, 6), (6, 3)]);
        let (bmc, reports) = compress_checkpoint(&cp, 2, 2).unwrap();
        assert_eq!(bmc.layers.len(), 3);
        assert!(matches!(bmc.layers[0], BmcLayer::Fp(_)));
        assert!(matches!(bmc.layers[1], BmcLayer::Compressed(_)));
        assert!(matches!(bmc.layers[2], BmcLayer::Fp(_)));
        assert_eq!(reports[0].0, 1);
    }

    #[test]
    fn compress_single_layer_compresses_it() {
        let cp = random_fpw(4, &[(4, 4)]);
        let (bmc, reports) = compress_checkpoint(&cp, 2, 2).unwrap();
        assert_eq!(bmc.layers.len(), 1);
        assert!(matches!(bmc.layers[0], BmcLayer::Compressed(_)));
        assert_eq!(reports.len(), 1);
    }

    #[test]
    fn compress_two_layers_keeps_both_fp() {
        let cp = random_fpw(5, &[(3, 4), (4, 3)]);
        let (bmc, reports) = compress_checkpoint(&cp, 2, 2).unwrap();
        assert!(bmc.layers.iter().all(|l| matches!(l, BmcLayer::Fp(_))));
        assert!(reports.is_empty());
    }

    #[test]
    fn full_rank_identity_layer_reports_zero_residual() {
        let cp = FpCheckpoint {
            layers: vec![FpLayerRecord {
                kind: RecordKind::Linear,
                weight: DenseMatrix::identity(4),
                bias: vec![0.0; 4],
            }],
        };
        let (_, reports) = compress_checkpoint(&cp, 4, 0).unwrap();
        assert!(reports[0].1.frob_sq_ours < 1e-18);
    }

    #[test]
    fn compress_is_deterministic() {
        let cp = random_fpw(6, &[(3, 3), (3, 8), (8, 3)]);
        let a = serialize_bmc(&compress_checkpoint(&cp, 4, 2).unwrap().0);
        let b = serialize_bmc(&compress_checkpoint(&cp, 4, 2).unwrap().0);
        assert_eq!(a, b);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let err = parse_fpw(b"NOPE\x00\x00\x00\x00").unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let cp = random_fpw(7, &[(3, 3)]);
        let bytes = serialize_fpw(&cp);
        let err = parse_fpw(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let cp = random_fpw(8, &[(3, 3)]);
        let mut bytes = serialize_fpw(&cp);
        bytes.push(0);
        assert!(matches!(parse_fpw(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn model_round_trips_through_bmc() {
        let cp = random_fpw(9, &[(3, 3), (3, 6), (6, 6), (6, 3)]);
        let teacher = cp.to_model(4).unwrap();
        let (student, _) = crate::layer::compress_toy(&teacher, 3, 2).unwrap();
        let bmc = BmcCheckpoint::from_model(&student);
        let bytes = serialize_bmc(&bmc);
        let reloaded = parse_bmc(&bytes).unwrap().to_model(4).unwrap();
        assert_eq!(reloaded.body.len(), student.body.len());
        // The reloaded model runs and matches the f32-rounded original.
        let img = crate::dense::Tensor4::from_vec(
            1,
            3,
            4,
            4,
            (0..48).map(|i| (i % 7) as f64).collect(),
        )
        .unwrap();
        let out_a = student.forward(&img).unwrap();
        let out_b = reloaded.forward(&img).unwrap();
        for (a, b) in out_a.data().iter().zip(out_b.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn fpw_teacher_round_trips_exactly_on_f32_weights() {
        // Weights that are exact f32 values survive model->file->model.
        let cp = random_fpw(10, &[(3, 3), (3, 5), (5, 3)]);
        let model = cp.to_model(2).unwrap();
        let back = FpCheckpoint::from_model(&model);
        assert_eq!(serialize_fpw(&back), serialize_fpw(&cp));
    }
}
