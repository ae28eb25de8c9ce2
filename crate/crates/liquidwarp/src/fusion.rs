//! Feature-fusion blocks: element-wise addition, mean aggregation, soft
//! gates, and the attentional block with SPADE denormalization.
//!
//! All blocks operate on caller-supplied `C x H x W` feature maps. The
//! attention is per pixel over the n sources: keys and values are the n
//! warped features at the same location, embedded by shared 1x1 linear
//! maps with `d_k = C`.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::TransformFlow;
use crate::warp::{bilinear_sample, FeatureMap};

/// Embedding, gate, and SPADE weights for the fusion blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// Per-pixel linear query/key/value embeddings, `d_k x C` with `d_k = C`.
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    /// Gate: two 3x3 convolutions `C -> C`, the second followed by sigmoid.
    pub gate_w1: Array4<f32>,
    pub gate_b1: Array1<f32>,
    pub gate_w2: Array4<f32>,
    pub gate_b2: Array1<f32>,
    /// SPADE: shared 3x3 conv `C -> C` + relu, then two 3x3 heads `C -> C`.
    pub spade_shared_w: Array4<f32>,
    pub spade_shared_b: Array1<f32>,
    pub spade_gamma_w: Array4<f32>,
    pub spade_gamma_b: Array1<f32>,
    pub spade_beta_w: Array4<f32>,
    pub spade_beta_b: Array1<f32>,
    /// Instance-normalization stabilizer.
    pub eps: f32,
}

/// The five aggregation variants sharing the warp-then-fuse structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LwbKind {
    Add,
    Mean,
    GateAdd,
    GateMean,
    Attention,
}

impl std::str::FromStr for LwbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(LwbKind::Add),
            "mean" => Ok(LwbKind::Mean),
            "gate_add" => Ok(LwbKind::GateAdd),
            "gate_mean" => Ok(LwbKind::GateMean),
            "attention" => Ok(LwbKind::Attention),
            other => Err(Error::Parse(format!(
                "unknown fusion block '{other}' (expected add|mean|gate_add|gate_mean|attention)"
            ))),
        }
    }
}

pub const DEFAULT_EPS: f32 = 1e-5;

impl FusionParams {
    pub fn channels(&self) -> usize {
        self.wq.ncols()
    }

    /// All-zero weights (useful for the closed-form degenerate cases).
    pub fn zeros(channels: usize) -> Self {
        let c = channels;
        FusionParams {
            wq: Array2::zeros((c, c)),
            wk: Array2::zeros((c, c)),
            wv: Array2::zeros((c, c)),
            gate_w1: Array4::zeros((c, c, 3, 3)),
            gate_b1: Array1::zeros(c),
            gate_w2: Array4::zeros((c, c, 3, 3)),
            gate_b2: Array1::zeros(c),
            spade_shared_w: Array4::zeros((c, c, 3, 3)),
            spade_shared_b: Array1::zeros(c),
            spade_gamma_w: Array4::zeros((c, c, 3, 3)),
            spade_gamma_b: Array1::zeros(c),
            spade_beta_w: Array4::zeros((c, c, 3, 3)),
            spade_beta_b: Array1::zeros(c),
            eps: DEFAULT_EPS,
        }
    }

    /// Deterministic initializer: every weight uniform in
    /// `(-1/sqrt(C), 1/sqrt(C))` from a seeded ChaCha8 stream, biases zero.
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let c = channels;
        let bound = 1.0 / (c as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fill2 = |shape: (usize, usize), rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn(shape, |_| rng.random_range(-bound..bound))
        };
        let wq = fill2((c, c), &mut rng);
        let wk = fill2((c, c), &mut rng);
        let wv = fill2((c, c), &mut rng);
        let fill4 = |rng: &mut ChaCha8Rng| {
            Array4::from_shape_fn((c, c, 3, 3), |_| rng.random_range(-bound..bound))
        };
        let gate_w1 = fill4(&mut rng);
        let gate_w2 = fill4(&mut rng);
        let spade_shared_w = fill4(&mut rng);
        let spade_gamma_w = fill4(&mut rng);
        let spade_beta_w = fill4(&mut rng);
        FusionParams {
            wq,
            wk,
            wv,
            gate_w1,
            gate_b1: Array1::zeros(c),
            gate_w2,
            gate_b2: Array1::zeros(c),
            spade_shared_w,
            spade_shared_b: Array1::zeros(c),
            spade_gamma_w,
            spade_gamma_b: Array1::zeros(c),
            spade_beta_w,
            spade_beta_b: Array1::zeros(c),
            eps: DEFAULT_EPS,
        }
    }

    /// Writes each section as a tensor file inside `dir` plus a small JSON
    /// meta file holding `eps`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let w2 = |name: &str, a: &Array2<f32>| -> Result<()> {
            crate::io::tensor_write(
                dir.join(format!("{name}.lwt")),
                &crate::io::Tensor::F32(
                    vec![a.nrows() as u32, a.ncols() as u32],
                    a.iter().copied().collect(),
                ),
            )
        };
        w2("wq", &self.wq)?;
        w2("wk", &self.wk)?;
        w2("wv", &self.wv)?;
        let w4 = |name: &str, a: &Array4<f32>| -> Result<()> {
            let d = a.shape();
            crate::io::tensor_write(
                dir.join(format!("{name}.lwt")),
                &crate::io::Tensor::F32(
                    d.iter().map(|&x| x as u32).collect(),
                    a.iter().copied().collect(),
                ),
            )
        };
        let w1 = |name: &str, a: &Array1<f32>| -> Result<()> {
            crate::io::tensor_write(
                dir.join(format!("{name}.lwt")),
                &crate::io::Tensor::F32(vec![a.len() as u32], a.iter().copied().collect()),
            )
        };
        w4("gate_w1", &self.gate_w1)?;
        w1("gate_b1", &self.gate_b1)?;
        w4("gate_w2", &self.gate_w2)?;
        w1("gate_b2", &self.gate_b2)?;
        w4("spade_shared_w", &self.spade_shared_w)?;
        w1("spade_shared_b", &self.spade_shared_b)?;
        w4("spade_gamma_w", &self.spade_gamma_w)?;
        w1("spade_gamma_b", &self.spade_gamma_b)?;
        w4("spade_beta_w", &self.spade_beta_w)?;
        w1("spade_beta_b", &self.spade_beta_b)?;
        let meta = FusionMeta { eps: self.eps };
        std::fs::write(
            dir.join("meta.json"),
            serde_json::to_string(&meta).expect("meta serialization"),
        )
        .map_err(|e| Error::io(dir.join("meta.json"), e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let r2 = |name: &str| -> Result<Array2<f32>> {
            let t = crate::io::tensor_read(dir.join(format!("{name}.lwt")))?;
            let (dims, data) = t.into_f32()?;
            if dims.len() != 2 {
                return Err(Error::TensorFormat(format!("{name} must be rank 2")));
            }
            Ok(Array2::from_shape_vec((dims[0] as usize, dims[1] as usize), data).unwrap())
        };
        let r4 = |name: &str| -> Result<Array4<f32>> {
            let t = crate::io::tensor_read(dir.join(format!("{name}.lwt")))?;
            let (dims, data) = t.into_f32()?;
            if dims.len() != 4 {
                return Err(Error::TensorFormat(format!("{name} must be rank 4")));
            }
            Ok(Array4::from_shape_vec(
                (
                    dims[0] as usize,
                    dims[1] as usize,
                    dims[2] as usize,
                    dims[3] as usize,
                ),
                data,
            )
            .unwrap())
        };
        let r1 = |name: &str| -> Result<Array1<f32>> {
            let t = crate::io::tensor_read(dir.join(format!("{name}.lwt")))?;
            let (dims, data) = t.into_f32()?;
            if dims.len() != 1 {
                return Err(Error::TensorFormat(format!("{name} must be rank 1")));
            }
            Ok(Array1::from_vec(data))
        };
        let meta_path = dir.join("meta.json");
        let meta: FusionMeta = serde_json::from_str(
            &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )
        .map_err(|e| Error::Parse(format!("fusion meta: {e}")))?;
        Ok(FusionParams {
            wq: r2("wq")?,
            wk: r2("wk")?,
            wv: r2("wv")?,
            gate_w1: r4("gate_w1")?,
            gate_b1: r1("gate_b1")?,
            gate_w2: r4("gate_w2")?,
            gate_b2: r1("gate_b2")?,
            spade_shared_w: r4("spade_shared_w")?,
            spade_shared_b: r1("spade_shared_b")?,
            spade_gamma_w: r4("spade_gamma_w")?,
            spade_gamma_b: r1("spade_gamma_b")?,
            spade_beta_w: r4("spade_beta_w")?,
            spade_beta_b: r1("spade_beta_b")?,
            eps: meta.eps,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FusionMeta {
    eps: f32,
}

fn check_same_shape(xs: &[FeatureMap], xt: &FeatureMap) -> Result<(usize, usize, usize)> {
    let dim = xt.dim();
    for (i, x) in xs.iter().enumerate() {
        if x.dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "source feature {i} has shape {:?}, target {:?}",
                x.dim(),
                dim
            )));
        }
    }
    Ok(dim)
}

/// 3x3 convolution, stride 1, zero padding 1.
pub fn conv3x3(input: &FeatureMap, weight: &Array4<f32>, bias: &Array1<f32>) -> Result<FeatureMap> {
    let (c_in, h, w) = input.dim();
    let ws = weight.shape();
    if ws[1] != c_in || ws[2] != 3 || ws[3] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "conv weight {ws:?} does not match input channels {c_in}"
        )));
    }
    let c_out = ws[0];
    if bias.len() != c_out {
        return Err(Error::ShapeMismatch("conv bias length mismatch".into()));
    }
    let mut out = Array3::zeros((c_out, h, w));
    for co in 0..c_out {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias[co] as f64;
                for ci in 0..c_in {
                    for di in 0..3usize {
                        for dj in 0..3usize {
                            let ii = i as i64 + di as i64 - 1;
                            let jj = j as i64 + dj as i64 - 1;
                            if ii >= 0 && ii < h as i64 && jj >= 0 && jj < w as i64 {
                                acc += weight[[co, ci, di, dj]] as f64
                                    * input[[ci, ii as usize, jj as usize]] as f64;
                            }
                        }
                    }
                }
                out[[co, i, j]] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Element-wise addition of all warped sources onto the target stream.
pub fn add_lwb(xs_warped: &[FeatureMap], xt: &FeatureMap) -> Result<FeatureMap> {
    check_same_shape(xs_warped, xt)?;
    let mut out = xt.clone();
    for x in xs_warped {
        out += x;
    }
    Ok(out)
}

/// Mean of the warped sources plus the target stream.
pub fn mean_agg(xs_warped: &[FeatureMap], xt: &FeatureMap) -> Result<FeatureMap> {
    if xs_warped.is_empty() {
        return Err(Error::ShapeMismatch("empty source list".into()));
    }
    let (c, h, w) = check_same_shape(xs_warped, xt)?;
    let n = xs_warped.len() as f32;
    let mut out = xt.clone();
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let s: f32 = xs_warped.iter().map(|x| x[[ci, i, j]]).sum();
                out[[ci, i, j]] += s / n;
            }
        }
    }
    Ok(out)
}

/// The sigmoid gate `g(xt) = sigmoid(conv2(relu(conv1(xt))))`, in `[0, 1]`
/// (the ends are reachable in f32 when the pre-activation saturates).
pub fn gate(params: &FusionParams, xt: &FeatureMap) -> Result<FeatureMap> {
    let mut hidden = conv3x3(xt, &params.gate_w1, &params.gate_b1)?;
    hidden.mapv_inplace(|v| v.max(0.0));
    let mut out = conv3x3(&hidden, &params.gate_w2, &params.gate_b2)?;
    out.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
    Ok(out)
}

/// Gated fusion: `g(xt) ⊙ agg(xs) + xt` with sum or mean aggregation.
pub fn soft_gate(
    mean: bool,
    params: &FusionParams,
    xs_warped: &[FeatureMap],
    xt: &FeatureMap,
) -> Result<FeatureMap> {
    if xs_warped.is_empty() {
        return Err(Error::ShapeMismatch("empty source list".into()));
    }
    let (c, h, w) = check_same_shape(xs_warped, xt)?;
    let g = gate(params, xt)?;
    let scale = if mean { 1.0 / xs_warped.len() as f32 } else { 1.0 };
    let mut out = xt.clone();
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let s: f32 = xs_warped.iter().map(|x| x[[ci, i, j]]).sum();
                out[[ci, i, j]] += g[[ci, i, j]] * s * scale;
            }
        }
    }
    Ok(out)
}

/// Spatially-adaptive denormalization: instance-normalize `xt` per channel,
/// then modulate with `gamma`/`beta` fields computed from `cond`.
pub fn spade(params: &FusionParams, xt: &FeatureMap, cond: &FeatureMap) -> Result<FeatureMap> {
    let (c, h, w) = xt.dim();
    if cond.dim() != (c, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "condition shape {:?} does not match target {:?}",
            cond.dim(),
            xt.dim()
        )));
    }
    let n = (h * w) as f64;
    let mut normalized = Array3::zeros((c, h, w));
    for ci in 0..c {
        let mut mean = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                mean += xt[[ci, i, j]] as f64;
            }
        }
        mean /= n;
        let mut var = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                let d = xt[[ci, i, j]] as f64 - mean;
                var += d * d;
            }
        }
        var /= n;
        let inv = 1.0 / (var + params.eps as f64).sqrt();
        for i in 0..h {
            for j in 0..w {
                normalized[[ci, i, j]] = ((xt[[ci, i, j]] as f64 - mean) * inv) as f32;
            }
        }
    }
    let mut hidden = conv3x3(cond, &params.spade_shared_w, &params.spade_shared_b)?;
    hidden.mapv_inplace(|v| v.max(0.0));
    let gamma = conv3x3(&hidden, &params.spade_gamma_w, &params.spade_gamma_b)?;
    let beta = conv3x3(&hidden, &params.spade_beta_w, &params.spade_beta_b)?;
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[[ci, i, j]] =
                    normalized[[ci, i, j]] * (1.0 + gamma[[ci, i, j]]) + beta[[ci, i, j]];
            }
        }
    }
    Ok(out)
}

/// Per-pixel attention weights over the n sources: `softmax(q·k_i / sqrt(d_k))`.
/// Returned as `n x H x W`, each pixel's column summing to 1.
pub fn attention_weights(
    params: &FusionParams,
    xs_warped: &[FeatureMap],
    xt: &FeatureMap,
) -> Result<Array3<f64>> {
    if xs_warped.is_empty() {
        return Err(Error::ShapeMismatch("attention needs at least one source".into()));
    }
    let (c, h, w) = check_same_shape(xs_warped, xt)?;
    if params.wq.shape() != [c, c].as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "embedding matrices are {:?}, features have {c} channels",
            params.wq.shape()
        )));
    }
    let n = xs_warped.len();
    let dk = c as f64;
    let embed = |w_: &Array2<f32>, x: &FeatureMap, i: usize, j: usize| -> Vec<f64> {
        (0..c)
            .map(|o| (0..c).map(|ci| w_[[o, ci]] as f64 * x[[ci, i, j]] as f64).sum())
            .collect()
    };
    let mut out = Array3::zeros((n, h, w));
    for i in 0..h {
        for j in 0..w {
            let q = embed(&params.wq, xt, i, j);
            let mut scores = Vec::with_capacity(n);
            for x in xs_warped {
                let k = embed(&params.wk, x, i, j);
                let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                scores.push(dot / dk.sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for (si, s) in scores.iter().enumerate() {
                out[[si, i, j]] = s / total;
            }
        }
    }
    Ok(out)
}

/// Attentional fusion: softmax-weighted value combination of the warped
/// sources, injected into the target stream through SPADE.
pub fn att_lwb(
    params: &FusionParams,
    xs_warped: &[FeatureMap],
    xt: &FeatureMap,
) -> Result<FeatureMap> {
    let (c, h, w) = check_same_shape(xs_warped, xt)?;
    let weights = attention_weights(params, xs_warped, xt)?;
    let mut fused = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            for (si, x) in xs_warped.iter().enumerate() {
                let a = weights[[si, i, j]];
                if a == 0.0 {
                    continue;
                }
                for o in 0..c {
                    let mut v = 0.0f64;
                    for ci in 0..c {
                        v += params.wv[[o, ci]] as f64 * x[[ci, i, j]] as f64;
                    }
                    fused[[o, i, j]] += (a * v) as f32;
                }
            }
        }
    }
    spade(params, xt, &fused)
}

/// Uniform entry point: warp each raw source feature under its flow, then
/// dispatch to the selected aggregation.
pub fn lwb_apply(
    block: LwbKind,
    params: &FusionParams,
    xs_raw: &[FeatureMap],
    flows: &[TransformFlow],
    xt: &FeatureMap,
) -> Result<FeatureMap> {
    if xs_raw.len() != flows.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} sources but {} flows",
            xs_raw.len(),
            flows.len()
        )));
    }
    let warped: Vec<FeatureMap> = xs_raw
        .iter()
        .zip(flows)
        .map(|(x, tf)| bilinear_sample(x, tf))
        .collect::<Result<_>>()?;
    match block {
        LwbKind::Add => add_lwb(&warped, xt),
        LwbKind::Mean => mean_agg(&warped, xt),
        LwbKind::GateAdd => soft_gate(false, params, &warped, xt),
        LwbKind::GateMean => soft_gate(true, params, &warped, xt),
        LwbKind::Attention => att_lwb(params, &warped, xt),
    }
}
