//! Small reference networks built on the quantized linear layer: a plain MLP
//! for regression and a tiny decoder-only transformer for byte-level language
//! modeling, each with a hand-written forward pass and exact reverse-mode
//! gradients for three training regimes:
//!
//! * scale-only adaptation — integer codes, zero-points, biases, embeddings,
//!   and norm parameters stay frozen; only the per-(channel, group) scales
//!   receive gradients,
//! * quantization-aware training — every tensor trains; linear weights keep a
//!   dense shadow copy, codes are recomputed from the shadow weights and the
//!   current scales on every forward pass, and the weight gradient passes
//!   straight through the rounding (zeroed where the clamp saturates),
//! * full-precision training — ordinary dense layers, everything trains.
//!
//! All math runs in `f64`. With [`ScalePrecision::Single`] the parameters are
//! kept on the `f32` grid (they are snapped after initialization and after
//! every optimizer step) and activations are rounded to `f32` at layer
//! boundaries — linear outputs, embedding sums, and residual additions —
//! while every reduction still accumulates in `f64`.

use crate::error::{Error, Result};
use crate::kernel;
use crate::pack::{self, PackedIntMatrix};
use crate::quant::{
    self, round_half_away, CodeMatrix, QuantConfig, ScalePrecision, ScaleSet,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Which parameter set trains. `Peqa` is scale-only adaptation over frozen
/// codes (a round-to-nearest baseline is a `Peqa` network trained for zero
/// steps); `Qat` trains shadow weights and scales through the quantizer;
/// `Full` is the unquantized reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Peqa,
    Qat,
    Full,
}

/// Network architecture description (serialized into checkpoint headers).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchSpec {
    /// Fully-connected ReLU network for regression; `dims` lists the input
    /// width, hidden widths, and output width, giving between 2 and 6 linear
    /// layers.
    Mlp { dims: Vec<usize> },
    /// Decoder-only transformer for next-byte prediction: learned token and
    /// position embeddings, pre-norm blocks of causal multi-head attention
    /// and a GELU MLP, a final norm, and an untied dense output head.
    Transformer {
        vocab: usize,
        ctx: usize,
        dim: usize,
        blocks: usize,
        heads: usize,
        ffn: usize,
    },
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ArchSpec::Mlp { dims } => {
                let layers = dims.len().saturating_sub(1);
                if !(2..=6).contains(&layers) {
                    return Err(Error::Config(format!(
                        "MLP must have 2..=6 linear layers, got {layers}"
                    )));
                }
                if dims.iter().any(|&d| d == 0) {
                    return Err(Error::Config("MLP dimensions must be positive".into()));
                }
                Ok(())
            }
            ArchSpec::Transformer { vocab, ctx, dim, blocks, heads, ffn } => {
                if !(2..=256).contains(vocab) {
                    return Err(Error::Config(format!(
                        "vocabulary size {vocab} outside 2..=256"
                    )));
                }
                if *ctx < 2 {
                    return Err(Error::Config("context length must be at least 2".into()));
                }
                if *blocks == 0 || *heads == 0 || *ffn == 0 || *dim == 0 {
                    return Err(Error::Config(
                        "transformer dimensions must be positive".into(),
                    ));
                }
                if dim % heads != 0 {
                    return Err(Error::Config(format!(
                        "model width {dim} not divisible by {heads} heads"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Parameter storage of one linear layer.
#[derive(Clone)]
pub enum LinKind {
    /// Dense `f64` weights (full-precision training).
    Dense { w: Vec<f64> },
    /// Frozen bit-packed codes with trainable scales (scale-only adaptation).
    Quant { packed: PackedIntMatrix, scales: ScaleSet },
    /// Dense shadow weights plus scales; codes are recomputed from both on
    /// every forward pass (quantization-aware training).
    Qat { w: Vec<f64>, scales: ScaleSet, bits: u32 },
}

/// One linear layer `y = W x + b` (or its quantized counterpart).
#[derive(Clone)]
pub struct Linear {
    pub n: usize,
    pub m: usize,
    pub kind: LinKind,
    pub bias: Vec<f64>,
}

/// Gradients of one linear layer. Absent fields are frozen under the current
/// training mode: scale-only adaptation populates `s` alone, QAT populates
/// all three, dense layers populate `w` and `bias`.
#[derive(Clone, Debug, Default)]
pub struct LinearGrads {
    pub w: Option<Vec<f64>>,
    pub s: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Per-layer forward residue needed by the backward pass.
pub struct LinTape {
    /// Layer input, `rows × m`.
    x: Vec<f64>,
    /// Per-group partial sums `u[r,i,G] = Σ_{j∈G} (q−z)·x[j]`, `rows × n × G`
    /// (quantized and QAT layers only) — exactly the scale-gradient factors.
    u: Option<Vec<f64>>,
    /// Codes used by this forward pass (QAT only; recomputed every pass).
    codes: Option<CodeMatrix>,
    /// Straight-through mask (QAT only): true where the clamp did not
    /// saturate, i.e. where the weight gradient passes through.
    mask: Option<Vec<bool>>,
}

fn snap32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

/// Recompute codes from shadow weights and current scales, tracking where the
/// clamp saturates. The saturation mask depends on the weights and scales
/// only, never on the batch.
fn qat_codes_mask(
    w: &[f64],
    n: usize,
    m: usize,
    scales: &ScaleSet,
    bits: u32,
) -> Result<(CodeMatrix, Vec<bool>)> {
    let qmax = ((1u32 << bits) - 1) as i64;
    let groups = scales.groups;
    let g = scales.group_cols;
    let mut q = vec![0u8; n * m];
    let mut mask = vec![false; n * m];
    for i in 0..n {
        for gi in 0..groups {
            let s = scales.s[i * groups + gi];
            if s == 0.0 {
                return Err(Error::ZeroScale { channel: i });
            }
            let z = scales.z[i * groups + gi] as i64;
            for j in gi * g..(gi + 1) * g {
                let c = round_half_away(w[i * m + j] / s) as i64 + z;
                let clamped = c.clamp(0, qmax);
                q[i * m + j] = clamped as u8;
                mask[i * m + j] = c == clamped;
            }
        }
    }
    Ok((CodeMatrix { n, m, bits, q }, mask))
}

impl Linear {
    pub fn dense(n: usize, m: usize, w: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if w.len() != n * m || bias.len() != n {
            return Err(Error::Input(format!(
                "linear {n}x{m} given {} weights and {} biases",
                w.len(),
                bias.len()
            )));
        }
        Ok(Linear { n, m, kind: LinKind::Dense { w }, bias })
    }

    /// Freeze this dense layer into packed codes plus minimum-error scales.
    pub fn quantize(&self, cfg: &QuantConfig) -> Result<Linear> {
        let w = self.dense_weights()?;
        let (scales, codes) = quant::init_scale_zero(&w, self.n, self.m, cfg)?;
        let packed = pack::pack(&codes)?;
        let mut bias = self.bias.clone();
        if cfg.scale_precision == ScalePrecision::Single {
            snap32(&mut bias);
        }
        Ok(Linear { n: self.n, m: self.m, kind: LinKind::Quant { packed, scales }, bias })
    }

    /// Give this dense layer a quantizer-in-the-loop shadow copy.
    pub fn to_qat(&self, cfg: &QuantConfig) -> Result<Linear> {
        let mut w = self.dense_weights()?;
        let (scales, _) = quant::init_scale_zero(&w, self.n, self.m, cfg)?;
        let mut bias = self.bias.clone();
        if cfg.scale_precision == ScalePrecision::Single {
            snap32(&mut w);
            snap32(&mut bias);
        }
        Ok(Linear {
            n: self.n,
            m: self.m,
            kind: LinKind::Qat { w, scales, bits: cfg.bits },
            bias,
        })
    }

    /// Dense layer computing exactly what this layer computes: a clone for
    /// dense layers, the dequantized reconstruction otherwise.
    pub fn dense_equiv(&self) -> Result<Linear> {
        let w = match &self.kind {
            LinKind::Dense { w } => w.clone(),
            LinKind::Quant { packed, scales } => {
                let codes = pack::unpack(packed)?;
                quant::dequantize(&codes, scales)?
            }
            LinKind::Qat { w, scales, bits } => {
                let cfg = QuantConfig::new(
                    *bits,
                    crate::quant::GroupSize::Cols(scales.group_cols),
                    ScalePrecision::Double,
                )?;
                let codes = quant::quantize_codes(w, self.n, self.m, scales, &cfg)?;
                quant::dequantize(&codes, scales)?
            }
        };
        Linear::dense(self.n, self.m, w, self.bias.clone())
    }

    fn dense_weights(&self) -> Result<Vec<f64>> {
        match &self.kind {
            LinKind::Dense { w } => Ok(w.clone()),
            _ => Err(Error::Config("layer is already quantized".into())),
        }
    }

    pub fn scales(&self) -> Option<&ScaleSet> {
        match &self.kind {
            LinKind::Quant { scales, .. } | LinKind::Qat { scales, .. } => Some(scales),
            LinKind::Dense { .. } => None,
        }
    }

    /// `y = W x + b` over a row-major `rows × m` batch, recording what the
    /// backward pass needs. Quantized layers accumulate per-group partial
    /// sums in code space; QAT layers first refresh their codes.
    fn forward_batch(
        &self,
        x: &[f64],
        rows: usize,
        prec: ScalePrecision,
    ) -> Result<(Vec<f64>, LinTape)> {
        let (n, m) = (self.n, self.m);
        debug_assert_eq!(x.len(), rows * m);
        let mut y = vec![0.0f64; rows * n];
        let mut tape =
            LinTape { x: x.to_vec(), u: None, codes: None, mask: None };
        match &self.kind {
            LinKind::Dense { w } => {
                for e in 0..rows {
                    let xe = &x[e * m..(e + 1) * m];
                    for i in 0..n {
                        let row = &w[i * m..(i + 1) * m];
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += row[j] * xe[j];
                        }
                        y[e * n + i] = acc + self.bias[i];
                    }
                }
            }
            LinKind::Quant { packed, scales } => {
                let groups = scales.groups;
                let mut u = vec![0.0f64; rows * n * groups];
                for e in 0..rows {
                    let ye = kernel::qmatvec_partials(
                        packed,
                        scales,
                        &x[e * m..(e + 1) * m],
                        &mut u[e * n * groups..(e + 1) * n * groups],
                    );
                    for i in 0..n {
                        y[e * n + i] = ye[i] + self.bias[i];
                    }
                }
                tape.u = Some(u);
            }
            LinKind::Qat { w, scales, bits } => {
                let (codes, mask) = qat_codes_mask(w, n, m, scales, *bits)?;
                let groups = scales.groups;
                let g = scales.group_cols;
                let mut u = vec![0.0f64; rows * n * groups];
                for e in 0..rows {
                    let xe = &x[e * m..(e + 1) * m];
                    for i in 0..n {
                        let mut yi = 0.0;
                        for gi in 0..groups {
                            let z = scales.z[i * groups + gi] as f64;
                            let mut acc = 0.0;
                            for j in gi * g..(gi + 1) * g {
                                acc += (codes.q[i * m + j] as f64 - z) * xe[j];
                            }
                            u[(e * n + i) * groups + gi] = acc;
                            yi += scales.s[i * groups + gi] * acc;
                        }
                        y[e * n + i] = yi + self.bias[i];
                    }
                }
                tape.u = Some(u);
                tape.codes = Some(codes);
                tape.mask = Some(mask);
            }
        }
        if prec == ScalePrecision::Single {
            snap32(&mut y);
        }
        Ok((y, tape))
    }

    /// Accumulate this layer's gradients into `gout` and optionally return
    /// the input gradient. `dy` is `rows × n`.
    fn backward_batch(
        &self,
        tape: &LinTape,
        dy: &[f64],
        rows: usize,
        gout: &mut LinearGrads,
        want_dx: bool,
    ) -> Option<Vec<f64>> {
        let (n, m) = (self.n, self.m);
        debug_assert_eq!(dy.len(), rows * n);
        let mut dx = if want_dx { Some(vec![0.0f64; rows * m]) } else { None };
        match &self.kind {
            LinKind::Dense { w } => {
                let gw = gout.w.as_mut().expect("dense layer without weight grad slot");
                let gb = gout.bias.as_mut().expect("dense layer without bias grad slot");
                for e in 0..rows {
                    let xe = &tape.x[e * m..(e + 1) * m];
                    for i in 0..n {
                        let d = dy[e * n + i];
                        if d == 0.0 {
                            continue;
                        }
                        gb[i] += d;
                        let grow = &mut gw[i * m..(i + 1) * m];
                        for j in 0..m {
                            grow[j] += d * xe[j];
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wrow = &w[i * m..(i + 1) * m];
                            let drow = &mut dx[e * m..(e + 1) * m];
                            for j in 0..m {
                                drow[j] += d * wrow[j];
                            }
                        }
                    }
                }
            }
            LinKind::Quant { packed, scales } => {
                let u = tape.u.as_ref().expect("quant layer tape without partials");
                let groups = scales.groups;
                let gs = gout.s.as_mut().expect("quant layer without scale grad slot");
                for e in 0..rows {
                    for i in 0..n {
                        let d = dy[e * n + i];
                        if d == 0.0 {
                            continue;
                        }
                        for gi in 0..groups {
                            gs[i * groups + gi] += d * u[(e * n + i) * groups + gi];
                        }
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    for e in 0..rows {
                        kernel::accumulate_input_grad(
                            packed,
                            scales,
                            &dy[e * n..(e + 1) * n],
                            &mut dx[e * m..(e + 1) * m],
                        );
                    }
                }
            }
            LinKind::Qat { scales, .. } => {
                let u = tape.u.as_ref().expect("qat layer tape without partials");
                let codes = tape.codes.as_ref().expect("qat layer tape without codes");
                let mask = tape.mask.as_ref().expect("qat layer tape without mask");
                let groups = scales.groups;
                let g = scales.group_cols;
                let gw = gout.w.as_mut().expect("qat layer without weight grad slot");
                let gs = gout.s.as_mut().expect("qat layer without scale grad slot");
                let gb = gout.bias.as_mut().expect("qat layer without bias grad slot");
                // Dequantized weights as seen by this forward pass, for the
                // input gradient.
                let mut what = vec![0.0f64; n * m];
                for i in 0..n {
                    for gi in 0..groups {
                        let s = scales.s[i * groups + gi];
                        let z = scales.z[i * groups + gi] as f64;
                        for j in gi * g..(gi + 1) * g {
                            what[i * m + j] = s * (codes.q[i * m + j] as f64 - z);
                        }
                    }
                }
                for e in 0..rows {
                    let xe = &tape.x[e * m..(e + 1) * m];
                    for i in 0..n {
                        let d = dy[e * n + i];
                        if d == 0.0 {
                            continue;
                        }
                        gb[i] += d;
                        for gi in 0..groups {
                            gs[i * groups + gi] += d * u[(e * n + i) * groups + gi];
                        }
                        // Straight-through estimate: the rounding is treated
                        // as identity except where the clamp saturated.
                        let grow = &mut gw[i * m..(i + 1) * m];
                        let mrow = &mask[i * m..(i + 1) * m];
                        for j in 0..m {
                            if mrow[j] {
                                grow[j] += d * xe[j];
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wrow = &what[i * m..(i + 1) * m];
                            let drow = &mut dx[e * m..(e + 1) * m];
                            for j in 0..m {
                                drow[j] += d * wrow[j];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn grad_slots(&self) -> LinearGrads {
        match &self.kind {
            LinKind::Dense { w } => LinearGrads {
                w: Some(vec![0.0; w.len()]),
                s: None,
                bias: Some(vec![0.0; self.n]),
            },
            LinKind::Quant { scales, .. } => LinearGrads {
                w: None,
                s: Some(vec![0.0; scales.s.len()]),
                bias: None,
            },
            LinKind::Qat { w, scales, .. } => LinearGrads {
                w: Some(vec![0.0; w.len()]),
                s: Some(vec![0.0; scales.s.len()]),
                bias: Some(vec![0.0; self.n]),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Layer norm and GELU
// ---------------------------------------------------------------------------

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

struct LnTape {
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

fn ln_forward(
    x: &[f64],
    rows: usize,
    c: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, LnTape) {
    let mut y = vec![0.0f64; rows * c];
    let mut mean = vec![0.0f64; rows];
    let mut rstd = vec![0.0f64; rows];
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let mu = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        mean[r] = mu;
        rstd[r] = rs;
        let yr = &mut y[r * c..(r + 1) * c];
        for j in 0..c {
            yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
        }
    }
    (y, LnTape { mean, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
fn ln_backward(
    dy: &[f64],
    x: &[f64],
    tape: &LnTape,
    gamma: &[f64],
    rows: usize,
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0f64; rows * c];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let dyr = &dy[r * c..(r + 1) * c];
        let (mu, rs) = (tape.mean[r], tape.rstd[r]);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..c {
            let xhat = (xr[j] - mu) * rs;
            let dn = dyr[j] * gamma[j];
            m1 += dn;
            m2 += dn * xhat;
            dgamma[j] += dyr[j] * xhat;
            dbeta[j] += dyr[j];
        }
        m1 /= c as f64;
        m2 /= c as f64;
        let dxr = &mut dx[r * c..(r + 1) * c];
        for j in 0..c {
            let xhat = (xr[j] - mu) * rs;
            let dn = dyr[j] * gamma[j];
            dxr[j] = rs * (dn - m1 - xhat * m2);
        }
    }
    (dx, dgamma, dbeta)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_d(x: f64) -> f64 {
    let t = (GELU_K * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 0.134145 * x * x)
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

/// Fully-connected ReLU regression network.
#[derive(Clone)]
pub struct MlpNet {
    pub dims: Vec<usize>,
    pub layers: Vec<Linear>,
    pub mode: Mode,
    pub precision: ScalePrecision,
    pub qcfg: Option<QuantConfig>,
}

/// One pre-norm transformer block.
#[derive(Clone)]
pub struct Block {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn linears(&self) -> [&Linear; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.fc1, &self.fc2]
    }
}

/// Decoder-only transformer for next-byte prediction. The output head is
/// dense and untied; it is frozen under scale-only adaptation and trained
/// under QAT and full-precision training, like the embeddings and norms.
#[derive(Clone)]
pub struct TfNet {
    pub vocab: usize,
    pub ctx: usize,
    pub dim: usize,
    pub nblocks: usize,
    pub heads: usize,
    pub ffn: usize,
    pub tok_emb: Vec<f64>,
    pub pos_emb: Vec<f64>,
    pub blocks: Vec<Block>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    /// `vocab × dim`, bias-free.
    pub lm_head: Vec<f64>,
    pub mode: Mode,
    pub precision: ScalePrecision,
    pub qcfg: Option<QuantConfig>,
}

#[derive(Clone)]
pub enum Net {
    Mlp(MlpNet),
    Tf(TfNet),
}

/// One training batch.
pub enum Batch {
    /// Regression rows: `x` is `b × d_in`, `targets` is `b × d_out`.
    Reg { x: Vec<f64>, targets: Vec<f64>, b: usize },
    /// Language-model windows: `b` rows of `t + 1` token ids; position `i`
    /// predicts position `i + 1`.
    Lm { tokens: Vec<u8>, b: usize, t: usize },
}

pub struct MlpTape {
    b: usize,
    lins: Vec<LinTape>,
    /// Network predictions, `b × d_out`.
    pub out: Vec<f64>,
    targets: Vec<f64>,
}

pub struct BlockTape {
    x_in: Vec<f64>,
    ln1: LnTape,
    lq: LinTape,
    lk: LinTape,
    lv: LinTape,
    qb: Vec<f64>,
    kb: Vec<f64>,
    vb: Vec<f64>,
    probs: Vec<f64>,
    lo: LinTape,
    x_mid: Vec<f64>,
    ln2: LnTape,
    lfc1: LinTape,
    h1: Vec<f64>,
    lfc2: LinTape,
}

pub struct TfTape {
    b: usize,
    t: usize,
    tokens: Vec<u8>,
    blocks: Vec<BlockTape>,
    x_final: Vec<f64>,
    lnf: LnTape,
    normf: Vec<f64>,
    /// Softmax probabilities, `b·t × vocab`.
    pub probs: Vec<f64>,
    pub loss: f64,
}

pub enum Tape {
    Mlp(MlpTape),
    Tf(TfTape),
}

#[derive(Clone, Debug, Default)]
pub struct MlpGrads {
    pub layers: Vec<LinearGrads>,
}

#[derive(Clone, Debug, Default)]
pub struct BlockGrads {
    pub ln1_g: Option<Vec<f64>>,
    pub ln1_b: Option<Vec<f64>>,
    pub wq: LinearGrads,
    pub wk: LinearGrads,
    pub wv: LinearGrads,
    pub wo: LinearGrads,
    pub ln2_g: Option<Vec<f64>>,
    pub ln2_b: Option<Vec<f64>>,
    pub fc1: LinearGrads,
    pub fc2: LinearGrads,
}

#[derive(Clone, Debug, Default)]
pub struct TfGrads {
    pub tok_emb: Option<Vec<f64>>,
    pub pos_emb: Option<Vec<f64>>,
    pub blocks: Vec<BlockGrads>,
    pub lnf_g: Option<Vec<f64>>,
    pub lnf_b: Option<Vec<f64>>,
    pub lm_head: Option<Vec<f64>>,
}

pub enum Grads {
    Mlp(MlpGrads),
    Tf(TfGrads),
}

impl TfGrads {
    /// Zero-filled gradient slots matching the transformer's trainable set.
    fn zeros(t: &TfNet) -> TfGrads {
        let dense = !matches!(t.mode, Mode::Peqa);
        let opt = |len: usize| if dense { Some(vec![0.0; len]) } else { None };
        TfGrads {
            tok_emb: opt(t.tok_emb.len()),
            pos_emb: opt(t.pos_emb.len()),
            blocks: t
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    ln1_g: opt(t.dim),
                    ln1_b: opt(t.dim),
                    wq: b.wq.grad_slots(),
                    wk: b.wk.grad_slots(),
                    wv: b.wv.grad_slots(),
                    wo: b.wo.grad_slots(),
                    ln2_g: opt(t.dim),
                    ln2_b: opt(t.dim),
                    fc1: b.fc1.grad_slots(),
                    fc2: b.fc2.grad_slots(),
                })
                .collect(),
            lnf_g: opt(t.dim),
            lnf_b: opt(t.dim),
            lm_head: opt(t.lm_head.len()),
        }
    }
}

impl Grads {
    /// Zero-filled gradient slots matching the network's trainable set.
    pub fn zeros_like(net: &Net) -> Grads {
        match net {
            Net::Mlp(m) => Grads::Mlp(MlpGrads {
                layers: m.layers.iter().map(|l| l.grad_slots()).collect(),
            }),
            Net::Tf(t) => Grads::Tf(TfGrads::zeros(t)),
        }
    }

    /// All populated gradient tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        // Within a layer the order is weights, scales, bias.
        fn lin<'a>(g: &'a LinearGrads, out: &mut Vec<&'a Vec<f64>>) {
            for t in [&g.w, &g.s, &g.bias].into_iter().flatten() {
                out.push(t);
            }
        }
        match self {
            Grads::Mlp(m) => {
                for g in &m.layers {
                    lin(g, &mut out);
                }
            }
            Grads::Tf(t) => {
                for g in [&t.tok_emb, &t.pos_emb].into_iter().flatten() {
                    out.push(g);
                }
                for b in &t.blocks {
                    for g in [&b.ln1_g, &b.ln1_b].into_iter().flatten() {
                        out.push(g);
                    }
                    lin(&b.wq, &mut out);
                    lin(&b.wk, &mut out);
                    lin(&b.wv, &mut out);
                    lin(&b.wo, &mut out);
                    for g in [&b.ln2_g, &b.ln2_b].into_iter().flatten() {
                        out.push(g);
                    }
                    lin(&b.fc1, &mut out);
                    lin(&b.fc2, &mut out);
                }
                for g in [&t.lnf_g, &t.lnf_b, &t.lm_head].into_iter().flatten() {
                    out.push(g);
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        fn lin<'a>(g: &'a mut LinearGrads, out: &mut Vec<&'a mut Vec<f64>>) {
            for t in [&mut g.w, &mut g.s, &mut g.bias].into_iter().flatten() {
                out.push(t);
            }
        }
        match self {
            Grads::Mlp(m) => {
                for g in &mut m.layers {
                    lin(g, &mut out);
                }
            }
            Grads::Tf(t) => {
                for g in [&mut t.tok_emb, &mut t.pos_emb].into_iter().flatten() {
                    out.push(g);
                }
                for b in &mut t.blocks {
                    for g in [&mut b.ln1_g, &mut b.ln1_b].into_iter().flatten() {
                        out.push(g);
                    }
                    lin(&mut b.wq, &mut out);
                    lin(&mut b.wk, &mut out);
                    lin(&mut b.wv, &mut out);
                    lin(&mut b.wo, &mut out);
                    for g in [&mut b.ln2_g, &mut b.ln2_b].into_iter().flatten() {
                        out.push(g);
                    }
                    lin(&mut b.fc1, &mut out);
                    lin(&mut b.fc2, &mut out);
                }
                for g in [&mut t.lnf_g, &mut t.lnf_b, &mut t.lm_head].into_iter().flatten() {
                    out.push(g);
                }
            }
        }
        out
    }

    /// Euclidean norm over all populated gradients.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|&g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, c: f64) {
        for t in self.tensors_mut() {
            for g in t.iter_mut() {
                *g *= c;
            }
        }
    }
}

/// Mutable trainable parameter tensors paired with their gradients, in the
/// same canonical order as [`Grads::tensors`]. The gradient structure decides
/// which parameters are trainable; shapes are checked pairwise.
pub fn zip_params<'a>(
    net: &'a mut Net,
    grads: &'a Grads,
) -> Result<Vec<(&'a mut Vec<f64>, &'a Vec<f64>)>> {
    fn push<'a>(
        out: &mut Vec<(&'a mut Vec<f64>, &'a Vec<f64>)>,
        p: &'a mut Vec<f64>,
        g: &'a Vec<f64>,
    ) -> Result<()> {
        if p.len() != g.len() {
            return Err(Error::Input(format!(
                "gradient length {} does not match parameter length {}",
                g.len(),
                p.len()
            )));
        }
        out.push((p, g));
        Ok(())
    }
    fn lin<'a>(
        out: &mut Vec<(&'a mut Vec<f64>, &'a Vec<f64>)>,
        l: &'a mut Linear,
        g: &'a LinearGrads,
    ) -> Result<()> {
        match &mut l.kind {
            LinKind::Dense { w } => {
                if g.s.is_some() {
                    return Err(Error::Input("scale gradient for a dense layer".into()));
                }
                if let Some(gw) = &g.w {
                    push(out, w, gw)?;
                }
            }
            LinKind::Quant { scales, .. } => {
                if g.w.is_some() || g.bias.is_some() {
                    return Err(Error::Input(
                        "weight or bias gradient for a frozen quantized layer".into(),
                    ));
                }
                if let Some(gs) = &g.s {
                    push(out, &mut scales.s, gs)?;
                }
            }
            LinKind::Qat { w, scales, .. } => {
                if let Some(gw) = &g.w {
                    push(out, w, gw)?;
                }
                if let Some(gs) = &g.s {
                    push(out, &mut scales.s, gs)?;
                }
            }
        }
        if let Some(gb) = &g.bias {
            push(out, &mut l.bias, gb)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    match (net, grads) {
        (Net::Mlp(m), Grads::Mlp(g)) => {
            if m.layers.len() != g.layers.len() {
                return Err(Error::Input("gradient layer count mismatch".into()));
            }
            for (l, lg) in m.layers.iter_mut().zip(&g.layers) {
                lin(&mut out, l, lg)?;
            }
        }
        (Net::Tf(t), Grads::Tf(g)) => {
            if t.blocks.len() != g.blocks.len() {
                return Err(Error::Input("gradient block count mismatch".into()));
            }
            if let Some(gt) = &g.tok_emb {
                push(&mut out, &mut t.tok_emb, gt)?;
            }
            if let Some(gp) = &g.pos_emb {
                push(&mut out, &mut t.pos_emb, gp)?;
            }
            for (b, bg) in t.blocks.iter_mut().zip(&g.blocks) {
                if let Some(gg) = &bg.ln1_g {
                    push(&mut out, &mut b.ln1_g, gg)?;
                }
                if let Some(gb) = &bg.ln1_b {
                    push(&mut out, &mut b.ln1_b, gb)?;
                }
                lin(&mut out, &mut b.wq, &bg.wq)?;
                lin(&mut out, &mut b.wk, &bg.wk)?;
                lin(&mut out, &mut b.wv, &bg.wv)?;
                lin(&mut out, &mut b.wo, &bg.wo)?;
                if let Some(gg) = &bg.ln2_g {
                    push(&mut out, &mut b.ln2_g, gg)?;
                }
                if let Some(gb) = &bg.ln2_b {
                    push(&mut out, &mut b.ln2_b, gb)?;
                }
                lin(&mut out, &mut b.fc1, &bg.fc1)?;
                lin(&mut out, &mut b.fc2, &bg.fc2)?;
            }
            if let Some(gg) = &g.lnf_g {
                push(&mut out, &mut t.lnf_g, gg)?;
            }
            if let Some(gb) = &g.lnf_b {
                push(&mut out, &mut t.lnf_b, gb)?;
            }
            if let Some(gl) = &g.lm_head {
                push(&mut out, &mut t.lm_head, gl)?;
            }
        }
        _ => return Err(Error::Input("gradient kind does not match network kind".into())),
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Run the network on one batch; returns the loss (mean squared error for
/// regression, mean next-token negative log-likelihood in nats for language
/// modeling) and the tape the backward pass consumes. A non-finite loss is
/// reported as a divergence error.
pub fn forward(net: &Net, batch: &Batch) -> Result<(f64, Tape)> {
    match (net, batch) {
        (Net::Mlp(m), Batch::Reg { x, targets, b }) => {
            let (loss, tape) = forward_mlp(m, x, targets, *b)?;
            Ok((loss, Tape::Mlp(tape)))
        }
        (Net::Tf(t), Batch::Lm { tokens, b, t: t_len }) => {
            let (loss, tape) = forward_tf(t, tokens, *b, *t_len)?;
            Ok((loss, Tape::Tf(tape)))
        }
        _ => Err(Error::Input("batch kind does not match network kind".into())),
    }
}

/// Loss without keeping the tape (evaluation).
pub fn loss_only(net: &Net, batch: &Batch) -> Result<f64> {
    forward(net, batch).map(|(loss, _)| loss)
}

fn forward_mlp(net: &MlpNet, x: &[f64], targets: &[f64], b: usize) -> Result<(f64, MlpTape)> {
    let d_in = net.dims[0];
    let d_out = *net.dims.last().unwrap();
    if b == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if x.len() != b * d_in || targets.len() != b * d_out {
        return Err(Error::Input(format!(
            "batch buffers ({}, {}) do not match {b}x{d_in} inputs and {b}x{d_out} targets",
            x.len(),
            targets.len()
        )));
    }
    let single = net.precision == ScalePrecision::Single;
    let nl = net.layers.len();
    let mut act = x.to_vec();
    if single {
        snap32(&mut act);
    }
    let mut lins = Vec::with_capacity(nl);
    for (l, lin) in net.layers.iter().enumerate() {
        let (mut y, tape) = lin.forward_batch(&act, b, net.precision)?;
        if l + 1 < nl {
            for v in &mut y {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        lins.push(tape);
        act = y;
    }
    let mut loss = 0.0;
    for (p, t) in act.iter().zip(targets) {
        let d = p - t;
        loss += d * d;
    }
    loss /= (b * d_out) as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    Ok((loss, MlpTape { b, lins, out: act, targets: targets.to_vec() }))
}

fn backward_mlp(net: &MlpNet, tape: MlpTape) -> MlpGrads {
    let MlpTape { b, lins, out, targets } = tape;
    let d_out = *net.dims.last().unwrap();
    let mut grads =
        MlpGrads { layers: net.layers.iter().map(|l| l.grad_slots()).collect() };
    let scale = 2.0 / (b * d_out) as f64;
    let mut dy: Vec<f64> =
        out.iter().zip(&targets).map(|(p, t)| scale * (p - t)).collect();
    for l in (0..net.layers.len()).rev() {
        let dx = net.layers[l].backward_batch(&lins[l], &dy, b, &mut grads.layers[l], l > 0);
        if l > 0 {
            let mut dx = dx.unwrap();
            // ReLU gate: the stored input of layer `l` is the activation
            // output of layer `l − 1`, zero exactly where the gate closed.
            for (d, &a) in dx.iter_mut().zip(&lins[l].x) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            dy = dx;
        }
    }
    grads
}

fn forward_tf(net: &TfNet, tokens: &[u8], b: usize, t_len: usize) -> Result<(f64, TfTape)> {
    let (c, v, h) = (net.dim, net.vocab, net.heads);
    let hs = c / h;
    if b == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if t_len == 0 || t_len > net.ctx {
        return Err(Error::Input(format!(
            "window length {t_len} outside 1..={}",
            net.ctx
        )));
    }
    if tokens.len() != b * (t_len + 1) {
        return Err(Error::Input(format!(
            "token buffer length {} does not match {b} windows of {} tokens",
            tokens.len(),
            t_len + 1
        )));
    }
    if v < 256 {
        if let Some(&bad) = tokens.iter().find(|&&tk| tk as usize >= v) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {v}"
            )));
        }
    }
    let bt = b * t_len;
    let single = net.precision == ScalePrecision::Single;
    let mut x = vec![0.0f64; bt * c];
    for e in 0..b {
        for tt in 0..t_len {
            let tok = tokens[e * (t_len + 1) + tt] as usize;
            let row = (e * t_len + tt) * c;
            for d in 0..c {
                x[row + d] = net.tok_emb[tok * c + d] + net.pos_emb[tt * c + d];
            }
        }
    }
    if single {
        snap32(&mut x);
    }
    let mut blocks_tape = Vec::with_capacity(net.blocks.len());
    let att_scale = 1.0 / (hs as f64).sqrt();
    for blk in &net.blocks {
        let x_in = x;
        let (normed1, ln1) = ln_forward(&x_in, bt, c, &blk.ln1_g, &blk.ln1_b);
        let (qb, lq) = blk.wq.forward_batch(&normed1, bt, net.precision)?;
        let (kb, lk) = blk.wk.forward_batch(&normed1, bt, net.precision)?;
        let (vb, lv) = blk.wv.forward_batch(&normed1, bt, net.precision)?;
        let mut probs = vec![0.0f64; b * h * t_len * t_len];
        let mut ctx_buf = vec![0.0f64; bt * c];
        for e in 0..b {
            for hh in 0..h {
                for tq in 0..t_len {
                    let qoff = (e * t_len + tq) * c + hh * hs;
                    let prow = ((e * h + hh) * t_len + tq) * t_len;
                    let mut mx = f64::NEG_INFINITY;
                    for tk in 0..=tq {
                        let koff = (e * t_len + tk) * c + hh * hs;
                        let mut dot = 0.0;
                        for d in 0..hs {
                            dot += qb[qoff + d] * kb[koff + d];
                        }
                        let sc = dot * att_scale;
                        probs[prow + tk] = sc;
                        if sc > mx {
                            mx = sc;
                        }
                    }
                    let mut denom = 0.0;
                    for tk in 0..=tq {
                        let ex = (probs[prow + tk] - mx).exp();
                        probs[prow + tk] = ex;
                        denom += ex;
                    }
                    let coff = (e * t_len + tq) * c + hh * hs;
                    for tk in 0..=tq {
                        probs[prow + tk] /= denom;
                        let p = probs[prow + tk];
                        let voff = (e * t_len + tk) * c + hh * hs;
                        for d in 0..hs {
                            ctx_buf[coff + d] += p * vb[voff + d];
                        }
                    }
                }
            }
        }
        let (attn_out, lo) = blk.wo.forward_batch(&ctx_buf, bt, net.precision)?;
        let mut x_mid = vec![0.0f64; bt * c];
        for i in 0..bt * c {
            x_mid[i] = x_in[i] + attn_out[i];
        }
        if single {
            snap32(&mut x_mid);
        }
        let (normed2, ln2) = ln_forward(&x_mid, bt, c, &blk.ln2_g, &blk.ln2_b);
        let (h1, lfc1) = blk.fc1.forward_batch(&normed2, bt, net.precision)?;
        let mut act = vec![0.0f64; h1.len()];
        for (o, &z) in act.iter_mut().zip(&h1) {
            *o = gelu(z);
        }
        if single {
            snap32(&mut act);
        }
        let (h2, lfc2) = blk.fc2.forward_batch(&act, bt, net.precision)?;
        let mut x_next = vec![0.0f64; bt * c];
        for i in 0..bt * c {
            x_next[i] = x_mid[i] + h2[i];
        }
        if single {
            snap32(&mut x_next);
        }
        blocks_tape.push(BlockTape {
            x_in,
            ln1,
            lq,
            lk,
            lv,
            qb,
            kb,
            vb,
            probs,
            lo,
            x_mid,
            ln2,
            lfc1,
            h1,
            lfc2,
        });
        x = x_next;
    }
    let x_final = x;
    let (normf, lnf) = ln_forward(&x_final, bt, c, &net.lnf_g, &net.lnf_b);
    let mut probs = vec![0.0f64; bt * v];
    let mut loss = 0.0;
    for r in 0..bt {
        let e = r / t_len;
        let tt = r % t_len;
        let target = tokens[e * (t_len + 1) + tt + 1] as usize;
        let xr = &normf[r * c..(r + 1) * c];
        let lrow = &mut probs[r * v..(r + 1) * v];
        let mut mx = f64::NEG_INFINITY;
        for (vi, lv) in lrow.iter_mut().enumerate() {
            let wrow = &net.lm_head[vi * c..(vi + 1) * c];
            let mut dot = 0.0;
            for d in 0..c {
                dot += wrow[d] * xr[d];
            }
            *lv = dot;
            if dot > mx {
                mx = dot;
            }
        }
        let mut denom = 0.0;
        for lv in lrow.iter_mut() {
            *lv = (*lv - mx).exp();
            denom += *lv;
        }
        for lv in lrow.iter_mut() {
            *lv /= denom;
        }
        loss -= lrow[target].ln();
    }
    loss /= bt as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    Ok((
        loss,
        TfTape {
            b,
            t: t_len,
            tokens: tokens.to_vec(),
            blocks: blocks_tape,
            x_final,
            lnf,
            normf,
            probs,
            loss,
        },
    ))
}

fn backward_tf(net: &TfNet, tape: TfTape) -> TfGrads {
    let TfTape { b, t: t_len, tokens, mut blocks, x_final, lnf, normf, mut probs, .. } = tape;
    let (c, v, h) = (net.dim, net.vocab, net.heads);
    let hs = c / h;
    let bt = b * t_len;
    let train_dense = !matches!(net.mode, Mode::Peqa);
    let mut g = TfGrads::zeros(net);
    // Softmax + NLL backward, reusing the probability buffer for dlogits.
    let inv = 1.0 / bt as f64;
    for r in 0..bt {
        let e = r / t_len;
        let tt = r % t_len;
        let target = tokens[e * (t_len + 1) + tt + 1] as usize;
        let row = &mut probs[r * v..(r + 1) * v];
        for p in row.iter_mut() {
            *p *= inv;
        }
        row[target] -= inv;
    }
    let dlogits = probs;
    // Output head.
    let mut dnormf = vec![0.0f64; bt * c];
    for r in 0..bt {
        for vi in 0..v {
            let d = dlogits[r * v + vi];
            if d == 0.0 {
                continue;
            }
            let wrow = &net.lm_head[vi * c..(vi + 1) * c];
            let drow = &mut dnormf[r * c..(r + 1) * c];
            for dd in 0..c {
                drow[dd] += d * wrow[dd];
            }
        }
    }
    if train_dense {
        let glm = g.lm_head.as_mut().unwrap();
        for r in 0..bt {
            let xr = &normf[r * c..(r + 1) * c];
            for vi in 0..v {
                let d = dlogits[r * v + vi];
                if d == 0.0 {
                    continue;
                }
                let grow = &mut glm[vi * c..(vi + 1) * c];
                for dd in 0..c {
                    grow[dd] += d * xr[dd];
                }
            }
        }
    }
    let (mut dx, dgf, dbf) = ln_backward(&dnormf, &x_final, &lnf, &net.lnf_g, bt, c);
    if train_dense {
        accum(g.lnf_g.as_mut().unwrap(), &dgf);
        accum(g.lnf_b.as_mut().unwrap(), &dbf);
    }
    let att_scale = 1.0 / (hs as f64).sqrt();
    for bi in (0..net.blocks.len()).rev() {
        let blk = &net.blocks[bi];
        let bg = &mut g.blocks[bi];
        let bt_tape = blocks.pop().expect("one tape entry per block");
        // MLP branch: x_next = x_mid + fc2(gelu(fc1(ln2(x_mid)))).
        let dgelu =
            blk.fc2.backward_batch(&bt_tape.lfc2, &dx, bt, &mut bg.fc2, true);
        let mut dh1 = dgelu.unwrap();
        for (dv, &zv) in dh1.iter_mut().zip(&bt_tape.h1) {
            *dv *= gelu_d(zv);
        }
        let dnormed2 =
            blk.fc1.backward_batch(&bt_tape.lfc1, &dh1, bt, &mut bg.fc1, true);
        let (dx_ln2, dg2, db2) = ln_backward(
            &dnormed2.unwrap(),
            &bt_tape.x_mid,
            &bt_tape.ln2,
            &blk.ln2_g,
            bt,
            c,
        );
        if train_dense {
            accum(bg.ln2_g.as_mut().unwrap(), &dg2);
            accum(bg.ln2_b.as_mut().unwrap(), &db2);
        }
        let mut dx_mid = dx;
        for i in 0..bt * c {
            dx_mid[i] += dx_ln2[i];
        }
        // Attention branch: x_mid = x_in + wo(attend(q, k, v)).
        let dctx =
            blk.wo.backward_batch(&bt_tape.lo, &dx_mid, bt, &mut bg.wo, true).unwrap();
        let mut dqb = vec![0.0f64; bt * c];
        let mut dkb = vec![0.0f64; bt * c];
        let mut dvb = vec![0.0f64; bt * c];
        for e in 0..b {
            for hh in 0..h {
                for tq in 0..t_len {
                    let prow = ((e * h + hh) * t_len + tq) * t_len;
                    let coff = (e * t_len + tq) * c + hh * hs;
                    // dL/dp exploiting causality (tk ≤ tq only).
                    let mut dp = vec![0.0f64; tq + 1];
                    let mut dot_pd = 0.0;
                    for (tk, dptk) in dp.iter_mut().enumerate() {
                        let voff = (e * t_len + tk) * c + hh * hs;
                        let mut acc = 0.0;
                        for d in 0..hs {
                            acc += dctx[coff + d] * bt_tape.vb[voff + d];
                        }
                        *dptk = acc;
                        dot_pd += bt_tape.probs[prow + tk] * acc;
                    }
                    for (tk, &dptk) in dp.iter().enumerate() {
                        let p = bt_tape.probs[prow + tk];
                        let ds = p * (dptk - dot_pd);
                        let voff = (e * t_len + tk) * c + hh * hs;
                        for d in 0..hs {
                            dvb[voff + d] += p * dctx[coff + d];
                        }
                        let qoff = (e * t_len + tq) * c + hh * hs;
                        let koff = (e * t_len + tk) * c + hh * hs;
                        for d in 0..hs {
                            dqb[qoff + d] += ds * bt_tape.kb[koff + d] * att_scale;
                            dkb[koff + d] += ds * bt_tape.qb[qoff + d] * att_scale;
                        }
                    }
                }
            }
        }
        let dn_q =
            blk.wq.backward_batch(&bt_tape.lq, &dqb, bt, &mut bg.wq, true).unwrap();
        let dn_k =
            blk.wk.backward_batch(&bt_tape.lk, &dkb, bt, &mut bg.wk, true).unwrap();
        let dn_v =
            blk.wv.backward_batch(&bt_tape.lv, &dvb, bt, &mut bg.wv, true).unwrap();
        let mut dnormed1 = dn_q;
        for i in 0..bt * c {
            dnormed1[i] += dn_k[i] + dn_v[i];
        }
        let (dx_ln1, dg1, db1) = ln_backward(
            &dnormed1,
            &bt_tape.x_in,
            &bt_tape.ln1,
            &blk.ln1_g,
            bt,
            c,
        );
        if train_dense {
            accum(bg.ln1_g.as_mut().unwrap(), &dg1);
            accum(bg.ln1_b.as_mut().unwrap(), &db1);
        }
        dx = dx_mid;
        for i in 0..bt * c {
            dx[i] += dx_ln1[i];
        }
    }
    if train_dense {
        let gt = g.tok_emb.as_mut().unwrap();
        let gp = g.pos_emb.as_mut().unwrap();
        for e in 0..b {
            for tt in 0..t_len {
                let tok = tokens[e * (t_len + 1) + tt] as usize;
                let row = (e * t_len + tt) * c;
                for d in 0..c {
                    gt[tok * c + d] += dx[row + d];
                    gp[tt * c + d] += dx[row + d];
                }
            }
        }
    }
    g
}

fn accum(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Reverse-mode gradients for the network's trainable set; consumes the tape.
pub fn backward(net: &Net, tape: Tape) -> Result<Grads> {
    match (net, tape) {
        (Net::Mlp(m), Tape::Mlp(t)) => Ok(Grads::Mlp(backward_mlp(m, t))),
        (Net::Tf(n), Tape::Tf(t)) => Ok(Grads::Tf(backward_tf(n, t))),
        _ => Err(Error::Input("tape kind does not match network kind".into())),
    }
}

/// Scale-only backward pass: gradients flow to the per-(channel, group)
/// scales alone; codes, zero-points, biases, embeddings, and norms receive
/// none. The network must be in scale-only mode.
pub fn backward_scale(net: &Net, tape: Tape) -> Result<Grads> {
    if net.mode() != Mode::Peqa {
        return Err(Error::Config(
            "scale-only backward requires a scale-adaptation network".into(),
        ));
    }
    backward(net, tape)
}

/// Straight-through backward pass for quantization-aware training.
pub fn backward_qat(net: &Net, tape: Tape) -> Result<Grads> {
    if net.mode() != Mode::Qat {
        return Err(Error::Config(
            "straight-through backward requires a QAT network".into(),
        ));
    }
    backward(net, tape)
}

// ---------------------------------------------------------------------------
// Construction and bookkeeping
// ---------------------------------------------------------------------------

impl Net {
    /// Freshly initialized full-precision network. Sampling order is fixed,
    /// so a seed pins every parameter. MLP weights use scaled-normal fan-in
    /// initialization; transformer weights use N(0, 0.02²) with the residual
    /// output projections shrunk by 1/√(2·blocks), positions N(0, 0.01²).
    pub fn dense_init(arch: &ArchSpec, seed: u64, precision: ScalePrecision) -> Result<Net> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = match arch {
            ArchSpec::Mlp { dims } => {
                let mut layers = Vec::new();
                for l in 0..dims.len() - 1 {
                    let (m, n) = (dims[l], dims[l + 1]);
                    let std = (2.0 / m as f64).sqrt();
                    let dist = Normal::new(0.0, std).unwrap();
                    let w: Vec<f64> = (0..n * m).map(|_| dist.sample(&mut rng)).collect();
                    layers.push(Linear::dense(n, m, w, vec![0.0; n])?);
                }
                Net::Mlp(MlpNet {
                    dims: dims.clone(),
                    layers,
                    mode: Mode::Full,
                    precision,
                    qcfg: None,
                })
            }
            ArchSpec::Transformer { vocab, ctx, dim, blocks, heads, ffn } => {
                let base = Normal::new(0.0, 0.02).unwrap();
                let resid = Normal::new(0.0, 0.02 / (2.0 * *blocks as f64).sqrt()).unwrap();
                let pos = Normal::new(0.0, 0.01).unwrap();
                let sample = |rng: &mut ChaCha8Rng, d: &Normal<f64>, len: usize| -> Vec<f64> {
                    (0..len).map(|_| d.sample(rng)).collect()
                };
                let tok_emb = sample(&mut rng, &base, vocab * dim);
                let pos_emb = sample(&mut rng, &pos, ctx * dim);
                let mut blocks_v = Vec::new();
                for _ in 0..*blocks {
                    let wq = Linear::dense(
                        *dim,
                        *dim,
                        sample(&mut rng, &base, dim * dim),
                        vec![0.0; *dim],
                    )?;
                    let wk = Linear::dense(
                        *dim,
                        *dim,
                        sample(&mut rng, &base, dim * dim),
                        vec![0.0; *dim],
                    )?;
                    let wv = Linear::dense(
                        *dim,
                        *dim,
                        sample(&mut rng, &base, dim * dim),
                        vec![0.0; *dim],
                    )?;
                    let wo = Linear::dense(
                        *dim,
                        *dim,
                        sample(&mut rng, &resid, dim * dim),
                        vec![0.0; *dim],
                    )?;
                    let fc1 = Linear::dense(
                        *ffn,
                        *dim,
                        sample(&mut rng, &base, ffn * dim),
                        vec![0.0; *ffn],
                    )?;
                    let fc2 = Linear::dense(
                        *dim,
                        *ffn,
                        sample(&mut rng, &resid, dim * ffn),
                        vec![0.0; *dim],
                    )?;
                    blocks_v.push(Block {
                        ln1_g: vec![1.0; *dim],
                        ln1_b: vec![0.0; *dim],
                        wq,
                        wk,
                        wv,
                        wo,
                        ln2_g: vec![1.0; *dim],
                        ln2_b: vec![0.0; *dim],
                        fc1,
                        fc2,
                    });
                }
                let lm_head = sample(&mut rng, &base, vocab * dim);
                Net::Tf(TfNet {
                    vocab: *vocab,
                    ctx: *ctx,
                    dim: *dim,
                    nblocks: *blocks,
                    heads: *heads,
                    ffn: *ffn,
                    tok_emb,
                    pos_emb,
                    blocks: blocks_v,
                    lnf_g: vec![1.0; *dim],
                    lnf_b: vec![0.0; *dim],
                    lm_head,
                    mode: Mode::Full,
                    precision,
                    qcfg: None,
                })
            }
        };
        if precision == ScalePrecision::Single {
            net.snap_params_f32();
        }
        Ok(net)
    }

    pub fn arch(&self) -> ArchSpec {
        match self {
            Net::Mlp(m) => ArchSpec::Mlp { dims: m.dims.clone() },
            Net::Tf(t) => ArchSpec::Transformer {
                vocab: t.vocab,
                ctx: t.ctx,
                dim: t.dim,
                blocks: t.nblocks,
                heads: t.heads,
                ffn: t.ffn,
            },
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            Net::Mlp(m) => m.mode,
            Net::Tf(t) => t.mode,
        }
    }

    pub fn precision(&self) -> ScalePrecision {
        match self {
            Net::Mlp(m) => m.precision,
            Net::Tf(t) => t.precision,
        }
    }

    pub fn qcfg(&self) -> Option<QuantConfig> {
        match self {
            Net::Mlp(m) => m.qcfg,
            Net::Tf(t) => t.qcfg,
        }
    }

    /// Quantize every linear layer of a full-precision network into frozen
    /// codes with minimum-error scales; embeddings, norms, biases, and the
    /// output head stay dense (and frozen under scale-only adaptation).
    pub fn quantize(&self, cfg: &QuantConfig) -> Result<Net> {
        self.convert(cfg, false)
    }

    /// Attach a quantizer-in-the-loop shadow copy to every linear layer.
    pub fn to_qat(&self, cfg: &QuantConfig) -> Result<Net> {
        self.convert(cfg, true)
    }

    fn convert(&self, cfg: &QuantConfig, qat: bool) -> Result<Net> {
        if self.mode() != Mode::Full {
            return Err(Error::Config(
                "only a full-precision network can be quantized".into(),
            ));
        }
        let conv = |l: &Linear| -> Result<Linear> {
            if qat {
                l.to_qat(cfg)
            } else {
                l.quantize(cfg)
            }
        };
        let mode = if qat { Mode::Qat } else { Mode::Peqa };
        let single = cfg.scale_precision == ScalePrecision::Single;
        let snap = |v: &Vec<f64>| -> Vec<f64> {
            let mut out = v.clone();
            if single {
                snap32(&mut out);
            }
            out
        };
        match self {
            Net::Mlp(m) => {
                let layers: Result<Vec<_>> = m.layers.iter().map(conv).collect();
                Ok(Net::Mlp(MlpNet {
                    dims: m.dims.clone(),
                    layers: layers?,
                    mode,
                    precision: cfg.scale_precision,
                    qcfg: Some(*cfg),
                }))
            }
            Net::Tf(t) => {
                let mut blocks = Vec::new();
                for b in &t.blocks {
                    blocks.push(Block {
                        ln1_g: snap(&b.ln1_g),
                        ln1_b: snap(&b.ln1_b),
                        wq: conv(&b.wq)?,
                        wk: conv(&b.wk)?,
                        wv: conv(&b.wv)?,
                        wo: conv(&b.wo)?,
                        ln2_g: snap(&b.ln2_g),
                        ln2_b: snap(&b.ln2_b),
                        fc1: conv(&b.fc1)?,
                        fc2: conv(&b.fc2)?,
                    });
                }
                Ok(Net::Tf(TfNet {
                    vocab: t.vocab,
                    ctx: t.ctx,
                    dim: t.dim,
                    nblocks: t.nblocks,
                    heads: t.heads,
                    ffn: t.ffn,
                    tok_emb: snap(&t.tok_emb),
                    pos_emb: snap(&t.pos_emb),
                    blocks,
                    lnf_g: snap(&t.lnf_g),
                    lnf_b: snap(&t.lnf_b),
                    lm_head: snap(&t.lm_head),
                    mode,
                    precision: cfg.scale_precision,
                    qcfg: Some(*cfg),
                }))
            }
        }
    }

    /// Full-precision network computing what this network computes: dense
    /// layers are cloned; quantized and QAT layers are replaced by their
    /// dequantized reconstructions.
    pub fn dense_equiv(&self) -> Result<Net> {
        match self {
            Net::Mlp(m) => {
                let layers: Result<Vec<_>> =
                    m.layers.iter().map(|l| l.dense_equiv()).collect();
                Ok(Net::Mlp(MlpNet {
                    dims: m.dims.clone(),
                    layers: layers?,
                    mode: Mode::Full,
                    precision: m.precision,
                    qcfg: None,
                }))
            }
            Net::Tf(t) => {
                let mut blocks = Vec::new();
                for b in &t.blocks {
                    blocks.push(Block {
                        ln1_g: b.ln1_g.clone(),
                        ln1_b: b.ln1_b.clone(),
                        wq: b.wq.dense_equiv()?,
                        wk: b.wk.dense_equiv()?,
                        wv: b.wv.dense_equiv()?,
                        wo: b.wo.dense_equiv()?,
                        ln2_g: b.ln2_g.clone(),
                        ln2_b: b.ln2_b.clone(),
                        fc1: b.fc1.dense_equiv()?,
                        fc2: b.fc2.dense_equiv()?,
                    });
                }
                Ok(Net::Tf(TfNet {
                    vocab: t.vocab,
                    ctx: t.ctx,
                    dim: t.dim,
                    nblocks: t.nblocks,
                    heads: t.heads,
                    ffn: t.ffn,
                    tok_emb: t.tok_emb.clone(),
                    pos_emb: t.pos_emb.clone(),
                    blocks,
                    lnf_g: t.lnf_g.clone(),
                    lnf_b: t.lnf_b.clone(),
                    lm_head: t.lm_head.clone(),
                    mode: Mode::Full,
                    precision: t.precision,
                    qcfg: None,
                }))
            }
        }
    }

    /// Snap every parameter tensor to the nearest `f32` value (the on-disk
    /// grid). The trainer calls this after each step under single precision.
    pub fn snap_params_f32(&mut self) {
        let snap_lin = |l: &mut Linear| {
            match &mut l.kind {
                LinKind::Dense { w } => snap32(w),
                LinKind::Quant { scales, .. } => snap32(&mut scales.s),
                LinKind::Qat { w, scales, .. } => {
                    snap32(w);
                    snap32(&mut scales.s);
                }
            }
            snap32(&mut l.bias);
        };
        match self {
            Net::Mlp(m) => {
                for l in &mut m.layers {
                    snap_lin(l);
                }
            }
            Net::Tf(t) => {
                snap32(&mut t.tok_emb);
                snap32(&mut t.pos_emb);
                for b in &mut t.blocks {
                    snap32(&mut b.ln1_g);
                    snap32(&mut b.ln1_b);
                    snap_lin(&mut b.wq);
                    snap_lin(&mut b.wk);
                    snap_lin(&mut b.wv);
                    snap_lin(&mut b.wo);
                    snap32(&mut b.ln2_g);
                    snap32(&mut b.ln2_b);
                    snap_lin(&mut b.fc1);
                    snap_lin(&mut b.fc2);
                }
                snap32(&mut t.lnf_g);
                snap32(&mut t.lnf_b);
                snap32(&mut t.lm_head);
            }
        }
    }

    /// All linear layers in canonical order (the layer order used by
    /// checkpoints: MLP layers front to back; transformer blocks in order,
    /// each contributing wq, wk, wv, wo, fc1, fc2).
    pub fn linears(&self) -> Vec<&Linear> {
        match self {
            Net::Mlp(m) => m.layers.iter().collect(),
            Net::Tf(t) => t.blocks.iter().flat_map(|b| b.linears()).collect(),
        }
    }

    /// Flat concatenation of all scale tensors in canonical layer order.
    pub fn scale_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for l in self.linears() {
            let sc = l.scales().ok_or_else(|| {
                Error::Config("network has dense layers without scales".into())
            })?;
            out.extend_from_slice(&sc.s);
        }
        Ok(out)
    }

    /// Overwrite all scale tensors from a flat buffer in canonical layer
    /// order (the adapter-swap primitive). Codes are untouched.
    pub fn set_scale_values(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self
            .linears()
            .iter()
            .map(|l| l.scales().map(|s| s.s.len()).unwrap_or(0))
            .sum();
        if flat.len() != total {
            return Err(Error::Input(format!(
                "scale buffer has {} values, network needs {total}",
                flat.len()
            )));
        }
        let mut off = 0;
        let mut apply = |l: &mut Linear| -> Result<()> {
            match &mut l.kind {
                LinKind::Quant { scales, .. } | LinKind::Qat { scales, .. } => {
                    let k = scales.s.len();
                    scales.s.copy_from_slice(&flat[off..off + k]);
                    off += k;
                    Ok(())
                }
                LinKind::Dense { .. } => Err(Error::Config(
                    "network has dense layers without scales".into(),
                )),
            }
        };
        match self {
            Net::Mlp(m) => {
                for l in &mut m.layers {
                    apply(l)?;
                }
            }
            Net::Tf(t) => {
                for b in &mut t.blocks {
                    for l in
                        [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.fc1, &mut b.fc2]
                    {
                        apply(l)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of scalars the current mode trains.
    pub fn learnable_count(&self) -> u64 {
        let lin_count = |l: &Linear| -> u64 {
            match (&l.kind, self.mode()) {
                (LinKind::Quant { scales, .. }, _) => scales.s.len() as u64,
                (LinKind::Qat { w, scales, .. }, _) => {
                    (w.len() + scales.s.len() + l.bias.len()) as u64
                }
                (LinKind::Dense { w }, _) => (w.len() + l.bias.len()) as u64,
            }
        };
        match self {
            Net::Mlp(m) => m.layers.iter().map(lin_count).sum(),
            Net::Tf(t) => {
                let linears: u64 = self.linears().iter().map(|l| lin_count(l)).sum();
                if matches!(t.mode, Mode::Peqa) {
                    linears
                } else {
                    let dim = t.dim as u64;
                    let norms = (2 * t.nblocks as u64 + 1) * 2 * dim;
                    linears
                        + t.tok_emb.len() as u64
                        + t.pos_emb.len() as u64
                        + norms
                        + t.lm_head.len() as u64
                }
            }
        }
    }

    /// FNV-1a checksum of every parameter tensor, keyed by a stable name.
    /// Training-isolation tests snapshot this before and after a run to see
    /// exactly which tensors moved.
    pub fn param_checksums(&self) -> Vec<(String, u64)> {
        let mut out = Vec::new();
        let lin = |name: String, l: &Linear, out: &mut Vec<(String, u64)>| {
            match &l.kind {
                LinKind::Dense { w } => out.push((format!("{name}.w"), hash_f64(w))),
                LinKind::Quant { packed, scales } => {
                    out.push((format!("{name}.codes"), hash_u32(&packed.words)));
                    out.push((format!("{name}.s"), hash_f64(&scales.s)));
                    out.push((format!("{name}.z"), hash_u8(&scales.z)));
                }
                LinKind::Qat { w, scales, .. } => {
                    out.push((format!("{name}.w"), hash_f64(w)));
                    out.push((format!("{name}.s"), hash_f64(&scales.s)));
                    out.push((format!("{name}.z"), hash_u8(&scales.z)));
                }
            }
            out.push((format!("{name}.bias"), hash_f64(&l.bias)));
        };
        match self {
            Net::Mlp(m) => {
                for (i, l) in m.layers.iter().enumerate() {
                    lin(format!("layers.{i}"), l, &mut out);
                }
            }
            Net::Tf(t) => {
                out.push(("tok_emb".into(), hash_f64(&t.tok_emb)));
                out.push(("pos_emb".into(), hash_f64(&t.pos_emb)));
                for (i, b) in t.blocks.iter().enumerate() {
                    out.push((format!("blocks.{i}.ln1_g"), hash_f64(&b.ln1_g)));
                    out.push((format!("blocks.{i}.ln1_b"), hash_f64(&b.ln1_b)));
                    lin(format!("blocks.{i}.wq"), &b.wq, &mut out);
                    lin(format!("blocks.{i}.wk"), &b.wk, &mut out);
                    lin(format!("blocks.{i}.wv"), &b.wv, &mut out);
                    lin(format!("blocks.{i}.wo"), &b.wo, &mut out);
                    out.push((format!("blocks.{i}.ln2_g"), hash_f64(&b.ln2_g)));
                    out.push((format!("blocks.{i}.ln2_b"), hash_f64(&b.ln2_b)));
                    lin(format!("blocks.{i}.fc1"), &b.fc1, &mut out);
                    lin(format!("blocks.{i}.fc2"), &b.fc2, &mut out);
                }
                out.push(("lnf_g".into(), hash_f64(&t.lnf_g)));
                out.push(("lnf_b".into(), hash_f64(&t.lnf_b)));
                out.push(("lm_head".into(), hash_f64(&t.lm_head)));
            }
        }
        out
    }
}

fn fnv1a64(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hash_f64(v: &[f64]) -> u64 {
    fnv1a64(v.iter().flat_map(|x| x.to_bits().to_le_bytes()))
}

fn hash_u32(v: &[u32]) -> u64 {
    fnv1a64(v.iter().flat_map(|x| x.to_le_bytes()))
}

fn hash_u8(v: &[u8]) -> u64 {
    fnv1a64(v.iter().copied())
}
