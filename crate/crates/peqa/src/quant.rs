//! Asymmetric low-bit weight quantization: code computation, dequantization,
//! minimum-MSE scale/zero-point initialization, and group partitioning.
//!
//! A weight matrix `W` (n×m, row-major) is represented per output channel
//! (row) and per contiguous column group as
//!
//! ```text
//!     Ŵ[i,j] = s[i,G] · (q[i,j] − z[i,G])
//! ```
//!
//! with unsigned integer codes `q ∈ [0, 2^b−1]`, an integer zero-point `z` in
//! the same range, and a real scale `s`. Codes and zero-points are frozen
//! after initialization; scales are the trainable quantity.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Column grouping for scales and zero-points.
///
/// `Channel` is the sentinel for one group per output channel (g = m);
/// `Cols(g)` uses one (scale, zero-point) pair per `g` contiguous input
/// columns. A non-sentinel `g` must divide the layer input dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupSize {
    Channel,
    Cols(usize),
}

impl GroupSize {
    /// Resolve to a concrete column count for input dimension `m`.
    pub fn resolve(self, m: usize) -> Result<usize> {
        match self {
            GroupSize::Channel => Ok(m),
            GroupSize::Cols(g) => {
                if g == 0 {
                    return Err(Error::Config("group size must be positive".into()));
                }
                if m % g != 0 {
                    return Err(Error::Config(format!(
                        "group size {g} does not divide input dimension {m}"
                    )));
                }
                Ok(g)
            }
        }
    }
}

/// Numeric policy for scale storage.
///
/// `Single` snaps every scale to the nearest `f32` value (the on-disk
/// precision) so that save/load round trips are bit-exact; `Double` keeps full
/// `f64` resolution and is intended for oracle and finite-difference tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalePrecision {
    Single,
    Double,
}

/// Bit-width, grouping, and numeric policy governing all quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Code bit-width; allowed values are 2, 3, 4, and 8.
    pub bits: u32,
    pub group: GroupSize,
    pub scale_precision: ScalePrecision,
}

impl QuantConfig {
    pub fn new(bits: u32, group: GroupSize, scale_precision: ScalePrecision) -> Result<Self> {
        if !matches!(bits, 2 | 3 | 4 | 8) {
            return Err(Error::Config(format!(
                "unsupported bit-width {bits}; allowed: 2, 3, 4, 8"
            )));
        }
        Ok(QuantConfig { bits, group, scale_precision })
    }

    /// Largest representable code, 2^b − 1.
    pub fn qmax(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// Per-(channel, group) scales and zero-points.
///
/// Both tensors have shape n × G where G = m / g. Scales are the only
/// trainable quantity; zero-points are frozen integers in `[0, 2^b−1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSet {
    pub n: usize,
    /// Number of groups per row (G).
    pub groups: usize,
    /// Columns per group (g); the layer input dimension is `groups * group_cols`.
    pub group_cols: usize,
    /// Row-major n×G scale matrix.
    pub s: Vec<f64>,
    /// Row-major n×G zero-point matrix.
    pub z: Vec<u8>,
}

impl ScaleSet {
    /// Input dimension m implied by the grouping.
    pub fn input_dim(&self) -> usize {
        self.groups * self.group_cols
    }

    /// Total number of scale entries (the trainable parameter count).
    pub fn scale_count(&self) -> usize {
        self.s.len()
    }
}

/// Frozen unsigned integer codes of a weight matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeMatrix {
    pub n: usize,
    pub m: usize,
    pub bits: u32,
    /// Row-major n×m codes, each in `[0, 2^bits − 1]`.
    pub q: Vec<u8>,
}

/// Round half away from zero; the rounding rule used throughout (this is
/// exactly `f64::round`, fixed here by name so the oracle tests can cite it).
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// True reconstruction error of one group under scale `s` and zero-point `z`,
/// along with the sums needed to refine `s` within the current code
/// assignment: returns (Σ(w − s·d)², Σw·d, Σd²) where d = clamp(⌊w/s⌉+z) − z.
#[inline]
fn eval_group(w: &[f64], s: f64, z: f64, qmax: f64) -> (f64, f64, f64) {
    let mut err = 0.0;
    let mut swd = 0.0;
    let mut sdd = 0.0;
    for &wj in w {
        let q = (round_half_away(wj / s) + z).clamp(0.0, qmax);
        let d = q - z;
        let r = wj - s * d;
        err += r * r;
        swd += wj * d;
        sdd += d * d;
    }
    (err, swd, sdd)
}

/// Running argmin over (error, scale, zero-point) with deterministic
/// tie-breaking: smaller error, then smaller scale, then smaller zero-point.
struct Best {
    err: f64,
    s: f64,
    z: u32,
}

impl Best {
    fn offer(&mut self, err: f64, s: f64, z: u32) {
        if err < self.err
            || (err == self.err && (s < self.s || (s == self.s && z < self.z)))
        {
            self.err = err;
            self.s = s;
            self.z = z;
        }
    }
}

/// Minimum-MSE (s, z) for one group of weights, assuming max > min.
///
/// The search scans all integer zero-points and 91 scale seeds α·s_mm with
/// α ∈ {0.30, 0.31, …, 1.20}, s_mm = (max−min)/(2^b−1), scoring each by the
/// true round-clamp reconstruction error. Because that error is piecewise
/// quadratic in s (the pieces are the code assignments), each evaluation also
/// refines s to the vertex of its assignment's parabola, Σw·d / Σd², and
/// re-scores; two refinement rounds reach the per-assignment optimum, making
/// the result independent of the seed-grid resolution.
fn search_group(w: &[f64], bits: u32, w_min: f64, w_max: f64) -> (f64, f64, u32) {
    let qmax_u = (1u32 << bits) - 1;
    let qmax = qmax_u as f64;
    let s_mm = (w_max - w_min) / qmax;
    let mut best = Best { err: f64::INFINITY, s: f64::INFINITY, z: 0 };
    for z in 0..=qmax_u {
        let zf = z as f64;
        for k in 30u32..=120 {
            let mut s = (k as f64 / 100.0) * s_mm;
            let (err, mut swd, mut sdd) = eval_group(w, s, zf, qmax);
            best.offer(err, s, z);
            for _ in 0..2 {
                if sdd <= 0.0 {
                    break;
                }
                let s_ref = swd / sdd;
                if !s_ref.is_finite() || s_ref <= 0.0 || s_ref == s {
                    break;
                }
                s = s_ref;
                let (err_r, swd_r, sdd_r) = eval_group(w, s, zf, qmax);
                best.offer(err_r, s, z);
                swd = swd_r;
                sdd = sdd_r;
            }
        }
    }
    (best.err, best.s, best.z)
}

/// Degenerate-group rule for constant groups (max == min): constant 0 maps to
/// (s=1, z=0, q=0); a positive constant c to (s=c, z=0, q=1); a negative
/// constant to (s=|c|, z=1, q=0). All three reconstruct exactly.
fn degenerate_group(c: f64) -> (f64, u32, u8) {
    if c == 0.0 {
        (1.0, 0, 0)
    } else if c > 0.0 {
        (c, 0, 1)
    } else {
        (-c, 1, 0)
    }
}

/// Initialize scales, zero-points, and codes minimizing per-group squared
/// reconstruction error (see [`search_group`] for the candidate set).
///
/// `w` is the n×m row-major weight matrix. Each (row, group) pair is solved
/// independently; the result is deterministic for identical inputs. With
/// `ScalePrecision::Single` the found scale is snapped to `f32` before codes
/// are computed, so codes are always consistent with the stored scale.
pub fn init_scale_zero(
    w: &[f64],
    n: usize,
    m: usize,
    cfg: &QuantConfig,
) -> Result<(ScaleSet, CodeMatrix)> {
    if w.len() != n * m {
        return Err(Error::Input(format!(
            "weight buffer length {} does not match {n}x{m}",
            w.len()
        )));
    }
    if let Some(bad) = w.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite weight {bad}")));
    }
    let g = cfg.group.resolve(m)?;
    let groups = m / g;
    let qmax = cfg.qmax() as f64;
    let mut s = vec![0.0f64; n * groups];
    let mut z = vec![0u8; n * groups];
    let mut q = vec![0u8; n * m];
    for i in 0..n {
        for gi in 0..groups {
            let col0 = gi * g;
            let wg = &w[i * m + col0..i * m + col0 + g];
            let (mut w_min, mut w_max) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in wg {
                w_min = w_min.min(v);
                w_max = w_max.max(v);
            }
            let (mut si, zi) = if w_min == w_max {
                let (si, zi, qc) = degenerate_group(w_min);
                for qj in &mut q[i * m + col0..i * m + col0 + g] {
                    *qj = qc;
                }
                (si, zi)
            } else {
                let (_, si, zi) = search_group(wg, cfg.bits, w_min, w_max);
                (si, zi)
            };
            if cfg.scale_precision == ScalePrecision::Single {
                si = si as f32 as f64;
            }
            if w_min != w_max {
                let zf = zi as f64;
                for (j, &wj) in wg.iter().enumerate() {
                    q[i * m + col0 + j] =
                        (round_half_away(wj / si) + zf).clamp(0.0, qmax) as u8;
                }
            }
            s[i * groups + gi] = si;
            z[i * groups + gi] = zi as u8;
        }
    }
    Ok((
        ScaleSet { n, groups, group_cols: g, s, z },
        CodeMatrix { n, m, bits: cfg.bits, q },
    ))
}

/// Recompute codes for `w` under existing scales:
/// `q[i,j] = clamp(⌊w[i,j]/s[i,G]⌉ + z[i,G], 0, 2^b−1)` with rounding half
/// away from zero. Rejects zero scales (the degenerate rule never stores one).
pub fn quantize_codes(
    w: &[f64],
    n: usize,
    m: usize,
    scales: &ScaleSet,
    cfg: &QuantConfig,
) -> Result<CodeMatrix> {
    if w.len() != n * m {
        return Err(Error::Input(format!(
            "weight buffer length {} does not match {n}x{m}",
            w.len()
        )));
    }
    if scales.n != n || scales.input_dim() != m {
        return Err(Error::Input(format!(
            "scale set shaped {}x{} (g={}) does not match weights {n}x{m}",
            scales.n, scales.groups, scales.group_cols
        )));
    }
    let qmax = cfg.qmax() as f64;
    let g = scales.group_cols;
    let mut q = vec![0u8; n * m];
    for i in 0..n {
        for gi in 0..scales.groups {
            let si = scales.s[i * scales.groups + gi];
            if si == 0.0 {
                return Err(Error::ZeroScale { channel: i });
            }
            let zf = scales.z[i * scales.groups + gi] as f64;
            for j in gi * g..(gi + 1) * g {
                q[i * m + j] = (round_half_away(w[i * m + j] / si) + zf).clamp(0.0, qmax) as u8;
            }
        }
    }
    Ok(CodeMatrix { n, m, bits: cfg.bits, q })
}

/// Reconstruct the dense matrix: `Ŵ[i,j] = s[i,G] · (q[i,j] − z[i,G])`.
pub fn dequantize(q: &CodeMatrix, scales: &ScaleSet) -> Result<Vec<f64>> {
    if scales.n != q.n || scales.input_dim() != q.m {
        return Err(Error::Input(format!(
            "scale set shaped {}x{} (g={}) does not match codes {}x{}",
            scales.n, scales.groups, scales.group_cols, q.n, q.m
        )));
    }
    let g = scales.group_cols;
    let mut w = vec![0.0f64; q.n * q.m];
    for i in 0..q.n {
        for gi in 0..scales.groups {
            let si = scales.s[i * scales.groups + gi];
            let zi = scales.z[i * scales.groups + gi] as f64;
            for j in gi * g..(gi + 1) * g {
                w[i * q.m + j] = si * (q.q[i * q.m + j] as f64 - zi);
            }
        }
    }
    Ok(w)
}

/// Elementwise `s₀ + Δs`; the pure scale-update rule (codes are untouched by
/// construction — they are not an argument).
pub fn apply_scale_delta(s0: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    if s0.len() != delta.len() {
        return Err(Error::Input(format!(
            "scale shapes differ: {} vs {}",
            s0.len(),
            delta.len()
        )));
    }
    Ok(s0.iter().zip(delta).map(|(a, b)| a + b).collect())
}

/// Root-mean-square reconstruction error between a dense matrix and its
/// quantized reconstruction (reporting helper).
pub fn reconstruction_rmse(w: &[f64], w_hat: &[f64]) -> f64 {
    assert_eq!(w.len(), w_hat.len());
    if w.is_empty() {
        return 0.0;
    }
    let sq: f64 = w.iter().zip(w_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    (sq / w.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(bits: u32, group: GroupSize) -> QuantConfig {
        QuantConfig::new(bits, group, ScalePrecision::Double).unwrap()
    }

    /// Independent brute-force oracle: plain dense scan over `steps` evenly
    /// spaced scales in [lo·s_mm, hi·s_mm] and all integer zero-points, no
    /// refinement. Written against the formula, not the implementation.
    fn oracle_group(w: &[f64], bits: u32, steps: usize, lo: f64, hi: f64) -> (f64, f64, u32) {
        let qmax = (1u32 << bits) - 1;
        let mn = w.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s_mm = (mx - mn) / qmax as f64;
        let mut best = (f64::INFINITY, 0.0, 0u32);
        for step in 0..steps {
            let frac = lo + (hi - lo) * step as f64 / (steps - 1) as f64;
            let s = frac * s_mm;
            for z in 0..=qmax {
                let mut err = 0.0;
                for &wj in w {
                    let c = (wj / s).round() + z as f64;
                    let qv = c.clamp(0.0, qmax as f64);
                    let rec = s * (qv - z as f64);
                    err += (wj - rec) * (wj - rec);
                }
                if err < best.0 {
                    best = (err, s, z);
                }
            }
        }
        best
    }

    fn group_err(w: &[f64], s: f64, z: u8, bits: u32) -> f64 {
        let qmax = ((1u32 << bits) - 1) as f64;
        w.iter()
            .map(|&wj| {
                let q = ((wj / s).round() + z as f64).clamp(0.0, qmax);
                let r = wj - s * (q - z as f64);
                r * r
            })
            .sum()
    }

    #[test]
    fn grid_aligned_row_is_exact() {
        let w = [0.0, 1.0, 2.0, 3.0];
        let (scales, codes) = init_scale_zero(&w, 1, 4, &cfg(2, GroupSize::Channel)).unwrap();
        assert_eq!(scales.s, vec![1.0]);
        assert_eq!(scales.z, vec![0]);
        assert_eq!(codes.q, vec![0, 1, 2, 3]);
        let rec = dequantize(&codes, &scales).unwrap();
        assert_eq!(rec, w.to_vec());
    }

    #[test]
    fn zero_row_uses_degenerate_rule() {
        let w = [0.0; 8];
        let (scales, codes) = init_scale_zero(&w, 1, 8, &cfg(4, GroupSize::Channel)).unwrap();
        assert_eq!(scales.s, vec![1.0]);
        assert_eq!(scales.z, vec![0]);
        assert!(codes.q.iter().all(|&q| q == 0));
    }

    #[test]
    fn constant_rows_reconstruct_exactly() {
        for &c in &[0.75, -1.25] {
            let w = [c; 4];
            let (scales, codes) = init_scale_zero(&w, 1, 4, &cfg(3, GroupSize::Channel)).unwrap();
            let rec = dequantize(&codes, &scales).unwrap();
            assert_eq!(rec, w.to_vec(), "constant {c}");
            if c > 0.0 {
                assert_eq!((scales.s[0], scales.z[0], codes.q[0]), (c, 0, 1));
            } else {
                assert_eq!((scales.s[0], scales.z[0], codes.q[0]), (-c, 1, 0));
            }
        }
    }

    #[test]
    fn example_row_beats_dense_oracle() {
        // Oracle: all z in 0..8 and 2001 evenly spaced scales in
        // [0.2 s_mm, 1.2 s_mm]. The search refines each candidate to its code
        // assignment's quadratic vertex, so its minimum must not exceed any
        // fixed grid's minimum.
        let w = [0.13, -0.41, 0.27, 0.09];
        let (scales, codes) = init_scale_zero(&w, 1, 4, &cfg(3, GroupSize::Channel)).unwrap();
        let impl_err = group_err(&w, scales.s[0], scales.z[0], 3);
        let (oracle_err, _, oracle_z) = oracle_group(&w, 3, 2001, 0.2, 1.2);
        assert!(
            impl_err <= oracle_err + 1e-12,
            "impl {impl_err} vs oracle {oracle_err}"
        );
        assert_eq!(scales.z[0] as u32, oracle_z);
        // Frozen from the analytic per-assignment optimum for this row.
        assert!((scales.s[0] - 0.098_888_888_888_888_9).abs() < 1e-9);
        assert!((impl_err - 1.966_666_666_666_666e-3).abs() < 1e-12);
        assert_eq!(codes.bits, 3);
    }

    #[test]
    fn random_rows_dominate_denser_oracle_and_minmax_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..60 {
            let len = rng.gen_range(4..=32);
            let bits = [2u32, 3, 4][trial % 3];
            let w: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let c = cfg(bits, GroupSize::Channel);
            let (scales, _) = init_scale_zero(&w, 1, len, &c).unwrap();
            let impl_err = group_err(&w, scales.s[0], scales.z[0], bits);
            // 10x denser than the 91-point seed grid, same [0.30, 1.20] span.
            let (oracle_err, _, _) = oracle_group(&w, bits, 901, 0.30, 1.20);
            assert!(
                impl_err <= oracle_err + 1e-10,
                "trial {trial}: impl {impl_err} > oracle {oracle_err}"
            );
            // Min-max baseline: s = (max-min)/(2^b-1), z = round(-min/s).
            let mn = w.iter().cloned().fold(f64::INFINITY, f64::min);
            let mx = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s_mm = (mx - mn) / ((1u32 << bits) - 1) as f64;
            let z_mm = (-mn / s_mm).round().clamp(0.0, ((1u32 << bits) - 1) as f64) as u8;
            let base_err = group_err(&w, s_mm, z_mm, bits);
            assert!(impl_err <= base_err, "trial {trial}: worse than min-max");
        }
    }

    #[test]
    fn small_matrices_match_oracle_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = cfg(3, GroupSize::Cols(8));
        let (n, m) = (4, 16);
        let w: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (scales, _) = init_scale_zero(&w, n, m, &c).unwrap();
        for i in 0..n {
            for gi in 0..scales.groups {
                let wg = &w[i * m + gi * 8..i * m + gi * 8 + 8];
                let impl_err =
                    group_err(wg, scales.s[i * scales.groups + gi], scales.z[i * scales.groups + gi], 3);
                let (oracle_err, _, _) = oracle_group(wg, 3, 911, 0.30, 1.20);
                assert!(impl_err <= oracle_err + 1e-12);
            }
        }
    }

    #[test]
    fn quantize_codes_rounds_and_clamps() {
        let scales = ScaleSet { n: 1, groups: 1, group_cols: 1, s: vec![1.0], z: vec![0] };
        let c = cfg(2, GroupSize::Channel);
        assert_eq!(quantize_codes(&[0.9], 1, 1, &scales, &c).unwrap().q, vec![1]);
        assert_eq!(quantize_codes(&[10.0], 1, 1, &scales, &c).unwrap().q, vec![3]);
        // -0.5 rounds away from zero to -1, then clamps to 0.
        assert_eq!(quantize_codes(&[-0.5], 1, 1, &scales, &c).unwrap().q, vec![0]);
    }

    #[test]
    fn zero_scale_is_rejected_with_channel() {
        let scales = ScaleSet { n: 2, groups: 1, group_cols: 2, s: vec![1.0, 0.0], z: vec![0, 0] };
        let c = cfg(4, GroupSize::Channel);
        match quantize_codes(&[1.0, 2.0, 3.0, 4.0], 2, 2, &scales, &c) {
            Err(Error::ZeroScale { channel }) => assert_eq!(channel, 1),
            other => panic!("expected ZeroScale, got {other:?}"),
        }
    }

    #[test]
    fn dequantize_examples() {
        let c1 = CodeMatrix { n: 1, m: 1, bits: 4, q: vec![1] };
        let s1 = ScaleSet { n: 1, groups: 1, group_cols: 1, s: vec![0.5], z: vec![0] };
        assert_eq!(dequantize(&c1, &s1).unwrap(), vec![0.5]);
        let c2 = CodeMatrix { n: 1, m: 1, bits: 4, q: vec![0] };
        let s2 = ScaleSet { n: 1, groups: 1, group_cols: 1, s: vec![0.5], z: vec![2] };
        assert_eq!(dequantize(&c2, &s2).unwrap(), vec![-1.0]);
    }

    #[test]
    fn grid_constructed_matrices_round_trip_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = cfg(4, GroupSize::Cols(4));
        let (n, m) = (6, 12);
        let scales = ScaleSet {
            n,
            groups: 3,
            group_cols: 4,
            s: (0..n * 3).map(|_| rng.gen_range(0.05..1.5)).collect(),
            z: (0..n * 3).map(|_| rng.gen_range(0..16) as u8).collect(),
        };
        let codes = CodeMatrix {
            n,
            m,
            bits: 4,
            q: (0..n * m).map(|_| rng.gen_range(0..16) as u8).collect(),
        };
        let w = dequantize(&codes, &scales).unwrap();
        let requant = quantize_codes(&w, n, m, &scales, &c).unwrap();
        assert_eq!(requant.q, codes.q);
        assert_eq!(dequantize(&requant, &scales).unwrap(), w);
    }

    #[test]
    fn dequantize_quantize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for &bits in &[2u32, 3, 4, 8] {
            let c = cfg(bits, GroupSize::Channel);
            let (n, m) = (5, 17);
            let w: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (scales, codes) = init_scale_zero(&w, n, m, &c).unwrap();
            let w1 = dequantize(&codes, &scales).unwrap();
            let codes2 = quantize_codes(&w1, n, m, &scales, &c).unwrap();
            let w2 = dequantize(&codes2, &scales).unwrap();
            assert_eq!(w1, w2, "bits {bits}");
        }
    }

    #[test]
    fn apply_scale_delta_is_elementwise() {
        assert_eq!(apply_scale_delta(&[1.0], &[0.0]).unwrap(), vec![1.0]);
        assert_eq!(apply_scale_delta(&[0.5], &[-0.1]).unwrap(), vec![0.4]);
        assert!(apply_scale_delta(&[1.0, 2.0], &[0.1]).is_err());
    }

    #[test]
    fn non_finite_weights_rejected() {
        let c = cfg(4, GroupSize::Channel);
        assert!(init_scale_zero(&[0.0, f64::NAN], 1, 2, &c).is_err());
        assert!(init_scale_zero(&[0.0, f64::INFINITY], 1, 2, &c).is_err());
    }

    #[test]
    fn group_size_must_divide_input_dim() {
        let c = cfg(4, GroupSize::Cols(5));
        assert!(matches!(
            init_scale_zero(&[0.0; 12], 1, 12, &c),
            Err(Error::Config(_))
        ));
        assert!(QuantConfig::new(5, GroupSize::Channel, ScalePrecision::Double).is_err());
    }

    #[test]
    fn single_precision_snaps_scales_to_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = QuantConfig::new(4, GroupSize::Channel, ScalePrecision::Single).unwrap();
        let (scales, _) = init_scale_zero(&w, 2, 8, &c).unwrap();
        for &s in &scales.s {
            assert_eq!(s, s as f32 as f64);
        }
    }

    proptest! {
        #[test]
        fn codes_always_in_range(
            seed in 0u64..1000,
            bits in prop::sample::select(vec![2u32, 3, 4, 8]),
            n in 1usize..6,
            m in 1usize..20,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let c = cfg(bits, GroupSize::Channel);
            let (scales, codes) = init_scale_zero(&w, n, m, &c).unwrap();
            let qmax = ((1u32 << bits) - 1) as u8;
            prop_assert!(codes.q.iter().all(|&q| q <= qmax));
            prop_assert!(scales.z.iter().all(|&z| z <= qmax));
            prop_assert!(scales.s.iter().all(|s| s.is_finite()));
        }

        #[test]
        fn scaling_equivariance_power_of_two(
            seed in 0u64..1000,
            c_exp in -2i32..4,
            bits in prop::sample::select(vec![2u32, 3, 4]),
        ) {
            // Power-of-two factors scale both w and s exactly in binary
            // floating point, so the quotient w/s — and hence every code — is
            // bit-identical. Arbitrary factors can perturb the quotient by an
            // ulp at rounding boundaries.
            let scale_factor = (2.0f64).powi(c_exp);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 12;
            let w: Vec<f64> = (0..m).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let qc = cfg(bits, GroupSize::Channel);
            let (scales, codes) = init_scale_zero(&w, 1, m, &qc).unwrap();
            let w_scaled: Vec<f64> = w.iter().map(|v| v * scale_factor).collect();
            let scales_scaled = ScaleSet {
                s: scales.s.iter().map(|v| v * scale_factor).collect(),
                ..scales.clone()
            };
            let codes_scaled = quantize_codes(&w_scaled, 1, m, &scales_scaled, &qc).unwrap();
            prop_assert_eq!(codes.q, codes_scaled.q);
        }

        #[test]
        fn init_never_worse_than_minmax(
            seed in 0u64..2000,
            bits in prop::sample::select(vec![2u32, 3, 4, 8]),
            m in 2usize..24,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = cfg(bits, GroupSize::Channel);
            let (scales, _) = init_scale_zero(&w, 1, m, &c).unwrap();
            let impl_err = group_err(&w, scales.s[0], scales.z[0], bits);
            let mn = w.iter().cloned().fold(f64::INFINITY, f64::min);
            let mx = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if mn < mx {
                let qmax = ((1u32 << bits) - 1) as f64;
                let s_mm = (mx - mn) / qmax;
                let z_mm = (-mn / s_mm).round().clamp(0.0, qmax) as u8;
                prop_assert!(impl_err <= group_err(&w, s_mm, z_mm, bits));
            }
        }
    }
}
