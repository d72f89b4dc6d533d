//! Fused dequantize–matvec/matmul over packed codes.
//!
//! The kernels walk the packed words directly — the dense dequantized matrix
//! is never materialized — and compute, per output row,
//!
//! ```text
//!     y[i] = Σ_G s[i,G] · ( Σ_{j∈G} (q[i,j] − z[i,G]) · x[j] ) + bias[i]
//! ```
//!
//! with double-precision accumulators, the inner sum in ascending column
//! order and the group sum in ascending group order. The zero-point is
//! subtracted per element (not factored out as −z·Σx), which keeps the
//! all-codes-equal-z case exactly zero and makes results independent of the
//! group's input sum rounding. Row partitioning across threads reproduces
//! the sequential result bit-for-bit because each output row is computed by
//! exactly one worker in the fixed intra-row order.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pack::{self, PackedIntMatrix};
use crate::quant::{CodeMatrix, GroupSize, ScaleSet};

/// A quantized fully-connected layer: packed codes, scales/zero-points, and
/// an optional unquantized bias.
#[derive(Clone, Debug)]
pub struct QuantLinear {
    pub packed: PackedIntMatrix,
    pub scales: ScaleSet,
    pub bias: Option<Vec<f64>>,
}

impl QuantLinear {
    pub fn new(
        packed: PackedIntMatrix,
        scales: ScaleSet,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if scales.n != packed.n || scales.input_dim() != packed.m {
            return Err(Error::Input(format!(
                "scales {}x{} (g={}) do not match packed {}x{}",
                scales.n, scales.groups, scales.group_cols, packed.n, packed.m
            )));
        }
        if let Some(b) = &bias {
            if b.len() != packed.n {
                return Err(Error::Input(format!(
                    "bias length {} does not match {} output rows",
                    b.len(),
                    packed.n
                )));
            }
        }
        Ok(QuantLinear { packed, scales, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.packed.n
    }

    pub fn in_dim(&self) -> usize {
        self.packed.m
    }
}

/// Worker cap: the `PEQA_THREADS` environment variable if set (minimum 1),
/// otherwise the machine's available parallelism. Read once per process.
pub fn thread_count() -> usize {
    static N: OnceLock<usize> = OnceLock::new();
    *N.get_or_init(|| {
        std::env::var("PEQA_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            })
    })
}

/// One output row's fused dot product, unpacking codes on the fly.
#[inline]
fn row_dot(packed: &PackedIntMatrix, scales: &ScaleSet, i: usize, x: &[f64]) -> f64 {
    let bits = packed.bits;
    let mask = (1u64 << bits) - 1;
    let wpr = packed.words_per_row();
    let words = &packed.words[i * wpr..(i + 1) * wpr];
    let groups = scales.groups;
    let g = scales.group_cols;
    let mut word_idx = 0usize;
    let mut bitbuf: u64 = 0;
    let mut bits_held: u32 = 0;
    let mut y = 0.0f64;
    for gi in 0..groups {
        let s = scales.s[i * groups + gi];
        let z = scales.z[i * groups + gi] as f64;
        let mut acc = 0.0f64;
        for &xj in &x[gi * g..(gi + 1) * g] {
            if bits_held < bits {
                bitbuf |= (words[word_idx] as u64) << bits_held;
                word_idx += 1;
                bits_held += 32;
            }
            let code = (bitbuf & mask) as f64;
            bitbuf >>= bits;
            bits_held -= bits;
            acc += (code - z) * xj;
        }
        y += s * acc;
    }
    y
}

/// Compute rows `[row0, row1)` of the product into `out` (length row1−row0).
fn rows_into(layer: &QuantLinear, x: &[f64], row0: usize, row1: usize, out: &mut [f64]) {
    for (k, i) in (row0..row1).enumerate() {
        let mut y = row_dot(&layer.packed, &layer.scales, i, x);
        if let Some(b) = &layer.bias {
            y += b[i];
        }
        out[k] = y;
    }
}

/// Fused quantized matrix-vector product with input validation.
pub fn qmatvec(layer: &QuantLinear, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.in_dim() {
        return Err(Error::Input(format!(
            "input length {} does not match layer input dimension {}",
            x.len(),
            layer.in_dim()
        )));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite input value {bad}")));
    }
    Ok(qmatvec_unchecked(layer, x, thread_count()))
}

/// Matvec without precondition checks, with an explicit worker count; the
/// training loops call this on shapes validated at construction. Any worker
/// count produces output bit-identical to the sequential path.
pub fn qmatvec_unchecked(layer: &QuantLinear, x: &[f64], threads: usize) -> Vec<f64> {
    let n = layer.out_dim();
    let mut y = vec![0.0f64; n];
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 || n < 64 {
        rows_into(layer, x, 0, n, &mut y);
        return y;
    }
    let chunk = (n + threads - 1) / threads;
    std::thread::scope(|scope| {
        let mut rest: &mut [f64] = &mut y;
        let mut row0 = 0usize;
        while row0 < n {
            let row1 = (row0 + chunk).min(n);
            let (head, tail) = rest.split_at_mut(row1 - row0);
            rest = tail;
            scope.spawn(move || rows_into(layer, x, row0, row1, head));
            row0 = row1;
        }
    });
    y
}

/// Single-precision surface: inputs, scales, bias, and outputs pass through
/// `f32`, while every accumulation stays in double precision.
pub fn qmatvec_single(layer: &QuantLinear, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != layer.in_dim() {
        return Err(Error::Input(format!(
            "input length {} does not match layer input dimension {}",
            x.len(),
            layer.in_dim()
        )));
    }
    let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let single = QuantLinear {
        packed: layer.packed.clone(),
        scales: ScaleSet {
            s: layer.scales.s.iter().map(|&s| s as f32 as f64).collect(),
            ..layer.scales.clone()
        },
        bias: layer
            .bias
            .as_ref()
            .map(|b| b.iter().map(|&v| v as f32 as f64).collect()),
    };
    Ok(qmatvec_unchecked(&single, &xd, thread_count())
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

/// Batched product. `x` is an m×k matrix stored column-major (each column is
/// one input vector, contiguous); the n×k result is column-major as well, and
/// column c equals `qmatvec(layer, column c)` bit-exactly — the columns are
/// computed by the very same row routine.
pub fn qmatmul(layer: &QuantLinear, x: &[f64], k: usize) -> Result<Vec<f64>> {
    let m = layer.in_dim();
    if x.len() != m * k {
        return Err(Error::Input(format!(
            "matrix buffer length {} does not match {m}x{k}",
            x.len()
        )));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite input value {bad}")));
    }
    let n = layer.out_dim();
    let threads = thread_count();
    let mut y = vec![0.0f64; n * k];
    for c in 0..k {
        let col = qmatvec_unchecked(layer, &x[c * m..(c + 1) * m], threads);
        y[c * n..(c + 1) * n].copy_from_slice(&col);
    }
    Ok(y)
}

/// Per-group partial dot products for one input vector: fills `u` (n×G,
/// row-major) with `u[i,G] = Σ_{j∈G} (q[i,j] − z[i,G]) · x[j]` and returns
/// the bias-free output `y[i] = Σ_G s[i,G]·u[i,G]`. The partials are exactly
/// the quantities the scale gradient needs.
pub fn qmatvec_partials(
    packed: &PackedIntMatrix,
    scales: &ScaleSet,
    x: &[f64],
    u: &mut [f64],
) -> Vec<f64> {
    let n = packed.n;
    let groups = scales.groups;
    let g = scales.group_cols;
    let bits = packed.bits;
    let mask = (1u64 << bits) - 1;
    let wpr = packed.words_per_row();
    debug_assert_eq!(u.len(), n * groups);
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let words = &packed.words[i * wpr..(i + 1) * wpr];
        let mut word_idx = 0usize;
        let mut bitbuf: u64 = 0;
        let mut bits_held: u32 = 0;
        let mut yi = 0.0f64;
        for gi in 0..groups {
            let s = scales.s[i * groups + gi];
            let z = scales.z[i * groups + gi] as f64;
            let mut acc = 0.0f64;
            for &xj in &x[gi * g..(gi + 1) * g] {
                if bits_held < bits {
                    bitbuf |= (words[word_idx] as u64) << bits_held;
                    word_idx += 1;
                    bits_held += 32;
                }
                let code = (bitbuf & mask) as f64;
                bitbuf >>= bits;
                bits_held -= bits;
                acc += (code - z) * xj;
            }
            u[i * groups + gi] = acc;
            yi += s * acc;
        }
        y[i] = yi;
    }
    y
}

/// Accumulate the input gradient of a quantized layer:
/// `dx[j] += Σ_i dy[i] · s[i,G(j)] · (q[i,j] − z[i,G(j)])`.
pub fn accumulate_input_grad(
    packed: &PackedIntMatrix,
    scales: &ScaleSet,
    dy: &[f64],
    dx: &mut [f64],
) {
    let n = packed.n;
    let groups = scales.groups;
    let g = scales.group_cols;
    let bits = packed.bits;
    let mask = (1u64 << bits) - 1;
    let wpr = packed.words_per_row();
    for i in 0..n {
        let dyi = dy[i];
        if dyi == 0.0 {
            continue;
        }
        let words = &packed.words[i * wpr..(i + 1) * wpr];
        let mut word_idx = 0usize;
        let mut bitbuf: u64 = 0;
        let mut bits_held: u32 = 0;
        for gi in 0..groups {
            let coeff = dyi * scales.s[i * groups + gi];
            let z = scales.z[i * groups + gi] as f64;
            for dxj in &mut dx[gi * g..(gi + 1) * g] {
                if bits_held < bits {
                    bitbuf |= (words[word_idx] as u64) << bits_held;
                    word_idx += 1;
                    bits_held += 32;
                }
                let code = (bitbuf & mask) as f64;
                bitbuf >>= bits;
                bits_held -= bits;
                *dxj += coeff * (code - z);
            }
        }
    }
}

/// One benchmark configuration's measurements.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub n: usize,
    pub m: usize,
    pub bits: u32,
    /// Resolved group width in columns (m for channel-wise).
    pub group_cols: usize,
    pub median_ns: u128,
    /// Packed weight bytes (codes + scales/zero-points) ÷ median time.
    pub gbps: f64,
    /// Packed code bytes ÷ dense 32-bit weight bytes for the same shape.
    pub bytes_ratio: f64,
}

/// Measurements for a sweep of shapes and bit-widths.
#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,m,bits,group,median_ns,gbps,bytes_ratio\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{}\n",
                r.n, r.m, r.bits, r.group_cols, r.median_ns, r.gbps, r.bytes_ratio
            ));
        }
        out
    }
}

/// Time fused matvecs over the given shapes and bit-widths.
///
/// For each configuration a random layer is built (seeded, so runs are
/// comparable), warmed up once, then timed `repeats` times; the row records
/// the median. Throughput is derived from the packed weight bytes actually
/// touched; the bytes ratio is analytic (it needs no timing) and compares
/// packed code bytes against a 32-bit dense weight matrix of the same shape.
pub fn bench_matvec(
    sizes: &[(usize, usize)],
    bits_list: &[u32],
    group: GroupSize,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats < 3 {
        return Err(Error::Config(format!(
            "benchmark needs at least 3 repeats, got {repeats}"
        )));
    }
    if sizes.iter().any(|&(n, m)| n == 0 || m == 0) {
        return Err(Error::Config("benchmark sizes must be positive".into()));
    }
    let mut report = BenchReport::default();
    for &(n, m) in sizes {
        for &bits in bits_list {
            let g = group.resolve(m)?;
            let groups = m / g;
            let mut rng = ChaCha8Rng::seed_from_u64(0xBE7C + (n * 31 + m * 7 + bits as usize) as u64);
            let ncodes = 1u16 << bits;
            let codes = CodeMatrix {
                n,
                m,
                bits,
                q: (0..n * m).map(|_| rng.gen_range(0..ncodes) as u8).collect(),
            };
            let scales = ScaleSet {
                n,
                groups,
                group_cols: g,
                s: (0..n * groups).map(|_| rng.gen_range(0.01..0.1)).collect(),
                z: (0..n * groups).map(|_| rng.gen_range(0..ncodes) as u8).collect(),
            };
            let layer = QuantLinear::new(pack::pack(&codes)?, scales, None)?;
            let x: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();

            // Calibrate an inner iteration count so each timed sample runs
            // long enough for the clock to resolve it.
            let t0 = Instant::now();
            std::hint::black_box(qmatvec_unchecked(&layer, &x, 1));
            let once = t0.elapsed().as_nanos().max(1);
            let inner = (2_000_000 / once).clamp(1, 10_000) as usize;

            let mut samples: Vec<u128> = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t = Instant::now();
                for _ in 0..inner {
                    std::hint::black_box(qmatvec_unchecked(&layer, std::hint::black_box(&x), 1));
                }
                samples.push(t.elapsed().as_nanos() / inner as u128);
            }
            samples.sort_unstable();
            let median_ns = samples[samples.len() / 2].max(1);

            let touched = pack::packed_weight_bytes(n, m, bits, g) as f64;
            let gbps = touched / median_ns as f64; // bytes/ns == GB/s
            let bytes_ratio =
                pack::packed_code_bytes(n, m, bits) as f64 / (4.0 * n as f64 * m as f64);
            report.rows.push(BenchRow { n, m, bits, group_cols: g, median_ns, gbps, bytes_ratio });
        }
    }
    Ok(report)
}
