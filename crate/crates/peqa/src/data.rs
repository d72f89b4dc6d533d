//! Corpus handling: byte-level text loading, train/eval splitting, seeded
//! window sampling for language-model training, full-pass evaluation batches,
//! two-column CSV ingestion for regression, and the synthetic byte sources
//! the self-contained experiments run on.
//!
//! Only two input formats are accepted — raw bytes for language modeling and
//! two-column numeric CSV for regression. Anything else is rejected rather
//! than guessed at.

use crate::error::{Error, Result};
use crate::model::Batch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

/// Read a file as a byte-level corpus.
pub fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Input(format!("{} is empty", path.display())));
    }
    Ok(bytes)
}

/// Split a corpus into a training head and an evaluation tail. The split
/// point is `⌊len·(1 − eval_frac)⌋`; both sides must come out non-empty.
pub fn split_corpus(data: &[u8], eval_frac: f64) -> Result<(&[u8], &[u8])> {
    if !(eval_frac > 0.0 && eval_frac < 1.0) {
        return Err(Error::Config(format!(
            "eval fraction {eval_frac} outside (0, 1)"
        )));
    }
    let cut = (data.len() as f64 * (1.0 - eval_frac)).floor() as usize;
    if cut == 0 || cut == data.len() {
        return Err(Error::Input(format!(
            "corpus of {} bytes cannot be split at fraction {eval_frac}",
            data.len()
        )));
    }
    Ok((&data[..cut], &data[cut..]))
}

/// Seeded sampler of random training windows: each batch is `batch` windows
/// of `window + 1` consecutive bytes at independently drawn offsets.
pub struct WindowSampler {
    rng: ChaCha8Rng,
    pub batch: usize,
    pub window: usize,
}

impl WindowSampler {
    pub fn new(seed: u64, batch: usize, window: usize) -> Self {
        WindowSampler { rng: ChaCha8Rng::seed_from_u64(seed), batch, window }
    }

    pub fn sample(&mut self, data: &[u8]) -> Result<Batch> {
        let need = self.window + 1;
        if data.len() < need {
            return Err(Error::Input(format!(
                "corpus of {} bytes shorter than one window of {need}",
                data.len()
            )));
        }
        if self.batch == 0 || self.window == 0 {
            return Err(Error::Config("batch and window must be positive".into()));
        }
        let mut tokens = Vec::with_capacity(self.batch * need);
        for _ in 0..self.batch {
            let start = self.rng.gen_range(0..=data.len() - need);
            tokens.extend_from_slice(&data[start..start + need]);
        }
        Ok(Batch::Lm { tokens, b: self.batch, t: self.window })
    }
}

/// Deterministic full-pass evaluation batches: consecutive windows at stride
/// `window`, so every byte after the first `window`-aligned prefix is
/// predicted exactly once; the final partial window is dropped. Windows are
/// grouped `batch` at a time (the last group may be smaller).
pub fn eval_batches(data: &[u8], batch: usize, window: usize) -> Result<Vec<Batch>> {
    if batch == 0 || window == 0 {
        return Err(Error::Config("batch and window must be positive".into()));
    }
    if data.len() < window + 1 {
        return Err(Error::Input(format!(
            "evaluation corpus of {} bytes shorter than one window of {}",
            data.len(),
            window + 1
        )));
    }
    let nwin = (data.len() - 1) / window;
    let mut out = Vec::new();
    let mut wi = 0usize;
    while wi < nwin {
        let take = batch.min(nwin - wi);
        let mut tokens = Vec::with_capacity(take * (window + 1));
        for k in 0..take {
            let start = (wi + k) * window;
            tokens.extend_from_slice(&data[start..start + window + 1]);
        }
        out.push(Batch::Lm { tokens, b: take, t: window });
        wi += take;
    }
    Ok(out)
}

/// Number of predicted positions in one batch (the weight its mean loss
/// carries in a full-pass average).
pub fn batch_positions(batch: &Batch) -> usize {
    match batch {
        Batch::Lm { b, t, .. } => b * t,
        Batch::Reg { targets, .. } => targets.len(),
    }
}

// ---------------------------------------------------------------------------
// Regression data (two-column CSV)
// ---------------------------------------------------------------------------

/// Regression rows: `d_in` feature columns and `d_out` target columns,
/// row-major. CSV ingestion produces the two-column case (one feature, one
/// target per row).
#[derive(Clone, Debug)]
pub struct RegData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub d_in: usize,
    pub d_out: usize,
}

impl RegData {
    pub fn rows(&self) -> usize {
        self.x.len() / self.d_in
    }
}

/// Parse a strictly two-column numeric CSV: each line `feature,target`.
/// Blank lines are skipped; any other shape or non-numeric field is an error.
pub fn load_reg_csv(path: &Path) -> Result<RegData> {
    let text = fs::read_to_string(path)?;
    parse_reg_csv(&text).map_err(|e| match e {
        Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_reg_csv(text: &str) -> Result<RegData> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (a, b) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::Input(format!(
                    "line {}: expected exactly two comma-separated columns",
                    ln + 1
                )))
            }
        };
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| {
                Error::Input(format!("line {}: {what} {s:?} is not a number", ln + 1))
            })
        };
        x.push(parse(a, "feature")?);
        y.push(parse(b, "target")?);
    }
    if x.is_empty() {
        return Err(Error::Input("no data rows".into()));
    }
    Ok(RegData { x, y, d_in: 1, d_out: 1 })
}

/// Split regression rows into a training head and an evaluation tail.
pub fn split_reg(data: &RegData, eval_frac: f64) -> Result<(RegData, RegData)> {
    if !(eval_frac > 0.0 && eval_frac < 1.0) {
        return Err(Error::Config(format!(
            "eval fraction {eval_frac} outside (0, 1)"
        )));
    }
    let rows = data.rows();
    let cut = (rows as f64 * (1.0 - eval_frac)).floor() as usize;
    if cut == 0 || cut == rows {
        return Err(Error::Input(format!(
            "{rows} rows cannot be split at fraction {eval_frac}"
        )));
    }
    let head = RegData {
        x: data.x[..cut * data.d_in].to_vec(),
        y: data.y[..cut * data.d_out].to_vec(),
        d_in: data.d_in,
        d_out: data.d_out,
    };
    let tail = RegData {
        x: data.x[cut * data.d_in..].to_vec(),
        y: data.y[cut * data.d_out..].to_vec(),
        d_in: data.d_in,
        d_out: data.d_out,
    };
    Ok((head, tail))
}

/// Seeded sampler of regression batches (rows drawn with replacement).
pub struct RegSampler {
    rng: ChaCha8Rng,
    pub batch: usize,
}

impl RegSampler {
    pub fn new(seed: u64, batch: usize) -> Self {
        RegSampler { rng: ChaCha8Rng::seed_from_u64(seed), batch }
    }

    pub fn sample(&mut self, data: &RegData) -> Result<Batch> {
        let rows = data.rows();
        if rows == 0 || self.batch == 0 {
            return Err(Error::Input("empty regression data or batch".into()));
        }
        let mut x = Vec::with_capacity(self.batch * data.d_in);
        let mut targets = Vec::with_capacity(self.batch * data.d_out);
        for _ in 0..self.batch {
            let r = self.rng.gen_range(0..rows);
            x.extend_from_slice(&data.x[r * data.d_in..(r + 1) * data.d_in]);
            targets.extend_from_slice(&data.y[r * data.d_out..(r + 1) * data.d_out]);
        }
        Ok(Batch::Reg { x, targets, b: self.batch })
    }
}

/// Full-pass regression evaluation batches in row order.
pub fn reg_eval_batches(data: &RegData, batch: usize) -> Result<Vec<Batch>> {
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let rows = data.rows();
    if rows == 0 {
        return Err(Error::Input("empty regression data".into()));
    }
    let mut out = Vec::new();
    let mut r = 0usize;
    while r < rows {
        let take = batch.min(rows - r);
        out.push(Batch::Reg {
            x: data.x[r * data.d_in..(r + take) * data.d_in].to_vec(),
            targets: data.y[r * data.d_out..(r + take) * data.d_out].to_vec(),
            b: take,
        });
        r += take;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

/// Alphabet of the synthetic sources: lowercase letters, so generated
/// corpora are readable text.
pub const SYNTH_ALPHABET: usize = 24;
const SYNTH_BASE: u8 = b'a';

/// Order-1 Markov byte source over a 24-letter alphabet. From state `a` the
/// next symbol is one of three deterministic successor functions or a
/// uniform draw; `shift` in [0, 1] blends the mixture weights (and one
/// successor map) from the base distribution toward a shifted task
/// distribution, so small shifts give mildly different corpora with the same
/// alphabet and broad structure.
pub fn synth_corpus(seed: u64, len: usize, shift: f64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&shift) {
        return Err(Error::Config(format!("shift {shift} outside [0, 1]")));
    }
    if len == 0 {
        return Err(Error::Config("corpus length must be positive".into()));
    }
    let k = SYNTH_ALPHABET;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len);
    let mut state = rng.gen_range(0..k);
    // Mixture weights over (successor-1, successor-2, successor-3, uniform).
    let base_w = [0.50, 0.22, 0.13, 0.15];
    let task_w = [0.18, 0.50, 0.17, 0.15];
    let mut w = [0.0f64; 4];
    for i in 0..4 {
        w[i] = (1.0 - shift) * base_w[i] + shift * task_w[i];
    }
    for _ in 0..len {
        out.push(SYNTH_BASE + state as u8);
        let u: f64 = rng.gen();
        let succ1 = (state + 1) % k;
        // The second successor map itself drifts with the shift.
        let succ2_base = (3 * state + 5) % k;
        let succ2_task = (5 * state + 11) % k;
        let succ2 = if rng.gen::<f64>() < shift { succ2_task } else { succ2_base };
        let succ3 = (7 * state + 2) % k;
        state = if u < w[0] {
            succ1
        } else if u < w[0] + w[1] {
            succ2
        } else if u < w[0] + w[1] + w[2] {
            succ3
        } else {
            rng.gen_range(0..k)
        };
    }
    Ok(out)
}
