//! `peqa`: quantize dense checkpoints into shared low-bit bases, fine-tune
//! scale-only adapters (or QAT/RTN/full baselines), evaluate, switch tasks,
//! benchmark the packed kernels, and print parameter/size accounting tables.
//!
//! Conventions shared by every subcommand:
//! - Inputs are never mutated; outputs must not exist unless `--force`.
//! - Each command that writes files also writes a `*.manifest.json` next to
//!   its first output, recording the resolved configuration, seed, SHA-256
//!   hashes of all inputs, output paths, and a timestamp.
//! - Exit codes: 0 success, 2 usage/configuration error, 3 data/integrity
//!   error, 4 training divergence.
//! - Corpus files are treated as raw bytes (byte-level language modeling);
//!   `.csv` files must be two numeric columns (regression). Nothing else is
//!   accepted.
//! - `PEQA_THREADS` caps kernel worker threads (see the library docs).

use clap::{Args, Parser, Subcommand};
use peqa::adapters::{
    self, load_adapter, load_base, load_dense, save_adapter, save_base, save_dense,
};
use peqa::model::{ArchSpec, LinKind, Net};
use peqa::quant::{reconstruction_rmse, GroupSize, QuantConfig, ScalePrecision};
use peqa::trainer::{self, EvalData, RunMode, TrainConfig, TrainData};
use peqa::{accounting, data, kernel, Error};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

type Result<T> = peqa::Result<T>;

const DEFAULT_EVAL_FRAC: f64 = 0.2;
const DEFAULT_WINDOW: usize = 32;
const DEFAULT_BATCH: usize = 8;
const DEFAULT_EPOCHS: usize = 2;
const DEFAULT_LR: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "peqa",
    version,
    about = "Low-bit quantized nets with swappable scale adapters"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a randomly initialized dense checkpoint (.pqdn)
    Init(InitCmd),
    /// Generate a synthetic byte corpus
    Synth(SynthCmd),
    /// Quantize a dense checkpoint into a shared base artifact (.pqab)
    Quantize(QuantizeCmd),
    /// Fine-tune: scale-only or RTN from a base, QAT or full from a dense checkpoint
    Finetune(FinetuneCmd),
    /// Evaluate loss/perplexity on a corpus
    Eval(EvalCmd),
    /// Apply a task adapter to a base and verify swap invariants
    Switch(SwitchCmd),
    /// Benchmark the packed matvec kernel
    Bench(BenchCmd),
    /// Print learnable-parameter and model-size accounting for a catalog
    Size(SizeCmd),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Input(_) | Error::ZeroScale { .. } | Error::Integrity(_) | Error::Io(_) => 3,
                Error::Diverged { .. } => 4,
            })
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Init(c) => run_init(c),
        Cmd::Synth(c) => run_synth(c),
        Cmd::Quantize(c) => run_quantize(c),
        Cmd::Finetune(c) => run_finetune(c),
        Cmd::Eval(c) => run_eval(c),
        Cmd::Switch(c) => run_switch(c),
        Cmd::Bench(c) => run_bench(c),
        Cmd::Size(c) => run_size(c),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct FileStamp {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<FileStamp>,
    outputs: Vec<String>,
    unix_time: u64,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Write `<first output>.manifest.json` describing this invocation.
fn write_manifest(
    command: &str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let first = match outputs.first() {
        Some(p) => p,
        None => return Ok(()),
    };
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        seed,
        inputs: inputs
            .iter()
            .map(|p| {
                Ok(FileStamp { path: p.display().to_string(), sha256: sha256_hex(p)? })
            })
            .collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        unix_time: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let path = manifest_path(first);
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    fs::write(path, body)?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Refuse to clobber an existing output unless `--force` was given.
fn ensure_new(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Input(format!(
            "output {} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn parse_group(s: &str) -> Result<GroupSize> {
    if s.eq_ignore_ascii_case("channel") {
        return Ok(GroupSize::Channel);
    }
    s.parse::<usize>()
        .ok()
        .filter(|&g| g > 0)
        .map(GroupSize::Cols)
        .ok_or_else(|| {
            Error::Config(format!(
                "group {s:?} is neither \"channel\" nor a positive column count"
            ))
        })
}

fn load_net_any(path: &Path) -> Result<Net> {
    match &adapters::file_magic(path)? {
        b"PQAB" => load_base(path),
        b"PQDN" => load_dense(path),
        other => Err(Error::Integrity(format!(
            "{}: unrecognized format tag {:?} (expected PQAB or PQDN)",
            path.display(),
            String::from_utf8_lossy(other)
        ))),
    }
}

/// A corpus path is regression CSV iff it ends in `.csv`; anything else is
/// byte-level LM data.
fn is_csv(path: &Path) -> bool {
    path.extension().map(|e| e.eq_ignore_ascii_case("csv")).unwrap_or(false)
}

/// Default LM window: the net's context length when it has one, capped at
/// [`DEFAULT_WINDOW`]. Regression nets ignore the window entirely.
fn default_window(net: &Net) -> usize {
    match net.arch() {
        ArchSpec::Transformer { ctx, .. } => ctx.min(DEFAULT_WINDOW),
        ArchSpec::Mlp { .. } => DEFAULT_WINDOW,
    }
}

// ---------------------------------------------------------------------------
// init / synth
// ---------------------------------------------------------------------------

#[derive(Args)]
struct InitCmd {
    /// Output dense checkpoint path (.pqdn)
    #[arg(long)]
    out: PathBuf,
    /// Initialization seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
    #[command(subcommand)]
    arch: ArchCmd,
}

#[derive(Subcommand)]
enum ArchCmd {
    /// Feed-forward regression net
    Mlp {
        /// Layer dimensions, input first (e.g. 1,16,16,1)
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
    },
    /// Byte-level decoder-only transformer
    Transformer {
        #[arg(long, default_value_t = 256)]
        vocab: usize,
        #[arg(long, default_value_t = 32)]
        ctx: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 128)]
        ffn: usize,
    },
}

fn run_init(c: InitCmd) -> Result<()> {
    ensure_new(&c.out, c.force)?;
    let arch = match &c.arch {
        ArchCmd::Mlp { dims } => ArchSpec::Mlp { dims: dims.clone() },
        ArchCmd::Transformer { vocab, ctx, dim, blocks, heads, ffn } => ArchSpec::Transformer {
            vocab: *vocab,
            ctx: *ctx,
            dim: *dim,
            blocks: *blocks,
            heads: *heads,
            ffn: *ffn,
        },
    };
    let net = Net::dense_init(&arch, c.seed, ScalePrecision::Single)?;
    save_dense(&net, &c.out)?;
    println!(
        "initialized dense net: {} learnable parameters -> {}",
        net.learnable_count(),
        c.out.display()
    );
    write_manifest(
        "init",
        json!({ "arch": arch, "seed": c.seed }),
        Some(c.seed),
        &[],
        &[&c.out],
    )
}

#[derive(Args)]
struct SynthCmd {
    /// Output corpus path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus length in bytes
    #[arg(long, default_value_t = 262_144)]
    len: usize,
    /// Task-distribution shift in [0, 1] (0 = base task)
    #[arg(long, default_value_t = 0.0)]
    shift: f64,
    #[arg(long)]
    force: bool,
}

fn run_synth(c: SynthCmd) -> Result<()> {
    ensure_new(&c.out, c.force)?;
    let corpus = data::synth_corpus(c.seed, c.len, c.shift)?;
    fs::write(&c.out, &corpus)?;
    println!("wrote {} bytes -> {}", corpus.len(), c.out.display());
    write_manifest(
        "synth",
        json!({ "seed": c.seed, "len": c.len, "shift": c.shift }),
        Some(c.seed),
        &[],
        &[&c.out],
    )
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

#[derive(Args)]
struct QuantizeCmd {
    /// Input dense checkpoint (.pqdn)
    #[arg(long = "in")]
    input: PathBuf,
    /// Bit-width (2, 3, 4, or 8)
    #[arg(long)]
    bits: u32,
    /// "channel" or a group width in columns
    #[arg(long, default_value = "channel")]
    group: String,
    /// Output base artifact path (.pqab)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn run_quantize(c: QuantizeCmd) -> Result<()> {
    ensure_new(&c.out, c.force)?;
    let dense = load_dense(&c.input)?;
    let cfg = QuantConfig::new(c.bits, parse_group(&c.group)?, ScalePrecision::Single)?;
    let quantized = dense.quantize(&cfg)?;

    let mut packed_bytes = 0u64;
    let mut dense16_bytes = 0u64;
    for (i, (dl, ql)) in dense.linears().iter().zip(quantized.linears()).enumerate() {
        let w = match &dl.kind {
            LinKind::Dense { w } => w,
            _ => unreachable!("loaded checkpoint is dense"),
        };
        let what = match &ql.dense_equiv()?.kind {
            LinKind::Dense { w } => w.clone(),
            _ => unreachable!("dense_equiv is dense"),
        };
        println!(
            "layer {i} ({}x{}): reconstruction rmse {:.6e}",
            ql.n,
            ql.m,
            reconstruction_rmse(w, &what)
        );
        if let LinKind::Quant { packed, scales } = &ql.kind {
            packed_bytes +=
                peqa::pack::packed_weight_bytes(packed.n, packed.m, packed.bits, scales.group_cols);
        }
        dense16_bytes += 2 * (ql.n * ql.m) as u64;
    }
    let reduction = 100.0 * (1.0 - packed_bytes as f64 / dense16_bytes as f64);
    println!(
        "linear layers: {packed_bytes} packed bytes vs {dense16_bytes} bytes at 16-bit dense ({reduction:.1}% smaller)"
    );
    save_base(&quantized, &c.out)?;
    println!("wrote base -> {}", c.out.display());
    write_manifest(
        "quantize",
        json!({ "bits": c.bits, "group": c.group, "in": c.input.display().to_string() }),
        None,
        &[&c.input],
        &[&c.out],
    )
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

#[derive(Args)]
struct FinetuneCmd {
    /// Base artifact (.pqab, modes peqa/rtn) or dense checkpoint (.pqdn, modes qat/full)
    #[arg(long)]
    base: PathBuf,
    /// Corpus: raw bytes for LM, two-column .csv for regression
    #[arg(long)]
    data: PathBuf,
    /// peqa | qat | rtn | full (may also come from --config)
    #[arg(long)]
    mode: Option<String>,
    /// Task name stored in the adapter (required for peqa/rtn)
    #[arg(long)]
    task: Option<String>,
    /// Output artifact: .pqad for peqa/rtn, .pqdn for qat/full
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// LM context window in tokens
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out tail fraction of --data used for evaluation
    #[arg(long)]
    eval_frac: Option<f64>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Global-norm clip threshold; 0 disables clipping
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Quantizer bit-width (qat mode only)
    #[arg(long)]
    bits: Option<u32>,
    /// Quantizer grouping (qat mode only)
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    force: bool,
}

/// Optional values a `--config` JSON file may provide. Flags win over file
/// values; file values win over built-in defaults.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileCfg {
    mode: Option<String>,
    task: Option<String>,
    epochs: Option<usize>,
    batch: Option<usize>,
    window: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    eval_frac: Option<f64>,
    steps_per_epoch: Option<usize>,
    clip_norm: Option<f64>,
    weight_decay: Option<f64>,
    eval_every: Option<usize>,
    bits: Option<u32>,
    group: Option<String>,
}

enum Corpus {
    Lm(Vec<u8>),
    Reg(data::RegData),
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    if is_csv(path) {
        Ok(Corpus::Reg(data::load_reg_csv(path)?))
    } else {
        Ok(Corpus::Lm(data::load_bytes(path)?))
    }
}

fn run_finetune(c: FinetuneCmd) -> Result<()> {
    ensure_new(&c.out, c.force)?;
    let csv_path = c.out.with_extension("csv");
    let summary_path = c.out.with_extension("summary.json");
    ensure_new(&csv_path, c.force)?;
    ensure_new(&summary_path, c.force)?;
    let file: FileCfg = match &c.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => FileCfg::default(),
    };
    let mode: RunMode = c
        .mode
        .or(file.mode)
        .ok_or_else(|| Error::Config("no mode given (flag --mode or config file)".into()))?
        .parse()?;
    let task = c.task.or(file.task);
    let epochs = c.epochs.or(file.epochs).unwrap_or(DEFAULT_EPOCHS);
    let batch = c.batch.or(file.batch).unwrap_or(DEFAULT_BATCH);
    let window_opt = c.window.or(file.window);
    let lr = c.lr.or(file.lr).unwrap_or(DEFAULT_LR);
    let seed = c.seed.or(file.seed).unwrap_or(0);
    let eval_frac = c.eval_frac.or(file.eval_frac).unwrap_or(DEFAULT_EVAL_FRAC);
    let clip = match c.clip_norm.or(file.clip_norm) {
        Some(v) if v == 0.0 => None,
        Some(v) => Some(v),
        None => Some(1.0),
    };

    // The starting net: quantized base for scale-only/RTN runs, dense
    // checkpoint for QAT/full runs.
    let magic = adapters::file_magic(&c.base)?;
    let net = match (mode, &magic) {
        (RunMode::Peqa | RunMode::Rtn, b"PQAB") => load_base(&c.base)?,
        (RunMode::Qat, b"PQDN") => {
            let group_str = c.group.clone().or(file.group.clone()).unwrap_or_else(|| "channel".into());
            let qcfg = QuantConfig::new(
                c.bits.or(file.bits).unwrap_or(4),
                parse_group(&group_str)?,
                ScalePrecision::Single,
            )?;
            load_dense(&c.base)?.to_qat(&qcfg)?
        }
        (RunMode::Full, b"PQDN") => load_dense(&c.base)?,
        (RunMode::Peqa | RunMode::Rtn, _) => {
            return Err(Error::Config(format!(
                "mode {mode} adapts a quantized base (.pqab); {} is not one",
                c.base.display()
            )))
        }
        (RunMode::Qat | RunMode::Full, _) => {
            return Err(Error::Config(format!(
                "mode {mode} trains from a dense checkpoint (.pqdn); {} is not one",
                c.base.display()
            )))
        }
    };
    if matches!(mode, RunMode::Peqa | RunMode::Rtn) && task.is_none() {
        return Err(Error::Config(
            "adapter outputs need a task name (--task or config file)".into(),
        ));
    }
    let window = window_opt.unwrap_or_else(|| default_window(&net));
    let mut cfg = TrainConfig::new(mode, lr, epochs, batch, window, seed);
    cfg.steps_per_epoch = c.steps_per_epoch.or(file.steps_per_epoch);
    cfg.clip_norm = clip;
    cfg.weight_decay = c.weight_decay.or(file.weight_decay).unwrap_or(0.0);
    cfg.eval_every = c.eval_every.or(file.eval_every).unwrap_or(1);
    let base_copy = net.clone();

    let corpus = load_corpus(&c.data)?;
    let (outcome, resolved) = match &corpus {
        Corpus::Lm(bytes) => {
            let (train_b, eval_b) = data::split_corpus(bytes, eval_frac)?;
            let td = TrainData::Lm { train: train_b, eval: eval_b };
            let resolved = json!({ "mode": mode, "task": task, "eval_frac": eval_frac, "train": cfg });
            (trainer::train(net, &td, &cfg)?, resolved)
        }
        Corpus::Reg(rows) => {
            let (train_r, eval_r) = data::split_reg(rows, eval_frac)?;
            let td = TrainData::Reg { train: &train_r, eval: &eval_r };
            let resolved = json!({ "mode": mode, "task": task, "eval_frac": eval_frac, "train": cfg });
            (trainer::train(net, &td, &cfg)?, resolved)
        }
    };

    let report = &outcome.report;
    print!("{}", report.to_csv());
    fs::write(&csv_path, report.to_csv())?;
    fs::write(&summary_path, report.summary_json()?)?;

    if let Some(step) = report.diverged_at {
        let mut inputs: Vec<&Path> = vec![&c.base, &c.data];
        if let Some(p) = &c.config {
            inputs.push(p);
        }
        write_manifest("finetune", resolved, Some(seed), &inputs, &[&csv_path, &summary_path])?;
        return Err(Error::Diverged { step });
    }

    match mode {
        RunMode::Peqa | RunMode::Rtn => {
            save_adapter(&outcome.net, &base_copy, task.as_deref().unwrap(), &c.out)?;
        }
        RunMode::Qat => save_dense(&outcome.net.dense_equiv()?, &c.out)?,
        RunMode::Full => save_dense(&outcome.net, &c.out)?,
    }
    println!(
        "final eval_loss {} ppl {}",
        report.final_eval_loss, report.final_ppl
    );
    println!("wrote {} ({} steps, {:.1}s)", c.out.display(), report.steps, report.wall_seconds);

    let mut inputs: Vec<&Path> = vec![&c.base, &c.data];
    if let Some(p) = &c.config {
        inputs.push(p);
    }
    write_manifest(
        "finetune",
        resolved,
        Some(seed),
        &inputs,
        &[&c.out, &csv_path, &summary_path],
    )
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalCmd {
    /// Base artifact (.pqab) or dense checkpoint (.pqdn)
    #[arg(long)]
    base: PathBuf,
    /// Optional task adapter to apply first
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Corpus to evaluate on
    #[arg(long)]
    data: PathBuf,
    /// Evaluate the held-out tail fraction (matches finetune's split)
    #[arg(long)]
    eval_frac: Option<f64>,
    /// Evaluate the whole corpus instead of the held-out tail
    #[arg(long)]
    whole: bool,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Optional CSV report path
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn run_eval(c: EvalCmd) -> Result<()> {
    if c.whole && c.eval_frac.is_some() {
        return Err(Error::Config("--whole and --eval-frac are exclusive".into()));
    }
    let mut net = load_net_any(&c.base)?;
    if let Some(ap) = &c.adapter {
        let adapter = load_adapter(ap)?;
        adapters::switch_task(&mut net, &adapter)?;
    }
    let window = c.window.unwrap_or_else(|| default_window(&net));
    let batch = c.batch.unwrap_or(DEFAULT_BATCH);
    let eval_frac = c.eval_frac.unwrap_or(DEFAULT_EVAL_FRAC);
    let corpus = load_corpus(&c.data)?;
    let loss = match &corpus {
        Corpus::Lm(bytes) => {
            let slice = if c.whole { &bytes[..] } else { data::split_corpus(bytes, eval_frac)?.1 };
            trainer::evaluate(&net, &EvalData::Lm(slice), batch, window)?
        }
        Corpus::Reg(rows) => {
            let owned;
            let slice = if c.whole {
                rows
            } else {
                owned = data::split_reg(rows, eval_frac)?.1;
                &owned
            };
            trainer::evaluate(&net, &EvalData::Reg(slice), batch, window)?
        }
    };
    println!("eval_loss {} ppl {}", loss, loss.exp());
    if let Some(out) = &c.out {
        ensure_new(out, c.force)?;
        fs::write(out, format!("loss,ppl\n{},{}\n", loss, loss.exp()))?;
        let mut inputs: Vec<&Path> = vec![&c.base, &c.data];
        if let Some(ap) = &c.adapter {
            inputs.push(ap);
        }
        write_manifest(
            "eval",
            json!({
                "whole": c.whole, "eval_frac": eval_frac, "window": window, "batch": batch
            }),
            None,
            &inputs,
            &[out],
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// switch
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SwitchCmd {
    /// Base artifact (.pqab)
    #[arg(long)]
    base: PathBuf,
    /// Task adapter (.pqad)
    #[arg(long)]
    adapter: PathBuf,
    /// Probe corpus run through the switched net
    #[arg(long)]
    probe: PathBuf,
    #[arg(long)]
    window: Option<usize>,
    /// Optionally save the switched net as a new base artifact
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn run_switch(c: SwitchCmd) -> Result<()> {
    let mut net = load_base(&c.base)?;
    let adapter = load_adapter(&c.adapter)?;
    adapters::switch_task(&mut net, &adapter)?;
    let window = c.window.unwrap_or_else(|| default_window(&net));
    let probe = data::load_bytes(&c.probe)?;
    let loss = trainer::evaluate(&net, &EvalData::Lm(&probe), DEFAULT_BATCH, window)?;
    println!(
        "switched to task {:?}; non-scale tensors verified unchanged; probe_loss {} ppl {}",
        adapter.task,
        loss,
        loss.exp()
    );
    if let Some(out) = &c.out {
        ensure_new(out, c.force)?;
        save_base(&net, out)?;
        println!("wrote switched base -> {}", out.display());
        write_manifest(
            "switch",
            json!({ "task": adapter.task, "window": window }),
            None,
            &[&c.base, &c.adapter, &c.probe],
            &[out],
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Args)]
struct BenchCmd {
    /// Shapes as NxM pairs, comma-separated (e.g. 256x256,1024x512)
    #[arg(long, default_value = "256x256,1024x1024")]
    sizes: String,
    /// Bit-widths, comma-separated
    #[arg(long, default_value = "2,3,4,8")]
    bits: String,
    #[arg(long, default_value = "channel")]
    group: String,
    #[arg(long, default_value_t = 9)]
    repeats: usize,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn run_bench(c: BenchCmd) -> Result<()> {
    ensure_new(&c.out, c.force)?;
    let sizes: Vec<(usize, usize)> = c
        .sizes
        .split(',')
        .map(|tok| {
            let (n, m) = tok
                .split_once(['x', 'X'])
                .ok_or_else(|| Error::Config(format!("size {tok:?} is not NxM")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("size {tok:?} is not NxM")))
            };
            Ok((parse(n)?, parse(m)?))
        })
        .collect::<Result<_>>()?;
    let bits: Vec<u32> = c
        .bits
        .split(',')
        .map(|b| {
            b.trim()
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("bit-width {b:?} is not an integer")))
        })
        .collect::<Result<_>>()?;
    let report = kernel::bench_matvec(&sizes, &bits, parse_group(&c.group)?, c.repeats)?;
    print!("{}", report.to_csv());
    fs::write(&c.out, report.to_csv())?;
    write_manifest(
        "bench",
        json!({ "sizes": c.sizes, "bits": bits, "group": c.group, "repeats": c.repeats }),
        None,
        &[],
        &[&c.out],
    )
}

// ---------------------------------------------------------------------------
// size
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SizeCmd {
    /// Built-in catalog name (llama7b/llama13b/llama30b/llama65b) or a
    /// catalog JSON path
    #[arg(long)]
    catalog: String,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    #[arg(long, default_value = "channel")]
    group: String,
    /// Optional path to also write the table to
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn run_size(c: SizeCmd) -> Result<()> {
    let catalog = if accounting::BUILTIN_CATALOGS.contains(&c.catalog.as_str()) {
        accounting::LayerCatalog::builtin(&c.catalog)?
    } else {
        accounting::LayerCatalog::from_json(&fs::read_to_string(Path::new(&c.catalog))?)?
    };
    let group = parse_group(&c.group)?;
    let gb = |bytes: u64| bytes as f64 / 1e9;
    let mb = |bytes: u64| bytes as f64 / 1e6;

    let total = catalog.total_params();
    let learnable = accounting::count_learnable(&catalog, group)?;
    let packed = accounting::model_size_bytes(&catalog, c.bits, group, 2)?;
    let dense16 = accounting::model_size_bytes(&catalog, 16, group, 2)?;
    let opt8 = accounting::optimizer_state_bytes(learnable, accounting::StateConvention::TwoMoments);
    let opt16 = accounting::optimizer_state_bytes(
        learnable,
        accounting::StateConvention::MomentsPlusMaster,
    );
    let full8 = accounting::optimizer_state_bytes(total, accounting::StateConvention::TwoMoments);
    let full16 =
        accounting::optimizer_state_bytes(total, accounting::StateConvention::MomentsPlusMaster);

    let mut t = String::new();
    t.push_str(&format!("catalog {} ({} params)\n", catalog.name, total));
    t.push_str(&format!("bits {} group {}\n", c.bits, c.group));
    t.push_str(&format!("learnable scale params   {learnable}\n"));
    t.push_str(&format!(
        "model size               {:.2} GB packed vs {:.2} GB at 16-bit ({:.1}% smaller)\n",
        gb(packed),
        gb(dense16),
        100.0 * (1.0 - packed as f64 / dense16 as f64)
    ));
    t.push_str(&format!(
        "optimizer state (scales) {:.2} MB at 8 B/param, {:.2} MB at 16 B/param\n",
        mb(opt8),
        mb(opt16)
    ));
    t.push_str(&format!(
        "optimizer state (full)   {:.2} GB at 8 B/param, {:.2} GB at 16 B/param\n",
        gb(full8),
        gb(full16)
    ));
    print!("{t}");
    if let Some(out) = &c.out {
        ensure_new(out, c.force)?;
        fs::write(out, &t)?;
        write_manifest(
            "size",
            json!({ "catalog": c.catalog, "bits": c.bits, "group": c.group }),
            None,
            &[],
            &[out],
        )?;
    }
    Ok(())
}
