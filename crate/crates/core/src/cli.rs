//! Command-line entry points: generate, train, eval, quantize, bench.
//!
//! Every value flag resolves as command line > config file > built-in
//! default; the config file is flat `key = value` text whose keys mirror
//! the long flag names, and unknown keys are rejected. Each run writes its
//! artifacts into one directory (`--out`, or a fresh
//! `runs/<subcommand>-<unix-seconds>` by default) together with
//! `config.resolved`, a reusable record of every resolved setting.
//!
//! Exit codes are stable for scripting: 0 success, 1 usage error (bad
//! flags, bad config, invalid scheme, missing dependencies between flags),
//! 2 runtime error (IO failures, malformed files, training errors).

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accounting::model_report;
use crate::checkpoint::{load_any, save_quantized, AnyCheckpoint, Checkpoint, QuantizedModel};
use crate::config::{render, KeyValues};
use crate::eval::{
    benchmark_throughput, bin_tables, emit_report, evaluate, evaluate_with, Deviation, EvalRecord, OpsPoint, Report,
};
use crate::events::WindowConfig;
use crate::model::{Modality, Model, ModelConfig, INPUT_HW};
use crate::quant::{QatModel, QuantKind, QuantScheme};
use crate::synth::{generate_dataset, read_manifest, PreparedRecording, Scene, Split};
use crate::tensor::graph::Mode;
use crate::tensor::Tensor;
use crate::train::{train, LabelStats, Teacher, TrainConfig, TrainData, TrainOutcome};
use crate::Error;

/// Failures split by exit code: usage errors exit 1, runtime errors 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "evfuse", version, about = "Collision prediction from RGB and event-camera input")]
pub struct Cli {
    /// Flat key=value config file; command-line flags override its entries.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Cap the worker thread count [default: all cores].
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic ball-throw recordings and a split manifest.
    Generate(GenerateArgs),
    /// Train a model; writes a checkpoint and an epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint: distance-binned error tables and plots.
    Eval(EvalArgs),
    /// Export a quantized checkpoint's compact inference artifact.
    Quantize(QuantizeArgs),
    /// Measure single-window inference throughput.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Number of recordings to generate [required]
    #[arg(long, value_name = "N")]
    pub count: Option<usize>,
    /// Directory for the recordings and manifest [required]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dataset seed [default: 0]
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest from `generate` [required]
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Input modality: evs | rgb | fusion [required]
    #[arg(long, value_name = "NAME")]
    pub modality: Option<String>,
    /// Numeric scheme: fp32 | lsq+:BITS | dorefa | irnet | irnet_star |
    /// reactnet [default: fp32]
    #[arg(long, value_name = "NAME")]
    pub scheme: Option<String>,
    /// Event/RGB window length in milliseconds [default: 20]
    #[arg(long = "T", value_name = "MS")]
    pub t: Option<u32>,
    /// Consecutive windows stacked as input channels [default: 1]
    #[arg(long, value_name = "K")]
    pub stack: Option<u16>,
    /// Teacher checkpoint; required by (and only used for) reactnet
    #[arg(long, value_name = "FILE")]
    pub teacher: Option<PathBuf>,
    /// Maximum training epochs [default: 100]
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Items per optimizer step [default: 16]
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    /// Initial learning rate [default: 0.0001]
    #[arg(long, value_name = "LR")]
    pub lr: Option<f32>,
    /// Decoupled weight decay [default: 0.00001]
    #[arg(long, value_name = "WD")]
    pub weight_decay: Option<f32>,
    /// Training windows sampled per recording per epoch [default: 6]
    #[arg(long, value_name = "N")]
    pub windows_per_recording: Option<usize>,
    /// Per-pixel event-count clip for difference frames [default: 8]
    #[arg(long, value_name = "C")]
    pub event_clip: Option<i32>,
    /// Training seed [default: 0]
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
    /// Run directory [default: runs/train-<unix-seconds>]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained checkpoint (.evfc) or quantized export (.evfq) [required]
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest [required]
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Recordings to score: test1 | test2 | val | train [default: test1]
    #[arg(long, value_name = "NAME")]
    pub split: Option<String>,
    /// Dispersion statistic: max (largest deviation from the median) |
    /// median (median absolute deviation) [default: max]
    #[arg(long, value_name = "KIND")]
    pub mad: Option<String>,
    /// Run directory [default: runs/eval-<unix-seconds>]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    /// Trained checkpoint (.evfc) of a quantized scheme [required]
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Output path for the export [default: <run dir>/model.evfq]
    #[arg(long, value_name = "FILE")]
    pub export: Option<PathBuf>,
    /// Run directory [default: runs/quantize-<unix-seconds>]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Trained checkpoint (.evfc) or quantized export (.evfq) [required]
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Timed iterations [default: 200]
    #[arg(long, value_name = "N")]
    pub iters: Option<usize>,
    /// Untimed warmup iterations [default: 20]
    #[arg(long, value_name = "N")]
    pub warmup: Option<usize>,
    /// Seed for the synthetic input window [default: 0]
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
    /// Run directory [default: runs/bench-<unix-seconds>]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

/// Parses `args` and runs the selected subcommand, returning the process
/// exit code. Errors print to stderr; help and version print to stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Generate(a) => cmd_generate(config, cli.threads, a),
        Command::Train(a) => cmd_train(config, cli.threads, a),
        Command::Eval(a) => cmd_eval(config, cli.threads, a),
        Command::Quantize(a) => cmd_quantize(config, cli.threads, a),
        Command::Bench(a) => cmd_bench(config, cli.threads, a),
    }
}

/// Resolves flags against the config file, recording every final value for
/// the run's `config.resolved`.
struct Ctx {
    kv: KeyValues,
    entries: Vec<(&'static str, String)>,
}

impl Ctx {
    fn new(config: Option<&Path>, threads: Option<usize>) -> CliResult<Ctx> {
        let kv = match config {
            Some(path) => KeyValues::load(path).map_err(|e| match e {
                Error::Io { .. } => CliError::Runtime(e),
                other => usage(other.to_string()),
            })?,
            None => KeyValues::default(),
        };
        let mut ctx = Ctx { kv, entries: Vec::new() };
        if let Some(n) = ctx.optional("threads", threads)? {
            if n == 0 {
                return Err(usage("threads must be at least 1"));
            }
            // First initialization wins if a pool already exists.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(ctx)
    }

    fn raw(&mut self, key: &'static str, cli: Option<String>) -> CliResult<Option<String>> {
        Ok(match cli {
            Some(v) => Some(v),
            None => self.kv.take(key),
        })
    }

    /// Required value with no default.
    fn required<T>(&mut self, key: &'static str, cli: Option<T>) -> CliResult<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.optional(key, cli)? {
            Some(v) => Ok(v),
            None => Err(usage(format!("missing required value: pass --{key} or set {key} in the config file"))),
        }
    }

    /// Optional value; records it only when present.
    fn optional<T>(&mut self, key: &'static str, cli: Option<T>) -> CliResult<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = match cli {
            Some(v) => Some(v),
            None => self.kv.take_parsed::<T>(key).map_err(|e| usage(e.to_string()))?,
        };
        if let Some(v) = &v {
            self.entries.push((key, v.to_string()));
        }
        Ok(v)
    }

    /// Value with a built-in default.
    fn with_default<T>(&mut self, key: &'static str, cli: Option<T>, default: T) -> CliResult<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        match self.optional(key, cli)? {
            Some(v) => Ok(v),
            None => {
                self.entries.push((key, default.to_string()));
                Ok(default)
            }
        }
    }

    fn required_path(&mut self, key: &'static str, cli: Option<PathBuf>) -> CliResult<PathBuf> {
        let v = match cli {
            Some(v) => Some(v),
            None => self.raw(key, None)?.map(PathBuf::from),
        };
        match v {
            Some(p) => {
                self.entries.push((key, p.display().to_string()));
                Ok(p)
            }
            None => Err(usage(format!("missing required value: pass --{key} or set {key} in the config file"))),
        }
    }

    fn optional_path(&mut self, key: &'static str, cli: Option<PathBuf>) -> CliResult<Option<PathBuf>> {
        let v = match cli {
            Some(v) => Some(v),
            None => self.raw(key, None)?.map(PathBuf::from),
        };
        if let Some(p) = &v {
            self.entries.push((key, p.display().to_string()));
        }
        Ok(v)
    }

    /// Rejects leftover config keys and renders the resolved record.
    fn finish(mut self, run_dir: &Path) -> CliResult<()> {
        self.kv.reject_unknown().map_err(|e| usage(e.to_string()))?;
        self.entries.sort_by_key(|(k, _)| *k);
        let text = render(&self.entries);
        let path = run_dir.join("config.resolved");
        std::fs::write(&path, text).map_err(|e| CliError::Runtime(Error::io(&path, e)))?;
        Ok(())
    }
}

/// The run's artifact directory: `--out` verbatim, or a fresh timestamped
/// directory under `runs/`.
fn run_dir(out: Option<PathBuf>, sub: &str) -> CliResult<PathBuf> {
    let dir = match out {
        Some(d) => d,
        None => {
            let secs = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let mut n = 0u32;
            loop {
                let name = if n == 0 {
                    format!("runs/{sub}-{secs}")
                } else {
                    format!("runs/{sub}-{secs}-{n}")
                };
                if !Path::new(&name).exists() {
                    break PathBuf::from(name);
                }
                n += 1;
            }
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(Error::io(&dir, e)))?;
    Ok(dir)
}

fn parse_keyed<T>(key: &str, raw: &str) -> CliResult<T>
where
    T: FromStr,
    T::Err: Display,
{
    raw.parse().map_err(|e| usage(format!("{key} {raw:?}: {e}")))
}

fn cmd_generate(config: Option<&Path>, threads: Option<usize>, a: GenerateArgs) -> CliResult<()> {
    let mut ctx = Ctx::new(config, threads)?;
    let count = ctx.required("count", a.count)?;
    let out = ctx.required_path("out", a.out)?;
    let seed = ctx.with_default("seed", a.seed, 0)?;
    if count == 0 {
        return Err(usage("count must be at least 1: an empty dataset has nothing to split"));
    }
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(Error::io(&out, e)))?;
    ctx.finish(&out)?;
    let manifest = generate_dataset(&out, count, seed, &Scene::default())?;
    println!("wrote {count} recordings and {}", manifest.display());
    Ok(())
}

fn cmd_train(config: Option<&Path>, threads: Option<usize>, a: TrainArgs) -> CliResult<()> {
    let mut ctx = Ctx::new(config, threads)?;
    let manifest = ctx.required_path("manifest", a.manifest)?;
    let modality: Modality = {
        let raw = ctx.required("modality", a.modality)?;
        parse_keyed("modality", &raw)?
    };
    let scheme: QuantScheme = {
        let raw = ctx.with_default("scheme", a.scheme, "fp32".to_string())?;
        parse_keyed("scheme", &raw)?
    };
    let t_ms = ctx.with_default("T", a.t, 20)?;
    let stack = ctx.with_default("stack", a.stack, 1)?;
    let teacher_path = ctx.optional_path("teacher", a.teacher)?;
    let mut cfg = TrainConfig {
        window: WindowConfig { t_ms, stack_k: stack },
        ..TrainConfig::default()
    };
    cfg.max_epochs = ctx.with_default("epochs", a.epochs, cfg.max_epochs)?;
    cfg.batch_size = ctx.with_default("batch-size", a.batch_size, cfg.batch_size)?;
    cfg.lr = ctx.with_default("lr", a.lr, cfg.lr)?;
    cfg.weight_decay = ctx.with_default("weight-decay", a.weight_decay, cfg.weight_decay)?;
    cfg.windows_per_recording =
        ctx.with_default("windows-per-recording", a.windows_per_recording, cfg.windows_per_recording)?;
    cfg.event_clip = ctx.with_default("event-clip", a.event_clip, cfg.event_clip)?;
    cfg.seed = ctx.with_default("seed", a.seed, 0)?;
    let dir = run_dir(ctx.optional_path("out", a.out)?, "train")?;
    ctx.finish(&dir)?;

    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if scheme.kind == QuantKind::Reactnet && teacher_path.is_none() {
        return Err(usage("scheme reactnet distills from a frozen model: pass --teacher <checkpoint>"));
    }

    let mut teacher = match &teacher_path {
        None => None,
        Some(path) => {
            let (qat, stats) = Checkpoint::load(path)?.into_qat()?;
            if qat.model.cfg.modality != modality {
                return Err(usage(format!(
                    "teacher modality {} does not match --modality {}",
                    qat.model.cfg.modality, modality
                )));
            }
            if qat.model.cfg.in_channels_evs != stack as usize {
                return Err(usage(format!(
                    "teacher expects {} stacked windows, run uses {stack}",
                    qat.model.cfg.in_channels_evs
                )));
            }
            Some(Teacher { qat, stats })
        }
    };

    let data = TrainData::from_manifest(&manifest)?;
    let model_cfg = ModelConfig::new(modality, stack, cfg.seed);
    let outcome: TrainOutcome = train(&cfg, model_cfg, scheme, &data, teacher.as_mut())?;

    let ckpt_path = dir.join("model.evfc");
    Checkpoint::from_qat(&outcome.qat, &outcome.stats, cfg.window, cfg.event_clip).save(&ckpt_path)?;
    let log_path = dir.join("train_log.csv");
    std::fs::write(&log_path, outcome.log.to_csv()).map_err(|e| CliError::Runtime(Error::io(&log_path, e)))?;

    let log = &outcome.log;
    println!(
        "trained {modality} {scheme}: {} epochs, best epoch {}, selected {} weights",
        log.epochs.len(),
        log.best_epoch,
        log.selected.as_str(),
    );
    let fin = match (log.selected, &log.swa) {
        (crate::train::SelectedWeights::Swa, Some(swa)) => swa,
        _ => &log.best_val,
    };
    println!(
        "val mse {:.4}, position error {:.1} mm, time error {:.1} ms",
        fin.val_mse, fin.val_pos_err_mm, fin.val_time_err_ms
    );
    println!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(())
}

/// Loads every recording of one split.
fn load_split(manifest: &Path, split: Split) -> CliResult<Vec<PreparedRecording>> {
    let mut recordings = Vec::new();
    for (path, s) in read_manifest(manifest)? {
        if s == split {
            recordings.push(PreparedRecording::load(&path)?);
        }
    }
    Ok(recordings)
}

/// Raw-unit prediction through the float path of a wrapped model.
fn predict_raw(
    qat: &mut QatModel,
    stats: &LabelStats,
    rec: &PreparedRecording,
    t_end: u64,
    window: &WindowConfig,
    clip: i32,
) -> crate::Result<[f32; 3]> {
    let (evs, rgb) = rec.model_inputs(t_end, window, clip, qat.model.cfg.modality)?;
    let p = qat.predict(evs.as_ref(), rgb.as_ref(), Mode::Eval)?;
    Ok(stats.invert(&[p.x_mm, p.y_mm, p.t_ms]))
}

fn cmd_eval(config: Option<&Path>, threads: Option<usize>, a: EvalArgs) -> CliResult<()> {
    let mut ctx = Ctx::new(config, threads)?;
    let ckpt_path = ctx.required_path("checkpoint", a.checkpoint)?;
    let manifest = ctx.required_path("manifest", a.manifest)?;
    let split: Split = {
        let raw = ctx.with_default("split", a.split, "test1".to_string())?;
        parse_keyed("split", &raw)?
    };
    let dev = match ctx.with_default("mad", a.mad, "max".to_string())?.as_str() {
        "max" => Deviation::MaxFromMedian,
        "median" => Deviation::MedianAbs,
        other => return Err(usage(format!("mad must be max or median, got {other:?}"))),
    };
    let dir = run_dir(ctx.optional_path("out", a.out)?, "eval")?;
    ctx.finish(&dir)?;

    let recordings = load_split(&manifest, split)?;
    let loaded = load_any(&ckpt_path)?;
    let (records, label, total_ops): (Vec<EvalRecord>, String, f64) = match loaded {
        AnyCheckpoint::Train(ckpt) => {
            let window = ckpt.window;
            let clip = ckpt.event_clip;
            let scheme = ckpt.scheme;
            let (mut qat, stats) = ckpt.into_qat()?;
            let (ops, _) = model_report(&qat.model, scheme)?;
            let recs = evaluate(&mut qat, &stats, &recordings, &window, clip)?;
            (recs, format!("{} {}", qat.model.cfg.modality, scheme), ops.total())
        }
        AnyCheckpoint::Quantized(q) => {
            let (window, clip, stats) = (q.window, q.event_clip, q.stats);
            match q.model {
                QuantizedModel::Packed(pm) => {
                    let (ops, _) = model_report(&Model::new(pm.cfg)?, pm.scheme)?;
                    let modality = pm.cfg.modality;
                    let label = format!("{} {} packed", modality, pm.scheme);
                    let recs = evaluate_with(
                        |rec, t_end| {
                            let (evs, rgb) = rec.model_inputs(t_end, &window, clip, modality)?;
                            let p = match modality {
                                Modality::Fusion => pm.forward_fusion(
                                    evs.as_ref().expect("fusion inputs"),
                                    rgb.as_ref().expect("fusion inputs"),
                                )?,
                                _ => pm.forward_single(evs.as_ref().or(rgb.as_ref()).expect("single input"))?,
                            };
                            Ok(stats.invert(&[p.x_mm, p.y_mm, p.t_ms]))
                        },
                        &recordings,
                        &window,
                    )?;
                    (recs, label, ops.total())
                }
                QuantizedModel::Coded(qat) => {
                    let (ops, _) = model_report(&qat.model, qat.scheme)?;
                    let label = format!("{} {}", qat.model.cfg.modality, qat.scheme);
                    // Clone per worker; decoded weights are already on the
                    // quantizer grid, so no calibration pass is pending.
                    let recs = evaluate_with(
                        {
                            let qat = qat.clone();
                            move |rec, t_end| {
                                let mut local = qat.clone();
                                predict_raw(&mut local, &stats, rec, t_end, &window, clip)
                            }
                        },
                        &recordings,
                        &window,
                    )?;
                    (recs, label, ops.total())
                }
            }
        }
    };

    let (pos_bins, time_bins) = bin_tables(&records, dev);
    let (mut pos_sum, mut time_sum) = (0f64, 0f64);
    for r in &records {
        pos_sum += r.pos_err_mm as f64;
        time_sum += r.time_err_ms as f64;
    }
    let n = records.len().max(1) as f64;
    let ops_points = vec![OpsPoint {
        label: label.clone(),
        total_ops,
        pos_err_mm: pos_sum / n,
        time_err_ms: time_sum / n,
    }];
    let report = Report { records: &records, pos_bins: &pos_bins, time_bins: &time_bins, ops_points: &ops_points };
    let written = emit_report(&report, &dir)?;

    println!(
        "{label} on {split}: {} windows, mean position error {:.1} mm, mean time error {:.1} ms",
        records.len(),
        pos_sum / n,
        time_sum / n
    );
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_quantize(config: Option<&Path>, threads: Option<usize>, a: QuantizeArgs) -> CliResult<()> {
    let mut ctx = Ctx::new(config, threads)?;
    let ckpt_path = ctx.required_path("checkpoint", a.checkpoint)?;
    let export = ctx.optional_path("export", a.export)?;
    let dir = run_dir(ctx.optional_path("out", a.out)?, "quantize")?;
    ctx.finish(&dir)?;

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let (window, clip) = (ckpt.window, ckpt.event_clip);
    let (qat, stats) = ckpt.into_qat()?;
    let out_path = export.unwrap_or_else(|| dir.join("model.evfq"));
    let sum = save_quantized(&qat, &stats, window, clip, &out_path)?;
    println!(
        "packed {} tensors: {} weight bytes ({} as fp32), file {} bytes",
        sum.quantized_tensors, sum.weight_payload_bytes, sum.fp32_weight_bytes, sum.file_bytes
    );
    println!("wrote {}", out_path.display());
    Ok(())
}

/// Deterministic synthetic input windows for benchmarking.
fn bench_inputs(cfg: &ModelConfig, seed: u64) -> crate::Result<(Option<Tensor>, Option<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mk = |c: usize| -> crate::Result<Tensor> {
        let data: Vec<f32> = (0..c * INPUT_HW * INPUT_HW).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[c, INPUT_HW, INPUT_HW], data)
    };
    Ok(match cfg.modality {
        Modality::Evs => (Some(mk(cfg.in_channels_evs)?), None),
        Modality::Rgb => (None, Some(mk(cfg.in_channels_rgb)?)),
        Modality::Fusion => {
            let evs = mk(cfg.in_channels_evs)?;
            let rgb = mk(cfg.in_channels_rgb)?;
            (Some(evs), Some(rgb))
        }
    })
}

fn cmd_bench(config: Option<&Path>, threads: Option<usize>, a: BenchArgs) -> CliResult<()> {
    let mut ctx = Ctx::new(config, threads)?;
    let ckpt_path = ctx.required_path("checkpoint", a.checkpoint)?;
    let iters = ctx.with_default("iters", a.iters, 200)?;
    let warmup = ctx.with_default("warmup", a.warmup, 20)?;
    let seed = ctx.with_default("seed", a.seed, 0)?;
    let dir = run_dir(ctx.optional_path("out", a.out)?, "bench")?;
    ctx.finish(&dir)?;

    let (result, label, modality, scheme_str, total_ops) = match load_any(&ckpt_path)? {
        AnyCheckpoint::Train(ckpt) => {
            let scheme = ckpt.scheme;
            let (mut qat, _) = ckpt.into_qat()?;
            let (ops, _) = model_report(&qat.model, scheme)?;
            let (evs, rgb) = bench_inputs(&qat.model.cfg, seed)?;
            let modality = qat.model.cfg.modality;
            let result = benchmark_throughput(
                || qat.predict(evs.as_ref(), rgb.as_ref(), Mode::Eval).map(|_| ()),
                iters,
                warmup,
            )?;
            (result, "float", modality, scheme.to_string(), ops.total())
        }
        AnyCheckpoint::Quantized(q) => match q.model {
            QuantizedModel::Packed(pm) => {
                let (ops, _) = model_report(&Model::new(pm.cfg)?, pm.scheme)?;
                let (evs, rgb) = bench_inputs(&pm.cfg, seed)?;
                let modality = pm.cfg.modality;
                let result = benchmark_throughput(
                    || {
                        match modality {
                            Modality::Fusion => pm.forward_fusion(
                                evs.as_ref().expect("fusion inputs"),
                                rgb.as_ref().expect("fusion inputs"),
                            )?,
                            _ => pm.forward_single(evs.as_ref().or(rgb.as_ref()).expect("single input"))?,
                        };
                        Ok(())
                    },
                    iters,
                    warmup,
                )?;
                (result, "packed", modality, pm.scheme.to_string(), ops.total())
            }
            QuantizedModel::Coded(mut qat) => {
                let scheme = qat.scheme;
                let (ops, _) = model_report(&qat.model, scheme)?;
                let (evs, rgb) = bench_inputs(&qat.model.cfg, seed)?;
                let modality = qat.model.cfg.modality;
                let result = benchmark_throughput(
                    || qat.predict(evs.as_ref(), rgb.as_ref(), Mode::Eval).map(|_| ()),
                    iters,
                    warmup,
                )?;
                (result, "float", modality, scheme.to_string(), ops.total())
            }
        },
    };

    let line = format!(
        "{{\"modality\":\"{modality}\",\"scheme\":\"{scheme_str}\",\"path\":\"{label}\",\"iters\":{},\"hz\":{:.2},\"median_ms\":{:.4},\"p95_ms\":{:.4},\"total_ops\":{}}}",
        result.iters, result.hz, result.median_ms, result.p95_ms, total_ops
    );
    println!("{line}");
    let out_path = dir.join("bench.jsonl");
    std::fs::write(&out_path, format!("{line}\n")).map_err(|e| CliError::Runtime(Error::io(&out_path, e)))?;
    Ok(())
}
