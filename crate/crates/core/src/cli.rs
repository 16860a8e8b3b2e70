//! The `finegrain` command line: argument parsing, configuration layering and
//! the six subcommands. `main.rs` only forwards to [`run`].
//!
//! Configuration precedence is flags > `--config` file > checkpoint snapshot
//! (for commands that read a checkpoint) > built-in defaults.
//!
//! Failures print one line, `error: kind=<kind> msg=<message>`, and exit with
//! the code from [`exit_code`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, RunConfig};
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::finet::{build_finet, count_flops, count_params, layer_shapes};
use crate::fusion::{fuse_model, probe_inputs, verify_fusion};
use crate::graph::Network;
use crate::norm::Mode;
use crate::train::{evaluate, train_epochs, METRICS_HEADER};

/// Exit status for command-line usage errors.
pub const EXIT_USAGE: i32 = 2;

/// Exit status for each error kind. Every kind has its own code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 3,
        Error::Shape(_) => 4,
        Error::Numeric(_) => 5,
        Error::State(_) => 6,
        Error::DegenerateStats(_) => 7,
        Error::Unfusable(_) => 8,
        Error::Format { .. } => 9,
        Error::Version { .. } => 10,
        Error::Missing(_) => 11,
        Error::Io { .. } => 12,
    }
}

/// The single-line error report.
pub fn error_line(kind: &str, msg: &str) -> String {
    let msg = msg.replace(['\n', '\r'], " ");
    format!("error: kind={kind} msg={msg}")
}

#[derive(Debug, Parser)]
#[command(name = "finegrain", version, about = "Fine-grained batch normalization, fusion and the Finet models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the architecture, per-stage output shapes, FLOPs and parameters.
    Describe(ConfigArgs),
    /// Train a model and write a checkpoint and a metrics CSV.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fold every normalization into its convolution.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Compare a checkpoint with its fused form on seeded probe inputs.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fused: PathBuf,
        #[arg(long, default_value_t = 16)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Inference throughput of the unfused and fused forms of one model.
    Bench {
        /// Unfused checkpoint; without it a model is built from the configuration.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Shortcut flags map onto configuration keys; `--set key=value` reaches any key.
#[derive(Debug, Args, Default)]
struct ConfigArgs {
    /// Configuration file of `key=value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named settings bundle applied before everything else (imagenet, cifar, desk).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    /// Groups as `G=4` (or `4`), or channels per group as `C/G=50`.
    #[arg(long)]
    groups: Option<String>,
    #[arg(long)]
    se: bool,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    metrics_csv: Option<PathBuf>,
    /// Any configuration key, as `key=value`. Repeatable; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        push("variant", self.variant.clone());
        push("group_spec", self.groups.clone());
        push("use_se", self.se.then(|| "true".into()));
        push("dataset", self.dataset.clone());
        push("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("checkpoint", self.out.as_ref().map(|p| p.display().to_string()));
        push("metrics_csv", self.metrics_csv.as_ref().map(|p| p.display().to_string()));
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::config(format!("--set expects key=value, got {s:?}")))?;
            kv.push((k.to_string(), v.to_string()));
        }
        Ok(kv)
    }

    /// Layers this invocation's settings over `base`.
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(p) = &self.preset {
            cfg.apply_preset(p)?;
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text).map_err(|e| match e {
                Error::Config(m) => Error::Format { path: path.clone(), msg: m },
                other => other,
            })?;
        }
        for (k, v) in self.overrides()? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (including the program name) and runs the command, writing
/// normal output to `out` and the error line to `err`. Returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let msg: Vec<&str> =
                text.lines().take_while(|l| !l.starts_with("Usage:")).map(str::trim).filter(|l| !l.is_empty()).collect();
            let _ = writeln!(err, "{}", error_line("usage", msg.join(" ").trim_start_matches("error: ")));
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(e.kind(), &e.to_string()));
            exit_code(&e)
        }
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(stdout_err)
    };
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Describe(args) => cmd_describe(&args.resolve(RunConfig::default())?, out),
        Command::Train(args) => cmd_train(&args.resolve(RunConfig::default())?, out).map(|_| ()),
        Command::Eval { checkpoint, config } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = config.resolve(RunConfig::parse_text(&ck.config)?)?;
            cmd_eval(&cfg, &ck, out)
        }
        Command::Fuse { checkpoint, output } => cmd_fuse(&checkpoint, &output, out),
        Command::Verify { checkpoint, fused, probes, seed } => cmd_verify(&checkpoint, &fused, probes, seed, out),
        Command::Bench { checkpoint, batch, iters, warmup, config } => {
            let net = match checkpoint {
                Some(p) => Checkpoint::load(&p)?.net,
                None => build_finet(&config.resolve(RunConfig::default())?.finet())?,
            };
            let report = bench(&net, batch, iters, warmup)?;
            say!(out, "{report}")
        }
    }
}

/// Architecture summary in fixed `key=value` lines.
pub fn cmd_describe(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let net = build_finet::<f32>(&cfg.finet())?;
    let (c, h, w) = net.meta.input;
    say!(out, "variant={}", cfg.variant)?;
    say!(out, "name={}", net.meta.name)?;
    say!(out, "group_spec={}", cfg.group_spec)?;
    say!(out, "se={}", cfg.use_se)?;
    say!(out, "block_style={}", cfg.block_style)?;
    say!(out, "input={c}x{h}x{w}")?;
    for (name, s) in layer_shapes(&net)? {
        say!(out, "layer={name} shape={}x{}x{}", s.c, s.h, s.w)?;
    }
    say!(out, "flops={}", count_flops(&net)?)?;
    say!(out, "params={}", count_params(&net))
}

/// Train and test splits for `cfg`, both normalized with training-split
/// channel statistics.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let dir = data::data_dir(cfg.data_dir.as_deref()).ok_or_else(|| {
                Error::config(format!("no data directory: pass --data-dir or set {}", data::DATA_DIR_ENV))
            })?;
            let load = if cfg.dataset == DatasetKind::Cifar10 { data::load_cifar10 } else { data::load_cifar100 };
            (load(&dir, Split::Train)?, load(&dir, Split::Test)?)
        }
        DatasetKind::Synthetic(kind) => {
            let n_train = if cfg.train_subset == 0 { 5000 } else { cfg.train_subset };
            let n_test = if cfg.test_subset == 0 { 1000 } else { cfg.test_subset };
            let dims = (3, cfg.input_size, cfg.input_size);
            let all = data::synthetic_dataset_with_dims(kind, n_train + n_test, cfg.classes, dims, cfg.seed)?;
            let idx: Vec<usize> = (0..all.len()).collect();
            let part = |range: &[usize], split| -> Result<Dataset> {
                let (images, labels) = all.batch(range);
                Dataset::new(images, labels, all.classes, split)
            };
            (part(&idx[..n_train], Split::Train)?, part(&idx[n_train..], Split::Test)?)
        }
    };
    let train = if cfg.train_subset > 0 { train.take(cfg.train_subset) } else { train };
    let test = if cfg.test_subset > 0 { test.take(cfg.test_subset) } else { test };
    let (train, stats) = data::normalize_channels(&train)?;
    let test = stats.apply(&test)?;
    Ok((train, test))
}

/// Trains per `cfg`, streaming one line per epoch to `out` and the CSV, and
/// saves the trained network (in inference mode) to `cfg.checkpoint`.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<Network<f32>> {
    let (train, test) = load_datasets(cfg)?;
    let mut net = build_finet::<f32>(&cfg.finet())?;
    let steps = train.len().div_ceil(cfg.batch_size);
    let tcfg = cfg.train_with_steps(steps);

    let csv_path = &cfg.metrics_csv;
    let mut csv = BufWriter::new(File::create(csv_path).map_err(|e| Error::io(csv_path, e))?);
    writeln!(csv, "{METRICS_HEADER}").map_err(|e| Error::io(csv_path, e))?;
    train_epochs(&mut net, &train, Some(&test), &tcfg, |m| {
        say!(out, "{m}")?;
        writeln!(csv, "{}", m.csv_row()).and_then(|_| csv.flush()).map_err(|e| Error::io(csv_path, e))
    })?;

    net.set_mode(Mode::Infer);
    Checkpoint::new(net.clone(), cfg.to_string(), false).save(&cfg.checkpoint)?;
    say!(out, "checkpoint={}", cfg.checkpoint.display())?;
    say!(out, "metrics_csv={}", csv_path.display())?;
    Ok(net)
}

pub fn cmd_eval(cfg: &RunConfig, ck: &Checkpoint, out: &mut dyn Write) -> Result<()> {
    let (_, test) = load_datasets(cfg)?;
    let m = evaluate(&ck.net, &test, cfg.batch_size)?;
    say!(out, "samples={}", test.len())?;
    say!(out, "fused={}", ck.fused)?;
    say!(out, "loss={:.6}", m.loss)?;
    say!(out, "top1={:.6}", m.top1)
}

pub fn cmd_fuse(input: &Path, output: &Path, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(input)?;
    let mut net = ck.net;
    net.set_mode(Mode::Infer);
    let fused = fuse_model(&net)?;
    let flops = count_flops(&fused)?;
    let params = fused.num_params();
    Checkpoint::new(fused, ck.config, true).save(output)?;
    say!(out, "fused={}", output.display())?;
    say!(out, "flops={flops}")?;
    say!(out, "params={params}")
}

pub fn cmd_verify(reference: &Path, fused: &Path, probes: usize, seed: u64, out: &mut dyn Write) -> Result<()> {
    let mut a = Checkpoint::load(reference)?.net;
    let mut b = Checkpoint::load(fused)?.net;
    a.set_mode(Mode::Infer);
    b.set_mode(Mode::Infer);
    let report = verify_fusion(&a, &b, probes, seed)?;
    say!(out, "{report}")
}

/// Throughput of the unfused and fused forms of one network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub batch: usize,
    pub iters: usize,
    pub unfused_images_per_s: f64,
    pub fused_images_per_s: f64,
}

impl BenchReport {
    /// Fused throughput over unfused throughput.
    pub fn ratio(&self) -> f64 {
        self.fused_images_per_s / self.unfused_images_per_s
    }
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "batch={} iters={}", self.batch, self.iters)?;
        writeln!(f, "unfused_images_per_s={:.3}", self.unfused_images_per_s)?;
        writeln!(f, "fused_images_per_s={:.3}", self.fused_images_per_s)?;
        write!(f, "ratio={:.4}", self.ratio())
    }
}

/// Times `iters` inference passes of `net` and of its fusion after `warmup`
/// untimed passes each. Both run on the same seeded input on this thread.
pub fn bench(net: &Network<f32>, batch: usize, iters: usize, warmup: usize) -> Result<BenchReport> {
    if batch == 0 || iters == 0 {
        return Err(Error::config("bench needs batch >= 1 and iters >= 1"));
    }
    let mut net = net.clone();
    net.set_mode(Mode::Infer);
    let fused = fuse_model(&net)?;
    if fused == net {
        return Err(Error::State("bench needs an unfused model; this one is already fused".into()));
    }
    let x = probe_inputs(&net, batch, 0xBE7C);
    let time = |n: &Network<f32>| -> Result<f64> {
        for _ in 0..warmup {
            n.infer(&x)?;
        }
        let start = Instant::now();
        for _ in 0..iters {
            std::hint::black_box(n.infer(&x)?);
        }
        Ok((batch * iters) as f64 / start.elapsed().as_secs_f64())
    };
    let unfused_images_per_s = time(&net)?;
    let fused_images_per_s = time(&fused)?;
    Ok(BenchReport { batch, iters, unfused_images_per_s, fused_images_per_s })
}
