//! Command-line front end: `synth`, `train`, `eval`, `infer`, `gradcheck`
//! and `bench-attention`.
//!
//! Exit codes: 0 on success, 1 on a domain error, 2 on a usage error. Flags
//! are fully validated before any file is written.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_map_elements, csa_block_forward, AttentionConfig, Correlation, Neighborhood,
    ProjectionWeights,
};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::gradcheck::run_suite;
use crate::metrics::{binarize, evaluate_dataset, MetricsReport, DEFAULT_THRESHOLD};
use crate::network::{Network, NetworkConfig};
use crate::ops::sigmoid_scalar;
use crate::pgm::PgmImage;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::data::{write_dir, Dataset};
use crate::training::synth::{synth_generate, SyntheticSpec};
use crate::training::train::{history_csv, train_loop, LossKind, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "csa-dpunet",
    version,
    about = "Dual-path UNet with criss-cross attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a network and write a checkpoint plus a loss history.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset directory and write a JSON report.
    Eval(EvalArgs),
    /// Predict a binary mask for one PGM image.
    Infer(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Compare attention map storage and timing of criss-cross and full attention.
    BenchAttention(BenchArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Blob count range, e.g. `1..3` (inclusive).
    #[arg(long, default_value = "1..3", value_parser = parse_range)]
    blobs: (usize, usize),
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Index of the first sample, for disjoint splits from one seed.
    #[arg(long, default_value_t = 0)]
    offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Covariance,
    Dot,
}

impl From<ModeArg> for Correlation {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Covariance => Correlation::Covariance,
            ModeArg::Dot => Correlation::Dot,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum NeighborhoodArg {
    Crisscross,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Bce,
    BcePlusDice,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON file with optional `network` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Seeds both weight initialization and batch sampling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    attention: Option<Switch>,
    #[arg(long)]
    mode: Option<ModeArg>,
    #[arg(long)]
    neighborhood: Option<NeighborhoodArg>,
    #[arg(long)]
    loss: Option<LossArg>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Loss history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Check a single operator or block.
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    h: usize,
    #[arg(long)]
    w: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Covariance)]
    mode: ModeArg,
    /// Also time full attention (quadratic memory).
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| format!("expected MIN..MAX, got {s:?}"))?;
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let (lo, hi) = (num(lo)?, num(hi)?);
    if lo > hi {
        return Err(format!("empty range {lo}..{hi}"));
    }
    Ok((lo, hi))
}

/// Contents of a `train --config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

/// JSON written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub network: NetworkConfig,
    pub images: usize,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

/// Default history location for a checkpoint path.
pub fn default_history_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".history.csv");
    PathBuf::from(s)
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SyntheticSpec {
        count: a.count,
        size: a.size,
        blobs_min: a.blobs.0,
        blobs_max: a.blobs.1,
        noise_std: a.noise,
        seed: a.seed,
        first: a.offset,
    };
    let samples = synth_generate(&spec)?;
    write_dir(&a.out, &spec, &samples)?;
    writeln!(
        out,
        "wrote {} samples to {}",
        samples.len(),
        a.out.display()
    )?;
    Ok(())
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut rc = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let (net, tr) = (&mut rc.network, &mut rc.train);
    if let Some(v) = a.steps {
        tr.steps = v;
    }
    if let Some(v) = a.lr {
        tr.learning_rate = v;
    }
    if let Some(v) = a.batch {
        tr.batch_size = v;
    }
    if let Some(v) = a.seed {
        tr.seed = v;
        net.seed = v;
    }
    if let Some(v) = a.attention {
        net.attention_enabled = v == Switch::On;
    }
    if let Some(v) = a.mode {
        net.attention.mode = v.into();
    }
    if let Some(v) = a.neighborhood {
        net.attention.neighborhood = match v {
            NeighborhoodArg::Crisscross => Neighborhood::CrissCross,
            NeighborhoodArg::Full => Neighborhood::Full,
        };
    }
    if let Some(v) = a.loss {
        tr.loss = match v {
            LossArg::Bce => LossKind::Bce,
            LossArg::BcePlusDice => LossKind::BcePlusDice,
        };
    }
    if let Some(v) = a.levels {
        net.levels = v;
    }
    if let Some(v) = a.base_channels {
        net.base_channels = v;
    }
    rc.network.validate()?;
    rc.train.validate()?;
    Ok(rc)
}

fn train(a: &TrainArgs, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let rc = run_config(a)?;
    let (data, _) = Dataset::read_dir(&a.data)?;
    let mut net = Network::build(&rc.network)?;
    writeln!(
        log,
        "training {} parameters on {} images for {} steps",
        net.count_parameters(),
        data.len(),
        rc.train.steps
    )?;
    let history = train_loop(&mut net, &data, &rc.train)?;
    let history_path = a
        .history
        .clone()
        .unwrap_or_else(|| default_history_path(&a.out));
    checkpoint::save(&net, &a.out)?;
    std::fs::write(&history_path, history_csv(&history))?;
    let last = history.last().expect("steps >= 1");
    writeln!(
        out,
        "step {} loss {:.6} train_dice {:.4}; wrote {} and {}",
        last.step,
        last.loss,
        last.train_dice,
        a.out.display(),
        history_path.display()
    )?;
    Ok(())
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    binarize(&Tensor::zeros(&[0]), a.threshold)?;
    let net = checkpoint::load(&a.ckpt)?;
    let (data, _) = Dataset::read_dir(&a.data)?;
    let metrics = evaluate_dataset(&net, &data, a.threshold)?;
    let report = EvalReport {
        network: *net.config(),
        images: data.len(),
        metrics,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&a.report, json + "\n")?;
    let g = &report.metrics.aggregate;
    writeln!(
        out,
        "dice {:.4} precision {:.4} recall {:.4} f1 {:.4} over {} images",
        g.mean_dice, g.precision, g.recall, g.f1, report.images
    )?;
    Ok(())
}

fn infer(a: &InferArgs, out: &mut dyn Write) -> Result<()> {
    binarize(&Tensor::zeros(&[0]), a.threshold)?;
    let net = checkpoint::load(&a.ckpt)?;
    let img = PgmImage::read(&a.image)?;
    let x = img.to_tensor().reshape(&[1, 1, img.height, img.width])?;
    let probs = net.predict(&x)?.map(sigmoid_scalar);
    let mask = binarize(&probs, a.threshold)?.reshape(&[img.height, img.width])?;
    let fg = mask.sum() as usize;
    PgmImage::from_tensor(&mask)?.write(&a.mask)?;
    writeln!(out, "{fg} foreground pixels; wrote {}", a.mask.display())?;
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let cases = run_suite(a.seed, a.op.as_deref())?;
    writeln!(
        out,
        "{:<18} {:<22} {:>12} {:>12} {:>8}  status",
        "op", "case", "max_rel", "max_abs", "refined"
    )?;
    let mut ok = true;
    for c in &cases {
        let passed = c.report.passed();
        ok &= passed;
        let refined: usize = c.report.inputs.iter().map(|i| i.refined).sum();
        writeln!(
            out,
            "{:<18} {:<22} {:>12.3e} {:>12.3e} {:>8}  {}",
            c.op,
            c.label,
            c.report.max_rel_err(),
            c.report.max_abs_err(),
            refined,
            if passed { "ok" } else { "FAIL" }
        )?;
    }
    writeln!(
        out,
        "{} cases, seed {}: {}",
        cases.len(),
        a.seed,
        if ok { "all passed" } else { "FAILED" }
    )?;
    Ok(ok)
}

fn time_attention(x: &Tensor, w: &ProjectionWeights, cfg: &AttentionConfig) -> Result<f64> {
    let start = Instant::now();
    csa_block_forward(x, w, cfg)?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

fn bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    if a.h == 0 || a.w == 0 || a.d == 0 {
        return Err(Error::Usage("--h, --w and --d must be >= 1".into()));
    }
    let cc = attention_map_elements(a.h, a.w, Neighborhood::CrissCross);
    let full = attention_map_elements(a.h, a.w, Neighborhood::Full);
    let mut rng = Rng::new(a.seed);
    let cfg = AttentionConfig {
        mode: a.mode.into(),
        ..AttentionConfig::default()
    };
    let x = Tensor::randn(&[a.h, a.w, a.d], 1.0, &mut rng);
    let w = ProjectionWeights::init(a.d, &cfg, &mut rng);
    let cc_ms = time_attention(&x, &w, &cfg)?;
    let full_ms = if a.full {
        let cfg = AttentionConfig {
            neighborhood: Neighborhood::Full,
            ..cfg
        };
        format!("{:.3}", time_attention(&x, &w, &cfg)?)
    } else {
        String::new()
    };
    let mode = match a.mode {
        ModeArg::Covariance => "covariance",
        ModeArg::Dot => "dot",
    };
    writeln!(out, "h,w,d,mode,cc_elems,full_elems,ratio,cc_ms,full_ms")?;
    writeln!(
        out,
        "{},{},{},{},{},{},{},{:.3},{}",
        a.h,
        a.w,
        a.d,
        mode,
        cc,
        full,
        cc as f64 / full as f64,
        cc_ms,
        full_ms
    )?;
    Ok(())
}

/// Exit code for a failed command.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 2,
        _ => 1,
    }
}

/// Parses `argv` (including the program name) and runs the command, writing
/// results to `out` and progress or diagnostics to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out, err),
        Command::Eval(a) => eval(a, out),
        Command::Infer(a) => infer(a, out),
        Command::Gradcheck(a) => match gradcheck(a, out) {
            Ok(true) => Ok(()),
            Ok(false) => return 1,
            Err(e) => Err(e),
        },
        Command::BenchAttention(a) => bench(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// [`run`] on the process's stdout and stderr.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run(
        argv,
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let argv = std::iter::once("csa-dpunet").chain(args.iter().copied());
        let code = run(argv, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range("1..3"), Ok((1, 3)));
        assert_eq!(parse_range("2..2"), Ok((2, 2)));
        assert!(parse_range("3..1").is_err());
        assert!(parse_range("3").is_err());
        assert!(parse_range("a..2").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(call(&["frobnicate"]).0, 2);
        assert_eq!(call(&["synth"]).0, 2);
        assert_eq!(call(&["synth", "--out", "x", "--bogus"]).0, 2);
        assert_eq!(
            call(&["train", "--data", "d", "--out", "o", "--attention", "maybe"]).0,
            2
        );
        assert_eq!(call(&["gradcheck", "--op", "nope"]).0, 2);
        assert_eq!(
            call(&["bench-attention", "--h", "0", "--w", "4", "--d", "2"]).0,
            2
        );
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = call(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("bench-attention"));
    }

    #[test]
    fn bench_counts() {
        let (code, out, _) = call(&[
            "bench-attention",
            "--h",
            "8",
            "--w",
            "4",
            "--d",
            "4",
            "--full",
        ]);
        assert_eq!(code, 0);
        let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(
            &row[..7],
            &["8", "4", "4", "covariance", "352", "1024", "0.34375"]
        );
        assert!(row[8].parse::<f64>().is_ok());
    }

    #[test]
    fn config_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(
            &cfg,
            r#"{"network":{"levels":3},"train":{"steps":7,"loss":"bce_plus_dice"}}"#,
        )
        .unwrap();
        let args = TrainArgs::try_parse_from_for_test(&[
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            "d",
            "--out",
            "o",
            "--seed",
            "9",
            "--mode",
            "dot",
        ]);
        let rc = run_config(&args).unwrap();
        assert_eq!(rc.network.levels, 3);
        assert_eq!(rc.network.seed, 9);
        assert_eq!(rc.network.attention.mode, Correlation::Dot);
        assert_eq!(rc.train.steps, 7);
        assert_eq!(rc.train.seed, 9);
        assert_eq!(rc.train.loss, LossKind::BcePlusDice);

        std::fs::write(&cfg, r#"{"netwrok":{}}"#).unwrap();
        assert!(matches!(run_config(&args), Err(Error::InvalidConfig(_))));
    }

    impl TrainArgs {
        fn try_parse_from_for_test(args: &[&str]) -> Self {
            #[derive(Parser)]
            struct Wrap {
                #[command(flatten)]
                a: TrainArgs,
            }
            Wrap::try_parse_from(std::iter::once("t").chain(args.iter().copied()))
                .unwrap()
                .a
        }
    }

    #[test]
    fn history_path_appends_suffix() {
        assert_eq!(
            default_history_path(Path::new("runs/m.ckpt")),
            PathBuf::from("runs/m.ckpt.history.csv")
        );
    }
}
