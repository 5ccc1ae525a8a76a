//! `vidswin` command-line driver.
//!
//! Exit codes: 0 ok, 1 usage, 2 configuration, 3 I/O or file format,
//! 4 numerical failure (non-finite loss, failed gradient check).

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidswin::data::{generate_synthetic, load_dataset, write_dataset, Split};
use vidswin::model::{
    flops_estimate, grad_check_pipeline, load_checkpoint, save_checkpoint, ModelConfig, Weights,
};
use vidswin::seed::mix;
use vidswin::tensor::GradCheckOptions;
use vidswin::train::{evaluate, overfit_report, train_test_split, train_with, RunMetrics};
use vidswin::{Error, Tensor};

pub use config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.swsh";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    Config(String),
    Io(String),
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Format { .. } => Failure::Io(e.to_string()),
            Error::Numerical(_) | Error::NonFinite { .. } => Failure::Numerical(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "vidswin", version, about = "Shifted-window video transformers on synthetic clips")]
pub struct Cli {
    /// Run configuration (key = value lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (SVC1 clips and manifest.csv).
    Synth,
    /// Train on a dataset; writes checkpoint.swsh and metrics.csv.
    Train {
        /// Dataset directory; overrides `data_dir`.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Accuracy and confusion matrix of a checkpoint on a dataset.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Restrict to one manifest split.
        #[arg(long, value_parser = ["train", "test"])]
        split: Option<String>,
    },
    /// Finite-difference check of the configured pipeline's gradients.
    Gradcheck {
        /// Corrupt the backward pass (negative control; must fail).
        #[arg(long)]
        sabotage: bool,
    },
    /// Per-layer and total forward GFLOPs.
    Flops {
        /// Print both totals and their difference (B − A).
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        compare: Option<Vec<PathBuf>>,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("vidswin: {f}");
            f.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    match cli.threads {
        None => dispatch(cli),
        Some(0) => Err(Failure::Config("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::Config(format!("thread pool: {e}")))?;
            pool.install(|| dispatch(cli))
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    if let Command::Flops { compare: Some(pair) } = &cli.command {
        return cmd_flops_compare(&read_config(Some(&pair[0]))?, &read_config(Some(&pair[1]))?);
    }
    let mut rc = read_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        rc.set_seed(s);
    }
    if let Some(o) = &cli.out {
        rc.out_dir = Some(o.clone());
    }
    match &cli.command {
        Command::Train { data: Some(d) } | Command::Eval { data: Some(d), .. } => rc.data_dir = Some(d.clone()),
        _ => {}
    }
    if let Command::Eval { checkpoint: Some(c), .. } = &cli.command {
        rc.checkpoint = Some(c.clone());
    }
    rc.validate()?;
    for line in &rc.echo {
        eprintln!("config: {line}");
    }
    if let Some(s) = cli.seed {
        eprintln!("override: seed = {s}");
    }
    match &cli.command {
        Command::Synth => cmd_synth(&rc),
        Command::Train { .. } => cmd_train(&rc),
        Command::Eval { split, .. } => {
            let split = split.as_deref().map(|s| s.parse::<Split>()).transpose()?;
            cmd_eval(&rc, split)
        }
        Command::Gradcheck { sabotage } => cmd_gradcheck(&rc, *sabotage),
        Command::Flops { .. } => cmd_flops(&rc),
    }
}

pub fn read_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => RunConfig::parse(""),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
            RunConfig::parse(&text).map_err(|f| match f {
                Failure::Config(m) => Failure::Config(format!("{}: {m}", p.display())),
                other => other,
            })
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, Failure> {
    p.as_deref()
        .ok_or_else(|| Failure::Config(format!("no {what} given")))
}

/// Writes `clips_per_class` clips per class with a seeded train/test split.
pub fn cmd_synth(rc: &RunConfig) -> Result<(), Failure> {
    let out = required(&rc.out_dir, "output directory (--out or out_dir)")?;
    let spec = rc.synth_spec()?;
    let clips = generate_synthetic(&spec, rc.seed)?;
    let idx: Vec<usize> = (0..clips.len()).collect();
    let (train_idx, _) = train_test_split(&idx, rc.train.split_fraction, rc.seed)?;
    let mut splits = vec![Split::Test; clips.len()];
    for i in train_idx {
        splits[i] = Split::Train;
    }
    let m = write_dataset(out, &clips, rc.pixel_format, Some(&splits))?;
    let n_train = splits.iter().filter(|s| **s == Split::Train).count();
    println!(
        "wrote {} clips ({} train, {} test) to {}",
        m.len(),
        n_train,
        m.len() - n_train,
        out.display()
    );
    Ok(())
}

/// Clips partitioned by manifest split hints, or by a seeded split when
/// the manifest has none.
fn partition(rc: &RunConfig, data: &Path) -> Result<(Vec<vidswin::embedding::VideoClip>, Vec<vidswin::embedding::VideoClip>), Failure> {
    let (manifest, clips) = load_dataset(data)?;
    if manifest.is_empty() {
        return Err(Failure::Config(format!("{}: manifest lists no clips", data.display())));
    }
    manifest.validate(Some(rc.model.num_classes))?;
    let hinted = manifest.rows.iter().filter(|r| r.split.is_some()).count();
    if hinted == 0 {
        return Ok(train_test_split(&clips, rc.train.split_fraction, rc.seed)?);
    }
    if hinted != manifest.len() {
        return Err(Failure::Config("manifest gives a split for some rows but not all".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (r, c) in manifest.rows.iter().zip(clips) {
        match r.split {
            Some(Split::Train) => train.push(c),
            _ => test.push(c),
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Failure::Config("manifest splits leave the train or test set empty".into()));
    }
    Ok((train, test))
}

pub fn cmd_train(rc: &RunConfig) -> Result<(), Failure> {
    let data = required(&rc.data_dir, "dataset directory (--data or data_dir)")?;
    let out = required(&rc.out_dir, "output directory (--out or out_dir)")?;
    let (train, test) = partition(rc, data)?;
    eprintln!(
        "training {} pipeline on {} clips, validating on {}",
        rc.model.pipeline,
        train.len(),
        test.len()
    );
    let weights = Weights::init(&rc.model)?;
    let (weights, metrics) = train_with(&rc.model, weights, &train, &test, &rc.train, |e| {
        eprintln!(
            "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  train_acc {:.3}  val_acc {:.3}",
            e.epoch, e.train_loss, e.val_loss, e.train_acc, e.val_acc
        )
    })?;
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &rc.model, &weights)?;
    metrics.save(&out.join(METRICS_FILE))?;
    let last = metrics.last().expect("epochs >= 1");
    println!("final train_acc {} val_acc {}", last.train_acc, last.val_acc);
    println!("{}", overfit_report(&metrics));
    Ok(())
}

/// `counts[label][prediction]`.
pub fn confusion_matrix(num_classes: usize, labels: &[usize], predictions: &[usize]) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&l, &p) in labels.iter().zip(predictions) {
        m[l][p] += 1;
    }
    m
}

/// Header `label,pred_0,..,pred_{k-1}`, one row per true label.
pub fn confusion_csv(m: &[Vec<usize>]) -> String {
    let mut s = String::from("label");
    for j in 0..m.len() {
        s.push_str(&format!(",pred_{j}"));
    }
    s.push('\n');
    for (i, row) in m.iter().enumerate() {
        s.push_str(&i.to_string());
        for c in row {
            s.push_str(&format!(",{c}"));
        }
        s.push('\n');
    }
    s
}

pub fn cmd_eval(rc: &RunConfig, split: Option<Split>) -> Result<(), Failure> {
    let ckpt = required(&rc.checkpoint, "checkpoint (--checkpoint or checkpoint)")?;
    let data = required(&rc.data_dir, "dataset directory (--data or data_dir)")?;
    let (cfg, weights) = load_checkpoint(ckpt)?;
    let (manifest, clips) = load_dataset(data)?;
    manifest.validate(Some(cfg.num_classes))?;
    let clips: Vec<_> = manifest
        .rows
        .iter()
        .zip(clips)
        .filter(|(r, _)| split.is_none() || r.split == split)
        .map(|(_, c)| c)
        .collect();
    if clips.is_empty() {
        return Err(Failure::Config(format!("no clips to evaluate in {}", data.display())));
    }
    let ev = evaluate(&cfg, &weights, &clips)?;
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let csv = confusion_csv(&confusion_matrix(cfg.num_classes, &labels, &ev.predictions));
    println!(
        "accuracy {} ({} of {}), mean cross-entropy {}",
        ev.accuracy,
        (ev.accuracy * clips.len() as f64).round(),
        clips.len(),
        vidswin::train::format_sig9(ev.loss)
    );
    match &rc.out_dir {
        Some(out) => {
            std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
            let p = out.join(CONFUSION_FILE);
            std::fs::write(&p, csv).map_err(|e| io_failure(&p, e))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// A uniform-random clip shaped for `cfg`.
pub fn probe_clip(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[0x6763]));
    Tensor::from_fn(&[cfg.seq_len, cfg.height, cfg.width, 3], |_| rng.random_range(0.0..1.0))
        .expect("positive extents")
}

pub fn cmd_gradcheck(rc: &RunConfig, sabotage: bool) -> Result<(), Failure> {
    let cfg = &rc.model;
    let w = Weights::init(cfg)?;
    let names: Vec<&str> = w.iter().map(|(n, _)| n).collect();
    let label = (rc.seed % cfg.num_classes as u64) as usize;
    let opts = GradCheckOptions {
        eps: rc.gradcheck_eps,
        samples: Some(rc.gradcheck_samples),
        seed: rc.seed,
        sabotage,
    };
    let report = grad_check_pipeline(cfg, &w, &probe_clip(cfg, rc.seed), label, &opts)?;
    let worst = report.worst().expect("at least one probe");
    println!(
        "{} pipeline: max relative error {:.3e} over {} coordinates (worst: {}[{}], analytic {:.6e}, numeric {:.6e})",
        cfg.pipeline,
        report.max_rel_error,
        report.probes.len(),
        names[worst.tensor],
        worst.coord,
        worst.analytic,
        worst.numeric
    );
    if report.max_rel_error.is_nan() || report.max_rel_error > GRADCHECK_TOLERANCE {
        return Err(Failure::Numerical(format!(
            "gradient check failed: {:.3e} > {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        )));
    }
    println!("pass");
    Ok(())
}

pub fn cmd_flops(rc: &RunConfig) -> Result<(), Failure> {
    let r = flops_estimate(&rc.model)?;
    println!("{} pipeline", rc.model.pipeline);
    print!("{r}");
    Ok(())
}

pub fn cmd_flops_compare(a: &RunConfig, b: &RunConfig) -> Result<(), Failure> {
    a.validate()?;
    b.validate()?;
    let ga = flops_estimate(&a.model)?.gflops();
    let gb = flops_estimate(&b.model)?.gflops();
    println!("A ({}): {ga:.6} GFLOPs", a.model.pipeline);
    println!("B ({}): {gb:.6} GFLOPs", b.model.pipeline);
    println!("B - A: {:.6} GFLOPs", gb - ga);
    Ok(())
}

/// Metrics as written by `train`, for callers that post-process runs.
pub fn read_metrics(out_dir: &Path) -> Result<RunMetrics, Failure> {
    Ok(RunMetrics::load(&out_dir.join(METRICS_FILE))?)
}
