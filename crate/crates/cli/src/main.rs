//! `xmalign`: generate synthetic data, train, score, fuse and gradient-check.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
//! 4 numeric failure.

mod error;
mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use xmalign_core::data::{encode_dataset, read_dataset, Language};
use xmalign_core::eval::report_from_scores;
use xmalign_core::gradcheck::{run_gradcheck, GradFault, TOLERANCE};
use xmalign_core::{
    fuse_scores, generate_dataset, make_report, run_training, score_trials, AlignMetric,
    Checkpoint, Condition, Dataset, FlatConfig, HeadMode, ScoreFile, SyntheticConfig,
    TrainingConfig, TrialList,
};

use error::CliError;
use manifest::{manifest_path, with_suffix, write_atomic, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "xmalign", version, about = "Cross-modal face/voice embedding alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset and its trial list.
    GenData(GenDataArgs),
    /// Train a model and write the averaged checkpoint.
    Train(TrainArgs),
    /// Score a trial list with a checkpoint and report EERs.
    Eval(EvalArgs),
    /// Z-normalize and average two or more score files.
    Fuse(FuseArgs),
    /// Compare analytic and finite-difference gradients on random models.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// `key = value` config file; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset file to write.
    #[arg(long)]
    out: PathBuf,
    /// Trial list text file [default: <out>.trials.txt]
    #[arg(long)]
    trials: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV [default: <out>.log.csv]
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// shared | separate
    #[arg(long)]
    head: Option<HeadMode>,
    /// mse | cosine | none
    #[arg(long)]
    align: Option<AlignMetric>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    avg_window: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Trial list text file [default: the dataset's own trials]
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Score file to write.
    #[arg(long)]
    out: PathBuf,
    /// Report file [default: <out>.report.txt]
    #[arg(long)]
    report: Option<PathBuf>,
    /// [default: checkpoint file stem]
    #[arg(long)]
    system_id: Option<String>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Score files to combine.
    #[arg(required = true)]
    scores: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "fusion")]
    system_id: String,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Optional summary file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corrupt the analytic gradient to confirm the check fails.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}

/// Reads an optional config file into `cfg`, recording it in the manifest.
fn load_config<C: FlatConfig>(path: Option<&Path>, manifest: &mut RunManifest) -> Result<C, CliError> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let cfg = C::from_text(&text).map_err(|e| CliError::from(e).context(&path.display().to_string()))?;
    manifest.config_file = Some(path.display().to_string());
    manifest.config_file_text = Some(text);
    manifest.input("config", path)?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    read_dataset(path).map_err(|e| CliError::file(path, e))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("gen-data");
    let mut cfg: SyntheticConfig = load_config(args.config.as_deref(), &mut manifest)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        manifest.overrides.insert("seed".into(), seed.to_string());
    }
    cfg.validate()?;
    manifest.seed = Some(cfg.seed);
    manifest.resolved_config = Some(cfg.to_text());

    let dataset = generate_dataset(&cfg)?;
    let trials_path = args.trials.unwrap_or_else(|| with_suffix(&args.out, ".trials.txt"));
    write_atomic(&args.out, &encode_dataset(&dataset))?;
    write_atomic(&trials_path, dataset.trials.to_text().as_bytes())?;

    let train = dataset.train_samples().count();
    let eval_l1 = dataset
        .eval_samples()
        .filter(|s| s.language == Language::L1)
        .count();
    let eval_l2 = dataset.eval_samples().count() - eval_l1;
    println!(
        "samples: train={train} eval_l1={eval_l1} eval_l2={eval_l2} classes={}",
        dataset.num_classes()
    );
    for c in Condition::ALL {
        let (t, n) = trial_counts(&dataset.trials, c);
        println!("trials {c}: targets={t} nontargets={n}");
    }
    manifest.note("train_samples", train);
    manifest.note("eval_samples", eval_l1 + eval_l2);
    manifest.note("trials", dataset.trials.len());
    manifest.output("dataset", &args.out)?;
    manifest.output("trials", &trials_path)?;
    manifest.finish(&manifest_path(&args.out))
}

fn trial_counts(trials: &TrialList, condition: Condition) -> (usize, usize) {
    let of = trials.trials.iter().filter(|t| t.condition == condition);
    let targets = of.clone().filter(|t| t.is_target).count();
    (targets, of.count() - targets)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("train");
    let mut cfg: TrainingConfig = load_config(args.config.as_deref(), &mut manifest)?;
    let mut overrides = BTreeMap::new();
    if let Some(v) = args.seed {
        cfg.seed = v;
        overrides.insert("seed", v.to_string());
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
        overrides.insert("lambda", v.to_string());
    }
    if let Some(v) = args.head {
        cfg.head_mode = v;
        overrides.insert("head_mode", v.to_string());
    }
    if let Some(v) = args.align {
        cfg.align_metric = v;
        overrides.insert("align_metric", v.as_str().to_string());
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
        overrides.insert("epochs", v.to_string());
    }
    if let Some(v) = args.avg_window {
        cfg.avg_window = v;
        overrides.insert("avg_window", v.to_string());
    }
    cfg.validate()?;
    manifest.overrides = overrides.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    manifest.seed = Some(cfg.seed);
    manifest.resolved_config = Some(cfg.to_text());

    let dataset = load_dataset(&args.dataset)?;
    manifest.input("dataset", &args.dataset)?;

    let log_path = args.log.unwrap_or_else(|| with_suffix(&args.out, ".log.csv"));
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let started = Instant::now();
    let outcome = run_training(&cfg, &dataset, Some(&mut log))?;
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    drop(log);

    let checkpoint = outcome.checkpoint();
    write_atomic(&args.out, &checkpoint.to_bytes())?;
    if let Some(last) = outcome.log.last() {
        println!(
            "epochs={} total={:.6} l_face={:.6} l_voice={:.6} l_align={:.6} ({:.1}s)",
            outcome.log.len(),
            last.loss.total,
            last.loss.l_face,
            last.loss.l_voice,
            last.loss.l_align,
            started.elapsed().as_secs_f64()
        );
        manifest.note("final_total_loss", format!("{:.8e}", last.loss.total));
    }
    manifest.note("config_hash", format!("{:016x}", outcome.config_hash));
    manifest.output("checkpoint", &args.out)?;
    manifest.output("log", &log_path)?;
    manifest.finish(&manifest_path(&args.out))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("eval");
    let checkpoint = Checkpoint::load(&args.checkpoint).map_err(|e| CliError::file(&args.checkpoint, e))?;
    manifest.input("checkpoint", &args.checkpoint)?;
    let dataset = load_dataset(&args.dataset)?;
    manifest.input("dataset", &args.dataset)?;
    let trials = match &args.trials {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            manifest.input("trials", path)?;
            TrialList::from_text(&text).map_err(|e| CliError::from(e).context(&path.display().to_string()))?
        }
        None => dataset.trials.clone(),
    };
    let system_id = args.system_id.unwrap_or_else(|| {
        args.checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "system".into())
    });

    let scores = score_trials(&checkpoint.model, &dataset, &trials, &system_id)?;
    let report = make_report(&scores, &trials)?;
    let report_path = args.report.unwrap_or_else(|| with_suffix(&args.out, ".report.txt"));
    write_atomic(&args.out, scores.to_text().as_bytes())?;
    write_atomic(&report_path, report.to_text().as_bytes())?;
    print!("{}", report.to_text());

    for c in &report.conditions {
        manifest.note(&format!("eer_{}", c.condition), format!("{:.6}", c.eer));
    }
    manifest.note("overall", format!("{:.6}", report.overall));
    manifest.output("scores", &args.out)?;
    manifest.output("report", &report_path)?;
    manifest.finish(&manifest_path(&args.out))
}

fn cmd_fuse(args: FuseArgs) -> Result<(), CliError> {
    if args.scores.len() < 2 {
        return Err(CliError::Usage(format!(
            "fusion needs at least 2 score files, got {}",
            args.scores.len()
        )));
    }
    let mut manifest = RunManifest::start("fuse");
    let mut systems = Vec::with_capacity(args.scores.len());
    for (i, path) in args.scores.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let scores =
            ScoreFile::from_text(&text).map_err(|e| CliError::from(e).context(&path.display().to_string()))?;
        manifest.input(&format!("scores{i}"), path)?;
        systems.push(scores);
    }
    let fused = fuse_scores(&systems, &args.system_id)?;
    let report = report_from_scores(&fused)?;
    let report_path = args.report.unwrap_or_else(|| with_suffix(&args.out, ".report.txt"));
    write_atomic(&args.out, fused.to_text().as_bytes())?;
    write_atomic(&report_path, report.to_text().as_bytes())?;
    print!("{}", report.to_text());

    manifest.note("overall", format!("{:.6}", report.overall));
    manifest.output("scores", &args.out)?;
    manifest.output("report", &report_path)?;
    manifest.finish(&manifest_path(&args.out))
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::start("gradcheck");
    manifest.seed = Some(args.seed);
    let fault = args.inject_fault.then_some(GradFault::HalveHeadGradient);
    if fault.is_some() {
        manifest.note("injected_fault", "halve_head_gradient");
    }
    let started = Instant::now();
    let summary = run_gradcheck(args.seed, args.trials, fault)?;

    let mut text = String::new();
    for c in summary.failures() {
        text += &format!(
            "FAIL case {}: head={} align={} lambda={:.4} batch={} params={} max_rel_error={:.3e} in {}\n",
            c.case,
            c.spec.head_mode,
            c.spec.align_metric.as_str(),
            c.spec.lambda,
            c.spec.batch_size,
            c.params,
            c.max_rel_error,
            c.worst_tensor
        );
    }
    let params: usize = summary.cases.iter().map(|c| c.params).sum();
    text += &format!(
        "checked {} configurations ({params} parameters) in {:.2}s\nmax relative error: {:.3e} (tolerance {TOLERANCE:e})\n",
        summary.cases.len(),
        started.elapsed().as_secs_f64(),
        summary.max_rel_error()
    );
    print!("{text}");

    if let Some(out) = &args.out {
        write_atomic(out, text.as_bytes())?;
        manifest.note("max_rel_error", format!("{:.6e}", summary.max_rel_error()));
        manifest.note("trials", args.trials);
        manifest.output("summary", out)?;
        manifest.finish(&manifest_path(out))?;
    }
    if summary.passed() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "{} of {} gradient checks exceeded tolerance",
            summary.failures().count(),
            summary.cases.len()
        )))
    }
}

