//! `temppnet`: generate corpora, extract gait features, train, evaluate,
//! interpret and sweep.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on data or
//! validation errors.

mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use temppnet::eval::{econ_analysis, Metrics};
use temppnet::experiments::{default_experiments, run_experiment_suite, write_rows_csv, ExperimentConfig};
use temppnet::gait::{write_features_csv, FeatureConfig};
use temppnet::interpret::{render_report, ReportOptions};
use temppnet::model::{evaluate, file_digest, load_checkpoint, prepare_corpus, save_checkpoint, train, Ablation};
use temppnet::sensor::{load_corpus, LoadOptions, PatientRecord};
use temppnet::synth::{generate_corpus, write_generated};

use settings::Settings;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) | Self::Data(m) => f.write_str(m),
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    write_file(path, serde_json::to_string_pretty(value).map_err(data_err)? + "\n")
}

#[derive(Parser)]
#[command(name = "temppnet", version, about = "Interpretable depression screening from walking tests")]
struct Cli {
    /// Flat JSON settings file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and its ground-truth manifest.
    Generate(Flags),
    /// Write the twenty gait features of every test as CSV.
    ExtractFeatures(Flags),
    /// Train a model; writes the checkpoint and the training history.
    Train(Flags),
    /// Score a checkpoint on a corpus, or price a given precision and recall.
    Evaluate(Flags),
    /// Write the interpretation report of one patient.
    Interpret(Flags),
    /// Ablation, observation-window and sample-rate tables.
    Sweep(Flags),
}

#[derive(Args, Default)]
struct Flags {
    /// Corpus in JSON Lines format.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Number of generated patients.
    #[arg(long)]
    patients: Option<usize>,
    /// Fraction of generated patients who are depressed.
    #[arg(long)]
    balance: Option<f64>,
    #[arg(long)]
    window_days: Option<f64>,
    /// Sample rate of the encoder input.
    #[arg(long)]
    rate_hz: Option<u32>,
    /// none, no_t0, last_severity or avg_severity.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    precision: Option<f64>,
    #[arg(long)]
    recall: Option<f64>,
    #[arg(long)]
    patient: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Flags {
    fn apply(self, s: &mut Settings) {
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = self.$f { s.$f = v; } )*};
        }
        macro_rules! set_opt {
            ($($f:ident),*) => {$( if self.$f.is_some() { s.$f = self.$f; } )*};
        }
        set!(seed, epochs, patients, balance, window_days, rate_hz, ablation);
        set_opt!(data, out, checkpoint, patient, precision, recall);
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut settings = match &cli.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    let (name, flags, action): (&str, Flags, fn(&Settings, &Path) -> Result<(), CliError>) = match cli.command {
        Command::Generate(f) => ("generate", f, generate),
        Command::ExtractFeatures(f) => ("extract-features", f, extract_features),
        Command::Train(f) => ("train", f, train_cmd),
        Command::Evaluate(f) => ("evaluate", f, evaluate_cmd),
        Command::Interpret(f) => ("interpret", f, interpret_cmd),
        Command::Sweep(f) => ("sweep", f, sweep),
    };
    flags.apply(&mut settings);
    let out = settings.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    settings.out = Some(out.clone());
    // Reject bad settings before touching the file system.
    settings.model_config()?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
    settings.write(&out)?;
    action(&settings, &out)
}

fn require<'a, T>(value: &'a Option<T>, flag: &str, command: &str) -> Result<&'a T, CliError> {
    value.as_ref().ok_or_else(|| CliError::Usage(format!("{command} needs --{flag}")))
}

fn load(settings: &Settings, command: &str, window_days: f64) -> Result<Vec<PatientRecord>, CliError> {
    let path = require(&settings.data, "data", command)?;
    let (corpus, report) = load_corpus(path, LoadOptions { window_days }).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if corpus.is_empty() {
        return Err(CliError::Data(format!("{} holds no patients", path.display())));
    }
    if report.dropped_samples > 0 {
        eprintln!("dropped {} samples with invalid orientation", report.dropped_samples);
    }
    Ok(corpus)
}

fn generate(s: &Settings, out: &Path) -> Result<(), CliError> {
    let (corpus, manifest) = generate_corpus(s.patients, s.balance, s.seed, &s.synth_config()).map_err(data_err)?;
    let path = out.join("corpus.jsonl");
    write_generated(&path, &corpus, &manifest).map_err(data_err)?;
    println!("{} patients ({} depressed) -> {}", corpus.len(), manifest.depressed, path.display());
    Ok(())
}

fn extract_features(s: &Settings, out: &Path) -> Result<(), CliError> {
    let corpus = load(s, "extract-features", s.window_days)?;
    let path = out.join("features.csv");
    let rows = write_features_csv(&path, &corpus, FeatureConfig::default()).map_err(data_err)?;
    println!("{rows} tests -> {}", path.display());
    Ok(())
}

fn train_cmd(s: &Settings, out: &Path) -> Result<(), CliError> {
    let corpus = load(s, "train", s.window_days)?;
    let model_config = s.model_config()?;
    let outcome = train(&corpus, &model_config, &s.train_config()).map_err(data_err)?;
    let test: Vec<PatientRecord> = outcome.split.test.iter().map(|&i| corpus[i].clone()).collect();
    let (test_metrics, _) = evaluate(&outcome.model, &prepare_corpus(&test, &model_config).map_err(data_err)?).map_err(data_err)?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&outcome.model, &ckpt).map_err(data_err)?;
    let digest = file_digest(&ckpt).map_err(data_err)?;
    let history = json!({
        "best_epoch": outcome.best_epoch,
        "epochs": outcome.history,
        "split": outcome.split,
        "test": test_metrics,
        "checkpoint_sha256": digest,
    });
    write_json(&out.join("history.json"), &history)?;
    println!(
        "best epoch {}, test F1 {:.3}; checkpoint {} (sha256 {digest})",
        outcome.best_epoch,
        test_metrics.f1,
        ckpt.display()
    );
    Ok(())
}

fn check_unit(name: &str, v: f64) -> Result<f64, CliError> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(CliError::Data(format!("{name} {v} outside [0, 1]")))
    }
}

fn evaluate_cmd(s: &Settings, out: &Path) -> Result<(), CliError> {
    let report = match (s.precision, s.recall) {
        (Some(p), Some(r)) => {
            let econ = econ_analysis(check_unit("precision", p)?, check_unit("recall", r)?);
            json!({ "precision": p, "recall": r, "economics": econ })
        }
        (None, None) => {
            let path = require(&s.checkpoint, "checkpoint", "evaluate")?;
            let model = load_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let corpus = load(s, "evaluate", model.config.window_days)?;
            let prepared = prepare_corpus(&corpus, &model.config).map_err(data_err)?;
            let (metrics, predictions): (Metrics, _) = evaluate(&model, &prepared).map_err(data_err)?;
            let scored: Vec<_> = predictions
                .iter()
                .zip(&corpus)
                .map(|(p, r)| json!({ "patient_id": p.patient_id, "label": r.label, "probability": p.probability }))
                .collect();
            json!({
                "metrics": metrics,
                "economics": econ_analysis(metrics.precision, metrics.recall),
                "predictions": scored,
            })
        }
        _ => return Err(CliError::Usage("--precision and --recall go together".into())),
    };
    write_json(&out.join("evaluation.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(data_err)?);
    Ok(())
}

fn interpret_cmd(s: &Settings, out: &Path) -> Result<(), CliError> {
    let patient = require(&s.patient, "patient", "interpret")?;
    let path = s
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Data("interpret needs a trained model: pass --checkpoint".into()))?;
    let model = load_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let corpus = load(s, "interpret", model.config.window_days)?;
    let options = ReportOptions {
        samples_per_day: s.samples_per_day,
    };
    let report = render_report(&model, &corpus, patient, out, options).map_err(data_err)?;
    println!(
        "{}: P(depressed) = {:.3}; report in {}",
        report.patient_id,
        report.probability,
        out.display()
    );
    Ok(())
}

fn sweep(s: &Settings, out: &Path) -> Result<(), CliError> {
    let widest = s.windows_weeks.iter().map(|&w| 7.0 * f64::from(w)).fold(s.window_days, f64::max);
    let corpus = load(s, "sweep", widest)?;
    let base = s.model_config()?;
    if s.runs == 0 {
        return Err(CliError::Usage("runs must be positive".into()));
    }
    let seeds: Vec<u64> = (0..s.runs as u64).map(|i| s.seed + i).collect();
    let all = default_experiments(&base, &s.windows_weeks, &s.rates_hz);
    let n_ablations = Ablation::ALL.len();
    let n_windows = s.windows_weeks.len();
    let tables: [(&str, &[ExperimentConfig]); 3] = [
        ("ablation", &all[..n_ablations]),
        ("window", &all[n_ablations..n_ablations + n_windows]),
        ("rate", &all[n_ablations + n_windows..]),
    ];
    let mut notes = Vec::new();
    for (name, experiments) in tables {
        let result = run_experiment_suite(&corpus, experiments, &base, &s.train_config(), &seeds).map_err(data_err)?;
        let path = out.join(format!("{name}.csv"));
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &result.rows).map_err(data_err)?;
        write_file(&path, &buf)?;
        print!("{}", String::from_utf8_lossy(&buf));
        notes.extend(result.notes);
    }
    for n in &notes {
        eprintln!("skipped {n}");
    }
    write_file(&out.join("notes.txt"), notes.iter().map(|n| format!("{n}\n")).collect::<String>())
}
