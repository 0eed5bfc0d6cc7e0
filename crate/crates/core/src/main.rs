//! Command-line front end. Every command works inside one run directory and
//! records its invocation in the run manifest.
//!
//! Exit codes: 0 success, 1 domain or validation error, 2 usage error,
//! 3 backend or transport failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use selfreport::backend::BackendKind;
use selfreport::dataset::{emit_introspection_dataset, emit_preference_dataset, read_jsonl, to_jsonl, DatasetKind};
use selfreport::experiment::{factory_for, simulate, ExperimentConfig, RunSession, SyntheticFactory};
use selfreport::manifest::{layout, persist_stage, StageOutputs};
use selfreport::remote::{FinetuneHyperparameters, RemoteBackend};
use selfreport::runner::{estimate_weights, read_records, two_folds, BackendFactory, ChoiceRecord};
use selfreport::{Error, Result};

#[derive(Parser)]
#[command(name = "selfreport", version, about = "Instill, elicit, recover and score preference self-reports")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the context sets and sample target weights.
    ///
    /// Writes contexts/original.json, contexts/transfer.json and
    /// weights/targets.json under the run directory.
    GenWeights {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Emit a fine-tuning dataset (one chat record per line).
    ///
    /// preference: per-agent decisions answered by the target weights,
    /// written to datasets/preference.jsonl.
    /// introspection: one record per context whose answer is the target
    /// weights, written to datasets/introspection-all.jsonl, or
    /// datasets/introspection-fold<K>.jsonl with --fold.
    MakeDataset {
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Examples per context (preference only).
        #[arg(long)]
        per_agent: Option<usize>,
        /// Only the K-th half of the contexts, the training half of crossfold K.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        fold: Option<u8>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Query the configured backend.
    ///
    /// decision: writes choices/<label>.jsonl (label defaults to verify).
    /// introspection: writes reports/<label>.jsonl and the averaged
    /// estimates/reported-<label>.json (label defaults to base, or trained
    /// with --trained).
    Elicit {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        per_agent: Option<usize>,
        #[arg(long)]
        label: Option<String>,
        /// Introspection dataset, relative to the run directory, to train on
        /// before eliciting.
        #[arg(long)]
        trained: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Recover weights from a choices file by penalized logistic regression.
    ///
    /// Reads <run>/choices/<stem>.jsonl and writes <run>/estimates/<stem>.json.
    Estimate {
        #[arg(long)]
        choices: PathBuf,
        /// Prior standard deviation of each coefficient.
        #[arg(long)]
        prior_sd: Option<f64>,
    },
    /// Correlate and contrast every weight set present in the run.
    ///
    /// Writes analysis/report.json, analysis/draws.json and
    /// analysis/summary.md, and prints the report.
    Analyze {
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
        #[arg(long)]
        draws: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Two-fold introspection training with reports on the held-out half.
    Crossfold {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train on all introspection data and compare reports on held-out
    /// contexts before and after.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the whole pipeline on the synthetic backend.
    Simulate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        max_in_flight: Option<usize>,
        #[arg(long)]
        draws: Option<usize>,
        /// Use only the first N contexts of each set.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
    },
    /// Submit or inspect fine-tuning jobs on the remote backend.
    Finetune {
        #[command(subcommand)]
        action: FinetuneAction,
    },
}

#[derive(Subcommand)]
enum FinetuneAction {
    /// Validate and upload a dataset, then start a job.
    ///
    /// Epochs, batch size and learning-rate multiplier follow the dataset
    /// kind unless overridden.
    Submit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        wait: bool,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        batch_size: Option<u32>,
        #[arg(long)]
        learning_rate_multiplier: Option<f64>,
        /// Record the job in this run's manifest; --dataset is then relative
        /// to it.
        #[arg(long)]
        run: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Print a job's current state.
    Status {
        #[arg(long)]
        job: String,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run directory; everything is read from and written to it.
    #[arg(long, default_value = ".")]
    run: PathBuf,
    /// Experiment configuration (TOML). Defaults to the run's config.toml.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bundled set name or JSON file of training contexts.
    #[arg(long)]
    contexts: Option<String>,
    /// Bundled set name or JSON file of held-out contexts.
    #[arg(long)]
    transfer: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args, Clone, Default)]
struct BackendArgs {
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API credential.
    #[arg(long)]
    credential_var: Option<String>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Retries after a timeout, connection error, 429 or 5xx.
    #[arg(long)]
    max_retries: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Preference,
    Introspection,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Decision,
    Introspection,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Markdown,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Synthetic,
    Remote,
}

impl BackendArgs {
    fn apply(&self, config: &mut ExperimentConfig) {
        let b = &mut config.backend;
        match self.backend {
            Some(BackendArg::Synthetic) => b.kind = BackendKind::Synthetic,
            Some(BackendArg::Remote) => b.kind = BackendKind::Remote,
            None => {}
        }
        if let Some(v) = &self.endpoint {
            b.endpoint_url = v.clone();
        }
        if let Some(v) = &self.model {
            b.model_id = v.clone();
        }
        if let Some(v) = &self.credential_var {
            b.credential_env_var_name = v.clone();
        }
        if let Some(v) = self.max_in_flight {
            b.max_in_flight = v;
        }
        if let Some(v) = self.max_retries {
            b.max_retries = v;
        }
    }
}

impl RunArgs {
    /// `--config`, else the run's own config.toml, else defaults; then the
    /// flags on top.
    fn config(&self) -> Result<ExperimentConfig> {
        let stored = self.run.join(layout::CONFIG);
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None if stored.exists() => ExperimentConfig::load(&stored)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            config.seed.value = v;
        }
        if let Some(v) = &self.contexts {
            config.contexts.original = v.clone();
        }
        if let Some(v) = &self.transfer {
            config.contexts.transfer = v.clone();
        }
        if self.limit.is_some() {
            config.contexts.limit = self.limit;
        }
        self.backend.apply(&mut config);
        config.validate()?;
        Ok(config)
    }

    fn open<'a>(&'a self, config: &ExperimentConfig, invocation: &[String]) -> Result<RunSession<'a>> {
        RunSession::open(config, &self.run, invocation, config.backend.describe())
    }
}

/// Target weights from the run, sampled first if the run has none yet.
fn ensure_targets(session: &mut RunSession) -> Result<selfreport::model::WeightTable> {
    if session.out.join(layout::TARGETS).exists() {
        session.targets()
    } else {
        session.gen_weights()
    }
}

fn factory(session: &mut RunSession, targets: &selfreport::model::WeightTable) -> Result<Box<dyn BackendFactory>> {
    let config = session.config.clone();
    if config.backend.kind == BackendKind::Synthetic {
        let f = SyntheticFactory::from_config(&config, &session.original, &session.transfer, targets)?;
        session.persist("subject", &[], f.artifacts(), serde_json::Value::Null)?;
        return Ok(Box::new(f));
    }
    factory_for(&config, &session.original, &session.transfer, targets)
}

fn checked_label(label: &str) -> Result<&str> {
    let ok = !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_');
    if ok {
        Ok(label)
    } else {
        Err(Error::Config(format!(
            "label {label:?} must be lowercase letters, digits, '-' or '_'"
        )))
    }
}

/// Resolves `rel` inside `run`, refusing anything that climbs out of it.
fn inside(run: &Path, rel: &Path) -> Result<PathBuf> {
    use std::path::Component;
    if rel.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(Error::Config(format!(
            "{} must be a relative path inside the run directory",
            rel.display()
        )));
    }
    Ok(run.join(rel))
}

fn print_report(report: &selfreport::analysis::AnalysisReport, format: FormatArg) {
    match format {
        FormatArg::Json => print!("{}", report.to_json()),
        FormatArg::Markdown => print!("{}", report.to_markdown()),
    }
}

fn run(cli: Cli, invocation: Vec<String>) -> Result<()> {
    match cli.command {
        Command::GenWeights { run } => {
            let config = run.config()?;
            let mut session = run.open(&config, &invocation)?;
            let targets = session.gen_weights()?;
            println!("{} target weight vectors in {}", targets.len(), run.run.join(layout::TARGETS).display());
        }
        Command::MakeDataset {
            kind,
            per_agent,
            fold,
            run,
        } => {
            let mut config = run.config()?;
            if let Some(n) = per_agent {
                config.counts.preference_examples_per_agent = n;
            }
            let mut session = run.open(&config, &invocation)?;
            let targets = ensure_targets(&mut session)?;
            let contexts = match fold {
                Some(k) => {
                    let halves = two_folds(&session.original)?;
                    let half = &halves[usize::from(k) - 1];
                    session.original.subset(format!("fold{k}"), half)?
                }
                None => session.original.clone(),
            };
            let (stage, rel, records) = match kind {
                KindArg::Preference => (
                    "make_dataset:preference".to_string(),
                    layout::PREFERENCE_DATASET.to_string(),
                    emit_preference_dataset(
                        &contexts,
                        &targets,
                        config.counts.preference_examples_per_agent,
                        session.seed(),
                    )?,
                ),
                KindArg::Introspection => {
                    let name = fold.map_or("all".to_string(), |k| format!("fold{k}"));
                    (
                        format!("make_dataset:introspection-{name}"),
                        format!("{}/introspection-{name}.jsonl", layout::DATASET_DIR),
                        emit_introspection_dataset(&contexts, &targets, session.seed())?,
                    )
                }
            };
            session.persist(
                &stage,
                &[layout::ORIGINAL_CONTEXTS, layout::TARGETS],
                vec![(rel.clone(), to_jsonl(&records).into_bytes())],
                json!({"records": records.len(), "contexts": contexts.name}),
            )?;
            println!("{} records in {}", records.len(), run.run.join(rel).display());
        }
        Command::Elicit {
            task,
            per_agent,
            label,
            trained,
            run,
        } => {
            let mut config = run.config()?;
            if let Some(n) = per_agent {
                match task {
                    TaskArg::Decision => config.counts.decisions_per_agent = n,
                    TaskArg::Introspection => config.counts.reports_per_agent = n,
                }
            }
            let mut session = run.open(&config, &invocation)?;
            let targets = ensure_targets(&mut session)?;
            let factory = factory(&mut session, &targets)?;
            let default_label = match (task, &trained) {
                (TaskArg::Decision, _) => "verify",
                (TaskArg::Introspection, None) => "base",
                (TaskArg::Introspection, Some(_)) => "trained",
            };
            let label = checked_label(label.as_deref().unwrap_or(default_label))?.to_string();
            let backend = match &trained {
                Some(dataset) => factory.trained(&label, &inside(&run.run, dataset)?)?.backend,
                None => factory.base()?,
            };
            match task {
                TaskArg::Decision => {
                    let choices = session.elicit_decisions(backend.as_ref(), &label)?;
                    println!("{} decisions in {}", choices.len(), run.run.join(format!("choices/{label}.jsonl")).display());
                }
                TaskArg::Introspection => {
                    let outcome = session.elicit_reports(backend.as_ref(), &label)?;
                    println!(
                        "{} reports, {} contexts averaged, {} excluded",
                        outcome.reports.len(),
                        outcome.reported.len(),
                        outcome.excluded.len()
                    );
                }
            }
        }
        Command::Estimate { choices, prior_sd } => {
            let stem = choices
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Config(format!("{} has no file name", choices.display())))?
                .to_string();
            let run_dir = choices
                .parent()
                .and_then(Path::parent)
                .ok_or_else(|| Error::Config(format!("{} is not inside <run>/choices/", choices.display())))?;
            let stored = run_dir.join(layout::CONFIG);
            let prior_sd = match prior_sd {
                Some(v) => v,
                None if stored.exists() => ExperimentConfig::load(&stored)?.analysis.prior_sd,
                None => 1.0,
            };
            if !(prior_sd > 0.0 && prior_sd.is_finite()) {
                return Err(Error::Config("--prior-sd must be positive".into()));
            }
            let records: Vec<ChoiceRecord> = read_records(&choices)?;
            let learned = estimate_weights(&records, prior_sd)?;
            let rel = layout::estimates_for(&format!("choices/{stem}.jsonl"));
            persist_stage(
                run_dir,
                &format!("estimate:{stem}"),
                StageOutputs {
                    inputs: vec![format!("choices/{stem}.jsonl")],
                    files: vec![(rel.clone(), learned.to_json().into_bytes())],
                    invocation,
                    details: json!({"prior_sd": prior_sd, "excluded": learned.excluded}),
                },
            )?;
            println!("{} contexts estimated in {}", learned.entries.len(), run_dir.join(rel).display());
        }
        Command::Analyze { format, draws, run } => {
            let mut config = run.config()?;
            if let Some(n) = draws {
                config.bootstrap.draws = n;
                config.validate()?;
            }
            let mut session = run.open(&config, &invocation)?;
            let report = session.analysis()?;
            print_report(&report, format);
        }
        Command::Crossfold { run } => {
            let config = run.config()?;
            let mut session = run.open(&config, &invocation)?;
            let targets = ensure_targets(&mut session)?;
            let factory = factory(&mut session, &targets)?;
            let outcome = session.crossfold(factory.as_ref(), &targets)?;
            println!(
                "{} held-out reports over {} + {} contexts",
                outcome.after.reports.len(),
                outcome.folds[0].len(),
                outcome.folds[1].len()
            );
        }
        Command::Transfer { run } => {
            let config = run.config()?;
            let mut session = run.open(&config, &invocation)?;
            let targets = ensure_targets(&mut session)?;
            let factory = factory(&mut session, &targets)?;
            let outcome = session.native(factory.as_ref(), &targets)?;
            println!(
                "{} decisions and {} + {} reports on {} held-out contexts",
                outcome.choices.len(),
                outcome.before.reports.len(),
                outcome.after.reports.len(),
                session.transfer.len()
            );
        }
        Command::Simulate {
            seed,
            out,
            config,
            max_in_flight,
            draws,
            limit,
            format,
        } => {
            let mut cfg = match &config {
                Some(path) => ExperimentConfig::load(path)?,
                None => ExperimentConfig::default(),
            };
            if let Some(v) = seed {
                cfg.seed.value = v;
            }
            if let Some(v) = max_in_flight {
                cfg.backend.max_in_flight = v;
            }
            if let Some(v) = draws {
                cfg.bootstrap.draws = v;
            }
            if limit.is_some() {
                cfg.contexts.limit = limit;
            }
            cfg.validate()?;
            let outcome = simulate(&cfg, &out, &invocation)?;
            print_report(&outcome.report, format);
        }
        Command::Finetune { action } => finetune(action, invocation)?,
    }
    Ok(())
}

fn remote_client(args: &BackendArgs) -> Result<RemoteBackend> {
    let mut config = ExperimentConfig::default();
    config.backend.kind = BackendKind::Remote;
    args.apply(&mut config);
    RemoteBackend::new(config.backend)
}

fn finetune(action: FinetuneAction, invocation: Vec<String>) -> Result<()> {
    match action {
        FinetuneAction::Submit {
            dataset,
            wait,
            epochs,
            batch_size,
            learning_rate_multiplier,
            run,
            backend,
        } => {
            let path = match &run {
                Some(dir) => inside(dir, &dataset)?,
                None => dataset.clone(),
            };
            let client = remote_client(&backend)?;
            let hyper = if epochs.is_some() || batch_size.is_some() || learning_rate_multiplier.is_some() {
                let records = read_jsonl(&path)?;
                let kind = records
                    .first()
                    .and_then(|r| r.validate().ok())
                    .unwrap_or(DatasetKind::Preference);
                let d = FinetuneHyperparameters::defaults(kind, &client.spec().model_id);
                Some(FinetuneHyperparameters {
                    n_epochs: epochs.unwrap_or(d.n_epochs),
                    batch_size: batch_size.unwrap_or(d.batch_size),
                    learning_rate_multiplier: learning_rate_multiplier.unwrap_or(d.learning_rate_multiplier),
                })
            } else {
                None
            };
            let mut job = client.submit_finetune(&path, hyper)?;
            if wait {
                job = client.wait_for_finetune(&job.id, Duration::from_secs(30), Duration::from_secs(6 * 3600))?;
            }
            if let Some(dir) = &run {
                persist_stage(
                    dir,
                    &format!("finetune:{}", job.id),
                    StageOutputs {
                        inputs: vec![dataset.to_string_lossy().into_owned()],
                        files: Vec::new(),
                        invocation,
                        details: serde_json::to_value(&job)?,
                    },
                )?;
            }
            println!("{}", serde_json::to_string_pretty(&job)?);
        }
        FinetuneAction::Status { job, backend } => {
            let client = remote_client(&backend)?;
            println!("{}", serde_json::to_string_pretty(&client.finetune_status(&job)?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let invocation: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli, invocation) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
