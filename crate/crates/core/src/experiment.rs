//! End-to-end experiment pipeline over a run directory, and the TOML
//! configuration that drives it.
//!
//! Stages run in order and each persists its outputs before the next one
//! starts; later stages only consume earlier stages' files. On the
//! synthetic backend a rerun with the same configuration rewrites nothing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{analyze_run, AnalysisReport};
use crate::backend::{BackendKind, BackendSpec, Completer, SyntheticBackend};
use crate::dataset::{emit_introspection_dataset, emit_preference_dataset, read_jsonl, to_jsonl, write_jsonl};
use crate::error::{Error, Result};
use crate::manifest::{digest, layout, persist_stage, PersistOutcome, RunManifest, StageOutputs};
use crate::model::{read_weight_table, sample_weight_table, ContextSet, WeightRole, WeightTable};
use crate::runner::{
    collect_choices, run_crossfold_introspection, run_elicit_reports, run_native_generalization,
    run_verify_preferences, tally_choices, tally_reports, to_jsonl as records_jsonl, Averaging,
    BackendFactory, ChoiceRecord, CrossfoldOutcome, ElicitOutcome, NativeOutcome, TrainedBackend,
    VerifyOutcome,
};
use crate::seed::Seed;
use crate::stats::BootstrapSettings;
use crate::subject::SubjectConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextsConfig {
    /// Bundled set name or path of the training contexts.
    pub original: String,
    /// Bundled set name or path of the held-out contexts.
    pub transfer: String,
    /// Use only the first `limit` contexts of each set.
    pub limit: Option<usize>,
}

impl Default for ContextsConfig {
    fn default() -> Self {
        ContextsConfig {
            original: "original-100".into(),
            transfer: "transfer-100".into(),
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountsConfig {
    pub preference_examples_per_agent: usize,
    pub decisions_per_agent: usize,
    pub reports_per_agent: usize,
    pub native_decisions_per_agent: usize,
}

impl Default for CountsConfig {
    fn default() -> Self {
        CountsConfig {
            preference_examples_per_agent: 50,
            decisions_per_agent: 50,
            reports_per_agent: 10,
            native_decisions_per_agent: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub value: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub draws: usize,
    pub mass: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        let d = BootstrapSettings::default();
        BootstrapConfig {
            draws: d.draws,
            mass: d.mass,
        }
    }
}

impl BootstrapConfig {
    pub fn settings(&self) -> BootstrapSettings {
        BootstrapSettings {
            draws: self.draws,
            mass: self.mass,
        }
    }
}

/// Synthetic subject parameters before and after introspection training.
/// Training is modelled as a change in report fidelity only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjectSettings {
    #[serde(with = "crate::subject::sharpness")]
    pub choice_sharpness: f64,
    pub report_noise_sd: f64,
    pub report_shrinkage: f64,
    pub invalid_report_rate: f64,
    pub trained_report_noise_sd: f64,
    pub trained_report_shrinkage: f64,
    pub trained_invalid_report_rate: f64,
}

impl Default for SubjectSettings {
    fn default() -> Self {
        SubjectSettings {
            choice_sharpness: f64::INFINITY,
            report_noise_sd: 0.0,
            report_shrinkage: 1.0,
            invalid_report_rate: 0.0,
            trained_report_noise_sd: 0.0,
            trained_report_shrinkage: 1.0,
            trained_invalid_report_rate: 0.0,
        }
    }
}

impl SubjectSettings {
    /// A noisy reporter that training makes markedly more faithful.
    pub fn demonstration() -> Self {
        SubjectSettings {
            choice_sharpness: 0.08,
            report_noise_sd: 140.0,
            report_shrinkage: 0.5,
            invalid_report_rate: 0.05,
            trained_report_noise_sd: 110.0,
            trained_report_shrinkage: 0.9,
            trained_invalid_report_rate: 0.0,
        }
    }

    fn base(&self, latent: WeightTable) -> SubjectConfig {
        SubjectConfig {
            latent_weights: latent,
            choice_sharpness: self.choice_sharpness,
            report_noise_sd: self.report_noise_sd,
            report_shrinkage: self.report_shrinkage,
            invalid_report_rate: self.invalid_report_rate,
        }
    }

    fn trained(&self, base: &SubjectConfig) -> SubjectConfig {
        SubjectConfig {
            report_noise_sd: self.trained_report_noise_sd,
            report_shrinkage: self.trained_report_shrinkage,
            invalid_report_rate: self.trained_invalid_report_rate,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub averaging: Averaging,
    pub prior_sd: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            averaging: Averaging::Mean,
            prior_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Fine-tune the configured model on the preference dataset before
    /// eliciting anything (remote backends only).
    pub instill: bool,
    pub poll_secs: f64,
    pub timeout_secs: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            instill: false,
            poll_secs: 30.0,
            timeout_secs: 6.0 * 3600.0,
        }
    }
}

/// The whole experiment configuration; one TOML document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backend: BackendSpec,
    pub contexts: ContextsConfig,
    pub counts: CountsConfig,
    pub seed: SeedConfig,
    pub bootstrap: BootstrapConfig,
    pub subject: SubjectSettings,
    pub analysis: AnalysisConfig,
    pub finetune: FinetuneConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(p) = &config.backend.subject_config_path {
            if p.is_relative() {
                config.backend.subject_config_path =
                    Some(path.parent().unwrap_or(Path::new(".")).join(p));
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backend.validate()?;
        let c = &self.counts;
        for (name, v) in [
            ("preference_examples_per_agent", c.preference_examples_per_agent),
            ("decisions_per_agent", c.decisions_per_agent),
            ("reports_per_agent", c.reports_per_agent),
            ("native_decisions_per_agent", c.native_decisions_per_agent),
        ] {
            if v == 0 {
                return Err(Error::config(format!("counts.{name} must be at least 1")));
            }
        }
        if !(self.bootstrap.mass > 0.0 && self.bootstrap.mass < 1.0) {
            return Err(Error::config("bootstrap.mass must lie in (0, 1)"));
        }
        if self.bootstrap.draws < 20 {
            return Err(Error::config("bootstrap.draws must be at least 20"));
        }
        if !(self.analysis.prior_sd > 0.0 && self.analysis.prior_sd.is_finite()) {
            return Err(Error::config("analysis.prior_sd must be positive"));
        }
        if matches!(self.contexts.limit, Some(n) if n < 2) {
            return Err(Error::config("contexts.limit must be at least 2"));
        }
        let s = &self.subject;
        s.base(WeightTable::new()).validate()?;
        s.trained(&s.base(WeightTable::new())).validate()
    }

    pub fn seed(&self) -> Seed {
        Seed(self.seed.value)
    }

    /// The training and held-out context sets, truncated to `limit`.
    pub fn context_sets(&self) -> Result<(ContextSet, ContextSet)> {
        let load = |name: &str| -> Result<ContextSet> {
            let set = ContextSet::load(name)?;
            match self.contexts.limit {
                Some(n) if n < set.len() => {
                    let ids: Vec<String> = set.ids().take(n).map(str::to_string).collect();
                    set.subset(format!("{}-first-{n}", set.name), &ids)
                }
                _ => Ok(set),
            }
        };
        Ok((load(&self.contexts.original)?, load(&self.contexts.transfer)?))
    }
}

/// Target weights for the training set.
pub fn targets_for(seed: Seed, original: &ContextSet) -> WeightTable {
    sample_weight_table(seed.stream("targets"), original)
}

/// Stands in for fine-tuning: the base subject already holds the target
/// weights (plus native weights for held-out contexts), and "training"
/// swaps in the trained report parameters.
#[derive(Debug, Clone)]
pub struct SyntheticFactory {
    pub base: SubjectConfig,
    pub trained: SubjectConfig,
    pub contexts: ContextSet,
    pub seed: Seed,
    pub max_in_flight: usize,
}

impl SyntheticFactory {
    pub fn from_config(
        config: &ExperimentConfig,
        original: &ContextSet,
        transfer: &ContextSet,
        targets: &WeightTable,
    ) -> Result<Self> {
        let mut all = original.contexts().to_vec();
        all.extend(transfer.contexts().iter().cloned());
        let contexts = ContextSet::new("all", all)?;
        let base = match &config.backend.subject_config_path {
            Some(path) => SubjectConfig::load(path)?,
            None => {
                let mut latent = targets.clone();
                latent.extend(sample_weight_table(config.seed().stream("native"), transfer));
                config.subject.base(latent)
            }
        };
        for ctx in &contexts {
            base.latent(&ctx.context_id)?;
        }
        let trained = config.subject.trained(&base);
        base.validate()?;
        trained.validate()?;
        Ok(SyntheticFactory {
            base,
            trained,
            contexts,
            seed: config.seed().stream("synthetic-backend"),
            max_in_flight: config.backend.max_in_flight,
        })
    }

    fn backend(&self, subject: &SubjectConfig, label: &str) -> Result<SyntheticBackend> {
        Ok(SyntheticBackend::new(subject.clone(), self.contexts.clone(), self.seed.derive(label, "", 0))?
            .with_max_in_flight(self.max_in_flight)
            .with_label(label))
    }

    /// Subject files worth keeping in the run directory.
    pub fn artifacts(&self) -> Vec<(String, Vec<u8>)> {
        let pretty = |s: &SubjectConfig| {
            let mut t = serde_json::to_string_pretty(s).expect("subject serializes");
            t.push('\n');
            t.into_bytes()
        };
        vec![
            (layout::SUBJECT_BASE.to_string(), pretty(&self.base)),
            (layout::SUBJECT_TRAINED.to_string(), pretty(&self.trained)),
        ]
    }
}

impl BackendFactory for SyntheticFactory {
    fn describe(&self) -> Value {
        json!({"kind": "synthetic"})
    }

    fn base(&self) -> Result<Box<dyn Completer>> {
        Ok(Box::new(self.backend(&self.base, "base")?))
    }

    fn trained(&self, label: &str, dataset: &Path) -> Result<TrainedBackend> {
        let records = read_jsonl(dataset)?;
        Ok(TrainedBackend {
            backend: Box::new(self.backend(&self.trained, &format!("trained-{label}"))?),
            provenance: json!({"label": label, "training_records": records.len()}),
        })
    }
}

#[cfg(feature = "remote")]
pub use remote_factory::RemoteFactory;

#[cfg(feature = "remote")]
mod remote_factory {
    use super::*;
    use crate::remote::RemoteBackend;
    use std::time::Duration;

    /// Real fine-tuning through the remote job endpoints.
    #[derive(Debug)]
    pub struct RemoteFactory {
        client: RemoteBackend,
        finetune: FinetuneConfig,
    }

    impl RemoteFactory {
        pub fn new(spec: BackendSpec, finetune: FinetuneConfig) -> Result<Self> {
            Ok(RemoteFactory {
                client: RemoteBackend::new(spec)?,
                finetune,
            })
        }

        fn train(&self, dataset: &Path) -> Result<(RemoteBackend, Value)> {
            let job = self.client.submit_finetune(dataset, None)?;
            let done = self.client.wait_for_finetune(
                &job.id,
                Duration::from_secs_f64(self.finetune.poll_secs),
                Duration::from_secs_f64(self.finetune.timeout_secs),
            )?;
            let model = done.fine_tuned_model.clone().unwrap_or_default();
            Ok((self.client.with_model(model), serde_json::to_value(&done)?))
        }
    }

    impl BackendFactory for RemoteFactory {
        fn describe(&self) -> Value {
            self.client.spec().describe()
        }

        fn instill(&mut self, dataset: &Path) -> Result<Value> {
            if !self.finetune.instill {
                return Ok(Value::Null);
            }
            let (client, job) = self.train(dataset)?;
            self.client = client;
            Ok(job)
        }

        fn base(&self) -> Result<Box<dyn Completer>> {
            Ok(Box::new(self.client.with_model(self.client.spec().model_id.clone())))
        }

        fn trained(&self, label: &str, dataset: &Path) -> Result<TrainedBackend> {
            let (client, job) = self.train(dataset)?;
            Ok(TrainedBackend {
                backend: Box::new(client),
                provenance: json!({"label": label, "job": job}),
            })
        }
    }
}

/// The factory a configuration asks for. Synthetic factories need the
/// target weights because the subject holds them as its latent weights.
pub fn factory_for(
    config: &ExperimentConfig,
    original: &ContextSet,
    transfer: &ContextSet,
    targets: &WeightTable,
) -> Result<Box<dyn BackendFactory>> {
    match config.backend.kind {
        BackendKind::Synthetic => Ok(Box::new(SyntheticFactory::from_config(
            config, original, transfer, targets,
        )?)),
        #[cfg(feature = "remote")]
        BackendKind::Remote => Ok(Box::new(RemoteFactory::new(
            config.backend.clone(),
            config.finetune.clone(),
        )?)),
        #[cfg(not(feature = "remote"))]
        BackendKind::Remote => Err(Error::config("built without remote backend support")),
    }
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializes");
    s.push('\n');
    s.into_bytes()
}

/// Identifies a run by seed and configuration.
pub fn run_id(config: &ExperimentConfig) -> String {
    let fingerprint = digest(config.to_toml().as_bytes());
    format!("seed{}-{}", config.seed.value, &fingerprint[..12])
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub manifest: RunManifest,
    pub report: AnalysisReport,
    pub stages: Vec<(String, PersistOutcome)>,
}

/// A run directory opened for one configuration. Each method runs one
/// stage and records it in the manifest.
pub struct RunSession<'a> {
    pub config: ExperimentConfig,
    pub out: &'a Path,
    pub original: ContextSet,
    pub transfer: ContextSet,
    invocation: Vec<String>,
    stages: Vec<(String, PersistOutcome)>,
    manifest: RunManifest,
}

impl<'a> RunSession<'a> {
    /// Opens or starts the run directory. Recorded outputs must still match
    /// their digests, and an existing run must have the same seed.
    pub fn open(config: &ExperimentConfig, out: &'a Path, invocation: &[String], backend: Value) -> Result<Self> {
        config.validate()?;
        let (original, transfer) = config.context_sets()?;
        let manifest = RunManifest::open_or_create(out, || {
            RunManifest::new(
                run_id(config),
                config.seed(),
                backend,
                vec![original.name.clone(), transfer.name.clone()],
            )
        })?;
        if manifest.seed != config.seed() {
            return Err(Error::Integrity(format!(
                "{} belongs to a run with seed {}, not {}",
                out.display(),
                manifest.seed.0,
                config.seed.value
            )));
        }
        manifest.verify(out)?;
        let mut session = RunSession {
            config: config.clone(),
            out,
            original,
            transfer,
            invocation: invocation.to_vec(),
            stages: Vec::new(),
            manifest,
        };
        session.persist("config", &[], vec![(layout::CONFIG.into(), config.to_toml().into_bytes())], Value::Null)?;
        Ok(session)
    }

    pub fn seed(&self) -> Seed {
        self.config.seed()
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn persist(&mut self, stage: &str, inputs: &[&str], files: Vec<(String, Vec<u8>)>, details: Value) -> Result<PersistOutcome> {
        let (manifest, outcome) = persist_stage(
            self.out,
            stage,
            StageOutputs {
                inputs: inputs.iter().map(|s| s.to_string()).collect(),
                files,
                invocation: self.invocation.clone(),
                details,
            },
        )?;
        log::info!("stage {stage}: {outcome:?}");
        self.stages.push((stage.to_string(), outcome));
        self.manifest = manifest;
        Ok(outcome)
    }

    fn read_back(&self, rel: &str) -> Result<(String, Vec<u8>)> {
        Ok((rel.to_string(), std::fs::read(self.out.join(rel))?))
    }

    /// Writes both context sets and samples the target weights.
    pub fn gen_weights(&mut self) -> Result<WeightTable> {
        self.persist(
            "contexts",
            &[],
            vec![
                (layout::ORIGINAL_CONTEXTS.into(), self.original.to_json().into_bytes()),
                (layout::TRANSFER_CONTEXTS.into(), self.transfer.to_json().into_bytes()),
            ],
            Value::Null,
        )?;
        let targets = targets_for(self.seed(), &self.original);
        self.persist(
            "gen_weights",
            &[layout::ORIGINAL_CONTEXTS],
            vec![(layout::TARGETS.into(), pretty(&targets))],
            Value::Null,
        )?;
        Ok(targets)
    }

    /// Target weights recorded in the run directory.
    pub fn targets(&self) -> Result<WeightTable> {
        let path = self.out.join(layout::TARGETS);
        if !path.exists() {
            return Err(Error::config(format!(
                "{} has no target weights yet; run gen-weights first",
                self.out.display()
            )));
        }
        read_weight_table(&path, WeightRole::Target)
    }

    pub fn preference_dataset(&mut self, targets: &WeightTable) -> Result<usize> {
        let records = emit_preference_dataset(
            &self.original,
            targets,
            self.config.counts.preference_examples_per_agent,
            self.seed(),
        )?;
        self.persist(
            "preference_dataset",
            &[layout::ORIGINAL_CONTEXTS, layout::TARGETS],
            vec![(layout::PREFERENCE_DATASET.into(), to_jsonl(&records).into_bytes())],
            json!({"records": records.len()}),
        )?;
        Ok(records.len())
    }

    /// Lets the factory train on the preference dataset, if it does that.
    pub fn instill(&mut self, factory: &mut dyn BackendFactory) -> Result<()> {
        let provenance = factory.instill(&self.out.join(layout::PREFERENCE_DATASET))?;
        if !provenance.is_null() {
            self.persist("instill", &[layout::PREFERENCE_DATASET], Vec::new(), provenance)?;
        }
        Ok(())
    }

    pub fn verify(&mut self, backend: &dyn Completer, targets: &WeightTable) -> Result<VerifyOutcome> {
        let verify = run_verify_preferences(
            backend,
            &self.original,
            targets,
            self.config.counts.decisions_per_agent,
            self.config.analysis.prior_sd,
            self.config.bootstrap.settings(),
            self.seed(),
        )?;
        self.persist(
            "verify_preferences",
            &[layout::ORIGINAL_CONTEXTS, layout::TARGETS],
            vec![
                (layout::VERIFY_CHOICES.into(), records_jsonl(&verify.choices).into_bytes()),
                (layout::LEARNED.into(), verify.learned.to_json().into_bytes()),
            ],
            json!({
                "target_vs_learned": verify.estimate.clone().without_draws(),
                "excluded": verify.learned.excluded,
            }),
        )?;
        Ok(verify)
    }

    /// Decisions only, into `choices/<label>.jsonl`.
    pub fn elicit_decisions(&mut self, backend: &dyn Completer, label: &str) -> Result<Vec<ChoiceRecord>> {
        let choices = collect_choices(
            backend,
            &self.original,
            self.config.counts.decisions_per_agent,
            self.seed().stream("verify-choices"),
        )?;
        self.persist(
            &format!("elicit_decisions:{label}"),
            &[layout::ORIGINAL_CONTEXTS],
            vec![(format!("choices/{label}.jsonl"), records_jsonl(&choices).into_bytes())],
            json!({"tally": tally_choices(&choices)}),
        )?;
        Ok(choices)
    }

    /// Reports into `reports/<label>.jsonl`, averaged into
    /// `estimates/reported-<label>.json`.
    pub fn elicit_reports(&mut self, backend: &dyn Completer, label: &str) -> Result<ElicitOutcome> {
        let outcome = run_elicit_reports(
            backend,
            &self.original,
            self.config.counts.reports_per_agent,
            self.config.analysis.averaging,
            self.seed().stream("reports"),
        )?;
        let stage = if label == "base" {
            "elicit_reports".to_string()
        } else {
            format!("elicit_reports:{label}")
        };
        self.persist(
            &stage,
            &[layout::ORIGINAL_CONTEXTS],
            vec![
                (format!("reports/{label}.jsonl"), records_jsonl(&outcome.reports).into_bytes()),
                (format!("estimates/reported-{label}.json"), pretty(&outcome.reported)),
            ],
            json!({"excluded": outcome.excluded, "tally": tally_reports(&outcome.reports)}),
        )?;
        Ok(outcome)
    }

    pub fn crossfold(&mut self, factory: &dyn BackendFactory, targets: &WeightTable) -> Result<CrossfoldOutcome> {
        let crossfold = run_crossfold_introspection(
            factory,
            &self.original,
            targets,
            self.config.counts.reports_per_agent,
            self.config.analysis.averaging,
            self.seed(),
            &self.out.join(layout::DATASET_DIR),
        )?;
        let mut files = Vec::new();
        for path in &crossfold.datasets {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            files.push(self.read_back(&format!("{}/{name}", layout::DATASET_DIR))?);
        }
        files.push((layout::TRAINED_REPORTS.into(), records_jsonl(&crossfold.after.reports).into_bytes()));
        files.push((layout::REPORTED_TRAINED.into(), pretty(&crossfold.after.reported)));
        self.persist(
            "crossfold_introspection",
            &[layout::ORIGINAL_CONTEXTS, layout::TARGETS],
            files,
            json!({
                "folds": crossfold.folds,
                "training": crossfold.provenance,
                "excluded": crossfold.after.excluded,
            }),
        )?;
        Ok(crossfold)
    }

    /// Trains on introspection data for every training context, then
    /// compares reports about the held-out contexts before and after.
    pub fn native(&mut self, factory: &dyn BackendFactory, targets: &WeightTable) -> Result<NativeOutcome> {
        let records = emit_introspection_dataset(&self.original, targets, self.seed())?;
        let rel = format!("{}/introspection-all.jsonl", layout::DATASET_DIR);
        std::fs::create_dir_all(self.out.join(layout::DATASET_DIR))?;
        write_jsonl(&self.out.join(&rel), &records)?;
        let base = factory.base()?;
        let trained = factory.trained("all", &self.out.join(&rel))?;
        let counts = &self.config.counts;
        let native = run_native_generalization(
            base.as_ref(),
            trained.backend.as_ref(),
            &self.transfer,
            &self.original,
            counts.native_decisions_per_agent,
            counts.reports_per_agent,
            self.config.analysis.averaging,
            self.config.analysis.prior_sd,
            self.config.bootstrap.settings(),
            self.seed(),
        )?;
        let files = vec![
            self.read_back(&rel)?,
            (layout::NATIVE_CHOICES.into(), records_jsonl(&native.choices).into_bytes()),
            (layout::NATIVE_LEARNED.into(), native.learned.to_json().into_bytes()),
            (layout::NATIVE_BASE_REPORTS.into(), records_jsonl(&native.before.reports).into_bytes()),
            (layout::NATIVE_TRAINED_REPORTS.into(), records_jsonl(&native.after.reports).into_bytes()),
            (layout::NATIVE_REPORTED_BASE.into(), pretty(&native.before.reported)),
            (layout::NATIVE_REPORTED_TRAINED.into(), pretty(&native.after.reported)),
        ];
        self.persist(
            "native_generalization",
            &[layout::TRANSFER_CONTEXTS, layout::ORIGINAL_CONTEXTS, layout::TARGETS],
            files,
            json!({"training": trained.provenance}),
        )?;
        Ok(native)
    }

    /// Rebuilds the analysis files from whatever the directory holds.
    pub fn analysis(&mut self) -> Result<AnalysisReport> {
        let analysis = analyze_run(self.out, self.config.bootstrap.settings(), self.seed())?;
        let inputs: Vec<&str> = [
            layout::ORIGINAL_CONTEXTS,
            layout::TRANSFER_CONTEXTS,
            layout::TARGETS,
            layout::LEARNED,
            layout::REPORTED_BASE,
            layout::REPORTED_TRAINED,
            layout::NATIVE_LEARNED,
            layout::NATIVE_REPORTED_BASE,
            layout::NATIVE_REPORTED_TRAINED,
        ]
        .into_iter()
        .filter(|rel| self.out.join(rel).exists())
        .collect();
        self.persist(
            "analysis",
            &inputs,
            vec![
                (layout::ANALYSIS.into(), analysis.report.to_json().into_bytes()),
                (layout::DRAWS.into(), analysis.draws_json().into_bytes()),
                (layout::SUMMARY.into(), analysis.report.to_markdown().into_bytes()),
            ],
            Value::Null,
        )?;
        Ok(analysis.report)
    }

    pub fn finish(self, report: AnalysisReport) -> ExperimentOutcome {
        ExperimentOutcome {
            manifest: self.manifest,
            report,
            stages: self.stages,
        }
    }
}

/// Runs every stage: contexts and targets, the preference dataset,
/// preference verification, report elicitation, two-fold introspection
/// training, generalization to held-out contexts, and the analysis.
pub fn run_experiment(
    config: &ExperimentConfig,
    factory: &mut dyn BackendFactory,
    out: &Path,
    invocation: &[String],
) -> Result<ExperimentOutcome> {
    let mut run = RunSession::open(config, out, invocation, factory.describe())?;
    let targets = run.gen_weights()?;
    run.preference_dataset(&targets)?;
    run.instill(factory)?;
    let base = factory.base()?;
    run.verify(base.as_ref(), &targets)?;
    run.elicit_reports(base.as_ref(), "base")?;
    run.crossfold(&*factory, &targets)?;
    run.native(&*factory, &targets)?;
    let report = run.analysis()?;
    Ok(run.finish(report))
}

/// The fully synthetic pipeline.
pub fn simulate(config: &ExperimentConfig, out: &Path, invocation: &[String]) -> Result<ExperimentOutcome> {
    let mut config = config.clone();
    config.backend.kind = BackendKind::Synthetic;
    let (original, transfer) = config.context_sets()?;
    let targets = targets_for(config.seed(), &original);
    let mut factory = SyntheticFactory::from_config(&config, &original, &transfer, &targets)?;
    let mut run = RunSession::open(&config, out, invocation, factory.describe())?;
    run.persist("subject", &[], factory.artifacts(), Value::Null)?;
    drop(run);
    run_experiment(&config, &mut factory, out, invocation)
}
