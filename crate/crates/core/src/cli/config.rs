use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::estimators::FreeBitsMode;
use crate::lattice::OracleSuiteConfig;
use crate::segmodel::{DecodeOptions, SegModelConfig, SynthSpec, TrainConfig};
use crate::trainers::{BtConfig, VrsConfig, SHIPPED_INIT_STEPS};
use crate::{Error, Result};

/// What `run` executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Segmodel,
    Vrs,
    Backtranslation,
    EstimatorBench,
    LatticeCheck,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Segmodel => "segmodel",
            Task::Vrs => "vrs",
            Task::Backtranslation => "backtranslation",
            Task::EstimatorBench => "estimator-bench",
            Task::LatticeCheck => "lattice-check",
        }
    }
}

/// Synthetic corpus sizes; each split is drawn from its own derived seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_train: 2000, n_dev: 200, n_test: 200, synth: SynthSpec::default() }
    }
}

/// Schedules against posterior collapse and for relaxed samplers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Steps over which the KL weight rises from 0 to 1 and the
    /// teacher-forcing probability falls from 1 to 0.
    pub anneal_horizon: u64,
    pub free_bits_eps: f64,
    pub free_bits_mode: FreeBitsMode,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            anneal_horizon: 1000,
            free_bits_eps: 0.1,
            free_bits_mode: FreeBitsMode::PerDim,
            tau_start: 1.0,
            tau_end: 0.1,
            tau_steps: 1000,
        }
    }
}

/// Caps on the latent structures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeCaps {
    /// Longest segment L.
    pub max_seg_len: usize,
    /// Pointer positions listed per token in text alignment traces.
    pub top_k: usize,
}

impl Default for LatticeCaps {
    fn default() -> Self {
        LatticeCaps { max_seg_len: 6, top_k: 3 }
    }
}

/// Granularity regularizer max(|E[τ] − η|, γ) with η = K + eta_offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub enabled: bool,
    pub eta_offset: f64,
    pub gamma: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig { enabled: true, eta_offset: 0.0, gamma: 1.0 }
    }
}

/// Network sizes of the segmental model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSizes {
    pub embed: usize,
    pub hidden: usize,
    pub init_scale: f64,
}

impl Default for ModelSizes {
    fn default() -> Self {
        ModelSizes { embed: 32, hidden: 32, init_scale: 0.1 }
    }
}

/// Settings of the VRS task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VrsTaskConfig {
    pub step: VrsConfig,
    pub pretrain_steps: usize,
    pub steps: usize,
}

impl Default for VrsTaskConfig {
    fn default() -> Self {
        VrsTaskConfig { step: VrsConfig::default(), pretrain_steps: 50, steps: 200 }
    }
}

/// Settings of the back-translation task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BtTaskConfig {
    pub model: BtConfig,
    pub task_seed: u64,
    pub data_seed: u64,
    pub init_steps: usize,
    pub iterations: usize,
}

impl Default for BtTaskConfig {
    fn default() -> Self {
        BtTaskConfig { model: BtConfig::default(), task_seed: 0, data_seed: 1, init_steps: SHIPPED_INIT_STEPS, iterations: 4 }
    }
}

/// Settings of the estimator bench.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_trials: usize,
    pub n_samples: usize,
    /// Write measured wall times; off keeps the CSV reproducible.
    pub timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { n_trials: 4, n_samples: 25_000, timing: false }
    }
}

/// Optional inputs. Every path given must exist when the config is loaded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl PathsConfig {
    fn all(&self) -> impl Iterator<Item = (&'static str, &PathBuf)> {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test), ("checkpoint", &self.checkpoint)]
            .into_iter()
            .filter_map(|(n, p)| p.as_ref().map(|p| (n, p)))
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.train, &mut self.dev, &mut self.test, &mut self.checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// One experiment. `task` and `seed` are required; every other section
/// falls back to its defaults. Seeds inside sections (optimizer, oracle,
/// backtranslation model) are replaced by the top-level seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSizes,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
    #[serde(default)]
    pub lattice: LatticeCaps,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: TrainConfig,
    #[serde(default)]
    pub decode: DecodeOptions,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub vrs: VrsTaskConfig,
    #[serde(default)]
    pub backtranslation: BtTaskConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub oracle: OracleSuiteConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    /// Defaults for `task` with the given seed.
    pub fn new(task: Task, seed: u64) -> Self {
        ExperimentConfig {
            task,
            seed,
            model: ModelSizes::default(),
            regularizer: RegularizerConfig::default(),
            lattice: LatticeCaps::default(),
            schedule: ScheduleConfig::default(),
            optimizer: TrainConfig::default(),
            decode: DecodeOptions::default(),
            data: DataConfig::default(),
            vrs: VrsTaskConfig::default(),
            backtranslation: BtTaskConfig::default(),
            bench: BenchConfig::default(),
            oracle: OracleSuiteConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    /// Parses JSON; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in self.paths.all() {
            if !p.exists() {
                return Err(Error::Config(format!("paths.{name} {} does not exist", p.display())));
            }
        }
        self.segmodel_config().validate()?;
        self.data.synth.validate()?;
        self.backtranslation.model.validate()?;
        if self.lattice.max_seg_len < self.data.synth.max_seg_len {
            return Err(Error::Config(format!(
                "lattice.max_seg_len {} is below the corpus segment length {}",
                self.lattice.max_seg_len, self.data.synth.max_seg_len
            )));
        }
        let s = &self.schedule;
        if !(s.tau_start > 0.0 && s.tau_end > 0.0 && s.free_bits_eps >= 0.0) {
            return Err(Error::Config("temperatures must be positive and free_bits_eps nonnegative".into()));
        }
        if self.optimizer.batch_size == 0 || self.optimizer.lr <= 0.0 || self.optimizer.clip <= 0.0 {
            return Err(Error::Config("optimizer needs a positive batch size, lr and clip".into()));
        }
        if self.decode.beam == 0 {
            return Err(Error::Config("decode.beam must be positive".into()));
        }
        if self.data.n_train == 0 || self.data.n_dev == 0 || self.data.n_test == 0 {
            return Err(Error::Config("data split sizes must be positive".into()));
        }
        if self.vrs.step.n_samples < 2 {
            return Err(Error::Config("vrs.step.n_samples must be at least 2".into()));
        }
        if self.bench.n_trials == 0 || self.bench.n_samples == 0 {
            return Err(Error::Config("bench sizes must be positive".into()));
        }
        if self.backtranslation.iterations == 0 {
            return Err(Error::Config("backtranslation.iterations must be at least 1".into()));
        }
        Ok(())
    }

    /// The segmental model settings these sections describe.
    pub fn segmodel_config(&self) -> SegModelConfig {
        SegModelConfig {
            embed: self.model.embed,
            hidden: self.model.hidden,
            max_seg_len: self.lattice.max_seg_len,
            init_scale: self.model.init_scale,
            eta_offset: self.regularizer.eta_offset,
            gamma: self.regularizer.gamma,
            regularize: self.regularizer.enabled,
        }
    }

    /// The optimizer settings seeded from the experiment seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.optimizer.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_json(text, Path::new("."))
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = parse(r#"{"task": "lattice-check", "seed": 4}"#).unwrap();
        assert_eq!(cfg, ExperimentConfig::new(Task::LatticeCheck, 4));
        let back = parse(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn seed_and_task_are_mandatory() {
        for text in [r#"{"task": "vrs"}"#, r#"{"seed": 1}"#, r#"{"task": "nope", "seed": 1}"#] {
            assert!(matches!(parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn unknown_fields_and_bad_values_rejected() {
        for text in [
            r#"{"task": "vrs", "seed": 1, "sead": 2}"#,
            r#"{"task": "vrs", "seed": 1, "model": {"hiden": 3}}"#,
            r#"{"task": "vrs", "seed": 1, "model": {"hidden": 0}}"#,
            r#"{"task": "vrs", "seed": 1, "lattice": {"max_seg_len": 2}}"#,
            r#"{"task": "vrs", "seed": 1, "schedule": {"tau_end": 0}}"#,
            r#"{"task": "vrs", "seed": 1, "vrs": {"step": {"n_samples": 1}}}"#,
            r#"{"task": "vrs", "seed": 1, "decode": {"beam": 0}}"#,
        ] {
            assert!(matches!(parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn paths_must_exist_and_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train.jsonl"), "").unwrap();
        let text = r#"{"task": "segmodel", "seed": 0, "paths": {"train": "train.jsonl"}}"#;
        let cfg = ExperimentConfig::from_json(text, dir.path()).unwrap();
        assert_eq!(cfg.paths.train.unwrap(), dir.path().join("train.jsonl"));
        let text = r#"{"task": "segmodel", "seed": 0, "paths": {"test": "missing.jsonl"}}"#;
        assert!(matches!(ExperimentConfig::from_json(text, dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn segmodel_settings_follow_sections() {
        let cfg = parse(
            r#"{"task": "segmodel", "seed": 9, "model": {"hidden": 128},
                "regularizer": {"enabled": false, "eta_offset": 1.0, "gamma": 0.5},
                "lattice": {"max_seg_len": 7}, "optimizer": {"seed": 77, "epochs": 2}}"#,
        )
        .unwrap();
        let m = cfg.segmodel_config();
        assert_eq!((m.hidden, m.max_seg_len, m.regularize, m.eta_offset, m.gamma), (128, 7, false, 1.0, 0.5));
        let t = cfg.train_config();
        assert_eq!((t.seed, t.epochs), (9, 2));
    }
}
