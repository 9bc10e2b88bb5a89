//! Run configuration: one JSON file covering every stage.

use crate::error::CliError;
use phaseseg_core::astgcn::EncoderConfig;
use phaseseg_core::pose_io::PHASE_NAMES;
use phaseseg_core::projector::ProjectorConfig;
use phaseseg_core::rng::seeded;
use phaseseg_core::sot::SotConfig;
use phaseseg_core::synth::SynthSpec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Which videos `eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalOn {
    All,
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Explicit training video ids; empty means every video.
    pub train: Vec<String>,
    /// Explicit test video ids; empty means every video.
    pub test: Vec<String>,
    /// Draw a seeded split when both lists are empty.
    pub auto: bool,
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: Vec::new(),
            test: Vec::new(),
            auto: false,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub eval_on: EvalOn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset directory or manifest; defaults to `<out>/dataset`.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    /// Global seed, copied into every stage.
    pub seed: u64,
    /// Number of phases, copied into the synthetic spec.
    pub k: usize,
    /// Phase names; empty means the javelin names when `k = 4`, else `phase_<i>`.
    pub class_names: Vec<String>,
    /// Worker threads for per-video stages.
    pub workers: usize,
    pub synth: SynthSpec,
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub sot: SotConfig,
    pub split: SplitConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: PathBuf::from("out"),
            seed: 0,
            k: 4,
            class_names: Vec::new(),
            workers: 1,
            synth: SynthSpec::default(),
            encoder: EncoderConfig::default(),
            projector: ProjectorConfig::default(),
            sot: SotConfig::default(),
            split: SplitConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Read `path` (or start from defaults), apply overrides and propagate
    /// the global seed and `k`.
    pub fn load(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::from_json(&std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out = o.to_path_buf();
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Make per-stage copies agree with the top-level fields and validate.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        if self.dataset.is_none() {
            self.dataset = Some(self.out.join("dataset"));
        }
        self.synth.k = self.k;
        self.synth.seed = self.seed;
        self.encoder.seed = self.seed;
        self.projector.seed = self.seed;
        self.sot.seed = self.seed;
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.k {
            return Err(CliError::Config(format!(
                "{} class names for k={}",
                self.class_names.len(),
                self.k
            )));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(CliError::Config("split.train_fraction must lie in (0, 1)".into()));
        }
        self.encoder.validate()?;
        self.projector.validate()?;
        self.sot.validate(self.k).map_err(|e| CliError::Config(e.to_string()))?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out.join("dataset"))
    }

    pub fn class_names(&self) -> Vec<String> {
        if !self.class_names.is_empty() {
            self.class_names.clone()
        } else if self.k == PHASE_NAMES.len() {
            PHASE_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.k).map(|i| format!("phase_{i}")).collect()
        }
    }

    /// Write the effective configuration next to the outputs.
    pub fn write_effective(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        let path = self.out.join("effective_config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}

/// Seeded split of sorted `ids`: the first `round(fraction * n)` of a shuffle
/// (at least one on each side when `n >= 2`) train, the rest test.
pub fn seeded_split(ids: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut shuffled: Vec<String> = ids.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut seeded(seed));
    let n = shuffled.len();
    let mut n_train = (fraction * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let test = shuffled.split_off(n_train.min(n));
    let (mut train, mut test) = (shuffled, test);
    train.sort();
    test.sort();
    (train, test)
}

/// The train and test id lists for a dataset with `ids`.
pub fn resolve_split(cfg: &RunConfig, ids: &[String]) -> Result<(Vec<String>, Vec<String>), CliError> {
    let known: BTreeSet<&String> = ids.iter().collect();
    for id in cfg.split.train.iter().chain(&cfg.split.test) {
        if !known.contains(id) {
            return Err(CliError::UnknownVideo(id.clone()));
        }
    }
    let s = &cfg.split;
    if s.train.is_empty() && s.test.is_empty() && s.auto {
        return Ok(seeded_split(ids, s.train_fraction, cfg.seed));
    }
    let all = || ids.to_vec();
    let train = if s.train.is_empty() { all() } else { s.train.clone() };
    let test = if s.test.is_empty() { all() } else { s.test.clone() };
    Ok((train, test))
}
