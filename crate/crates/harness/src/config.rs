//! Experiment configuration, read from JSON.

use std::fs;
use std::path::{Path, PathBuf};

use free_core::calibration::EstimatorSettings;
use free_core::engine::{DeepKvFill, ExitPolicy};
use free_core::model::{init_weights, load_weights, ModelConfig, Weights};
use serde::{Deserialize, Serialize};

use crate::corpus::{load_corpus, make_toy_corpus, Corpus};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Full,
    Static,
    Conventional,
    Oracle,
    ShallowDeep,
    ShallowDeepSc,
}

impl PolicyKind {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| HarnessError::Config(format!("unknown policy {s}")))
    }

    pub fn is_thresholded(self) -> bool {
        matches!(
            self,
            PolicyKind::Conventional | PolicyKind::ShallowDeep | PolicyKind::ShallowDeepSc
        )
    }

    fn takes_grid(self) -> bool {
        self.is_thresholded() || self == PolicyKind::Static
    }
}

/// One policy with its parameter grid: thresholds for thresholded policies,
/// depths for `static`, ignored otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyGrid {
    pub kind: PolicyKind,
    #[serde(default)]
    pub grid: Vec<f64>,
}

impl PolicyGrid {
    pub fn new(kind: PolicyKind, grid: Vec<f64>) -> Self {
        Self { kind, grid }
    }

    /// Expands to (parameter, policy) points, grid sorted ascending.
    pub fn points(&self) -> Result<Vec<(Option<f64>, ExitPolicy)>> {
        if !self.kind.takes_grid() {
            let policy = match self.kind {
                PolicyKind::Full => ExitPolicy::Full,
                _ => ExitPolicy::Oracle,
            };
            return Ok(vec![(None, policy)]);
        }
        if self.grid.is_empty() {
            return Err(HarnessError::Config(format!("{:?} needs a non-empty grid", self.kind)));
        }
        let mut grid = self.grid.clone();
        if let Some(bad) = grid.iter().find(|v| v.is_nan() || **v < 0.0 || !v.is_finite()) {
            return Err(HarnessError::Config(format!("bad grid value {bad}")));
        }
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        grid.into_iter()
            .map(|v| {
                let policy = match self.kind {
                    PolicyKind::Static => {
                        if v.fract() != 0.0 {
                            return Err(HarnessError::Config(format!("static depth {v}")));
                        }
                        ExitPolicy::Static { depth: v as usize }
                    }
                    PolicyKind::Conventional => ExitPolicy::Conventional { threshold: v as f32 },
                    PolicyKind::ShallowDeep => ExitPolicy::shallow_deep(v as f32),
                    _ => ExitPolicy::ShallowDeep {
                        threshold: v as f32,
                        fill: DeepKvFill::StateCopy,
                    },
                };
                Ok((Some(v), policy))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSource {
    /// Weight file written by `gen-weights`; takes precedence over `config`.
    pub weights: Option<PathBuf>,
    /// Model hyperparameters; the toy configuration seeded with the
    /// experiment seed when absent.
    pub config: Option<ModelConfig>,
    pub shallow_depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSource {
    /// JSONL corpus; a toy corpus is generated when absent.
    pub path: Option<PathBuf>,
    pub size: usize,
    pub min_prompt_len: usize,
    pub max_prompt_len: usize,
}

impl Default for CorpusSource {
    fn default() -> Self {
        Self {
            path: None,
            size: 60,
            min_prompt_len: 4,
            max_prompt_len: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub initial_threshold: f64,
    pub zeta: f64,
    /// Share of the corpus (in sentences) used to calibrate.
    pub warmup_fraction: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            initial_threshold: 0.9,
            zeta: 0.4,
            warmup_fraction: 0.03,
        }
    }
}

impl EstimatorConfig {
    /// Warm-up length for a corpus of `n` sentences: `max(1, ceil(f·n))`.
    /// Products within 1e-9 of an integer round to it, so `0.03 · 100` is 3.
    pub fn warmup_sentences(&self, n: usize) -> usize {
        let t = self.warmup_fraction * n as f64;
        let t = if (t - t.round()).abs() < 1e-9 { t.round() } else { t.ceil() };
        (t as usize).clamp(1, n.max(1))
    }

    pub fn settings(&self, n: usize) -> EstimatorSettings {
        EstimatorSettings {
            initial_threshold: self.initial_threshold,
            zeta: self.zeta,
            warmup_sentences: self.warmup_sentences(n),
        }
    }
}

pub const ANALYSES: [&str; 6] = [
    "oracle",
    "static",
    "cost",
    "spd_vs_sc",
    "shallow_depth",
    "calibration_size",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSource,
    pub corpus: CorpusSource,
    pub policies: Vec<PolicyGrid>,
    pub max_new: usize,
    pub estimator: EstimatorConfig,
    pub out_dir: PathBuf,
    /// Analyses run by `analyze`; all of them when empty.
    pub analyses: Vec<String>,
    /// Thresholds used by the SPD/SC and cost analyses.
    pub analysis_thresholds: Vec<f64>,
    /// Concurrent decode sessions; `FREE_DECODE_THREADS` caps it.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let thresholds: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).chain([1.1]).collect();
        Self {
            seed: 7,
            model: ModelSource::default(),
            corpus: CorpusSource::default(),
            policies: vec![
                PolicyGrid::new(PolicyKind::Full, vec![]),
                PolicyGrid::new(PolicyKind::Static, (1..=8).map(f64::from).collect()),
                PolicyGrid::new(PolicyKind::Conventional, thresholds.clone()),
                PolicyGrid::new(PolicyKind::Oracle, vec![]),
                PolicyGrid::new(PolicyKind::ShallowDeep, thresholds),
            ],
            max_new: 32,
            estimator: EstimatorConfig::default(),
            out_dir: PathBuf::from("results"),
            analyses: Vec::new(),
            analysis_thresholds: vec![0.9, 0.7, 0.5, 0.3, 0.1],
            threads: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            HarnessError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(HarnessError::Config("at least one policy is required".into()));
        }
        for p in &self.policies {
            p.points()?;
        }
        if self.max_new == 0 {
            return Err(HarnessError::Config("max_new must be at least 1".into()));
        }
        let e = &self.estimator;
        if !(e.zeta > 0.0 && e.zeta < 1.0) {
            return Err(HarnessError::Config(format!("zeta {} outside (0, 1)", e.zeta)));
        }
        if !(0.0..=1.0).contains(&e.initial_threshold) {
            return Err(HarnessError::Config(format!(
                "initial threshold {} outside [0, 1]",
                e.initial_threshold
            )));
        }
        if !(e.warmup_fraction > 0.0 && e.warmup_fraction <= 1.0) {
            return Err(HarnessError::Config(format!(
                "warmup fraction {} outside (0, 1]",
                e.warmup_fraction
            )));
        }
        for a in &self.analyses {
            if !ANALYSES.contains(&a.as_str()) {
                return Err(HarnessError::Config(format!("unknown analysis {a}")));
            }
        }
        if self.analysis_thresholds.is_empty() {
            return Err(HarnessError::Config("analysis_thresholds is empty".into()));
        }
        if self.threads == Some(0) {
            return Err(HarnessError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Model configuration used when no weight file is given.
    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = self
            .model
            .config
            .clone()
            .unwrap_or_else(|| ModelConfig::toy(self.seed));
        if let Some(d) = self.model.shallow_depth {
            cfg.shallow_depth = d;
        }
        cfg
    }

    pub fn build_weights(&self) -> Result<Weights> {
        let weights = match &self.model.weights {
            Some(path) => load_weights(path)
                .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?,
            None => init_weights(&self.model_config())
                .map_err(|e| HarnessError::Config(e.to_string()))?,
        };
        match self.model.shallow_depth {
            Some(d) if d != weights.config().shallow_depth => weights
                .with_shallow_depth(d)
                .map_err(|e| HarnessError::Config(e.to_string())),
            _ => Ok(weights),
        }
    }

    pub fn build_corpus(&self, weights: &Weights) -> Result<Corpus> {
        let vocab = weights.config().vocab_size;
        match &self.corpus.path {
            Some(path) => load_corpus(path, vocab),
            None => make_toy_corpus(
                self.seed.wrapping_add(1),
                self.corpus.size,
                weights,
                self.corpus.min_prompt_len..=self.corpus.max_prompt_len,
                self.max_new,
            ),
        }
    }

    pub fn analyses(&self) -> Vec<String> {
        if self.analyses.is_empty() {
            ANALYSES.iter().map(|s| s.to_string()).collect()
        } else {
            self.analyses.clone()
        }
    }
}

/// Command-line overrides applied on top of a loaded configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub policy: Option<PolicyKind>,
    pub lambdas: Option<Vec<f64>>,
    pub shallow_depth: Option<usize>,
    pub max_new: Option<usize>,
}

impl ExperimentConfig {
    /// `--policy` keeps only that policy (with its configured grid, or the
    /// default one); `--lambda` replaces every threshold grid and the
    /// analysis thresholds.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
            if let Some(c) = self.model.config.as_mut() {
                c.seed = seed;
            }
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if let Some(kind) = o.policy {
            let grid = self
                .policies
                .iter()
                .chain(&ExperimentConfig::default().policies)
                .find(|p| p.kind == kind)
                .map(|p| p.grid.clone())
                .unwrap_or_else(|| vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.1]);
            self.policies = vec![PolicyGrid::new(kind, grid)];
        }
        if let Some(lambdas) = &o.lambdas {
            for p in self.policies.iter_mut().filter(|p| p.kind.is_thresholded()) {
                p.grid = lambdas.clone();
            }
            self.analysis_thresholds = lambdas.clone();
        }
        if let Some(d) = o.shallow_depth {
            self.model.shallow_depth = Some(d);
        }
        if let Some(n) = o.max_new {
            self.max_new = n;
        }
        self.validate()
    }
}
