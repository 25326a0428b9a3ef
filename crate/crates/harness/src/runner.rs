//! Corpus-level decoding with a cached full-model baseline.

use free_core::engine::{decode, DecodeOptions, DecodeOutput, DecodeTrace, ExitPolicy};
use free_core::metrics::{CostProfile, CostReport, QualityReport};
use free_core::model::Weights;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::Corpus;
use crate::error::{HarnessError, Result};
use crate::replay::recompute_row;

pub const THREADS_ENV: &str = "FREE_DECODE_THREADS";

/// Session concurrency: the configured count capped by `FREE_DECODE_THREADS`.
/// Zero means the rayon default.
pub fn decode_threads(configured: Option<usize>) -> Result<usize> {
    let env = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            HarnessError::Config(format!("{THREADS_ENV}={v} is not a positive integer"))
        })?),
        Err(_) => None,
    };
    Ok(match (configured, env) {
        (Some(c), Some(e)) => c.min(e),
        (Some(n), None) | (None, Some(n)) => n,
        (None, None) => 0,
    })
}

/// One evaluated policy point.
#[derive(Debug, Clone, Serialize)]
pub struct PointResult {
    pub policy: String,
    pub param: Option<f64>,
    pub quality: QualityReport,
    pub cost: CostReport,
    /// Share of tokens emitted before the last layer.
    pub exit_rate: f64,
    pub state_copied: usize,
    #[serde(skip)]
    pub traces: Vec<DecodeTrace>,
}

pub struct Runner<'a> {
    pub weights: &'a Weights,
    pub corpus: &'a Corpus,
    pub max_new: usize,
    pub profile: CostProfile,
    pool: rayon::ThreadPool,
    baseline: Option<Vec<DecodeOutput>>,
}

impl<'a> Runner<'a> {
    pub fn new(weights: &'a Weights, corpus: &'a Corpus, max_new: usize, threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            weights,
            corpus,
            max_new,
            profile: CostProfile::for_weights(weights),
            pool,
            baseline: None,
        })
    }

    /// Decodes every record with `policy`, concurrently, in corpus order.
    pub fn decode_all(&self, policy: &ExitPolicy) -> Result<Vec<DecodeOutput>> {
        let options = DecodeOptions::new(self.max_new);
        self.pool.install(|| {
            self.corpus
                .records
                .par_iter()
                .map(|r| {
                    decode(self.weights, &r.prompt, policy, options).map_err(|source| {
                        HarnessError::Decode {
                            id: r.id.clone(),
                            source,
                        }
                    })
                })
                .collect()
        })
    }

    /// Full-model outputs, decoded once per runner.
    pub fn baseline(&mut self) -> Result<&[DecodeOutput]> {
        if self.baseline.is_none() {
            if self.corpus.is_empty() {
                return Err(HarnessError::Data("corpus is empty".into()));
            }
            self.baseline = Some(self.decode_all(&ExitPolicy::Full)?);
        }
        Ok(self.baseline.as_deref().expect("just computed"))
    }

    pub fn baseline_traces(&mut self) -> Result<Vec<DecodeTrace>> {
        Ok(self.baseline()?.iter().map(|o| o.trace.clone()).collect())
    }

    /// Scores already-decoded outputs against the references and baseline.
    pub fn score(&mut self, param: Option<f64>, outputs: &[DecodeOutput]) -> Result<PointResult> {
        let references = self.corpus.references();
        let profile = self.profile;
        let last = self.weights.num_layers();
        let base: Vec<DecodeTrace> = self.baseline()?.iter().map(|o| o.trace.clone()).collect();
        let traces: Vec<DecodeTrace> = outputs.iter().map(|o| o.trace.clone()).collect();
        let row = recompute_row(&traces, &base, &references, &profile, last)?;
        Ok(PointResult {
            policy: row.cost.policy.clone(),
            param,
            quality: row.quality,
            cost: row.cost,
            exit_rate: row.exit_rate,
            state_copied: row.state_copied,
            traces,
        })
    }

    pub fn evaluate(&mut self, param: Option<f64>, policy: &ExitPolicy) -> Result<PointResult> {
        self.baseline()?;
        let outputs = self.decode_all(policy)?;
        self.score(param, &outputs)
    }
}
