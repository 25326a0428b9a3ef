//! Shallow-deep decoding with an online-calibrated threshold.

use free_core::calibration::ThresholdEstimator;
use free_core::engine::{decode_with_estimator, DecodeOutput};
use serde::Serialize;

use crate::config::{EstimatorConfig, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::runner::{decode_threads, PointResult, Runner};

pub const ADAPTIVE_LABEL: &str = "shallow_deep:adaptive";

#[derive(Debug, Clone, Serialize)]
pub struct AdaptiveReport {
    pub warmup_sentences: usize,
    /// Threshold after each sentence, in corpus order.
    pub trajectory: Vec<f64>,
    pub final_lambda: f64,
    pub saturated: bool,
    pub frozen: bool,
    /// Calibration samples the final fit used.
    pub samples_used: usize,
    /// Tokens generated during warm-up.
    pub warmup_tokens: usize,
    /// `alpha0 beta0 alpha1 beta1 lambda n_samples frozen`
    pub estimator_dump: String,
    pub result: PointResult,
}

/// Decodes the corpus in order; the first `ceil(f·n)` sentences calibrate the
/// threshold, the rest use it frozen.
pub fn adaptive(runner: &mut Runner, settings: &EstimatorConfig) -> Result<AdaptiveReport> {
    let n = runner.corpus.len();
    if n == 0 {
        return Err(HarnessError::Data("corpus is empty".into()));
    }
    let mut estimator = ThresholdEstimator::new(settings.settings(n));
    let warmup = estimator.settings().warmup_sentences;
    let mut outputs: Vec<DecodeOutput> = Vec::with_capacity(n);
    let mut trajectory = Vec::with_capacity(n);
    let mut warmup_tokens = 0;
    for (i, r) in runner.corpus.records.iter().enumerate() {
        let mut out = decode_with_estimator(runner.weights, &r.prompt, &mut estimator, runner.max_new)
            .map_err(|source| HarnessError::Decode {
                id: r.id.clone(),
                source,
            })?;
        if i < warmup {
            warmup_tokens += out.tokens.len();
        }
        out.trace.policy = ADAPTIVE_LABEL.into();
        trajectory.push(estimator.threshold());
        outputs.push(out);
    }
    let result = runner.score(None, &outputs)?;
    Ok(AdaptiveReport {
        warmup_sentences: warmup,
        final_lambda: estimator.threshold(),
        trajectory,
        saturated: estimator.is_saturated(),
        frozen: estimator.is_frozen(),
        samples_used: estimator.samples().len(),
        warmup_tokens,
        estimator_dump: estimator.dump(),
        result,
    })
}

pub fn run_adaptive(config: &ExperimentConfig) -> Result<AdaptiveReport> {
    config.validate()?;
    let weights = config.build_weights()?;
    let corpus = config.build_corpus(&weights)?;
    let mut runner = Runner::new(&weights, &corpus, config.max_new, decode_threads(config.threads)?)?;
    adaptive(&mut runner, &config.estimator)
}
