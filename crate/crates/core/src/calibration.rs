//! Adaptive exit-threshold estimation.
//!
//! Deep passes in shallow-deep decoding produce, for every position they
//! cover, the shallow confidence and whether the shallow prediction agreed
//! with the deep one. Those pairs split into two classes whose confidences are
//! each modelled by a Beta distribution, fitted from the class mean and
//! variance. The threshold is the smallest confidence at which the posterior
//! probability of agreement (equal class priors) reaches `zeta`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Confidences are clamped into `[CLAMP, 1 - CLAMP]` before fitting or
/// evaluating densities.
pub const CLAMP: f64 = 1e-4;
/// Minimum samples per class before a refit is attempted.
pub const MIN_CLASS_SAMPLES: usize = 10;
/// Fitted variance is capped at this fraction of `mean * (1 - mean)`.
pub const VARIANCE_CAP: f64 = 0.999;
/// Fitted variance never drops below this (all-identical samples).
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Threshold grid resolution; the grid is `{0, STEP, 2*STEP, ..., 1}`.
pub const GRID_STEP: f64 = 0.001;
const GRID_POINTS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("beta shape parameters must be positive and finite (alpha={alpha}, beta={beta})")]
    Shape { alpha: f64, beta: f64 },
    #[error("density argument {0} outside [0, 1]")]
    Domain(f64),
    #[error("need at least {needed} samples, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("estimator is frozen after {0} sentences")]
    Frozen(usize),
}

/// One (shallow confidence, shallow/deep agreement) observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub confidence: f64,
    pub agree: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Two-component Beta mixture with fixed equal priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaMixture {
    /// Component for samples whose shallow and deep predictions differ.
    pub disagree: BetaParams,
    /// Component for samples whose predictions match.
    pub agree: BetaParams,
}

impl BetaMixture {
    pub const PRIOR: f64 = 0.5;
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(CLAMP, 1.0 - CLAMP)
}

/// Beta density, evaluated in log space. `x` is clamped away from the
/// endpoints where the density may be singular.
pub fn beta_pdf(x: f64, alpha: f64, beta: f64) -> Result<f64, CalibrationError> {
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(CalibrationError::Shape { alpha, beta });
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(CalibrationError::Domain(x));
    }
    let x = clamp_unit(x);
    let log_norm = ln_gamma(alpha + beta) - (ln_gamma(alpha) + ln_gamma(beta));
    let log_kernel = (alpha - 1.0) * x.ln() + (beta - 1.0) * (1.0 - x).ln();
    Ok((log_norm + log_kernel).exp())
}

/// Shapes from a mean and variance (method of moments). The variance is
/// clamped into `[VARIANCE_FLOOR, VARIANCE_CAP * mean * (1 - mean)]` so both
/// shapes stay positive and finite.
pub fn shapes_from_moments(mean: f64, variance: f64) -> BetaParams {
    let mean = clamp_unit(mean);
    let spread = mean * (1.0 - mean);
    let var = variance.clamp(VARIANCE_FLOOR, VARIANCE_CAP * spread);
    let alpha = mean * (spread / var - 1.0);
    BetaParams {
        alpha,
        beta: alpha * (1.0 - mean) / mean,
    }
}

/// Fits one component from the confidences of its class.
pub fn fit_component(confidences: &[f64]) -> Result<BetaParams, CalibrationError> {
    if confidences.len() < MIN_CLASS_SAMPLES {
        return Err(CalibrationError::InsufficientData {
            needed: MIN_CLASS_SAMPLES,
            have: confidences.len(),
        });
    }
    let n = confidences.len() as f64;
    let mean = confidences.iter().map(|&c| clamp_unit(c)).sum::<f64>() / n;
    let var = confidences
        .iter()
        .map(|&c| {
            let d = clamp_unit(c) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(shapes_from_moments(mean, var))
}

/// Fits both components, splitting samples by their agreement indicator.
pub fn fit_mixture(samples: &[CalibrationSample]) -> Result<BetaMixture, CalibrationError> {
    let (agree, disagree): (Vec<_>, Vec<_>) = samples.iter().partition(|s| s.agree);
    let conf = |v: Vec<&CalibrationSample>| v.iter().map(|s| s.confidence).collect::<Vec<_>>();
    Ok(BetaMixture {
        disagree: fit_component(&conf(disagree))?,
        agree: fit_component(&conf(agree))?,
    })
}

/// Posterior probability of agreement at confidence `lambda` with equal
/// priors. `None` when both densities vanish there.
pub fn posterior_agree(lambda: f64, mixture: &BetaMixture) -> Result<Option<f64>, CalibrationError> {
    let p1 = beta_pdf(lambda, mixture.agree.alpha, mixture.agree.beta)?;
    let p0 = beta_pdf(lambda, mixture.disagree.alpha, mixture.disagree.beta)?;
    let num = BetaMixture::PRIOR * p1;
    let den = num + BetaMixture::PRIOR * p0;
    if den > 0.0 && den.is_finite() {
        Ok(Some(num / den))
    } else {
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSolution {
    pub lambda: f64,
    /// No grid point satisfied the condition; `lambda` is 1.0 (never exit).
    pub saturated: bool,
}

pub fn grid_point(i: usize) -> f64 {
    i as f64 / GRID_POINTS as f64
}

/// Smallest grid point whose posterior of agreement is at least `zeta`.
///
/// The posterior need not be monotone in `lambda`, so the whole grid is
/// scanned from the bottom.
pub fn solve_threshold(mixture: &BetaMixture, zeta: f64) -> Result<ThresholdSolution, CalibrationError> {
    for i in 0..=GRID_POINTS {
        let lambda = grid_point(i);
        if let Some(p) = posterior_agree(lambda, mixture)? {
            if p >= zeta {
                return Ok(ThresholdSolution {
                    lambda,
                    saturated: false,
                });
            }
        }
    }
    Ok(ThresholdSolution {
        lambda: 1.0,
        saturated: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    pub initial_threshold: f64,
    pub zeta: f64,
    /// Number of sentences that update the threshold before it freezes.
    pub warmup_sentences: usize,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            initial_threshold: 0.9,
            zeta: 0.4,
            warmup_sentences: 1,
        }
    }
}

/// Online threshold estimator: one update per decoded sentence for the first
/// `warmup_sentences` sentences, then frozen.
#[derive(Debug, Clone)]
pub struct ThresholdEstimator {
    settings: EstimatorSettings,
    samples: Vec<CalibrationSample>,
    lambda: f64,
    mixture: Option<BetaMixture>,
    saturated: bool,
    sentences_seen: usize,
    frozen: bool,
}

impl ThresholdEstimator {
    pub fn new(settings: EstimatorSettings) -> Self {
        Self {
            settings,
            samples: Vec::new(),
            lambda: settings.initial_threshold.clamp(0.0, 1.0),
            mixture: None,
            saturated: false,
            sentences_seen: 0,
            frozen: settings.warmup_sentences == 0,
        }
    }

    pub fn settings(&self) -> &EstimatorSettings {
        &self.settings
    }

    pub fn threshold(&self) -> f64 {
        self.lambda
    }

    pub fn mixture(&self) -> Option<&BetaMixture> {
        self.mixture.as_ref()
    }

    pub fn samples(&self) -> &[CalibrationSample] {
        &self.samples
    }

    pub fn sentences_seen(&self) -> usize {
        self.sentences_seen
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_saturated(&self) -> bool {
        self.saturated
    }

    /// Adds one sentence's samples and refits. With fewer than
    /// [`MIN_CLASS_SAMPLES`] in either class the threshold is left unchanged.
    pub fn update(&mut self, sentence: &[CalibrationSample]) -> Result<f64, CalibrationError> {
        if self.frozen {
            return Err(CalibrationError::Frozen(self.sentences_seen));
        }
        self.samples.extend_from_slice(sentence);
        match fit_mixture(&self.samples) {
            Ok(mixture) => {
                let sol = solve_threshold(&mixture, self.settings.zeta)?;
                self.mixture = Some(mixture);
                self.lambda = sol.lambda;
                self.saturated = sol.saturated;
            }
            Err(CalibrationError::InsufficientData { .. }) => {}
            Err(e) => return Err(e),
        }
        self.sentences_seen += 1;
        if self.sentences_seen >= self.settings.warmup_sentences {
            self.frozen = true;
        }
        Ok(self.lambda)
    }

    /// `alpha0 beta0 alpha1 beta1 lambda n_samples frozen`; shapes print as
    /// `nan` before the first successful fit.
    pub fn dump(&self) -> String {
        let (a0, b0, a1, b1) = match &self.mixture {
            Some(m) => (m.disagree.alpha, m.disagree.beta, m.agree.alpha, m.agree.beta),
            None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        let f = |x: f64| {
            if x.is_nan() {
                "nan".to_string()
            } else {
                format!("{x:.6}")
            }
        };
        format!(
            "{} {} {} {} {:.3} {} {}",
            f(a0),
            f(b0),
            f(a1),
            f(b1),
            self.lambda,
            self.samples.len(),
            self.frozen
        )
    }
}
