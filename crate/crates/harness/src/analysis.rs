//! Analyses run by the `analyze` subcommand, each producing one subreport.

use free_core::engine::{DeepKvFill, ExitPolicy, OpCounts};
use free_core::metrics::CostProfile;
use serde::Serialize;

use crate::adaptive::adaptive;
use crate::config::{ExperimentConfig, ANALYSES};
use crate::error::{HarnessError, Result};
use crate::runner::{decode_threads, PointResult, Runner};

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    /// `exit_histogram[l - 1]` counts tokens exiting at layer `l`.
    pub exit_histogram: Vec<usize>,
    pub mean_exit_layer: f64,
    pub exited_fraction: f64,
    /// Mean cosine between exit-layer and last-layer hidden states.
    pub mean_cosine: f64,
    pub full_rouge_l: f64,
    pub rouge_l_delta: f64,
    pub result: PointResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct StaticRow {
    pub depth: usize,
    pub reference_mean_length: f64,
    /// Mean output length over mean reference length.
    pub length_ratio: f64,
    /// Output length inflated by more than 20% over the references.
    pub degenerate: bool,
    pub result: PointResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostShares {
    pub sa: f64,
    pub ca: f64,
    pub ffn: f64,
    pub lm_head: f64,
    pub kv_copy: f64,
}

impl CostShares {
    fn of(counts: &OpCounts, p: &CostProfile) -> Self {
        let total = p.weigh(counts).max(f64::MIN_POSITIVE);
        Self {
            sa: counts.sa as f64 * p.sa / total,
            ca: counts.ca as f64 * p.ca / total,
            ffn: counts.ffn as f64 * p.ffn / total,
            lm_head: counts.lm_head as f64 * p.lm_head / total,
            kv_copy: counts.kv_copy as f64 * p.kv_copy / total,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CostRow {
    pub shares: CostShares,
    pub result: PointResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpdScRow {
    pub lambda: f64,
    pub spd: PointResult,
    pub sc: PointResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShallowDepthRow {
    pub shallow_depth: usize,
    pub final_lambda: f64,
    pub result: PointResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationSizeRow {
    pub warmup_fraction: f64,
    pub warmup_sentences: usize,
    pub samples_used: usize,
    pub final_lambda: f64,
    pub result: PointResult,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AnalysisReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleReport>,
    #[serde(rename = "static", skip_serializing_if = "Option::is_none")]
    pub static_depth: Option<Vec<StaticRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<Vec<CostRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spd_vs_sc: Option<Vec<SpdScRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shallow_depth: Option<Vec<ShallowDepthRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_size: Option<Vec<CalibrationSizeRow>>,
}

pub const CALIBRATION_FRACTIONS: [f64; 5] = [0.03, 0.1, 0.25, 0.5, 1.0];

pub fn oracle(runner: &mut Runner) -> Result<OracleReport> {
    let full_rouge = {
        let base = runner.baseline()?.to_vec();
        runner.score(None, &base)?.quality.rouge_l
    };
    let result = runner.evaluate(None, &ExitPolicy::Oracle)?;
    let last = runner.weights.num_layers();
    let mut hist = vec![0usize; last];
    let mut cos = 0.0;
    let mut n = 0usize;
    for r in result.traces.iter().flat_map(|t| &t.tokens) {
        hist[r.exit_layer - 1] += 1;
        cos += r.exit_cosine.unwrap_or(1.0) as f64;
        n += 1;
    }
    let n = n.max(1) as f64;
    Ok(OracleReport {
        mean_exit_layer: hist.iter().enumerate().map(|(i, c)| (i + 1) * c).sum::<usize>() as f64 / n,
        exited_fraction: result.exit_rate,
        mean_cosine: cos / n,
        full_rouge_l: full_rouge,
        rouge_l_delta: result.quality.rouge_l - full_rouge,
        exit_histogram: hist,
        result,
    })
}

pub fn static_depths(runner: &mut Runner) -> Result<Vec<StaticRow>> {
    let refs = runner.corpus.references();
    let ref_len = refs.iter().map(Vec::len).sum::<usize>() as f64 / refs.len().max(1) as f64;
    (1..=runner.weights.num_layers())
        .map(|depth| {
            let result = runner.evaluate(Some(depth as f64), &ExitPolicy::Static { depth })?;
            let length_ratio = result.quality.mean_output_length / ref_len.max(f64::MIN_POSITIVE);
            Ok(StaticRow {
                depth,
                reference_mean_length: ref_len,
                length_ratio,
                degenerate: length_ratio > 1.2,
                result,
            })
        })
        .collect()
}

pub fn cost(runner: &mut Runner, thresholds: &[f64]) -> Result<Vec<CostRow>> {
    let profile = runner.profile;
    let mut rows = Vec::new();
    let base = runner.baseline()?.to_vec();
    let full = runner.score(None, &base)?;
    rows.push(CostRow {
        shares: CostShares::of(&full.cost.counts, &profile),
        result: full,
    });
    for &t in thresholds {
        let result = runner.evaluate(Some(t), &ExitPolicy::Conventional { threshold: t as f32 })?;
        rows.push(CostRow {
            shares: CostShares::of(&result.cost.counts, &profile),
            result,
        });
    }
    Ok(rows)
}

pub fn spd_vs_sc(runner: &mut Runner, thresholds: &[f64]) -> Result<Vec<SpdScRow>> {
    thresholds
        .iter()
        .map(|&t| {
            let spd = runner.evaluate(Some(t), &ExitPolicy::shallow_deep(t as f32))?;
            let sc = runner.evaluate(
                Some(t),
                &ExitPolicy::ShallowDeep {
                    threshold: t as f32,
                    fill: DeepKvFill::StateCopy,
                },
            )?;
            Ok(SpdScRow { lambda: t, spd, sc })
        })
        .collect()
}

pub fn shallow_depths(runner: &mut Runner, config: &ExperimentConfig) -> Result<Vec<ShallowDepthRow>> {
    let weights = runner.weights;
    (1..weights.num_layers())
        .map(|d| {
            let w = weights
                .with_shallow_depth(d)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            let mut sub = Runner::new(&w, runner.corpus, runner.max_new, 1)?;
            let report = adaptive(&mut sub, &config.estimator)?;
            Ok(ShallowDepthRow {
                shallow_depth: d,
                final_lambda: report.final_lambda,
                result: report.result,
            })
        })
        .collect()
}

pub fn calibration_sizes(runner: &mut Runner, config: &ExperimentConfig) -> Result<Vec<CalibrationSizeRow>> {
    CALIBRATION_FRACTIONS
        .iter()
        .map(|&f| {
            let settings = crate::config::EstimatorConfig {
                warmup_fraction: f,
                ..config.estimator
            };
            let report = adaptive(runner, &settings)?;
            Ok(CalibrationSizeRow {
                warmup_fraction: f,
                warmup_sentences: report.warmup_sentences,
                samples_used: report.samples_used,
                final_lambda: report.final_lambda,
                result: report.result,
            })
        })
        .collect()
}

pub fn analyze(runner: &mut Runner, config: &ExperimentConfig, names: &[String]) -> Result<AnalysisReport> {
    let mut report = AnalysisReport::default();
    for name in names {
        log::info!("running {name} analysis");
        match name.as_str() {
            "oracle" => report.oracle = Some(oracle(runner)?),
            "static" => report.static_depth = Some(static_depths(runner)?),
            "cost" => report.cost = Some(cost(runner, &config.analysis_thresholds)?),
            "spd_vs_sc" => report.spd_vs_sc = Some(spd_vs_sc(runner, &config.analysis_thresholds)?),
            "shallow_depth" => report.shallow_depth = Some(shallow_depths(runner, config)?),
            "calibration_size" => report.calibration_size = Some(calibration_sizes(runner, config)?),
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown analysis {other}; expected one of {}",
                    ANALYSES.join(", ")
                )))
            }
        }
    }
    Ok(report)
}

pub fn run_analysis(config: &ExperimentConfig) -> Result<AnalysisReport> {
    config.validate()?;
    let weights = config.build_weights()?;
    let corpus = config.build_corpus(&weights)?;
    let mut runner = Runner::new(&weights, &corpus, config.max_new, decode_threads(config.threads)?)?;
    analyze(&mut runner, config, &config.analyses())
}
