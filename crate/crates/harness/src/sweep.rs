//! Policy sweeps and their CSV tables.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use free_core::engine::{emit_trace, ExitPolicy};

use crate::config::{ExperimentConfig, PolicyGrid, PolicyKind};
use crate::error::{HarnessError, Result};
use crate::runner::{decode_threads, PointResult, Runner};

/// Column order of `sweep.csv`.
pub const SWEEP_COLUMNS: &str = "policy,param,rouge_l,exact_match,token_agreement,mean_length,\
exit_rate,sa,ca,ffn,lm_head,kv_copy,normalized_cost,normalized_latency,state_copied";

/// Column order of `sweep_summary.csv`.
pub const SUMMARY_COLUMNS: &str = "policy,quality_target,lambda,rouge_l,normalized_cost,normalized_latency";

/// Quality targets, in percent of the full model's ROUGE-L.
pub const QUALITY_TARGETS: [u32; 3] = [99, 95, 90];

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub kind: PolicyKind,
    pub point: PointResult,
}

/// Smallest threshold of one policy that keeps ROUGE-L at or above
/// `target`% of the full model's.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub kind: PolicyKind,
    pub target: u32,
    pub lambda: Option<f64>,
    pub rouge_l: Option<f64>,
    pub normalized_cost: Option<f64>,
    pub normalized_latency: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub full: PointResult,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
}

pub fn sweep(runner: &mut Runner, policies: &[PolicyGrid]) -> Result<SweepResult> {
    let base = runner.baseline()?.to_vec();
    let full = runner.score(None, &base)?;
    let mut rows = Vec::new();
    for grid in policies {
        for (param, policy) in grid.points()? {
            log::info!("decoding corpus with {}", policy.label());
            let point = if policy == ExitPolicy::Full {
                full.clone()
            } else {
                runner.evaluate(param, &policy)?
            };
            rows.push(SweepRow {
                kind: grid.kind,
                point,
            });
        }
    }
    let summary = summarize(&rows, full.quality.rouge_l);
    Ok(SweepResult { full, rows, summary })
}

/// Recomputes the quality-target summary from sweep rows.
pub fn summarize(rows: &[SweepRow], full_rouge: f64) -> Vec<SummaryRow> {
    let mut kinds: Vec<PolicyKind> = Vec::new();
    for r in rows {
        if r.kind.is_thresholded() && !kinds.contains(&r.kind) {
            kinds.push(r.kind);
        }
    }
    let mut out = Vec::new();
    for kind in kinds {
        for target in QUALITY_TARGETS {
            let floor = full_rouge * target as f64 / 100.0;
            let best = rows
                .iter()
                .filter(|r| r.kind == kind && r.point.quality.rouge_l >= floor)
                .filter_map(|r| r.point.param.map(|p| (p, r)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            out.push(SummaryRow {
                kind,
                target,
                lambda: best.map(|b| b.0),
                rouge_l: best.map(|b| b.1.point.quality.rouge_l),
                normalized_cost: best.map(|b| b.1.point.cost.normalized_cost),
                normalized_latency: best.map(|b| b.1.point.cost.normalized_latency),
            });
        }
    }
    out
}

fn kind_name(kind: PolicyKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_COLUMNS);
    s.push('\n');
    for r in rows {
        let p = &r.point;
        let c = &p.cost.counts;
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{:.6},{:.6},{}",
            kind_name(r.kind),
            opt(p.param),
            p.quality.rouge_l,
            p.quality.exact_match,
            p.quality.token_agreement,
            p.quality.mean_output_length,
            p.exit_rate,
            c.sa,
            c.ca,
            c.ffn,
            c.lm_head,
            c.kv_copy,
            p.cost.normalized_cost,
            p.cost.normalized_latency,
            p.state_copied,
        );
    }
    s
}

pub fn summary_csv(summary: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_COLUMNS);
    s.push('\n');
    for r in summary {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            kind_name(r.kind),
            r.target,
            opt(r.lambda),
            opt(r.rouge_l),
            opt(r.normalized_cost),
            opt(r.normalized_latency),
        );
    }
    s
}

/// Writes `sweep.csv`, `sweep_summary.csv` and `traces.jsonl` (the full
/// baseline first, then each row's traces, each in corpus order).
pub fn write_sweep(result: &SweepResult, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(HarnessError::io(out_dir))?;
    let write = |name: &str, text: String| {
        let path = out_dir.join(name);
        fs::write(&path, text).map_err(HarnessError::io(path))
    };
    write("sweep.csv", sweep_csv(&result.rows))?;
    write("sweep_summary.csv", summary_csv(&result.summary))?;
    let path = out_dir.join("traces.jsonl");
    let mut out = BufWriter::new(File::create(&path).map_err(HarnessError::io(&path))?);
    for trace in result
        .full
        .traces
        .iter()
        .chain(result.rows.iter().flat_map(|r| &r.point.traces))
    {
        emit_trace(trace, &mut out).map_err(HarnessError::io(&path))?;
    }
    out.flush().map_err(HarnessError::io(&path))
}

pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    let weights = config.build_weights()?;
    let corpus = config.build_corpus(&weights)?;
    let mut runner = Runner::new(&weights, &corpus, config.max_new, decode_threads(config.threads)?)?;
    sweep(&mut runner, &config.policies)
}
