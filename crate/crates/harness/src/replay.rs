//! Offline replays over recorded traces.
//!
//! [`shallow_deep_ops`] re-derives shallow-deep op counts from a sequence of
//! shallow confidences without running the model, and [`recompute_row`]
//! rebuilds a sweep row's figures from its traces alone.

use free_core::engine::{DecodeTrace, OpCounts};
use free_core::metrics::{cost_breakdown, quality_report, CostProfile, CostReport, QualityReport};

use crate::error::{HarnessError, Result};

/// Op counts and flush sizes of a simulated shallow-deep run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShallowDeepReplay {
    pub ops: OpCounts,
    pub flush_sizes: Vec<usize>,
}

/// Replays the exit decisions for `confidences` at `threshold`.
///
/// Each position runs the shallow layers and the shallow classifier. A
/// position below the threshold flushes every pending position plus itself
/// through the deep layers; positions still pending at the end are never
/// flushed. With `cross_attention`, cross-attention runs wherever
/// self-attention does.
pub fn shallow_deep_ops(
    confidences: &[f32],
    threshold: f32,
    num_layers: usize,
    shallow_depth: usize,
    cross_attention: bool,
) -> ShallowDeepReplay {
    let mut flush_sizes = Vec::new();
    let mut pending = 0;
    for &c in confidences {
        if c >= threshold {
            pending += 1;
        } else {
            flush_sizes.push(pending + 1);
            pending = 0;
        }
    }
    let n = confidences.len() as u64;
    let f: u64 = flush_sizes.iter().sum::<usize>() as u64;
    let sa = n * shallow_depth as u64 + f * (num_layers - shallow_depth) as u64;
    ShallowDeepReplay {
        ops: OpCounts {
            sa,
            ca: if cross_attention { sa } else { 0 },
            ffn: sa,
            lm_head: n + f,
            kv_copy: 0,
        },
        flush_sizes,
    }
}

/// Quality and cost of one policy point, computed from traces only.
#[derive(Debug, Clone, PartialEq)]
pub struct RecomputedRow {
    pub quality: QualityReport,
    pub cost: CostReport,
    pub exit_rate: f64,
    pub state_copied: usize,
}

/// Rebuilds a sweep row from its traces, the full baseline's traces and the
/// corpus references.
pub fn recompute_row(
    traces: &[DecodeTrace],
    baseline: &[DecodeTrace],
    references: &[Vec<u32>],
    profile: &CostProfile,
    num_layers: usize,
) -> Result<RecomputedRow> {
    let data = |e: free_core::metrics::MetricsError| HarnessError::Data(e.to_string());
    let tokens: Vec<Vec<u32>> = traces.iter().map(DecodeTrace::token_ids).collect();
    let base: Vec<Vec<u32>> = baseline.iter().map(DecodeTrace::token_ids).collect();
    let quality = quality_report(&tokens, references, &base).map_err(data)?;
    let cost = cost_breakdown(traces, baseline, profile).map_err(data)?;
    let records = traces.iter().flat_map(|t| &t.tokens);
    let total = records.clone().count();
    let exited = records.filter(|r| r.exit_layer < num_layers).count();
    Ok(RecomputedRow {
        quality,
        cost,
        exit_rate: exited as f64 / total.max(1) as f64,
        state_copied: traces.iter().map(|t| t.state_copied_entries).sum(),
    })
}
