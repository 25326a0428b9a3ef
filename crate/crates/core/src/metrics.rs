//! Quality and cost measurement over decoded token sequences and traces.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{DecodeTrace, OpCounts};
use crate::model::{KvCache, Weights};
use crate::tensor::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Longest common subsequence length, O(|a|·|b|) time, O(|b|) space.
pub fn lcs_length(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level ROUGE-L F1 over token ids.
pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricsError::Input("empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_length(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either input has zero norm; `value` is then 0.
    pub zero_norm: bool,
}

pub fn cosine(u: &[f32], v: &[f32]) -> Result<Cosine> {
    if u.len() != v.len() {
        return Err(MetricsError::Dimension(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut uv, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            zero_norm: true,
        });
    }
    Ok(Cosine {
        value: (uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0),
        zero_norm: false,
    })
}

/// Fraction of aligned positions with equal tokens, over the longer length.
/// Two empty sequences agree fully.
pub fn token_agreement(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// Mean ROUGE-L F1 against the references.
    pub rouge_l: f64,
    /// Fraction of outputs identical to the full-model output.
    pub exact_match: f64,
    /// Position-level agreement with the full-model outputs, pooled over the
    /// corpus.
    pub token_agreement: f64,
    pub mean_output_length: f64,
}

/// Scores `outputs` against `references` (ROUGE-L) and against the
/// full-model `baseline` outputs (exact match, agreement).
pub fn quality_report(
    outputs: &[Vec<u32>],
    references: &[Vec<u32>],
    baseline: &[Vec<u32>],
) -> Result<QualityReport> {
    let n = outputs.len();
    if references.len() != n || baseline.len() != n {
        return Err(MetricsError::Input(format!(
            "{n} outputs, {} references, {} baseline outputs",
            references.len(),
            baseline.len()
        )));
    }
    if n == 0 {
        return Err(MetricsError::Input("no outputs to score".into()));
    }
    let mut rouge = 0.0;
    let mut exact = 0usize;
    let mut matched = 0usize;
    let mut aligned = 0usize;
    let mut length = 0usize;
    for ((out, reference), base) in outputs.iter().zip(references).zip(baseline) {
        rouge += rouge_l(out, reference)?;
        exact += usize::from(out == base);
        matched += out.iter().zip(base).filter(|(x, y)| x == y).count();
        aligned += out.len().max(base.len());
        length += out.len();
    }
    Ok(QualityReport {
        rouge_l: rouge / n as f64,
        exact_match: exact as f64 / n as f64,
        token_agreement: if aligned == 0 {
            1.0
        } else {
            matched as f64 / aligned as f64
        },
        mean_output_length: length as f64 / n as f64,
    })
}

/// Relative cost of one unit of each op kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostProfile {
    pub sa: f64,
    pub ca: f64,
    pub ffn: f64,
    pub lm_head: f64,
    pub kv_copy: f64,
}

impl CostProfile {
    /// Fixed weights: SA 1, CA 1, FFN 2, lm_head V/d_model, kv_copy 0.5.
    pub fn fixed(vocab_size: usize, d_model: usize) -> Self {
        Self {
            sa: 1.0,
            ca: 1.0,
            ffn: 2.0,
            lm_head: vocab_size as f64 / d_model as f64,
            kv_copy: 0.5,
        }
    }

    pub fn for_weights(weights: &Weights) -> Self {
        let c = weights.config();
        Self::fixed(c.vocab_size, c.d_model)
    }

    /// Times each op kind on `weights` and expresses it relative to one
    /// self-attention layer call. Not deterministic.
    pub fn measure(weights: &Weights, reps: usize) -> Self {
        let reps = reps.max(1);
        let cfg = weights.config();
        let prompt: Vec<u32> = (0..8u32).map(|t| t % cfg.vocab_size as u32).collect();
        let time = |f: &mut dyn FnMut()| {
            let start = Instant::now();
            for _ in 0..reps {
                f();
            }
            start.elapsed().as_secs_f64() / reps as f64
        };
        let h = weights.embed_rows(&prompt[..1], 0).expect("toy embed");
        let memory = cfg
            .use_cross_attention
            .then(|| weights.encode_memory(&prompt).expect("toy memory"));
        let mut layer = || {
            let mut cache = KvCache::new(cfg.num_layers, cfg.d_model);
            if let Some(m) = &memory {
                cache.set_memory(m.clone());
            }
            weights.forward_layer(1, &h, &mut cache, &[0]).expect("toy layer");
        };
        let layer_time = time(&mut layer).max(1e-12);
        let mut head = || {
            weights.lm_head(h.row(0)).expect("toy head");
        };
        let head_time = time(&mut head);
        let mut copy = || {
            let mut cache = KvCache::new(cfg.num_layers, cfg.d_model);
            let hm = Matrix::from_rows(&[h.row(0).to_vec()]).expect("row");
            weights.forward_layer(1, &hm, &mut cache, &[0]).expect("toy layer");
            weights.state_copy(&mut cache, 0, 1, h.row(0)).expect("toy copy");
        };
        let copy_time = ((time(&mut copy) - layer_time) / (cfg.num_layers - 1).max(1) as f64).max(0.0);
        // One layer call covers SA + (CA) + FFN; split it by the fixed ratios.
        let fixed = Self::for_weights(weights);
        let parts = fixed.sa + fixed.ffn + if cfg.use_cross_attention { fixed.ca } else { 0.0 };
        let unit = layer_time / parts;
        Self {
            sa: 1.0,
            ca: 1.0,
            ffn: fixed.ffn,
            lm_head: head_time / unit,
            kv_copy: copy_time / unit,
        }
    }

    pub fn weigh(&self, ops: &OpCounts) -> f64 {
        ops.sa as f64 * self.sa
            + ops.ca as f64 * self.ca
            + ops.ffn as f64 * self.ffn
            + ops.lm_head as f64 * self.lm_head
            + ops.kv_copy as f64 * self.kv_copy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub policy: String,
    /// Per-token decode ops summed over the traces (prefill excluded).
    pub counts: OpCounts,
    pub prefill: OpCounts,
    pub weighted_cost: f64,
    /// `weighted_cost` divided by the baseline traces' weighted cost.
    pub normalized_cost: f64,
    /// Sequential invocations summed over the traces.
    pub sequential: OpCounts,
    /// Weighted sequential invocations relative to the baseline's.
    pub normalized_latency: f64,
    /// Informational only.
    pub wall_ns: u64,
}

fn single_policy(traces: &[DecodeTrace]) -> Result<&str> {
    let first = traces
        .first()
        .ok_or_else(|| MetricsError::Input("no traces".into()))?;
    if let Some(other) = traces.iter().find(|t| t.policy != first.policy) {
        return Err(MetricsError::Input(format!(
            "mixed policies {} and {}",
            first.policy, other.policy
        )));
    }
    Ok(&first.policy)
}

/// Sums op counts of one policy's traces and normalizes the weighted cost by
/// the baseline traces decoded on the same corpus.
pub fn cost_breakdown(
    traces: &[DecodeTrace],
    baseline: &[DecodeTrace],
    profile: &CostProfile,
) -> Result<CostReport> {
    let policy = single_policy(traces)?.to_string();
    single_policy(baseline)?;
    if traces.len() != baseline.len() {
        return Err(MetricsError::Input(format!(
            "{} traces against {} baseline traces",
            traces.len(),
            baseline.len()
        )));
    }
    let counts: OpCounts = traces.iter().map(DecodeTrace::total_ops).sum();
    let base: OpCounts = baseline.iter().map(DecodeTrace::total_ops).sum();
    let weighted_cost = profile.weigh(&counts);
    let base_cost = profile.weigh(&base);
    let sequential: OpCounts = traces.iter().map(|t| t.sequential_ops).sum();
    let base_latency = profile.weigh(&baseline.iter().map(|t| t.sequential_ops).sum());
    if base_cost <= 0.0 || base_latency <= 0.0 {
        return Err(MetricsError::Input("baseline has zero cost".into()));
    }
    Ok(CostReport {
        policy,
        counts,
        prefill: traces.iter().map(|t| t.prefill_ops).sum(),
        weighted_cost,
        normalized_cost: weighted_cost / base_cost,
        normalized_latency: profile.weigh(&sequential) / base_latency,
        sequential,
        wall_ns: traces.iter().map(DecodeTrace::wall_ns).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Longest common subsequence by enumerating every subsequence of `a`.
    fn brute_lcs(a: &[u32], b: &[u32]) -> usize {
        let is_subseq = |s: &[u32]| {
            let mut it = b.iter();
            s.iter().all(|x| it.any(|y| y == x))
        };
        (0u32..1 << a.len())
            .filter_map(|mask| {
                let s: Vec<u32> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
                is_subseq(&s).then_some(s.len())
            })
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn lcs_cases() {
        assert_eq!(lcs_length(&[4, 5, 6], &[4, 5, 6]), 3);
        assert_eq!(lcs_length(&[1, 2], &[3, 4]), 0);
        assert_eq!(lcs_length(&[1, 3, 2, 4], &[1, 2, 3, 4]), 3);
        assert_eq!(brute_lcs(&[1, 3, 2, 4], &[1, 2, 3, 4]), 3);
        assert_eq!(lcs_length(&[], &[1]), 0);
    }

    #[test]
    fn lcs_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a: Vec<u32> = (0..rng.random_range(0..9)).map(|_| rng.random_range(0..4)).collect();
            let b: Vec<u32> = (0..rng.random_range(0..9)).map(|_| rng.random_range(0..4)).collect();
            assert_eq!(lcs_length(&a, &b), brute_lcs(&a, &b));
        }
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[1, 2], &[3, 4]).unwrap(), 0.0);
        // LCS 2, P = 2/3, R = 1.
        assert_eq!(rouge_l(&[1, 2, 3], &[1, 3]).unwrap(), 0.8);
        assert_eq!(rouge_l(&[], &[1]).unwrap(), 0.0);
        assert!(rouge_l(&[1], &[]).is_err());
    }

    #[test]
    fn cosine_cases() {
        let u = [0.3f32, -1.2, 2.0];
        assert!((cosine(&u, &u).unwrap().value - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        let z = cosine(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert!(z.zero_norm);
        assert_eq!(z.value, 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let u: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut dot = 0.0f32;
            let mut nu = 0.0f32;
            let mut nv = 0.0f32;
            for i in 0..16 {
                dot += u[i] * v[i];
                nu += u[i] * u[i];
                nv += v[i] * v[i];
            }
            let oracle = dot / (nu.sqrt() * nv.sqrt());
            assert!((cosine(&u, &v).unwrap().value - oracle as f64).abs() <= 1e-6);
        }
    }

    #[test]
    fn agreement_and_quality() {
        assert_eq!(token_agreement(&[1, 2, 3], &[1, 5, 3, 4]), 0.5);
        assert_eq!(token_agreement(&[], &[]), 1.0);
        let outs = vec![vec![1, 2, 3], vec![4]];
        let refs = vec![vec![1, 2, 3], vec![5]];
        let base = vec![vec![1, 2, 3], vec![4, 6]];
        let q = quality_report(&outs, &refs, &base).unwrap();
        assert_eq!(q.rouge_l, 0.5);
        assert_eq!(q.exact_match, 0.5);
        assert_eq!(q.token_agreement, 4.0 / 5.0);
        assert_eq!(q.mean_output_length, 2.0);
        assert!(quality_report(&outs, &refs[..1], &base).is_err());
    }

    fn trace(policy: &str, sa: u64, lm_head: u64) -> DecodeTrace {
        DecodeTrace {
            policy: policy.into(),
            tokens: vec![crate::engine::TokenRecord {
                token: 0,
                position: 0,
                exit_layer: 1,
                confidence: 1.0,
                shallow_argmax: None,
                deep_argmax: None,
                exit_cosine: None,
                ops: OpCounts {
                    sa,
                    ffn: sa,
                    lm_head,
                    ..Default::default()
                },
                wall_ns: 0,
            }],
            flush_sizes: vec![],
            final_flush: false,
            prefill_ops: OpCounts::default(),
            sequential_ops: OpCounts {
                sa,
                ffn: sa,
                lm_head,
                ..Default::default()
            },
            state_copied_entries: 0,
            stop: crate::engine::StopReason::MaxNew,
        }
    }

    #[test]
    fn cost_normalization() {
        let p = CostProfile::fixed(64, 32);
        let full = vec![trace("full", 8, 1), trace("full", 8, 1)];
        let r = cost_breakdown(&full, &full, &p).unwrap();
        assert_eq!(r.normalized_cost, 1.0);
        assert_eq!(r.counts.sa, 16);
        let half = vec![trace("static:4", 4, 1), trace("static:4", 4, 1)];
        let r = cost_breakdown(&half, &full, &p).unwrap();
        assert_eq!(r.weighted_cost, 2.0 * (4.0 + 8.0 + 2.0));
        assert_eq!(r.normalized_cost, 28.0 / 52.0);
        assert_eq!(r.normalized_latency, 28.0 / 52.0);
        let mixed = vec![trace("full", 8, 1), trace("static:4", 4, 1)];
        assert!(cost_breakdown(&mixed, &full, &p).is_err());
        assert!(cost_breakdown(&half[..1], &full, &p).is_err());
    }

    proptest! {
        #[test]
        fn rouge_symmetric_and_bounded(
            a in proptest::collection::vec(0u32..5, 1..12),
            b in proptest::collection::vec(0u32..5, 1..12),
        ) {
            let ab = rouge_l(&a, &b).unwrap();
            let ba = rouge_l(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
        }
    }
}
