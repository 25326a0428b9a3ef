//! Decoding policies over the toy model.
//!
//! All policies share one session machine: the prompt is prefilled, then each
//! step feeds the previously emitted token at the next decoder position and
//! emits one greedy token. In decoder-only mode the prompt minus its last
//! token is prefilled and the last prompt token is the first step's input;
//! with cross-attention the prompt becomes encoder memory and the first input
//! is the BOS token at position 0.
//!
//! The shallow-deep policy checks confidence only at the shallow exit. Exited
//! positions wait in a pending buffer holding their shallow hidden state;
//! the next non-exiting position triggers one batched pass through the deep
//! layers over the buffer plus itself, which fills the deep K/V with genuinely
//! computed entries. Tokens already emitted for buffered positions are never
//! revised; their deep predictions only feed calibration.

mod trace;

pub use trace::{emit_trace, read_traces, DecodeTrace, OpCounts, StopReason, TokenRecord};

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationError, CalibrationSample, ThresholdEstimator};
use crate::metrics::{cosine, MetricsError};
use crate::model::{confidence, KvCache, ModelError, Provenance, Weights};
use crate::tensor::{argmax, Matrix};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("decoding needs {needed} positions but max_positions is {max}")]
    Capacity { needed: usize, max: usize },
    #[error("invalid policy: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, DecodeError>;

/// How deep-layer K/V of exited shallow-deep positions get filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeepKvFill {
    /// Deferred, then computed in a batched deep pass.
    #[default]
    Synchronized,
    /// Approximated immediately by copying the shallow hidden state.
    StateCopy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ExitPolicy {
    Full,
    Static {
        depth: usize,
    },
    /// Exit at the first allowed layer whose confidence reaches `threshold`,
    /// then state-copy the skipped layers.
    Conventional {
        threshold: f32,
    },
    Oracle,
    ShallowDeep {
        threshold: f32,
        #[serde(default)]
        fill: DeepKvFill,
    },
}

impl ExitPolicy {
    pub fn shallow_deep(threshold: f32) -> Self {
        ExitPolicy::ShallowDeep {
            threshold,
            fill: DeepKvFill::Synchronized,
        }
    }

    /// Stable label, e.g. `static:4` or `shallow_deep_sc:0.5`.
    pub fn label(&self) -> String {
        match self {
            ExitPolicy::Full => "full".into(),
            ExitPolicy::Static { depth } => format!("static:{depth}"),
            ExitPolicy::Conventional { threshold } => format!("conventional:{threshold}"),
            ExitPolicy::Oracle => "oracle".into(),
            ExitPolicy::ShallowDeep { threshold, fill } => match fill {
                DeepKvFill::Synchronized => format!("shallow_deep:{threshold}"),
                DeepKvFill::StateCopy => format!("shallow_deep_sc:{threshold}"),
            },
        }
    }

    pub fn validate(&self, weights: &Weights) -> Result<()> {
        let l = weights.num_layers();
        match self {
            ExitPolicy::Static { depth } if *depth < 1 || *depth > l => Err(DecodeError::Config(
                format!("static depth {depth} outside [1, {l}]"),
            )),
            ExitPolicy::Conventional { threshold } | ExitPolicy::ShallowDeep { threshold, .. }
                if threshold.is_nan() || *threshold < 0.0 =>
            {
                Err(DecodeError::Config(format!("threshold {threshold} must be >= 0")))
            }
            ExitPolicy::Conventional { .. } | ExitPolicy::Oracle
                if weights.config().allowed_exit_layers.is_empty() =>
            {
                Err(DecodeError::Config("allowed_exit_layers is empty".into()))
            }
            _ => Ok(()),
        }
    }

    fn prefill_depth(&self, weights: &Weights) -> usize {
        match self {
            ExitPolicy::Static { depth } => *depth,
            _ => weights.num_layers(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub max_new: usize,
    /// Deep-flush any pending positions at the end of the sentence so every
    /// token yields a calibration sample. Does not change emitted tokens.
    pub calibration_flush: bool,
}

impl DecodeOptions {
    pub fn new(max_new: usize) -> Self {
        Self {
            max_new,
            calibration_flush: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub trace: DecodeTrace,
    /// Calibration samples from deep passes (shallow-deep only).
    pub samples: Vec<CalibrationSample>,
}

impl DecodeOutput {
    /// Mean exit/final cosine over tokens that carry one (oracle only).
    pub fn mean_exit_cosine(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .trace
            .tokens
            .iter()
            .filter_map(|t| t.exit_cosine.map(f64::from))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn decode_full(weights: &Weights, prompt: &[u32], max_new: usize) -> Result<DecodeOutput> {
    decode(weights, prompt, &ExitPolicy::Full, DecodeOptions::new(max_new))
}

pub fn decode_static(
    weights: &Weights,
    prompt: &[u32],
    depth: usize,
    max_new: usize,
) -> Result<DecodeOutput> {
    decode(weights, prompt, &ExitPolicy::Static { depth }, DecodeOptions::new(max_new))
}

pub fn decode_conventional(
    weights: &Weights,
    prompt: &[u32],
    threshold: f32,
    max_new: usize,
) -> Result<DecodeOutput> {
    decode(
        weights,
        prompt,
        &ExitPolicy::Conventional { threshold },
        DecodeOptions::new(max_new),
    )
}

pub fn decode_oracle(weights: &Weights, prompt: &[u32], max_new: usize) -> Result<DecodeOutput> {
    decode(weights, prompt, &ExitPolicy::Oracle, DecodeOptions::new(max_new))
}

pub fn decode_shallow_deep(
    weights: &Weights,
    prompt: &[u32],
    threshold: f32,
    max_new: usize,
    calibration_flush: bool,
) -> Result<DecodeOutput> {
    decode(
        weights,
        prompt,
        &ExitPolicy::shallow_deep(threshold),
        DecodeOptions {
            max_new,
            calibration_flush,
        },
    )
}

/// Shallow-deep decoding driven by an estimator: uses its current threshold,
/// and while it is still warming up, flushes at end of sentence and feeds it
/// the sentence's samples.
pub fn decode_with_estimator(
    weights: &Weights,
    prompt: &[u32],
    estimator: &mut ThresholdEstimator,
    max_new: usize,
) -> Result<DecodeOutput> {
    let warming = !estimator.is_frozen();
    let out = decode(
        weights,
        prompt,
        &ExitPolicy::shallow_deep(estimator.threshold() as f32),
        DecodeOptions {
            max_new,
            calibration_flush: warming,
        },
    )?;
    if warming {
        estimator.update(&out.samples)?;
    }
    Ok(out)
}

pub fn decode(
    weights: &Weights,
    prompt: &[u32],
    policy: &ExitPolicy,
    options: DecodeOptions,
) -> Result<DecodeOutput> {
    decode_with_cache(weights, prompt, policy, options).map(|(out, _)| out)
}

/// Like [`decode`], also returning the session's final KV cache.
pub fn decode_with_cache(
    weights: &Weights,
    prompt: &[u32],
    policy: &ExitPolicy,
    options: DecodeOptions,
) -> Result<(DecodeOutput, KvCache)> {
    policy.validate(weights)?;
    let mut session = Session::start(weights, prompt, policy, options)?;
    session.run(policy, options)?;
    Ok(session.finish(policy))
}

struct Pending {
    position: usize,
    hidden: Vec<f32>,
    shallow_argmax: u32,
    confidence: f32,
}

struct Session<'w> {
    w: &'w Weights,
    cache: KvCache,
    records: Vec<TokenRecord>,
    flush_sizes: Vec<usize>,
    final_flush: bool,
    prefill_ops: OpCounts,
    sequential_ops: OpCounts,
    samples: Vec<CalibrationSample>,
    pending: Vec<Pending>,
    first_position: usize,
    first_input: u32,
    stop: StopReason,
}

impl<'w> Session<'w> {
    fn start(
        w: &'w Weights,
        prompt: &[u32],
        policy: &ExitPolicy,
        options: DecodeOptions,
    ) -> Result<Self> {
        let cfg = w.config();
        if prompt.is_empty() {
            return Err(DecodeError::Input("empty prompt".into()));
        }
        if options.max_new == 0 {
            return Err(DecodeError::Config("max_new must be at least 1".into()));
        }
        if let Some(bad) = prompt.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(DecodeError::Input(format!(
                "token {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let (prefix, first_input) = if cfg.use_cross_attention {
            (&prompt[..0], cfg.bos_token)
        } else {
            (&prompt[..prompt.len() - 1], prompt[prompt.len() - 1])
        };
        let needed = (prefix.len() + options.max_new).max(prompt.len());
        if needed > cfg.max_positions {
            return Err(DecodeError::Capacity {
                needed,
                max: cfg.max_positions,
            });
        }

        let mut session = Session {
            w,
            cache: KvCache::new(cfg.num_layers, cfg.d_model),
            records: Vec::new(),
            flush_sizes: Vec::new(),
            final_flush: false,
            prefill_ops: OpCounts::default(),
            sequential_ops: OpCounts::default(),
            samples: Vec::new(),
            pending: Vec::new(),
            first_position: prefix.len(),
            first_input,
            stop: StopReason::MaxNew,
        };
        if cfg.use_cross_attention {
            session.cache.set_memory(w.encode_memory(prompt)?);
            let n = (prompt.len() * cfg.num_layers) as u64;
            session.prefill_ops += OpCounts {
                sa: n,
                ffn: n,
                ..Default::default()
            };
        }
        if !prefix.is_empty() {
            let positions: Vec<usize> = (0..prefix.len()).collect();
            let h = w.embed_rows(prefix, 0)?;
            let depth = policy.prefill_depth(w);
            session.forward(1, depth, h, &positions)?;
            session.prefill_ops += session.layer_ops(depth, positions.len());
        }
        Ok(session)
    }

    /// Ops for `layers` layers over `positions` positions.
    fn layer_ops(&self, layers: usize, positions: usize) -> OpCounts {
        let n = (layers * positions) as u64;
        OpCounts {
            sa: n,
            ca: if self.w.config().use_cross_attention { n } else { 0 },
            ffn: n,
            ..Default::default()
        }
    }

    /// Runs layers `from..=to` over a batch, layer by layer.
    fn forward(&mut self, from: usize, to: usize, mut h: Matrix, positions: &[usize]) -> Result<Matrix> {
        for layer in from..=to {
            h = self.w.forward_layer(layer, &h, &mut self.cache, positions)?;
        }
        Ok(h)
    }

    fn classify(&self, h: &[f32]) -> Result<(u32, f32)> {
        let probs = self.w.lm_head(h)?;
        Ok((
            argmax(&probs) as u32,
            confidence(&probs, self.w.config().confidence_measure),
        ))
    }

    fn record(&self, token: u32, position: usize, exit_layer: usize, conf: f32, ops: OpCounts) -> TokenRecord {
        TokenRecord {
            token,
            position,
            exit_layer,
            confidence: conf,
            shallow_argmax: None,
            deep_argmax: None,
            exit_cosine: None,
            ops,
            wall_ns: 0,
        }
    }

    fn run(&mut self, policy: &ExitPolicy, options: DecodeOptions) -> Result<()> {
        let eos = self.w.config().eos_token;
        let mut input = self.first_input;
        let mut position = self.first_position;
        loop {
            let started = Instant::now();
            let mut rec = match policy {
                ExitPolicy::Full => self.step_static(input, position, self.w.num_layers())?,
                ExitPolicy::Static { depth } => self.step_static(input, position, *depth)?,
                ExitPolicy::Conventional { threshold } => {
                    self.step_conventional(input, position, *threshold)?
                }
                ExitPolicy::Oracle => self.step_oracle(input, position)?,
                ExitPolicy::ShallowDeep { threshold, fill } => {
                    self.step_shallow_deep(input, position, *threshold, *fill)?
                }
            };
            rec.wall_ns = started.elapsed().as_nanos() as u64;
            if !matches!(policy, ExitPolicy::ShallowDeep { .. }) {
                self.sequential_ops += rec.ops;
            }
            let token = rec.token;
            self.records.push(rec);
            if eos == Some(token) {
                self.stop = StopReason::Eos;
                break;
            }
            if self.records.len() >= options.max_new {
                self.stop = StopReason::MaxNew;
                break;
            }
            input = token;
            position += 1;
        }
        if options.calibration_flush && !self.pending.is_empty() {
            let started = Instant::now();
            self.deep_flush(None)?;
            self.final_flush = true;
            if let Some(last) = self.records.last_mut() {
                last.wall_ns += started.elapsed().as_nanos() as u64;
            }
        }
        Ok(())
    }

    fn embed_one(&self, token: u32, position: usize) -> Result<Matrix> {
        Ok(self.w.embed_rows(&[token], position)?)
    }

    fn step_static(&mut self, input: u32, position: usize, depth: usize) -> Result<TokenRecord> {
        let h = self.embed_one(input, position)?;
        let h = self.forward(1, depth, h, &[position])?;
        let (token, conf) = self.classify(h.row(0))?;
        let mut ops = self.layer_ops(depth, 1);
        ops.lm_head = 1;
        Ok(self.record(token, position, depth, conf, ops))
    }

    fn step_conventional(&mut self, input: u32, position: usize, threshold: f32) -> Result<TokenRecord> {
        let exits = self.w.config().exit_points();
        let last = self.w.num_layers();
        let mut h = self.embed_one(input, position)?;
        let mut ops = OpCounts::default();
        for layer in 1..=last {
            h = self.forward(layer, layer, h, &[position])?;
            ops += self.layer_ops(1, 1);
            if !exits.contains(&layer) {
                continue;
            }
            let (token, conf) = self.classify(h.row(0))?;
            ops.lm_head += 1;
            if conf >= threshold || layer == last {
                let copied = self.w.state_copy(&mut self.cache, position, layer, h.row(0))?;
                ops.kv_copy += copied as u64;
                return Ok(self.record(token, position, layer, conf, ops));
            }
        }
        unreachable!("the last layer is always an exit point")
    }

    fn step_oracle(&mut self, input: u32, position: usize) -> Result<TokenRecord> {
        let last = self.w.num_layers();
        let mut h = self.embed_one(input, position)?;
        let mut hidden = vec![Vec::new(); last + 1];
        let mut ops = self.layer_ops(last, 1);
        for (layer, slot) in hidden.iter_mut().enumerate().skip(1) {
            h = self.forward(layer, layer, h, &[position])?;
            *slot = h.row(0).to_vec();
        }
        let (target, final_conf) = self.classify(&hidden[last])?;
        ops.lm_head += 1;
        let mut exit = (last, final_conf);
        for layer in self.w.config().exit_points() {
            if layer == last {
                break;
            }
            let (token, conf) = self.classify(&hidden[layer])?;
            ops.lm_head += 1;
            if token == target {
                exit = (layer, conf);
                break;
            }
        }
        let (layer, conf) = exit;
        if layer < last {
            // Emulate exiting: the genuine deeper entries become copies.
            self.cache.truncate_from(layer + 1, position);
            ops.kv_copy += self.w.state_copy(&mut self.cache, position, layer, &hidden[layer])? as u64;
        }
        let mut rec = self.record(target, position, layer, conf, ops);
        rec.exit_cosine = Some(cosine(&hidden[layer], &hidden[last])?.value as f32);
        Ok(rec)
    }

    fn step_shallow_deep(
        &mut self,
        input: u32,
        position: usize,
        threshold: f32,
        fill: DeepKvFill,
    ) -> Result<TokenRecord> {
        let shallow = self.w.config().shallow_depth;
        let last = self.w.num_layers();
        let h = self.embed_one(input, position)?;
        let h = self.forward(1, shallow, h, &[position])?;
        let (shallow_token, conf) = self.classify(h.row(0))?;
        let mut ops = self.layer_ops(shallow, 1);
        ops.lm_head = 1;
        self.sequential_ops += ops;

        if conf >= threshold {
            match fill {
                DeepKvFill::Synchronized => self.pending.push(Pending {
                    position,
                    hidden: h.row(0).to_vec(),
                    shallow_argmax: shallow_token,
                    confidence: conf,
                }),
                DeepKvFill::StateCopy => {
                    let copied = self.w.state_copy(&mut self.cache, position, shallow, h.row(0))?;
                    ops.kv_copy += copied as u64;
                    self.sequential_ops.kv_copy += copied as u64;
                }
            }
            let mut rec = self.record(shallow_token, position, shallow, conf, ops);
            rec.shallow_argmax = Some(shallow_token);
            return Ok(rec);
        }

        let frontier = Pending {
            position,
            hidden: h.row(0).to_vec(),
            shallow_argmax: shallow_token,
            confidence: conf,
        };
        let (deep_token, deep_ops) = self
            .deep_flush(Some(frontier))?
            .expect("frontier row present");
        ops += deep_ops;
        let mut rec = self.record(deep_token, position, last, conf, ops);
        rec.shallow_argmax = Some(shallow_token);
        rec.deep_argmax = Some(deep_token);
        Ok(rec)
    }

    /// One batched pass through the deep layers over the pending buffer and
    /// the optional frontier position. Returns the frontier's deep prediction
    /// and the ops attributable to it.
    fn deep_flush(&mut self, frontier: Option<Pending>) -> Result<Option<(u32, OpCounts)>> {
        let shallow = self.w.config().shallow_depth;
        let last = self.w.num_layers();
        let mut batch = std::mem::take(&mut self.pending);
        let has_frontier = frontier.is_some();
        batch.extend(frontier);
        if batch.is_empty() {
            return Ok(None);
        }
        let positions: Vec<usize> = batch.iter().map(|p| p.position).collect();
        let rows: Vec<Vec<f32>> = batch.iter().map(|p| p.hidden.clone()).collect();
        let h = Matrix::from_rows(&rows).map_err(ModelError::from)?;
        let h = self.forward(shallow + 1, last, h, &positions)?;
        self.flush_sizes.push(batch.len());

        let mut per_row = self.layer_ops(last - shallow, 1);
        per_row.lm_head = 1;
        // The whole batch goes through each deep layer and the classifier once.
        self.sequential_ops += per_row;
        let mut frontier_out = None;
        for (i, p) in batch.iter().enumerate() {
            let (deep_token, _) = self.classify(h.row(i))?;
            self.samples.push(CalibrationSample {
                confidence: p.confidence as f64,
                agree: p.shallow_argmax == deep_token,
            });
            if has_frontier && i == batch.len() - 1 {
                frontier_out = Some((deep_token, per_row));
            } else {
                let rec = &mut self.records[p.position - self.first_position];
                rec.ops += per_row;
                rec.deep_argmax = Some(deep_token);
            }
        }
        Ok(frontier_out)
    }

    fn finish(self, policy: &ExitPolicy) -> (DecodeOutput, KvCache) {
        let trace = DecodeTrace {
            policy: policy.label(),
            tokens: self.records,
            flush_sizes: self.flush_sizes,
            final_flush: self.final_flush,
            prefill_ops: self.prefill_ops,
            sequential_ops: self.sequential_ops,
            state_copied_entries: self.cache.count(Provenance::StateCopied),
            stop: self.stop,
        };
        let out = DecodeOutput {
            tokens: trace.token_ids(),
            trace,
            samples: self.samples,
        };
        (out, self.cache)
    }
}
