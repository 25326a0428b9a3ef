use std::io::{BufRead, Write};
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

/// Sublayer and classifier invocation counts, one unit per position.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Self-attention sublayers.
    pub sa: u64,
    /// Cross-attention sublayers.
    pub ca: u64,
    /// Feed-forward sublayers.
    pub ffn: u64,
    /// Classifier (softmax over the vocabulary) evaluations.
    pub lm_head: u64,
    /// Key/value projections computed from a copied hidden state.
    pub kv_copy: u64,
}

impl Add for OpCounts {
    type Output = OpCounts;
    fn add(self, o: OpCounts) -> OpCounts {
        OpCounts {
            sa: self.sa + o.sa,
            ca: self.ca + o.ca,
            ffn: self.ffn + o.ffn,
            lm_head: self.lm_head + o.lm_head,
            kv_copy: self.kv_copy + o.kv_copy,
        }
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, o: OpCounts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for OpCounts {
    fn sum<I: Iterator<Item = OpCounts>>(iter: I) -> OpCounts {
        iter.fold(OpCounts::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token: u32,
    /// Decoder position whose hidden state produced this token.
    pub position: usize,
    pub exit_layer: usize,
    /// Confidence at the exit point (at the shallow exit for shallow-deep).
    pub confidence: f32,
    /// Prediction at the shallow exit (shallow-deep only).
    pub shallow_argmax: Option<u32>,
    /// Prediction at the last layer, present iff the position went through
    /// the deep layers.
    pub deep_argmax: Option<u32>,
    /// Cosine between the exit-layer and final-layer hidden states (oracle).
    pub exit_cosine: Option<f32>,
    pub ops: OpCounts,
    pub wall_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxNew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    /// Policy label including its parameter, e.g. `shallow_deep:0.5`.
    pub policy: String,
    pub tokens: Vec<TokenRecord>,
    /// Sizes of each deep flush, in order (shallow-deep only).
    pub flush_sizes: Vec<usize>,
    /// Whether the last entry of `flush_sizes` is an end-of-sentence
    /// calibration flush rather than one triggered by a non-exiting token.
    pub final_flush: bool,
    /// Ops spent on the prompt before the first generated token.
    pub prefill_ops: OpCounts,
    /// Decode ops with each batched call counted once, i.e. the number of
    /// sequential sublayer and classifier invocations. A latency proxy.
    #[serde(default)]
    pub sequential_ops: OpCounts,
    /// Cache entries tagged state-copied when decoding finished.
    pub state_copied_entries: usize,
    pub stop: StopReason,
}

impl DecodeTrace {
    pub fn token_ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.token).collect()
    }

    /// Summed per-token op counts (prefill excluded).
    pub fn total_ops(&self) -> OpCounts {
        self.tokens.iter().map(|t| t.ops).sum()
    }

    pub fn flushed_positions(&self) -> usize {
        self.flush_sizes.iter().sum()
    }

    pub fn wall_ns(&self) -> u64 {
        self.tokens.iter().map(|t| t.wall_ns).sum()
    }
}

/// Writes one trace as a single JSON line.
pub fn emit_trace<W: Write>(trace: &DecodeTrace, mut sink: W) -> std::io::Result<()> {
    serde_json::to_writer(&mut sink, trace)?;
    sink.write_all(b"\n")
}

/// Reads traces written by [`emit_trace`], one per line.
pub fn read_traces<R: BufRead>(input: R) -> std::io::Result<Vec<DecodeTrace>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|line| {
            serde_json::from_str(&line?)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
        .collect()
}
