//! The toy transformer: embedding, a stack of pre-norm decoder layers with
//! optional cross-attention, and one classifier shared by every exit point.
//!
//! Positions use fixed sinusoidal absolute encodings added to the token
//! embedding. Layer indices in the public API are 1-based; layer 0 is the
//! embedding output.

mod cache;
mod config;
mod io;
mod kd;

pub use cache::{KvCache, MemoryKv, Provenance};
pub use config::{ConfidenceMeasure, InitScales, ModelConfig};
pub use io::{load_weights, read_weights, save_weights, write_weights, WEIGHT_MAGIC};
pub use kd::{kd_dyna_map, layerwise_mse, KdMapping};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::{
    self, matmul, multi_head_attention, rms_norm, rms_norm_rows, vecmat, Matrix, TensorError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cache gap: layer {layer} has no key/value at position {position}")]
    CacheGap { layer: usize, position: usize },
    #[error("cache overwrite: layer {layer} already holds position {position}")]
    CacheOverwrite { layer: usize, position: usize },
    #[error("cross-attention enabled but no encoder memory is attached")]
    MissingMemory,
    #[error("weight file: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct CrossWeights {
    pub norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub cross: Option<CrossWeights>,
    pub ffn_norm: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Immutable model parameters. Shareable across concurrent decode sessions.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    config: ModelConfig,
    embedding: Matrix,
    layers: Vec<LayerWeights>,
    final_norm: Matrix,
    /// `None` when tied to the embedding.
    classifier: Option<Matrix>,
}

/// Draws every parameter from ChaCha8 streams keyed by `(seed, tensor name)`.
///
/// Tensors are N(0, 1) scaled by `1/sqrt(d_model)` times the relevant
/// [`InitScales`] multiplier; norm gains start at one. Because each tensor has
/// its own stream, changing `shallow_depth`, the exit set or the cross-attention
/// flag never perturbs the shared tensors.
pub fn init_weights(config: &ModelConfig) -> Result<Weights> {
    config.validate()?;
    let d = config.d_model;
    let base = 1.0 / (d as f32).sqrt();
    let s = config.init;
    let gen = |name: &str, rows: usize, cols: usize, scale: f32| -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ fnv1a(name.as_bytes()));
        let data = (0..rows * cols)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Matrix::from_vec(rows, cols, data).expect("sized by construction")
    };
    let ones = || Matrix::from_vec(1, d, vec![1.0; d]).expect("sized by construction");

    let embedding = gen("embedding", config.vocab_size, d, base * s.embedding);
    let layers = (1..=config.num_layers)
        .map(|l| {
            let p = |n: &str| format!("layers.{l}.{n}");
            let cross = config.use_cross_attention.then(|| CrossWeights {
                norm: ones(),
                wq: gen(&p("cross.wq"), d, d, base),
                wk: gen(&p("cross.wk"), d, d, base),
                wv: gen(&p("cross.wv"), d, d, base),
                wo: gen(&p("cross.wo"), d, d, base * s.residual),
            });
            LayerWeights {
                attn_norm: ones(),
                wq: gen(&p("wq"), d, d, base),
                wk: gen(&p("wk"), d, d, base),
                wv: gen(&p("wv"), d, d, base),
                wo: gen(&p("wo"), d, d, base * s.residual),
                cross,
                ffn_norm: ones(),
                w1: gen(&p("w1"), d, config.d_ff, base),
                w2: gen(&p("w2"), config.d_ff, d, base * s.residual),
            }
        })
        .collect();
    let classifier = (!config.tie_classifier_to_embedding)
        .then(|| gen("classifier", d, config.vocab_size, base * s.logits));
    Ok(Weights {
        config: config.clone(),
        embedding,
        layers,
        final_norm: ones(),
        classifier,
    })
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Sinusoidal absolute position encoding.
pub fn position_encoding(position: usize, d_model: usize) -> Vec<f32> {
    (0..d_model)
        .map(|i| {
            let pair = (i / 2) as f32;
            let angle = position as f32 / 10000f32.powf(2.0 * pair / d_model as f32);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl Weights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn layer(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer - 1]
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    /// The classifier matrix (`d_model x V`), or `None` when tied.
    pub fn classifier(&self) -> Option<&Matrix> {
        self.classifier.as_ref()
    }

    /// Mutable access to the shared classifier storage (untied models only).
    pub fn classifier_mut(&mut self) -> Option<&mut Matrix> {
        self.classifier.as_mut()
    }

    pub fn final_norm(&self) -> &[f32] {
        self.final_norm.data()
    }

    /// Returns a copy with a different shallow depth; parameters are shared
    /// across depths so nothing else changes.
    pub fn with_shallow_depth(&self, shallow_depth: usize) -> Result<Weights> {
        let mut config = self.config.clone();
        config.shallow_depth = shallow_depth;
        config.validate()?;
        Ok(Weights {
            config,
            ..self.clone()
        })
    }

    /// Returns a copy with a different exit set.
    pub fn with_exit_layers(&self, layers: Vec<usize>) -> Result<Weights> {
        let mut config = self.config.clone();
        config.allowed_exit_layers = layers;
        config.validate()?;
        Ok(Weights {
            config,
            ..self.clone()
        })
    }

    /// Named tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, lw) in self.layers.iter().enumerate() {
            let l = i + 1;
            let mut push = |n: &str, m| out.push((format!("layers.{l}.{n}"), m));
            push("attn_norm", &lw.attn_norm);
            push("wq", &lw.wq);
            push("wk", &lw.wk);
            push("wv", &lw.wv);
            push("wo", &lw.wo);
            if let Some(c) = &lw.cross {
                push("cross.norm", &c.norm);
                push("cross.wq", &c.wq);
                push("cross.wk", &c.wk);
                push("cross.wv", &c.wv);
                push("cross.wo", &c.wo);
            }
            push("ffn_norm", &lw.ffn_norm);
            push("w1", &lw.w1);
            push("w2", &lw.w2);
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(c) = &self.classifier {
            out.push(("classifier".to_string(), c));
        }
        out
    }

    /// FNV-1a digest over every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (name, m) in self.tensors() {
            bytes.extend_from_slice(name.as_bytes());
            for x in m.data() {
                bytes.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    pub fn embed(&self, token: u32, position: usize) -> Result<Vec<f32>> {
        let t = token as usize;
        if t >= self.config.vocab_size {
            return Err(ModelError::Dimension(format!(
                "token {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let pe = position_encoding(position, self.config.d_model);
        Ok(self
            .embedding
            .row(t)
            .iter()
            .zip(&pe)
            .map(|(e, p)| e + p)
            .collect())
    }

    /// Embeds `tokens` at consecutive positions starting from `start`.
    pub fn embed_rows(&self, tokens: &[u32], start: usize) -> Result<Matrix> {
        let rows = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| self.embed(t, start + i))
            .collect::<Result<Vec<_>>>()?;
        let mut m = Matrix::zeros(0, self.config.d_model);
        for r in &rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    /// Runs decoder layer `layer` over a batch of consecutive positions.
    ///
    /// Every position below the batch must already have K/V at this layer,
    /// and every batch position must have K/V at the layer below. Each batch
    /// row attends causally to the cached prefix and to the earlier rows of
    /// the batch. The batch's K/V are appended to the cache.
    pub fn forward_layer(
        &self,
        layer: usize,
        h_in: &Matrix,
        cache: &mut KvCache,
        positions: &[usize],
    ) -> Result<Matrix> {
        let d = self.config.d_model;
        if layer == 0 || layer > self.config.num_layers {
            return Err(ModelError::Dimension(format!("no layer {layer}")));
        }
        if positions.is_empty() || h_in.rows() != positions.len() || h_in.cols() != d {
            return Err(ModelError::Dimension(format!(
                "{}x{} hidden batch for {} positions",
                h_in.rows(),
                h_in.cols(),
                positions.len()
            )));
        }
        let start = positions[0];
        if positions.iter().enumerate().any(|(i, &p)| p != start + i) {
            return Err(ModelError::Dimension(
                "batch positions must be consecutive".into(),
            ));
        }
        if start + positions.len() > self.config.max_positions {
            return Err(ModelError::Dimension(format!(
                "position {} beyond max_positions {}",
                start + positions.len() - 1,
                self.config.max_positions
            )));
        }
        cache.check_append(layer, start, positions.len())?;
        let lw = self.layer(layer);

        let a = rms_norm_rows(h_in, lw.attn_norm.data())?;
        let keys = matmul(&a, &lw.wk)?;
        let values = matmul(&a, &lw.wv)?;
        let queries = matmul(&a, &lw.wq)?;
        cache.append(layer, &keys, &values, Provenance::Computed)?;
        let mask: Vec<usize> = positions.iter().map(|p| p + 1).collect();
        let attn = multi_head_attention(
            &queries,
            cache.keys(layer),
            cache.values(layer),
            &mask,
            self.config.n_heads,
        )?;
        let mut x = h_in.clone();
        x.add_assign(&matmul(&attn, &lw.wo)?)?;

        if let Some(cross) = &lw.cross {
            let mem = cache.memory(layer).ok_or(ModelError::MissingMemory)?;
            self.cross_attend(&mut x, cross, mem)?;
        }
        self.feed_forward(&mut x, lw)?;
        Ok(x)
    }

    fn cross_attend(&self, x: &mut Matrix, cross: &CrossWeights, mem: &MemoryKv) -> Result<()> {
        let c = rms_norm_rows(x, cross.norm.data())?;
        let q = matmul(&c, &cross.wq)?;
        let mask = vec![mem.keys.rows(); x.rows()];
        let o = multi_head_attention(&q, &mem.keys, &mem.values, &mask, self.config.n_heads)?;
        x.add_assign(&matmul(&o, &cross.wo)?)?;
        Ok(())
    }

    fn feed_forward(&self, x: &mut Matrix, lw: &LayerWeights) -> Result<()> {
        let f = rms_norm_rows(x, lw.ffn_norm.data())?;
        let mut hidden = matmul(&f, &lw.w1)?;
        hidden.map_inplace(|v| v.max(0.0));
        x.add_assign(&matmul(&hidden, &lw.w2)?)?;
        Ok(())
    }

    /// Builds the cross-attention memory by running the self-attention and
    /// feed-forward sublayers of the same stack non-causally over `prompt`.
    pub fn encode_memory(&self, prompt: &[u32]) -> Result<Vec<MemoryKv>> {
        if prompt.is_empty() {
            return Err(ModelError::Dimension("empty encoder input".into()));
        }
        let mut h = self.embed_rows(prompt, 0)?;
        let mask = vec![prompt.len(); prompt.len()];
        for lw in &self.layers {
            let a = rms_norm_rows(&h, lw.attn_norm.data())?;
            let q = matmul(&a, &lw.wq)?;
            let k = matmul(&a, &lw.wk)?;
            let v = matmul(&a, &lw.wv)?;
            let o = multi_head_attention(&q, &k, &v, &mask, self.config.n_heads)?;
            h.add_assign(&matmul(&o, &lw.wo)?)?;
            self.feed_forward(&mut h, lw)?;
        }
        let memory = rms_norm_rows(&h, self.final_norm.data())?;
        self.layers
            .iter()
            .map(|lw| {
                let cross = lw.cross.as_ref().ok_or(ModelError::MissingMemory)?;
                Ok(MemoryKv {
                    keys: matmul(&memory, &cross.wk)?,
                    values: matmul(&memory, &cross.wv)?,
                })
            })
            .collect()
    }

    /// Classifier logits for one hidden state (after the shared final norm).
    pub fn logits(&self, h: &[f32]) -> Result<Vec<f32>> {
        if h.len() != self.config.d_model {
            return Err(ModelError::Dimension(format!(
                "hidden state has {} entries, expected {}",
                h.len(),
                self.config.d_model
            )));
        }
        let hn = rms_norm(h, self.final_norm.data())?;
        match &self.classifier {
            Some(w) => Ok(vecmat(&hn, w)?),
            None => Ok((0..self.config.vocab_size)
                .map(|v| tensor::dot(self.embedding.row(v), &hn))
                .collect()),
        }
    }

    /// Next-token distribution from a hidden state of any layer. Every exit
    /// point goes through this one classifier.
    pub fn lm_head(&self, h: &[f32]) -> Result<Vec<f32>> {
        Ok(tensor::softmax_row(&self.logits(h)?)?)
    }

    /// Approximates K/V at layers `from_layer+1..=L` for `position` by
    /// feeding the exited hidden state `h` to each deeper layer's key and
    /// value projections. Returns the number of entries written.
    pub fn state_copy(
        &self,
        cache: &mut KvCache,
        position: usize,
        from_layer: usize,
        h: &[f32],
    ) -> Result<usize> {
        let l = self.config.num_layers;
        if from_layer == 0 || from_layer > l {
            return Err(ModelError::Dimension(format!("no layer {from_layer}")));
        }
        for layer in from_layer + 1..=l {
            if cache.len(layer) > position {
                return Err(ModelError::CacheOverwrite { layer, position });
            }
        }
        let h = Matrix::from_vec(1, h.len(), h.to_vec())?;
        for layer in from_layer + 1..=l {
            let lw = self.layer(layer);
            let a = rms_norm_rows(&h, lw.attn_norm.data())?;
            let k = matmul(&a, &lw.wk)?;
            let v = matmul(&a, &lw.wv)?;
            cache.check_append(layer, position, 1)?;
            cache.append(layer, &k, &v, Provenance::StateCopied)?;
        }
        Ok(l - from_layer)
    }
}

/// Confidence of a probability vector under `measure`.
pub fn confidence(probs: &[f32], measure: ConfidenceMeasure) -> f32 {
    let mut top1 = 0.0f32;
    let mut top2 = 0.0f32;
    for &p in probs {
        if p > top1 {
            top2 = top1;
            top1 = p;
        } else if p > top2 {
            top2 = p;
        }
    }
    let c = match measure {
        ConfidenceMeasure::MaxProb => top1,
        ConfidenceMeasure::TopGap => top1 - top2,
    };
    c.clamp(0.0, 1.0)
}
