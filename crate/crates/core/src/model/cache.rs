//! Per-session key/value cache.
//!
//! Layers are 1-based. Each layer holds keys and values for a contiguous
//! prefix of positions, and a layer never holds a position that the layer
//! below it lacks. Every entry carries a provenance tag recording whether it
//! came from genuine attention computation or from state copying.

use crate::tensor::Matrix;

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Computed,
    StateCopied,
}

#[derive(Debug, Clone)]
struct LayerKv {
    keys: Matrix,
    values: Matrix,
    provenance: Vec<Provenance>,
}

/// Cross-attention keys and values over the encoder memory for one layer.
#[derive(Debug, Clone)]
pub struct MemoryKv {
    pub keys: Matrix,
    pub values: Matrix,
}

#[derive(Debug, Clone)]
pub struct KvCache {
    d_model: usize,
    layers: Vec<LayerKv>,
    memory: Option<Vec<MemoryKv>>,
}

impl KvCache {
    pub fn new(num_layers: usize, d_model: usize) -> Self {
        let layers = (0..num_layers)
            .map(|_| LayerKv {
                keys: Matrix::zeros(0, d_model),
                values: Matrix::zeros(0, d_model),
                provenance: Vec::new(),
            })
            .collect();
        Self {
            d_model,
            layers,
            memory: None,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn layer(&self, layer: usize) -> &LayerKv {
        &self.layers[layer - 1]
    }

    /// Number of positions populated at `layer`.
    pub fn len(&self, layer: usize) -> usize {
        self.layer(layer).provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.first().is_none_or(|l| l.provenance.is_empty())
    }

    /// Highest layer whose K/V at `position` is populated (0 if none).
    pub fn computed_through(&self, position: usize) -> usize {
        self.layers
            .iter()
            .take_while(|l| l.provenance.len() > position)
            .count()
    }

    pub fn keys(&self, layer: usize) -> &Matrix {
        &self.layer(layer).keys
    }

    pub fn values(&self, layer: usize) -> &Matrix {
        &self.layer(layer).values
    }

    pub fn provenance(&self, layer: usize, position: usize) -> Option<Provenance> {
        self.layer(layer).provenance.get(position).copied()
    }

    pub fn count(&self, tag: Provenance) -> usize {
        self.layers
            .iter()
            .map(|l| l.provenance.iter().filter(|&&p| p == tag).count())
            .sum()
    }

    /// Checks that `count` positions starting at `start` may be appended at
    /// `layer`.
    pub fn check_append(&self, layer: usize, start: usize, count: usize) -> Result<(), ModelError> {
        if layer == 0 || layer > self.layers.len() {
            return Err(ModelError::Dimension(format!(
                "layer {layer} outside [1, {}]",
                self.layers.len()
            )));
        }
        let have = self.len(layer);
        if start < have {
            return Err(ModelError::CacheOverwrite {
                layer,
                position: start,
            });
        }
        if start > have {
            return Err(ModelError::CacheGap {
                layer,
                position: have,
            });
        }
        if layer > 1 && self.len(layer - 1) < start + count {
            return Err(ModelError::CacheGap {
                layer: layer - 1,
                position: self.len(layer - 1),
            });
        }
        Ok(())
    }

    /// Appends rows of keys and values at `layer`.
    pub fn append(
        &mut self,
        layer: usize,
        keys: &Matrix,
        values: &Matrix,
        tag: Provenance,
    ) -> Result<(), ModelError> {
        if keys.rows() != values.rows() || keys.cols() != self.d_model || values.cols() != self.d_model {
            return Err(ModelError::Dimension(format!(
                "cannot append {}x{} keys / {}x{} values to width {}",
                keys.rows(),
                keys.cols(),
                values.rows(),
                values.cols(),
                self.d_model
            )));
        }
        let start = self.len(layer);
        self.check_append(layer, start, keys.rows())?;
        let entry = &mut self.layers[layer - 1];
        for r in 0..keys.rows() {
            entry.keys.push_row(keys.row(r))?;
            entry.values.push_row(values.row(r))?;
            entry.provenance.push(tag);
        }
        Ok(())
    }

    /// Drops positions `>= len` at `layer` and every layer above it.
    pub fn truncate_from(&mut self, layer: usize, len: usize) {
        for entry in self.layers.iter_mut().skip(layer - 1) {
            if entry.provenance.len() > len {
                entry.keys.truncate_rows(len);
                entry.values.truncate_rows(len);
                entry.provenance.truncate(len);
            }
        }
    }

    pub fn set_memory(&mut self, memory: Vec<MemoryKv>) {
        self.memory = Some(memory);
    }

    pub fn memory(&self, layer: usize) -> Option<&MemoryKv> {
        self.memory.as_ref().map(|m| &m[layer - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, d: usize, fill: f32) -> Matrix {
        Matrix::from_vec(n, d, vec![fill; n * d]).unwrap()
    }

    #[test]
    fn contiguous_growth_and_watermark() {
        let mut c = KvCache::new(3, 2);
        assert!(c.is_empty());
        c.append(1, &rows(2, 2, 1.0), &rows(2, 2, 1.0), Provenance::Computed).unwrap();
        c.append(2, &rows(1, 2, 1.0), &rows(1, 2, 1.0), Provenance::Computed).unwrap();
        assert_eq!(c.computed_through(0), 2);
        assert_eq!(c.computed_through(1), 1);
        assert_eq!(c.computed_through(2), 0);
    }

    #[test]
    fn gaps_and_overwrites_rejected() {
        let mut c = KvCache::new(2, 2);
        let r = rows(1, 2, 0.0);
        assert!(matches!(
            c.append(2, &r, &r, Provenance::Computed),
            Err(ModelError::CacheGap { layer: 1, .. })
        ));
        c.append(1, &r, &r, Provenance::Computed).unwrap();
        assert!(matches!(c.check_append(1, 0, 1), Err(ModelError::CacheOverwrite { .. })));
        assert!(matches!(c.check_append(1, 2, 1), Err(ModelError::CacheGap { .. })));
    }

    #[test]
    fn truncate_and_count() {
        let mut c = KvCache::new(2, 2);
        let r = rows(2, 2, 0.0);
        c.append(1, &r, &r, Provenance::Computed).unwrap();
        c.append(2, &r, &r, Provenance::StateCopied).unwrap();
        assert_eq!(c.count(Provenance::StateCopied), 2);
        c.truncate_from(2, 1);
        assert_eq!(c.len(1), 2);
        assert_eq!(c.len(2), 1);
        assert_eq!(c.provenance(2, 0), Some(Provenance::StateCopied));
        assert_eq!(c.provenance(2, 1), None);
    }
}
