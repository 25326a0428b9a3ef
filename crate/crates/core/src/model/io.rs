//! Binary weight file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FREEW1"
//! u64 x 16  num_layers shallow_depth d_model n_heads d_ff vocab_size
//!           max_positions use_cross_attention tie_classifier confidence_measure
//!           eos_token (u64::MAX = none) bos_token seed
//!           init.embedding init.residual init.logits (f32 bit patterns)
//! u64       number of allowed exit layers, then one u64 per layer
//! repeated until EOF:
//!   u32 name length, name bytes (UTF-8), u32 rows, u32 cols,
//!   rows*cols f32 values, row-major
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::tensor::Matrix;

use super::{init_weights, ConfidenceMeasure, InitScales, ModelConfig, ModelError, Result, Weights};

pub const WEIGHT_MAGIC: &[u8; 6] = b"FREEW1";

const NO_EOS: u64 = u64::MAX;

pub fn write_weights<W: Write>(weights: &Weights, mut out: W) -> Result<()> {
    let c = weights.config();
    out.write_all(WEIGHT_MAGIC)?;
    let header = [
        c.num_layers as u64,
        c.shallow_depth as u64,
        c.d_model as u64,
        c.n_heads as u64,
        c.d_ff as u64,
        c.vocab_size as u64,
        c.max_positions as u64,
        c.use_cross_attention as u64,
        c.tie_classifier_to_embedding as u64,
        match c.confidence_measure {
            ConfidenceMeasure::MaxProb => 0,
            ConfidenceMeasure::TopGap => 1,
        },
        c.eos_token.map_or(NO_EOS, u64::from),
        c.bos_token as u64,
        c.seed,
        c.init.embedding.to_bits() as u64,
        c.init.residual.to_bits() as u64,
        c.init.logits.to_bits() as u64,
        c.allowed_exit_layers.len() as u64,
    ];
    for v in header
        .into_iter()
        .chain(c.allowed_exit_layers.iter().map(|&l| l as u64))
    {
        out.write_all(&v.to_le_bytes())?;
    }
    for (name, m) in weights.tensors() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(m.rows() as u32).to_le_bytes())?;
        out.write_all(&(m.cols() as u32).to_le_bytes())?;
        for x in m.data() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_weights(weights: &Weights, path: impl AsRef<Path>) -> Result<()> {
    write_weights(weights, BufWriter::new(File::create(path)?))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Weights> {
    read_weights(BufReader::new(File::open(path)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn to_usize(v: u64, field: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| ModelError::Format(format!("{field} value {v} too large")))
}

/// Reads a weight file, checking every tensor's presence and shape against
/// the shapes the header's config implies.
pub fn read_weights<R: Read>(mut input: R) -> Result<Weights> {
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic)?;
    if &magic != WEIGHT_MAGIC {
        return Err(ModelError::Format("bad magic bytes".into()));
    }
    let mut h = [0u64; 17];
    for v in &mut h {
        *v = read_u64(&mut input)?;
    }
    let n_allowed = to_usize(h[16], "exit layer count")?;
    if n_allowed > 1 << 16 {
        return Err(ModelError::Format(format!("{n_allowed} exit layers")));
    }
    let allowed = (0..n_allowed)
        .map(|_| read_u64(&mut input).and_then(|v| to_usize(v, "exit layer")))
        .collect::<Result<Vec<_>>>()?;
    let f32_field = |v: u64, name: &str| -> Result<f32> {
        u32::try_from(v)
            .map(f32::from_bits)
            .map_err(|_| ModelError::Format(format!("{name} is not an f32 bit pattern")))
    };
    let config = ModelConfig {
        num_layers: to_usize(h[0], "num_layers")?,
        shallow_depth: to_usize(h[1], "shallow_depth")?,
        d_model: to_usize(h[2], "d_model")?,
        n_heads: to_usize(h[3], "n_heads")?,
        d_ff: to_usize(h[4], "d_ff")?,
        vocab_size: to_usize(h[5], "vocab_size")?,
        max_positions: to_usize(h[6], "max_positions")?,
        use_cross_attention: h[7] != 0,
        tie_classifier_to_embedding: h[8] != 0,
        confidence_measure: match h[9] {
            0 => ConfidenceMeasure::MaxProb,
            1 => ConfidenceMeasure::TopGap,
            v => return Err(ModelError::Format(format!("unknown confidence measure {v}"))),
        },
        eos_token: if h[10] == NO_EOS {
            None
        } else {
            Some(u32::try_from(h[10]).map_err(|_| ModelError::Format("eos token".into()))?)
        },
        bos_token: u32::try_from(h[11]).map_err(|_| ModelError::Format("bos token".into()))?,
        seed: h[12],
        init: InitScales {
            embedding: f32_field(h[13], "init.embedding")?,
            residual: f32_field(h[14], "init.residual")?,
            logits: f32_field(h[15], "init.logits")?,
        },
        allowed_exit_layers: allowed,
    };
    config.validate()?;

    let mut tensors: HashMap<String, Matrix> = HashMap::new();
    loop {
        let name_len = match read_u32(&mut input) {
            Ok(n) => n as usize,
            Err(ModelError::Io(e)) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        if name_len > 4096 {
            return Err(ModelError::Format(format!("tensor name of {name_len} bytes")));
        }
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| ModelError::Format("tensor name is not UTF-8".into()))?;
        let rows = read_u32(&mut input)? as usize;
        let cols = read_u32(&mut input)? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| ModelError::Format(format!("tensor {name} too large")))?;
        let mut bytes = vec![0u8; n * 4];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if tensors.insert(name.clone(), Matrix::from_vec(rows, cols, data)?).is_some() {
            return Err(ModelError::Format(format!("duplicate tensor {name}")));
        }
    }

    // Shapes come from a freshly initialised template of the same config.
    let mut weights = init_weights(&config)?;
    let expected: Vec<(String, usize, usize)> = weights
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.rows(), m.cols()))
        .collect();
    if tensors.len() != expected.len() {
        return Err(ModelError::Format(format!(
            "expected {} tensors, found {}",
            expected.len(),
            tensors.len()
        )));
    }
    for (name, rows, cols) in &expected {
        let m = tensors
            .get(name)
            .ok_or_else(|| ModelError::Format(format!("missing tensor {name}")))?;
        if m.rows() != *rows || m.cols() != *cols {
            return Err(ModelError::Format(format!(
                "tensor {name} is {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
    }
    weights.replace_tensors(|name| tensors.remove(name).expect("checked above"));
    Ok(weights)
}

impl Weights {
    fn replace_tensors(&mut self, mut take: impl FnMut(&str) -> Matrix) {
        self.embedding = take("embedding");
        for (i, lw) in self.layers.iter_mut().enumerate() {
            let l = i + 1;
            let mut t = |n: &str| take(&format!("layers.{l}.{n}"));
            lw.attn_norm = t("attn_norm");
            lw.wq = t("wq");
            lw.wk = t("wk");
            lw.wv = t("wv");
            lw.wo = t("wo");
            if let Some(c) = lw.cross.as_mut() {
                c.norm = t("cross.norm");
                c.wq = t("cross.wq");
                c.wk = t("cross.wk");
                c.wv = t("cross.wv");
                c.wo = t("cross.wo");
            }
            lw.ffn_norm = t("ffn_norm");
            lw.w1 = t("w1");
            lw.w2 = t("w2");
        }
        self.final_norm = take("final_norm");
        if let Some(c) = self.classifier.as_mut() {
            *c = take("classifier");
        }
    }
}
