//! Line-oriented JSON corpus: one `{"id", "prompt", "reference"}` object per
//! line, token ids as integers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use free_core::engine::decode_full;
use free_core::model::Weights;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub prompt: Vec<u32>,
    pub reference: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn references(&self) -> Vec<Vec<u32>> {
        self.records.iter().map(|r| r.reference.clone()).collect()
    }

    /// Checks every record against a vocabulary of `vocab_size` ids.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for r in &self.records {
            if r.prompt.is_empty() {
                return Err(HarnessError::Data(format!("record {}: empty prompt", r.id)));
            }
            if r.reference.is_empty() {
                return Err(HarnessError::Data(format!("record {}: empty reference", r.id)));
            }
            if let Some(t) = r
                .prompt
                .iter()
                .chain(&r.reference)
                .find(|&&t| t as usize >= vocab_size)
            {
                return Err(HarnessError::Data(format!(
                    "record {}: token {t} outside vocabulary of {vocab_size}",
                    r.id
                )));
            }
        }
        Ok(())
    }
}

pub fn read_corpus<R: BufRead>(input: R, vocab_size: usize) -> Result<Corpus> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| HarnessError::Data(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Data(format!("line {}: {e}", i + 1)))?;
        records.push(record);
    }
    let corpus = Corpus { records };
    corpus.validate(vocab_size)?;
    if corpus.is_empty() {
        log::warn!("corpus is empty");
    }
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>, vocab_size: usize) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(HarnessError::io(path))?;
    read_corpus(BufReader::new(file), vocab_size)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> std::io::Result<()> {
    for r in &corpus.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(HarnessError::io(path))?;
    write_corpus(corpus, BufWriter::new(file)).map_err(HarnessError::io(path))
}

/// Random prompts whose references are the full model's greedy outputs.
pub fn make_toy_corpus(
    seed: u64,
    size: usize,
    weights: &Weights,
    prompt_len: RangeInclusive<usize>,
    max_new: usize,
) -> Result<Corpus> {
    if size == 0 {
        return Err(HarnessError::Config("corpus size must be at least 1".into()));
    }
    if prompt_len.is_empty() || *prompt_len.start() == 0 {
        return Err(HarnessError::Config(format!("bad prompt length range {prompt_len:?}")));
    }
    let cfg = weights.config();
    let special = [cfg.eos_token, Some(cfg.bos_token)];
    let ordinary: Vec<u32> = (0..cfg.vocab_size as u32)
        .filter(|t| !special.contains(&Some(*t)))
        .collect();
    if ordinary.is_empty() {
        return Err(HarnessError::Config("vocabulary has no ordinary tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(size);
    for i in 0..size {
        let n = rng.random_range(prompt_len.clone());
        let prompt: Vec<u32> = (0..n)
            .map(|_| ordinary[rng.random_range(0..ordinary.len())])
            .collect();
        let id = format!("toy-{i:05}");
        let reference = decode_full(weights, &prompt, max_new)
            .map_err(|source| HarnessError::Decode {
                id: id.clone(),
                source,
            })?
            .tokens;
        records.push(Record {
            id,
            prompt,
            reference,
        });
    }
    Ok(Corpus { records })
}
