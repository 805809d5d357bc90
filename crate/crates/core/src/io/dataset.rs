use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: u32,
}

impl AsRef<[u32]> for Example {
    fn as_ref(&self) -> &[u32] {
        &self.tokens
    }
}

/// Labelled token sequences plus the FNV-1a digest of their JSONL encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    hash: u64,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        let hash = fnv1a(&encode_jsonl(&examples));
        Self { examples, hash }
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label as usize).collect()
    }

    /// Token ids below `vocab_size`, labels below `n_classes`, no empty sequences.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::Empty("dataset has no examples".into()));
        }
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.tokens.is_empty() {
                return Err(Error::Empty(format!("example {i} has no tokens")));
            }
            if let Some(p) = ex.tokens.iter().position(|&t| t as usize >= config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    example: i,
                    position: p,
                    token: ex.tokens[p],
                    vocab_size: config.vocab_size,
                });
            }
            if ex.label as usize >= config.n_classes {
                return Err(Error::LabelOutOfRange {
                    example: i,
                    label: ex.label,
                    n_classes: config.n_classes,
                });
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        encode_jsonl(&self.examples)
    }

    /// Parses JSONL; the hash is taken over the bytes as given. Blank lines are skipped.
    pub fn from_jsonl(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| Error::Malformed(format!("dataset is not UTF-8: {e}")))?;
        let mut examples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let ex: Example = serde_json::from_str(line)
                .map_err(|e| Error::Malformed(format!("dataset line {}: {e}", n + 1)))?;
            examples.push(ex);
        }
        Ok(Self {
            examples,
            hash: fnv1a(bytes),
        })
    }
}

fn encode_jsonl(examples: &[Example]) -> Vec<u8> {
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, ex).expect("in-memory write");
        out.push(b'\n');
    }
    out
}
