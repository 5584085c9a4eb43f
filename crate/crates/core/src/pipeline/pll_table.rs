//! Offline PLL targets keyed by token sequence.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::truncate;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::model::EncoderModel;
use crate::scoring::pll_many;

/// Masked variants packed into one forward pass while precomputing.
const ROWS_PER_FORWARD: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PllEntry {
    pub tokens: Vec<String>,
    pub pll: f64,
    /// The PLL was computed on a prefix of `tokens`.
    pub truncated: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PllTable {
    entries: BTreeMap<Vec<String>, PllEntry>,
}

/// What a [`precompute_pll`] call did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecomputeStats {
    pub computed: usize,
    pub reused: usize,
    pub truncated: usize,
}

impl PllTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get<S: AsRef<str>>(&self, tokens: &[S]) -> Option<f64> {
        let key: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
        self.entries.get(&key).map(|e| e.pll)
    }

    pub fn entry(&self, tokens: &[String]) -> Option<&PllEntry> {
        self.entries.get(tokens)
    }

    pub fn insert(&mut self, entry: PllEntry) {
        self.entries.insert(entry.tokens.clone(), entry);
    }

    pub fn entries(&self) -> impl Iterator<Item = &PllEntry> {
        self.entries.values()
    }

    /// Targets for `sequences` in order; fails naming the missing ones.
    pub fn lookup_all<'a>(&self, sequences: impl IntoIterator<Item = &'a [String]>) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        let mut missing = Vec::new();
        for s in sequences {
            match self.entries.get(s) {
                Some(e) => out.push(e.pll),
                None => missing.push(s.join(" ")),
            }
        }
        if missing.is_empty() {
            Ok(out)
        } else {
            let count = missing.len();
            missing.truncate(3);
            Err(Error::MissingPll { count, first: missing })
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut t = Self::new();
        for e in read_jsonl::<PllEntry>(path)? {
            if !e.pll.is_finite() {
                return Err(Error::Malformed {
                    path: path.display().to_string(),
                    reason: format!("non-finite pll for {:?}", e.tokens.join(" ")),
                });
            }
            t.insert(e);
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<&PllEntry> = self.entries.values().collect();
        write_jsonl(path, &entries)
    }
}

/// Adds the PLL under `model` of every sequence not yet in `table`.
///
/// Sequences longer than `max_seq_len - 2` tokens (and the model's own
/// limit) are scored on their prefix and flagged as truncated. Existing
/// entries are reused without touching the model.
pub fn precompute_pll<'a>(
    model: &EncoderModel,
    sequences: impl IntoIterator<Item = &'a [String]>,
    table: &mut PllTable,
    max_seq_len: usize,
) -> Result<PrecomputeStats> {
    let limit = max_seq_len.min(model.config().max_len);
    if limit < 3 {
        return Err(Error::InvalidTrainingConfig(format!("max_seq_len ({limit}) must be at least 3")));
    }
    let mut stats = PrecomputeStats::default();
    let mut todo: Vec<&[String]> = Vec::new();
    let mut queued = std::collections::HashSet::new();
    for s in sequences {
        if table.entries.contains_key(s) || !queued.insert(s) {
            stats.reused += 1;
        } else {
            todo.push(s);
        }
    }
    let inputs: Vec<(Vec<u32>, bool)> = todo
        .iter()
        .map(|s| {
            let (kept, cut) = truncate(s, limit - 2);
            (model.vocab().encode(kept), cut)
        })
        .collect();
    let ids: Vec<Vec<u32>> = inputs.iter().map(|(i, _)| i.clone()).collect();
    // Chunks are independent; values do not depend on how they are split.
    let chunk = ids.len().div_ceil(rayon::current_num_threads().max(1)).max(1);
    let plls: Vec<f64> = ids
        .par_chunks(chunk)
        .map(|c| pll_many(model, c, ROWS_PER_FORWARD))
        .collect::<Result<Vec<_>>>()?
        .concat();
    for ((s, (_, cut)), pll) in todo.iter().zip(&inputs).zip(plls) {
        stats.computed += 1;
        stats.truncated += usize::from(*cut);
        table.insert(PllEntry { tokens: s.to_vec(), pll, truncated: *cut });
    }
    Ok(stats)
}
