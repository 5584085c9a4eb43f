//! N-best records, corpora and their JSONL form.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::edit_distance;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, read_text, write_jsonl, write_text};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<String>,
    /// First-pass score, lower is better.
    pub score: f64,
}

/// One utterance: reference transcript and its n-best list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestRecord {
    pub id: String,
    #[serde(rename = "ref")]
    pub reference: Vec<String>,
    pub hyps: Vec<Hypothesis>,
    /// Word errors of each hypothesis against `reference`, once annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<u32>>,
}

impl NBestRecord {
    pub fn len(&self) -> usize {
        self.hyps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hyps.is_empty()
    }

    pub fn first_pass_scores(&self) -> Vec<f64> {
        self.hyps.iter().map(|h| h.score).collect()
    }

    /// Cached word errors; fails on an unannotated record.
    pub fn errors(&self) -> Result<&[u32]> {
        self.eps
            .as_deref()
            .ok_or_else(|| Error::NotAnnotated(self.id.clone()))
    }

    fn compute_errors(&self) -> Vec<u32> {
        self.hyps
            .iter()
            .map(|h| edit_distance(&self.reference, &h.tokens) as u32)
            .collect()
    }

    /// Fills `eps` with the edit distance of every hypothesis. Idempotent.
    pub fn annotate(&mut self) {
        self.eps = Some(self.compute_errors());
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("record {}: {m}", self.id)));
        if self.hyps.is_empty() {
            return bad("no hypotheses".into());
        }
        if let Some(i) = self.hyps.iter().position(|h| !h.score.is_finite()) {
            return bad(format!("hypothesis {i} has a non-finite score"));
        }
        if let Some(eps) = &self.eps {
            if *eps != self.compute_errors() {
                return bad("cached eps disagree with the reference".into());
            }
        }
        Ok(())
    }
}

/// Free-standing form of [`NBestRecord::annotate`].
pub fn annotate_errors(mut record: NBestRecord) -> NBestRecord {
    record.annotate();
    record
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NBestCorpus {
    pub split: Option<Split>,
    pub records: Vec<NBestRecord>,
}

impl NBestCorpus {
    pub fn new(split: Option<Split>, records: Vec<NBestRecord>) -> Result<Self> {
        let c = Self { split, records };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate utterance id {}", r.id)));
            }
            r.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn annotate(&mut self) {
        self.records.iter_mut().for_each(NBestRecord::annotate);
    }

    pub fn is_annotated(&self) -> bool {
        self.records.iter().all(|r| r.eps.is_some())
    }

    /// Fails naming the first unannotated record.
    pub fn require_annotated(&self) -> Result<()> {
        match self.records.iter().find(|r| r.eps.is_none()) {
            Some(r) => Err(Error::NotAnnotated(r.id.clone())),
            None => Ok(()),
        }
    }

    /// Every hypothesis token sequence, in corpus order.
    pub fn hypotheses(&self) -> impl Iterator<Item = &[String]> {
        self.records
            .iter()
            .flat_map(|r| r.hyps.iter().map(|h| h.tokens.as_slice()))
    }

    pub fn references(&self) -> TextCorpus {
        TextCorpus::new(self.records.iter().map(|r| r.reference.clone()).collect())
    }

    pub fn load(path: &Path, split: Option<Split>) -> Result<Self> {
        let records = read_jsonl(path)?;
        Self::new(split, records).map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records)
    }
}

/// Plain sentences for MLM and MD training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextCorpus {
    pub sentences: Vec<Vec<String>>,
}

impl TextCorpus {
    pub fn new(sentences: Vec<Vec<String>>) -> Self {
        Self { sentences }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(read_text(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.sentences)
    }
}

/// Keeps the first `max_tokens` tokens; reports whether anything was cut.
pub fn truncate<T>(tokens: &[T], max_tokens: usize) -> (&[T], bool) {
    if tokens.len() > max_tokens {
        (&tokens[..max_tokens], true)
    } else {
        (tokens, false)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn record() -> NBestRecord {
        NBestRecord {
            id: "u1".into(),
            reference: toks("play some jazz music"),
            hyps: vec![
                Hypothesis { tokens: toks("play some jazz music"), score: 1.0 },
                Hypothesis { tokens: toks("play sum jazz"), score: 2.0 },
            ],
            eps: None,
        }
    }

    #[test]
    fn annotation() {
        let r = annotate_errors(record());
        assert_eq!(r.eps, Some(vec![0, 2]));
        assert_eq!(annotate_errors(r.clone()), r);
        assert!(r.validate().is_ok());
        let mut wrong = r;
        wrong.eps = Some(vec![0, 1]);
        assert!(wrong.validate().is_err());
        assert!(matches!(record().errors(), Err(Error::NotAnnotated(_))));
    }

    #[test]
    fn random_annotation_matches_direct_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let words = ["a", "b", "c", "d"];
        let mut draw = |n: usize| -> Vec<String> {
            (0..n).map(|_| words[rng.random_range(0..4)].to_string()).collect()
        };
        let reference = draw(6);
        let hyps: Vec<_> = (0..8)
            .map(|i| Hypothesis { tokens: draw(i % 7), score: i as f64 })
            .collect();
        let r = annotate_errors(NBestRecord { id: "x".into(), reference, hyps, eps: None });
        for (h, e) in r.hyps.iter().zip(r.errors().unwrap()) {
            assert_eq!(*e as usize, edit_distance(&r.reference, &h.tokens));
        }
    }

    #[test]
    fn json_field_names() {
        let r = annotate_errors(record());
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["eps", "hyps", "id", "ref"]);
        assert!(v["hyps"][0].get("tokens").is_some() && v["hyps"][0].get("score").is_some());
        let plain = serde_json::to_value(record()).unwrap();
        assert!(plain.get("eps").is_none());
    }

    #[test]
    fn corpus_validation_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let c = NBestCorpus::new(Some(Split::Dev), vec![annotate_errors(record())]).unwrap();
        c.save(&path).unwrap();
        assert_eq!(NBestCorpus::load(&path, Some(Split::Dev)).unwrap(), c);
        let dup = vec![record(), record()];
        assert!(NBestCorpus::new(None, dup).is_err());
        let mut empty = record();
        empty.hyps.clear();
        assert!(NBestCorpus::new(None, vec![empty]).is_err());
        let mut nan = record();
        nan.hyps[0].score = f64::NAN;
        assert!(nan.validate().is_err());
    }

    #[test]
    fn truncation_keeps_the_prefix() {
        assert_eq!(truncate(&[1, 2, 3], 2), (&[1, 2][..], true));
        assert_eq!(truncate(&[1, 2], 2), (&[1, 2][..], false));
    }
}
