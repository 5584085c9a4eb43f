//! Reranking evaluation and interpolation-weight search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{truncate, NBestCorpus, NBestRecord};
use super::metrics::{characters, edit_distance};
use super::pll_table::PllTable;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, Vocab};
use crate::scoring::{fuse_all, pll_many, rerank};

/// Something that assigns a second-pass score to every hypothesis of a record.
pub trait SecondPassScorer: Sync {
    fn score_record(&self, record: &NBestRecord) -> Result<Vec<f64>>;

    /// Scores of every record; parallel over records, identical to the
    /// sequential result.
    fn score_corpus(&self, corpus: &NBestCorpus) -> Result<Vec<Vec<f64>>> {
        corpus.records.par_iter().map(|r| self.score_record(r)).collect()
    }
}

/// CLS scores of a trained model; over-length hypotheses keep their prefix.
impl SecondPassScorer for EncoderModel {
    fn score_record(&self, record: &NBestRecord) -> Result<Vec<f64>> {
        let max = self.config().max_len - 2;
        let seqs: Vec<Vec<u32>> = record
            .hyps
            .iter()
            .map(|h| Vocab::frame(&self.vocab().encode(truncate(&h.tokens, max).0)))
            .collect();
        self.cls_scores(&seqs)
    }
}

/// PLL of each hypothesis under an MLM, computed on the fly.
pub struct PllScorer<'a>(pub &'a EncoderModel);

impl SecondPassScorer for PllScorer<'_> {
    fn score_record(&self, record: &NBestRecord) -> Result<Vec<f64>> {
        let max = self.0.config().max_len - 2;
        let ids: Vec<Vec<u32>> = record
            .hyps
            .iter()
            .map(|h| self.0.vocab().encode(truncate(&h.tokens, max).0))
            .collect();
        pll_many(self.0, &ids, usize::MAX)
    }
}

/// Precomputed PLLs.
impl SecondPassScorer for PllTable {
    fn score_record(&self, record: &NBestRecord) -> Result<Vec<f64>> {
        self.lookup_all(record.hyps.iter().map(|h| h.tokens.as_slice()))
    }
}

/// Scores each hypothesis by its own word errors, the best any scorer can do.
pub struct OracleScorer;

impl SecondPassScorer for OracleScorer {
    fn score_record(&self, record: &NBestRecord) -> Result<Vec<f64>> {
        Ok(record.errors()?.iter().map(|&e| f64::from(e)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    /// Index of the chosen hypothesis in the first-pass list.
    pub chosen: usize,
    pub tokens: Vec<String>,
    pub errors: u32,
    pub reference_words: usize,
    pub first_pass_errors: u32,
    pub oracle_errors: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool: String,
    pub version: String,
    pub beta: f64,
    pub wer: f64,
    pub cer: f64,
    pub first_pass_wer: f64,
    pub oracle_wer: f64,
    pub utterances: Vec<UtteranceResult>,
    /// Free-form echo of whatever produced the report.
    #[serde(default)]
    pub config: serde_json::Value,
}

fn check_shapes(corpus: &NBestCorpus, second_pass: &[Vec<f64>]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    corpus.require_annotated()?;
    if second_pass.len() != corpus.len() {
        return Err(Error::shape("second-pass scores", &[second_pass.len()], &[corpus.len()]));
    }
    for (r, s) in corpus.records.iter().zip(second_pass) {
        if s.len() != r.len() {
            return Err(Error::InvalidInput(format!(
                "record {}: {} scores for {} hypotheses",
                r.id,
                s.len(),
                r.len()
            )));
        }
    }
    Ok(())
}

fn chosen(record: &NBestRecord, second_pass: &[f64], beta: f64) -> Result<usize> {
    let fused = fuse_all(&record.first_pass_scores(), second_pass, beta)?;
    Ok(rerank(&fused)[0])
}

/// Total word errors of the hypotheses picked at `beta`.
fn total_errors(corpus: &NBestCorpus, second_pass: &[Vec<f64>], beta: f64) -> Result<u64> {
    let mut total = 0;
    for (r, s) in corpus.records.iter().zip(second_pass) {
        total += u64::from(r.errors()?[chosen(r, s, beta)?]);
    }
    Ok(total)
}

fn reference_words(corpus: &NBestCorpus) -> Result<usize> {
    let n: usize = corpus.records.iter().map(|r| r.reference.len()).sum();
    if n == 0 {
        return Err(Error::InvalidInput("total reference length is zero".into()));
    }
    Ok(n)
}

/// Reranks every record with precomputed second-pass scores.
pub fn evaluate_scores(corpus: &NBestCorpus, second_pass: &[Vec<f64>], beta: f64) -> Result<EvalReport> {
    check_shapes(corpus, second_pass)?;
    let words = reference_words(corpus)? as f64;
    let mut utterances = Vec::with_capacity(corpus.len());
    let (mut chars_ref, mut chars_err) = (0usize, 0usize);
    for (r, s) in corpus.records.iter().zip(second_pass) {
        let eps = r.errors()?;
        let c = chosen(r, s, beta)?;
        let first = rerank(&r.first_pass_scores())[0];
        let tokens = r.hyps[c].tokens.clone();
        let rc = characters(&r.reference);
        chars_err += edit_distance(&rc, &characters(&tokens));
        chars_ref += rc.len();
        utterances.push(UtteranceResult {
            id: r.id.clone(),
            chosen: c,
            tokens,
            errors: eps[c],
            reference_words: r.reference.len(),
            first_pass_errors: eps[first],
            oracle_errors: *eps.iter().min().expect("non-empty list"),
        });
    }
    let rate = |f: fn(&UtteranceResult) -> u32| utterances.iter().map(|u| f64::from(f(u))).sum::<f64>() / words;
    Ok(EvalReport {
        tool: "rescore".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        beta,
        wer: rate(|u| u.errors),
        cer: if chars_ref == 0 { 0.0 } else { chars_err as f64 / chars_ref as f64 },
        first_pass_wer: rate(|u| u.first_pass_errors),
        oracle_wer: rate(|u| u.oracle_errors),
        utterances,
        config: serde_json::Value::Null,
    })
}

pub fn evaluate(scorer: &dyn SecondPassScorer, corpus: &NBestCorpus, beta: f64) -> Result<EvalReport> {
    evaluate_scores(corpus, &scorer.score_corpus(corpus)?, beta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSearch {
    pub beta: f64,
    pub wer: f64,
    /// `(beta, wer)` at every grid point, in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// `0, 0.05, …, 5.0`.
pub fn default_grid() -> Vec<f64> {
    (0..=100).map(|i| f64::from(i) * 0.05).collect()
}

/// Dev WER at each grid point; the lowest wins, ties going to the smallest β.
pub fn search_beta_scores(corpus: &NBestCorpus, second_pass: &[Vec<f64>], grid: &[f64]) -> Result<BetaSearch> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty beta grid".into()));
    }
    check_shapes(corpus, second_pass)?;
    let words = reference_words(corpus)? as f64;
    let curve: Vec<(f64, f64)> = grid
        .iter()
        .map(|&b| Ok((b, total_errors(corpus, second_pass, b)? as f64 / words)))
        .collect::<Result<_>>()?;
    let mut best = curve[0];
    for &(b, w) in &curve[1..] {
        if w < best.1 || (w == best.1 && b < best.0) {
            best = (b, w);
        }
    }
    Ok(BetaSearch { beta: best.0, wer: best.1, curve })
}

pub fn search_beta(scorer: &dyn SecondPassScorer, corpus: &NBestCorpus, grid: &[f64]) -> Result<BetaSearch> {
    search_beta_scores(corpus, &scorer.score_corpus(corpus)?, grid)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "spearman needs two equal-length samples of size ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean).powi(2);
        vb += (y - mean).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::{generate_split, GeneratorConfig};
    use crate::pipeline::Split;

    fn corpus(seed: u64) -> NBestCorpus {
        let cfg = GeneratorConfig { seed, ..Default::default() };
        generate_split(&cfg, Split::Dev, 120).unwrap()
    }

    fn first_pass_wer(c: &NBestCorpus) -> f64 {
        let e: u32 = c.records.iter().map(|r| r.errors().unwrap()[0]).sum();
        f64::from(e) / c.records.iter().map(|r| r.reference.len()).sum::<usize>() as f64
    }

    #[test]
    fn zero_beta_reproduces_the_first_pass() {
        let c = corpus(1);
        let noise: Vec<Vec<f64>> = c.records.iter().map(|r| r.hyps.iter().map(|h| h.tokens.len() as f64 * 3.0).collect()).collect();
        let rep = evaluate_scores(&c, &noise, 0.0).unwrap();
        assert_eq!(rep.wer, first_pass_wer(&c));
        assert_eq!(rep.wer, rep.first_pass_wer);
        assert!(rep.oracle_wer <= rep.wer);
        let s = search_beta_scores(&c, &noise, &[0.0]).unwrap();
        assert_eq!((s.beta, s.wer), (0.0, first_pass_wer(&c)));
    }

    #[test]
    fn oracle_scorer_reaches_the_oracle() {
        let c = corpus(2);
        let rep = evaluate(&OracleScorer, &c, 1000.0).unwrap();
        assert_eq!(rep.wer, rep.oracle_wer);
        let s = search_beta(&OracleScorer, &c, &[0.0, 1.0, 10.0, 100.0, 1000.0]).unwrap();
        assert_eq!(s.wer, rep.oracle_wer);
        assert!(s.beta > 0.0);
        let min = s.curve.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        assert_eq!(s.wer, min);
        let first = s.curve.iter().find(|p| p.1 == min).unwrap();
        assert_eq!(s.beta, first.0);
    }

    #[test]
    fn reports_are_deterministic_and_consistent() {
        let c = corpus(3);
        let a = serde_json::to_string(&evaluate(&OracleScorer, &c, 0.5).unwrap()).unwrap();
        let b = serde_json::to_string(&evaluate(&OracleScorer, &c, 0.5).unwrap()).unwrap();
        assert_eq!(a, b);
        let rep = evaluate(&OracleScorer, &c, 0.5).unwrap();
        let chosen: u32 = rep.utterances.iter().map(|u| u.errors).sum();
        let words: usize = rep.utterances.iter().map(|u| u.reference_words).sum();
        assert_eq!(rep.wer, f64::from(chosen) / words as f64);
    }

    #[test]
    fn parallel_scoring_equals_sequential() {
        let c = corpus(4);
        let v = Vocab::from_words(crate::pipeline::synth::Grammar::builtin().words());
        let mut cfg = crate::model::ModelConfig::toy(v.len());
        cfg.init_std = 0.1;
        let m = EncoderModel::new(cfg, v).unwrap();
        let seq: Vec<Vec<f64>> = c.records.iter().map(|r| m.score_record(r).unwrap()).collect();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let par = pool.install(|| m.score_corpus(&c)).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn mismatched_scores_are_rejected() {
        let c = corpus(5);
        assert!(evaluate_scores(&c, &[], 1.0).is_err());
        assert!(search_beta_scores(&c, &OracleScorer.score_corpus(&c).unwrap(), &[]).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }
}
