//! Sequence scoring: pseudo log-likelihood, CLS second-pass scores, score
//! fusion and n-best reranking.
//!
//! Scores are oriented so that lower is better everywhere: first-pass
//! scores, second-pass scores and the fused score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderModel, Vocab};

/// One hypothesis with its scores. `fused == first_pass + beta * second_pass`
/// whenever both `fused` and `beta` are set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    pub tokens: Vec<String>,
    pub first_pass: f64,
    pub second_pass: Option<f64>,
    pub beta: Option<f64>,
    pub fused: Option<f64>,
    pub errors: Option<u32>,
}

impl ScoredHypothesis {
    pub fn new(tokens: Vec<String>, first_pass: f64) -> Self {
        Self {
            tokens,
            first_pass,
            second_pass: None,
            beta: None,
            fused: None,
            errors: None,
        }
    }

    /// Records the second-pass score and the fused score at `beta`.
    pub fn fuse_with(&mut self, second_pass: f64, beta: f64) -> Result<()> {
        self.fused = Some(fuse(self.first_pass, second_pass, beta)?);
        self.second_pass = Some(second_pass);
        self.beta = Some(beta);
        Ok(())
    }
}

/// `E_{\t}` for every position `t`: copies of `ids` with one position
/// replaced by `[MASK]`. `ids` excludes the `[CLS]`/`[SEP]` framing.
pub fn masked_variants(ids: &[u32]) -> Vec<Vec<u32>> {
    (0..ids.len())
        .map(|t| {
            let mut v = ids.to_vec();
            v[t] = Vocab::MASK_ID;
            v
        })
        .collect()
}

/// Pseudo log-likelihood `-Σ_t log P(e_t | E_{\t})` of an unframed sequence.
///
/// All masked variants are encoded in one batched forward pass. The empty
/// sequence scores 0.
pub fn pll(model: &EncoderModel, ids: &[u32]) -> Result<f64> {
    Ok(pll_many(model, &[ids.to_vec()], usize::MAX)?[0])
}

/// PLL of several sequences, packing up to `max_rows` masked variants into
/// each forward pass. Values do not depend on the packing.
pub fn pll_many(model: &EncoderModel, seqs: &[Vec<u32>], max_rows: usize) -> Result<Vec<f64>> {
    for s in seqs {
        model.check_ids(&Vocab::frame(s))?;
    }
    let mut out = vec![0.0; seqs.len()];
    let mut pending: Vec<Vec<u32>> = Vec::new();
    let mut queries: Vec<(usize, usize)> = Vec::new();
    // (sequence index, true token) per query row
    let mut owners: Vec<(usize, u32)> = Vec::new();
    let flush = |pending: &mut Vec<Vec<u32>>,
                 queries: &mut Vec<(usize, usize)>,
                 owners: &mut Vec<(usize, u32)>,
                 out: &mut [f64]|
     -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let lp = model.mlm_log_probs_batch(pending, queries)?;
        for (r, &(seq, tok)) in owners.iter().enumerate() {
            out[seq] -= lp.row(r)[tok as usize];
        }
        pending.clear();
        queries.clear();
        owners.clear();
        Ok(())
    };
    for (i, s) in seqs.iter().enumerate() {
        if !pending.is_empty() && pending.len() + s.len() > max_rows {
            flush(&mut pending, &mut queries, &mut owners, &mut out)?;
        }
        for (t, v) in masked_variants(s).into_iter().enumerate() {
            queries.push((pending.len(), t + 1));
            owners.push((i, s[t]));
            pending.push(Vocab::frame(&v));
        }
    }
    flush(&mut pending, &mut queries, &mut owners, &mut out)?;
    Ok(out)
}

/// Second-pass score of every hypothesis, each encoded on its own.
///
/// Work is split across the current rayon pool; the result does not depend
/// on the number of threads.
pub fn second_pass_scores<S: AsRef<str>>(model: &EncoderModel, hypotheses: &[Vec<S>]) -> Result<Vec<f64>> {
    if hypotheses.is_empty() {
        return Err(Error::InvalidInput("no hypotheses to score".into()));
    }
    let framed: Vec<Vec<u32>> = hypotheses
        .iter()
        .map(|h| Vocab::frame(&model.vocab().encode(h)))
        .collect();
    let threads = rayon::current_num_threads().max(1);
    let chunk = framed.len().div_ceil(threads);
    let parts: Vec<Vec<f64>> = framed
        .par_chunks(chunk)
        .map(|c| model.cls_scores(c))
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Interpolated score `s^a + β·s^l`.
pub fn fuse(first_pass: f64, second_pass: f64, beta: f64) -> Result<f64> {
    if !(first_pass.is_finite() && second_pass.is_finite() && beta.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite fusion input ({first_pass}, {second_pass}, {beta})"
        )));
    }
    Ok(first_pass + beta * second_pass)
}

pub fn fuse_all(first_pass: &[f64], second_pass: &[f64], beta: f64) -> Result<Vec<f64>> {
    if first_pass.len() != second_pass.len() {
        return Err(Error::shape("fuse", &[first_pass.len()], &[second_pass.len()]));
    }
    first_pass
        .iter()
        .zip(second_pass)
        .map(|(&a, &l)| fuse(a, l, beta))
        .collect()
}

/// Indices ordered by ascending fused score; ties keep list order, i.e. the
/// first-pass rank.
pub fn rerank(fused: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fused.len()).collect();
    order.sort_by(|&a, &b| fused[a].total_cmp(&fused[b]));
    order
}

/// Best hypothesis index under [`rerank`].
pub fn best(fused: &[f64]) -> Option<usize> {
    rerank(fused).first().copied()
}
