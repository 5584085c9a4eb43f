//! Training procedures: MLM domain adaptation, MD regression and
//! discriminative n-best fine-tuning.
//!
//! Every procedure is a deterministic function of the initial parameters,
//! the data and the config (seed included). Updates use Adam with global
//! gradient-norm clipping and fresh optimizer state per call.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{truncate, NBestCorpus, TextCorpus};
use super::pll_table::PllTable;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{fused_loss, md_sum, mwed_loss, mwed_temperature, mwer_loss, LossReport, Temperature};
use crate::model::{Batch, Bound, EncoderModel, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Mlm,
    Md,
    MwerOnly,
    MwedOnly,
    MdMwer,
    MdMwed,
}

impl Objective {
    pub fn is_discriminative(self) -> bool {
        !matches!(self, Objective::Mlm | Objective::Md)
    }

    /// Whether the fused loss adds λ·ΣMD.
    pub fn uses_md(self) -> bool {
        matches!(self, Objective::MdMwer | Objective::MdMwed)
    }

    pub fn is_mwed(self) -> bool {
        matches!(self, Objective::MwedOnly | Objective::MdMwed)
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Mlm => "mlm",
            Objective::Md => "md",
            Objective::MwerOnly => "mwer-only",
            Objective::MwedOnly => "mwed-only",
            Objective::MdMwer => "md-mwer",
            Objective::MdMwed => "md-mwed",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidTrainingConfig(format!("unknown objective {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    /// Utterances for discriminative objectives, sentences otherwise.
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Interpolation weight used inside the discriminative losses.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Framed length limit; longer inputs keep their prefix.
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Record the batch loss every this many steps (0: only the last).
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_lambda() -> f64 {
    crate::losses::DEFAULT_LAMBDA
}
fn default_beta() -> f64 {
    1.0
}
fn default_max_seq_len() -> usize {
    24
}
fn default_mask_rate() -> f64 {
    0.15
}
fn default_clip() -> f64 {
    1.0
}
fn default_log_every() -> usize {
    50
}

impl TrainingConfig {
    pub fn new(objective: Objective) -> Self {
        Self {
            objective,
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 100,
            lambda: default_lambda(),
            beta: default_beta(),
            seed: 0,
            max_seq_len: default_max_seq_len(),
            mask_rate: default_mask_rate(),
            clip_norm: default_clip(),
            log_every: default_log_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTrainingConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate ({}) must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda ({}) must be non-negative", self.lambda));
        }
        if !self.beta.is_finite() {
            return bad(format!("beta ({}) must be finite", self.beta));
        }
        if self.max_seq_len < 3 {
            return bad(format!("max_seq_len ({}) must be at least 3", self.max_seq_len));
        }
        if self.objective == Objective::Mlm && !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return bad(format!("mask_rate ({}) must lie in (0, 1]", self.mask_rate));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clip_norm ({}) must be positive", self.clip_norm));
        }
        Ok(())
    }

    fn expect(&self, allowed: &[Objective], procedure: &str) -> Result<()> {
        self.validate()?;
        if allowed.contains(&self.objective) {
            Ok(())
        } else {
            Err(Error::InvalidTrainingConfig(format!(
                "{procedure} cannot train objective {}",
                self.objective.name()
            )))
        }
    }

    /// Token budget per sequence after framing, for `model`.
    fn max_tokens(&self, model: &EncoderModel) -> usize {
        self.max_seq_len.min(model.config().max_len) - 2
    }
}

/// Utterances left out of discriminative training, by reason.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    /// Lists with fewer than two hypotheses.
    pub single_hypothesis: usize,
    /// Lists whose hypotheses all have the same error count (Σε = 0
    /// included); no objective can rank them.
    pub equal_errors: usize,
    /// MWED temperatures clamped to the floor (trained, not skipped).
    pub clamped_temperature: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogPoint {
    pub step: usize,
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub objective: Objective,
    /// Optimizer updates applied; batches without trainable utterances
    /// are not counted.
    pub updates: usize,
    pub history: Vec<LogPoint>,
    pub skipped: SkipCounts,
    /// Training examples (per pass over the data) that were truncated.
    pub truncated: usize,
}

impl TrainLog {
    fn new(objective: Objective) -> Self {
        Self {
            objective,
            updates: 0,
            history: Vec::new(),
            skipped: SkipCounts::default(),
            truncated: 0,
        }
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|p| p.loss.total)
    }

    fn record(&mut self, cfg: &TrainingConfig, step: usize, loss: LossReport) {
        let last = step + 1 == cfg.steps;
        if last || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            self.history.push(LogPoint { step, loss });
        }
    }
}

/// Adam with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Applies one update. `grads[i] == None` means a zero gradient. The
    /// global gradient norm is clipped to `clip`; returns the norm before
    /// clipping.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>], clip: f64) -> f64 {
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j] * scale);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                data[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        norm
    }
}

/// Endless shuffled pass over `0..n`, reshuffled every epoch.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn apply(model: &mut EncoderModel, adam: &mut Adam, g: &Graph, p: &Bound, clip: f64) -> Result<()> {
    let grads: Vec<Option<Vec<f64>>> = p.vars().iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect();
    adam.step(model.params_mut(), &grads, clip);
    model.record_update();
    if !model.is_finite() {
        return Err(Error::NonFinite {
            context: "parameters after update",
            tensor: 0,
            index: 0,
        });
    }
    Ok(())
}

fn encode_text(model: &EncoderModel, corpus: &TextCorpus, max_tokens: usize) -> (Vec<Vec<u32>>, usize) {
    let mut cut = 0;
    let ids = corpus
        .sentences
        .iter()
        .map(|s| {
            let (kept, t) = truncate(s, max_tokens);
            cut += usize::from(t);
            model.vocab().encode(kept)
        })
        .collect();
    (ids, cut)
}

/// BERT-style masking of one framed sequence: `mask_rate` of the word
/// positions (at least one) are selected; of those 80% become `[MASK]`,
/// 10% a random word and 10% stay unchanged. Returns the corrupted input
/// and the selected positions.
pub fn mask_sequence(framed: &[u32], mask_rate: f64, vocab: &Vocab, rng: &mut impl Rng) -> (Vec<u32>, Vec<usize>) {
    let len = framed.len() - 2;
    let mut positions: Vec<usize> = (1..=len).filter(|_| rng.random::<f64>() < mask_rate).collect();
    if positions.is_empty() && len > 0 {
        positions.push(rng.random_range(1..=len));
    }
    let words = vocab.word_ids();
    let mut input = framed.to_vec();
    for &t in &positions {
        let u: f64 = rng.random();
        if u < 0.8 {
            input[t] = Vocab::MASK_ID;
        } else if u < 0.9 {
            input[t] = rng.random_range(words.clone());
        }
    }
    (input, positions)
}

/// Mean masked-token cross-entropy over a batch of framed sequences.
fn mlm_batch_loss(
    model: &EncoderModel,
    g: &mut Graph,
    p: &Bound,
    framed: &[&Vec<u32>],
    mask_rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Var, usize)>> {
    let mut inputs = Vec::with_capacity(framed.len());
    let mut queries = Vec::new();
    let mut targets = Vec::new();
    for (b, seq) in framed.iter().enumerate() {
        let (input, pos) = mask_sequence(seq, mask_rate, model.vocab(), rng);
        for t in pos {
            queries.push((b, t));
            targets.push(seq[t] as usize);
        }
        inputs.push(input);
    }
    if targets.is_empty() {
        return Ok(None);
    }
    let batch = Batch::new(&inputs)?;
    let h = model.hidden_states(g, p, &batch)?;
    let rows: Vec<usize> = queries.iter().map(|&(b, t)| batch.row(b, t)).collect();
    let lp = model.mlm_head(g, p, h, &rows)?;
    let picked = g.pick(lp, &targets)?;
    let mean = g.mean(picked)?;
    Ok(Some((g.neg(mean)?, targets.len())))
}

/// Continues MLM training on in-domain text.
pub fn train_domain_adapt(model: &mut EncoderModel, corpus: &TextCorpus, cfg: &TrainingConfig) -> Result<TrainLog> {
    cfg.expect(&[Objective::Mlm], "domain adaptation")?;
    let (ids, truncated) = encode_text(model, corpus, cfg.max_tokens(model));
    let framed: Vec<Vec<u32>> = ids.iter().filter(|s| !s.is_empty()).map(|s| Vocab::frame(s)).collect();
    if framed.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut log = TrainLog::new(cfg.objective);
    log.truncated = truncated;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = Sampler::new(framed.len());
    let mut adam = Adam::new(cfg.learning_rate, model.params());
    for step in 0..cfg.steps {
        let idx = sampler.batch(cfg.batch_size, &mut rng);
        let seqs: Vec<&Vec<u32>> = idx.iter().map(|&i| &framed[i]).collect();
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let Some((loss, _)) = mlm_batch_loss(model, &mut g, &p, &seqs, cfg.mask_rate, &mut rng)? else {
            continue;
        };
        g.backward(loss)?;
        let total = g.scalar(loss);
        apply(model, &mut adam, &g, &p, cfg.clip_norm)?;
        log.updates += 1;
        log.record(cfg, step, LossReport { md_sum: None, discriminative: None, total, lambda: None, temperature: None });
    }
    Ok(log)
}

/// Masked-token cross-entropy of `corpus` under a fixed masking drawn from
/// `seed`, averaged over masked positions.
pub fn mlm_loss(model: &EncoderModel, corpus: &TextCorpus, mask_rate: f64, max_seq_len: usize, seed: u64) -> Result<f64> {
    let max_tokens = max_seq_len.min(model.config().max_len).saturating_sub(2);
    let (ids, _) = encode_text(model, corpus, max_tokens);
    let framed: Vec<Vec<u32>> = ids.iter().filter(|s| !s.is_empty()).map(|s| Vocab::frame(s)).collect();
    if framed.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in framed.chunks(64) {
        let seqs: Vec<&Vec<u32>> = chunk.iter().collect();
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        if let Some((loss, n)) = mlm_batch_loss(model, &mut g, &p, &seqs, mask_rate, &mut rng)? {
            total += g.scalar(loss) * n as f64;
            count += n;
        }
    }
    Ok(total / count as f64)
}

/// Trains the CLS score to regress PLL targets from `table`.
///
/// The CLS output bias starts at the mean target so that early updates
/// shape the score instead of shifting it.
pub fn train_md(model: &mut EncoderModel, corpus: &TextCorpus, table: &PllTable, cfg: &TrainingConfig) -> Result<TrainLog> {
    cfg.expect(&[Objective::Md], "MD training")?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let targets = table.lookup_all(corpus.sentences.iter().map(Vec::as_slice))?;
    let (ids, truncated) = encode_text(model, corpus, cfg.max_tokens(model));
    let framed: Vec<Vec<u32>> = ids.iter().map(|s| Vocab::frame(s)).collect();
    let mut log = TrainLog::new(cfg.objective);
    log.truncated = truncated;
    if cfg.steps == 0 {
        return Ok(log);
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    model.param_mut("cls.out.bias").expect("canonical layout").data_mut()[0] = mean;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = Sampler::new(framed.len());
    let mut adam = Adam::new(cfg.learning_rate, model.params());
    for step in 0..cfg.steps {
        let idx = sampler.batch(cfg.batch_size, &mut rng);
        let seqs: Vec<Vec<u32>> = idx.iter().map(|&i| framed[i].clone()).collect();
        let tgt: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let batch = Batch::new(&seqs)?;
        let h = model.hidden_states(&mut g, &p, &batch)?;
        let s = model.cls_head(&mut g, &p, h, &batch)?;
        let md = md_sum(&mut g, s, &tgt)?;
        let loss = g.scale(md, 1.0 / tgt.len() as f64)?;
        g.backward(loss)?;
        let report = LossReport {
            md_sum: Some(g.scalar(md)),
            discriminative: None,
            total: g.scalar(loss),
            lambda: None,
            temperature: None,
        };
        apply(model, &mut adam, &g, &p, cfg.clip_norm)?;
        log.updates += 1;
        log.record(cfg, step, report);
    }
    Ok(log)
}

/// Why an utterance cannot be trained on, if it cannot.
fn ineligible(errors: &[u32]) -> Option<fn(&mut SkipCounts)> {
    if errors.len() < 2 {
        Some(|s| s.single_hypothesis += 1)
    } else if errors.iter().all(|&e| e == errors[0]) {
        Some(|s| s.equal_errors += 1)
    } else {
        None
    }
}

/// Fine-tunes the CLS score on n-best lists with MWER or MWED, optionally
/// fused with λ·ΣMD against `table`.
///
/// Each batch's loss is the mean over its trainable utterances; batches
/// without any are passed over without an update.
pub fn train_discriminative(
    model: &mut EncoderModel,
    corpus: &NBestCorpus,
    table: Option<&PllTable>,
    cfg: &TrainingConfig,
) -> Result<TrainLog> {
    cfg.expect(
        &[Objective::MwerOnly, Objective::MwedOnly, Objective::MdMwer, Objective::MdMwed],
        "discriminative training",
    )?;
    corpus.require_annotated()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let max_tokens = cfg.max_tokens(model);
    let targets: Option<Vec<Vec<f64>>> = if cfg.objective.uses_md() {
        let table = table.ok_or_else(|| {
            Error::InvalidTrainingConfig(format!("{} needs a PLL table", cfg.objective.name()))
        })?;
        table.lookup_all(corpus.hypotheses())?;
        Some(
            corpus
                .records
                .iter()
                .map(|r| table.lookup_all(r.hyps.iter().map(|h| h.tokens.as_slice())))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let mut log = TrainLog::new(cfg.objective);
    let mut framed: Vec<Vec<Vec<u32>>> = Vec::with_capacity(corpus.len());
    for r in &corpus.records {
        framed.push(
            r.hyps
                .iter()
                .map(|h| {
                    let (kept, cut) = truncate(&h.tokens, max_tokens);
                    log.truncated += usize::from(cut);
                    Vocab::frame(&model.vocab().encode(kept))
                })
                .collect(),
        );
    }
    let mut eligible = Vec::new();
    for (i, r) in corpus.records.iter().enumerate() {
        match ineligible(r.errors()?) {
            Some(count) => count(&mut log.skipped),
            None => eligible.push(i),
        }
    }
    if eligible.is_empty() {
        return Ok(log);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = Sampler::new(eligible.len());
    let mut adam = Adam::new(cfg.learning_rate, model.params());
    for step in 0..cfg.steps {
        let idx: Vec<usize> = sampler.batch(cfg.batch_size, &mut rng).into_iter().map(|i| eligible[i]).collect();
        let mut seqs = Vec::new();
        for &u in &idx {
            seqs.extend(framed[u].iter().cloned());
        }
        let mut g = Graph::new();
        let p = model.bind(&mut g, true);
        let batch = Batch::new(&seqs)?;
        let h = model.hidden_states(&mut g, &p, &batch)?;
        let scores = model.cls_head(&mut g, &p, h, &batch)?;
        let mut terms: Vec<Var> = Vec::with_capacity(idx.len());
        let (mut disc_total, mut md_total, mut temps) = (0.0, 0.0, Vec::new());
        let mut offset = 0;
        for &u in &idx {
            let r = &corpus.records[u];
            let n = r.len();
            let rows: Vec<usize> = (offset..offset + n).collect();
            offset += n;
            let sl = g.gather_rows(scores, &rows)?;
            let sa = g.constant(Tensor::matrix(n, 1, r.first_pass_scores())?);
            let weighted = g.scale(sl, cfg.beta)?;
            let fused = g.add(sa, weighted)?;
            let errors = r.errors()?;
            let disc = if cfg.objective.is_mwed() {
                let t = match mwed_temperature(g.value(fused).data(), errors)? {
                    Temperature::Value(t) => t,
                    Temperature::Clamped(t) => {
                        log.skipped.clamped_temperature += 1;
                        t
                    }
                    Temperature::Skip => unreachable!("zero-error lists are filtered above"),
                };
                temps.push(t);
                mwed_loss(&mut g, fused, errors, t)?
            } else {
                mwer_loss(&mut g, fused, errors)?
            };
            disc_total += g.scalar(disc);
            let term = match &targets {
                Some(t) => {
                    let md = md_sum(&mut g, sl, &t[u])?;
                    md_total += g.scalar(md);
                    fused_loss(&mut g, disc, md, cfg.lambda)?
                }
                None => disc,
            };
            terms.push(term);
        }
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = g.add(sum, t)?;
        }
        let count = terms.len() as f64;
        let loss = g.scale(sum, 1.0 / count)?;
        g.backward(loss)?;
        let report = LossReport {
            md_sum: targets.as_ref().map(|_| md_total),
            discriminative: Some(disc_total / count),
            total: g.scalar(loss),
            lambda: targets.as_ref().map(|_| cfg.lambda),
            temperature: (!temps.is_empty()).then(|| temps.iter().sum::<f64>() / temps.len() as f64),
        };
        apply(model, &mut adam, &g, &p, cfg.clip_norm)?;
        log.updates += 1;
        log.record(cfg, step, report);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::data::{Hypothesis, NBestRecord};

    fn model(seed: u64) -> EncoderModel {
        let v = Vocab::from_words(["a", "b", "c", "d", "e", "f"]);
        let mut cfg = ModelConfig::toy(v.len());
        cfg.hidden = 16;
        cfg.ffn = 16;
        cfg.max_len = 10;
        cfg.seed = seed;
        EncoderModel::new(cfg, v).unwrap()
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn record(id: &str, reference: &str, hyps: &[(&str, f64)]) -> NBestRecord {
        let mut r = NBestRecord {
            id: id.into(),
            reference: words(reference),
            hyps: hyps.iter().map(|(t, s)| Hypothesis { tokens: words(t), score: *s }).collect(),
            eps: None,
        };
        r.annotate();
        r
    }

    #[test]
    fn objective_names_round_trip() {
        for o in [
            Objective::Mlm,
            Objective::Md,
            Objective::MwerOnly,
            Objective::MwedOnly,
            Objective::MdMwer,
            Objective::MdMwed,
        ] {
            assert_eq!(o.name().parse::<Objective>().unwrap(), o);
            assert_eq!(serde_json::to_value(o).unwrap(), o.name());
        }
        assert!("mwer".parse::<Objective>().is_err());
    }

    #[test]
    fn config_validation_names_the_field() {
        let mut c = TrainingConfig::new(Objective::Md);
        c.learning_rate = 0.0;
        assert!(matches!(c.validate(), Err(Error::InvalidTrainingConfig(m)) if m.contains("learning_rate")));
        let mut c = TrainingConfig::new(Objective::Mlm);
        c.mask_rate = 0.0;
        assert!(c.validate().is_err());
        let c = TrainingConfig::new(Objective::Md);
        let mut m = model(0);
        assert!(train_domain_adapt(&mut m, &TextCorpus::new(vec![words("a")]), &c).is_err());
    }

    #[test]
    fn adam_first_step_moves_each_coordinate_by_lr() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 3.0])];
        let mut adam = Adam::new(0.1, &p);
        let norm = adam.step(&mut p, &[Some(vec![0.5, -0.25, 0.0])], 100.0);
        assert!((norm - (0.3125f64).sqrt()).abs() < 1e-15);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 1.9).abs() < 1e-6 && d[2] == 3.0);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut p = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut a = Adam::new(1.0, &p);
        let mut q = p.clone();
        let mut b = Adam::new(1.0, &q);
        a.step(&mut p, &[Some(vec![30.0, 40.0])], 1.0);
        b.step(&mut q, &[Some(vec![0.6, 0.8])], 1.0);
        for (x, y) in p[0].data().iter().zip(q[0].data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn masking_follows_the_recipe() {
        let v = Vocab::from_words((0..50).map(|i| format!("w{i}")));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let framed = Vocab::frame(&(0..20).map(|i| 5 + i).collect::<Vec<u32>>());
        let (mut selected, mut masked, mut kept, mut total) = (0usize, 0usize, 0usize, 0usize);
        for _ in 0..4000 {
            let (input, pos) = mask_sequence(&framed, 0.15, &v, &mut rng);
            assert_eq!(input[0], Vocab::CLS_ID);
            assert_eq!(*input.last().unwrap(), Vocab::SEP_ID);
            total += 20;
            selected += pos.len();
            for t in pos {
                assert!((1..=20).contains(&t));
                masked += usize::from(input[t] == Vocab::MASK_ID);
                kept += usize::from(input[t] == framed[t]);
            }
            for t in 1..=20 {
                if input[t] != framed[t] && input[t] != Vocab::MASK_ID {
                    assert!(v.word_ids().contains(&input[t]));
                }
            }
        }
        let rate = selected as f64 / total as f64;
        assert!((rate - 0.15).abs() < 0.01, "{rate}");
        let m = masked as f64 / selected as f64;
        assert!((m - 0.8).abs() < 0.02, "{m}");
        let k = kept as f64 / selected as f64;
        // unchanged on purpose, or replaced by the same word by chance
        assert!((k - 0.1 - 0.1 / 50.0).abs() < 0.02, "{k}");
    }

    #[test]
    fn zero_steps_leave_models_unchanged() {
        let text = TextCorpus::new(vec![words("a b c"), words("d e")]);
        let mut table = PllTable::new();
        let m0 = model(1);
        crate::pipeline::pll_table::precompute_pll(&m0, text.sentences.iter().map(Vec::as_slice), &mut table, 10)
            .unwrap();
        let mut cfg = TrainingConfig::new(Objective::Mlm);
        cfg.steps = 0;
        let mut m = model(1);
        train_domain_adapt(&mut m, &text, &cfg).unwrap();
        assert_eq!(m.checksum(), m0.checksum());
        cfg.objective = Objective::Md;
        train_md(&mut m, &text, &table, &cfg).unwrap();
        assert_eq!(m.checksum(), m0.checksum());
        let corpus = NBestCorpus::new(None, vec![record("u", "a b", &[("a b", 1.0), ("a c", 2.0)])]).unwrap();
        cfg.objective = Objective::MwerOnly;
        train_discriminative(&mut m, &corpus, None, &cfg).unwrap();
        assert_eq!(m.checksum(), m0.checksum());
        assert_eq!(m.counters().updates(), 0);
    }

    #[test]
    fn md_requires_every_target() {
        let text = TextCorpus::new(vec![words("a b c")]);
        let cfg = TrainingConfig::new(Objective::Md);
        let mut m = model(0);
        let err = train_md(&mut m, &text, &PllTable::new(), &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingPll { count: 1, .. }));
    }

    #[test]
    fn md_overfits_a_single_sequence() {
        let text = TextCorpus::new(vec![words("a b c d")]);
        let mut table = PllTable::new();
        table.insert(crate::pipeline::pll_table::PllEntry { tokens: words("a b c d"), pll: 7.5, truncated: false });
        let mut cfg = TrainingConfig::new(Objective::Md);
        cfg.steps = 300;
        cfg.learning_rate = 3e-3;
        cfg.batch_size = 1;
        let mut m = model(2);
        train_md(&mut m, &text, &table, &cfg).unwrap();
        let s = m.cls_score(&Vocab::frame(&m.vocab().encode(&words("a b c d")))).unwrap();
        assert!((s - 7.5).powi(2) < 1e-3, "{s}");
    }

    #[test]
    fn degenerate_lists_are_skipped_and_counted() {
        let corpus = NBestCorpus::new(
            None,
            vec![
                record("one", "a b", &[("a c", 1.0)]),
                record("flat", "a b", &[("a c", 1.0), ("c b", 2.0)]),
                record("clean", "a b", &[("a b", 1.0)]),
            ],
        )
        .unwrap();
        for o in [Objective::MwerOnly, Objective::MwedOnly] {
            let mut cfg = TrainingConfig::new(o);
            cfg.steps = 5;
            let mut m = model(3);
            let before = m.checksum();
            let log = train_discriminative(&mut m, &corpus, None, &cfg).unwrap();
            assert_eq!(m.checksum(), before);
            assert_eq!(log.updates, 0);
            assert_eq!(log.skipped.single_hypothesis, 2);
            assert_eq!(log.skipped.equal_errors, 1);
        }
    }

    #[test]
    fn unannotated_corpora_are_rejected() {
        let mut r = record("u", "a b", &[("a b", 1.0), ("a c", 2.0)]);
        r.eps = None;
        let corpus = NBestCorpus::new(None, vec![r]).unwrap();
        let mut m = model(0);
        let err = train_discriminative(&mut m, &corpus, None, &TrainingConfig::new(Objective::MwerOnly));
        assert!(matches!(err, Err(Error::NotAnnotated(id)) if id == "u"));
        let err = train_discriminative(&mut m, &corpus, None, &TrainingConfig::new(Objective::Md));
        assert!(err.is_err());
    }

    #[test]
    fn training_is_reproducible() {
        let corpus = NBestCorpus::new(
            None,
            vec![
                record("u1", "a b c", &[("a b d", 1.0), ("a b c", 1.5), ("a c", 2.0)]),
                record("u2", "d e", &[("d f", 0.5), ("d e", 0.7)]),
            ],
        )
        .unwrap();
        let mut cfg = TrainingConfig::new(Objective::MwedOnly);
        cfg.steps = 4;
        cfg.batch_size = 2;
        let run = || {
            let mut m = model(4);
            let log = train_discriminative(&mut m, &corpus, None, &cfg).unwrap();
            (m.checksum(), serde_json::to_string(&log).unwrap())
        };
        assert_eq!(run(), run());
    }
}
