use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Vocab};
use crate::autodiff::{AttentionSpec, Graph, Tensor, Var};
use crate::error::{Error, Result};

const PER_LAYER: usize = 12;
const EMBEDDING_PARAMS: usize = 4;

/// Token sequences stacked row-wise and right-padded to a common length.
#[derive(Clone, Debug)]
pub struct Batch {
    ids: Vec<u32>,
    valid: Arc<Vec<bool>>,
    lens: Vec<usize>,
    seq_len: usize,
}

impl Batch {
    /// Pads every sequence with `[PAD]` up to the longest one.
    pub fn new(seqs: &[Vec<u32>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seq_len == 0 {
            return Err(Error::InvalidInput("batch of empty sequences".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut valid = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(Vocab::PAD_ID, seq_len - s.len()));
            valid.extend(std::iter::repeat_n(true, s.len()));
            valid.extend(std::iter::repeat_n(false, seq_len - s.len()));
        }
        Ok(Self {
            ids,
            valid: Arc::new(valid),
            lens: seqs.iter().map(Vec::len).collect(),
            seq_len,
        })
    }

    /// Pre-padded sequences with an explicit mask (`true` = real token).
    /// Masked positions must form a suffix of each row.
    pub fn from_padded(seqs: &[Vec<u32>], mask: &[Vec<bool>]) -> Result<Self> {
        let seq_len = seqs.first().map(Vec::len).unwrap_or(0);
        if seq_len == 0 || seqs.len() != mask.len() {
            return Err(Error::InvalidInput("malformed padded batch".into()));
        }
        let mut lens = Vec::with_capacity(seqs.len());
        for (s, m) in seqs.iter().zip(mask) {
            if s.len() != seq_len || m.len() != seq_len {
                return Err(Error::shape("batch", &[s.len()], &[seq_len]));
            }
            let n = m.iter().take_while(|&&v| v).count();
            if n == 0 || m[n..].iter().any(|&v| v) {
                return Err(Error::InvalidInput("pad mask must be a non-empty prefix".into()));
            }
            lens.push(n);
        }
        Ok(Self {
            ids: seqs.concat(),
            valid: Arc::new(mask.concat()),
            lens,
            seq_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Row of position `t` of sequence `b` in the stacked hidden states.
    pub fn row(&self, b: usize, t: usize) -> usize {
        b * self.seq_len + t
    }
}

/// Parameter handles of a model placed on a graph, in canonical order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn layer(&self, l: usize, k: usize) -> Var {
        self.vars[EMBEDDING_PARAMS + l * PER_LAYER + k]
    }

    fn head(&self, layers: usize, k: usize) -> Var {
        self.vars[EMBEDDING_PARAMS + layers * PER_LAYER + k]
    }
}

/// Instrumentation counters; not part of the checkpoint.
#[derive(Debug, Default)]
pub struct Counters {
    forward_passes: AtomicU64,
    updates: AtomicU64,
}

impl Counters {
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    /// Optimizer steps applied to the parameters.
    pub fn updates(&self) -> u64 {
        self.updates.load(Ordering::Relaxed)
    }
}

impl Clone for Counters {
    fn clone(&self) -> Self {
        Self {
            forward_passes: AtomicU64::new(self.forward_passes()),
            updates: AtomicU64::new(self.updates()),
        }
    }
}

/// Bidirectional transformer encoder with an MLM head and a CLS scoring head.
///
/// Post-layer-norm BERT layout: token + learned position embeddings, layer
/// norm, then `layers` blocks of self-attention and a GELU feed-forward
/// network. The MLM head is an untied projection to the vocabulary; the
/// scoring head reads the `[CLS]` state through one GELU hidden layer and a
/// scalar output.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    config: ModelConfig,
    vocab: Vocab,
    names: Vec<String>,
    params: Vec<Tensor>,
    counters: Counters,
}

fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f, p) = (c.vocab_size, c.hidden, c.ffn, c.max_len);
    let mut out = vec![
        ("embeddings.token".to_string(), vec![v, d]),
        ("embeddings.position".to_string(), vec![p, d]),
        ("embeddings.norm.gamma".to_string(), vec![d]),
        ("embeddings.norm.beta".to_string(), vec![d]),
    ];
    for l in 0..c.layers {
        let n = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (n("attention.qkv.weight"), vec![d, 3 * d]),
            (n("attention.qkv.bias"), vec![3 * d]),
            (n("attention.out.weight"), vec![d, d]),
            (n("attention.out.bias"), vec![d]),
            (n("attention.norm.gamma"), vec![d]),
            (n("attention.norm.beta"), vec![d]),
            (n("ffn.inner.weight"), vec![d, f]),
            (n("ffn.inner.bias"), vec![f]),
            (n("ffn.outer.weight"), vec![f, d]),
            (n("ffn.outer.bias"), vec![d]),
            (n("ffn.norm.gamma"), vec![d]),
            (n("ffn.norm.beta"), vec![d]),
        ]);
    }
    out.extend([
        ("mlm.weight".to_string(), vec![d, v]),
        ("mlm.bias".to_string(), vec![v]),
        ("cls.hidden.weight".to_string(), vec![d, d]),
        ("cls.hidden.bias".to_string(), vec![d]),
        ("cls.out.weight".to_string(), vec![d, 1]),
        ("cls.out.bias".to_string(), vec![1]),
    ]);
    out
}

impl EncoderModel {
    /// Seeded initialization: weights and embeddings from
    /// `N(0, init_std²)`, biases zero, layer-norm gains one.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} does not match vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).expect("validated std");
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in layout(&config) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            params.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(Self {
            config,
            vocab,
            names,
            params,
            counters: Counters::default(),
        })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_parts(config: ModelConfig, vocab: Vocab, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::InvalidConfig("vocabulary size mismatch".into()));
        }
        let expected = layout(&config);
        if expected.len() != named.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((en, es), (n, t)) in expected.into_iter().zip(named) {
            if en != n || es != t.shape() {
                return Err(Error::InvalidInput(format!(
                    "parameter {n} {:?} does not match expected {en} {es:?}",
                    t.shape()
                )));
            }
            names.push(n);
            params.push(t);
        }
        Ok(Self {
            config,
            vocab,
            names,
            params,
            counters: Counters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub(crate) fn record_update(&self) {
        self.counters.updates.fetch_add(1, Ordering::Relaxed);
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.params {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Places all parameters on `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect(),
        }
    }

    /// Rejects over-length sequences and out-of-range ids.
    pub fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.seq_len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: batch.seq_len(),
                max: self.config.max_len,
            });
        }
        if let Some(&id) = batch.ids().iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Final-layer hidden states, `(batch·seq_len) × hidden`.
    pub fn hidden_states(&self, g: &mut Graph, p: &Bound, batch: &Batch) -> Result<Var> {
        self.check_batch(batch)?;
        self.counters.forward_passes.fetch_add(1, Ordering::Relaxed);
        let c = &self.config;
        let tokens: Vec<usize> = batch.ids().iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).map(|r| r % batch.seq_len()).collect();
        let te = g.gather_rows(p.vars[0], &tokens)?;
        let pe = g.gather_rows(p.vars[1], &positions)?;
        let x = g.add(te, pe)?;
        let mut x = g.layer_norm(x, p.vars[2], p.vars[3])?;
        let spec = AttentionSpec {
            batch: batch.batch_size(),
            seq_len: batch.seq_len(),
            heads: c.heads,
            key_valid: Arc::clone(&batch.valid),
        };
        for l in 0..c.layers {
            let w = |k| p.layer(l, k);
            let qkv = g.matmul(x, w(0))?;
            let qkv = g.add_row(qkv, w(1))?;
            let att = g.attention(qkv, spec.clone())?;
            let o = g.matmul(att, w(2))?;
            let o = g.add_row(o, w(3))?;
            let r = g.add(x, o)?;
            x = g.layer_norm(r, w(4), w(5))?;
            let h = g.matmul(x, w(6))?;
            let h = g.add_row(h, w(7))?;
            let h = g.gelu(h)?;
            let f = g.matmul(h, w(8))?;
            let f = g.add_row(f, w(9))?;
            let r = g.add(x, f)?;
            x = g.layer_norm(r, w(10), w(11))?;
        }
        Ok(x)
    }

    /// Vocabulary log-probabilities at the given hidden-state rows.
    pub fn mlm_head(&self, g: &mut Graph, p: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        let l = self.config.layers;
        let h = g.gather_rows(hidden, rows)?;
        let logits = g.matmul(h, p.head(l, 0))?;
        let logits = g.add_row(logits, p.head(l, 1))?;
        g.log_softmax(logits)
    }

    /// Second-pass score of every sequence, read at its `[CLS]` row; `batch × 1`.
    pub fn cls_head(&self, g: &mut Graph, p: &Bound, hidden: Var, batch: &Batch) -> Result<Var> {
        let l = self.config.layers;
        let rows: Vec<usize> = (0..batch.batch_size()).map(|b| batch.row(b, 0)).collect();
        let cls = g.gather_rows(hidden, &rows)?;
        let h = g.matmul(cls, p.head(l, 2))?;
        let h = g.add_row(h, p.head(l, 3))?;
        let h = g.gelu(h)?;
        let s = g.matmul(h, p.head(l, 4))?;
        g.add_row(s, p.head(l, 5))
    }

    /// Hidden states of one framed sequence, `len × hidden`.
    pub fn encode(&self, ids: &[u32]) -> Result<Tensor> {
        self.encode_batch(&Batch::new(&[ids.to_vec()])?)
    }

    pub fn encode_batch(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let h = self.hidden_states(&mut g, &p, batch)?;
        Ok(g.value(h).clone())
    }

    /// Log-probability rows over the vocabulary at `positions` of a framed
    /// sequence; every queried position must hold `[MASK]`.
    pub fn mlm_log_probs(&self, ids: &[u32], positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let queries: Vec<(usize, usize)> = positions.iter().map(|&t| (0, t)).collect();
        let t = self.mlm_log_probs_batch(&[ids.to_vec()], &queries)?;
        Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
    }

    /// Batched form of [`EncoderModel::mlm_log_probs`]: `(sequence, position)`
    /// queries over several framed sequences in a single forward pass.
    pub fn mlm_log_probs_batch(&self, seqs: &[Vec<u32>], queries: &[(usize, usize)]) -> Result<Tensor> {
        for &(b, t) in queries {
            let seq = seqs
                .get(b)
                .ok_or_else(|| Error::InvalidInput(format!("query for missing sequence {b}")))?;
            if seq.get(t) != Some(&Vocab::MASK_ID) {
                return Err(Error::NotMasked(t));
            }
        }
        for s in seqs {
            self.check_ids(s)?;
        }
        let batch = Batch::new(seqs)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let h = self.hidden_states(&mut g, &p, &batch)?;
        let rows: Vec<usize> = queries.iter().map(|&(b, t)| batch.row(b, t)).collect();
        let lp = self.mlm_head(&mut g, &p, h, &rows)?;
        Ok(g.value(lp).clone())
    }

    /// Second-pass score `s^l` of one framed sequence.
    pub fn cls_score(&self, ids: &[u32]) -> Result<f64> {
        Ok(self.cls_scores(&[ids.to_vec()])?[0])
    }

    /// Scores of several framed sequences in one padded forward pass. Each
    /// sequence is encoded independently of the others.
    pub fn cls_scores(&self, seqs: &[Vec<u32>]) -> Result<Vec<f64>> {
        for s in seqs {
            self.check_ids(s)?;
        }
        let batch = Batch::new(seqs)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let h = self.hidden_states(&mut g, &p, &batch)?;
        let s = self.cls_head(&mut g, &p, h, &batch)?;
        Ok(g.value(s).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::autodiff::grad_check;

    fn vocab(n_words: usize) -> Vocab {
        Vocab::from_words((0..n_words).map(|i| format!("w{i:03}")))
    }

    fn small(seed: u64) -> EncoderModel {
        let v = vocab(20);
        let cfg = ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            ffn: 24,
            max_len: 12,
            vocab_size: v.len(),
            seed,
            init_std: 0.3,
        };
        EncoderModel::new(cfg, v).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, v: &Vocab, len: usize) -> Vec<u32> {
        let r = v.word_ids();
        Vocab::frame(&(0..len).map(|_| rng.random_range(r.clone())).collect::<Vec<_>>())
    }

    #[test]
    fn same_seed_same_checksum_different_seed_differs() {
        let v = vocab(40);
        let cfg = ModelConfig::toy(v.len());
        let a = EncoderModel::new(cfg.clone().with_seed(1), v.clone()).unwrap();
        let b = EncoderModel::new(cfg.clone().with_seed(1), v.clone()).unwrap();
        let c = EncoderModel::new(cfg.with_seed(2), v).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let v = vocab(59);
        assert_eq!(v.len(), 64);
        let cfg = ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            ffn: 32,
            max_len: 24,
            vocab_size: 64,
            seed: 0,
            init_std: 0.02,
        };
        let m = EncoderModel::new(cfg, v).unwrap();
        // embeddings: 64·16 token + 24·16 position + 2·16 norm = 1440
        // per layer: qkv 16·48+48, out 16·16+16, norm 32,
        //            ffn 16·32+32 + 32·16+16, norm 32 = 2224
        // mlm: 16·64 + 64 = 1088
        // cls head: 16·16 + 16 + 16 + 1 = 289
        assert_eq!(m.param_count(), 1440 + 2 * 2224 + 1088 + 289);
    }

    #[test]
    fn invalid_configs_are_named() {
        let v = vocab(10);
        let mut cfg = ModelConfig::toy(v.len());
        cfg.heads = 3;
        let e = EncoderModel::new(cfg, v.clone()).unwrap_err().to_string();
        assert!(e.contains("divisible by heads"), "{e}");
        let mut cfg = ModelConfig::toy(v.len());
        cfg.max_len = 2;
        let e = EncoderModel::new(cfg, v.clone()).unwrap_err().to_string();
        assert!(e.contains("max_len"), "{e}");
        let cfg = ModelConfig::toy(v.len() + 1);
        assert!(EncoderModel::new(cfg, v).is_err());
    }

    #[test]
    fn encode_shape_and_length_limit() {
        let m = small(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids = random_seq(&mut rng, m.vocab(), 5);
        let h = m.encode(&ids).unwrap();
        assert_eq!(h.shape(), &[7, 16]);
        let long = random_seq(&mut rng, m.vocab(), 11);
        assert!(matches!(m.encode(&long), Err(Error::SequenceTooLong { len: 13, max: 12 })));
    }

    #[test]
    fn padding_leaves_real_positions_unchanged() {
        let m = small(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in 1..6 {
            let ids = random_seq(&mut rng, m.vocab(), len);
            let alone = m.encode(&ids).unwrap();
            let mut padded = ids.clone();
            padded.resize(ids.len() + 4, Vocab::PAD_ID);
            let mask: Vec<bool> = (0..padded.len()).map(|i| i < ids.len()).collect();
            let batch = Batch::from_padded(&[padded], &[mask]).unwrap();
            let with_pad = m.encode_batch(&batch).unwrap();
            for (a, b) in alone.data().iter().zip(with_pad.data()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn distinct_sequences_give_distinct_cls_states() {
        let m = small(4);
        let a = m.encode(&Vocab::frame(&[5, 6, 7])).unwrap();
        let b = m.encode(&Vocab::frame(&[5, 8, 7])).unwrap();
        assert_ne!(a.row(0), b.row(0));
    }

    #[test]
    fn zero_projection_gives_uniform_rows() {
        let mut m = small(5);
        m.param_mut("mlm.weight").unwrap().data_mut().fill(0.0);
        let ids = Vocab::frame(&[Vocab::MASK_ID, 7, Vocab::MASK_ID]);
        let rows = m.mlm_log_probs(&ids, &[1, 3]).unwrap();
        let want = -(m.vocab().len() as f64).ln();
        for row in rows {
            for v in row {
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn querying_unmasked_position_is_rejected() {
        let m = small(5);
        let ids = Vocab::frame(&[Vocab::MASK_ID, 7]);
        assert!(matches!(m.mlm_log_probs(&ids, &[2]), Err(Error::NotMasked(2))));
    }

    #[test]
    fn batched_queries_equal_single_queries() {
        let m = small(6);
        let ids = Vocab::frame(&[Vocab::MASK_ID, 9, Vocab::MASK_ID, Vocab::MASK_ID]);
        let all = m.mlm_log_probs(&ids, &[1, 3, 4]).unwrap();
        for (k, &t) in [1usize, 3, 4].iter().enumerate() {
            let one = &m.mlm_log_probs(&ids, &[t]).unwrap()[0];
            let lse = all[k].iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-8);
            for (a, b) in all[k].iter().zip(one) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cls_score_is_deterministic_and_zero_with_zero_head() {
        let mut m = small(7);
        let ids = Vocab::frame(&[5, 6, 9]);
        assert_eq!(m.cls_score(&ids).unwrap(), m.cls_score(&ids).unwrap());
        m.param_mut("cls.out.weight").unwrap().data_mut().fill(0.0);
        assert_eq!(m.cls_score(&ids).unwrap(), 0.0);
        assert_eq!(m.cls_score(&Vocab::frame(&[8])).unwrap(), 0.0);
    }

    #[test]
    fn cls_head_gradient_matches_finite_differences() {
        let m = small(8);
        let batch = Batch::new(&[Vocab::frame(&[5, 6, 9, 10])]).unwrap();
        let n = m.params().len();
        let head: Vec<Tensor> = m.params()[n - 4..].to_vec();
        let err = grad_check(
            |g, hp| {
                let mut vars: Vec<Var> = m.params()[..n - 4].iter().map(|t| g.constant(t.clone())).collect();
                vars.extend_from_slice(hp);
                let p = Bound::from_vars(vars);
                let h = m.hidden_states(g, &p, &batch)?;
                let s = m.cls_head(g, &p, h, &batch)?;
                g.sum(s)
            },
            &head,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn vocab_permutation_commutes_with_mlm(seed in 0u64..1000) {
            let m = small(seed);
            let v = m.vocab().clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Permute the ordinary word ids, keep reserved ids fixed.
            let words: Vec<u32> = v.word_ids().collect();
            let mut shuffled = words.clone();
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
            let mut perm: Vec<u32> = (0..v.len() as u32).collect();
            for (a, b) in words.iter().zip(&shuffled) {
                perm[*a as usize] = *b;
            }
            let mut tokens = v.tokens().to_vec();
            for (old, &new) in perm.iter().enumerate() {
                tokens[new as usize] = v.tokens()[old].clone();
            }
            let pv = Vocab::from_tokens(tokens).unwrap();
            let d = m.config().hidden;
            let mut named: Vec<(String, Tensor)> = m.param_names().iter().cloned().zip(m.params().iter().cloned()).collect();
            for (name, t) in named.iter_mut() {
                let src = t.clone();
                match name.as_str() {
                    "embeddings.token" => {
                        for (old, &new) in perm.iter().enumerate() {
                            t.data_mut()[new as usize * d..(new as usize + 1) * d].copy_from_slice(src.row(old));
                        }
                    }
                    "mlm.weight" => {
                        let vs = v.len();
                        for r in 0..d {
                            for (old, &new) in perm.iter().enumerate() {
                                t.data_mut()[r * vs + new as usize] = src.data()[r * vs + old];
                            }
                        }
                    }
                    "mlm.bias" => {
                        for (old, &new) in perm.iter().enumerate() {
                            t.data_mut()[new as usize] = src.data()[old];
                        }
                    }
                    _ => {}
                }
            }
            let pm = EncoderModel::from_parts(m.config().clone(), pv, named).unwrap();
            let ids = Vocab::frame(&[Vocab::MASK_ID, words[1], words[4], Vocab::MASK_ID]);
            let pids: Vec<u32> = ids.iter().map(|&i| perm[i as usize]).collect();
            let a = m.mlm_log_probs(&ids, &[1, 4]).unwrap();
            let b = pm.mlm_log_probs(&pids, &[1, 4]).unwrap();
            for (ra, rb) in a.iter().zip(&b) {
                for (old, &new) in perm.iter().enumerate() {
                    prop_assert!((ra[old] - rb[new as usize]).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn outputs_are_finite(seed in 0u64..1000, len in 1usize..10) {
            let m = small(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids = random_seq(&mut rng, m.vocab(), len);
            prop_assert!(m.encode(&ids).unwrap().is_finite());
            prop_assert!(m.cls_score(&ids).unwrap().is_finite());
        }
    }
}
