//! Synthetic n-best corpora.
//!
//! References come from a small weighted template grammar. Hypotheses are
//! sampled from a noisy channel (substitution, insertion, deletion), and
//! each hypothesis's first-pass score is the channel negative
//! log-likelihood of the edit path that produced it plus Gaussian noise.
//! Substitutions prefer acoustically confusable words, which are cheap for
//! the channel but usually ungrammatical in context, so a language model
//! has something to fix.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::data::{Hypothesis, NBestCorpus, NBestRecord, Split, TextCorpus};
use crate::error::{Error, Result};

/// Weighted sentence templates; `{name}` expands to a random entry of
/// `slots[name]`, and entries may hold several words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub templates: Vec<(f64, String)>,
    pub slots: BTreeMap<String, Vec<String>>,
    /// Acoustically confusable alternatives of a word.
    pub confusions: BTreeMap<String, Vec<String>>,
}

fn owned(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Grammar {
    /// Voice-assistant style commands and questions.
    pub fn builtin() -> Self {
        let templates = [
            (3.0, "play {artist} on {device}"),
            (3.0, "play some {genre} music"),
            (2.0, "play {song} by {artist}"),
            (1.0, "play the next song"),
            (2.0, "what is the weather in {city} {day}"),
            (2.0, "will it rain in {city} {day}"),
            (2.0, "set a timer for {number} {unit}"),
            (2.0, "set an alarm for {number} {ampm}"),
            (2.0, "call {contact}"),
            (1.0, "call {contact} on {phone}"),
            (2.0, "navigate to {place}"),
            (1.0, "how far is {place}"),
            (2.0, "add {item} to my shopping list"),
            (1.0, "order {number} {item}"),
            (2.0, "turn {onoff} the {room} lights"),
            (1.0, "set the {room} lights to {color}"),
            (1.0, "what time is it in {city}"),
            (1.0, "who wrote {song}"),
            (1.0, "tell me a joke"),
            (1.0, "remind me to {chore} {day}"),
        ]
        .iter()
        .map(|(w, t)| (*w, t.to_string()))
        .collect();
        let mut slots = BTreeMap::new();
        let mut slot = |k: &str, v: &[&str]| {
            slots.insert(k.to_string(), owned(v));
        };
        slot("artist", &["adele", "drake", "queen", "madonna", "coldplay", "the beatles", "nirvana", "shakira"]);
        slot("device", &["the kitchen speaker", "my phone", "the tv", "the bedroom speaker"]);
        slot("genre", &["jazz", "rock", "classical", "country", "blues", "reggae", "pop"]);
        slot("song", &["yesterday", "hello", "yellow", "imagine", "thriller", "respect"]);
        slot("city", &["paris", "london", "boston", "seattle", "tokyo", "new york", "berlin"]);
        slot("day", &["today", "tomorrow", "tonight", "on monday", "on friday", "this weekend"]);
        slot("number", &["one", "two", "three", "four", "five", "six", "eight", "ten", "twenty"]);
        slot("unit", &["minutes", "hours", "seconds"]);
        slot("ampm", &["am", "pm", "in the morning", "at night"]);
        slot("contact", &["mom", "dad", "john", "sarah", "the office", "my sister", "doctor smith"]);
        slot("phone", &["speaker", "video", "mobile"]);
        slot("place", &["the airport", "the nearest gas station", "work", "home", "the mall", "central park"]);
        slot("item", &["milk", "eggs", "bread", "apples", "coffee", "paper towels", "batteries"]);
        slot("onoff", &["on", "off"]);
        slot("room", &["kitchen", "bedroom", "living room", "bathroom", "office"]);
        slot("color", &["red", "blue", "green", "white", "warm white"]);
        slot("chore", &["buy milk", "call mom", "water the plants", "pay the bills", "walk the dog"]);
        let mut confusions = BTreeMap::new();
        let mut conf = |k: &str, v: &[&str]| {
            confusions.insert(k.to_string(), owned(v));
        };
        conf("some", &["sum", "same"]);
        conf("to", &["two", "too"]);
        conf("two", &["to", "too"]);
        conf("for", &["four", "far"]);
        conf("four", &["for", "far"]);
        conf("far", &["for", "four"]);
        conf("one", &["won", "on"]);
        conf("on", &["one", "in", "off"]);
        conf("off", &["of", "on"]);
        conf("eight", &["ate", "hate"]);
        conf("weather", &["whether", "feather"]);
        conf("by", &["buy", "bye"]);
        conf("buy", &["by", "bye"]);
        conf("in", &["and", "on"]);
        conf("the", &["a", "then"]);
        conf("a", &["the", "uh"]);
        conf("it", &["eat", "at"]);
        conf("is", &["as", "his"]);
        conf("what", &["watt", "was"]);
        conf("will", &["well", "wheel"]);
        conf("rain", &["reign", "train"]);
        conf("play", &["pray", "place"]);
        conf("set", &["sat", "said"]);
        conf("call", &["cool", "fall"]);
        conf("add", &["and", "had"]);
        conf("my", &["might", "mike"]);
        conf("turn", &["torn", "learn"]);
        conf("lights", &["likes", "flights"]);
        conf("time", &["thyme", "dime"]);
        conf("who", &["how", "whom"]);
        conf("wrote", &["rote", "road"]);
        conf("me", &["be", "knee"]);
        conf("hours", &["ours", "flowers"]);
        conf("minutes", &["minute", "mints"]);
        conf("red", &["read", "bread"]);
        conf("blue", &["blew", "glue"]);
        conf("milk", &["silk", "milks"]);
        conf("eggs", &["legs", "x"]);
        conf("mom", &["bomb", "mum"]);
        conf("dad", &["bad", "dead"]);
        conf("home", &["phone", "hum"]);
        conf("work", &["walk", "word"]);
        conf("walk", &["work", "woke"]);
        conf("next", &["text", "nest"]);
        conf("music", &["muse", "magic"]);
        conf("timer", &["time", "tamer"]);
        conf("alarm", &["a", "alarmed"]);
        conf("list", &["lost", "least"]);
        conf("joke", &["choke", "jock"]);
        conf("tonight", &["to night", "tonite"]);
        conf("today", &["to day", "today's"]);
        conf("hello", &["hollow", "halo"]);
        conf("yellow", &["hello", "mellow"]);
        Self { templates, slots, confusions }
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::InvalidConfig("grammar has no templates".into()));
        }
        for (w, t) in &self.templates {
            if !(*w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!("template {t:?} has weight {w}")));
            }
            for part in t.split_whitespace() {
                if let Some(name) = slot_name(part) {
                    match self.slots.get(name) {
                        Some(v) if !v.is_empty() => {}
                        _ => return Err(Error::InvalidConfig(format!("template {t:?} uses unknown slot {name}"))),
                    }
                }
            }
        }
        Ok(())
    }

    /// Every word the grammar or its confusions can produce, sorted.
    pub fn words(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for (_, t) in &self.templates {
            set.extend(t.split_whitespace().filter(|p| slot_name(p).is_none()).map(str::to_string));
        }
        for fillers in self.slots.values() {
            set.extend(fillers.iter().flat_map(|f| f.split_whitespace()).map(str::to_string));
        }
        for (k, alts) in &self.confusions {
            set.insert(k.clone());
            set.extend(alts.iter().flat_map(|f| f.split_whitespace()).map(str::to_string));
        }
        set.into_iter().collect()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<String> {
        let weights = WeightedIndex::new(self.templates.iter().map(|(w, _)| *w)).expect("validated weights");
        let template = &self.templates[weights.sample(rng)].1;
        let mut out = Vec::new();
        for part in template.split_whitespace() {
            match slot_name(part) {
                Some(name) => {
                    let fillers = &self.slots[name];
                    let f = &fillers[rng.random_range(0..fillers.len())];
                    out.extend(f.split_whitespace().map(str::to_string));
                }
                None => out.push(part.to_string()),
            }
        }
        out
    }
}

fn slot_name(part: &str) -> Option<&str> {
    part.strip_prefix('{').and_then(|p| p.strip_suffix('}'))
}

/// Generator settings. Rates are per reference token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub grammar: Grammar,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Maximum hypotheses per utterance.
    pub n_best: usize,
    pub sub_rate: f64,
    pub ins_rate: f64,
    pub del_rate: f64,
    /// Share of substitutions drawn from a word's confusion set, when it has one.
    pub confusable_rate: f64,
    /// Multiplier on the channel negative log-likelihood.
    pub acoustic_scale: f64,
    /// Standard deviation of the Gaussian noise added to first-pass scores.
    pub score_noise: f64,
    /// Probability that the reference is allowed into the n-best list.
    pub reference_rate: f64,
    /// Channel samples drawn per list slot before deduplication.
    pub pool_factor: usize,
    /// Size of each text-only corpus (MLM and MD).
    pub text_sentences: usize,
    /// Share of the MD sentences passed through the channel.
    pub text_noise_rate: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            grammar: Grammar::builtin(),
            train: 2000,
            dev: 300,
            test: 300,
            n_best: 5,
            sub_rate: 0.12,
            ins_rate: 0.03,
            del_rate: 0.04,
            confusable_rate: 0.8,
            acoustic_scale: 1.0,
            score_noise: 2.0,
            reference_rate: 0.7,
            pool_factor: 4,
            text_sentences: 4000,
            text_noise_rate: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, r) in [
            ("sub_rate", self.sub_rate),
            ("ins_rate", self.ins_rate),
            ("del_rate", self.del_rate),
            ("confusable_rate", self.confusable_rate),
            ("reference_rate", self.reference_rate),
            ("text_noise_rate", self.text_noise_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} ({r}) must lie in [0, 1]"));
            }
        }
        if self.ins_rate >= 1.0 {
            return bad("ins_rate must be below 1".into());
        }
        if self.sub_rate + self.del_rate >= 1.0 {
            return bad(format!(
                "sub_rate + del_rate ({}) must be below 1",
                self.sub_rate + self.del_rate
            ));
        }
        if self.n_best == 0 || self.pool_factor == 0 {
            return bad("n_best and pool_factor must be positive".into());
        }
        if !(self.score_noise >= 0.0 && self.score_noise.is_finite()) {
            return bad(format!("score_noise ({}) must be non-negative", self.score_noise));
        }
        if !(self.acoustic_scale > 0.0 && self.acoustic_scale.is_finite()) {
            return bad(format!("acoustic_scale ({}) must be positive", self.acoustic_scale));
        }
        Ok(())
    }
}

/// Counts of the edit operations the channel applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelOps {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// The corruption channel of a [`GeneratorConfig`].
pub struct Channel<'a> {
    cfg: &'a GeneratorConfig,
    words: Vec<String>,
}

impl<'a> Channel<'a> {
    pub fn new(cfg: &'a GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, words: cfg.grammar.words() })
    }

    fn random_word(&self, rng: &mut impl Rng) -> &str {
        &self.words[rng.random_range(0..self.words.len())]
    }

    /// One corrupted copy of `reference` and the negative log-likelihood of
    /// the edit path taken.
    pub fn corrupt(&self, reference: &[String], rng: &mut impl Rng) -> (Vec<String>, f64, ChannelOps) {
        let c = self.cfg;
        let v = self.words.len() as f64;
        let keep = 1.0 - c.sub_rate - c.del_rate;
        let mut out = Vec::with_capacity(reference.len() + 2);
        let mut nll = 0.0;
        let mut ops = ChannelOps::default();
        for word in reference {
            let u: f64 = rng.random();
            if u < c.del_rate {
                nll -= c.del_rate.ln();
                ops.deletions += 1;
            } else if u < c.del_rate + c.sub_rate {
                nll -= c.sub_rate.ln();
                ops.substitutions += 1;
                let alts = c.grammar.confusions.get(word).filter(|a| !a.is_empty());
                match alts {
                    Some(alts) if rng.random::<f64>() < c.confusable_rate => {
                        let alt = &alts[rng.random_range(0..alts.len())];
                        nll -= (c.confusable_rate / alts.len() as f64).ln();
                        out.extend(alt.split_whitespace().map(str::to_string));
                    }
                    _ => {
                        let share = if alts.is_some() { 1.0 - c.confusable_rate } else { 1.0 };
                        nll -= (share / v).ln();
                        out.push(self.random_word(rng).to_string());
                    }
                }
            } else {
                nll -= keep.ln();
                out.push(word.clone());
            }
            if c.ins_rate > 0.0 && rng.random::<f64>() < c.ins_rate {
                nll -= (c.ins_rate / v).ln();
                ops.insertions += 1;
                out.push(self.random_word(rng).to_string());
            } else {
                nll -= (1.0 - c.ins_rate).ln();
            }
        }
        (out, nll, ops)
    }

    /// NLL of the reference itself: every token kept, nothing inserted.
    fn clean_nll(&self, len: usize) -> f64 {
        let c = self.cfg;
        -(len as f64) * ((1.0 - c.sub_rate - c.del_rate).ln() + (1.0 - c.ins_rate).ln())
    }

    /// One n-best record for `reference`.
    pub fn nbest(&self, id: String, reference: Vec<String>, rng: &mut impl Rng) -> NBestRecord {
        let c = self.cfg;
        let noise = Normal::new(0.0, c.score_noise).expect("validated noise");
        let allow_ref = rng.random::<f64>() < c.reference_rate;
        let mut seen: HashSet<Vec<String>> = HashSet::new();
        let mut pool: Vec<(Vec<String>, f64)> = Vec::new();
        if allow_ref {
            seen.insert(reference.clone());
            pool.push((reference.clone(), self.clean_nll(reference.len())));
        }
        for _ in 0..c.n_best * c.pool_factor {
            let (h, nll, _) = self.corrupt(&reference, rng);
            if (!allow_ref && h == reference) || !seen.insert(h.clone()) {
                continue;
            }
            pool.push((h, nll));
        }
        if pool.is_empty() {
            // Error-free channel: the reference is the only possible output.
            pool.push((reference.clone(), self.clean_nll(reference.len())));
        }
        let mut hyps: Vec<Hypothesis> = pool
            .into_iter()
            .map(|(tokens, nll)| Hypothesis {
                tokens,
                score: c.acoustic_scale * nll + noise.sample(rng),
            })
            .collect();
        hyps.sort_by(|a, b| a.score.total_cmp(&b.score));
        hyps.truncate(c.n_best);
        let mut r = NBestRecord { id, reference, hyps, eps: None };
        r.annotate();
        r
    }
}

/// Train/dev/test n-best corpora plus text-only corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub train: NBestCorpus,
    pub dev: NBestCorpus,
    pub test: NBestCorpus,
    /// Clean in-domain sentences.
    pub text: TextCorpus,
    /// Clean and channel-corrupted sentences.
    pub md_text: TextCorpus,
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Generates a corpus split. Each split draws from its own random stream,
/// so changing one split's size leaves the others untouched.
pub fn generate_split(cfg: &GeneratorConfig, split: Split, count: usize) -> Result<NBestCorpus> {
    let channel = Channel::new(cfg)?;
    let (k, tag) = match split {
        Split::Train => (1, "train"),
        Split::Dev => (2, "dev"),
        Split::Test => (3, "test"),
    };
    let mut rng = stream(cfg.seed, k);
    let records = (0..count)
        .map(|i| {
            let reference = cfg.grammar.sample(&mut rng);
            channel.nbest(format!("{tag}-{i:05}"), reference, &mut rng)
        })
        .collect();
    NBestCorpus::new(Some(split), records)
}

/// Clean grammar samples for MLM domain adaptation.
pub fn generate_text(cfg: &GeneratorConfig) -> Result<TextCorpus> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, 4);
    Ok(TextCorpus::new((0..cfg.text_sentences).map(|_| cfg.grammar.sample(&mut rng)).collect()))
}

/// Text for MD regression: grammar samples, a `text_noise_rate` share of
/// which are passed through the channel so the targets also cover
/// corrupted word sequences.
pub fn generate_md_text(cfg: &GeneratorConfig) -> Result<TextCorpus> {
    let channel = Channel::new(cfg)?;
    let mut rng = stream(cfg.seed, 5);
    let sentences = (0..cfg.text_sentences)
        .map(|_| {
            let s = cfg.grammar.sample(&mut rng);
            if rng.random::<f64>() < cfg.text_noise_rate {
                let (h, _, _) = channel.corrupt(&s, &mut rng);
                if h.is_empty() {
                    return s;
                }
                return h;
            }
            s
        })
        .collect();
    Ok(TextCorpus::new(sentences))
}

/// Generates every split with the configured sizes.
pub fn generate_synthetic_nbest(cfg: &GeneratorConfig) -> Result<SyntheticData> {
    Ok(SyntheticData {
        train: generate_split(cfg, Split::Train, cfg.train)?,
        dev: generate_split(cfg, Split::Dev, cfg.dev)?,
        test: generate_split(cfg, Split::Test, cfg.test)?,
        text: generate_text(cfg)?,
        md_text: generate_md_text(cfg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::metrics::align;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig { train: 40, dev: 10, test: 10, text_sentences: 30, seed, ..Default::default() }
    }

    #[test]
    fn builtin_grammar_is_valid() {
        let g = Grammar::builtin();
        g.validate().unwrap();
        let n = g.words().len();
        assert!((64..=256).contains(&n), "{n} words");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let words: HashSet<String> = g.words().into_iter().collect();
        for _ in 0..200 {
            let s = g.sample(&mut rng);
            assert!(!s.is_empty() && s.len() <= 12);
            assert!(s.iter().all(|w| words.contains(w)));
        }
    }

    #[test]
    fn invalid_rates_are_rejected() {
        let c = GeneratorConfig { sub_rate: 1.5, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(m)) if m.contains("sub_rate")));
        let c = GeneratorConfig { sub_rate: 0.6, del_rate: 0.5, ..Default::default() };
        assert!(c.validate().is_err());
        let c = GeneratorConfig { score_noise: -1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_rates_give_perfect_lists() {
        let cfg = GeneratorConfig { sub_rate: 0.0, ins_rate: 0.0, del_rate: 0.0, ..small(1) };
        let c = generate_split(&cfg, Split::Train, 50).unwrap();
        for r in &c.records {
            assert!(r.hyps.iter().all(|h| h.tokens == r.reference));
            assert!(r.errors().unwrap().iter().all(|&e| e == 0));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_nbest(&small(7)).unwrap();
        let b = generate_synthetic_nbest(&small(7)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_synthetic_nbest(&small(8)).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn records_are_sorted_distinct_and_annotated() {
        let d = generate_synthetic_nbest(&small(3)).unwrap();
        for r in d.train.records.iter().chain(&d.dev.records) {
            r.validate().unwrap();
            assert!(r.len() <= 5 && r.eps.is_some());
            assert!(r.hyps.windows(2).all(|w| w[0].score <= w[1].score));
            let unique: HashSet<_> = r.hyps.iter().map(|h| &h.tokens).collect();
            assert_eq!(unique.len(), r.len());
        }
    }

    #[test]
    fn measured_substitution_rate_matches_configuration() {
        let cfg = GeneratorConfig::default();
        let channel = Channel::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut subs, mut applied, mut words) = (0, 0, 0);
        for _ in 0..2000 {
            let r = cfg.grammar.sample(&mut rng);
            let (h, _, ops) = channel.corrupt(&r, &mut rng);
            subs += align(&r, &h).substitutions;
            applied += ops.substitutions;
            words += r.len();
        }
        for measured in [subs as f64 / words as f64, applied as f64 / words as f64] {
            let rel = (measured - cfg.sub_rate).abs() / cfg.sub_rate;
            assert!(rel < 0.2, "measured {measured}");
        }
    }

    #[test]
    fn corpus_has_an_oracle_gap() {
        let d = generate_split(&GeneratorConfig { seed: 2, ..Default::default() }, Split::Dev, 300).unwrap();
        let (mut first, mut oracle, mut words) = (0u32, 0u32, 0usize);
        for r in &d.records {
            let e = r.errors().unwrap();
            first += e[0];
            oracle += e.iter().min().unwrap();
            words += r.reference.len();
        }
        let (f, o) = (f64::from(first) / words as f64, f64::from(oracle) / words as f64);
        assert!(o <= 0.7 * f, "first-pass {f}, oracle {o}");
    }
}
