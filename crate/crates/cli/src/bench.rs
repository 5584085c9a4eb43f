//! Second-pass scoring latency per batch of hypotheses.

use std::time::Instant;

use rescore_core::model::EncoderModel;
use rescore_core::scoring::second_pass_scores;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MIN_ITERATIONS: usize = 100;
pub const MIN_WARMUP: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub batch_size: usize,
    /// Word tokens per hypothesis, before `[CLS]`/`[SEP]` framing.
    pub seq_lens: Vec<usize>,
    pub threads: usize,
    pub warmup: usize,
    pub iterations: usize,
    /// Label of the model the relative latencies are measured against.
    pub baseline: Option<String>,
    /// Picks the synthetic hypothesis tokens.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 5,
            seq_lens: vec![16, 32],
            threads: 2,
            warmup: MIN_WARMUP,
            iterations: MIN_ITERATIONS,
            baseline: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyEntry {
    pub model: String,
    pub params: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub threads: usize,
    pub iterations: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Mean latency relative to the baseline at the same length, in percent
    /// (+10 = 10% slower).
    pub relative_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyReport {
    pub tool: String,
    pub version: String,
    pub config: BenchConfig,
    pub entries: Vec<LatencyEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl LatencyReport {
    pub fn entry(&self, model: &str, seq_len: usize) -> Option<&LatencyEntry> {
        self.entries.iter().find(|e| e.model == model && e.seq_len == seq_len)
    }

    /// Checks the report's own invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.entries.is_empty() {
            return Err("report has no entries".into());
        }
        for e in &self.entries {
            let at = format!("{} @ SL {}", e.model, e.seq_len);
            if e.iterations < MIN_ITERATIONS {
                return Err(format!("{at}: {} iterations < {MIN_ITERATIONS}", e.iterations));
            }
            if e.batch_size == 0 || e.threads == 0 || e.params == 0 {
                return Err(format!("{at}: zero batch size, threads or parameters"));
            }
            let times = [e.mean_ms, e.p50_ms, e.p95_ms];
            if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                return Err(format!("{at}: latencies must be positive, got {times:?}"));
            }
            if e.p50_ms > e.p95_ms {
                return Err(format!("{at}: p50 {} > p95 {}", e.p50_ms, e.p95_ms));
            }
            if e.mean_ms < 0.1 * e.p50_ms || e.mean_ms > 10.0 * e.p95_ms {
                return Err(format!("{at}: mean {} outside [p50/10, p95*10]", e.mean_ms));
            }
            if e.relative_pct.is_some() != self.config.baseline.is_some() {
                return Err(format!("{at}: relative latency present iff a baseline is set"));
            }
        }
        if let Some(b) = &self.config.baseline {
            if !self.entries.iter().any(|e| &e.model == b) {
                return Err(format!("baseline {b:?} is not among the models"));
            }
        }
        Ok(())
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// `batch` hypotheses of `len` vocabulary words, chosen deterministically.
fn synthetic_batch(model: &EncoderModel, batch: usize, len: usize, seed: u64) -> Vec<Vec<String>> {
    let words: Vec<&str> = model.vocab().word_ids().filter_map(|i| model.vocab().token(i)).collect();
    let n = words.len() as u64;
    (0..batch as u64)
        .map(|b| {
            (0..len as u64)
                .map(|t| words[((seed + 31 * b + 17 * t + b * t) % n) as usize].to_string())
                .collect()
        })
        .collect()
}

/// Times `second_pass_scores` on each model at each sequence length.
pub fn bench_latency(models: &[(String, EncoderModel)], cfg: &BenchConfig) -> CliResult<LatencyReport> {
    if models.is_empty() {
        return Err(CliError::usage("bench needs at least one model"));
    }
    if cfg.batch_size == 0 || cfg.threads == 0 || cfg.seq_lens.is_empty() {
        return Err(CliError::config("batch size, threads and sequence lengths must be positive"));
    }
    if cfg.iterations < MIN_ITERATIONS || cfg.warmup < MIN_WARMUP {
        return Err(CliError::config(format!(
            "at least {MIN_WARMUP} warm-up and {MIN_ITERATIONS} timed iterations are required"
        )));
    }
    if let Some(b) = &cfg.baseline {
        if !models.iter().any(|(l, _)| l == b) {
            return Err(CliError::usage(format!("baseline {b:?} is not among the models")));
        }
    }
    for (label, m) in models {
        for &sl in &cfg.seq_lens {
            if sl == 0 || sl + 2 > m.config().max_len {
                return Err(CliError::model(format!(
                    "model {label} accepts at most {} tokens per hypothesis, benchmark asks for {sl}",
                    m.config().max_len - 2
                )));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;

    let mut entries = Vec::new();
    for (label, m) in models {
        let updates = m.counters().updates();
        for &sl in &cfg.seq_lens {
            let batch = synthetic_batch(m, cfg.batch_size, sl, cfg.seed);
            let mut samples = Vec::with_capacity(cfg.iterations);
            pool.install(|| -> CliResult<()> {
                for _ in 0..cfg.warmup {
                    second_pass_scores(m, &batch)?;
                }
                for _ in 0..cfg.iterations {
                    let t = Instant::now();
                    let s = second_pass_scores(m, &batch)?;
                    samples.push(t.elapsed().as_secs_f64() * 1e3);
                    std::hint::black_box(s);
                }
                Ok(())
            })?;
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            samples.sort_by(f64::total_cmp);
            entries.push(LatencyEntry {
                model: label.clone(),
                params: m.param_count(),
                batch_size: cfg.batch_size,
                seq_len: sl,
                threads: cfg.threads,
                iterations: cfg.iterations,
                mean_ms: mean,
                p50_ms: percentile(&samples, 0.5),
                p95_ms: percentile(&samples, 0.95),
                relative_pct: None,
            });
        }
        if m.counters().updates() != updates {
            return Err(CliError::model(format!("model {label} was updated while benchmarking")));
        }
    }
    if let Some(b) = &cfg.baseline {
        let base: Vec<(usize, f64)> = entries.iter().filter(|e| &e.model == b).map(|e| (e.seq_len, e.mean_ms)).collect();
        for e in &mut entries {
            let (_, ref_ms) = base.iter().find(|(sl, _)| *sl == e.seq_len).expect("baseline covers every length");
            e.relative_pct = Some(100.0 * (e.mean_ms - ref_ms) / ref_ms);
        }
    }
    Ok(LatencyReport {
        tool: crate::TOOL.into(),
        version: crate::VERSION.into(),
        config: cfg.clone(),
        entries,
        meta: serde_json::Value::Null,
    })
}
