//! Subcommand implementations.

use std::path::{Path, PathBuf};

use rescore_core::model::{checkpoint, EncoderModel, ModelConfig, Vocab};
use rescore_core::pipeline::recipe::RecipeConfig;
use rescore_core::pipeline::synth::generate_synthetic_nbest;
use rescore_core::pipeline::{
    distill_student, evaluate, precompute_pll, search_beta, train_discriminative, train_domain_adapt, train_md,
    BetaSearch, DistillConfig, GeneratorConfig, NBestCorpus, Objective, PllTable, SecondPassScorer, TextCorpus,
    TrainingConfig,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bench::{bench_latency, BenchConfig, LatencyReport};
use crate::error::{CliError, CliResult, Kind};
use crate::*;

pub(crate) fn dispatch(cmd: &Command) -> CliResult<String> {
    let summary = match cmd {
        Command::GenData(a) => gen_data(cmd, a)?,
        Command::Annotate(a) => annotate(cmd, a)?,
        Command::TrainMlm(a) => train_mlm(cmd, a)?,
        Command::Pll(a) => pll(cmd, a)?,
        Command::TrainMd(a) => train_md_cmd(cmd, a)?,
        Command::TrainDisc(a) => train_disc(cmd, a)?,
        Command::Distill(a) => distill(cmd, a)?,
        Command::SearchBeta(a) => search_beta_cmd(cmd, a)?,
        Command::Evaluate(a) => evaluate_cmd(cmd, a)?,
        Command::Bench(a) => bench(cmd, a)?,
    };
    Ok(summary.to_string())
}

// ---- paths and files ----

fn need_files<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> CliResult<()> {
    for p in paths {
        if !p.exists() || p.is_dir() {
            return Err(CliError::new(Kind::Io, format!("input file not found: {}", p.display())));
        }
    }
    Ok(())
}

fn need_out_dir(path: &Path) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::new(Kind::Io, format!("output directory not found: {}", dir.display())))
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn read_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(Kind::Io, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::new(Kind::Data, e.to_string()))?;
    text.push('\n');
    Ok(rescore_core::io::write_atomic(path, text.as_bytes())?)
}

/// The command line as parsed, plus the effective seed.
fn provenance(cmd: &Command, seed: Option<u64>) -> Value {
    json!({"tool": TOOL, "version": VERSION, "seed": seed, "command": cmd})
}

fn load_model(path: &Path) -> CliResult<(EncoderModel, Value)> {
    checkpoint::load(path).map_err(|e| match e {
        rescore_core::Error::Io { .. } => e.into(),
        e => CliError::model(format!("{}: {e}", path.display())),
    })
}

fn save_model(model: &EncoderModel, meta: Value, path: &Path) -> CliResult<()> {
    Ok(checkpoint::save(model, meta, path)?)
}

fn load_nbest(path: &Path) -> CliResult<NBestCorpus> {
    Ok(NBestCorpus::load(path, None)?)
}

fn load_words(path: &Path) -> CliResult<Vec<String>> {
    let words: Vec<String> = rescore_core::io::read_text(path)?.into_iter().flatten().collect();
    if words.is_empty() {
        return Err(CliError::new(Kind::Data, format!("{}: empty vocabulary", path.display())));
    }
    Ok(words)
}

fn builtin_model(size: &str, vocab_size: usize) -> CliResult<ModelConfig> {
    match size {
        "toy" => Ok(ModelConfig::toy(vocab_size)),
        "teacher" => Ok(ModelConfig::teacher(vocab_size)),
        other => Err(CliError::usage(format!("unknown model size {other:?} (toy or teacher)"))),
    }
}

fn objective(name: &str) -> CliResult<Objective> {
    Ok(name.parse::<Objective>()?)
}

/// Overlays the JSON config file and then the flags onto `default`.
fn training_config(flags: &TrainFlags, objective: Objective, default: TrainingConfig) -> CliResult<TrainingConfig> {
    let mut merged = serde_json::to_value(&default).expect("config serializes");
    if let Some(path) = &flags.config {
        let file: Value = read_config(path)?;
        let Value::Object(fields) = file else {
            return Err(CliError::config(format!("{}: expected a JSON object", path.display())));
        };
        if let Some(o) = fields.get("objective") {
            if o != objective.name() {
                return Err(CliError::config(format!(
                    "{}: objective {o} does not match {}",
                    path.display(),
                    objective.name()
                )));
            }
        }
        merged.as_object_mut().expect("object").extend(fields);
    }
    let mut cfg: TrainingConfig = serde_json::from_value(merged).map_err(|e| CliError::config(e.to_string()))?;
    cfg.objective = objective;
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(s) = flags.steps {
        cfg.steps = s;
    }
    if let Some(lr) = flags.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(b) = flags.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn recipe_defaults(seed: Option<u64>) -> RecipeConfig {
    RecipeConfig::toy(seed.unwrap_or(0))
}

// ---- commands ----

fn gen_data(cmd: &Command, a: &GenDataArgs) -> CliResult<Value> {
    need_files(&a.config)?;
    if !a.out.is_dir() {
        return Err(CliError::new(Kind::Io, format!("output directory not found: {}", a.out.display())));
    }
    let mut cfg: GeneratorConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for (field, v) in [(&mut cfg.train, a.train), (&mut cfg.dev, a.dev), (&mut cfg.test, a.test)] {
        if let Some(v) = v {
            *field = v;
        }
    }
    if let Some(n) = a.text_sentences {
        cfg.text_sentences = n;
    }
    let data = generate_synthetic_nbest(&cfg)?;
    let meta = json!({"provenance": provenance(cmd, Some(cfg.seed)), "generator": cfg});
    let mut written = Vec::new();
    for (name, corpus) in [("train.jsonl", &data.train), ("dev.jsonl", &data.dev), ("test.jsonl", &data.test)] {
        let p = a.out.join(name);
        corpus.save(&p)?;
        written.push(p);
    }
    for (name, text) in [("text.txt", &data.text), ("md_text.txt", &data.md_text)] {
        let p = a.out.join(name);
        text.save(&p)?;
        written.push(p);
    }
    let vocab = a.out.join("vocab.txt");
    let words: Vec<Vec<String>> = cfg.grammar.words().into_iter().map(|w| vec![w]).collect();
    rescore_core::io::write_text(&vocab, &words)?;
    written.push(vocab);
    for p in &written {
        write_json(&sidecar(p), &meta)?;
    }
    Ok(json!({
        "command": "gen-data",
        "train": data.train.len(), "dev": data.dev.len(), "test": data.test.len(),
        "text": data.text.len(), "md_text": data.md_text.len(), "vocab": words.len(),
    }))
}

fn annotate(cmd: &Command, a: &AnnotateArgs) -> CliResult<Value> {
    need_files([&a.input])?;
    need_out_dir(&a.out)?;
    let mut corpus = load_nbest(&a.input)?;
    corpus.annotate();
    corpus.save(&a.out)?;
    write_json(&sidecar(&a.out), &json!({"provenance": provenance(cmd, None)}))?;
    Ok(json!({"command": "annotate", "records": corpus.len()}))
}

fn train_mlm(cmd: &Command, a: &TrainMlmArgs) -> CliResult<Value> {
    need_files(a.text.iter().chain(&a.references).chain(&a.init).chain(&a.vocab).chain(&a.model_config))?;
    need_files(&a.train.config)?;
    need_out_dir(&a.out)?;
    let cfg = training_config(&a.train, Objective::Mlm, recipe_defaults(a.train.seed).mlm)?;
    let (mut model, parent) = match &a.init {
        Some(p) => {
            let (m, meta) = load_model(p)?;
            (m, meta)
        }
        None => {
            let words = load_words(a.vocab.as_ref().expect("clap requires --vocab without --init"))?;
            let vocab = Vocab::from_words(words);
            let mut mc = match &a.model_config {
                Some(p) => read_config::<ModelConfig>(p)?,
                None => builtin_model(a.size.as_deref().unwrap_or("toy"), vocab.len())?.with_seed(cfg.seed),
            };
            mc.vocab_size = vocab.len();
            if let Some(l) = a.max_len {
                mc.max_len = l;
            }
            (EncoderModel::new(mc, vocab)?, Value::Null)
        }
    };
    let mut text = TextCorpus::default();
    for p in &a.text {
        text.sentences.extend(TextCorpus::load(p)?.sentences);
    }
    for p in &a.references {
        text.sentences.extend(load_nbest(p)?.references().sentences);
    }
    let log = train_domain_adapt(&mut model, &text, &cfg)?;
    let final_loss = log.final_loss();
    let meta = json!({
        "provenance": provenance(cmd, Some(cfg.seed)),
        "training": cfg, "log": log, "parent": parent,
    });
    save_model(&model, meta, &a.out)?;
    Ok(json!({"command": "train-mlm", "params": model.param_count(), "sentences": text.len(), "final_loss": final_loss}))
}

fn pll(cmd: &Command, a: &PllArgs) -> CliResult<Value> {
    need_files([&a.model].into_iter().chain(&a.text).chain(&a.nbest).chain(&a.reuse))?;
    need_out_dir(&a.out)?;
    if a.text.is_empty() && a.nbest.is_empty() {
        return Err(CliError::usage("pll needs at least one --text or --nbest input"));
    }
    let (model, _) = load_model(&a.model)?;
    let mut table = match &a.reuse {
        Some(p) => PllTable::load(p)?,
        None => PllTable::new(),
    };
    let texts = a.text.iter().map(|p| TextCorpus::load(p)).collect::<Result<Vec<_>, _>>()?;
    let corpora = a.nbest.iter().map(|p| load_nbest(p)).collect::<CliResult<Vec<_>>>()?;
    let seqs = texts
        .iter()
        .flat_map(|t| t.sentences.iter().map(Vec::as_slice))
        .chain(corpora.iter().flat_map(|c| c.hypotheses()));
    let stats = precompute_pll(&model, seqs, &mut table, a.max_seq_len)?;
    table.save(&a.out)?;
    write_json(
        &sidecar(&a.out),
        &json!({"provenance": provenance(cmd, None), "model_config": model.config(), "stats": stats}),
    )?;
    Ok(json!({"command": "pll", "entries": table.len(), "stats": stats}))
}

fn train_md_cmd(cmd: &Command, a: &TrainMdArgs) -> CliResult<Value> {
    need_files([&a.model, &a.text, &a.pll].into_iter().chain(&a.train.config))?;
    need_out_dir(&a.out)?;
    let cfg = training_config(&a.train, Objective::Md, recipe_defaults(a.train.seed).md)?;
    let (mut model, parent) = load_model(&a.model)?;
    let text = TextCorpus::load(&a.text)?;
    let table = PllTable::load(&a.pll)?;
    let log = train_md(&mut model, &text, &table, &cfg)?;
    let final_loss = log.final_loss();
    let meta = json!({"provenance": provenance(cmd, Some(cfg.seed)), "training": cfg, "log": log, "parent": parent});
    save_model(&model, meta, &a.out)?;
    Ok(json!({"command": "train-md", "final_loss": final_loss}))
}

fn train_disc(cmd: &Command, a: &TrainDiscArgs) -> CliResult<Value> {
    need_files([&a.model, &a.nbest].into_iter().chain(&a.pll).chain(&a.train.config))?;
    need_out_dir(&a.out)?;
    let obj = objective(&a.objective)?;
    if !obj.is_discriminative() {
        return Err(CliError::usage(format!("train-disc cannot train {}", obj.name())));
    }
    if obj.uses_md() && a.pll.is_none() {
        return Err(CliError::usage(format!("{} needs --pll", obj.name())));
    }
    let defaults = recipe_defaults(a.train.seed).objective(obj);
    let cfg = training_config(&a.train, obj, defaults)?;
    let (mut model, parent) = load_model(&a.model)?;
    let corpus = load_nbest(&a.nbest)?;
    let table = a.pll.as_deref().map(PllTable::load).transpose()?;
    let log = train_discriminative(&mut model, &corpus, table.as_ref(), &cfg)?;
    let summary = json!({"command": "train-disc", "objective": obj.name(), "updates": log.updates,
        "final_loss": log.final_loss(), "skipped": log.skipped});
    let meta = json!({"provenance": provenance(cmd, Some(cfg.seed)), "training": cfg, "log": log, "parent": parent});
    save_model(&model, meta, &a.out)?;
    Ok(summary)
}

fn distill(cmd: &Command, a: &DistillArgs) -> CliResult<Value> {
    need_files(
        [&a.teacher, &a.text, &a.nbest]
            .into_iter()
            .chain(&a.student_config)
            .chain(&a.pll)
            .chain(&a.md_config)
            .chain(&a.disc_config),
    )?;
    need_out_dir(&a.out)?;
    if let Some(p) = &a.pll_out {
        need_out_dir(p)?;
    }
    let obj = objective(&a.objective)?;
    let defaults = recipe_defaults(a.seed);
    let flags = |config: &Option<PathBuf>, steps| TrainFlags {
        config: config.clone(),
        seed: a.seed,
        steps,
        learning_rate: None,
        batch_size: None,
    };
    let md = training_config(&flags(&a.md_config, a.md_steps), Objective::Md, defaults.md.clone())?;
    let disc = training_config(&flags(&a.disc_config, a.disc_steps), obj, defaults.objective(obj))?;
    let (teacher, teacher_meta) = load_model(&a.teacher)?;
    let student_config = match &a.student_config {
        Some(p) => read_config::<ModelConfig>(p)?,
        None => builtin_model(&a.student_size, teacher.vocab().len())?.with_seed(md.seed),
    };
    let text = TextCorpus::load(&a.text)?;
    let nbest = load_nbest(&a.nbest)?;
    let table = a.pll.as_deref().map(PllTable::load).transpose()?.unwrap_or_default();
    let dcfg = DistillConfig { md, discriminative: disc };
    let d = distill_student(&teacher, student_config, &text, &nbest, &dcfg, table)?;
    let summary = json!({
        "command": "distill",
        "teacher_params": teacher.param_count(),
        "student_params": d.student.param_count(),
        "pll": d.pll_stats,
        "final_loss": d.discriminative_log.final_loss(),
    });
    let prov = provenance(cmd, a.seed.or(Some(dcfg.md.seed)));
    if let Some(p) = &a.pll_out {
        d.table.save(p)?;
        write_json(&sidecar(p), &json!({"provenance": prov, "model_config": teacher.config(), "stats": d.pll_stats}))?;
    }
    let meta = json!({
        "provenance": prov, "distill": dcfg,
        "md_log": d.md_log, "log": d.discriminative_log, "teacher": teacher_meta,
    });
    save_model(&d.student, meta, &a.out)?;
    Ok(summary)
}

enum Scorer {
    Model(EncoderModel),
    Table(PllTable),
}

impl Scorer {
    fn paths(a: &ScorerArgs) -> impl Iterator<Item = &PathBuf> {
        a.model.iter().chain(&a.pll)
    }

    fn load(a: &ScorerArgs) -> CliResult<Self> {
        match (&a.model, &a.pll) {
            (Some(m), None) => Ok(Scorer::Model(load_model(m)?.0)),
            (None, Some(p)) => Ok(Scorer::Table(PllTable::load(p)?)),
            _ => Err(CliError::usage("exactly one of --model and --pll is required")),
        }
    }

    fn get(&self) -> &dyn SecondPassScorer {
        match self {
            Scorer::Model(m) => m,
            Scorer::Table(t) => t,
        }
    }
}

/// Output of `search-beta`.
#[derive(Serialize, Deserialize)]
struct BetaFile {
    tool: String,
    version: String,
    #[serde(flatten)]
    search: BetaSearch,
    meta: Value,
}

fn grid(max: f64, step: f64) -> CliResult<Vec<f64>> {
    if !(step > 0.0 && step.is_finite() && max >= 0.0 && max.is_finite()) {
        return Err(CliError::usage(format!("invalid grid: max {max}, step {step}")));
    }
    let n = (max / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| i as f64 * step).collect())
}

fn search_beta_cmd(cmd: &Command, a: &SearchBetaArgs) -> CliResult<Value> {
    need_files(Scorer::paths(&a.scorer).chain([&a.dev]))?;
    need_out_dir(&a.out)?;
    let grid = grid(a.grid_max, a.grid_step)?;
    let scorer = Scorer::load(&a.scorer)?;
    let dev = load_nbest(&a.dev)?;
    let search = search_beta(scorer.get(), &dev, &grid)?;
    let summary = json!({"command": "search-beta", "beta": search.beta, "wer": search.wer});
    let out = BetaFile { tool: TOOL.into(), version: VERSION.into(), search, meta: provenance(cmd, None) };
    write_json(&a.out, &out)?;
    Ok(summary)
}

fn evaluate_cmd(cmd: &Command, a: &EvaluateArgs) -> CliResult<Value> {
    need_files(Scorer::paths(&a.scorer).chain([&a.test]).chain(&a.beta_from))?;
    need_out_dir(&a.out)?;
    let beta = match (a.beta, &a.beta_from) {
        (Some(b), None) => b,
        (None, Some(p)) => read_config::<BetaFile>(p)?.search.beta,
        _ => return Err(CliError::usage("exactly one of --beta and --beta-from is required")),
    };
    let scorer = Scorer::load(&a.scorer)?;
    let test = load_nbest(&a.test)?;
    let mut report = evaluate(scorer.get(), &test, beta)?;
    report.config = provenance(cmd, None);
    write_json(&a.out, &report)?;
    Ok(json!({
        "command": "evaluate", "beta": beta, "wer": report.wer, "cer": report.cer,
        "first_pass_wer": report.first_pass_wer, "oracle_wer": report.oracle_wer,
    }))
}

fn bench(cmd: &Command, a: &BenchArgs) -> CliResult<Value> {
    let mut specs = Vec::new();
    for m in &a.models {
        let (label, path) = m
            .split_once('=')
            .filter(|(l, p)| !l.is_empty() && !p.is_empty())
            .ok_or_else(|| CliError::usage(format!("--model expects label=checkpoint, got {m:?}")))?;
        if specs.iter().any(|(l, _): &(String, PathBuf)| l == label) {
            return Err(CliError::usage(format!("duplicate model label {label:?}")));
        }
        specs.push((label.to_string(), PathBuf::from(path)));
    }
    need_files(specs.iter().map(|(_, p)| p))?;
    need_out_dir(&a.out)?;
    let models = specs
        .iter()
        .map(|(l, p)| Ok((l.clone(), load_model(p)?.0)))
        .collect::<CliResult<Vec<_>>>()?;
    let cfg = BenchConfig {
        batch_size: a.batch_size,
        seq_lens: a.seq_lens.clone(),
        threads: a.threads,
        warmup: a.warmup,
        iterations: a.iterations,
        baseline: a.baseline.clone(),
        seed: a.seed,
    };
    let mut report: LatencyReport = bench_latency(&models, &cfg)?;
    report.meta = provenance(cmd, Some(a.seed));
    report.validate().map_err(CliError::model)?;
    write_json(&a.out, &report)?;
    let means: Vec<Value> = report
        .entries
        .iter()
        .map(|e| json!({"model": e.model, "seq_len": e.seq_len, "mean_ms": e.mean_ms}))
        .collect();
    Ok(json!({"command": "bench", "entries": means}))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_includes_both_ends() {
        let g = grid(5.0, 0.05).unwrap();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], 0.0);
        assert!((g[100] - 5.0).abs() < 1e-12);
        assert!(grid(1.0, 0.0).is_err());
    }

    #[test]
    fn sidecar_sits_next_to_the_file() {
        assert_eq!(sidecar(Path::new("out/train.jsonl")), Path::new("out/train.jsonl.meta.json"));
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"steps": 7, "learning_rate": 0.5}"#).unwrap();
        let flags = TrainFlags { config: Some(p.clone()), seed: Some(3), steps: None, learning_rate: Some(0.1), batch_size: None };
        let cfg = training_config(&flags, Objective::Md, TrainingConfig::new(Objective::Md)).unwrap();
        assert_eq!((cfg.steps, cfg.learning_rate, cfg.seed), (7, 0.1, 3));

        std::fs::write(&p, r#"{"objective": "mlm"}"#).unwrap();
        let err = training_config(&flags, Objective::Md, TrainingConfig::new(Objective::Md)).unwrap_err();
        assert_eq!(err.kind, Kind::Config);
    }
}
