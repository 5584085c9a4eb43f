//! The full rescoring recipe on synthetic data: MLM domain adaptation,
//! PLL precomputation, MD pretraining, discriminative fine-tuning of each
//! objective, β search on dev and test evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{NBestCorpus, TextCorpus};
use super::distill::{distill_student, DistillConfig};
use super::eval::{evaluate, search_beta, BetaSearch, EvalReport, SecondPassScorer};
use super::pll_table::{precompute_pll, PllTable};
use super::synth::{generate_synthetic_nbest, GeneratorConfig, SyntheticData};
use super::train::{train_discriminative, train_domain_adapt, train_md, Objective, TrainLog, TrainingConfig};
use crate::error::Result;
use crate::model::{EncoderModel, ModelConfig, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub mlm: TrainingConfig,
    pub md: TrainingConfig,
    /// Settings shared by every discriminative run; the objective is
    /// replaced per run.
    pub discriminative: TrainingConfig,
    pub grid: Vec<f64>,
}

impl RecipeConfig {
    /// Toy-scale defaults with every seed derived from `seed`.
    pub fn toy(seed: u64) -> Self {
        let generator = GeneratorConfig { seed, ..Default::default() };
        let vocab = Vocab::from_words(generator.grammar.words());
        let model = ModelConfig::toy(vocab.len()).with_seed(seed);
        let mut mlm = TrainingConfig::new(Objective::Mlm);
        mlm.learning_rate = 2e-3;
        mlm.batch_size = 32;
        mlm.steps = 1500;
        mlm.seed = seed;
        let mut md = TrainingConfig::new(Objective::Md);
        md.learning_rate = 1e-3;
        md.batch_size = 32;
        md.steps = 1500;
        md.seed = seed;
        let mut discriminative = TrainingConfig::new(Objective::MdMwer);
        discriminative.learning_rate = 3e-4;
        discriminative.batch_size = 16;
        discriminative.steps = 400;
        discriminative.seed = seed;
        Self { generator, model, mlm, md, discriminative, grid: super::eval::default_grid() }
    }

    pub fn objective(&self, objective: Objective) -> TrainingConfig {
        TrainingConfig { objective, ..self.discriminative.clone() }
    }
}

/// Dev search and test evaluation of one rescoring system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub name: String,
    pub dev: BetaSearch,
    pub test_wer: f64,
    pub test: EvalReport,
    pub log: Option<TrainLog>,
    pub seconds: f64,
}

impl SystemResult {
    pub fn dev_wer(&self) -> f64 {
        self.dev.wer
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeOutcome {
    pub first_pass_test_wer: f64,
    pub oracle_test_wer: f64,
    pub first_pass_dev_wer: f64,
    pub oracle_dev_wer: f64,
    pub systems: Vec<SystemResult>,
    pub seconds: f64,
}

impl RecipeOutcome {
    pub fn system(&self, name: &str) -> Option<&SystemResult> {
        self.systems.iter().find(|s| s.name == name)
    }
}

/// Tunes β on `dev` and evaluates on `test`.
pub fn assess(
    name: &str,
    scorer: &dyn SecondPassScorer,
    dev: &NBestCorpus,
    test: &NBestCorpus,
    grid: &[f64],
    log: Option<TrainLog>,
    started: Instant,
) -> Result<SystemResult> {
    let search = search_beta(scorer, dev, grid)?;
    let report = evaluate(scorer, test, search.beta)?;
    Ok(SystemResult {
        name: name.into(),
        test_wer: report.wer,
        dev: search,
        test: report,
        log,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Domain-adapted MLM and the PLL table of every sequence the later
/// stages need.
pub struct Foundation {
    pub data: SyntheticData,
    pub mlm: EncoderModel,
    pub table: PllTable,
}

pub fn build_foundation(cfg: &RecipeConfig) -> Result<Foundation> {
    let data = generate_synthetic_nbest(&cfg.generator)?;
    let vocab = Vocab::from_words(cfg.generator.grammar.words());
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    let mut mlm = EncoderModel::new(model_cfg, vocab)?;
    let mut text = data.text.clone();
    text.sentences.extend(data.train.references().sentences);
    train_domain_adapt(&mut mlm, &text, &cfg.mlm)?;
    let mut table = PllTable::new();
    pll_for(&mlm, &data, &mut table, cfg.md.max_seq_len)?;
    Ok(Foundation { data, mlm, table })
}

/// PLLs of the MD text and of every hypothesis in all splits.
pub fn pll_for(model: &EncoderModel, data: &SyntheticData, table: &mut PllTable, max_seq_len: usize) -> Result<()> {
    let seqs = data
        .md_text
        .sentences
        .iter()
        .map(Vec::as_slice)
        .chain(data.train.hypotheses())
        .chain(data.dev.hypotheses())
        .chain(data.test.hypotheses());
    precompute_pll(model, seqs, table, max_seq_len)?;
    Ok(())
}

/// MD pretraining of a copy of `init` on `text`.
pub fn md_model(init: &EncoderModel, text: &TextCorpus, table: &PllTable, cfg: &TrainingConfig) -> Result<(EncoderModel, TrainLog)> {
    let mut m = init.clone();
    let log = train_md(&mut m, text, table, cfg)?;
    Ok((m, log))
}

/// Runs every system of the recipe and reports dev/test WERs.
pub fn run_recipe(cfg: &RecipeConfig) -> Result<RecipeOutcome> {
    let start = Instant::now();
    let f = build_foundation(cfg)?;
    let (dev, test) = (&f.data.dev, &f.data.test);
    let mut systems = Vec::new();

    let t = Instant::now();
    let (md, md_log) = md_model(&f.mlm, &f.data.md_text, &f.table, &cfg.md)?;
    systems.push(assess("md", &md, dev, test, &cfg.grid, Some(md_log), t)?);

    for (name, objective, init) in [
        ("md-mwer", Objective::MdMwer, &md),
        ("md-mwed", Objective::MdMwed, &md),
        ("mwer-only", Objective::MwerOnly, &f.mlm),
    ] {
        let t = Instant::now();
        let mut m = init.clone();
        let log = train_discriminative(&mut m, &f.data.train, Some(&f.table), &cfg.objective(objective))?;
        systems.push(assess(name, &m, dev, test, &cfg.grid, Some(log), t)?);
    }

    let t = Instant::now();
    systems.push(assess("pll", &f.table, dev, test, &cfg.grid, None, t)?);

    let first = |c: &NBestCorpus| -> Result<(f64, f64)> {
        let r = evaluate(&super::eval::OracleScorer, c, 0.0)?;
        Ok((r.first_pass_wer, r.oracle_wer))
    };
    let (first_pass_dev_wer, oracle_dev_wer) = first(dev)?;
    let (first_pass_test_wer, oracle_test_wer) = first(test)?;
    Ok(RecipeOutcome {
        first_pass_test_wer,
        oracle_test_wer,
        first_pass_dev_wer,
        oracle_dev_wer,
        systems,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Teacher settings for the distillation experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRecipeConfig {
    pub base: RecipeConfig,
    pub teacher: ModelConfig,
    pub teacher_mlm: TrainingConfig,
}

impl DistillRecipeConfig {
    pub fn toy(seed: u64) -> Self {
        let base = RecipeConfig::toy(seed);
        let teacher = ModelConfig::teacher(base.model.vocab_size).with_seed(seed.wrapping_add(1000));
        let mut teacher_mlm = base.mlm.clone();
        teacher_mlm.steps = 1000;
        Self { base, teacher, teacher_mlm }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillOutcome {
    pub teacher_params: usize,
    pub student_params: usize,
    pub first_pass_test_wer: f64,
    /// Hypotheses rescored with the teacher's PLL.
    pub teacher: SystemResult,
    /// Student distilled from teacher PLLs with MD then md-mwer.
    pub student: SystemResult,
    pub seconds: f64,
}

/// Trains a teacher MLM, rescores with its PLL, and distills a student of
/// the base model config from it.
pub fn run_distillation(cfg: &DistillRecipeConfig) -> Result<DistillOutcome> {
    let start = Instant::now();
    let b = &cfg.base;
    let data = generate_synthetic_nbest(&b.generator)?;
    let vocab = Vocab::from_words(b.generator.grammar.words());
    let mut tcfg = cfg.teacher.clone();
    tcfg.vocab_size = vocab.len();
    let mut teacher = EncoderModel::new(tcfg, vocab)?;
    let mut text = data.text.clone();
    text.sentences.extend(data.train.references().sentences);
    train_domain_adapt(&mut teacher, &text, &cfg.teacher_mlm)?;
    let mut table = PllTable::new();
    pll_for(&teacher, &data, &mut table, b.md.max_seq_len)?;

    let t = Instant::now();
    let teacher_result = assess("teacher-pll", &table, &data.dev, &data.test, &b.grid, None, t)?;

    let t = Instant::now();
    let dcfg = DistillConfig { md: b.md.clone(), discriminative: b.objective(Objective::MdMwer) };
    let d = distill_student(&teacher, b.model.clone(), &data.md_text, &data.train, &dcfg, table)?;
    let student = assess("student", &d.student, &data.dev, &data.test, &b.grid, Some(d.discriminative_log), t)?;
    Ok(DistillOutcome {
        teacher_params: teacher.param_count(),
        student_params: d.student.param_count(),
        first_pass_test_wer: teacher_result.test.first_pass_wer,
        teacher: teacher_result,
        student,
        seconds: start.elapsed().as_secs_f64(),
    })
}
