//! Data, metrics, synthetic corpora and the training/evaluation procedures.

pub mod data;
pub mod distill;
pub mod eval;
pub mod metrics;
pub mod pll_table;
pub mod synth;
pub mod train;

pub use data::{annotate_errors, Hypothesis, NBestCorpus, NBestRecord, Split, TextCorpus};
pub use distill::{distill_student, DistillConfig, Distilled};
pub use eval::{
    default_grid, evaluate, evaluate_scores, search_beta, search_beta_scores, spearman, BetaSearch, EvalReport,
    OracleScorer, PllScorer, SecondPassScorer, UtteranceResult,
};
pub use metrics::{align, cer, edit_distance, wer, Alignment};
pub use pll_table::{precompute_pll, PllEntry, PllTable, PrecomputeStats};
pub use synth::{generate_synthetic_nbest, GeneratorConfig, Grammar, SyntheticData};
pub use train::{
    mlm_loss, train_discriminative, train_domain_adapt, train_md, Adam, Objective, SkipCounts, TrainLog,
    TrainingConfig,
};
pub mod recipe;
