//! Teacher → student distillation: the teacher supplies PLL targets, the
//! smaller student learns them with MD and is then fine-tuned
//! discriminatively with the same targets in the fused loss.

use serde::{Deserialize, Serialize};

use super::data::{NBestCorpus, TextCorpus};
use super::pll_table::{precompute_pll, PllTable, PrecomputeStats};
use super::train::{train_discriminative, train_md, Objective, TrainLog, TrainingConfig};
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub md: TrainingConfig,
    /// Must be `md-mwer` or `md-mwed`.
    pub discriminative: TrainingConfig,
}

pub struct Distilled {
    pub student: EncoderModel,
    /// Teacher PLLs of the text corpus and of every n-best hypothesis.
    pub table: PllTable,
    pub pll_stats: PrecomputeStats,
    pub md_log: TrainLog,
    pub discriminative_log: TrainLog,
}

/// Builds and trains a student of `student_config` sharing the teacher's
/// vocabulary. `table` may already hold teacher PLLs; missing ones are
/// added.
pub fn distill_student(
    teacher: &EncoderModel,
    student_config: ModelConfig,
    text: &TextCorpus,
    nbest: &NBestCorpus,
    cfg: &DistillConfig,
    table: PllTable,
) -> Result<Distilled> {
    if !matches!(cfg.discriminative.objective, Objective::MdMwer | Objective::MdMwed) {
        return Err(Error::InvalidTrainingConfig(format!(
            "distillation fine-tunes with md-mwer or md-mwed, not {}",
            cfg.discriminative.objective.name()
        )));
    }
    let mut student_config = student_config;
    student_config.vocab_size = teacher.vocab().len();
    let mut student = EncoderModel::new(student_config, teacher.vocab().clone())?;
    if student.param_count() >= teacher.param_count() {
        return Err(Error::InvalidConfig(format!(
            "student ({} parameters) must be smaller than the teacher ({})",
            student.param_count(),
            teacher.param_count()
        )));
    }
    let mut table = table;
    let max_len = cfg.md.max_seq_len.max(cfg.discriminative.max_seq_len);
    let sequences = text.sentences.iter().map(Vec::as_slice).chain(nbest.hypotheses());
    let pll_stats = precompute_pll(teacher, sequences, &mut table, max_len)?;
    let md_log = train_md(&mut student, text, &table, &cfg.md)?;
    let discriminative_log = train_discriminative(&mut student, nbest, Some(&table), &cfg.discriminative)?;
    Ok(Distilled { student, table, pll_stats, md_log, discriminative_log })
}
