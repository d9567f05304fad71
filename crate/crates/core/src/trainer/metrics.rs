use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::branchnet::{BranchKind, BranchModel};
use crate::error::{Error, Result};
use crate::synthgen::{paraphrase, strip_question, Instance, SynonymMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Standard,
    /// Question replaced by a single padding token.
    AnswerOnly,
    /// Text rewritten through the synonym map.
    Paraphrased,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Standard => "standard",
            EvalMode::AnswerOnly => "answer_only",
            EvalMode::Paraphrased => "paraphrased",
        }
    }

    pub fn apply(self, x: &Instance, map: &SynonymMap) -> Instance {
        match self {
            EvalMode::Standard => x.clone(),
            EvalMode::AnswerOnly => strip_question(x),
            EvalMode::Paraphrased => paraphrase(x, map),
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [EvalMode::Standard, EvalMode::AnswerOnly, EvalMode::Paraphrased]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::param(format!("unknown evaluation mode `{s}`")))
    }
}

/// The deployed answering/reasoning pair, with the teacher optionally alongside for
/// reporting. The teacher never influences the pair's predictions.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub answering: &'a BranchModel,
    pub reasoning: &'a BranchModel,
    pub teacher: Option<&'a BranchModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceOutcome {
    pub answer_correct: bool,
    pub rationale_correct: bool,
    pub teacher_correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub acc_qa: f64,
    pub acc_qar: f64,
    pub acc_joint: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_teacher: Option<f64>,
    pub epoch: usize,
    pub split: String,
}

impl MetricsRecord {
    pub fn from_outcomes(outcomes: &[InstanceOutcome], epoch: usize, split: &str) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::param(format!("split `{split}` is empty")));
        }
        let n = outcomes.len() as f64;
        let count = |f: &dyn Fn(&InstanceOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n;
        let acc_teacher = if outcomes.iter().all(|o| o.teacher_correct.is_some()) {
            Some(count(&|o| o.teacher_correct == Some(true)))
        } else {
            None
        };
        Ok(MetricsRecord {
            acc_qa: count(&|o| o.answer_correct),
            acc_qar: count(&|o| o.rationale_correct),
            acc_joint: count(&|o| o.answer_correct && o.rationale_correct),
            acc_teacher,
            epoch,
            split: split.to_string(),
        })
    }
}

fn correct(model: &BranchModel, x: &Instance) -> Result<bool> {
    let gold = match model.kind {
        BranchKind::Reasoning => x.rationale_label,
        BranchKind::Answering | BranchKind::Teacher => x.answer_label,
    };
    Ok(model.predict_instance(x)? == gold)
}

/// Accuracy of one branch alone.
pub fn branch_accuracy(model: &BranchModel, data: &[Instance]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::param("empty split"));
    }
    let hits = data
        .par_iter()
        .map(|x| correct(model, x))
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

/// Per-instance correctness, in input order.
pub fn outcomes(
    models: Models<'_>,
    data: &[Instance],
    mode: EvalMode,
    map: &SynonymMap,
) -> Result<Vec<InstanceOutcome>> {
    data.par_iter()
        .map(|x| {
            let x = mode.apply(x, map);
            Ok(InstanceOutcome {
                answer_correct: correct(models.answering, &x)?,
                rationale_correct: correct(models.reasoning, &x)?,
                teacher_correct: models.teacher.map(|t| correct(t, &x)).transpose()?,
            })
        })
        .collect()
}

pub fn evaluate(
    models: Models<'_>,
    data: &[Instance],
    split: &str,
    mode: EvalMode,
    map: &SynonymMap,
) -> Result<MetricsRecord> {
    if data.is_empty() {
        return Err(Error::param(format!("split `{split}` is empty")));
    }
    let found = outcomes(models, data, mode, map)?;
    MetricsRecord::from_outcomes(&found, 0, split)
}
