//! Cross-entropy, logit distillation (KD-A), feature distillation (KD-R) and their
//! weighted combination.
//!
//! Teacher quantities enter every loss as plain values: nothing here can push a
//! gradient into the teacher.

use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_values, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of KD-A against the answer cross-entropy.
    pub alpha: f64,
    /// Weight of KD-R against the rationale cross-entropy.
    pub beta: f64,
    pub temperature: f64,
    /// Multiply KD-A by `T^2`.
    pub t_squared_scaling: bool,
    /// Divide KD-R scores by `sqrt(d_h)`.
    pub scaled_dot: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.5,
            temperature: 2.0,
            t_squared_scaling: false,
            scaled_dot: false,
        }
    }
}

impl LossWeights {
    pub fn baseline() -> Self {
        LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..LossWeights::default()
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, format!("{v} is outside [0, 1]")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(
                "temperature",
                format!("{} must be positive", self.temperature),
            ));
        }
        Ok(())
    }
}

/// Scalar values of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_answer: f64,
    pub ce_rationale: f64,
    pub kd_answer: f64,
    pub kd_rationale: f64,
    pub answer_total: f64,
    pub rationale_total: f64,
    pub total: f64,
}

/// The four per-branch losses fed to [`combined_losses`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub ce_answer: f64,
    pub ce_rationale: f64,
    pub kd_answer: f64,
    pub kd_rationale: f64,
}

pub fn combined_losses(parts: LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let answer_total = w.alpha * parts.kd_answer + (1.0 - w.alpha) * parts.ce_answer;
    let rationale_total = w.beta * parts.kd_rationale + (1.0 - w.beta) * parts.ce_rationale;
    Ok(LossBreakdown {
        ce_answer: parts.ce_answer,
        ce_rationale: parts.ce_rationale,
        kd_answer: parts.kd_answer,
        kd_rationale: parts.kd_rationale,
        answer_total,
        rationale_total,
        total: answer_total + rationale_total,
    })
}

/// `-log_softmax(logits)[gold]`.
pub fn ce_loss<'t>(logits: Var<'t>, gold: usize) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 1 {
        return Err(Error::shape(format!("ce_loss expects a vector, got {shape:?}")));
    }
    if gold >= shape[0] {
        return Err(Error::param(format!(
            "gold index {gold} out of range for {} candidates",
            shape[0]
        )));
    }
    logits.log_softmax()?.index(gold)?.scale(-1.0)
}

/// `KL(p^C || p^A)` with both distributions softened by `t`. The teacher logits are
/// read as values; the student keeps its gradient.
pub fn kd_a_loss<'t>(
    teacher_logits: &[f64],
    student_logits: Var<'t>,
    t: f64,
    t_squared: bool,
) -> Result<Var<'t>> {
    if !(t > 0.0) {
        return Err(Error::param(format!("temperature must be positive, got {t}")));
    }
    let shape = student_logits.shape();
    if shape != [teacher_logits.len()] {
        return Err(Error::shape(format!(
            "teacher logits [{}] vs student logits {shape:?}",
            teacher_logits.len()
        )));
    }
    let p = softmax_values(teacher_logits, t);
    // sum p ln p, with 0 ln 0 = 0
    let neg_entropy: f64 = p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    let tape = student_logits.tape();
    let target = tape.constant(Tensor::vector(p)?);
    let log_q = student_logits.scale(1.0 / t)?.log_softmax()?;
    let kl = log_q
        .dot(target)?
        .scale(-1.0)?
        .add(tape.constant(Tensor::scalar(neg_entropy)))?;
    if t_squared {
        kl.scale(t * t)
    } else {
        Ok(kl)
    }
}

/// Cross-entropy over `s_i = h^C . h^R_i` (softmax over candidates). `student` is
/// `[n, d_h]`, one fused feature per candidate.
pub fn kd_r_loss<'t>(
    teacher_feature: &[f64],
    student: Var<'t>,
    gold: usize,
    scaled: bool,
) -> Result<Var<'t>> {
    let shape = student.shape();
    if shape.len() != 2 || shape[1] != teacher_feature.len() {
        return Err(Error::shape(format!(
            "teacher feature [{}] vs student features {shape:?}",
            teacher_feature.len()
        )));
    }
    let d = teacher_feature.len();
    let tape = student.tape();
    let h = tape.constant(Tensor::matrix(d, 1, teacher_feature.to_vec())?);
    let mut scores = student.matmul(h)?.reshape(vec![shape[0]])?;
    if scaled {
        scores = scores.scale(1.0 / (d as f64).sqrt())?;
    }
    ce_loss(scores, gold)
}

/// Teacher values needed by the distillation terms for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSignal {
    /// Teacher logits over the answer candidates.
    pub logits: Vec<f64>,
    /// Teacher fused feature for the gold answer.
    pub feature: Vec<f64>,
}

/// Differentiable per-instance losses. Distillation terms are only built when their
/// weight is nonzero, which keeps an `alpha = beta = 0` run numerically identical to
/// plain cross-entropy training.
pub struct InstanceLoss<'t> {
    pub total: Var<'t>,
    pub parts: LossParts,
}

pub fn instance_loss<'t>(
    answer_logits: Var<'t>,
    rationale_logits: Var<'t>,
    rationale_features: Var<'t>,
    answer_label: usize,
    rationale_label: usize,
    teacher: Option<&TeacherSignal>,
    w: &LossWeights,
) -> Result<InstanceLoss<'t>> {
    let ce_a = ce_loss(answer_logits, answer_label)?;
    let ce_r = ce_loss(rationale_logits, rationale_label)?;
    let mut parts = LossParts {
        ce_answer: ce_a.value().item()?,
        ce_rationale: ce_r.value().item()?,
        ..LossParts::default()
    };
    let need_teacher = w.alpha > 0.0 || w.beta > 0.0;
    let teacher = match (teacher, need_teacher) {
        (Some(t), _) => Some(t),
        (None, false) => None,
        (None, true) => {
            return Err(Error::State(
                "distillation weights are set but no teacher signal was given".into(),
            ))
        }
    };
    let answer_total = if w.alpha > 0.0 {
        let t = teacher.expect("checked above");
        let kd = kd_a_loss(&t.logits, answer_logits, w.temperature, w.t_squared_scaling)?;
        parts.kd_answer = kd.value().item()?;
        kd.scale(w.alpha)?.add(ce_a.scale(1.0 - w.alpha)?)?
    } else {
        ce_a
    };
    let rationale_total = if w.beta > 0.0 {
        let t = teacher.expect("checked above");
        let kd = kd_r_loss(&t.feature, rationale_features, rationale_label, w.scaled_dot)?;
        parts.kd_rationale = kd.value().item()?;
        kd.scale(w.beta)?.add(ce_r.scale(1.0 - w.beta)?)?
    } else {
        ce_r
    };
    Ok(InstanceLoss {
        total: answer_total.add(rationale_total)?,
        parts,
    })
}
