//! Two-stage training: the teacher alone on `QR -> A`, then the answering and reasoning
//! branches together against the frozen teacher.
//!
//! Gradients are computed per instance on private tapes in parallel and summed in
//! instance order, so a run is a pure function of its configuration.

mod checkpoint;
mod metrics;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arckd::{ce_loss, instance_loss, LossBreakdown, LossParts, LossWeights, TeacherSignal};
use crate::branchnet::{compose_query, BranchKind, BranchModel, ModelConfig};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::synthgen::{generate_dataset, DatasetSpec, Instance, SynonymMap};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use metrics::{
    branch_accuracy, evaluate, outcomes, EvalMode, InstanceOutcome, MetricsRecord, Models,
};
pub use optim::{AdamW, PlateauHalving};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum_beta: f64,
    pub second_moment_beta: f64,
    /// Epochs without validation improvement before the learning rate is halved.
    pub lr_halving_patience: usize,
    pub batch_size: usize,
    pub teacher_max_epochs: usize,
    pub max_epochs: usize,
    /// Stop once validation has not improved for this many epochs.
    pub early_stop_patience: usize,
    pub early_stop: bool,
    /// Epochs that always run before early stopping may trigger.
    pub min_epochs: usize,
    /// Return the best validation epoch rather than the last.
    pub select_best: bool,
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            momentum_beta: 0.9,
            second_moment_beta: 0.999,
            lr_halving_patience: 2,
            batch_size: 8,
            teacher_max_epochs: 30,
            max_epochs: 30,
            early_stop_patience: 3,
            early_stop: true,
            min_epochs: 10,
            select_best: true,
            seed: 0,
            embed_dim: 32,
            hidden_dim: 32,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("momentum_beta", self.momentum_beta),
            ("second_moment_beta", self.second_moment_beta),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("{v} must be positive")));
            }
        }
        for (field, v) in [
            ("momentum_beta", self.momentum_beta),
            ("second_moment_beta", self.second_moment_beta),
        ] {
            if v >= 1.0 {
                return Err(Error::config(field, format!("{v} must be below 1")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        for (field, v) in [
            ("lr_halving_patience", self.lr_halving_patience),
            ("early_stop_patience", self.early_stop_patience),
            ("batch_size", self.batch_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        self.loss.validate()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }
}

/// Train and validation splits with the spec that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: DatasetSpec,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
}

impl Corpus {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let (train, val) = generate_dataset(spec)?;
        Ok(Corpus {
            spec: spec.clone(),
            train,
            val,
        })
    }

    pub fn synonym_map(&self) -> Result<SynonymMap> {
        self.spec.synonym_map()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub learning_rates: Vec<f64>,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<LossBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<MetricsRecord>,
    /// Validation accuracy of the branch trained in a single-branch stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedBranch {
    pub model: BranchModel,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPair {
    pub answering: BranchModel,
    pub reasoning: BranchModel,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainedPair {
    pub fn models<'a>(&'a self, teacher: Option<&'a BranchModel>) -> Models<'a> {
        Models {
            answering: &self.answering,
            reasoning: &self.reasoning,
            teacher,
        }
    }
}

const TEACHER_STREAM: u64 = 1;
const PAIR_STREAM: u64 = 2;

fn epoch_order(n: usize, seed: u64, stream: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mix = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream << 32)
        .wrapping_add(epoch as u64);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    order
}

struct Learner {
    model: BranchModel,
    opt: AdamW,
    schedule: PlateauHalving,
}

impl Learner {
    fn new(model: BranchModel, cfg: &TrainConfig) -> Self {
        let opt = AdamW::new(
            model.params(),
            cfg.learning_rate,
            cfg.momentum_beta,
            cfg.second_moment_beta,
            cfg.weight_decay,
        );
        Learner {
            model,
            opt,
            schedule: PlateauHalving::new(cfg.learning_rate, cfg.lr_halving_patience),
        }
    }
}

/// Gradients of one instance's loss for every learner, plus the loss value.
struct InstanceGrad {
    grads: Vec<Vec<Tensor>>,
    loss: f64,
    parts: Option<LossParts>,
}

/// Validation summary of one epoch: per-learner schedule metrics and the selection score.
struct EpochVal {
    schedule_metrics: Vec<f64>,
    selection: f64,
    record: Option<MetricsRecord>,
    accuracy: Option<f64>,
}

struct Stage<'a> {
    name: &'a str,
    stream: u64,
    max_epochs: usize,
}

fn run_stage<G, V>(
    stage: Stage<'_>,
    learners: &mut [Learner],
    train: &[Instance],
    cfg: &TrainConfig,
    grad_fn: G,
    val_fn: V,
) -> Result<(Vec<EpochLog>, usize)>
where
    G: Fn(&[&BranchModel], usize) -> Result<InstanceGrad> + Sync,
    V: Fn(&[&BranchModel]) -> Result<EpochVal>,
{
    if train.is_empty() {
        return Err(Error::param("training split is empty"));
    }
    let mut history = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_models: Vec<BranchModel> = learners.iter().map(|l| l.model.clone()).collect();
    let mut stale = 0;
    for epoch in 0..stage.max_epochs {
        let learning_rates: Vec<f64> = learners.iter().map(|l| l.opt.lr).collect();
        let order = epoch_order(train.len(), cfg.seed, stage.stream, epoch);
        let mut loss_sum = 0.0;
        let mut parts_sum: Option<LossParts> = None;
        for batch in order.chunks(cfg.batch_size) {
            let models: Vec<&BranchModel> = learners.iter().map(|l| &l.model).collect();
            let results = batch
                .par_iter()
                .map(|&i| grad_fn(&models, i))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Training {
                    epoch,
                    message: e.to_string(),
                })?;
            let scale = 1.0 / batch.len() as f64;
            for (k, learner) in learners.iter_mut().enumerate() {
                let mut total: Vec<Tensor> = learner
                    .model
                    .params()
                    .iter()
                    .map(|p| Tensor::zeros(p.shape()))
                    .collect();
                for r in &results {
                    for (acc, g) in total.iter_mut().zip(&r.grads[k]) {
                        acc.add_assign(g);
                    }
                }
                let total: Vec<Tensor> = total.iter().map(|g| g.map(|v| v * scale)).collect();
                learner.opt.step(learner.model.params_mut(), &total)?;
            }
            for r in &results {
                loss_sum += r.loss;
                if let Some(p) = r.parts {
                    let acc = parts_sum.get_or_insert_with(LossParts::default);
                    acc.ce_answer += p.ce_answer;
                    acc.ce_rationale += p.ce_rationale;
                    acc.kd_answer += p.kd_answer;
                    acc.kd_rationale += p.kd_rationale;
                }
            }
        }
        let n = train.len() as f64;
        let train_loss = loss_sum / n;
        if !train_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("{} loss diverged to {train_loss}", stage.name),
            });
        }
        if learners
            .iter()
            .any(|l| l.model.params().iter().any(|p| !p.all_finite()))
        {
            return Err(Error::Training {
                epoch,
                message: format!("{} parameters are no longer finite", stage.name),
            });
        }
        let breakdown = match parts_sum {
            Some(p) => Some(crate::arckd::combined_losses(
                LossParts {
                    ce_answer: p.ce_answer / n,
                    ce_rationale: p.ce_rationale / n,
                    kd_answer: p.kd_answer / n,
                    kd_rationale: p.kd_rationale / n,
                },
                &cfg.loss,
            )?),
            None => None,
        };
        let models: Vec<&BranchModel> = learners.iter().map(|l| &l.model).collect();
        let val = val_fn(&models)?;
        for (learner, &m) in learners.iter_mut().zip(&val.schedule_metrics) {
            learner.opt.lr = learner.schedule.observe(m);
        }
        history.push(EpochLog {
            stage: stage.name.to_string(),
            epoch,
            learning_rates,
            train_loss,
            breakdown,
            val: val.record.map(|mut r| {
                r.epoch = epoch;
                r
            }),
            val_accuracy: val.accuracy,
        });
        if val.selection > best {
            best = val.selection;
            best_epoch = epoch;
            stale = 0;
            if cfg.select_best {
                best_models = learners.iter().map(|l| l.model.clone()).collect();
            }
        } else {
            stale += 1;
            if cfg.early_stop && stale >= cfg.early_stop_patience && epoch + 1 >= cfg.min_epochs {
                break;
            }
        }
    }
    if cfg.select_best {
        for (learner, model) in learners.iter_mut().zip(best_models) {
            learner.model = model;
        }
    } else {
        best_epoch = history.len().saturating_sub(1);
    }
    Ok((history, best_epoch))
}

fn single_branch_grad(model: &BranchModel, x: &Instance) -> Result<InstanceGrad> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let out = bound.forward(&compose_query(model.kind, x))?;
    let gold = match model.kind {
        BranchKind::Reasoning => x.rationale_label,
        BranchKind::Answering | BranchKind::Teacher => x.answer_label,
    };
    let loss = ce_loss(out.logits, gold)?;
    let value = loss.value().item()?;
    tape.backward(loss)?;
    Ok(InstanceGrad {
        grads: vec![bound.grads()],
        loss: value,
        parts: None,
    })
}

fn stream_for(kind: BranchKind) -> u64 {
    match kind {
        BranchKind::Teacher => TEACHER_STREAM,
        BranchKind::Answering | BranchKind::Reasoning => PAIR_STREAM,
    }
}

/// Train one branch on its own cross-entropy. The teacher is stage one; answering and
/// reasoning branches trained this way form the separate baseline.
pub fn train_branch(kind: BranchKind, data: &Corpus, cfg: &TrainConfig) -> Result<TrainedBranch> {
    cfg.validate()?;
    data.spec.validate()?;
    let model = BranchModel::new(kind, cfg.model_config(data.spec.vocab_size), cfg.seed)?;
    let mut learners = [Learner::new(model, cfg)];
    let max_epochs = match kind {
        BranchKind::Teacher => cfg.teacher_max_epochs,
        _ => cfg.max_epochs,
    };
    let stage = Stage {
        name: kind.name(),
        stream: stream_for(kind),
        max_epochs,
    };
    let (history, best_epoch) = run_stage(
        stage,
        &mut learners,
        &data.train,
        cfg,
        |models, i| single_branch_grad(models[0], &data.train[i]),
        |models| {
            let acc = branch_accuracy(models[0], &data.val)?;
            Ok(EpochVal {
                schedule_metrics: vec![acc],
                selection: acc,
                record: None,
                accuracy: Some(acc),
            })
        },
    )?;
    let [learner] = learners;
    Ok(TrainedBranch {
        model: learner.model,
        history,
        best_epoch,
    })
}

/// Stage one: the `QR -> A` teacher.
pub fn train_teacher(data: &Corpus, cfg: &TrainConfig) -> Result<TrainedBranch> {
    train_branch(BranchKind::Teacher, data, cfg)
}

/// Answering and reasoning branches trained independently on their cross-entropies.
pub fn train_separate(data: &Corpus, cfg: &TrainConfig) -> Result<(TrainedBranch, TrainedBranch)> {
    Ok((
        train_branch(BranchKind::Answering, data, cfg)?,
        train_branch(BranchKind::Reasoning, data, cfg)?,
    ))
}

/// Teacher logits and gold-answer fused feature for every instance.
pub fn teacher_signals(teacher: &BranchModel, data: &[Instance]) -> Result<Vec<TeacherSignal>> {
    if teacher.kind != BranchKind::Teacher {
        return Err(Error::param(format!(
            "expected a teacher branch, got {}",
            teacher.kind.name()
        )));
    }
    data.par_iter()
        .map(|x| {
            let out = teacher.forward(&compose_query(BranchKind::Teacher, x))?;
            Ok(TeacherSignal {
                logits: out.logits,
                feature: out.features[x.answer_label].clone(),
            })
        })
        .collect()
}

fn pair_grad(
    models: &[&BranchModel],
    x: &Instance,
    teacher: Option<&TeacherSignal>,
    w: &LossWeights,
) -> Result<InstanceGrad> {
    let tape = Tape::new();
    let a = models[0].bind(&tape, true);
    let r = models[1].bind(&tape, true);
    let out_a = a.forward(&compose_query(BranchKind::Answering, x))?;
    let out_r = r.forward(&compose_query(BranchKind::Reasoning, x))?;
    let loss = instance_loss(
        out_a.logits,
        out_r.logits,
        out_r.features,
        x.answer_label,
        x.rationale_label,
        teacher,
        w,
    )?;
    let value = loss.total.value().item()?;
    tape.backward(loss.total)?;
    Ok(InstanceGrad {
        grads: vec![a.grads(), r.grads()],
        loss: value,
        parts: Some(loss.parts),
    })
}

/// Stage two: answering and reasoning branches updated jointly on
/// `L = L_QA + L_QAR` with the teacher frozen. With both distillation weights at zero
/// the teacher is not consulted and may be absent.
pub fn train_arc(data: &Corpus, teacher: Option<&BranchModel>, cfg: &TrainConfig) -> Result<TrainedPair> {
    cfg.validate()?;
    data.spec.validate()?;
    let model_cfg = cfg.model_config(data.spec.vocab_size);
    let signals = if cfg.loss.is_baseline() {
        None
    } else {
        let teacher = teacher.ok_or_else(|| {
            Error::State("distillation needs a trained teacher; none was given".into())
        })?;
        if teacher.config != model_cfg {
            return Err(Error::Compat(format!(
                "teacher was built for {:?}, this run uses {:?}",
                teacher.config, model_cfg
            )));
        }
        Some(teacher_signals(teacher, &data.train)?)
    };
    let mut learners = [
        Learner::new(BranchModel::new(BranchKind::Answering, model_cfg.clone(), cfg.seed)?, cfg),
        Learner::new(BranchModel::new(BranchKind::Reasoning, model_cfg, cfg.seed)?, cfg),
    ];
    let empty = SynonymMap::identity();
    let stage = Stage {
        name: "arc",
        stream: PAIR_STREAM,
        max_epochs: cfg.max_epochs,
    };
    let (history, best_epoch) = run_stage(
        stage,
        &mut learners,
        &data.train,
        cfg,
        |models, i| {
            let signal = signals.as_ref().map(|s| &s[i]);
            pair_grad(models, &data.train[i], signal, &cfg.loss)
        },
        |models| {
            let pair = Models {
                answering: models[0],
                reasoning: models[1],
                teacher: None,
            };
            let record = evaluate(pair, &data.val, "val", EvalMode::Standard, &empty)?;
            Ok(EpochVal {
                schedule_metrics: vec![record.acc_qa, record.acc_qar],
                selection: record.acc_joint,
                record: Some(record),
                accuracy: None,
            })
        },
    )?;
    let [a, r] = learners;
    Ok(TrainedPair {
        answering: a.model,
        reasoning: r.model,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests;
