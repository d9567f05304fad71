use super::*;
use crate::synthgen::DatasetSpec;

fn corpus(n_train: usize, n_val: usize, seed: u64) -> Corpus {
    Corpus::generate(&DatasetSpec {
        n_train,
        n_val,
        seed,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        learning_rate: 2e-3,
        teacher_max_epochs: 3,
        max_epochs: 3,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

fn outcome(a: bool, r: bool) -> InstanceOutcome {
    InstanceOutcome {
        answer_correct: a,
        rationale_correct: r,
        teacher_correct: None,
    }
}

#[test]
fn metrics_count_joint_hits() {
    let found = [
        outcome(true, true),
        outcome(true, false),
        outcome(false, true),
        outcome(true, true),
    ];
    let m = MetricsRecord::from_outcomes(&found, 2, "val").unwrap();
    assert_eq!((m.acc_qa, m.acc_qar, m.acc_joint), (0.75, 0.75, 0.5));
    assert_eq!(m.acc_teacher, None);
    assert_eq!(m.epoch, 2);
    assert!(matches!(
        MetricsRecord::from_outcomes(&[], 0, "val"),
        Err(Error::Param(_))
    ));
}

#[test]
fn untrained_models_sit_at_chance() {
    let data = corpus(10, 1200, 3);
    let cfg = ModelConfig::for_vocab(data.spec.vocab_size);
    let a = BranchModel::zeros(BranchKind::Answering, cfg.clone()).unwrap();
    let r = BranchModel::zeros(BranchKind::Reasoning, cfg.clone()).unwrap();
    let t = BranchModel::zeros(BranchKind::Teacher, cfg).unwrap();
    let models = Models {
        answering: &a,
        reasoning: &r,
        teacher: Some(&t),
    };
    let m = evaluate(models, &data.val, "val", EvalMode::Standard, &SynonymMap::identity()).unwrap();
    for acc in [m.acc_qa, m.acc_qar, m.acc_teacher.unwrap()] {
        assert!((acc - 0.25).abs() <= 0.04, "{m:?}");
    }
    assert!(m.acc_joint <= m.acc_qa.min(m.acc_qar));
    assert!(matches!(
        evaluate(models, &[], "val", EvalMode::Standard, &SynonymMap::identity()),
        Err(Error::Param(_))
    ));
}

#[test]
fn identity_paraphrase_matches_standard() {
    let data = corpus(10, 200, 4);
    let cfg = ModelConfig::for_vocab(data.spec.vocab_size);
    let a = BranchModel::new(BranchKind::Answering, cfg.clone(), 1).unwrap();
    let r = BranchModel::new(BranchKind::Reasoning, cfg, 1).unwrap();
    let models = Models {
        answering: &a,
        reasoning: &r,
        teacher: None,
    };
    let id = SynonymMap::identity();
    let std = evaluate(models, &data.val, "val", EvalMode::Standard, &id).unwrap();
    let para = evaluate(models, &data.val, "val", EvalMode::Paraphrased, &id).unwrap();
    assert_eq!(std, para);
}

#[test]
fn teacher_training_is_deterministic_and_learns() {
    let data = corpus(300, 100, 1);
    let cfg = TrainConfig {
        teacher_max_epochs: 6,
        early_stop: false,
        ..quick(9)
    };
    let first = train_teacher(&data, &cfg).unwrap();
    let second = train_teacher(&data, &cfg).unwrap();
    assert_eq!(first.history, second.history);
    assert_eq!(first.model, second.model);
    assert_eq!(first.history.len(), 6);
    assert!(first.history[5].train_loss < first.history[0].train_loss);
}

#[test]
fn baseline_weights_reproduce_separate_training() {
    let data = corpus(120, 60, 2);
    let cfg = TrainConfig {
        loss: LossWeights::baseline(),
        early_stop: false,
        select_best: false,
        ..quick(5)
    };
    let joint = train_arc(&data, None, &cfg).unwrap();
    let (a, r) = train_separate(&data, &cfg).unwrap();
    assert_eq!(joint.answering.params(), a.model.params());
    assert_eq!(joint.reasoning.params(), r.model.params());
    assert_eq!(joint.answering.checksum(), a.model.checksum());
}

#[test]
fn distillation_leaves_the_teacher_untouched() {
    let data = corpus(120, 60, 3);
    let cfg = quick(2);
    let teacher = train_teacher(&data, &cfg).unwrap().model;
    let before = teacher.clone();
    let pair = train_arc(&data, Some(&teacher), &cfg).unwrap();
    assert_eq!(teacher.checksum(), before.checksum());
    assert_eq!(teacher, before);
    let b = pair.history[0].breakdown.unwrap();
    assert!(b.kd_answer > 0.0 && b.kd_rationale > 0.0);
    assert!((b.total - (b.answer_total + b.rationale_total)).abs() < 1e-12);
    for h in &pair.history {
        let v = h.val.as_ref().unwrap();
        assert!(v.acc_joint <= v.acc_qa.min(v.acc_qar));
    }
}

#[test]
fn distillation_without_teacher_is_a_state_error() {
    let data = corpus(20, 10, 0);
    assert!(matches!(
        train_arc(&data, None, &quick(0)),
        Err(Error::State(_))
    ));
    let other = BranchModel::new(
        BranchKind::Teacher,
        ModelConfig {
            vocab_size: data.spec.vocab_size,
            embed_dim: 8,
            hidden_dim: 8,
        },
        0,
    )
    .unwrap();
    assert!(matches!(
        train_arc(&data, Some(&other), &quick(0)),
        Err(Error::Compat(_))
    ));
}

#[test]
fn divergence_names_the_epoch() {
    let data = corpus(40, 10, 0);
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..quick(0)
    };
    match train_teacher(&data, &cfg) {
        Err(Error::Training { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn invalid_configs_name_the_field() {
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "batch_size"));
    let bad = TrainConfig {
        learning_rate: -1.0,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "learning_rate"));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let data = corpus(5, 20, 6);
    let cfg = ModelConfig::for_vocab(data.spec.vocab_size);
    let branches: Vec<BranchModel> = BranchKind::ALL
        .iter()
        .map(|&k| BranchModel::new(k, cfg.clone(), 11).unwrap())
        .collect();
    let ckpt = Checkpoint::new(branches, serde_json::json!({"seed": 11}), 4, vec![]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    for (a, b) in ckpt.branches.iter().zip(&back.branches) {
        for x in &data.val {
            let comp = compose_query(a.kind, x);
            let (oa, ob) = (a.forward(&comp).unwrap(), b.forward(&comp).unwrap());
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&oa.logits), bits(&ob.logits));
        }
    }
    let shapes: Vec<_> = back.branches.iter().map(|b| b.shapes()).collect();
    assert_eq!(shapes.len(), 3);
    assert!(shapes.windows(2).all(|w| w[0] == w[1]));

    let bytes = std::fs::read(&path).unwrap();
    let mut corrupt = bytes.clone();
    corrupt[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(Error::Load(_))));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Load(_))
    ));
    let text = String::from_utf8_lossy(&bytes[..200]).to_string();
    assert!(text.starts_with("ARCKD1\n{\"version\":1"));
    let mut wrong = b"ARCKD1\n{\"version\":2".to_vec();
    wrong.extend_from_slice(&bytes[b"ARCKD1\n{\"version\":1".len()..]);
    match Checkpoint::from_bytes(&wrong) {
        Err(Error::Load(m)) => assert!(m.contains("version 2")),
        other => panic!("expected a load error, got {other:?}"),
    }
}
