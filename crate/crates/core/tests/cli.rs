use std::fs;
use std::path::Path;

use arckd::branchnet::BranchKind;
use arckd::cli::run;
use arckd::trainer::load_checkpoint;

fn arckd(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("arckd").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    fs::write(
        &path,
        r#"{
  "dataset": {"n_train": 120, "n_val": 60},
  "train": {"max_epochs": 2, "teacher_max_epochs": 2, "min_epochs": 1, "learning_rate": 0.002}
}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(arckd(&[]).0, 1);
    assert_eq!(arckd(&["frobnicate"]).0, 1);
    assert_eq!(arckd(&["train", "--mode", "sideways"]).0, 1);
    assert_eq!(arckd(&["gen", "--seed", "minus-one"]).0, 1);
    let (code, out, _) = arckd(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("probe"));
}

#[test]
fn out_of_range_shortcut_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let (code, _, err) = arckd(&["gen", "--shortcut", "1.2", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("shortcut_strength"), "{err}");
    assert!(!out.exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for body in [
        r#"{"bogus": 1}"#,
        r#"{"train": {"learning_rat": 0.1}}"#,
        r#"{"dataset": {"n_trian": 5}}"#,
        r#"{"train": {"loss": {"gamma": 1.0}}}"#,
    ] {
        let path = dir.path().join("c.json");
        fs::write(&path, body).unwrap();
        let (code, _, err) = arckd(&["gen", "--config", path.to_str().unwrap()]);
        assert_eq!(code, 1, "{body}");
        assert!(err.contains("unknown field"), "{err}");
    }
    let (code, _, _) = arckd(&["gen", "--config", "/nonexistent/c.json"]);
    assert_eq!(code, 1);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{"dataset": {"n_train": 10, "n_val": 5, "shortcut_strength": 0.3}}"#).unwrap();
    let (code, out, _) = arckd(&[
        "gen",
        "--config",
        path.to_str().unwrap(),
        "--shortcut",
        "0.9",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("shortcut_strength 0.9"), "{out}");
    assert!(dir.path().join("train.jsonl").exists());
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = arckd(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("model.ckpt"));
}

#[test]
fn generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        assert_eq!(arckd(&["gen", "--seed", "4", "--out", d.to_str().unwrap()]).0, 0);
    }
    for f in ["train.jsonl", "val.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn train_eval_probe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    let (run_a, run_b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(arckd(&["gen", "--config", &cfg, "--out", data.to_str().unwrap()]).0, 0);
    for out in [&run_a, &run_b] {
        let (code, stdout, err) = arckd(&[
            "train",
            "--config",
            &cfg,
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
        assert!(stdout.starts_with("ARC"), "{stdout}");
    }
    for f in ["metrics.jsonl", "summary.json"] {
        assert!(
            fs::read(run_a.join(f)).unwrap() == fs::read(run_b.join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
    // the checkpoints also record the run config, whose output path differs
    for f in ["model.ckpt", "teacher.ckpt"] {
        let x = load_checkpoint(&run_a.join(f)).unwrap();
        let y = load_checkpoint(&run_b.join(f)).unwrap();
        assert!(x.branches == y.branches && x.history == y.history, "{f}");
    }

    let a = run_a.to_str().unwrap();
    let d = data.to_str().unwrap();
    let (code, _, err) = arckd(&["eval", "--config", &cfg, "--data", d, "--out", a]);
    assert_eq!(code, 0, "{err}");
    let (code, _, _) = arckd(&["eval", "--config", &cfg, "--data", d, "--out", a, "--mode", "paraphrased"]);
    assert_eq!(code, 0);
    let (code, _, _) = arckd(&["eval", "--config", &cfg, "--data", d, "--out", a, "--mode", "answer_only"]);
    assert_eq!(code, 0);
    for mode in ["standard", "paraphrased", "answer_only"] {
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(run_a.join(format!("eval_{mode}.json"))).unwrap())
                .unwrap();
        let f = |k: &str| m[k].as_f64().unwrap();
        assert!(f("acc_joint") <= f("acc_qa").min(f("acc_qar")));
    }

    // an empty synonym map makes paraphrasing the identity
    let ident_dir = dir.path().join("ident");
    fs::create_dir_all(&ident_dir).unwrap();
    fs::copy(run_a.join("model.ckpt"), ident_dir.join("model.ckpt")).unwrap();
    let ident = dir.path().join("ident.json");
    fs::write(
        &ident,
        r#"{"dataset": {"n_train": 120, "n_val": 60, "synonym_pairs": []}}"#,
    )
    .unwrap();
    let i = ident_dir.to_str().unwrap();
    let ic = ident.to_str().unwrap();
    let mut found = Vec::new();
    for mode in ["standard", "paraphrased"] {
        let (code, out, err) = arckd(&["eval", "--config", ic, "--out", i, "--mode", mode]);
        assert_eq!(code, 0, "{err}");
        found.push(out);
    }
    let record = |s: &str| {
        let mut v: serde_json::Value = serde_json::from_str(s).unwrap();
        v.as_object_mut().unwrap().remove("split");
        v
    };
    assert_eq!(record(&found[0]), record(&found[1]));

    let (code, out, err) = arckd(&["probe", "--config", &cfg, "--data", d, "--out", a]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("ratio_ans"));
    let csv = fs::read_to_string(run_a.join("probe/probe.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "instance_id,ratio_ans,qa2r_correct,a2r_correct"
    );
    assert_eq!(csv.lines().count(), 61);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_a.join("probe/probe_summary.json")).unwrap())
            .unwrap();
    for key in ["ratio_median", "ratio_q1", "ratio_q3", "acc_qar", "acc_ar", "acc_std", "acc_skew"] {
        assert!(summary.get(key).is_some(), "{key}");
    }

    // a pre-trained teacher skips stage one
    let c = dir.path().join("c");
    let teacher = run_a.join("teacher.ckpt");
    let (code, _, err) = arckd(&[
        "train",
        "--config",
        &cfg,
        "--data",
        d,
        "--teacher",
        teacher.to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(!c.join("teacher.ckpt").exists());
    let reused = load_checkpoint(&c.join("model.ckpt")).unwrap();
    let original = load_checkpoint(&run_a.join("model.ckpt")).unwrap();
    assert_eq!(reused.branches.len(), 3);
    assert!(reused.branch(BranchKind::Teacher) == original.branch(BranchKind::Teacher));
}

#[test]
fn baseline_label_and_seed_median() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("runs");
    let (code, stdout, err) = arckd(&[
        "train",
        "--config",
        &cfg,
        "--alpha",
        "0",
        "--beta",
        "0",
        "--seeds",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.starts_with("baseline (separate)"), "{stdout}");
    assert!(stdout.contains("median"));
    for s in 0..3 {
        assert!(out.join(format!("seed_{s}/summary.json")).exists());
    }
    let (code, _, err) = arckd(&["train", "--config", &cfg, "--temperature", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("temperature"), "{err}");
}
