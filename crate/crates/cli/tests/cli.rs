use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use renn_core::dary::{read_file, write_file, DaryPayload};
use renn_core::model_io::save_model;
use renn_core::pipeline::{infer, ToyShape};
use renn_core::rotation::validate_rotation;
use renn_core::{ModelSpec, Seed};

fn renn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_renn"))
        .args(args)
        .output()
        .expect("run renn")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn toy_model(dir: &Path) -> (ModelSpec, PathBuf) {
    let shape = ToyShape {
        input_dim: 2,
        hidden: 6,
        features: 4,
        class_count: 2,
        relu_c: 1.0,
    };
    let model = ModelSpec::toy(3, shape, Seed(21)).unwrap();
    let path = dir.join("model.toml");
    save_model(&model, &path).unwrap();
    (model, path)
}

const TOY_CONFIG: &str = "d = 3\n\n[data]\nn_train = 200\nn_test = 50\n\n[train]\nlearning_rate = 0.05\nbatch_size = 32\nepochs = 3\nseed = 4\n";

#[test]
fn gen_rotation_is_deterministic_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.dary"), dir.path().join("b.dary"));
    let out_a = renn(&["gen-rotation", "--d", "3", "--seed", "7", "--out", p(&a)]);
    let out_b = renn(&["gen-rotation", "--d", "3", "--seed", "7", "--out", p(&b)]);
    assert!(out_a.status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(out_a.stdout, out_b.stdout);
    let phase: Vec<f64> = serde_json::from_slice(&out_a.stdout).unwrap();
    assert_eq!(phase.len(), 3);
    let m = read_file(&a).unwrap().into_matrix().unwrap();
    assert!(validate_rotation(&m).unwrap().passed());
}

#[test]
fn gen_rotation_rejects_d_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = renn(&[
        "gen-rotation",
        "--d",
        "1",
        "--seed",
        "7",
        "--out",
        p(&dir.path().join("k")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("--d") && msg.contains("2.."), "{msg}");
}

#[test]
fn three_stage_pipeline_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (model, model_path) = toy_model(d);
    let x = [0.7, -1.3];
    write_file(&d.join("x.dary"), &DaryPayload::from_vector(&x).unwrap()).unwrap();
    for (name, seed) in [("key.dary", "5"), ("other.dary", "6")] {
        assert!(
            renn(&["gen-rotation", "--d", "3", "--seed", seed, "--out", p(&d.join(name))])
                .status
                .success()
        );
    }
    let run = |key: &str, pred: &str| {
        let key = d.join(key);
        let (x, f, h, out) = (d.join("x.dary"), d.join("f.dary"), d.join("h.dary"), d.join(pred));
        let steps: [&[&str]; 3] = [
            &[
                "encrypt",
                "--model",
                p(&model_path),
                "--key",
                p(&key),
                "--input",
                p(&x),
                "--out",
                p(&f),
            ],
            &["process", "--model", p(&model_path), "--input", p(&f), "--out", p(&h)],
            &[
                "decrypt",
                "--model",
                p(&model_path),
                "--key",
                p(&key),
                "--input",
                p(&h),
                "--out",
                p(&out),
            ],
        ];
        for args in steps {
            let out = renn(args);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        }
        serde_json::from_slice::<serde_json::Value>(&fs::read(d.join(pred)).unwrap()).unwrap()
    };
    let good = run("key.dary", "p.json");
    let key = read_file(&d.join("key.dary")).unwrap().into_rotation().unwrap();
    let expected = infer(&x, &model, &key, Seed(0)).unwrap();
    let scores: Vec<f64> = serde_json::from_value(good["scores"].clone()).unwrap();
    for (a, b) in scores.iter().zip(&expected.scores) {
        assert!((a - b).abs() <= 1e-9);
    }
    assert_eq!(good["label"].as_u64().unwrap() as usize, expected.label);

    // Decrypting with another key yields a different component.
    let h = d.join("h.dary");
    let out = renn(&[
        "decrypt",
        "--model",
        p(&model_path),
        "--key",
        p(&d.join("other.dary")),
        "--input",
        p(&h),
        "--out",
        p(&d.join("q.json")),
    ]);
    assert!(out.status.success());
    let wrong: serde_json::Value = serde_json::from_slice(&fs::read(d.join("q.json")).unwrap()).unwrap();
    let fa: Vec<f64> = serde_json::from_value(good["feature"].clone()).unwrap();
    let fb: Vec<f64> = serde_json::from_value(wrong["feature"].clone()).unwrap();
    let dot: f64 = fa.iter().zip(&fb).map(|(a, b)| a * b).sum();
    let na: f64 = fa.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = fb.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(dot / (na * nb) < 1.0 - 1e-9);

    // Key values never appear in the non-key artifacts.
    let key_bytes = fs::read(d.join("key.dary")).unwrap();
    for artifact in ["f.dary", "h.dary", "p.json"] {
        let bytes = fs::read(d.join(artifact)).unwrap();
        for chunk in key_bytes[16..].chunks_exact(8) {
            assert!(!bytes.windows(8).any(|w| w == chunk), "key value in {artifact}");
            let text = format!("{}", f64::from_le_bytes(chunk.try_into().unwrap()));
            assert!(
                !String::from_utf8_lossy(&bytes).contains(&text),
                "key text in {artifact}"
            );
        }
    }
}

#[test]
fn decrypt_without_key_is_usage_error() {
    let out = renn(&["decrypt", "--model", "m.toml", "--input", "h.dary", "--out", "p.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--key"));
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(
        renn(&["report", "--input", "a", "--out", "b", "--bogus"]).status.code(),
        Some(2)
    );
}

#[test]
fn io_and_shape_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (_, model_path) = toy_model(d);
    assert!(
        renn(&["gen-rotation", "--d", "3", "--seed", "1", "--out", p(&d.join("k.dary"))])
            .status
            .success()
    );
    let missing = renn(&[
        "process",
        "--model",
        p(&d.join("nope.toml")),
        "--input",
        "x",
        "--out",
        "y",
    ]);
    assert_eq!(missing.status.code(), Some(4));
    write_file(&d.join("x3.dary"), &DaryPayload::from_vector(&[1.0, 2.0, 3.0]).unwrap()).unwrap();
    let bad = renn(&[
        "encrypt",
        "--model",
        p(&model_path),
        "--key",
        p(&d.join("k.dary")),
        "--input",
        p(&d.join("x3.dary")),
        "--out",
        p(&d.join("f.dary")),
    ]);
    assert_eq!(bad.status.code(), Some(3));
    fs::write(d.join("junk.dary"), b"not a dary file").unwrap();
    let junk = renn(&[
        "process",
        "--model",
        p(&model_path),
        "--input",
        p(&d.join("junk.dary")),
        "--out",
        p(&d.join("h")),
    ]);
    assert_eq!(junk.status.code(), Some(4));
}

#[test]
fn train_toy_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.toml"), TOY_CONFIG).unwrap();
    for run in ["a", "b"] {
        let sub = d.join(run);
        let out = renn(&[
            "train-toy",
            "--config",
            p(&d.join("cfg.toml")),
            "--seed",
            "9",
            "--out-model",
            p(&sub.join("model.toml")),
            "--out-log",
            p(&sub.join("log.csv")),
            "--out-critic",
            p(&sub.join("critic.toml")),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["log.csv", "model.toml", "critic.toml"] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let log = fs::read_to_string(d.join("a/log.csv")).unwrap();
    assert!(log.starts_with("epoch,task_loss,gan_loss,critic_loss,train_acc,test_acc,wall_seconds\n"));
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn train_toy_missing_field_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, TOY_CONFIG.replace("learning_rate = 0.05\n", "")).unwrap();
    let out = renn(&[
        "train-toy",
        "--config",
        p(&cfg),
        "--out-model",
        p(&dir.path().join("m.toml")),
        "--out-log",
        p(&dir.path().join("l.csv")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn train_toy_divergence_exits_five() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, TOY_CONFIG.replace("learning_rate = 0.05", "learning_rate = 1e12")).unwrap();
    let out = renn(&[
        "train-toy",
        "--config",
        p(&cfg),
        "--out-model",
        p(&dir.path().join("m.toml")),
        "--out-log",
        p(&dir.path().join("l.csv")),
    ]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("m.toml").exists());
}

#[test]
fn report_reproduces_attack_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (_, model_path) = toy_model(d);
    let rows: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    write_file(&d.join("inputs.dary"), &DaryPayload::new(6, 2, rows).unwrap()).unwrap();
    fs::write(
        d.join("attack.toml"),
        "attacker = \"cheating\"\ncandidates = 50\nseed = 3\n",
    )
    .unwrap();
    for run in ["a", "b"] {
        let out = renn(&[
            "attack",
            "--config",
            p(&d.join("attack.toml")),
            "--model",
            p(&model_path),
            "--inputs",
            p(&d.join("inputs.dary")),
            "--out-csv",
            p(&d.join(format!("{run}.csv"))),
            "--out-json",
            p(&d.join(format!("{run}.json"))),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("b.csv")).unwrap());
    let out = renn(&["report", "--input", p(&d.join("a.csv")), "--out", p(&d.join("r.json"))]);
    assert!(out.status.success());
    assert_eq!(fs::read(d.join("a.json")).unwrap(), fs::read(d.join("r.json")).unwrap());
    let csv = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn critic_attack_requires_critic_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (_, model_path) = toy_model(d);
    write_file(&d.join("inputs.dary"), &DaryPayload::new(1, 2, vec![0.1, 0.2]).unwrap()).unwrap();
    fs::write(d.join("attack.toml"), "attacker = \"critic\"\nseed = 3\n").unwrap();
    let out = renn(&[
        "attack",
        "--config",
        p(&d.join("attack.toml")),
        "--model",
        p(&model_path),
        "--inputs",
        p(&d.join("inputs.dary")),
        "--out-csv",
        p(&d.join("a.csv")),
        "--out-json",
        p(&d.join("a.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
