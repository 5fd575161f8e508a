use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::tempdir;

fn affkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_affkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn report(o: &Output) -> Vec<(String, f64)> {
    stdout(o)
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('=').expect("key=value line");
            (k.to_string(), v.parse().expect("numeric value"))
        })
        .collect()
}

fn value(o: &Output, key: &str) -> f64 {
    report(o).into_iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("no {key}")).1
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let o = affkit(&[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = affkit(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    assert_eq!(code(&affkit(&["--help"])), 0);
}

#[test]
fn gradcheck_passes_and_is_deterministic() {
    let a = affkit(&["gradcheck", "--seed", "7"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let r = report(&a);
    assert!(r.len() >= 20);
    assert!(r.iter().all(|(_, v)| *v < 1e-4), "{r:?}");
    assert_eq!(a.stdout, affkit(&["gradcheck", "--seed", "7"]).stdout);
}

#[test]
fn toy_data_is_byte_identical_for_a_seed() {
    let dir = tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = affkit(&["make-toy-data", "--seed", "7", "--out", s(out), "--scenes", "3", "--videos", "4"]);
        assert_eq!(code(&o), 0);
    }
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert!(ta.len() > 10);
    assert_eq!(ta, tb);
    let c = dir.path().join("c");
    affkit(&["make-toy-data", "--seed", "8", "--out", s(&c), "--scenes", "3", "--videos", "4"]);
    assert_ne!(read_tree(&c), ta);
}

#[test]
fn flags_override_config_file() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# toy sizes\nscenes = 2\nvideos = 9\n").unwrap();
    let out = dir.path().join("d");
    let o = affkit(&["make-toy-data", "--config", s(&cfg), "--out", s(&out), "--videos", "3"]);
    assert_eq!(code(&o), 0);
    assert_eq!(value(&o, "scenes"), 2.0);
    assert_eq!(value(&o, "videos"), 3.0);

    fs::write(&cfg, "scenes = many\n").unwrap();
    assert_eq!(code(&affkit(&["make-toy-data", "--config", s(&cfg), "--out", s(&out)])), 1);
    fs::write(&cfg, "no equals sign\n").unwrap();
    assert_eq!(code(&affkit(&["make-toy-data", "--config", s(&cfg), "--out", s(&out)])), 2);
}

#[test]
fn bad_input_files_exit_with_data_error() {
    let dir = tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let feats = dir.path().join("f.afk");
    fs::write(&feats, b"AFK1").unwrap();
    let o = affkit(&["decode-v2c", "--checkpoint", s(&bad), "--features", s(&feats)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte"));
    let missing = dir.path().join("missing");
    assert_eq!(code(&affkit(&["eval-aff", "--data", s(&missing), "--checkpoint", s(&bad)])), 2);
}

#[test]
fn affordance_pipeline_end_to_end() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(code(&affkit(&["make-toy-data", "--seed", "3", "--out", s(&data), "--scenes", "4", "--videos", "2"])), 0);
    let aff = data.join("aff");
    let ckpt = dir.path().join("aff.ckpt");
    let o = affkit(&["train-aff", "--data", s(&aff), "--out", s(&ckpt), "--steps", "3", "--batch", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(value(&o, "steps"), 3.0);
    let acc = value(&o, "mask_pixel_accuracy");
    assert!((0.0..=1.0).contains(&acc));

    let preds = dir.path().join("preds");
    let o = affkit(&["eval-aff", "--data", s(&aff), "--checkpoint", s(&ckpt), "--predictions", s(&preds), "--json"]);
    assert_eq!(code(&o), 0);
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in ["f_beta_w_grasp", "f_beta_w_contain", "f_beta_w_mean", "pixel_accuracy"] {
        let v = json[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key}={v}");
    }

    let refined = dir.path().join("refined.pgm");
    let o = affkit(&[
        "crf-refine",
        "--image",
        s(&aff.join("scene_0000.ppm")),
        "--labels",
        s(&preds.join("pred_0000.pgm")),
        "--out",
        s(&refined),
        "--iterations",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(refined.is_file());
    let o = affkit(&["crf-refine", "--image", s(&aff.join("scene_0000.ppm")), "--labels", s(&refined), "--out", s(&refined), "--confidence", "1.5"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn v2c_pipeline_end_to_end() {
    let dir = tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(code(&affkit(&["make-toy-data", "--seed", "5", "--out", s(&data), "--scenes", "1", "--videos", "6"])), 0);
    let v2c = data.join("v2c");
    let ckpt = dir.path().join("v.ckpt");
    let train = |cell: &str| {
        affkit(&[
            "train-v2c", "--data", s(&v2c), "--out", s(&ckpt), "--cell", cell, "--epochs", "2", "--lr", "1e-3",
            "--train-fraction", "0.5", "--split-seed", "1",
        ])
    };
    let o = train("gru");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(value(&o, "epochs"), 2.0);
    let first = fs::read(&ckpt).unwrap();
    assert_eq!(code(&train("gru")), 0);
    assert_eq!(fs::read(&ckpt).unwrap(), first, "training is deterministic");
    assert_eq!(code(&train("rnn")), 1);
    assert_eq!(code(&train("lstm")), 0);

    let feats = v2c.join("features/video_0000.afk");
    let o = affkit(&["decode-v2c", "--checkpoint", s(&ckpt), "--features", s(&feats)]);
    assert_eq!(code(&o), 0);
    let vocab = fs::read_to_string(v2c.join("vocab.txt")).unwrap();
    assert!(stdout(&o).split_whitespace().all(|w| vocab.lines().any(|t| t == w)));

    let o = affkit(&["classify-action", "--checkpoint", s(&ckpt), "--features", s(&feats)]);
    assert_eq!(code(&o), 0);
    assert!(["cut", "pour", "stir", "carry"].contains(&stdout(&o).trim()));

    let o = affkit(&["eval-v2c", "--checkpoint", s(&ckpt), "--data", s(&v2c), "--train-fraction", "0.5", "--split-seed", "1", "--part", "test"]);
    assert_eq!(code(&o), 0);
    assert_eq!(value(&o, "examples"), 3.0);
    for key in ["bleu_1", "bleu_4", "rouge_l"] {
        assert!((0.0..=1.0).contains(&value(&o, key)));
    }
    assert!((0.0..=100.0).contains(&value(&o, "action_success_rate")));

    let o = affkit(&["eval-aff", "--data", s(&data.join("aff")), "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&o), 1, "wrong model kind");
}
