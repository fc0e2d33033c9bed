use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use drclip::drstore::Store;
use drclip::numerics::mmeb::EmbeddingFile;
use drclip::numerics::Matrix;

fn drclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drclip"))
        .args(args)
        .output()
        .expect("spawn drclip")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn corpus(dir: &Path, count: usize) -> PathBuf {
    let out = dir.join("corpus");
    let o = drclip(&[
        "generate",
        "--out",
        p(&out),
        "--count",
        &count.to_string(),
        "--image-size",
        "16",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn reinforce(input: &Path, store: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "reinforce",
        "--input",
        p(input),
        "--store",
        p(store),
        "--aug-count",
        "2",
        "--caption-count",
        "2",
        "--view-size",
        "16",
        "--teachers",
        "palette:16,random:8",
    ];
    args.extend_from_slice(extra);
    drclip(&args)
}

#[test]
fn generate_writes_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = corpus(dir.path(), 6);
    for id in 0..6 {
        assert!(out.join(format!("{id:06}.png")).is_file());
        let caption = fs::read_to_string(out.join(format!("{id:06}.txt"))).unwrap();
        assert!(caption.starts_with("a photo of"), "{caption}");
    }
}

#[test]
fn inspect_report_is_the_serialized_stats() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus(dir.path(), 12);
    let store = dir.path().join("s.drs");
    let o = reinforce(&input, &store, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = dir.path().join("inspect.json");
    let o = drclip(&[
        "inspect",
        "--store",
        p(&store),
        "--verify",
        "--report",
        p(&report),
    ]);
    assert_eq!(code(&o), 0);
    let stats = Store::open(&store).unwrap().stats().unwrap();
    assert_eq!(stats.sample_count, 12);
    let expected = serde_json::to_string_pretty(&stats).unwrap() + "\n";
    assert_eq!(fs::read_to_string(&report).unwrap(), expected);
    let o = drclip(&["inspect", "--store", p(&store)]);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), expected);
}

#[test]
fn empty_input_gives_empty_store() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty");
    fs::create_dir(&input).unwrap();
    let store = dir.path().join("s.drs");
    let o = reinforce(&input, &store, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["written"], 0);
    assert_eq!(report["stats"]["sample_count"], 0);
    assert_eq!(Store::open(&store).unwrap().len(), 0);
}

#[test]
fn bad_teacher_inputs_fail_before_the_store_exists() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus(dir.path(), 3);
    let store = dir.path().join("s.drs");

    let missing = dir.path().join("missing.mmeb");
    let spec = format!("mmeb:{}:16", p(&missing));
    let o = reinforce(&input, &store, &["--teachers", &spec]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.mmeb"));
    assert!(!store.exists());

    let wrong = dir.path().join("wrong.mmeb");
    let m = Matrix::<f32>::filled(2, 12, 0.1);
    fs::write(&wrong, EmbeddingFile::from_matrix(&m).to_bytes().unwrap()).unwrap();
    let spec = format!("mmeb:{}:16", p(&wrong));
    let o = reinforce(&input, &store, &["--teachers", &spec]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("wrong.mmeb") && err.contains("16") && err.contains("12"),
        "{err}"
    );
    assert!(!store.exists());

    for spec in ["palette:0", "laser:8", "mmeb:16", ""] {
        let o = reinforce(&input, &store, &["--teachers", spec]);
        assert_eq!(code(&o), 2, "{spec}");
        assert!(!store.exists());
    }
}

#[test]
fn validation_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus(dir.path(), 3);
    let store = dir.path().join("s.drs");
    assert_eq!(code(&reinforce(&input, &store, &["--aug-count", "0"])), 2);
    assert_eq!(
        code(&reinforce(&input, &store, &["--teacher-temp", "-1"])),
        2
    );
    assert_eq!(
        code(&drclip(&[
            "train", "--store", "x", "--out", "y", "--lambda", "1.5"
        ])),
        2
    );
    assert_eq!(code(&drclip(&["frobnicate"])), 2);
    assert_eq!(code(&drclip(&["--help"])), 0);
}

#[test]
fn missing_store_exits_three_and_writes_error_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let o = drclip(&[
        "inspect",
        "--store",
        p(&dir.path().join("nope.drs")),
        "--report",
        p(&report),
    ]);
    assert_eq!(code(&o), 3);
    let body: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(body["exit_code"], 3);
    assert!(body["error"].as_str().unwrap().contains("nope.drs"));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus(dir.path(), 10);
    let store = dir.path().join("s.drs");
    assert_eq!(code(&reinforce(&input, &store, &[])), 0);
    let cfg = dir.path().join("train.conf");
    fs::write(
        &cfg,
        "# tiny run\nmodel = small\nimage_size = 16\nbatch-size = 4\niterations = 7\nlambda = 0.25\n",
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = drclip(&[
        "train",
        "--config",
        p(&cfg),
        "--store",
        p(&store),
        "--out",
        p(&ckpt),
        "--iterations",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["steps"], 3);
    assert_eq!(report["config"]["lambda"], 0.25);
    assert_eq!(report["config"]["batch_size"], 4);
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus(dir.path(), 16);
    let store = dir.path().join("s.drs");
    assert_eq!(code(&reinforce(&input, &store, &[])), 0);
    let ckpt = dir.path().join("m.ckpt");
    let log = dir.path().join("log.jsonl");
    let o = drclip(&[
        "train",
        "--store",
        p(&store),
        "--out",
        p(&ckpt),
        "--log",
        p(&log),
        "--model",
        "small",
        "--image-size",
        "16",
        "--batch-size",
        "8",
        "--iterations",
        "4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i);
        let (loss, clip, distill) = (
            l["loss"].as_f64().unwrap(),
            l["clip_loss"].as_f64().unwrap(),
            l["distill_loss"].as_f64().unwrap(),
        );
        assert!((loss - (0.25 * clip + 0.75 * distill)).abs() < 1e-4 * loss.abs().max(1.0));
    }

    let eval = |ckpt: &Path| -> serde_json::Value {
        let o = drclip(&["eval", "--store", p(&store), "--checkpoint", p(ckpt)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_slice(&o.stdout).unwrap()
    };
    let before = eval(&ckpt);
    assert_eq!(before["count"], 16);
    assert!(before["zero_shot_accuracy"].is_number());

    let fused = dir.path().join("f.ckpt");
    let o = drclip(&[
        "export-reparam",
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&fused),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(r["params_after"].as_u64() < r["params_before"].as_u64());
    assert!(r["max_abs_diff"].as_f64().unwrap() <= 1e-5);
    let after = eval(&fused);
    let kl = |v: &serde_json::Value| v["teacher_kl"].as_f64().unwrap();
    assert!((kl(&before) - kl(&after)).abs() < 1e-3);

    let o = drclip(&[
        "train",
        "--store",
        p(&store),
        "--out",
        p(&dir.path().join("x.ckpt")),
        "--init",
        p(&fused),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_reports_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    let input = corpus(dir.path(), 8);
    let store = dir.path().join("s.drs");
    assert_eq!(code(&reinforce(&input, &store, &[])), 0);
    let o = drclip(&[
        "bench",
        "--store",
        p(&store),
        "--model",
        "small",
        "--image-size",
        "16",
        "--batch-size",
        "4",
        "--steps",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let modes: Vec<&str> = r["reports"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["mode"].as_str().unwrap())
        .collect();
    assert_eq!(modes, ["reinforced", "plain-clip", "online-teacher-stub"]);
    assert!(r["reinforced_over_plain"].as_f64().unwrap() > 0.0);
}
