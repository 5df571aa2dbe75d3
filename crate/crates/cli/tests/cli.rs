use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn skorder(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skorder"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_TASKS: &str = r#"{"n_range": [20, 40], "p_range": [3, 5], "seed": 9}"#;

const SMOKE_TRAIN: &str = r#"{
  "iterations": 4, "batch_size": 2, "validation_tasks": 3, "checkpoint_interval": 2, "seed": 5,
  "encoder": {"d": 8, "blocks": 1, "heads": 2, "ffn_mult": 2, "m": 2, "hidden_mult_skeleton": 2},
  "task": {"n_range": [10, 20], "p_range": [2, 5]}
}"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn bundle_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            for f in ["data.csv", "graph.json", "meta.json"] {
                out.push((
                    path.strip_prefix(dir).unwrap().join(f),
                    fs::read(path.join(f)).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_zero_writes_only_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("none");
    let o = skorder(&["generate", "--count", "0", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let names: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(names, vec!["manifest.json"]);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "generate");
    assert!(m["config"]["graph_families"].is_object());
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL_TASKS);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = skorder(&[
            "generate",
            "--config",
            s(&cfg),
            "--count",
            "4",
            "--out",
            s(dir),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let fa = bundle_files(&a);
    assert_eq!(fa.len(), 12);
    assert_eq!(fa, bundle_files(&b));
    let c = tmp.path().join("c");
    skorder(&[
        "generate",
        "--config",
        s(&cfg),
        "--count",
        "4",
        "--seed",
        "10",
        "--out",
        s(&c),
    ]);
    assert_ne!(fa, bundle_files(&c));
}

#[test]
fn ood_preset_is_applied() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL_TASKS);
    let out = tmp.path().join("g");
    let o = skorder(&[
        "generate",
        "--config",
        s(&cfg),
        "--count",
        "3",
        "--ood",
        "gamma-noise",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let noise = m["config"]["noise_families"].as_object().unwrap();
    assert_eq!(noise.keys().collect::<Vec<_>>(), vec!["gamma"]);
    for entry in fs::read_dir(&out).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            let meta = fs::read_to_string(p.join("meta.json")).unwrap();
            assert!(meta.contains("Gamma") || meta.contains("gamma"), "{meta}");
        }
    }
    let bad = skorder(&[
        "generate",
        "--count",
        "1",
        "--ood",
        "no-such-shift",
        "--out",
        s(&out),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn bad_config_exits_2_naming_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let typed = write(tmp.path(), "typed.json", r#"{"n_range": [10, "many"]}"#);
    let o = skorder(&["generate", "--config", s(&typed), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n_range"), "{}", stderr(&o));

    let ranged = write(tmp.path(), "ranged.json", r#"{"p_range": [6, 3]}"#);
    let o = skorder(&["generate", "--config", s(&ranged), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("p_range"), "{}", stderr(&o));

    let unknown = write(tmp.path(), "unknown.json", r#"{"batch_sise": 4}"#);
    let o = skorder(&["train", "--config", s(&unknown), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_sise"), "{}", stderr(&o));
}

#[test]
fn train_smoke_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let half = write(
        tmp.path(),
        "half.json",
        &SMOKE_TRAIN.replace("\"iterations\": 4", "\"iterations\": 2"),
    );
    let full = write(tmp.path(), "full.json", SMOKE_TRAIN);

    let o = skorder(&["train", "--config", s(&half), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("final.bin").is_file());
    assert!(run.join("checkpoints/ckpt-00000002.bin").is_file());

    let o = skorder(&["train", "--config", s(&full), "--out", s(&run), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let train = fs::read_to_string(run.join("train.csv")).unwrap();
    let mut lines = train.lines();
    assert_eq!(lines.next(), Some("iteration,train_nll,wall_ms"));
    let iters: Vec<u64> = lines
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(iters, vec![0, 1, 2, 3]);
    let val = fs::read_to_string(run.join("val.csv")).unwrap();
    assert!(val.starts_with("iteration,val_nll,nshd,f1,ap,wall_ms\n"));
    let val_iters: Vec<u64> = val
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(val_iters, vec![0, 2, 4]);

    // Same weights as a run that was never interrupted.
    let straight = tmp.path().join("straight");
    let o = skorder(&["train", "--config", s(&full), "--out", s(&straight)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(run.join("final.bin")).unwrap(),
        fs::read(straight.join("final.bin")).unwrap()
    );
}

#[test]
fn persistent_non_finite_loss_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "boom.json",
        &SMOKE_TRAIN
            .replace("\"iterations\": 4", "\"iterations\": 30")
            .replace("\"seed\": 5,", "\"seed\": 5, \"optimizer\": {\"lr\": 1e300, \"betas\": [0.9, 0.95], \"eps\": 1e-8, \"weight_decay\": 0.0},"),
    );
    let o = skorder(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("10 consecutive"));
}

#[test]
fn predict_and_eval_on_bundles() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = write(tmp.path(), "t.json", SMOKE_TRAIN);
    assert!(skorder(&["train", "--config", s(&cfg), "--out", s(&run)])
        .status
        .success());
    let tasks_cfg = write(tmp.path(), "c.json", SMALL_TASKS);
    let tasks = tmp.path().join("tasks");
    assert!(skorder(&[
        "generate",
        "--config",
        s(&tasks_cfg),
        "--count",
        "3",
        "--out",
        s(&tasks)
    ])
    .status
    .success());

    let model = run.join("final.bin");
    let data = tasks.join("task-000000/data.csv");
    let out = tmp.path().join("pred/graph.json");
    let o = skorder(&[
        "predict",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let graph: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let cols = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .split(',')
        .count();
    assert_eq!(graph["p"], cols);
    let g = skorder::io::graph_from_json(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!(skorder::graph::is_acyclic(&g));
    let beliefs = fs::read_to_string(out.with_file_name("beliefs.json")).unwrap();
    assert_eq!(skorder::io::beliefs_from_json(&beliefs).unwrap().p(), cols);
    assert!(out.with_file_name("manifest.json").is_file());

    let first = fs::read(&out).unwrap();
    assert!(skorder(&[
        "predict",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--out",
        s(&out)
    ])
    .status
    .success());
    assert_eq!(fs::read(&out).unwrap(), first);
    assert_eq!(
        fs::read_to_string(out.with_file_name("beliefs.json")).unwrap(),
        beliefs
    );

    let report = tmp.path().join("report.csv");
    let o = skorder(&[
        "eval",
        "--model",
        s(&model),
        "--tasks",
        s(&tasks),
        "--out",
        s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 1 + 3 + 1);
    assert!(rows[0].starts_with("task,n,p,edges,shd,nshd"));
    assert!(rows[4].starts_with("summary,"));
    assert!(rows[1].starts_with("task-000000,"));
}

#[test]
fn predict_rejects_bad_data() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = write(tmp.path(), "t.json", SMOKE_TRAIN);
    assert!(skorder(&["train", "--config", s(&cfg), "--out", s(&run)])
        .status
        .success());
    let model = run.join("final.bin");

    let bad = write(tmp.path(), "bad.csv", "a,b,c\n1,2,3\n4,x,6\n7,8,9\n");
    let o = skorder(&[
        "predict",
        "--model",
        s(&model),
        "--data",
        s(&bad),
        "--out",
        s(&tmp.path().join("g.json")),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("row 2, column 2"), "{}", stderr(&o));

    // Wider than the p_range the model was trained on.
    let wide = write(
        tmp.path(),
        "wide.csv",
        "1,2,3,4,5,6\n6,5,4,3,2,1\n1,1,2,3,5,8\n",
    );
    let o = skorder(&[
        "predict",
        "--model",
        s(&model),
        "--data",
        s(&wide),
        "--out",
        s(&tmp.path().join("g.json")),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn predict_standardizes_raw_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = write(tmp.path(), "t.json", SMOKE_TRAIN);
    assert!(skorder(&["train", "--config", s(&cfg), "--out", s(&run)])
        .status
        .success());
    let model = run.join("final.bin");
    // The same table up to per-column affine maps must give the same answer.
    let base = "0.5,1.0,-2.0\n1.5,-0.5,0.25\n-1.0,2.0,1.0\n0.0,0.1,0.3\n";
    let scaled: String = base
        .lines()
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|c| c.parse().unwrap()).collect();
            format!(
                "{},{},{}\n",
                100.0 * v[0] + 7.0,
                0.01 * v[1] - 3.0,
                5.0 * v[2]
            )
        })
        .collect();
    let a = write(tmp.path(), "a.csv", base);
    let b = write(tmp.path(), "b.csv", &scaled);
    let (ga, gb) = (
        tmp.path().join("a/graph.json"),
        tmp.path().join("b/graph.json"),
    );
    assert!(skorder(&[
        "predict",
        "--model",
        s(&model),
        "--data",
        s(&a),
        "--out",
        s(&ga)
    ])
    .status
    .success());
    assert!(skorder(&[
        "predict",
        "--model",
        s(&model),
        "--data",
        s(&b),
        "--out",
        s(&gb)
    ])
    .status
    .success());
    assert_eq!(fs::read(&ga).unwrap(), fs::read(&gb).unwrap());
    let ba = skorder::io::beliefs_from_json(
        &fs::read_to_string(ga.with_file_name("beliefs.json")).unwrap(),
    )
    .unwrap();
    let bb = skorder::io::beliefs_from_json(
        &fs::read_to_string(gb.with_file_name("beliefs.json")).unwrap(),
    )
    .unwrap();
    for (x, y) in ba.nu_matrix().iter().zip(bb.nu_matrix()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn check_reports_each_invariant() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("checks.json");
    let o = skorder(&["check", "--suite", "factorization", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.len() >= 3);
    for l in &lines {
        assert_eq!(l["suite"], "factorization");
        assert_eq!(l["passed"], true);
        assert!(!l["anchor"].as_str().unwrap().is_empty());
    }
    assert!(lines.iter().any(|l| l["name"] == "dag_decomposition"));
    let saved: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(saved.len(), lines.len());

    let o = skorder(&["check", "--suite", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_all_passes() {
    let o = skorder(&["check", "--suite", "all"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
    let n = String::from_utf8(o.stdout).unwrap().lines().count();
    assert!(n >= 20, "{n} invariants reported");
}
