use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentseq"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn latentseq")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit status")
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_SEGMODEL: &str = r#"{
    "task": "segmodel", "seed": 2,
    "model": {"hidden": 12, "embed": 12},
    "data": {"n_train": 40, "n_dev": 8, "n_test": 8},
    "optimizer": {"epochs": 1}
}"#;

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&run(&["train", "--task", "vrs", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["train", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["train", "--task", "nope", "--seed", "1"])), 2);
    let no_seed = write_config(dir.path(), "a.json", r#"{"task": "segmodel"}"#);
    let o = run(&["train", "--config", &no_seed, "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "config");
    let missing = write_config(dir.path(), "b.json", r#"{"task": "segmodel", "seed": 0, "paths": {"train": "nope.jsonl"}}"#);
    assert_eq!(code(&run(&["train", "--config", &missing])), 2);
    assert_eq!(code(&run(&["eval", "--seed", "0", "--out", s(&out)])), 2);
    assert_eq!(code(&run(&["lattice-check", "--seed", "0", "--threads", "0"])), 2);
}

#[test]
fn task_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let bogus = dir.path().join("bogus.json");
    fs::write(&bogus, "{}").unwrap();
    let o = run(&["eval", "--seed", "0", "--checkpoint", s(&bogus), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().len() > 0);
}

#[test]
fn lattice_check_reports_deviations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"task": "lattice-check", "seed": 5, "oracle": {"n_marginal": 40, "n_micro": 10}}"#,
    );
    let out = dir.path().join("lc");
    let o = run(&["lattice-check", "--config", &cfg, "--out", s(&out), "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["passed"], true);
    let csv = fs::read_to_string(out.join("lattice_check.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "check,instances,max_dev,tol,passed");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 9);
    for r in rows {
        assert_eq!(r.len(), 5);
        let dev: f64 = r[2].parse().unwrap();
        let tol: f64 = r[3].parse().unwrap();
        assert!(dev <= tol && r[4] == "true");
        r[1].parse::<usize>().unwrap();
    }
}

#[test]
fn bench_csv_contract_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "b.json",
        r#"{"task": "estimator-bench", "seed": 3, "bench": {"n_trials": 2, "n_samples": 5000}}"#,
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["bench", "--config", &cfg, "--out", s(&a)])), 0);
    assert_eq!(code(&run(&["bench", "--config", &cfg, "--out", s(&b), "--threads", "2"])), 0);
    for f in ["bench_categorical.csv", "bench_gaussian.csv", "schedules.csv", "metrics.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    for f in ["bench_categorical.csv", "bench_gaussian.csv"] {
        let csv = fs::read_to_string(a.join(f)).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "estimator,bias,mean_var,n_samples,wall_time_s");
        for l in lines {
            let c: Vec<&str> = l.split(',').collect();
            assert_eq!(c.len(), 5);
            assert!(c[1].parse::<f64>().unwrap() >= 0.0);
            assert!(c[2].parse::<f64>().unwrap() >= 0.0);
            assert_eq!(c[3].parse::<usize>().unwrap(), 10_000);
            assert_eq!(c[4].parse::<f64>().unwrap(), 0.0);
        }
    }
    let sched = fs::read_to_string(a.join("schedules.csv")).unwrap();
    let first: Vec<f64> = sched.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    let last: Vec<f64> = sched.lines().last().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(&first[1..3], &[0.0, 1.0]);
    assert_eq!(&last[1..3], &[1.0, 0.0]);
    let manifest: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["version"], latentseq::VERSION);
    assert_eq!(manifest["config"]["seed"], 3);
}

#[test]
fn synth_data_schema_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.json", TINY_SEGMODEL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["synth-data", "--config", &cfg, "--seed", "8", "--out", s(&a)])), 0);
    assert_eq!(code(&run(&["synth-data", "--config", &cfg, "--seed", "8", "--out", s(&b)])), 0);
    for split in ["train", "dev", "test"] {
        let f = format!("{split}.jsonl");
        let bytes = fs::read(a.join(&f)).unwrap();
        assert_eq!(bytes, fs::read(b.join(&f)).unwrap());
        for line in String::from_utf8(bytes).unwrap().lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            let k = v["records"].as_array().unwrap().len();
            assert!((3..=8).contains(&k));
            let text = v["text"].as_array().unwrap();
            let mut prev = 0;
            for g in v["gold_segments"].as_array().unwrap() {
                let g: Vec<u64> = g.as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
                assert_eq!(g[0], prev);
                assert!(g[1] > g[0] && g[1] - g[0] <= 6);
                assert!((g[2] as usize) < k + 1);
                prev = g[1];
            }
            assert_eq!(prev as usize, text.len());
        }
    }
}

#[test]
fn segmodel_train_eval_align_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.json", TINY_SEGMODEL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run(&["train", "--config", &cfg, "--out", s(&a), "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&run(&["train", "--config", &cfg, "--out", s(&b)])), 0);
    for f in ["metrics.json", "epochs.jsonl", "manifest.json", "model.json", "model.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m: Value = serde_json::from_slice(&fs::read(a.join("metrics.json")).unwrap()).unwrap();
    for key in ["coverage", "repetitions", "exact_match", "mean_expected_segments", "boundary_f1", "faithfulness"] {
        assert!(m["test"][key].is_number(), "{key}");
    }
    assert_eq!(m["test"]["coverage"], 1.0);
    assert_eq!(m["test"]["repetitions"], 0);

    let ck = a.join("model.json");
    let ev = dir.path().join("ev");
    assert_eq!(code(&run(&["eval", "--config", &cfg, "--checkpoint", s(&ck), "--out", s(&ev)])), 0);
    let e: Value = serde_json::from_slice(&fs::read(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(e, m["test"]);

    let data = dir.path().join("data");
    assert_eq!(code(&run(&["synth-data", "--config", &cfg, "--out", s(&data)])), 0);
    let test = data.join("test.jsonl");
    let o = run(&["align", "--checkpoint", s(&ck), "--input", s(&test), "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: Value = serde_json::from_slice(&o.stdout).unwrap();
    let f1 = rep["boundary_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    let inputs: Vec<Value> = fs::read_to_string(&test).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let examples = rep["examples"].as_array().unwrap();
    assert_eq!(examples.len(), inputs.len());
    for (ex, inp) in examples.iter().zip(&inputs) {
        let k = inp["records"].as_array().unwrap().len();
        let mut seen = vec![0; k + 1];
        for seg in ex["segments"].as_array().unwrap() {
            seen[seg["record"].as_u64().unwrap() as usize] += 1;
            for t in seg["tokens"].as_array().unwrap() {
                let sum: f64 = t["gen"].as_f64().unwrap()
                    + t["positions"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum::<f64>();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
        assert!(seen[1..].iter().all(|&c| c == 1), "{seen:?}");
    }
    let o = run(&["align", "--checkpoint", s(&ck), "--input", s(&test)]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("corpus boundary F1"));

    // a manifest whose tensors disagree with its config is rejected
    let mut manifest: Value = serde_json::from_slice(&fs::read(&ck).unwrap()).unwrap();
    manifest["config"]["hidden"] = Value::from(13);
    let bad = a.join("bad.json");
    fs::write(&bad, serde_json::to_vec(&manifest).unwrap()).unwrap();
    let o = run(&["align", "--checkpoint", s(&bad), "--input", s(&test)]);
    assert_eq!(code(&o), 1);
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "checkpoint");
}

#[test]
fn vrs_and_backtranslation_tasks_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let vrs = write_config(
        dir.path(),
        "v.json",
        r#"{"task": "vrs", "seed": 1, "model": {"hidden": 8, "embed": 8},
            "data": {"n_train": 20, "n_dev": 1, "n_test": 1},
            "optimizer": {"batch_size": 2}, "vrs": {"pretrain_steps": 2, "steps": 3}}"#,
    );
    let bt = write_config(
        dir.path(),
        "t.json",
        r#"{"task": "backtranslation", "seed": 0,
            "backtranslation": {"init_steps": 5, "iterations": 1, "model": {"hidden": 8, "embed": 8, "pos_dim": 4}}}"#,
    );
    for (cfg, files) in [(vrs, vec!["vrs.jsonl", "metrics.json"]), (bt, vec!["bt.jsonl", "metrics.json"])] {
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let o = run(&["train", "--config", &cfg, "--out", s(&a)]);
        assert!(code(&o) <= 1, "{}", String::from_utf8_lossy(&o.stderr));
        run(&["train", "--config", &cfg, "--out", s(&b)]);
        for f in files {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }
    let log = fs::read_to_string(dir.path().join("a/bt.jsonl")).unwrap();
    let rows: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r["iter"], i);
        for key in ["fwd_ce", "bwd_ce", "exact_match"] {
            assert!(r[key].is_number());
        }
    }
}
