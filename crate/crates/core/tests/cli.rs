use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;

use midecomp::evaluation::read_rows_csv;

const BIN: &str = env!("CARGO_BIN_EXE_midecomp");

/// Small cohort, small model, two epochs.
const CONFIG: &str = r#"{
  "cohort": {"num_subjects": 3, "trials_per_class": 10, "n_c": 4, "n_t": 128, "sample_rate": 64.0},
  "model": {"base_depth": 2, "scorers": {"decomposition_hidden": 8, "local_hidden": 4, "global_hidden": 4}},
  "train": {"epochs": 2, "batch_size": 10}
}"#;

fn run(dir: &Path, args: &[&str]) -> (i32, String) {
    let cfg = dir.join("config.json");
    if !cfg.exists() {
        fs::write(&cfg, CONFIG).unwrap();
    }
    let out = Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

fn files(dir: &Path) -> BTreeSet<String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect()
}

#[test]
fn synth_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for o in [&a, &b] {
        let (code, log) = run(d.path(), &["synth", "--seed", "5", "--out", o.to_str().unwrap()]);
        assert_eq!(code, 0, "{log}");
    }
    let fa = fs::read(a.join("trials.trialset")).unwrap();
    assert_eq!(fa, fs::read(b.join("trials.trialset")).unwrap());
    let (header, trials) = midecomp::signal::trialset::load(&a.join("trials.trialset")).unwrap();
    assert_eq!(header.n_trials, trials.len());
    assert_eq!(trials.len(), 60);
    assert!(a.join("resolved_config.json").exists());
}

#[test]
fn train_eval_explain_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let out = |s: &str| p.join(s).to_str().unwrap().to_string();
    assert_eq!(run(p, &["synth", "--out", &out("data")]).0, 0);
    let data = out("data/trials.trialset");

    let (code, log) = run(p, &["train", "--data", &data, "--weights", "1,0,0", "--out", &out("base")]);
    assert_eq!(code, 0, "{log}");
    let hist = fs::read_to_string(p.join("base/history.csv")).unwrap();
    let mut lines = hist.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        for name in ["L_dec", "L_local", "L_global"] {
            assert_eq!(f[col(name)].parse::<f64>().unwrap(), 0.0, "{name} in {line}");
        }
    }
    assert!(p.join("base/checkpoint.json").exists());
    assert!(p.join("base/resolved_config.json").exists());

    let (code, log) = run(p, &["train", "--data", &data, "--variant", "III", "--out", &out("m3")]);
    assert_eq!(code, 0, "{log}");
    let hist = fs::read_to_string(p.join("m3/history.csv")).unwrap();
    let last: Vec<f64> = hist.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(last[3] != 0.0 && last[4] == 0.0, "variant III trains local MI only: {last:?}");

    let (code, log) = run(p, &["eval", "--data", &data, "--scenario", "2", "--out", &out("eval")]);
    assert_eq!(code, 0, "{log}");
    let rows = read_rows_csv(fs::File::open(p.join("eval/results.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / 3.0;
    let json: serde_json::Value = serde_json::from_slice(&fs::read(p.join("eval/results.json")).unwrap()).unwrap();
    assert!((json["mean"].as_f64().unwrap() - mean).abs() < 1e-12);

    let (code, log) = run(p, &["eval", "--data", &data, "--baseline", "csp", "--out", &out("csp")]);
    assert_eq!(code, 0, "{log}");
    let a = fs::read_to_string(p.join("eval/results.csv")).unwrap();
    let b = fs::read_to_string(p.join("csp/results.csv")).unwrap();
    assert_eq!(a.lines().next(), b.lines().next());
    assert_eq!(read_rows_csv(b.as_bytes()).unwrap().len(), 3);

    let ckpt = out("base/checkpoint.json");
    let (code, log) = run(p, &["explain", "--checkpoint", &ckpt, "--data", &data, "--out", &out("explain")]);
    assert_eq!(code, 0, "{log}");
    let want: BTreeSet<String> = ["topomap.csv", "embeddings.csv", "psd.csv"].map(String::from).into();
    assert_eq!(files(&p.join("explain")), want);
    let psd = fs::read_to_string(p.join("explain/psd.csv")).unwrap();
    let fmax = psd.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap()).fold(0.0, f64::max);
    assert!(fmax <= 32.0);
    let topo = fs::read_to_string(p.join("explain/topomap.csv")).unwrap();
    assert!(topo.lines().skip(1).all(|l| {
        let v: f64 = l.rsplit(',').next().unwrap().parse().unwrap();
        (0.0..=1.0).contains(&v)
    }));

    let (code, log) = run(p, &["export", "--checkpoint", &ckpt, "--data", &data, "--out", &out("export")]);
    assert_eq!(code, 0, "{log}");
    let emb = fs::read_to_string(p.join("export/embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 1 + 3 * 60);
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let o = p.join("o");
    let o = o.to_str().unwrap();
    assert_eq!(run(p, &["train", "--out", o, "--no-such-flag"]).0, 2);
    assert_eq!(run(p, &["train", "--out", o, "--set", "train.epochz=1"]).0, 2);
    assert_eq!(run(p, &["train", "--out", o, "--backbone", "resnet"]).0, 2);
    // One subject cannot be held out.
    let (code, log) = run(p, &["eval", "--out", o, "--set", "cohort.num_subjects=1"]);
    assert_eq!(code, 3, "{log}");
    // A learning rate this large overflows within the first epoch.
    let (code, log) = run(p, &["train", "--out", o, "--set", "train.lr=1e30"]);
    assert_eq!(code, 4, "{log}");
}
