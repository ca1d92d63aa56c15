use std::path::Path;
use std::process::{Command, Output};

use aqvq::config::{DataKind, RunConfig};
use aqvq::report::RunReport;
use aqvq_core::data::GaussianMixture;
use aqvq_core::model::QuantizerConfig;

fn aqvq(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_aqvq"));
    cmd.args(args).env_remove("AQVQ_SEED");
    if let Some(s) = seed {
        cmd.env("AQVQ_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, quantizer: QuantizerConfig, steps: u64) -> String {
    let mut cfg = RunConfig::default();
    cfg.data.generator = DataKind::GaussianMixture(GaussianMixture {
        clusters: 4,
        dims: 8,
        samples: 200,
        sigma: 0.5,
        center_scale: 1.0,
    });
    cfg.model.num_hiddens = 8;
    cfg.model.quantizer = quantizer;
    cfg.training.steps = steps;
    cfg.training.batch_size = 16;
    cfg.training.gap_every = 5;
    let path = dir.join("run.json");
    cfg.write(&path).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn missing_config_is_a_config_error_naming_the_path() {
    let o = aqvq(&["train", "--config", "/no/such/dir/run.json"], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/no/such/dir/run.json"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(aqvq(&["train", "--bogus"], None).status.code(), Some(1));
    assert_eq!(aqvq(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(aqvq(&["analyze"], None).status.code(), Some(1));
    assert_eq!(aqvq(&["--help"], None).status.code(), Some(0));
}

#[test]
fn malformed_config_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"seed\": 1,\n  \"unknown_field\": 2\n}\n").unwrap();
    let o = aqvq(&["train", "--config", path.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn invalid_capacity_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = aqvq(&["sweep", "--capacity", "48", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn bad_seed_variable_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), QuantizerConfig::Fixed { n: 8, d: 2 }, 3);
    let o = aqvq(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()], Some("minus one"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("AQVQ_SEED"));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.json");
    std::fs::write(&ck, "{\"format_version\": 0}").unwrap();
    let o = aqvq(&["analyze", "--checkpoint", ck.to_str().unwrap(), "--gradient-gap"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("version 0"), "{}", stderr(&o));
}

#[test]
fn train_report_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), QuantizerConfig::Adaptive { capacity: 16 }, 12);
    let first = dir.path().join("first");
    let o = aqvq(&["train", "--config", &cfg, "--out", first.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.json", "report.json", "report.csv", "checkpoint.json"] {
        assert!(first.join(f).exists(), "{f}");
    }

    let csv = aqvq(&["report", "--run", first.to_str().unwrap()], None);
    assert!(csv.status.success());
    let text = String::from_utf8(csv.stdout).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, "step,recon,vq,gap,temperature,usage_0,usage_1");
    assert_eq!(text.lines().count(), 13);
    // The gap column is filled on measured steps only.
    let gaps: Vec<bool> = text.lines().skip(1).map(|l| !l.split(',').nth(3).unwrap().is_empty()).collect();
    assert_eq!(gaps, (0..12).map(|s| s % 5 == 0).collect::<Vec<_>>());

    let json = aqvq(&["report", "--run", first.to_str().unwrap(), "--format", "json"], None);
    let parsed: RunReport = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(parsed.records.len(), 12);

    // The resolved config written by the first run reproduces it exactly.
    let second = dir.path().join("second");
    let resolved = first.join("config.json");
    let o = aqvq(&["train", "--config", resolved.to_str().unwrap(), "--out", second.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&first.join("report.csv")), read(&second.join("report.csv")));
    assert_eq!(read(&first.join("checkpoint.json")), read(&second.join("checkpoint.json")));
    assert_eq!(read(&first.join("config.json")), read(&second.join("config.json")));

    let gap =
        aqvq(&["analyze", "--checkpoint", first.join("checkpoint.json").to_str().unwrap(), "--gradient-gap"], None);
    assert!(gap.status.success(), "{}", stderr(&gap));
    let v: serde_json::Value = serde_json::from_slice(&gap.stdout).unwrap();
    assert!(v["mean_gap"].as_f64().unwrap() > 0.0);
}

#[test]
fn seed_variable_overrides_the_run_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), QuantizerConfig::Fixed { n: 8, d: 2 }, 4);
    let run = |name: &str, seed: Option<&str>| {
        let out = dir.path().join(name);
        let o = aqvq(&["train", "--config", &cfg, "--out", out.to_str().unwrap()], seed);
        assert!(o.status.success(), "{}", stderr(&o));
        (RunConfig::read(&out.join("config.json")).unwrap(), std::fs::read(out.join("report.csv")).unwrap())
    };
    let (c0, r0) = run("a", None);
    let (c7, r7) = run("b", Some("7"));
    let (c7b, r7b) = run("c", Some("7"));
    assert_eq!((c0.seed, c7.seed, c7.model.seed), (0, 7, 7));
    assert_eq!(c7.data.seed, c0.data.seed);
    assert_ne!(r0, r7);
    assert_eq!((c7, r7), (c7b, r7b));
}

#[test]
fn sweep_covers_every_structure_and_fits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), QuantizerConfig::Fixed { n: 8, d: 2 }, 2);
    let out = dir.path().join("sweep");
    let o = aqvq(&["sweep", "--capacity", "65536", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "n,d,final_val_recon_sum,final_val_recon_mean,config_hash,error");
    let specs: Vec<String> = lines.map(|l| l.split(',').take(2).collect::<Vec<_>>().join("x")).collect();
    let want: Vec<String> = (0..8).map(|k| format!("{}x{}", 512 << k, 128 >> k)).collect();
    assert_eq!(specs, want);

    let fit = aqvq(&["analyze", "--fit-analytic", out.join("sweep.json").to_str().unwrap()], None);
    assert!(fit.status.success(), "{}", stderr(&fit));
    let v: serde_json::Value = serde_json::from_slice(&fit.stdout).unwrap();
    assert_eq!(v["points"].as_array().unwrap().len(), 8);
    assert!(v["fit"]["residual"].as_f64().unwrap().is_finite());
}

#[test]
fn adaptive_writes_usage_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), QuantizerConfig::Fixed { n: 8, d: 2 }, 40);
    let out = dir.path().join("adaptive");
    let o = aqvq(&["adaptive", "--capacity", "64", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let usage = std::fs::read_to_string(out.join("usage.csv")).unwrap();
    let mut lines = usage.lines();
    assert_eq!(lines.next().unwrap(), "window_start,n16_d4,n32_d2,n64_d1");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 20);
    for r in rows {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ablation_grid_runs_one_axis_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = small_config(dir.path(), QuantizerConfig::Adaptive { capacity: 16 }, 3);
    let base = RunConfig::read(Path::new(&cfg_path)).unwrap();
    let grid = serde_json::json!({
        "base": base,
        "capacities": [4],
        "use_ema": [false],
        "alpha": [0.25],
        "beta": [],
        "seeds": [0, 1],
    });
    let grid_path = dir.path().join("grid.json");
    std::fs::write(&grid_path, grid.to_string()).unwrap();
    let out = dir.path().join("ablation");
    let o = aqvq(&["ablate", "--grid", grid_path.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r["cell"]["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["base", "base", "W=4", "W=4", "use_ema=false", "use_ema=false", "alpha=0.25", "alpha=0.25"]);
    // W=16 pools [16,1] and [8,2]; W=4 leaves only [4,1].
    assert_eq!(rows[0]["num_codebooks"], 2);
    assert_eq!(rows[2]["num_codebooks"], 1);
    // alpha=0.25 is the base value, so those cells repeat the base runs.
    for seed in 0..2 {
        assert_eq!(rows[seed]["final_val_recon_mean"], rows[6 + seed]["final_val_recon_mean"]);
    }
    assert!(rows.iter().all(|r| r["error"].is_null()));
}
