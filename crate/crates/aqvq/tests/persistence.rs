use aqvq::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use aqvq::config::RunConfig;
use aqvq::error::AppError;
use aqvq::experiments::{run_fixed_sweep, train_run, train_run_until};
use aqvq_core::model::{evaluate, QuantizerConfig};

fn small(quantizer: QuantizerConfig, steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.quantizer = quantizer;
    cfg.training.steps = steps;
    cfg.training.gap_every = 4;
    cfg
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    for quantizer in [QuantizerConfig::Fixed { n: 32, d: 2 }, QuantizerConfig::Adaptive { capacity: 64 }] {
        let (full_cfg, train, val) = small(quantizer, 24).resolve().unwrap();
        let full = train_run(&full_cfg, &train, &val, None).unwrap();

        let half = train_run_until(&full_cfg, &train, &val, None, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&full_cfg, &half.state, &path).unwrap();
        let (_, state) = load_checkpoint(&path).unwrap();
        assert_eq!(state.step, 10);
        let resumed = train_run(&full_cfg, &train, &val, Some(state)).unwrap();

        assert_eq!(resumed.evaluation, full.evaluation);
        assert_eq!(resumed.state.model.params(), full.state.model.params());
        assert_eq!(resumed.state.model.codebooks(), full.state.model.codebooks());
        assert_eq!(&full.report.records[10..], &resumed.report.records[..]);
        assert_eq!(&full.report.records[..10], &half.report.records[..]);
    }
}

#[test]
fn checkpoint_round_trips_every_bit() {
    let (cfg, train, val) = small(QuantizerConfig::Adaptive { capacity: 32 }, 15).resolve().unwrap();
    let out = train_run(&cfg, &train, &val, None).unwrap();
    let ck = Checkpoint::capture(&cfg, &out.state);
    let text = ck.to_json();
    assert!(text.trim_start().starts_with("{\n  \"format_version\": 1,"));
    let back = Checkpoint::from_json(&text, "ck").unwrap();
    assert_eq!(back, ck);
    let state = back.restore().unwrap();
    assert_eq!(state.adam.moments(), out.state.adam.moments());
    assert_eq!(state.adam.steps(), out.state.adam.steps());
    assert_eq!(evaluate(&state.model, &val, 100).unwrap(), evaluate(&out.state.model, &val, 100).unwrap());
}

#[test]
fn version_mismatch_is_refused() {
    let (cfg, train, val) = small(QuantizerConfig::Fixed { n: 8, d: 2 }, 2).resolve().unwrap();
    let out = train_run(&cfg, &train, &val, None).unwrap();
    let text =
        Checkpoint::capture(&cfg, &out.state).to_json().replacen("\"format_version\": 1", "\"format_version\": 0", 1);
    let e = Checkpoint::from_json(&text, "ck").unwrap_err();
    assert!(matches!(e, AppError::Version { found: 0, expected: 1 }), "{e}");
    assert_eq!(e.exit_code(), 2);

    let missing = load_checkpoint(std::path::Path::new("/no/such/checkpoint.json")).unwrap_err();
    assert!(matches!(missing, AppError::MissingInput { .. }));
}

#[test]
fn truncated_checkpoint_is_a_parse_error() {
    let (cfg, train, val) = small(QuantizerConfig::Fixed { n: 8, d: 2 }, 2).resolve().unwrap();
    let out = train_run(&cfg, &train, &val, None).unwrap();
    let text = Checkpoint::capture(&cfg, &out.state).to_json();
    let e = Checkpoint::from_json(&text[..text.len() / 2], "ck").unwrap_err();
    assert!(matches!(e, AppError::Parse { .. }), "{e}");
}

#[test]
fn runs_are_reproducible() {
    let (cfg, train, val) = small(QuantizerConfig::Adaptive { capacity: 64 }, 12).resolve().unwrap();
    let a = train_run(&cfg, &train, &val, None).unwrap();
    let b = train_run(&cfg, &train, &val, None).unwrap();
    assert_eq!(a.report.records, b.report.records);
    assert_eq!(a.evaluation, b.evaluation);
    assert_eq!(a.selections, b.selections);
    assert_eq!(a.report.to_csv().unwrap(), b.report.to_csv().unwrap());
}

#[test]
fn capacity_two_sweep_has_one_trial() {
    let (cfg, train, val) = small(QuantizerConfig::Fixed { n: 8, d: 2 }, 3).resolve().unwrap();
    let results = run_fixed_sweep(&cfg, &train, &val, 2).unwrap();
    assert_eq!(results.len(), 1);
    assert_eq!((results[0].spec.n, results[0].spec.d), (2, 1));
    assert!(results[0].error.is_none() && results[0].final_val_recon_mean.is_finite());
}
