mod common;

use common::*;
use mpq_core::artifacts::{self, Checkpoint};
use mpq_core::bilevel::size_term_value;
use mpq_core::pipeline::{self, Search};
use mpq_core::supernet::Assignment;
use mpq_core::{objectives, quant::QuantCache, run_search, Error};

#[test]
fn runs_are_byte_identical() {
    let cfg = quick_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_search(&cfg, Some(a.path())).unwrap();
    run_search(&cfg, Some(b.path())).unwrap();
    for file in ["trace.csv", "assignment.json", "report.json", "checkpoint.bin", "final.bin", "config.toml"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs");
    }
}

#[test]
fn different_seeds_differ() {
    let cfg = quick_config();
    let mut other = cfg.clone();
    other.seed += 1;
    let a = run_search(&cfg, None).unwrap();
    let b = run_search(&other, None).unwrap();
    assert_ne!(a.trace, b.trace);
}

#[test]
fn zero_lambda_has_no_size_term() {
    let mut cfg = quick_config();
    cfg.objective.lambda = 0.0;
    let run = run_search(&cfg, None).unwrap();
    assert!(run.trace.iter().any(|r| r.phase == "arch"));
    assert!(run.trace.iter().all(|r| r.size_loss == 0.0));
}

#[test]
fn trace_columns_recompute() {
    let cfg = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let run = run_search(&cfg, Some(dir.path())).unwrap();
    let search = Search::new(&cfg).unwrap();
    for row in &run.trace {
        let v = size_term_value(row.c_actual_bits, row.c_expected_bits, &search.objective);
        assert!((v - row.size_loss).abs() <= 1e-9, "step {}", row.step);
    }
    // C_O of the last logged step from the stored selection.
    let ck = Checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
    let sel = ck.selection().unwrap();
    let actual = objectives::actual_size(sel, &search.cost).unwrap();
    let last = run.trace.last().unwrap();
    assert!((actual - last.c_actual_bits).abs() <= 1e-9);
}

#[test]
fn trace_round_trips_through_csv() {
    let run = run_search(&quick_config(), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    artifacts::write_trace(&path, &run.trace).unwrap();
    assert_eq!(artifacts::read_trace(&path).unwrap(), run.trace);
}

#[test]
fn report_matches_assignment() {
    let run = run_search(&quick_config(), None).unwrap();
    assert_eq!(run.report.size_bits, run.assignment.total_size_bits);
    assert_eq!(run.report.pruned_groups, run.assignment.count_bits(0));
    assert_eq!(run.report.groups, 16);
    let json = run.assignment.to_json().unwrap();
    assert_eq!(Assignment::from_json(&json).unwrap(), run.assignment);
}

#[test]
fn checkpoints_round_trip() {
    let cfg = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let run = run_search(&cfg, Some(dir.path())).unwrap();
    let ck = Checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(ck, run.checkpoint);
    let fin = Checkpoint::load(&dir.path().join("final.bin")).unwrap();
    let (acc, a) = pipeline::evaluate_checkpoint(&cfg, &fin, Some(&run.assignment)).unwrap();
    assert_eq!(a, run.assignment);
    assert_eq!(acc, run.report.test_accuracy);
}

#[test]
fn fully_pruned_model_is_at_chance() {
    let cfg = quick_config();
    let data = pipeline::load_data(&cfg).unwrap();
    let model = pipeline::build_model(&cfg, &data, cfg.seed).unwrap();
    let zero = Assignment::uniform(&model, 0).unwrap();
    assert_eq!(zero.total_size_bits, 0);
    let out = pipeline::retrain(&zero, &cfg, &data).unwrap();
    // Constant logits predict one class for every sample.
    let share = |c| data.test.labels.iter().filter(|&&y| y == c).count() as f64 / data.test.len() as f64;
    assert!(out.test_accuracy == share(0) || out.test_accuracy == share(1), "{}", out.test_accuracy);
}

#[test]
fn eight_bit_weights_track_full_precision() {
    let mut cfg = quick_config();
    cfg.data.n = 4000;
    let data = pipeline::load_data(&cfg).unwrap();
    let model = pipeline::build_model(&cfg, &data, cfg.seed).unwrap();
    let fp = pipeline::retrain(&Assignment::uniform(&model, 32).unwrap(), &cfg, &data).unwrap();
    let cache = QuantCache::from_weights(&fp.model.searchable_weights(), fp.model.groups()).unwrap();
    let eight = Assignment::uniform(&fp.model, 8).unwrap();
    let acc8 = pipeline::evaluate(&fp.model, &eight, &cache, &data.test, None).unwrap();
    assert!((acc8 - fp.test_accuracy).abs() <= 0.005, "{acc8} vs {}", fp.test_accuracy);
}

#[test]
fn divergence_writes_partial_artifacts() {
    let mut cfg = quick_config();
    cfg.optimizer.weight_lr = 1e300;
    let dir = tempfile::tempdir().unwrap();
    let err = run_search(&cfg, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err}");
    let trace = artifacts::read_trace(&dir.path().join("trace.csv")).unwrap();
    assert!(!trace.is_empty());
    assert!(Checkpoint::load(&dir.path().join("checkpoint.bin")).is_ok());
    assert!(!dir.path().join("assignment.json").exists());
}
