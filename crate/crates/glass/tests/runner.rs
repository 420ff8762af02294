mod common;

use std::fs;

use common::{artifacts, tiny_config};
use glass::metrics::MetricsDoc;
use glass::runner::{self, metric_columns};
use glass::GlassError;

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (_d, art) = artifacts();
    let cfg = tiny_config("straight");
    runner::synth(&cfg, &art).unwrap();
    let straight = runner::train(&cfg, &art, false).unwrap();

    let mut half = tiny_config("resumed");
    half.max_steps = 10;
    runner::train(&half, &art, false).unwrap();
    let resumed = runner::train(&tiny_config("resumed"), &art, true).unwrap();

    assert_eq!(resumed.steps, straight.steps);
    assert_eq!(resumed.curve, straight.curve);
    assert_eq!(resumed.best_step, straight.best_step);
    let a = glass::formats::read_checkpoint(&art.run_dir("straight").join(runner::LAST)).unwrap();
    let b = glass::formats::read_checkpoint(&art.run_dir("resumed").join(runner::LAST)).unwrap();
    for (x, y) in a.model.store().entries().iter().zip(b.model.store().entries()) {
        assert!(x.value.data().iter().zip(y.value.data()).all(|(p, q)| p.to_bits() == q.to_bits()), "{}", x.name);
    }
    assert_eq!(a.opt.m, b.opt.m);
    assert_eq!(a.opt.v, b.opt.v);
    let curve_a = fs::read_to_string(art.run_dir("straight").join(runner::CURVE)).unwrap();
    let curve_b = fs::read_to_string(art.run_dir("resumed").join(runner::CURVE)).unwrap();
    assert_eq!(curve_a, curve_b);
}

#[test]
fn evaluation_is_repeatable_and_schema_valid() {
    let (_d, art) = artifacts();
    let cfg = tiny_config("twice");
    runner::synth(&cfg, &art).unwrap();
    runner::train(&cfg, &art, false).unwrap();
    let path = art.run_dir("twice").join(runner::METRICS);
    runner::eval(&cfg, &art).unwrap();
    let first = fs::read(&path).unwrap();
    runner::eval(&cfg, &art).unwrap();
    assert_eq!(fs::read(&path).unwrap(), first);

    let text = String::from_utf8(first).unwrap();
    let doc = MetricsDoc::validate_json(&text).unwrap();
    assert_eq!(doc.n_examples, 12);
    assert_eq!(doc.config_hash, cfg.hash());
    assert!(art.run_dir("twice").join("gate.csv").exists());
    assert!(art.run_dir("twice").join("crp.csv").exists());

    let traces = runner::write_traces(&cfg, &art).unwrap();
    assert_eq!(fs::read_to_string(traces).unwrap().lines().count(), 12);

    let extra = text.replacen("{", "{\n  \"surprise\": 1,", 1);
    assert!(MetricsDoc::validate_json(&extra).is_err());
    let mut bad = doc.clone();
    bad.hit.insert("1".into(), 0.9);
    bad.hit.insert("3".into(), 0.1);
    assert!(MetricsDoc::validate_json(&bad.to_json().unwrap()).is_err());
    let mut missing = doc.clone();
    missing.ndcg.remove("20");
    assert!(MetricsDoc::validate_json(&missing.to_json().unwrap()).is_err());
}

#[test]
fn eval_refuses_a_different_architecture() {
    let (_d, art) = artifacts();
    let cfg = tiny_config("arch");
    runner::synth(&cfg, &art).unwrap();
    runner::train(&cfg, &art, false).unwrap();
    let mut other = cfg.clone();
    other.shs = false;
    assert!(matches!(runner::eval(&other, &art), Err(GlassError::Config(_))));
    let mut lr_only = cfg.clone();
    lr_only.lr = 0.5;
    runner::eval(&lr_only, &art).unwrap();
}

#[test]
fn ablation_deltas_recompute_from_run_metrics() {
    let (_d, art) = artifacts();
    let mut cfg = tiny_config("abl");
    cfg.max_steps = 10;
    runner::synth(&cfg, &art).unwrap();
    let rows = runner::ablate(&cfg, &art).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.run.as_str()).collect();
    assert_eq!(names, ["abl-base", "abl-sidtier", "abl-sidtier-shs", "abl-sidtier-shs-aug", "abl-k0-2"]);

    let docs: Vec<MetricsDoc> = names
        .iter()
        .map(|n| MetricsDoc::validate_json(&fs::read_to_string(art.run_dir(n).join(runner::METRICS)).unwrap()).unwrap())
        .collect();
    assert!(!docs[0].flags.sidtier && !docs[0].flags.shs);
    assert!(docs[3].flags.neighbor_aug);
    assert_eq!(docs[4].codebook_sizes[0], 2);
    let base = metric_columns(&docs[0]);
    for (row, doc) in rows.iter().zip(&docs) {
        for ((name, v), ((bname, b), d)) in metric_columns(doc).iter().zip(base.iter().zip(&row.deltas)) {
            assert_eq!(name, bname);
            match d {
                Some(d) => assert_eq!(*d, (v - b) / b),
                None => assert_eq!(*b, 0.0),
            }
        }
    }

    let mut csv = csv::Reader::from_path(art.root.join("ablation.csv")).unwrap();
    assert_eq!(csv.records().count(), 5);
    let reported = runner::collect_metrics(&art).unwrap();
    assert_eq!(reported.len(), 5);
}
