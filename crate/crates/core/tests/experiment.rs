use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use layerinfo::baselines::Method;
use layerinfo::datasets::DatasetFormat;
use layerinfo::experiment::{
    emit_figures, emit_figures_from_dump, read_report, run_experiment, CacheEntry, CachePayload, DatasetConfig, Dump,
    FigureKind, RunConfig, CACHE_DIR, REPORT_JSON,
};
use layerinfo::li::LIProfile;
use layerinfo::metrics::{auroc, ScoredSet};
use layerinfo::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FOUR: &str = r#"{"id": "a1", "context": "Mira keeps a red kite in the shed.", "question": "What does Mira keep in the shed?", "answers": ["a red kite"], "answerable": true}
{"id": "u1", "context": "Mira keeps a red kite in the shed.", "question": "When was Mira born?", "answers": [], "answerable": false}
{"id": "a2", "context": "The ferry leaves at noon from pier four.", "question": "When does the ferry leave?", "answers": ["at noon"], "answerable": true}
{"id": "u2", "context": "The ferry leaves at noon from pier four.", "question": "Who painted the ferry?", "answers": [], "answerable": false}
"#;

fn four_example_config(dir: &Path, out: &str) -> RunConfig {
    let data = dir.join("four.jsonl");
    fs::write(&data, FOUR).unwrap();
    let dataset = DatasetConfig { path: data, format: DatasetFormat::GenericJsonl, limit: None, history_turns: 2 };
    let mut config = RunConfig::new("tiny-lm", dataset, vec!["none".into()], vec![Method::Li]);
    config.out = dir.join(out);
    config
}

fn cached_profiles(out: &Path) -> Vec<LIProfile> {
    let mut profiles = Vec::new();
    for entry in fs::read_dir(out.join(CACHE_DIR)).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|x| x == "json") {
            let entry: CacheEntry = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
            if let CachePayload::Profile { profile, .. } = entry.payload {
                profiles.push(profile);
            }
        }
    }
    profiles.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    profiles
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let headers = reader.headers().unwrap().clone();
    reader
        .records()
        .map(|r| headers.iter().zip(r.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}

fn file_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn li_on_four_examples_gives_one_auroc_and_four_profiles() {
    let tmp = tempfile::tempdir().unwrap();
    let config = four_example_config(tmp.path(), "run");
    let report = run_experiment(&config).unwrap();
    assert_eq!(report.num_examples, 4);
    assert_eq!(report.results.len(), 1);
    assert!(report.result("none", Method::Li).unwrap().auroc.is_some());
    assert!(report.skipped.is_empty());
    let profiles = cached_profiles(&config.out);
    assert_eq!(profiles.len(), 4);
    assert_eq!(read_report(&config.out).unwrap(), report);
}

#[test]
fn rerun_and_fresh_run_give_identical_report_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let config = four_example_config(tmp.path(), "run");
    run_experiment(&config).unwrap();
    let first = fs::read(config.out.join(REPORT_JSON)).unwrap();
    run_experiment(&config).unwrap();
    assert_eq!(fs::read(config.out.join(REPORT_JSON)).unwrap(), first);

    // cold cache elsewhere: cached and recomputed values agree exactly
    let mut fresh = config.clone();
    fresh.out = tmp.path().join("fresh");
    run_experiment(&fresh).unwrap();
    assert_eq!(fs::read(fresh.out.join(REPORT_JSON)).unwrap(), first);
    assert_eq!(cached_profiles(&fresh.out), cached_profiles(&config.out));
}

#[test]
fn empty_method_list_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = four_example_config(tmp.path(), "run");
    config.methods.clear();
    assert!(matches!(run_experiment(&config), Err(Error::Config(_))));
    assert!(!config.out.join(REPORT_JSON).exists());
}

#[test]
fn figures_follow_from_the_dump_and_the_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = four_example_config(tmp.path(), "run");
    config.templates.push("binary".into());
    config.methods.push(Method::PviLast);
    let report = run_experiment(&config).unwrap();

    let from_report = tmp.path().join("fig_report");
    let from_dump = tmp.path().join("fig_dump");
    let files = emit_figures(&report, &FigureKind::ALL, &from_report).unwrap();
    assert_eq!(files.iter().filter(|f| f.extension().is_some_and(|x| x == "svg")).count(), 7);
    emit_figures_from_dump(&Dump::read(&config.out).unwrap(), &FigureKind::ALL, &from_dump).unwrap();
    assert_eq!(file_bytes(&from_report), file_bytes(&from_dump));

    // two labelled series in the distribution figure
    let dist = csv_rows(&from_report.join("distribution_none.csv"));
    let series: std::collections::BTreeSet<_> = dist.iter().map(|r| r["series"].clone()).collect();
    assert_eq!(series.len(), 2);

    let answerable: BTreeMap<String, bool> =
        report.per_example.iter().map(|r| (r.example_id.clone(), r.answerable)).collect();
    let profiles = cached_profiles(&config.out);
    for template in ["none", "binary"] {
        let group: Vec<LIProfile> =
            report.profiles.iter().filter(|p| p.template_id == template).map(|p| p.profile.clone()).collect();
        assert_eq!(group.len(), 4);
        for p in &group {
            assert!(profiles.contains(p), "report profile {} missing from cache", p.example_id);
        }
        let per_layer = csv_rows(&from_report.join(format!("per_layer_{template}.csv")));
        let cumulative = csv_rows(&from_report.join(format!("cumulative_{template}.csv")));
        for (label, want) in [("answerable", true), ("unanswerable", false)] {
            let members: Vec<&LIProfile> = group.iter().filter(|p| answerable[&p.example_id] == want).collect();
            let n = members.len() as f64;
            for (idx, &layer) in members[0].layer_ids.iter().enumerate() {
                let row = per_layer
                    .iter()
                    .find(|r| r["series"] == label && r["layer"] == layer.to_string())
                    .expect("row per layer and series");
                let mean = members.iter().map(|p| p.i_layer[idx]).sum::<f64>() / n;
                assert!((row["mean_i_layer"].parse::<f64>().unwrap() - mean).abs() <= 1e-12);
            }
            let last = cumulative.iter().rfind(|r| r["series"] == label).unwrap();
            let mean_total = members.iter().map(|p| p.li_total).sum::<f64>() / n;
            assert!((last["mean_cumulative"].parse::<f64>().unwrap() - mean_total).abs() <= 1e-12);
        }
    }
}

#[test]
fn permuted_labels_drive_every_method_to_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpora/generic_toy.jsonl");
    let dataset = DatasetConfig { path: data, format: DatasetFormat::GenericJsonl, limit: None, history_turns: 2 };
    let mut config = RunConfig::new("tiny-lm", dataset, vec!["binary".into()], Method::ALL.to_vec());
    config.baselines.k = 3;
    config.baselines.n_samples = 4;
    config.out = tmp.path().join("run");
    let report = run_experiment(&config).unwrap();
    assert!(report.skipped.is_empty(), "{:?}", report.skipped);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for method in Method::ALL {
        let rows: Vec<_> = report.per_example.iter().filter(|r| r.method == method).collect();
        assert_eq!(rows.len(), 8, "{method}");
        let scores: Vec<f64> = rows.iter().map(|r| r.value).collect();
        let mut labels: Vec<bool> = rows.iter().map(|r| r.answerable).collect();
        let trials = 400;
        let mut total = 0.0;
        for _ in 0..trials {
            labels.shuffle(&mut rng);
            total += auroc(&ScoredSet::from_scores(method.as_str(), &scores, &labels)).unwrap();
        }
        let mean = total / trials as f64;
        assert!((mean - 0.5).abs() < 0.05, "{method}: {mean}");
    }
}
