use std::fs;
use std::path::Path;

use afcc::config::RunConfig;
use afcc::corpus::{synthesize_in_memory, SynthSpec};
use afcc::features::{FeatureMatrix, FilterbankConfig, Normalization};
use afcc::hmm;
use afcc::pipeline::{
    collect_report, read_run_rate, run_baseline, run_optimize, write_report, EvalSettings, PreparedWord, Scale,
};
use afcc::scales::{InterpolationPoint, WarpFunction};
use afcc::search::SearchConfig;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.speakers_per_group = 5;
    cfg.synth.utterances_per_speaker = 2;
    cfg.synth.duration_s = 0.25;
    cfg.seed = 17;
    cfg.resolved()
}

fn prepared(cfg: &RunConfig) -> PreparedWord {
    let corpus = synthesize_in_memory(&cfg.synth, &cfg.audio).unwrap();
    PreparedWord::new(&corpus, "A", &cfg.frame).unwrap()
}

fn fbc(warp: WarpFunction) -> FilterbankConfig {
    FilterbankConfig { num_filters: 26, normalization: Normalization::EqualHeight, warp }
}

#[test]
fn diagonal_knot_features_equal_linear_features() {
    let cfg = small_config();
    let word = prepared(&cfg);
    let lin = word.features(&fbc(WarpFunction::linear(cfg.audio))).unwrap();
    for t in [0.1, 0.5, 0.83] {
        let k = t * cfg.audio.nyquist_hz();
        let diag = word.features(&fbc(WarpFunction::pchp(InterpolationPoint::new(k, k), cfg.audio).unwrap())).unwrap();
        for (a, b) in lin.iter().zip(&diag) {
            for (ra, rb) in a.features.rows().zip(b.features.rows()) {
                for (x, y) in ra.iter().zip(rb) {
                    assert!((x - y).abs() < 1e-9, "{}: {x} vs {y}", a.id);
                }
            }
        }
    }
}

#[test]
fn per_frame_score_survives_frame_duplication() {
    let cfg = small_config();
    let word = prepared(&cfg);
    let items = word.features(&fbc(WarpFunction::mel_htk(cfg.audio))).unwrap();
    let train: Vec<FeatureMatrix> = items.iter().skip(1).map(|i| i.features.clone()).collect();
    let model = hmm::train(&train, &cfg.hmm).unwrap();
    let x = &items[0].features;
    let doubled: Vec<Vec<f64>> = x.rows().flat_map(|r| [r.to_vec(), r.to_vec()]).collect();
    let doubled = FeatureMatrix::from_rows(&doubled).unwrap();
    let a = model.score(x).unwrap().loglik_per_frame;
    let b = model.score(&doubled).unwrap().loglik_per_frame;
    assert!(((a - b) / a).abs() < 0.1, "{a} vs {b}");
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn baseline_runs_are_byte_identical() {
    let cfg = small_config();
    let settings = EvalSettings::from_config(&cfg);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for out in [a.path(), b.path()] {
        let word = prepared(&cfg);
        run_baseline(&word, Scale::Mel, &settings, out).unwrap();
    }
    let (fa, fb) = (read_all(a.path()), read_all(b.path()));
    assert_eq!(fa.len(), 3);
    assert_eq!(fa, fb);
}

#[test]
fn report_table_matches_individual_runs() {
    let cfg = small_config();
    let settings = EvalSettings::from_config(&cfg);
    let out = tempfile::tempdir().unwrap();
    let search = SearchConfig { max_iterations: 2, ..cfg.search.clone() };
    let mut words = Vec::new();
    for (name, seed) in [("A", 17u64), ("B", 18)] {
        let mut c = cfg.clone();
        c.synth = SynthSpec { seed, ..cfg.synth.clone() };
        c.synth.words[0].name = name.into();
        let corpus = synthesize_in_memory(&c.synth, &c.audio).unwrap();
        let word = PreparedWord::new(&corpus, name, &c.frame).unwrap();
        for s in Scale::BASELINES {
            run_baseline(&word, s, &settings, out.path()).unwrap();
        }
        run_optimize(&word, &settings, &search, out.path()).unwrap();
        words.push(name.to_string());
    }
    let table = collect_report(out.path(), &words).unwrap();
    assert_eq!(table.rows.len(), 4);
    let text = fs::read_to_string(write_report(out.path(), &table).unwrap()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "scale,A,B");
    for (line, scale) in lines[1..].iter().zip(Scale::ALL) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], scale.as_str());
        for (cell, w) in cells[1..].iter().zip(&words) {
            let rec = read_run_rate(out.path(), w, scale).unwrap();
            assert_eq!(*cell, rec.get("rate").unwrap());
        }
    }
}

#[test]
fn report_names_missing_runs() {
    let cfg = small_config();
    let out = tempfile::tempdir().unwrap();
    run_baseline(&prepared(&cfg), Scale::Linear, &EvalSettings::from_config(&cfg), out.path()).unwrap();
    let err = collect_report(out.path(), &["A".to_string()]).unwrap_err().to_string();
    assert!(err.contains("baseline A/mel") && err.contains("optimize A/adaptive"), "{err}");
}
