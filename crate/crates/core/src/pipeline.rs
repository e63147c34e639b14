//! End-to-end runs: scale choice, cached spectra, the warp-to-rate objective,
//! baseline and optimize runs with their CSV outputs, and the summary table.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::Corpus;
use crate::eval::{
    self, distribution_dump, rescale, summarize, write_distribution_csv, Group, LabeledFeatures, LooConfig,
    RateSummary, ScoreSet, DEFAULT_TARGET_MEAN, DEFAULT_TARGET_STD,
};
use crate::features::{
    build_filterbank_for_layout, CepstralExtractor, FeatureMatrix, FilterbankConfig, FrameConfig, FrameLayout,
    Normalization, Spectrogram, SpectrumAnalyzer,
};
use crate::hmm::HmmConfig;
use crate::scales::{AudioConfig, InterpolationPoint, WarpFunction};
use crate::search::{self, SearchConfig, SearchOutcome};
use crate::Error;

pub const HISTOGRAM_BINS: usize = 20;
pub const CURVE_POINTS: usize = 201;
pub const RATE_FILE: &str = "rate.csv";
pub const REPORT_FILE: &str = "report.csv";

/// Frequency scale of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Mel,
    HtkMel,
    Adaptive,
}

impl Scale {
    pub const BASELINES: [Scale; 3] = [Scale::Linear, Scale::Mel, Scale::HtkMel];
    pub const ALL: [Scale; 4] = [Scale::Linear, Scale::Mel, Scale::HtkMel, Scale::Adaptive];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scale::Linear => "linear",
            Scale::Mel => "mel",
            Scale::HtkMel => "htk_mel",
            Scale::Adaptive => "adaptive",
        }
    }

    /// Warp and normalization of a fixed scale. `Mel` follows the Slaney
    /// convention (equal area), `HtkMel` the HTK one (equal height).
    pub fn fixed_filterbank(
        &self,
        audio: AudioConfig,
        num_filters: usize,
        normalization: Normalization,
    ) -> Option<FilterbankConfig> {
        let (warp, normalization) = match self {
            Scale::Linear => (WarpFunction::linear(audio), normalization),
            Scale::Mel => (WarpFunction::mel_slaney(audio), Normalization::EqualArea),
            Scale::HtkMel => (WarpFunction::mel_htk(audio), Normalization::EqualHeight),
            Scale::Adaptive => return None,
        };
        Some(FilterbankConfig { num_filters, normalization, warp })
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scale::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown scale {s:?}; expected linear, mel, htk_mel or adaptive"))
    }
}

/// Settings the objective needs besides the warp.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub num_filters: usize,
    pub normalization: Normalization,
    pub loo: LooConfig,
    pub hmm: HmmConfig,
}

impl EvalSettings {
    /// Takes seeds from `cfg` as is; pass a resolved config.
    pub fn from_config(cfg: &RunConfig) -> Self {
        EvalSettings {
            num_filters: cfg.filterbank.num_filters,
            normalization: cfg.filterbank.normalization,
            loo: cfg.loo.clone(),
            hmm: cfg.hmm.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    pub id: String,
    pub speaker: String,
    pub group: Group,
    pub human_score: Option<f64>,
    pub spectrogram: Spectrogram,
}

/// Power spectra of every utterance of one word. The warp only changes the
/// filterbank, so spectra are computed once per word.
#[derive(Debug, Clone)]
pub struct PreparedWord {
    pub word: String,
    pub audio: AudioConfig,
    pub layout: FrameLayout,
    pub utterances: Vec<PreparedUtterance>,
}

impl PreparedWord {
    pub fn new(corpus: &Corpus, word: &str, frame: &FrameConfig) -> Result<Self, Error> {
        let analyzer = SpectrumAnalyzer::new(&corpus.audio, frame)?;
        let selected: Vec<_> = corpus.word(word).collect();
        if selected.is_empty() {
            return Err(Error::MissingWord(word.to_string()));
        }
        let utterances = selected
            .par_iter()
            .map(|u| {
                Ok(PreparedUtterance {
                    id: u.id(),
                    speaker: u.entry.speaker.clone(),
                    group: u.entry.group,
                    human_score: u.entry.human_score,
                    spectrogram: analyzer.analyze(&u.samples)?,
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        Ok(PreparedWord { word: word.to_string(), audio: corpus.audio, layout: analyzer.layout(), utterances })
    }

    pub fn features(&self, fbc: &FilterbankConfig) -> Result<Vec<LabeledFeatures>, Error> {
        let extractor = CepstralExtractor::new(build_filterbank_for_layout(fbc, self.layout, &self.audio)?);
        Ok(self
            .utterances
            .par_iter()
            .map(|u| LabeledFeatures {
                id: u.id.clone(),
                speaker: Some(u.speaker.clone()),
                group: u.group,
                human_score: u.human_score,
                features: extractor.extract(&u.spectrogram),
            })
            .collect())
    }

    /// Pooled human mean and population std when every utterance has a
    /// human score; the fixed default target otherwise.
    pub fn rescale_target(&self) -> (f64, f64) {
        let scores: Option<Vec<f64>> = self.utterances.iter().map(|u| u.human_score).collect();
        match scores {
            Some(s) if s.len() > 1 => {
                let n = s.len() as f64;
                let mean = s.iter().sum::<f64>() / n;
                let std = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                if std > 0.0 {
                    (mean, std)
                } else {
                    (DEFAULT_TARGET_MEAN, DEFAULT_TARGET_STD)
                }
            }
            _ => (DEFAULT_TARGET_MEAN, DEFAULT_TARGET_STD),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WarpEvaluation {
    pub scores: ScoreSet,
    pub summary: RateSummary,
}

/// Features, leave-one-out HMM scores, rescaling and the classification
/// rate for one filterbank.
pub fn evaluate_filterbank(
    word: &PreparedWord,
    fbc: &FilterbankConfig,
    settings: &EvalSettings,
) -> Result<WarpEvaluation, Error> {
    let items = word.features(fbc)?;
    let raw = eval::run_loo(&items, &settings.loo, &settings.hmm)?;
    let (mu, sigma) = word.rescale_target();
    let scores = rescale(&raw, mu, sigma)?;
    let summary = summarize(&scores)?;
    Ok(WarpEvaluation { scores, summary })
}

pub fn evaluate_warp(word: &PreparedWord, warp: WarpFunction, settings: &EvalSettings) -> Result<WarpEvaluation, Error> {
    let fbc = FilterbankConfig { num_filters: settings.num_filters, normalization: settings.normalization, warp };
    evaluate_filterbank(word, &fbc, settings)
}

/// Knot position to classification rate through a single-knot PCHP warp.
/// Results are memoized by exact knot coordinates.
pub struct AdaptiveObjective<'a> {
    word: &'a PreparedWord,
    settings: EvalSettings,
    memo: Mutex<HashMap<(u64, u64), Result<f64, String>>>,
}

impl<'a> AdaptiveObjective<'a> {
    pub fn new(word: &'a PreparedWord, settings: EvalSettings) -> Self {
        AdaptiveObjective { word, settings, memo: Mutex::new(HashMap::new()) }
    }

    pub fn evaluations(&self) -> usize {
        self.memo.lock().expect("memo lock").len()
    }

    pub fn evaluate_point(&self, point: InterpolationPoint) -> Result<WarpEvaluation, Error> {
        let warp = WarpFunction::pchp(point, self.word.audio)?;
        evaluate_warp(self.word, warp, &self.settings)
    }
}

impl search::Objective for AdaptiveObjective<'_> {
    fn evaluate(&self, point: InterpolationPoint) -> Result<f64, String> {
        let key = (point.x.to_bits(), point.y.to_bits());
        if let Some(r) = self.memo.lock().expect("memo lock").get(&key) {
            return r.clone();
        }
        let r = self.evaluate_point(point).map(|e| e.summary.rate).map_err(|e| e.to_string());
        self.memo.lock().expect("memo lock").insert(key, r.clone());
        r
    }
}

pub fn baseline_dir(out: &Path, word: &str, scale: Scale) -> PathBuf {
    out.join("baseline").join(word).join(scale.as_str())
}

pub fn optimize_dir(out: &Path, word: &str) -> PathBuf {
    out.join("optimize").join(word)
}

fn rate_dir(out: &Path, word: &str, scale: Scale) -> PathBuf {
    match scale {
        Scale::Adaptive => optimize_dir(out, word),
        _ => baseline_dir(out, word, scale),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Error> {
    let file = fs::File::create(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(BufWriter::new(file))
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}

/// Columns of `rate.csv`. Knot and search columns are empty for baselines.
pub const RATE_HEADER: [&str; 16] = [
    "word",
    "scale",
    "rate",
    "threshold",
    "mu_non_native",
    "sigma_non_native",
    "n_non_native",
    "mu_native",
    "sigma_native",
    "n_native",
    "knot_x_hz",
    "knot_y_hz",
    "iterations",
    "best_iteration",
    "evaluations",
    "truncated",
];

#[derive(Debug, Clone, Default)]
struct SearchColumns {
    knot: Option<InterpolationPoint>,
    iterations: Option<usize>,
    best_iteration: Option<usize>,
    evaluations: Option<usize>,
    truncated: Option<bool>,
}

fn write_rate_csv(
    path: &Path,
    word: &str,
    scale: Scale,
    summary: &RateSummary,
    extra: &SearchColumns,
) -> Result<(), Error> {
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(RATE_HEADER)?;
    let mut row = vec![word.to_string(), scale.as_str().to_string()];
    row.extend(summary.csv_fields());
    row.extend([
        opt(extra.knot.map(|p| p.x.to_string())),
        opt(extra.knot.map(|p| p.y.to_string())),
        opt(extra.iterations.map(|v| v.to_string())),
        opt(extra.best_iteration.map(|v| v.to_string())),
        opt(extra.evaluations.map(|v| v.to_string())),
        opt(extra.truncated.map(|v| v.to_string())),
    ]);
    w.write_record(&row)?;
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

fn write_scores_and_distribution(dir: &Path, eval: &WarpEvaluation) -> Result<(), Error> {
    eval.scores.write_csv(create(&dir.join("scores.csv"))?)?;
    let bins = distribution_dump(&eval.scores, HISTOGRAM_BINS)?;
    write_distribution_csv(&bins, create(&dir.join("distribution.csv"))?)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub word: String,
    pub scale: Scale,
    pub evaluation: WarpEvaluation,
    pub dir: PathBuf,
}

/// Evaluates a fixed scale and writes `rate.csv`, `scores.csv` and
/// `distribution.csv` under `<out>/baseline/<word>/<scale>/`.
pub fn run_baseline(
    word: &PreparedWord,
    scale: Scale,
    settings: &EvalSettings,
    out: &Path,
) -> Result<BaselineRun, Error> {
    let fbc = scale
        .fixed_filterbank(word.audio, settings.num_filters, settings.normalization)
        .ok_or_else(|| Error::Usage("the adaptive scale is produced by optimize, not baseline".into()))?;
    let evaluation = evaluate_filterbank(word, &fbc, settings)?;
    let dir = baseline_dir(out, &word.word, scale);
    create_dir(&dir)?;
    write_rate_csv(&dir.join(RATE_FILE), &word.word, scale, &evaluation.summary, &SearchColumns::default())?;
    write_scores_and_distribution(&dir, &evaluation)?;
    tracing::info!(word = %word.word, scale = %scale, rate = evaluation.summary.rate, "baseline done");
    Ok(BaselineRun { word: word.word.clone(), scale, evaluation, dir })
}

#[derive(Debug, Clone)]
pub struct OptimizeRun {
    pub word: String,
    pub outcome: SearchOutcome,
    pub evaluation: WarpEvaluation,
    pub warp: WarpFunction,
    pub evaluations: usize,
    pub dir: PathBuf,
}

/// Searches the knot and writes `rate.csv`, `trace.csv`, `warp_curve.csv`,
/// `scores.csv` and `distribution.csv` under `<out>/optimize/<word>/`.
pub fn run_optimize(
    word: &PreparedWord,
    settings: &EvalSettings,
    search_cfg: &SearchConfig,
    out: &Path,
) -> Result<OptimizeRun, Error> {
    let objective = AdaptiveObjective::new(word, settings.clone());
    let outcome = search::optimize(&objective, search_cfg, &word.audio)?;
    let evaluation = objective.evaluate_point(outcome.best_point)?;
    let warp = WarpFunction::pchp(outcome.best_point, word.audio)?;
    if outcome.truncated {
        tracing::warn!(word = %word.word, "search hit max_iterations before the stall limit");
    }

    let dir = optimize_dir(out, &word.word);
    create_dir(&dir)?;
    let extra = SearchColumns {
        knot: Some(outcome.best_point),
        iterations: Some(outcome.trace.len()),
        best_iteration: Some(outcome.best_iteration),
        evaluations: Some(objective.evaluations()),
        truncated: Some(outcome.truncated),
    };
    write_rate_csv(&dir.join(RATE_FILE), &word.word, Scale::Adaptive, &evaluation.summary, &extra)?;
    outcome.write_trace_csv(create(&dir.join("trace.csv"))?, &word.audio)?;
    warp.write_curve_csv(create(&dir.join("warp_curve.csv"))?, CURVE_POINTS)?;
    write_scores_and_distribution(&dir, &evaluation)?;
    tracing::info!(
        word = %word.word,
        rate = evaluation.summary.rate,
        x_hz = outcome.best_point.x,
        y_hz = outcome.best_point.y,
        "optimize done"
    );
    Ok(OptimizeRun {
        word: word.word.clone(),
        evaluations: objective.evaluations(),
        outcome,
        evaluation,
        warp,
        dir,
    })
}

/// One parsed `rate.csv` row, values kept as written.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRecord {
    pub fields: BTreeMap<String, String>,
}

impl RateRecord {
    pub fn get(&self, column: &str) -> Option<&str> {
        self.fields.get(column).map(String::as_str)
    }

    /// Knot written by an optimize run.
    pub fn knot(&self) -> Option<InterpolationPoint> {
        let x = self.get("knot_x_hz")?.parse().ok()?;
        let y = self.get("knot_y_hz")?.parse().ok()?;
        Some(InterpolationPoint { x, y })
    }
}

pub fn read_rate_csv(path: &Path) -> Result<RateRecord, Error> {
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "run output not found"),
        });
    }
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let row = r
        .records()
        .next()
        .ok_or_else(|| Error::Data(format!("{}: no data row", path.display())))??;
    Ok(RateRecord { fields: header.iter().map(String::from).zip(row.iter().map(String::from)).collect() })
}

pub fn read_run_rate(out: &Path, word: &str, scale: Scale) -> Result<RateRecord, Error> {
    read_rate_csv(&rate_dir(out, word, scale).join(RATE_FILE))
}

fn subdirs(dir: &Path) -> Vec<String> {
    let Ok(rd) = fs::read_dir(dir) else { return Vec::new() };
    rd.filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect()
}

/// Words that have at least one baseline or optimize run under `out`.
pub fn discover_words(out: &Path) -> Vec<String> {
    let mut words: BTreeSet<String> = subdirs(&out.join("baseline")).into_iter().collect();
    words.extend(subdirs(&out.join("optimize")));
    words.into_iter().collect()
}

/// Rates by scale (rows) and word (columns), copied from the run outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub words: Vec<String>,
    pub rows: Vec<(Scale, Vec<String>)>,
}

pub fn collect_report(out: &Path, words: &[String]) -> Result<ReportTable, Error> {
    if words.is_empty() {
        return Err(Error::MissingRuns(vec![format!("no runs under {}", out.display())]));
    }
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for scale in Scale::ALL {
        let mut values = Vec::new();
        for word in words {
            match read_run_rate(out, word, scale).ok().and_then(|r| r.get("rate").map(String::from)) {
                Some(v) => values.push(v),
                None => {
                    let kind = if scale == Scale::Adaptive { "optimize" } else { "baseline" };
                    missing.push(format!("{kind} {word}/{scale}"));
                    values.push(String::new());
                }
            }
        }
        rows.push((scale, values));
    }
    if !missing.is_empty() {
        return Err(Error::MissingRuns(missing));
    }
    Ok(ReportTable { words: words.to_vec(), rows })
}

/// Writes `<out>/report.csv` and returns its path.
pub fn write_report(out: &Path, table: &ReportTable) -> Result<PathBuf, Error> {
    let path = out.join(REPORT_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut header = vec!["scale".to_string()];
    header.extend(table.words.iter().cloned());
    w.write_record(&header)?;
    for (scale, values) in &table.rows {
        let mut row = vec![scale.as_str().to_string()];
        row.extend(values.iter().cloned());
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| Error::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Extracts features for every utterance of a word and writes one CSV and
/// one binary file per utterance under `<out>/features/<scale>/`.
pub fn run_extract(word: &PreparedWord, fbc: &FilterbankConfig, frame: &FrameConfig, out: &Path, scale: Scale) -> Result<usize, Error> {
    let items = word.features(fbc)?;
    let base = out.join("features").join(scale.as_str());
    let hash = frame.config_hash();
    for item in &items {
        let stem = item.id.trim_end_matches(".wav");
        let csv_path = base.join(format!("{stem}.csv"));
        if let Some(parent) = csv_path.parent() {
            create_dir(parent)?;
        }
        item.features.write_csv(create(&csv_path)?)?;
        write_features_binary(&base.join(format!("{stem}.afcf")), &item.features, hash)?;
    }
    Ok(items.len())
}

fn write_features_binary(path: &Path, features: &FeatureMatrix, hash: u64) -> Result<(), Error> {
    features.write_binary(create(path)?, hash)?;
    Ok(())
}
