//! Scoring protocol and Bayes separation statistics.
//!
//! Native samples are split into folds; each fold's HMM is trained on the
//! remaining natives and scores its held-out natives plus every non-native
//! sample (non-natives receive the mean over folds). Scores are mapped by one
//! affine transform onto a human-score scale, each group is fitted with a
//! Gaussian, and the classification rate of the minimum-error threshold
//! between the two fits is reported.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::features::FeatureMatrix;
use crate::hmm::{self, HmmConfig, HmmError};

/// Rescale target used when no human scores are available.
pub const DEFAULT_TARGET_MEAN: f64 = 4.0;
pub const DEFAULT_TARGET_STD: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("protocol needs at least {folds} native and 1 non-native samples, got {natives} native and {non_natives} non-native")]
    InsufficientSamples { folds: usize, natives: usize, non_natives: usize },
    #[error("invalid LOO config: {0}")]
    InvalidConfig(String),
    #[error("degenerate scores: {0}")]
    Degenerate(String),
    #[error("non-native mean {mu_non_native} exceeds native mean {mu_native}")]
    Orientation { mu_non_native: f64, mu_native: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("HMM failure in fold {fold}: {source}")]
    Hmm { fold: usize, source: HmmError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Mispronounced group, written `omega_1` in the Bayes rule.
    NonNative,
    Native,
}

impl Group {
    pub fn as_str(&self) -> &'static str {
        match self {
            Group::NonNative => "non_native",
            Group::Native => "native",
        }
    }
}

impl std::str::FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "non_native" => Ok(Group::NonNative),
            "native" => Ok(Group::Native),
            other => Err(format!("unknown group {other:?}")),
        }
    }
}

/// One utterance's features with its labels.
#[derive(Debug, Clone)]
pub struct LabeledFeatures {
    pub id: String,
    pub speaker: Option<String>,
    pub group: Group,
    pub human_score: Option<f64>,
    pub features: FeatureMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierRule {
    /// Drop samples whose human score is nearer the other group's mean.
    NearerOppositeMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LooConfig {
    pub num_folds: usize,
    pub outlier_filter: Option<OutlierRule>,
    /// Seeds the fold shuffle; derived from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LooConfig {
    fn default() -> Self {
        LooConfig { num_folds: 5, outlier_filter: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub sample_id: String,
    pub group: Group,
    pub raw_score: f64,
    pub rescaled_score: Option<f64>,
}

impl ScoreEntry {
    /// Rescaled score when present, raw otherwise.
    pub fn value(&self) -> f64 {
        self.rescaled_score.unwrap_or(self.raw_score)
    }
}

/// `rescaled = scale * raw + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub scale: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    /// Sorted by sample id.
    pub entries: Vec<ScoreEntry>,
    pub rescale: Option<AffineMap>,
}

impl ScoreSet {
    pub fn from_raw(mut entries: Vec<ScoreEntry>) -> Self {
        entries.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        ScoreSet { entries, rescale: None }
    }

    pub fn group_values(&self, group: Group) -> Vec<f64> {
        self.entries.iter().filter(|e| e.group == group).map(ScoreEntry::value).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample_id", "group", "raw_score", "rescaled_score"])?;
        for e in &self.entries {
            w.write_record([
                e.sample_id.clone(),
                e.group.as_str().to_string(),
                e.raw_score.to_string(),
                e.rescaled_score.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupGaussian {
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
}

impl GroupGaussian {
    pub fn new(mu: f64, sigma: f64, n: usize) -> Self {
        GroupGaussian { mu, sigma, n }
    }

    /// Sample mean and unbiased standard deviation.
    pub fn fit(values: &[f64]) -> Result<Self, EvalError> {
        let n = values.len();
        if n < 2 {
            return Err(EvalError::Degenerate(format!("group has {n} samples, need at least 2")));
        }
        let mu = values.iter().sum::<f64>() / n as f64;
        let ss: f64 = values.iter().map(|v| (v - mu) * (v - mu)).sum();
        let sigma = (ss / (n - 1) as f64).sqrt();
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(EvalError::Degenerate("group has zero variance".into()));
        }
        Ok(GroupGaussian { mu, sigma, n })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.mu) / self.sigma;
        (-0.5 * z * z).exp() / (self.sigma * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// `P(X > x)`.
    pub fn upper_tail(&self, x: f64) -> f64 {
        0.5 * libm::erfc((x - self.mu) / (self.sigma * std::f64::consts::SQRT_2))
    }

    /// `P(X < x)`.
    pub fn lower_tail(&self, x: f64) -> f64 {
        0.5 * libm::erfc((self.mu - x) / (self.sigma * std::f64::consts::SQRT_2))
    }
}

/// Discriminant `g(x) = p(x|w1) P(w1) - p(x|w2) P(w2)` with equal priors.
pub fn discriminant(g1: &GroupGaussian, g2: &GroupGaussian, x: f64) -> f64 {
    0.5 * g1.pdf(x) - 0.5 * g2.pdf(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesDecision {
    pub rate: f64,
    pub threshold: f64,
}

/// Real points where the two weighted log-densities are equal.
fn density_crossings(g1: &GroupGaussian, g2: &GroupGaussian) -> Vec<f64> {
    let (p1, p2) = (1.0 / (g1.sigma * g1.sigma), 1.0 / (g2.sigma * g2.sigma));
    let a = p1 - p2;
    let b = -2.0 * (g1.mu * p1 - g2.mu * p2);
    let c = g1.mu * g1.mu * p1 - g2.mu * g2.mu * p2 + 2.0 * (g1.sigma / g2.sigma).ln();
    if a == 0.0 {
        return if b == 0.0 { vec![] } else { vec![-c / b] };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return vec![];
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    if q == 0.0 {
        return vec![0.0];
    }
    let mut roots = vec![q / a, c / q];
    roots.sort_by(f64::total_cmp);
    roots
}

fn rate_at(g1: &GroupGaussian, g2: &GroupGaussian, x: f64) -> f64 {
    1.0 - 0.5 * (g1.upper_tail(x) + g2.lower_tail(x))
}

fn check_sigmas(g1: &GroupGaussian, g2: &GroupGaussian) -> Result<(), EvalError> {
    for g in [g1, g2] {
        if !(g.sigma > 0.0 && g.sigma.is_finite() && g.mu.is_finite()) {
            return Err(EvalError::Degenerate(format!("invalid group fit {g:?}")));
        }
    }
    Ok(())
}

/// Bayes minimum-error classification rate for the non-native fit `g1` and
/// native fit `g2` with equal priors, using the single density crossing
/// between the two means as the threshold.
pub fn classification_rate(g1: &GroupGaussian, g2: &GroupGaussian) -> Result<BayesDecision, EvalError> {
    check_sigmas(g1, g2)?;
    if g1.mu > g2.mu {
        return Err(EvalError::Orientation { mu_non_native: g1.mu, mu_native: g2.mu });
    }
    let threshold = if g1.sigma == g2.sigma {
        0.5 * (g1.mu + g2.mu)
    } else {
        density_crossings(g1, g2)
            .into_iter()
            .find(|x| (g1.mu..=g2.mu).contains(x))
            .ok_or_else(|| {
                EvalError::Numerical(format!("no density crossing between means for {g1:?} and {g2:?}"))
            })?
    };
    Ok(BayesDecision { rate: rate_at(g1, g2, threshold), threshold })
}

/// Rate of the rule "score above threshold means native" for fits of any
/// orientation.
///
/// When the non-native mean exceeds the native mean the rule is evaluated on
/// the negated axis and reported as `1 - r`, so reversed separations score
/// below one half. When no crossing lies between the means (close means with
/// unequal spreads) the crossing nearest their midpoint is used.
pub fn separation_rate(g1: &GroupGaussian, g2: &GroupGaussian) -> Result<BayesDecision, EvalError> {
    check_sigmas(g1, g2)?;
    if g1.mu > g2.mu {
        let flip = |g: &GroupGaussian| GroupGaussian { mu: -g.mu, ..*g };
        let d = separation_rate(&flip(g1), &flip(g2))?;
        return Ok(BayesDecision { rate: 1.0 - d.rate, threshold: -d.threshold });
    }
    match classification_rate(g1, g2) {
        Ok(d) => Ok(d),
        Err(EvalError::Numerical(_)) => {
            let mid = 0.5 * (g1.mu + g2.mu);
            let threshold = density_crossings(g1, g2)
                .into_iter()
                .min_by(|a, b| (a - mid).abs().total_cmp(&(b - mid).abs()))
                .unwrap_or(mid);
            Ok(BayesDecision { rate: rate_at(g1, g2, threshold), threshold })
        }
        Err(e) => Err(e),
    }
}

/// Gaussian fits for the non-native and native groups, in that order.
pub fn fit_groups(scores: &ScoreSet) -> Result<(GroupGaussian, GroupGaussian), EvalError> {
    let fit = |g: Group| {
        GroupGaussian::fit(&scores.group_values(g))
            .map_err(|e| EvalError::Degenerate(format!("{} group: {e}", g.as_str())))
    };
    Ok((fit(Group::NonNative)?, fit(Group::Native)?))
}

/// Applies one affine map to all scores so the pooled mean and population
/// standard deviation equal the targets.
pub fn rescale(scores: &ScoreSet, target_mu: f64, target_sigma: f64) -> Result<ScoreSet, EvalError> {
    if !(target_sigma > 0.0 && target_sigma.is_finite() && target_mu.is_finite()) {
        return Err(EvalError::InvalidConfig(format!("bad rescale target ({target_mu}, {target_sigma})")));
    }
    let n = scores.entries.len() as f64;
    let mean = scores.entries.iter().map(|e| e.raw_score).sum::<f64>() / n;
    let var = scores.entries.iter().map(|e| (e.raw_score - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0 && std.is_finite()) {
        return Err(EvalError::Degenerate("pooled raw scores have zero variance".into()));
    }
    let map = AffineMap { scale: target_sigma / std, offset: target_mu - target_sigma / std * mean };
    let entries = scores
        .entries
        .iter()
        .map(|e| ScoreEntry { rescaled_score: Some(map.scale * e.raw_score + map.offset), ..e.clone() })
        .collect();
    Ok(ScoreSet { entries, rescale: Some(map) })
}

/// Fits, threshold and rate for a score set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub rate: f64,
    pub threshold: f64,
    pub non_native: GroupGaussian,
    pub native: GroupGaussian,
}

impl RateSummary {
    pub const CSV_HEADER: [&'static str; 8] = [
        "rate",
        "threshold",
        "mu_non_native",
        "sigma_non_native",
        "n_non_native",
        "mu_native",
        "sigma_native",
        "n_native",
    ];

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.rate.to_string(),
            self.threshold.to_string(),
            self.non_native.mu.to_string(),
            self.non_native.sigma.to_string(),
            self.non_native.n.to_string(),
            self.native.mu.to_string(),
            self.native.sigma.to_string(),
            self.native.n.to_string(),
        ]
    }
}

pub fn summarize(scores: &ScoreSet) -> Result<RateSummary, EvalError> {
    let (non_native, native) = fit_groups(scores)?;
    let d = separation_rate(&non_native, &native)?;
    Ok(RateSummary { rate: d.rate, threshold: d.threshold, non_native, native })
}

/// Histogram of each group over a shared range plus the fitted density at
/// every bin centre.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub group: Group,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub density: f64,
    pub fitted_pdf: f64,
}

pub fn distribution_dump(scores: &ScoreSet, bins: usize) -> Result<Vec<HistogramBin>, EvalError> {
    let (g1, g2) = fit_groups(scores)?;
    let values: Vec<f64> = scores.entries.iter().map(ScoreEntry::value).collect();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let mut out = Vec::with_capacity(2 * bins);
    for (group, fit) in [(Group::NonNative, g1), (Group::Native, g2)] {
        let vals = scores.group_values(group);
        let mut counts = vec![0usize; bins];
        for v in &vals {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        for (k, &count) in counts.iter().enumerate() {
            let (b_lo, b_hi) = (lo + k as f64 * width, lo + (k + 1) as f64 * width);
            out.push(HistogramBin {
                group,
                lo: b_lo,
                hi: b_hi,
                count,
                density: count as f64 / (vals.len() as f64 * width),
                fitted_pdf: fit.pdf(0.5 * (b_lo + b_hi)),
            });
        }
    }
    Ok(out)
}

pub fn write_distribution_csv<W: Write>(bins: &[HistogramBin], out: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "bin_lo", "bin_hi", "count", "density", "fitted_pdf"])?;
    for b in bins {
        w.write_record([
            b.group.as_str().to_string(),
            b.lo.to_string(),
            b.hi.to_string(),
            b.count.to_string(),
            b.density.to_string(),
            b.fitted_pdf.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Removes samples whose human score lies nearer the opposite group's mean.
pub fn filter_outliers(items: Vec<LabeledFeatures>) -> Result<Vec<LabeledFeatures>, EvalError> {
    let mut sums: BTreeMap<Group, (f64, usize)> = BTreeMap::new();
    for it in &items {
        let h = it.human_score.ok_or_else(|| {
            EvalError::InvalidConfig(format!("outlier filter needs a human score for {}", it.id))
        })?;
        let e = sums.entry(it.group).or_insert((0.0, 0));
        e.0 += h;
        e.1 += 1;
    }
    let mean = |g: Group| sums.get(&g).map(|(s, n)| s / *n as f64);
    let (Some(m_non), Some(m_nat)) = (mean(Group::NonNative), mean(Group::Native)) else {
        return Ok(items);
    };
    Ok(items
        .into_iter()
        .filter(|it| {
            let h = it.human_score.expect("checked above");
            let (own, other) = match it.group {
                Group::NonNative => (m_non, m_nat),
                Group::Native => (m_nat, m_non),
            };
            (h - own).abs() <= (h - other).abs()
        })
        .collect())
}

/// Which native samples each fold holds out.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldRecord {
    pub held_out: Vec<String>,
    pub trained_on: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LooReport {
    pub scores: ScoreSet,
    pub folds: Vec<FoldRecord>,
    /// Per-fold scores of every non-native sample, in fold order.
    pub non_native_fold_scores: BTreeMap<String, Vec<f64>>,
}

/// Partition of native sample indices into folds. Whole speakers go to one
/// fold when every native sample carries a speaker label and there are at
/// least as many speakers as folds.
pub fn assign_folds(items: &[LabeledFeatures], cfg: &LooConfig) -> Vec<Vec<usize>> {
    let natives: Vec<usize> = {
        let mut v: Vec<usize> = (0..items.len()).filter(|&i| items[i].group == Group::Native).collect();
        v.sort_by(|&a, &b| items[a].id.cmp(&items[b].id));
        v
    };
    let k = cfg.num_folds;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut folds = vec![Vec::new(); k];

    let speakers: Option<BTreeSet<&str>> =
        natives.iter().map(|&i| items[i].speaker.as_deref()).collect::<Option<BTreeSet<_>>>();
    match speakers {
        Some(set) if set.len() >= k => {
            let mut order: Vec<&str> = set.into_iter().collect();
            order.shuffle(&mut rng);
            let fold_of: BTreeMap<&str, usize> = order.iter().enumerate().map(|(p, s)| (*s, p % k)).collect();
            for &i in &natives {
                folds[fold_of[items[i].speaker.as_deref().expect("labelled")]].push(i);
            }
        }
        _ => {
            let mut order = natives;
            order.shuffle(&mut rng);
            for (p, i) in order.into_iter().enumerate() {
                folds[p % k].push(i);
            }
        }
    }
    for f in folds.iter_mut() {
        f.sort_by(|&a, &b| items[a].id.cmp(&items[b].id));
    }
    folds
}

struct FoldResult {
    native: Vec<(usize, f64)>,
    non_native: Vec<(usize, f64)>,
}

pub fn run_loo(items: &[LabeledFeatures], cfg: &LooConfig, hmm_cfg: &HmmConfig) -> Result<ScoreSet, EvalError> {
    run_loo_detailed(items, cfg, hmm_cfg).map(|r| r.scores)
}

pub fn run_loo_detailed(
    items: &[LabeledFeatures],
    cfg: &LooConfig,
    hmm_cfg: &HmmConfig,
) -> Result<LooReport, EvalError> {
    if cfg.num_folds < 2 {
        return Err(EvalError::InvalidConfig(format!("{} folds, need at least 2", cfg.num_folds)));
    }
    let filtered;
    let items = match cfg.outlier_filter {
        Some(OutlierRule::NearerOppositeMean) => {
            filtered = filter_outliers(items.to_vec())?;
            &filtered[..]
        }
        None => items,
    };
    let natives = items.iter().filter(|i| i.group == Group::Native).count();
    let non_natives = items.len() - natives;
    if natives < cfg.num_folds || non_natives == 0 {
        return Err(EvalError::InsufficientSamples { folds: cfg.num_folds, natives, non_natives });
    }

    let folds = assign_folds(items, cfg);
    let non_native_idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].group == Group::NonNative).collect();

    let results: Vec<FoldResult> = folds
        .par_iter()
        .enumerate()
        .map(|(f, held)| {
            let training: Vec<&FeatureMatrix> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, idx)| idx.iter().map(|&i| &items[i].features))
                .collect();
            let fold_cfg = HmmConfig { seed: derive_seed(hmm_cfg.seed, &[f as u64]), ..hmm_cfg.clone() };
            let wrap = |source| EvalError::Hmm { fold: f, source };
            let model = hmm::train_on(&training, &fold_cfg).map_err(wrap)?.model;
            let score = |i: usize| -> Result<(usize, f64), EvalError> {
                Ok((i, model.score(&items[i].features).map_err(wrap)?.loglik_per_frame))
            };
            Ok(FoldResult {
                native: held.iter().map(|&i| score(i)).collect::<Result<_, _>>()?,
                non_native: non_native_idx.iter().map(|&i| score(i)).collect::<Result<_, _>>()?,
            })
        })
        .collect::<Result<_, EvalError>>()?;

    let mut raw: BTreeMap<usize, f64> = BTreeMap::new();
    let mut per_fold: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &results {
        raw.extend(r.native.iter().cloned());
        for &(i, s) in &r.non_native {
            per_fold.entry(items[i].id.clone()).or_default().push(s);
        }
    }
    for &i in &non_native_idx {
        let s = &per_fold[&items[i].id];
        raw.insert(i, s.iter().sum::<f64>() / s.len() as f64);
    }

    let entries = raw
        .into_iter()
        .map(|(i, raw_score)| ScoreEntry {
            sample_id: items[i].id.clone(),
            group: items[i].group,
            raw_score,
            rescaled_score: None,
        })
        .collect();
    let ids = |idx: &[usize]| idx.iter().map(|&i| items[i].id.clone()).collect::<Vec<_>>();
    let fold_records = folds
        .iter()
        .enumerate()
        .map(|(f, held)| FoldRecord {
            held_out: ids(held),
            trained_on: folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, idx)| ids(idx))
                .collect(),
        })
        .collect();
    Ok(LooReport { scores: ScoreSet::from_raw(entries), folds: fold_records, non_native_fold_scores: per_fold })
}
