//! Left-to-right HMMs with diagonal Gaussian-mixture emissions.
//!
//! Training is Baum-Welch in log space, initialized by uniform temporal
//! segmentation. Scores are forward log-likelihoods divided by the frame
//! count.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{hash_json, read_array, FeatureMatrix};

/// Absolute lower bound on any variance, used when the data itself has none.
pub const MIN_VARIANCE: f64 = 1e-8;

const MODEL_MAGIC: &[u8; 4] = b"AFCH";
const MODEL_VERSION: u16 = 1;
const STOCHASTIC_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum HmmError {
    #[error("training needs at least 2 samples, got {0}")]
    NotEnoughSamples(usize),
    #[error("sample {index} has {frames} frames, fewer than the {states} states")]
    SampleTooShort { index: usize, frames: usize, states: usize },
    #[error("feature dimension mismatch: model expects {expected}, sample has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot score an empty sample")]
    EmptySample,
    #[error("invalid HMM config: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmmConfig {
    pub num_states: usize,
    pub mixtures_per_state: usize,
    pub max_iters: usize,
    /// Stop when the per-frame training log-likelihood improves by less than this.
    pub ll_tolerance: f64,
    pub variance_floor_factor: f64,
    /// Seeds mixture-component initialization; derived from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for HmmConfig {
    fn default() -> Self {
        HmmConfig {
            num_states: 3,
            mixtures_per_state: 1,
            max_iters: 20,
            ll_tolerance: 1e-4,
            variance_floor_factor: 1e-3,
            seed: 0,
        }
    }
}

impl HmmConfig {
    pub fn validate(&self) -> Result<(), HmmError> {
        let bad = |m: &str| Err(HmmError::InvalidConfig(m.to_string()));
        if self.num_states == 0 || self.mixtures_per_state == 0 || self.max_iters == 0 {
            return bad("states, mixtures and iterations must be positive");
        }
        if !(self.ll_tolerance > 0.0 && self.ll_tolerance < 1.0) {
            return bad("ll_tolerance must lie in (0, 1)");
        }
        if !(self.variance_floor_factor > 0.0 && self.variance_floor_factor.is_finite()) {
            return bad("variance_floor_factor must be positive");
        }
        Ok(())
    }

    pub fn config_hash(&self) -> u64 {
        hash_json(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEmission {
    pub weights: Vec<f64>,
    pub components: Vec<DiagGaussian>,
}

/// Length-normalized forward log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HmmScore {
    pub loglik_per_frame: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordHmm {
    initial: Vec<f64>,
    transitions: Vec<Vec<f64>>,
    emissions: Vec<StateEmission>,
    feature_dim: usize,
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-component constants needed to evaluate log densities quickly.
struct PreparedComponent {
    log_weight: f64,
    log_norm: f64,
    mean: Vec<f64>,
    inv_var: Vec<f64>,
}

impl PreparedComponent {
    fn log_density(&self, x: &[f64]) -> f64 {
        let quad: f64 = x
            .iter()
            .zip(&self.mean)
            .zip(&self.inv_var)
            .map(|((x, m), iv)| (x - m) * (x - m) * iv)
            .sum();
        self.log_norm - 0.5 * quad
    }
}

struct Prepared {
    log_initial: Vec<f64>,
    log_trans: Vec<Vec<f64>>,
    states: Vec<Vec<PreparedComponent>>,
}

/// Emission log-likelihoods of one sample: state totals and per-component terms.
struct Emissions {
    state: Vec<f64>,
    component: Vec<f64>,
    num_states: usize,
    num_mix: usize,
}

impl Emissions {
    fn b(&self, t: usize, j: usize) -> f64 {
        self.state[t * self.num_states + j]
    }

    fn comp(&self, t: usize, j: usize, m: usize) -> f64 {
        self.component[(t * self.num_states + j) * self.num_mix + m]
    }
}

impl Prepared {
    fn new(model: &WordHmm) -> Self {
        let ln = |p: f64| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
        let states = model
            .emissions
            .iter()
            .map(|st| {
                st.weights
                    .iter()
                    .zip(&st.components)
                    .map(|(w, c)| PreparedComponent {
                        log_weight: ln(*w),
                        log_norm: -0.5
                            * c.var.iter().map(|v| (2.0 * std::f64::consts::PI * v).ln()).sum::<f64>(),
                        mean: c.mean.clone(),
                        inv_var: c.var.iter().map(|v| 1.0 / v).collect(),
                    })
                    .collect()
            })
            .collect();
        Prepared {
            log_initial: model.initial.iter().map(|&p| ln(p)).collect(),
            log_trans: model.transitions.iter().map(|r| r.iter().map(|&p| ln(p)).collect()).collect(),
            states,
        }
    }

    fn emissions(&self, sample: &FeatureMatrix) -> Emissions {
        let s = self.states.len();
        let num_mix = self.states.iter().map(Vec::len).max().unwrap_or(1);
        let frames = sample.num_frames();
        let mut state = Vec::with_capacity(frames * s);
        let mut component = vec![f64::NEG_INFINITY; frames * s * num_mix];
        let mut terms = Vec::with_capacity(num_mix);
        for (t, x) in sample.rows().enumerate() {
            for (j, comps) in self.states.iter().enumerate() {
                terms.clear();
                for (m, c) in comps.iter().enumerate() {
                    let v = c.log_weight + c.log_density(x);
                    component[(t * s + j) * num_mix + m] = v;
                    terms.push(v);
                }
                state.push(log_sum_exp(&terms));
            }
        }
        Emissions { state, component, num_states: s, num_mix }
    }

    /// Log forward variables, row-major `T x S`, and the total log-likelihood.
    fn forward(&self, em: &Emissions, frames: usize) -> (Vec<f64>, f64) {
        let s = self.states.len();
        let mut alpha = vec![f64::NEG_INFINITY; frames * s];
        for j in 0..s {
            alpha[j] = self.log_initial[j] + em.b(0, j);
        }
        let mut terms = vec![0.0; s];
        for t in 1..frames {
            for j in 0..s {
                for i in 0..s {
                    terms[i] = alpha[(t - 1) * s + i] + self.log_trans[i][j];
                }
                alpha[t * s + j] = log_sum_exp(&terms) + em.b(t, j);
            }
        }
        let ll = log_sum_exp(&alpha[(frames - 1) * s..]);
        (alpha, ll)
    }

    fn backward(&self, em: &Emissions, frames: usize) -> Vec<f64> {
        let s = self.states.len();
        let mut beta = vec![0.0; frames * s];
        let mut terms = vec![0.0; s];
        for t in (0..frames - 1).rev() {
            for i in 0..s {
                for j in 0..s {
                    terms[j] = self.log_trans[i][j] + em.b(t + 1, j) + beta[(t + 1) * s + j];
                }
                beta[t * s + i] = log_sum_exp(&terms);
            }
        }
        beta
    }
}

impl WordHmm {
    /// Builds a model from explicit parameters, checking the left-to-right
    /// structure and stochastic constraints.
    pub fn new(
        initial: Vec<f64>,
        transitions: Vec<Vec<f64>>,
        emissions: Vec<StateEmission>,
    ) -> Result<Self, HmmError> {
        let s = initial.len();
        let bad = |m: String| Err(HmmError::InvalidModel(m));
        if s == 0 || transitions.len() != s || emissions.len() != s {
            return bad("state counts disagree".into());
        }
        if (initial[0] - 1.0).abs() > STOCHASTIC_TOL || initial[1..].iter().any(|&p| p != 0.0) {
            return bad("initial distribution must put all mass on state 0".into());
        }
        for (i, row) in transitions.iter().enumerate() {
            if row.len() != s {
                return bad(format!("transition row {i} has {} entries", row.len()));
            }
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL {
                return bad(format!("transition row {i} is not stochastic"));
            }
            if row.iter().enumerate().any(|(j, &p)| p != 0.0 && j != i && j != i + 1) {
                return bad(format!("transition row {i} has backward or skip mass"));
            }
        }
        let dim = emissions[0].components.first().map_or(0, |c| c.mean.len());
        if dim == 0 {
            return bad("emission dimension is zero".into());
        }
        for (j, st) in emissions.iter().enumerate() {
            if st.weights.len() != st.components.len() || st.components.is_empty() {
                return bad(format!("state {j} mixture weights and components disagree"));
            }
            if (st.weights.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL
                || st.weights.iter().any(|w| !(*w >= 0.0))
            {
                return bad(format!("state {j} mixture weights do not sum to 1"));
            }
            for c in &st.components {
                if c.mean.len() != dim || c.var.len() != dim {
                    return bad(format!("state {j} component dimension differs"));
                }
                if c.var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return bad(format!("state {j} has a non-positive variance"));
                }
            }
        }
        Ok(WordHmm { initial, transitions, emissions, feature_dim: dim })
    }

    pub fn num_states(&self) -> usize {
        self.initial.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    pub fn emissions(&self) -> &[StateEmission] {
        &self.emissions
    }

    fn check_sample(&self, sample: &FeatureMatrix) -> Result<(), HmmError> {
        if sample.is_empty() {
            return Err(HmmError::EmptySample);
        }
        if sample.dim() != self.feature_dim {
            return Err(HmmError::DimensionMismatch { expected: self.feature_dim, found: sample.dim() });
        }
        Ok(())
    }

    /// Total forward log-likelihood `log p(sample | model)`.
    pub fn log_likelihood(&self, sample: &FeatureMatrix) -> Result<f64, HmmError> {
        self.check_sample(sample)?;
        let prepared = Prepared::new(self);
        let em = prepared.emissions(sample);
        Ok(prepared.forward(&em, sample.num_frames()).1)
    }

    pub fn score(&self, sample: &FeatureMatrix) -> Result<HmmScore, HmmError> {
        let ll = self.log_likelihood(sample)?;
        Ok(HmmScore { loglik_per_frame: ll / sample.num_frames() as f64 })
    }

    /// Binary layout: magic `AFCH`, u16 version, u32 states, u32 mixtures,
    /// u32 dim, u64 config hash, then initial, transitions and per-state
    /// (weight, mean, var) blocks as little-endian f64.
    pub fn write_binary<W: Write>(&self, mut out: W, config_hash: u64) -> Result<(), HmmError> {
        let mixtures = self.emissions[0].components.len();
        if self.emissions.iter().any(|st| st.components.len() != mixtures) {
            return Err(HmmError::InvalidModel("ragged mixture counts cannot be serialized".into()));
        }
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&MODEL_VERSION.to_le_bytes())?;
        for v in [self.num_states(), mixtures, self.feature_dim] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        out.write_all(&config_hash.to_le_bytes())?;
        let mut put = |v: f64| out.write_all(&v.to_le_bytes());
        for &p in &self.initial {
            put(p)?;
        }
        for row in &self.transitions {
            for &p in row {
                put(p)?;
            }
        }
        for st in &self.emissions {
            for (w, c) in st.weights.iter().zip(&st.components) {
                put(*w)?;
                for &v in c.mean.iter().chain(&c.var) {
                    put(v)?;
                }
            }
        }
        Ok(())
    }

    /// Reads the binary form, returning the model and its config hash.
    pub fn read_binary<R: Read>(mut input: R) -> Result<(Self, u64), HmmError> {
        let magic: [u8; 4] = read_array(&mut input)?;
        if &magic != MODEL_MAGIC {
            return Err(HmmError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut input)?);
        if version != MODEL_VERSION {
            return Err(HmmError::Format(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            *d = u32::from_le_bytes(read_array(&mut input)?) as usize;
        }
        let [s, mixtures, dim] = dims;
        if s == 0 || mixtures == 0 || dim == 0 || s > 1 << 16 || mixtures > 1 << 16 || dim > 1 << 16 {
            return Err(HmmError::Format(format!("implausible dimensions {dims:?}")));
        }
        let hash = u64::from_le_bytes(read_array(&mut input)?);
        let mut get = || -> Result<f64, HmmError> { Ok(f64::from_le_bytes(read_array(&mut input)?)) };
        let initial = (0..s).map(|_| get()).collect::<Result<Vec<_>, _>>()?;
        let mut transitions = Vec::with_capacity(s);
        for _ in 0..s {
            transitions.push((0..s).map(|_| get()).collect::<Result<Vec<_>, _>>()?);
        }
        let mut emissions = Vec::with_capacity(s);
        for _ in 0..s {
            let mut weights = Vec::with_capacity(mixtures);
            let mut components = Vec::with_capacity(mixtures);
            for _ in 0..mixtures {
                weights.push(get()?);
                let mean = (0..dim).map(|_| get()).collect::<Result<Vec<_>, _>>()?;
                let var = (0..dim).map(|_| get()).collect::<Result<Vec<_>, _>>()?;
                components.push(DiagGaussian { mean, var });
            }
            emissions.push(StateEmission { weights, components });
        }
        Ok((WordHmm::new(initial, transitions, emissions)?, hash))
    }

    pub fn to_json(&self) -> Result<String, HmmError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, HmmError> {
        let raw: WordHmm = serde_json::from_str(text)?;
        WordHmm::new(raw.initial, raw.transitions, raw.emissions)
    }
}

/// A trained model together with its per-iteration training log-likelihoods.
#[derive(Debug, Clone)]
pub struct Training {
    pub model: WordHmm,
    /// Total log-likelihood of the training set under each successive model,
    /// starting with the segmentation initialization.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
}

struct Accumulator {
    ll: f64,
    trans: Vec<Vec<f64>>,
    occ: Vec<Vec<f64>>,
    sum_x: Vec<Vec<Vec<f64>>>,
    sum_xx: Vec<Vec<Vec<f64>>>,
}

impl Accumulator {
    fn new(s: usize, m: usize, d: usize) -> Self {
        Accumulator {
            ll: 0.0,
            trans: vec![vec![0.0; s]; s],
            occ: vec![vec![0.0; m]; s],
            sum_x: vec![vec![vec![0.0; d]; m]; s],
            sum_xx: vec![vec![vec![0.0; d]; m]; s],
        }
    }
}

fn validate_training_set(samples: &[&FeatureMatrix], cfg: &HmmConfig) -> Result<usize, HmmError> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(HmmError::NotEnoughSamples(samples.len()));
    }
    let dim = samples[0].dim();
    for (index, s) in samples.iter().enumerate() {
        if s.dim() != dim {
            return Err(HmmError::DimensionMismatch { expected: dim, found: s.dim() });
        }
        if s.num_frames() < cfg.num_states {
            return Err(HmmError::SampleTooShort { index, frames: s.num_frames(), states: cfg.num_states });
        }
    }
    Ok(dim)
}

fn variance_floor(samples: &[&FeatureMatrix], dim: usize, factor: f64) -> Vec<f64> {
    let mut n = 0.0;
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    for s in samples {
        for x in s.rows() {
            n += 1.0;
            for d in 0..dim {
                sum[d] += x[d];
                sum_sq[d] += x[d] * x[d];
            }
        }
    }
    (0..dim)
        .map(|d| {
            let mean = sum[d] / n;
            let var = (sum_sq[d] / n - mean * mean).max(0.0);
            (factor * var).max(MIN_VARIANCE)
        })
        .collect()
}

/// Uniform temporal segmentation into `num_states` spans per sample.
fn segment_init(samples: &[&FeatureMatrix], cfg: &HmmConfig, dim: usize, floor: &[f64]) -> WordHmm {
    let s = cfg.num_states;
    let mut count = vec![0.0; s];
    let mut sum = vec![vec![0.0; dim]; s];
    let mut sum_sq = vec![vec![0.0; dim]; s];
    let mut total_frames = 0usize;
    for sample in samples {
        let frames = sample.num_frames();
        total_frames += frames;
        for (t, x) in sample.rows().enumerate() {
            let j = (t * s / frames).min(s - 1);
            count[j] += 1.0;
            for d in 0..dim {
                sum[j][d] += x[d];
                sum_sq[j][d] += x[d] * x[d];
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mix = cfg.mixtures_per_state;
    let emissions = (0..s)
        .map(|j| {
            let mean: Vec<f64> = (0..dim).map(|d| sum[j][d] / count[j]).collect();
            let var: Vec<f64> = (0..dim)
                .map(|d| (sum_sq[j][d] / count[j] - mean[d] * mean[d]).max(floor[d]))
                .collect();
            let components = (0..mix)
                .map(|m| {
                    let mean = if m == 0 {
                        mean.clone()
                    } else {
                        mean.iter()
                            .zip(&var)
                            .map(|(mu, v)| {
                                let z: f64 = StandardNormal.sample(&mut rng);
                                mu + 0.5 * v.sqrt() * z
                            })
                            .collect()
                    };
                    DiagGaussian { mean, var: var.clone() }
                })
                .collect();
            StateEmission { weights: vec![1.0 / mix as f64; mix], components }
        })
        .collect();

    let per_state = total_frames as f64 / (samples.len() * s) as f64;
    let stay = (1.0 - 1.0 / per_state).clamp(0.5, 0.99);
    let transitions = (0..s)
        .map(|i| {
            let mut row = vec![0.0; s];
            if i + 1 < s {
                row[i] = stay;
                row[i + 1] = 1.0 - stay;
            } else {
                row[i] = 1.0;
            }
            row
        })
        .collect();
    let mut initial = vec![0.0; s];
    initial[0] = 1.0;
    WordHmm { initial, transitions, emissions, feature_dim: dim }
}

fn accumulate(model: &WordHmm, samples: &[&FeatureMatrix]) -> Accumulator {
    let prepared = Prepared::new(model);
    let s = model.num_states();
    let m = model.emissions[0].components.len();
    let d = model.feature_dim;
    let mut acc = Accumulator::new(s, m, d);
    for sample in samples {
        let frames = sample.num_frames();
        let em = prepared.emissions(sample);
        let (alpha, ll) = prepared.forward(&em, frames);
        let beta = prepared.backward(&em, frames);
        acc.ll += ll;
        for (t, x) in sample.rows().enumerate() {
            for j in 0..s {
                let gamma = (alpha[t * s + j] + beta[t * s + j] - ll).exp();
                if gamma == 0.0 {
                    continue;
                }
                let b = em.b(t, j);
                for k in 0..m {
                    let g = gamma * (em.comp(t, j, k) - b).exp();
                    if g == 0.0 {
                        continue;
                    }
                    acc.occ[j][k] += g;
                    for (dd, &v) in x.iter().enumerate() {
                        acc.sum_x[j][k][dd] += g * v;
                        acc.sum_xx[j][k][dd] += g * v * v;
                    }
                }
            }
            if t + 1 < frames {
                for i in 0..s {
                    for j in 0..s {
                        let lt = prepared.log_trans[i][j];
                        if lt == f64::NEG_INFINITY {
                            continue;
                        }
                        acc.trans[i][j] +=
                            (alpha[t * s + i] + lt + em.b(t + 1, j) + beta[(t + 1) * s + j] - ll).exp();
                    }
                }
            }
        }
    }
    acc
}

fn reestimate(model: &WordHmm, acc: &Accumulator, floor: &[f64]) -> WordHmm {
    const MIN_OCCUPANCY: f64 = 1e-10;
    let mut next = model.clone();
    for (i, row) in acc.trans.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if total > MIN_OCCUPANCY {
            next.transitions[i] = row.iter().map(|v| v / total).collect();
        }
    }
    for (j, st) in next.emissions.iter_mut().enumerate() {
        let state_occ: f64 = acc.occ[j].iter().sum();
        if state_occ > MIN_OCCUPANCY {
            st.weights = acc.occ[j].iter().map(|o| o / state_occ).collect();
        }
        for (k, comp) in st.components.iter_mut().enumerate() {
            let occ = acc.occ[j][k];
            if occ <= MIN_OCCUPANCY {
                continue;
            }
            for d in 0..comp.mean.len() {
                let mean = acc.sum_x[j][k][d] / occ;
                comp.mean[d] = mean;
                comp.var[d] = (acc.sum_xx[j][k][d] / occ - mean * mean).max(floor[d]);
            }
        }
    }
    next
}

/// Trains a word model and reports the training log-likelihood trace.
pub fn train_with_trace(samples: &[FeatureMatrix], cfg: &HmmConfig) -> Result<Training, HmmError> {
    train_on(&samples.iter().collect::<Vec<_>>(), cfg)
}

/// Like [`train_with_trace`], for callers holding borrowed samples.
pub fn train_on(samples: &[&FeatureMatrix], cfg: &HmmConfig) -> Result<Training, HmmError> {
    let dim = validate_training_set(samples, cfg)?;
    let floor = variance_floor(samples, dim, cfg.variance_floor_factor);
    let total_frames: usize = samples.iter().map(|s| s.num_frames()).sum();

    let mut model = segment_init(samples, cfg, dim, &floor);
    let mut log_likelihoods = Vec::with_capacity(cfg.max_iters + 1);
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let acc = accumulate(&model, samples);
        if let Some(&prev) = log_likelihoods.last() {
            if (acc.ll - prev) / (total_frames as f64) < cfg.ll_tolerance {
                log_likelihoods.push(acc.ll);
                converged = true;
                break;
            }
        }
        log_likelihoods.push(acc.ll);
        model = reestimate(&model, &acc, &floor);
    }
    if !converged {
        let prepared = Prepared::new(&model);
        let ll = samples
            .iter()
            .map(|s| prepared.forward(&prepared.emissions(s), s.num_frames()).1)
            .sum();
        log_likelihoods.push(ll);
    }
    Ok(Training { model, log_likelihoods, converged })
}

pub fn train(samples: &[FeatureMatrix], cfg: &HmmConfig) -> Result<WordHmm, HmmError> {
    train_with_trace(samples, cfg).map(|t| t.model)
}
