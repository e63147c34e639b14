//! Shrinking-circle search for the warp knot.
//!
//! The search runs in the bi-frequency square normalized to `[0, pi]^2`.
//! Each iteration evaluates `M` candidates laid out on concentric rings
//! around the current centre. When the iteration beats every earlier one the
//! centre moves to the winner and the radius becomes
//! `max(R1 / 2^n, |move|)`; otherwise the same candidates are evaluated again
//! and a stall counter grows. The search stops after `K` consecutive stalls.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scales::{mu_law_center, AudioConfig, InterpolationPoint, ScalesError};

/// Margin, in plane units, that clamped candidates keep from the boundary.
pub const BOUNDARY_MARGIN: f64 = 1e-3 * PI;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("every candidate failed in iteration {iteration}; first error: {first}")]
    AllCandidatesFailed { iteration: usize, first: String },
    #[error("search already terminated")]
    Terminated,
    #[error(transparent)]
    Scales(#[from] ScalesError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Maps an interpolation point to a classification rate.
pub trait Objective: Sync {
    fn evaluate(&self, point: InterpolationPoint) -> Result<f64, String>;
}

impl<F> Objective for F
where
    F: Fn(InterpolationPoint) -> Result<f64, String> + Sync,
{
    fn evaluate(&self, point: InterpolationPoint) -> Result<f64, String> {
        self(point)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Candidates per iteration (`M`).
    pub candidates: usize,
    /// Consecutive stalls that end the search (`K`).
    pub stall_limit: usize,
    /// First search radius in plane units.
    pub initial_radius: f64,
    pub max_iterations: usize,
    /// Mu-law parameter whose anti-diagonal crossing is the starting point.
    pub mu_init: f64,
    /// Concentric rings the candidates are spread over.
    pub rings: usize,
    /// Seeds per-candidate objective evaluations; derived from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            candidates: 24,
            stall_limit: 3,
            initial_radius: PI / 2.0,
            max_iterations: 25,
            mu_init: 8.0,
            rings: 6,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConfig(m.to_string()));
        if self.candidates < 4 {
            return bad("need at least 4 candidates");
        }
        if self.stall_limit < 1 {
            return bad("stall limit must be at least 1");
        }
        if !(self.initial_radius > 0.0 && self.initial_radius.is_finite()) {
            return bad("initial radius must be positive");
        }
        if self.max_iterations < 1 || self.rings < 1 {
            return bad("iterations and rings must be positive");
        }
        Ok(())
    }
}

/// A point of the normalized plane `[0, pi]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanePoint {
    pub x: f64,
    pub y: f64,
}

impl PlanePoint {
    pub fn new(x: f64, y: f64) -> Self {
        PlanePoint { x, y }
    }

    pub fn distance(&self, other: &PlanePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn from_hz(p: InterpolationPoint, audio: &AudioConfig) -> Self {
        let s = PI / audio.nyquist_hz();
        PlanePoint { x: p.x * s, y: p.y * s }
    }

    pub fn to_hz(self, audio: &AudioConfig) -> InterpolationPoint {
        let s = audio.nyquist_hz() / PI;
        InterpolationPoint { x: self.x * s, y: self.y * s }
    }
}

/// Pulls `p` toward `center` along their ray until it lies at least
/// [`BOUNDARY_MARGIN`] inside the square. `center` must already satisfy that.
pub fn clamp_toward(center: PlanePoint, p: PlanePoint) -> PlanePoint {
    let (lo, hi) = (BOUNDARY_MARGIN, PI - BOUNDARY_MARGIN);
    let (dx, dy) = (p.x - center.x, p.y - center.y);
    let limit = |c: f64, d: f64| {
        if d > 0.0 {
            (hi - c) / d
        } else if d < 0.0 {
            (lo - c) / d
        } else {
            f64::INFINITY
        }
    };
    let t = 1.0f64.min(limit(center.x, dx)).min(limit(center.y, dy)).max(0.0);
    if t >= 1.0 {
        p
    } else {
        PlanePoint { x: center.x + t * dx, y: center.y + t * dy }
    }
}

/// Candidates on `rings` concentric circles at radii `R/rings, 2R/rings, ..., R`,
/// each ring rotated by half its angular spacing relative to the previous one.
pub fn candidate_layout(center: PlanePoint, radius: f64, count: usize, rings: usize) -> Vec<PlanePoint> {
    let rings = rings.min(count).max(1);
    let base = count / rings;
    let extra = count % rings;
    let mut out = Vec::with_capacity(count);
    for r in 0..rings {
        // outer rings absorb the remainder
        let n = base + usize::from(r >= rings - extra);
        let ring_radius = radius * (r + 1) as f64 / rings as f64;
        let offset = r as f64 * PI / n as f64;
        for k in 0..n {
            let angle = 2.0 * PI * k as f64 / n as f64 + offset;
            let p = PlanePoint {
                x: center.x + ring_radius * angle.cos(),
                y: center.y + ring_radius * angle.sin(),
            };
            out.push(clamp_toward(center, p));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub point: PlanePoint,
    pub rate: f64,
    pub iteration: usize,
}

/// Everything evaluated in one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub center: PlanePoint,
    pub radius: f64,
    pub candidates: Vec<PlanePoint>,
    /// `-inf` marks a candidate whose evaluation failed.
    pub rates: Vec<f64>,
    pub errors: Vec<Option<String>>,
    pub improved: bool,
    /// Stall counter after this iteration.
    pub stall_counter: usize,
    pub best_rate: f64,
}

#[derive(Debug, Clone)]
pub struct SearchState {
    cfg: SearchConfig,
    audio: AudioConfig,
    iteration: usize,
    center: PlanePoint,
    radius: f64,
    candidates: Vec<PlanePoint>,
    best: Option<BestRecord>,
    stall_counter: usize,
    trace: Vec<IterationRecord>,
}

/// Index of the best rate; ties go to the candidate nearest `center`, then
/// to the lowest index.
fn pick_best(center: PlanePoint, candidates: &[PlanePoint], rates: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..rates.len() {
        let better = rates[i] > rates[best]
            || rates[i] == rates[best] && candidates[i].distance(&center) < candidates[best].distance(&center);
        if better {
            best = i;
        }
    }
    best
}

impl SearchState {
    pub fn initialize(cfg: &SearchConfig, audio: &AudioConfig) -> Result<Self, SearchError> {
        cfg.validate()?;
        let center = PlanePoint::from_hz(mu_law_center(cfg.mu_init, *audio)?, audio);
        let center = clamp_toward(PlanePoint::new(PI / 2.0, PI / 2.0), center);
        let radius = cfg.initial_radius;
        Ok(SearchState {
            candidates: candidate_layout(center, radius, cfg.candidates, cfg.rings),
            cfg: cfg.clone(),
            audio: *audio,
            iteration: 1,
            center,
            radius,
            best: None,
            stall_counter: 0,
            trace: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn center(&self) -> PlanePoint {
        self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn candidates(&self) -> &[PlanePoint] {
        &self.candidates
    }

    pub fn best(&self) -> Option<BestRecord> {
        self.best
    }

    pub fn stall_counter(&self) -> usize {
        self.stall_counter
    }

    pub fn trace(&self) -> &[IterationRecord] {
        &self.trace
    }

    pub fn is_terminated(&self) -> bool {
        self.stall_counter >= self.cfg.stall_limit
    }

    /// Evaluates the current candidates and updates centre, radius and the
    /// stall counter.
    pub fn step(&mut self, objective: &dyn Objective) -> Result<(), SearchError> {
        if self.is_terminated() {
            return Err(SearchError::Terminated);
        }
        let audio = self.audio;
        let outcomes: Vec<Result<f64, String>> = self
            .candidates
            .par_iter()
            .map(|p| match objective.evaluate(p.to_hz(&audio)) {
                Ok(r) if r.is_finite() => Ok(r),
                Ok(r) => Err(format!("non-finite rate {r}")),
                Err(e) => Err(e),
            })
            .collect();
        let rates: Vec<f64> = outcomes.iter().map(|o| *o.as_ref().unwrap_or(&f64::NEG_INFINITY)).collect();
        let errors: Vec<Option<String>> = outcomes.into_iter().map(Result::err).collect();
        if rates.iter().all(|r| *r == f64::NEG_INFINITY) {
            return Err(SearchError::AllCandidatesFailed {
                iteration: self.iteration,
                first: errors.iter().flatten().next().cloned().unwrap_or_default(),
            });
        }

        let winner = pick_best(self.center, &self.candidates, &rates);
        let improved = self.best.map_or(true, |b| rates[winner] > b.rate);
        let record_center = self.center;
        let record_radius = self.radius;
        let record_candidates = self.candidates.clone();
        if improved {
            let next = self.candidates[winner];
            self.best = Some(BestRecord { point: next, rate: rates[winner], iteration: self.iteration });
            let moved = next.distance(&self.center);
            let schedule = self.cfg.initial_radius / 2f64.powi(self.iteration as i32);
            self.radius = schedule.max(moved);
            self.center = next;
            self.stall_counter = 0;
            self.candidates = candidate_layout(self.center, self.radius, self.cfg.candidates, self.cfg.rings);
        } else {
            self.stall_counter += 1;
        }
        self.trace.push(IterationRecord {
            iteration: self.iteration,
            center: record_center,
            radius: record_radius,
            candidates: record_candidates,
            rates,
            errors,
            improved,
            stall_counter: self.stall_counter,
            best_rate: self.best.expect("set on first success").rate,
        });
        tracing::debug!(
            iteration = self.iteration,
            best = self.best.map(|b| b.rate),
            radius = self.radius,
            stalls = self.stall_counter,
            "search step"
        );
        self.iteration += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best_point: InterpolationPoint,
    pub best_plane_point: PlanePoint,
    pub best_rate: f64,
    pub best_iteration: usize,
    pub trace: Vec<IterationRecord>,
    /// The iteration cap was hit before the stall limit.
    pub truncated: bool,
}

impl SearchOutcome {
    /// One row per evaluated candidate.
    pub fn write_trace_csv<W: Write>(&self, out: W, audio: &AudioConfig) -> Result<(), SearchError> {
        write_trace_csv(&self.trace, audio, out)
    }
}

pub fn write_trace_csv<W: Write>(
    trace: &[IterationRecord],
    audio: &AudioConfig,
    out: W,
) -> Result<(), SearchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iteration",
        "candidate",
        "x_hz",
        "y_hz",
        "rate",
        "center_x_hz",
        "center_y_hz",
        "radius",
        "stall_counter",
        "best_rate",
    ])?;
    for rec in trace {
        let c = rec.center.to_hz(audio);
        for (i, (p, r)) in rec.candidates.iter().zip(&rec.rates).enumerate() {
            let hz = p.to_hz(audio);
            w.write_record([
                rec.iteration.to_string(),
                i.to_string(),
                hz.x.to_string(),
                hz.y.to_string(),
                r.to_string(),
                c.x.to_string(),
                c.y.to_string(),
                rec.radius.to_string(),
                rec.stall_counter.to_string(),
                rec.best_rate.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs the search to termination or the iteration cap.
pub fn optimize(
    objective: &dyn Objective,
    cfg: &SearchConfig,
    audio: &AudioConfig,
) -> Result<SearchOutcome, SearchError> {
    let mut state = SearchState::initialize(cfg, audio)?;
    while !state.is_terminated() && state.iteration() <= cfg.max_iterations {
        state.step(objective)?;
    }
    let best = state.best.expect("at least one iteration ran");
    Ok(SearchOutcome {
        best_point: best.point.to_hz(audio),
        best_plane_point: best.point,
        best_rate: best.rate,
        best_iteration: best.iteration,
        truncated: !state.is_terminated(),
        trace: state.trace,
    })
}
