#![allow(dead_code)]

use std::f64::consts::PI;

use afcc::features::FeatureMatrix;
use afcc::hmm::{DiagGaussian, StateEmission, WordHmm};
use afcc::scales::InterpolationPoint;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub fn random_hmm(rng: &mut impl Rng, states: usize, mixtures: usize, dim: usize) -> WordHmm {
    let mut initial = vec![0.0; states];
    initial[0] = 1.0;
    let transitions = (0..states)
        .map(|i| {
            let mut row = vec![0.0; states];
            if i + 1 < states {
                let stay = rng.random_range(0.05..0.95);
                row[i] = stay;
                row[i + 1] = 1.0 - stay;
            } else {
                row[i] = 1.0;
            }
            row
        })
        .collect();
    let emissions = (0..states)
        .map(|_| {
            let raw: Vec<f64> = (0..mixtures).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            StateEmission {
                weights: raw.iter().map(|w| w / total).collect(),
                components: (0..mixtures)
                    .map(|_| DiagGaussian {
                        mean: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                        var: (0..dim).map(|_| rng.random_range(0.2..3.0)).collect(),
                    })
                    .collect(),
            }
        })
        .collect();
    WordHmm::new(initial, transitions, emissions).expect("valid random model")
}

pub fn random_features(rng: &mut impl Rng, frames: usize, dim: usize) -> FeatureMatrix {
    let rows: Vec<Vec<f64>> = (0..frames).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    FeatureMatrix::from_rows(&rows).unwrap()
}

fn log_mixture_density(st: &StateEmission, x: &[f64]) -> f64 {
    let mut total = 0.0f64;
    let mut terms = Vec::new();
    for (w, c) in st.weights.iter().zip(&st.components) {
        let mut lp = w.ln();
        for ((xi, m), v) in x.iter().zip(&c.mean).zip(&c.var) {
            lp += -0.5 * ((2.0 * PI * v).ln() + (xi - m) * (xi - m) / v);
        }
        terms.push(lp);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for t in &terms {
        total += (t - max).exp();
    }
    max + total.ln()
}

/// Log-likelihood by enumerating every state sequence.
pub fn brute_force_loglik(model: &WordHmm, x: &FeatureMatrix) -> f64 {
    let s = model.num_states();
    let t = x.num_frames();
    let emit: Vec<Vec<f64>> = (0..t).map(|k| (0..s).map(|j| log_mixture_density(&model.emissions()[j], x.row(k))).collect()).collect();
    let mut path_logs = Vec::new();
    let mut path = vec![0usize; t];
    loop {
        let mut lp = model.initial()[path[0]].ln() + emit[0][path[0]];
        for k in 1..t {
            lp += model.transitions()[path[k - 1]][path[k]].ln() + emit[k][path[k]];
        }
        if lp.is_finite() {
            path_logs.push(lp);
        }
        let mut k = t;
        loop {
            if k == 0 {
                let max = path_logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                return max + path_logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            }
            k -= 1;
            path[k] += 1;
            if path[k] < s {
                break;
            }
            path[k] = 0;
        }
    }
}

/// Draws `frames` observations from a model with one component per state.
pub fn sample_hmm(model: &WordHmm, frames: usize, rng: &mut impl Rng) -> FeatureMatrix {
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut state = 0;
    let mut rows = Vec::with_capacity(frames);
    for _ in 0..frames {
        let c = &model.emissions()[state].components[0];
        rows.push(c.mean.iter().zip(&c.var).map(|(m, v)| m + v.sqrt() * n.sample(rng)).collect());
        let stay = model.transitions()[state][state];
        if state + 1 < model.num_states() && rng.random::<f64>() >= stay {
            state += 1;
        }
    }
    FeatureMatrix::from_rows(&rows).unwrap()
}

pub const BUMP_PEAK: (f64, f64) = (0.3 * PI, 0.7 * PI);

/// `0.5 + 0.45 exp(-|p - (0.3, 0.7) pi|^2 / 0.02)` in plane units.
pub fn bump_rate(px: f64, py: f64) -> f64 {
    let d2 = (px - BUMP_PEAK.0).powi(2) + (py - BUMP_PEAK.1).powi(2);
    0.5 + 0.45 * (-d2 / 0.02).exp()
}

pub fn bump_objective(nyquist: f64) -> impl Fn(InterpolationPoint) -> Result<f64, String> + Sync {
    move |p: InterpolationPoint| Ok(bump_rate(p.x / nyquist * PI, p.y / nyquist * PI))
}

/// Best point and value of the bump on an `n x n` grid of the open square.
pub fn grid_oracle(n: usize) -> ((f64, f64), f64) {
    let mut best = ((0.0, 0.0), f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..n {
            let x = (i as f64 + 0.5) / n as f64 * PI;
            let y = (j as f64 + 0.5) / n as f64 * PI;
            let r = bump_rate(x, y);
            if r > best.1 {
                best = ((x, y), r);
            }
        }
    }
    best
}
