//! Frequency-warping functions on `[0, F_N]`.
//!
//! Every warp is stored in a normalized form `w: [0, 1] -> [0, 1]` with
//! `w(0) = 0` and `w(1) = 1`; physical evaluation scales by the Nyquist
//! frequency. The adaptive scale is a monotone piecewise cubic Hermite
//! interpolant (Fritsch-Carlson slopes) through `(0, 0)`, a single interior
//! knot and `(F_N, F_N)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Knots closer than this fraction of `F_N` to the square boundary are rejected.
pub const KNOT_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScalesError {
    #[error("sample rate must be positive and finite, got {0}")]
    InvalidSampleRate(f64),
    #[error("frequency {freq} Hz outside [0, {nyquist}] Hz")]
    OutOfDomain { freq: f64, nyquist: f64 },
    #[error("interpolation knot ({x}, {y}) Hz is not strictly inside (0, {nyquist})^2")]
    InvalidKnot { x: f64, y: f64, nyquist: f64 },
    #[error("mu-law parameter must be positive and finite, got {0}")]
    InvalidMu(f64),
}

/// Sampling configuration shared by every stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAudioConfig", into = "RawAudioConfig")]
pub struct AudioConfig {
    sample_rate_hz: f64,
    nyquist_hz: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAudioConfig {
    sample_rate_hz: f64,
}

impl TryFrom<RawAudioConfig> for AudioConfig {
    type Error = ScalesError;

    fn try_from(raw: RawAudioConfig) -> Result<Self, Self::Error> {
        AudioConfig::new(raw.sample_rate_hz)
    }
}

impl From<AudioConfig> for RawAudioConfig {
    fn from(cfg: AudioConfig) -> Self {
        RawAudioConfig { sample_rate_hz: cfg.sample_rate_hz }
    }
}

impl Default for AudioConfig {
    fn default() -> Self {
        AudioConfig { sample_rate_hz: 44_100.0, nyquist_hz: 22_050.0 }
    }
}

impl AudioConfig {
    pub fn new(sample_rate_hz: f64) -> Result<Self, ScalesError> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(ScalesError::InvalidSampleRate(sample_rate_hz));
        }
        Ok(AudioConfig { sample_rate_hz, nyquist_hz: sample_rate_hz / 2.0 })
    }

    /// A config whose Nyquist frequency is exactly 1.
    pub fn unit() -> Self {
        AudioConfig { sample_rate_hz: 2.0, nyquist_hz: 1.0 }
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn nyquist_hz(&self) -> f64 {
        self.nyquist_hz
    }
}

/// A point `(x, y)` of the bi-frequency plane, both coordinates in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpolationPoint {
    /// Physical-axis frequency.
    pub x: f64,
    /// Warped-axis frequency.
    pub y: f64,
}

impl InterpolationPoint {
    pub fn new(x: f64, y: f64) -> Self {
        InterpolationPoint { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WarpKind {
    Linear,
    MelHtk,
    MelSlaney,
    MuLaw { mu: f64 },
    Pchp { point: InterpolationPoint },
}

/// HTK mel: `2595 log10(1 + f/700)`.
pub fn mel_htk(f_hz: f64) -> f64 {
    2595.0 * (f_hz / 700.0).ln_1p() / std::f64::consts::LN_10
}

/// Slaney (Auditory Toolbox) mel: linear below 1 kHz, logarithmic above.
pub fn mel_slaney(f_hz: f64) -> f64 {
    const BREAK_HZ: f64 = 1000.0;
    if f_hz < BREAK_HZ {
        3.0 * f_hz / 200.0
    } else {
        15.0 + 27.0 * (f_hz / BREAK_HZ).ln() / 6.4f64.ln()
    }
}

/// Monotone cubic Hermite interpolant with Fritsch-Carlson slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    /// `xs` must be strictly increasing and `ys` non-decreasing, with at
    /// least two knots. Callers in this module validate that beforehand.
    fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        debug_assert!(xs.len() >= 2 && xs.len() == ys.len());
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();

        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes[0] = delta[0];
            slopes[1] = delta[0];
            return MonotoneCubic { xs, ys, slopes };
        }

        for i in 1..n - 1 {
            let (d0, d1) = (delta[i - 1], delta[i]);
            if d0 * d1 <= 0.0 {
                slopes[i] = 0.0;
            } else {
                // weighted harmonic mean
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                slopes[i] = (w1 + w2) / (w1 / d0 + w2 / d1);
            }
        }
        slopes[0] = end_slope(h[0], h[1], delta[0], delta[1]);
        slopes[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);

        MonotoneCubic { xs, ys, slopes }
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let seg = match self.xs[1..n - 1].iter().position(|&k| x < k) {
            Some(i) => i,
            None => n - 2,
        };
        let (x0, x1) = (self.xs[seg], self.xs[seg + 1]);
        let (y0, y1) = (self.ys[seg], self.ys[seg + 1]);
        let (m0, m1) = (self.slopes[seg], self.slopes[seg + 1]);
        let h = x1 - x0;
        let t = (x - x0) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }
}

/// Three-point one-sided endpoint slope, clamped to preserve shape.
fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Curve {
    Linear,
    Htk { denom: f64, nyquist: f64 },
    Slaney { denom: f64, nyquist: f64 },
    MuLaw { mu: f64, denom: f64 },
    Pchp(MonotoneCubic),
}

/// A strictly increasing map of `[0, F_N]` onto itself.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpFunction {
    kind: WarpKind,
    audio: AudioConfig,
    curve: Curve,
}

impl WarpFunction {
    pub fn linear(audio: AudioConfig) -> Self {
        WarpFunction { kind: WarpKind::Linear, audio, curve: Curve::Linear }
    }

    pub fn mel_htk(audio: AudioConfig) -> Self {
        let nyquist = audio.nyquist_hz();
        WarpFunction {
            kind: WarpKind::MelHtk,
            audio,
            curve: Curve::Htk { denom: mel_htk(nyquist), nyquist },
        }
    }

    pub fn mel_slaney(audio: AudioConfig) -> Self {
        let nyquist = audio.nyquist_hz();
        WarpFunction {
            kind: WarpKind::MelSlaney,
            audio,
            curve: Curve::Slaney { denom: mel_slaney(nyquist), nyquist },
        }
    }

    pub fn mu_law(mu: f64, audio: AudioConfig) -> Result<Self, ScalesError> {
        if !(mu.is_finite() && mu > 0.0) {
            return Err(ScalesError::InvalidMu(mu));
        }
        Ok(WarpFunction {
            kind: WarpKind::MuLaw { mu },
            audio,
            curve: Curve::MuLaw { mu, denom: mu.ln_1p() },
        })
    }

    /// Builds the single-knot PCHP warp through `(0,0)`, `point`, `(F_N,F_N)`.
    pub fn pchp(point: InterpolationPoint, audio: AudioConfig) -> Result<Self, ScalesError> {
        let nyquist = audio.nyquist_hz();
        let margin = KNOT_MARGIN * nyquist;
        let inside = |v: f64| v.is_finite() && v > margin && v < nyquist - margin;
        if !(inside(point.x) && inside(point.y)) {
            return Err(ScalesError::InvalidKnot { x: point.x, y: point.y, nyquist });
        }
        let (u, v) = (point.x / nyquist, point.y / nyquist);
        let cubic = MonotoneCubic::new(vec![0.0, u, 1.0], vec![0.0, v, 1.0]);
        Ok(WarpFunction { kind: WarpKind::Pchp { point }, audio, curve: Curve::Pchp(cubic) })
    }

    pub fn from_kind(kind: WarpKind, audio: AudioConfig) -> Result<Self, ScalesError> {
        match kind {
            WarpKind::Linear => Ok(Self::linear(audio)),
            WarpKind::MelHtk => Ok(Self::mel_htk(audio)),
            WarpKind::MelSlaney => Ok(Self::mel_slaney(audio)),
            WarpKind::MuLaw { mu } => Self::mu_law(mu, audio),
            WarpKind::Pchp { point } => Self::pchp(point, audio),
        }
    }

    pub fn kind(&self) -> WarpKind {
        self.kind
    }

    pub fn audio(&self) -> AudioConfig {
        self.audio
    }

    /// Warped frequency in Hz for a physical frequency `f_hz` in `[0, F_N]`.
    pub fn evaluate(&self, f_hz: f64) -> Result<f64, ScalesError> {
        let nyquist = self.audio.nyquist_hz();
        if !(0.0..=nyquist).contains(&f_hz) {
            return Err(ScalesError::OutOfDomain { freq: f_hz, nyquist });
        }
        Ok(nyquist * self.eval_unit(f_hz / nyquist))
    }

    /// Normalized warp `w(u)` for `u` in `[0, 1]`.
    pub fn evaluate_normalized(&self, u: f64) -> Result<f64, ScalesError> {
        if !(0.0..=1.0).contains(&u) {
            return Err(ScalesError::OutOfDomain { freq: u, nyquist: 1.0 });
        }
        Ok(self.eval_unit(u))
    }

    /// Unchecked normalized evaluation; `u` must lie in `[0, 1]`.
    pub(crate) fn eval_unit(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        match &self.curve {
            Curve::Linear => u,
            Curve::Htk { denom, nyquist } => mel_htk(u * nyquist) / denom,
            Curve::Slaney { denom, nyquist } => mel_slaney(u * nyquist) / denom,
            Curve::MuLaw { mu, denom } => (mu * u).ln_1p() / denom,
            Curve::Pchp(cubic) => cubic.eval(u),
        }
    }

    /// Samples the curve on a uniform grid of `points` physical frequencies.
    pub fn curve(&self, points: usize) -> Vec<(f64, f64)> {
        let nyquist = self.audio.nyquist_hz();
        let last = points.saturating_sub(1).max(1) as f64;
        (0..points)
            .map(|i| {
                let u = i as f64 / last;
                (u * nyquist, nyquist * self.eval_unit(u))
            })
            .collect()
    }

    /// Writes `physical_hz,warped_hz` rows over a uniform grid.
    pub fn write_curve_csv<W: std::io::Write>(&self, out: W, points: usize) -> csv::Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(["physical_hz", "warped_hz"])?;
        for (f, w) in self.curve(points) {
            writer.write_record([f.to_string(), w.to_string()])?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Intersection of the mu-law curve with the anti-diagonal `x + y = F_N`.
pub fn mu_law_center(mu: f64, audio: AudioConfig) -> Result<InterpolationPoint, ScalesError> {
    let warp = WarpFunction::mu_law(mu, audio)?;
    // h(u) = w(u) - (1 - u) is strictly increasing with h(0) = -1, h(1) = 1.
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if warp.eval_unit(mid) - (1.0 - mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let u = 0.5 * (lo + hi);
    let nyquist = audio.nyquist_hz();
    let x = u * nyquist;
    Ok(InterpolationPoint { x, y: nyquist - x })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cd() -> AudioConfig {
        AudioConfig::new(44_100.0).unwrap()
    }

    #[test]
    fn linear_is_identity() {
        let w = WarpFunction::linear(cd());
        assert_eq!(w.evaluate(5000.0).unwrap(), 5000.0);
    }

    #[test]
    fn htk_mel_at_one_khz() {
        assert!((mel_htk(1000.0) - 1000.0).abs() < 0.05);
        let w = WarpFunction::mel_htk(cd());
        let got = w.evaluate(1000.0).unwrap();
        // 22050 * mel(1000) / mel(22050), evaluated at 30 digits
        assert!((got - 5620.133_902_773_5).abs() < 1e-6, "{got}");
    }

    #[test]
    fn slaney_mel_is_continuous_at_break() {
        let below = mel_slaney(1000.0 - 1e-9);
        let above = mel_slaney(1000.0);
        assert!((below - above).abs() < 1e-6);
        assert!((above - 15.0).abs() < 1e-12);
    }

    #[test]
    fn mu_law_midpoint() {
        let w = WarpFunction::mu_law(8.0, cd()).unwrap();
        let got = w.evaluate(0.5 * 22_050.0).unwrap() / 22_050.0;
        // ln(5)/ln(9)
        assert!((got - 0.732_486_760_358_963_6).abs() < 1e-12, "{got}");
    }

    #[test]
    fn out_of_domain_is_rejected() {
        let w = WarpFunction::linear(cd());
        assert!(matches!(w.evaluate(-1.0), Err(ScalesError::OutOfDomain { .. })));
        assert!(matches!(w.evaluate(22_050.5), Err(ScalesError::OutOfDomain { .. })));
        assert!(w.evaluate(f64::NAN).is_err());
    }

    #[test]
    fn pchp_rejects_boundary_knots() {
        for (x, y) in [(0.0, 100.0), (100.0, 22_050.0), (22_050.0 * (1.0 - 1e-7), 5.0), (-3.0, 4.0)] {
            let err = WarpFunction::pchp(InterpolationPoint::new(x, y), cd()).unwrap_err();
            assert!(matches!(err, ScalesError::InvalidKnot { .. }));
        }
    }

    #[test]
    fn pchp_passes_through_knot() {
        let w = WarpFunction::pchp(InterpolationPoint::new(8200.0, 13_850.0), cd()).unwrap();
        assert!((w.evaluate(8200.0).unwrap() - 13_850.0).abs() < 1e-9 * 22_050.0);
        assert_eq!(w.evaluate(0.0).unwrap(), 0.0);
        assert_eq!(w.evaluate(22_050.0).unwrap(), 22_050.0);
    }

    #[test]
    fn pchp_concave_knot_dominates_diagonal() {
        let w = WarpFunction::pchp(InterpolationPoint::new(8200.0, 13_850.0), cd()).unwrap();
        for i in 1..1000 {
            let f = 22_050.0 * i as f64 / 1000.0;
            assert!(w.evaluate(f).unwrap() > f, "at {f}");
        }
    }

    #[test]
    fn pchp_corner_knot_stays_monotone() {
        let w = WarpFunction::pchp(InterpolationPoint::new(100.0, 21_950.0), cd()).unwrap();
        let mut prev = -1.0;
        for i in 0..=10_000 {
            let v = w.evaluate(22_050.0 * i as f64 / 10_000.0).unwrap();
            assert!(v > prev, "not increasing at {i}");
            prev = v;
        }
    }

    #[test]
    fn mu_law_center_for_mu_8() {
        let p = mu_law_center(8.0, cd()).unwrap();
        assert!((p.x / 22_050.0 - 0.3719).abs() < 1e-4, "{p:?}");
        assert!((p.y / 22_050.0 - 0.6281).abs() < 1e-4, "{p:?}");
        let unit = mu_law_center(8.0, AudioConfig::unit()).unwrap();
        assert!((unit.x - p.x / 22_050.0).abs() < 1e-12);
    }

    #[test]
    fn mu_law_center_small_mu_is_midpoint() {
        let p = mu_law_center(1e-9, cd()).unwrap();
        assert!((p.x - 11_025.0).abs() < 1e-3);
        assert!((p.y - 11_025.0).abs() < 1e-3);
    }

    #[test]
    fn audio_config_serde_round_trip() {
        let cfg: AudioConfig = serde_json::from_str(r#"{"sample_rate_hz": 16000}"#).unwrap();
        assert_eq!(cfg.nyquist_hz(), 8000.0);
        assert!(serde_json::from_str::<AudioConfig>(r#"{"sample_rate_hz": -1}"#).is_err());
        assert!(serde_json::from_str::<AudioConfig>(r#"{"sample_rate_hz": 1, "x": 2}"#).is_err());
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(text, r#"{"sample_rate_hz":16000.0}"#);
    }

    #[test]
    fn curve_csv_has_header_and_endpoints() {
        let w = WarpFunction::mel_htk(cd());
        let mut buf = Vec::new();
        w.write_curve_csv(&mut buf, 5).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "physical_hz,warped_hz");
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[5], "22050,22050");
    }
}
