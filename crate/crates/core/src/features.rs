//! Cepstral front end over a warped triangular filterbank.
//!
//! The pipeline per frame is pre-emphasis, Hamming window, power spectrum,
//! filterbank energies, log, orthonormal DCT-II. Coefficients `c1..c12` are
//! kept and the natural-log frame energy is appended as the 13th column.

use std::io::{Read, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scales::{AudioConfig, WarpFunction};

/// Cepstra kept per frame, excluding the energy term.
pub const NUM_CEPSTRA: usize = 12;
/// Columns of a feature vector: `c1..c12` plus log-energy.
pub const FEATURE_DIM: usize = NUM_CEPSTRA + 1;
/// Floor applied to filterbank and frame energies before the log.
pub const LOG_FLOOR: f64 = 1e-10;

const FEATURE_MAGIC: &[u8; 4] = b"AFCF";
const FEATURE_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("signal has {samples} samples, shorter than one frame of {frame} samples")]
    TooShort { samples: usize, frame: usize },
    #[error("invalid frame config: {0}")]
    InvalidFrameConfig(String),
    #[error("invalid filterbank config: {0}")]
    InvalidFilterbankConfig(String),
    #[error("degenerate filter {filter}: edges {lower_hz:.3} Hz and {upper_hz:.3} Hz fall in FFT bin {bin}")]
    DegenerateFilter { filter: usize, lower_hz: f64, upper_hz: f64, bin: usize },
    #[error("feature matrix shape error: {0}")]
    Shape(String),
    #[error("malformed feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hamming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameConfig {
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    pub preemphasis: f64,
    pub window: Window,
    /// Power of two no smaller than the frame length; `None` picks the smallest.
    pub fft_size: Option<usize>,
}

impl Default for FrameConfig {
    fn default() -> Self {
        FrameConfig {
            frame_len_ms: 25.0,
            hop_ms: 10.0,
            preemphasis: 0.97,
            window: Window::Hamming,
            fft_size: None,
        }
    }
}

fn ms_to_samples(ms: f64, sample_rate: f64) -> usize {
    // tolerate representation error in products like 10 ms * 44.1 kHz
    (ms * sample_rate / 1000.0 + 1e-9).floor() as usize
}

/// Frame geometry resolved against a sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLayout {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl FrameLayout {
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `floor((n - frame_len) / hop) + 1`, or zero when `n < frame_len`.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.frame_len {
            0
        } else {
            (num_samples - self.frame_len) / self.hop + 1
        }
    }
}

impl FrameConfig {
    pub fn layout(&self, audio: &AudioConfig) -> Result<FrameLayout, FeatureError> {
        let bad = |msg: String| Err(FeatureError::InvalidFrameConfig(msg));
        if !(self.frame_len_ms > 0.0 && self.hop_ms > 0.0) {
            return bad("frame and hop lengths must be positive".into());
        }
        if self.hop_ms > self.frame_len_ms {
            return bad(format!("hop {} ms exceeds frame {} ms", self.hop_ms, self.frame_len_ms));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return bad(format!("pre-emphasis {} not in [0, 1)", self.preemphasis));
        }
        let frame_len = ms_to_samples(self.frame_len_ms, audio.sample_rate_hz());
        let hop = ms_to_samples(self.hop_ms, audio.sample_rate_hz());
        if frame_len < 2 || hop == 0 {
            return bad("frame shorter than two samples".into());
        }
        let fft_size = match self.fft_size {
            None => frame_len.next_power_of_two(),
            Some(n) if n.is_power_of_two() && n >= frame_len => n,
            Some(n) => return bad(format!("fft size {n} is not a power of two >= {frame_len}")),
        };
        Ok(FrameLayout { frame_len, hop, fft_size })
    }

    /// Short stable hash of the serialized config, stored in binary feature files.
    pub fn config_hash(&self) -> u64 {
        hash_json(self)
    }
}

pub(crate) fn hash_json<T: Serialize>(value: &T) -> u64 {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Power spectra and log energies for every frame of one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    layout: FrameLayout,
    sample_rate_hz: f64,
    power: Vec<f64>,
    log_energy: Vec<f64>,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.log_energy.len()
    }

    pub fn num_bins(&self) -> usize {
        self.layout.num_bins()
    }

    pub fn layout(&self) -> FrameLayout {
        self.layout
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let nb = self.num_bins();
        &self.power[t * nb..(t + 1) * nb]
    }

    pub fn log_energy(&self) -> &[f64] {
        &self.log_energy
    }

    /// Frame centre times in seconds.
    pub fn frame_times(&self) -> Vec<f64> {
        let centre = self.layout.frame_len as f64 / 2.0;
        (0..self.num_frames())
            .map(|t| ((t * self.layout.hop) as f64 + centre) / self.sample_rate_hz)
            .collect()
    }
}

/// Reusable framing and FFT state for one `(AudioConfig, FrameConfig)` pair.
pub struct SpectrumAnalyzer {
    layout: FrameLayout,
    sample_rate_hz: f64,
    preemphasis: f64,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl SpectrumAnalyzer {
    pub fn new(audio: &AudioConfig, fc: &FrameConfig) -> Result<Self, FeatureError> {
        let layout = fc.layout(audio)?;
        let n = layout.frame_len;
        let window = match fc.window {
            Window::Hamming => (0..n)
                .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
                .collect(),
        };
        let fft = FftPlanner::new().plan_fft_forward(layout.fft_size);
        Ok(SpectrumAnalyzer {
            layout,
            sample_rate_hz: audio.sample_rate_hz(),
            preemphasis: fc.preemphasis,
            window,
            fft,
        })
    }

    pub fn layout(&self) -> FrameLayout {
        self.layout
    }

    pub fn analyze(&self, signal: &[f64]) -> Result<Spectrogram, FeatureError> {
        let layout = self.layout;
        let frames = layout.num_frames(signal.len());
        if frames == 0 {
            return Err(FeatureError::TooShort { samples: signal.len(), frame: layout.frame_len });
        }
        let nb = layout.num_bins();
        let mut power = Vec::with_capacity(frames * nb);
        let mut log_energy = Vec::with_capacity(frames);
        let mut buf = vec![Complex::new(0.0, 0.0); layout.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];

        for t in 0..frames {
            let frame = &signal[t * layout.hop..t * layout.hop + layout.frame_len];
            let mut energy = 0.0;
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < layout.frame_len {
                    // per-frame pre-emphasis; the first sample is differenced with itself
                    let prev = if i == 0 { frame[0] } else { frame[i - 1] };
                    (frame[i] - self.preemphasis * prev) * self.window[i]
                } else {
                    0.0
                };
                energy += v * v;
                *slot = Complex::new(v, 0.0);
            }
            log_energy.push(energy.max(LOG_FLOOR).ln());
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            power.extend(buf[..nb].iter().map(|c| c.norm_sqr()));
        }
        Ok(Spectrogram { layout, sample_rate_hz: self.sample_rate_hz, power, log_energy })
    }
}

/// Frames a signal and returns its power spectra and per-frame log energy.
pub fn frame_and_spectrum(
    signal: &[f64],
    audio: &AudioConfig,
    fc: &FrameConfig,
) -> Result<Spectrogram, FeatureError> {
    SpectrumAnalyzer::new(audio, fc)?.analyze(signal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Every triangle peaks at 1 (HTK convention).
    EqualHeight,
    /// Every triangle has unit area in Hz (Slaney convention).
    EqualArea,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterbankConfig {
    pub num_filters: usize,
    pub normalization: Normalization,
    pub warp: WarpFunction,
}

#[derive(Debug, Clone, PartialEq)]
struct FilterRow {
    start: usize,
    weights: Vec<f64>,
}

/// Triangular filters stored sparsely by their support.
#[derive(Debug, Clone, PartialEq)]
pub struct Filterbank {
    rows: Vec<FilterRow>,
    num_bins: usize,
    bin_hz: f64,
    edges_hz: Vec<f64>,
}

impl Filterbank {
    pub fn num_filters(&self) -> usize {
        self.rows.len()
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn bin_spacing_hz(&self) -> f64 {
        self.bin_hz
    }

    pub fn edge_freqs_hz(&self) -> &[f64] {
        &self.edges_hz
    }

    /// Row `j` expanded to all `fft_size/2 + 1` bins.
    pub fn dense_row(&self, j: usize) -> Vec<f64> {
        let row = &self.rows[j];
        let mut dense = vec![0.0; self.num_bins];
        dense[row.start..row.start + row.weights.len()].copy_from_slice(&row.weights);
        dense
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.num_bins);
        for (row, slot) in self.rows.iter().zip(out.iter_mut()) {
            *slot = row
                .weights
                .iter()
                .zip(&power[row.start..])
                .map(|(w, p)| w * p)
                .sum();
        }
    }
}

/// Physical frequency whose normalized warp equals `target`, by bisection to
/// machine precision.
fn invert_unit(warp: &WarpFunction, target: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    if target >= 1.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return mid;
        }
        if warp.eval_unit(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

pub fn build_filterbank(
    fbc: &FilterbankConfig,
    fc: &FrameConfig,
    audio: &AudioConfig,
) -> Result<Filterbank, FeatureError> {
    let layout = fc.layout(audio)?;
    build_filterbank_for_layout(fbc, layout, audio)
}

pub(crate) fn build_filterbank_for_layout(
    fbc: &FilterbankConfig,
    layout: FrameLayout,
    audio: &AudioConfig,
) -> Result<Filterbank, FeatureError> {
    let nf = fbc.num_filters;
    if nf < 2 {
        return Err(FeatureError::InvalidFilterbankConfig(format!("{nf} filters, need at least 2")));
    }
    if fbc.warp.audio() != *audio {
        return Err(FeatureError::InvalidFilterbankConfig(
            "warp was built for a different sample rate".into(),
        ));
    }
    let nyquist = audio.nyquist_hz();
    let num_bins = layout.num_bins();
    let bin_hz = audio.sample_rate_hz() / layout.fft_size as f64;

    let edges_hz: Vec<f64> = (0..nf + 2)
        .map(|j| nyquist * invert_unit(&fbc.warp, j as f64 / (nf + 1) as f64))
        .collect();

    let nearest_bin = |f: f64| (f / bin_hz).round() as usize;
    for j in 0..nf + 1 {
        let (lo, hi) = (edges_hz[j], edges_hz[j + 1]);
        if !(hi > lo) || nearest_bin(lo) == nearest_bin(hi) {
            return Err(FeatureError::DegenerateFilter {
                filter: j.min(nf - 1),
                lower_hz: lo,
                upper_hz: hi,
                bin: nearest_bin(lo),
            });
        }
    }

    let mut rows = Vec::with_capacity(nf);
    for j in 0..nf {
        let (left, centre, right) = (edges_hz[j], edges_hz[j + 1], edges_hz[j + 2]);
        let first = ((left / bin_hz).floor() as usize).min(num_bins - 1);
        let last = ((right / bin_hz).ceil() as usize).min(num_bins - 1);
        let weights: Vec<f64> = (first..=last)
            .map(|k| {
                let f = k as f64 * bin_hz;
                if f <= left || f >= right {
                    0.0
                } else if f <= centre {
                    (f - left) / (centre - left)
                } else {
                    (right - f) / (right - centre)
                }
            })
            .collect();
        let scale = match fbc.normalization {
            Normalization::EqualHeight => weights.iter().cloned().fold(0.0, f64::max),
            Normalization::EqualArea => weights.iter().sum::<f64>() * bin_hz,
        };
        if !(scale > 0.0) {
            return Err(FeatureError::DegenerateFilter {
                filter: j,
                lower_hz: left,
                upper_hz: right,
                bin: first,
            });
        }
        rows.push(FilterRow { start: first, weights: weights.iter().map(|w| w / scale).collect() });
    }

    Ok(Filterbank { rows, num_bins, bin_hz, edges_hz })
}

/// Orthonormal DCT-II basis, `size x size`, row `k` holding coefficient `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dct {
    size: usize,
    basis: Vec<f64>,
}

impl Dct {
    pub fn new(size: usize) -> Self {
        let n = size as f64;
        let mut basis = Vec::with_capacity(size * size);
        for k in 0..size {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for i in 0..size {
                let arg = std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n);
                basis.push(scale * arg.cos());
            }
        }
        Dct { size, basis }
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        (0..self.size).map(|k| self.coefficient(input, k)).collect()
    }

    pub fn inverse(&self, coeffs: &[f64]) -> Vec<f64> {
        (0..self.size)
            .map(|i| (0..self.size).map(|k| self.basis[k * self.size + i] * coeffs[k]).sum())
            .collect()
    }

    fn coefficient(&self, input: &[f64], k: usize) -> f64 {
        self.basis[k * self.size..(k + 1) * self.size]
            .iter()
            .zip(input)
            .map(|(b, x)| b * x)
            .sum()
    }
}

/// Per-utterance feature vectors, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f64>,
    frame_times_s: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>, frame_times_s: Vec<f64>) -> Result<Self, FeatureError> {
        if dim == 0 || data.len() != dim * frame_times_s.len() {
            return Err(FeatureError::Shape(format!(
                "{} values for {} frames of dimension {dim}",
                data.len(),
                frame_times_s.len()
            )));
        }
        Ok(FeatureMatrix { dim, data, frame_times_s })
    }

    /// Builds a matrix from rows, with frame times `0, 1, 2, ...`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, FeatureError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(FeatureError::Shape("ragged rows".into()));
        }
        let times = (0..rows.len()).map(|t| t as f64).collect();
        FeatureMatrix::new(dim, rows.concat(), times)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_frames(&self) -> usize {
        self.frame_times_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_times_s.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn frame_times(&self) -> &[f64] {
        &self.frame_times_s
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), FeatureError> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        if self.dim == FEATURE_DIM {
            header.extend((1..=NUM_CEPSTRA).map(|k| format!("c{k}")));
            header.push("logE".into());
        } else {
            header.extend((0..self.dim).map(|k| format!("f{k}")));
        }
        writer.write_record(&header)?;
        for (t, row) in self.rows().enumerate() {
            let mut record = vec![self.frame_times_s[t].to_string()];
            record.extend(row.iter().map(f64::to_string));
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Binary layout: magic `AFCF`, u16 version, u32 dim, u32 frames, u64
    /// frame-config hash, then frame times and row-major values as
    /// little-endian f64.
    pub fn write_binary<W: Write>(&self, mut out: W, frame_config_hash: u64) -> Result<(), FeatureError> {
        out.write_all(FEATURE_MAGIC)?;
        out.write_all(&FEATURE_VERSION.to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.num_frames() as u32).to_le_bytes())?;
        out.write_all(&frame_config_hash.to_le_bytes())?;
        for v in self.frame_times_s.iter().chain(&self.data) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads the binary form, returning the matrix and its frame-config hash.
    pub fn read_binary<R: Read>(mut input: R) -> Result<(Self, u64), FeatureError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(FeatureError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut input)?);
        if version != FEATURE_VERSION {
            return Err(FeatureError::Format(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(read_array(&mut input)?) as usize;
        let frames = u32::from_le_bytes(read_array(&mut input)?) as usize;
        let hash = u64::from_le_bytes(read_array(&mut input)?);
        let mut times = Vec::with_capacity(frames);
        for _ in 0..frames {
            times.push(f64::from_le_bytes(read_array(&mut input)?));
        }
        let mut data = Vec::with_capacity(frames * dim);
        for _ in 0..frames * dim {
            data.push(f64::from_le_bytes(read_array(&mut input)?));
        }
        Ok((FeatureMatrix::new(dim, data, times)?, hash))
    }
}

pub(crate) fn read_array<R: Read, const N: usize>(input: &mut R) -> std::io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

/// Applies a filterbank and DCT to precomputed spectra.
pub struct CepstralExtractor {
    filterbank: Filterbank,
    dct: Dct,
}

impl CepstralExtractor {
    pub fn new(filterbank: Filterbank) -> Self {
        let dct = Dct::new(filterbank.num_filters());
        CepstralExtractor { filterbank, dct }
    }

    pub fn filterbank(&self) -> &Filterbank {
        &self.filterbank
    }

    pub fn extract(&self, spec: &Spectrogram) -> FeatureMatrix {
        let nf = self.filterbank.num_filters();
        let mut fbank = vec![0.0; nf];
        let mut data = Vec::with_capacity(spec.num_frames() * FEATURE_DIM);
        for t in 0..spec.num_frames() {
            self.filterbank.apply(spec.frame(t), &mut fbank);
            for e in fbank.iter_mut() {
                *e = e.max(LOG_FLOOR).ln();
            }
            for k in 1..=NUM_CEPSTRA {
                data.push(if k < nf { self.dct.coefficient(&fbank, k) } else { 0.0 });
            }
            data.push(spec.log_energy()[t]);
        }
        FeatureMatrix { dim: FEATURE_DIM, data, frame_times_s: spec.frame_times() }
    }
}

/// Full front end: framing, filterbank, cepstra and energy.
pub fn extract_features(
    signal: &[f64],
    audio: &AudioConfig,
    fc: &FrameConfig,
    fbc: &FilterbankConfig,
) -> Result<FeatureMatrix, FeatureError> {
    let analyzer = SpectrumAnalyzer::new(audio, fc)?;
    let filterbank = build_filterbank_for_layout(fbc, analyzer.layout(), audio)?;
    let spec = analyzer.analyze(signal)?;
    Ok(CepstralExtractor::new(filterbank).extract(&spec))
}
