//! Labeled word corpora: a CSV manifest plus 16-bit mono WAV files, and a
//! seeded formant synthesizer that produces two-group corpora of isolated
//! vowel-like words.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::eval::Group;
use crate::scales::AudioConfig;

pub const MANIFEST_HEADER: [&str; 5] = ["path", "speaker", "word", "group", "human_score"];
pub const MANIFEST_FILE: &str = "manifest.csv";

/// 16-bit full scale. Samples are stored as `i / 32768`.
const PCM_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row}: {message}")]
    Manifest { path: PathBuf, row: usize, message: String },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: unsupported WAV encoding ({detail}); expected 16-bit PCM mono")]
    UnsupportedFormat { path: PathBuf, detail: String },
    #[error("{path}: sample rate {found} Hz does not match configured {expected} Hz")]
    SampleRateMismatch { path: PathBuf, found: u32, expected: f64 },
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub speaker: String,
    pub word: String,
    pub group: Group,
    pub human_score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    /// Parses a manifest CSV. Row numbers in errors count the header as row 1.
    pub fn read_csv(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read(path).map_err(io_err(path))?;
        let bad = |row: usize, message: String| CorpusError::Manifest { path: path.to_path_buf(), row, message };
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_slice());
        let header = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
        if header.iter().map(str::trim).ne(MANIFEST_HEADER) {
            return Err(bad(1, format!("expected header {}", MANIFEST_HEADER.join(","))));
        }
        let mut entries = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 2;
            let record = record.map_err(|e| bad(row, e.to_string()))?;
            let field = |k: usize| record.get(k).unwrap_or("").trim();
            if field(0).is_empty() || field(1).is_empty() || field(2).is_empty() {
                return Err(bad(row, "path, speaker and word must be non-empty".into()));
            }
            let group: Group = field(3).parse().map_err(|e: String| bad(row, e))?;
            let human_score = match field(4) {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|e| bad(row, format!("human_score {s:?}: {e}")))?),
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(field(0)),
                speaker: field(1).to_string(),
                word: field(2).to_string(),
                group,
                human_score,
            });
        }
        let manifest = CorpusManifest { entries };
        manifest.validate().map_err(|(row, m)| bad(row, m))?;
        Ok(manifest)
    }

    /// Checks path uniqueness and score range; the error carries the CSV row.
    pub fn validate(&self) -> Result<(), (usize, String)> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if !seen.insert(&e.path) {
                return Err((i + 2, format!("duplicate path {}", e.path.display())));
            }
            if let Some(s) = e.human_score {
                if !(1.0..=7.0).contains(&s) {
                    return Err((i + 2, format!("human_score {s} outside [1, 7]")));
                }
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CorpusError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(MANIFEST_HEADER)?;
        for e in &self.entries {
            w.write_record([
                e.path.to_string_lossy().as_ref(),
                &e.speaker,
                &e.word,
                e.group.as_str(),
                &e.human_score.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|source| CorpusError::Io { path: PathBuf::from("<manifest>"), source })?;
        Ok(())
    }

    /// Distinct words in sorted order.
    pub fn words(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.word.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

/// One decoded utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub entry: ManifestEntry,
    /// Samples in `[-1, 1)`.
    pub samples: Vec<f64>,
}

impl Utterance {
    /// Stable identifier used for score rows.
    pub fn id(&self) -> String {
        self.entry.path.to_string_lossy().replace('\\', "/")
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub utterances: Vec<Utterance>,
    pub audio: AudioConfig,
}

impl Corpus {
    pub fn word<'a>(&'a self, word: &'a str) -> impl Iterator<Item = &'a Utterance> + 'a {
        self.utterances.iter().filter(move |u| u.entry.word == word)
    }

    pub fn words(&self) -> Vec<String> {
        self.manifest.words()
    }

    /// Writes `manifest.csv` and every utterance under `dir`. Returns the
    /// manifest path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, CorpusError> {
        for u in &self.utterances {
            let path = dir.join(&u.entry.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            write_wav(&path, &u.samples, &self.audio)?;
        }
        let manifest_path = dir.join(MANIFEST_FILE);
        let file = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
        self.manifest.write_csv(std::io::BufWriter::new(file))?;
        Ok(manifest_path)
    }
}

/// Rounds to the 16-bit grid used on disk.
pub fn quantize(x: f64) -> i16 {
    (x * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn write_wav(path: &Path, samples: &[f64], audio: &AudioConfig) -> Result<(), CorpusError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate_hz().round() as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| CorpusError::Wav { path: path.to_path_buf(), source };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        w.write_sample(quantize(s)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

pub fn read_wav(path: &Path, audio: &AudioConfig) -> Result<Vec<f64>, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "audio file not found"),
        });
    }
    let wav_err = |source| CorpusError::Wav { path: path.to_path_buf(), source };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(CorpusError::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!(
                "{} channel(s), {} bits, {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    if f64::from(spec.sample_rate) != audio.sample_rate_hz() {
        return Err(CorpusError::SampleRateMismatch {
            path: path.to_path_buf(),
            found: spec.sample_rate,
            expected: audio.sample_rate_hz(),
        });
    }
    reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / PCM_SCALE).map_err(wav_err))
        .collect()
}

/// Reads a manifest and decodes every referenced WAV.
pub fn load(manifest_path: &Path, audio: &AudioConfig) -> Result<Corpus, CorpusError> {
    let manifest = CorpusManifest::read_csv(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let utterances = manifest
        .entries
        .par_iter()
        .map(|e| {
            let samples = read_wav(&base.join(&e.path), audio)?;
            Ok(Utterance { entry: e.clone(), samples })
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    Ok(Corpus { manifest, utterances, audio: *audio })
}

/// Formant pattern of one synthetic word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WordTemplate {
    pub name: String,
    pub formants_hz: [f64; 3],
    pub bandwidths_hz: [f64; 3],
}

impl Default for WordTemplate {
    fn default() -> Self {
        WordTemplate {
            name: "A".into(),
            formants_hz: [730.0, 1090.0, 2440.0],
            bandwidths_hz: [90.0, 110.0, 170.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub words: Vec<WordTemplate>,
    pub speakers_per_group: usize,
    pub utterances_per_speaker: usize,
    /// Added to formant `shift_formant` for the non-native group.
    pub formant_shift_hz: f64,
    /// Zero-based formant index the shift applies to.
    pub shift_formant: usize,
    pub speaker_jitter_hz: f64,
    pub utterance_jitter_hz: f64,
    pub duration_s: f64,
    pub noise_snr_db: f64,
    pub pitch_hz: f64,
    pub pitch_jitter_hz: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            words: vec![WordTemplate::default()],
            speakers_per_group: 20,
            utterances_per_speaker: 10,
            formant_shift_hz: 300.0,
            shift_formant: 1,
            speaker_jitter_hz: 40.0,
            utterance_jitter_hz: 15.0,
            duration_s: 0.5,
            noise_snr_db: 30.0,
            pitch_hz: 120.0,
            pitch_jitter_hz: 10.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self, audio: &AudioConfig) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        if self.words.is_empty() {
            return bad("no words".into());
        }
        let mut names = HashSet::new();
        for w in &self.words {
            if w.name.is_empty() || w.name.contains(['/', '\\']) || !names.insert(&w.name) {
                return bad(format!("word name {:?} is empty, duplicated or contains a path separator", w.name));
            }
            for k in 0..3 {
                let shifted = w.formants_hz[k] + if k == self.shift_formant { self.formant_shift_hz } else { 0.0 };
                for f in [w.formants_hz[k], shifted] {
                    if !(f > 0.0 && f < audio.nyquist_hz()) {
                        return bad(format!(
                            "word {}: formant {} at {f} Hz outside (0, {}) Hz",
                            w.name,
                            k + 1,
                            audio.nyquist_hz()
                        ));
                    }
                }
                if !(w.bandwidths_hz[k] > 0.0) {
                    return bad(format!("word {}: bandwidth {} must be positive", w.name, k + 1));
                }
            }
        }
        if self.shift_formant > 2 {
            return bad("shift_formant must be 0, 1 or 2".into());
        }
        if self.speakers_per_group == 0 || self.utterances_per_speaker == 0 {
            return bad("speaker and utterance counts must be positive".into());
        }
        if !(self.duration_s > 0.0) || !(self.pitch_hz > 0.0) || !self.noise_snr_db.is_finite() {
            return bad("duration, pitch and SNR must be positive and finite".into());
        }
        if self.speaker_jitter_hz < 0.0 || self.utterance_jitter_hz < 0.0 || self.pitch_jitter_hz < 0.0 {
            return bad("jitter must be non-negative".into());
        }
        Ok(())
    }

    pub fn is_null_separation(&self) -> bool {
        self.formant_shift_hz == 0.0
    }
}

/// Two-pole resonator in the Klatt form.
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bw: f64, sample_rate: f64) -> Self {
        let t = 1.0 / sample_rate;
        let c = -(-2.0 * PI * bw * t).exp();
        let b = 2.0 * (-PI * bw * t).exp() * (2.0 * PI * freq * t).cos();
        Resonator { a: 1.0 - b - c, b, c, y1: 0.0, y2: 0.0 }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Synthesizes one vowel: impulse train, glottal low-pass, cascaded
/// formant resonators, lip radiation, fades, peak normalization and white
/// noise at `snr_db`. The result is already on the 16-bit grid.
pub fn synthesize_vowel(
    formants: &[f64; 3],
    bandwidths: &[f64; 3],
    pitch_hz: f64,
    duration_s: f64,
    snr_db: f64,
    audio: &AudioConfig,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let sr = audio.sample_rate_hz();
    let n = (duration_s * sr).round() as usize;
    let period = sr / pitch_hz;
    let phase: f64 = rng.random::<f64>() * period;
    let mut resonators: Vec<Resonator> =
        formants.iter().zip(bandwidths).map(|(&f, &b)| Resonator::new(f, b, sr)).collect();

    let mut out = Vec::with_capacity(n);
    let mut next_pulse = phase;
    let (mut glottal, mut prev) = (0.0, 0.0);
    for i in 0..n {
        let mut x = 0.0;
        if i as f64 >= next_pulse {
            x = 1.0;
            next_pulse += period;
        }
        glottal = x + 0.95 * glottal;
        let mut y = glottal;
        for r in &mut resonators {
            y = r.tick(y);
        }
        out.push(y - prev);
        prev = y;
    }

    let fade = ((0.01 * sr) as usize).min(n / 2);
    for i in 0..fade {
        let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        out[i] *= g;
        out[n - 1 - i] *= g;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    let noise_std = rms / 10f64.powf(snr_db / 20.0);
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).expect("finite std");
        out.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    out.iter().map(|&v| f64::from(quantize(v)) / PCM_SCALE).collect()
}

/// Synthetic rating: 6 for a perfect match, about 3.5 for a 300 Hz
/// deviation on the scored formant, plus rater noise, clamped to `[1, 7]`.
fn synthetic_human_score(deviation_hz: f64, rng: &mut impl Rng) -> f64 {
    let noise = Normal::new(0.0, 0.5).expect("finite std").sample(rng);
    let raw = 6.0 - 2.5 * deviation_hz / 300.0 + noise;
    (raw.clamp(1.0, 7.0) * 1e4).round() / 1e4
}

fn group_index(g: Group) -> u64 {
    match g {
        Group::NonNative => 0,
        Group::Native => 1,
    }
}

fn speaker_tag(g: Group) -> &'static str {
    match g {
        Group::NonNative => "nn",
        Group::Native => "na",
    }
}

/// Builds the whole corpus in memory. Paths are `<word>/<speaker>_uNN.wav`.
pub fn synthesize_in_memory(spec: &SynthSpec, audio: &AudioConfig) -> Result<Corpus, CorpusError> {
    spec.validate(audio)?;
    let mut jobs = Vec::new();
    for (w, template) in spec.words.iter().enumerate() {
        for group in [Group::Native, Group::NonNative] {
            for s in 0..spec.speakers_per_group {
                for u in 0..spec.utterances_per_speaker {
                    jobs.push((w, template, group, s, u));
                }
            }
        }
    }
    let utterances: Vec<Utterance> = jobs
        .par_iter()
        .map(|&(w, template, group, s, u)| {
            let g = group_index(group);
            let mut voice = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[g, s as u64]));
            let pitch = spec.pitch_hz + spec.pitch_jitter_hz * Normal::new(0.0, 1.0).unwrap().sample(&mut voice);
            let mut speaker_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[w as u64, g, s as u64]));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[w as u64, g, s as u64, u as u64]));
            let std = Normal::new(0.0, 1.0).unwrap();

            let mut formants = template.formants_hz;
            if group == Group::NonNative {
                formants[spec.shift_formant] += spec.formant_shift_hz;
            }
            for f in formants.iter_mut() {
                *f += spec.speaker_jitter_hz * std.sample(&mut speaker_rng)
                    + spec.utterance_jitter_hz * std.sample(&mut rng);
                *f = f.clamp(50.0, 0.95 * audio.nyquist_hz());
            }
            let samples = synthesize_vowel(
                &formants,
                &template.bandwidths_hz,
                pitch.max(40.0),
                spec.duration_s,
                spec.noise_snr_db,
                audio,
                &mut rng,
            );
            let deviation = (formants[spec.shift_formant] - template.formants_hz[spec.shift_formant]).abs();
            let speaker = format!("{}{:02}", speaker_tag(group), s + 1);
            Utterance {
                entry: ManifestEntry {
                    path: PathBuf::from(format!("{}/{}_u{:02}.wav", template.name, speaker, u + 1)),
                    speaker,
                    word: template.name.clone(),
                    group,
                    human_score: Some(synthetic_human_score(deviation, &mut rng)),
                },
                samples,
            }
        })
        .collect();
    let manifest = CorpusManifest { entries: utterances.iter().map(|u| u.entry.clone()).collect() };
    Ok(Corpus { manifest, utterances, audio: *audio })
}

/// Synthesizes the corpus and writes it under `dir`.
pub fn synthesize(spec: &SynthSpec, audio: &AudioConfig, dir: &Path) -> Result<(PathBuf, Corpus), CorpusError> {
    let corpus = synthesize_in_memory(spec, audio)?;
    let path = corpus.write_to(dir)?;
    if spec.is_null_separation() {
        tracing::info!(manifest = %path.display(), "null-separation: formant shift is 0, groups are statistically identical");
    }
    Ok((path, corpus))
}
