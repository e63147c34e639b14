use std::fs;

use afcc::corpus::{self, load, synthesize, synthesize_in_memory, CorpusError, SynthSpec};
use afcc::eval::Group;
use afcc::scales::AudioConfig;

fn spec(seed: u64) -> SynthSpec {
    SynthSpec { speakers_per_group: 3, utterances_per_speaker: 2, seed, ..Default::default() }
}

#[test]
fn written_corpus_loads_back_sample_for_sample() {
    let audio = AudioConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let (manifest, written) = synthesize(&spec(1), &audio, dir.path()).unwrap();
    let loaded = load(&manifest, &audio).unwrap();
    assert_eq!(loaded.manifest, written.manifest);
    for (a, b) in written.utterances.iter().zip(&loaded.utterances) {
        assert_eq!(a.entry, b.entry);
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(corpus::quantize(*x), corpus::quantize(*y));
            assert_eq!(*y, f64::from(corpus::quantize(*y)) / 32768.0);
        }
    }
}

#[test]
fn labels_are_balanced_and_lengths_match_duration() {
    let c = synthesize_in_memory(&spec(2), &AudioConfig::default()).unwrap();
    assert_eq!(c.utterances.len(), 12);
    let natives = c.utterances.iter().filter(|u| u.entry.group == Group::Native).count();
    assert_eq!(natives, 6);
    for u in &c.utterances {
        assert_eq!(u.samples.len(), 22_050);
        let s = u.entry.human_score.unwrap();
        assert!((1.0..=7.0).contains(&s));
    }
}

#[test]
fn minimal_two_entry_manifest_loads() {
    let audio = AudioConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let c = synthesize_in_memory(&SynthSpec { speakers_per_group: 1, utterances_per_speaker: 1, seed: 3, ..Default::default() }, &audio).unwrap();
    let manifest = c.write_to(dir.path()).unwrap();
    let loaded = load(&manifest, &audio).unwrap();
    let groups: Vec<Group> = loaded.utterances.iter().map(|u| u.entry.group).collect();
    assert_eq!(groups.len(), 2);
    assert!(groups.contains(&Group::Native) && groups.contains(&Group::NonNative));
}

#[test]
fn missing_wav_error_names_the_file() {
    let audio = AudioConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let (manifest, c) = synthesize(&spec(4), &audio, dir.path()).unwrap();
    let victim = dir.path().join(&c.utterances[3].entry.path);
    fs::remove_file(&victim).unwrap();
    let err = load(&manifest, &audio).unwrap_err();
    assert!(matches!(err, CorpusError::Io { .. }));
    assert!(err.to_string().contains(&c.utterances[3].entry.path.to_string_lossy().to_string()), "{err}");
}

#[test]
fn sample_rate_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = synthesize(&spec(5), &AudioConfig::default(), dir.path()).unwrap();
    let err = load(&manifest, &AudioConfig::new(16_000.0).unwrap()).unwrap_err();
    assert!(matches!(err, CorpusError::SampleRateMismatch { found: 44_100, .. }), "{err}");
}

#[test]
fn malformed_manifest_rows_are_located() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.csv");
    fs::write(&path, "path,speaker,word,group,human_score\nA/x.wav,s1,A,native,4.0\nA/y.wav,s2,A,martian,3.0\n").unwrap();
    let err = load(&path, &AudioConfig::default()).unwrap_err();
    assert!(matches!(err, CorpusError::Manifest { row: 3, .. }), "{err}");
}

#[test]
fn same_seed_same_audio() {
    let audio = AudioConfig::default();
    let a = synthesize_in_memory(&spec(9), &audio).unwrap();
    let b = synthesize_in_memory(&spec(9), &audio).unwrap();
    let c = synthesize_in_memory(&spec(10), &audio).unwrap();
    assert_eq!(a.utterances, b.utterances);
    assert_ne!(a.utterances[0].samples, c.utterances[0].samples);
}
