//! Deterministic synthetic multilingual corpus: generation, on-disk format,
//! and batching.
//!
//! Each language owns a disjoint phoneme id range and a characteristic base
//! duration, every speaker is monolingual, and frames are built from fixed
//! per-phoneme templates plus a per-speaker offset and optional seeded noise.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::DurationSequence;
use crate::error::{Error, Result};

pub const CORPUS_FORMAT: &str = "mltts-corpus";
pub const CORPUS_VERSION: u32 = 1;

/// Phonemes per utterance are drawn uniformly from this range.
const MIN_UTTERANCE_PHONEMES: usize = 4;
const MAX_UTTERANCE_PHONEMES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub num_languages: usize,
    pub speakers_per_language: usize,
    pub phonemes_per_language: usize,
    pub utterances_per_speaker: usize,
    pub frame_dim: usize,
    pub seed: u64,
    /// Uniform noise amplitude added to every frame value; 0 disables noise.
    pub noise_amplitude: f64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            num_languages: 4,
            speakers_per_language: 4,
            phonemes_per_language: 8,
            utterances_per_speaker: 25,
            frame_dim: 8,
            seed: 42,
            noise_amplitude: 0.01,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn num_speakers(&self) -> usize {
        self.num_languages * self.speakers_per_language
    }

    pub fn total_phonemes(&self) -> usize {
        self.num_languages * self.phonemes_per_language
    }

    /// Language that owns phoneme ids `[lang * ppl, (lang+1) * ppl)`.
    pub fn phoneme_range(&self, language: usize) -> std::ops::Range<usize> {
        language * self.phonemes_per_language..(language + 1) * self.phonemes_per_language
    }

    /// Native language of a speaker; speakers are grouped by language.
    pub fn native_language(&self, speaker: usize) -> usize {
        speaker / self.speakers_per_language
    }

    /// Mean frame count per phoneme for a language (2, 3, 4, 5, ...).
    pub fn base_duration(&self, language: usize) -> usize {
        2 + language
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_languages == 0
            || self.speakers_per_language == 0
            || self.phonemes_per_language == 0
            || self.utterances_per_speaker == 0
            || self.frame_dim == 0
        {
            return Err(Error::contract(
                "corpus spec: all counts must be at least 1".to_string(),
            ));
        }
        if !self.noise_amplitude.is_finite() || self.noise_amplitude < 0.0 {
            return Err(Error::contract(format!(
                "corpus spec: noise amplitude must be nonnegative, got {}",
                self.noise_amplitude
            )));
        }
        Ok(())
    }
}

/// One training datapoint: a monolingual utterance of one speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance_id: usize,
    pub speaker_id: usize,
    pub language_id: usize,
    pub phoneme_ids: Vec<usize>,
    pub durations: Vec<usize>,
    pub num_frames: usize,
    /// Row-major `[num_frames, frame_dim]`.
    pub frames: Vec<f64>,
}

impl Utterance {
    pub fn duration_sequence(&self) -> DurationSequence {
        DurationSequence(self.durations.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: SyntheticCorpusSpec,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Check every utterance invariant, naming the first offender.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        for u in &self.utterances {
            let total: usize = u.durations.len();
            if total != u.phoneme_ids.len() {
                return Err(Error::Validation {
                    utterance_id: u.utterance_id,
                    message: format!(
                        "{} phonemes but {} durations",
                        u.phoneme_ids.len(),
                        u.durations.len()
                    ),
                });
            }
            if u.durations.iter().any(|&d| d == 0) {
                return Err(Error::Validation {
                    utterance_id: u.utterance_id,
                    message: "zero duration".to_string(),
                });
            }
            let frame_sum: usize = u.durations.iter().sum();
            if frame_sum != u.num_frames {
                return Err(Error::Validation {
                    utterance_id: u.utterance_id,
                    message: format!(
                        "durations sum to {frame_sum} but num_frames is {}",
                        u.num_frames
                    ),
                });
            }
            if u.frames.len() != u.num_frames * self.spec.frame_dim {
                return Err(Error::Validation {
                    utterance_id: u.utterance_id,
                    message: format!(
                        "frame matrix has {} values, expected {}",
                        u.frames.len(),
                        u.num_frames * self.spec.frame_dim
                    ),
                });
            }
            if u.language_id >= self.spec.num_languages {
                return Err(Error::Validation {
                    utterance_id: u.utterance_id,
                    message: format!("language id {} out of range", u.language_id),
                });
            }
            if u.speaker_id >= self.spec.num_speakers() {
                return Err(Error::Validation {
                    utterance_id: u.utterance_id,
                    message: format!("speaker id {} out of range", u.speaker_id),
                });
            }
            if self.spec.native_language(u.speaker_id) != u.language_id {
                return Err(Error::Validation {
                    utterance_id: u.utterance_id,
                    message: format!(
                        "speaker {} is native to language {} but utterance is in {}",
                        u.speaker_id,
                        self.spec.native_language(u.speaker_id),
                        u.language_id
                    ),
                });
            }
            let range = self.spec.phoneme_range(u.language_id);
            if let Some(&bad) = u.phoneme_ids.iter().find(|&&p| !range.contains(&p)) {
                return Err(Error::Validation {
                    utterance_id: u.utterance_id,
                    message: format!(
                        "phoneme {bad} outside language {} range {range:?}",
                        u.language_id
                    ),
                });
            }
        }
        Ok(())
    }
}

/// The hidden generative process: per-phoneme frame templates and
/// per-speaker additive offsets, all derived from the spec seed.
pub struct FrameSynth {
    spec: SyntheticCorpusSpec,
    templates: Vec<Vec<f64>>,
    speaker_offsets: Vec<Vec<f64>>,
}

impl FrameSynth {
    pub fn new(spec: &SyntheticCorpusSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let templates = (0..spec.total_phonemes())
            .map(|_| (0..spec.frame_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let speaker_offsets = (0..spec.num_speakers())
            .map(|_| (0..spec.frame_dim).map(|_| rng.random_range(-0.5..0.5)).collect())
            .collect();
        FrameSynth { spec: spec.clone(), templates, speaker_offsets }
    }

    /// Frames for a phoneme sequence with known durations: template repeated
    /// per duration, plus the speaker offset, plus optional noise from `rng`.
    pub fn render(
        &self,
        phoneme_ids: &[usize],
        durations: &[usize],
        speaker_id: usize,
        noise_rng: Option<&mut ChaCha8Rng>,
    ) -> Vec<f64> {
        let d = self.spec.frame_dim;
        let total: usize = durations.iter().sum();
        let mut frames = Vec::with_capacity(total * d);
        let offset = &self.speaker_offsets[speaker_id];
        for (&p, &dur) in phoneme_ids.iter().zip(durations) {
            for _ in 0..dur {
                for j in 0..d {
                    frames.push(self.templates[p][j] + offset[j]);
                }
            }
        }
        if let Some(rng) = noise_rng {
            let amp = self.spec.noise_amplitude;
            if amp > 0.0 {
                for f in &mut frames {
                    *f += rng.random_range(-amp..amp);
                }
            }
        }
        frames
    }
}

/// Generate the full corpus. Identical spec (including seed) gives an
/// identical corpus.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let synth = FrameSynth::new(spec);
    // Separate stream for utterance composition, so rendering stays
    // reproducible through `FrameSynth` alone.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut utterances = Vec::with_capacity(spec.num_speakers() * spec.utterances_per_speaker);
    let mut utterance_id = 0;
    for speaker_id in 0..spec.num_speakers() {
        let language_id = spec.native_language(speaker_id);
        let range = spec.phoneme_range(language_id);
        let base = spec.base_duration(language_id);
        for _ in 0..spec.utterances_per_speaker {
            let len = rng.random_range(MIN_UTTERANCE_PHONEMES..=MAX_UTTERANCE_PHONEMES);
            let phoneme_ids: Vec<usize> =
                (0..len).map(|_| rng.random_range(range.clone())).collect();
            let durations: Vec<usize> = (0..len)
                .map(|_| {
                    let delta: i64 = rng.random_range(-1..=1);
                    ((base as i64 + delta).max(1)) as usize
                })
                .collect();
            let frames = synth.render(&phoneme_ids, &durations, speaker_id, Some(&mut rng));
            let num_frames = durations.iter().sum();
            utterances.push(Utterance {
                utterance_id,
                speaker_id,
                language_id,
                phoneme_ids,
                durations,
                num_frames,
                frames,
            });
            utterance_id += 1;
        }
    }
    let corpus = Corpus { spec: spec.clone(), utterances };
    corpus.validate()?;
    Ok(corpus)
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    spec: SyntheticCorpusSpec,
}

/// Write the corpus as a header line plus one JSON record per utterance.
pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    let header = CorpusHeader {
        format: CORPUS_FORMAT.to_string(),
        version: CORPUS_VERSION,
        spec: corpus.spec.clone(),
    };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for u in &corpus.utterances {
        out.push_str(&serde_json::to_string(u).expect("utterance serializes"));
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Load and validate a corpus file. Parse failures carry the line number.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let f = fs::File::open(&path)?;
    let reader = BufReader::new(f);
    let mut lines = reader.lines();
    let header_line = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(Error::EmptyCorpus(format!(
                "{} has no header line",
                path.as_ref().display()
            )))
        }
    };
    let header: CorpusHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.format != CORPUS_FORMAT {
        return Err(Error::Parse {
            line: 1,
            message: format!("unknown format {:?}", header.format),
        });
    }
    if header.version != CORPUS_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "unsupported corpus version {} (this build reads {})",
                header.version, CORPUS_VERSION
            ),
        });
    }
    let mut utterances = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        utterances.push(u);
    }
    if utterances.is_empty() {
        return Err(Error::EmptyCorpus(format!(
            "{} contains no utterances",
            path.as_ref().display()
        )));
    }
    let corpus = Corpus { spec: header.spec, utterances };
    corpus.validate()?;
    Ok(corpus)
}

/// Indices of one batch into `corpus.utterances`.
pub type Batch = Vec<usize>;

/// Seeded shuffle of the corpus cut into contiguous chunks; the final
/// partial batch is kept.
pub fn make_batches(corpus: &Corpus, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("make_batches: batch_size must be at least 1".to_string()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("cannot batch an empty corpus".to_string()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_spec() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            num_languages: 2,
            speakers_per_language: 2,
            phonemes_per_language: 4,
            utterances_per_speaker: 3,
            frame_dim: 3,
            seed: 7,
            noise_amplitude: 0.01,
        }
    }

    #[test]
    fn minimal_spec_produces_one_valid_utterance() {
        let spec = SyntheticCorpusSpec {
            num_languages: 1,
            speakers_per_language: 1,
            phonemes_per_language: 2,
            utterances_per_speaker: 1,
            frame_dim: 2,
            seed: 1,
            noise_amplitude: 0.0,
        };
        let corpus = generate_corpus(&spec).unwrap();
        assert_eq!(corpus.len(), 1);
        corpus.validate().unwrap();
    }

    #[test]
    fn zero_counts_are_rejected() {
        let mut spec = small_spec();
        spec.utterances_per_speaker = 0;
        assert!(generate_corpus(&spec).is_err());
    }

    #[test]
    fn same_spec_generates_byte_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save_corpus(&generate_corpus(&small_spec()).unwrap(), &a).unwrap();
        save_corpus(&generate_corpus(&small_spec()).unwrap(), &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn default_spec_structure() {
        let corpus = generate_corpus(&SyntheticCorpusSpec::default()).unwrap();
        assert_eq!(corpus.len(), 400);
        // Phoneme id sets are disjoint across languages.
        let mut seen: Vec<HashSet<usize>> = vec![HashSet::new(); 4];
        for u in &corpus.utterances {
            seen[u.language_id].extend(u.phoneme_ids.iter().copied());
        }
        for a in 0..4 {
            for b in (a + 1)..4 {
                assert!(seen[a].is_disjoint(&seen[b]), "languages {a} and {b} overlap");
            }
        }
        // No speaker appears with two language ids.
        let mut lang_of: Vec<Option<usize>> = vec![None; corpus.spec.num_speakers()];
        for u in &corpus.utterances {
            match lang_of[u.speaker_id] {
                None => lang_of[u.speaker_id] = Some(u.language_id),
                Some(l) => assert_eq!(l, u.language_id),
            }
        }
    }

    #[test]
    fn round_trip_preserves_equality() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = generate_corpus(&small_spec()).unwrap();
        save_corpus(&corpus, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(corpus, loaded);
    }

    #[test]
    fn bad_duration_sum_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut corpus = generate_corpus(&small_spec()).unwrap();
        corpus.utterances[2].durations[0] += 1;
        save_corpus(&corpus, &path).unwrap();
        let err = load_corpus(&path).unwrap_err();
        match err {
            Error::Validation { utterance_id, .. } => assert_eq!(utterance_id, 2),
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn empty_file_is_an_empty_corpus_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(matches!(load_corpus(&path), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn malformed_record_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = generate_corpus(&small_spec()).unwrap();
        save_corpus(&corpus, &path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let mut edited: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        edited[3] = "{not json".to_string();
        text = edited.join("\n");
        fs::write(&path, text).unwrap();
        match load_corpus(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn batching_sizes_and_permutation() {
        let spec = SyntheticCorpusSpec {
            utterances_per_speaker: 10,
            num_languages: 1,
            speakers_per_language: 1,
            ..small_spec()
        };
        let corpus = generate_corpus(&spec).unwrap();
        assert_eq!(corpus.len(), 10);
        let batches = make_batches(&corpus, 4, 5).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        // Union of batches is the whole corpus with no duplicates.
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // Same epoch seed, same batches.
        assert_eq!(batches, make_batches(&corpus, 4, 5).unwrap());
        assert!(make_batches(&corpus, 0, 5).is_err());
    }

    #[test]
    fn speaker_offset_is_constant_without_noise() {
        let mut spec = small_spec();
        spec.noise_amplitude = 0.0;
        let synth = FrameSynth::new(&spec);
        let phonemes = [0usize, 2, 1];
        let durations = [2usize, 1, 3];
        let a = synth.render(&phonemes, &durations, 0, None);
        let b = synth.render(&phonemes, &durations, 1, None);
        let d = spec.frame_dim;
        let total: usize = durations.iter().sum();
        // Difference between speakers is one constant vector per frame.
        let first: Vec<f64> = (0..d).map(|j| a[j] - b[j]).collect();
        for t in 0..total {
            for j in 0..d {
                assert!((a[t * d + j] - b[t * d + j] - first[j]).abs() < 1e-12);
            }
        }
    }
}
