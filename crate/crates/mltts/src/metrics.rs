//! Evaluation metrics: between/within-language scatter of hidden speaker
//! representations, cross-lingual duration consistency, and a linear probe
//! for residual speaker information in text representations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{InferenceMode, InferenceRequest, TtsModel};
use crate::tape::Tape;

const SCATTER_EPS: f64 = 1e-9;

/// Between-language scatter over within-language scatter of one vector per
/// speaker. High values mean the representations cluster by language.
pub fn scatter_ratio(reps: &[Vec<f64>], language_labels: &[usize]) -> Result<f64> {
    if reps.len() != language_labels.len() {
        return Err(Error::contract(format!(
            "scatter_ratio: {} vectors but {} labels",
            reps.len(),
            language_labels.len()
        )));
    }
    if reps.is_empty() {
        return Err(Error::contract("scatter_ratio: no vectors".to_string()));
    }
    let dim = reps[0].len();
    if reps.iter().any(|r| r.len() != dim) {
        return Err(Error::contract("scatter_ratio: inconsistent vector widths".to_string()));
    }
    let num_languages = language_labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; num_languages];
    for &l in language_labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::contract(
            "scatter_ratio: need at least two languages".to_string(),
        ));
    }

    let n = reps.len() as f64;
    let mut global = vec![0.0; dim];
    for r in reps {
        for (g, v) in global.iter_mut().zip(r) {
            *g += v;
        }
    }
    for g in &mut global {
        *g /= n;
    }

    let mut centroids = vec![vec![0.0; dim]; num_languages];
    for (r, &l) in reps.iter().zip(language_labels) {
        for (c, v) in centroids[l].iter_mut().zip(r) {
            *c += v;
        }
    }
    for (c, &cnt) in centroids.iter_mut().zip(&counts) {
        if cnt > 0 {
            for v in c.iter_mut() {
                *v /= cnt as f64;
            }
        }
    }

    // Between: count-weighted mean squared distance of language centroids to
    // the global centroid.
    let mut between = 0.0;
    for (c, &cnt) in centroids.iter().zip(&counts) {
        if cnt == 0 {
            continue;
        }
        let d2: f64 = c.iter().zip(&global).map(|(a, b)| (a - b) * (a - b)).sum();
        between += cnt as f64 * d2;
    }
    between /= n;

    // Within: mean squared distance of each vector to its language centroid.
    let mut within = 0.0;
    for (r, &l) in reps.iter().zip(language_labels) {
        within += r
            .iter()
            .zip(&centroids[l])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    within /= n;

    Ok(between / (within + SCATTER_EPS))
}

/// Maximum elementwise difference between cross-lingual duration sequences
/// across the given speakers, for one text.
pub fn duration_consistency(
    model: &TtsModel,
    phoneme_ids: &[usize],
    language_id: usize,
    speakers: &[usize],
) -> Result<f64> {
    if speakers.len() < 2 {
        return Err(Error::contract(
            "duration_consistency: need at least two speakers".to_string(),
        ));
    }
    let mut durations = Vec::with_capacity(speakers.len());
    for &s in speakers {
        let out = model.infer(&InferenceRequest {
            phoneme_ids: phoneme_ids.to_vec(),
            language_id,
            speaker_id: s,
            mode: InferenceMode::ForceCrosslingual,
        })?;
        durations.push(out.durations.0);
    }
    let mut max_dev = 0.0f64;
    for a in &durations {
        for b in &durations {
            for (x, y) in a.iter().zip(b) {
                max_dev = max_dev.max((*x as f64 - *y as f64).abs());
            }
        }
    }
    Ok(max_dev)
}

/// Accuracy of a freshly trained linear softmax probe predicting the speaker
/// from frozen mean-pooled text-encoder outputs.
pub fn speaker_probe_accuracy(model: &TtsModel, corpus: &Corpus) -> Result<f64> {
    let n = corpus.len();
    if n == 0 {
        return Err(Error::EmptyCorpus("probe needs utterances".to_string()));
    }
    let h = model.dims.hidden_dim;
    let s = model.meta.num_speakers();
    let mut features = Vec::with_capacity(n * h);
    let mut labels = Vec::with_capacity(n);
    for u in &corpus.utterances {
        features.extend(model.pooled_text_hidden(&u.phoneme_ids, u.language_id)?);
        labels.push(u.speaker_id);
    }

    // Full-batch softmax regression from zero init; deterministic.
    let mut w = vec![0.0; h * s];
    let mut b = vec![0.0; s];
    let lr = 0.5;
    for _ in 0..300 {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone(), vec![n, h])?;
        let wt = tape.leaf(w.clone(), vec![h, s], true)?;
        let bt = tape.leaf(b.clone(), vec![s], true)?;
        let logits = tape.matmul(x, wt)?;
        let logits = tape.add_row(logits, bt)?;
        let loss = tape.cross_entropy_rows(logits, &labels)?;
        tape.backward(loss)?;
        let gw = tape.grad(wt).expect("probe weight grad");
        let gb = tape.grad(bt).expect("probe bias grad");
        for (wi, g) in w.iter_mut().zip(gw) {
            *wi -= lr * g;
        }
        for (bi, g) in b.iter_mut().zip(gb) {
            *bi -= lr * g;
        }
    }

    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let x = &features[i * h..(i + 1) * h];
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..s {
            let mut v = b[c];
            for j in 0..h {
                v += x[j] * w[j * s + c];
            }
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Aggregate evaluation of a trained model on its corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scatter_ratio: f64,
    pub duration_consistency_max_dev: f64,
    pub speaker_probe_accuracy: f64,
    /// Mean predicted cross-lingual duration per language.
    pub per_language_duration_means: Vec<f64>,
    pub enable_dat: bool,
    pub enable_reg_loss: bool,
    pub share_speaker_projection: bool,
    pub seed: u64,
}

/// Number of sampled texts per language for duration consistency.
const EVAL_TEXTS_PER_LANGUAGE: usize = 10;

/// Evaluate hidden-speaker-representation scatter, zero-vector duration
/// consistency over seeded random texts, and the speaker probe.
pub fn evaluate(model: &TtsModel, corpus: &Corpus) -> Result<MetricsReport> {
    let meta = &model.meta;
    let reps: Vec<Vec<f64>> = (0..meta.num_speakers())
        .map(|s| model.hidden_speaker_representation(s))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = (0..meta.num_speakers()).map(|s| meta.native_language(s)).collect();
    let scatter = scatter_ratio(&reps, &labels)?;

    let speakers: Vec<usize> = (0..meta.num_speakers()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0xE7A1);
    let mut max_dev = 0.0f64;
    let mut per_language_duration_means = Vec::with_capacity(meta.num_languages);
    for lang in 0..meta.num_languages {
        let range = lang * meta.phonemes_per_language..(lang + 1) * meta.phonemes_per_language;
        let mut dur_sum = 0usize;
        let mut dur_count = 0usize;
        for _ in 0..EVAL_TEXTS_PER_LANGUAGE {
            let len = rng.random_range(4..=8);
            let text: Vec<usize> = (0..len).map(|_| rng.random_range(range.clone())).collect();
            if speakers.len() >= 2 {
                max_dev = max_dev.max(duration_consistency(model, &text, lang, &speakers)?);
            }
            let out = model.infer(&InferenceRequest {
                phoneme_ids: text,
                language_id: lang,
                speaker_id: speakers[0],
                mode: InferenceMode::ForceCrosslingual,
            })?;
            dur_sum += out.durations.total_frames();
            dur_count += out.durations.len();
        }
        per_language_duration_means.push(dur_sum as f64 / dur_count as f64);
    }

    let probe = speaker_probe_accuracy(model, corpus)?;

    Ok(MetricsReport {
        scatter_ratio: scatter,
        duration_consistency_max_dev: max_dev,
        speaker_probe_accuracy: probe,
        per_language_duration_means,
        enable_dat: model.config.enable_dat,
        enable_reg_loss: model.config.enable_reg_loss,
        share_speaker_projection: model.config.share_speaker_projection,
        seed: model.config.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_give_zero_ratio() {
        let reps = vec![vec![1.0, 2.0]; 4];
        let labels = vec![0, 0, 1, 1];
        assert_eq!(scatter_ratio(&reps, &labels).unwrap(), 0.0);
    }

    #[test]
    fn zero_within_spread_gives_huge_ratio() {
        let reps = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![-1.0, 0.0]];
        let labels = vec![0, 0, 1, 1];
        let r = scatter_ratio(&reps, &labels).unwrap();
        assert!(r > 1e8, "{r}");
    }

    #[test]
    fn hand_computed_two_language_case() {
        // Centroids (1, 0.1) and (-1, -0.1); between = 1.01, within = 0.01.
        let reps = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.2],
            vec![-1.0, 0.0],
            vec![-1.0, -0.2],
        ];
        let labels = vec![0, 0, 1, 1];
        let r = scatter_ratio(&reps, &labels).unwrap();
        let expect = 1.01 / (0.01 + 1e-9);
        assert!((r - expect).abs() < 1e-6, "{r} vs {expect}");
        assert!((r - 100.0).abs() < 2.0, "ratio should be near 100, got {r}");
    }

    #[test]
    fn single_language_is_rejected() {
        let reps = vec![vec![0.0], vec![1.0]];
        assert!(scatter_ratio(&reps, &[0, 0]).is_err());
    }

    #[test]
    fn translation_invariance() {
        let base = vec![
            vec![0.3, -1.0],
            vec![0.5, 0.4],
            vec![-0.8, 0.1],
            vec![0.0, 0.9],
        ];
        let labels = vec![0, 1, 0, 1];
        let r1 = scatter_ratio(&base, &labels).unwrap();
        let shifted: Vec<Vec<f64>> =
            base.iter().map(|v| vec![v[0] + 17.0, v[1] - 4.0]).collect();
        let r2 = scatter_ratio(&shifted, &labels).unwrap();
        assert!((r1 - r2).abs() < 1e-6 * r1.max(1.0), "{r1} vs {r2}");
    }
}
