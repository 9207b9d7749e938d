//! Monotonic alignment search, duration extraction, length regulation, and
//! the deterministic duration predictor with zero-vector speaker
//! substitution for cross-lingual inference.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{PointwiseConv, LAYER_NORM_EPS};
use crate::params::{ParamBinding, ParamRegistry};
use crate::tape::{Tape, TensorId};

/// Log-score of each (phoneme, frame) pair: rows are phonemes, columns are
/// frames. A feasible monotone surjective alignment needs `frames >= phonemes`.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    scores: Vec<f64>,
    phonemes: usize,
    frames: usize,
}

impl ScoreMatrix {
    pub fn new(phonemes: usize, frames: usize, scores: Vec<f64>) -> Result<Self> {
        if phonemes == 0 || frames == 0 {
            return Err(Error::contract("score matrix: zero phonemes or frames".to_string()));
        }
        if scores.len() != phonemes * frames {
            return Err(Error::contract(format!(
                "score matrix: {phonemes}x{frames} needs {} scores, got {}",
                phonemes * frames,
                scores.len()
            )));
        }
        Ok(ScoreMatrix { scores, phonemes, frames })
    }

    pub fn phonemes(&self) -> usize {
        self.phonemes
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, phoneme: usize, frame: usize) -> f64 {
        self.scores[phoneme * self.frames + frame]
    }
}

/// Monotone surjective frame-to-phoneme assignment: `a(0) = 0`,
/// `a(T-1) = P-1`, and each step stays or advances by one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub assignment: Vec<usize>,
}

impl Alignment {
    /// Check the monotone-surjective invariants against a phoneme count.
    pub fn validate(&self, phonemes: usize) -> Result<()> {
        let t = self.assignment.len();
        if t == 0 {
            return Err(Error::contract("alignment: empty assignment".to_string()));
        }
        if self.assignment[0] != 0 || self.assignment[t - 1] != phonemes - 1 {
            return Err(Error::contract(format!(
                "alignment: boundary conditions violated (starts at {}, ends at {}, {} phonemes)",
                self.assignment[0],
                self.assignment[t - 1],
                phonemes
            )));
        }
        for w in self.assignment.windows(2) {
            if w[1] != w[0] && w[1] != w[0] + 1 {
                return Err(Error::contract(format!(
                    "alignment: non-monotone step {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn total_score(&self, scores: &ScoreMatrix) -> f64 {
        self.assignment
            .iter()
            .enumerate()
            .map(|(frame, &ph)| scores.get(ph, frame))
            .sum()
    }
}

/// Per-phoneme frame counts. Always positive, summing to the frame count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurationSequence(pub Vec<usize>);

impl DurationSequence {
    pub fn total_frames(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Best monotone surjective alignment under `scores`, by dynamic programming.
///
/// Ties are broken by walking frames left to right and preferring to stay on
/// the current phoneme, which concentrates frames on earlier phonemes.
pub fn mas_search(scores: &ScoreMatrix) -> Result<Alignment> {
    let (p, t) = (scores.phonemes(), scores.frames());
    if t < p {
        return Err(Error::InfeasibleAlignment { phonemes: p, frames: t });
    }

    // suffix[i][j]: best score over frames j..T-1 given a(j) = i.
    // Feasibility at (i, j): i <= j and j - i <= T - P.
    const NEG: f64 = f64::NEG_INFINITY;
    let mut suffix = vec![NEG; p * t];
    let feasible = |i: usize, j: usize| i <= j && j - i <= t - p;
    for j in (0..t).rev() {
        for i in 0..p {
            if !feasible(i, j) {
                continue;
            }
            let here = scores.get(i, j);
            if j == t - 1 {
                if i == p - 1 {
                    suffix[i * t + j] = here;
                }
                continue;
            }
            let stay = suffix[i * t + j + 1];
            let advance = if i + 1 < p { suffix[(i + 1) * t + j + 1] } else { NEG };
            let best = stay.max(advance);
            if best > NEG {
                suffix[i * t + j] = here + best;
            }
        }
    }
    if suffix[0] == NEG {
        return Err(Error::InfeasibleAlignment { phonemes: p, frames: t });
    }

    // Forward walk with exact suffix values; prefer staying on ties.
    let mut assignment = Vec::with_capacity(t);
    let mut i = 0usize;
    assignment.push(0);
    for j in 1..t {
        let stay = if feasible(i, j) { suffix[i * t + j] } else { NEG };
        let advance = if i + 1 < p && feasible(i + 1, j) {
            suffix[(i + 1) * t + j]
        } else {
            NEG
        };
        if advance > stay {
            i += 1;
        }
        assignment.push(i);
    }
    Ok(Alignment { assignment })
}

/// Enumeration bound for the brute-force oracle.
const BRUTE_MAX_PHONEMES: usize = 6;
const BRUTE_MAX_FRAMES: usize = 10;

/// Exhaustive oracle: enumerate every monotone surjective alignment and
/// return the max-score one under the same tie-break as `mas_search`
/// (lexicographically greatest duration sequence).
pub fn brute_force_mas(scores: &ScoreMatrix) -> Result<Alignment> {
    let (p, t) = (scores.phonemes(), scores.frames());
    if p > BRUTE_MAX_PHONEMES || t > BRUTE_MAX_FRAMES {
        return Err(Error::contract(format!(
            "brute_force_mas: {p}x{t} exceeds enumeration bounds {BRUTE_MAX_PHONEMES}x{BRUTE_MAX_FRAMES}"
        )));
    }
    if t < p {
        return Err(Error::InfeasibleAlignment { phonemes: p, frames: t });
    }

    // Enumerate duration compositions d_0..d_{P-1} >= 1 summing to T, in
    // lexicographically decreasing order so the first max wins ties.
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut durations = vec![1usize; p];
    fn rec(
        scores: &ScoreMatrix,
        durations: &mut Vec<usize>,
        idx: usize,
        remaining: usize,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let p = scores.phonemes();
        if idx == p - 1 {
            durations[idx] = remaining;
            let mut total = 0.0;
            let mut frame = 0;
            for (ph, &d) in durations.iter().enumerate() {
                for _ in 0..d {
                    total += scores.get(ph, frame);
                    frame += 1;
                }
            }
            let better = match best {
                None => true,
                Some((bs, _)) => total > *bs,
            };
            if better {
                *best = Some((total, durations.clone()));
            }
            return;
        }
        let max_here = remaining - (p - 1 - idx); // leave >=1 per later phoneme
        for d in (1..=max_here).rev() {
            durations[idx] = d;
            rec(scores, durations, idx + 1, remaining - d, best);
        }
    }
    rec(scores, &mut durations, 0, t, &mut best);

    let (_, d) = best.expect("at least one feasible alignment exists when T >= P");
    let mut assignment = Vec::with_capacity(t);
    for (ph, &dur) in d.iter().enumerate() {
        for _ in 0..dur {
            assignment.push(ph);
        }
    }
    Ok(Alignment { assignment })
}

/// Count frames per phoneme.
pub fn durations_from_alignment(alignment: &Alignment) -> DurationSequence {
    let phonemes = alignment.assignment.last().map(|&p| p + 1).unwrap_or(0);
    let mut d = vec![0usize; phonemes];
    for &p in &alignment.assignment {
        d[p] += 1;
    }
    DurationSequence(d)
}

/// Repeat row i of the text hidden `d[i]` times: `[P, h] -> [sum(d), h]`.
pub fn length_regulate(tape: &mut Tape, text_hidden: TensorId, d: &DurationSequence) -> Result<TensorId> {
    let s = tape.shape(text_hidden).to_vec();
    if s.len() != 2 || s[0] != d.len() {
        return Err(Error::contract(format!(
            "length_regulate: hidden shape {s:?} vs {} durations",
            d.len()
        )));
    }
    tape.repeat_rows(text_hidden, &d.0)
}

/// Speaker input to the duration predictor: the speaker's embedding during
/// intralingual inference, or a zero vector during cross-lingual inference.
#[derive(Debug, Clone, Copy)]
pub enum SpeakerConditioning {
    Embedding(TensorId),
    Zero,
}

/// Deterministic duration predictor: a pointwise conv stack with layer norm
/// mapping the conditioned text hidden to one log-duration per phoneme.
/// No sampling anywhere.
#[derive(Debug, Clone)]
pub struct DurationPredictor {
    pub name: String,
    pub hidden_dim: usize,
    pub depth: usize,
}

impl DurationPredictor {
    pub fn register(
        reg: &mut ParamRegistry,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        hidden_dim: usize,
        depth: usize,
    ) -> Result<Self> {
        let name = name.into();
        if depth == 0 {
            return Err(Error::config("duration predictor: depth must be positive".to_string()));
        }
        for l in 0..depth {
            reg.register_uniform(format!("{name}.conv{l}.w"), vec![hidden_dim, hidden_dim], hidden_dim, rng)?;
            reg.register_uniform(format!("{name}.conv{l}.b"), vec![hidden_dim], hidden_dim, rng)?;
            let mut gamma = vec![0.0; hidden_dim];
            for g in &mut gamma {
                *g = 1.0 + rng.random_range(-0.01..0.01);
            }
            reg.register(format!("{name}.ln{l}.gamma"), vec![hidden_dim], gamma)?;
            reg.register(format!("{name}.ln{l}.beta"), vec![hidden_dim], vec![0.0; hidden_dim])?;
        }
        reg.register_uniform(format!("{name}.proj.w"), vec![1, hidden_dim], hidden_dim, rng)?;
        reg.register_uniform(format!("{name}.proj.b"), vec![1], hidden_dim, rng)?;
        Ok(DurationPredictor { name, hidden_dim, depth })
    }

    fn stack(&self, tape: &mut Tape, bind: &ParamBinding, mut x: TensorId) -> Result<TensorId> {
        let h = self.hidden_dim;
        for l in 0..self.depth {
            let w = bind.id(&format!("{}.conv{l}.w", self.name))?;
            let b = bind.id(&format!("{}.conv{l}.b", self.name))?;
            let gamma = bind.id(&format!("{}.ln{l}.gamma", self.name))?;
            let beta = bind.id(&format!("{}.ln{l}.beta", self.name))?;
            let wt = tape.transpose(w)?;
            x = tape.matmul(x, wt)?;
            x = tape.add_row(x, b)?;
            // Normalize before the nonlinearity: a position whose relu
            // outputs all die would otherwise hit layer norm with zero
            // variance and blow up the backward pass.
            x = tape.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?;
            x = tape.relu(x)?;
        }
        let w = bind.id(&format!("{}.proj.w", self.name))?;
        let b = bind.id(&format!("{}.proj.b", self.name))?;
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        let y = tape.add_row(y, b)?;
        let p = tape.shape(y)[0];
        let _ = h;
        tape.reshape(y, vec![p])
    }
}

use rand::Rng;

/// Predict one log-duration per phoneme.
///
/// Conditioning is `speaker_projection(speaker term) + language_conv(language
/// embedding)` broadcast-added to the text hidden. With
/// `SpeakerConditioning::Zero` the speaker term is a zero vector, so the
/// output cannot depend on speaker identity.
pub fn ddp_forward(
    tape: &mut Tape,
    bind: &ParamBinding,
    predictor: &DurationPredictor,
    text_hidden: TensorId,
    speaker: SpeakerConditioning,
    speaker_projection: &PointwiseConv,
    language_embedding: TensorId,
    language_conv: &PointwiseConv,
) -> Result<TensorId> {
    let s = tape.shape(text_hidden).to_vec();
    if s.len() != 2 || s[1] != predictor.hidden_dim {
        return Err(Error::contract(format!(
            "ddp_forward: text hidden shape {s:?}, expected [len, {}]",
            predictor.hidden_dim
        )));
    }
    let spk_vec = match speaker {
        SpeakerConditioning::Embedding(e) => e,
        SpeakerConditioning::Zero => {
            tape.constant(vec![0.0; speaker_projection.in_channels], vec![speaker_projection.in_channels])?
        }
    };
    let spk_term = speaker_projection.apply_vec(tape, bind, spk_vec)?;
    let lang_term = language_conv.apply_vec(tape, bind, language_embedding)?;
    let x = tape.add_row(text_hidden, spk_term)?;
    let x = tape.add_row(x, lang_term)?;
    predictor.stack(tape, bind, x)
}

/// Mean squared error between predicted log-durations and the log of the
/// target durations.
pub fn duration_loss(tape: &mut Tape, predicted_log_d: TensorId, target: &DurationSequence) -> Result<TensorId> {
    let s = tape.shape(predicted_log_d).to_vec();
    if s.len() != 1 || s[0] != target.len() {
        return Err(Error::contract(format!(
            "duration_loss: predicted shape {s:?} vs {} target durations",
            target.len()
        )));
    }
    let log_target: Vec<f64> = target.0.iter().map(|&d| (d as f64).ln()).collect();
    let t = tape.constant(log_target, vec![target.len()])?;
    tape.mse(predicted_log_d, t)
}

/// Round predicted log-durations to whole frames, at least one per phoneme.
pub fn discretize_durations(predicted_log_d: &[f64]) -> Result<DurationSequence> {
    if let Some(bad) = predicted_log_d.iter().find(|v| !v.is_finite()) {
        return Err(Error::contract(format!(
            "discretize_durations: non-finite log-duration {bad}"
        )));
    }
    Ok(DurationSequence(
        predicted_log_d
            .iter()
            .map(|&ld| (ld.exp().round() as usize).max(1))
            .collect(),
    ))
}
