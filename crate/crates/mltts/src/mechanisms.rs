//! Adversarial and regularization machinery: the gradient reversal layer,
//! the speaker classifier trained against it, the ramp schedule for the
//! adversarial scale factor, and the speaker regularization loss that drives
//! the batch mean of hidden speaker representations to zero.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::PointwiseConv;
use crate::params::{ParamBinding, ParamRegistry};
use crate::tape::{Tape, TensorId};

/// Identity forward; multiplies the upstream gradient by `-lambda`.
#[derive(Debug, Clone, Copy)]
pub struct GradientReversal {
    pub lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Self {
        GradientReversal { lambda }
    }
}

/// Apply the gradient reversal layer. Forward output is bit-equal to `x`.
pub fn grl_apply(tape: &mut Tape, grl: &GradientReversal, x: TensorId) -> Result<TensorId> {
    tape.grad_reverse(x, grl.lambda)
}

/// Ramp of the adversarial scale factor over training progress:
/// `lambda(p) = 2 / (1 + exp(-steepness * p)) - 1`, clamped to `[0, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct LambdaSchedule {
    pub steepness: f64,
    pub total_steps: usize,
}

impl LambdaSchedule {
    pub fn new(steepness: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::config("lambda schedule: total_steps must be positive".to_string()));
        }
        if !steepness.is_finite() || steepness < 0.0 {
            return Err(Error::config(format!(
                "lambda schedule: steepness must be a nonnegative finite value, got {steepness}"
            )));
        }
        Ok(LambdaSchedule { steepness, total_steps })
    }

    /// Scale factor at `step`, with progress `p = step / total_steps`.
    pub fn lambda_at(&self, step: usize) -> f64 {
        let p = (step as f64 / self.total_steps as f64).min(1.0);
        let lam = 2.0 / (1.0 + (-self.steepness * p).exp()) - 1.0;
        lam.clamp(0.0, 1.0 - f64::EPSILON)
    }
}

/// Fully connected stack mapping a pooled text representation to speaker
/// logits. Two hidden layers of the input width, relu between them.
#[derive(Debug, Clone)]
pub struct SpeakerClassifier {
    pub name: String,
    pub input_dim: usize,
    pub num_speakers: usize,
    pub num_hidden_layers: usize,
}

impl SpeakerClassifier {
    pub fn register(
        reg: &mut ParamRegistry,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        input_dim: usize,
        num_speakers: usize,
    ) -> Result<Self> {
        let name = name.into();
        let num_hidden_layers = 2;
        for l in 0..num_hidden_layers {
            reg.register_uniform(format!("{name}.fc{l}.w"), vec![input_dim, input_dim], input_dim, rng)?;
            reg.register_uniform(format!("{name}.fc{l}.b"), vec![input_dim], input_dim, rng)?;
        }
        reg.register_uniform(format!("{name}.out.w"), vec![input_dim, num_speakers], input_dim, rng)?;
        reg.register_uniform(format!("{name}.out.b"), vec![num_speakers], input_dim, rng)?;
        Ok(SpeakerClassifier { name, input_dim, num_speakers, num_hidden_layers })
    }

    /// `x[n, input_dim] -> logits[n, num_speakers]`.
    pub fn logits(&self, tape: &mut Tape, bind: &ParamBinding, x: TensorId) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::contract(format!(
                "speaker classifier: input shape {s:?}, expected [n, {}]",
                self.input_dim
            )));
        }
        let mut h = x;
        for l in 0..self.num_hidden_layers {
            let w = bind.id(&format!("{}.fc{l}.w", self.name))?;
            let b = bind.id(&format!("{}.fc{l}.b", self.name))?;
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            h = tape.relu(h)?;
        }
        let w = bind.id(&format!("{}.out.w", self.name))?;
        let b = bind.id(&format!("{}.out.b", self.name))?;
        let out = tape.matmul(h, w)?;
        tape.add_row(out, b)
    }
}

/// Adversarial speaker classification loss for one utterance: mean-pool the
/// text hidden over positions, pass through the reversal layer, classify,
/// and score with cross-entropy.
pub fn speaker_classification_loss(
    tape: &mut Tape,
    bind: &ParamBinding,
    classifier: &SpeakerClassifier,
    text_hidden: TensorId,
    true_speaker: usize,
    grl: &GradientReversal,
) -> Result<TensorId> {
    let s = tape.shape(text_hidden).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::contract(format!(
            "speaker classification loss: text hidden shape {s:?} must be a nonempty [len, hidden]"
        )));
    }
    if true_speaker >= classifier.num_speakers {
        return Err(Error::contract(format!(
            "speaker id {true_speaker} out of range for {} speakers",
            classifier.num_speakers
        )));
    }
    let pooled = tape.mean_rows(text_hidden)?;
    let pooled = tape.reshape(pooled, vec![1, classifier.input_dim])?;
    let reversed = grl_apply(tape, grl, pooled)?;
    let logits = classifier.logits(tape, bind, reversed)?;
    let flat = tape.reshape(logits, vec![classifier.num_speakers])?;
    tape.cross_entropy(flat, true_speaker)
}

/// Batched form over already-pooled rows: `pooled[n, hidden]`, one label per
/// row; returns the mean cross-entropy.
pub fn speaker_classification_loss_batch(
    tape: &mut Tape,
    bind: &ParamBinding,
    classifier: &SpeakerClassifier,
    pooled: TensorId,
    labels: &[usize],
    grl: &GradientReversal,
) -> Result<TensorId> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classifier.num_speakers) {
        return Err(Error::contract(format!(
            "speaker id {bad} out of range for {} speakers",
            classifier.num_speakers
        )));
    }
    let reversed = grl_apply(tape, grl, pooled)?;
    let logits = classifier.logits(tape, bind, reversed)?;
    tape.cross_entropy_rows(logits, labels)
}

/// Speaker regularization loss: the L2 norm of the batch mean of projected
/// speaker embeddings.
pub fn speaker_regularization_loss(
    tape: &mut Tape,
    bind: &ParamBinding,
    projection: &PointwiseConv,
    batch_speaker_embeddings: &[TensorId],
) -> Result<TensorId> {
    if batch_speaker_embeddings.is_empty() {
        return Err(Error::contract(
            "speaker regularization loss: empty batch".to_string(),
        ));
    }
    let dim = projection.in_channels;
    let mut rows = Vec::with_capacity(batch_speaker_embeddings.len());
    for &e in batch_speaker_embeddings {
        let s = tape.shape(e).to_vec();
        if s != [dim] {
            return Err(Error::contract(format!(
                "speaker regularization loss: embedding shape {s:?}, expected [{dim}]"
            )));
        }
        rows.push(tape.reshape(e, vec![1, dim])?);
    }
    let stacked = tape.concat_rows(&rows)?;
    let projected = projection.apply(tape, bind, stacked)?;
    let mean = tape.mean_rows(projected)?;
    tape.l2_norm(mean)
}
