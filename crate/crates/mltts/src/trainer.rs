//! Training loop: per-step adversarial scale from the ramp schedule,
//! SGD-with-momentum updates over the parameter registry, deterministic
//! seeded batching, and side-by-side ablation runs.

use serde::Serialize;

use crate::config::TrainingConfig;
use crate::corpus::{make_batches, Corpus};
use crate::error::{Error, Result};
use crate::mechanisms::LambdaSchedule;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{LossBreakdown, ModelMeta, TtsModel};

/// SGD with momentum over the registry, in registry order, with a linear
/// learning-rate decay from `learning_rate` down to
/// `learning_rate * final_fraction` at the last step.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub final_fraction: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    total_steps: usize,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(config: &TrainingConfig, model: &TtsModel) -> Self {
        let velocity = model
            .registry
            .entries()
            .iter()
            .map(|e| vec![0.0; e.values.len()])
            .collect();
        SgdMomentum {
            learning_rate: config.learning_rate,
            final_fraction: config.lr_final_fraction,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            total_steps: config.total_steps.max(1),
            velocity,
        }
    }

    /// Learning rate used for the update at `step`.
    pub fn rate_at(&self, step: usize) -> f64 {
        let p = (step as f64 / self.total_steps as f64).min(1.0);
        self.learning_rate * (1.0 - (1.0 - self.final_fraction) * p)
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut Vec<Vec<f64>> {
        &mut self.velocity
    }

    fn apply(&mut self, model: &mut TtsModel, grads: &[Vec<f64>], step: usize) {
        let lr = self.rate_at(step);
        let wd = self.weight_decay;
        for (i, g) in grads.iter().enumerate() {
            let v = &mut self.velocity[i];
            let values = model.registry.values_mut(i);
            for j in 0..g.len() {
                v[j] = self.momentum * v[j] + g[j] + wd * values[j];
                values[j] -= lr * v[j];
            }
        }
    }
}

/// Owns one training run: model, optimizer state, schedule, and step index.
pub struct Trainer {
    pub model: TtsModel,
    pub corpus: Corpus,
    pub schedule: LambdaSchedule,
    pub optimizer: SgdMomentum,
    pub step: usize,
}

/// Mixes the run seed with an epoch index for batch shuffling.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Trainer {
    pub fn new(config: &TrainingConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        corpus.validate()?;
        let meta = ModelMeta::from_corpus_spec(&corpus.spec);
        let model = TtsModel::new(config, &meta)?;
        Self::from_model(model, corpus)
    }

    /// Resume from an existing model (e.g. a loaded checkpoint) at `step` 0;
    /// callers restore `step` and optimizer state separately.
    pub fn from_model(model: TtsModel, corpus: Corpus) -> Result<Self> {
        let cfg = &model.config;
        // A zero-step run never consults the schedule; keep it constructible.
        let schedule = LambdaSchedule::new(cfg.lambda_steepness, cfg.total_steps.max(1))?;
        let optimizer = SgdMomentum::new(cfg, &model);
        Ok(Trainer { model, corpus, schedule, optimizer, step: 0 })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.corpus.len().div_ceil(self.model.config.batch_size)
    }

    /// The batch used at `step`, derived deterministically from the run seed.
    pub fn batch_for_step(&self, step: usize) -> Result<Vec<usize>> {
        let bpe = self.batches_per_epoch();
        let epoch = step / bpe;
        let batches = make_batches(
            &self.corpus,
            self.model.config.batch_size,
            epoch_seed(self.model.config.seed, epoch),
        )?;
        Ok(batches[step % bpe].clone())
    }

    /// Run one optimization step: set the adversarial scale from the
    /// schedule, forward, backward, apply SGD-with-momentum, and return the
    /// breakdown computed before the update.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let step = self.step;
        if step >= self.model.config.total_steps {
            return Err(Error::contract(format!(
                "train_step: step {step} is past total_steps {}",
                self.model.config.total_steps
            )));
        }
        self.model.grl.lambda = self.schedule.lambda_at(step);
        let indices = self.batch_for_step(step)?;
        let batch: Vec<&crate::corpus::Utterance> =
            indices.iter().map(|&i| &self.corpus.utterances[i]).collect();
        let mut graph = self.model.forward_train(&batch)?;
        let breakdown = graph.breakdown;
        if !breakdown.is_finite() {
            return Err(Error::TrainingDiverged { step, breakdown });
        }
        graph.tape.backward(graph.loss)?;
        let grads: Vec<Vec<f64>> = graph
            .binding
            .ids()
            .iter()
            .map(|&id| graph.tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
            .collect();
        drop(graph);
        self.optimizer.apply(&mut self.model, &grads, step);
        self.step += 1;
        Ok(breakdown)
    }

    /// Run steps until `self.model.config.total_steps`, invoking `on_step`
    /// after each one.
    pub fn run(&mut self, mut on_step: impl FnMut(usize, &LossBreakdown)) -> Result<()> {
        while self.step < self.model.config.total_steps {
            let step = self.step;
            let breakdown = self.train_step()?;
            on_step(step, &breakdown);
        }
        Ok(())
    }
}

/// One ablation variant: a label plus config overrides applied to the base.
#[derive(Debug, Clone)]
pub struct AblationVariant {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantReport {
    pub label: String,
    pub metrics: MetricsReport,
    pub final_loss: LossBreakdown,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub variants: Vec<VariantReport>,
}

/// Train every variant on the same corpus and seed, then evaluate each.
/// Variants may only differ in configuration; the corpus is shared.
pub fn ablation_run(
    base: &TrainingConfig,
    corpus: &Corpus,
    variants: &[AblationVariant],
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::contract("ablation_run: no variants".to_string()));
    }
    let mut reports = Vec::with_capacity(variants.len());
    for v in variants {
        let mut cfg = base.clone();
        for (k, val) in &v.overrides {
            cfg.set(k, val)?;
        }
        cfg.validate()?;
        let mut trainer = Trainer::new(&cfg, corpus.clone())?;
        let mut last = None;
        trainer.run(|_, b| last = Some(*b))?;
        let metrics = evaluate(&trainer.model, &trainer.corpus)?;
        reports.push(VariantReport {
            label: v.label.clone(),
            metrics,
            final_loss: last.unwrap_or(LossBreakdown {
                reconstruction: 0.0,
                duration: 0.0,
                speaker_cls: 0.0,
                speaker_reg: 0.0,
                total: 0.0,
                lambda: 0.0,
            }),
        });
    }
    Ok(AblationReport { variants: reports })
}

/// CSV header for per-step loss logs.
pub const LOSS_CSV_HEADER: &str = "step,lambda,reconstruction,duration,speaker_cls,speaker_reg,total";

/// One CSV row for a step's breakdown.
pub fn loss_csv_row(step: usize, b: &LossBreakdown) -> String {
    format!(
        "{step},{},{},{},{},{},{}",
        b.lambda, b.reconstruction, b.duration, b.speaker_cls, b.speaker_reg, b.total
    )
}
