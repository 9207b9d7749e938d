//! Checkpoint persistence: versioned, length-prefixed named arrays with a
//! whole-file SHA-256 checksum.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8  bytes  "MLTTSCKP"
//! version u32
//! config  u32 length + UTF-8 flat key=value text
//! meta    u32 length + UTF-8 JSON (corpus-shape metadata)
//! step    u64
//! rng     u64 (run seed echo; batching derives per-epoch seeds from it)
//! arrays  u32 count, then per array:
//!         u16 name length + name bytes
//!         u8 rank + rank * u32 dims
//!         u64 value count + count * f64 values
//! digest  32 bytes = SHA-256 of everything above
//! ```
//!
//! Model parameters are stored under their registry names; optimizer
//! momentum buffers under `opt.velocity/<name>` so a resumed run continues
//! the uninterrupted trajectory exactly.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{parse_config, TrainingConfig};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{ModelMeta, TtsModel};
use crate::trainer::Trainer;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MLTTSCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const VELOCITY_PREFIX: &str = "opt.velocity/";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// A fully parsed checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainingConfig,
    pub meta: ModelMeta,
    pub step: usize,
    pub rng_seed: u64,
    pub params: Vec<NamedArray>,
    pub velocity: Vec<NamedArray>,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_array(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    let nb = name.as_bytes();
    buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
    buf.extend_from_slice(nb);
    buf.push(shape.len() as u8);
    for &d in shape {
        push_u32(buf, d as u32);
    }
    push_u64(buf, values.len() as u64);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::CheckpointIntegrity(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Serialize the trainer's model, optimizer state, and progress.
pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let model = &trainer.model;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);

    let config_text = model.config.to_text();
    push_u32(&mut buf, config_text.len() as u32);
    buf.extend_from_slice(config_text.as_bytes());

    let meta_json = serde_json::to_string(&model.meta).expect("meta serializes");
    push_u32(&mut buf, meta_json.len() as u32);
    buf.extend_from_slice(meta_json.as_bytes());

    push_u64(&mut buf, trainer.step as u64);
    push_u64(&mut buf, model.config.seed);

    let entries = model.registry.entries();
    let velocity = trainer.optimizer.velocity();
    push_u32(&mut buf, (entries.len() + velocity.len()) as u32);
    for e in entries {
        push_array(&mut buf, &e.name, &e.shape, &e.values);
    }
    for (e, v) in entries.iter().zip(velocity) {
        push_array(&mut buf, &format!("{VELOCITY_PREFIX}{}", e.name), &e.shape, v);
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

/// Parse and verify a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let data = fs::read(&path)?;
    if data.len() < CHECKPOINT_MAGIC.len() + 4 + 32 {
        return Err(Error::CheckpointIntegrity(format!(
            "file too short ({} bytes)",
            data.len()
        )));
    }
    let (body, digest) = data.split_at(data.len() - 32);
    let computed = Sha256::digest(body);
    if computed.as_slice() != digest {
        return Err(Error::CheckpointIntegrity(
            "checksum mismatch: file is corrupt or was modified".to_string(),
        ));
    }

    let mut r = Reader { data: body, pos: 0 };
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointIntegrity("bad magic bytes".to_string()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|e| Error::CheckpointIntegrity(format!("config is not UTF-8: {e}")))?;
    let config = parse_config(config_text)?;
    let meta_len = r.u32()? as usize;
    let meta: ModelMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::CheckpointIntegrity(format!("bad metadata: {e}")))?;
    let step = r.u64()? as usize;
    let rng_seed = r.u64()?;

    let count = r.u32()? as usize;
    let mut params = Vec::new();
    let mut velocity = Vec::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::CheckpointIntegrity(format!("array name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = r.u64()? as usize;
        if n != shape.iter().product::<usize>() {
            return Err(Error::CheckpointIntegrity(format!(
                "array {name}: shape {shape:?} does not match value count {n}"
            )));
        }
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        match name.strip_prefix(VELOCITY_PREFIX) {
            Some(base) => velocity.push(NamedArray { name: base.to_string(), shape, values }),
            None => params.push(NamedArray { name, shape, values }),
        }
    }
    if r.pos != body.len() {
        return Err(Error::CheckpointIntegrity(format!(
            "{} trailing bytes after arrays",
            body.len() - r.pos
        )));
    }

    Ok(Checkpoint { version, config, meta, step, rng_seed, params, velocity })
}

impl Checkpoint {
    /// Rebuild the model with every registry parameter restored bit-exactly.
    pub fn into_model(&self) -> Result<TtsModel> {
        let mut model = TtsModel::new(&self.config, &self.meta)?;
        if self.params.len() != model.registry.len() {
            return Err(Error::CheckpointIntegrity(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.registry.len()
            )));
        }
        for a in &self.params {
            let entry = model.registry.get(&a.name).ok_or_else(|| {
                Error::CheckpointIntegrity(format!("unknown parameter {}", a.name))
            })?;
            if entry.shape != a.shape {
                return Err(Error::CheckpointIntegrity(format!(
                    "parameter {}: shape {:?} in file, {:?} in model",
                    a.name, a.shape, entry.shape
                )));
            }
            model.registry.set(&a.name, a.values.clone())?;
        }
        Ok(model)
    }

    /// Rebuild a trainer positioned at the stored step, with optimizer state.
    pub fn into_trainer(&self, corpus: Corpus) -> Result<Trainer> {
        let model = self.into_model()?;
        let mut trainer = Trainer::from_model(model, corpus)?;
        trainer.step = self.step;
        if !self.velocity.is_empty() {
            if self.velocity.len() != trainer.model.registry.len() {
                return Err(Error::CheckpointIntegrity(format!(
                    "checkpoint has {} velocity buffers, model expects {}",
                    self.velocity.len(),
                    trainer.model.registry.len()
                )));
            }
            for v in &self.velocity {
                let idx = trainer.model.registry.position(&v.name).ok_or_else(|| {
                    Error::CheckpointIntegrity(format!("unknown velocity buffer {}", v.name))
                })?;
                trainer.optimizer.velocity_mut()[idx] = v.values.clone();
            }
        }
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainingConfig;
    use crate::corpus::{generate_corpus, SyntheticCorpusSpec};
    use crate::model::{InferenceMode, InferenceRequest};

    fn small_setup() -> (TrainingConfig, Corpus) {
        let corpus = generate_corpus(&SyntheticCorpusSpec {
            num_languages: 2,
            speakers_per_language: 2,
            phonemes_per_language: 4,
            utterances_per_speaker: 2,
            frame_dim: 4,
            seed: 3,
            noise_amplitude: 0.01,
        })
        .unwrap();
        let mut cfg = TrainingConfig::default();
        cfg.total_steps = 4;
        cfg.batch_size = 4;
        (cfg, corpus)
    }

    #[test]
    fn round_trip_preserves_infer_bit_exactly() {
        let (cfg, corpus) = small_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut trainer = Trainer::new(&cfg, corpus.clone()).unwrap();
        trainer.train_step().unwrap();
        save_checkpoint(&trainer, &path).unwrap();

        let loaded = load_checkpoint(&path).unwrap().into_model().unwrap();
        let req = InferenceRequest {
            phoneme_ids: vec![4, 5, 6],
            language_id: 1,
            speaker_id: 0,
            mode: InferenceMode::Auto,
        };
        let a = trainer.model.infer(&req).unwrap();
        let b = loaded.infer(&req).unwrap();
        assert_eq!(a.durations, b.durations);
        assert_eq!(a.frames.len(), b.frames.len());
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn tampered_file_is_rejected_whole() {
        let (cfg, corpus) = small_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let trainer = Trainer::new(&cfg, corpus).unwrap();
        save_checkpoint(&trainer, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Flip one byte in the middle (inside some array's shape/values).
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointIntegrity(_))
        ));
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let (cfg, corpus) = small_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let trainer = Trainer::new(&cfg, corpus).unwrap();
        save_checkpoint(&trainer, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 3]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointIntegrity(_))
        ));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let (cfg, corpus) = small_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let trainer = Trainer::new(&cfg, corpus).unwrap();
        save_checkpoint(&trainer, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        // Bump the version field and re-sign the file.
        bytes[8] = 99;
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, 99);
                assert_eq!(expected, CHECKPOINT_VERSION);
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_breakdown() {
        let (mut cfg, corpus) = small_setup();
        cfg.total_steps = 6;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");

        // Uninterrupted run, recording every breakdown.
        let mut full = Trainer::new(&cfg, corpus.clone()).unwrap();
        let mut breakdowns = Vec::new();
        full.run(|_, b| breakdowns.push(*b)).unwrap();

        // Interrupted at step 3.
        let mut partial = Trainer::new(&cfg, corpus.clone()).unwrap();
        for _ in 0..3 {
            partial.train_step().unwrap();
        }
        save_checkpoint(&partial, &path).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap().into_trainer(corpus).unwrap();
        assert_eq!(resumed.step, 3);
        for expect in &breakdowns[3..] {
            let got = resumed.train_step().unwrap();
            assert_eq!(got, *expect);
        }
    }
}
