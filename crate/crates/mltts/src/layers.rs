//! Neural building blocks: embedding tables, pointwise (kernel-1)
//! convolutions, transformer encoder blocks with a clipped relative-position
//! bias, and the parameter generator that maps a language embedding to the
//! full flat parameter vector of the text encoder blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamBinding, ParamRegistry};
use crate::tape::{Tape, TensorId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Learnable lookup table of fixed-width embedding rows.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub name: String,
    pub num_entries: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn register(
        reg: &mut ParamRegistry,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        num_entries: usize,
        dim: usize,
    ) -> Result<Self> {
        let name = name.into();
        reg.register_uniform(name.clone(), vec![num_entries, dim], dim, rng)?;
        Ok(EmbeddingTable { name, num_entries, dim })
    }

    /// Rows of the table at `ids`; gradients scatter-add back to the rows.
    pub fn lookup(&self, tape: &mut Tape, bind: &ParamBinding, ids: &[usize]) -> Result<TensorId> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.num_entries) {
            return Err(Error::contract(format!(
                "embedding lookup: id {bad} out of range for table {} of {} entries",
                self.name, self.num_entries
            )));
        }
        let table = bind.id(&self.name)?;
        tape.gather_rows(table, ids)
    }

    /// A single row as a rank-1 `[dim]` tensor.
    pub fn row(&self, tape: &mut Tape, bind: &ParamBinding, id: usize) -> Result<TensorId> {
        let m = self.lookup(tape, bind, &[id])?;
        tape.reshape(m, vec![self.dim])
    }
}

/// Kernel-size-1 convolution: an affine map applied independently at each
/// sequence position. Weight is stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct PointwiseConv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PointwiseConv {
    pub fn register(
        reg: &mut ParamRegistry,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let name = name.into();
        reg.register_uniform(format!("{name}.w"), vec![out_channels, in_channels], in_channels, rng)?;
        reg.register_uniform(format!("{name}.b"), vec![out_channels], in_channels, rng)?;
        Ok(PointwiseConv { name, in_channels, out_channels })
    }

    /// `x[len, in] -> [len, out]` with `out[t] = W x[t] + b`.
    pub fn apply(&self, tape: &mut Tape, bind: &ParamBinding, x: TensorId) -> Result<TensorId> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.in_channels {
            return Err(Error::contract(format!(
                "pointwise conv {}: input shape {s:?} does not have {} channels",
                self.name, self.in_channels
            )));
        }
        let w = bind.id(&format!("{}.w", self.name))?;
        let b = bind.id(&format!("{}.b", self.name))?;
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        tape.add_row(y, b)
    }

    /// Apply to a single rank-1 vector: `[in] -> [out]`.
    pub fn apply_vec(&self, tape: &mut Tape, bind: &ParamBinding, v: TensorId) -> Result<TensorId> {
        let s = tape.shape(v).to_vec();
        if s.len() != 1 || s[0] != self.in_channels {
            return Err(Error::contract(format!(
                "pointwise conv {}: input shape {s:?} does not have {} channels",
                self.name, self.in_channels
            )));
        }
        let m = tape.reshape(v, vec![1, self.in_channels])?;
        let y = self.apply(tape, bind, m)?;
        tape.reshape(y, vec![self.out_channels])
    }
}

/// Architecture of the transformer text encoder whose weights come from the
/// parameter generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextEncoderSpec {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Relative-position bias window: logits at offset `o` share the bucket
    /// for `clamp(o, -window, window)`.
    pub rel_window: usize,
}

impl TextEncoderSpec {
    pub fn new(num_blocks: usize, hidden_dim: usize, num_heads: usize, ffn_dim: usize, rel_window: usize) -> Result<Self> {
        if num_heads == 0 || hidden_dim % num_heads != 0 {
            return Err(Error::config(format!(
                "hidden_dim {hidden_dim} must be divisible by num_heads {num_heads}"
            )));
        }
        Ok(TextEncoderSpec { num_blocks, hidden_dim, num_heads, ffn_dim, rel_window })
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// One named segment of the generated flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// fan-in used to scale this segment's initialization.
    pub fan_in: usize,
}

/// Name -> (shape, offset) map over the generated flat vector. Identical for
/// every language; only the values differ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub entries: Vec<LayoutEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Layout of all transformer-block parameters for `spec`, in a fixed order.
pub fn encoder_layout(spec: &TextEncoderSpec) -> ParamLayout {
    let h = spec.hidden_dim;
    let f = spec.ffn_dim;
    let buckets = 2 * spec.rel_window + 1;
    let mut entries = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>, fan_in: usize, offset: &mut usize| {
        let numel: usize = shape.iter().product();
        entries.push(LayoutEntry { name, shape, offset: *offset, fan_in });
        *offset += numel;
    };
    for b in 0..spec.num_blocks {
        // No key bias: a constant added to every key shifts each score row
        // uniformly, which softmax cancels, leaving a zero-gradient parameter.
        push(format!("block{b}.attn.wq"), vec![h, h], h, &mut offset);
        push(format!("block{b}.attn.wq.bias"), vec![h], h, &mut offset);
        push(format!("block{b}.attn.wk"), vec![h, h], h, &mut offset);
        push(format!("block{b}.attn.wv"), vec![h, h], h, &mut offset);
        push(format!("block{b}.attn.wv.bias"), vec![h], h, &mut offset);
        push(format!("block{b}.attn.wo"), vec![h, h], h, &mut offset);
        push(format!("block{b}.attn.wo.bias"), vec![h], h, &mut offset);
        push(format!("block{b}.attn.rel_bias"), vec![spec.num_heads, buckets], h, &mut offset);
        push(format!("block{b}.ln1.gamma"), vec![h], 1, &mut offset);
        push(format!("block{b}.ln1.beta"), vec![h], h, &mut offset);
        push(format!("block{b}.ffn.w1"), vec![h, f], h, &mut offset);
        push(format!("block{b}.ffn.b1"), vec![f], h, &mut offset);
        push(format!("block{b}.ffn.w2"), vec![f, h], f, &mut offset);
        push(format!("block{b}.ffn.b2"), vec![h], f, &mut offset);
        push(format!("block{b}.ln2.gamma"), vec![h], 1, &mut offset);
        push(format!("block{b}.ln2.beta"), vec![h], h, &mut offset);
    }
    ParamLayout { entries, total: offset }
}

/// Flat generated parameter vector plus its layout.
#[derive(Debug, Clone)]
pub struct GeneratedParameters {
    pub flat: TensorId,
    pub layout: ParamLayout,
}

impl GeneratedParameters {
    /// Slice one named segment out of the flat vector.
    pub fn slice(&self, tape: &mut Tape, name: &str) -> Result<TensorId> {
        let e = self
            .layout
            .entry(name)
            .ok_or_else(|| Error::config(format!("generated layout has no entry {name}")))?;
        tape.slice_flat(self.flat, e.offset, e.shape.clone())
    }
}

/// Affine map from a language embedding to the complete flat parameter
/// vector of the text encoder blocks.
#[derive(Debug, Clone)]
pub struct ParameterGenerator {
    pub name: String,
    pub embed_dim: usize,
    pub layout: ParamLayout,
}

impl ParameterGenerator {
    pub fn register(
        reg: &mut ParamRegistry,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        embed_dim: usize,
        spec: &TextEncoderSpec,
    ) -> Result<Self> {
        let name = name.into();
        let layout = encoder_layout(spec);
        reg.register_uniform(format!("{name}.weight"), vec![layout.total, embed_dim], embed_dim, rng)?;
        // The base vector is the "default encoder": each segment uses its own
        // fan-in so generated encoders start well-scaled. Layer-norm gammas
        // start near 1.
        let mut base = vec![0.0; layout.total];
        for e in &layout.entries {
            let numel: usize = e.shape.iter().product();
            if e.name.ends_with("gamma") {
                for v in &mut base[e.offset..e.offset + numel] {
                    *v = 1.0 + rng.random_range(-0.01..0.01);
                }
            } else {
                let bound = 1.0 / (e.fan_in.max(1) as f64).sqrt();
                for v in &mut base[e.offset..e.offset + numel] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        reg.register(format!("{name}.base"), vec![layout.total], base)?;
        Ok(ParameterGenerator { name, embed_dim, layout })
    }

    /// `flat = weight @ embedding + base`. Pure function of its inputs.
    pub fn generate(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        language_embedding: TensorId,
    ) -> Result<GeneratedParameters> {
        let s = tape.shape(language_embedding).to_vec();
        if s.len() != 1 || s[0] != self.embed_dim {
            return Err(Error::contract(format!(
                "parameter generator {}: embedding shape {s:?}, expected [{}]",
                self.name, self.embed_dim
            )));
        }
        let w = bind.id(&format!("{}.weight", self.name))?;
        let base = bind.id(&format!("{}.base", self.name))?;
        let col = tape.reshape(language_embedding, vec![self.embed_dim, 1])?;
        let prod = tape.matmul(w, col)?;
        let flat = tape.reshape(prod, vec![self.layout.total])?;
        let flat = tape.add(flat, base)?;
        Ok(GeneratedParameters { flat, layout: self.layout.clone() })
    }
}

/// Tape ids of one block's parameters, sliced from the generated vector.
struct BlockParams {
    wq: TensorId,
    bq: TensorId,
    wk: TensorId,
    wv: TensorId,
    bv: TensorId,
    wo: TensorId,
    bo: TensorId,
    rel_bias: TensorId,
    ln1_gamma: TensorId,
    ln1_beta: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
    ln2_gamma: TensorId,
    ln2_beta: TensorId,
}

fn slice_block(tape: &mut Tape, gp: &GeneratedParameters, block: usize) -> Result<BlockParams> {
    let s = |tape: &mut Tape, suffix: &str| gp.slice(tape, &format!("block{block}.{suffix}"));
    Ok(BlockParams {
        wq: s(tape, "attn.wq")?,
        bq: s(tape, "attn.wq.bias")?,
        wk: s(tape, "attn.wk")?,
        wv: s(tape, "attn.wv")?,
        bv: s(tape, "attn.wv.bias")?,
        wo: s(tape, "attn.wo")?,
        bo: s(tape, "attn.wo.bias")?,
        rel_bias: s(tape, "attn.rel_bias")?,
        ln1_gamma: s(tape, "ln1.gamma")?,
        ln1_beta: s(tape, "ln1.beta")?,
        w1: s(tape, "ffn.w1")?,
        b1: s(tape, "ffn.b1")?,
        w2: s(tape, "ffn.w2")?,
        b2: s(tape, "ffn.b2")?,
        ln2_gamma: s(tape, "ln2.gamma")?,
        ln2_beta: s(tape, "ln2.beta")?,
    })
}

fn block_forward(tape: &mut Tape, spec: &TextEncoderSpec, p: &BlockParams, x: TensorId) -> Result<TensorId> {
    let len = tape.shape(x)[0];
    let hd = spec.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    // Pre-norm multi-head self-attention with residual.
    let xn = tape.layer_norm(x, p.ln1_gamma, p.ln1_beta, LAYER_NORM_EPS)?;
    let q = tape.matmul(xn, p.wq)?;
    let q = tape.add_row(q, p.bq)?;
    let k = tape.matmul(xn, p.wk)?;
    let v = tape.matmul(xn, p.wv)?;
    let v = tape.add_row(v, p.bv)?;

    let mut heads = Vec::with_capacity(spec.num_heads);
    for m in 0..spec.num_heads {
        let qm = tape.slice_cols(q, m * hd, hd)?;
        let km = tape.slice_cols(k, m * hd, hd)?;
        let vm = tape.slice_cols(v, m * hd, hd)?;
        let kt = tape.transpose(km)?;
        let scores = tape.matmul(qm, kt)?;
        let scores = tape.scale(scores, scale)?;
        let bias = tape.rel_bias_matrix(p.rel_bias, m, len)?;
        let scores = tape.add(scores, bias)?;
        let attn = tape.softmax(scores)?;
        heads.push(tape.matmul(attn, vm)?);
    }
    let ctx = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let out = tape.matmul(ctx, p.wo)?;
    let out = tape.add_row(out, p.bo)?;
    let x = tape.add(x, out)?;

    // Pre-norm feed-forward with residual.
    let xn2 = tape.layer_norm(x, p.ln2_gamma, p.ln2_beta, LAYER_NORM_EPS)?;
    let f = tape.matmul(xn2, p.w1)?;
    let f = tape.add_row(f, p.b1)?;
    let f = tape.relu(f)?;
    let f = tape.matmul(f, p.w2)?;
    let f = tape.add_row(f, p.b2)?;
    tape.add(x, f)
}

/// Run one transformer block with explicitly supplied generated parameters.
pub fn transformer_block_forward(
    tape: &mut Tape,
    spec: &TextEncoderSpec,
    gp: &GeneratedParameters,
    block: usize,
    x: TensorId,
) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || s[1] != spec.hidden_dim {
        return Err(Error::contract(format!(
            "transformer block: input shape {s:?}, expected [len, {}]",
            spec.hidden_dim
        )));
    }
    let p = slice_block(tape, gp, block)?;
    block_forward(tape, spec, &p, x)
}

/// Full text encoder: phoneme embedding -> generated transformer blocks ->
/// additive language injection at every position.
#[allow(clippy::too_many_arguments)]
pub fn text_encoder_forward(
    tape: &mut Tape,
    bind: &ParamBinding,
    spec: &TextEncoderSpec,
    phoneme_table: &EmbeddingTable,
    injection_conv: &PointwiseConv,
    gp: &GeneratedParameters,
    phoneme_ids: &[usize],
    language_embedding: TensorId,
) -> Result<TensorId> {
    if gp.layout != encoder_layout(spec) {
        return Err(Error::config(
            "generated parameter layout does not match encoder spec".to_string(),
        ));
    }
    if phoneme_ids.is_empty() {
        return Err(Error::contract("text encoder: empty phoneme sequence".to_string()));
    }
    if phoneme_table.dim != spec.hidden_dim {
        return Err(Error::config(format!(
            "phoneme embedding dim {} does not match hidden dim {}",
            phoneme_table.dim, spec.hidden_dim
        )));
    }
    let mut x = phoneme_table.lookup(tape, bind, phoneme_ids)?;
    for b in 0..spec.num_blocks {
        let p = slice_block(tape, gp, b)?;
        x = block_forward(tape, spec, &p, x)?;
    }
    let inj = injection_conv.apply_vec(tape, bind, language_embedding)?;
    tape.add_row(x, inj)
}

/// Initialize a generator + tables setup for tests and tiny models.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
