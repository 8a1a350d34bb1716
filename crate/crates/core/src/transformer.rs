//! Transformer building blocks shared by the generator and discriminators.
//!
//! Sequences are processed in batches laid out batch-major: a batch of `B`
//! sequences padded to width `L` is a `(B·L) × d` matrix whose row `b·L + t`
//! is position `t` of sequence `b`. Layers use pre-normalization with a final
//! layer norm on each stack.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sentence::{Sentence, SoftSentence, PAD};
use crate::tensor::{AttentionMask, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_styles: usize,
}

impl TransformerConfig {
    /// Small default that trains in minutes on one core.
    pub fn desk(vocab_size: usize, num_styles: usize) -> Self {
        TransformerConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 64,
            ff_dim: 128,
            max_len: 32,
            vocab_size,
            num_styles,
        }
    }

    /// Four layers, four heads, 256-dimensional states.
    pub fn full_scale(vocab_size: usize, num_styles: usize) -> Self {
        TransformerConfig {
            num_layers: 4,
            num_heads: 4,
            model_dim: 256,
            ff_dim: 1024,
            max_len: 64,
            vocab_size,
            num_styles,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("num_styles", self.num_styles),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(
                "model_dim",
                format!("{} is not divisible by num_heads = {}", self.model_dim, self.num_heads),
            ));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let b = store.add(format!("{name}.bias"), Tensor::zeros([d_out]));
        Linear { w, b }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p[self.w])?.add_row(p[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([d])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// Projected keys and values, reusable across queries.
#[derive(Clone, Copy)]
pub struct KeyValues<'t> {
    pub keys: Var<'t>,
    pub values: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            heads,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn project_kv<'t>(&self, p: &Bound<'t>, source: Var<'t>) -> Result<KeyValues<'t>> {
        Ok(KeyValues {
            keys: self.key.forward(p, source)?,
            values: self.value.forward(p, source)?,
        })
    }

    pub fn project_query<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.query.forward(p, x)
    }

    /// Attention of already projected queries over projected keys/values,
    /// followed by the output projection.
    pub fn attend<'t>(&self, p: &Bound<'t>, q: Var<'t>, kv: KeyValues<'t>, mask: Arc<AttentionMask>) -> Result<Var<'t>> {
        let heads = q.tape().attention(q, kv.keys, kv.values, mask, self.heads)?;
        self.out.forward(p, heads)
    }

    /// `softmax(QKᵀ/√(d/h) + mask)·V` per head, concatenated and projected.
    pub fn forward<'t>(&self, p: &Bound<'t>, query_in: Var<'t>, kv_in: Var<'t>, mask: Arc<AttentionMask>) -> Result<Var<'t>> {
        let q = self.project_query(p, query_in)?;
        let kv = self.project_kv(p, kv_in)?;
        self.attend(p, q, kv, mask)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, ff: usize, rng: &mut R) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), d, ff, rng),
            outer: Linear::new(store, &format!("{name}.outer"), ff, d, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.outer.forward(p, self.inner.forward(p, x)?.gelu())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        EncoderLayer {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.num_heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.ff_dim, rng),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, mask: &Arc<AttentionMask>) -> Result<Var<'t>> {
        let a = self.norm_attn.forward(p, x)?;
        let x = x.add(self.attn.forward(p, a, a, Arc::clone(mask))?)?;
        let f = self.norm_ff.forward(p, x)?;
        x.add(self.ff.forward(p, f)?)
    }
}

/// Stack of self-attention layers over a padded batch.
#[derive(Clone, Debug)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        Encoder {
            layers: (0..cfg.num_layers)
                .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), cfg, rng))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.model_dim),
        }
    }

    /// `x` is `(B·L)×d`; `lens[b]` positions of sequence `b` are real.
    pub fn forward<'t>(&self, p: &Bound<'t>, mut x: Var<'t>, width: usize, lens: &[usize]) -> Result<Var<'t>> {
        let mask = Arc::new(AttentionMask::key_padding(width, width, lens));
        for layer in &self.layers {
            x = layer.forward(p, x, &mask)?;
        }
        self.norm.forward(p, x)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        let d = cfg.model_dim;
        DecoderLayer {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.num_heads, rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.num_heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, cfg.ff_dim, rng),
        }
    }
}

/// Encoder output with its padding structure.
#[derive(Clone)]
pub struct Memory<'t> {
    pub states: Var<'t>,
    pub width: usize,
    pub lens: Vec<usize>,
}

impl Memory<'_> {
    pub fn batch(&self) -> usize {
        self.lens.len()
    }
}

/// Causal decoder stack attending to an encoder [`Memory`].
#[derive(Clone, Debug)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
}

/// Incremental decoding state: projected self-attention keys/values of every
/// step so far and the cross-attention keys/values of the memory.
pub struct DecoderCache<'t> {
    batch: usize,
    self_keys: Vec<Vec<Var<'t>>>,
    self_values: Vec<Vec<Var<'t>>>,
    cross: Vec<KeyValues<'t>>,
    cross_mask: Arc<AttentionMask>,
}

impl<'t> DecoderCache<'t> {
    pub fn steps(&self) -> usize {
        self.self_keys.first().map_or(0, Vec::len)
    }
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut R) -> Self {
        Decoder {
            layers: (0..cfg.num_layers)
                .map(|i| DecoderLayer::new(store, &format!("{name}.layer{i}"), cfg, rng))
                .collect(),
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.model_dim),
        }
    }

    /// Teacher-forced pass over a full `(B·L)×d` prefix batch.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        mut x: Var<'t>,
        width: usize,
        lens: &[usize],
        memory: &Memory<'t>,
    ) -> Result<Var<'t>> {
        let self_mask = Arc::new(AttentionMask::causal(width, lens));
        let cross_mask = Arc::new(AttentionMask::key_padding(width, memory.width, &memory.lens));
        for layer in &self.layers {
            let a = layer.norm_self.forward(p, x)?;
            x = x.add(layer.self_attn.forward(p, a, a, Arc::clone(&self_mask))?)?;
            let c = layer.norm_cross.forward(p, x)?;
            x = x.add(layer.cross_attn.forward(p, c, memory.states, Arc::clone(&cross_mask))?)?;
            let f = layer.norm_ff.forward(p, x)?;
            x = x.add(layer.ff.forward(p, f)?)?;
        }
        self.norm.forward(p, x)
    }

    pub fn start<'t>(&self, p: &Bound<'t>, memory: &Memory<'t>) -> Result<DecoderCache<'t>> {
        let cross = self
            .layers
            .iter()
            .map(|l| l.cross_attn.project_kv(p, memory.states))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderCache {
            batch: memory.batch(),
            self_keys: vec![Vec::new(); self.layers.len()],
            self_values: vec![Vec::new(); self.layers.len()],
            cross,
            cross_mask: Arc::new(AttentionMask::key_padding(1, memory.width, &memory.lens)),
        })
    }

    /// Advances every sequence by one position; `x` is the `B×d` input row
    /// block of the new position. Returns the `B×d` output states.
    pub fn step<'t>(&self, p: &Bound<'t>, cache: &mut DecoderCache<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let batch = cache.batch;
        let steps = cache.steps() + 1;
        let self_mask = Arc::new(AttentionMask::full(batch, 1, steps));
        let index: Vec<(usize, usize)> = (0..batch)
            .flat_map(|b| (0..steps).map(move |s| (s, b)))
            .collect();
        for (l, layer) in self.layers.iter().enumerate() {
            let a = layer.norm_self.forward(p, x)?;
            let q = layer.self_attn.project_query(p, a)?;
            let kv = layer.self_attn.project_kv(p, a)?;
            cache.self_keys[l].push(kv.keys);
            cache.self_values[l].push(kv.values);
            let history = KeyValues {
                keys: tape.gather_rows(&cache.self_keys[l], &index)?,
                values: tape.gather_rows(&cache.self_values[l], &index)?,
            };
            x = x.add(layer.self_attn.attend(p, q, history, Arc::clone(&self_mask))?)?;
            let c = layer.norm_cross.forward(p, x)?;
            let q = layer.cross_attn.project_query(p, c)?;
            x = x.add(layer.cross_attn.attend(p, q, cache.cross[l], Arc::clone(&cache.cross_mask))?)?;
            let f = layer.norm_ff.forward(p, x)?;
            x = x.add(layer.ff.forward(p, f)?)?;
        }
        self.norm.forward(p, x)
    }
}

/// A batch of soft token sequences: `dists` is `(B·width)×V`, batch-major,
/// and sequence `b` occupies its first `lens[b]` rows.
#[derive(Clone)]
pub struct SoftBatch<'t> {
    pub dists: Var<'t>,
    pub width: usize,
    pub lens: Vec<usize>,
}

impl<'t> SoftBatch<'t> {
    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    /// Detached copy on another tape, with no gradient path back.
    pub fn detach<'u>(&self, tape: &'u Tape) -> SoftBatch<'u> {
        SoftBatch {
            dists: tape.constant((*self.dists.value()).clone()),
            width: self.width,
            lens: self.lens.clone(),
        }
    }

    /// Arg-max tokens of each sequence, cut at the first EOS.
    pub fn argmax_sentences(&self) -> Vec<Sentence> {
        (0..self.batch())
            .map(|b| SoftSentence::from_unchecked(self.sequence(b)).argmax())
            .collect()
    }

    /// Rows `0..lens[b]` of sequence `b` as a matrix.
    pub fn sequence(&self, b: usize) -> Tensor {
        let v = self.dists.value();
        let cols = v.cols();
        let start = b * self.width * cols;
        Tensor::matrix(self.lens[b], cols, v.data()[start..start + self.lens[b] * cols].to_vec())
            .expect("non-empty sequence")
    }
}

/// Encoder-side token input: discrete sentences (their tail after BOS) or
/// soft distributions.
#[derive(Clone, Copy)]
pub enum TokenInput<'a, 't> {
    Hard(&'a [Sentence]),
    Soft(&'a SoftBatch<'t>),
}

impl TokenInput<'_, '_> {
    pub fn batch(&self) -> usize {
        match self {
            TokenInput::Hard(s) => s.len(),
            TokenInput::Soft(s) => s.batch(),
        }
    }

    pub fn lens(&self) -> Vec<usize> {
        match self {
            TokenInput::Hard(s) => s.iter().map(|s| s.tail().len()).collect(),
            TokenInput::Soft(s) => s.lens.clone(),
        }
    }

    pub fn width(&self) -> usize {
        match self {
            TokenInput::Hard(s) => s.iter().map(|s| s.tail().len()).max().unwrap_or(0),
            TokenInput::Soft(s) => s.width,
        }
    }
}

/// Pads id sequences with [`PAD`] to a common width, flattened batch-major.
pub fn pad_ids(seqs: &[&[usize]], width: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(seqs.len() * width);
    for s in seqs {
        out.extend_from_slice(s);
        out.extend(std::iter::repeat(PAD).take(width - s.len()));
    }
    out
}

/// Token embeddings plus learned positional embeddings for positions
/// `0..width`, as a `(B·width)×d` matrix.
pub fn embed_tokens<'t>(
    tape: &'t Tape,
    token_table: Var<'t>,
    positional_table: Var<'t>,
    input: TokenInput<'_, 't>,
) -> Result<Var<'t>> {
    let width = input.width();
    let max_positions = positional_table.value().rows();
    if width == 0 {
        return Err(Error::invalid("empty token input"));
    }
    if width > max_positions {
        return Err(Error::Overlength { len: width, max: max_positions });
    }
    let tokens = match input {
        TokenInput::Hard(sentences) => {
            let tails: Vec<&[usize]> = sentences.iter().map(Sentence::tail).collect();
            tape.embedding_lookup(token_table, &pad_ids(&tails, width))?
        }
        TokenInput::Soft(soft) => soft.dists.embedding_mix(token_table)?,
    };
    let positions: Vec<usize> = (0..input.batch()).flat_map(|_| 0..width).collect();
    tokens.add(tape.embedding_lookup(positional_table, &positions)?)
}

/// Prepends `prefixes` (each `B×d`, no positional encoding) to every sequence
/// of a `(B·width)×d` batch.
pub fn prepend_rows<'t>(tape: &'t Tape, prefixes: &[Var<'t>], tokens: Var<'t>, batch: usize, width: usize) -> Result<Var<'t>> {
    let mut sources: Vec<Var<'t>> = prefixes.to_vec();
    sources.push(tokens);
    let tok = prefixes.len();
    let mut index = Vec::with_capacity(batch * (tok + width));
    for b in 0..batch {
        index.extend((0..tok).map(|s| (s, b)));
        index.extend((0..width).map(|t| (tok, b * width + t)));
    }
    tape.gather_rows(&sources, &index)
}

#[cfg(test)]
mod tests;
