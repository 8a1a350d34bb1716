//! The style-conditioned encoder-decoder `f(x, s)`.
//!
//! The encoder reads `[style] ++ tokens(x)`; the decoder predicts `x.tail()`
//! from `x.head()`. Decoding runs incrementally, either greedily on token ids
//! or continuously by feeding each step's softmax back through the token
//! table.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sentence::{argmax, Sentence, StyleId, BOS, EOS, PAD, UNK};
use crate::tensor::{Tape, Tensor, Var};
use crate::transformer::{
    embed_tokens, pad_ids, prepend_rows, Decoder, Encoder, Linear, Memory, SoftBatch, TokenInput,
    TransformerConfig,
};

/// Extra decoding steps allowed beyond the input length.
pub const LENGTH_SLACK: usize = 4;

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: TransformerConfig,
    token: ParamId,
    positional: ParamId,
    style: ParamId,
    encoder: Encoder,
    decoder: Decoder,
    out: Linear,
}

/// Teacher-forced decoder output for a batch of target sentences.
pub struct TeacherForced<'t> {
    pub logits: Var<'t>,
    pub width: usize,
    /// Row targets `tail()[t]`, `None` on padding.
    pub targets: Vec<Option<usize>>,
}

enum Feedback<'a, 't> {
    Ids(&'a [usize]),
    Dists(Var<'t>),
}

impl Generator {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &TransformerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(Generator {
            cfg: cfg.clone(),
            token: store.add_uniform("gen.token", &[cfg.vocab_size, d], d, rng),
            positional: store.add_uniform("gen.positional", &[cfg.max_len, d], d, rng),
            style: store.add_uniform("gen.style", &[cfg.num_styles, d], d, rng),
            encoder: Encoder::new(store, "gen.encoder", cfg, rng),
            decoder: Decoder::new(store, "gen.decoder", cfg, rng),
            out: Linear::new(store, "gen.out", d, cfg.vocab_size, rng),
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Number of decoding steps allowed for an input whose tail has
    /// `tail_len` tokens. The cap leaves room for a forced EOS and the style
    /// token, so every output can be encoded again.
    pub fn decode_cap(&self, tail_len: usize) -> usize {
        (tail_len + LENGTH_SLACK).min(self.cfg.max_len.saturating_sub(2)).max(1)
    }

    /// `z = encoder([style] ++ tokens)`, one sequence per style.
    pub fn encode<'t>(&self, tape: &'t Tape, p: &Bound<'t>, input: TokenInput<'_, 't>, styles: &[StyleId]) -> Result<Memory<'t>> {
        let batch = input.batch();
        if styles.len() != batch {
            return Err(Error::invalid(format!("{} styles for a batch of {batch}", styles.len())));
        }
        let width = input.width();
        if width + 1 > self.cfg.max_len {
            return Err(Error::Overlength { len: width, max: self.cfg.max_len - 1 });
        }
        let style_rows = styles
            .iter()
            .map(|s| s.check(self.cfg.num_styles).map(StyleId::index))
            .collect::<Result<Vec<_>>>()?;
        let tokens = embed_tokens(tape, p[self.token], p[self.positional], input)?;
        let style = tape.embedding_lookup(p[self.style], &style_rows)?;
        let x = prepend_rows(tape, &[style], tokens, batch, width)?;
        let lens: Vec<usize> = input.lens().iter().map(|l| l + 1).collect();
        let states = self.encoder.forward(p, x, width + 1, &lens)?;
        Ok(Memory { states, width: width + 1, lens })
    }

    /// Next-token logits for every position of `targets.head()`.
    pub fn teacher_forced<'t>(&self, tape: &'t Tape, p: &Bound<'t>, memory: &Memory<'t>, targets: &[Sentence]) -> Result<TeacherForced<'t>> {
        if targets.len() != memory.batch() {
            return Err(Error::invalid("target count does not match the memory batch"));
        }
        let heads: Vec<&[usize]> = targets.iter().map(Sentence::head).collect();
        let width = heads.iter().map(|h| h.len()).max().unwrap_or(0);
        if width > self.cfg.max_len {
            return Err(Error::Overlength { len: width, max: self.cfg.max_len });
        }
        let ids = pad_ids(&heads, width);
        let positions: Vec<usize> = (0..targets.len()).flat_map(|_| 0..width).collect();
        let x = tape
            .embedding_lookup(p[self.token], &ids)?
            .add(tape.embedding_lookup(p[self.positional], &positions)?)?;
        let lens: Vec<usize> = heads.iter().map(|h| h.len()).collect();
        let h = self.decoder.forward(p, x, width, &lens, memory)?;
        let logits = self.out.forward(p, h)?;
        let tgt = targets
            .iter()
            .flat_map(|s| (0..width).map(move |t| s.tail().get(t).copied()))
            .collect();
        Ok(TeacherForced { logits, width, targets: tgt })
    }

    /// `−Σ_t log p(y_t | z, y_<t)` summed per sentence and averaged over the
    /// batch.
    pub fn reconstruction_nll<'t>(&self, tape: &'t Tape, p: &Bound<'t>, memory: &Memory<'t>, targets: &[Sentence]) -> Result<Var<'t>> {
        let tf = self.teacher_forced(tape, p, memory, targets)?;
        tf.logits.nll(&tf.targets, 1.0 / targets.len() as f64)
    }

    /// `log p(y | x, s)` under teacher forcing.
    pub fn log_prob(&self, store: &ParamStore, y: &Sentence, x: &Sentence, s: StyleId) -> Result<f64> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let memory = self.encode(&tape, &p, TokenInput::Hard(std::slice::from_ref(x)), &[s])?;
        let nll = self.reconstruction_nll(&tape, &p, &memory, std::slice::from_ref(y))?;
        Ok(-nll.value().item())
    }

    fn step_input<'t>(&self, tape: &'t Tape, p: &Bound<'t>, feedback: Feedback<'_, 't>, position: usize, batch: usize) -> Result<Var<'t>> {
        let tokens = match feedback {
            Feedback::Ids(ids) => tape.embedding_lookup(p[self.token], ids)?,
            Feedback::Dists(d) => d.embedding_mix(p[self.token])?,
        };
        tokens.add(tape.embedding_lookup(p[self.positional], &vec![position; batch])?)
    }

    /// Arg-max decoding of every sentence into its target style, at most
    /// `max_steps` tokens each (EOS is forced when the cap is hit). Ties go
    /// to the lower token id.
    pub fn transfer_greedy(&self, store: &ParamStore, xs: &[Sentence], styles: &[StyleId], max_steps: usize) -> Result<Vec<Sentence>> {
        if max_steps < 1 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let memory = self.encode(&tape, &p, TokenInput::Hard(xs), styles)?;
        let mut cache = self.decoder.start(&p, &memory)?;
        let batch = xs.len();
        let steps = max_steps.min(self.cfg.max_len - 1);
        let mut content: Vec<Vec<usize>> = vec![Vec::new(); batch];
        let mut done = vec![false; batch];
        let mut prev = vec![BOS; batch];
        for t in 0..steps {
            let x = self.step_input(&tape, &p, Feedback::Ids(&prev), t, batch)?;
            let logits = self.out.forward(&p, self.decoder.step(&p, &mut cache, x)?)?.value();
            for b in 0..batch {
                let next = argmax(logits.row(b));
                prev[b] = next;
                if done[b] {
                    continue;
                }
                if next == EOS || t + 1 == steps {
                    done[b] = true;
                } else {
                    content[b].push(if next == BOS { UNK } else { next });
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        content.iter().map(|c| Sentence::from_content(c)).collect()
    }

    /// Greedy transfer with the default per-sentence cap, in chunks of
    /// `batch` sentences.
    pub fn transfer_all(&self, store: &ParamStore, xs: &[Sentence], styles: &[StyleId], batch: usize) -> Result<Vec<Sentence>> {
        let mut out = Vec::with_capacity(xs.len());
        for (chunk, st) in xs.chunks(batch.max(1)).zip(styles.chunks(batch.max(1))) {
            let cap = chunk.iter().map(|x| self.decode_cap(x.tail().len())).max().unwrap_or(1);
            let mut decoded = self.transfer_greedy(store, chunk, st, cap)?;
            for (d, x) in decoded.iter_mut().zip(chunk) {
                let limit = self.decode_cap(x.tail().len());
                if d.tail().len() > limit {
                    *d = Sentence::from_content(&d.content()[..limit - 1])?;
                }
            }
            out.extend(decoded);
        }
        Ok(out)
    }

    /// Continuous decoding: step `t` emits `softmax(o_t / T)` and feeds it
    /// back through the token table. A sequence stops after the step whose
    /// arg-max is EOS, or after `decode_cap` steps. The result stays on the
    /// tape, so it is differentiable with respect to the parameters and to
    /// soft inputs.
    pub fn transfer_soft<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        input: TokenInput<'_, 't>,
        styles: &[StyleId],
        temperature: f64,
    ) -> Result<SoftBatch<'t>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        let memory = self.encode(tape, p, input, styles)?;
        let caps: Vec<usize> = input.lens().iter().map(|&l| self.decode_cap(l)).collect();
        let batch = input.batch();
        let mut cache = self.decoder.start(p, &memory)?;
        let mut lens = vec![0usize; batch];
        let mut open = vec![true; batch];
        let mut steps: Vec<Var<'t>> = Vec::new();
        let bos = vec![BOS; batch];
        let mut feedback = Feedback::Ids(&bos);
        let max_steps = caps.iter().copied().max().unwrap_or(0);
        for t in 0..max_steps {
            let x = self.step_input(tape, p, feedback, t, batch)?;
            let logits = self.out.forward(p, self.decoder.step(p, &mut cache, x)?)?;
            let dists = logits.softmax(temperature)?;
            {
                let v = dists.value_ref();
                for b in 0..batch {
                    if !open[b] {
                        continue;
                    }
                    lens[b] = t + 1;
                    if argmax(v.row(b)) == EOS || t + 1 == caps[b] {
                        open[b] = false;
                    }
                }
            }
            steps.push(dists);
            if !open.iter().any(|&o| o) {
                break;
            }
            feedback = Feedback::Dists(dists);
        }
        let width = lens.iter().copied().max().unwrap_or(1);
        let mut index = Vec::with_capacity(batch * width);
        for (b, &len) in lens.iter().enumerate() {
            index.extend((0..width).map(|t| (t.min(len - 1), b)));
        }
        let dists = tape.gather_rows(&steps, &index)?;
        Ok(SoftBatch { dists, width, lens })
    }

    /// Hard sentences as a one-hot [`SoftBatch`] on `tape`, padded with PAD.
    pub fn one_hot_batch<'t>(&self, tape: &'t Tape, xs: &[Sentence]) -> SoftBatch<'t> {
        let v = self.cfg.vocab_size;
        let lens: Vec<usize> = xs.iter().map(|s| s.tail().len()).collect();
        let width = lens.iter().copied().max().unwrap_or(1);
        let mut t = Tensor::zeros([xs.len() * width, v]);
        for (b, s) in xs.iter().enumerate() {
            for r in 0..width {
                let id = s.tail().get(r).copied().unwrap_or(PAD);
                t.data_mut()[(b * width + r) * v + id] = 1.0;
            }
        }
        SoftBatch { dists: tape.constant(t), width, lens }
    }
}
