//! Losses and the alternating discriminator/generator optimization.
//!
//! Each iteration runs `n_d` discriminator steps against a frozen generator,
//! then `n_f` generator steps against a frozen discriminator. A step draws
//! `batch_size` sentences from every style corpus and applies one optimizer
//! update to the combined batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::StyleCorpus;
use crate::discriminator::{Discriminator, Variant, FAKE_CLASS};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamStore};
use crate::sentence::{Sentence, StyleId};
use crate::tensor::{Tape, Var};
use crate::transformer::{SoftBatch, TokenInput, TransformerConfig};

/// `T(epoch) = max(floor, initial · decay^epoch)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule { initial: 1.0, decay: 1.0, floor: 1.0 }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, epoch: f64) -> f64 {
        (self.initial * self.decay.powf(epoch)).max(self.floor)
    }
}

/// Switches that remove one training ingredient each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    pub disable_self: bool,
    pub disable_cycle: bool,
    pub disable_style: bool,
    /// Discriminator positives are real sentences only.
    pub disc_real_only: bool,
    /// Discriminator positives are reconstructions only.
    pub disc_generated_only: bool,
}

impl Ablations {
    /// Name of the single active switch, or `full`.
    pub fn label(&self) -> String {
        let names = [
            (self.disable_self, "disable_self"),
            (self.disable_cycle, "disable_cycle"),
            (self.disable_style, "disable_style"),
            (self.disc_real_only, "disc_real_only"),
            (self.disc_generated_only, "disc_generated_only"),
        ];
        let on: Vec<&str> = names.iter().filter(|(b, _)| *b).map(|(_, n)| *n).collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }
}

/// How generated sentences are shown to the discriminator during its own
/// training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscInputs {
    /// Detached soft distributions, as the generator step presents them.
    Soft,
    /// Arg-max tokens of the soft decode.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub n_d: usize,
    pub n_f: usize,
    pub w_self: f64,
    pub w_cycle: f64,
    pub w_style: f64,
    pub word_dropout: f64,
    pub temperature: TemperatureSchedule,
    pub adam: AdamConfig,
    /// Sentences drawn from each style per step.
    pub batch_size: usize,
    pub max_iterations: u64,
    /// Generator steps on the self-reconstruction loss alone before the
    /// alternating phase.
    pub pretrain_iterations: u64,
    /// Dev evaluation period in iterations (0 disables).
    pub eval_every: u64,
    pub seed: u64,
    /// Cycle pass re-encodes the arg-max of the transfer instead of its soft
    /// distributions.
    pub hard_cycle: bool,
    pub disc_inputs: DiscInputs,
    pub ablations: Ablations,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            n_d: 1,
            n_f: 1,
            w_self: 1.0,
            w_cycle: 1.0,
            w_style: 1.0,
            word_dropout: 0.1,
            temperature: TemperatureSchedule::default(),
            adam: AdamConfig::default(),
            batch_size: 32,
            max_iterations: 1000,
            pretrain_iterations: 0,
            eval_every: 0,
            seed: 1,
            hard_cycle: false,
            disc_inputs: DiscInputs::Hard,
            ablations: Ablations::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_d == 0 {
            return Err(Error::config("n_d", "must be at least 1"));
        }
        if self.n_f == 0 {
            return Err(Error::config("n_f", "must be at least 1"));
        }
        for (field, w) in [("w_self", self.w_self), ("w_cycle", self.w_cycle), ("w_style", self.w_style)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::config(field, "must be a nonnegative number"));
            }
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            return Err(Error::config("word_dropout", "must lie in [0, 1)"));
        }
        let t = &self.temperature;
        if !(t.floor > 0.0) || !(t.initial > 0.0) || !(t.decay > 0.0) {
            return Err(Error::config("temperature", "initial, decay and floor must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.ablations.disc_real_only && self.ablations.disc_generated_only {
            return Err(Error::config("disc_real_only", "cannot be combined with disc_generated_only"));
        }
        self.adam.validate()
    }

    fn weight(&self, w: f64, disabled: bool) -> f64 {
        if disabled {
            0.0
        } else {
            w
        }
    }

    pub fn effective_weights(&self) -> (f64, f64, f64) {
        let a = &self.ablations;
        (
            self.weight(self.w_self, a.disable_self),
            self.weight(self.w_cycle, a.disable_cycle),
            self.weight(self.w_style, a.disable_style),
        )
    }
}

/// Generator and discriminator with their parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub transformer: TransformerConfig,
    pub variant: Variant,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
}

impl Model {
    pub fn new(cfg: &TransformerConfig, variant: Variant, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_1A17);
        let mut gen_params = ParamStore::new();
        let generator = Generator::new(&mut gen_params, cfg, &mut rng)?;
        let mut disc_params = ParamStore::new();
        let discriminator = Discriminator::new(&mut disc_params, cfg, variant, &mut rng)?;
        Ok(Model { transformer: cfg.clone(), variant, generator, discriminator, gen_params, disc_params })
    }

    /// Greedy transfer of `xs` into `styles` with the default length caps.
    pub fn transfer(&self, xs: &[Sentence], styles: &[StyleId]) -> Result<Vec<Sentence>> {
        self.generator.transfer_all(&self.gen_params, xs, styles, 64)
    }
}

/// Which batch a discriminator example is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    /// Real sentence `x`.
    Real,
    /// Reconstruction `y = f(x, s)`.
    Reconstruction,
    /// Transfer `ŷ = f(x, ŝ)`.
    Transfer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub row: usize,
    pub source: Source,
    /// Proposal style (conditional variant only).
    pub style: Option<StyleId>,
    pub label: usize,
}

/// Discriminator targets for a batch with original styles `s` and target
/// styles `s_hat`.
///
/// Conditional: `(x, s)` and `(y, s)` → 1, `(x, ŝ)` and `(ŷ, ŝ)` → 0.
/// Multi-class: `x` and `y` → their style's class, `ŷ` → class 0. The
/// real-only and generated-only ablations drop the `y` or `x` positives.
pub fn discriminator_examples(variant: Variant, ablations: &Ablations, s: &[StyleId], s_hat: &[StyleId]) -> Vec<LabeledExample> {
    let mut out = Vec::new();
    for (row, (&s, &t)) in s.iter().zip(s_hat).enumerate() {
        let positives = [
            (Source::Real, !ablations.disc_generated_only),
            (Source::Reconstruction, !ablations.disc_real_only),
        ];
        match variant {
            Variant::Conditional => {
                for (source, keep) in positives {
                    if keep {
                        out.push(LabeledExample { row, source, style: Some(s), label: 1 });
                    }
                }
                out.push(LabeledExample { row, source: Source::Real, style: Some(t), label: 0 });
                out.push(LabeledExample { row, source: Source::Transfer, style: Some(t), label: 0 });
            }
            Variant::MultiClass => {
                for (source, keep) in positives {
                    if keep {
                        out.push(LabeledExample { row, source, style: None, label: s.get() });
                    }
                }
                out.push(LabeledExample { row, source: Source::Transfer, style: None, label: FAKE_CLASS });
            }
        }
    }
    out
}

/// Generator outputs as presented to the discriminator.
pub enum Samples<'t> {
    Hard(Vec<Sentence>),
    Soft(SoftBatch<'t>),
}

impl<'t> Samples<'t> {
    /// Arg-max sentences of soft samples.
    pub fn into_hard(self) -> Samples<'t> {
        match self {
            Samples::Soft(b) => Samples::Hard(b.argmax_sentences()),
            hard => hard,
        }
    }

    fn select(&self, tape: &'t Tape, rows: &[usize]) -> Result<Samples<'t>> {
        Ok(match self {
            Samples::Hard(s) => Samples::Hard(rows.iter().map(|&r| s[r].clone()).collect()),
            Samples::Soft(b) => {
                let index: Vec<(usize, usize)> = rows
                    .iter()
                    .flat_map(|&r| (0..b.width).map(move |t| (0, r * b.width + t)))
                    .collect();
                Samples::Soft(SoftBatch {
                    dists: tape.gather_rows(&[b.dists], &index)?,
                    width: b.width,
                    lens: rows.iter().map(|&r| b.lens[r]).collect(),
                })
            }
        })
    }
}

/// Mean cross entropy of the discriminator over `examples`, plus the number
/// classified correctly.
pub fn loss_discriminator<'t>(
    tape: &'t Tape,
    disc: &Discriminator,
    p: &Bound<'t>,
    real: &[Sentence],
    recon: &Samples<'t>,
    transfer: &Samples<'t>,
    examples: &[LabeledExample],
) -> Result<(Var<'t>, usize)> {
    if examples.is_empty() {
        return Err(Error::invalid("no discriminator examples"));
    }
    let scale = 1.0 / examples.len() as f64;
    let mut total: Option<Var<'t>> = None;
    let mut correct = 0;
    let real = Samples::Hard(real.to_vec());
    for source in [Source::Real, Source::Reconstruction, Source::Transfer] {
        let group: Vec<&LabeledExample> = examples.iter().filter(|e| e.source == source).collect();
        if group.is_empty() {
            continue;
        }
        let rows: Vec<usize> = group.iter().map(|e| e.row).collect();
        let pool = match source {
            Source::Real => &real,
            Source::Reconstruction => recon,
            Source::Transfer => transfer,
        };
        let picked = pool.select(tape, &rows)?;
        let input = match &picked {
            Samples::Hard(s) => TokenInput::Hard(s),
            Samples::Soft(b) => TokenInput::Soft(b),
        };
        let styles: Option<Vec<StyleId>> = group.iter().map(|e| e.style).collect();
        let logits = disc.logits(tape, p, input, styles.as_deref())?;
        let targets: Vec<Option<usize>> = group.iter().map(|e| Some(e.label)).collect();
        {
            let v = logits.value_ref();
            correct += group
                .iter()
                .enumerate()
                .filter(|(i, e)| crate::sentence::argmax(v.row(*i)) == e.label)
                .count();
        }
        let part = logits.nll(&targets, scale)?;
        total = Some(match total {
            Some(t) => t.add(part)?,
            None => part,
        });
    }
    Ok((total.expect("non-empty examples"), correct))
}

/// `−log p(c = 1 | ŷ, ŝ)` (conditional) or `−log p(c = ŝ | ŷ)` (multi-class),
/// averaged over the batch.
pub fn loss_style<'t>(tape: &'t Tape, disc: &Discriminator, p: &Bound<'t>, y_hat: &SoftBatch<'t>, s_hat: &[StyleId]) -> Result<Var<'t>> {
    let (styles, targets): (Option<&[StyleId]>, Vec<Option<usize>>) = match disc.variant() {
        Variant::Conditional => (Some(s_hat), vec![Some(1); s_hat.len()]),
        Variant::MultiClass => (None, s_hat.iter().map(|s| Some(s.get())).collect()),
    };
    let logits = disc.logits(tape, p, TokenInput::Soft(y_hat), styles)?;
    logits.nll(&targets, 1.0 / s_hat.len() as f64)
}

/// Deletes each content token independently with probability `rate`.
pub fn word_dropout<R: Rng + ?Sized>(x: &Sentence, rate: f64, rng: &mut R) -> Sentence {
    if rate <= 0.0 {
        return x.clone();
    }
    let kept: Vec<usize> = x.content().iter().copied().filter(|_| !rng.gen_bool(rate)).collect();
    Sentence::from_content(&kept).expect("subset of a valid sentence")
}

/// `−log p(y = x | dropout(x), s)` averaged over the batch.
pub fn loss_self<'t>(tape: &'t Tape, gen: &Generator, p: &Bound<'t>, x: &[Sentence], dropped: &[Sentence], s: &[StyleId]) -> Result<Var<'t>> {
    let memory = gen.encode(tape, p, TokenInput::Hard(dropped), s)?;
    gen.reconstruction_nll(tape, p, &memory, x)
}

/// `−log p(y = x | ŷ, s)` with `ŷ` re-encoded softly (or as its arg-max when
/// `hard` is set), averaged over the batch.
pub fn loss_cycle<'t>(
    tape: &'t Tape,
    gen: &Generator,
    p: &Bound<'t>,
    x: &[Sentence],
    y_hat: &SoftBatch<'t>,
    s: &[StyleId],
    s_hat: &[StyleId],
    hard: bool,
) -> Result<Var<'t>> {
    if let Some(i) = s.iter().zip(s_hat).position(|(a, b)| a == b) {
        return Err(Error::invalid(format!("cycle loss needs s ≠ ŝ (row {i} has both = {})", s[i])));
    }
    let memory = if hard {
        gen.encode(tape, p, TokenInput::Hard(&y_hat.argmax_sentences()), s)?
    } else {
        gen.encode(tape, p, TokenInput::Soft(y_hat), s)?
    };
    gen.reconstruction_nll(tape, p, &memory, x)
}

/// Loss components of one generator step; disabled terms are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMetrics {
    pub self_loss: Option<f64>,
    pub cycle_loss: Option<f64>,
    pub style_loss: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Dev-set measurements reported by an evaluation callback.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub accuracy: f64,
    pub self_bleu: f64,
}

impl DevMetrics {
    /// Selection score: geometric mean of accuracy and self-BLEU.
    pub fn score(&self) -> f64 {
        (self.accuracy.max(0.0) * self.self_bleu.max(0.0)).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Pretrain {
        iteration: u64,
        self_loss: f64,
    },
    Step {
        iteration: u64,
        temperature: f64,
        disc: DiscriminatorMetrics,
        #[serde(flatten)]
        gen: GeneratorMetrics,
    },
    Dev {
        iteration: u64,
        #[serde(flatten)]
        metrics: DevMetrics,
        score: f64,
    },
}

/// A sampled minibatch: sentences with original and target styles.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Vec<Sentence>,
    pub s: Vec<StyleId>,
    pub s_hat: Vec<StyleId>,
}

/// Complete training state; everything needed to resume bit-for-bit.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainingConfig,
    pub model: Model,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub rng: ChaCha8Rng,
    /// Completed iterations, pretraining included.
    pub iteration: u64,
    pub log: Vec<LogRecord>,
    pub best: Option<(DevMetrics, ParamStore)>,
    train: Vec<Vec<Sentence>>,
}

impl Trainer {
    pub fn new(config: TrainingConfig, transformer: &TransformerConfig, variant: Variant, corpora: &[StyleCorpus]) -> Result<Self> {
        let model = Model::new(transformer, variant, config.seed)?;
        Self::with_model(config, model, corpora)
    }

    pub fn with_model(config: TrainingConfig, model: Model, corpora: &[StyleCorpus]) -> Result<Self> {
        config.validate()?;
        if corpora.len() < 2 {
            return Err(Error::invalid("training needs at least two style corpora"));
        }
        if corpora.len() != model.transformer.num_styles {
            return Err(Error::invalid(format!(
                "{} corpora for a model with {} styles",
                corpora.len(),
                model.transformer.num_styles
            )));
        }
        for (i, c) in corpora.iter().enumerate() {
            if c.train.is_empty() {
                return Err(Error::invalid(format!("style corpus `{}` has no training sentences", c.name)));
            }
            if c.style != StyleId::from_index(i) {
                return Err(Error::invalid(format!("corpus `{}` is out of style order", c.name)));
            }
        }
        let gen_opt = Adam::new(config.adam, &model.gen_params);
        let disc_opt = Adam::new(config.adam, &model.disc_params);
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            model,
            gen_opt,
            disc_opt,
            iteration: 0,
            log: Vec::new(),
            best: None,
            train: corpora.iter().map(|c| c.train.clone()).collect(),
        })
    }

    pub fn num_styles(&self) -> usize {
        self.train.len()
    }

    /// Temperature after `iteration` iterations, decayed per epoch of the
    /// smallest corpus.
    pub fn temperature(&self) -> f64 {
        let alternating = self.iteration.saturating_sub(self.config.pretrain_iterations);
        let smallest = self.train.iter().map(Vec::len).min().unwrap_or(1) as f64;
        let epoch = (alternating as f64 * self.config.batch_size as f64 / smallest).floor();
        self.config.temperature.at(epoch)
    }

    pub fn sample_batch(&mut self) -> Batch {
        let k = self.num_styles();
        let b = self.config.batch_size;
        let mut batch = Batch { x: Vec::with_capacity(k * b), s: Vec::new(), s_hat: Vec::new() };
        for (i, corpus) in self.train.iter().enumerate() {
            for _ in 0..b {
                batch.x.push(corpus[self.rng.gen_range(0..corpus.len())].clone());
                batch.s.push(StyleId::from_index(i));
                let mut t = self.rng.gen_range(0..k - 1);
                if t >= i {
                    t += 1;
                }
                batch.s_hat.push(StyleId::from_index(t));
            }
        }
        batch
    }

    /// One discriminator update against the frozen generator.
    pub fn discriminator_step(&mut self, batch: &Batch) -> Result<DiscriminatorMetrics> {
        let temperature = self.temperature();
        let m = &self.model;
        let gen_tape = Tape::new();
        let pg = m.gen_params.bind(&gen_tape, false);
        let mut xs = batch.x.clone();
        xs.extend(batch.x.iter().cloned());
        let mut styles = batch.s.clone();
        styles.extend(batch.s_hat.iter().copied());
        let both = m.generator.transfer_soft(&gen_tape, &pg, TokenInput::Hard(&xs), &styles, temperature)?;

        let tape = Tape::new();
        let pd = m.disc_params.bind(&tape, true);
        let n = batch.x.len();
        let detached = Samples::Soft(both.detach(&tape));
        let recon = detached.select(&tape, &(0..n).collect::<Vec<_>>())?;
        let transfer = detached.select(&tape, &(n..2 * n).collect::<Vec<_>>())?;
        let (recon, transfer) = match self.config.disc_inputs {
            DiscInputs::Soft => (recon, transfer),
            DiscInputs::Hard => (recon.into_hard(), transfer.into_hard()),
        };
        let examples = discriminator_examples(m.variant, &self.config.ablations, &batch.s, &batch.s_hat);
        let (loss, correct) = loss_discriminator(&tape, &m.discriminator, &pd, &batch.x, &recon, &transfer, &examples)?;
        tape.backward(loss)?;
        let metrics = DiscriminatorMetrics {
            loss: loss.value().item(),
            accuracy: correct as f64 / examples.len() as f64,
        };
        self.model.disc_params.accumulate_grads(&pd);
        self.disc_opt.step(&mut self.model.disc_params);
        Ok(metrics)
    }

    /// Weighted generator loss on `batch` with `dropped` encoder inputs for
    /// the self-reconstruction term. Returns the total on `tape` and its
    /// components.
    pub fn generator_loss<'t>(
        &self,
        tape: &'t Tape,
        pg: &Bound<'t>,
        batch: &Batch,
        dropped: &[Sentence],
        temperature: f64,
    ) -> Result<(Var<'t>, GeneratorMetrics)> {
        let m = &self.model;
        let (w_self, w_cycle, w_style) = self.config.effective_weights();
        let mut metrics = GeneratorMetrics::default();
        let mut terms: Vec<Var<'t>> = Vec::new();
        if w_self > 0.0 {
            let l = loss_self(tape, &m.generator, pg, &batch.x, dropped, &batch.s)?;
            metrics.self_loss = Some(l.value().item());
            terms.push(l.scale(w_self));
        }
        if w_cycle > 0.0 || w_style > 0.0 {
            let y_hat = m.generator.transfer_soft(tape, pg, TokenInput::Hard(&batch.x), &batch.s_hat, temperature)?;
            if w_cycle > 0.0 {
                let l = loss_cycle(tape, &m.generator, pg, &batch.x, &y_hat, &batch.s, &batch.s_hat, self.config.hard_cycle)?;
                metrics.cycle_loss = Some(l.value().item());
                terms.push(l.scale(w_cycle));
            }
            if w_style > 0.0 {
                let pd = m.disc_params.bind(tape, false);
                let l = loss_style(tape, &m.discriminator, &pd, &y_hat, &batch.s_hat)?;
                metrics.style_loss = Some(l.value().item());
                terms.push(l.scale(w_style));
            }
        }
        let mut total = *terms.first().ok_or_else(|| Error::invalid("every generator loss term is disabled"))?;
        for t in &terms[1..] {
            total = total.add(*t)?;
        }
        metrics.total = total.value().item();
        Ok((total, metrics))
    }

    /// One generator update against the frozen discriminator.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<GeneratorMetrics> {
        let rate = self.config.word_dropout;
        let dropped: Vec<Sentence> = batch.x.iter().map(|x| word_dropout(x, rate, &mut self.rng)).collect();
        let temperature = self.temperature();
        let tape = Tape::new();
        let pg = self.model.gen_params.bind(&tape, true);
        let (total, metrics) = self.generator_loss(&tape, &pg, batch, &dropped, temperature)?;
        if !metrics.total.is_finite() {
            return Err(Error::NonFinite("generator loss"));
        }
        tape.backward(total)?;
        self.model.gen_params.accumulate_grads(&pg);
        self.gen_opt.step(&mut self.model.gen_params);
        Ok(metrics)
    }

    fn pretrain_step(&mut self) -> Result<f64> {
        let batch = self.sample_batch();
        let rate = self.config.word_dropout;
        let dropped: Vec<Sentence> = batch.x.iter().map(|x| word_dropout(x, rate, &mut self.rng)).collect();
        let tape = Tape::new();
        let pg = self.model.gen_params.bind(&tape, true);
        let loss = loss_self(&tape, &self.model.generator, &pg, &batch.x, &dropped, &batch.s)?;
        tape.backward(loss)?;
        self.model.gen_params.accumulate_grads(&pg);
        self.gen_opt.step(&mut self.model.gen_params);
        Ok(loss.value().item())
    }

    /// Runs one iteration: a pretraining step while `iteration` is below
    /// `pretrain_iterations`, otherwise `n_d` discriminator steps followed by
    /// `n_f` generator steps.
    pub fn iterate(&mut self) -> Result<&LogRecord> {
        let record = if self.iteration < self.config.pretrain_iterations {
            let self_loss = self.pretrain_step()?;
            LogRecord::Pretrain { iteration: self.iteration + 1, self_loss }
        } else {
            let temperature = self.temperature();
            let mut disc = DiscriminatorMetrics::default();
            for _ in 0..self.config.n_d {
                let batch = self.sample_batch();
                disc = self.discriminator_step(&batch)?;
            }
            let mut gen = GeneratorMetrics::default();
            for _ in 0..self.config.n_f {
                let batch = self.sample_batch();
                gen = self.generator_step(&batch)?;
            }
            LogRecord::Step { iteration: self.iteration + 1, temperature, disc, gen }
        };
        self.iteration += 1;
        self.log.push(record);
        Ok(self.log.last().expect("just pushed"))
    }

    /// Records dev metrics and keeps the generator parameters with the best
    /// selection score.
    pub fn record_dev(&mut self, metrics: DevMetrics) {
        let score = metrics.score();
        if self.best.as_ref().map_or(true, |(b, _)| score > b.score()) {
            self.best = Some((metrics, self.model.gen_params.clone()));
        }
        self.log.push(LogRecord::Dev { iteration: self.iteration, metrics, score });
    }

    /// Trains until `max_iterations`, calling `dev` every `eval_every`
    /// iterations and once at the end.
    pub fn run<F>(&mut self, mut dev: F) -> Result<()>
    where
        F: FnMut(&Model) -> Result<DevMetrics>,
    {
        while self.iteration < self.config.max_iterations {
            self.iterate()?;
            let every = self.config.eval_every;
            if every > 0 && self.iteration % every == 0 && self.iteration < self.config.max_iterations {
                let m = dev(&self.model)?;
                self.record_dev(m);
            }
        }
        let m = dev(&self.model)?;
        self.record_dev(m);
        Ok(())
    }
}
