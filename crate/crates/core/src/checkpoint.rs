//! Binary checkpoints holding everything needed to resume training exactly.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "STFM" | u32 version
//! str config | str vocabulary | str log (JSON)
//! u64 iteration | [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! u64 generator optimizer steps | u64 discriminator optimizer steps
//! u8 has_best [f64 accuracy, f64 self_bleu]
//! u32 record count, then per record:
//!   u32 name length | name | u32 rank | u64 extent × rank | f64 × numel
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. Records are parameter values
//! under their own names, optimizer moments under `opt.{gen,disc}.{m,v}.`
//! and the best dev generator under `best.`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::RunConfig;
use crate::data::{StyleCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{DevMetrics, LogRecord, Model, Trainer};

pub const MAGIC: &[u8; 4] = b"STFM";
pub const VERSION: u32 = 1;

/// Position of a ChaCha generator in its stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub iteration: u64,
    pub rng: RngState,
    pub gen_steps: u64,
    pub disc_steps: u64,
    pub log: Vec<LogRecord>,
    pub best: Option<DevMetrics>,
    pub tensors: Vec<(String, Tensor)>,
}

fn store_records(prefix: &str, store: &ParamStore, out: &mut Vec<(String, Tensor)>) {
    for id in store.ids() {
        out.push((format!("{prefix}{}", store.name(id)), store.get(id).clone()));
    }
}

fn moment_records(prefix: &str, store: &ParamStore, opt: &Adam, out: &mut Vec<(String, Tensor)>) {
    let (m, v) = opt.moments();
    for (id, t) in store.ids().zip(m) {
        out.push((format!("{prefix}m.{}", store.name(id)), t.clone()));
    }
    for (id, t) in store.ids().zip(v) {
        out.push((format!("{prefix}v.{}", store.name(id)), t.clone()));
    }
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, vocab: &Vocabulary, trainer: &Trainer) -> Self {
        let m = &trainer.model;
        let mut tensors = Vec::new();
        store_records("", &m.gen_params, &mut tensors);
        store_records("", &m.disc_params, &mut tensors);
        moment_records("opt.gen.", &m.gen_params, &trainer.gen_opt, &mut tensors);
        moment_records("opt.disc.", &m.disc_params, &trainer.disc_opt, &mut tensors);
        if let Some((_, best)) = &trainer.best {
            store_records("best.", best, &mut tensors);
        }
        let mut config = config.clone();
        config.training = trainer.config.clone();
        Checkpoint {
            config,
            vocab: vocab.clone(),
            iteration: trainer.iteration,
            rng: RngState::capture(&trainer.rng),
            gen_steps: trainer.gen_opt.steps(),
            disc_steps: trainer.disc_opt.steps(),
            log: trainer.log.clone(),
            best: trainer.best.as_ref().map(|(m, _)| *m),
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn fill(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            store
                .set(id, t.clone())
                .map_err(|_| Error::Checkpoint(format!("tensor `{name}` has shape {:?}", t.shape())))?;
        }
        Ok(())
    }

    fn moments(&self, prefix: &str, store: &ParamStore) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let get = |kind: &str| -> Result<Vec<Tensor>> {
            store
                .ids()
                .map(|id| {
                    let name = format!("{prefix}{kind}.{}", store.name(id));
                    self.tensor(&name)
                        .cloned()
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
                })
                .collect()
        };
        Ok((get("m")?, get("v")?))
    }

    /// The model with its latest parameters.
    pub fn model(&self) -> Result<Model> {
        let cfg = self.config.transformer(self.vocab.len());
        let mut model = Model::new(&cfg, self.config.variant, self.config.training.seed)?;
        self.fill("", &mut model.gen_params)?;
        self.fill("", &mut model.disc_params)?;
        Ok(model)
    }

    /// The model with the generator of the best dev evaluation, or the
    /// latest one when no evaluation has run.
    pub fn best_model(&self) -> Result<Model> {
        let mut model = self.model()?;
        if self.best.is_some() {
            self.fill("best.", &mut model.gen_params)?;
        }
        Ok(model)
    }

    /// Rebuilds the complete training state over `corpora`.
    pub fn trainer(&self, corpora: &[StyleCorpus]) -> Result<Trainer> {
        let model = self.model()?;
        let mut t = Trainer::with_model(self.config.training.clone(), model, corpora)?;
        let (m, v) = self.moments("opt.gen.", &t.model.gen_params)?;
        t.gen_opt.restore(self.gen_steps, m, v)?;
        let (m, v) = self.moments("opt.disc.", &t.model.disc_params)?;
        t.disc_opt.restore(self.disc_steps, m, v)?;
        t.rng = self.rng.restore();
        t.iteration = self.iteration;
        t.log = self.log.clone();
        if let Some(metrics) = self.best {
            let mut best = t.model.gen_params.clone();
            self.fill("best.", &mut best)?;
            t.best = Some((metrics, best));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_text())?;
        w.str(&self.vocab.words().join("\n"))?;
        let log = serde_json::to_string(&self.log).map_err(|e| Error::Checkpoint(format!("log: {e}")))?;
        w.str(&log)?;
        w.u64(self.iteration);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.gen_steps);
        w.u64(self.disc_steps);
        match self.best {
            Some(b) => {
                w.0.push(1);
                w.f64(b.accuracy);
                w.f64(b.self_bleu);
            }
            None => w.0.push(0),
        }
        w.len(self.tensors.len())?;
        for (name, t) in &self.tensors {
            w.str(name)?;
            w.len(t.rank())?;
            for &e in t.shape() {
                w.u64(e as u64);
            }
            for &x in t.data() {
                w.f64(x);
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {VERSION})")));
        }
        let config = RunConfig::parse(&r.str()?)?;
        let vocab_text = r.str()?;
        let vocab = Vocabulary::from_tokens(vocab_text.split('\n').filter(|t| !t.is_empty()))?;
        let log: Vec<LogRecord> =
            serde_json::from_str(&r.str()?).map_err(|e| Error::Checkpoint(format!("log: {e}")))?;
        let iteration = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let gen_steps = r.u64()?;
        let disc_steps = r.u64()?;
        let best = match r.take(1)?[0] {
            0 => None,
            1 => Some(DevMetrics { accuracy: r.f64()?, self_bleu: r.f64()? }),
            b => return Err(Error::Checkpoint(format!("bad best-metrics flag {b}"))),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected end of file in tensor `{name}`")))?;
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint {
            config,
            vocab,
            iteration,
            rng: RngState { seed, stream, word_pos },
            gen_steps,
            disc_steps,
            log,
            best,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit in u32")))?;
        self.u32(n);
        Ok(())
    }

    fn str(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests;
