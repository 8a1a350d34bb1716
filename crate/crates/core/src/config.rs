//! Flat `key=value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! falls back to its default; unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::discriminator::Variant;
use crate::error::{Error, Result};
use crate::eval::Smoothing;
use crate::training::{DiscInputs, TrainingConfig};
use crate::transformer::TransformerConfig;

/// Settings of the automatic evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub lm_order: usize,
    pub kn_discount: f64,
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { lm_order: 5, kn_discount: 0.75, classifier_epochs: 100, classifier_lr: 0.5 }
    }
}

impl EvalConfig {
    pub fn smoothing(&self) -> Smoothing {
        Smoothing::KneserNey { discount: self.kn_discount }
    }
}

/// Transformer sizes; vocabulary size and style count come from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = TransformerConfig::desk(8, 2);
        ModelShape {
            num_layers: d.num_layers,
            num_heads: d.num_heads,
            model_dim: d.model_dim,
            ff_dim: d.ff_dim,
            max_len: d.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Directory holding `<style>.<split>.txt` files.
    pub data_dir: PathBuf,
    /// Style names in `StyleId` order.
    pub styles: Vec<String>,
    /// Where checkpoints, logs and reports are written.
    pub out_dir: PathBuf,
    pub vocab_min_freq: usize,
    pub variant: Variant,
    pub shape: ModelShape,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            styles: vec!["positive".into(), "negative".into()],
            out_dir: PathBuf::from("runs"),
            vocab_min_freq: 1,
            variant: Variant::MultiClass,
            shape: ModelShape::default(),
            training: TrainingConfig { eval_every: 200, ..TrainingConfig::default() },
            eval: EvalConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("expected {what}, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

/// Every recognized key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "data_dir",
    "styles",
    "out_dir",
    "vocab_min_freq",
    "variant",
    "num_layers",
    "num_heads",
    "model_dim",
    "ff_dim",
    "max_len",
    "n_d",
    "n_f",
    "w_self",
    "w_cycle",
    "w_style",
    "word_dropout",
    "temperature_initial",
    "temperature_decay",
    "temperature_floor",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "clip_norm",
    "batch_size",
    "max_iterations",
    "pretrain_iterations",
    "eval_every",
    "seed",
    "hard_cycle",
    "disc_inputs",
    "disable_self",
    "disable_cycle",
    "disable_style",
    "disc_real_only",
    "disc_generated_only",
    "lm_order",
    "kn_discount",
    "classifier_epochs",
    "classifier_lr",
];

impl RunConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.training;
        let a = &mut t.ablations;
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "styles" => self.styles = value.split(',').map(|s| s.trim().to_owned()).collect(),
            "vocab_min_freq" => self.vocab_min_freq = parse_num(key, value, "an integer")?,
            "variant" => self.variant = value.parse().map_err(|e: Error| Error::config(key, e.to_string()))?,
            "num_layers" => self.shape.num_layers = parse_num(key, value, "an integer")?,
            "num_heads" => self.shape.num_heads = parse_num(key, value, "an integer")?,
            "model_dim" => self.shape.model_dim = parse_num(key, value, "an integer")?,
            "ff_dim" => self.shape.ff_dim = parse_num(key, value, "an integer")?,
            "max_len" => self.shape.max_len = parse_num(key, value, "an integer")?,
            "n_d" => t.n_d = parse_num(key, value, "an integer")?,
            "n_f" => t.n_f = parse_num(key, value, "an integer")?,
            "w_self" => t.w_self = parse_num(key, value, "a number")?,
            "w_cycle" => t.w_cycle = parse_num(key, value, "a number")?,
            "w_style" => t.w_style = parse_num(key, value, "a number")?,
            "word_dropout" => t.word_dropout = parse_num(key, value, "a number")?,
            "temperature_initial" => t.temperature.initial = parse_num(key, value, "a number")?,
            "temperature_decay" => t.temperature.decay = parse_num(key, value, "a number")?,
            "temperature_floor" => t.temperature.floor = parse_num(key, value, "a number")?,
            "lr" => t.adam.lr = parse_num(key, value, "a number")?,
            "beta1" => t.adam.beta1 = parse_num(key, value, "a number")?,
            "beta2" => t.adam.beta2 = parse_num(key, value, "a number")?,
            "eps" => t.adam.eps = parse_num(key, value, "a number")?,
            "clip_norm" => {
                t.adam.clip_norm = match value {
                    "none" => None,
                    v => Some(parse_num(key, v, "a number or `none`")?),
                }
            }
            "batch_size" => t.batch_size = parse_num(key, value, "an integer")?,
            "max_iterations" => t.max_iterations = parse_num(key, value, "an integer")?,
            "pretrain_iterations" => t.pretrain_iterations = parse_num(key, value, "an integer")?,
            "eval_every" => t.eval_every = parse_num(key, value, "an integer")?,
            "seed" => t.seed = parse_num(key, value, "an integer")?,
            "hard_cycle" => t.hard_cycle = parse_bool(key, value)?,
            "disc_inputs" => {
                t.disc_inputs = match value {
                    "soft" => DiscInputs::Soft,
                    "hard" => DiscInputs::Hard,
                    _ => return Err(Error::config(key, format!("expected soft or hard, got `{value}`"))),
                }
            }
            "disable_self" => a.disable_self = parse_bool(key, value)?,
            "disable_cycle" => a.disable_cycle = parse_bool(key, value)?,
            "disable_style" => a.disable_style = parse_bool(key, value)?,
            "disc_real_only" => a.disc_real_only = parse_bool(key, value)?,
            "disc_generated_only" => a.disc_generated_only = parse_bool(key, value)?,
            "lm_order" => self.eval.lm_order = parse_num(key, value, "an integer")?,
            "kn_discount" => self.eval.kn_discount = parse_num(key, value, "a number")?,
            "classifier_epochs" => self.eval.classifier_epochs = parse_num(key, value, "an integer")?,
            "classifier_lr" => self.eval.classifier_lr = parse_num(key, value, "a number")?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Textual form of one field; inverse of [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.training;
        let a = &t.ablations;
        Some(match key {
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "styles" => self.styles.join(","),
            "vocab_min_freq" => self.vocab_min_freq.to_string(),
            "variant" => self.variant.to_string(),
            "num_layers" => self.shape.num_layers.to_string(),
            "num_heads" => self.shape.num_heads.to_string(),
            "model_dim" => self.shape.model_dim.to_string(),
            "ff_dim" => self.shape.ff_dim.to_string(),
            "max_len" => self.shape.max_len.to_string(),
            "n_d" => t.n_d.to_string(),
            "n_f" => t.n_f.to_string(),
            "w_self" => t.w_self.to_string(),
            "w_cycle" => t.w_cycle.to_string(),
            "w_style" => t.w_style.to_string(),
            "word_dropout" => t.word_dropout.to_string(),
            "temperature_initial" => t.temperature.initial.to_string(),
            "temperature_decay" => t.temperature.decay.to_string(),
            "temperature_floor" => t.temperature.floor.to_string(),
            "lr" => t.adam.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "eps" => t.adam.eps.to_string(),
            "clip_norm" => t.adam.clip_norm.map_or("none".into(), |c| c.to_string()),
            "batch_size" => t.batch_size.to_string(),
            "max_iterations" => t.max_iterations.to_string(),
            "pretrain_iterations" => t.pretrain_iterations.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "seed" => t.seed.to_string(),
            "hard_cycle" => t.hard_cycle.to_string(),
            "disc_inputs" => match t.disc_inputs {
                DiscInputs::Soft => "soft".into(),
                DiscInputs::Hard => "hard".into(),
            },
            "disable_self" => a.disable_self.to_string(),
            "disable_cycle" => a.disable_cycle.to_string(),
            "disable_style" => a.disable_style.to_string(),
            "disc_real_only" => a.disc_real_only.to_string(),
            "disc_generated_only" => a.disc_generated_only.to_string(),
            "lm_order" => self.eval.lm_order.to_string(),
            "kn_discount" => self.eval.kn_discount.to_string(),
            "classifier_epochs" => self.eval.classifier_epochs.to_string(),
            "classifier_lr" => self.eval.classifier_lr.to_string(),
            _ => return None,
        })
    }

    /// Parses and validates a config text, starting from the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected key=value, got `{line}`")))?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::config(key, format!("repeated on line {}", n + 1)));
            }
            config.set(key, value)?;
            seen.push(key.to_owned());
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key}={}", self.get(key).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.styles.len() < 2 {
            return Err(Error::config("styles", "at least two styles are required"));
        }
        for (i, s) in self.styles.iter().enumerate() {
            if s.is_empty() || s.contains(|c: char| c.is_whitespace() || c == '/' || c == '.') {
                return Err(Error::config("styles", format!("invalid style name `{s}`")));
            }
            if self.styles[..i].contains(s) {
                return Err(Error::config("styles", format!("style `{s}` listed twice")));
            }
        }
        if self.vocab_min_freq == 0 {
            return Err(Error::config("vocab_min_freq", "must be at least 1"));
        }
        if self.eval.lm_order == 0 {
            return Err(Error::config("lm_order", "must be at least 1"));
        }
        if !(self.eval.kn_discount > 0.0 && self.eval.kn_discount < 1.0) {
            return Err(Error::config("kn_discount", "must lie in (0, 1)"));
        }
        if !(self.eval.classifier_lr > 0.0) {
            return Err(Error::config("classifier_lr", "must be positive"));
        }
        self.transformer(crate::sentence::NUM_RESERVED + 1).validate()?;
        self.training.validate()
    }

    pub fn transformer(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            num_layers: self.shape.num_layers,
            num_heads: self.shape.num_heads,
            model_dim: self.shape.model_dim,
            ff_dim: self.shape.ff_dim,
            max_len: self.shape.max_len,
            vocab_size,
            num_styles: self.styles.len(),
        }
    }

    /// Zero-based index of a style name.
    pub fn style_index(&self, name: &str) -> Result<usize> {
        self.styles
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::invalid(format!("unknown style `{name}` (known: {})", self.styles.join(", "))))
    }
}
