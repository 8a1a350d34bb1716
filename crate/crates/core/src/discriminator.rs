//! Transformer-encoder discriminators.
//!
//! Input is `[<cls>] ++ [style]? ++ tokens`; the `<cls>` output feeds a linear
//! classifier. The conditional variant scores `(sentence, style)` pairs as
//! real (class 1) or not (class 0). The multi-class variant has `K + 1`
//! classes where class 0 is "generated" and class `i` is style `i`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sentence::{Sentence, SoftSentence, StyleId};
use crate::tensor::{Tape, Var};
use crate::transformer::{embed_tokens, prepend_rows, Encoder, Linear, SoftBatch, TokenInput, TransformerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Conditional,
    MultiClass,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Conditional => "conditional",
            Variant::MultiClass => "multiclass",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional" => Ok(Variant::Conditional),
            "multiclass" | "multi-class" => Ok(Variant::MultiClass),
            other => Err(Error::invalid(format!(
                "unknown discriminator variant `{other}` (expected conditional or multiclass)"
            ))),
        }
    }
}

/// Class index of generated sentences in the multi-class variant.
pub const FAKE_CLASS: usize = 0;

/// A single discriminator input.
#[derive(Clone, Copy)]
pub enum Candidate<'a> {
    Hard(&'a Sentence),
    Soft(&'a SoftSentence),
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: TransformerConfig,
    variant: Variant,
    token: ParamId,
    positional: ParamId,
    cls: ParamId,
    style: Option<ParamId>,
    encoder: Encoder,
    head: Linear,
}

impl Discriminator {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &TransformerConfig, variant: Variant, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let classes = match variant {
            Variant::Conditional => 2,
            Variant::MultiClass => cfg.num_styles + 1,
        };
        Ok(Discriminator {
            cfg: cfg.clone(),
            variant,
            token: store.add_uniform("disc.token", &[cfg.vocab_size, d], d, rng),
            positional: store.add_uniform("disc.positional", &[cfg.max_len, d], d, rng),
            cls: store.add_uniform("disc.cls", &[1, d], d, rng),
            style: (variant == Variant::Conditional)
                .then(|| store.add_uniform("disc.style", &[cfg.num_styles, d], d, rng)),
            encoder: Encoder::new(store, "disc.encoder", cfg, rng),
            head: Linear::new(store, "disc.head", d, classes, rng),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn num_classes(&self) -> usize {
        match self.variant {
            Variant::Conditional => 2,
            Variant::MultiClass => self.cfg.num_styles + 1,
        }
    }

    /// Class logits, one `B × C` row per sequence. `styles` must be given
    /// exactly for the conditional variant.
    pub fn logits<'t>(&self, tape: &'t Tape, p: &Bound<'t>, input: TokenInput<'_, 't>, styles: Option<&[StyleId]>) -> Result<Var<'t>> {
        let batch = input.batch();
        let width = input.width();
        let tokens = embed_tokens(tape, p[self.token], p[self.positional], input)?;
        let mut prefixes = vec![tape.embedding_lookup(p[self.cls], &vec![0; batch])?];
        match (self.style, styles) {
            (Some(table), Some(styles)) => {
                if styles.len() != batch {
                    return Err(Error::invalid(format!("{} styles for a batch of {batch}", styles.len())));
                }
                let rows = styles
                    .iter()
                    .map(|s| s.check(self.cfg.num_styles).map(StyleId::index))
                    .collect::<Result<Vec<_>>>()?;
                prefixes.push(tape.embedding_lookup(p[table], &rows)?);
            }
            (None, None) => {}
            _ => {
                return Err(Error::invalid(format!(
                    "the {} discriminator {} a proposal style",
                    self.variant,
                    if self.style.is_some() { "requires" } else { "does not take" }
                )))
            }
        }
        let full = width + prefixes.len();
        let x = prepend_rows(tape, &prefixes, tokens, batch, width)?;
        let lens: Vec<usize> = input.lens().iter().map(|l| l + prefixes.len()).collect();
        let h = self.encoder.forward(p, x, full, &lens)?;
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * full).collect();
        self.head.forward(p, h.gather_rows(&cls_rows)?)
    }

    fn single<'a, 't>(&self, tape: &'t Tape, c: Candidate<'a>, soft: &'a mut Option<SoftBatch<'t>>) -> TokenInput<'a, 't> {
        match c {
            Candidate::Hard(s) => TokenInput::Hard(std::slice::from_ref(s)),
            Candidate::Soft(s) => {
                let batch = soft.insert(SoftBatch {
                    dists: tape.constant(s.dists().clone()),
                    width: s.len(),
                    lens: vec![s.len()],
                });
                TokenInput::Soft(batch)
            }
        }
    }

    /// `p(class = 1 | sentence, s)` of the conditional variant.
    pub fn score_conditional(&self, store: &ParamStore, sentence: Candidate<'_>, s: StyleId) -> Result<f64> {
        if self.variant != Variant::Conditional {
            return Err(Error::invalid("score_conditional needs the conditional variant"));
        }
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let mut soft = None;
        let input = self.single(&tape, sentence, &mut soft);
        let probs = self.logits(&tape, &p, input, Some(&[s]))?.softmax(1.0)?;
        let v = probs.value();
        Ok(v.at(0, 1))
    }

    /// Distribution over the `K + 1` classes of the multi-class variant.
    pub fn score_multiclass(&self, store: &ParamStore, sentence: Candidate<'_>) -> Result<Vec<f64>> {
        if self.variant != Variant::MultiClass {
            return Err(Error::invalid("score_multiclass needs the multi-class variant"));
        }
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let mut soft = None;
        let input = self.single(&tape, sentence, &mut soft);
        let probs = self.logits(&tape, &p, input, None)?.softmax(1.0)?;
        let v = probs.value();
        Ok(v.row(0).to_vec())
    }
}

#[cfg(test)]
mod tests;
