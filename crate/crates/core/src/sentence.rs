//! Token sequences shared by every model and metric.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

/// One of the `K` styles, numbered from 1. Class 0 of the multi-class
/// discriminator is reserved for generated sentences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StyleId(usize);

impl StyleId {
    pub fn new(value: usize, num_styles: usize) -> Result<Self> {
        if value == 0 || value > num_styles {
            return Err(Error::UnknownStyle { id: value, num_styles });
        }
        Ok(StyleId(value))
    }

    /// Style for a zero-based corpus index.
    pub fn from_index(index: usize) -> Self {
        StyleId(index + 1)
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Row of the style embedding table.
    pub fn index(self) -> usize {
        self.0 - 1
    }

    pub fn check(self, num_styles: usize) -> Result<Self> {
        Self::new(self.0, num_styles)
    }

    pub fn all(num_styles: usize) -> impl Iterator<Item = StyleId> {
        (1..=num_styles).map(StyleId)
    }
}

impl std::fmt::Display for StyleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `BOS content… EOS` with no interior EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sentence(Vec<usize>);

impl Sentence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != BOS || ids[ids.len() - 1] != EOS {
            return Err(Error::MalformedSentence(format!("{ids:?} is not BOS … EOS")));
        }
        if ids[1..ids.len() - 1].iter().any(|&t| t == EOS || t == BOS) {
            return Err(Error::MalformedSentence(format!("{ids:?} has an interior marker")));
        }
        Ok(Sentence(ids))
    }

    /// Wraps content tokens in BOS/EOS.
    pub fn from_content(content: &[usize]) -> Result<Self> {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(content);
        ids.push(EOS);
        Self::new(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn content(&self) -> &[usize] {
        &self.0[1..self.0.len() - 1]
    }

    /// Encoder view: content followed by EOS.
    pub fn tail(&self) -> &[usize] {
        &self.0[1..]
    }

    /// Decoder input under teacher forcing: BOS followed by content.
    pub fn head(&self) -> &[usize] {
        &self.0[..self.0.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content().is_empty()
    }
}

/// Per-position distributions over the vocabulary for the tokens after BOS,
/// the last row being the EOS step.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSentence {
    dists: Tensor,
}

impl SoftSentence {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(dists: Tensor) -> Result<Self> {
        if dists.rank() != 2 {
            return Err(Error::invalid("soft sentence must be a matrix"));
        }
        for r in 0..dists.rows() {
            let row = dists.row(r);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > Self::TOLERANCE {
                return Err(Error::NotNormalized { row: r, sum });
            }
        }
        Ok(SoftSentence { dists })
    }

    /// Wraps rows known to come from a softmax.
    pub(crate) fn from_unchecked(dists: Tensor) -> Self {
        SoftSentence { dists }
    }

    /// One-hot rows of `sentence.tail()`.
    pub fn one_hot(sentence: &Sentence, vocab_size: usize) -> Result<Self> {
        let tail = sentence.tail();
        let mut t = Tensor::zeros([tail.len(), vocab_size]);
        for (r, &id) in tail.iter().enumerate() {
            if id >= vocab_size {
                return Err(Error::TokenOutOfRange { id, vocab: vocab_size });
            }
            t.data_mut()[r * vocab_size + id] = 1.0;
        }
        Ok(SoftSentence { dists: t })
    }

    pub fn dists(&self) -> &Tensor {
        &self.dists
    }

    pub fn len(&self) -> usize {
        self.dists.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Arg-max token per row (ties toward the lower id), cut at the first
    /// EOS and wrapped as a sentence.
    pub fn argmax(&self) -> Sentence {
        let mut content = Vec::new();
        for r in 0..self.dists.rows() {
            let t = argmax(self.dists.row(r));
            if t == EOS {
                break;
            }
            content.push(if t == BOS { UNK } else { t });
        }
        Sentence::from_content(&content).expect("markers filtered")
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentence_invariants() {
        assert!(Sentence::new(vec![BOS, 5, EOS]).is_ok());
        assert!(Sentence::new(vec![5, EOS]).is_err());
        assert!(Sentence::new(vec![BOS, 5]).is_err());
        assert!(Sentence::new(vec![BOS, EOS, 5, EOS]).is_err());
        let s = Sentence::from_content(&[7, 8]).unwrap();
        assert_eq!(s.tail(), &[7, 8, EOS]);
        assert_eq!(s.head(), &[BOS, 7, 8]);
    }

    #[test]
    fn style_ids_are_one_based() {
        assert!(StyleId::new(0, 2).is_err());
        assert!(StyleId::new(3, 2).is_err());
        assert_eq!(StyleId::new(2, 2).unwrap().index(), 1);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn soft_sentence_validation_and_argmax() {
        let s = Sentence::from_content(&[5, 6]).unwrap();
        let soft = SoftSentence::one_hot(&s, 8).unwrap();
        assert_eq!(soft.argmax(), s);
        assert!(SoftSentence::new(Tensor::full([2, 4], 0.3)).is_err());
    }
}
