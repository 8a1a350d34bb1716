use crate::error::{Error, Result};

/// Boolean attention mask for a batch of independent sequences.
///
/// `allowed(b, i, j)` says whether query `i` of sequence `b` may attend to key
/// `j` of the same sequence. Disallowed keys receive exactly zero weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    batch: usize,
    q_len: usize,
    k_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Single-sequence mask from a row-major `q_len × k_len` matrix.
    pub fn new(q_len: usize, k_len: usize, allowed: Vec<bool>) -> Result<Self> {
        Self::batched(1, q_len, k_len, allowed)
    }

    pub fn batched(batch: usize, q_len: usize, k_len: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != batch * q_len * k_len {
            return Err(Error::ShapeMismatch {
                op: "attention mask",
                lhs: vec![batch, q_len, k_len],
                rhs: vec![allowed.len()],
            });
        }
        Ok(AttentionMask {
            batch,
            q_len,
            k_len,
            allowed,
        })
    }

    pub fn full(batch: usize, q_len: usize, k_len: usize) -> Self {
        AttentionMask {
            batch,
            q_len,
            k_len,
            allowed: vec![true; batch * q_len * k_len],
        }
    }

    /// Every query sees the first `key_lens[b]` keys of its sequence.
    pub fn key_padding(q_len: usize, k_len: usize, key_lens: &[usize]) -> Self {
        let mut allowed = Vec::with_capacity(key_lens.len() * q_len * k_len);
        for &len in key_lens {
            for _ in 0..q_len {
                allowed.extend((0..k_len).map(|j| j < len));
            }
        }
        AttentionMask {
            batch: key_lens.len(),
            q_len,
            k_len,
            allowed,
        }
    }

    /// Lower-triangular-plus-diagonal self-attention over padded sequences.
    ///
    /// Query rows at or beyond a sequence's length still see key 0 so that
    /// no row is fully masked; those rows never feed a loss.
    pub fn causal(len: usize, lens: &[usize]) -> Self {
        let mut allowed = Vec::with_capacity(lens.len() * len * len);
        for &valid in lens {
            for i in 0..len {
                allowed.extend((0..len).map(|j| j <= i && (j < valid || j == 0)));
            }
        }
        AttentionMask {
            batch: lens.len(),
            q_len: len,
            k_len: len,
            allowed,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn q_len(&self) -> usize {
        self.q_len
    }

    pub fn k_len(&self) -> usize {
        self.k_len
    }

    #[inline]
    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.allowed[(b * self.q_len + i) * self.k_len + j]
    }
}
