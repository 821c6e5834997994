//! Causal (subsequent) attention masks and key-padding masks.
//!
//! Masks come in two representations that coexist through the whole model:
//! additive 0/-inf matrices for attention logits, and boolean per-key flags
//! (true = ignore) that are substituted with -inf right before the softmax.

use crate::error::{Error, Result};
use crate::seqdata::TokenMatrix;

pub type TokenId = usize;

/// Additive square mask: row i allows keys 0..=i, strictly-upper entries
/// are -inf.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalMask {
    size: usize,
    values: Vec<f64>,
}

impl CausalMask {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major T×T additive values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }
}

/// Builds the subsequent mask for a target length of `t`.
pub fn causal_mask(t: usize) -> Result<CausalMask> {
    if t == 0 {
        return Err(Error::contract("causal_mask", "t >= 1", "0"));
    }
    let mut values = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            values[i * t + j] = f64::NEG_INFINITY;
        }
    }
    Ok(CausalMask { size: t, values })
}

/// Boolean matrix [batch × len]; true marks a PAD key that attention and
/// loss must ignore.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyPaddingMask {
    batch: usize,
    len: usize,
    flags: Vec<bool>,
}

impl KeyPaddingMask {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.flags.iter().all(|&f| !f)
    }

    pub fn is_padded(&self, batch_index: usize, pos: usize) -> bool {
        self.flags[batch_index * self.len + pos]
    }

    /// Row of flags for one batch element.
    pub fn row(&self, batch_index: usize) -> &[bool] {
        &self.flags[batch_index * self.len..(batch_index + 1) * self.len]
    }
}

/// Derives the key-padding mask from a [seq × batch] token matrix,
/// transposing to batch-first layout.
pub fn key_padding_mask(tokens: &TokenMatrix, pad_id: TokenId) -> KeyPaddingMask {
    let (len, batch) = (tokens.seq_len(), tokens.batch());
    let mut flags = vec![false; batch * len];
    for b in 0..batch {
        for s in 0..len {
            flags[b * len + s] = tokens.get(s, b) == pad_id;
        }
    }
    KeyPaddingMask { batch, len, flags }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqdata::vocab;

    const NEG_INF: f64 = f64::NEG_INFINITY;

    #[test]
    fn causal_mask_of_five_matches_reference_matrix() {
        let m = causal_mask(5).unwrap();
        #[rustfmt::skip]
        let expected = [
            0.0, NEG_INF, NEG_INF, NEG_INF, NEG_INF,
            0.0, 0.0,     NEG_INF, NEG_INF, NEG_INF,
            0.0, 0.0,     0.0,     NEG_INF, NEG_INF,
            0.0, 0.0,     0.0,     0.0,     NEG_INF,
            0.0, 0.0,     0.0,     0.0,     0.0,
        ];
        assert_eq!(m.values(), expected);
    }

    #[test]
    fn causal_mask_of_one_and_two() {
        assert_eq!(causal_mask(1).unwrap().values(), &[0.0]);
        assert_eq!(
            causal_mask(2).unwrap().values(),
            &[0.0, NEG_INF, 0.0, 0.0]
        );
    }

    #[test]
    fn causal_mask_of_zero_is_a_contract_error() {
        assert!(causal_mask(0).is_err());
    }

    #[test]
    fn key_padding_flags_positions_equal_to_pad() {
        let tokens =
            TokenMatrix::from_columns(&[vec![vocab::SOS, vocab::ONE, vocab::EOS, vocab::PAD, vocab::PAD]])
                .unwrap();
        let mask = key_padding_mask(&tokens, vocab::PAD);
        assert_eq!(mask.row(0), &[false, false, false, true, true]);
    }

    #[test]
    fn sequence_without_pad_has_empty_mask() {
        let tokens = TokenMatrix::from_columns(&[vec![vocab::SOS, vocab::ZERO, vocab::EOS]]).unwrap();
        let mask = key_padding_mask(&tokens, vocab::PAD);
        assert!(mask.is_empty());
    }
}
