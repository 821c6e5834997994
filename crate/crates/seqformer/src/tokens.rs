//! Token embedding with √d scaling, un-embedding to logits, and the
//! sinusoidal positional table.

use crate::error::{Error, Result};
use crate::nn::{Dropout, LinearLayer, ParameterRegistry};
use crate::seqdata::TokenMatrix;
use crate::tape::{Tape, Value};
use crate::tensor::{Parameter, Tensor};

/// Learnable lookup table from token ids to d_model vectors. When a padding
/// row is configured it stays at its initial value: lookups of that row
/// contribute no gradient.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table: Parameter,
    pub vocab_size: usize,
    pub d_model: usize,
    pub padding_row: Option<usize>,
}

impl EmbeddingTable {
    pub fn new(
        registry: &mut ParameterRegistry,
        name: &str,
        vocab_size: usize,
        d_model: usize,
        padding_row: Option<usize>,
    ) -> Result<Self> {
        if let Some(row) = padding_row {
            if row >= vocab_size {
                return Err(Error::Config(format!(
                    "padding row {row} outside vocabulary of {vocab_size}"
                )));
            }
        }
        let table = registry.register(
            format!("{name}.weight"),
            Parameter::new(Tensor::zeros(vec![vocab_size, d_model])?),
        )?;
        Ok(EmbeddingTable {
            table,
            vocab_size,
            d_model,
            padding_row,
        })
    }

    /// Zeroes the padding row. Called after random init; the row is frozen
    /// afterwards because lookups never route gradient to it.
    pub fn reset_padding_row(&self) {
        if let Some(row) = self.padding_row {
            let d = self.d_model;
            self.table.update_data(|data| {
                data[row * d..(row + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            });
        }
    }

    /// Looks tokens up and scales by √d_model.
    pub fn forward(&self, tape: &mut Tape, tokens: &TokenMatrix) -> Result<Value> {
        let table = tape.leaf(&self.table);
        let looked_up = tape.embed(
            table,
            tokens.ids(),
            tokens.seq_len(),
            tokens.batch(),
            self.padding_row,
        )?;
        let scale = (self.d_model as f64).sqrt();
        if scale == 1.0 {
            Ok(looked_up)
        } else {
            Ok(tape.mul_scalar(looked_up, scale))
        }
    }
}

/// Precomputed sin/cos position vectors:
/// pe[pos][2i] = sin(pos / 10000^(2i/d)), pe[pos][2i+1] = cos(pos / 10000^(2i/d)).
#[derive(Debug, Clone)]
pub struct PositionalTable {
    pe: Vec<f64>,
    pub max_len: usize,
    pub d_model: usize,
    pub dropout: Dropout,
}

/// Default capacity of the positional table; every task here stays far
/// below it.
pub const DEFAULT_MAX_LEN: usize = 64;

pub fn positional_table(max_len: usize, d_model: usize, dropout_p: f64) -> Result<PositionalTable> {
    if d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    let mut pe = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            let angle = pos as f64 * freq;
            pe[pos * d_model + 2 * i] = angle.sin();
            pe[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(PositionalTable {
        pe,
        max_len,
        d_model,
        dropout: Dropout::new(dropout_p)?,
    })
}

impl PositionalTable {
    pub fn row(&self, pos: usize) -> &[f64] {
        &self.pe[pos * self.d_model..(pos + 1) * self.d_model]
    }

    /// Adds position vectors to `x` ([L,B,d], or [L,d] which is promoted to
    /// batch 1 first), then applies dropout on training tapes.
    pub fn forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let shape = tape.shape(x).to_vec();
        let (l, b, d, x) = match shape.len() {
            2 => {
                // Inference often arrives without the batch dimension.
                let promoted = tape.stack_batch(&[x])?;
                (shape[0], 1, shape[1], promoted)
            }
            3 => (shape[0], shape[1], shape[2], x),
            _ => {
                return Err(Error::contract(
                    "PositionalTable::forward",
                    "rank-2 or rank-3 input",
                    format!("shape {shape:?}"),
                ))
            }
        };
        if d != self.d_model {
            return Err(Error::DimMismatch {
                op: "add_positional",
                lhs: vec![l, b, d],
                rhs: vec![self.max_len, self.d_model],
            });
        }
        if l > self.max_len {
            return Err(Error::Capacity {
                what: "sequence length",
                actual: l,
                limit: self.max_len,
            });
        }
        let mut tiled = Vec::with_capacity(l * b * d);
        for pos in 0..l {
            for _ in 0..b {
                tiled.extend_from_slice(self.row(pos));
            }
        }
        let pe = tape.constant(vec![l, b, d], tiled)?;
        let summed = tape.add(x, pe)?;
        Ok(self.dropout.forward(tape, summed))
    }

    /// Long-format CSV (`pos,dim,value`) for external plotting.
    pub fn to_long_csv(&self, positions: &[usize]) -> Result<String> {
        let mut out = String::from("pos,dim,value\n");
        for &pos in positions {
            if pos >= self.max_len {
                return Err(Error::Capacity {
                    what: "position",
                    actual: pos,
                    limit: self.max_len - 1,
                });
            }
            for (dim, v) in self.row(pos).iter().enumerate() {
                out.push_str(&format!("{pos},{dim},{v:.6}\n"));
            }
        }
        Ok(out)
    }
}

/// The affine map from decoder features back to per-token scores. Plain
/// scores, no normalization; the loss handles that.
pub fn unembedding(
    registry: &mut ParameterRegistry,
    name: &str,
    d_model: usize,
    vocab_size: usize,
) -> Result<LinearLayer> {
    LinearLayer::new(registry, name, d_model, vocab_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqdata::vocab;
    use approx::assert_relative_eq;

    fn table_with(vocab_size: usize, d: usize, pad: Option<usize>) -> (ParameterRegistry, EmbeddingTable) {
        let mut reg = ParameterRegistry::new();
        let emb = EmbeddingTable::new(&mut reg, "embedding", vocab_size, d, pad).unwrap();
        (reg, emb)
    }

    #[test]
    fn embedding_scales_by_sqrt_d() {
        let (_reg, emb) = table_with(4, 8, None);
        emb.table
            .set_data((0..32).map(|i| i as f64 * 0.01).collect())
            .unwrap();
        let tokens = TokenMatrix::from_columns(&[vec![2]]).unwrap();
        let mut tape = Tape::inference();
        let out = emb.forward(&mut tape, &tokens).unwrap();
        let want: Vec<f64> = (16..24).map(|i| i as f64 * 0.01 * 8f64.sqrt()).collect();
        for (a, b) in tape.data(out).iter().zip(&want) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn embedding_with_d_one_is_the_raw_row() {
        let (_reg, emb) = table_with(4, 1, None);
        emb.table.set_data(vec![0.5, 1.5, 2.5, 3.5]).unwrap();
        let tokens = TokenMatrix::from_columns(&[vec![1, 3]]).unwrap();
        let mut tape = Tape::inference();
        let out = emb.forward(&mut tape, &tokens).unwrap();
        assert_eq!(tape.data(out), &[1.5, 3.5]);
    }

    #[test]
    fn out_of_range_token_names_id_and_position() {
        let (_reg, emb) = table_with(4, 2, None);
        let tokens = TokenMatrix::from_columns(&[vec![1, 9]]).unwrap();
        let mut tape = Tape::inference();
        let msg = emb.forward(&mut tape, &tokens).unwrap_err().to_string();
        assert!(msg.contains('9') && msg.contains("position 1"), "{msg}");
    }

    #[test]
    fn padding_row_receives_no_gradient() {
        let (_reg, emb) = table_with(5, 2, Some(vocab::PAD));
        emb.table.set_data(vec![0.1; 10]).unwrap();
        let tokens = TokenMatrix::from_columns(&[vec![vocab::ONE, vocab::PAD, vocab::PAD]]).unwrap();
        let mut tape = Tape::inference();
        let out = emb.forward(&mut tape, &tokens).unwrap();
        let loss = tape.mean_all(out);
        tape.backward(loss).unwrap();
        let grad = emb.table.grad_vec().unwrap();
        assert_eq!(&grad[vocab::PAD * 2..], &[0.0, 0.0]);
        assert!(grad[vocab::ONE * 2] != 0.0);
    }

    #[test]
    fn positional_row_zero_alternates_zero_one() {
        let pt = positional_table(16, 8, 0.1).unwrap();
        assert_eq!(pt.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn positional_row_one_matches_formula() {
        let pt = positional_table(16, 8, 0.1).unwrap();
        let row = pt.row(1);
        assert_relative_eq!(row[0], 1f64.sin(), epsilon = 1e-12);
        assert_relative_eq!(row[1], 1f64.cos(), epsilon = 1e-12);
        assert_relative_eq!(row[2], 0.1f64.sin(), epsilon = 1e-12);
        assert!((row[2] - 0.0998).abs() < 1e-4);
    }

    #[test]
    fn positional_values_stay_within_unit_interval() {
        let pt = positional_table(64, 8, 0.0).unwrap();
        for pos in 0..64 {
            assert!(pt.row(pos).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn odd_d_model_is_rejected() {
        assert!(positional_table(8, 7, 0.0).is_err());
    }

    #[test]
    fn zero_input_yields_table_rows() {
        let pt = positional_table(16, 8, 0.1).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(vec![2, 1, 8], vec![0.0; 16]).unwrap();
        let out = pt.forward(&mut tape, x).unwrap();
        assert_eq!(&tape.data(out)[..8], pt.row(0));
        assert_eq!(&tape.data(out)[8..], pt.row(1));
    }

    #[test]
    fn rank_two_input_is_promoted_to_batch_one() {
        let pt = positional_table(16, 8, 0.1).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(vec![3, 8], vec![0.0; 24]).unwrap();
        let out = pt.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(out), &[3, 1, 8]);
    }

    #[test]
    fn identical_embeddings_at_distinct_positions_become_distinct() {
        let pt = positional_table(16, 8, 0.1).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(vec![2, 1, 8], vec![0.25; 16]).unwrap();
        let summed = pt.forward(&mut tape, x).unwrap();
        let out = tape.data(summed).to_vec();
        assert_ne!(&out[..8], &out[8..]);
    }

    #[test]
    fn eval_mode_with_dropout_is_deterministic() {
        let pt = positional_table(16, 8, 0.1).unwrap();
        let run = || {
            let mut tape = Tape::inference();
            let x = tape.constant(vec![4, 1, 8], vec![0.3; 32]).unwrap();
            let out = pt.forward(&mut tape, x).unwrap();
            tape.data(out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sequence_longer_than_table_is_a_capacity_error() {
        let pt = positional_table(4, 8, 0.0).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(vec![5, 1, 8], vec![0.0; 40]).unwrap();
        assert!(matches!(
            pt.forward(&mut tape, x),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn unembedding_bias_dominates_zero_weights() {
        let mut reg = ParameterRegistry::new();
        let un = unembedding(&mut reg, "unembedding", 4, 4).unwrap();
        un.bias.set_data(vec![0.0, 0.0, 0.0, 5.0]).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(vec![2, 4], vec![0.7; 8]).unwrap();
        let logits = un.forward(&mut tape, x).unwrap();
        for row in tape.data(logits).chunks(4) {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, 3);
        }
    }
}
