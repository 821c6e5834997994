//! The staged sequence model: a transformer core plus whichever parts of
//! the token pipeline the stage enables.
//!
//! Stages form a ladder: each one keeps everything the previous stage had
//! and adds one component.
//!
//! | stage      | adds                                            |
//! |------------|-------------------------------------------------|
//! | plain      | raw-value transformer, d_model = 1              |
//! | token      | embedding + un-embedding over {0,1,SOS,EOS}     |
//! | masked     | causal target mask, in training and inference   |
//! | positional | sinusoidal position vectors after the embedding |
//! | padded     | PAD token, key-padding masks, ignored in loss   |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_xavier_uniform, LinearLayer, ParameterRegistry};
use crate::seqdata::{vocab, Batch, TokenMatrix};
use crate::tape::{Tape, Value};
use crate::tokens::{positional_table, unembedding, EmbeddingTable, PositionalTable, DEFAULT_MAX_LEN};
use crate::transformer::{EncoderDecoder, ForwardMasks, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelStage {
    Plain,
    Token,
    Masked,
    Positional,
    Padded,
}

impl ModelStage {
    pub fn uses_tokens(self) -> bool {
        self != ModelStage::Plain
    }

    pub fn uses_causal_mask(self) -> bool {
        matches!(self, ModelStage::Masked | ModelStage::Positional | ModelStage::Padded)
    }

    pub fn uses_positional_encoding(self) -> bool {
        matches!(self, ModelStage::Positional | ModelStage::Padded)
    }

    pub fn uses_padding(self) -> bool {
        self == ModelStage::Padded
    }

    /// Vocabulary size seen by embedding and un-embedding, or None for the
    /// raw-value stage.
    pub fn vocab_size(self) -> Option<usize> {
        match self {
            ModelStage::Plain => None,
            ModelStage::Padded => Some(vocab::NUM_TOKENS + 1),
            _ => Some(vocab::NUM_TOKENS),
        }
    }

    /// The constructor arguments used throughout: d_model 1 for the raw
    /// stage, 8 once tokens are embedded.
    pub fn default_config(self) -> TransformerConfig {
        TransformerConfig {
            d_model: if self.uses_tokens() { 8 } else { 1 },
            nhead: 1,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            dim_feedforward: 8,
            dropout_p: 0.1,
            layer_norm_eps: 1e-5,
        }
    }
}

impl std::fmt::Display for ModelStage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ModelStage::Plain => "plain",
            ModelStage::Token => "token",
            ModelStage::Masked => "masked",
            ModelStage::Positional => "positional",
            ModelStage::Padded => "padded",
        };
        f.write_str(name)
    }
}

/// A constructed model: core transformer, optional token pipeline, and the
/// registry holding every learnable tensor.
#[derive(Debug)]
pub struct SeqModel {
    pub stage: ModelStage,
    pub config: TransformerConfig,
    pub core: EncoderDecoder,
    pub embedding: Option<EmbeddingTable>,
    pub unembedding: Option<LinearLayer>,
    pub positional: Option<PositionalTable>,
    pub registry: ParameterRegistry,
    pub init_seed: u64,
}

impl SeqModel {
    /// Builds and initializes a model with the stage's default config.
    pub fn new(stage: ModelStage, init_seed: u64) -> Result<Self> {
        Self::with_config(stage, stage.default_config(), init_seed)
    }

    pub fn with_config(stage: ModelStage, config: TransformerConfig, init_seed: u64) -> Result<Self> {
        let mut registry = ParameterRegistry::new();
        let (embedding, unembedding) = match stage.vocab_size() {
            Some(v) => {
                let pad_row = stage.uses_padding().then_some(vocab::PAD);
                let emb = EmbeddingTable::new(&mut registry, "embedding", v, config.d_model, pad_row)?;
                let un = unembedding(&mut registry, "unembedding", config.d_model, v)?;
                (Some(emb), Some(un))
            }
            None => (None, None),
        };
        let core = EncoderDecoder::new(&mut registry, config.clone())?;
        let positional = if stage.uses_positional_encoding() {
            Some(positional_table(DEFAULT_MAX_LEN, config.d_model, config.dropout_p)?)
        } else {
            None
        };

        init_xavier_uniform(&registry, init_seed);
        if let Some(emb) = &embedding {
            emb.reset_padding_row();
        }

        Ok(SeqModel {
            stage,
            config,
            core,
            embedding,
            unembedding,
            positional,
            registry,
            init_seed,
        })
    }

    /// Embedding lookup plus positional encoding, as the stage dictates.
    fn embed_tokens(&self, tape: &mut Tape, tokens: &TokenMatrix) -> Result<Value> {
        let emb = self
            .embedding
            .as_ref()
            .ok_or_else(|| Error::contract("embed_tokens", "a token-stage model", "plain stage"))?;
        let mut x = emb.forward(tape, tokens)?;
        if let Some(pt) = &self.positional {
            x = pt.forward(tape, x)?;
        }
        Ok(x)
    }

    /// Token pipeline forward pass: embeds src and tgt_in, runs the core
    /// with the masks this stage applies, and maps features to logits
    /// [T, B, vocab].
    pub fn forward_batch(&self, tape: &mut Tape, batch: &Batch) -> Result<Value> {
        let causal = self.stage.uses_causal_mask().then_some(&batch.causal);
        let masks = if self.stage.uses_padding() {
            ForwardMasks {
                tgt_mask: causal,
                src_key_padding: Some(&batch.src_key_padding),
                tgt_key_padding: Some(&batch.tgt_key_padding),
                memory_key_padding: Some(batch.memory_key_padding()),
            }
        } else {
            ForwardMasks {
                tgt_mask: causal,
                ..ForwardMasks::default()
            }
        };

        let src_emb = self.embed_tokens(tape, &batch.src)?;
        let tgt_emb = self.embed_tokens(tape, &batch.tgt_in)?;
        let features = self.core.forward(tape, src_emb, tgt_emb, &masks)?;
        let un = self
            .unembedding
            .as_ref()
            .expect("token stages always carry an unembedding");
        un.forward(tape, features)
    }

    /// Forward pass over bare token matrices, deriving the masks this stage
    /// applies from the tokens themselves. Training goes through
    /// [`Self::forward_batch`]; this entry point serves decoding, where the
    /// target grows one token per step.
    pub fn forward_step(
        &self,
        tape: &mut Tape,
        src: &TokenMatrix,
        tgt_in: &TokenMatrix,
    ) -> Result<Value> {
        let causal = if self.stage.uses_causal_mask() {
            Some(crate::masking::causal_mask(tgt_in.seq_len())?)
        } else {
            None
        };
        let (src_kp, tgt_kp);
        let masks = if self.stage.uses_padding() {
            src_kp = crate::masking::key_padding_mask(src, vocab::PAD);
            tgt_kp = crate::masking::key_padding_mask(tgt_in, vocab::PAD);
            ForwardMasks {
                tgt_mask: causal.as_ref(),
                src_key_padding: Some(&src_kp),
                tgt_key_padding: Some(&tgt_kp),
                memory_key_padding: Some(&src_kp),
            }
        } else {
            ForwardMasks {
                tgt_mask: causal.as_ref(),
                ..ForwardMasks::default()
            }
        };
        let src_emb = self.embed_tokens(tape, src)?;
        let tgt_emb = self.embed_tokens(tape, tgt_in)?;
        let features = self.core.forward(tape, src_emb, tgt_emb, &masks)?;
        let un = self
            .unembedding
            .as_ref()
            .expect("token stages always carry an unembedding");
        un.forward(tape, features)
    }

    /// Raw-value forward pass for the plain stage: src and tgt are
    /// [len, batch, 1] value tensors, output has tgt's shape.
    pub fn forward_values(&self, tape: &mut Tape, src: Value, tgt: Value) -> Result<Value> {
        if self.stage.uses_tokens() {
            return Err(Error::contract(
                "forward_values",
                "the plain stage",
                format!("{} stage", self.stage),
            ));
        }
        self.core.forward(tape, src, tgt, &ForwardMasks::default())
    }

    pub fn count_parameters(&self) -> usize {
        self.registry.count_parameters()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqdata::frame_and_pad;

    #[test]
    fn parameter_count_anchor_plain_ff1_is_46() {
        let mut cfg = ModelStage::Plain.default_config();
        cfg.dim_feedforward = 1;
        let model = SeqModel::with_config(ModelStage::Plain, cfg, 0).unwrap();
        assert_eq!(model.count_parameters(), 46);
    }

    #[test]
    fn parameter_count_anchor_plain_ff8_is_88() {
        let model = SeqModel::new(ModelStage::Plain, 0).unwrap();
        assert_eq!(model.count_parameters(), 88);
    }

    #[test]
    fn parameter_count_anchor_token_is_1332() {
        let model = SeqModel::new(ModelStage::Token, 0).unwrap();
        assert_eq!(model.count_parameters(), 1332);
    }

    #[test]
    fn padded_stage_has_five_logits() {
        let model = SeqModel::new(ModelStage::Padded, 0).unwrap();
        let batch = frame_and_pad(&[(vec![1], vec![0, 0, 0])], Some(6)).unwrap();
        let mut tape = Tape::inference();
        let logits = model.forward_batch(&mut tape, &batch).unwrap();
        assert_eq!(tape.shape(logits).last(), Some(&5));
    }

    #[test]
    fn token_stage_has_four_logits() {
        let model = SeqModel::new(ModelStage::Token, 0).unwrap();
        let batch = frame_and_pad(&[(vec![1, 1, 1], vec![0])], None).unwrap();
        let mut tape = Tape::inference();
        let logits = model.forward_batch(&mut tape, &batch).unwrap();
        assert_eq!(tape.shape(logits), &[2, 1, 4]);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a = SeqModel::new(ModelStage::Positional, 11).unwrap();
        let b = SeqModel::new(ModelStage::Positional, 11).unwrap();
        for ((name_a, pa), (name_b, pb)) in a.registry.iter().zip(b.registry.iter()) {
            assert_eq!(name_a, name_b);
            assert_eq!(pa.data_vec(), pb.data_vec());
        }
    }

    #[test]
    fn pad_embedding_row_starts_at_zero() {
        let model = SeqModel::new(ModelStage::Padded, 3).unwrap();
        let emb = model.embedding.as_ref().unwrap();
        let d = emb.d_model;
        let data = emb.table.data_vec();
        assert_eq!(&data[vocab::PAD * d..(vocab::PAD + 1) * d], vec![0.0; d]);
        // regular rows are random, hence nonzero
        assert!(data[..d].iter().any(|&v| v != 0.0));
    }
}
