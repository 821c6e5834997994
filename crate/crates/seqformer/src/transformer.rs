//! Pre-norm encoder-decoder transformer.
//!
//! Attention uses the packed parameterization: one 3d×d input projection
//! with a 3d bias plus a d×d output projection with bias. The packing is
//! load-bearing — it is what makes the parameter counts land on the
//! expected 46/88/1332 anchors. Layers normalize before each sublayer
//! (`norm_first`), and both stacks end in a final layer norm.

use crate::error::{Error, Result};
use crate::masking::{CausalMask, KeyPaddingMask};
use crate::nn::{Dropout, LayerNorm, LinearLayer, ParameterRegistry};
use crate::tape::{Tape, Value};
use crate::tensor::{Parameter, Tensor};

/// Hyperparameters mirroring the reference constructor arguments.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub nhead: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub dim_feedforward: usize,
    pub dropout_p: f64,
    pub layer_norm_eps: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.nhead == 0
            || self.num_encoder_layers == 0
            || self.num_decoder_layers == 0
            || self.dim_feedforward == 0
        {
            return Err(Error::Config("all extents must be >= 1".into()));
        }
        if self.d_model % self.nhead != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by nhead {}",
                self.d_model, self.nhead
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0,1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.nhead
    }
}

/// Attention masks for one forward pass. Additive masks apply to attention
/// logits; key-padding masks force -inf at padded key columns.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardMasks<'a> {
    pub tgt_mask: Option<&'a CausalMask>,
    pub src_key_padding: Option<&'a KeyPaddingMask>,
    pub tgt_key_padding: Option<&'a KeyPaddingMask>,
    pub memory_key_padding: Option<&'a KeyPaddingMask>,
}

/// Scaled dot-product attention over rank-2 q/k/v for a single head and
/// batch element: softmax(q·kᵀ/√d_h + mask)·v. Padded keys are excluded by
/// -inf substitution; a query whose keys are all masked yields a zero row.
pub fn scaled_dot_product_attention(
    tape: &mut Tape,
    q: Value,
    k: Value,
    v: Value,
    additive_mask: Option<&[f64]>,
    key_padding: Option<&[bool]>,
) -> Result<Value> {
    let (lq, d_h) = (tape.shape(q)[0], tape.shape(q)[1]);
    let lk = tape.shape(k)[0];
    if tape.shape(k)[1] != d_h || tape.shape(v)[0] != lk {
        return Err(Error::DimMismatch {
            op: "scaled_dot_product_attention",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    if let Some(m) = additive_mask {
        if m.len() != lq * lk {
            return Err(Error::DimMismatch {
                op: "attention mask",
                lhs: vec![lq, lk],
                rhs: vec![m.len()],
            });
        }
    }
    if let Some(kp) = key_padding {
        if kp.len() != lk {
            return Err(Error::DimMismatch {
                op: "attention key padding",
                lhs: vec![lk],
                rhs: vec![kp.len()],
            });
        }
    }

    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.mul_scalar(scores, 1.0 / (d_h as f64).sqrt());

    let combined = combine_masks(lq, lk, additive_mask, key_padding);
    let weights = tape.softmax_lastdim(scaled, combined.as_deref())?;
    tape.matmul(weights, v)
}

fn combine_masks(
    lq: usize,
    lk: usize,
    additive: Option<&[f64]>,
    key_padding: Option<&[bool]>,
) -> Option<Vec<f64>> {
    if additive.is_none() && key_padding.is_none() {
        return None;
    }
    let mut m = match additive {
        Some(a) => a.to_vec(),
        None => vec![0.0; lq * lk],
    };
    if let Some(kp) = key_padding {
        for row in m.chunks_mut(lk) {
            for (slot, &ignore) in row.iter_mut().zip(kp) {
                if ignore {
                    *slot = f64::NEG_INFINITY;
                }
            }
        }
    }
    Some(m)
}

/// Multi-head attention with the packed 3d×d input projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub in_weight: Parameter,
    pub in_bias: Parameter,
    pub out_proj: LinearLayer,
    pub d_model: usize,
    pub nhead: usize,
}

impl MultiHeadAttention {
    pub fn new(
        registry: &mut ParameterRegistry,
        name: &str,
        d_model: usize,
        nhead: usize,
    ) -> Result<Self> {
        if d_model % nhead != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by nhead {nhead}"
            )));
        }
        let in_weight = registry.register(
            format!("{name}.in_proj.weight"),
            Parameter::new(Tensor::zeros(vec![3 * d_model, d_model])?),
        )?;
        let in_bias = registry.register(
            format!("{name}.in_proj.bias"),
            Parameter::new(Tensor::zeros(vec![3 * d_model])?),
        )?;
        let out_proj = LinearLayer::new(registry, &format!("{name}.out_proj"), d_model, d_model)?;
        Ok(MultiHeadAttention {
            in_weight,
            in_bias,
            out_proj,
            d_model,
            nhead,
        })
    }

    /// q from `x_q`, k/v from `x_kv` (equal values mean self-attention).
    /// Both are [L,B,d]; per batch element and head the raw attention runs
    /// on rank-2 slices, then heads are concatenated and output-projected.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x_q: Value,
        x_kv: Value,
        additive_mask: Option<&CausalMask>,
        key_padding: Option<&KeyPaddingMask>,
    ) -> Result<Value> {
        let d = self.d_model;
        let d_h = d / self.nhead;
        let batch = tape.shape(x_q)[1];

        let w = tape.leaf(&self.in_weight);
        let b = tape.leaf(&self.in_bias);

        // Self-attention projects q,k,v in one fused linear; cross-attention
        // splits the packed weight into its q and kv row blocks.
        let (q_all, kv_all) = if x_q == x_kv {
            let qkv = tape.linear(x_q, w, b)?; // [L,B,3d]
            (qkv, None)
        } else {
            let wq = tape.slice_front(w, 0, d)?;
            let bq = tape.slice_front(b, 0, d)?;
            let q = tape.linear(x_q, wq, bq)?; // [T,B,d]
            let wkv = tape.slice_front(w, d, 2 * d)?;
            let bkv = tape.slice_front(b, d, 2 * d)?;
            let kv = tape.linear(x_kv, wkv, bkv)?; // [S,B,2d]
            (q, Some(kv))
        };

        let mask_values = additive_mask.map(CausalMask::values);
        let mut columns = Vec::with_capacity(batch);
        for bi in 0..batch {
            let q_col = tape.select_batch(q_all, bi)?;
            let kv_col = match kv_all {
                Some(kv) => tape.select_batch(kv, bi)?,
                None => q_col,
            };
            let kp_row = key_padding.map(|kp| kp.row(bi));

            let mut heads = Vec::with_capacity(self.nhead);
            for h in 0..self.nhead {
                // Column layout: self-attention packs [q|k|v], cross packs [k|v].
                let (q_off, k_off, v_off) = if kv_all.is_none() {
                    (h * d_h, d + h * d_h, 2 * d + h * d_h)
                } else {
                    (h * d_h, h * d_h, d + h * d_h)
                };
                let q = tape.slice_last(q_col, q_off, d_h)?;
                let k = tape.slice_last(kv_col, k_off, d_h)?;
                let v = tape.slice_last(kv_col, v_off, d_h)?;
                heads.push(scaled_dot_product_attention(
                    tape, q, k, v, mask_values, kp_row,
                )?);
            }
            let merged = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_last(&heads)?
            };
            columns.push(merged);
        }
        let stacked = tape.stack_batch(&columns)?;
        self.out_proj.forward(tape, stacked)
    }
}

/// Pre-norm encoder layer: x + Drop(SelfAttn(LN1(x))), then
/// x + Drop(FF(LN2(x))) with FF = linear2(Drop(relu(linear1(·)))).
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub linear1: LinearLayer,
    pub linear2: LinearLayer,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub dropout: Dropout,
}

impl EncoderLayer {
    pub fn new(registry: &mut ParameterRegistry, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        Ok(EncoderLayer {
            self_attn: MultiHeadAttention::new(
                registry,
                &format!("{name}.self_attn"),
                cfg.d_model,
                cfg.nhead,
            )?,
            linear1: LinearLayer::new(
                registry,
                &format!("{name}.linear1"),
                cfg.d_model,
                cfg.dim_feedforward,
            )?,
            linear2: LinearLayer::new(
                registry,
                &format!("{name}.linear2"),
                cfg.dim_feedforward,
                cfg.d_model,
            )?,
            norm1: LayerNorm::new(registry, &format!("{name}.norm1"), cfg.d_model, cfg.layer_norm_eps)?,
            norm2: LayerNorm::new(registry, &format!("{name}.norm2"), cfg.d_model, cfg.layer_norm_eps)?,
            dropout: Dropout::new(cfg.dropout_p)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Value,
        src_key_padding: Option<&KeyPaddingMask>,
    ) -> Result<Value> {
        let normed = self.norm1.forward(tape, x)?;
        let attended = self
            .self_attn
            .forward(tape, normed, normed, None, src_key_padding)?;
        let dropped = self.dropout.forward(tape, attended);
        let x = tape.add(x, dropped)?;

        let normed = self.norm2.forward(tape, x)?;
        let ff = self.feed_forward(tape, normed)?;
        let dropped = self.dropout.forward(tape, ff);
        tape.add(x, dropped)
    }

    fn feed_forward(&self, tape: &mut Tape, x: Value) -> Result<Value> {
        let hidden = self.linear1.forward(tape, x)?;
        let activated = tape.relu(hidden);
        let dropped = self.dropout.forward(tape, activated);
        self.linear2.forward(tape, dropped)
    }
}

/// Pre-norm decoder layer: masked self-attention, cross-attention over the
/// encoder memory, then feed-forward, each behind its own norm and residual.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub linear1: LinearLayer,
    pub linear2: LinearLayer,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub norm3: LayerNorm,
    pub dropout: Dropout,
}

impl DecoderLayer {
    pub fn new(registry: &mut ParameterRegistry, name: &str, cfg: &TransformerConfig) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(
                registry,
                &format!("{name}.self_attn"),
                cfg.d_model,
                cfg.nhead,
            )?,
            cross_attn: MultiHeadAttention::new(
                registry,
                &format!("{name}.cross_attn"),
                cfg.d_model,
                cfg.nhead,
            )?,
            linear1: LinearLayer::new(
                registry,
                &format!("{name}.linear1"),
                cfg.d_model,
                cfg.dim_feedforward,
            )?,
            linear2: LinearLayer::new(
                registry,
                &format!("{name}.linear2"),
                cfg.dim_feedforward,
                cfg.d_model,
            )?,
            norm1: LayerNorm::new(registry, &format!("{name}.norm1"), cfg.d_model, cfg.layer_norm_eps)?,
            norm2: LayerNorm::new(registry, &format!("{name}.norm2"), cfg.d_model, cfg.layer_norm_eps)?,
            norm3: LayerNorm::new(registry, &format!("{name}.norm3"), cfg.d_model, cfg.layer_norm_eps)?,
            dropout: Dropout::new(cfg.dropout_p)?,
        })
    }

    /// A missing `tgt_mask` means all positions see each other, which is
    /// exactly the configuration whose failure mode the masked stage fixes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        y: Value,
        memory: Value,
        tgt_mask: Option<&CausalMask>,
        tgt_key_padding: Option<&KeyPaddingMask>,
        memory_key_padding: Option<&KeyPaddingMask>,
    ) -> Result<Value> {
        let normed = self.norm1.forward(tape, y)?;
        let attended = self
            .self_attn
            .forward(tape, normed, normed, tgt_mask, tgt_key_padding)?;
        let dropped = self.dropout.forward(tape, attended);
        let y = tape.add(y, dropped)?;

        let normed = self.norm2.forward(tape, y)?;
        let crossed = self
            .cross_attn
            .forward(tape, normed, memory, None, memory_key_padding)?;
        let dropped = self.dropout.forward(tape, crossed);
        let y = tape.add(y, dropped)?;

        let normed = self.norm3.forward(tape, y)?;
        let hidden = self.linear1.forward(tape, normed)?;
        let activated = tape.relu(hidden);
        let inner = self.dropout.forward(tape, activated);
        let ff = self.linear2.forward(tape, inner)?;
        let dropped = self.dropout.forward(tape, ff);
        tape.add(y, dropped)
    }
}

/// Encoder stack, decoder stack and their final norms.
#[derive(Debug, Clone)]
pub struct EncoderDecoder {
    pub config: TransformerConfig,
    pub encoder_layers: Vec<EncoderLayer>,
    pub decoder_layers: Vec<DecoderLayer>,
    pub encoder_norm: LayerNorm,
    pub decoder_norm: LayerNorm,
}

impl EncoderDecoder {
    pub fn new(registry: &mut ParameterRegistry, config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let encoder_layers = (0..config.num_encoder_layers)
            .map(|i| EncoderLayer::new(registry, &format!("encoder.layers.{i}"), &config))
            .collect::<Result<Vec<_>>>()?;
        let decoder_layers = (0..config.num_decoder_layers)
            .map(|i| DecoderLayer::new(registry, &format!("decoder.layers.{i}"), &config))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm =
            LayerNorm::new(registry, "encoder.norm", config.d_model, config.layer_norm_eps)?;
        let decoder_norm =
            LayerNorm::new(registry, "decoder.norm", config.d_model, config.layer_norm_eps)?;
        Ok(EncoderDecoder {
            config,
            encoder_layers,
            decoder_layers,
            encoder_norm,
            decoder_norm,
        })
    }

    /// Runs the encoder stack and its final norm over [S,B,d].
    pub fn encode(
        &self,
        tape: &mut Tape,
        src: Value,
        src_key_padding: Option<&KeyPaddingMask>,
    ) -> Result<Value> {
        let mut x = src;
        for layer in &self.encoder_layers {
            x = layer.forward(tape, x, src_key_padding)?;
        }
        self.encoder_norm.forward(tape, x)
    }

    /// Runs the decoder stack and its final norm over [T,B,d].
    pub fn decode(
        &self,
        tape: &mut Tape,
        tgt: Value,
        memory: Value,
        masks: &ForwardMasks,
    ) -> Result<Value> {
        let mut y = tgt;
        for layer in &self.decoder_layers {
            y = layer.forward(
                tape,
                y,
                memory,
                masks.tgt_mask,
                masks.tgt_key_padding,
                masks.memory_key_padding,
            )?;
        }
        self.decoder_norm.forward(tape, y)
    }

    /// Full pass: encoder over src embeddings, decoder over tgt embeddings
    /// with the provided masks. Layout is sequence-first [len, batch, d].
    pub fn forward(
        &self,
        tape: &mut Tape,
        src_emb: Value,
        tgt_emb: Value,
        masks: &ForwardMasks,
    ) -> Result<Value> {
        let (ss, st) = (tape.shape(src_emb).to_vec(), tape.shape(tgt_emb).to_vec());
        if ss.len() != 3 || st.len() != 3 || ss[1] != st[1] || ss[2] != st[2] {
            return Err(Error::DimMismatch {
                op: "transformer_forward",
                lhs: ss,
                rhs: st,
            });
        }
        let memory = self.encode(tape, src_emb, masks.src_key_padding)?;
        self.decode(tape, tgt_emb, memory, masks)
    }
}
