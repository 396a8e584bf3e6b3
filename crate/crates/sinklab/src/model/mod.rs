//! The decoder-only transformer of the lab, instrumented so that every
//! attention map, hidden state, and per-head value vector can be inspected.
//!
//! Conventions: hidden states are [T, d] with one token per row, and every
//! weight matrix multiplies on the right (`out = in · W`). That makes the
//! concat projection W^(ℓ) literally Hd×d, and per-head matrices d×d — the
//! head dimension equals the model dimension, which is unusual but is the
//! shape the block equations are stated in.

mod checkpoint;
pub use checkpoint::checkpoint_precision;

use crate::numerics::{Mask, NumericsError, Precision, Scalar, Tape, Tensor, ValueId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocab {vocab}")]
    Token { id: usize, vocab: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    None,
    Rms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Rope,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub mlp_hidden: usize,
    pub nonlinearity: Nonlinearity,
    pub normalization: Normalization,
    pub positional: Positional,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("mlp_hidden", self.mlp_hidden),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be ≥ 1")));
            }
        }
        if self.positional == Positional::Rope && self.d_model % 2 != 0 {
            return Err(ModelError::Config(format!(
                "rotary positions need an even d_model, got {}",
                self.d_model
            )));
        }
        Ok(())
    }

    /// True when the architecture satisfies the assumptions the
    /// over-squashing bound is proved under (ReLU MLP, no normalization).
    /// The third assumption — attention weights treated as constants — is a
    /// forward-pass flag, not a config field.
    pub fn is_bound_compliant(&self) -> bool {
        self.nonlinearity == Nonlinearity::Relu && self.normalization == Normalization::None
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams<S: Scalar> {
    /// Query projection, d×d.
    pub wq: Tensor<S>,
    /// Key projection, d×d.
    pub wk: Tensor<S>,
    /// The per-head value matrix W^(ℓ,h), d×d.
    pub wv: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct LayerParams<S: Scalar> {
    pub heads: Vec<HeadParams<S>>,
    /// Concat projection W^(ℓ), Hd×d.
    pub w_out: Tensor<S>,
    /// MLP input weights, d×mlp_hidden.
    pub w1: Tensor<S>,
    /// MLP output weights, mlp_hidden×d.
    pub w2: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    /// Token embedding, vocab×d.
    pub embed: Tensor<S>,
    /// Unembedding, d×vocab.
    pub unembed: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
}

/// Everything the per-token forward pass exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord<S: Scalar> {
    /// Residual stream v^(0)..v^(L), each [T, d]; hidden[0] is the embedded
    /// input.
    pub hidden: Vec<Tensor<S>>,
    /// attention[l][h] is α^(ℓ,h), [T, T].
    pub attention: Vec<Vec<Tensor<S>>>,
    /// values[l][h] holds the per-head value vectors W^(ℓ,h) v_j as rows,
    /// [T, d].
    pub values: Vec<Vec<Tensor<S>>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Treat attention probabilities as constants during backward, matching
    /// the bound's "queries and keys are independent of the values".
    pub detach_attention: bool,
}

/// A forward pass left on its tape, for gradient work. Indices point at
/// tape values; `params` are the leaves holding the model weights.
pub struct TapedForward<S: Scalar> {
    pub tape: Tape<S>,
    /// Residual stream node per depth, L+1 entries.
    pub hidden: Vec<ValueId>,
    /// attn[l][h]: the attention output node; its α is saved on the tape.
    pub attn: Vec<Vec<ValueId>>,
    /// value_mats[l][h]: the per-head value matrix node (rows W^(ℓ,h) v_j).
    pub value_mats: Vec<Vec<ValueId>>,
    pub logits: ValueId,
    pub params: ParamIds,
}

pub struct HeadIds {
    pub wq: ValueId,
    pub wk: ValueId,
    pub wv: ValueId,
}

pub struct LayerIds {
    pub heads: Vec<HeadIds>,
    pub w_out: ValueId,
    pub w1: ValueId,
    pub w2: ValueId,
}

pub struct ParamIds {
    pub embed: ValueId,
    pub unembed: ValueId,
    pub layers: Vec<LayerIds>,
}

impl ParamIds {
    /// Parameter ids in the canonical checkpoint order, paired with names.
    pub fn named(&self) -> Vec<(String, ValueId)> {
        let mut out = vec![
            ("embed".to_string(), self.embed),
            ("unembed".to_string(), self.unembed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.wq"), head.wq));
                out.push((format!("layer{l}.head{h}.wk"), head.wk));
                out.push((format!("layer{l}.head{h}.wv"), head.wv));
            }
            out.push((format!("layer{l}.attn_out"), layer.w_out));
            out.push((format!("layer{l}.mlp_w1"), layer.w1));
            out.push((format!("layer{l}.mlp_w2"), layer.w2));
        }
        out
    }
}

/// Output of a single block applied outside a full forward pass.
pub struct BlockOutput<S: Scalar> {
    pub next: Tensor<S>,
    pub attention: Vec<Tensor<S>>,
    pub values: Vec<Tensor<S>>,
}

/// Rotary cosine/sine tables for positions 0..t, shape [t, d/2], with the
/// usual geometric angle schedule θ_j = base^(−2j/d).
pub fn rope_tables<S: Scalar>(t: usize, d: usize, base: f64) -> (Tensor<S>, Tensor<S>) {
    assert!(d % 2 == 0, "rope needs an even dimension");
    let pairs = d / 2;
    let mut cos = Tensor::zeros(&[t, pairs]);
    let mut sin = Tensor::zeros(&[t, pairs]);
    for pos in 0..t {
        for j in 0..pairs {
            let theta = base.powf(-2.0 * j as f64 / d as f64);
            let angle = pos as f64 * theta;
            cos.set2(pos, j, S::from_f64(angle.cos()));
            sin.set2(pos, j, S::from_f64(angle.sin()));
        }
    }
    (cos, sin)
}

pub const ROPE_BASE: f64 = 10_000.0;

fn attn_scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}

/// The attention kernel on raw query/key matrices: optional rotary
/// encoding at positions 0..T, scaled dot product, masked softmax.
/// Returns the row-stochastic α.
pub fn attention_weights<S: Scalar>(
    queries: &Tensor<S>,
    keys: &Tensor<S>,
    positional: Positional,
    mask: &Mask,
) -> Result<Tensor<S>> {
    let (t, d) = queries.as_matrix("attention_weights queries")?;
    let (tk, dk) = keys.as_matrix("attention_weights keys")?;
    if t != tk || d != dk || t != mask.len() {
        return Err(ModelError::Config(format!(
            "attention_weights: queries {t}x{d}, keys {tk}x{dk}, mask {}",
            mask.len()
        )));
    }
    // Run the exact same kernels the taped forward uses, on a scratch tape,
    // and return the copy of α it saved. An arbitrary value matrix is fine:
    // α does not depend on it.
    let mut tape = Tape::new();
    let mut q = tape.leaf(queries.clone());
    let mut k = tape.leaf(keys.clone());
    if positional == Positional::Rope {
        if d % 2 != 0 {
            return Err(ModelError::Config(format!(
                "rotary positions need an even head dimension, got {d}"
            )));
        }
        let (cos, sin) = rope_tables::<S>(t, d, ROPE_BASE);
        q = tape.rotate_pairs(q, &cos, &sin)?;
        k = tape.rotate_pairs(k, &cos, &sin)?;
    }
    let v = tape.leaf(Tensor::zeros(&[t, 1]));
    let z = tape.attention(q, k, v, mask, attn_scale(d), true)?;
    Ok(tape.attention_alpha(z)?.clone())
}

impl<S: Scalar> Model<S> {
    /// Freshly initialized model: N(0, 0.02) everywhere except the two
    /// residual-path projections (attention out, MLP out), which get
    /// std 0.02/√(2L).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.precision != S::PRECISION {
            return Err(ModelError::Config(format!(
                "config says {} but the model scalar is {}",
                config.precision.name(),
                S::PRECISION.name()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, 0.02).expect("std is positive");
        let residual = Normal::new(0.0, 0.02 / (2.0 * config.n_layers as f64).sqrt())
            .expect("std is positive");
        let mut draw = |shape: &[usize], dist: Normal<f64>| {
            Tensor::from_fn(shape, |_| S::from_f64(dist.sample(&mut rng)))
        };
        let d = config.d_model;
        let embed = draw(&[config.vocab_size, d], base);
        let unembed = draw(&[d, config.vocab_size], base);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut heads = Vec::with_capacity(config.n_heads);
            for _ in 0..config.n_heads {
                heads.push(HeadParams {
                    wq: draw(&[d, d], base),
                    wk: draw(&[d, d], base),
                    wv: draw(&[d, d], base),
                });
            }
            layers.push(LayerParams {
                heads,
                w_out: draw(&[config.n_heads * d, d], residual),
                w1: draw(&[d, config.mlp_hidden], base),
                w2: draw(&[config.mlp_hidden, d], residual),
            });
        }
        Ok(Self {
            config,
            embed,
            unembed,
            layers,
        })
    }

    /// All parameters in canonical checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("unembed".to_string(), &self.unembed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.wq"), &head.wq));
                out.push((format!("layer{l}.head{h}.wk"), &head.wk));
                out.push((format!("layer{l}.head{h}.wv"), &head.wv));
            }
            out.push((format!("layer{l}.attn_out"), &layer.w_out));
            out.push((format!("layer{l}.mlp_w1"), &layer.w1));
            out.push((format!("layer{l}.mlp_w2"), &layer.w2));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        out.push(("embed".to_string(), &mut self.embed));
        out.push(("unembed".to_string(), &mut self.unembed));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("layer{l}.head{h}.wq"), &mut head.wq));
                out.push((format!("layer{l}.head{h}.wk"), &mut head.wk));
                out.push((format!("layer{l}.head{h}.wv"), &mut head.wv));
            }
            out.push((format!("layer{l}.attn_out"), &mut layer.w_out));
            out.push((format!("layer{l}.mlp_w1"), &mut layer.w1));
            out.push((format!("layer{l}.mlp_w2"), &mut layer.w2));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::Config("empty token sequence".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::Token {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Register every parameter as a tape leaf, in canonical order.
    fn register_params(&self, tape: &mut Tape<S>) -> ParamIds {
        ParamIds {
            embed: tape.leaf(self.embed.clone()),
            unembed: tape.leaf(self.unembed.clone()),
            layers: self
                .layers
                .iter()
                .map(|layer| LayerIds {
                    heads: layer
                        .heads
                        .iter()
                        .map(|head| HeadIds {
                            wq: tape.leaf(head.wq.clone()),
                            wk: tape.leaf(head.wk.clone()),
                            wv: tape.leaf(head.wv.clone()),
                        })
                        .collect(),
                    w_out: tape.leaf(layer.w_out.clone()),
                    w1: tape.leaf(layer.w1.clone()),
                    w2: tape.leaf(layer.w2.clone()),
                })
                .collect(),
        }
    }

    /// One block on an existing tape. Returns (next hidden, per-head
    /// attention output nodes, per-head value matrix nodes).
    #[allow(clippy::type_complexity)]
    fn build_block(
        &self,
        tape: &mut Tape<S>,
        ids: &LayerIds,
        x: ValueId,
        mask: &Mask,
        rope: Option<&(Tensor<S>, Tensor<S>)>,
        opts: ForwardOptions,
    ) -> Result<(ValueId, Vec<ValueId>, Vec<ValueId>)> {
        let cfg = &self.config;
        let attn_in = match cfg.normalization {
            Normalization::Rms => tape.rms_norm(x)?,
            Normalization::None => x,
        };
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        let mut value_mats = Vec::with_capacity(cfg.n_heads);
        for head in &ids.heads {
            let mut q = tape.matmul(attn_in, head.wq)?;
            let mut k = tape.matmul(attn_in, head.wk)?;
            if let Some((cos, sin)) = rope {
                q = tape.rotate_pairs(q, cos, sin)?;
                k = tape.rotate_pairs(k, cos, sin)?;
            }
            let vmat = tape.matmul(attn_in, head.wv)?;
            let z = tape.attention(
                q,
                k,
                vmat,
                mask,
                attn_scale(cfg.d_model),
                opts.detach_attention,
            )?;
            head_outs.push(z);
            value_mats.push(vmat);
        }
        let concat = tape.concat_cols(&head_outs)?;
        let attn_out = tape.matmul(concat, ids.w_out)?;
        let z = tape.add(attn_out, x)?;
        let mlp_in = match cfg.normalization {
            Normalization::Rms => tape.rms_norm(z)?,
            Normalization::None => z,
        };
        let h1 = tape.matmul(mlp_in, ids.w1)?;
        let act = match cfg.nonlinearity {
            Nonlinearity::Relu => tape.relu(h1)?,
            Nonlinearity::Gelu => tape.gelu(h1)?,
        };
        let h2 = tape.matmul(act, ids.w2)?;
        let next = tape.add(h2, z)?;
        Ok((next, head_outs, value_mats))
    }

    fn rope_for(&self, t: usize) -> Option<(Tensor<S>, Tensor<S>)> {
        match self.config.positional {
            Positional::Rope => Some(rope_tables(t, self.config.d_model, ROPE_BASE)),
            Positional::None => None,
        }
    }

    /// Full forward pass on a fresh tape.
    pub fn forward_taped(
        &self,
        tokens: &[usize],
        mask: &Mask,
        opts: ForwardOptions,
    ) -> Result<TapedForward<S>> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        if mask.len() != t {
            return Err(ModelError::Config(format!(
                "mask length {} vs sequence length {t}",
                mask.len()
            )));
        }
        let rope = self.rope_for(t);
        let mut tape = Tape::new();
        let params = self.register_params(&mut tape);
        let embedded = tape.embed(params.embed, tokens)?;
        let mut hidden = vec![embedded];
        let mut attn = Vec::with_capacity(self.config.n_layers);
        let mut value_mats = Vec::with_capacity(self.config.n_layers);
        for ids in &params.layers {
            let x = *hidden.last().unwrap();
            let (next, heads, vals) =
                self.build_block(&mut tape, ids, x, mask, rope.as_ref(), opts)?;
            hidden.push(next);
            attn.push(heads);
            value_mats.push(vals);
        }
        let final_h = match self.config.normalization {
            Normalization::Rms => tape.rms_norm(*hidden.last().unwrap())?,
            Normalization::None => *hidden.last().unwrap(),
        };
        let logits = tape.matmul(final_h, params.unembed)?;
        Ok(TapedForward {
            tape,
            hidden,
            attn,
            value_mats,
            logits,
            params,
        })
    }

    /// Forward pass returning only the instrumentation record.
    pub fn forward(&self, tokens: &[usize], mask: &Mask) -> Result<ForwardRecord<S>> {
        let run = self.forward_taped(tokens, mask, ForwardOptions::default())?;
        Ok(run.record())
    }

    /// One block applied to an explicit hidden state, outside any forward
    /// pass. Composing blocks 0..L over the embedded input gives bitwise
    /// the same states as `forward`.
    pub fn block_forward(
        &self,
        layer: usize,
        v: &Tensor<S>,
        mask: &Mask,
        opts: ForwardOptions,
    ) -> Result<BlockOutput<S>> {
        if layer >= self.config.n_layers {
            return Err(ModelError::Config(format!(
                "layer {layer} out of range for depth {}",
                self.config.n_layers
            )));
        }
        let (t, d) = v.as_matrix("block_forward input")?;
        if d != self.config.d_model || mask.len() != t {
            return Err(ModelError::Config(format!(
                "block_forward: input {t}x{d}, d_model {}, mask {}",
                self.config.d_model,
                mask.len()
            )));
        }
        let rope = self.rope_for(t);
        let mut tape = Tape::new();
        let layer_params = &self.layers[layer];
        let ids = LayerIds {
            heads: layer_params
                .heads
                .iter()
                .map(|head| HeadIds {
                    wq: tape.leaf(head.wq.clone()),
                    wk: tape.leaf(head.wk.clone()),
                    wv: tape.leaf(head.wv.clone()),
                })
                .collect(),
            w_out: tape.leaf(layer_params.w_out.clone()),
            w1: tape.leaf(layer_params.w1.clone()),
            w2: tape.leaf(layer_params.w2.clone()),
        };
        let x = tape.leaf(v.clone());
        let (next, heads, vals) = self.build_block(&mut tape, &ids, x, mask, rope.as_ref(), opts)?;
        Ok(BlockOutput {
            next: tape.value(next).clone(),
            attention: heads
                .iter()
                .map(|&z| tape.attention_alpha(z).map(Tensor::clone))
                .collect::<crate::numerics::Result<_>>()?,
            values: vals.iter().map(|&id| tape.value(id).clone()).collect(),
        })
    }

    /// Embedded input rows (hidden state zero) for a token sequence.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let mut out = Tensor::zeros(&[tokens.len(), d]);
        for (row, &id) in tokens.iter().enumerate() {
            out.row_mut(row).copy_from_slice(self.embed.row(id));
        }
        Ok(out)
    }

    /// Re-type every parameter (f32 ↔ f64). Lets double-precision analyses
    /// such as Jacobian extraction run on single-precision checkpoints.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let mut config = self.config;
        config.precision = T::PRECISION;
        Model {
            config,
            embed: self.embed.cast(),
            unembed: self.unembed.cast(),
            layers: self
                .layers
                .iter()
                .map(|layer| LayerParams {
                    heads: layer
                        .heads
                        .iter()
                        .map(|head| HeadParams {
                            wq: head.wq.cast(),
                            wk: head.wk.cast(),
                            wv: head.wv.cast(),
                        })
                        .collect(),
                    w_out: layer.w_out.cast(),
                    w1: layer.w1.cast(),
                    w2: layer.w2.cast(),
                })
                .collect(),
        }
    }

    /// Greedy continuation for smoke tests: argmax of the last-position
    /// logits, ties broken toward the smaller id.
    pub fn greedy_next_token(&self, tokens: &[usize]) -> Result<usize> {
        let mask = Mask::causal(tokens.len());
        let run = self.forward_taped(tokens, &mask, ForwardOptions::default())?;
        let logits = run.tape.value(run.logits);
        let row = logits.row(tokens.len() - 1);
        let mut best = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        Ok(best)
    }
}

impl<S: Scalar> TapedForward<S> {
    /// Copy the instrumentation tensors off the tape.
    pub fn record(&self) -> ForwardRecord<S> {
        let hidden = self
            .hidden
            .iter()
            .map(|&id| self.tape.value(id).clone())
            .collect();
        let attention = self
            .attn
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|&z| {
                        self.tape
                            .attention_alpha(z)
                            .expect("attn ids are attention nodes")
                            .clone()
                    })
                    .collect()
            })
            .collect();
        let values = self
            .value_mats
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|&id| self.tape.value(id).clone())
                    .collect()
            })
            .collect();
        ForwardRecord {
            hidden,
            attention,
            values,
        }
    }
}
