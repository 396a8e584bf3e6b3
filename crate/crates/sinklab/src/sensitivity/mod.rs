//! Jacobian-based mixing measurement, the over-squashing bound, per-layer
//! Lipschitz constants, and the perturbation-propagation experiment.
//!
//! The bound machinery targets the theorem-scoped architecture (ReLU MLP,
//! no normalization) with attention weights treated as constants; the
//! Jacobian and perturbation tools work on any model the crate can build.

use crate::model::{ForwardOptions, Model, ModelError, Normalization, Nonlinearity};
use crate::numerics::{
    matmul, spectral_norm, Mask, NumericsError, Scalar, Tape, Tensor, ValueId,
};

#[derive(Debug, thiserror::Error)]
pub enum SensitivityError {
    /// The requested analysis needs a bound-compliant model and this one
    /// is not, or the mode combination is unsupported.
    #[error("unsupported mode: {0}")]
    Mode(String),
    #[error("bad prompt pair: {0}")]
    Prompt(String),
    #[error("bad index: {0}")]
    Index(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, SensitivityError>;

/// How the residual identity shows up in the mixing matrices
/// ᾱ^(ℓ) = Σ_h α^(ℓ,h) + δ·I. `Proof` adds the full δ (the form the
/// induction actually uses); `Statement` adds δ/H.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaMode {
    Proof,
    Statement,
}

impl DeltaMode {
    fn diagonal(self, n_heads: usize) -> f64 {
        match self {
            DeltaMode::Proof => 1.0,
            DeltaMode::Statement => 1.0 / n_heads as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMode {
    ExactAutodiff,
    FiniteDifference,
}

impl JacobianMode {
    pub fn name(self) -> &'static str {
        match self {
            JacobianMode::ExactAutodiff => "exact-autodiff",
            JacobianMode::FiniteDifference => "finite-difference",
        }
    }
}

/// Per-layer Lipschitz data: C_ℓ = (‖ψ_ℓ‖ + 1) · ‖W^(ℓ)‖ · max_h ‖W^(ℓ,h)‖,
/// with ‖ψ_ℓ‖ = ‖W₂^(ℓ)‖ · ‖W₁^(ℓ)‖ bounding the MLP.
#[derive(Debug, Clone)]
pub struct LipschitzReport {
    pub per_layer_c: Vec<f64>,
    pub c_max: f64,
    /// ‖ψ_ℓ‖ per layer.
    pub psi_norms: Vec<f64>,
    /// ‖W^(ℓ)‖ · max_h ‖W^(ℓ,h)‖ per layer, the factor that must reach 1
    /// before the bound's δ-absorption step is sound.
    pub mixing_norms: Vec<f64>,
}

/// One (i, j) sensitivity measurement against the over-squashing bound.
#[derive(Debug, Clone)]
pub struct SensitivityReport {
    pub jacobian_norm: f64,
    pub bound: f64,
    pub per_layer_c: Vec<f64>,
    pub i: usize,
    pub j: usize,
    pub mode: JacobianMode,
    pub attention_detached: bool,
}

impl SensitivityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,index,value\n");
        for (l, c) in self.per_layer_c.iter().enumerate() {
            out.push_str(&format!("per_layer_c,{l},{c}\n"));
        }
        out.push_str(&format!("jacobian_norm,-,{}\n", self.jacobian_norm));
        out.push_str(&format!("bound,-,{}\n", self.bound));
        out.push_str(&format!("i,-,{}\n", self.i));
        out.push_str(&format!("j,-,{}\n", self.j));
        out.push_str(&format!("mode,-,{}\n", self.mode.name()));
        out.push_str(&format!("attention_detached,-,{}\n", self.attention_detached));
        out
    }
}

/// Distances ‖v_t^(ℓ)(p) − v_t^(ℓ)(p′)‖₂ for two prompts differing at one
/// position, per depth and token.
#[derive(Debug, Clone)]
pub struct PerturbationMap {
    /// distances[ℓ][t], with ℓ = 0 the embedding layer; (L+1) × T.
    pub distances: Vec<Vec<f64>>,
    pub perturbed_index: usize,
    pub with_bos: bool,
}

impl PerturbationMap {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,token,distance\n");
        for (l, row) in self.distances.iter().enumerate() {
            for (t, d) in row.iter().enumerate() {
                out.push_str(&format!("{l},{t},{d}\n"));
            }
        }
        out
    }
}

fn spectral<S: Scalar>(m: &Tensor<S>) -> Result<f64> {
    Ok(spectral_norm(m)?.value)
}

/// Per-layer constants C_ℓ and their max. Requires a bound-compliant
/// configuration; normalization layers and GELU fall outside the theorem.
pub fn lipschitz_constants<S: Scalar>(model: &Model<S>) -> Result<LipschitzReport> {
    if !model.config.is_bound_compliant() {
        return Err(SensitivityError::Mode(format!(
            "lipschitz constants need relu + no normalization, got {:?} + {:?}",
            model.config.nonlinearity, model.config.normalization
        )));
    }
    let mut per_layer_c = Vec::with_capacity(model.layers.len());
    let mut psi_norms = Vec::with_capacity(model.layers.len());
    let mut mixing_norms = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let psi = spectral(&layer.w2)? * spectral(&layer.w1)?;
        let mut max_head = 0.0f64;
        for head in &layer.heads {
            max_head = max_head.max(spectral(&head.wv)?);
        }
        let mixing = spectral(&layer.w_out)? * max_head;
        psi_norms.push(psi);
        mixing_norms.push(mixing);
        per_layer_c.push((psi + 1.0) * mixing);
    }
    let c_max = per_layer_c.iter().cloned().fold(0.0f64, f64::max);
    Ok(LipschitzReport {
        per_layer_c,
        c_max,
        psi_norms,
        mixing_norms,
    })
}

fn mixing_matrix<S: Scalar>(heads: &[Tensor<S>], delta: f64) -> Result<Tensor<f64>> {
    let t = heads[0].shape()[0];
    for h in heads {
        if h.shape() != [t, t] {
            return Err(SensitivityError::Index(format!(
                "attention maps disagree on shape: {:?} vs [{t}, {t}]",
                h.shape()
            )));
        }
    }
    let mut bar = Tensor::<f64>::zeros(&[t, t]);
    for h in heads {
        for a in 0..t {
            for b in 0..t {
                bar.set2(a, b, bar.get2(a, b) + h.get2(a, b).to_f64());
            }
        }
    }
    for a in 0..t {
        bar.set2(a, a, bar.get2(a, a) + delta);
    }
    Ok(bar)
}

/// Theorem 3.2 right-hand side: C_max^L · (Ā^(L) ⋯ Ā^(1))[j][i], where
/// Ā^(ℓ) = Σ_h α^(ℓ,h) + δ·I. Entries with i > j are unreachable under a
/// causal mask and return 0 rather than an error.
pub fn oversquashing_bound<S: Scalar>(
    attention: &[Vec<Tensor<S>>],
    c_max: f64,
    i: usize,
    j: usize,
    delta_mode: DeltaMode,
) -> Result<f64> {
    if attention.is_empty() || attention[0].is_empty() {
        return Err(SensitivityError::Index(
            "attention record has no layers or no heads".into(),
        ));
    }
    let t = attention[0][0].shape()[0];
    if i >= t || j >= t {
        return Err(SensitivityError::Index(format!(
            "positions i={i}, j={j} out of range for T={t}"
        )));
    }
    if i > j {
        return Ok(0.0);
    }
    let n_heads = attention[0].len();
    let delta = delta_mode.diagonal(n_heads);
    let mut product = mixing_matrix(&attention[0], delta)?;
    for layer in &attention[1..] {
        if layer.len() != n_heads {
            return Err(SensitivityError::Index(
                "layers disagree on head count".into(),
            ));
        }
        let bar = mixing_matrix(layer, delta)?;
        product = matmul(&bar, &product)?;
    }
    Ok(c_max.powi(attention.len() as i32) * product.get2(j, i))
}

/// Step size for central differences on an embedding coordinate.
const FD_STEP: f64 = 1e-5;

fn fd_step(x: f64) -> f64 {
    FD_STEP * x.abs().max(1.0)
}

/// Forward pass with every α^(ℓ,h) pinned to the supplied values, used by
/// finite differences in detached mode (re-running softmax would leak the
/// perturbation back through queries and keys). Reuses the tape kernels so
/// the arithmetic matches `forward` exactly; returns the final hidden
/// state v^(L), before any final normalization.
fn frozen_alpha_hidden(
    model: &Model<f64>,
    v0: &Tensor<f64>,
    alphas: &[Vec<Tensor<f64>>],
) -> Result<Tensor<f64>> {
    let mut tape: Tape<f64> = Tape::new();
    let mut x = tape.leaf(v0.clone());
    let rms = model.config.normalization == Normalization::Rms;
    let maybe_norm = |tape: &mut Tape<f64>, id: ValueId| -> Result<ValueId> {
        if rms {
            Ok(tape.rms_norm(id)?)
        } else {
            Ok(id)
        }
    };
    for (l, layer) in model.layers.iter().enumerate() {
        let attn_in = maybe_norm(&mut tape, x)?;
        let mut parts = Vec::with_capacity(layer.heads.len());
        for (h, head) in layer.heads.iter().enumerate() {
            let wv = tape.leaf(head.wv.clone());
            let vmat = tape.matmul(attn_in, wv)?;
            let alpha = tape.leaf(alphas[l][h].clone());
            parts.push(tape.matmul(alpha, vmat)?);
        }
        let cat = tape.concat_cols(&parts)?;
        let w_out = tape.leaf(layer.w_out.clone());
        let attn = tape.matmul(cat, w_out)?;
        let z = tape.add(attn, x)?;
        let mlp_in = maybe_norm(&mut tape, z)?;
        let w1 = tape.leaf(layer.w1.clone());
        let h1 = tape.matmul(mlp_in, w1)?;
        let act = match model.config.nonlinearity {
            Nonlinearity::Relu => tape.relu(h1)?,
            Nonlinearity::Gelu => tape.gelu(h1)?,
        };
        let w2 = tape.leaf(layer.w2.clone());
        let h2 = tape.matmul(act, w2)?;
        x = tape.add(h2, z)?;
    }
    Ok(tape.value(x).clone())
}

/// Full-function forward from an explicit v^(0) (attention recomputed),
/// used by finite differences in non-detached mode.
fn blocks_hidden(model: &Model<f64>, v0: &Tensor<f64>, mask: &Mask) -> Result<Tensor<f64>> {
    let mut v = v0.clone();
    for l in 0..model.config.n_layers {
        v = model
            .block_forward(l, &v, mask, ForwardOptions::default())?
            .next;
    }
    Ok(v)
}

fn check_positions(t: usize, i: usize, j: usize) -> Result<()> {
    if i >= t || j >= t {
        return Err(SensitivityError::Index(format!(
            "positions i={i}, j={j} out of range for T={t}"
        )));
    }
    Ok(())
}

/// All blocks ∂v_j^(L)/∂v_i^(0) for a fixed target row j, one d×d matrix
/// per source position i, by exact reverse-mode sweeps (one per output
/// coordinate). Entry [c][r] is ∂v_j^(L)[c] / ∂v_i^(0)[r].
pub fn jacobian_matrices_for_target(
    model: &Model<f64>,
    tokens: &[usize],
    j: usize,
    detach_attention: bool,
) -> Result<Vec<Tensor<f64>>> {
    let t = tokens.len();
    check_positions(t, 0, j)?;
    let mask = Mask::causal(t);
    let run = model.forward_taped(tokens, &mask, ForwardOptions { detach_attention })?;
    let last = *run.hidden.last().expect("forward always has hidden states");
    let d = model.config.d_model;
    let mut jac: Vec<Tensor<f64>> = (0..t).map(|_| Tensor::zeros(&[d, d])).collect();
    for c in 0..d {
        let mut seed = Tensor::<f64>::zeros(&[t, d]);
        seed.set2(j, c, 1.0);
        let grads = run.tape.backward(last, &seed)?;
        let g0 = grads.get(run.hidden[0]);
        for (i, block) in jac.iter_mut().enumerate() {
            for r in 0..d {
                block.set2(c, r, g0.get2(i, r));
            }
        }
    }
    Ok(jac)
}

/// The d×d block ∂v_j^(L)/∂v_i^(0) under a causal mask, by exact autodiff
/// or central finite differences on the embedding coordinates.
pub fn jacobian_matrix(
    model: &Model<f64>,
    tokens: &[usize],
    i: usize,
    j: usize,
    mode: JacobianMode,
    detach_attention: bool,
) -> Result<Tensor<f64>> {
    let t = tokens.len();
    check_positions(t, i, j)?;
    match mode {
        JacobianMode::ExactAutodiff => {
            let mut all = jacobian_matrices_for_target(model, tokens, j, detach_attention)?;
            Ok(all.swap_remove(i))
        }
        JacobianMode::FiniteDifference => {
            let mask = Mask::causal(t);
            let v0 = model.embed_tokens(tokens)?;
            let alphas = if detach_attention {
                Some(model.forward(tokens, &mask)?.attention)
            } else {
                None
            };
            let eval = |v: &Tensor<f64>| -> Result<Tensor<f64>> {
                match &alphas {
                    Some(a) => frozen_alpha_hidden(model, v, a),
                    None => blocks_hidden(model, v, &mask),
                }
            };
            let d = model.config.d_model;
            let mut jac = Tensor::<f64>::zeros(&[d, d]);
            for r in 0..d {
                let base = v0.get2(i, r);
                let h = fd_step(base);
                let mut plus = v0.clone();
                plus.set2(i, r, base + h);
                let mut minus = v0.clone();
                minus.set2(i, r, base - h);
                let f_plus = eval(&plus)?;
                let f_minus = eval(&minus)?;
                for c in 0..d {
                    let slope = (f_plus.get2(j, c) - f_minus.get2(j, c)) / (2.0 * h);
                    jac.set2(c, r, slope);
                }
            }
            Ok(jac)
        }
    }
}

/// ‖∂v_j^(L)/∂v_i^(0)‖₂ (spectral norm of the block).
pub fn jacobian_norm(
    model: &Model<f64>,
    tokens: &[usize],
    i: usize,
    j: usize,
    mode: JacobianMode,
    detach_attention: bool,
) -> Result<f64> {
    let jac = jacobian_matrix(model, tokens, i, j, mode, detach_attention)?;
    spectral(&jac)
}

/// Measured Jacobian norm next to the theorem's bound for one (i, j) pair.
/// Needs a bound-compliant model (the constants are undefined otherwise);
/// the inequality itself is only claimed with `detach_attention`.
pub fn sensitivity_report(
    model: &Model<f64>,
    tokens: &[usize],
    i: usize,
    j: usize,
    mode: JacobianMode,
    detach_attention: bool,
    delta_mode: DeltaMode,
) -> Result<SensitivityReport> {
    let lips = lipschitz_constants(model)?;
    let mask = Mask::causal(tokens.len());
    let record = model.forward(tokens, &mask)?;
    let bound = oversquashing_bound(&record.attention, lips.c_max, i, j, delta_mode)?;
    let measured = jacobian_norm(model, tokens, i, j, mode, detach_attention)?;
    Ok(SensitivityReport {
        jacobian_norm: measured,
        bound,
        per_layer_c: lips.per_layer_c,
        i,
        j,
        mode,
        attention_detached: detach_attention,
    })
}

/// Forward both prompts and record per-depth, per-token L2 distances of
/// the hidden states. The prompts must have equal length and differ at
/// exactly one position.
pub fn perturb_propagation(
    model: &Model<f64>,
    tokens: &[usize],
    perturbed: &[usize],
    mask: &Mask,
    with_bos: bool,
) -> Result<PerturbationMap> {
    if tokens.len() != perturbed.len() {
        return Err(SensitivityError::Prompt(format!(
            "prompt lengths differ: {} vs {}",
            tokens.len(),
            perturbed.len()
        )));
    }
    let diffs: Vec<usize> = (0..tokens.len())
        .filter(|&t| tokens[t] != perturbed[t])
        .collect();
    if diffs.len() != 1 {
        return Err(SensitivityError::Prompt(format!(
            "prompts must differ at exactly one position, found {} differing",
            diffs.len()
        )));
    }
    let perturbed_index = diffs[0];
    let base = model.forward(tokens, mask)?;
    let other = model.forward(perturbed, mask)?;
    let t = tokens.len();
    let mut distances = Vec::with_capacity(base.hidden.len());
    for (a, b) in base.hidden.iter().zip(other.hidden.iter()) {
        let mut row = Vec::with_capacity(t);
        for idx in 0..t {
            let diff: f64 = a
                .row(idx)
                .iter()
                .zip(b.row(idx))
                .map(|(x, y)| {
                    let d = x.to_f64() - y.to_f64();
                    d * d
                })
                .sum();
            row.push(diff.sqrt());
        }
        distances.push(row);
    }
    Ok(PerturbationMap {
        distances,
        perturbed_index,
        with_bos,
    })
}

/// L2 norms of the per-head value vectors W^(ℓ,h) v_j from a forward
/// record, one entry per token.
pub fn head_value_norms<S: Scalar>(
    record: &crate::model::ForwardRecord<S>,
    layer: usize,
    head: usize,
) -> Result<Vec<f64>> {
    let values = record
        .values
        .get(layer)
        .and_then(|l| l.get(head))
        .ok_or_else(|| {
            SensitivityError::Index(format!(
                "layer {layer}, head {head} out of range for record with {} layers",
                record.values.len()
            ))
        })?;
    Ok(crate::metrics::token_norms(values))
}

/// Random bound-compliant model for verification studies, with each
/// layer's W^(ℓ) rescaled so ‖W^(ℓ)‖ · max_h ‖W^(ℓ,h)‖ lands in [1, 2].
/// Below 1 the theorem's inequality is vacuously false (the residual
/// identity path alone gives a Jacobian of norm 1 while the bound can
/// shrink to 0), so samplers that want the bound to hold must keep the
/// mixing factor at or above 1.
pub fn random_compliant_model(
    seed: u64,
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    vocab_size: usize,
) -> Result<Model<f64>> {
    let config = crate::model::ModelConfig {
        n_layers,
        n_heads,
        d_model,
        vocab_size,
        mlp_hidden: 2 * d_model,
        nonlinearity: Nonlinearity::Relu,
        normalization: Normalization::None,
        positional: crate::model::Positional::None,
        precision: crate::numerics::Precision::Double,
    };
    let mut model = Model::<f64>::init(config, seed)?;
    // Deterministic targets in [1, 2) derived from the seed, one per layer.
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut next_unit = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for layer in &mut model.layers {
        let mut max_head = 0.0f64;
        for head in &layer.heads {
            max_head = max_head.max(spectral(&head.wv)?.max(f64::MIN_POSITIVE));
        }
        let mixing = spectral(&layer.w_out)? * max_head;
        if mixing <= 0.0 {
            return Err(SensitivityError::Mode(
                "degenerate draw: zero mixing norm".into(),
            ));
        }
        let target = 1.0 + next_unit();
        let scale = target / mixing;
        for v in layer.w_out.data_mut() {
            *v *= scale;
        }
    }
    Ok(model)
}
