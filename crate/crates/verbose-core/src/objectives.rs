//! Attack loss functions over generation traces.
//!
//! Three verbose-sample losses — delayed EOS, output uncertainty, and a
//! modality-specific diversity term — plus two baseline objectives
//! (activation-norm "sponge" and logit-suppression slowdown). Each loss has
//! a plain evaluation on a [`GenerationTrace`] and a tape builder that
//! attaches the same scalar to a differentiable forward pass.

use alloc::vec::Vec;

use crate::math;
use crate::numerics::{self, Matrix, NumericsError};
use crate::tape::{NodeId, Tape};
use crate::victim::{ForwardHandles, GenerationTrace, SampleKind, VictimError};

/// Which modality-specific diversity loss applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// Token diversity over stacked hidden states.
    Image,
    /// Frame-feature diversity over stacked per-frame features.
    Video,
}

impl From<SampleKind> for Modality {
    fn from(kind: SampleKind) -> Self {
        match kind {
            SampleKind::Image => Modality::Image,
            SampleKind::Video => Modality::Video,
        }
    }
}

/// Mean EOS probability across the generated positions; minimizing it
/// postpones termination. Zero for a degenerate empty trace.
pub fn delayed_eos_loss(trace: &GenerationTrace) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    let eos = trace.eos_id as usize;
    let sum: f64 = trace.distributions.iter().map(|d| d.prob(eos)).sum();
    sum / trace.len() as f64
}

/// Summed KL divergence from each step distribution to uniform, computed
/// through the identity `Σ_i (ln V − H(f_i))`.
pub fn uncertainty_loss(trace: &GenerationTrace) -> f64 {
    trace
        .distributions
        .iter()
        .map(numerics::kl_to_uniform)
        .sum()
}

/// Negative nuclear norm of the stacked per-step hidden states.
///
/// `normalize` divides the stacked matrix by √N first, keeping magnitudes
/// comparable across lengths (off by default; the norm itself is scale-free
/// in the formulation).
pub fn token_diversity_loss(trace: &GenerationTrace, normalize: bool) -> Result<f64, NumericsError> {
    let stacked = Matrix::from_rows(&trace.hidden_states)?;
    diversity_of(&stacked, normalize)
}

/// Negative nuclear norm of the stacked per-frame features.
pub fn frame_diversity_loss(frame_features: &Matrix, normalize: bool) -> Result<f64, NumericsError> {
    diversity_of(frame_features, normalize)
}

fn diversity_of(stacked: &Matrix, normalize: bool) -> Result<f64, NumericsError> {
    let m = if normalize {
        stacked.scale(1.0 / math::sqrt(stacked.rows() as f64))
    } else {
        stacked.clone()
    };
    Ok(-numerics::nuclear_norm(&m)?.value)
}

/// `λ₁𝓛₁ + λ₂𝓛₂ + λ₃𝓛₃` with the diversity term picked by modality.
pub fn composite_loss(
    weights: [f64; 3],
    trace: &GenerationTrace,
    modality: Modality,
    normalize_diversity: bool,
) -> Result<f64, NumericsError> {
    let l3 = match modality {
        Modality::Image => token_diversity_loss(trace, normalize_diversity)?,
        Modality::Video => {
            let features = trace
                .frame_features
                .as_ref()
                .expect("video trace carries frame features");
            frame_diversity_loss(features, normalize_diversity)?
        }
    };
    Ok(weights[0] * delayed_eos_loss(trace)
        + weights[1] * uncertainty_loss(trace)
        + weights[2] * l3)
}

/// Sponge-style baseline: negated summed squared activation norms, so the
/// PGD minimizer drives activations up.
pub fn sponge_objective(activations: &[Matrix]) -> f64 {
    -activations
        .iter()
        .map(|a| a.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
}

/// Slowdown-style baseline: summed EOS and realized-token logits, minimized
/// to suppress both.
pub fn nicg_objective(trace: &GenerationTrace) -> f64 {
    let eos = trace.eos_id as usize;
    trace
        .logits
        .iter()
        .zip(&trace.tokens)
        .map(|(row, &tok)| row[eos] + row[tok as usize])
        .sum()
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// Build `𝓛₁` on the tape: mean of the EOS column of the step distributions.
pub fn build_delayed_eos(tape: &mut Tape, fw: &ForwardHandles) -> NodeId {
    let idx: Vec<usize> = (0..fw.n_steps)
        .map(|i| i * fw.vocab_size + fw.eos_id as usize)
        .collect();
    let picked = tape.gather(fw.probs, idx, fw.n_steps, 1);
    let sum = tape.sum_all(picked);
    tape.scale(sum, 1.0 / fw.n_steps as f64)
}

/// Build `𝓛₂` on the tape via `N·lnV + Σ p ln p`.
pub fn build_uncertainty(tape: &mut Tape, fw: &ForwardHandles) -> NodeId {
    let xlx = tape.xlogx(fw.probs);
    let s = tape.sum_all(xlx);
    tape.add_scalar(s, fw.n_steps as f64 * math::ln(fw.vocab_size as f64))
}

/// Build image `𝓛₃` on the tape: negative nuclear norm of hidden states.
pub fn build_token_diversity(
    tape: &mut Tape,
    fw: &ForwardHandles,
    normalize: bool,
) -> Result<NodeId, VictimError> {
    build_diversity(tape, fw.hidden, fw.n_steps, normalize)
}

/// Build video `𝓛₃` on the tape: negative nuclear norm of frame features.
pub fn build_frame_diversity(
    tape: &mut Tape,
    fw: &ForwardHandles,
    normalize: bool,
) -> Result<NodeId, VictimError> {
    let features = fw
        .frame_features
        .ok_or_else(|| VictimError::ShapeMismatch(alloc::string::String::from(
            "frame diversity needs a video forward",
        )))?;
    let rows = tape.value(features).rows();
    build_diversity(tape, features, rows, normalize)
}

fn build_diversity(
    tape: &mut Tape,
    stacked: NodeId,
    rows: usize,
    normalize: bool,
) -> Result<NodeId, VictimError> {
    let src = if normalize {
        tape.scale(stacked, 1.0 / math::sqrt(rows as f64))
    } else {
        stacked
    };
    let nn = tape.nuclear_norm(src)?;
    Ok(tape.scale(nn, -1.0))
}

/// Build the modality-appropriate `𝓛₃`.
pub fn build_diversity_for(
    tape: &mut Tape,
    fw: &ForwardHandles,
    modality: Modality,
    normalize: bool,
) -> Result<NodeId, VictimError> {
    match modality {
        Modality::Image => build_token_diversity(tape, fw, normalize),
        Modality::Video => build_frame_diversity(tape, fw, normalize),
    }
}

/// Build the sponge baseline objective on the tape.
pub fn build_sponge(tape: &mut Tape, fw: &ForwardHandles) -> NodeId {
    let terms: Vec<(NodeId, f64)> = fw
        .activations
        .iter()
        .map(|&a| (tape.sum_squares(a), -1.0))
        .collect();
    tape.weighted_sum(&terms)
}

/// Build the slowdown baseline objective on the tape.
pub fn build_nicg(tape: &mut Tape, fw: &ForwardHandles, tokens: &[u32]) -> NodeId {
    let mut idx = Vec::with_capacity(2 * fw.n_steps);
    for (i, &tok) in tokens.iter().enumerate() {
        idx.push(i * fw.vocab_size + fw.eos_id as usize);
        idx.push(i * fw.vocab_size + tok as usize);
    }
    let picked = tape.gather(fw.logits, idx, 2 * fw.n_steps, 1);
    tape.sum_all(picked)
}

/// Build `Σ ln f_i[y_i]` on the tape (saliency maps differentiate this).
pub fn build_sequence_log_prob(tape: &mut Tape, fw: &ForwardHandles, tokens: &[u32]) -> NodeId {
    let idx: Vec<usize> = tokens
        .iter()
        .enumerate()
        .map(|(i, &tok)| i * fw.vocab_size + tok as usize)
        .collect();
    let picked = tape.gather(fw.probs, idx, fw.n_steps, 1);
    let ln = tape.ln(picked);
    tape.sum_all(ln)
}
