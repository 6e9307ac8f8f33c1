//! The differentiable autoregressive multimodal victim.
//!
//! A small encoder–decoder captioner: frames are linearly patch-embedded
//! into visual tokens, and a two-block causal transformer decoder
//! cross-attends to them while generating one token at a time. The model
//! exposes everything the attack losses consume — per-step output
//! distributions, per-step hidden states, per-frame features, attention
//! rows, and gradients of any scalar loss back to the input pixels.

use alloc::string::String;
use alloc::vec::Vec;

use crate::numerics::{Distribution, Matrix, NumericsError};

mod model;
mod sampling;
mod shape_world;
mod train;
mod vocab;

pub use model::{
    ForwardHandles, HiddenStateMode, TeacherForcedOutput, VictimConfig, VictimModel, PATCH_GRID,
};
pub use sampling::{DecodePolicy, GenerateOptions};
pub use shape_world::{
    make_shape_world, matches_caption_grammar, Color, Shape, ShapeSample, ShapeWorldConfig,
};
pub use train::{train_toy, TrainConfig, TrainError, TrainReport};
pub use vocab::VocabSpec;

/// Error raised by the victim model.
#[derive(Debug, Clone, PartialEq)]
pub enum VictimError {
    /// Input frame geometry does not match the model.
    ShapeMismatch(String),
    /// Frame count differs from the configured count.
    FrameCount { expected: usize, got: usize },
    /// A token id is outside the vocabulary.
    TokenOutOfRange { id: u32, vocab: usize },
    /// A realized token had zero probability; the log-probability would be -inf.
    ZeroProbabilityToken { step: usize },
    /// The loss path produced a non-finite gradient.
    NonFiniteGradient,
    Numerics(NumericsError),
}

impl core::fmt::Display for VictimError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            VictimError::ShapeMismatch(s) => write!(f, "shape mismatch: {s}"),
            VictimError::FrameCount { expected, got } => {
                write!(f, "expected {expected} frames, got {got}")
            }
            VictimError::TokenOutOfRange { id, vocab } => {
                write!(f, "token id {id} outside vocabulary of size {vocab}")
            }
            VictimError::ZeroProbabilityToken { step } => {
                write!(f, "realized token at step {step} has zero probability")
            }
            VictimError::NonFiniteGradient => write!(f, "non-finite input gradient"),
            VictimError::Numerics(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for VictimError {}

impl From<NumericsError> for VictimError {
    fn from(e: NumericsError) -> Self {
        VictimError::Numerics(e)
    }
}

/// Whether a sample is a single image or an ordered stack of frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Image,
    Video,
}

/// An image or video in pixel space: `frames` of `H×W×3` reals in `[0, 1]`,
/// flat per frame with index `(y·W + x)·3 + channel`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PixelSample {
    kind: SampleKind,
    height: usize,
    width: usize,
    frames: Vec<Vec<f64>>,
}

impl PixelSample {
    pub fn new(
        kind: SampleKind,
        height: usize,
        width: usize,
        frames: Vec<Vec<f64>>,
    ) -> Result<Self, VictimError> {
        if frames.is_empty() {
            return Err(VictimError::FrameCount {
                expected: 1,
                got: 0,
            });
        }
        if kind == SampleKind::Image && frames.len() != 1 {
            return Err(VictimError::FrameCount {
                expected: 1,
                got: frames.len(),
            });
        }
        let expected = height * width * 3;
        for frame in &frames {
            if frame.len() != expected {
                return Err(VictimError::ShapeMismatch(alloc::format!(
                    "frame has {} values, expected {expected}",
                    frame.len()
                )));
            }
            if !frame.iter().all(|&p| (0.0..=1.0).contains(&p)) {
                return Err(VictimError::ShapeMismatch(String::from(
                    "pixel outside [0, 1]",
                )));
            }
        }
        Ok(PixelSample {
            kind,
            height,
            width,
            frames,
        })
    }

    /// Uniform constant-color sample (handy for tests).
    pub fn constant(kind: SampleKind, size: usize, frames: usize, value: f64) -> Self {
        PixelSample {
            kind,
            height: size,
            width: size,
            frames: alloc::vec![alloc::vec![value; size * size * 3]; frames],
        }
    }

    pub fn kind(&self) -> SampleKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, j: usize) -> &[f64] {
        &self.frames[j]
    }

    pub fn frames(&self) -> &[Vec<f64>] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.frames
    }

    /// Largest absolute per-pixel difference against another sample.
    pub fn linf_distance(&self, other: &PixelSample) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.frames.iter().zip(&other.frames) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max(crate::math::abs(x - y));
            }
        }
        worst
    }

    /// Largest per-frame L∞ distance, reported per frame.
    pub fn per_frame_linf(&self, other: &PixelSample) -> Vec<f64> {
        self.frames
            .iter()
            .zip(&other.frames)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| crate::math::abs(x - y))
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

/// Dense per-pixel values with the same geometry as a [`PixelSample`] but no
/// `[0, 1]` restriction: input gradients and saliency maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMap {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<f64>>,
}

impl PixelMap {
    pub fn zeros_like(sample: &PixelSample) -> Self {
        PixelMap {
            height: sample.height,
            width: sample.width,
            frames: alloc::vec![
                alloc::vec![0.0; sample.height * sample.width * 3];
                sample.frames.len()
            ],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.frames
            .iter()
            .all(|f| f.iter().all(|v| v.is_finite()))
    }

    /// Sum of absolute values across every frame.
    pub fn l1_norm(&self) -> f64 {
        self.frames
            .iter()
            .map(|f| f.iter().map(|v| crate::math::abs(*v)).sum::<f64>())
            .sum()
    }
}

/// One autoregressive decode and everything the losses read from it.
#[derive(Debug, Clone)]
pub struct GenerationTrace {
    /// Conditioning token ids (empty for plain captioning).
    pub prompt: Vec<u32>,
    /// Generated token ids `y_1..y_N`; if EOS was produced it is the last.
    pub tokens: Vec<u32>,
    /// Per-step output distributions `f_i`, one per generated token.
    pub distributions: Vec<Distribution>,
    /// Per-step pre-softmax logits.
    pub logits: Vec<Vec<f64>>,
    /// Per-step hidden states `g_i` (final-layer pre-logit by default).
    pub hidden_states: Vec<Vec<f64>>,
    /// Per-frame features `h_j` as an `M×D` matrix; present for videos.
    pub frame_features: Option<Matrix>,
    /// Per-step attention over visual positions (rows sum to 1).
    pub attentions: Vec<Vec<f64>>,
    /// Vocabulary id of the EOS token, recorded for the losses.
    pub eos_id: u32,
}

impl GenerationTrace {
    /// Generated-sequence length `N`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `Σ ln f_i[y_i]`; rejects a zero-probability realized token, which
    /// would otherwise collapse to `-inf`.
    pub fn sequence_log_prob(&self) -> Result<f64, VictimError> {
        let mut total = 0.0;
        for (i, (&tok, dist)) in self.tokens.iter().zip(&self.distributions).enumerate() {
            let p = dist.prob(tok as usize);
            if p <= 0.0 {
                return Err(VictimError::ZeroProbabilityToken { step: i });
            }
            total += crate::math::ln(p);
        }
        Ok(total)
    }
}
