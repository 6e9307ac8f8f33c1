//! The attack loop: sign-gradient PGD with L∞ projection and the temporal
//! weight-adjustment schedule with momentum smoothing.
//!
//! Weights for iteration `t` are `λ_k(t) = |𝓛₂(t−1)| / |𝓛_k(t−1)| / 𝒯_k(t)`
//! with `𝒯_k(t) = a_k·ln(t) + b_k`, smoothed by an exponential moving
//! average. Weight values are treated as constants — no gradient flows
//! through the schedule.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::objectives::{self, Modality};
use crate::tape::NodeId;
use crate::victim::{
    DecodePolicy, GenerateOptions, GenerationTrace, PixelMap, PixelSample, VictimError,
    VictimModel,
};

/// Loss magnitudes below this count as extinguished; their weight is zero.
const LOSS_FLOOR: f64 = 1e-12;

/// Attack method tags shared with the harness and CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    /// No perturbation.
    Original,
    /// Uniform ±ε noise, no optimization.
    Noise,
    /// Activation-norm baseline.
    Sponge,
    /// EOS/realized-logit suppression baseline.
    Nicg,
    /// The verbose-sample composite objective with the weight schedule.
    Verbose,
}

impl AttackMethod {
    pub fn label(self) -> &'static str {
        match self {
            AttackMethod::Original => "original",
            AttackMethod::Noise => "noise",
            AttackMethod::Sponge => "sponge",
            AttackMethod::Nicg => "nicg",
            AttackMethod::Verbose => "verbose",
        }
    }
}

/// Everything one attack run needs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    /// L∞ budget in [0,1] pixel units (8-bit 8 → 8/255).
    pub epsilon: f64,
    /// Step size in [0,1] pixel units (8-bit 1 → 1/255).
    pub alpha: f64,
    /// PGD iteration budget T.
    pub iterations: usize,
    /// Decode cap during optimization.
    pub max_length: usize,
    /// Decode policy during optimization (greedy keeps runs deterministic).
    pub decode_policy: DecodePolicy,
    /// Re-decode the sequence every this many iterations.
    pub redecode_period: usize,
    /// Temporal decay parameters a_k, k = 1..3.
    pub decay_a: [f64; 3],
    /// Temporal decay parameters b_k.
    pub decay_b: [f64; 3],
    /// Lower clamp for the decay value (the image defaults make 𝒯₁
    /// negative for t < e²; see `temporal_decay`).
    pub tau_min: f64,
    /// Weight-smoothing momentum m ∈ [0, 1).
    pub momentum: f64,
    /// Which of 𝓛₁/𝓛₂/𝓛₃ participate (ablation subsets).
    pub loss_mask: [bool; 3],
    /// Divide stacked diversity matrices by √rows before the nuclear norm.
    pub normalize_diversity: bool,
}

impl AttackConfig {
    /// Image defaults: ε=8/255, α=1/255, T=1000, max length 512,
    /// a=(10,0,0.5), b=(−20,0,1), m=0.9.
    pub fn image_default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            alpha: 1.0 / 255.0,
            iterations: 1000,
            max_length: 512,
            decode_policy: DecodePolicy::Greedy,
            redecode_period: 1,
            decay_a: [10.0, 0.0, 0.5],
            decay_b: [-20.0, 0.0, 1.0],
            tau_min: 1e-3,
            momentum: 0.9,
            loss_mask: [true; 3],
            normalize_diversity: false,
        }
    }

    /// Video defaults: a=(10000,0,5), b=(100000,0,500), m=0.9.
    pub fn video_default() -> Self {
        AttackConfig {
            decay_a: [10_000.0, 0.0, 5.0],
            decay_b: [100_000.0, 0.0, 500.0],
            ..AttackConfig::image_default()
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon > 0.0) {
            return Err(AttackError::InvalidConfig(String::from("epsilon must be > 0")));
        }
        if !(self.alpha > 0.0 && self.alpha <= self.epsilon) {
            return Err(AttackError::InvalidConfig(String::from(
                "alpha must satisfy 0 < alpha <= epsilon",
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AttackError::InvalidConfig(String::from(
                "momentum must be in [0, 1)",
            )));
        }
        if self.max_length == 0 || self.redecode_period == 0 {
            return Err(AttackError::InvalidConfig(String::from(
                "max_length and redecode_period must be >= 1",
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackError {
    InvalidConfig(String),
    /// The composite gradient went non-finite at this iteration.
    NonFiniteGradient { iteration: usize },
    Victim(VictimError),
}

impl core::fmt::Display for AttackError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            AttackError::InvalidConfig(s) => write!(f, "invalid attack config: {s}"),
            AttackError::NonFiniteGradient { iteration } => {
                write!(f, "non-finite gradient at iteration {iteration}")
            }
            AttackError::Victim(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for AttackError {}

impl From<VictimError> for AttackError {
    fn from(e: VictimError) -> Self {
        AttackError::Victim(e)
    }
}

/// One row of the per-iteration history (serialized to JSONL by the lab).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    /// The minimized scalar at this iteration.
    pub objective: f64,
    pub loss_eos: f64,
    pub loss_uncertainty: f64,
    /// Absent when the diversity loss is masked out or for baselines.
    pub loss_diversity: Option<f64>,
    pub lambda_raw: Option<[f64; 3]>,
    pub lambda_smoothed: Option<[f64; 3]>,
    /// Unclamped `a_k·ln(t) + b_k`, recorded so the literal schedule can be
    /// studied even where the clamp engaged.
    pub decay_raw: Option<[f64; 3]>,
    pub greedy_length: usize,
    pub perturbation_linf: f64,
    /// `ε − max per-frame L∞`; negative would be a feasibility violation.
    pub constraint_slack: f64,
}

/// Result of one attack run.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub sample: PixelSample,
    pub history: Vec<IterationRecord>,
    /// Iterations whose iterate violated the ε or [0,1] constraints
    /// (always 0 unless something is badly wrong).
    pub violations: usize,
}

/// `𝒯_k(t) = a·ln(t) + b`, clamped below at `tau_min`. The pair
/// `a = b = 0` means "decay disabled" and yields exactly 1 (the published
/// image parameters use a₂ = b₂ = 0, which would otherwise divide by zero).
pub fn temporal_decay(a: f64, b: f64, t: f64, tau_min: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        return 1.0;
    }
    (a * math::ln(t) + b).max(tau_min)
}

/// The unclamped decay value, recorded in history.
pub fn temporal_decay_raw(a: f64, b: f64, t: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        return 1.0;
    }
    a * math::ln(t) + b
}

/// Raw weights for iteration `t` from the previous iteration's loss
/// magnitudes: `λ_k = |𝓛₂| / |𝓛_k| / 𝒯_k(t)`, with extinguished losses
/// pinned to zero.
pub fn compute_weights(prev_losses: &[f64; 3], t: usize, config: &AttackConfig) -> [f64; 3] {
    let l2 = math::abs(prev_losses[1]);
    let mut out = [0.0; 3];
    for k in 0..3 {
        let lk = math::abs(prev_losses[k]);
        if lk < LOSS_FLOOR {
            continue;
        }
        let decay = temporal_decay(config.decay_a[k], config.decay_b[k], t as f64, config.tau_min);
        out[k] = l2 / lk / decay;
    }
    out
}

/// Exponential moving average: `λ̄(t) = m·λ̄(t−1) + (1−m)·λ_raw(t)`.
pub fn momentum_update(prev_smoothed: &[f64; 3], raw: &[f64; 3], m: f64) -> [f64; 3] {
    [
        m * prev_smoothed[0] + (1.0 - m) * raw[0],
        m * prev_smoothed[1] + (1.0 - m) * raw[1],
        m * prev_smoothed[2] + (1.0 - m) * raw[2],
    ]
}

/// Raw and smoothed weights across an attack run.
#[derive(Debug, Clone)]
pub struct WeightState {
    pub raw: [f64; 3],
    pub smoothed: [f64; 3],
    prev_losses: Option<[f64; 3]>,
}

impl Default for WeightState {
    fn default() -> Self {
        Self::new()
    }
}

impl WeightState {
    pub fn new() -> Self {
        WeightState {
            raw: [1.0; 3],
            smoothed: [1.0; 3],
            prev_losses: None,
        }
    }

    /// Advance to iteration `t`: derive weights from the stored previous
    /// losses (identity weights at t = 1), then remember `current_losses`
    /// for the next iteration.
    pub fn advance(
        &mut self,
        t: usize,
        current_losses: [f64; 3],
        config: &AttackConfig,
    ) -> ([f64; 3], [f64; 3]) {
        let raw = match &self.prev_losses {
            None => [1.0; 3],
            Some(prev) => compute_weights(prev, t, config),
        };
        let smoothed = if t <= 1 {
            raw
        } else {
            momentum_update(&self.smoothed, &raw, config.momentum)
        };
        self.raw = raw;
        self.smoothed = smoothed;
        self.prev_losses = Some(current_losses);
        (raw, smoothed)
    }
}

/// Clamp a perturbed sample into the ε-box around `original` intersected
/// with the pixel range.
pub fn project(perturbed: &PixelSample, original: &PixelSample, epsilon: f64) -> PixelSample {
    let mut out = perturbed.clone();
    for (frame, orig) in out.frames_mut().iter_mut().zip(original.frames()) {
        for (p, &o) in frame.iter_mut().zip(orig) {
            *p = p.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0);
        }
    }
    out
}

/// One signed step then projection: `x ← Π(x − α·sign(∇))` with sign(0)=0.
pub fn pgd_step(
    perturbed: &PixelSample,
    gradient: &PixelMap,
    alpha: f64,
    original: &PixelSample,
    epsilon: f64,
) -> Result<PixelSample, AttackError> {
    if !gradient.is_finite() {
        return Err(AttackError::NonFiniteGradient { iteration: 0 });
    }
    let mut stepped = perturbed.clone();
    for (frame, grad) in stepped.frames_mut().iter_mut().zip(&gradient.frames) {
        for (p, &g) in frame.iter_mut().zip(grad) {
            *p -= alpha * math::sign0(g);
        }
    }
    Ok(project(&stepped, original, epsilon))
}

/// Dispatch an attack method against one sample.
pub fn run_attack<R: Rng + ?Sized>(
    victim: &VictimModel,
    sample: &PixelSample,
    prompt: &[u32],
    method: AttackMethod,
    config: &AttackConfig,
    rng: &mut R,
) -> Result<AttackOutcome, AttackError> {
    config.validate()?;
    match method {
        AttackMethod::Original => Ok(AttackOutcome {
            sample: sample.clone(),
            history: Vec::new(),
            violations: 0,
        }),
        AttackMethod::Noise => {
            let mut noisy = sample.clone();
            for frame in noisy.frames_mut() {
                for p in frame.iter_mut() {
                    let u: f64 = rng.gen::<f64>() * 2.0 * config.epsilon - config.epsilon;
                    *p = (*p + u).clamp(0.0, 1.0);
                }
            }
            Ok(AttackOutcome {
                sample: noisy,
                history: Vec::new(),
                violations: 0,
            })
        }
        AttackMethod::Verbose | AttackMethod::Sponge | AttackMethod::Nicg => {
            attack_loop(victim, sample, prompt, method, config, rng)
        }
    }
}

/// The verbose-sample attack with the full schedule (also drives the
/// optimization-based baselines with fixed unit weights).
pub fn attack<R: Rng + ?Sized>(
    victim: &VictimModel,
    sample: &PixelSample,
    prompt: &[u32],
    config: &AttackConfig,
    rng: &mut R,
) -> Result<AttackOutcome, AttackError> {
    config.validate()?;
    attack_loop(victim, sample, prompt, AttackMethod::Verbose, config, rng)
}

fn attack_loop<R: Rng + ?Sized>(
    victim: &VictimModel,
    sample: &PixelSample,
    prompt: &[u32],
    method: AttackMethod,
    config: &AttackConfig,
    rng: &mut R,
) -> Result<AttackOutcome, AttackError> {
    let modality = Modality::from(sample.kind());
    let original = sample.clone();
    let mut current = sample.clone();
    let mut history = Vec::with_capacity(config.iterations);
    let mut weights = WeightState::new();
    let mut trace: Option<GenerationTrace> = None;
    let mut violations = 0usize;

    let decode_opts = GenerateOptions {
        policy: config.decode_policy,
        max_length: config.max_length,
        ban_eos: false,
        frame_mask: None,
    };

    for t in 1..=config.iterations {
        if trace.is_none() || (t - 1) % config.redecode_period == 0 {
            trace = Some(victim.generate(&current, prompt, &decode_opts, rng)?);
        }
        let tokens = trace.as_ref().expect("decoded trace").tokens.clone();
        let greedy_length = tokens.len();

        let (mut tape, fw) = victim.forward_tape(&current, prompt, &tokens, None, true)?;
        let l1_node = objectives::build_delayed_eos(&mut tape, &fw);
        let l2_node = objectives::build_uncertainty(&mut tape, &fw);
        let l1 = tape.scalar(l1_node);
        let l2 = tape.scalar(l2_node);

        let (objective_node, l3, lambda) = match method {
            AttackMethod::Verbose => {
                let l3_node = if config.loss_mask[2] {
                    Some(objectives::build_diversity_for(
                        &mut tape,
                        &fw,
                        modality,
                        config.normalize_diversity,
                    )?)
                } else {
                    None
                };
                let l3 = l3_node.map(|n| tape.scalar(n));
                let (raw, smoothed) = weights.advance(t, [l1, l2, l3.unwrap_or(0.0)], config);
                let mut terms: Vec<(NodeId, f64)> = Vec::with_capacity(3);
                if config.loss_mask[0] {
                    terms.push((l1_node, smoothed[0]));
                }
                if config.loss_mask[1] {
                    terms.push((l2_node, smoothed[1]));
                }
                if let Some(n) = l3_node {
                    terms.push((n, smoothed[2]));
                }
                let node = tape.weighted_sum(&terms);
                (node, l3, Some((raw, smoothed)))
            }
            AttackMethod::Sponge => (objectives::build_sponge(&mut tape, &fw), None, None),
            AttackMethod::Nicg => (
                objectives::build_nicg(&mut tape, &fw, &tokens),
                None,
                None,
            ),
            _ => unreachable!("non-optimizing methods handled by run_attack"),
        };
        let objective = tape.scalar(objective_node);

        let grads = tape.backward(objective_node);
        let mut grad_map = PixelMap::zeros_like(&current);
        for (frame, &leaf) in grad_map.frames.iter_mut().zip(&fw.pixel_leaves) {
            if let Some(g) = grads.get(leaf) {
                frame.copy_from_slice(g.data());
            }
        }
        if !grad_map.is_finite() {
            return Err(AttackError::NonFiniteGradient { iteration: t });
        }

        current = pgd_step(&current, &grad_map, config.alpha, &original, config.epsilon)
            .map_err(|e| match e {
                AttackError::NonFiniteGradient { .. } => {
                    AttackError::NonFiniteGradient { iteration: t }
                }
                other => other,
            })?;

        let linf = current
            .per_frame_linf(&original)
            .into_iter()
            .fold(0.0, f64::max);
        let slack = config.epsilon - linf;
        let in_range = current
            .frames()
            .iter()
            .all(|f| f.iter().all(|&p| (0.0..=1.0).contains(&p)));
        if linf > config.epsilon + 1e-12 || !in_range {
            violations += 1;
        }

        let decay_raw = [
            temporal_decay_raw(config.decay_a[0], config.decay_b[0], t as f64),
            temporal_decay_raw(config.decay_a[1], config.decay_b[1], t as f64),
            temporal_decay_raw(config.decay_a[2], config.decay_b[2], t as f64),
        ];
        history.push(IterationRecord {
            t,
            objective,
            loss_eos: l1,
            loss_uncertainty: l2,
            loss_diversity: l3,
            lambda_raw: lambda.map(|(r, _)| r),
            lambda_smoothed: lambda.map(|(_, s)| s),
            decay_raw: matches!(method, AttackMethod::Verbose).then_some(decay_raw),
            greedy_length,
            perturbation_linf: linf,
            constraint_slack: slack,
        });
    }

    Ok(AttackOutcome {
        sample: current,
        history,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::victim::{SampleKind, VictimConfig};
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reduced_setup(frames: usize, seed: u64) -> (VictimModel, PixelSample) {
        let model = VictimModel::new(VictimConfig::reduced(frames, seed)).unwrap();
        let kind = if frames == 1 {
            SampleKind::Image
        } else {
            SampleKind::Video
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let fr: Vec<Vec<f64>> = (0..frames)
            .map(|_| (0..8 * 8 * 3).map(|_| rng.gen::<f64>()).collect())
            .collect();
        (model, PixelSample::new(kind, 8, 8, fr).unwrap())
    }

    fn small_config(iterations: usize) -> AttackConfig {
        AttackConfig {
            iterations,
            max_length: 6,
            ..AttackConfig::image_default()
        }
    }

    #[test]
    fn decay_analytic_values() {
        assert_eq!(temporal_decay(0.0, 1.0, 17.0, 1e-3), 1.0);
        let e3 = math::exp(3.0);
        assert!((temporal_decay(10.0, -20.0, e3, 1e-3) - 10.0).abs() < 1e-9);
        // At t=1 the raw value is b = −20, clamped to tau_min.
        assert_eq!(temporal_decay(10.0, -20.0, 1.0, 1e-3), 1e-3);
        assert_eq!(temporal_decay_raw(10.0, -20.0, 1.0), -20.0);
        // a = b = 0 means decay disabled.
        assert_eq!(temporal_decay(0.0, 0.0, 123.0, 1e-3), 1.0);
    }

    #[test]
    fn weights_from_previous_losses() {
        let cfg = AttackConfig {
            decay_a: [0.0; 3],
            decay_b: [0.0; 3],
            ..AttackConfig::image_default()
        };
        // Equal losses, unit decay: all weights 1.
        let w = compute_weights(&[0.5, 0.5, 0.5], 3, &cfg);
        for v in w {
            assert!((v - 1.0).abs() < 1e-12);
        }
        // λ₂ is always 1 when L2 is alive.
        let w2 = compute_weights(&[4.0, 2.0, 8.0], 10, &cfg);
        assert!((w2[1] - 1.0).abs() < 1e-12);
        assert!((w2[0] - 0.5).abs() < 1e-12);
        assert!((w2[2] - 0.25).abs() < 1e-12);
        // Extinguished loss gets zero weight.
        let w3 = compute_weights(&[0.0, 2.0, 1.0], 5, &cfg);
        assert_eq!(w3[0], 0.0);
        // 𝒯₁ = 2 at fixed losses L2=2, L1=4 gives λ₁ = 0.25.
        let cfg2 = AttackConfig {
            decay_a: [0.0, 0.0, 0.0],
            decay_b: [2.0, 0.0, 0.0],
            ..AttackConfig::image_default()
        };
        let w4 = compute_weights(&[4.0, 2.0, 2.0], 7, &cfg2);
        assert!((w4[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn momentum_recurrence() {
        // m = 0 passes raw through.
        let s = momentum_update(&[5.0; 3], &[1.0, 2.0, 3.0], 0.0);
        assert_eq!(s, [1.0, 2.0, 3.0]);
        // Three steps from 0 with raw ≡ 1 and m = 0.9 give 0.271.
        let mut cur = [0.0; 3];
        for _ in 0..3 {
            cur = momentum_update(&cur, &[1.0; 3], 0.9);
        }
        assert!((cur[0] - 0.271).abs() < 1e-12);
        // Contraction: |s − c| shrinks by exactly m per step.
        let mut prev_gap = (0.0f64 - 1.0).abs();
        let mut state = [0.0; 3];
        for _ in 0..10 {
            state = momentum_update(&state, &[1.0; 3], 0.9);
            let gap = (state[0] - 1.0).abs();
            assert!((gap - 0.9 * prev_gap).abs() < 1e-12);
            prev_gap = gap;
        }
    }

    #[test]
    fn projection_behaviour() {
        let original = PixelSample::constant(SampleKind::Image, 8, 1, 0.5);
        let same = project(&original, &original, 8.0 / 255.0);
        assert_eq!(same, original);

        let mut moved = original.clone();
        moved.frames_mut()[0][10] = 0.5 + 2.0 * (8.0 / 255.0);
        let proj = project(&moved, &original, 8.0 / 255.0);
        assert!((proj.frame(0)[10] - (0.5 + 8.0 / 255.0)).abs() < 1e-15);
    }

    #[test]
    fn pgd_step_moves_and_projects() {
        let original = PixelSample::constant(SampleKind::Image, 8, 1, 0.5);
        let mut grad = PixelMap::zeros_like(&original);
        // Zero gradient: unchanged.
        let stepped = pgd_step(&original, &grad, 1.0 / 255.0, &original, 8.0 / 255.0).unwrap();
        assert_eq!(stepped, original);
        // All-positive gradient: every pixel decreases by alpha.
        for g in grad.frames[0].iter_mut() {
            *g = 1.0;
        }
        let stepped = pgd_step(&original, &grad, 1.0 / 255.0, &original, 8.0 / 255.0).unwrap();
        for &p in stepped.frame(0) {
            assert!((p - (0.5 - 1.0 / 255.0)).abs() < 1e-15);
        }
        // Non-finite gradient rejected.
        grad.frames[0][3] = f64::NAN;
        assert!(matches!(
            pgd_step(&original, &grad, 1.0 / 255.0, &original, 8.0 / 255.0),
            Err(AttackError::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn zero_iterations_returns_original() {
        let (model, sample) = reduced_setup(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = attack(&model, &sample, &[], &small_config(0), &mut rng).unwrap();
        assert_eq!(out.sample, sample);
        assert!(out.history.is_empty());
    }

    #[test]
    fn feasibility_holds_across_iterations() {
        for frames in [1usize, 2] {
            let (model, sample) = reduced_setup(frames, 7);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let out = attack(&model, &sample, &[], &small_config(12), &mut rng).unwrap();
            assert_eq!(out.violations, 0);
            assert_eq!(out.history.len(), 12);
            for rec in &out.history {
                assert!(rec.constraint_slack >= -1e-12);
                assert!(rec.perturbation_linf <= 8.0 / 255.0 + 1e-12);
            }
            assert!(out
                .sample
                .frames()
                .iter()
                .all(|f| f.iter().all(|&p| (0.0..=1.0).contains(&p))));
        }
    }

    #[test]
    fn attack_is_reproducible() {
        let (model, sample) = reduced_setup(1, 11);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            attack(&model, &sample, &[], &small_config(6), &mut rng).unwrap()
        };
        let a = run(5);
        let b = run(5);
        assert_eq!(a.sample, b.sample);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn noise_method_is_bounded_and_seeded() {
        let (model, sample) = reduced_setup(1, 2);
        let cfg = small_config(1);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = run_attack(&model, &sample, &[], AttackMethod::Noise, &cfg, &mut r1).unwrap();
        let b = run_attack(&model, &sample, &[], AttackMethod::Noise, &cfg, &mut r2).unwrap();
        assert_eq!(a.sample, b.sample);
        assert!(a.sample.linf_distance(&sample) <= cfg.epsilon + 1e-15);
        assert!(a.sample.linf_distance(&sample) > 0.0);
    }

    #[test]
    fn baseline_methods_produce_history() {
        let (model, sample) = reduced_setup(1, 9);
        let cfg = small_config(3);
        for method in [AttackMethod::Sponge, AttackMethod::Nicg] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = run_attack(&model, &sample, &[], method, &cfg, &mut rng).unwrap();
            assert_eq!(out.history.len(), 3);
            assert!(out.history.iter().all(|r| r.lambda_raw.is_none()));
            assert_eq!(out.violations, 0);
        }
    }

    #[test]
    fn masked_out_diversity_is_absent_from_history() {
        let (model, sample) = reduced_setup(1, 13);
        let cfg = AttackConfig {
            loss_mask: [true, true, false],
            ..small_config(2)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = attack(&model, &sample, &[], &cfg, &mut rng).unwrap();
        assert!(out.history.iter().all(|r| r.loss_diversity.is_none()));
    }

    #[test]
    fn equal_losses_give_unit_weights() {
        let cfg = AttackConfig {
            decay_a: [0.0; 3],
            decay_b: [0.0; 3],
            momentum: 0.0,
            ..AttackConfig::image_default()
        };
        let mut state = WeightState::new();
        let (_, s1) = state.advance(1, [0.3, 0.3, 0.3], &cfg);
        assert_eq!(s1, [1.0; 3]);
        let (_, s2) = state.advance(2, [0.3, 0.3, 0.3], &cfg);
        for v in s2 {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = AttackConfig::image_default();
        cfg.alpha = cfg.epsilon * 2.0;
        assert!(cfg.validate().is_err());
        let mut cfg2 = AttackConfig::image_default();
        cfg2.momentum = 1.0;
        assert!(cfg2.validate().is_err());
        let mut cfg3 = AttackConfig::image_default();
        cfg3.epsilon = 0.0;
        assert!(cfg3.validate().is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn projection_always_feasible(
                pixels in proptest::collection::vec(0.0f64..1.0, 12),
                deltas in proptest::collection::vec(-0.5f64..0.5, 12),
                eps in 0.005f64..0.2,
            ) {
                let size = 2;
                let original = PixelSample::new(
                    SampleKind::Image, size, size, vec![pixels.clone()],
                ).unwrap();
                let mut moved = original.clone();
                for (p, d) in moved.frames_mut()[0].iter_mut().zip(&deltas) {
                    // Raw perturbed values may leave [0,1]; clamp to keep the
                    // PixelSample invariant, projection enforces the rest.
                    *p = (*p + d).clamp(0.0, 1.0);
                }
                let projected = project(&moved, &original, eps);
                prop_assert!(projected.linf_distance(&original) <= eps + 1e-12);
                for f in projected.frames() {
                    for &p in f {
                        prop_assert!((0.0..=1.0).contains(&p));
                    }
                }
            }

            #[test]
            fn decay_nondecreasing_for_positive_a(
                a in 0.01f64..100.0,
                b in -50.0f64..50.0,
                t in 1u32..500,
            ) {
                let tau = 1e-3;
                let now = temporal_decay(a, b, t as f64, tau);
                let next = temporal_decay(a, b, (t + 1) as f64, tau);
                prop_assert!(next >= now - 1e-12);
            }
        }
    }
}
