//! The toy captioner: linear patch encoder, two-block causal transformer
//! decoder with cross-attention, and the differentiable replay path.
//!
//! The incremental decode (used by [`VictimModel::generate`]) and the tape
//! forward (used for losses and gradients) share every float kernel and
//! accumulate in the same order, so a teacher-forced replay reproduces the
//! decode distributions bit-for-bit.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::sampling::{select_token, GenerateOptions};
use super::vocab::VocabSpec;
use super::{GenerationTrace, PixelMap, PixelSample, VictimError};
use crate::math;
use crate::numerics::{softmax_slice, Distribution, Matrix};
use crate::tape::{layer_norm_row, silu_scalar, NodeId, Tape};

/// Visual tokens per frame are a fixed 4×4 patch grid.
pub const PATCH_GRID: usize = 4;

const EMB_SCALE_EXP: f64 = 0.5; // token embeddings scaled by C^0.5
const POS_SCALE: f64 = 0.25;
const MASK_NEG: f64 = -1e30;

/// Which per-token hidden states the trace exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenStateMode {
    /// Final-layer pre-logit state (the input of the output head).
    FinalLayer,
    /// Concatenation of every block's residual output plus the final state.
    AllLayers,
}

/// Architecture hyperparameters of a victim model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VictimConfig {
    /// Square input side; must be divisible by [`PATCH_GRID`].
    pub image_size: usize,
    /// Frames per sample: 1 for an image captioner, more for video.
    pub frames: usize,
    pub vocab: VocabSpec,
    /// Hidden width C (also the frame-feature width D).
    pub hidden_dim: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub hidden_state_mode: HiddenStateMode,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl VictimConfig {
    /// Default image captioner: 32×32 input, V=64, C=64, 2 blocks.
    pub fn image_default(seed: u64) -> Self {
        VictimConfig {
            image_size: 32,
            frames: 1,
            vocab: VocabSpec::shape_world(),
            hidden_dim: 64,
            blocks: 2,
            mlp_ratio: 4,
            hidden_state_mode: HiddenStateMode::FinalLayer,
            seed,
        }
    }

    /// Default video captioner: eight frames.
    pub fn video_default(seed: u64) -> Self {
        VictimConfig {
            frames: 8,
            ..VictimConfig::image_default(seed)
        }
    }

    /// Reduced victim for gradient checks: 8×8 input, V=16, C=16.
    pub fn reduced(frames: usize, seed: u64) -> Self {
        VictimConfig {
            image_size: 8,
            frames,
            vocab: VocabSpec::synthetic(16),
            hidden_dim: 16,
            blocks: 2,
            mlp_ratio: 4,
            hidden_state_mode: HiddenStateMode::FinalLayer,
            seed,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.image_size / PATCH_GRID
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size() * self.patch_size() * 3
    }

    pub fn visual_tokens(&self) -> usize {
        PATCH_GRID * PATCH_GRID
    }

    fn validate(&self) -> Result<(), VictimError> {
        if self.image_size % PATCH_GRID != 0 || self.image_size == 0 {
            return Err(VictimError::ShapeMismatch(format!(
                "image size {} not divisible by patch grid {PATCH_GRID}",
                self.image_size
            )));
        }
        if self.frames == 0 || self.blocks == 0 || self.hidden_dim == 0 {
            return Err(VictimError::ShapeMismatch(String::from(
                "degenerate architecture config",
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct BlockParams {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub cq: Matrix,
    pub cbq: Matrix,
    pub ck: Matrix,
    pub cbk: Matrix,
    pub cv: Matrix,
    pub cbv: Matrix,
    pub co: Matrix,
    pub cbo: Matrix,
    pub ln3_g: Matrix,
    pub ln3_b: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) struct Params {
    pub w_patch: Matrix,
    pub b_patch: Matrix,
    pub pos_spatial: Matrix,
    pub pos_temporal: Option<Matrix>,
    pub ln_vis_g: Matrix,
    pub ln_vis_b: Matrix,
    pub tok_embed: Matrix,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
    pub w_head: Matrix,
    pub b_head: Matrix,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller; uniforms pulled away from 0 so ln stays finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    std * math::sqrt(-2.0 * math::ln(u1)) * math::cos(core::f64::consts::TAU * u2)
}

fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec_unchecked(rows, cols, (0..rows * cols).map(|_| normal(rng, 0.02)).collect())
}

impl Params {
    fn init(config: &VictimConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = config.hidden_dim;
        let v = config.vocab.size();
        let mlp = c * config.mlp_ratio;
        let ones = |n: usize| Matrix::from_vec_unchecked(1, n, vec![1.0; n]);
        let zeros = |n: usize| Matrix::zeros(1, n);
        let block = |rng: &mut ChaCha8Rng| BlockParams {
            ln1_g: ones(c),
            ln1_b: zeros(c),
            wq: init_weight(rng, c, c),
            bq: zeros(c),
            wk: init_weight(rng, c, c),
            bk: zeros(c),
            wv: init_weight(rng, c, c),
            bv: zeros(c),
            wo: init_weight(rng, c, c),
            bo: zeros(c),
            ln2_g: ones(c),
            ln2_b: zeros(c),
            cq: init_weight(rng, c, c),
            cbq: zeros(c),
            ck: init_weight(rng, c, c),
            cbk: zeros(c),
            cv: init_weight(rng, c, c),
            cbv: zeros(c),
            co: init_weight(rng, c, c),
            cbo: zeros(c),
            ln3_g: ones(c),
            ln3_b: zeros(c),
            w1: init_weight(rng, c, mlp),
            b1: zeros(mlp),
            w2: init_weight(rng, mlp, c),
            b2: zeros(c),
        };
        Params {
            w_patch: init_weight(rng, config.patch_dim(), c),
            b_patch: zeros(c),
            pos_spatial: init_weight(rng, config.visual_tokens(), c),
            pos_temporal: (config.frames > 1).then(|| init_weight(rng, config.frames, c)),
            ln_vis_g: ones(c),
            ln_vis_b: zeros(c),
            tok_embed: init_weight(rng, v, c),
            blocks: (0..config.blocks).map(|_| block(rng)).collect(),
            lnf_g: ones(c),
            lnf_b: zeros(c),
            w_head: init_weight(rng, c, v),
            b_head: zeros(v),
        }
    }

    /// Stable (name, matrix) enumeration used by training and checkpoints.
    pub(crate) fn visit(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            (String::from("w_patch"), &self.w_patch),
            (String::from("b_patch"), &self.b_patch),
            (String::from("pos_spatial"), &self.pos_spatial),
        ];
        if let Some(pt) = &self.pos_temporal {
            out.push((String::from("pos_temporal"), pt));
        }
        out.push((String::from("ln_vis_g"), &self.ln_vis_g));
        out.push((String::from("ln_vis_b"), &self.ln_vis_b));
        out.push((String::from("tok_embed"), &self.tok_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, m) in b.visit() {
                out.push((format!("block{i}.{suffix}"), m));
            }
        }
        out.push((String::from("lnf_g"), &self.lnf_g));
        out.push((String::from("lnf_b"), &self.lnf_b));
        out.push((String::from("w_head"), &self.w_head));
        out.push((String::from("b_head"), &self.b_head));
        out
    }

    pub(crate) fn visit_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.w_patch, &mut self.b_patch, &mut self.pos_spatial];
        if let Some(pt) = &mut self.pos_temporal {
            out.push(pt);
        }
        out.push(&mut self.ln_vis_g);
        out.push(&mut self.ln_vis_b);
        out.push(&mut self.tok_embed);
        for b in &mut self.blocks {
            out.extend(b.visit_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.w_head);
        out.push(&mut self.b_head);
        out
    }
}

impl BlockParams {
    fn visit(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("cq", &self.cq),
            ("cbq", &self.cbq),
            ("ck", &self.ck),
            ("cbk", &self.cbk),
            ("cv", &self.cv),
            ("cbv", &self.cbv),
            ("co", &self.co),
            ("cbo", &self.cbo),
            ("ln3_g", &self.ln3_g),
            ("ln3_b", &self.ln3_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn visit_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.cq,
            &mut self.cbq,
            &mut self.ck,
            &mut self.cbk,
            &mut self.cv,
            &mut self.cbv,
            &mut self.co,
            &mut self.cbo,
            &mut self.ln3_g,
            &mut self.ln3_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// A captioner with frozen or trainable parameters. Immutable once built;
/// inference from many threads is safe.
#[derive(Debug, Clone)]
pub struct VictimModel {
    config: VictimConfig,
    pub(crate) params: Params,
}

/// Teacher-forced replay outputs for a fixed token sequence.
#[derive(Debug, Clone)]
pub struct TeacherForcedOutput {
    pub distributions: Vec<Distribution>,
    pub logits: Vec<Vec<f64>>,
    pub hidden_states: Vec<Vec<f64>>,
    pub attentions: Vec<Vec<f64>>,
    pub frame_features: Option<Matrix>,
}

/// Node handles into a differentiable forward pass.
pub struct ForwardHandles {
    /// One leaf per input frame (flat H·W·3 rows).
    pub pixel_leaves: Vec<NodeId>,
    /// `N×V` per-step output distributions.
    pub probs: NodeId,
    /// `N×V` per-step pre-softmax logits.
    pub logits: NodeId,
    /// `N×hidden_state_dim` stacked per-step hidden states.
    pub hidden: NodeId,
    /// `M×D` stacked frame features (video models).
    pub frame_features: Option<NodeId>,
    /// Layer activations for sponge-style objectives: per-frame visual
    /// features, each block's attention/MLP residual branches, and the
    /// final pre-logit states.
    pub activations: Vec<NodeId>,
    /// Per-step attention rows over visual positions (plain values).
    pub attn_rows: Vec<Vec<f64>>,
    pub n_steps: usize,
    pub vocab_size: usize,
    pub eos_id: u32,
}

pub(crate) struct ParamNodes {
    pub w_patch: NodeId,
    pub b_patch: NodeId,
    pub pos_spatial: NodeId,
    pub pos_temporal: Option<NodeId>,
    pub ln_vis_g: NodeId,
    pub ln_vis_b: NodeId,
    pub tok_embed: NodeId,
    pub blocks: Vec<Vec<NodeId>>, // same order as BlockParams::visit
    pub lnf_g: NodeId,
    pub lnf_b: NodeId,
    pub w_head: NodeId,
    pub b_head: NodeId,
}

impl ParamNodes {
    fn build(tape: &mut Tape, params: &Params, requires_grad: bool) -> Self {
        let mut leaf = |m: &Matrix| tape.leaf(m.clone(), requires_grad);
        ParamNodes {
            w_patch: leaf(&params.w_patch),
            b_patch: leaf(&params.b_patch),
            pos_spatial: leaf(&params.pos_spatial),
            pos_temporal: params.pos_temporal.as_ref().map(&mut leaf),
            ln_vis_g: leaf(&params.ln_vis_g),
            ln_vis_b: leaf(&params.ln_vis_b),
            tok_embed: leaf(&params.tok_embed),
            blocks: params
                .blocks
                .iter()
                .map(|b| b.visit().into_iter().map(|(_, m)| leaf(m)).collect())
                .collect(),
            lnf_g: leaf(&params.lnf_g),
            lnf_b: leaf(&params.lnf_b),
            w_head: leaf(&params.w_head),
            b_head: leaf(&params.b_head),
        }
    }

    /// Node ids in `Params::visit` order.
    pub(crate) fn ordered(&self) -> Vec<NodeId> {
        let mut out = vec![self.w_patch, self.b_patch, self.pos_spatial];
        if let Some(pt) = self.pos_temporal {
            out.push(pt);
        }
        out.push(self.ln_vis_g);
        out.push(self.ln_vis_b);
        out.push(self.tok_embed);
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&[self.lnf_g, self.lnf_b, self.w_head, self.b_head]);
        out
    }
}

// Indices into the BlockParams::visit ordering, used by the tape forward.
const B_LN1G: usize = 0;
const B_LN1B: usize = 1;
const B_WQ: usize = 2;
const B_BQ: usize = 3;
const B_WK: usize = 4;
const B_BK: usize = 5;
const B_WV: usize = 6;
const B_BV: usize = 7;
const B_WO: usize = 8;
const B_BO: usize = 9;
const B_LN2G: usize = 10;
const B_LN2B: usize = 11;
const B_CQ: usize = 12;
const B_CBQ: usize = 13;
const B_CK: usize = 14;
const B_CBK: usize = 15;
const B_CV: usize = 16;
const B_CBV: usize = 17;
const B_CO: usize = 18;
const B_CBO: usize = 19;
const B_LN3G: usize = 20;
const B_LN3B: usize = 21;
const B_W1: usize = 22;
const B_B1: usize = 23;
const B_W2: usize = 24;
const B_B2: usize = 25;

/// Per-frame encoder and projected cross-attention caches for a decode.
struct VisualContext {
    frame_features: Matrix,
    /// `[block][frame] -> (K, V)`, each `visual_tokens × C`.
    cross_kv: Vec<Vec<(Matrix, Matrix)>>,
    visible: Vec<bool>,
}

impl VictimModel {
    /// Deterministically initialize a model from its config seed.
    pub fn new(config: VictimConfig) -> Result<Self, VictimError> {
        config.validate()?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
        let params = Params::init(&config, &mut rng);
        Ok(VictimModel { config, params })
    }

    pub fn config(&self) -> &VictimConfig {
        &self.config
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.config.vocab
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Frame features are mean-pooled patch embeddings, so D = C.
    pub fn frame_feature_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn hidden_state_dim(&self) -> usize {
        match self.config.hidden_state_mode {
            HiddenStateMode::FinalLayer => self.config.hidden_dim,
            HiddenStateMode::AllLayers => (self.config.blocks + 1) * self.config.hidden_dim,
        }
    }

    /// Visual positions seen by cross-attention: frames × patch tokens.
    pub fn visual_positions(&self) -> usize {
        self.config.frames * self.config.visual_tokens()
    }

    fn emb_scale(&self) -> f64 {
        math::powf(self.config.hidden_dim as f64, EMB_SCALE_EXP)
    }

    fn check_sample(&self, sample: &PixelSample) -> Result<(), VictimError> {
        if sample.height() != self.config.image_size || sample.width() != self.config.image_size {
            return Err(VictimError::ShapeMismatch(format!(
                "sample is {}x{}, model expects {0}x{0}",
                sample.height(),
                sample.width(),
            )));
        }
        if sample.num_frames() != self.config.frames {
            return Err(VictimError::FrameCount {
                expected: self.config.frames,
                got: sample.num_frames(),
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), VictimError> {
        let v = self.config.vocab.size() as u32;
        for &t in tokens {
            if t >= v {
                return Err(VictimError::TokenOutOfRange {
                    id: t,
                    vocab: v as usize,
                });
            }
        }
        Ok(())
    }

    fn resolve_mask(&self, mask: Option<&[bool]>) -> Result<Vec<bool>, VictimError> {
        let m = self.config.frames;
        let visible = match mask {
            None => vec![true; m],
            Some(v) => {
                if v.len() != m {
                    return Err(VictimError::FrameCount {
                        expected: m,
                        got: v.len(),
                    });
                }
                v.to_vec()
            }
        };
        if !visible.iter().any(|&b| b) {
            return Err(VictimError::ShapeMismatch(String::from(
                "every frame is masked",
            )));
        }
        Ok(visible)
    }

    fn patch_indices(&self) -> Vec<usize> {
        let size = self.config.image_size;
        let ps = self.config.patch_size();
        let mut idx = Vec::with_capacity(self.config.visual_tokens() * self.config.patch_dim());
        for pr in 0..PATCH_GRID {
            for pc in 0..PATCH_GRID {
                for py in 0..ps {
                    for px in 0..ps {
                        for ch in 0..3 {
                            let y = pr * ps + py;
                            let x = pc * ps + px;
                            idx.push((y * size + x) * 3 + ch);
                        }
                    }
                }
            }
        }
        idx
    }

    /// Patch-embed one frame into its `visual_tokens × C` content features.
    pub fn encode_image(&self, frame: &[f64]) -> Result<Matrix, VictimError> {
        let size = self.config.image_size;
        if frame.len() != size * size * 3 {
            return Err(VictimError::ShapeMismatch(format!(
                "frame has {} values, expected {}",
                frame.len(),
                size * size * 3
            )));
        }
        let idx = self.patch_indices();
        let pd = self.config.patch_dim();
        let tokens = self.config.visual_tokens();
        let patch_data: Vec<f64> = idx.iter().map(|&i| 2.0 * frame[i] - 1.0).collect();
        let patches = Matrix::from_vec_unchecked(tokens, pd, patch_data);
        let mut feats = patches.matmul(&self.params.w_patch, false, false);
        for r in 0..tokens {
            for (o, &b) in feats.row_mut(r).iter_mut().zip(self.params.b_patch.data()) {
                *o += b;
            }
        }
        Ok(feats)
    }

    /// Frame features `h_1..h_M` (mean-pooled patch embeddings), `M×D`.
    pub fn encode_video(&self, sample: &PixelSample) -> Result<Matrix, VictimError> {
        self.check_sample(sample)?;
        let mut rows = Vec::with_capacity(sample.num_frames());
        for j in 0..sample.num_frames() {
            let feats = self.encode_image(sample.frame(j))?;
            rows.push(mean_rows_plain(&feats));
        }
        Matrix::from_rows(&rows).map_err(VictimError::from)
    }

    fn visual_context(
        &self,
        sample: &PixelSample,
        mask: Option<&[bool]>,
    ) -> Result<VisualContext, VictimError> {
        self.check_sample(sample)?;
        let visible = self.resolve_mask(mask)?;
        let m = self.config.frames;
        let mut h_rows = Vec::with_capacity(m);
        let mut ctxs = Vec::with_capacity(m);
        for j in 0..m {
            let f = self.encode_image(sample.frame(j))?;
            h_rows.push(mean_rows_plain(&f));
            let mut ctx = f.add(&self.params.pos_spatial);
            if let Some(pt) = &self.params.pos_temporal {
                for r in 0..ctx.rows() {
                    for (o, &p) in ctx.row_mut(r).iter_mut().zip(pt.row(j)) {
                        *o += p;
                    }
                }
            }
            for r in 0..ctx.rows() {
                let normed = crate::tape::layer_norm_row(
                    ctx.row(r),
                    self.params.ln_vis_g.data(),
                    self.params.ln_vis_b.data(),
                );
                ctx.row_mut(r).copy_from_slice(&normed);
            }
            ctxs.push(ctx);
        }
        let cross_kv = self
            .params
            .blocks
            .iter()
            .map(|b| {
                ctxs.iter()
                    .map(|ctx| {
                        let mut k = ctx.matmul(&b.ck, false, false);
                        let mut v = ctx.matmul(&b.cv, false, false);
                        for r in 0..k.rows() {
                            for (o, &bias) in k.row_mut(r).iter_mut().zip(b.cbk.data()) {
                                *o += bias;
                            }
                            for (o, &bias) in v.row_mut(r).iter_mut().zip(b.cbv.data()) {
                                *o += bias;
                            }
                        }
                        (k, v)
                    })
                    .collect()
            })
            .collect();
        Ok(VisualContext {
            frame_features: Matrix::from_rows(&h_rows)?,
            cross_kv,
            visible,
        })
    }

    /// Autoregressive decode until EOS or `max_length`.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        sample: &PixelSample,
        prompt: &[u32],
        opts: &GenerateOptions,
        rng: &mut R,
    ) -> Result<GenerationTrace, VictimError> {
        self.check_tokens(prompt)?;
        let ctx = self.visual_context(sample, opts.frame_mask.as_deref())?;
        let vocab = &self.config.vocab;
        let eos = vocab.eos_id();

        let mut state = DecodeState::new(self.config.blocks);
        let mut trace = GenerationTrace {
            prompt: prompt.to_vec(),
            tokens: Vec::new(),
            distributions: Vec::new(),
            logits: Vec::new(),
            hidden_states: Vec::new(),
            frame_features: (self.config.frames > 1).then(|| ctx.frame_features.clone()),
            attentions: Vec::new(),
            eos_id: eos,
        };
        if opts.max_length == 0 {
            return Ok(trace);
        }

        // Feed BOS and the prompt; only the last output distribution is used.
        let mut step = self.feed(&ctx, &mut state, vocab.bos_id(), 0);
        for (p, &tok) in prompt.iter().enumerate() {
            step = self.feed(&ctx, &mut state, tok, p + 1);
        }

        loop {
            let next = select_token(&step.probs, opts.policy, opts.ban_eos, eos, rng);
            trace.tokens.push(next);
            trace
                .distributions
                .push(Distribution::new(step.probs.clone())?);
            trace.logits.push(step.logits.clone());
            trace.hidden_states.push(step.hidden.clone());
            trace.attentions.push(step.attn_row.clone());
            let n = trace.tokens.len();
            if (!opts.ban_eos && next == eos) || n >= opts.max_length {
                break;
            }
            step = self.feed(&ctx, &mut state, next, prompt.len() + n);
        }
        Ok(trace)
    }

    /// One incremental decoder step: feed the token at `position`, return
    /// the next-token outputs.
    fn feed(
        &self,
        ctx: &VisualContext,
        state: &mut DecodeState,
        token: u32,
        position: usize,
    ) -> StepOutput {
        let c = self.config.hidden_dim;
        let inv_sqrt = 1.0 / math::sqrt(c as f64);
        let emb_scale = self.emb_scale();
        let m_act = ctx.visible.iter().filter(|&&b| b).count() as f64;
        let vis_tokens = self.config.visual_tokens();

        let mut x: Vec<f64> = self
            .params
            .tok_embed
            .row(token as usize)
            .iter()
            .zip(sinusoidal_row(position, c))
            .map(|(&e, p)| e * emb_scale + p)
            .collect();

        let mut block_outs: Vec<Vec<f64>> = Vec::with_capacity(self.config.blocks);
        let mut attn_accum = vec![0.0; self.config.frames * vis_tokens];

        for (bi, bp) in self.params.blocks.iter().enumerate() {
            // Causal self-attention over the cached positions.
            let h = layer_norm_row(&x, bp.ln1_g.data(), bp.ln1_b.data());
            let q = matvec_bias(&h, &bp.wq, &bp.bq);
            let k = matvec_bias(&h, &bp.wk, &bp.bk);
            let v = matvec_bias(&h, &bp.wv, &bp.bv);
            state.self_k[bi].push(k);
            state.self_v[bi].push(v);
            let keys = &state.self_k[bi];
            let vals = &state.self_v[bi];
            let mut scores = Vec::with_capacity(keys.len());
            for key in keys {
                let dot: f64 = q.iter().zip(key).map(|(a, b)| a * b).sum();
                scores.push(dot * inv_sqrt);
            }
            let attn = softmax_slice(&scores);
            let mut sa = vec![0.0; c];
            for (a, val) in attn.iter().zip(vals) {
                for (o, &vv) in sa.iter_mut().zip(val) {
                    *o += a * vv;
                }
            }
            let proj = matvec_bias(&sa, &bp.wo, &bp.bo);
            for (xo, p) in x.iter_mut().zip(&proj) {
                *xo += p;
            }

            // Cross-attention: per visible frame, then mean over frames.
            let h2 = layer_norm_row(&x, bp.ln2_g.data(), bp.ln2_b.data());
            let q2 = matvec_bias(&h2, &bp.cq, &bp.cbq);
            let mut out = vec![0.0; c];
            for (j, visible) in ctx.visible.iter().enumerate() {
                if !visible {
                    continue;
                }
                let (kc, vc) = &ctx.cross_kv[bi][j];
                let mut sc = Vec::with_capacity(vis_tokens);
                for r in 0..vis_tokens {
                    let dot: f64 = q2.iter().zip(kc.row(r)).map(|(a, b)| a * b).sum();
                    sc.push(dot * inv_sqrt);
                }
                let a2 = softmax_slice(&sc);
                let mut oj = vec![0.0; c];
                for (w, r) in a2.iter().zip(0..vis_tokens) {
                    for (o, &vv) in oj.iter_mut().zip(vc.row(r)) {
                        *o += w * vv;
                    }
                }
                for (o, v) in out.iter_mut().zip(&oj) {
                    *o += v;
                }
                for (slot, w) in attn_accum[j * vis_tokens..(j + 1) * vis_tokens]
                    .iter_mut()
                    .zip(&a2)
                {
                    *slot += w / m_act;
                }
            }
            for o in &mut out {
                *o /= m_act;
            }
            let proj2 = matvec_bias(&out, &bp.co, &bp.cbo);
            for (xo, p) in x.iter_mut().zip(&proj2) {
                *xo += p;
            }

            // MLP.
            let h3 = layer_norm_row(&x, bp.ln3_g.data(), bp.ln3_b.data());
            let mid: Vec<f64> = matvec_bias(&h3, &bp.w1, &bp.b1)
                .into_iter()
                .map(silu_scalar)
                .collect();
            let mlp = matvec_bias(&mid, &bp.w2, &bp.b2);
            for (xo, p) in x.iter_mut().zip(&mlp) {
                *xo += p;
            }
            block_outs.push(x.clone());
        }

        let g = layer_norm_row(&x, self.params.lnf_g.data(), self.params.lnf_b.data());
        let logits = matvec_bias(&g, &self.params.w_head, &self.params.b_head);
        let probs = softmax_slice(&logits);
        let hidden = match self.config.hidden_state_mode {
            HiddenStateMode::FinalLayer => g,
            HiddenStateMode::AllLayers => {
                let mut all = Vec::with_capacity((self.config.blocks + 1) * c);
                for b in &block_outs {
                    all.extend_from_slice(b);
                }
                all.extend_from_slice(&g);
                all
            }
        };
        for a in &mut attn_accum {
            *a /= self.config.blocks as f64;
        }
        StepOutput {
            probs,
            logits,
            hidden,
            attn_row: attn_accum,
        }
    }

    /// Recompute distributions, hidden states, attentions, and frame
    /// features for a fixed token sequence.
    pub fn teacher_forced_forward(
        &self,
        sample: &PixelSample,
        prompt: &[u32],
        tokens: &[u32],
        frame_mask: Option<&[bool]>,
    ) -> Result<TeacherForcedOutput, VictimError> {
        if tokens.is_empty() {
            return Ok(TeacherForcedOutput {
                distributions: Vec::new(),
                logits: Vec::new(),
                hidden_states: Vec::new(),
                attentions: Vec::new(),
                frame_features: (self.config.frames > 1)
                    .then(|| self.encode_video(sample))
                    .transpose()?,
            });
        }
        let (tape, handles) = self.forward_tape(sample, prompt, tokens, frame_mask, false)?;
        let probs = tape.value(handles.probs);
        let logits = tape.value(handles.logits);
        let hidden = tape.value(handles.hidden);
        let mut distributions = Vec::with_capacity(handles.n_steps);
        let mut logit_rows = Vec::with_capacity(handles.n_steps);
        let mut hidden_rows = Vec::with_capacity(handles.n_steps);
        for i in 0..handles.n_steps {
            distributions.push(Distribution::new(probs.row(i).to_vec())?);
            logit_rows.push(logits.row(i).to_vec());
            hidden_rows.push(hidden.row(i).to_vec());
        }
        Ok(TeacherForcedOutput {
            distributions,
            logits: logit_rows,
            hidden_states: hidden_rows,
            attentions: handles.attn_rows.clone(),
            frame_features: handles
                .frame_features
                .map(|id| tape.value(id).clone()),
        })
    }

    /// Build the differentiable teacher-forced forward pass.
    ///
    /// When `pixels_require_grad` is set, `handles.pixel_leaves` can be
    /// differentiated; parameters are always constants here (training uses
    /// [`Self::forward_tape_trainable`]).
    pub fn forward_tape(
        &self,
        sample: &PixelSample,
        prompt: &[u32],
        tokens: &[u32],
        frame_mask: Option<&[bool]>,
        pixels_require_grad: bool,
    ) -> Result<(Tape, ForwardHandles), VictimError> {
        let (tape, handles, _) =
            self.forward_tape_inner(sample, prompt, tokens, frame_mask, pixels_require_grad, false)?;
        Ok((tape, handles))
    }

    /// Differentiable forward with parameter leaves for training.
    pub(crate) fn forward_tape_trainable(
        &self,
        sample: &PixelSample,
        prompt: &[u32],
        tokens: &[u32],
    ) -> Result<(Tape, ForwardHandles, ParamNodes), VictimError> {
        let (tape, handles, nodes) =
            self.forward_tape_inner(sample, prompt, tokens, None, false, true)?;
        Ok((tape, handles, nodes.expect("param nodes requested")))
    }

    fn forward_tape_inner(
        &self,
        sample: &PixelSample,
        prompt: &[u32],
        tokens: &[u32],
        frame_mask: Option<&[bool]>,
        pixels_require_grad: bool,
        params_require_grad: bool,
    ) -> Result<(Tape, ForwardHandles, Option<ParamNodes>), VictimError> {
        self.check_sample(sample)?;
        self.check_tokens(prompt)?;
        self.check_tokens(tokens)?;
        let visible = self.resolve_mask(frame_mask)?;
        let n = tokens.len();
        assert!(n >= 1, "forward_tape needs at least one generated token");

        let c = self.config.hidden_dim;
        let vis_tokens = self.config.visual_tokens();
        let m = self.config.frames;
        let m_act = visible.iter().filter(|&&b| b).count() as f64;
        let inv_sqrt = 1.0 / math::sqrt(c as f64);

        let mut tape = Tape::new();
        let pn = ParamNodes::build(&mut tape, &self.params, params_require_grad);

        // Visual side.
        let patch_idx = self.patch_indices();
        let pd = self.config.patch_dim();
        let mut pixel_leaves = Vec::with_capacity(m);
        let mut feats_nodes = Vec::with_capacity(m);
        let mut ctx_nodes = Vec::with_capacity(m);
        let mut h_nodes = Vec::with_capacity(m);
        let mut activations = Vec::new();
        for j in 0..m {
            let leaf = tape.leaf(
                Matrix::from_vec_unchecked(1, sample.frame(j).len(), sample.frame(j).to_vec()),
                pixels_require_grad,
            );
            pixel_leaves.push(leaf);
            let patches = tape.gather(leaf, patch_idx.clone(), vis_tokens, pd);
            let scaled = tape.scale(patches, 2.0);
            let centered = tape.add_scalar(scaled, -1.0);
            let prod = tape.matmul(centered, pn.w_patch);
            let feats = tape.add_row(prod, pn.b_patch);
            activations.push(feats);
            h_nodes.push(tape.mean_rows(feats));
            let mut ctx = tape.add(feats, pn.pos_spatial);
            if let Some(pt) = pn.pos_temporal {
                let row = tape.slice_rows(pt, j, 1);
                ctx = tape.add_row(ctx, row);
            }
            ctx = tape.layer_norm(ctx, pn.ln_vis_g, pn.ln_vis_b);
            ctx_nodes.push(ctx);
            feats_nodes.push(feats);
        }
        let frame_features = (m > 1).then(|| tape.concat_rows(&h_nodes));

        // Text side: inputs are BOS, the prompt, then all but the last token.
        let mut ids: Vec<usize> = Vec::with_capacity(1 + prompt.len() + n - 1);
        ids.push(self.config.vocab.bos_id() as usize);
        ids.extend(prompt.iter().map(|&t| t as usize));
        ids.extend(tokens[..n - 1].iter().map(|&t| t as usize));
        let s = ids.len();

        let emb = tape.embed_rows(pn.tok_embed, &ids);
        let emb_scaled = tape.scale(emb, self.emb_scale());
        let mut pos = Matrix::zeros(s, c);
        for p in 0..s {
            pos.row_mut(p).copy_from_slice(&sinusoidal_row(p, c));
        }
        let pos_node = tape.constant(pos);
        let mut x = tape.add(emb_scaled, pos_node);

        let mut causal = Matrix::zeros(s, s);
        for i in 0..s {
            for j in i + 1..s {
                causal.set(i, j, MASK_NEG);
            }
        }
        let mask_node = tape.constant(causal);

        let mut block_outs = Vec::with_capacity(self.config.blocks);
        let mut cross_attn_nodes: Vec<Vec<Option<NodeId>>> = Vec::with_capacity(self.config.blocks);
        for b in &pn.blocks {
            // Self-attention.
            let h = tape.layer_norm(x, b[B_LN1G], b[B_LN1B]);
            let q0 = tape.matmul(h, b[B_WQ]);
            let q = tape.add_row(q0, b[B_BQ]);
            let k0 = tape.matmul(h, b[B_WK]);
            let k = tape.add_row(k0, b[B_BK]);
            let v0 = tape.matmul(h, b[B_WV]);
            let v = tape.add_row(v0, b[B_BV]);
            let scores0 = tape.matmul_tt(q, k, false, true);
            let scores = tape.scale(scores0, inv_sqrt);
            let masked = tape.add(scores, mask_node);
            let attn = tape.row_softmax(masked);
            let sa = tape.matmul(attn, v);
            let proj0 = tape.matmul(sa, b[B_WO]);
            let proj = tape.add_row(proj0, b[B_BO]);
            x = tape.add(x, proj);
            activations.push(proj);

            // Cross-attention.
            let h2 = tape.layer_norm(x, b[B_LN2G], b[B_LN2B]);
            let q20 = tape.matmul(h2, b[B_CQ]);
            let q2 = tape.add_row(q20, b[B_CBQ]);
            let mut per_frame = Vec::with_capacity(m);
            let mut acc: Option<NodeId> = None;
            for (j, ctx) in ctx_nodes.iter().enumerate() {
                if !visible[j] {
                    per_frame.push(None);
                    continue;
                }
                let kc0 = tape.matmul(*ctx, b[B_CK]);
                let kc = tape.add_row(kc0, b[B_CBK]);
                let vc0 = tape.matmul(*ctx, b[B_CV]);
                let vc = tape.add_row(vc0, b[B_CBV]);
                let sc0 = tape.matmul_tt(q2, kc, false, true);
                let sc = tape.scale(sc0, inv_sqrt);
                let pa = tape.row_softmax(sc);
                per_frame.push(Some(pa));
                let oj = tape.matmul(pa, vc);
                acc = Some(match acc {
                    None => oj,
                    Some(prev) => tape.add(prev, oj),
                });
            }
            cross_attn_nodes.push(per_frame);
            let summed = acc.expect("at least one visible frame");
            let out = tape.scale(summed, 1.0 / m_act);
            let proj20 = tape.matmul(out, b[B_CO]);
            let proj2 = tape.add_row(proj20, b[B_CBO]);
            x = tape.add(x, proj2);
            activations.push(proj2);

            // MLP.
            let h3 = tape.layer_norm(x, b[B_LN3G], b[B_LN3B]);
            let mid0 = tape.matmul(h3, b[B_W1]);
            let mid1 = tape.add_row(mid0, b[B_B1]);
            let mid = tape.silu(mid1);
            let mlp0 = tape.matmul(mid, b[B_W2]);
            let mlp = tape.add_row(mlp0, b[B_B2]);
            x = tape.add(x, mlp);
            activations.push(mlp);
            block_outs.push(x);
        }

        let g = tape.layer_norm(x, pn.lnf_g, pn.lnf_b);
        activations.push(g);
        let logits_all0 = tape.matmul(g, pn.w_head);
        let logits_all = tape.add_row(logits_all0, pn.b_head);
        let probs_all = tape.row_softmax(logits_all);

        let start = prompt.len();
        let probs = tape.slice_rows(probs_all, start, n);
        let logits = tape.slice_rows(logits_all, start, n);
        let hidden_src = match self.config.hidden_state_mode {
            HiddenStateMode::FinalLayer => g,
            HiddenStateMode::AllLayers => {
                let mut parts = block_outs.clone();
                parts.push(g);
                tape.concat_cols(&parts)
            }
        };
        let hidden = tape.slice_rows(hidden_src, start, n);

        // Assemble per-step attention rows (plain values, matching the
        // incremental decode's bookkeeping).
        let mut attn_rows = vec![vec![0.0; m * vis_tokens]; n];
        for per_frame in &cross_attn_nodes {
            for (j, node) in per_frame.iter().enumerate() {
                let Some(node) = node else { continue };
                let pa = tape.value(*node);
                for (i, row) in attn_rows.iter_mut().enumerate() {
                    for (slot, &w) in row[j * vis_tokens..(j + 1) * vis_tokens]
                        .iter_mut()
                        .zip(pa.row(start + i))
                    {
                        *slot += w / m_act;
                    }
                }
            }
        }
        let nb = self.config.blocks as f64;
        for row in &mut attn_rows {
            for a in row {
                *a /= nb;
            }
        }

        let handles = ForwardHandles {
            pixel_leaves,
            probs,
            logits,
            hidden,
            frame_features,
            activations,
            attn_rows,
            n_steps: n,
            vocab_size: self.config.vocab.size(),
            eos_id: self.config.vocab.eos_id(),
        };
        Ok((tape, handles, params_require_grad.then_some(pn)))
    }

    /// Gradient of a scalar loss (built from the forward handles) with
    /// respect to the input pixels, teacher-forced on `tokens`.
    pub fn backward_to_input(
        &self,
        sample: &PixelSample,
        prompt: &[u32],
        tokens: &[u32],
        frame_mask: Option<&[bool]>,
        loss_fn: &dyn Fn(&mut Tape, &ForwardHandles) -> Result<NodeId, VictimError>,
    ) -> Result<(PixelMap, f64), VictimError> {
        let (mut tape, handles) =
            self.forward_tape(sample, prompt, tokens, frame_mask, true)?;
        let loss = loss_fn(&mut tape, &handles)?;
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        let mut map = PixelMap::zeros_like(sample);
        for (frame, &leaf) in map.frames.iter_mut().zip(&handles.pixel_leaves) {
            if let Some(g) = grads.get(leaf) {
                frame.copy_from_slice(g.data());
            }
        }
        if !map.is_finite() {
            return Err(VictimError::NonFiniteGradient);
        }
        Ok((map, value))
    }

    /// Named parameter tensors in a stable order, for checkpoints.
    pub fn export_parameters(&self) -> Vec<(String, &Matrix)> {
        self.params.visit()
    }

    /// Rebuild a model from its config and named tensors, as exported by
    /// [`Self::export_parameters`]. Names, order, and shapes must match.
    pub fn from_parameters(
        config: VictimConfig,
        tensors: Vec<(String, Matrix)>,
    ) -> Result<Self, VictimError> {
        let mut model = VictimModel::new(config)?;
        let expected: Vec<(String, (usize, usize))> = model
            .params
            .visit()
            .iter()
            .map(|(n, m)| (n.clone(), (m.rows(), m.cols())))
            .collect();
        if expected.len() != tensors.len() {
            return Err(VictimError::ShapeMismatch(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                expected.len()
            )));
        }
        let slots = model.params.visit_mut();
        for (((name, tensor), (expect_name, shape)), slot) in
            tensors.into_iter().zip(expected).zip(slots)
        {
            if name != expect_name {
                return Err(VictimError::ShapeMismatch(format!(
                    "tensor {name} found where {expect_name} was expected"
                )));
            }
            if (tensor.rows(), tensor.cols()) != shape {
                return Err(VictimError::ShapeMismatch(format!(
                    "tensor {name} is {}x{}, expected {}x{}",
                    tensor.rows(),
                    tensor.cols(),
                    shape.0,
                    shape.1
                )));
            }
            *slot = tensor;
        }
        Ok(model)
    }

    /// Layer activation snapshot for a fixed token sequence (plain values).
    pub fn activation_snapshot(
        &self,
        sample: &PixelSample,
        prompt: &[u32],
        tokens: &[u32],
    ) -> Result<Vec<Matrix>, VictimError> {
        let (tape, handles) = self.forward_tape(sample, prompt, tokens, None, false)?;
        Ok(handles
            .activations
            .iter()
            .map(|&id| tape.value(id).clone())
            .collect())
    }
}

struct DecodeState {
    self_k: Vec<Vec<Vec<f64>>>,
    self_v: Vec<Vec<Vec<f64>>>,
}

impl DecodeState {
    fn new(blocks: usize) -> Self {
        DecodeState {
            self_k: vec![Vec::new(); blocks],
            self_v: vec![Vec::new(); blocks],
        }
    }
}

struct StepOutput {
    probs: Vec<f64>,
    logits: Vec<f64>,
    hidden: Vec<f64>,
    attn_row: Vec<f64>,
}

/// `row (1×k) · w (k×n) + bias`, accumulating over ascending k exactly like
/// `Matrix::matmul`.
fn matvec_bias(row: &[f64], w: &Matrix, bias: &Matrix) -> Vec<f64> {
    let n = w.cols();
    let mut out = vec![0.0; n];
    for (k, &a) in row.iter().enumerate() {
        for (o, &b) in out.iter_mut().zip(w.row(k)) {
            *o += a * b;
        }
    }
    for (o, &b) in out.iter_mut().zip(bias.data()) {
        *o += b;
    }
    out
}

fn mean_rows_plain(m: &Matrix) -> Vec<f64> {
    let inv = 1.0 / m.rows() as f64;
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o *= inv;
    }
    out
}

/// Sinusoidal position encoding row, scaled to sit near the embedding scale.
fn sinusoidal_row(position: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let p = position as f64;
    for i in 0..dim / 2 {
        let freq = math::powf(10000.0, -(2.0 * i as f64) / dim as f64);
        out[2 * i] = POS_SCALE * math::sin(p * freq);
        out[2 * i + 1] = POS_SCALE * math::cos(p * freq);
    }
    out
}
