//! Synthetic captioning corpus: colored geometric objects on a plain
//! background, with template captions and exact object ground truth.
//!
//! Every metric downstream (caption accuracy, hallucination rates) is
//! ground-truthable because the caption grammar is closed:
//! `a COLOR SHAPE (and a COLOR SHAPE)*`, objects ordered canonically by
//! (color, shape) index.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{VocabSpec, COLOR_WORDS, SHAPE_WORDS};
use super::{PixelSample, SampleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
    ];

    pub fn word(self) -> &'static str {
        COLOR_WORDS[self as usize]
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.85, 0.10, 0.10],
            Color::Green => [0.10, 0.75, 0.15],
            Color::Blue => [0.15, 0.25, 0.85],
            Color::Yellow => [0.90, 0.85, 0.10],
            Color::Purple => [0.60, 0.15, 0.75],
            Color::Orange => [0.95, 0.55, 0.10],
        }
    }
}

impl Shape {
    pub const ALL: [Shape; 5] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Cross,
    ];

    pub fn word(self) -> &'static str {
        SHAPE_WORDS[self as usize]
    }
}

const BACKGROUND: [f64; 3] = [0.82, 0.82, 0.84];

/// Generator parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ShapeWorldConfig {
    pub n_samples: usize,
    pub kind: SampleKind,
    pub image_size: usize,
    /// Frames per video sample (ignored for images).
    pub frames: usize,
    pub seed: u64,
}

impl ShapeWorldConfig {
    pub fn images(n_samples: usize, seed: u64) -> Self {
        ShapeWorldConfig {
            n_samples,
            kind: SampleKind::Image,
            image_size: 32,
            frames: 1,
            seed,
        }
    }

    pub fn videos(n_samples: usize, seed: u64) -> Self {
        ShapeWorldConfig {
            n_samples,
            kind: SampleKind::Video,
            image_size: 32,
            frames: 8,
            seed,
        }
    }
}

/// One generated sample with its template caption and object ground truth.
#[derive(Debug, Clone)]
pub struct ShapeSample {
    pub pixels: PixelSample,
    /// Caption word token ids (no BOS/EOS framing).
    pub caption: Vec<u32>,
    pub caption_text: String,
    /// Ground-truth object set; canonically ordered and duplicate-free.
    pub objects: Vec<(Color, Shape)>,
}

struct SceneObject {
    color: Color,
    shape: Shape,
    x: f64,
    y: f64,
    half: f64,
    vx: f64,
    vy: f64,
}

/// Deterministically generate a shape-world dataset.
pub fn make_shape_world(config: &ShapeWorldConfig) -> Vec<ShapeSample> {
    let vocab = VocabSpec::shape_world();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.n_samples)
        .map(|_| generate_sample(config, &vocab, &mut rng))
        .collect()
}

fn generate_sample(
    config: &ShapeWorldConfig,
    vocab: &VocabSpec,
    rng: &mut ChaCha8Rng,
) -> ShapeSample {
    let size = config.image_size as f64;
    let count = rng.gen_range(1..=3usize);

    // Distinct (color, shape) pairs.
    let mut pairs: Vec<(Color, Shape)> = Vec::with_capacity(count);
    while pairs.len() < count {
        let color = Color::ALL[rng.gen_range(0..Color::ALL.len())];
        let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
        if !pairs.contains(&(color, shape)) {
            pairs.push((color, shape));
        }
    }

    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for &(color, shape) in &pairs {
        let half = size / 32.0 * rng.gen_range(6..=8) as f64;
        let lo = crate::math::ceil(half + 1.0);
        let hi = size - half - 1.0;
        let mut x = rng.gen_range(lo as i64..=hi as i64) as f64;
        let mut y = rng.gen_range(lo as i64..=hi as i64) as f64;
        for _ in 0..100 {
            let clear = objects
                .iter()
                .all(|o| crate::math::hypot(o.x - x, o.y - y) >= (o.half + half) * 0.9);
            if clear {
                break;
            }
            x = rng.gen_range(lo as i64..=hi as i64) as f64;
            y = rng.gen_range(lo as i64..=hi as i64) as f64;
        }
        let speed = size / 32.0;
        let (vx, vy) = if config.kind == SampleKind::Video {
            (
                rng.gen_range(-1.5..1.5) * speed,
                rng.gen_range(-1.5..1.5) * speed,
            )
        } else {
            (0.0, 0.0)
        };
        objects.push(SceneObject {
            color,
            shape,
            x,
            y,
            half,
            vx,
            vy,
        });
    }

    let n_frames = match config.kind {
        SampleKind::Image => 1,
        SampleKind::Video => config.frames,
    };
    let mut frames = Vec::with_capacity(n_frames);
    let mut positions: Vec<(f64, f64, f64, f64)> =
        objects.iter().map(|o| (o.x, o.y, o.vx, o.vy)).collect();
    for _ in 0..n_frames {
        frames.push(render_frame(config.image_size, &objects, &positions));
        for (o, pos) in objects.iter().zip(positions.iter_mut()) {
            let lo = o.half + 1.0;
            let hi = size - o.half - 1.0;
            pos.0 += pos.2;
            pos.1 += pos.3;
            if pos.0 < lo || pos.0 > hi {
                pos.2 = -pos.2;
                pos.0 = pos.0.clamp(lo, hi);
            }
            if pos.1 < lo || pos.1 > hi {
                pos.3 = -pos.3;
                pos.1 = pos.1.clamp(lo, hi);
            }
        }
    }

    // Canonical caption order: by (color, shape) enum index.
    let mut ordered = pairs.clone();
    ordered.sort();
    let mut words: Vec<&str> = Vec::new();
    for (i, (color, shape)) in ordered.iter().enumerate() {
        if i > 0 {
            words.push("and");
        }
        words.push("a");
        words.push(color.word());
        words.push(shape.word());
    }
    let caption_text = words.join(" ");
    let caption = vocab
        .tokenize(&caption_text)
        .expect("caption words are in vocabulary");

    ShapeSample {
        pixels: PixelSample::new(config.kind, config.image_size, config.image_size, frames)
            .expect("rendered frames are valid"),
        caption,
        caption_text,
        objects: ordered,
    }
}

fn render_frame(
    size: usize,
    objects: &[SceneObject],
    positions: &[(f64, f64, f64, f64)],
) -> Vec<f64> {
    let mut frame = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let base = (y * size + x) * 3;
            frame[base..base + 3].copy_from_slice(&BACKGROUND);
        }
    }
    for (o, &(cx, cy, _, _)) in objects.iter().zip(positions) {
        let rgb = o.color.rgb();
        let lo_y = crate::math::floor(cy - o.half).max(0.0) as usize;
        let hi_y = (crate::math::ceil(cy + o.half) as usize).min(size - 1);
        let lo_x = crate::math::floor(cx - o.half).max(0.0) as usize;
        let hi_x = (crate::math::ceil(cx + o.half) as usize).min(size - 1);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                if covers(o.shape, px - cx, py - cy, o.half) {
                    let base = (y * size + x) * 3;
                    frame[base..base + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    frame
}

fn covers(shape: Shape, dx: f64, dy: f64, half: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= half * half,
        Shape::Square => crate::math::abs(dx) <= half * 0.8 && crate::math::abs(dy) <= half * 0.8,
        Shape::Triangle => {
            // Upward triangle: apex at -half, base at +0.75·half.
            let t = (dy + half) / (1.75 * half);
            (0.0..=1.0).contains(&t) && crate::math::abs(dx) <= half * t
        }
        Shape::Diamond => crate::math::abs(dx) + crate::math::abs(dy) <= half,
        Shape::Cross => {
            (crate::math::abs(dx) <= half * 0.35 && crate::math::abs(dy) <= half)
                || (crate::math::abs(dy) <= half * 0.35 && crate::math::abs(dx) <= half)
        }
    }
}

/// Does a token sequence (without BOS/EOS framing) match the caption
/// template grammar `a COLOR SHAPE (and a COLOR SHAPE)*`?
pub fn matches_caption_grammar(tokens: &[u32], vocab: &VocabSpec) -> bool {
    let words: Vec<&str> = tokens.iter().map(|&t| vocab.token(t)).collect();
    let mut i = 0;
    let mut first = true;
    while i < words.len() {
        if !first {
            if words[i] != "and" {
                return false;
            }
            i += 1;
        }
        if i + 3 > words.len()
            || words[i] != "a"
            || !COLOR_WORDS.contains(&words[i + 1])
            || !SHAPE_WORDS.contains(&words[i + 2])
        {
            return false;
        }
        i += 3;
        first = false;
    }
    !first
}
