//! Teacher-forced trainer for the toy captioner.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{VictimConfig, VictimModel};
use super::sampling::GenerateOptions;
use super::shape_world::ShapeSample;
use super::VictimError;
use crate::numerics::Matrix;

/// Training hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Uniform label smoothing mass.
    pub label_smoothing: f64,
    /// Samples held out from the end of the dataset for evaluation.
    pub held_out: usize,
    /// Cosine-decay floor: the last epoch runs at `learning_rate × this`.
    pub final_lr_fraction: f64,
    /// Seed for epoch shuffling (independent of the model init seed).
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            label_smoothing: 0.05,
            held_out: 64,
            final_lr_fraction: 0.1,
            seed: 7,
        }
    }
}

/// What training measured.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Greedy caption token accuracy on the held-out split.
    pub held_out_accuracy: f64,
    /// Mean greedy generation length on held-out samples.
    pub mean_greedy_length: f64,
}

#[derive(Debug, Clone)]
pub enum TrainError {
    /// Loss became non-finite.
    Diverged { epoch: usize, seed: u64 },
    EmptyDataset,
    Victim(VictimError),
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::Diverged { epoch, seed } => {
                write!(f, "training diverged at epoch {epoch} (seed {seed})")
            }
            TrainError::EmptyDataset => write!(f, "no training samples"),
            TrainError::Victim(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrainError {}

impl From<VictimError> for TrainError {
    fn from(e: VictimError) -> Self {
        TrainError::Victim(e)
    }
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: usize,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[(usize, usize)], lr: f64) -> Self {
        Adam {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) {
        self.t += 1;
        let bc1 = 1.0 - crate::math::powf(Self::BETA1, self.t as f64);
        let bc2 = 1.0 - crate::math::powf(Self::BETA2, self.t as f64);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data().len() {
                let gi = g.data()[i];
                let mi = Self::BETA1 * m.data()[i] + (1.0 - Self::BETA1) * gi;
                let vi = Self::BETA2 * v.data()[i] + (1.0 - Self::BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= self.lr * mhat / (crate::math::sqrt(vhat) + Self::EPS);
            }
        }
    }
}

/// Train a freshly initialized model on a shape-world dataset.
///
/// The last `held_out` samples are excluded from training and used to
/// report greedy caption accuracy and mean generation length. `epochs = 0`
/// returns the initialized model untouched.
pub fn train_toy(
    victim_config: &VictimConfig,
    train_config: &TrainConfig,
    dataset: &[ShapeSample],
) -> Result<(VictimModel, TrainReport), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let held = train_config.held_out.min(dataset.len().saturating_sub(1));
    let (train_set, eval_set) = dataset.split_at(dataset.len() - held);

    let mut model = VictimModel::new(victim_config.clone())?;
    let shapes: Vec<(usize, usize)> = model
        .params
        .visit()
        .iter()
        .map(|(_, m)| (m.rows(), m.cols()))
        .collect();
    let mut adam = Adam::new(&shapes, train_config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut epoch_losses = Vec::with_capacity(train_config.epochs);

    for epoch in 0..train_config.epochs {
        // Cosine decay from the base rate to its configured floor.
        let progress = if train_config.epochs > 1 {
            epoch as f64 / (train_config.epochs - 1) as f64
        } else {
            0.0
        };
        let floor = train_config.final_lr_fraction;
        adam.lr = train_config.learning_rate
            * (floor + (1.0 - floor) * 0.5 * (1.0 + crate::math::cos(core::f64::consts::PI * progress)));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        // Fisher-Yates with the epoch rng stream.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(train_config.batch_size) {
            let mut acc: Vec<Matrix> = shapes
                .iter()
                .map(|&(r, c)| Matrix::zeros(r, c))
                .collect();
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let sample = &train_set[idx];
                let mut target: Vec<u32> = sample.caption.clone();
                target.push(victim_config.vocab.eos_id());
                let (mut tape, handles, nodes) =
                    model.forward_tape_trainable(&sample.pixels, &[], &target)?;
                let v = handles.vocab_size;
                let n = handles.n_steps;
                // Cross-entropy with label smoothing over the target rows.
                let idx_target: Vec<usize> = target
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| i * v + t as usize)
                    .collect();
                let picked = tape.gather(handles.probs, idx_target, n, 1);
                let ln_picked = tape.ln(picked);
                let sum_target = tape.sum_all(ln_picked);
                let ls = train_config.label_smoothing;
                let loss = if ls > 0.0 {
                    let ln_all = tape.ln(handles.probs);
                    let sum_all = tape.sum_all(ln_all);
                    tape.weighted_sum(&[
                        (sum_target, -(1.0 - ls) / n as f64),
                        (sum_all, -ls / (n as f64 * v as f64)),
                    ])
                } else {
                    tape.scale(sum_target, -1.0 / n as f64)
                };
                let loss_value = tape.scalar(loss);
                if !loss_value.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        seed: train_config.seed,
                    });
                }
                batch_loss += loss_value;
                let grads = tape.backward(loss);
                for (slot, &node) in acc.iter_mut().zip(&nodes.ordered()) {
                    if let Some(g) = grads.get(node) {
                        for (s, d) in slot.data_mut().iter_mut().zip(g.data()) {
                            *s += d;
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for m in &mut acc {
                for x in m.data_mut() {
                    *x *= inv;
                }
            }
            adam.step(model.params.visit_mut(), &acc);
            epoch_loss += batch_loss;
            seen += chunk.len();
        }
        epoch_losses.push(epoch_loss / seen.max(1) as f64);
    }

    let (held_out_accuracy, mean_greedy_length) = evaluate(&model, eval_set)?;
    Ok((
        model,
        TrainReport {
            epoch_losses,
            held_out_accuracy,
            mean_greedy_length,
        },
    ))
}

/// Greedy caption accuracy against templates: position-wise token matches
/// (including the terminal EOS) over the longer of the two sequences.
pub fn caption_token_accuracy(generated: &[u32], template: &[u32]) -> f64 {
    let longest = generated.len().max(template.len());
    if longest == 0 {
        return 1.0;
    }
    let matches = generated
        .iter()
        .zip(template)
        .filter(|(a, b)| a == b)
        .count();
    matches as f64 / longest as f64
}

fn evaluate(model: &VictimModel, eval_set: &[ShapeSample]) -> Result<(f64, f64), TrainError> {
    if eval_set.is_empty() {
        return Ok((0.0, 0.0));
    }
    let eos = model.vocab().eos_id();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut acc_sum = 0.0;
    let mut len_sum = 0.0;
    for sample in eval_set {
        let trace = model.generate(
            &sample.pixels,
            &[],
            &GenerateOptions::greedy(sample.caption.len() * 2 + 8),
            &mut rng,
        )?;
        let mut template = sample.caption.clone();
        template.push(eos);
        acc_sum += caption_token_accuracy(&trace.tokens, &template);
        len_sum += trace.len() as f64;
    }
    Ok((
        acc_sum / eval_set.len() as f64,
        len_sum / eval_set.len() as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::victim::{make_shape_world, ShapeWorldConfig};

    fn tiny_victim_config(seed: u64) -> VictimConfig {
        VictimConfig {
            image_size: 16,
            ..VictimConfig::image_default(seed)
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let data = make_shape_world(&ShapeWorldConfig {
            image_size: 16,
            ..ShapeWorldConfig::images(8, 1)
        });
        let cfg = tiny_victim_config(3);
        let tc = TrainConfig {
            epochs: 0,
            held_out: 2,
            ..TrainConfig::default()
        };
        let (trained, report) = train_toy(&cfg, &tc, &data).unwrap();
        let fresh = VictimModel::new(cfg).unwrap();
        for ((_, a), (_, b)) in trained.params.visit().iter().zip(fresh.params.visit()) {
            assert_eq!(a.data(), b.data());
        }
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let data = make_shape_world(&ShapeWorldConfig {
            image_size: 16,
            ..ShapeWorldConfig::images(12, 2)
        });
        let cfg = tiny_victim_config(5);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            held_out: 2,
            ..TrainConfig::default()
        };
        let (a, _) = train_toy(&cfg, &tc, &data).unwrap();
        let (b, _) = train_toy(&cfg, &tc, &data).unwrap();
        for ((_, ma), (_, mb)) in a.params.visit().iter().zip(b.params.visit()) {
            assert_eq!(ma.data(), mb.data());
        }
    }

    #[test]
    fn loss_decreases_on_a_small_corpus() {
        let data = make_shape_world(&ShapeWorldConfig {
            image_size: 16,
            ..ShapeWorldConfig::images(24, 3)
        });
        let cfg = tiny_victim_config(1);
        let tc = TrainConfig {
            epochs: 4,
            batch_size: 8,
            held_out: 4,
            ..TrainConfig::default()
        };
        let (_, report) = train_toy(&cfg, &tc, &data).unwrap();
        let first = report.epoch_losses.first().copied().unwrap();
        let last = report.epoch_losses.last().copied().unwrap();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn accuracy_metric_behaves() {
        assert_eq!(caption_token_accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(caption_token_accuracy(&[1, 2], &[1, 2, 3]), 2.0 / 3.0);
        assert_eq!(caption_token_accuracy(&[], &[]), 1.0);
        assert_eq!(caption_token_accuracy(&[9, 9, 9], &[1, 2, 3]), 0.0);
    }
}
