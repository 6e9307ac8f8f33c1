//! Token selection policies for autoregressive decoding.

use alloc::vec::Vec;

use rand::Rng;

/// How the next token is chosen from a step distribution.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy")]
pub enum DecodePolicy {
    /// Argmax; ties resolve to the lowest token id.
    Greedy,
    /// Nucleus sampling over the smallest prefix with cumulative mass ≥ p.
    Nucleus { p: f64 },
}

/// Options for one decode run.
#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub policy: DecodePolicy,
    pub max_length: usize,
    /// Exclude EOS from selection and never stop on it (forced-length runs).
    pub ban_eos: bool,
    /// Per-frame visibility for the decoder's cross-attention; `None` means
    /// all frames visible.
    pub frame_mask: Option<Vec<bool>>,
}

impl GenerateOptions {
    pub fn greedy(max_length: usize) -> Self {
        GenerateOptions {
            policy: DecodePolicy::Greedy,
            max_length,
            ban_eos: false,
            frame_mask: None,
        }
    }

    pub fn nucleus(p: f64, max_length: usize) -> Self {
        GenerateOptions {
            policy: DecodePolicy::Nucleus { p },
            max_length,
            ban_eos: false,
            frame_mask: None,
        }
    }
}

/// Pick a token id from `probs` under the given policy.
pub(crate) fn select_token<R: Rng + ?Sized>(
    probs: &[f64],
    policy: DecodePolicy,
    ban_eos: bool,
    eos_id: u32,
    rng: &mut R,
) -> u32 {
    match policy {
        DecodePolicy::Greedy => {
            let mut best = usize::MAX;
            let mut best_p = f64::NEG_INFINITY;
            for (i, &p) in probs.iter().enumerate() {
                if ban_eos && i as u32 == eos_id {
                    continue;
                }
                if p > best_p {
                    best_p = p;
                    best = i;
                }
            }
            best as u32
        }
        DecodePolicy::Nucleus { p: threshold } => {
            let mut order: Vec<usize> = (0..probs.len())
                .filter(|&i| !(ban_eos && i as u32 == eos_id))
                .collect();
            // Probability descending, token id ascending on ties, so the
            // cut is fully deterministic.
            order.sort_by(|&a, &b| {
                probs[b]
                    .partial_cmp(&probs[a])
                    .unwrap()
                    .then_with(|| a.cmp(&b))
            });
            let mut kept = Vec::with_capacity(order.len());
            let mut mass = 0.0;
            for &i in &order {
                kept.push(i);
                mass += probs[i];
                if mass >= threshold {
                    break;
                }
            }
            let u: f64 = rng.gen::<f64>() * mass;
            let mut acc = 0.0;
            for &i in &kept {
                acc += probs[i];
                if u < acc {
                    return i as u32;
                }
            }
            *kept.last().expect("nucleus cut is never empty") as u32
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_breaks_ties_toward_low_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs = [0.25, 0.25, 0.25, 0.25];
        assert_eq!(
            select_token(&probs, DecodePolicy::Greedy, false, 3, &mut rng),
            0
        );
    }

    #[test]
    fn greedy_respects_eos_ban() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs = [0.1, 0.7, 0.2];
        assert_eq!(
            select_token(&probs, DecodePolicy::Greedy, true, 1, &mut rng),
            2
        );
    }

    #[test]
    fn nucleus_is_deterministic_given_seed() {
        let probs = [0.4, 0.3, 0.2, 0.1];
        let policy = DecodePolicy::Nucleus { p: 0.9 };
        let picks_a: Vec<u32> = (0..32)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i);
                select_token(&probs, policy, false, 3, &mut rng)
            })
            .collect();
        let picks_b: Vec<u32> = (0..32)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i);
                select_token(&probs, policy, false, 3, &mut rng)
            })
            .collect();
        assert_eq!(picks_a, picks_b);
    }

    #[test]
    fn nucleus_excludes_tail_outside_cut() {
        // With p = 0.5 only the top token (0.6) is in the nucleus.
        let probs = [0.6, 0.25, 0.15];
        let policy = DecodePolicy::Nucleus { p: 0.5 };
        for seed in 0..64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(select_token(&probs, policy, false, 2, &mut rng), 0);
        }
    }
}
