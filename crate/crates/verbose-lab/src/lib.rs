//! Measurement harness, file formats, and experiment drivers for
//! verbose-sample attacks.
//!
//! `verbose-core` owns the math; this crate owns everything that touches
//! the OS: wall clocks, energy meters, JSONL/CSV reports, checkpoints, the
//! dataset directory layout, worker pools, and the `verbose` CLI.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod formats;
pub mod measure;
pub mod meter;
pub mod metrics;
pub mod records;
pub mod stats;
pub mod workers;

/// SplitMix64 step, used for deriving independent seeds.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a per-(sample, stream) seed from a base seed. Deterministic and
/// independent of worker scheduling.
pub fn derive_seed(base: u64, id: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(base ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15)) ^ stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(42, 0, 0);
        let b = derive_seed(42, 0, 0);
        assert_eq!(a, b);
        let mut seen = std::collections::HashSet::new();
        for id in 0..100 {
            for stream in 0..4 {
                assert!(seen.insert(derive_seed(42, id, stream)));
            }
        }
    }
}
