//! Network impairment between the data sources and the balancer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-packet delay, in packet slots, before clamping to the reorder window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayDist {
    /// Uniform over `0..=window`.
    #[default]
    Uniform,
    /// Exponential with the given mean.
    Exponential { mean: f64 },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Impairment {
    /// No packet ends up more than this many positions from where it was sent.
    pub reorder_window: usize,
    pub delay: DelayDist,
    /// Probability that a packet is dropped before reaching the balancer.
    pub loss_rate: f64,
}

impl Impairment {
    pub fn none() -> Self {
        Impairment::default()
    }
}

/// Delays and drops packets.
///
/// Each packet gets a sort key of its index plus a delay clamped to
/// `[0, reorder_window]`; a stable sort by key then yields the arrival
/// order. A packet can only be overtaken by the `reorder_window` packets
/// sent right after it and can only overtake the `reorder_window` packets
/// sent right before it, so its displacement is at most the window.
pub fn impair<T>(stream: Vec<T>, imp: &Impairment, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = imp.reorder_window;
    let mut keyed: Vec<(usize, T)> = Vec::with_capacity(stream.len());
    for (i, item) in stream.into_iter().enumerate() {
        if imp.loss_rate > 0.0 && rng.gen_bool(imp.loss_rate.min(1.0)) {
            continue;
        }
        let delay = match imp.delay {
            _ if w == 0 => 0,
            DelayDist::Uniform => rng.gen_range(0..=w),
            DelayDist::Exponential { mean } => {
                let u: f64 = rng.gen();
                let d = -mean.max(0.0) * (1.0 - u).ln();
                (d as usize).min(w)
            }
            DelayDist::None => 0,
        };
        keyed.push((i + delay, item));
    }
    keyed.sort_by_key(|(k, _)| *k);
    keyed.into_iter().map(|(_, t)| t).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window(w: usize) -> Impairment {
        Impairment {
            reorder_window: w,
            ..Default::default()
        }
    }

    #[test]
    fn zero_window_is_identity() {
        let v: Vec<usize> = (0..1000).collect();
        assert_eq!(impair(v.clone(), &window(0), 1), v);
    }

    #[test]
    fn deterministic_per_seed() {
        let v: Vec<usize> = (0..5000).collect();
        let a = impair(v.clone(), &window(100), 9);
        assert_eq!(a, impair(v.clone(), &window(100), 9));
        assert_ne!(a, impair(v.clone(), &window(100), 10));
        assert_ne!(a, v);
    }

    #[test]
    fn loss_drops_roughly_the_rate() {
        let imp = Impairment {
            loss_rate: 0.1,
            ..window(10)
        };
        let out = impair((0..100_000).collect::<Vec<usize>>(), &imp, 3);
        let lost = 100_000 - out.len();
        assert!((9_000..11_000).contains(&lost), "{lost}");
    }

    proptest! {
        #[test]
        fn bounded_displacement_permutation(
            n in 0usize..3000,
            w in 0usize..500,
            seed: u64,
            exp in any::<bool>(),
        ) {
            let imp = Impairment {
                reorder_window: w,
                delay: if exp { DelayDist::Exponential { mean: w as f64 / 3.0 } } else { DelayDist::Uniform },
                loss_rate: 0.0,
            };
            let out = impair((0..n).collect::<Vec<_>>(), &imp, seed);
            let mut sorted = out.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            for (pos, orig) in out.iter().enumerate() {
                prop_assert!(pos.abs_diff(*orig) <= w, "{} moved to {}", orig, pos);
            }
        }
    }
}
