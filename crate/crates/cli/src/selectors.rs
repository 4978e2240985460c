//! Head selection rules for the 2-bit assignment.

use clap::ValueEnum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tqt_core::planner::head_stats_kv;
use tqt_core::{HeadInput, HeadPrecisionPlan, HeadStats};

use crate::error::Result;

const ENTROPY_BINS: usize = 256;

/// How heads are scored; the lowest scores are stored at 2 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    /// `gap * std` of channel ranges.
    Priority,
    /// Global value range only.
    Minmax,
    /// Spread of channel ranges only.
    Variation,
    /// Shannon entropy of the value histogram.
    Entropy,
    Random,
}

impl Selector {
    pub const ALL: [Selector; 5] =
        [Selector::Priority, Selector::Minmax, Selector::Variation, Selector::Entropy, Selector::Random];

    pub fn name(self) -> &'static str {
        match self {
            Selector::Priority => "priority",
            Selector::Minmax => "minmax",
            Selector::Variation => "variation",
            Selector::Entropy => "entropy",
            Selector::Random => "random",
        }
    }
}

pub fn all_stats(heads: &[HeadInput]) -> Result<Vec<HeadStats>> {
    Ok(heads.iter().enumerate().map(|(h, x)| head_stats_kv(h, &x.k, &x.v)).collect::<tqt_core::Result<_>>()?)
}

fn histogram_entropy(values: impl Iterator<Item = f32> + Clone) -> f32 {
    let (lo, hi) = values.clone().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if hi <= lo || hi.is_nan() {
        return 0.0;
    }
    let mut bins = [0usize; ENTROPY_BINS];
    let width = (hi - lo) / ENTROPY_BINS as f32;
    let mut total = 0usize;
    for v in values {
        let b = (((v - lo) / width) as usize).min(ENTROPY_BINS - 1);
        bins[b] += 1;
        total += 1;
    }
    bins.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum::<f64>() as f32
}

/// Per-head scores under `selector`. `seed` only matters for [`Selector::Random`].
pub fn scores(selector: Selector, heads: &[HeadInput], stats: &[HeadStats], seed: u64) -> Vec<f32> {
    match selector {
        Selector::Priority => stats.iter().map(|s| s.priority).collect(),
        Selector::Minmax => stats.iter().map(|s| s.gap).collect(),
        Selector::Variation => stats.iter().map(|s| s.std).collect(),
        Selector::Entropy => heads
            .iter()
            .map(|h| histogram_entropy(h.k.data().iter().chain(h.v.data()).copied()))
            .collect(),
        Selector::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            heads.iter().map(|_| rng.random::<f32>()).collect()
        }
    }
}

pub fn select(
    selector: Selector,
    heads: &[HeadInput],
    stats: &[HeadStats],
    n_h: usize,
    seed: u64,
) -> Result<HeadPrecisionPlan> {
    Ok(HeadPrecisionPlan::from_scores(&scores(selector, heads, stats, seed), n_h, 4)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tqt_core::MatrixF32;

    fn head(f: impl Fn(usize, usize) -> f32) -> HeadInput {
        let m = MatrixF32::from_fn(32, 4, &f);
        HeadInput::new(m.clone(), m.clone(), m)
    }

    #[test]
    fn entropy_of_constant_and_uniform() {
        assert_eq!(histogram_entropy([3.0f32; 10].into_iter()), 0.0);
        let vals: Vec<f32> = (0..ENTROPY_BINS).map(|i| i as f32 + 0.5).collect();
        assert!((histogram_entropy(vals.into_iter()) - (ENTROPY_BINS as f32).ln()).abs() < 1e-4);
    }

    #[test]
    fn selectors_pick_expected_heads() {
        let heads = vec![
            head(|r, c| (r * 4 + c) as f32 * 0.01),
            head(|r, c| if c == 0 { r as f32 * 3.0 } else { (r % 2) as f32 }),
            head(|r, _| (r % 2) as f32 * 0.5),
        ];
        let stats = all_stats(&heads).unwrap();
        assert_eq!(select(Selector::Minmax, &heads, &stats, 1, 0).unwrap().low_bit_heads(), vec![2]);
        assert_eq!(select(Selector::Priority, &heads, &stats, 1, 0).unwrap().low_bit_heads()[0], 0);
        assert_eq!(select(Selector::Entropy, &heads, &stats, 1, 0).unwrap().low_bit_heads(), vec![2]);
        let a = select(Selector::Random, &heads, &stats, 2, 9).unwrap();
        assert_eq!(a, select(Selector::Random, &heads, &stats, 2, 9).unwrap());
        assert_eq!(a.low_bit_heads().len(), 2);
    }
}
