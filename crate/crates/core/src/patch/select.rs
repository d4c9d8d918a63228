//! Training-block selection strategies.
//!
//! All strategies except `Random` work on the blocks sorted by increasing
//! variance. Ties are broken by a seeded shuffle, so a corpus of equal
//! variances yields a uniformly random subset under every strategy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BlockSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStrategy {
    Random,
    /// Equal draws from the low, medium and high variance thirds.
    VarianceBins,
    /// One draw per stratum, strata bounds `N (i / n)^gamma`, repeated until
    /// enough blocks are drawn.
    StratifiedGamma,
    /// Sorted index `round(N u^gamma)` for uniform `u`.
    Gamma,
}

impl SelectionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::Random => "random",
            SelectionStrategy::VarianceBins => "variance-bins",
            SelectionStrategy::StratifiedGamma => "stratified-gamma",
            SelectionStrategy::Gamma => "gamma",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            SelectionStrategy::Random,
            SelectionStrategy::VarianceBins,
            SelectionStrategy::StratifiedGamma,
            SelectionStrategy::Gamma,
        ]
        .into_iter()
        .find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSelectionConfig {
    pub strategy: SelectionStrategy,
    pub gamma: f64,
    pub count: usize,
    pub seed: u64,
}

impl Default for BlockSelectionConfig {
    fn default() -> Self {
        BlockSelectionConfig {
            strategy: SelectionStrategy::VarianceBins,
            gamma: 0.7,
            count: 3000,
            seed: 0,
        }
    }
}

pub fn block_variance(b: &[f64]) -> f64 {
    let n = b.len() as f64;
    let mean = b.iter().sum::<f64>() / n;
    b.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Indices into `blocks`, distinct, deterministic for a given seed.
pub fn select_training_blocks(blocks: &BlockSet, cfg: &BlockSelectionConfig) -> Result<Vec<usize>> {
    let n = blocks.count();
    if cfg.count == 0 {
        return Err(Error::Selection("requested zero blocks".into()));
    }
    if cfg.count > n {
        return Err(Error::Selection(format!(
            "requested {} blocks but only {} are available",
            cfg.count, n
        )));
    }
    let gamma_based = matches!(cfg.strategy, SelectionStrategy::StratifiedGamma | SelectionStrategy::Gamma);
    if gamma_based && !(cfg.gamma > 0.0 && cfg.gamma <= 1.0) {
        return Err(Error::Selection(format!("gamma {} is outside (0, 1]", cfg.gamma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.strategy == SelectionStrategy::Random {
        return Ok(rand::seq::index::sample(&mut rng, n, cfg.count).into_vec());
    }

    let variances: Vec<f64> = (0..n).map(|i| block_variance(blocks.block(i))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.sort_by(|&a, &b| variances[a].total_cmp(&variances[b]));

    let picked_sorted = match cfg.strategy {
        SelectionStrategy::Random => unreachable!(),
        SelectionStrategy::VarianceBins => variance_bins(n, cfg.count, &mut rng)?,
        SelectionStrategy::StratifiedGamma => stratified_gamma(n, cfg.count, cfg.gamma, &mut rng),
        SelectionStrategy::Gamma => gamma_draws(n, cfg.count, cfg.gamma, &mut rng),
    };
    Ok(picked_sorted.into_iter().map(|r| order[r]).collect())
}

/// Ranks drawn from three equal-size variance bins. A count that does not
/// split evenly gives its remainder to the higher bins.
fn variance_bins(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let bounds = [0, n / 3, 2 * n / 3, n];
    let mut out = Vec::with_capacity(count);
    for bin in 0..3 {
        let want = count / 3 + usize::from(2 - bin < count % 3);
        let (lo, hi) = (bounds[bin], bounds[bin + 1]);
        if want > hi - lo {
            return Err(Error::Selection(format!(
                "variance bin {} holds {} blocks, {} requested",
                bin,
                hi - lo,
                want
            )));
        }
        out.extend(rand::seq::index::sample(rng, hi - lo, want).into_iter().map(|i| lo + i));
    }
    Ok(out)
}

fn stratified_gamma(n: usize, count: usize, gamma: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let bound = |i: usize| ((n as f64) * (i as f64 / count as f64).powf(gamma)).floor() as usize;
    // each stratum holds its not-yet-drawn ranks
    let mut strata: Vec<Vec<usize>> = (0..count)
        .map(|i| {
            let lo = bound(i).min(n - 1);
            let hi = bound(i + 1).max(lo + 1).min(n);
            (lo..hi).collect()
        })
        .collect();
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let before = out.len();
        for stratum in strata.iter_mut() {
            stratum.retain(|&r| !taken[r]);
            if stratum.is_empty() {
                continue;
            }
            let r = stratum.swap_remove(rng.random_range(0..stratum.len()));
            taken[r] = true;
            out.push(r);
            if out.len() == count {
                break;
            }
        }
        if out.len() == before {
            // strata exhausted; cannot happen while count <= n, kept as a guard
            out.extend((0..n).filter(|&r| !taken[r]).take(count - out.len()));
        }
    }
    out
}

/// Draws without replacement; a collision is redrawn a few times and then
/// settled on the nearest free rank.
fn gamma_draws(n: usize, count: usize, gamma: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut r = 0;
        for _ in 0..16 {
            let u: f64 = rng.random();
            r = ((n as f64 * u.powf(gamma)).round() as usize).min(n - 1);
            if !taken[r] {
                break;
            }
        }
        if taken[r] {
            r = (1..n)
                .flat_map(|d| [r.checked_sub(d), Some(r + d)])
                .flatten()
                .find(|&c| c < n && !taken[c])
                .expect("count <= n leaves a free rank");
        }
        taken[r] = true;
        out.push(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    /// Block `i` has variance proportional to `i`.
    fn linear_variance_corpus(n: usize) -> BlockSet {
        let mut data = Vec::new();
        for i in 0..n {
            let a = (i as f64).sqrt();
            data.extend_from_slice(&[a, -a, a, -a]);
        }
        BlockSet {
            len: 4,
            data,
            positions: (0..n).map(|i| (i, 0, 0)).collect(),
        }
    }

    fn cfg(strategy: SelectionStrategy, gamma: f64, count: usize, seed: u64) -> BlockSelectionConfig {
        BlockSelectionConfig {
            strategy,
            gamma,
            count,
            seed,
        }
    }

    const ALL: [SelectionStrategy; 4] = [
        SelectionStrategy::Random,
        SelectionStrategy::VarianceBins,
        SelectionStrategy::StratifiedGamma,
        SelectionStrategy::Gamma,
    ];

    #[test]
    fn deterministic_and_distinct() {
        let corpus = linear_variance_corpus(900);
        for s in ALL {
            for count in [1, 299, 300, 900] {
                let c = cfg(s, 0.5, count, 4);
                let a = select_training_blocks(&corpus, &c).unwrap();
                assert_eq!(a, select_training_blocks(&corpus, &c).unwrap());
                assert_eq!(a.len(), count);
                assert_eq!(a.iter().collect::<HashSet<_>>().len(), count, "{s:?}");
                assert!(a.iter().all(|&i| i < 900));
            }
        }
    }

    #[test]
    fn variance_bins_draw_equally() {
        let corpus = linear_variance_corpus(900);
        let picked = select_training_blocks(&corpus, &cfg(SelectionStrategy::VarianceBins, 1.0, 300, 1)).unwrap();
        // block i sits in bin i / 300
        let mut per_bin = [0; 3];
        for i in picked {
            per_bin[i / 300] += 1;
        }
        assert_eq!(per_bin, [100, 100, 100]);
    }

    #[test]
    fn equal_variance_gives_uniform_subsets() {
        let corpus = BlockSet {
            len: 2,
            data: vec![1.0; 60],
            positions: vec![(0, 0, 0); 30],
        };
        for s in ALL {
            // how often each block is picked over many seeds
            let mut hits = [0usize; 30];
            let trials = 3000;
            for seed in 0..trials {
                for i in select_training_blocks(&corpus, &cfg(s, 0.3, 6, seed)).unwrap() {
                    hits[i] += 1;
                }
            }
            let expected = trials as f64 * 6.0 / 30.0;
            for h in hits {
                assert!((h as f64 - expected).abs() < 0.15 * expected, "{s:?}: {hits:?}");
            }
        }
    }

    #[test]
    fn smaller_gamma_prefers_high_variance() {
        let corpus = linear_variance_corpus(1000);
        for s in [SelectionStrategy::Gamma, SelectionStrategy::StratifiedGamma] {
            let mean_var = |gamma: f64| {
                let mut total = 0.0;
                for seed in 0..20 {
                    let picked = select_training_blocks(&corpus, &cfg(s, gamma, 100, seed)).unwrap();
                    total += picked.iter().map(|&i| block_variance(corpus.block(i))).sum::<f64>() / 100.0;
                }
                total / 20.0
            };
            assert!(mean_var(0.3) > mean_var(0.7), "{s:?}");
        }
    }

    #[test]
    fn infeasible_requests_rejected() {
        let corpus = linear_variance_corpus(10);
        for s in ALL {
            let r = select_training_blocks(&corpus, &cfg(s, 0.5, 11, 0));
            assert!(matches!(r, Err(Error::Selection(_))));
            let r = select_training_blocks(&corpus, &cfg(s, 0.5, 0, 0));
            assert!(matches!(r, Err(Error::Selection(_))));
        }
        let r = select_training_blocks(&corpus, &cfg(SelectionStrategy::Gamma, 0.0, 3, 0));
        assert!(matches!(r, Err(Error::Selection(_))));
    }
}
