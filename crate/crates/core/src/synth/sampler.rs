use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `P(l) = n_l^alpha / sum_k n_k^alpha`. `alpha = 1` is proportional to the
/// data, `alpha = 0` uniform; values in between favour low-resource languages.
pub fn sampling_probabilities(counts: &[usize], alpha: f64) -> Result<Vec<f64>> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::input("balanced sampling needs at least one count, all >= 1"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::input(format!("sampling exponent {alpha} outside [0, 1]")));
    }
    let w: Vec<f64> = counts.iter().map(|&n| (n as f64).powf(alpha)).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Infinite stream of language indices drawn with [`sampling_probabilities`].
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    probs: Vec<f64>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(counts: &[usize], alpha: f64, seed: u64) -> Result<Self> {
        let probs = sampling_probabilities(counts, alpha)?;
        let dist = WeightedIndex::new(&probs).map_err(|e| Error::input(e.to_string()))?;
        Ok(BalancedSampler { probs, dist, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }
}

impl Iterator for BalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.dist.sample(&mut self.rng))
    }
}
