//! Probability distributions over the vocabulary.

use crate::error::{Error, Result};

/// Validation tolerance for exact/tabular sources.
pub const EXACT_TOL: f64 = 1e-9;
/// Validation tolerance for neural softmax outputs.
pub const SOFTMAX_TOL: f64 = 1e-6;

/// A probability vector indexed by vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validate an already-normalized probability vector.
    pub fn from_probs(probs: Vec<f64>, tol: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty vector".into()));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!("bad entry {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > tol {
            return Err(Error::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalize non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidDistribution("empty vector".into()));
        }
        let mut sum = 0.0;
        for &w in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidDistribution(format!("negative weight {w}")));
            }
            sum += w;
        }
        if sum <= 0.0 {
            return Err(Error::InvalidDistribution("all-zero weights".into()));
        }
        Ok(Self { probs: weights.iter().map(|w| w / sum).collect() })
    }

    /// Uniform distribution over `support`, zero elsewhere, sized `len`.
    pub fn uniform_over(len: usize, support: impl Iterator<Item = usize>) -> Result<Self> {
        let mut w = vec![0.0; len];
        for i in support {
            w[i] = 1.0;
        }
        Self::from_weights(&w)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, id: usize) -> f64 {
        self.probs[id]
    }

    /// Id of maximal probability; ties broken by lowest id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Relabel outcomes through a bijection on token ids: out[perm[i]] = in[i].
    pub fn pushforward(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.probs.len() {
            return Err(Error::VocabularyMismatch(perm.len(), self.probs.len()));
        }
        let mut out = vec![0.0; self.probs.len()];
        for (i, &p) in self.probs.iter().enumerate() {
            out[perm[i]] += p;
        }
        Ok(Self { probs: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_weights() {
        let d = Distribution::from_weights(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(d.probs(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn single_mass() {
        let d = Distribution::from_weights(&[2.0, 0.0]).unwrap();
        assert_eq!(d.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn forced_normalization() {
        let d = Distribution::from_weights(&[3.0, 1.0]).unwrap();
        assert_eq!(d.probs(), &[0.75, 0.25]);
    }

    #[test]
    fn rejects_all_zero_and_negative() {
        assert!(Distribution::from_weights(&[0.0, 0.0]).is_err());
        assert!(Distribution::from_weights(&[1.0, -0.5]).is_err());
    }

    #[test]
    fn argmax_cases() {
        assert_eq!(Distribution::from_probs(vec![0.1, 0.7, 0.2], EXACT_TOL).unwrap().argmax(), 1);
        assert_eq!(Distribution::from_probs(vec![0.5, 0.5], EXACT_TOL).unwrap().argmax(), 0);
        assert_eq!(Distribution::from_probs(vec![0.0, 0.0, 1.0], EXACT_TOL).unwrap().argmax(), 2);
    }

    #[test]
    fn pushforward_relabels() {
        let d = Distribution::from_probs(vec![0.2, 0.3, 0.5], EXACT_TOL).unwrap();
        let pushed = d.pushforward(&[2, 0, 1]).unwrap();
        assert_eq!(pushed.probs(), &[0.3, 0.5, 0.2]);
    }

    proptest::proptest! {
        #[test]
        fn from_weights_always_normalizes(
            weights in proptest::collection::vec(1e-6f64..1e6, 1..16)
        ) {
            let d = Distribution::from_weights(&weights).unwrap();
            let total: f64 = d.probs().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-9);
            proptest::prop_assert!(d.probs().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn pushforward_is_mass_preserving_bijection(
            weights in proptest::collection::vec(1e-6f64..1e6, 2..12),
            seed in 0u64..1000
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let d = Distribution::from_weights(&weights).unwrap();
            let mut perm: Vec<usize> = (0..weights.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let pushed = d.pushforward(&perm).unwrap();
            for (i, &img) in perm.iter().enumerate() {
                proptest::prop_assert_eq!(pushed.prob(img), d.prob(i));
            }
        }
    }
}
