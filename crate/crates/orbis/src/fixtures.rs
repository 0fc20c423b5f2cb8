//! Seeded synthetic fixtures used by the CLI and experiments.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::TokenMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Gaussian cluster mixture: `n_clusters` centers with per-channel scale
/// `spread`, tokens assigned round-robin, per-element noise `sigma`.
/// `sigma = 0` produces exact duplicate groups.
pub fn gaussian_clusters(
    n_tokens: usize,
    n_channels: usize,
    n_clusters: usize,
    spread: f64,
    sigma: f64,
    seed: u64,
) -> Result<TokenMatrix> {
    if n_clusters == 0 {
        return Err(Error::InvalidArgument("n_clusters must be >= 1".into()));
    }
    if spread <= 0.0 || spread.is_nan() || sigma < 0.0 {
        return Err(Error::InvalidArgument(
            "spread must be positive and sigma non-negative".into(),
        ));
    }
    let mut r = rng::chacha(seed);
    let mut centers = vec![0.0f64; n_clusters * n_channels];
    for v in centers.iter_mut() {
        let g: f64 = StandardNormal.sample(&mut r);
        *v = g * spread;
    }
    let mut data = Vec::with_capacity(n_tokens * n_channels);
    for t in 0..n_tokens {
        let c = t % n_clusters;
        for ch in 0..n_channels {
            let g: f64 = StandardNormal.sample(&mut r);
            data.push(centers[c * n_channels + ch] + sigma * g);
        }
    }
    TokenMatrix::new(n_tokens, n_channels, data)
}

/// Uniform random matrix in `[-1, 1)`.
pub fn random_uniform(n_tokens: usize, n_channels: usize, seed: u64) -> Result<TokenMatrix> {
    let mut r = rng::chacha(seed);
    let data: Vec<f64> = (0..n_tokens * n_channels)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    TokenMatrix::new(n_tokens, n_channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clusters_deterministic_and_duplicated_at_zero_sigma() {
        let a = gaussian_clusters(12, 4, 3, 2.0, 0.0, 9).unwrap();
        let b = gaussian_clusters(12, 4, 3, 2.0, 0.0, 9).unwrap();
        assert_eq!(a, b);
        // Tokens 0, 3, 6, 9 share cluster 0 and are exact duplicates.
        assert_eq!(a.row(0), a.row(3));
        assert_eq!(a.row(0), a.row(9));
        assert_ne!(a.row(0), a.row(1));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(gaussian_clusters(8, 2, 0, 1.0, 0.1, 0).is_err());
        assert!(gaussian_clusters(8, 2, 2, -1.0, 0.1, 0).is_err());
        assert!(gaussian_clusters(8, 2, 2, 1.0, -0.1, 0).is_err());
    }
}
