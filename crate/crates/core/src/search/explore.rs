use std::collections::VecDeque;

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// Draws from N(μ, η²) truncated to [0, 1] by inverting the CDF on the
/// admissible interval. `η = 0` returns μ unchanged.
pub fn sample_action(mu: f64, eta: f64, rng: &mut impl Rng) -> f64 {
    if eta <= 0.0 {
        return mu;
    }
    let std = Normal::standard();
    let (alpha, beta) = ((0.0 - mu) / eta, (1.0 - mu) / eta);
    // Work in the lower tail for whichever side keeps the CDF values away
    // from 1, where they lose precision.
    let (lo, hi, flip) = if alpha > 0.0 {
        (std.cdf(-beta), std.cdf(-alpha), true)
    } else {
        (std.cdf(alpha), std.cdf(beta), false)
    };
    if hi - lo < 1e-300 {
        return mu.clamp(0.0, 1.0);
    }
    let u = lo + (hi - lo) * rng.random::<f64>();
    let z = std.inverse_cdf(u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
    let z = if flip { -z } else { z };
    (mu + eta * z).clamp(0.0, 1.0)
}

/// Exploration noise at `episode`: `init·decay^episode`. Multiplied out
/// step by step because `powi` may be evaluated differently when the
/// compiler folds it.
pub fn noise_at(init: f64, decay: f64, episode: usize) -> f64 {
    (0..episode).fold(init, |n, _| n * decay)
}

/// Standardizes rewards against the most recent `size` episode rewards.
#[derive(Debug, Clone)]
pub struct RewardNormalizer {
    window: VecDeque<f64>,
    size: usize,
}

const NORM_EPS: f64 = 1e-8;

impl RewardNormalizer {
    pub fn new(size: usize) -> Self {
        Self {
            window: VecDeque::new(),
            size: size.max(1),
        }
    }

    pub fn push(&mut self, r: f64) {
        if self.window.len() == self.size {
            self.window.pop_front();
        }
        self.window.push_back(r);
    }

    /// Mean and population standard deviation of the window.
    pub fn stats(&self) -> (f64, f64) {
        let n = self.window.len().max(1) as f64;
        let mean = self.window.iter().sum::<f64>() / n;
        let var = self.window.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    pub fn normalize(&self, r: f64) -> f64 {
        let (mean, std) = self.stats();
        (r - mean) / (std + NORM_EPS)
    }
}
