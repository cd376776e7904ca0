//! Abstract wireless medium: contention shares, hidden-node loss, and
//! stochastic per-packet service.
//!
//! This is deliberately not a MAC model. Per epoch, a backlogged link's
//! airtime share is a fair split among its backlogged conflict neighbours;
//! a link facing a backlogged hidden-node neighbour additionally loses the
//! configured fraction of its frames over the air. Unmanaged mode layers a
//! slowly resampled lognormal factor on top, which is where the mode's
//! characteristic throughput variability comes from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal};

/// Static conflict structure over dense client indices.
#[derive(Debug, Clone)]
pub struct ConflictMap {
    n: usize,
    conflict: Vec<bool>,
    hidden: Vec<bool>,
}

impl ConflictMap {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            conflict: vec![false; n * n],
            hidden: vec![false; n * n],
        }
    }

    /// Adds an undirected conflict; `a_suffers` / `b_suffers` mark which
    /// endpoint loses frames while the other is backlogged (hidden node).
    pub fn add_conflict_directed(&mut self, a: usize, b: usize, a_suffers: bool, b_suffers: bool) {
        if a == b {
            return;
        }
        self.conflict[a * self.n + b] = true;
        self.conflict[b * self.n + a] = true;
        if a_suffers {
            self.hidden[a * self.n + b] = true;
        }
        if b_suffers {
            self.hidden[b * self.n + a] = true;
        }
    }

    pub fn add_conflict(&mut self, a: usize, b: usize, hidden: bool) {
        self.add_conflict_directed(a, b, hidden, hidden);
    }

    pub fn conflicts(&self, a: usize, b: usize) -> bool {
        self.conflict[a * self.n + b]
    }

    pub fn hidden_pair(&self, a: usize, b: usize) -> bool {
        self.hidden[a * self.n + b]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Per-link outcome of one contention epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkShare {
    /// Fraction of the link's nominal rate available for transmissions.
    pub airtime: f64,
    /// Probability that a serviced frame is lost at the receiver.
    pub loss: f64,
}

impl LinkShare {
    /// Goodput fraction: airtime that results in delivered frames.
    pub fn success(&self) -> f64 {
        self.airtime * (1.0 - self.loss)
    }
}

/// Computes each backlogged link's share for one epoch. `noise` is the
/// per-link multiplicative factor (all ones outside unmanaged mode).
pub fn contention_shares(
    map: &ConflictMap,
    backlogged: &[bool],
    hidden_penalty: &[f64],
    noise: &[f64],
) -> Vec<LinkShare> {
    let n = map.len();
    debug_assert_eq!(backlogged.len(), n);
    let mut out = vec![LinkShare {
        airtime: 0.0,
        loss: 0.0,
    }; n];
    for j in 0..n {
        if !backlogged[j] {
            continue;
        }
        let rivals = (0..n)
            .filter(|&i| i != j && backlogged[i] && map.conflicts(j, i))
            .count();
        let hidden_active = (0..n).any(|i| i != j && backlogged[i] && map.hidden_pair(j, i));
        let airtime = noise[j].min(1.0) / (1 + rivals) as f64;
        let loss = if hidden_active {
            hidden_penalty[j].clamp(0.0, 1.0)
        } else {
            0.0
        };
        out[j] = LinkShare { airtime, loss };
    }
    out
}

/// The success share per link, as seen by an observer of delivered frames.
/// This is the epoch model in one call: fair share among backlogged
/// conflicting neighbours, times (1 - hidden penalty) when a hidden
/// neighbour is backlogged, times noise.
pub fn unmanaged_contention(
    map: &ConflictMap,
    backlogged: &[bool],
    hidden_penalty: &[f64],
    noise: &[f64],
) -> Vec<f64> {
    contention_shares(map, backlogged, hidden_penalty, noise)
        .into_iter()
        .map(|s| s.success())
        .collect()
}

/// Per-packet service time sampler: gamma-distributed around the nominal
/// time with the configured coefficient of variation.
#[derive(Debug, Clone)]
pub struct ServiceJitter {
    cov: f64,
}

impl ServiceJitter {
    pub fn new(cov: f64) -> Self {
        Self { cov: cov.max(0.0) }
    }

    /// Multiplier with mean 1 and the configured CoV.
    pub fn factor(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.cov < 1e-9 {
            return 1.0;
        }
        let shape = 1.0 / (self.cov * self.cov);
        let gamma = Gamma::new(shape, 1.0 / shape).expect("valid gamma");
        gamma.sample(rng).max(1e-3)
    }
}

/// Unmanaged-mode noise factors: mean-one lognormal, resampled slowly so
/// per-second throughput actually wanders.
pub fn sample_noise(sigma: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0; n];
    }
    let dist = LogNormal::new(-sigma * sigma / 2.0, sigma).expect("valid lognormal");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Bernoulli frame-loss draw.
pub fn frame_lost(loss: f64, rng: &mut ChaCha8Rng) -> bool {
    loss > 0.0 && rng.gen::<f64>() < loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::rng::stream;

    #[test]
    fn non_conflicting_links_get_full_share() {
        let map = ConflictMap::new(2);
        let shares = unmanaged_contention(&map, &[true, true], &[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(shares, vec![1.0, 1.0]);
    }

    #[test]
    fn hidden_neighbour_scales_the_contention_share() {
        let mut map = ConflictMap::new(2);
        map.add_conflict(0, 1, true);
        let shares =
            unmanaged_contention(&map, &[true, true], &[0.9, 0.0], &[1.0, 1.0]);
        // Fair share 1/2, then 90% loss: ~10% of the contention share.
        assert!((shares[0] - 0.05).abs() < 1e-12);
        assert!((shares[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn idle_links_get_nothing_and_free_the_rest() {
        let mut map = ConflictMap::new(3);
        map.add_conflict(0, 1, false);
        map.add_conflict(0, 2, false);
        let shares = unmanaged_contention(
            &map,
            &[true, false, true],
            &[0.0, 0.0, 0.0],
            &[1.0, 1.0, 1.0],
        );
        assert_eq!(shares[1], 0.0);
        assert!((shares[0] - 0.5).abs() < 1e-12);
        assert!((shares[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hidden_penalty_only_applies_while_neighbour_backlogged() {
        let mut map = ConflictMap::new(2);
        map.add_conflict(0, 1, true);
        let quiet = unmanaged_contention(&map, &[true, false], &[0.9, 0.0], &[1.0, 1.0]);
        assert_eq!(quiet[0], 1.0);
    }

    #[test]
    fn jitter_factor_has_requested_spread() {
        let jitter = ServiceJitter::new(0.1);
        let mut rng = stream(1, "test-jitter", 0);
        let samples: Vec<f64> = (0..20_000).map(|_| jitter.factor(&mut rng)).collect();
        let mean: f64 = samples.iter().sum::<f64>() / samples.len() as f64;
        let var: f64 =
            samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / samples.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() / mean - 0.1).abs() < 0.01, "cov {}", var.sqrt());
    }

    #[test]
    fn noise_is_mean_one_and_seeded() {
        let mut rng = stream(5, "noise", 0);
        let a = sample_noise(0.3, 4, &mut rng);
        let mut rng = stream(5, "noise", 0);
        let b = sample_noise(0.3, 4, &mut rng);
        assert_eq!(a, b);
        let mut rng = stream(5, "noise", 1);
        let big: Vec<f64> = sample_noise(0.3, 50_000, &mut rng);
        let mean: f64 = big.iter().sum::<f64>() / big.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }
}
