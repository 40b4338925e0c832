//! Timestep sampling: logit-normal warmup, exact-t=0 batch mixing, and
//! loss-aware binned sampling driven by per-bin EMA velocity losses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const DEFAULT_BINS: usize = 20;
pub const DEFAULT_MU: f64 = -1.0;
pub const DEFAULT_SIGMA: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_EPS_MIX: f64 = 0.5;
pub const DEFAULT_T0_FRACTION: f64 = 0.5;
pub const DEFAULT_BIN_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerPhase {
    /// Logit-normal draws only; bin statistics are being collected.
    Warmup,
    /// Bins drawn proportionally to EMA losses (with a uniform floor).
    LossAware,
}

/// State of the loss-aware timestep sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerState {
    pub bin_losses: Vec<f64>,
    pub decay: f64,
    pub phase: SamplerPhase,
    pub mu: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_mix: f64,
    pub t0_fraction: f64,
}

impl Default for SamplerState {
    fn default() -> Self {
        SamplerState {
            bin_losses: vec![0.0; DEFAULT_BINS],
            decay: DEFAULT_BIN_DECAY,
            phase: SamplerPhase::Warmup,
            mu: DEFAULT_MU,
            sigma: DEFAULT_SIGMA,
            alpha: DEFAULT_ALPHA,
            eps_mix: DEFAULT_EPS_MIX,
            t0_fraction: DEFAULT_T0_FRACTION,
        }
    }
}

impl SamplerState {
    pub fn bins(&self) -> usize {
        self.bin_losses.len()
    }

    /// Bin index of a timestep; `t = 0` lands in bin 0.
    pub fn bin_of(&self, t: f64) -> usize {
        let b = (t * self.bins() as f64).floor() as usize;
        b.min(self.bins() - 1)
    }

    /// Number of exact-zero entries a batch of `batch_size` receives.
    pub fn t0_count(&self, batch_size: usize) -> usize {
        (self.t0_fraction * batch_size as f64).ceil() as usize
    }
}

/// Bin probabilities: `p_b = (1 - eps) * l_b^alpha / Z + eps / B`; all-zero
/// losses degrade to uniform.
pub fn bin_probabilities(losses: &[f64], alpha: f64, eps_mix: f64) -> Result<Vec<f64>> {
    if losses.iter().any(|&l| l < 0.0) {
        return Err(CoreError::invalid("bin_probabilities", "negative bin loss"));
    }
    let b = losses.len();
    let powered: Vec<f64> = losses.iter().map(|&l| l.powf(alpha)).collect();
    let z: f64 = powered.iter().sum();
    let uniform = 1.0 / b as f64;
    if z == 0.0 {
        return Ok(vec![uniform; b]);
    }
    Ok(powered
        .iter()
        .map(|&p| (1.0 - eps_mix) * p / z + eps_mix * uniform)
        .collect())
}

/// Draws a batch of timesteps. The first `ceil(t0_fraction * batch)` entries
/// are exactly 0; the rest follow the phase distribution.
pub fn sample_t(state: &SamplerState, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(CoreError::invalid("sample_t", "batch_size must be >= 1"));
    }
    let zeros = state.t0_count(batch_size);
    let mut t = vec![0.0f64; batch_size];
    match state.phase {
        SamplerPhase::Warmup => {
            let normal = Normal::new(state.mu, state.sigma)
                .map_err(|e| CoreError::invalid("sample_t", e.to_string()))?;
            for slot in t.iter_mut().skip(zeros) {
                let u: f64 = normal.sample(rng);
                *slot = 1.0 / (1.0 + (-u).exp());
            }
        }
        SamplerPhase::LossAware => {
            let probs = bin_probabilities(&state.bin_losses, state.alpha, state.eps_mix)?;
            let b = probs.len() as f64;
            for slot in t.iter_mut().skip(zeros) {
                let r: f64 = rng.gen();
                let mut acc = 0.0;
                let mut bin = probs.len() - 1;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p;
                    if r < acc {
                        bin = i;
                        break;
                    }
                }
                let u: f64 = rng.gen();
                *slot = (bin as f64 + u) / b;
            }
        }
    }
    Ok(t)
}

/// Folds a batch of per-sample velocity losses into the per-bin EMA:
/// `l_b <- d * l_b + (1 - d) * mean(batch losses landing in b)` for touched
/// bins; untouched bins are left unchanged. `t = 0` samples land in bin 0.
pub fn update_bins(state: &mut SamplerState, t: &[f64], losses: &[f64]) -> Result<()> {
    if t.len() != losses.len() {
        return Err(CoreError::invalid("update_bins", "t/loss length mismatch"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(CoreError::invalid("update_bins", "non-finite loss"));
    }
    let b = state.bins();
    let mut sums = vec![0.0f64; b];
    let mut counts = vec![0usize; b];
    for (&tv, &lv) in t.iter().zip(losses) {
        let bin = state.bin_of(tv);
        sums[bin] += lv;
        counts[bin] += 1;
    }
    let d = state.decay;
    for bin in 0..b {
        if counts[bin] > 0 {
            let mean = sums[bin] / counts[bin] as f64;
            state.bin_losses[bin] = d * state.bin_losses[bin] + (1.0 - d) * mean;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Frozen 1e7-draw Monte-Carlo estimate of E[sigmoid(N(-1, 1))],
    /// computed independently before this module was written
    /// (quadrature cross-check: 0.3032653).
    pub const LOGIT_NORMAL_MEAN_ORACLE: f64 = 0.3032098;

    #[test]
    fn t0_fraction_one_gives_all_zeros() {
        let state = SamplerState { t0_fraction: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_t(&state, 7, &mut rng).unwrap();
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_zero_count_is_ceil_half() {
        let state = SamplerState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &batch in &[1usize, 2, 5, 32, 33] {
            let t = sample_t(&state, batch, &mut rng).unwrap();
            let zeros = t.iter().filter(|&&v| v == 0.0).count();
            let expect = (batch as f64 / 2.0).ceil() as usize;
            // non-zero draws are exactly zero with probability ~0
            assert_eq!(zeros, expect, "batch {batch}");
            assert!(t.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn warmup_mean_matches_monte_carlo_oracle() {
        let state = SamplerState { t0_fraction: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(20240817);
        let n = 1_000_000usize;
        let t = sample_t(&state, n, &mut rng).unwrap();
        let mean: f64 = t.iter().sum::<f64>() / n as f64;
        assert!(
            (mean - LOGIT_NORMAL_MEAN_ORACLE).abs() < 0.005,
            "empirical mean {mean} vs oracle {LOGIT_NORMAL_MEAN_ORACLE}"
        );
    }

    #[test]
    fn loss_aware_uniform_losses_sample_uniformly() {
        let state = SamplerState {
            t0_fraction: 0.0,
            phase: SamplerPhase::LossAware,
            bin_losses: vec![0.7; 20],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000usize;
        let t = sample_t(&state, n, &mut rng).unwrap();
        let mut counts = [0usize; 20];
        for &v in &t {
            counts[state.bin_of(v)] += 1;
        }
        // 3-sigma multinomial bound around n/20
        let p = 1.0 / 20.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (b, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "bin {b}: count {c} deviates {dev:.1} > 3 sigma");
        }
    }

    #[test]
    fn hot_bin_probability_is_exact() {
        let mut losses = vec![0.0f64; 20];
        losses[4] = 1.0;
        let p = bin_probabilities(&losses, 0.3, 0.5).unwrap();
        assert!((p[4] - 0.525).abs() < 1e-12, "hot bin {}", p[4]);
        for (i, &v) in p.iter().enumerate() {
            if i != 4 {
                assert!((v - 0.025).abs() < 1e-12, "cold bin {i}: {v}");
            }
        }
    }

    #[test]
    fn eps_mix_one_is_uniform() {
        let losses: Vec<f64> = (0..20).map(|i| i as f64 * 0.37).collect();
        let p = bin_probabilities(&losses, 0.3, 1.0).unwrap();
        for &v in &p {
            assert!((v - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one_with_floor() {
        let losses: Vec<f64> = (0..20u64).map(|i| ((i * 2654435761) % 100) as f64 / 25.0).collect();
        let p = bin_probabilities(&losses, 0.3, 0.5).unwrap();
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for &v in &p {
            assert!(v >= 0.025 - 1e-12, "floor violated: {v}");
        }
    }

    #[test]
    fn probabilities_are_scale_invariant() {
        let losses: Vec<f64> = (1..=20).map(|i| i as f64 * 0.13).collect();
        let scaled: Vec<f64> = losses.iter().map(|&l| l * 37.5).collect();
        let p1 = bin_probabilities(&losses, 0.3, 0.5).unwrap();
        let p2 = bin_probabilities(&scaled, 0.3, 0.5).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_losses_rejected() {
        assert!(bin_probabilities(&[0.1, -0.1], 0.3, 0.5).is_err());
    }

    #[test]
    fn all_zero_losses_fall_back_to_uniform() {
        let p = bin_probabilities(&[0.0; 20], 0.3, 0.5).unwrap();
        for &v in &p {
            assert!((v - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn update_bins_decay_one_freezes_state() {
        let mut state = SamplerState { decay: 1.0, bin_losses: vec![0.3; 20], ..Default::default() };
        update_bins(&mut state, &[0.1, 0.7], &[5.0, 9.0]).unwrap();
        assert!(state.bin_losses.iter().all(|&l| l == 0.3));
    }

    #[test]
    fn update_bins_decay_zero_takes_batch_mean() {
        let mut state = SamplerState { decay: 0.0, ..Default::default() };
        // two samples in bin 2 ([0.10, 0.15)), one in bin 0 (t=0)
        update_bins(&mut state, &[0.11, 0.12, 0.0], &[2.0, 4.0, 7.0]).unwrap();
        assert_eq!(state.bin_losses[2], 3.0);
        assert_eq!(state.bin_losses[0], 7.0);
        assert_eq!(state.bin_losses[5], 0.0, "untouched bin unchanged");
    }

    #[test]
    fn update_bins_matches_hand_computed_recurrence() {
        let mut state = SamplerState { decay: 0.9, ..Default::default() };
        update_bins(&mut state, &[0.205], &[1.0]).unwrap(); // bin 4
        update_bins(&mut state, &[0.21, 0.22], &[3.0, 5.0]).unwrap(); // bin 4 twice
        let expect = 0.9 * (0.9 * 0.0 + 0.1 * 1.0) + 0.1 * 4.0;
        assert!((state.bin_losses[4] - expect).abs() < 1e-12);
    }

    #[test]
    fn sample_t_stays_in_unit_interval() {
        let mut state = SamplerState { phase: SamplerPhase::LossAware, ..Default::default() };
        state.bin_losses[19] = 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = sample_t(&state, 512, &mut rng).unwrap();
        assert!(t.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_batch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_t(&SamplerState::default(), 0, &mut rng).is_err());
    }
}
