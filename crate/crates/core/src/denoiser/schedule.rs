//! DDPM noise schedule and forward noising.

use crate::rng;
use crate::{Error, Result};

/// Linear-beta schedule. Timesteps are 1-based (t ∈ 1..=T); `alpha_bar(0)` is
/// defined as 1 so the last reverse step lands on the clean sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub betas: Vec<f32>,
    pub alphas: Vec<f32>,
    pub alpha_bars: Vec<f32>,
}

pub const DEFAULT_T: usize = 50;
pub const DEFAULT_BETA_START: f32 = 1e-4;
pub const DEFAULT_BETA_END: f32 = 0.25;

impl NoiseSchedule {
    /// Betas interpolate linearly from `beta_start` to `beta_end` over `t_max`
    /// steps. The defaults keep ᾱ₁ ≥ 0.99 while driving ᾱ_T close to zero over
    /// the short 50-step horizon.
    pub fn linear(t_max: usize, beta_start: f32, beta_end: f32) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::Validation(format!("schedule needs T >= 2, got {t_max}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Validation(format!(
                "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
            )));
        }
        let betas: Vec<f32> = (0..t_max)
            .map(|i| {
                let frac = i as f64 / (t_max - 1) as f64;
                (beta_start as f64 + frac * (beta_end - beta_start) as f64) as f32
            })
            .collect();
        let alphas: Vec<f32> = betas.iter().map(|&b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut product = 1.0f64;
        for &a in &alphas {
            product *= a as f64;
            alpha_bars.push(product as f32);
        }
        Ok(NoiseSchedule { t_max, betas, alphas, alpha_bars })
    }

    pub fn default_linear(t_max: usize) -> Result<Self> {
        Self::linear(t_max, DEFAULT_BETA_START, DEFAULT_BETA_END)
    }

    /// ᾱ_t for t ∈ 0..=T, with the ᾱ₀ = 1 convention.
    pub fn alpha_bar(&self, t: usize) -> f32 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f32 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f32 {
        self.alphas[t - 1]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::Validation(format!(
                "timestep {t} outside 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// Forward noising: √ᾱ_t·x₀ + √(1−ᾱ_t)·noise.
pub fn q_sample(x0: &[f32], t: usize, noise: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    schedule.check_t(t)?;
    if x0.len() != noise.len() {
        return Err(Error::shape(
            "q_sample",
            format!("x0 has {} elements, noise {}", x0.len(), noise.len()),
        ));
    }
    let ab = schedule.alpha_bar(t);
    let signal = ab.sqrt();
    let sigma = (1.0 - ab).sqrt();
    Ok(x0.iter().zip(noise).map(|(&x, &n)| signal * x + sigma * n).collect())
}

/// Draw x_t for a training example: per-index derived noise stream.
pub fn q_sample_seeded(
    x0: &[f32],
    t: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    index: u64,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut stream = rng::derive(seed, "q-noise", index);
    let noise = rng::normal_vec(&mut stream, x0.len());
    let noisy = q_sample(x0, t, &noise, schedule)?;
    Ok((noisy, noise))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_invariants_hold() {
        let s = NoiseSchedule::default_linear(DEFAULT_T).unwrap();
        assert_eq!(s.betas.len(), 50);
        assert!(s.alpha_bar(1) >= 0.99, "alpha_bar(1) = {}", s.alpha_bar(1));
        for t in 1..=s.t_max {
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1) || t == 1);
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
        // Strictly decreasing cumulative product.
        for t in 2..=s.t_max {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        // Endpoint nearly destroys the signal at this horizon.
        assert!(s.alpha_bar(s.t_max) < 2e-3, "alpha_bar(T) = {}", s.alpha_bar(s.t_max));
        assert!(NoiseSchedule::linear(1, 1e-4, 0.3).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.3).is_err());
    }

    #[test]
    fn q_sample_at_t1_is_close_to_x0() {
        let s = NoiseSchedule::default_linear(DEFAULT_T).unwrap();
        let x0 = vec![0.5f32; 1024];
        let mut stream = rng::derive(3, "qs", 0);
        let noise = rng::normal_vec(&mut stream, 1024);
        let noisy = q_sample(&x0, 1, &noise, &s).unwrap();
        let max_diff = noisy
            .iter()
            .zip(&x0)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 0.1, "max abs diff {max_diff}");
    }

    #[test]
    fn q_sample_with_zero_noise_scales_x0() {
        let s = NoiseSchedule::default_linear(DEFAULT_T).unwrap();
        let x0 = vec![0.25f32, 0.5, 1.0];
        let noisy = q_sample(&x0, 20, &[0.0; 3], &s).unwrap();
        let scale = s.alpha_bar(20).sqrt();
        for (a, b) in noisy.iter().zip(&x0) {
            assert!((a - scale * b).abs() < 1e-7);
        }
        assert!(q_sample(&x0, 0, &[0.0; 3], &s).is_err());
        assert!(q_sample(&x0, 51, &[0.0; 3], &s).is_err());
    }

    #[test]
    fn q_sample_variance_matches_schedule() {
        // Monte Carlo oracle: Var[x_t] per pixel over noise draws ≈ 1−ᾱ_t.
        let s = NoiseSchedule::default_linear(DEFAULT_T).unwrap();
        let t = 25;
        let x0 = vec![0.7f32; 16];
        let draws = 500;
        let mut samples: Vec<Vec<f64>> = (0..16).map(|_| Vec::with_capacity(draws)).collect();
        for d in 0..draws {
            let (noisy, _) = q_sample_seeded(&x0, t, &s, 9, d as u64).unwrap();
            for (store, v) in samples.iter_mut().zip(noisy) {
                store.push(v as f64);
            }
        }
        let expected = (1.0 - s.alpha_bar(t)) as f64;
        let mut mean_var = 0.0;
        for pixel in &samples {
            let mean: f64 = pixel.iter().sum::<f64>() / draws as f64;
            let var: f64 =
                pixel.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws as f64;
            mean_var += var / 16.0;
        }
        assert!(
            (mean_var - expected).abs() / expected < 0.10,
            "empirical {mean_var} vs schedule {expected}"
        );
    }
}
