//! Noise schedule, forward corruption and the deterministic DDIM update.

use crate::error::{Error, Result};
use crate::real::Real;

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// `beta_t` and cumulative `alpha_bar_t` for steps `t = 1..=T`.
///
/// `alpha_bar(0)` is 1 by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidInput("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidInput(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            beta_start,
            beta_end,
            betas,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar_1 .. alpha_bar_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::InvalidInput(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            ))),
        }
    }
}

/// DDIM timestep subsequence `tau_1 < ... < tau_S = T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerConfig {
    timesteps: Vec<usize>,
}

impl SamplerConfig {
    /// Uniformly spaced `tau_i = floor(i T / S)`, `i = 1..=S`.
    pub fn uniform(inference_steps: usize, train_steps: usize) -> Result<Self> {
        if inference_steps == 0 || inference_steps > train_steps {
            return Err(Error::InvalidInput(format!(
                "need 1 <= S <= T, got S = {inference_steps}, T = {train_steps}"
            )));
        }
        Self::new(
            (1..=inference_steps)
                .map(|i| i * train_steps / inference_steps)
                .collect(),
            train_steps,
        )
    }

    pub fn new(timesteps: Vec<usize>, train_steps: usize) -> Result<Self> {
        let increasing = timesteps.windows(2).all(|w| w[0] < w[1]);
        let in_range = timesteps.first().is_some_and(|&t| t >= 1);
        if !increasing || !in_range || timesteps.last() != Some(&train_steps) {
            return Err(Error::InvalidInput(format!(
                "timestep subsequence must be strictly increasing within 1..={train_steps} and end at {train_steps}"
            )));
        }
        Ok(Self { timesteps })
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// `(t, t_prev)` pairs from `T` down to `(tau_1, 0)`.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.timesteps.len()).rev().map(move |i| {
            let prev = if i == 0 { 0 } else { self.timesteps[i - 1] };
            (self.timesteps[i], prev)
        })
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
pub fn forward_noise<T: Real>(x0: &[T], t: usize, noise: &[T], sched: &NoiseSchedule) -> Result<Vec<T>> {
    if t == 0 || t > sched.steps() {
        return Err(Error::InvalidInput(format!(
            "timestep {t} outside 1..={}",
            sched.steps()
        )));
    }
    if x0.len() != noise.len() {
        return Err(Error::shape(&[x0.len()], &[noise.len()]));
    }
    let ab = sched.alpha_bar(t)?;
    Ok(forward_noise_with(x0, noise, ab))
}

/// Forward corruption for an explicit `alpha_bar`.
pub fn forward_noise_with<T: Real>(x0: &[T], noise: &[T], alpha_bar: f64) -> Vec<T> {
    let a = T::of(alpha_bar.sqrt());
    let b = T::of((1.0 - alpha_bar).sqrt());
    x0.iter().zip(noise).map(|(&x, &n)| a * x + b * n).collect()
}

/// One deterministic DDIM update from `t` to `t_prev`:
/// `x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`,
/// `x_prev = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev) eps`.
pub fn ddim_step<T: Real>(
    x_t: &[T],
    t: usize,
    t_prev: usize,
    eps_hat: &[T],
    sched: &NoiseSchedule,
) -> Result<Vec<T>> {
    if t_prev >= t {
        return Err(Error::InvalidInput(format!(
            "DDIM step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    if x_t.len() != eps_hat.len() {
        return Err(Error::shape(&[x_t.len()], &[eps_hat.len()]));
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let s_t = T::of(ab_t.sqrt());
    let n_t = T::of((1.0 - ab_t).sqrt());
    let s_prev = T::of(ab_prev.sqrt());
    let n_prev = T::of((1.0 - ab_prev).sqrt());
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| {
            let x0 = (x - n_t * e) / s_t;
            s_prev * x0 + n_prev * e
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.01, 0.02).unwrap();
        assert_eq!(s.alpha_bars(), &[0.99]);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn default_schedule_decays() {
        let s = NoiseSchedule::linear(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let ab = s.alpha_bars();
        assert!(ab[999] < 0.05);
        assert!(ab.windows(2).all(|w| w[1] < w[0]));
        // Independent evaluation of the product in log space.
        let log_sum: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        assert!((ab[999] - log_sum.exp()).abs() < 1e-12);
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        assert!((s.betas()[0] - 1e-4).abs() < 1e-15 && (s.betas()[999] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules() {
        assert!(NoiseSchedule::linear(10, 0.02, 0.01).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.01).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let x0 = [0.3f64, -0.7];
        let n = [1.5f64, -0.2];
        assert_eq!(forward_noise_with(&x0, &n, 1.0), x0.to_vec());
        assert_eq!(forward_noise_with(&x0, &n, 0.0), n.to_vec());
        let v = forward_noise_with(&[1.0f64], &[1.0], 0.25);
        assert!((v[0] - (0.5 + 0.75f64.sqrt())).abs() < 1e-15);
        assert!((v[0] - 1.36603).abs() < 1e-5);
    }

    #[test]
    fn forward_noise_range_checked() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(forward_noise(&[0.0f64], 0, &[0.0], &s).is_err());
        assert!(forward_noise(&[0.0f64], 11, &[0.0], &s).is_err());
        assert!(forward_noise(&[0.0f64], 10, &[0.0, 1.0], &s).is_err());
    }

    #[test]
    fn forward_variance_tends_to_one() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut r = rng::seeded(3);
        let noise = rng::normals_f64(&mut r, 20000);
        let x0 = vec![0.8; noise.len()];
        let xt = forward_noise(&x0, 1000, &noise, &s).unwrap();
        let m = xt.iter().sum::<f64>() / xt.len() as f64;
        let v = xt.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xt.len() as f64;
        assert!((v - 1.0).abs() < 0.05, "variance {v}");
    }

    #[test]
    fn ddim_inverts_forward_with_oracle() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let mut r = rng::seeded(4);
        let x0: Vec<f64> = rng::normals_f64(&mut r, 64).iter().map(|v| v.tanh()).collect();
        let noise = rng::normals_f64(&mut r, 64);
        for t in [1, 57, 200] {
            let xt = forward_noise(&x0, t, &noise, &s).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            let eps: Vec<f64> = xt
                .iter()
                .zip(&x0)
                .map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
                .collect();
            let back = ddim_step(&xt, t, 0, &eps, &s).unwrap();
            for (a, b) in back.iter().zip(&x0) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_eps_rescales() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let xt = [0.4f64, -1.2];
        let out = ddim_step(&xt, 30, 10, &[0.0, 0.0], &s).unwrap();
        let ratio = (s.alpha_bar(10).unwrap() / s.alpha_bar(30).unwrap()).sqrt();
        for (o, x) in out.iter().zip(xt) {
            assert!((o - ratio * x).abs() < 1e-14);
        }
    }

    #[test]
    fn ddim_rejects_non_decreasing_steps() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        assert!(ddim_step(&[0.0f64], 10, 10, &[0.0], &s).is_err());
        assert!(ddim_step(&[0.0f64], 10, 11, &[0.0], &s).is_err());
    }

    #[test]
    fn uniform_subsequence() {
        let c = SamplerConfig::uniform(20, 200).unwrap();
        assert_eq!(c.len(), 20);
        assert_eq!(c.timesteps()[0], 10);
        assert_eq!(*c.timesteps().last().unwrap(), 200);
        let c = SamplerConfig::uniform(3, 10).unwrap();
        assert_eq!(c.timesteps(), &[3, 6, 10]);
        assert_eq!(c.transitions().collect::<Vec<_>>(), vec![(10, 6), (6, 3), (3, 0)]);
        assert!(SamplerConfig::uniform(11, 10).is_err());
        assert!(SamplerConfig::new(vec![2, 2, 10], 10).is_err());
        assert!(SamplerConfig::new(vec![2, 5], 10).is_err());
        let all = SamplerConfig::uniform(10, 10).unwrap();
        assert_eq!(all.timesteps(), &(1..=10).collect::<Vec<_>>()[..]);
    }
}
