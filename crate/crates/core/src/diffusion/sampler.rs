//! Deterministic DDIM sampling from pure noise.

use super::denoiser::DenoiserParams;
use super::schedule::{ddim_step, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

/// Anything that predicts the injected noise of `x_t`.
pub trait NoisePredictor<T: Real> {
    fn predict_noise(&self, x_t: &[T], t: usize, cond: &[T], shape: (usize, usize)) -> Result<Vec<T>>;
}

impl<T: Real> NoisePredictor<T> for DenoiserParams<T> {
    fn predict_noise(&self, x_t: &[T], t: usize, cond: &[T], shape: (usize, usize)) -> Result<Vec<T>> {
        self.predict(x_t, t, cond, shape.0, shape.1)
    }
}

/// Predictor that knows the clean image: `eps = (x_t - sqrt(ab_t) x0) / sqrt(1 - ab_t)`.
#[derive(Debug, Clone)]
pub struct OraclePredictor<'a, T> {
    pub x0: Vec<T>,
    pub schedule: &'a NoiseSchedule,
}

impl<T: Real> NoisePredictor<T> for OraclePredictor<'_, T> {
    fn predict_noise(&self, x_t: &[T], t: usize, _cond: &[T], _shape: (usize, usize)) -> Result<Vec<T>> {
        let ab = self.schedule.alpha_bar(t)?;
        let s = T::of(ab.sqrt());
        let n = T::of((1.0 - ab).sqrt());
        Ok(x_t.iter().zip(&self.x0).map(|(&x, &x0)| (x - s * x0) / n).collect())
    }
}

/// Runs the DDIM chain `T = tau_S -> ... -> tau_1 -> 0` from `x_T ~ N(0, I)`
/// drawn with `seed`. No clipping is applied between steps.
pub fn ddim_sample<T: Real, P: NoisePredictor<T> + ?Sized>(
    predictor: &P,
    cond: &[T],
    shape: (usize, usize),
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<T>> {
    if sampler.timesteps().last() != Some(&sched.steps()) {
        return Err(Error::InvalidInput(format!(
            "sampler subsequence must end at T = {}",
            sched.steps()
        )));
    }
    let mut r = rng::seeded(seed);
    let mut x: Vec<T> = rng::normals_f64(&mut r, shape.0 * shape.1)
        .into_iter()
        .map(T::of)
        .collect();
    for (i, (t, t_prev)) in sampler.transitions().enumerate() {
        let eps = predictor.predict_noise(&x, t, cond, shape)?;
        x = ddim_step(&x, t, t_prev, &eps, sched)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite sample at DDIM step {i} (t = {t} -> {t_prev})"
            )));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x0(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i as f64) * 0.37).sin()).collect()
    }

    #[test]
    fn oracle_sampling_returns_x0() {
        let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let oracle = OraclePredictor { x0: x0(64), schedule: &sched };
        let sampler = SamplerConfig::uniform(20, 200).unwrap();
        let out = ddim_sample(&oracle, &[], (8, 8), &sched, &sampler, 5).unwrap();
        let err = out.iter().zip(x0(64)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn oracle_sampling_f32() {
        let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        let target: Vec<f32> = x0(64).iter().map(|&v| v as f32).collect();
        let oracle = OraclePredictor { x0: target.clone(), schedule: &sched };
        let sampler = SamplerConfig::uniform(20, 200).unwrap();
        let out = ddim_sample(&oracle, &[], (8, 8), &sched, &sampler, 5).unwrap();
        let err = out.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let arch = super::super::denoiser::Architecture {
            n_few: 1,
            hidden: 4,
            layers: 3,
            kernel: 3,
            time_dim: 4,
        };
        let p = DenoiserParams::<f32>::init_dense(arch, 1).unwrap();
        let cond = vec![0.25f32; 2 * 36];
        let sampler = SamplerConfig::uniform(5, 50).unwrap();
        let a = ddim_sample(&p, &cond, (6, 6), &sched, &sampler, 11).unwrap();
        let b = ddim_sample(&p, &cond, (6, 6), &sched, &sampler, 11).unwrap();
        assert_eq!(a, b);
        let c = ddim_sample(&p, &cond, (6, 6), &sched, &sampler, 12).unwrap();
        assert_ne!(a, c);
    }
}
