//! Noise-prediction objective and AdamW training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::denoiser::DenoiserParams;
use super::schedule::{forward_noise_with, NoiseSchedule};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, SeededRng};

/// One training example: normalized target and its condition channels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair<T> {
    pub target: Vec<T>,
    pub cond: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub height: usize,
    pub width: usize,
    pub cond_channels: usize,
    pub pairs: Vec<TrainingPair<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn new(height: usize, width: usize, cond_channels: usize) -> Self {
        Self {
            height,
            width,
            cond_channels,
            pairs: Vec::new(),
        }
    }

    pub fn push(&mut self, target: Vec<T>, cond: Vec<T>) -> Result<()> {
        let hw = self.height * self.width;
        if target.len() != hw {
            return Err(Error::shape(&[self.height, self.width], &[target.len()]));
        }
        if cond.len() != self.cond_channels * hw {
            return Err(Error::shape(
                &[self.cond_channels, self.height, self.width],
                &[cond.len()],
            ));
        }
        self.pairs.push(TrainingPair { target, cond });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Timestep and injected noise for one batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw<T> {
    pub t: usize,
    pub noise: Vec<T>,
}

/// Uniform `t` in `1..=T` and standard normal noise for each item.
pub fn draw_noise<T: Real>(n_items: usize, pixels: usize, sched: &NoiseSchedule, rng: &mut SeededRng) -> Vec<Draw<T>> {
    (0..n_items)
        .map(|_| {
            let t = rng.random_range(1..=sched.steps());
            let noise = rng::normals_f64(rng, pixels).into_iter().map(T::of).collect();
            Draw { t, noise }
        })
        .collect()
}

/// Mean squared noise-prediction error and its gradient for fixed draws.
///
/// Per-item work runs in parallel; the reduction is sequential in item order
/// so the result is independent of scheduling.
pub fn loss_and_grad_with<T: Real>(
    params: &DenoiserParams<T>,
    batch: &[&TrainingPair<T>],
    draws: &[Draw<T>],
    shape: (usize, usize),
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if batch.len() != draws.len() {
        return Err(Error::shape(&[batch.len()], &[draws.len()]));
    }
    let (h, w) = shape;
    let hw = h * w;
    let denom = T::of((batch.len() * hw) as f64);
    let two = T::of(2.0);

    let per_item: Vec<(f64, Vec<T>)> = batch
        .par_iter()
        .zip(draws.par_iter())
        .map(|(item, draw)| {
            if item.target.len() != hw || draw.noise.len() != hw {
                return Err(Error::shape(&[h, w], &[item.target.len()]));
            }
            let x_t = forward_noise_with(&item.target, &draw.noise, sched.alpha_bar(draw.t)?);
            let (eps_hat, cache) = params.forward(&x_t, draw.t, &item.cond, h, w)?;
            let mut sq = T::zero();
            let d_out: Vec<T> = draw
                .noise
                .iter()
                .zip(&eps_hat)
                .map(|(&n, &e)| {
                    let r = n - e;
                    sq += r * r;
                    -two * r / denom
                })
                .collect();
            let mut grad = vec![T::zero(); params.weights().len()];
            params.backward(&cache, &d_out, &mut grad);
            Ok((sq.f64() / hw as f64, grad))
        })
        .collect::<Result<_>>()?;

    let mut loss = 0.0;
    let mut grad = vec![T::zero(); params.weights().len()];
    for (l, g) in per_item {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let loss = loss / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite training loss {loss}")));
    }
    Ok((loss, grad))
}

/// Draws `t` and noise from `rng`, then evaluates [`loss_and_grad_with`].
pub fn loss_and_grad<T: Real>(
    params: &DenoiserParams<T>,
    batch: &[&TrainingPair<T>],
    shape: (usize, usize),
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<(f64, Vec<T>)> {
    let draws = draw_noise(batch.len(), shape.0 * shape.1, sched, rng);
    loss_and_grad_with(params, batch, &draws, shape, sched)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Random flips and quarter turns of each example.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 4,
            lr: 2e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            augment: true,
            seed: 0,
        }
    }
}

/// AdamW with decoupled weight decay.
struct AdamW<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Real> AdamW<T> {
    fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [T], grad: &[T], cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::of(1.0 - cfg.beta1.powi(self.step));
        let c2 = T::of(1.0 - cfg.beta2.powi(self.step));
        let lr = T::of(cfg.lr);
        let decay = T::one() - T::of(cfg.lr * cfg.weight_decay);
        let eps = T::of(cfg.adam_eps);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// One of the eight flips/rotations of a square grid (codes 0..8), or the four
/// flips of a rectangular one (codes 0..4).
fn dihedral<T: Copy>(src: &[T], channels: usize, h: usize, w: usize, code: u8) -> Vec<T> {
    let hw = h * w;
    let mut out = Vec::with_capacity(src.len());
    for c in 0..channels {
        let plane = &src[c * hw..(c + 1) * hw];
        for y in 0..h {
            for x in 0..w {
                let (mut sy, mut sx) = (y, x);
                if code & 4 != 0 {
                    std::mem::swap(&mut sy, &mut sx);
                }
                if code & 1 != 0 {
                    sy = h - 1 - sy;
                }
                if code & 2 != 0 {
                    sx = w - 1 - sx;
                }
                out.push(plane[sy * w + sx]);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: DenoiserParams<T>,
    /// Minibatch loss at every step.
    pub losses: Vec<f64>,
}

/// Minibatch AdamW on the noise-prediction loss. Deterministic given `cfg.seed`.
pub fn train<T: Real>(
    mut params: DenoiserParams<T>,
    data: &Dataset<T>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if data.cond_channels != params.arch().cond_channels() {
        return Err(Error::shape(&[params.arch().cond_channels()], &[data.cond_channels]));
    }
    let (h, w) = (data.height, data.width);
    let n_codes = if h == w { 8 } else { 4 };
    let mut rng = rng::seeded(cfg.seed);
    let mut opt = AdamW::new(params.weights().len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut above = 0usize;

    for step in 0..cfg.steps {
        let mut items = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let pair = &data.pairs[order[cursor]];
            cursor += 1;
            if cfg.augment {
                let code = rng.random_range(0..n_codes) as u8;
                items.push(TrainingPair {
                    target: dihedral(&pair.target, 1, h, w, code),
                    cond: dihedral(&pair.cond, data.cond_channels, h, w, code),
                });
            } else {
                items.push(pair.clone());
            }
        }
        let refs: Vec<&TrainingPair<T>> = items.iter().collect();
        let (loss, grad) = loss_and_grad(&params, &refs, (h, w), sched, &mut rng)?;
        losses.push(loss);

        if loss > 10.0 * losses[0] {
            above += 1;
            if above >= 100 {
                return Err(Error::Diverged {
                    step,
                    initial: losses[0],
                    last: loss,
                    trace: losses,
                });
            }
        } else {
            above = 0;
        }
        opt.update(params.weights_mut(), &grad, cfg);
        if params.weights().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite weights after step {step}")));
        }
    }
    Ok(TrainOutcome { params, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::Architecture;

    fn tiny_arch() -> Architecture {
        Architecture {
            n_few: 1,
            hidden: 4,
            layers: 3,
            kernel: 3,
            time_dim: 4,
        }
    }

    fn tiny_dataset(n: usize, seed: u64) -> Dataset<f32> {
        let mut r = rng::seeded(seed);
        let mut d = Dataset::new(8, 8, 2);
        for _ in 0..n {
            let target: Vec<f32> = (0..64).map(|i| if (i / 8) % 4 < 2 { 0.8 } else { -0.8 }).collect();
            let cond: Vec<f32> = rng::normals_f32(&mut r, 128).into_iter().map(f32::tanh).collect();
            d.push(target, cond).unwrap();
        }
        d
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let arch = Architecture {
            n_few: 1,
            hidden: 1,
            layers: 2,
            kernel: 1,
            time_dim: 2,
        };
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let p = DenoiserParams::<f64>::zeros(arch).unwrap();
        let pair = TrainingPair {
            target: vec![0.5; 4],
            cond: vec![0.0; 8],
        };
        // The zero network predicts the injected noise exactly when it is zero.
        let draws = vec![Draw { t: 3, noise: vec![0.0; 4] }];
        let (loss, grad) = loss_and_grad_with(&p, &[&pair], &draws, (2, 2), &sched).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_is_mean_squared_noise_for_zero_predictor() {
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let p = DenoiserParams::<f64>::zeros(tiny_arch()).unwrap();
        let pair = TrainingPair {
            target: vec![0.1; 4],
            cond: vec![0.0; 8],
        };
        let draws = vec![Draw { t: 1, noise: vec![1.0, -2.0, 0.0, 3.0] }];
        let (loss, _) = loss_and_grad_with(&p, &[&pair], &draws, (2, 2), &sched).unwrap();
        assert!((loss - 14.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn loss_invariant_to_batch_order() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let data = tiny_dataset(3, 1);
        let p = DenoiserParams::<f64>::init_dense(tiny_arch(), 2).unwrap();
        let data64: Vec<TrainingPair<f64>> = data
            .pairs
            .iter()
            .map(|q| TrainingPair {
                target: q.target.iter().map(|&v| v as f64).collect(),
                cond: q.cond.iter().map(|&v| v as f64).collect(),
            })
            .collect();
        let mut r = rng::seeded(9);
        let draws = draw_noise::<f64>(3, 64, &sched, &mut r);
        let fwd: Vec<_> = data64.iter().collect();
        let (l1, g1) = loss_and_grad_with(&p, &fwd, &draws, (8, 8), &sched).unwrap();
        let rev: Vec<_> = data64.iter().rev().collect();
        let rdraws: Vec<_> = draws.iter().rev().cloned().collect();
        let (l2, g2) = loss_and_grad_with(&p, &rev, &rdraws, (8, 8), &sched).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let sched = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let p = DenoiserParams::<f64>::zeros(tiny_arch()).unwrap();
        assert!(loss_and_grad_with(&p, &[], &[], (2, 2), &sched).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let data = tiny_dataset(2, 3);
        let p = DenoiserParams::<f32>::init(tiny_arch(), 4).unwrap();
        let cfg = TrainConfig {
            steps: 20,
            lr: 0.0,
            batch_size: 2,
            augment: false,
            ..Default::default()
        };
        let out = train(p.clone(), &data, &sched, &cfg).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.losses.len(), 20);
    }

    #[test]
    fn training_is_deterministic() {
        let sched = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let data = tiny_dataset(3, 5);
        let p = DenoiserParams::<f32>::init(tiny_arch(), 6).unwrap();
        let cfg = TrainConfig {
            steps: 30,
            batch_size: 2,
            ..Default::default()
        };
        let a = train(p.clone(), &data, &sched, &cfg).unwrap();
        let b = train(p, &data, &sched, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn dihedral_codes_are_distinct_permutations() {
        let src: Vec<u32> = (0..9).collect();
        let mut seen = std::collections::HashSet::new();
        for code in 0..8 {
            let mut out = dihedral(&src, 1, 3, 3, code);
            seen.insert(out.clone());
            out.sort();
            assert_eq!(out, src);
        }
        assert_eq!(seen.len(), 8);
    }
}
