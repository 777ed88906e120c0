mod common;

use common::{finite_difference_check, naive_forward, naive_loss};
use speckle_core::diffusion::{loss_and_grad_with, Architecture, DenoiserParams, NoiseSchedule, TrainingPair};
use speckle_core::diffusion::train::draw_noise;
use speckle_core::rng;

fn arch() -> Architecture {
    Architecture {
        n_few: 2,
        hidden: 4,
        layers: 4,
        kernel: 3,
        time_dim: 8,
    }
}

fn pair(a: &Architecture, h: usize, w: usize, seed: u64) -> TrainingPair<f64> {
    let mut r = rng::seeded(seed);
    TrainingPair {
        target: rng::normals_f64(&mut r, h * w).into_iter().map(f64::tanh).collect(),
        cond: rng::normals_f64(&mut r, a.cond_channels() * h * w)
            .into_iter()
            .map(f64::tanh)
            .collect(),
    }
}

#[test]
fn forward_matches_direct_convolution() {
    let a = arch();
    let p = DenoiserParams::<f64>::init_dense(a, 3).unwrap();
    let item = pair(&a, 8, 8, 4);
    for t in [1, 17, 200] {
        let fast = p.predict(&item.target, t, &item.cond, 8, 8).unwrap();
        let slow = naive_forward(&p, &item.target, t, &item.cond, 8, 8);
        for (f, s) in fast.iter().zip(&slow) {
            assert!((f - s).abs() <= 1e-6 * s.abs().max(1.0), "{f} vs {s}");
        }
    }
}

#[test]
fn forward_matches_on_rectangular_grid_and_wide_kernel() {
    let a = Architecture { kernel: 5, layers: 3, ..arch() };
    let p = DenoiserParams::<f64>::init_dense(a, 5).unwrap();
    let item = pair(&a, 6, 11, 6);
    let fast = p.predict(&item.target, 9, &item.cond, 6, 11).unwrap();
    let slow = naive_forward(&p, &item.target, 9, &item.cond, 6, 11);
    for (f, s) in fast.iter().zip(&slow) {
        assert!((f - s).abs() <= 1e-9 * s.abs().max(1.0));
    }
}

#[test]
fn gradients_match_central_differences() {
    let a = arch();
    let (h, w) = (16, 16);
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let p = DenoiserParams::<f64>::init_dense(a, 8).unwrap();
    let items = [pair(&a, h, w, 9), pair(&a, h, w, 10)];
    let batch: Vec<&TrainingPair<f64>> = items.iter().collect();
    let draws = draw_noise::<f64>(2, h * w, &sched, &mut rng::seeded(11));
    let (loss, grad) = loss_and_grad_with(&p, &batch, &draws, (h, w), &sched).unwrap();
    assert!((loss - naive_loss(&p, &batch, &draws, h, w, &sched)).abs() < 1e-12);
    let (worst, idx) = finite_difference_check(&p, &grad, 1e-4, |q| {
        loss_and_grad_with(q, &batch, &draws, (h, w), &sched).unwrap().0
    });
    assert!(worst <= 1e-4, "worst relative error {worst} at parameter {idx}");
}
