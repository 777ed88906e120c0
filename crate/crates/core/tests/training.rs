use speckle_core::diffusion::{train, Architecture, Dataset, DenoiserParams, NoiseSchedule, TrainConfig};
use speckle_core::{rng, Error};

fn stripes(n: usize, h: usize, w: usize, channels: usize) -> Dataset<f32> {
    let mut d = Dataset::new(h, w, channels);
    let mut r = rng::seeded(5);
    for i in 0..n {
        let target: Vec<f32> = (0..h * w)
            .map(|p| if (p % w + i) % 4 < 2 { 0.8 } else { -0.8 })
            .collect();
        let mut cond = Vec::with_capacity(channels * h * w);
        for _ in 0..channels {
            let noise = rng::normals_f32(&mut r, h * w);
            cond.extend(target.iter().zip(noise).map(|(t, z)| t + 0.3 * z));
        }
        d.push(target, cond).unwrap();
    }
    d
}

fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

#[test]
fn overfits_small_set() {
    let arch = Architecture {
        n_few: 2,
        hidden: 8,
        layers: 3,
        kernel: 3,
        time_dim: 8,
    };
    let data = stripes(4, 16, 16, arch.cond_channels());
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let cfg = TrainConfig {
        steps: 400,
        ..TrainConfig::default()
    };
    let out = train(DenoiserParams::init(arch, 1).unwrap(), &data, &sched, &cfg).unwrap();
    let s = smoothed(&out.losses, 50);
    let (first, last) = (s[0], *s.last().unwrap());
    assert!(last < 0.7 * first, "smoothed loss {first} -> {last}");
}

#[test]
fn divergence_is_reported() {
    let arch = Architecture {
        n_few: 2,
        hidden: 8,
        layers: 3,
        kernel: 3,
        time_dim: 8,
    };
    let data = stripes(4, 16, 16, arch.cond_channels());
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let cfg = TrainConfig {
        steps: 400,
        lr: 50.0,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    match train(DenoiserParams::init_dense(arch, 1).unwrap(), &data, &sched, &cfg) {
        Err(Error::Diverged { trace, .. }) => assert!(!trace.is_empty()),
        Err(Error::Numerical(_)) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.losses.last().copied())),
    }
}
