//! Independent reference implementations used by integration tests.
#![allow(dead_code)]

use speckle_core::diffusion::{Architecture, DenoiserParams, Draw, NoiseSchedule, TrainingPair};

/// Direct per-pixel evaluation of the denoiser from its flat weights, written
/// from the architecture description only (weight offsets re-derived here).
pub fn naive_forward(p: &DenoiserParams<f64>, x_t: &[f64], t: usize, cond: &[f64], h: usize, w: usize) -> Vec<f64> {
    let a: &Architecture = p.arch();
    let wts = p.weights();
    let k = a.kernel as isize;
    let pad = k / 2;
    let e = a.time_dim;
    let emb: Vec<f64> = (0..e)
        .map(|j| {
            let half = e / 2;
            let i = j % half;
            let f = 10000f64.powf(-(i as f64) / half as f64);
            if j < half {
                (t as f64 * f).sin()
            } else {
                (t as f64 * f).cos()
            }
        })
        .collect();

    // state[c][y][x]
    let mut state: Vec<Vec<Vec<f64>>> = Vec::new();
    state.push((0..h).map(|y| (0..w).map(|x| x_t[y * w + x]).collect()).collect());
    for c in 0..a.n_few + 1 {
        state.push((0..h).map(|y| (0..w).map(|x| cond[c * h * w + y * w + x]).collect()).collect());
    }

    let mut off = 0usize;
    for l in 0..a.layers {
        let cin = state.len();
        let last = l + 1 == a.layers;
        let cout = if last { 1 } else { a.hidden };
        let wbase = off;
        off += cout * cin * (k * k) as usize;
        let conv = |o: usize, y: usize, x: usize| -> f64 {
            let mut s = 0.0;
            for i in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky - pad;
                        let sx = x as isize + kx - pad;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let idx = wbase + ((o * cin + i) * k as usize + ky as usize) * k as usize + kx as usize;
                        s += wts[idx] * state[i][sy as usize][sx as usize];
                    }
                }
            }
            s
        };
        if last {
            return (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| conv(0, y, x)).collect();
        }
        let bias = off;
        off += cout;
        let proj = off;
        off += 2 * cout * e;
        let proj_b = off;
        off += 2 * cout;
        let mut next = vec![vec![vec![0.0; w]; h]; cout];
        for o in 0..cout {
            let mut scale = wts[proj_b + o];
            let mut shift = wts[proj_b + cout + o];
            for j in 0..e {
                scale += wts[proj + o * e + j] * emb[j];
                shift += wts[proj + (cout + o) * e + j] * emb[j];
            }
            for y in 0..h {
                for x in 0..w {
                    let z = conv(o, y, x) + wts[bias + o];
                    let silu = z / (1.0 + (-z).exp());
                    next[o][y][x] = silu * (1.0 + scale) + shift;
                }
            }
        }
        state = next;
    }
    unreachable!()
}

/// Batch loss evaluated through the naive forward pass.
pub fn naive_loss(
    p: &DenoiserParams<f64>,
    batch: &[&TrainingPair<f64>],
    draws: &[Draw<f64>],
    h: usize,
    w: usize,
    sched: &NoiseSchedule,
) -> f64 {
    let mut total = 0.0;
    for (item, d) in batch.iter().zip(draws) {
        let ab = sched.alpha_bar(d.t).unwrap();
        let x_t: Vec<f64> = item
            .target
            .iter()
            .zip(&d.noise)
            .map(|(x0, n)| ab.sqrt() * x0 + (1.0 - ab).sqrt() * n)
            .collect();
        let out = naive_forward(p, &x_t, d.t, &item.cond, h, w);
        total += out.iter().zip(&d.noise).map(|(o, n)| (n - o).powi(2)).sum::<f64>() / (h * w) as f64;
    }
    total / batch.len() as f64
}

/// Relative error with a floor on the denominator for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error between analytic gradients and central differences.
pub fn finite_difference_check(
    p: &DenoiserParams<f64>,
    analytic: &[f64],
    step: f64,
    loss: impl Fn(&DenoiserParams<f64>) -> f64,
) -> (f64, usize) {
    let mut worst = (0.0, 0);
    let mut q = p.clone();
    for i in 0..p.weights().len() {
        let orig = q.weights()[i];
        q.weights_mut()[i] = orig + step;
        let lp = loss(&q);
        q.weights_mut()[i] = orig - step;
        let lm = loss(&q);
        q.weights_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * step);
        let err = rel_err(analytic[i], numeric);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    worst
}

/// Per-pixel population mean/std contrast and flow, one pixel at a time.
pub fn naive_contrast(stack: &ndarray::Array3<f64>, contrast_eps: f64, flow_eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, h, w) = stack.dim();
    let mut k = Vec::with_capacity(h * w);
    let mut f = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v: Vec<f64> = (0..n).map(|t| stack[[t, y, x]]).collect();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
            let kk = var.sqrt() / (mean + contrast_eps);
            k.push(kk);
            f.push(1.0 / (kk * kk + flow_eps));
        }
    }
    (k, f)
}

/// Brute-force SSIM: full 2-D Gaussian window at every valid position.
pub fn naive_ssim(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>, l: f64) -> f64 {
    let (k, sigma, k1, k2) = (11usize, 1.5f64, 0.01f64, 0.03f64);
    let r = 5.0;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            win[i * k + j] = (-((i as f64 - r).powi(2) + (j as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let tot: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= tot);
    let (c1, c2) = ((k1 * l).powi(2), (k2 * l).powi(2));
    let (h, w) = a.dim();
    let mut acc = 0.0;
    let mut count = 0;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let at = |m: &ndarray::Array2<f64>, i: usize| m[[y0 + i / k, x0 + i % k]];
            let ma: f64 = (0..k * k).map(|i| win[i] * at(a, i)).sum();
            let mb: f64 = (0..k * k).map(|i| win[i] * at(b, i)).sum();
            let va: f64 = (0..k * k).map(|i| win[i] * (at(a, i) - ma).powi(2)).sum();
            let vb: f64 = (0..k * k).map(|i| win[i] * (at(b, i) - mb).powi(2)).sum();
            let cab: f64 = (0..k * k).map(|i| win[i] * (at(a, i) - ma) * (at(b, i) - mb)).sum();
            acc += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}
