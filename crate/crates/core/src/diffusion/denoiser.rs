//! Small convolutional noise predictor with reverse-mode gradients.
//!
//! The network input is `concat(x_t, cond)`. Every hidden layer is a
//! same-padded convolution with bias, a SiLU activation, and a per-channel
//! affine modulation `h * (1 + scale(t)) + shift(t)` where `(scale, shift)` is
//! a linear projection of a sinusoidal embedding of `t`. The last layer is a
//! bias-free convolution down to one channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Number of speckle frames in the condition.
    pub n_few: usize,
    pub hidden: usize,
    /// Convolution layers including the output layer.
    pub layers: usize,
    pub kernel: usize,
    pub time_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            n_few: 5,
            hidden: 32,
            layers: 4,
            kernel: 3,
            time_dim: 32,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    cin: usize,
    cout: usize,
    w: usize,
    /// Offsets of bias, projection matrix and projection bias; hidden layers only.
    hidden: Option<(usize, usize, usize)>,
}

impl Architecture {
    /// Noisy latent + frames + prior.
    pub fn in_channels(&self) -> usize {
        self.n_few + 2
    }

    pub fn cond_channels(&self) -> usize {
        self.n_few + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("architecture: {m}")));
        if self.n_few == 0 {
            return bad("n_few must be >= 1");
        }
        if self.hidden == 0 {
            return bad("hidden width must be >= 1");
        }
        if self.layers < 2 {
            return bad("need at least 2 layers");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return bad("time embedding dimension must be even and >= 2");
        }
        Ok(())
    }

    fn layout(&self) -> (Vec<LayerLayout>, usize) {
        let k2 = self.kernel * self.kernel;
        let mut off = 0;
        let mut out = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let cin = if l == 0 { self.in_channels() } else { self.hidden };
            let last = l + 1 == self.layers;
            let cout = if last { 1 } else { self.hidden };
            let w = off;
            off += cout * cin * k2;
            let hidden = if last {
                None
            } else {
                let b = off;
                off += cout;
                let p = off;
                off += 2 * cout * self.time_dim;
                let pb = off;
                off += 2 * cout;
                Some((b, p, pb))
            };
            out.push(LayerLayout { cin, cout, w, hidden });
        }
        (out, off)
    }

    pub fn param_count(&self) -> usize {
        self.layout().1
    }
}

/// Sinusoidal embedding `[sin(t f_i), cos(t f_i)]`, `f_i = 10000^(-i / (dim/2))`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * f;
        e[i] = a.sin();
        e[half + i] = a.cos();
    }
    e
}

fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Same-padded multi-channel convolution, accumulated into `out`.
#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(
    input: &[T],
    cin: usize,
    weights: &[T],
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
    out: &mut [T],
) {
    let hw = h * w;
    for o in 0..cout {
        let out_o = &mut out[o * hw..(o + 1) * hw];
        for i in 0..cin {
            let in_i = &input[i * hw..(i + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weights[((o * cin + i) * k + ky) * k + kx];
                    let Some(win) = Window::new(ky, kx, k, h, w) else { continue };
                    for y in win.y0..win.y1 {
                        let src = ((y as isize + win.oy) as usize) * w;
                        let dst = &mut out_o[y * w + win.x0..y * w + win.x1];
                        let s0 = (src as isize + win.x0 as isize + win.ox) as usize;
                        for (d, s) in dst.iter_mut().zip(&in_i[s0..s0 + (win.x1 - win.x0)]) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight gradients and, when `d_input` is given, input gradients.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    input: &[T],
    cin: usize,
    weights: &[T],
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
    d_out: &[T],
    d_weights: &mut [T],
    mut d_input: Option<&mut [T]>,
) {
    let hw = h * w;
    for o in 0..cout {
        let g_o = &d_out[o * hw..(o + 1) * hw];
        for i in 0..cin {
            let in_i = &input[i * hw..(i + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = weights[widx];
                    let Some(win) = Window::new(ky, kx, k, h, w) else { continue };
                    let n = win.x1 - win.x0;
                    let mut acc = T::zero();
                    for y in win.y0..win.y1 {
                        let g = &g_o[y * w + win.x0..y * w + win.x1];
                        let s0 = (((y as isize + win.oy) as usize) * w) as isize + win.x0 as isize + win.ox;
                        let s0 = s0 as usize;
                        acc += g.iter().zip(&in_i[s0..s0 + n]).map(|(&a, &b)| a * b).sum::<T>();
                        if let Some(di) = d_input.as_deref_mut() {
                            let di_i = &mut di[i * hw..(i + 1) * hw];
                            for (d, &gv) in di_i[s0..s0 + n].iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    }
                    d_weights[widx] += acc;
                }
            }
        }
    }
}

/// Output rows/cols whose tap `(ky, kx)` reads inside the image.
struct Window {
    oy: isize,
    ox: isize,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

impl Window {
    fn new(ky: usize, kx: usize, k: usize, h: usize, w: usize) -> Option<Self> {
        let p = (k / 2) as isize;
        let oy = ky as isize - p;
        let ox = kx as isize - p;
        let y0 = (-oy).max(0) as usize;
        let y1 = (h as isize - oy.max(0)).max(0) as usize;
        let x0 = (-ox).max(0) as usize;
        let x1 = (w as isize - ox.max(0)).max(0) as usize;
        (y0 < y1 && x0 < x1).then_some(Self { oy, ox, y0, y1, x0, x1 })
    }
}

struct HiddenCache<T> {
    input: Vec<T>,
    z: Vec<T>,
    act: Vec<T>,
    scale: Vec<T>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache<T> {
    h: usize,
    w: usize,
    embedding: Vec<T>,
    hidden: Vec<HiddenCache<T>>,
    last_input: Vec<T>,
}

/// Architecture descriptor plus flat weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T> {
    arch: Architecture,
    weights: Vec<T>,
}

impl<T: Real> DenoiserParams<T> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            weights: vec![T::zero(); arch.param_count()],
            arch,
        })
    }

    pub fn from_weights(arch: Architecture, weights: Vec<T>) -> Result<Self> {
        arch.validate()?;
        if weights.len() != arch.param_count() {
            return Err(Error::InvalidInput(format!(
                "architecture expects {} weights, got {}",
                arch.param_count(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("non-finite weight".into()));
        }
        Ok(Self { arch, weights })
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, zero output layer.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        Self::init_with(arch, seed, false)
    }

    /// Like [`init`](Self::init) but every tensor, including biases and the
    /// output layer, is random. Useful for gradient checks.
    pub fn init_dense(arch: Architecture, seed: u64) -> Result<Self> {
        Self::init_with(arch, seed, true)
    }

    fn init_with(arch: Architecture, seed: u64, dense: bool) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = rng::seeded(seed);
        let (layout, _) = arch.layout();
        let k2 = arch.kernel * arch.kernel;
        let mut fill = |buf: &mut [T], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in buf {
                *v = T::of(rng.random_range(-bound..bound));
            }
        };
        for l in &layout {
            let nw = l.cout * l.cin * k2;
            match l.hidden {
                Some((b, proj, pb)) => {
                    fill(&mut p.weights[l.w..l.w + nw], l.cin * k2);
                    fill(&mut p.weights[proj..proj + 2 * l.cout * arch.time_dim], arch.time_dim);
                    if dense {
                        fill(&mut p.weights[b..b + l.cout], l.cin * k2);
                        fill(&mut p.weights[pb..pb + 2 * l.cout], arch.time_dim);
                    }
                }
                None if dense => fill(&mut p.weights[l.w..l.w + nw], l.cin * k2),
                None => {}
            }
        }
        Ok(p)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        DenoiserParams {
            arch: self.arch,
            weights: self.weights.iter().map(|&w| U::of(w.f64())).collect(),
        }
    }

    fn check_inputs(&self, x_t: &[T], cond: &[T], h: usize, w: usize) -> Result<()> {
        if x_t.len() != h * w {
            return Err(Error::shape(&[h, w], &[x_t.len()]));
        }
        let cc = self.arch.cond_channels();
        if cond.len() != cc * h * w {
            return Err(Error::shape(&[cc, h, w], &[cond.len()]));
        }
        Ok(())
    }

    /// Predicted noise for `x_t` at step `t` under condition `cond`
    /// (channel-major, `n_few + 1` channels of `h x w`).
    pub fn predict(&self, x_t: &[T], t: usize, cond: &[T], h: usize, w: usize) -> Result<Vec<T>> {
        self.forward(x_t, t, cond, h, w).map(|(out, _)| out)
    }

    pub fn forward(
        &self,
        x_t: &[T],
        t: usize,
        cond: &[T],
        h: usize,
        w: usize,
    ) -> Result<(Vec<T>, ForwardCache<T>)> {
        self.check_inputs(x_t, cond, h, w)?;
        let arch = &self.arch;
        let hw = h * w;
        let k = arch.kernel;
        let e = arch.time_dim;
        let embedding: Vec<T> = time_embedding(t, e).into_iter().map(T::of).collect();
        let (layout, _) = arch.layout();

        let mut cur: Vec<T> = Vec::with_capacity(arch.in_channels() * hw);
        cur.extend_from_slice(x_t);
        cur.extend_from_slice(cond);

        let mut hidden = Vec::with_capacity(layout.len() - 1);
        for (li, l) in layout.iter().enumerate() {
            let wts = &self.weights[l.w..l.w + l.cout * l.cin * k * k];
            let mut z = vec![T::zero(); l.cout * hw];
            conv_forward(&cur, l.cin, wts, l.cout, k, h, w, &mut z);
            let Some((b, proj, pb)) = l.hidden else {
                if let Some(bad) = z.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite denoiser output at pixel {bad} (t = {t})"
                    )));
                }
                return Ok((
                    z,
                    ForwardCache {
                        h,
                        w,
                        embedding,
                        hidden,
                        last_input: cur,
                    },
                ));
            };
            let mut act = vec![T::zero(); l.cout * hw];
            let mut next = vec![T::zero(); l.cout * hw];
            let mut scale = vec![T::zero(); l.cout];
            for c in 0..l.cout {
                let bias = self.weights[b + c];
                let mut s = self.weights[pb + c];
                let mut sh = self.weights[pb + l.cout + c];
                let row_s = &self.weights[proj + c * e..proj + (c + 1) * e];
                let row_sh = &self.weights[proj + (l.cout + c) * e..proj + (l.cout + c + 1) * e];
                for j in 0..e {
                    s += row_s[j] * embedding[j];
                    sh += row_sh[j] * embedding[j];
                }
                scale[c] = s;
                let gain = T::one() + s;
                for p in c * hw..(c + 1) * hw {
                    z[p] += bias;
                    let a = z[p] * sigmoid(z[p]);
                    act[p] = a;
                    next[p] = a * gain + sh;
                }
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite activation in layer {li} (t = {t})"
                )));
            }
            hidden.push(HiddenCache {
                input: std::mem::replace(&mut cur, next),
                z,
                act,
                scale,
            });
        }
        unreachable!("the last layer always returns")
    }

    /// Accumulates `d(loss)/d(weights)` into `grad` given `d(loss)/d(output)`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: &[T], grad: &mut [T]) {
        let arch = &self.arch;
        let (h, w) = (cache.h, cache.w);
        let hw = h * w;
        let k = arch.kernel;
        let e = arch.time_dim;
        let (layout, _) = arch.layout();
        assert_eq!(grad.len(), self.weights.len());

        let last = layout.last().expect("at least two layers");
        let nw = last.cout * last.cin * k * k;
        let mut d_cur = vec![T::zero(); last.cin * hw];
        conv_backward(
            &cache.last_input,
            last.cin,
            &self.weights[last.w..last.w + nw],
            last.cout,
            k,
            h,
            w,
            d_out,
            &mut grad[last.w..last.w + nw],
            Some(&mut d_cur),
        );

        for (li, (l, hc)) in layout.iter().zip(&cache.hidden).enumerate().rev() {
            let (b, proj, pb) = l.hidden.expect("hidden layer");
            let mut dz = vec![T::zero(); l.cout * hw];
            for c in 0..l.cout {
                let gain = T::one() + hc.scale[c];
                let mut d_scale = T::zero();
                let mut d_shift = T::zero();
                let mut d_bias = T::zero();
                for p in c * hw..(c + 1) * hw {
                    let g = d_cur[p];
                    d_scale += g * hc.act[p];
                    d_shift += g;
                    let z = hc.z[p];
                    let sg = sigmoid(z);
                    let d = g * gain * sg * (T::one() + z * (T::one() - sg));
                    dz[p] = d;
                    d_bias += d;
                }
                grad[b + c] += d_bias;
                grad[pb + c] += d_scale;
                grad[pb + l.cout + c] += d_shift;
                for j in 0..e {
                    grad[proj + c * e + j] += d_scale * cache.embedding[j];
                    grad[proj + (l.cout + c) * e + j] += d_shift * cache.embedding[j];
                }
            }
            let nw = l.cout * l.cin * k * k;
            let mut d_in = (li > 0).then(|| vec![T::zero(); l.cin * hw]);
            conv_backward(
                &hc.input,
                l.cin,
                &self.weights[l.w..l.w + nw],
                l.cout,
                k,
                h,
                w,
                &dz,
                &mut grad[l.w..l.w + nw],
                d_in.as_deref_mut(),
            );
            if let Some(d) = d_in {
                d_cur = d;
            }
        }
    }
}
