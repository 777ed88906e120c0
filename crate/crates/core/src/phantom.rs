//! Synthetic speckle phantoms with known contrast, intensity and motion.
//!
//! Each pixel follows a multiplicative Gaussian model
//! `I_t(x) = mu(x) * max(0, 1 + k(x) z_t(x))`, so the temporal contrast of a
//! static sequence converges to `k(x)`. Frames are then displaced by the
//! per-frame motion with the same resampling rule used for alignment, which
//! means `apply_shift(frame_t, -motion[t])` restores the unshifted frame.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::contrast::{flow_from_sequence, ContrastConfig, FlowMap};
use crate::error::{Error, Result};
use crate::register::{apply_shift, Displacement, ShiftMode, SpeckleSequence};
use crate::rng::{self, SeededRng};

/// Largest contrast the multiplicative model supports without noticeable clipping bias.
pub const MAX_K: f64 = 0.35;

/// A straight vessel segment, endpoints in `(row, col)` pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Vessel {
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub radius: f64,
    pub k_true: f64,
    /// Mean intensity inside the vessel relative to `base_intensity`.
    #[serde(default = "unit")]
    pub intensity: f64,
}

fn unit() -> f64 {
    1.0
}

impl Vessel {
    pub fn new(start: (f64, f64), end: (f64, f64), radius: f64, k_true: f64) -> Self {
        Self {
            start,
            end,
            radius,
            k_true,
            intensity: 1.0,
        }
    }

    pub fn with_intensity(mut self, intensity: f64) -> Self {
        self.intensity = intensity;
        self
    }

    /// Euclidean distance from point `p` to the segment.
    pub fn distance(&self, p: (f64, f64)) -> f64 {
        let (ay, ax) = self.start;
        let (by, bx) = self.end;
        let (dy, dx) = (by - ay, bx - ax);
        let len2 = dy * dy + dx * dx;
        let s = (((p.0 - ay) * dy + (p.1 - ax) * dx) / len2).clamp(0.0, 1.0);
        let (cy, cx) = (ay + s * dy, ax + s * dx);
        ((p.0 - cy).powi(2) + (p.1 - cx).powi(2)).sqrt()
    }

    fn length(&self) -> f64 {
        ((self.end.0 - self.start.0).powi(2) + (self.end.1 - self.start.1).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub n_frames: usize,
    pub vessels: Vec<Vessel>,
    pub background_k: f64,
    pub base_intensity: f64,
    /// Per-frame displacement; entry 0 must be zero.
    pub motion: Vec<Displacement>,
    pub shift_mode: ShiftMode,
    /// Amplitude in `[0, 1)` of a frozen per-pixel texture multiplying `mu`
    /// (speckle from static scatterers). Zero keeps `mu` piecewise constant.
    pub texture: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// A motionless phantom.
    pub fn static_phantom(
        height: usize,
        width: usize,
        n_frames: usize,
        vessels: Vec<Vessel>,
        background_k: f64,
        base_intensity: f64,
        seed: u64,
    ) -> Self {
        Self {
            height,
            width,
            n_frames,
            vessels,
            background_k,
            base_intensity,
            motion: vec![Displacement::ZERO; n_frames],
            shift_mode: ShiftMode::Circular,
            texture: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if self.height == 0 || self.width == 0 {
            return bad(format!("phantom size {}x{} is empty", self.height, self.width));
        }
        if self.n_frames < 2 {
            return bad(format!("phantom needs at least 2 frames, got {}", self.n_frames));
        }
        if !(0.0..1.0).contains(&self.texture) {
            return bad(format!("texture amplitude {} outside [0, 1)", self.texture));
        }
        // k = 0 is accepted as the noise-free degenerate case.
        let k_ok = |k: f64| (0.0..=MAX_K).contains(&k);
        if !k_ok(self.background_k) {
            return bad(format!("background_k {} outside [0, {MAX_K}]", self.background_k));
        }
        if !(self.base_intensity > 0.0 && self.base_intensity.is_finite()) {
            return bad(format!("base_intensity must be positive, got {}", self.base_intensity));
        }
        for (i, v) in self.vessels.iter().enumerate() {
            if !k_ok(v.k_true) {
                return bad(format!("vessel {i}: k_true {} outside [0, {MAX_K}]", v.k_true));
            }
            if !(v.radius > 0.0) {
                return bad(format!("vessel {i}: radius must be positive"));
            }
            if !(v.intensity > 0.0 && v.intensity.is_finite()) {
                return bad(format!("vessel {i}: intensity must be positive"));
            }
            if !(v.length() > 0.0) {
                return bad(format!("vessel {i}: zero-length segment"));
            }
        }
        if self.motion.len() != self.n_frames {
            return bad(format!(
                "motion has {} entries for {} frames",
                self.motion.len(),
                self.n_frames
            ));
        }
        if self.motion[0] != Displacement::ZERO {
            return bad("first motion entry must be (0, 0)".into());
        }
        if let Some(d) = self
            .motion
            .iter()
            .find(|d| !d.is_decodable(self.height, self.width))
        {
            return bad(format!(
                "motion {d:?} not decodable on {}x{}",
                self.height, self.width
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomGroundTruth {
    pub k_true_map: Array2<f64>,
    pub mu_map: Array2<f64>,
    pub shifts: Vec<Displacement>,
    /// Flow prior of the full unshifted sequence.
    pub hq_flow: FlowMap,
}

/// Rasterizes the vessels into `(mu_map, k_true_map)`.
///
/// A pixel belongs to a vessel when its distance to the center line is at
/// most the radius. Where vessels overlap the smallest `k_true` wins, along
/// with that vessel's intensity. A nonzero `texture` then scales `mu` by
/// `1 + texture * u(x)` with `u` uniform on `[-1, 1]`, drawn from a substream
/// reserved for the texture.
pub fn build_phantom(spec: &PhantomSpec) -> Result<(Array2<f64>, Array2<f64>)> {
    spec.validate()?;
    let mut mu = Array2::from_elem((spec.height, spec.width), spec.base_intensity);
    let mut k = Array2::from_elem((spec.height, spec.width), spec.background_k);
    let mut owner: Array2<Option<f64>> = Array2::from_elem((spec.height, spec.width), None);
    for v in &spec.vessels {
        for ((y, x), cur) in owner.indexed_iter_mut() {
            if v.distance((y as f64, x as f64)) > v.radius {
                continue;
            }
            if cur.is_none_or(|kc| v.k_true < kc) {
                *cur = Some(v.k_true);
                k[[y, x]] = v.k_true;
                mu[[y, x]] = spec.base_intensity * v.intensity;
            }
        }
    }
    if spec.texture > 0.0 {
        let mut rng = rng::substream(spec.seed, TEXTURE_STREAM);
        mu.mapv_inplace(|m| m * (1.0 + spec.texture * rng.random_range(-1.0..=1.0)));
    }
    Ok((mu, k))
}

const TEXTURE_STREAM: u64 = u64::MAX;

fn speckle_frame(mu: &Array2<f64>, k: &Array2<f64>, rng: &mut SeededRng) -> Array2<f64> {
    let z = rng::normals_f64(rng, mu.len());
    let mut out = Array2::zeros(mu.dim());
    for (((o, &m), &kk), &zz) in out.iter_mut().zip(mu.iter()).zip(k.iter()).zip(z.iter()) {
        *o = m * (1.0 + kk * zz).max(0.0);
    }
    out
}

/// Unshifted speckle frames; frame `t` draws from substream `t` of the seed.
pub fn unshifted_frames(spec: &PhantomSpec) -> Result<(Array2<f64>, Array2<f64>, Array3<f64>)> {
    let (mu, k) = build_phantom(spec)?;
    let frames: Vec<Array2<f64>> = (0..spec.n_frames)
        .into_par_iter()
        .map(|t| speckle_frame(&mu, &k, &mut rng::substream(spec.seed, t as u64)))
        .collect();
    let mut data = Array3::zeros((spec.n_frames, spec.height, spec.width));
    for (t, f) in frames.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), t).assign(&f);
    }
    Ok((mu, k, data))
}

/// Generates the observed (moving) sequence and its ground truth.
pub fn synthesize_sequence(spec: &PhantomSpec) -> Result<(SpeckleSequence, PhantomGroundTruth)> {
    let (mu, k, raw) = unshifted_frames(spec)?;
    let unshifted = SpeckleSequence::new(raw)?;
    let (_, hq_flow) = flow_from_sequence(&unshifted, &ContrastConfig::default())?;

    let mut moved = Array3::zeros(unshifted.data().dim());
    for (t, d) in spec.motion.iter().enumerate() {
        let frame = apply_shift(unshifted.frame(t), *d, spec.shift_mode);
        moved.index_axis_mut(Axis(0), t).assign(&frame);
    }
    Ok((
        SpeckleSequence::new(moved)?,
        PhantomGroundTruth {
            k_true_map: k,
            mu_map: mu,
            shifts: spec.motion.clone(),
            hq_flow,
        },
    ))
}

/// Bounded random walk starting at `(0, 0)`: each step moves by `{-1, 0, 1}`
/// per axis and reflects at `±max_shift`.
pub fn random_walk_motion(n_frames: usize, max_shift: i32, seed: u64) -> Vec<Displacement> {
    let mut rng = rng::seeded(seed);
    let reflect = |v: i32| {
        if max_shift == 0 {
            0
        } else if v > max_shift {
            2 * max_shift - v
        } else if v < -max_shift {
            -2 * max_shift - v
        } else {
            v
        }
    };
    let mut cur = Displacement::ZERO;
    let mut out = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        if t > 0 {
            let sy = rng.random_range(-1..=1);
            let sx = rng.random_range(-1..=1);
            cur = Displacement::new(reflect(cur.dy + sy), reflect(cur.dx + sx));
        }
        out.push(cur);
    }
    out
}

/// Ranges for randomly drawn vessel layouts.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VesselLayout {
    pub min_vessels: usize,
    pub max_vessels: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub min_k: f64,
    pub max_k: f64,
    pub intensity: f64,
}

impl Default for VesselLayout {
    fn default() -> Self {
        Self {
            min_vessels: 2,
            max_vessels: 4,
            min_radius: 1.0,
            max_radius: 2.5,
            min_k: 0.08,
            max_k: 0.14,
            intensity: 0.5,
        }
    }
}

/// Random straight vessels crossing an `h x w` field.
pub fn random_vessels(h: usize, w: usize, layout: &VesselLayout, rng: &mut SeededRng) -> Vec<Vessel> {
    let count = rng.random_range(layout.min_vessels..=layout.max_vessels.max(layout.min_vessels));
    let (hf, wf) = (h as f64, w as f64);
    let diag = (hf * hf + wf * wf).sqrt();
    (0..count)
        .map(|_| {
            let cy = rng.random_range(0.15..0.85) * hf;
            let cx = rng.random_range(0.15..0.85) * wf;
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let half = 0.5 * diag;
            let (s, c) = angle.sin_cos();
            let radius = lerp(layout.min_radius, layout.max_radius, rng.random::<f64>());
            let k = lerp(layout.min_k, layout.max_k, rng.random::<f64>());
            Vessel::new((cy - half * s, cx - half * c), (cy + half * s, cx + half * c), radius, k)
                .with_intensity(layout.intensity)
        })
        .collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrast::{contrast_map, temporal_stats};

    fn spec(h: usize, w: usize, n: usize, vessels: Vec<Vessel>, bg: f64) -> PhantomSpec {
        PhantomSpec::static_phantom(h, w, n, vessels, bg, 100.0, 42)
    }

    #[test]
    fn no_vessels_uniform_background() {
        let (mu, k) = build_phantom(&spec(16, 16, 2, vec![], 0.2)).unwrap();
        assert!(k.iter().all(|&v| v == 0.2));
        assert!(mu.iter().all(|&v| v == 100.0));
    }

    #[test]
    fn horizontal_vessel_rasterization() {
        let v = Vessel::new((32.0, 0.0), (32.0, 63.0), 3.0, 0.1);
        let (_, k) = build_phantom(&spec(64, 64, 2, vec![v], 0.3)).unwrap();
        for ((y, x), &kv) in k.indexed_iter() {
            // Brute force: distance to the row-32 line inside its column span.
            let inside = (y as f64 - 32.0).abs() <= 3.0;
            assert_eq!(kv == 0.1, inside, "pixel ({y},{x})");
        }
    }

    #[test]
    fn crossing_vessels_take_minimum() {
        let a = Vessel::new((16.0, 0.0), (16.0, 31.0), 2.0, 0.3).with_intensity(0.8);
        let b = Vessel::new((0.0, 16.0), (31.0, 16.0), 2.0, 0.1).with_intensity(0.4);
        let (mu, k) = build_phantom(&spec(32, 32, 2, vec![a, b], 0.35)).unwrap();
        assert_eq!(k[[16, 16]], 0.1);
        assert_eq!(mu[[16, 16]], 40.0);
        assert_eq!(k[[16, 2]], 0.3);
        assert_eq!(k[[2, 16]], 0.1);
    }

    #[test]
    fn texture_scales_mu_only() {
        let mut s = spec(16, 16, 2, vec![], 0.2);
        s.texture = 0.5;
        let (mu, k) = build_phantom(&s).unwrap();
        assert!(k.iter().all(|&v| v == 0.2));
        assert!(mu.iter().all(|&m| (50.0..=150.0).contains(&m)));
        assert!(mu.iter().any(|&m| m != 100.0));
        s.texture = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn degenerate_segment_rejected() {
        let v = Vessel::new((4.0, 4.0), (4.0, 4.0), 1.0, 0.1);
        assert!(build_phantom(&spec(8, 8, 2, vec![v], 0.2)).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(spec(8, 8, 2, vec![], 0.4).validate().is_err());
        let mut s = spec(8, 8, 2, vec![], 0.2);
        s.motion = vec![Displacement::ZERO];
        assert!(s.validate().is_err());
        s.motion = vec![Displacement::new(1, 0), Displacement::ZERO];
        assert!(s.validate().is_err());
        s.motion = vec![Displacement::ZERO, Displacement::new(4, 0)];
        assert!(s.validate().is_err());
        s.motion = vec![Displacement::ZERO, Displacement::new(3, -3)];
        assert!(s.validate().is_ok());
    }

    #[test]
    fn zero_contrast_frames_equal_shifted_mu() {
        let v = Vessel::new((8.0, 0.0), (8.0, 15.0), 2.0, 0.0).with_intensity(0.5);
        let mut s = spec(16, 16, 4, vec![v], 0.0);
        s.motion = vec![
            Displacement::ZERO,
            Displacement::new(1, 2),
            Displacement::new(-3, 0),
            Displacement::new(0, -1),
        ];
        let (seq, gt) = synthesize_sequence(&s).unwrap();
        for (t, d) in s.motion.iter().enumerate() {
            assert_eq!(seq.frame(t), apply_shift(gt.mu_map.view(), *d, ShiftMode::Circular));
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let mut s = spec(16, 16, 10, vec![], 0.3);
        s.motion = random_walk_motion(10, 3, 9);
        let (a, _) = synthesize_sequence(&s).unwrap();
        let (b, _) = synthesize_sequence(&s).unwrap();
        assert_eq!(a, b);
        s.seed += 1;
        let (c, _) = synthesize_sequence(&s).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn undoing_motion_restores_unshifted_frames() {
        let mut s = spec(16, 16, 6, vec![], 0.3);
        s.motion = random_walk_motion(6, 4, 3);
        let (seq, _) = synthesize_sequence(&s).unwrap();
        let (_, _, raw) = unshifted_frames(&s).unwrap();
        for (t, d) in s.motion.iter().enumerate() {
            let back = apply_shift(seq.frame(t), -*d, ShiftMode::Circular);
            assert_eq!(back, raw.index_axis(Axis(0), t));
        }
    }

    #[test]
    fn static_contrast_recovers_k_true() {
        // Monte-Carlo check over the generator: N = 200, k = 0.3.
        let s = spec(32, 32, 200, vec![], 0.3);
        let (seq, gt) = synthesize_sequence(&s).unwrap();
        let (mu, sigma) = temporal_stats(&seq).unwrap();
        let k = contrast_map(mu.view(), sigma.view(), 1e-6).unwrap();
        let mut rel: Vec<f64> = k.view().iter().map(|&v| ((v - 0.3) / 0.3).abs()).collect();
        rel.sort_by(f64::total_cmp);
        let median = rel[rel.len() / 2];
        assert!(median < 0.05, "median relative error {median}");
        // Sampling sd of K at N = 200 is about 5.4% of k, so roughly 64% of
        // pixels land within 5%.
        let frac = rel.iter().filter(|&&r| r < 0.05).count() as f64 / rel.len() as f64;
        assert!(frac > 0.5, "fraction within 5%: {frac}");
        assert!(gt.hq_flow.view().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn random_walk_bounded() {
        let m = random_walk_motion(500, 3, 1);
        assert_eq!(m[0], Displacement::ZERO);
        assert!(m.iter().all(|d| d.dy.abs() <= 3 && d.dx.abs() <= 3));
        for w in m.windows(2) {
            assert!((w[1].dy - w[0].dy).abs() <= 1 && (w[1].dx - w[0].dx).abs() <= 1);
        }
        assert!(m.iter().any(|d| d.dy.abs() == 3));
    }

    #[test]
    fn random_vessels_are_valid() {
        let mut rng = rng::seeded(5);
        for _ in 0..20 {
            let vs = random_vessels(32, 32, &VesselLayout::default(), &mut rng);
            let s = spec(32, 32, 2, vs, 0.3);
            assert!(s.validate().is_ok());
        }
    }
}
