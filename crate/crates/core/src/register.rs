//! Stage-1 motion stabilization.
//!
//! Each frame is registered against a reference (frame 0 by default) with
//! phase correlation: the normalized cross-power spectrum is inverted and the
//! integer location of its real peak is decoded into a signed translation.
//! Frames are then resampled by exact integer shifts.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Default phase-correlation stabilizer, relative to the peak numerator magnitude.
pub const DEFAULT_PHASE_EPS: f64 = 1e-8;
/// Correlation peaks below this are reported as low confidence.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.03;

/// An `N x H x W` stack of nonnegative intensity frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeckleSequence {
    data: Array3<f64>,
}

impl SpeckleSequence {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (n, h, w) = data.dim();
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "speckle sequence must be non-empty, got {n}x{h}x{w}"
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "speckle intensities must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self { data })
    }

    pub fn from_frames(frames: &[Array2<f64>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidInput("no frames".into()))?;
        let (h, w) = first.dim();
        let mut data = Array3::zeros((frames.len(), h, w));
        for (t, f) in frames.iter().enumerate() {
            if f.dim() != (h, w) {
                return Err(Error::shape(&[h, w], f.shape()));
            }
            data.index_axis_mut(Axis(0), t).assign(f);
        }
        Self::new(data)
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), t)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// The first `n` frames as a new sequence.
    pub fn head(&self, n: usize) -> Result<Self> {
        self.window(0, n)
    }

    /// Frames `start..start + n`.
    pub fn window(&self, start: usize, n: usize) -> Result<Self> {
        if n == 0 || start + n > self.n_frames() {
            return Err(Error::InvalidInput(format!(
                "frame window {start}..{} outside sequence of {} frames",
                start + n,
                self.n_frames()
            )));
        }
        Ok(Self {
            data: self
                .data
                .slice(ndarray::s![start..start + n, .., ..])
                .to_owned(),
        })
    }
}

/// Integer translation `(dy, dx)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Displacement {
    pub dy: i32,
    pub dx: i32,
}

impl Displacement {
    pub const ZERO: Displacement = Displacement { dy: 0, dx: 0 };

    pub const fn new(dy: i32, dx: i32) -> Self {
        Self { dy, dx }
    }

    pub fn l1(&self) -> i32 {
        self.dy.abs() + self.dx.abs()
    }

    /// True when the shift decodes unambiguously on an `h x w` grid.
    pub fn is_decodable(&self, h: usize, w: usize) -> bool {
        (2 * self.dy.unsigned_abs() as usize) < h && (2 * self.dx.unsigned_abs() as usize) < w
    }
}

impl std::ops::Neg for Displacement {
    type Output = Displacement;
    fn neg(self) -> Self::Output {
        Displacement::new(-self.dy, -self.dx)
    }
}

/// Treatment of pixels vacated by a shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    #[default]
    Circular,
    ZeroFill,
}

/// Frame that all others are registered against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    #[default]
    First,
    /// Per-pixel temporal median of the raw sequence.
    Median,
}

/// Result of registering one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftEstimate {
    pub shift: Displacement,
    /// Height of the phase-correlation peak, 1.0 for a perfect match.
    pub peak: f64,
    /// Peak fell below the confidence threshold; `shift` is forced to zero.
    pub low_confidence: bool,
}

struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            col_fwd: planner.plan_fft_forward(h),
            row_inv: planner.plan_fft_inverse(w),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(buf);
        let mut column = vec![Complex64::default(); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
    }

    fn forward_real(&self, img: ArrayView2<f64>) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = img.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        buf
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

fn check_same_dims(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(b.shape(), a.shape()));
    }
    Ok(())
}

fn normalized_cross_power(f: &[Complex64], g: &[Complex64], eps: f64) -> Vec<Complex64> {
    let num: Vec<Complex64> = f.iter().zip(g).map(|(a, b)| a * b.conj()).collect();
    let peak = num.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let eps_abs = if peak > 0.0 { eps * peak } else { eps };
    num.into_iter().map(|c| c / (c.norm() + eps_abs)).collect()
}

/// Normalized cross-power spectrum `F(frame) conj(F(ref)) / (|.| + eps)`.
///
/// `eps` is scaled by the largest numerator magnitude, so the result does
/// not depend on the overall intensity scale. All magnitudes are below 1.
pub fn cross_power_spectrum(
    frame: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    eps: f64,
) -> Result<Array2<Complex64>> {
    check_same_dims(frame, reference)?;
    check_eps(eps)?;
    let (h, w) = frame.dim();
    let fft = Fft2::new(h, w);
    let r = normalized_cross_power(&fft.forward_real(frame), &fft.forward_real(reference), eps);
    Ok(Array2::from_shape_vec((h, w), r).expect("length matches h*w"))
}

/// Maps an FFT index to a signed offset: `p > n/2` wraps to `p - n`.
pub fn decode_index(p: usize, n: usize) -> i32 {
    if p > n / 2 {
        p as i32 - n as i32
    } else {
        p as i32
    }
}

/// Phase-correlation estimator with a cached reference spectrum.
pub struct PhaseCorrelator {
    fft: Fft2,
    reference: Vec<Complex64>,
    eps: f64,
    threshold: f64,
}

impl PhaseCorrelator {
    pub fn new(reference: ArrayView2<f64>, eps: f64, threshold: f64) -> Result<Self> {
        check_eps(eps)?;
        let (h, w) = reference.dim();
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "registration needs even, nonzero frame dimensions, got {h}x{w}"
            )));
        }
        let fft = Fft2::new(h, w);
        let reference = fft.forward_real(reference);
        Ok(Self {
            fft,
            reference,
            eps,
            threshold,
        })
    }

    /// Correlation surface `Re(ifft(R)) / (H W)`, peak 1 for identical frames.
    pub fn correlation_surface(&self, frame: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (h, w) = (self.fft.h, self.fft.w);
        if frame.dim() != (h, w) {
            return Err(Error::shape(&[h, w], frame.shape()));
        }
        let mut r = normalized_cross_power(&self.fft.forward_real(frame), &self.reference, self.eps);
        self.fft.transform(&mut r, true);
        let scale = 1.0 / (h * w) as f64;
        Ok(Array2::from_shape_fn((h, w), |(y, x)| r[y * w + x].re * scale))
    }

    pub fn estimate(&self, frame: ArrayView2<f64>) -> Result<ShiftEstimate> {
        let surface = self.correlation_surface(frame)?;
        let (h, w) = surface.dim();
        let mut best: Option<(f64, Displacement)> = None;
        for ((y, x), &v) in surface.indexed_iter() {
            let d = Displacement::new(decode_index(y, h), decode_index(x, w));
            let better = match best {
                None => true,
                Some((bv, bd)) => {
                    v > bv || (v == bv && (d.l1(), d.dy, d.dx) < (bd.l1(), bd.dy, bd.dx))
                }
            };
            if better {
                best = Some((v, d));
            }
        }
        let (peak, shift) = best.expect("surface is non-empty");
        if !peak.is_finite() {
            return Err(Error::Numerical("non-finite phase-correlation peak".into()));
        }
        let low_confidence = peak < self.threshold;
        Ok(ShiftEstimate {
            shift: if low_confidence { Displacement::ZERO } else { shift },
            peak,
            low_confidence,
        })
    }
}

/// Shift `d` such that `apply_shift(frame, d)` lines `frame` up with `reference`.
///
/// Ties between equal peaks go to the smallest `|dy| + |dx|`, then the
/// lexicographically smallest `(dy, dx)`.
pub fn estimate_shift(
    frame: ArrayView2<f64>,
    reference: ArrayView2<f64>,
    eps: f64,
    threshold: f64,
) -> Result<ShiftEstimate> {
    check_same_dims(frame, reference)?;
    PhaseCorrelator::new(reference, eps, threshold)?.estimate(frame)
}

/// Resamples `out(y, x) = frame(y + dy, x + dx)`.
///
/// In zero-fill mode pixels whose source falls outside the frame are set to 0;
/// see [`validity_mask`] for the matching mask.
pub fn apply_shift(frame: ArrayView2<f64>, d: Displacement, mode: ShiftMode) -> Array2<f64> {
    let (h, w) = frame.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        match source_index(y, x, h, w, d, mode) {
            Some((sy, sx)) => frame[[sy, sx]],
            None => 0.0,
        }
    })
}

/// Pixels of `apply_shift(.., d, mode)` that carry real data.
pub fn validity_mask(h: usize, w: usize, d: Displacement, mode: ShiftMode) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| source_index(y, x, h, w, d, mode).is_some())
}

fn source_index(
    y: usize,
    x: usize,
    h: usize,
    w: usize,
    d: Displacement,
    mode: ShiftMode,
) -> Option<(usize, usize)> {
    let sy = y as i64 + d.dy as i64;
    let sx = x as i64 + d.dx as i64;
    match mode {
        ShiftMode::Circular => Some((
            sy.rem_euclid(h as i64) as usize,
            sx.rem_euclid(w as i64) as usize,
        )),
        ShiftMode::ZeroFill => {
            if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                Some((sy as usize, sx as usize))
            } else {
                None
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub eps: f64,
    pub mode: ShiftMode,
    pub confidence_threshold: f64,
    pub reference: Reference,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_PHASE_EPS,
            mode: ShiftMode::Circular,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            reference: Reference::First,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stabilized {
    pub aligned: SpeckleSequence,
    pub shifts: Vec<Displacement>,
    /// Phase-correlation peak per frame.
    pub confidence: Vec<f64>,
    pub low_confidence: Vec<bool>,
    /// Pixels valid in every aligned frame (all true in circular mode).
    pub valid: Array2<bool>,
}

fn median_frame(seq: &SpeckleSequence) -> Array2<f64> {
    let data = seq.data();
    let (n, h, w) = data.dim();
    let mut buf = vec![0.0; n];
    Array2::from_shape_fn((h, w), |(y, x)| {
        for t in 0..n {
            buf[t] = data[[t, y, x]];
        }
        buf.sort_by(f64::total_cmp);
        if n % 2 == 1 {
            buf[n / 2]
        } else {
            0.5 * (buf[n / 2 - 1] + buf[n / 2])
        }
    })
}

/// Registers every frame against the reference and resamples the sequence.
///
/// Low-confidence frames are kept (with a zero shift) and flagged; the caller
/// decides whether to drop them.
pub fn stabilize(seq: &SpeckleSequence, cfg: &RegistrationConfig) -> Result<Stabilized> {
    if seq.n_frames() < 2 {
        return Err(Error::InvalidInput(
            "stabilization needs at least two frames".into(),
        ));
    }
    let reference = match cfg.reference {
        Reference::First => seq.frame(0).to_owned(),
        Reference::Median => median_frame(seq),
    };
    let correlator = PhaseCorrelator::new(reference.view(), cfg.eps, cfg.confidence_threshold)?;
    let (h, w) = (seq.height(), seq.width());

    let results: Vec<(ShiftEstimate, Array2<f64>)> = (0..seq.n_frames())
        .into_par_iter()
        .map(|t| {
            let frame = seq.frame(t);
            let est = if t == 0 && cfg.reference == Reference::First {
                ShiftEstimate {
                    shift: Displacement::ZERO,
                    peak: 1.0,
                    low_confidence: false,
                }
            } else {
                correlator.estimate(frame)?
            };
            Ok((est, apply_shift(frame, est.shift, cfg.mode)))
        })
        .collect::<Result<_>>()?;

    let mut data = Array3::zeros((seq.n_frames(), h, w));
    let mut valid = Array2::from_elem((h, w), true);
    let mut shifts = Vec::with_capacity(results.len());
    let mut confidence = Vec::with_capacity(results.len());
    let mut low_confidence = Vec::with_capacity(results.len());
    for (t, (est, frame)) in results.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), t).assign(&frame);
        let mask = validity_mask(h, w, est.shift, cfg.mode);
        Zip::from(&mut valid).and(&mask).for_each(|v, &m| *v &= m);
        shifts.push(est.shift);
        confidence.push(est.peak);
        low_confidence.push(est.low_confidence);
    }
    Ok(Stabilized {
        aligned: SpeckleSequence::new(data)?,
        shifts,
        confidence,
        low_confidence,
        valid,
    })
}
