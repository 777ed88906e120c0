//! Temporal speckle contrast, the inverse-square flow prior, and percentile
//! normalization to `[-1, 1]`.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::register::SpeckleSequence;

pub const DEFAULT_CONTRAST_EPS: f64 = 1e-6;
pub const DEFAULT_FLOW_EPS: f64 = 1e-6;
pub const DEFAULT_LO_PCT: f64 = 0.5;
pub const DEFAULT_HI_PCT: f64 = 99.5;

/// Per-pixel temporal contrast `K = sigma / (mu + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastMap(Array2<f64>);

/// Relative flow surrogate `1 / (K^2 + eps)`; strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap(Array2<f64>);

macro_rules! map_newtype {
    ($ty:ident, $check:expr, $what:literal) => {
        impl $ty {
            pub fn new(values: Array2<f64>) -> Result<Self> {
                let check: fn(f64) -> bool = $check;
                if let Some(v) = values.iter().find(|v| !check(**v)) {
                    return Err(Error::InvalidInput(format!(
                        concat!($what, " value out of domain: {}"),
                        v
                    )));
                }
                Ok(Self(values))
            }

            pub fn view(&self) -> ArrayView2<'_, f64> {
                self.0.view()
            }

            pub fn as_array(&self) -> &Array2<f64> {
                &self.0
            }

            pub fn into_inner(self) -> Array2<f64> {
                self.0
            }

            pub fn dim(&self) -> (usize, usize) {
                self.0.dim()
            }
        }
    };
}

map_newtype!(ContrastMap, |v| v.is_finite() && v >= 0.0, "contrast");
map_newtype!(FlowMap, |v| v.is_finite() && v > 0.0, "flow");

/// Clip range recorded by [`robust_normalize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationRecord {
    pub lo: f64,
    pub hi: f64,
}

impl NormalizationRecord {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidInput(format!(
                "normalization range must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn range(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn normalize_value(&self, v: f64) -> f64 {
        (2.0 * (v - self.lo) / (self.hi - self.lo) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn denormalize_value(&self, n: f64) -> f64 {
        let n = n.clamp(-1.0, 1.0);
        self.lo + (n + 1.0) * 0.5 * (self.hi - self.lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    pub contrast_eps: f64,
    pub flow_eps: f64,
    pub lo_pct: f64,
    pub hi_pct: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            contrast_eps: DEFAULT_CONTRAST_EPS,
            flow_eps: DEFAULT_FLOW_EPS,
            lo_pct: DEFAULT_LO_PCT,
            hi_pct: DEFAULT_HI_PCT,
        }
    }
}

/// Temporal mean and population standard deviation (`1/N`) per pixel.
pub fn temporal_stats(seq: &SpeckleSequence) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = seq.n_frames();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "temporal statistics need at least 2 frames, got {n}"
        )));
    }
    let data = seq.data();
    let mu = data.sum_axis(Axis(0)) / n as f64;
    let mut ss = Array2::<f64>::zeros(mu.dim());
    for frame in data.outer_iter() {
        Zip::from(&mut ss).and(&frame).and(&mu).for_each(|s, &v, &m| {
            let d = v - m;
            *s += d * d;
        });
    }
    let sigma = ss.mapv(|s| (s / n as f64).sqrt());
    Ok((mu, sigma))
}

/// `K = sigma / (mu + eps)`. Pixels with zero variance give `K = 0` even when
/// `mu + eps` is zero.
pub fn contrast_map(mu: ArrayView2<f64>, sigma: ArrayView2<f64>, eps: f64) -> Result<ContrastMap> {
    if mu.dim() != sigma.dim() {
        return Err(Error::shape(mu.shape(), sigma.shape()));
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidInput(format!("contrast eps must be >= 0, got {eps}")));
    }
    let k = Zip::from(&mu).and(&sigma).map_collect(|&m, &s| {
        if s == 0.0 {
            0.0
        } else {
            s / (m + eps)
        }
    });
    ContrastMap::new(k)
}

/// `F = 1 / (K^2 + eps)`.
pub fn flow_prior(k: &ContrastMap, eps: f64) -> Result<FlowMap> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("flow eps must be > 0, got {eps}")));
    }
    FlowMap::new(k.view().mapv(|k| 1.0 / (k * k + eps)))
}

/// Contrast and flow prior of a (registered) sequence.
pub fn flow_from_sequence(seq: &SpeckleSequence, cfg: &ContrastConfig) -> Result<(ContrastMap, FlowMap)> {
    let (mu, sigma) = temporal_stats(seq)?;
    let k = contrast_map(mu.view(), sigma.view(), cfg.contrast_eps)?;
    let f = flow_prior(&k, cfg.flow_eps)?;
    Ok((k, f))
}

/// Percentile with linear interpolation between closest order statistics,
/// at rank `p/100 * (n - 1)`. `sorted` must be ascending.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Percentile-clip range of a map.
pub fn percentile_record(map: ArrayView2<f64>, lo_pct: f64, hi_pct: f64) -> Result<NormalizationRecord> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::InvalidInput(format!(
            "invalid percentile pair ({lo_pct}, {hi_pct})"
        )));
    }
    if map.is_empty() {
        return Err(Error::InvalidInput("cannot normalize an empty map".into()));
    }
    let mut sorted: Vec<f64> = map.iter().copied().collect();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in map to normalize".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, lo_pct);
    let hi = percentile_sorted(&sorted, hi_pct);
    if hi <= lo {
        return Err(Error::InvalidInput(format!(
            "map is constant over the clip range ({lo} .. {hi})"
        )));
    }
    NormalizationRecord::new(lo, hi)
}

/// Clips a map at its `lo_pct`/`hi_pct` percentiles and maps it affinely onto `[-1, 1]`.
pub fn robust_normalize(
    map: ArrayView2<f64>,
    lo_pct: f64,
    hi_pct: f64,
) -> Result<(Array2<f64>, NormalizationRecord)> {
    let record = percentile_record(map, lo_pct, hi_pct)?;
    Ok((map.mapv(|v| record.normalize_value(v)), record))
}

/// Inverse affine map of [`robust_normalize`]; inputs are clamped to `[-1, 1]`.
pub fn denormalize(normalized: ArrayView2<f64>, record: &NormalizationRecord) -> Array2<f64> {
    normalized.mapv(|n| record.denormalize_value(n))
}
