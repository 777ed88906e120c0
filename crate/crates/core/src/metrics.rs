//! Image fidelity: SSIM, PSNR and MAE between flow maps, plus per-method
//! aggregation and CSV output.

use std::fmt;
use std::io::Write;

use ndarray::{Array2, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrast::{percentile_record, FlowMap, DEFAULT_HI_PCT, DEFAULT_LO_PCT};
use crate::{Error, Result};

pub const DEFAULT_WINDOW: usize = 11;
pub const DEFAULT_SIGMA: f64 = 1.5;
pub const DEFAULT_K1: f64 = 0.01;
pub const DEFAULT_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range L of the compared maps.
    pub dynamic_range: f64,
}

impl SsimConfig {
    pub fn with_range(dynamic_range: f64) -> Self {
        Self {
            window: DEFAULT_WINDOW,
            sigma: DEFAULT_SIGMA,
            k1: DEFAULT_K1,
            k2: DEFAULT_K2,
            dynamic_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidInput(format!("SSIM window must be odd, got {}", self.window)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("SSIM sigma must be positive, got {}", self.sigma)));
        }
        if !(self.dynamic_range > 0.0 && self.dynamic_range.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "dynamic range must be positive, got {}",
                self.dynamic_range
            )));
        }
        if self.k1 < 0.0 || self.k2 < 0.0 {
            return Err(Error::InvalidInput("SSIM stabilizer constants must be nonnegative".into()));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian; the 2-D window is its outer product.
    pub fn kernel_1d(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Peak signal-to-noise ratio. Identical inputs have no finite value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Identical,
    Db(f64),
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Identical => None,
            Psnr::Db(v) => Some(v),
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Identical => f.write_str("identical"),
            Psnr::Db(v) => write!(f, "{v}"),
        }
    }
}

fn check_same(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        let (h, w) = b.dim();
        let (ah, aw) = a.dim();
        return Err(Error::shape(&[h, w], &[ah, aw]));
    }
    Ok(())
}

pub fn mse(pred: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<f64> {
    check_same(pred, reference)?;
    let n = pred.len().max(1) as f64;
    Ok(Zip::from(pred).and(reference).fold(0.0, |acc, a, b| acc + (a - b) * (a - b)) / n)
}

pub fn mae(pred: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<f64> {
    check_same(pred, reference)?;
    let n = pred.len().max(1) as f64;
    Ok(Zip::from(pred).and(reference).fold(0.0, |acc, a, b| acc + (a - b).abs()) / n)
}

pub fn psnr_from_mse(mse: f64, dynamic_range: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Db(10.0 * (dynamic_range * dynamic_range / mse).log10())
    }
}

pub fn psnr(pred: ArrayView2<f64>, reference: ArrayView2<f64>, dynamic_range: f64) -> Result<Psnr> {
    if !(dynamic_range > 0.0) {
        return Err(Error::InvalidInput(format!("dynamic range must be positive, got {dynamic_range}")));
    }
    Ok(psnr_from_mse(mse(pred, reference)?, dynamic_range))
}

/// Valid-mode separable filtering: output is (h - k + 1) x (w - k + 1).
fn filter_valid(img: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let rows = Array2::from_shape_fn((h, ow), |(y, x)| (0..k).map(|j| g[j] * img[[y, x + j]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y, x)| (0..k).map(|i| g[i] * rows[[y + i, x]]).sum::<f64>())
}

/// Local SSIM map over every fully contained window position.
pub fn ssim_map(pred: ArrayView2<f64>, reference: ArrayView2<f64>, cfg: &SsimConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    check_same(pred, reference)?;
    let (h, w) = pred.dim();
    if h < cfg.window || w < cfg.window {
        return Err(Error::InvalidInput(format!(
            "image {h}x{w} is smaller than the {0}x{0} SSIM window",
            cfg.window
        )));
    }
    let g = cfg.kernel_1d();
    let x = pred.to_owned();
    let y = reference.to_owned();
    let mx = filter_valid(&x, &g);
    let my = filter_valid(&y, &g);
    let sxx = filter_valid(&(&x * &x), &g);
    let syy = filter_valid(&(&y * &y), &g);
    let sxy = filter_valid(&(&x * &y), &g);
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let mut out = Array2::zeros(mx.dim());
    Zip::from(&mut out)
        .and(&mx)
        .and(&my)
        .and(&sxx)
        .and(&syy)
        .and(&sxy)
        .for_each(|o, &mx, &my, &sxx, &syy, &sxy| {
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            *o = ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        });
    Ok(out)
}

pub fn ssim(pred: ArrayView2<f64>, reference: ArrayView2<f64>, cfg: &SsimConfig) -> Result<f64> {
    let map = ssim_map(pred, reference, cfg)?;
    Ok(map.mean().unwrap_or(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Percentiles of the reference that define the dynamic range L.
    pub lo_pct: f64,
    pub hi_pct: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            sigma: DEFAULT_SIGMA,
            k1: DEFAULT_K1,
            k2: DEFAULT_K2,
            lo_pct: DEFAULT_LO_PCT,
            hi_pct: DEFAULT_HI_PCT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMetrics {
    pub ssim: f64,
    pub psnr: Psnr,
    pub mae: f64,
    pub dynamic_range: f64,
}

/// Compare a predicted flow map against a reference, with L taken as the
/// reference's percentile range.
pub fn evaluate_pair(pred: &FlowMap, reference: &FlowMap, cfg: &EvalConfig) -> Result<PairMetrics> {
    check_same(pred.view(), reference.view())?;
    let l = percentile_record(reference.view(), cfg.lo_pct, cfg.hi_pct)?.range();
    let scfg = SsimConfig {
        window: cfg.window,
        sigma: cfg.sigma,
        k1: cfg.k1,
        k2: cfg.k2,
        dynamic_range: l,
    };
    Ok(PairMetrics {
        ssim: ssim(pred.view(), reference.view(), &scfg)?,
        psnr: psnr(pred.view(), reference.view(), l)?,
        mae: mae(pred.view(), reference.view())?,
        dynamic_range: l,
    })
}

/// Evaluate many (pred, reference) pairs in parallel; output order follows input.
pub fn evaluate_many(pairs: &[(&FlowMap, &FlowMap)], cfg: &EvalConfig) -> Result<Vec<PairMetrics>> {
    pairs.par_iter().map(|(p, r)| evaluate_pair(p, r, cfg)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub sequence_id: String,
    pub metrics: PairMetrics,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub method: String,
    pub n: usize,
    pub ssim: (f64, f64),
    /// Over rows with a finite PSNR only; `n_identical` counts the rest.
    pub psnr_db: (f64, f64),
    pub n_identical: usize,
    pub mae: (f64, f64),
}

/// Aggregate rows per method, methods in order of first appearance.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<Aggregate> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let sel: Vec<&PairMetrics> = rows.iter().filter(|r| r.method == m).map(|r| &r.metrics).collect();
            let ssim: Vec<f64> = sel.iter().map(|p| p.ssim).collect();
            let mae: Vec<f64> = sel.iter().map(|p| p.mae).collect();
            let psnr: Vec<f64> = sel.iter().filter_map(|p| p.psnr.db()).collect();
            Aggregate {
                method: m.to_string(),
                n: sel.len(),
                ssim: mean_std(&ssim),
                psnr_db: mean_std(&psnr),
                n_identical: sel.len() - psnr.len(),
                mae: mean_std(&mae),
            }
        })
        .collect()
}

/// A per-row CSV column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ssim,
    Psnr,
    Mae,
}

pub const ALL_METRICS: [Metric; 3] = [Metric::Ssim, Metric::Psnr, Metric::Mae];

impl Metric {
    pub fn column(self) -> &'static str {
        match self {
            Metric::Ssim => "ssim",
            Metric::Psnr => "psnr_db",
            Metric::Mae => "mae",
        }
    }

    fn value(self, m: &PairMetrics) -> String {
        match self {
            Metric::Ssim => m.ssim.to_string(),
            Metric::Psnr => m.psnr.to_string(),
            Metric::Mae => m.mae.to_string(),
        }
    }
}

/// Header `method,sequence_id` followed by the selected metric columns.
pub fn write_rows_csv(mut w: impl Write, rows: &[MetricsRow], columns: &[Metric]) -> std::io::Result<()> {
    write!(w, "method,sequence_id")?;
    for c in columns {
        write!(w, ",{}", c.column())?;
    }
    writeln!(w)?;
    for r in rows {
        write!(w, "{},{}", r.method, r.sequence_id)?;
        for c in columns {
            write!(w, ",{}", c.value(&r.metrics))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_aggregate_csv(mut w: impl Write, aggs: &[Aggregate]) -> std::io::Result<()> {
    writeln!(w, "method,n,ssim_mean,ssim_std,psnr_db_mean,psnr_db_std,mae_mean,mae_std")?;
    for a in aggs {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            a.method, a.n, a.ssim.0, a.ssim.1, a.psnr_db.0, a.psnr_db.1, a.mae.0, a.mae.1
        )?;
    }
    Ok(())
}
