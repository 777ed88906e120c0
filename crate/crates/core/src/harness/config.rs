//! Sectioned run configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrast::ContrastConfig;
use crate::diffusion::{Architecture, TrainConfig, DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::metrics::{EvalConfig, Metric, ALL_METRICS};
use crate::phantom::{VesselLayout, MAX_K};
use crate::register::{RegistrationConfig, ShiftMode};
use crate::{Error, Result};

/// Full experiment description. Every section except `output` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub phantom: PhantomSection,
    pub registration: RegistrationConfig,
    pub contrast: ContrastConfig,
    pub diffusion: DiffusionSection,
    pub evaluation: EvaluationSection,
    pub seeds: Seeds,
    #[serde(default)]
    pub output: OutputSection,
}

/// Phantom population. Phantoms come in pairs `(2j, 2j + 1)` sharing one
/// acquisition condition: `max_shifts[j % a]` and `background_ks[(j / a) % b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Frames per sequence; the reference map uses all of them.
    pub n_frames: usize,
    pub base_intensity: f64,
    pub texture: f64,
    pub shift_mode: ShiftMode,
    pub max_shifts: Vec<i32>,
    pub background_ks: Vec<f64>,
    pub vessels: VesselLayout,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            count: 8,
            height: 32,
            width: 32,
            n_frames: 200,
            base_intensity: 100.0,
            texture: 0.35,
            shift_mode: ShiftMode::Circular,
            max_shifts: vec![0, 2, 4],
            background_ks: vec![0.3],
            vessels: VesselLayout::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub augment: bool,
    /// Disjoint few-frame windows drawn from each training sequence, all
    /// paired with the same reference map.
    pub windows_per_phantom: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            augment: t.augment,
            windows_per_phantom: 4,
        }
    }
}

impl TrainingSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            augment: self.augment,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { steps: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub schedule: ScheduleSection,
    pub architecture: Architecture,
    pub training: TrainingSection,
    pub sampler: SamplerSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Columns of the per-phantom summary.
    pub metrics: Vec<Metric>,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub lo_pct: f64,
    pub hi_pct: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            metrics: ALL_METRICS.to_vec(),
            window: e.window,
            sigma: e.sigma,
            k1: e.k1,
            k2: e.k2,
            lo_pct: e.lo_pct,
            hi_pct: e.hi_pct,
        }
    }
}

impl EvaluationSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            window: self.window,
            sigma: self.sigma,
            k1: self.k1,
            k2: self.k2,
            lo_pct: self.lo_pct,
            hi_pct: self.hi_pct,
        }
    }
}

/// Every random draw in a run derives from one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Phantom `i` uses seed `phantom + i`; even seeds train, odd seeds test.
    pub phantom: u64,
    pub init: u64,
    pub train: u64,
    /// Test phantom with seed `s` is sampled with `sample + s`.
    pub sample: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            phantom: seed,
            init: seed,
            train: seed,
            sample: seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Also write the raw and aligned sequences of every phantom.
    pub save_sequences: bool,
    /// PNG previews of reference, baseline and reconstruction per test phantom.
    pub png: bool,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical serialization; equal configs give equal text.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_toml_string().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn with_seed_override(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seeds = Seeds::all(s);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let p = &self.phantom;
        let d = &self.diffusion;
        let n_few = d.architecture.n_few;
        if p.count < 2 {
            return bad(format!("phantom.count must be >= 2 to form both splits, got {}", p.count));
        }
        if p.height % 2 != 0 || p.width % 2 != 0 {
            return bad(format!("phantom size must be even, got {}x{}", p.height, p.width));
        }
        if p.height < self.evaluation.window || p.width < self.evaluation.window {
            return bad(format!(
                "phantom size {}x{} is smaller than the SSIM window",
                p.height, p.width
            ));
        }
        if p.max_shifts.is_empty() || p.background_ks.is_empty() {
            return bad("phantom.max_shifts and phantom.background_ks must be nonempty".into());
        }
        if let Some(s) = p.max_shifts.iter().find(|&&s| s < 0 || 2 * s as usize >= p.height.min(p.width)) {
            return bad(format!("max shift {s} not decodable on {}x{}", p.height, p.width));
        }
        if let Some(k) = p.background_ks.iter().find(|k| !(0.0..=MAX_K).contains(*k)) {
            return bad(format!("background k {k} outside [0, {MAX_K}]"));
        }
        let l = &p.vessels;
        if l.min_vessels > l.max_vessels || l.min_radius > l.max_radius || l.min_k > l.max_k {
            return bad("phantom.vessels ranges must satisfy min <= max".into());
        }
        if !(l.min_k >= 0.0 && l.max_k <= MAX_K) {
            return bad(format!("vessel k range must lie in [0, {MAX_K}]"));
        }
        d.architecture.validate().map_err(|e| Error::Config(e.to_string()))?;
        if n_few < 2 {
            return bad(format!("diffusion.architecture.n_few must be >= 2, got {n_few}"));
        }
        if p.n_frames < n_few * d.training.windows_per_phantom.max(1) || p.n_frames < 2 {
            return bad(format!(
                "{} frames cannot hold {} windows of {n_few}",
                p.n_frames, d.training.windows_per_phantom
            ));
        }
        if d.training.windows_per_phantom == 0 || d.training.batch_size == 0 {
            return bad("training windows_per_phantom and batch_size must be >= 1".into());
        }
        if d.schedule.steps == 0 || d.sampler.steps == 0 || d.sampler.steps > d.schedule.steps {
            return bad(format!(
                "need 1 <= sampler.steps ({}) <= schedule.steps ({})",
                d.sampler.steps, d.schedule.steps
            ));
        }
        if !(d.training.lr > 0.0) {
            return bad("training.lr must be positive".into());
        }
        if self.evaluation.metrics.is_empty() {
            return bad("evaluation.metrics must name at least one metric".into());
        }
        Ok(())
    }
}
