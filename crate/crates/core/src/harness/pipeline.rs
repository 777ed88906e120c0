//! End-to-end experiment: simulate, split, stabilize, build references and
//! conditions, train, sample, and score against the direct few-frame estimate.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{PipelineConfig, Seeds};
use super::files::{export_png, write_loss_csv, write_shifts_csv};
use super::tensor::TensorFile;
use crate::contrast::{flow_from_sequence, FlowMap, NormalizationRecord};
use crate::diffusion::{
    make_condition, make_target, train, Condition, Dataset, DenoiserParams, NoiseSchedule, SamplerConfig,
    TrainedModel,
};
use crate::metrics::{aggregate, evaluate_pair, write_aggregate_csv, write_rows_csv, Aggregate, MetricsRow};
use crate::phantom::{random_vessels, random_walk_motion, synthesize_sequence, PhantomGroundTruth, PhantomSpec};
use crate::register::{stabilize, Displacement, SpeckleSequence};
use crate::{rng, Error, Result};

pub const DIRECT_METHOD: &str = "direct_5f";
pub const DIFFUSION_METHOD: &str = "diffusion";

const LAYOUT_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Even seeds train, odd seeds test.
    pub fn of_seed(seed: u64) -> Self {
        if seed % 2 == 0 {
            Split::Train
        } else {
            Split::Test
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub id: usize,
    pub seed: u64,
    pub split: Split,
    pub max_shift: i32,
    pub spec: PhantomSpec,
}

impl PhantomCase {
    pub fn dir_name(&self) -> String {
        format!("phantom_{:03}", self.id)
    }
}

/// Deterministic description of phantom `id`.
pub fn phantom_case(cfg: &PipelineConfig, id: usize) -> PhantomCase {
    let p = &cfg.phantom;
    let seed = cfg.seeds.phantom.wrapping_add(id as u64);
    let pair = id / 2;
    let a = p.max_shifts.len();
    let max_shift = p.max_shifts[pair % a];
    let background_k = p.background_ks[(pair / a) % p.background_ks.len()];
    let mut r = rng::substream(seed, LAYOUT_STREAM);
    let vessels = random_vessels(p.height, p.width, &p.vessels, &mut r);
    let motion = random_walk_motion(p.n_frames, max_shift, r.random());
    PhantomCase {
        id,
        seed,
        split: Split::of_seed(seed),
        max_shift,
        spec: PhantomSpec {
            height: p.height,
            width: p.width,
            n_frames: p.n_frames,
            vessels,
            background_k,
            base_intensity: p.base_intensity,
            motion,
            shift_mode: p.shift_mode,
            texture: p.texture,
            seed,
        },
    }
}

pub fn phantom_cases(cfg: &PipelineConfig) -> Vec<PhantomCase> {
    (0..cfg.phantom.count).map(|id| phantom_case(cfg, id)).collect()
}

/// Stage 1 output for one raw sequence.
#[derive(Debug, Clone)]
pub struct Processed {
    pub shifts: Vec<Displacement>,
    pub confidence: Vec<f64>,
    pub low_confidence: usize,
    /// Reference map from every aligned frame.
    pub hq_flow: FlowMap,
    /// Disjoint aligned few-frame windows, earliest first.
    pub windows: Vec<SpeckleSequence>,
}

/// Stabilizes a raw sequence, builds its reference map, and cuts `n_windows`
/// consecutive few-frame windows from the start of the aligned sequence.
pub fn process_sequence(seq: &SpeckleSequence, cfg: &PipelineConfig, n_windows: usize) -> Result<Processed> {
    let stab = stabilize(seq, &cfg.registration).map_err(|e| e.in_stage("stabilize"))?;
    let (_, hq_flow) = flow_from_sequence(&stab.aligned, &cfg.contrast).map_err(|e| e.in_stage("contrast"))?;
    let n_few = cfg.diffusion.architecture.n_few;
    let windows = (0..n_windows)
        .map(|w| stab.aligned.window(w * n_few, n_few))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("contrast"))?;
    Ok(Processed {
        low_confidence: stab.low_confidence.iter().filter(|&&b| b).count(),
        shifts: stab.shifts,
        confidence: stab.confidence,
        hq_flow,
        windows,
    })
}

/// Direct few-frame flow map and the diffusion condition built from it.
pub fn few_frame_inputs(window: &SpeckleSequence, cfg: &PipelineConfig) -> Result<(FlowMap, Condition)> {
    let (_, direct) = flow_from_sequence(window, &cfg.contrast)?;
    let cond = make_condition(window, &direct, &cfg.contrast)?;
    Ok((direct, cond))
}

/// Training pairs from processed training sequences, plus the mean clip
/// record of their targets (used to map samples back to flow units).
pub fn training_dataset(train: &[&Processed], cfg: &PipelineConfig) -> Result<(Dataset<f32>, NormalizationRecord)> {
    let first = train
        .first()
        .ok_or_else(|| Error::InvalidInput("no training sequences".into()))?;
    let (h, w) = first.hq_flow.dim();
    let mut data = Dataset::new(h, w, cfg.diffusion.architecture.cond_channels());
    let (mut lo, mut hi) = (0.0, 0.0);
    for p in train {
        let target = make_target(p.hq_flow.view(), &cfg.contrast)?;
        lo += target.record.lo;
        hi += target.record.hi;
        let flat: Vec<f32> = target.normalized.iter().map(|&v| v as f32).collect();
        for window in &p.windows {
            let (_, cond) = few_frame_inputs(window, cfg)?;
            data.push(flat.clone(), cond.to_flat())?;
        }
    }
    let n = train.len() as f64;
    Ok((data, NormalizationRecord::new(lo / n, hi / n)?))
}

pub fn train_model(
    data: &Dataset<f32>,
    target_record: NormalizationRecord,
    cfg: &PipelineConfig,
) -> Result<(TrainedModel, Vec<f64>)> {
    let d = &cfg.diffusion;
    let schedule = NoiseSchedule::linear(d.schedule.steps, d.schedule.beta_start, d.schedule.beta_end)?;
    let init = DenoiserParams::<f32>::init(d.architecture, cfg.seeds.init)?;
    let out = train(init, data, &schedule, &d.training.train_config(cfg.seeds.train))?;
    Ok((
        TrainedModel {
            params: out.params,
            schedule,
            seed: cfg.seeds.train,
            target_record,
        },
        out.losses,
    ))
}

pub fn sampler(cfg: &PipelineConfig) -> Result<SamplerConfig> {
    SamplerConfig::uniform(cfg.diffusion.sampler.steps, cfg.diffusion.schedule.steps)
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub config_hash: String,
    pub out_dir: PathBuf,
    /// Per test phantom: the direct row, then the diffusion row.
    pub rows: Vec<MetricsRow>,
    pub aggregates: Vec<Aggregate>,
    pub losses: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
}

impl PipelineReport {
    pub fn aggregate(&self, method: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }
}

#[derive(Serialize)]
struct ManifestPhantom {
    id: usize,
    seed: u64,
    split: Split,
    max_shift: i32,
    background_k: f64,
    n_vessels: usize,
    min_vessel_k: f64,
    max_vessel_k: f64,
    /// Frames whose recovered shift differs from the true motion.
    shift_errors: usize,
    low_confidence_frames: usize,
}

#[derive(Serialize)]
struct Manifest {
    config_hash: String,
    version: &'static str,
    rng: &'static str,
    split_rule: &'static str,
    condition_axes: &'static str,
    seeds: Seeds,
    n_train: usize,
    n_test: usize,
    training_pairs: usize,
    target_lo: f64,
    target_hi: f64,
    phantom: Vec<ManifestPhantom>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

struct CaseOutput {
    case: PhantomCase,
    truth: PhantomGroundTruth,
    processed: Processed,
}

fn simulate_and_process(case: PhantomCase, cfg: &PipelineConfig, dir: &Path) -> Result<CaseOutput> {
    let (seq, truth) = synthesize_sequence(&case.spec).map_err(|e| e.in_stage("simulate"))?;
    let n_windows = match case.split {
        Split::Train => cfg.diffusion.training.windows_per_phantom,
        Split::Test => 1,
    };
    let processed = process_sequence(&seq, cfg, n_windows)?;

    let write = || -> Result<()> {
        create_dir(dir)?;
        write_shifts_csv(&dir.join("truth_shifts.csv"), &truth.shifts, None)?;
        write_shifts_csv(&dir.join("shifts.csv"), &processed.shifts, Some(&processed.confidence))?;
        TensorFile::from_array2(truth.k_true_map.view()).save(&dir.join("truth_k.spkt"))?;
        TensorFile::from_array2(processed.hq_flow.view())
            .with_meta("frames", seq.n_frames())
            .save(&dir.join("hq_flow.spkt"))?;
        if cfg.output.save_sequences {
            TensorFile::from_array3(seq.data().view())
                .with_meta("seed", case.seed)
                .with_meta("split", case.split.as_str())
                .with_meta("rng", rng::RNG_DESCRIPTION)
                .save(&dir.join("sequence.spkt"))?;
        }
        Ok(())
    };
    write().map_err(|e| e.in_stage("simulate"))?;
    Ok(CaseOutput { case, truth, processed })
}

/// Runs the whole experiment into `out_dir`. Partial outputs are left in
/// place when a stage fails; the error names the stage.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineReport> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let hash = cfg.hash();
    write_text(&out_dir.join("config.toml"), &cfg.to_toml_string())?;

    let cases = phantom_cases(cfg);
    let outputs: Vec<CaseOutput> = cases
        .into_par_iter()
        .map(|case| {
            let dir = out_dir.join(case.dir_name());
            simulate_and_process(case, cfg, &dir)
        })
        .collect::<Result<_>>()?;

    let train_set: Vec<&Processed> = outputs
        .iter()
        .filter(|o| o.case.split == Split::Train)
        .map(|o| &o.processed)
        .collect();
    let test_set: Vec<&CaseOutput> = outputs.iter().filter(|o| o.case.split == Split::Test).collect();
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Config("phantom seeds do not cover both splits".into()));
    }

    let (data, record) = training_dataset(&train_set, cfg).map_err(|e| e.in_stage("train"))?;
    let (model, losses) = train_model(&data, record, cfg).map_err(|e| e.in_stage("train"))?;
    model.save(&out_dir.join("model.spkm")).map_err(|e| e.in_stage("train"))?;
    write_loss_csv(&out_dir.join("loss.csv"), &losses).map_err(|e| e.in_stage("train"))?;

    let sampler = sampler(cfg)?;
    let eval = cfg.evaluation.eval_config();
    let rows: Vec<Vec<MetricsRow>> = test_set
        .par_iter()
        .map(|o| -> Result<Vec<MetricsRow>> {
            let dir = out_dir.join(o.case.dir_name());
            let window = &o.processed.windows[0];
            let (direct, cond) = few_frame_inputs(window, cfg).map_err(|e| e.in_stage("sample"))?;
            let (_, recon) = model
                .reconstruct(&cond, &sampler, cfg.seeds.sample.wrapping_add(o.case.seed))
                .map_err(|e| e.in_stage("sample"))?;
            let reference = &o.processed.hq_flow;
            let save = || -> Result<()> {
                TensorFile::from_array2(direct.view()).save(&dir.join("direct_5f.spkt"))?;
                TensorFile::from_array2(recon.view())
                    .with_meta("sampler_steps", sampler.len())
                    .save(&dir.join("reconstruction.spkt"))?;
                if cfg.output.png {
                    export_png(reference.view(), &dir.join("hq_flow.png"))?;
                    export_png(direct.view(), &dir.join("direct_5f.png"))?;
                    export_png(recon.view(), &dir.join("reconstruction.png"))?;
                }
                Ok(())
            };
            save().map_err(|e| e.in_stage("sample"))?;
            let id = o.case.id.to_string();
            let row = |method: &str, pred: &FlowMap| -> Result<MetricsRow> {
                Ok(MetricsRow {
                    method: method.to_string(),
                    sequence_id: id.clone(),
                    metrics: evaluate_pair(pred, reference, &eval).map_err(|e| e.in_stage("evaluate"))?,
                })
            };
            Ok(vec![row(DIRECT_METHOD, &direct)?, row(DIFFUSION_METHOD, &recon)?])
        })
        .collect::<Result<_>>()?;
    let rows: Vec<MetricsRow> = rows.into_iter().flatten().collect();
    let aggregates = aggregate(&rows);

    let write_csvs = || -> Result<()> {
        let p = out_dir.join("summary.csv");
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &rows, &cfg.evaluation.metrics).expect("write to memory");
        fs::write(&p, buf).map_err(|e| Error::io(&p, e))?;
        let p = out_dir.join("aggregate.csv");
        let mut buf = Vec::new();
        write_aggregate_csv(&mut buf, &aggregates).expect("write to memory");
        fs::write(&p, buf).map_err(|e| Error::io(&p, e))
    };
    write_csvs().map_err(|e| e.in_stage("evaluate"))?;

    let manifest = Manifest {
        config_hash: hash.clone(),
        version: env!("CARGO_PKG_VERSION"),
        rng: rng::RNG_DESCRIPTION,
        split_rule: "phantom i has seed seeds.phantom + i; even seed -> train, odd seed -> test",
        condition_axes: "phantoms 2j and 2j+1 share max_shifts[j % len] and background_ks[(j / len(max_shifts)) % len]",
        seeds: cfg.seeds,
        n_train: train_set.len(),
        n_test: test_set.len(),
        training_pairs: data.len(),
        target_lo: record.lo,
        target_hi: record.hi,
        phantom: outputs
            .iter()
            .map(|o| {
                let vk = o.case.spec.vessels.iter().map(|v| v.k_true);
                ManifestPhantom {
                    id: o.case.id,
                    seed: o.case.seed,
                    split: o.case.split,
                    max_shift: o.case.max_shift,
                    background_k: o.case.spec.background_k,
                    n_vessels: o.case.spec.vessels.len(),
                    min_vessel_k: vk.clone().fold(f64::NAN, f64::min),
                    max_vessel_k: vk.fold(f64::NAN, f64::max),
                    shift_errors: o
                        .processed
                        .shifts
                        .iter()
                        .zip(&o.truth.shifts)
                        .filter(|(est, truth)| **est != -**truth)
                        .count(),
                    low_confidence_frames: o.processed.low_confidence,
                }
            })
            .collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Numerical(format!("manifest: {e}")))?;
    write_text(&out_dir.join("manifest.toml"), &text)?;

    Ok(PipelineReport {
        config_hash: hash,
        out_dir: out_dir.to_path_buf(),
        rows,
        aggregates,
        losses,
        n_train: train_set.len(),
        n_test: test_set.len(),
    })
}
