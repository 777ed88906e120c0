//! One function per CLI verb. Each reads and writes files only through the
//! formats in this module's siblings.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{EvaluationSection, PipelineConfig};
use super::files::{write_loss_csv, write_shifts_csv};
use super::pipeline::{
    phantom_cases, process_sequence, run_pipeline, train_model, training_dataset, PipelineReport,
    Processed, Split,
};
use super::tensor::TensorFile;
use crate::contrast::{flow_from_sequence, ContrastConfig, FlowMap};
use crate::diffusion::{make_condition, SamplerConfig, TrainedModel};
use crate::metrics::{evaluate_pair, write_rows_csv, MetricsRow, PairMetrics};
use crate::phantom::synthesize_sequence;
use crate::register::{stabilize, RegistrationConfig, SpeckleSequence};
use crate::{rng, Error, Result};

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn load_sequence(path: &Path) -> Result<(SpeckleSequence, TensorFile)> {
    let t = TensorFile::load(path)?;
    let seq = SpeckleSequence::new(t.to_array3().map_err(|e| Error::format(path, e.to_string()))?)?;
    Ok((seq, t))
}

pub fn load_flow(path: &Path) -> Result<FlowMap> {
    let t = TensorFile::load(path)?;
    FlowMap::new(t.to_array2().map_err(|e| Error::format(path, e.to_string()))?)
}

/// Writes `phantom_NNN/` per configured phantom: the moving sequence with its
/// seed and split in the sidecar, ground-truth maps, and true shifts.
pub fn cmd_simulate(cfg: &PipelineConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let hash = cfg.hash();
    phantom_cases(cfg)
        .into_par_iter()
        .map(|case| {
            let dir = out_dir.join(case.dir_name());
            create_dir(&dir)?;
            let (seq, truth) = synthesize_sequence(&case.spec)?;
            let seq_path = dir.join("sequence.spkt");
            TensorFile::from_array3(seq.data().view())
                .with_meta("seed", case.seed)
                .with_meta("split", case.split.as_str())
                .with_meta("max_shift", case.max_shift)
                .with_meta("texture", case.spec.texture)
                .with_meta("rng", rng::RNG_DESCRIPTION)
                .with_meta("config_hash", &hash)
                .save(&seq_path)?;
            TensorFile::from_array2(truth.k_true_map.view()).save(&dir.join("truth_k.spkt"))?;
            TensorFile::from_array2(truth.mu_map.view()).save(&dir.join("truth_mu.spkt"))?;
            TensorFile::from_array2(truth.hq_flow.view()).save(&dir.join("truth_flow.spkt"))?;
            write_shifts_csv(&dir.join("truth_shifts.csv"), &truth.shifts, None)?;
            Ok(seq_path)
        })
        .collect()
}

/// Stabilizes a sequence file; returns the number of low-confidence frames.
pub fn cmd_register(input: &Path, output: &Path, shifts_csv: &Path, cfg: &RegistrationConfig) -> Result<usize> {
    let (seq, src) = load_sequence(input)?;
    let stab = stabilize(&seq, cfg)?;
    let low = stab.low_confidence.iter().filter(|&&b| b).count();
    let mut out = TensorFile::from_array3(stab.aligned.data().view());
    out.meta = src.meta;
    out.meta.insert("registered_from".into(), input.display().to_string());
    out.meta.insert("low_confidence_frames".into(), low.to_string());
    out.save(output)?;
    write_shifts_csv(shifts_csv, &stab.shifts, Some(&stab.confidence))?;
    Ok(low)
}

pub fn cmd_contrast(input: &Path, k_out: &Path, flow_out: &Path, cfg: &ContrastConfig) -> Result<()> {
    let (seq, _) = load_sequence(input)?;
    let (k, flow) = flow_from_sequence(&seq, cfg)?;
    let frames = seq.n_frames();
    TensorFile::from_array2(k.view()).with_meta("frames", frames).save(k_out)?;
    TensorFile::from_array2(flow.view())
        .with_meta("frames", frames)
        .with_meta("flow_eps", cfg.flow_eps)
        .save(flow_out)
}

fn sequence_files(data_dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(data_dir).map_err(|e| Error::io(data_dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(data_dir, e))?;
        let p = e.path().join("sequence.spkt");
        if p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Trains on the training-split sequences written by [`cmd_simulate`]. The
/// loss trace goes next to the model as `<stem>.loss.csv`.
pub fn cmd_train(cfg: &PipelineConfig, data_dir: &Path, model_out: &Path) -> Result<(TrainedModel, Vec<f64>)> {
    let files = sequence_files(data_dir)?;
    let processed: Vec<Option<Processed>> = files
        .par_iter()
        .map(|path| {
            let (seq, t) = load_sequence(path)?;
            let seed: u64 = t
                .meta
                .get("seed")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path, "sidecar lacks a numeric `seed`"))?;
            if Split::of_seed(seed) != Split::Train {
                return Ok(None);
            }
            process_sequence(&seq, cfg, cfg.diffusion.training.windows_per_phantom).map(Some)
        })
        .collect::<Result<_>>()?;
    let train_set: Vec<&Processed> = processed.iter().flatten().collect();
    if train_set.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no training sequences under {}",
            data_dir.display()
        )));
    }
    let (data, record) = training_dataset(&train_set, cfg).map_err(|e| e.in_stage("train"))?;
    let (model, losses) = train_model(&data, record, cfg).map_err(|e| e.in_stage("train"))?;
    model.save(model_out)?;
    write_loss_csv(&model_out.with_extension("loss.csv"), &losses)?;
    Ok((model, losses))
}

/// Reconstructs a flow map from the first `n_few` frames of an aligned
/// sequence. The prior is computed from those same frames.
pub fn cmd_sample(
    model_path: &Path,
    frames: &Path,
    out: &Path,
    steps: usize,
    seed: u64,
    cfg: &ContrastConfig,
) -> Result<FlowMap> {
    let model = TrainedModel::load(model_path)?;
    let (seq, _) = load_sequence(frames)?;
    let n_few = model.params.arch().n_few;
    if seq.n_frames() < n_few {
        return Err(Error::InvalidInput(format!(
            "model needs {n_few} frames, {} has {}",
            frames.display(),
            seq.n_frames()
        )));
    }
    let few = seq.head(n_few)?;
    let (_, prior) = flow_from_sequence(&few, cfg)?;
    let cond = make_condition(&few, &prior, cfg)?;
    let sampler = SamplerConfig::uniform(steps, model.schedule.steps())?;
    let (_, flow) = model.reconstruct(&cond, &sampler, seed)?;
    TensorFile::from_array2(flow.view())
        .with_meta("model", model_path.display())
        .with_meta("sampler_steps", steps)
        .with_meta("seed", seed)
        .save(out)?;
    Ok(flow)
}

/// Scores `pred` against `reference` and writes a one-row CSV.
pub fn cmd_eval(pred: &Path, reference: &Path, out_csv: &Path, cfg: &EvaluationSection) -> Result<PairMetrics> {
    let p = load_flow(pred)?;
    let r = load_flow(reference)?;
    let metrics = evaluate_pair(&p, &r, &cfg.eval_config())?;
    let row = MetricsRow {
        method: "pred".into(),
        sequence_id: pred
            .file_stem()
            .map(|s| s.to_string_lossy().replace(',', "_"))
            .unwrap_or_default(),
        metrics,
    };
    let mut buf = Vec::new();
    write_rows_csv(&mut buf, &[row], &cfg.metrics).expect("write to memory");
    fs::write(out_csv, buf).map_err(|e| Error::io(out_csv, e))?;
    Ok(metrics)
}

pub fn cmd_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineReport> {
    run_pipeline(cfg, out_dir)
}

