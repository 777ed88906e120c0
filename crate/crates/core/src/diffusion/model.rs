//! Trained model bundle and its binary file format.
//!
//! Layout (little-endian): magic `SPKM`, version `u16`, architecture as five
//! `u32` (n_few, hidden, layers, kernel, time_dim), schedule (`u32` T,
//! `f64` beta_start, `f64` beta_end), training seed `u64`, target clip record
//! (`f64` lo, `f64` hi), weight count `u64`, then the weights as `f32`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::condition::Condition;
use super::denoiser::{Architecture, DenoiserParams};
use super::sampler::ddim_sample;
use super::schedule::{NoiseSchedule, SamplerConfig};
use crate::contrast::{FlowMap, NormalizationRecord};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"SPKM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: DenoiserParams<f32>,
    pub schedule: NoiseSchedule,
    /// Seed the weights were trained with.
    pub seed: u64,
    /// Clip range used to map samples back to flow units.
    pub target_record: NormalizationRecord,
}

impl TrainedModel {
    /// Samples a normalized reconstruction and maps it back to flow units.
    pub fn reconstruct(&self, cond: &Condition, sampler: &SamplerConfig, seed: u64) -> Result<(Array2<f64>, FlowMap)> {
        if cond.n_few() != self.params.arch().n_few {
            return Err(Error::InvalidInput(format!(
                "model expects {} frames, condition has {}",
                self.params.arch().n_few,
                cond.n_few()
            )));
        }
        let (h, w) = (cond.height(), cond.width());
        let x = ddim_sample(&self.params, &cond.to_flat::<f32>(), (h, w), &self.schedule, sampler, seed)?;
        let normalized = Array2::from_shape_vec((h, w), x.iter().map(|&v| v as f64).collect())
            .expect("sample has h*w pixels");
        let flow = FlowMap::new(normalized.mapv(|n| self.target_record.denormalize_value(n)))?;
        Ok((normalized, flow))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let a = self.params.arch();
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        for v in [a.n_few, a.hidden, a.layers, a.kernel, a.time_dim, self.schedule.steps()] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.schedule.beta_start().to_le_bytes())?;
        w.write_all(&self.schedule.beta_end().to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.target_record.lo.to_le_bytes())?;
        w.write_all(&self.target_record.hi.to_le_bytes())?;
        w.write_all(&(self.params.weights().len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.params.weights().len() * 4);
        for v in self.params.weights() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read, path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let fmt = |m: String| Error::format(path, m);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MODEL_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let version = u16::from_le_bytes(read_n(&mut r).map_err(io)?);
        if version != MODEL_VERSION {
            return Err(fmt(format!("unsupported model version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = u32::from_le_bytes(read_n(&mut r).map_err(io)?) as usize;
        }
        let arch = Architecture {
            n_few: dims[0],
            hidden: dims[1],
            layers: dims[2],
            kernel: dims[3],
            time_dim: dims[4],
        };
        arch.validate().map_err(|e| fmt(e.to_string()))?;
        let beta_start = f64::from_le_bytes(read_n(&mut r).map_err(io)?);
        let beta_end = f64::from_le_bytes(read_n(&mut r).map_err(io)?);
        let schedule = NoiseSchedule::linear(dims[5], beta_start, beta_end).map_err(|e| fmt(e.to_string()))?;
        let seed = u64::from_le_bytes(read_n(&mut r).map_err(io)?);
        let lo = f64::from_le_bytes(read_n(&mut r).map_err(io)?);
        let hi = f64::from_le_bytes(read_n(&mut r).map_err(io)?);
        let target_record = NormalizationRecord::new(lo, hi).map_err(|e| fmt(e.to_string()))?;
        let n = u64::from_le_bytes(read_n(&mut r).map_err(io)?) as usize;
        if n != arch.param_count() {
            return Err(fmt(format!(
                "weight count {n} does not match architecture ({})",
                arch.param_count()
            )));
        }
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(io)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(io)? != 0 {
            return Err(fmt("trailing bytes after weights".into()));
        }
        let weights = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let params = DenoiserParams::from_weights(arch, weights).map_err(|e| fmt(e.to_string()))?;
        Ok(Self {
            params,
            schedule,
            seed,
            target_record,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f), path)
    }
}

fn read_n<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}
