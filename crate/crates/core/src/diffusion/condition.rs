use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::contrast::{robust_normalize, ContrastConfig, FlowMap, NormalizationRecord};
use crate::error::{Error, Result};
use crate::register::SpeckleSequence;

/// Conditioning tensor: `n_few` normalized aligned frames followed by the
/// normalized flow prior, all in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    channels: Array3<f64>,
    frame_records: Vec<NormalizationRecord>,
    prior_record: NormalizationRecord,
}

impl Condition {
    pub fn n_few(&self) -> usize {
        self.frame_records.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.dim().0
    }

    pub fn height(&self) -> usize {
        self.channels.dim().1
    }

    pub fn width(&self) -> usize {
        self.channels.dim().2
    }

    pub fn channels(&self) -> &Array3<f64> {
        &self.channels
    }

    pub fn frame_records(&self) -> &[NormalizationRecord] {
        &self.frame_records
    }

    pub fn prior_record(&self) -> NormalizationRecord {
        self.prior_record
    }

    /// Channel-major flat copy in the denoiser's precision.
    pub fn to_flat<T: crate::real::Real>(&self) -> Vec<T> {
        self.channels.iter().map(|&v| T::of(v)).collect()
    }
}

/// Builds the condition from aligned frames and the flow prior computed from
/// those frames. Channel order is frame 1..n_few, then the prior.
pub fn make_condition(aligned_few: &SpeckleSequence, prior: &FlowMap, cfg: &ContrastConfig) -> Result<Condition> {
    let (n, h, w) = aligned_few.data().dim();
    if prior.dim() != (h, w) {
        return Err(Error::shape(&[h, w], prior.as_array().shape()));
    }
    let mut channels = Array3::zeros((n + 1, h, w));
    let mut frame_records = Vec::with_capacity(n);
    for t in 0..n {
        let (norm, rec) = robust_normalize(aligned_few.frame(t), cfg.lo_pct, cfg.hi_pct)?;
        channels.index_axis_mut(Axis(0), t).assign(&norm);
        frame_records.push(rec);
    }
    let (norm, prior_record) = robust_normalize(prior.view(), cfg.lo_pct, cfg.hi_pct)?;
    channels.index_axis_mut(Axis(0), n).assign(&norm);
    Ok(Condition {
        channels,
        frame_records,
        prior_record,
    })
}

/// Normalized training target paired with its clip record.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub normalized: Array2<f64>,
    pub record: NormalizationRecord,
}

pub fn make_target(hq_flow: ArrayView2<f64>, cfg: &ContrastConfig) -> Result<Target> {
    let (normalized, record) = robust_normalize(hq_flow, cfg.lo_pct, cfg.hi_pct)?;
    Ok(Target { normalized, record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrast::flow_from_sequence;
    use crate::rng;

    fn noisy_sequence(n: usize, seed: u64) -> SpeckleSequence {
        let mut r = rng::seeded(seed);
        let v = rng::normals_f64(&mut r, n * 8 * 8);
        let data = Array3::from_shape_vec((n, 8, 8), v.iter().map(|z| 10.0 + z.abs()).collect()).unwrap();
        SpeckleSequence::new(data).unwrap()
    }

    #[test]
    fn channel_counts() {
        let cfg = ContrastConfig::default();
        let seq = noisy_sequence(5, 1);
        let (_, f) = flow_from_sequence(&seq, &cfg).unwrap();
        let c = make_condition(&seq, &f, &cfg).unwrap();
        assert_eq!(c.n_channels(), 6);
        assert_eq!(c.n_few(), 5);
        // With the noisy latent prepended the denoiser sees 7 channels.
        assert_eq!(c.n_channels() + 1, 7);
        assert!(c.channels().iter().all(|v| (-1.0..=1.0).contains(v)));

        let one = seq.head(1).unwrap();
        let c1 = make_condition(&one, &f, &cfg).unwrap();
        assert_eq!(c1.n_channels(), 2);
    }

    #[test]
    fn order_sensitive() {
        let cfg = ContrastConfig::default();
        let seq = noisy_sequence(3, 2);
        let (_, f) = flow_from_sequence(&seq, &cfg).unwrap();
        let a = make_condition(&seq, &f, &cfg).unwrap();
        let mut permuted = seq.data().clone();
        permuted.index_axis_mut(Axis(0), 0).assign(&seq.frame(1));
        permuted.index_axis_mut(Axis(0), 1).assign(&seq.frame(0));
        let b = make_condition(&SpeckleSequence::new(permuted).unwrap(), &f, &cfg).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn prior_shape_mismatch() {
        let cfg = ContrastConfig::default();
        let seq = noisy_sequence(3, 3);
        let f = FlowMap::new(Array2::from_elem((4, 4), 1.0)).unwrap();
        assert!(matches!(make_condition(&seq, &f, &cfg), Err(Error::ShapeMismatch { .. })));
    }
}
