//! Functional network maps from attention artifacts.
//!
//! Per time step: the concatenated pre-sigmoid maps `S` are scaled per
//! channel by the channel attention weights, summed over channels, min-max
//! normalized inside the mask and squared. The result lies in `[0, 1]` and
//! is binarized at an in-mask quantile for set comparisons.

use crate::error::{Error, Result};
use crate::model::{AttentionArtifacts, Model};
use crate::tensor::{hadamard, Real, Tensor};
use crate::volio::{standardize, Mask, Volume4D};

pub const DEFAULT_THRESHOLD_QUANTILE: f64 = 0.90;

/// One extracted network.
#[derive(Debug, Clone, PartialEq)]
pub struct FbnMap {
    pub dims: [usize; 3],
    /// Row-major `(D, H, W)` values in `[0, 1]`, zero outside the mask.
    pub values: Vec<f32>,
    pub binary: Mask,
    pub time_index: usize,
    pub subject_id: String,
    pub threshold_quantile: f64,
}

/// `S_weighted[c] = ca[c] · S[c]` for `S: (C, D, H, W)`, `ca: (C)`.
pub fn weight_channels<T: Real>(s: &Tensor<T>, ca: &Tensor<T>) -> Result<Tensor<T>> {
    let &[c, d, h, w] = s.shape() else {
        return Err(Error::shape(format!("weight_channels: expected (C, D, H, W), got {:?}", s.shape())));
    };
    if ca.shape() != [c] {
        return Err(Error::shape(format!("weight_channels: {:?} weights for {:?} maps", ca.shape(), s.shape())));
    }
    hadamard(&s.clone().reshape(&[1, c, d, h, w])?, ca)?.reshape(&[c, d, h, w])
}

/// Sum over the channel axis of `(C, D, H, W)`.
pub fn sum_channels<T: Real>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, d, h, w] = s.shape() else {
        return Err(Error::shape(format!("sum_channels: expected (C, D, H, W), got {:?}", s.shape())));
    };
    let plane = d * h * w;
    let mut out = vec![T::ZERO; plane];
    for channel in s.data().chunks(plane) {
        out.iter_mut().zip(channel).for_each(|(o, &v)| *o += v);
    }
    Tensor::from_vec(vec![d, h, w], out)
}

/// `((raw - min) / (max - min))²` over in-mask voxels, zero elsewhere. A map
/// that is constant inside the mask yields all zeros.
pub fn minmax_square<T: Real>(raw: &Tensor<T>, mask: &Mask) -> Result<Tensor<T>> {
    if raw.shape() != mask.dims() {
        return Err(Error::shape(format!("minmax_square: map {:?} vs mask {:?}", raw.shape(), mask.dims())));
    }
    let inside = || raw.data().iter().zip(mask.data()).filter(|(_, &m)| m).map(|(&v, _)| v.to_f64());
    let lo = inside().fold(f64::INFINITY, f64::min);
    let hi = inside().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let out = raw
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| {
            if m && span > 0.0 {
                let u = (v.to_f64() - lo) / span;
                T::from_f64(u * u)
            } else {
                T::ZERO
            }
        })
        .collect();
    Tensor::from_vec(raw.shape().to_vec(), out)
}

/// Marks the `round((1 - q) · n)` largest of the `n` in-mask values: true
/// exactly where a value exceeds the in-mask order statistic just below
/// them. Ties at the threshold are all excluded.
pub fn binarize(values: &[f32], mask: &Mask, quantile: f64) -> Result<Mask> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::config(format!("threshold quantile must lie in (0, 1), got {quantile}")));
    }
    if values.len() != mask.len() {
        return Err(Error::shape(format!("binarize: {} values for a mask of {}", values.len(), mask.len())));
    }
    let mut inside: Vec<f32> = values.iter().zip(mask.data()).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    inside.sort_by(f32::total_cmp);
    let n = inside.len();
    let keep = (((1.0 - quantile) * n as f64).round() as usize).min(n);
    let threshold = if keep == n { f32::NEG_INFINITY } else { inside[n - keep - 1] };
    Ok(Mask::new(mask.dims(), values.iter().zip(mask.data()).map(|(&v, &m)| m && v > threshold).collect())?)
}

/// Continuous network map for sample `b` of a batch of artifacts.
pub fn fbn_values<T: Real>(artifacts: &AttentionArtifacts<T>, b: usize, mask: &Mask) -> Result<Tensor<T>> {
    let s = artifacts.presigmoid()?;
    let shape = s.shape().to_vec();
    if b >= shape[0] {
        return Err(Error::shape(format!("sample {b} of a batch of {}", shape[0])));
    }
    let len: usize = shape[1..].iter().product();
    let one = Tensor::from_vec(shape[1..].to_vec(), s.data()[b * len..(b + 1) * len].to_vec())?;
    let c = shape[1];
    let ca = Tensor::from_vec(vec![c], artifacts.ca_weights.data()[b * c..(b + 1) * c].to_vec())?;
    minmax_square(&sum_channels(&weight_channels(&one, &ca)?)?, mask)
}

/// Extracts the network of a single-sample artifact set.
pub fn extract_fbn<T: Real>(artifacts: &AttentionArtifacts<T>, mask: &Mask, threshold_quantile: f64) -> Result<FbnMap> {
    if artifacts.batch() != 1 {
        return Err(Error::shape(format!("extract_fbn expects one sample, got {}", artifacts.batch())));
    }
    let values: Vec<f32> = fbn_values(artifacts, 0, mask)?.data().iter().map(|v| v.to_f64() as f32).collect();
    let binary = binarize(&values, mask, threshold_quantile)?;
    Ok(FbnMap {
        dims: mask.dims(),
        values,
        binary,
        time_index: 0,
        subject_id: String::new(),
        threshold_quantile,
    })
}

/// Runs the encoder and attention stages (eval mode) over every time step of
/// a series and extracts one map per step. The series is standardized first,
/// as during training.
pub fn extract_series<T: Real>(
    model: &Model<T>,
    series: &Volume4D,
    threshold_quantile: f64,
    batch_size: usize,
) -> Result<Vec<FbnMap>> {
    let vol = standardize(series)?;
    let [d, h, w] = vol.spatial_dims();
    let plane = d * h * w;
    let mask = vol.mask();
    let mut maps = Vec::with_capacity(vol.time_steps());
    let steps: Vec<usize> = (0..vol.time_steps()).collect();
    for chunk in steps.chunks(batch_size.max(1)) {
        let data: Vec<T> = chunk.iter().flat_map(|&t| vol.frame(t).iter().map(|&v| T::from_f64(v as f64))).collect();
        let x = Tensor::from_vec(vec![chunk.len(), 1, d, h, w], data)?;
        let artifacts = model.attention(&x)?;
        for (b, &t) in chunk.iter().enumerate() {
            let values: Vec<f32> =
                fbn_values(&artifacts, b, mask)?.data().iter().map(|v| v.to_f64() as f32).collect();
            debug_assert_eq!(values.len(), plane);
            let binary = binarize(&values, mask, threshold_quantile)?;
            maps.push(FbnMap {
                dims: [d, h, w],
                values,
                binary,
                time_index: t,
                subject_id: series.subject_id.clone(),
                threshold_quantile,
            });
        }
    }
    Ok(maps)
}
