//! Masked reconstruction loss, Adam with step decay, and the training loop.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, NamedTensorMut};
use crate::tensor::{Mode, Real, Tensor};
use crate::volio::{standardize, Mask, Volume4D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Global gradient norm above which a step is rescaled.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            step_size: 2,
            gamma: 0.9,
            batch_size: 12,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch_size must be at least 2 for batch-norm statistics, got {}",
                self.batch_size
            )));
        }
        if self.step_size == 0 {
            return Err(Error::config("step_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps_adam > 0.0) {
            return Err(Error::config("Adam constants must satisfy 0 <= beta < 1 and eps > 0"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }
}

/// `lr0 · gamma^floor(epoch / step_size)`, epochs counted from 0.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.gamma.powi((epoch / cfg.step_size.max(1)) as i32)
}

/// Mean squared error over in-mask voxels of every sample, and its gradient
/// with respect to `y_hat`. The mask covers the trailing `(D, H, W)` axes.
pub fn mse_loss<T: Real>(y: &Tensor<T>, y_hat: &Tensor<T>, mask: &Mask) -> Result<(f64, Tensor<T>)> {
    if y.shape() != y_hat.shape() {
        return Err(Error::shape(format!("mse_loss: target {:?} vs prediction {:?}", y.shape(), y_hat.shape())));
    }
    if y.ndim() < 3 || y.shape()[y.ndim() - 3..] != mask.dims() {
        return Err(Error::shape(format!("mse_loss: mask {:?} does not cover {:?}", mask.dims(), y.shape())));
    }
    if mask.count() == 0 {
        return Err(Error::config("mse_loss: mask is empty"));
    }
    let bits: Vec<bool> = mask.data().iter().copied().cycle().take(y.len()).collect();
    masked_mse(y, y_hat, &bits)
}

/// First and second moments per parameter, in the model's visiting order.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T: Real = f32> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self { m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> impl Iterator<Item = &[T]> {
        self.v.iter().map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update using each tensor's `grad` slot; a
/// missing slot counts as a zero gradient. Fails without touching any
/// parameter if a gradient is not finite.
pub fn adam_step<T: Real>(
    params: &mut [NamedTensorMut<'_, T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for p in params.iter() {
        if let Some(g) = &p.tensor.grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: format!("gradient of {}", p.name) });
            }
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![T::ZERO; p.tensor.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.tensor.len()) {
        return Err(Error::shape("adam_step: parameter layout changed between steps"));
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.tensor.grad.take();
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i].to_f64());
            let mi = b1 * m[i].to_f64() + (1.0 - b1) * g;
            let vi = b2 * v[i].to_f64() + (1.0 - b2) * g * g;
            m[i] = T::from_f64(mi);
            v[i] = T::from_f64(vi);
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps_adam);
            data[i] = T::from_f64(data[i].to_f64() - step);
        }
        p.tensor.grad = grad;
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping and whether clipping happened.
pub fn clip_global_norm<T: Real>(params: &mut [NamedTensorMut<'_, T>], max_norm: f64) -> (f64, bool) {
    let norm = params
        .iter()
        .filter_map(|p| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter().map(|v| v.to_f64() * v.to_f64()))
        .sum::<f64>()
        .sqrt();
    if norm <= max_norm || !norm.is_finite() {
        return (norm, false);
    }
    let s = T::from_f64(max_norm / norm);
    for p in params.iter_mut() {
        if let Some(g) = &mut p.tensor.grad {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    (norm, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during the epoch; `None` for the pre-training row.
    pub lr: Option<f64>,
    pub mean_loss: f64,
    pub clipped_steps: usize,
    /// Wall time; kept out of the loss table so reports stay reproducible.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Row 0 is the loss of the initial parameters, then one row per epoch.
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.mean_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_loss)
    }

    /// Tab-separated `epoch, lr, mean_loss, clipped_steps`.
    pub fn loss_table_tsv(&self) -> String {
        let mut out = String::from("epoch\tlr\tmean_loss\tclipped_steps\n");
        for r in &self.records {
            let lr = r.lr.map_or("-".to_string(), |v| format!("{v:.9}"));
            let _ = writeln!(out, "{}\t{lr}\t{:.9}\t{}", r.epoch, r.mean_loss, r.clipped_steps);
        }
        out
    }
}

struct Sample<'a> {
    frame: &'a [f32],
    mask: &'a Mask,
}

fn assemble<T: Real>(batch: &[&Sample<'_>], dims: [usize; 3]) -> Result<(Tensor<T>, Vec<bool>)> {
    let plane: usize = dims.iter().product();
    let mut data = Vec::with_capacity(batch.len() * plane);
    let mut bits = Vec::with_capacity(batch.len() * plane);
    for s in batch {
        data.extend(s.frame.iter().map(|&v| T::from_f64(v as f64)));
        bits.extend_from_slice(s.mask.data());
    }
    Ok((Tensor::from_vec(vec![batch.len(), 1, dims[0], dims[1], dims[2]], data)?, bits))
}

fn masked_mse<T: Real>(x: &Tensor<T>, y_hat: &Tensor<T>, bits: &[bool]) -> Result<(f64, Tensor<T>)> {
    let n = bits.iter().filter(|&&b| b).count();
    if n == 0 {
        return Err(Error::config("no in-mask voxels"));
    }
    let scale = 2.0 / n as f64;
    let mut sum = 0.0;
    let mut grad = vec![T::ZERO; x.len()];
    for (((&a, &b), &m), g) in x.data().iter().zip(y_hat.data()).zip(bits).zip(grad.iter_mut()) {
        if m {
            let d = b.to_f64() - a.to_f64();
            sum += d * d;
            *g = T::from_f64(scale * d);
        }
    }
    Ok((sum / n as f64, Tensor::from_vec(x.shape().to_vec(), grad)?))
}

/// Trains on every time step of every series. Each series is standardized
/// per step inside its mask; batches are reshuffled every epoch from a
/// generator seeded with `cfg.seed`, and a trailing batch with fewer than two
/// samples is skipped. `on_epoch(epoch, model)` runs after every epoch
/// (numbered from 1), e.g. to write a checkpoint.
pub fn fit<T: Real>(
    dataset: &[Volume4D],
    model: &mut Model<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Model<T>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let dims = model.config.input_dims;
    let standardized = dataset.iter().map(standardize).collect::<std::result::Result<Vec<_>, _>>()?;
    for v in &standardized {
        if v.spatial_dims() != dims {
            return Err(Error::shape(format!(
                "series {} has dims {:?}, model expects {dims:?}",
                v.subject_id,
                v.spatial_dims()
            )));
        }
    }
    let samples: Vec<Sample<'_>> = standardized
        .iter()
        .flat_map(|v| (0..v.time_steps()).map(move |t| Sample { frame: v.frame(t), mask: v.mask() }))
        .collect();
    if samples.len() < 2 {
        return Err(Error::config("training needs at least two volumes"));
    }
    let batch = cfg.batch_size.min(samples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::<T>::new();
    let mut report = TrainReport::default();

    let started = Instant::now();
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut total = 0.0;
    let mut count = 0;
    for chunk in order.chunks(batch).filter(|c| c.len() >= 2) {
        let refs: Vec<&Sample<'_>> = chunk.iter().map(|&i| &samples[i]).collect();
        let (x, bits) = assemble::<T>(&refs, dims)?;
        let (out, _) = model.forward(&x, Mode::Train)?;
        total += masked_mse(&x, &out.reconstruction, &bits)?.0;
        count += 1;
    }
    let initial = total / count as f64;
    if !initial.is_finite() {
        return Err(Error::Diverged { epoch: 0, loss: initial });
    }
    report.records.push(EpochRecord {
        epoch: 0,
        lr: None,
        mean_loss: initial,
        clipped_steps: 0,
        seconds: started.elapsed().as_secs_f64(),
    });

    let mut order = order;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch - 1, cfg);
        order.shuffle(&mut rng);
        let (mut total, mut count, mut clipped) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(batch).filter(|c| c.len() >= 2) {
            let refs: Vec<&Sample<'_>> = chunk.iter().map(|&i| &samples[i]).collect();
            let (x, bits) = assemble::<T>(&refs, dims)?;
            model.zero_grad();
            let (out, cache) = model.forward(&x, Mode::Train)?;
            let (loss, grad) = masked_mse(&x, &out.reconstruction, &bits)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            model.backward(&cache, &grad, false)?;
            model.update_running_stats(&cache);
            let mut params = model.params_mut();
            if clip_global_norm(&mut params, cfg.clip_norm).1 {
                clipped += 1;
            }
            adam_step(&mut params, &mut adam, lr, cfg)?;
            total += loss;
            count += 1;
        }
        let mean_loss = total / count as f64;
        report.records.push(EpochRecord {
            epoch,
            lr: Some(lr),
            mean_loss,
            clipped_steps: clipped,
            seconds: started.elapsed().as_secs_f64(),
        });
        on_epoch(epoch, model)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert!((lr_at(2, &cfg) - 0.0009).abs() < 1e-15);
        assert!((lr_at(19, &cfg) - 0.001 * 0.9f64.powi(9)).abs() < 1e-15);
    }

    #[test]
    fn batch_size_one_rejected() {
        let err = TrainConfig { batch_size: 1, ..Default::default() }.validate().unwrap_err();
        assert!(err.to_string().contains("batch_size"));
    }

    #[test]
    fn empty_mask_rejected() {
        let y = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        let mask = Mask::new([2, 2, 2], vec![false; 8]).unwrap();
        assert!(mse_loss(&y, &y, &mask).is_err());
    }
}
