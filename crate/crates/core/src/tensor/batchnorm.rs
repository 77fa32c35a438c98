use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are refreshed from them.
    Train,
    /// Running statistics only.
    Eval,
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Real = f64> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::ONE).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::ONE),
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential moving update of the running statistics from a train-mode
    /// pass. The variance is stored unbiased. No-op for eval-mode caches.
    pub fn update_running(&mut self, cache: &BatchNormCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = T::from_f64(self.momentum);
        let keep = T::ONE - m;
        let n = cache.count as f64;
        let unbias = T::from_f64(n / (n - 1.0));
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = keep * *rm + m * cache.mean[c];
            let rv = &mut self.running_var.data_mut()[c];
            *rv = keep * *rv + m * cache.var[c] * unbias;
        }
    }
}

/// Values saved by [`batchnorm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Real = f64> {
    pub mode: Mode,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    mean: Vec<T>,
    var: Vec<T>,
    count: usize,
}

/// Normalizes `x` (B, C, ...spatial) per channel. Pure: running statistics
/// are updated separately through [`BatchNormState::update_running`].
pub fn batchnorm<T: Real>(
    x: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape(format!("batchnorm: expected (B, C, ...), got {shape:?}")));
    }
    let (batch, channels) = (shape[0], shape[1]);
    if channels != state.channels() {
        return Err(Error::shape(format!(
            "batchnorm: input {shape:?} has {channels} channels, state has {}",
            state.channels()
        )));
    }
    let plane: usize = shape[2..].iter().product();
    let count = batch * plane;
    if mode == Mode::Train && count < 2 {
        return Err(Error::shape(format!(
            "batchnorm: train mode needs at least two values per channel, input {shape:?} has {count}"
        )));
    }

    let data = x.data();
    let eps = T::from_f64(state.epsilon);
    let (mean, var) = match mode {
        Mode::Train => {
            let n = T::from_usize(count);
            let mut mean = vec![T::ZERO; channels];
            let mut var = vec![T::ZERO; channels];
            for c in 0..channels {
                let mut s = T::ZERO;
                for b in 0..batch {
                    let off = (b * channels + c) * plane;
                    s += data[off..off + plane].iter().copied().sum::<T>();
                }
                let mu = s / n;
                let mut ss = T::ZERO;
                for b in 0..batch {
                    let off = (b * channels + c) * plane;
                    ss += data[off..off + plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
                mean[c] = mu;
                var[c] = ss / n;
            }
            (mean, var)
        }
        Mode::Eval => (state.running_mean.data().to_vec(), state.running_var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();

    let gamma = state.gamma.data();
    let beta = state.beta.data();
    let mut x_hat = vec![T::ZERO; data.len()];
    let mut out = vec![T::ZERO; data.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            for i in off..off + plane {
                let xh = (data[i] - mean[c]) * inv_std[c];
                x_hat[i] = xh;
                out[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    let y = Tensor::from_vec(shape.to_vec(), out)?;
    Ok((y, BatchNormCache { mode, x_hat, inv_std, mean, var, count }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    state: &BatchNormState<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let shape = grad_out.shape();
    if grad_out.len() != cache.x_hat.len() || shape.len() < 2 || shape[1] != state.channels() {
        return Err(Error::shape(format!("batchnorm_backward: grad_out {shape:?} does not match the cached input")));
    }
    let (batch, channels) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let gy = grad_out.data();
    let gamma = state.gamma.data();

    let mut dgamma = vec![T::ZERO; channels];
    let mut dbeta = vec![T::ZERO; channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * plane;
            for i in off..off + plane {
                dgamma[c] += gy[i] * cache.x_hat[i];
                dbeta[c] += gy[i];
            }
        }
    }

    let mut dx = vec![T::ZERO; gy.len()];
    match cache.mode {
        Mode::Eval => {
            for b in 0..batch {
                for c in 0..channels {
                    let scale = gamma[c] * cache.inv_std[c];
                    let off = (b * channels + c) * plane;
                    for i in off..off + plane {
                        dx[i] = gy[i] * scale;
                    }
                }
            }
        }
        Mode::Train => {
            let n = T::from_usize(cache.count);
            for c in 0..channels {
                // dgamma = sum(dy * x_hat), dbeta = sum(dy)
                let k = gamma[c] * cache.inv_std[c] / n;
                for b in 0..batch {
                    let off = (b * channels + c) * plane;
                    for i in off..off + plane {
                        dx[i] = k * (n * gy[i] - dbeta[c] - cache.x_hat[i] * dgamma[c]);
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(shape.to_vec(), dx)?,
        Tensor::from_vec(vec![channels], dgamma)?,
        Tensor::from_vec(vec![channels], dbeta)?,
    ))
}
