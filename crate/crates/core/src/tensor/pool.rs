use super::{spatial_len, Real, Tensor};
use crate::error::{Error, Result};

/// Mean over all spatial positions: (B, C, D, H, W) -> (B, C).
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, channels, spatial) = x.dims5("global_avg_pool")?;
    let plane = spatial_len(spatial);
    let n = T::from_usize(plane);
    let out = x.data().chunks(plane).map(|c| c.iter().copied().sum::<T>() / n).collect();
    Tensor::from_vec(vec![batch, channels], out)
}

/// Spreads each pooled gradient uniformly over its channel.
pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let &[batch, channels, d, h, w] = input_shape else {
        return Err(Error::shape(format!("global_avg_pool_backward: input shape {input_shape:?} is not 5-D")));
    };
    if grad_out.shape() != [batch, channels] {
        return Err(Error::shape(format!(
            "global_avg_pool_backward: grad_out {:?} does not match [{batch}, {channels}]",
            grad_out.shape()
        )));
    }
    let plane = d * h * w;
    let n = T::from_usize(plane);
    let mut out = Vec::with_capacity(batch * channels * plane);
    for &g in grad_out.data() {
        out.extend(std::iter::repeat(g / n).take(plane));
    }
    Tensor::from_vec(input_shape.to_vec(), out)
}
