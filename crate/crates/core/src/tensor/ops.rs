use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Concatenates two (B, C, D, H, W) tensors along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, ca, sa) = a.dims5("concat_channels")?;
    let (bb, cb, sb) = b.dims5("concat_channels")?;
    if ba != bb || sa != sb {
        return Err(Error::shape(format!(
            "concat_channels: {:?} and {:?} differ outside the channel axis",
            a.shape(),
            b.shape()
        )));
    }
    let plane: usize = sa.iter().product();
    let mut out = Vec::with_capacity(a.len() + b.len());
    for n in 0..ba {
        out.extend_from_slice(&a.data()[n * ca * plane..(n + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[n * cb * plane..(n + 1) * cb * plane]);
    }
    Tensor::from_vec(vec![ba, ca + cb, sa[0], sa[1], sa[2]], out)
}

/// Inverse of [`concat_channels`]: splits at channel `at`.
pub fn split_channels<T: Real>(x: &Tensor<T>, at: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, c, s) = x.dims5("split_channels")?;
    if at > c {
        return Err(Error::shape(format!("split_channels: split point {at} beyond {c} channels")));
    }
    let plane: usize = s.iter().product();
    let mut left = Vec::with_capacity(batch * at * plane);
    let mut right = Vec::with_capacity(batch * (c - at) * plane);
    for sample in x.data().chunks(c * plane) {
        left.extend_from_slice(&sample[..at * plane]);
        right.extend_from_slice(&sample[at * plane..]);
    }
    Ok((
        Tensor::from_vec(vec![batch, at, s[0], s[1], s[2]], left)?,
        Tensor::from_vec(vec![batch, c - at, s[0], s[1], s[2]], right)?,
    ))
}

#[derive(Clone, Copy)]
enum Broadcast {
    Full,
    /// `b` holds one value per channel, shared across the batch.
    PerChannel { channels: usize, plane: usize },
    /// `b` holds one value per (sample, channel).
    PerSampleChannel { plane: usize },
}

fn broadcast_kind<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Full);
    }
    let sa = a.shape();
    if sa.len() >= 2 {
        let (batch, channels) = (sa[0], sa[1]);
        let plane: usize = sa[2..].iter().product();
        match b.shape() {
            [c] | [c, 1] if *c == channels => return Ok(Broadcast::PerChannel { channels, plane }),
            [n, c] if *n == batch && *c == channels => {
                return Ok(Broadcast::PerSampleChannel { plane })
            }
            _ => {}
        }
    }
    Err(Error::shape(format!("hadamard: {:?} does not broadcast against {:?}", b.shape(), sa)))
}

fn factor_index(kind: Broadcast, i: usize) -> usize {
    match kind {
        Broadcast::Full => i,
        Broadcast::PerChannel { channels, plane } => (i / plane) % channels,
        Broadcast::PerSampleChannel { plane, .. } => i / plane,
    }
}

/// Elementwise product. `b` is either the same shape as `a` or a per-channel
/// factor (`[C]`, `[C, 1]` or `[B, C]`) broadcast over the spatial axes.
pub fn hadamard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let kind = broadcast_kind(a, b)?;
    let bd = b.data();
    let out = a.data().iter().enumerate().map(|(i, &v)| v * bd[factor_index(kind, i)]).collect();
    Tensor::from_vec(a.shape().to_vec(), out)
}

/// Returns `(da, db)`; `db` is reduced back to `b`'s shape.
pub fn hadamard_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let kind = broadcast_kind(a, b)?;
    a.expect_same_shape(grad_out, "hadamard_backward")?;
    let (ad, bd, gd) = (a.data(), b.data(), grad_out.data());
    let mut da = vec![T::ZERO; ad.len()];
    let mut db = vec![T::ZERO; bd.len()];
    for i in 0..ad.len() {
        let j = factor_index(kind, i);
        da[i] = gd[i] * bd[j];
        db[j] += gd[i] * ad[i];
    }
    Ok((Tensor::from_vec(a.shape().to_vec(), da)?, Tensor::from_vec(b.shape().to_vec(), db)?))
}
