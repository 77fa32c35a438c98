use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LinearGrads<T: Real = f64> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check<T: Real>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (&[b, f], &[wf, g]) = (x.shape(), weights.shape()) else {
        return Err(Error::shape(format!(
            "fully_connected: expected x (B, F) and weights (F, G), got {:?} and {:?}",
            x.shape(),
            weights.shape()
        )));
    };
    if f != wf || bias.shape() != [g] {
        return Err(Error::shape(format!(
            "fully_connected: x {:?}, weights {:?} and bias {:?} are inconsistent",
            x.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    Ok((b, f, g))
}

/// `x @ weights + bias` with `x: (B, F)`, `weights: (F, G)`, `bias: (G)`.
pub fn fully_connected<T: Real>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, f, g) = check(x, weights, bias)?;
    let mut out: Vec<T> = (0..b).flat_map(|_| bias.data().iter().copied()).collect();
    T::gemm(b, f, g, T::ONE, x.data(), f as isize, 1, weights.data(), g as isize, 1, T::ONE, &mut out, g as isize, 1);
    Tensor::from_vec(vec![b, g], out)
}

pub fn fully_connected_backward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (b, f, g) = check(x, weights, bias)?;
    if grad_out.shape() != [b, g] {
        return Err(Error::shape(format!(
            "fully_connected_backward: grad_out {:?} does not match [{b}, {g}]",
            grad_out.shape()
        )));
    }
    let gy = grad_out.data();
    let mut dx = vec![T::ZERO; b * f];
    T::gemm(b, g, f, T::ONE, gy, g as isize, 1, weights.data(), 1, g as isize, T::ZERO, &mut dx, f as isize, 1);
    let mut dw = vec![T::ZERO; f * g];
    T::gemm(f, b, g, T::ONE, x.data(), 1, f as isize, gy, g as isize, 1, T::ZERO, &mut dw, g as isize, 1);
    let mut db = vec![T::ZERO; g];
    for row in gy.chunks(g) {
        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
    }
    Ok(LinearGrads {
        input: Tensor::from_vec(vec![b, f], dx)?,
        weights: Tensor::from_vec(vec![f, g], dw)?,
        bias: Tensor::from_vec(vec![g], db)?,
    })
}
