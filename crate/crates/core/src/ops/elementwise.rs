//! Activations, softmax, channel concatenation and addition.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Logistic function, evaluated so that neither branch overflows.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Sigmoid => x.map(sigmoid_scalar),
    }
}

/// Gradient of [`activation`] given its input `x` and output `y`.
pub fn activation_backward(
    x: &Tensor,
    y: &Tensor,
    grad_out: &Tensor,
    kind: Activation,
) -> Result<Tensor> {
    match kind {
        Activation::Relu => x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 }),
        Activation::Sigmoid => y.zip_map(grad_out, |s, g| g * s * (1.0 - s)),
    }
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let m = *x
        .dims()
        .last()
        .ok_or_else(|| shape_err!("softmax needs rank >= 1"))?;
    if m == 0 {
        return Err(shape_err!("softmax over an empty axis"));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(m) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax backward given the softmax output `y`.
pub fn softmax_lastdim_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    y.expect_same_dims(grad_out)?;
    let m = *y.dims().last().expect("checked by forward");
    let mut gx = vec![0.0; y.len()];
    for ((gx_row, y_row), g_row) in gx
        .chunks_mut(m)
        .zip(y.data().chunks(m))
        .zip(grad_out.data().chunks(m))
    {
        let inner: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
        for ((d, &s), &g) in gx_row.iter_mut().zip(y_row).zip(g_row) {
            *d = s * (g - inner);
        }
    }
    Tensor::new(y.dims().to_vec(), gx)
}

/// Concatenates two `[N,C,H,W]` tensors along channels, `a` first.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(shape_err!(
            "concat of {:?} and {:?}: batch/spatial dims differ",
            a.dims(),
            b.dims()
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

/// Splits a concatenated gradient back into its two parts.
pub fn concat_channels_backward(grad_out: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let [_, c, _, _] = grad_out.dims4()?;
    Ok((
        grad_out.slice_channels(0..ca)?,
        grad_out.slice_channels(ca..c)?,
    ))
}

pub fn add_elementwise(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_sigmoid_values() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid_scalar(-800.0).is_finite() && sigmoid_scalar(800.0) == 1.0);
    }

    #[test]
    fn softmax_examples() {
        let c = Tensor::full(&[4], -3.7);
        for &v in softmax_lastdim(&c).unwrap().data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = Tensor::new(vec![2], vec![0.0, 2f64.ln()]).unwrap();
        let y = softmax_lastdim(&x).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let big = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let y = softmax_lastdim(&big).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
    }

    #[test]
    fn concat_examples() {
        let a = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64);
        let b = Tensor::from_fn(&[1, 3, 4, 4], |i| -(i as f64));
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.dims(), &[1, 5, 4, 4]);
        assert_eq!(ab.slice_channels(0..2).unwrap(), a);
        assert_eq!(ab.slice_channels(2..5).unwrap(), b);
        let empty = Tensor::zeros(&[1, 0, 4, 4]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        assert!(concat_channels(&a, &Tensor::zeros(&[1, 1, 4, 5])).is_err());
    }

    #[test]
    fn add_examples() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(add_elementwise(&a, &b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(add_elementwise(&a, &Tensor::zeros(&[2])).unwrap(), a);
        assert!(add_elementwise(&a, &a.scale(-1.0))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(add_elementwise(&a, &Tensor::zeros(&[3])).is_err());
    }
}
