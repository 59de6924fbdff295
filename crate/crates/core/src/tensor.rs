//! Dense row-major `f64` tensors and the forward kernels shared by the tape.
//!
//! Tensors are immutable values: every kernel returns a fresh tensor. The
//! kernels here are plain functions so they can be reused both by eager
//! callers and by [`crate::autodiff::Tape`] when it records an op.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, length mismatches
    /// and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} must be non-empty with positive dims"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTensor(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_parts(vec![n, n], data)
    }

    /// Row-major 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidTensor("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Number of last-dimension slices.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::InvalidTensor(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Single row of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let [m, n] = dims2(&self.shape, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }
}

pub(crate) fn dims2(shape: &[usize], op: &'static str) -> Result<[usize; 2]> {
    match shape {
        &[m, n] => Ok([m, n]),
        _ => Err(Error::InvalidTensor(format!(
            "{op} expects a 2-D tensor, got {shape:?}"
        ))),
    }
}

/// `C = A · B` for `A: [m, k]`, `B: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = dims2(a.shape(), "matmul")?;
    let [k2, n] = dims2(b.shape(), "matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Accumulates `A·B` into `out` (i-t-j loop order, fixed summation order).
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Per-slice statistics kept by [`layer_norm_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LnCache)> {
    let d = x.last_dim();
    if gamma.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if beta.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), beta.shape()));
    }
    if !(eps >= 0.0) {
        return Err(Error::config(
            "eps",
            format!("layer_norm eps must be >= 0, got {eps}"),
        ));
    }
    let rows = x.rows();
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xs = &x.data()[r * d..(r + 1) * d];
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = (var + eps).sqrt();
        // Zero-variance slices with eps = 0 normalise to zero rather than NaN.
        let rs = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        rstd[r] = rs;
        for j in 0..d {
            let h = (xs[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        LnCache { xhat, rstd },
    ))
}

/// Layer norm over the last dimension with population variance and `eps`
/// inside the square root.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_forward(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_lastdim(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `x · sigmoid(x)`, elementwise.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Exact (erf-based) GELU, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let b = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let c = matmul(&t(&[&[1.0, 2.0]]), &t(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn new_rejects_bad_inputs() {
        assert!(Tensor::new(vec![2], vec![1.0]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::ones(&[3]);
        let b = Tensor::zeros(&[3]);
        let y = layer_norm(&Tensor::full(&[3], 7.0), &g, &b, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let y = layer_norm(
            &Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(),
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            0.0,
        )
        .unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);

        let y = layer_norm(
            &Tensor::new(vec![2], vec![0.3, -9.0]).unwrap(),
            &Tensor::zeros(&[2]),
            &Tensor::full(&[2], 5.0),
            1e-6,
        )
        .unwrap();
        assert_eq!(y.data(), &[5.0, 5.0]);

        let bad = layer_norm(&Tensor::zeros(&[2, 4]), &g, &b, 1e-6);
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_lastdim(&Tensor::zeros(&[3]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_lastdim(&Tensor::new(vec![2], vec![2f64.ln(), 0.0]).unwrap());
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax_lastdim(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
    }

    #[test]
    fn silu_and_gelu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((silu_scalar(50.0) - 50.0).abs() < 1e-9);
        assert_eq!(gelu_scalar(0.0), 0.0);
        // Φ(1) = 0.841344746068543
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 1..32)) {
            let n = v.len();
            let s = softmax_lastdim(&Tensor::new(vec![n], v).unwrap());
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
            prop_assert!((s.sum() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn layer_norm_standardises(v in prop::collection::vec(-10.0f64..10.0, 4..32)) {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assume!(var > 1e-3);
            let y = layer_norm(
                &Tensor::new(vec![n], v).unwrap(),
                &Tensor::ones(&[n]),
                &Tensor::zeros(&[n]),
                1e-14,
            ).unwrap();
            let m = y.sum() / n as f64;
            let var_y = y.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((var_y - 1.0).abs() < 1e-8);
        }

        #[test]
        fn kernels_are_deterministic(v in prop::collection::vec(-3.0f64..3.0, 6)) {
            let a = Tensor::new(vec![2, 3], v).unwrap();
            let b = a.transpose().unwrap();
            prop_assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
            prop_assert_eq!(softmax_lastdim(&a), softmax_lastdim(&a));
        }
    }
}
