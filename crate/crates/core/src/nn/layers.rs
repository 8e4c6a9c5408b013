//! Row-wise layers over `[rows × features]` matrices with hand-written
//! backward passes. Forward methods take `&self`; backward methods
//! accumulate into the parameter gradients.

use rand::Rng;

use super::scalar::{gemm, MatRef, Scalar};
use super::tensor::{join, Param, Parameters, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// `[in × out]`
    pub weight: Param<T>,
    /// `[out]`, absent for bias-free projections.
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = (1.0 / input as f64).sqrt();
        Self {
            weight: Param::new(Tensor::randn(&[input, output], std, rng)),
            bias: Some(Param::new(Tensor::zeros(&[output]))),
        }
    }

    pub fn without_bias<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            bias: None,
            ..Self::new(input, output, rng)
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut w = Tensor::zeros(&[n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = T::one();
        }
        Self {
            weight: Param::new(w),
            bias: Some(Param::new(Tensor::zeros(&[n]))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (din, dout) = (self.input_dim(), self.output_dim());
        if x.cols() != din {
            return Err(Error::Shape(format!(
                "linear expects {din} input features, got {}",
                x.cols()
            )));
        }
        let n = x.rows();
        let mut y = Tensor::zeros(&[n, dout]);
        if let Some(b) = &self.bias {
            for i in 0..n {
                y.row_mut(i).copy_from_slice(b.value.data());
            }
        }
        gemm(
            T::one(),
            MatRef::new(x.data(), n, din),
            MatRef::new(self.weight.value.data(), din, dout),
            T::one(),
            y.data_mut(),
            dout,
        );
        Ok(y)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        self.backward_params(x, dy);
        self.input_grad(dy)
    }

    pub fn backward_params(&mut self, x: &Tensor<T>, dy: &Tensor<T>) {
        let (din, dout) = (self.input_dim(), self.output_dim());
        let n = x.rows();
        debug_assert_eq!(dy.rows(), n);
        gemm(
            T::one(),
            MatRef::t(x.data(), n, din),
            MatRef::new(dy.data(), n, dout),
            T::one(),
            self.weight.grad.data_mut(),
            dout,
        );
        if let Some(b) = &mut self.bias {
            let db = b.grad.data_mut();
            for i in 0..n {
                for (g, d) in db.iter_mut().zip(dy.row(i)) {
                    *g += *d;
                }
            }
        }
    }

    pub fn input_grad(&self, dy: &Tensor<T>) -> Tensor<T> {
        let (din, dout) = (self.input_dim(), self.output_dim());
        let n = dy.rows();
        let mut dx = Tensor::zeros(&[n, din]);
        gemm(
            T::one(),
            MatRef::new(dy.data(), n, dout),
            MatRef::t(self.weight.value.data(), din, dout),
            T::zero(),
            dx.data_mut(),
            din,
        );
        dx
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gain: Param<T>,
    pub shift: Param<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Param::new(Tensor::full(&[dim], T::one())),
            shift: Param::new(Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        let d = self.gain.value.len();
        if x.cols() != d {
            return Err(Error::Shape(format!("layer norm over {d}, got {}", x.cols())));
        }
        let n = x.rows();
        let dt = T::of(d as f64);
        let eps = T::of(LN_EPS);
        let mut normalized = Tensor::zeros(&[n, d]);
        let mut y = Tensor::zeros(&[n, d]);
        let mut inv_std = Vec::with_capacity(n);
        let (g, b) = (self.gain.value.data(), self.shift.value.data());
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let nr = normalized.row_mut(i);
            for (o, &v) in nr.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            let yr = y.row_mut(i);
            for j in 0..d {
                yr[j] = normalized.row(i)[j] * g[j] + b[j];
            }
        }
        Ok((y, LayerNormCache {
            normalized,
            inv_std,
        }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.gain.value.len();
        let n = dy.rows();
        let dt = T::of(d as f64);
        let mut dx = Tensor::zeros(&[n, d]);
        let g = self.gain.value.data().to_vec();
        for i in 0..n {
            let xh = cache.normalized.row(i);
            let dyr = dy.row(i);
            {
                let gg = self.gain.grad.data_mut();
                for j in 0..d {
                    gg[j] += dyr[j] * xh[j];
                }
            }
            {
                let gs = self.shift.grad.data_mut();
                for j in 0..d {
                    gs[j] += dyr[j];
                }
            }
            // dxhat = dy * g; dx = inv/d * (d*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..d {
                let dxh = dyr[j] * g[j];
                s1 += dxh;
                s2 += dxh * xh[j];
            }
            let inv = cache.inv_std[i];
            let dxr = dx.row_mut(i);
            for j in 0..d {
                let dxh = dyr[j] * g[j];
                dxr[j] = inv * (dxh - s1 / dt - xh[j] * s2 / dt);
            }
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "shift"), &self.shift);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "shift"), &mut self.shift);
    }
}

/// Lookup table `[count × dim]`.
#[derive(Debug, Clone)]
pub struct Embedding<T> {
    pub table: Param<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new<R: Rng + ?Sized>(count: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            table: Param::new(Tensor::randn(&[count, dim], std, rng)),
        }
    }

    pub fn count(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.value.shape()[1]
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let d = self.dim();
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            if id >= self.count() {
                return Err(Error::Invalid(format!(
                    "embedding index {id} out of range {}",
                    self.count()
                )));
            }
            out.row_mut(i).copy_from_slice(self.table.value.row(id));
        }
        Ok(out)
    }

    pub fn backward(&mut self, ids: &[usize], dy: &Tensor<T>) {
        let d = self.dim();
        let g = self.table.grad.data_mut();
        for (i, &id) in ids.iter().enumerate() {
            for (a, b) in g[id * d..(id + 1) * d].iter_mut().zip(dy.row(i)) {
                *a += *b;
            }
        }
    }
}

impl<T: Scalar> Parameters<T> for Embedding<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "table"), &self.table);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

pub fn gelu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    y
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        *d *= gelu_grad(v);
    }
    dx
}

/// In-place numerically stable softmax.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// In-place log-softmax.
pub fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Cross entropy of one logit row against a target index, with the gradient
/// `softmax - onehot` written into `grad` scaled by `weight`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &[T],
    target: usize,
    weight: T,
    grad: &mut [T],
) -> T {
    let mut p = logits.to_vec();
    log_softmax_in_place(&mut p);
    let loss = -p[target];
    for (g, lp) in grad.iter_mut().zip(&p) {
        *g += weight * lp.exp();
    }
    grad[target] -= weight;
    loss
}

/// Inverted-dropout keep mask; `None` when `p == 0`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Option<Vec<T>> {
    if p <= 0.0 {
        return None;
    }
    let scale = T::of(1.0 / (1.0 - p));
    Some(
        (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { scale })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear_passes_input_through() {
        let lin = Linear::<f64>::identity(3);
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap();
        assert_eq!(lin.forward(&x).unwrap(), x);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let ln = LayerNorm::<f64>::new(4);
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = ln.forward(&x).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_sums_to_one_and_handles_large_negatives() {
        let mut r = vec![1.0f32, -1e9, 3.0];
        softmax_in_place(&mut r);
        assert_eq!(r[1], 0.0);
        assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Embedding::<f32>::new(3, 2, 1.0, &mut rng);
        assert!(e.forward(&[3]).is_err());
    }

    #[test]
    fn dropout_zero_is_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout_mask::<f32, _>(10, 0.0, &mut rng).is_none());
    }
}
