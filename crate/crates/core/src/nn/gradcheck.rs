//! Central-difference gradient verification.
//!
//! Every differentiable operation is exposed as a scalar function of a flat
//! `f64` input vector; vector-valued ops are reduced with a fixed random
//! projection `Σ rᵢ yᵢ` so that the analytic side is a single backward pass
//! seeded with `r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{AttentionMask, AttentionPattern, Segment, TransformerBlock};
use super::layers::{gelu_backward, gelu_forward, softmax_cross_entropy, Embedding, LayerNorm, Linear};
use super::tensor::{Param, Parameters, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-4;

pub trait DifferentiableOp {
    fn name(&self) -> &str;
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

type ValueFn = Box<dyn Fn(&[f64]) -> Result<f64>>;
type GradFn = Box<dyn Fn(&[f64]) -> Result<Vec<f64>>>;

/// A differentiable op assembled from two closures.
pub struct FnOp {
    name: String,
    value: ValueFn,
    grad: GradFn,
}

impl FnOp {
    pub fn new(
        name: impl Into<String>,
        value: impl Fn(&[f64]) -> Result<f64> + 'static,
        grad: impl Fn(&[f64]) -> Result<Vec<f64>> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            value: Box::new(value),
            grad: Box::new(grad),
        }
    }
}

impl DifferentiableOp for FnOp {
    fn name(&self) -> &str {
        &self.name
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        (self.grad)(x)
    }
}

/// One random instance of a registered op.
pub struct GradCase {
    pub op: Box<dyn DifferentiableOp>,
    pub inputs: Vec<f64>,
}

/// A registered op: name plus a seeded instance generator.
#[derive(Clone, Copy)]
pub struct RegisteredOp {
    pub name: &'static str,
    pub make: fn(u64) -> Result<GradCase>,
}

/// Max over coordinates of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradient(op: &dyn DifferentiableOp, inputs: &[f64], eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let analytic = op.gradient(inputs)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Shape(format!(
            "{}: gradient has {} entries for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("{} analytic gradient", op.name())));
    }
    let mut x = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = op.value(&x)?;
        x[i] = orig - eps;
        let down = op.value(&x)?;
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("{} value", op.name())));
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub(crate) fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tensor(shape: &[usize], data: &[f64]) -> Result<Tensor<f64>> {
    Tensor::from_vec(shape, data.to_vec())
}

fn linear_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, din, dout) = (3, 5, 4);
    let proj = random_vec(&mut rng, n * dout, 1.0);
    let inputs = random_vec(&mut rng, n * din + din * dout + dout, 1.0);
    let build = move |x: &[f64]| -> Result<(Tensor<f64>, Linear<f64>)> {
        let lin = Linear {
            weight: Param::new(tensor(&[din, dout], &x[n * din..n * din + din * dout])?),
            bias: Some(Param::new(tensor(&[dout], &x[n * din + din * dout..])?)),
        };
        Ok((tensor(&[n, din], &x[..n * din])?, lin))
    };
    let p2 = proj.clone();
    let op = FnOp::new(
        "linear",
        move |x| {
            let (xt, lin) = build(x)?;
            Ok(dot(lin.forward(&xt)?.data(), &proj))
        },
        move |x| {
            let (xt, mut lin) = build(x)?;
            let dy = tensor(&[n, dout], &p2)?;
            let dx = lin.backward(&xt, &dy);
            let mut g = dx.into_data();
            g.extend(lin.flat_grads());
            Ok(g)
        },
    );
    Ok(GradCase {
        op: Box::new(op),
        inputs,
    })
}

fn layer_norm_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (3, 6);
    let proj = random_vec(&mut rng, n * d, 1.0);
    let mut inputs = random_vec(&mut rng, n * d, 2.0);
    inputs.extend(random_vec(&mut rng, 2 * d, 1.0));
    let build = move |x: &[f64]| -> Result<(Tensor<f64>, LayerNorm<f64>)> {
        let mut ln = LayerNorm::<f64>::new(d);
        ln.load_flat(&x[n * d..])?;
        Ok((tensor(&[n, d], &x[..n * d])?, ln))
    };
    let p2 = proj.clone();
    let op = FnOp::new(
        "layer_norm",
        move |x| {
            let (xt, ln) = build(x)?;
            Ok(dot(ln.forward(&xt)?.0.data(), &proj))
        },
        move |x| {
            let (xt, mut ln) = build(x)?;
            let (_, cache) = ln.forward(&xt)?;
            let dx = ln.backward(&cache, &tensor(&[n, d], &p2)?);
            let mut g = dx.into_data();
            g.extend(ln.flat_grads());
            Ok(g)
        },
    );
    Ok(GradCase {
        op: Box::new(op),
        inputs,
    })
}

fn gelu_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 20;
    let proj = random_vec(&mut rng, n, 1.0);
    let inputs = random_vec(&mut rng, n, 3.0);
    let p2 = proj.clone();
    let op = FnOp::new(
        "gelu",
        move |x| Ok(dot(gelu_forward(&tensor(&[n], x)?).data(), &proj)),
        move |x| Ok(gelu_backward(&tensor(&[n], x)?, &tensor(&[n], &p2)?).into_data()),
    );
    Ok(GradCase {
        op: Box::new(op),
        inputs,
    })
}

fn softmax_xent_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 8;
    let target = rng.gen_range(0..k);
    let inputs = random_vec(&mut rng, k, 2.0);
    let op = FnOp::new(
        "softmax_cross_entropy",
        move |x| {
            let mut g = vec![0.0; k];
            Ok(softmax_cross_entropy(x, target, 1.0, &mut g))
        },
        move |x| {
            let mut g = vec![0.0; k];
            softmax_cross_entropy(x, target, 1.0, &mut g);
            Ok(g)
        },
    );
    Ok(GradCase {
        op: Box::new(op),
        inputs,
    })
}

fn embedding_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (count, dim) = (5, 3);
    let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..count)).collect();
    let proj = random_vec(&mut rng, ids.len() * dim, 1.0);
    let inputs = random_vec(&mut rng, count * dim, 1.0);
    let (ids2, p2) = (ids.clone(), proj.clone());
    let build = move |x: &[f64]| -> Result<Embedding<f64>> {
        let mut e = Embedding::<f64>::new(count, dim, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        e.load_flat(x)?;
        Ok(e)
    };
    let op = FnOp::new(
        "embedding",
        move |x| Ok(dot(build(x)?.forward(&ids)?.data(), &proj)),
        move |x| {
            let mut e = build(x)?;
            e.backward(&ids2, &tensor(&[ids2.len(), dim], &p2)?);
            Ok(e.flat_grads())
        },
    );
    Ok(GradCase {
        op: Box::new(op),
        inputs,
    })
}

fn random_mask(rng: &mut ChaCha8Rng, len: usize) -> Result<AttentionMask> {
    let pattern = AttentionPattern::ALL[rng.gen_range(0..4)];
    let item_of: Vec<usize> = (0..len).map(|p| p / 2).collect();
    AttentionMask::build(pattern, &item_of, &vec![false; len])
}

fn block_input_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, d) = (4, 16);
    let block = TransformerBlock::<f64>::new(d, 4, 32, 0.0, &mut rng)?;
    let mask = random_mask(&mut rng, l)?;
    let proj = random_vec(&mut rng, l * d, 1.0);
    let inputs = random_vec(&mut rng, l * d, 1.0);
    let segs = vec![Segment { start: 0, mask }];
    let (b2, s2, p2) = (block.clone(), segs.clone(), proj.clone());
    let op = FnOp::new(
        "attention_block_input",
        move |x| Ok(dot(block.forward(&tensor(&[l, d], x)?, &segs, None)?.0.data(), &proj)),
        move |x| {
            let mut b = b2.clone();
            let (_, cache) = b.forward(&tensor(&[l, d], x)?, &s2, None)?;
            Ok(b.backward(&cache, &s2, &tensor(&[l, d], &p2)?)?.into_data())
        },
    );
    Ok(GradCase {
        op: Box::new(op),
        inputs,
    })
}

fn block_params_case(seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, d) = (3, 8);
    let mut block = TransformerBlock::<f64>::new(d, 2, 12, 0.0, &mut rng)?;
    // perturb layer norm params away from their 1/0 init
    let mut flat = block.flat_values();
    for v in flat.iter_mut() {
        *v += rng.gen_range(-0.2..0.2);
    }
    block.load_flat(&flat)?;
    let mask = random_mask(&mut rng, l)?;
    let x = Tensor::randn(&[l, d], 1.0, &mut rng);
    let proj = random_vec(&mut rng, l * d, 1.0);
    let segs = vec![Segment { start: 0, mask }];
    let (b2, s2, p2, x2) = (block.clone(), segs.clone(), proj.clone(), x.clone());
    let op = FnOp::new(
        "attention_block_params",
        move |w| {
            let mut b = block.clone();
            b.load_flat(w)?;
            Ok(dot(b.forward(&x, &segs, None)?.0.data(), &proj))
        },
        move |w| {
            let mut b = b2.clone();
            b.load_flat(w)?;
            b.zero_grad();
            let (_, cache) = b.forward(&x2, &s2, None)?;
            b.backward(&cache, &s2, &tensor(&[l, d], &p2)?)?;
            Ok(b.flat_grads())
        },
    );
    Ok(GradCase {
        op: Box::new(op),
        inputs: flat,
    })
}

pub fn ops() -> Vec<RegisteredOp> {
    vec![
        RegisteredOp { name: "linear", make: linear_case },
        RegisteredOp { name: "layer_norm", make: layer_norm_case },
        RegisteredOp { name: "gelu", make: gelu_case },
        RegisteredOp { name: "softmax_cross_entropy", make: softmax_xent_case },
        RegisteredOp { name: "embedding", make: embedding_case },
        RegisteredOp { name: "attention_block_input", make: block_input_case },
        RegisteredOp { name: "attention_block_params", make: block_params_case },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let op = FnOp::new("const", |_| Ok(3.0), |x| Ok(vec![0.0; x.len()]));
        assert_eq!(check_gradient(&op, &[1.0, 2.0], DEFAULT_EPS).unwrap(), 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let op = FnOp::new("sq", |x| Ok(x[0] * x[0]), |x| Ok(vec![3.0 * x[0]]));
        assert!(check_gradient(&op, &[1.5], DEFAULT_EPS).unwrap() > 0.1);
    }

    #[test]
    fn non_finite_values_are_errors() {
        let op = FnOp::new("log", |x| Ok(x[0].ln()), |x| Ok(vec![1.0 / x[0]]));
        assert!(matches!(
            check_gradient(&op, &[0.0], DEFAULT_EPS),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn linear_layer_error_is_tiny() {
        for seed in 0..5 {
            let c = linear_case(seed).unwrap();
            assert!(check_gradient(c.op.as_ref(), &c.inputs, DEFAULT_EPS).unwrap() < 1e-7);
        }
    }

    #[test]
    fn softmax_cross_entropy_error_is_small() {
        for seed in 0..5 {
            let c = softmax_xent_case(seed).unwrap();
            assert!(check_gradient(c.op.as_ref(), &c.inputs, DEFAULT_EPS).unwrap() < 1e-6);
        }
    }

    #[test]
    fn attention_block_input_gradient() {
        let c = block_input_case(11).unwrap();
        assert!(check_gradient(c.op.as_ref(), &c.inputs, DEFAULT_EPS).unwrap() < 1e-5);
    }

    #[test]
    fn all_nn_ops_pass() {
        for op in ops() {
            for seed in 0..3 {
                let c = (op.make)(seed).unwrap();
                let err = check_gradient(c.op.as_ref(), &c.inputs, DEFAULT_EPS).unwrap();
                assert!(err < 1e-5, "{} seed {seed}: {err}", op.name);
            }
        }
    }
}
