//! Minimal differentiable building blocks: dense layers, ReLU, inverted
//! dropout, regression losses, Adam, and a finite-difference gradient
//! checker. Everything is f64 and deterministic given a seeded RNG.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully connected layer; `forward(x) = x . weight + bias` for a
/// `batch x in` input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn new_seeded(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Array2::from_shape_fn((in_dim, out_dim), |_| rng.gen_range(-bound..bound));
        let bias = Array1::from_shape_fn(out_dim, |_| rng.gen_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((in_dim, out_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("input width {}", self.in_dim()),
                got: format!("{}", x.ncols()),
            });
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }

    /// Chain-rule gradients for `dy = dLoss/dy`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> DenseGrads {
        DenseGrads {
            dx: dy.dot(&self.weight.t()),
            dw: x.t().dot(dy),
            db: dy.sum_axis(Axis(0)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub struct DenseGrads {
    pub dx: Array2<f64>,
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given the pre-activation values.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    out
}

/// Inverted dropout. In training mode each element is zeroed with
/// probability `p` and survivors are scaled by `1/(1-p)`; inference mode
/// is the identity. The returned mask holds the applied per-element
/// scale so backward passes (and frozen-mask gradient checks) reuse it.
pub fn dropout(
    x: &Array2<f64>,
    p: f64,
    rng: &mut impl Rng,
    training: bool,
) -> (Array2<f64>, Array2<f64>) {
    assert!((0.0..1.0).contains(&p), "dropout rate must be in [0,1)");
    if !training || p == 0.0 {
        return (x.clone(), Array2::ones(x.raw_dim()));
    }
    let keep = 1.0 - p;
    let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            1.0 / keep
        }
    });
    (x * &mask, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Huber { delta: f64 },
    L1,
    Mse,
}

impl LossKind {
    pub fn huber_default() -> Self {
        LossKind::Huber { delta: 1.0 }
    }
}

/// Mean-reduced loss over all elements, with the gradient wrt `pred`.
pub fn loss(kind: LossKind, pred: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", target.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(pred.raw_dim());
    for ((g, &p), &t) in grad.iter_mut().zip(pred.iter()).zip(target.iter()) {
        let r = p - t;
        match kind {
            LossKind::Huber { delta } => {
                debug_assert!(delta > 0.0);
                if r.abs() <= delta {
                    total += 0.5 * r * r;
                    *g = r / n;
                } else {
                    total += delta * (r.abs() - 0.5 * delta);
                    *g = delta * r.signum() / n;
                }
            }
            LossKind::L1 => {
                total += r.abs();
                *g = if r == 0.0 { 0.0 } else { r.signum() / n };
            }
            LossKind::Mse => {
                total += r * r;
                *g = 2.0 * r / n;
            }
        }
    }
    Ok((total / n, grad))
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.m.len()),
                got: format!("{}/{}", params.len(), grads.len()),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Central finite differences over a flat parameter vector: returns the
/// max over parameters of |analytic - numeric| / max(1, |numeric|).
///
/// `f` must be a pure function of the parameter vector (freeze dropout
/// masks and inputs before calling).
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut work = params.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..params.len() {
        work[i] = params[i] + h;
        let plus = f(&work);
        work[i] = params[i] - h;
        let minus = f(&work);
        work[i] = params[i];
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    max_rel
}
