//! Adam optimizer over named parameter sets.

use super::tensor::Tensor;
use super::NumError;

/// An ordered collection of named parameter tensors. The order is the
/// contract: optimizer slots, tape leaves, and checkpoint entries all use
/// the same indices.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Adam state: first/second moment estimates per parameter plus the step
/// counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    names: Vec<String>,
}

impl AdamState {
    /// Standard hyperparameters (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
    pub fn new(lr: f64, params: &ParamSet) -> Result<Self, NumError> {
        Self::with_hyperparams(lr, 0.9, 0.999, 1e-8, params)
    }

    pub fn with_hyperparams(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        params: &ParamSet,
    ) -> Result<Self, NumError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(NumError::Invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(NumError::Invalid(format!("betas must lie in [0, 1), got {beta1}, {beta2}")));
        }
        if !(eps.is_finite() && eps > 0.0) {
            return Err(NumError::Invalid(format!("eps must be positive, got {eps}")));
        }
        let zeros =
            |p: &ParamSet| p.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(params),
            v: zeros(params),
            names: params.iter().map(|(n, _)| n.to_owned()).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction. `grads[i]` must match
    /// `params.tensor(i)` in shape; a non-finite gradient is rejected with
    /// the parameter's name.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<(), NumError> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(NumError::ShapeMismatch {
                op: "adam_step",
                detail: format!(
                    "{} gradients for {} optimizer slots ({} params)",
                    grads.len(),
                    self.m.len(),
                    params.len()
                ),
            });
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensor(i).shape() {
                return Err(NumError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "gradient {:?} for parameter `{}` of shape {:?}",
                        g.shape(),
                        self.names[i],
                        params.tensor(i).shape()
                    ),
                });
            }
            if !g.data().iter().all(|v| v.is_finite()) {
                return Err(NumError::NonFiniteGradient { name: self.names[i].clone() });
            }
        }

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(i).data_mut();
            for ((pj, (mj, vj)), gj) in p.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g.data())
            {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *pj -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
