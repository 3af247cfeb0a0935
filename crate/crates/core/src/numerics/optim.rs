use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Stochastic gradient descent with heavy-ball momentum:
/// `v ← momentum·v + g`, `p ← p − lr·v`. With `max_grad_norm` set, the
/// gradients are first rescaled so their global L2 norm does not exceed it.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub max_grad_norm: Option<f64>,
    velocity: Vec<Tensor>,
    last_grad_norm: f64,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("sgd", format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Sgd {
            momentum,
            max_grad_norm: None,
            velocity: Vec::new(),
            last_grad_norm: 0.0,
        })
    }

    pub fn with_max_grad_norm(mut self, max: Option<f64>) -> Result<Self> {
        if let Some(m) = max {
            if !(m > 0.0) {
                return Err(Error::invalid("sgd", format!("max_grad_norm {m} must be positive")));
            }
        }
        self.max_grad_norm = max;
        Ok(self)
    }

    /// Global gradient norm seen by the last step, before clipping.
    pub fn last_grad_norm(&self) -> f64 {
        self.last_grad_norm
    }

    /// Applies one update in place. `names` label parameters in diagnostics.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, names: &[&str]) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::invalid("sgd", format!("learning rate {lr} must be nonnegative")));
        }
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "sgd",
                format!("{} params but {} gradients", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                let name = names.get(i).copied().unwrap_or("?");
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        self.last_grad_norm = norm;
        let scale = match self.max_grad_norm {
            Some(m) if norm > m => m / norm,
            _ => 1.0,
        };
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + scale * gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
