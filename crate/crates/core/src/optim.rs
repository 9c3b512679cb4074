use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// SGD with classical (heavy-ball) momentum: `v = m*v + g; w -= lr*v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Usage("parameter set changed between steps".into()));
        }
        for ((p, grad), vel) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if grad.len() != p.numel() || vel.len() != p.numel() {
                return Err(Error::Usage("gradient length mismatch".into()));
            }
            for ((w, g), v) in p.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
        }
        Ok(())
    }
}

/// Gradient buffers of `vars`; nodes the loss never reached get zeros.
pub fn gradients(g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|v| match g.grad(*v) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; g.value(*v).numel()],
        })
        .collect()
}
