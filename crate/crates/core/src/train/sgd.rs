use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One momentum-SGD update with coupled weight decay:
/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    velocity: &mut Vec<Vec<f64>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if velocity.is_empty() {
        *velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    if velocity.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters but got {}",
            velocity.len(),
            params.len()
        )));
    }
    for (i, (p, v)) in params.iter_mut().zip(velocity.iter_mut()).enumerate() {
        let Some(g) = p.grad() else {
            return Err(Error::Contract(format!("parameter {i} has no gradient")));
        };
        if v.len() != g.len() {
            return Err(Error::dim("sgd_step", &[v.len()], &[g.len()]));
        }
        let g = g.to_vec();
        for ((x, v), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *v = momentum * *v + (g + weight_decay * *x);
            *x -= lr * *v;
        }
    }
    Ok(())
}

/// Stateful wrapper that keeps the velocity between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        sgd_step(params, &mut self.velocity, self.lr, self.momentum, self.weight_decay)
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}
