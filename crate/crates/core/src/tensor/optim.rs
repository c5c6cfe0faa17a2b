use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Stochastic gradient descent with classic momentum:
/// `v ← μ·v + g`, `w ← w − η·v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgdm {
    pub lr: f64,
    pub momentum: f64,
}

impl Sgdm {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self { lr, momentum })
    }

    /// Updates one parameter tensor in place. Parameters and velocity are
    /// rounded to `f32` afterwards so checkpoints stay exact.
    pub fn step(&self, param: &mut Tensor, grad: &[f64], velocity: &mut Tensor) -> Result<()> {
        if param.shape() != velocity.shape() {
            return Err(shape_err(
                "sgdm_step",
                format!("param {:?} vs velocity {:?}", param.shape(), velocity.shape()),
            ));
        }
        sgdm_step(param.data_mut(), grad, velocity.data_mut(), self.lr, self.momentum)?;
        param.round_to_f32();
        velocity.round_to_f32();
        Ok(())
    }
}

/// Raw classic-momentum update on flat slices.
pub fn sgdm_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(shape_err(
            "sgdm_step",
            format!(
                "params {}, grads {}, velocity {} elements",
                params.len(),
                grads.len(),
                velocity.len()
            ),
        ));
    }
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}
