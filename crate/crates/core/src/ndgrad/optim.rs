use super::array::Real;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// SGD with classic momentum and coupled weight decay:
/// `v <- mu * v + g + lambda * w`, then `w <- w - lr * v`.
#[derive(Debug, Clone)]
pub struct SgdState<T: Real = f32> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ParamStore<T>,
}

impl<T: Real> SgdState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &ParamStore<T> {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::ParamMismatch("sgd: store sizes differ".into()));
        }
        let (lr, mu, wd) = (T::lit(self.lr), T::lit(self.momentum), T::lit(self.weight_decay));
        for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(self.velocity.iter_mut()) {
            if p.shape != g.shape || p.shape != v.shape {
                return Err(Error::ParamMismatch(format!("sgd: shape mismatch for `{}`", p.name)));
            }
            if g.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
            for ((w, &gi), vi) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                *vi = mu * *vi + gi + wd * *w;
                *w = *w - lr * *vi;
            }
        }
        Ok(())
    }
}
