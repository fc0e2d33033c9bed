use super::TrainError;
use crate::models::{ClipModel, Module, ParamKind};
use crate::numerics::{Matrix, Scalar};

/// AdamW with decoupled weight decay on [`ParamKind::Weight`] parameters.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    /// First and second moments in parameter visit order.
    moments: Vec<(String, Matrix<T>, Matrix<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(model: &ClipModel<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let mut moments = Vec::new();
        model.visit(&mut |p| {
            if p.trainable() {
                let (r, c) = p.value.shape();
                moments.push((p.name.clone(), Matrix::zeros(r, c), Matrix::zeros(r, c)));
            }
        });
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            moments,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads` must list the trainable parameters in visit order;
    /// a missing gradient counts as zero.
    pub fn step(
        &mut self,
        model: &mut ClipModel<T>,
        grads: Vec<(String, Option<Matrix<T>>)>,
        lr: f64,
    ) -> Result<(), TrainError> {
        if grads.len() != self.moments.len() {
            return Err(TrainError::Mismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.moments.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t, eps) = (T::from_f64(b1), T::from_f64(b2), T::from_f64(self.eps));
        let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let step_size = T::from_f64(lr / c1);
        let inv_c2 = T::from_f64(1.0 / c2);
        let decay = T::from_f64(1.0 - lr * self.weight_decay);
        let mut i = 0;
        let mut err = None;
        let moments = &mut self.moments;
        model.visit_mut(&mut |p| {
            if !p.trainable() || err.is_some() {
                return;
            }
            let (name, m, v) = &mut moments[i];
            let (gname, grad) = &grads[i];
            i += 1;
            if name != &p.name || gname != &p.name {
                err = Some(TrainError::Mismatch(format!(
                    "optimizer state for {name} met {}",
                    p.name
                )));
                return;
            }
            if let Some(g) = grad {
                if g.shape() != p.value.shape() {
                    err = Some(TrainError::Mismatch(format!("gradient shape of {name}")));
                    return;
                }
            }
            let wd = p.kind == ParamKind::Weight;
            let data = p.value.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g.data()[j]);
                let mj = b1t * m.data()[j] + one_b1 * g;
                let vj = b2t * v.data()[j] + one_b2 * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                if wd {
                    data[j] = data[j] * decay;
                }
                data[j] = data[j] - step_size * mj / ((vj * inv_c2).sqrt() + eps);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
