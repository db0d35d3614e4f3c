use indexmap::IndexMap;

use super::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Adam with bias correction. Moments are kept in `f64` and keyed by tensor
/// name, mirroring the shapes of the tensors they track.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: IndexMap<String, (Tensor<f64>, Tensor<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<f64>, &Tensor<f64>)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }

    /// One optimizer step over every `(name, param, grad)` triple.
    pub fn step<'a, T: Real>(
        &mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>, &'a Tensor<T>)>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, param, grad) in pairs {
            if !param.same_shape(grad) {
                return Err(Error::shape(format!(
                    "adam `{name}`: param {:?} vs grad {:?}",
                    param.dims(),
                    grad.dims()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(param.dims()), Tensor::zeros(param.dims())));
            if !m.dims().eq(param.dims()) {
                return Err(Error::shape(format!("adam `{name}` changed shape")));
            }
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g.to_f64();
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g * g;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                let update = self.lr * mhat / (vhat.sqrt() + self.eps);
                if update != 0.0 {
                    *p = T::from_f64(p.to_f64() - update);
                }
            }
        }
        Ok(())
    }
}
