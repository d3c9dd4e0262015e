//! Adam optimizer over [`Param`] handles.

use crate::scalar::Scalar;
use crate::tensor::{dedupe_params, Param};
use ndarray::ArrayD;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    params: Vec<Param<T>>,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    /// Keeps only trainable parameters, deduplicated by storage identity so
    /// shared weights are stepped once.
    pub fn new(params: Vec<Param<T>>, cfg: AdamConfig) -> Self {
        let params: Vec<Param<T>> = dedupe_params(params)
            .into_iter()
            .filter(|p| p.trainable())
            .collect();
        let m = params
            .iter()
            .map(|p| ArrayD::zeros(p.value().raw_dim()))
            .collect();
        let v = params
            .iter()
            .map(|p| ArrayD::zeros(p.value().raw_dim()))
            .collect();
        Adam {
            cfg,
            params,
            m,
            v,
            t: 0,
        }
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self) {
        self.t += 1;
        let lr = T::from_f64(self.cfg.lr);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let one = T::one();
        let bc1 = one - T::from_f64(self.cfg.beta1.powi(self.t as i32));
        let bc2 = one - T::from_f64(self.cfg.beta2.powi(self.t as i32));
        for (i, param) in self.params.iter().enumerate() {
            let Some(grad) = param.grad() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&grad, |mv, &g| *mv = b1 * *mv + (one - b1) * g);
            v.zip_mut_with(&grad, |vv, &g| *vv = b2 * *vv + (one - b2) * g * g);
            let mut value = param.value_mut();
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
            drop(value);
            param.zero_grad();
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Moment tensors and step counter, keyed by parameter name, for
    /// checkpointing.
    pub fn export_state(&self) -> (u64, Vec<(String, ArrayD<T>, ArrayD<T>)>) {
        let entries = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name(), self.m[i].clone(), self.v[i].clone()))
            .collect();
        (self.t, entries)
    }

    /// Restore moments by parameter name. Unknown names are an error so a
    /// checkpoint built for a different trainable set is rejected loudly.
    pub fn import_state(
        &mut self,
        t: u64,
        entries: Vec<(String, ArrayD<T>, ArrayD<T>)>,
    ) -> crate::Result<()> {
        self.t = t;
        for (name, m, v) in entries {
            let idx = self
                .params
                .iter()
                .position(|p| p.name() == name)
                .ok_or_else(|| {
                    crate::Error::Checkpoint(format!("optimizer state for unknown param `{name}`"))
                })?;
            if m.shape() != self.m[idx].shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "optimizer moment shape mismatch for `{name}`"
                )));
            }
            self.m[idx] = m;
            self.v[idx] = v;
        }
        Ok(())
    }
}
