use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{JigsawError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update over every parameter.
    pub fn step(&self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(JigsawError::shape("adamw_step", &[store.len()], &[grads.len()]));
        }
        for (p, g) in store.values().zip(grads) {
            p.require_same_shape("adamw_step", g)?;
        }
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads[i].data();
            let m = store.m[i].data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = store.v[i].data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let m = store.m[i].data().to_vec();
            let v = store.v[i].data().to_vec();
            let decay = 1.0 - self.lr * self.weight_decay;
            for ((p, mi), vi) in store.get_mut(id).data_mut().iter_mut().zip(&m).zip(&v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *p = *p * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Step decay: `lr0 * gamma^(epoch / step_epochs)`.
pub fn step_lr(lr0: f64, epoch: usize, step_epochs: usize, gamma: f64) -> f64 {
    if step_epochs == 0 {
        return lr0;
    }
    lr0 * gamma.powi((epoch / step_epochs) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(p)).unwrap();
        s
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let mut s = scalar_store(0.37);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(s.values().next().unwrap().item(), 0.37);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let mut s = scalar_store(1.0);
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut s, &[Tensor::scalar(1.0)]).unwrap();
        let expect = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.values().next().unwrap().item() - expect).abs() < 1e-15);
        assert!((s.values().next().unwrap().item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay() {
        let mut s = scalar_store(2.0);
        let opt = AdamW {
            lr: 0.1,
            weight_decay: 0.05,
            ..AdamW::default()
        };
        opt.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        assert!((s.values().next().unwrap().item() - 2.0 * (1.0 - 0.005)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = scalar_store(1.0);
        assert!(AdamW::default().step(&mut s, &[Tensor::zeros(2, 1)]).is_err());
        assert!(AdamW::default().step(&mut s, &[]).is_err());
    }

    #[test]
    fn step_lr_halves_every_20_epochs() {
        assert_eq!(step_lr(3e-4, 19, 20, 0.5), 3e-4);
        assert_eq!(step_lr(3e-4, 20, 20, 0.5), 1.5e-4);
        assert_eq!(step_lr(3e-4, 45, 20, 0.5), 0.75e-4);
    }
}
