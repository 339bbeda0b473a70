//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    step: u64,
    moments: HashMap<ParamId, (Vec<F>, Vec<F>)>,
}

impl<F: Float> AdamW<F> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter from its gradient, then clears the
    /// gradients. Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect();
        if let Some(missing) = ids.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(Error::Contract(format!(
                "trainable parameter `{}` has no gradient",
                store.get(*missing).name
            )));
        }

        self.step += 1;
        let t = self.step as f64;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (ob1, ob2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
        let decay = F::of(1.0 - lr * weight_decay);
        let step_size = F::of(lr / bc1);
        let (sbc2, feps) = (F::of(bc2.sqrt()), F::of(eps));

        for id in ids {
            let p = store.get_mut(id);
            let grad = p.grad.take().expect("checked above");
            let n = p.value.numel();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![F::zero(); n], vec![F::zero(); n]));
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + ob1 * g;
                *vi = b2 * *vi + ob2 * g * g;
                *w *= decay;
                *w -= step_size * *mi / (vi.sqrt() / sbc2 + feps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::tensor::Tensor;

    fn one_param(value: f64, grad: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("w", &[1], Init::Zeros).unwrap();
        s.initialize(0);
        s.get_mut(id).value = Tensor::scalar(value);
        s.get_mut(id).grad = Some(Tensor::scalar(grad));
        (s, id)
    }

    /// Textbook AdamW recurrence evaluated by hand.
    fn oracle(w0: f64, grads: &[f64], c: AdamWConfig) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            w -= c.lr * c.weight_decay * w;
            w -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        w
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let (mut s, id) = one_param(0.7, 0.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(id).value.data()[0], 0.7);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn first_step_matches_recurrence() {
        let c = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut s, id) = one_param(0.0, 1.0);
        let mut opt = AdamW::new(c);
        opt.step(&mut s).unwrap();
        let want = oracle(0.0, &[1.0], c);
        // m̂ = 1, v̂ = 1 → update = -0.1 / (1 + 1e-8)
        assert!((want + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((s.get(id).value.data()[0] - want).abs() < 1e-12);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn multi_step_matches_recurrence() {
        let c = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.1,
            ..Default::default()
        };
        let grads = [0.3, -1.2, 0.5, 2.0, -0.1];
        let (mut s, id) = one_param(1.5, grads[0]);
        let mut opt = AdamW::new(c);
        for (i, &g) in grads.iter().enumerate() {
            if i > 0 {
                s.get_mut(id).grad = Some(Tensor::scalar(g));
            }
            opt.step(&mut s).unwrap();
        }
        assert!((s.get(id).value.data()[0] - oracle(1.5, &grads, c)).abs() < 1e-12);
    }

    #[test]
    fn decay_shrinks_with_zero_grad() {
        let c = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let (mut s, id) = one_param(2.0, 0.0);
        AdamW::new(c).step(&mut s).unwrap();
        assert!((s.get(id).value.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn lr_zero_is_noop_and_frozen_untouched() {
        let mut s = ParamStore::<f64>::new();
        let a = s.register("a", &[3], Init::Normal(1.0)).unwrap();
        let b = s.register("b", &[3], Init::Normal(1.0)).unwrap();
        s.initialize(1);
        s.set_trainable(|n| n == "a");
        let before = s.snapshot();
        s.get_mut(a).grad = Some(Tensor::full(&[3], 0.3));
        AdamW::new(AdamWConfig {
            lr: 0.0,
            ..Default::default()
        })
        .step(&mut s)
        .unwrap();
        assert_eq!(s.snapshot(), before);
        s.get_mut(a).grad = Some(Tensor::full(&[3], 0.3));
        AdamW::new(AdamWConfig::default()).step(&mut s).unwrap();
        assert_eq!(s.get(b).value, before[1].1);
        assert_ne!(s.get(a).value, before[0].1);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = ParamStore::<f32>::new();
        s.register("encoder.w", &[2], Init::Zeros).unwrap();
        s.initialize(0);
        let err = AdamW::new(AdamWConfig::default()).step(&mut s).unwrap_err();
        assert!(err.to_string().contains("encoder.w"));
    }
}
