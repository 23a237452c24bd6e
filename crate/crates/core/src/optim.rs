//! AdamW, layer-wise learning-rate decay and the step schedule.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::{Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First and second moments of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub steps: u64,
}

impl<T: Real> Moments<T> {
    pub fn new(shape: &[usize]) -> Self {
        Moments {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            steps: 0,
        }
    }
}

impl AdamW {
    /// One update of `p` with gradient `g`. The decay `p <- p - lr*wd*p` is
    /// applied before and separately from the moment step; `decay = false`
    /// skips it.
    pub fn update<T: Real>(&self, p: &mut Tensor<T>, g: &Tensor<T>, state: &mut Moments<T>, lr: f64, decay: bool) -> Result<()> {
        if p.shape() != g.shape() || state.m.shape() != p.shape() {
            return Err(Error::shape("adamw", p.shape(), g.shape()));
        }
        state.steps += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - libm::pow(b1, state.steps as f64);
        let c2 = 1.0 - libm::pow(b2, state.steps as f64);
        let shrink = T::of_f64(if decay { 1.0 - lr * self.weight_decay } else { 1.0 });
        let (tb1, tb2) = (T::of_f64(b1), T::of_f64(b2));
        let (tc1, tc2) = (T::of_f64(c1), T::of_f64(c2));
        let (tlr, teps) = (T::of_f64(lr), T::of_f64(self.eps));
        let m = state.m.data_mut();
        let v = state.v.data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = tb1 * *mi + (T::one() - tb1) * gi;
            *vi = tb2 * *vi + (T::one() - tb2) * gi * gi;
            let mhat = *mi / tc1;
            let vhat = *vi / tc2;
            *pi = *pi * shrink - tlr * mhat / (vhat.sqrt() + teps);
        }
        Ok(())
    }
}

/// Optimizer state for every entry of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub moments: Vec<Option<Moments<T>>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        AdamState {
            moments: vec![None; store.len()],
        }
    }

    /// Applies one step. Entries with no gradient (frozen, fixed, buffers or
    /// unused by the forward pass) are left untouched, decay included.
    /// `lr[i]` is the learning rate of store entry `i`.
    pub fn step(&mut self, opt: &AdamW, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: &[f64]) -> Result<()> {
        if grads.len() != store.len() || lr.len() != store.len() {
            return Err(Error::shape("adamw", &[grads.len(), lr.len()], &[store.len()]));
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.info(i).is_trainable() {
                continue;
            }
            let decay = store.info(i).decay;
            let state = self.moments[i].get_or_insert_with(|| Moments::new(g.shape()));
            opt.update(store.value_mut(i), g, state, lr[i], decay)?;
        }
        Ok(())
    }
}

/// `base_lr * decay^(total - layer)`: the patch embedding is layer 0 and
/// the decoders are layer `total`.
pub fn layerwise_lr(base_lr: f64, decay: f64, layer: usize, total: usize) -> Result<f64> {
    if layer > total {
        return Err(Error::invalid("layerwise_lr", alloc::format!("layer {layer} beyond {total}")));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::invalid("layerwise_lr", "decay must lie in (0, 1]"));
    }
    Ok(base_lr * libm::pow(decay, (total - layer) as f64))
}

/// Linear warmup followed by step drops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup_iters: usize,
    /// Epoch indices (0-based) from which one more drop applies.
    pub drop_epochs: Vec<usize>,
    pub drop_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup_iters: 0,
            drop_epochs: vec![170, 200],
            drop_factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn multiplier(&self, step: usize, epoch: usize) -> f64 {
        let warm = if self.warmup_iters == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_iters as f64).min(1.0)
        };
        let drops = self.drop_epochs.iter().filter(|&&d| epoch >= d).count();
        warm * libm::pow(self.drop_factor, drops as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamInfo, ParamKind};
    use alloc::string::String;
    use proptest::prelude::{prop_assert, proptest};

    fn info(name: &str, decay: bool) -> ParamInfo {
        ParamInfo {
            name: String::from(name),
            kind: ParamKind::Ffn,
            layer: 1,
            task: None,
            decay,
            fixed: false,
            frozen: false,
        }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let opt = AdamW {
            weight_decay: 0.1,
            ..AdamW::default()
        };
        let mut p = Tensor::new(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let p0 = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = Moments::new(&[3]);
        let lr = 1e-2;
        for n in 1..=50 {
            opt.update(&mut p, &g, &mut st, lr, true).unwrap();
            let expect = p0.norm() * (1.0 - lr * 0.1f64).powi(n);
            assert!((p.norm() - expect).abs() <= 1e-12 * expect);
        }
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = Tensor::new(&[2], vec![1.0f64, 1.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.3, -4.0]).unwrap();
        let mut st = Moments::new(&[2]);
        opt.update(&mut p, &g, &mut st, 1e-3, true).unwrap();
        for (i, &gi) in [0.3f64, -4.0].iter().enumerate() {
            let m = 0.1 * gi / (1.0 - 0.9);
            let v = 0.001 * gi * gi / (1.0 - 0.999);
            let expect = 1.0 - 1e-3 * m / (v.sqrt() + 1e-8);
            assert!((p.data()[i] - expect).abs() < 1e-15);
        }
        // constant gradient: second step has the same bias-corrected ratio
        let before = p.clone();
        opt.update(&mut p, &g, &mut st, 1e-3, true).unwrap();
        let d0 = p.data()[0] - before.data()[0];
        assert!((d0 + 1e-3 * 0.3 / (0.3 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn shape_drift_is_rejected() {
        let opt = AdamW::default();
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut st = Moments::new(&[2]);
        assert!(opt.update(&mut p, &Tensor::zeros(&[3]), &mut st, 1e-3, true).is_err());
        let mut q = Tensor::<f64>::zeros(&[3]);
        assert!(opt.update(&mut q, &Tensor::zeros(&[3]), &mut st, 1e-3, true).is_err());
    }

    #[test]
    fn store_step_skips_frozen_and_missing() {
        let mut store = ParamStore::<f64>::new();
        store.insert(info("a", true), Tensor::ones(&[2])).unwrap();
        let mut frozen = info("b", true);
        frozen.frozen = true;
        store.insert(frozen, Tensor::ones(&[2])).unwrap();
        store.insert(info("c", false), Tensor::ones(&[2])).unwrap();
        store.insert(info("d", true), Tensor::ones(&[2])).unwrap();
        let mut st = AdamState::new(&store);
        let g = Some(Tensor::zeros(&[2]));
        st.step(&AdamW::default(), &mut store, &[g.clone(), g.clone(), g, None], &[0.5; 4]).unwrap();
        assert_eq!(store.value(0).data(), &[0.95, 0.95]);
        assert_eq!(store.value(1).data(), &[1.0, 1.0]);
        assert_eq!(store.value(2).data(), &[1.0, 1.0]);
        assert_eq!(store.value(3).data(), &[1.0, 1.0]);
        assert!(st.moments[1].is_none() && st.moments[3].is_none());
    }

    #[test]
    fn layerwise_endpoints() {
        assert_eq!(layerwise_lr(5e-4, 1.0, 3, 13).unwrap(), 5e-4);
        assert_eq!(layerwise_lr(5e-4, 0.75, 13, 13).unwrap(), 5e-4);
        let embed = layerwise_lr(5e-4, 0.75, 0, 13).unwrap();
        assert!((embed - 5e-4 * 0.75f64.powi(13)).abs() < 1e-18);
        assert!(layerwise_lr(5e-4, 0.75, 14, 13).is_err());
        assert!(layerwise_lr(5e-4, 0.0, 1, 13).is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = LrSchedule {
            warmup_iters: 500,
            ..LrSchedule::default()
        };
        assert_eq!(s.multiplier(250, 0), 0.5);
        assert_eq!(s.multiplier(10_000, 169), 1.0);
        assert!((s.multiplier(10_000, 171) - 0.1).abs() < 1e-15);
        assert!((s.multiplier(10_000, 201) - 0.01).abs() < 1e-15);
        let none = LrSchedule {
            warmup_iters: 0,
            ..LrSchedule::default()
        };
        assert_eq!(none.multiplier(0, 0), 1.0);
    }

    proptest! {
        #[test]
        fn layerwise_is_monotone(decay in 0.05f64..=1.0, total in 1usize..40) {
            let mut prev = 0.0;
            for i in 0..=total {
                let lr = layerwise_lr(1.0, decay, i, total).unwrap();
                prop_assert!(lr >= prev);
                prev = lr;
            }
        }
    }
}
