//! Adam optimizer over a parameter store.
//!
//! Moment state and the bias-correction step count are tracked per
//! parameter, so parameters excluded from a step (the pair-step freeze
//! rule) keep both their values and their optimizer state bit-identical.

use ndarray::ArrayD;

use crate::nn::{ParamGroup, ParamStore, Scalar};

#[derive(Debug, Clone)]
struct Slot<F> {
    m: ArrayD<F>,
    v: ArrayD<F>,
    t: u64,
}

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<Option<Slot<F>>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: Vec::new(),
        }
    }

    /// Apply one update to every parameter whose group passes the filter,
    /// consuming the gradients currently stored alongside the values.
    pub fn step(&mut self, params: &mut ParamStore<F>, include: impl Fn(ParamGroup) -> bool) {
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), None);
        }
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        for (id, p) in params.iter_mut() {
            if !include(p.group) {
                continue;
            }
            let slot = self.slots[id.0].get_or_insert_with(|| Slot {
                m: ArrayD::zeros(p.value.raw_dim()),
                v: ArrayD::zeros(p.value.raw_dim()),
                t: 0,
            });
            slot.t += 1;
            let bc1 = F::from_f64(1.0 - self.beta1.powi(slot.t as i32));
            let bc2 = F::from_f64(1.0 - self.beta2.powi(slot.t as i32));
            let lr = F::from_f64(self.lr);
            let eps = F::from_f64(self.eps);
            for ((theta, g), (m, v)) in p
                .value
                .iter_mut()
                .zip(p.grad.iter())
                .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
            {
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;
    use ndarray::ArrayD;

    #[test]
    fn converges_on_quadratic() {
        // minimize (x - 3)^2; gradient 2(x - 3)
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", ParamGroup::Encoder, ArrayD::zeros(vec![1]));
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let x = store.value(id)[0];
            store.param_mut(id).grad[0] = 2.0 * (x - 3.0);
            adam.step(&mut store, |_| true);
        }
        let x = store.value(id)[0];
        assert!((x - 3.0).abs() < 1e-3, "x = {x}");
    }

    #[test]
    fn filtered_groups_are_untouched() {
        let mut store = ParamStore::<f32>::new();
        let frozen = store.add("seg", ParamGroup::DecoderSeg, ArrayD::ones(vec![4]));
        let live = store.add("trans", ParamGroup::DecoderTrans, ArrayD::ones(vec![4]));
        for (_, p) in store.iter_mut() {
            p.grad.fill(1.0);
        }
        let mut adam = Adam::new(0.01);
        adam.step(&mut store, |g| g.trained_on_pair_step());
        assert!(store.value(frozen).iter().all(|&v| v == 1.0));
        assert!(store.value(live).iter().all(|&v| v != 1.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Standard Adam property: with bias correction, the first step has
        // magnitude ~lr regardless of gradient scale.
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", ParamGroup::Encoder, ArrayD::zeros(vec![1]));
        store.param_mut(id).grad[0] = 123.456;
        let mut adam = Adam::new(0.001);
        adam.step(&mut store, |_| true);
        let x = store.value(id)[0];
        assert!((x.abs() - 0.001).abs() < 1e-6, "step {x}");
    }
}
