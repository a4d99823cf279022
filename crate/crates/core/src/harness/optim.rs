//! Adam with bias correction and the linear-decay learning-rate schedule.

use crate::kernel::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Moments sized for every parameter in `store`.
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients accumulated in `store`; values stay f32-representable.
    pub fn apply(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (md, vd) = (m.data_mut(), v.data_mut());
            let g = p.grad.data().to_vec();
            let x = p.value.data_mut();
            for i in 0..x.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                let (mh, vh) = (md[i] / c1, vd[i] / c2);
                x[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            p.value.round_to_f32();
        }
    }
}

/// `base` until `decay_start`, then linear to zero at `total`.
pub fn lr_at(step: usize, base: f64, decay_start: usize, total: usize) -> f64 {
    if step < decay_start || total <= decay_start {
        return base;
    }
    let left = total.saturating_sub(step) as f64;
    base * left / (total - decay_start) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_vec(v)).unwrap();
        s
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_at(0, 1e-4, 100_000, 200_000), 1e-4);
        assert!((lr_at(150_000, 1e-4, 100_000, 200_000) - 5e-5).abs() < 1e-20);
        assert_eq!(lr_at(200_000, 1e-4, 100_000, 200_000), 0.0);
        assert_eq!(lr_at(10, 1e-3, 20, 20), 1e-3);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(vec![0.25, -1.5]);
        let before = s.value(s.id("x").unwrap()).clone();
        let mut adam = Adam::new(&s);
        adam.apply(&mut s, 1e-2);
        assert_eq!(s.value(s.id("x").unwrap()), &before);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut s = store_with(vec![1.0]);
        let id = s.id("x").unwrap();
        s.get_mut(id).grad = Tensor::from_vec(vec![0.5]);
        let mut adam = Adam::new(&s);
        adam.apply(&mut s, 1e-4);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let expect = 1.0 - 1e-4 * 0.5 / (0.5 + 1e-8);
        assert_eq!(s.value(id).item(), expect as f32 as f64);
        assert!((1.0 - s.value(id).item() - 1e-4).abs() < 1e-7);
    }
}
