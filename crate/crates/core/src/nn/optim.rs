use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{Module, Param, Visitor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam without weight decay, bias-corrected as in the reference formulation.
///
/// Moment buffers are matched to parameters by visit order, which is fixed for
/// a given module type.
#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2_sqrt = (1.0 - c.beta2.powi(t)).sqrt();
        let step_size = c.lr / bias1;

        struct Update<'a> {
            moments: &'a mut Vec<(ArrayD<f64>, ArrayD<f64>)>,
            idx: usize,
            c: AdamConfig,
            step_size: f64,
            bias2_sqrt: f64,
        }
        impl Visitor for Update<'_> {
            fn param(&mut self, _: &str, p: &mut Param) {
                if self.idx == self.moments.len() {
                    let z = ArrayD::zeros(p.value.raw_dim());
                    self.moments.push((z.clone(), z));
                }
                let (m, v) = &mut self.moments[self.idx];
                self.idx += 1;
                let (b1, b2, eps) = (self.c.beta1, self.c.beta2, self.c.eps);
                let (step_size, bias2_sqrt) = (self.step_size, self.bias2_sqrt);
                Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let denom = v.sqrt() / bias2_sqrt + eps;
                    *w -= step_size * (*m / denom);
                });
            }
        }
        let mut upd = Update { moments: &mut self.moments, idx: 0, c, step_size, bias2_sqrt };
        module.visit("", &mut upd);
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<M: Module + ?Sized>(module: &mut M, max_norm: f64) -> f64 {
    struct Norm(f64);
    impl Visitor for Norm {
        fn param(&mut self, _: &str, p: &mut Param) {
            self.0 += p.grad.iter().map(|g| g * g).sum::<f64>();
        }
    }
    let mut n = Norm(0.0);
    module.visit("", &mut n);
    let norm = n.0.sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / (norm + 1e-12);
        struct Scale(f64);
        impl Visitor for Scale {
            fn param(&mut self, _: &str, p: &mut Param) {
                p.grad.mapv_inplace(|g| g * self.0);
            }
        }
        module.visit("", &mut Scale(scale));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    struct One(Param);
    impl Module for One {
        fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
            v.param(&super::super::join(prefix, "w"), &mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = One(Param::new(arr1(&[1.0, -2.0]).into_dyn()));
        m.0.grad = arr1(&[0.5, -3.0]).into_dyn();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        adam.step(&mut m);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((m.0.value[0] - 0.9).abs() < 1e-6);
        assert!((m.0.value[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_bitwise_identity() {
        let mut m = One(Param::new(arr1(&[0.123456789, -7.5e-3]).into_dyn()));
        let before = m.0.value.clone();
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..Default::default() });
        for g in [1.0, -4.0, 1e-9] {
            m.0.grad.fill(g);
            adam.step(&mut m);
        }
        assert_eq!(before, m.0.value);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut m = One(Param::new(arr1(&[0.0, 0.0]).into_dyn()));
        m.0.grad = arr1(&[3.0, 4.0]).into_dyn();
        let n = clip_grad_norm(&mut m, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        let after: f64 = m.0.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-9);
    }
}
