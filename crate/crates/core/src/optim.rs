//! Adam with coupled L2 weight decay.

use crate::error::{contract_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay · θ`.
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; frozen and
    /// gradient-less entries are left untouched. Refuses the whole step if
    /// any gradient is non-finite.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(contract_err!("{} gradients for {} parameters", grads.len(), store.len()));
        }
        if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of {}", store.name(ParamId(i)))));
        }
        if self.m.is_empty() {
            let sizes: Vec<usize> = store.iter().map(|(_, _, e)| e.value.len()).collect();
            self.m = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let id = ParamId(i);
            let Some(g) = g else { continue };
            if store.is_frozen(id) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let theta = store.get_mut(id).data_mut();
            for (k, (p, gk)) in theta.iter_mut().zip(g.data()).enumerate() {
                let pv = p.to_f64_lossy();
                let gk = gk.to_f64_lossy() + self.weight_decay * pv;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let upd = self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *p = T::lit(pv - upd);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        store.register("a", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap(), false).unwrap();
        store.register("frozen", Tensor::ones(&[2]), true).unwrap();
        let mut opt = Adam::new(0.01, 0.0);
        let g = vec![Some(Tensor::from_f64(&[3], &[3.0, -0.1, 0.0]).unwrap()), Some(Tensor::ones(&[2]))];
        opt.step(&mut store, &g).unwrap();
        let a = store.get(ParamId(0)).data();
        assert!((a[0] - 0.99).abs() < 1e-9);
        assert!((a[1] + 1.99).abs() < 1e-9);
        assert_eq!(a[2], 0.5);
        assert_eq!(store.get(ParamId(1)).data(), &[1.0, 1.0]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.register("x", Tensor::from_f64(&[2], &[3.0, -4.0]).unwrap(), false).unwrap();
        let mut opt = Adam::new(0.1, 0.0);
        for _ in 0..500 {
            let g = store.get(ParamId(0)).map(|v| 2.0 * (v - 1.0));
            opt.step(&mut store, &[Some(g)]).unwrap();
        }
        for v in store.get(ParamId(0)).data() {
            assert!((v - 1.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn weight_decay_shrinks_without_gradient_signal() {
        let mut store = ParamStore::<f64>::new();
        store.register("x", Tensor::from_f64(&[1], &[2.0]).unwrap(), false).unwrap();
        let mut opt = Adam::new(0.01, 0.5);
        opt.step(&mut store, &[Some(Tensor::zeros(&[1]))]).unwrap();
        assert!(store.get(ParamId(0)).data()[0] < 2.0);
    }

    #[test]
    fn non_finite_gradient_rejected_without_change() {
        let mut store = ParamStore::<f64>::new();
        store.register("x", Tensor::ones(&[2]), false).unwrap();
        let before = store.clone();
        let mut opt = Adam::new(0.01, 0.0);
        let g = Tensor::from_f64(&[2], &[1.0, f64::NAN]).unwrap();
        assert!(matches!(opt.step(&mut store, &[Some(g)]), Err(Error::NonFinite(_))));
        assert_eq!(store, before);
    }
}
