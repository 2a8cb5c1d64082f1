//! Nadam and global-norm gradient clipping over a [`ParamStore`].

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Shared optimizer state. Per-parameter moments live in the store's slots.
#[derive(Clone, Debug, PartialEq)]
pub struct NadamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl NadamState {
    pub fn new(lr: f64) -> Self {
        NadamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    pub fn with_beta1(mut self, beta1: f64) -> Self {
        self.beta1 = beta1;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Nadam update from the accumulated gradients, which are consumed.
    ///
    /// ```text
    /// m ← β1·m + (1−β1)·g
    /// v ← β2·v + (1−β2)·g²
    /// θ ← θ − lr·(β1·m/(1−β1ᵗ) + (1−β1)·g/(1−β1ᵗ)) / (√(v/(1−β2ᵗ)) + ε)
    /// ```
    ///
    /// Parameters that received no gradient this step are treated as having
    /// a zero gradient.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if !store.has_grads() {
            return Err(Error::NoGradients);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        let (lr, eps) = (T::from_f64(self.lr), T::from_f64(self.eps));

        for p in store.iter_mut() {
            let grad = p.grad.take();
            let shape = p.value.shape().to_vec();
            let (m, v) = p
                .moments
                .get_or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
            let values = p.value.values_mut();
            let (mv, vv) = (m.values_mut(), v.values_mut());
            for i in 0..values.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g.values()[i]);
                mv[i] = b1 * mv[i] + one_b1 * g;
                vv[i] = b2 * vv[i] + one_b2 * g * g;
                let m_hat = mv[i] / bc1;
                let v_hat = vv[i] / bc2;
                let direction = b1 * m_hat + one_b1 * g / bc1;
                values[i] = values[i] - lr * direction / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// L2 norm over every accumulated gradient, in f64.
pub fn global_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .map(|g| g.sum_squares())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / norm` when their global norm
/// exceeds `max_norm`. `max_norm == 0` disables clipping. Returns the norm
/// before clipping.
pub fn clip_global_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = global_norm(store);
    if max_norm > 0.0 && norm > max_norm {
        let k = T::from_f64(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.values_mut().iter_mut().for_each(|x| *x = *x * k);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamGroup;
    use crate::tensor::Graph;

    fn store_with_grad(values: &[f64], grad: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s
            .add(
                "w",
                ParamGroup::Dual,
                Tensor::new(&[values.len()], values.to_vec()).unwrap(),
            )
            .unwrap();
        s.get_mut(id).grad = Some(Tensor::new(&[grad.len()], grad.to_vec()).unwrap());
        s
    }

    #[test]
    fn clip_three_four() {
        let mut s = store_with_grad(&[0.0, 0.0], &[3.0, 4.0]);
        let norm = clip_global_norm(&mut s, 1.0);
        assert_eq!(norm, 5.0);
        let g = s
            .get(s.id("w").unwrap())
            .grad
            .as_ref()
            .unwrap()
            .values()
            .to_vec();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_below_threshold_and_disabled_are_noops() {
        let mut s = store_with_grad(&[0.0, 0.0], &[0.3, 0.4]);
        clip_global_norm(&mut s, 1.0);
        assert_eq!(
            s.get(s.id("w").unwrap()).grad.as_ref().unwrap().values(),
            &[0.3, 0.4]
        );
        let mut s = store_with_grad(&[0.0, 0.0], &[3.0, 4.0]);
        clip_global_norm(&mut s, 0.0);
        assert_eq!(
            s.get(s.id("w").unwrap()).grad.as_ref().unwrap().values(),
            &[3.0, 4.0]
        );
        let mut s = store_with_grad(&[0.0, 0.0], &[0.0, 0.0]);
        clip_global_norm(&mut s, 1.0);
        assert_eq!(
            s.get(s.id("w").unwrap()).grad.as_ref().unwrap().values(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with_grad(&[1.5, -2.0], &[0.0, 0.0]);
        NadamState::new(0.1).step(&mut s).unwrap();
        assert_eq!(s.by_name("w").unwrap().values(), &[1.5, -2.0]);
    }

    #[test]
    fn step_without_gradients_fails() {
        let mut s = store_with_grad(&[1.0], &[1.0]);
        s.zero_grads();
        assert!(matches!(
            NadamState::new(0.1).step(&mut s),
            Err(Error::NoGradients)
        ));
    }

    #[test]
    fn step_counter_and_grad_consumption() {
        let mut s = store_with_grad(&[1.0], &[0.5]);
        let mut opt = NadamState::new(0.01);
        opt.step(&mut s).unwrap();
        assert_eq!(opt.step_count(), 1);
        assert!(!s.has_grads());
    }

    #[test]
    fn tied_storage_updated_once() {
        let mut s = ParamStore::<f64>::new();
        let w = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let id = s.add("emb", ParamGroup::Embedding, w).unwrap();
        s.alias("out", id).unwrap();
        let grads = {
            let mut g = Graph::new();
            let a = s.leaf(&mut g, id);
            let b = s.leaf(&mut g, s.id("out").unwrap());
            let sa = g.sum_squares(a);
            let sb = g.sum_squares(b);
            let root = g.add(sa, sb).unwrap();
            g.backward(root).unwrap()
        };
        s.accumulate(&grads);
        assert_eq!(s.get(id).grad.as_ref().unwrap().values(), &[4.0, -4.0]);
        NadamState::new(0.1).step(&mut s).unwrap();
        // First step: m̂ = g, v̂ = g², so the move is lr·(β1 + 1) against the sign.
        let v = s.value(id).values();
        assert!((v[0] - 0.81).abs() < 1e-6 && (v[1] + 0.81).abs() < 1e-6);
    }
}
