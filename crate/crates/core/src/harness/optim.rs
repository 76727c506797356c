use crate::error::{Error, Result};
use crate::numerics::{Array, ParamStore};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, one per parameter in store order.
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Array::zeros(p.value.shape())).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients currently held in `store`:
    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
    pub fn update(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array::from_vec(vec![1.0, -2.0, 0.5])).unwrap();
        store.accumulate_grad(id, &Array::from_vec(vec![3.0, -0.1, 0.0]));
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.update(&mut store).unwrap();
        let w = store.value(id).data();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array::from_vec(vec![2.0])).unwrap();
        let mut opt = AdamW::new(&store, 0.1, 0.5);
        opt.update(&mut store).unwrap();
        assert!((store.value(id).item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_bit_identity() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array::from_vec(vec![1.25, -0.0, 3e-9])).unwrap();
        store.accumulate_grad(id, &Array::from_vec(vec![1.0, 2.0, -5.0]));
        let before = store.value(id).clone();
        let mut opt = AdamW::new(&store, 0.0, 0.01);
        opt.update(&mut store).unwrap();
        let after = store.value(id);
        for (a, b) in before.data().iter().zip(after.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn matches_reference_recursion_over_steps() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array::from_vec(vec![0.3])).unwrap();
        let mut opt = AdamW::new(&store, 0.01, 0.01);
        let (b1, b2): (f64, f64) = (0.9, 0.999);
        let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = 2.0 * w;
            store.zero_grad();
            store.accumulate_grad(id, &Array::from_vec(vec![g]));
            opt.update(&mut store).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= 0.01 * (mh / (vh.sqrt() + 1e-8) + 0.01 * w);
            assert_eq!(store.value(id).item(), w);
        }
    }
}
