use crate::params::{ParamKind, ParamStore};
use crate::tape::Array;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are indexed like the store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Array>,
    pub v: Vec<Array>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Array> = store.iter().map(|(_, a, _)| Array::zeros(a.raw_dim())).collect();
        Adam { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Array>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per store entry");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if store.kind(id) != ParamKind::Trainable {
                continue;
            }
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use ndarray::IxDyn;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array::from_elem(IxDyn(&[3]), 5.0));
        let mut adam = Adam::new(AdamConfig { lr: 0.1, beta1: 0.9, ..Default::default() }, &store);
        for _ in 0..500 {
            let g = store.get(id).mapv(|x| 2.0 * (x - 1.0));
            adam.update(&mut store, &[Some(g)]);
        }
        assert!(store.get(id).iter().all(|&x| (x - 1.0).abs() < 1e-2));
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array::from_shape_vec(IxDyn(&[2]), vec![0.3, -7.25]).unwrap());
        let before = store.get(id).clone();
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &store);
        adam.update(&mut store, &[Some(Array::from_elem(IxDyn(&[2]), 3.0))]);
        assert_eq!(store.get(id), &before);
    }
}
