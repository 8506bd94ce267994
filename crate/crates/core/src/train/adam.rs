//! Adam with decoupled-from-nothing classic L2 weight decay (the decay term
//! is added to the gradient, matching the optimizer the training constants
//! were tuned for). Frozen subsets are skipped entirely: neither the tensor
//! nor its moments change.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::net::{AdamState, ParamStore, Subset};

#[derive(Clone, Copy, Debug)]
pub struct AdamCfg {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamCfg {
    fn default() -> Self {
        AdamCfg {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

pub struct Adam {
    pub cfg: AdamCfg,
    pub state: AdamState,
}

impl Adam {
    pub fn new(cfg: AdamCfg, params: &ParamStore<f32>) -> Self {
        let mut state = AdamState::default();
        for (name, t) in params.iter() {
            state.m.insert(name.clone(), ArrayD::zeros(t.raw_dim()));
            state.v.insert(name.clone(), ArrayD::zeros(t.raw_dim()));
        }
        Adam { cfg, state }
    }

    pub fn with_state(cfg: AdamCfg, state: AdamState) -> Self {
        Adam { cfg, state }
    }

    /// One update over all unfrozen parameters.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, ArrayD<f32>>) {
        self.state.step += 1;
        let t = self.state.step as f32;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let frozen: Vec<Subset> = params.frozen_subsets().iter().cloned().collect();
        for (name, tensor) in params.iter_mut() {
            if frozen.contains(&Subset::of_name(name)) {
                continue;
            }
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            let m = self.state.m.get_mut(name).expect("moment m");
            let v = self.state.v.get_mut(name).expect("moment v");
            let (b1, b2, eps, lr, wd) = (
                self.cfg.beta1,
                self.cfg.beta2,
                self.cfg.eps,
                self.cfg.lr,
                self.cfg.weight_decay,
            );
            ndarray::Zip::from(tensor)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g + wd * *p;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
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
    use ndarray::IxDyn;

    #[test]
    fn converges_on_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert(
            "val.fc.w",
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, -2.0]).unwrap(),
        );
        let mut adam = Adam::new(
            AdamCfg {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
            &params,
        );
        for _ in 0..500 {
            let w = params.get("val.fc.w").clone();
            let mut grads = BTreeMap::new();
            grads.insert("val.fc.w".to_string(), w.mapv(|x| 2.0 * x));
            adam.step(&mut params, &grads);
        }
        assert!(params.get("val.fc.w").iter().all(|&x| x.abs() < 1e-3));
    }

    #[test]
    fn frozen_subsets_are_bitwise_constant() {
        let mut params = ParamStore::new();
        params.insert(
            "sense.img.fc.w",
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.5, -0.5]).unwrap(),
        );
        params.insert(
            "dec.fc.w",
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, 0.25]).unwrap(),
        );
        params.set_frozen(Subset::Sense, true);
        let before = params.get("sense.img.fc.w").clone();
        let mut adam = Adam::new(AdamCfg::default(), &params);
        let mut grads = BTreeMap::new();
        grads.insert(
            "sense.img.fc.w".to_string(),
            ArrayD::from_elem(IxDyn(&[2]), 1.0f32),
        );
        grads.insert("dec.fc.w".to_string(), ArrayD::from_elem(IxDyn(&[2]), 1.0f32));
        for _ in 0..3 {
            adam.step(&mut params, &grads);
        }
        assert_eq!(params.get("sense.img.fc.w"), &before);
        assert!(adam.state.m["sense.img.fc.w"].iter().all(|&x| x == 0.0));
        assert_ne!(params.get("dec.fc.w")[[0]], 0.5);
    }
}
