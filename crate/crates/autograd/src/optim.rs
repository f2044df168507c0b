use std::collections::BTreeMap;

use crate::{ParamStore, Tensor};

/// Adam with bias correction. State is keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients for frozen or unknown names are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            if !p.trainable {
                continue;
            }
            let n = p.value.len();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((x, gi), mi), vi) in
                p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic_and_respects_freeze() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![3.0, -2.0]), true);
        store.insert("frozen", Tensor::scalar(7.0), false);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = store.get("x").unwrap().value.clone();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), x.map(|v| 2.0 * v));
            grads.insert("frozen".to_string(), Tensor::scalar(1.0));
            opt.step(&mut store, &grads);
        }
        assert!(store.get("x").unwrap().value.data().iter().all(|v| v.abs() < 1e-2));
        assert_eq!(store.get("frozen").unwrap().value.item(), 7.0);
    }
}
