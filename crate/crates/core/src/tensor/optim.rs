use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Sgd,
    Adam,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Method::Sgd),
            "adam" => Ok(Method::Adam),
            other => Err(format!("unknown optimizer '{other}'")),
        }
    }
}

/// SGD or Adam over the non-frozen parameters of a store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub method: Method,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(method: Method, lr: f64) -> Self {
        Optimizer {
            method,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(Method::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(Method::Adam, lr)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Frozen parameters
    /// are skipped entirely.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        for id in store.trainable_ids() {
            let p = store.get_mut(id);
            match self.method {
                Method::Sgd => {
                    for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *v -= self.lr * g;
                    }
                }
                Method::Adam => {
                    let (m, s) = self.moments.entry(id).or_insert_with(|| {
                        (
                            Tensor::zeros(p.value.shape()),
                            Tensor::zeros(p.value.shape()),
                        )
                    });
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    let (value, grad) = (p.value.data_mut(), p.grad.data());
                    for i in 0..value.len() {
                        let g = grad[i];
                        let mi = &mut m.data_mut()[i];
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                        let si = &mut s.data_mut()[i];
                        *si = self.beta2 * *si + (1.0 - self.beta2) * g * g;
                        let m_hat = m.data()[i] / c1;
                        let s_hat = s.data()[i] / c2;
                        value[i] -= self.lr * m_hat / (s_hat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64], grad: &[f64]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("p", Tensor::vector(values.to_vec()));
        s.accumulate(&[(id, Tensor::vector(grad.to_vec()))]);
        (s, id)
    }

    #[test]
    fn sgd_step() {
        let (mut s, id) = store_with(&[0.0, 0.0], &[1.0, 2.0]);
        Optimizer::sgd(0.1).step(&mut s);
        assert_eq!(s.get(id).value.data(), &[-0.1, -0.2]);
    }

    #[test]
    fn frozen_parameter_unchanged() {
        let (mut s, id) = store_with(&[0.3, -0.7], &[5.0, -3.0]);
        s.get_mut(id).frozen = true;
        let before = s.get(id).value.clone();
        let mut opt = Optimizer::adam(0.1);
        for _ in 0..1000 {
            opt.step(&mut s);
        }
        Optimizer::sgd(0.1).step(&mut s);
        assert_eq!(s.get(id).value, before);
        assert!(s.trainable_ids().is_empty());
    }

    #[test]
    fn adam_first_step() {
        // m̂ = g, ŝ = g², so the update is -lr·g/(|g| + eps).
        let g = [0.5, -2.0, 1e-3];
        let (mut s, id) = store_with(&[0.0; 3], &g);
        Optimizer::adam(0.01).step(&mut s);
        for (v, gi) in s.get(id).value.data().iter().zip(g) {
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((v - expected).abs() < 1e-15, "{v} vs {expected}");
        }
    }

    #[test]
    fn method_parse() {
        assert_eq!("adam".parse::<Method>().unwrap(), Method::Adam);
        assert!("rmsprop".parse::<Method>().is_err());
    }
}
