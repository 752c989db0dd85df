//! Optimisers with checkpointable state. Weight decay is the coupled L2 form
//! (added to the gradient), matching the classic Adam/SGD formulations.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::{HostArray, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in params.vars() {
            let Some(grad) = grads.get(var) else { continue };
            // Keep optimiser state off the autograd graph, or it chains across steps.
            let grad = grad.detach();
            let p = var.as_tensor().detach();
            let g = if weight_decay > 0.0 {
                (&grad + (&p * weight_decay)?)?
            } else {
                grad.clone()
            };
            let m = match self.m.get(name) {
                Some(m) => ((m * beta1)? + (&g * (1.0 - beta1))?)?,
                None => (&g * (1.0 - beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            var.set(&(&p - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, HostArray>) -> Result<u64> {
        for (name, t) in &self.m {
            out.insert(format!("{prefix}/m/{name}"), HostArray::from_tensor(t)?);
        }
        for (name, t) in &self.v {
            out.insert(format!("{prefix}/v/{name}"), HostArray::from_tensor(t)?);
        }
        Ok(self.step)
    }

    pub fn import(&mut self, prefix: &str, step: u64, arrays: &BTreeMap<String, HostArray>, params: &ParamStore) -> Result<()> {
        self.step = step;
        self.m = import_slot(prefix, "m", arrays, params)?;
        self.v = import_slot(prefix, "v", arrays, params)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    step: u64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            step: 0,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        for (name, var) in params.vars() {
            let Some(grad) = grads.get(var) else { continue };
            // Keep optimiser state off the autograd graph, or it chains across steps.
            let grad = grad.detach();
            let p = var.as_tensor().detach();
            let g = if self.cfg.weight_decay > 0.0 {
                (&grad + (&p * self.cfg.weight_decay)?)?
            } else {
                grad.clone()
            };
            let buf = match self.velocity.get(name) {
                Some(b) if self.cfg.momentum > 0.0 => ((b * self.cfg.momentum)? + g)?,
                _ => g,
            };
            var.set(&(&p - (&buf * lr)?)?)?;
            self.velocity.insert(name.clone(), buf);
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, HostArray>) -> Result<u64> {
        for (name, t) in &self.velocity {
            out.insert(format!("{prefix}/velocity/{name}"), HostArray::from_tensor(t)?);
        }
        Ok(self.step)
    }

    pub fn import(&mut self, prefix: &str, step: u64, arrays: &BTreeMap<String, HostArray>, params: &ParamStore) -> Result<()> {
        self.step = step;
        self.velocity = import_slot(prefix, "velocity", arrays, params)?;
        Ok(())
    }
}

fn import_slot(
    prefix: &str,
    slot: &str,
    arrays: &BTreeMap<String, HostArray>,
    params: &ParamStore,
) -> Result<BTreeMap<String, Tensor>> {
    let head = format!("{prefix}/{slot}/");
    let mut out = BTreeMap::new();
    for (key, array) in arrays.range(head.clone()..) {
        let Some(name) = key.strip_prefix(&head) else { break };
        if !params.vars().contains_key(name) {
            return Err(Error::Contract(format!("optimizer state for unknown parameter `{name}`")));
        }
        out.insert(name.to_string(), array.to_tensor(params.dtype(), params.device())?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::SeedableRng;

    #[test]
    fn sgd_matches_hand_update() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let lin = store.linear("l", 1, 1, &mut rng).unwrap();
        lin.weight.set(&Tensor::new(&[[1.0f64]], store.device()).unwrap()).unwrap();
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        });
        let x = Tensor::new(&[[2.0f64]], store.device()).unwrap();
        // loss = w*x + b -> dL/dw = 2, dL/db = 1
        for expected in [1.0 - 0.1 * 2.0, 0.8 - 0.1 * (0.9 * 2.0 + 2.0)] {
            let loss = lin.forward(&x).unwrap().sum_all().unwrap();
            let g = loss.backward().unwrap();
            opt.step(&store, &g, 0.1).unwrap();
            let w = lin.weight.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
            assert!((w - expected).abs() < 1e-12, "{w} vs {expected}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let lin = store.linear("l", 3, 2, &mut rng).unwrap();
        let before = lin.weight.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut opt = Adam::new(AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        });
        let x = Tensor::new(&[[1.0f64, -2.0, 3.0]], store.device()).unwrap();
        let g = lin.forward(&x).unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&store, &g, 0.01).unwrap();
        let after = lin.weight.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert!(((b - a).abs() - 0.01).abs() < 1e-6);
        }
    }
}
