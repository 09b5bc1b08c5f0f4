use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{ParamGrads, ParamStore};
use crate::training::checkpoint::Tensor;

/// Adam moments with decoupled weight decay. Parameters whose gradient is
/// absent in a step are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: AdamWState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: &ModelConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, name, v)| Tensor::zeros(name, v.dim())).collect();
        AdamW {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            state: AdamWState {
                step: 0,
                first_moment: zeros(),
                second_moment: zeros(),
            },
        }
    }

    pub fn with_state(config: &ModelConfig, store: &ParamStore, state: AdamWState) -> Result<Self> {
        let mut opt = AdamW::new(config, store);
        for (moments, what) in [(&state.first_moment, "first"), (&state.second_moment, "second")] {
            if moments.len() != store.len() {
                return Err(Error::Checkpoint(format!(
                    "{what} moment has {} tensors, model has {}",
                    moments.len(),
                    store.len()
                )));
            }
            for (t, (_, name, v)) in moments.iter().zip(store.iter()) {
                if t.name != name || (t.rows, t.cols) != v.dim() {
                    return Err(Error::Checkpoint(format!("{what} moment for {name} does not match")));
                }
            }
        }
        opt.state = state;
        Ok(opt)
    }

    pub fn state(&self) -> &AdamWState {
        &self.state
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else {
                continue;
            };
            let m = &mut self.state.first_moment[id.0].data;
            let v = &mut self.state.second_moment[id.0].data;
            let p = store.get_mut(id);
            let decay = 1.0 - self.learning_rate * self.weight_decay;
            for (((pv, gv), mv), vv) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *pv *= decay;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
