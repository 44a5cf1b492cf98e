//! Adam with bias correction, global-norm gradient clipping, and
//! checkpointable state.

use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};
use crate::model::params::ParamStore;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients when their global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

/// Per-parameter first/second moment accumulators plus the step count.
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    /// Register every tensor of the store exactly once.
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam { config, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clip, update moments, and apply one update in place. `grads` must
    /// align with the store's registration order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(CoreError::Shape(format!(
                "{} gradient tensors for {} registered parameters",
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(clip) = self.config.clip_norm {
            let norm_sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|g| g * g).sum();
            let norm = norm_sq.sqrt();
            if norm > clip {
                let scale = clip / norm;
                for g in grads.iter_mut() {
                    for x in g.iter_mut() {
                        *x *= scale;
                    }
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let lr = self.config.learning_rate;
        for (((_, param), g), (m, v)) in store
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(param.numel(), g.len());
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param.data[i] -= lr * m_hat / (v_hat.sqrt() + self.config.eps);
            }
        }
        Ok(())
    }

    /// Moments and step as named tensors for checkpointing.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        out.push((
            "adam.step".to_string(),
            Tensor { shape: vec![1], data: vec![self.step as f64], requires_grad: false, grad: None },
        ));
        for ((name, t), (m, v)) in store.iter().zip(self.m.iter().zip(self.v.iter())) {
            out.push((
                format!("adam.m.{name}"),
                Tensor { shape: t.shape.clone(), data: m.clone(), requires_grad: false, grad: None },
            ));
            out.push((
                format!("adam.v.{name}"),
                Tensor { shape: t.shape.clone(), data: v.clone(), requires_grad: false, grad: None },
            ));
        }
        out
    }

    /// Rebuild from checkpointed tensors; moments default to zero when
    /// the checkpoint carries none.
    pub fn restore(store: &ParamStore, config: AdamConfig, extra: &[(String, Tensor)]) -> Result<Self> {
        let mut adam = Adam::new(store, config);
        let lookup: std::collections::HashMap<&str, &Tensor> =
            extra.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if let Some(step) = lookup.get("adam.step") {
            adam.step = step.data[0] as u64;
        } else {
            return Ok(adam);
        }
        for (i, (name, t)) in store.iter().enumerate() {
            let m = lookup
                .get(format!("adam.m.{name}").as_str())
                .ok_or_else(|| CoreError::Checkpoint(format!("missing adam.m.{name}")))?;
            let v = lookup
                .get(format!("adam.v.{name}").as_str())
                .ok_or_else(|| CoreError::Checkpoint(format!("missing adam.v.{name}")))?;
            if m.numel() != t.numel() || v.numel() != t.numel() {
                return Err(CoreError::Checkpoint(format!("moment shape mismatch for {name}")));
            }
            adam.m[i].copy_from_slice(&m.data);
            adam.v[i].copy_from_slice(&v.data);
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor { shape: vec![1], data: vec![w], requires_grad: true, grad: None });
        s
    }

    #[test]
    fn first_step_matches_hand_arithmetic() {
        // w=0, g=1, lr=1e-4: m_hat = v_hat = 1, update = -1e-4/(1+eps).
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(&store, AdamConfig { clip_norm: None, ..AdamConfig::new(1e-4) });
        adam.step(&mut store, &mut [vec![1.0]]).unwrap();
        let w = store.get("w").data[0];
        assert!((w - (-1e-4)).abs() < 1e-11, "w = {w}");
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = scalar_store(0.37);
        let mut adam = Adam::new(&store, AdamConfig::new(1e-3));
        adam.step(&mut store, &mut [vec![0.0]]).unwrap();
        assert_eq!(store.get("w").data[0], 0.37);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn clipping_rescales_to_unit_global_norm() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor { shape: vec![1], data: vec![0.0], requires_grad: true, grad: None });
        store.insert("b", Tensor { shape: vec![1], data: vec![0.0], requires_grad: true, grad: None });
        let mut adam = Adam::new(&store, AdamConfig::new(1.0));
        let mut grads = vec![vec![3.0], vec![4.0]];
        adam.step(&mut store, &mut grads).unwrap();
        assert!((grads[0][0] - 0.6).abs() < 1e-12);
        assert!((grads[1][0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn export_restore_round_trips() {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(&store, AdamConfig::new(1e-2));
        adam.step(&mut store, &mut [vec![0.5]]).unwrap();
        adam.step(&mut store, &mut [vec![-0.25]]).unwrap();
        let extra = adam.export(&store);
        let restored = Adam::restore(&store, adam.config, &extra).unwrap();
        assert_eq!(restored.step_count(), 2);
        assert_eq!(restored.m, adam.m);
        assert_eq!(restored.v, adam.v);
    }
}
