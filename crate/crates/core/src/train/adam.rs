use std::path::Path;

use ndarray::{Array2, Zip};
use serde_json::{json, Map, Value};

use crate::adapter::AdapterWeights;
use crate::archive::{read_archive, write_archive, DType};
use crate::graph::Gradients;
use crate::tensor::{round_to_f32, NamedTensors};

use super::TrainError;

/// First and second moment estimates, keyed like the adapter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: NamedTensors,
    pub v: NamedTensors,
}

impl AdamState {
    pub fn new(weights: &AdapterWeights) -> Self {
        let zeros: NamedTensors = weights
            .to_named()
            .into_iter()
            .map(|(k, t)| (k, Array2::zeros(t.dim())))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Moments cover exactly the adapter's tensors, with matching shapes.
    pub fn matches(&self, weights: &AdapterWeights) -> bool {
        let named = weights.to_named();
        named.len() == self.m.len()
            && named.len() == self.v.len()
            && named.iter().all(|(k, t)| {
                self.m.get(k).map(|m| m.dim()) == Some(t.dim())
                    && self.v.get(k).map(|v| v.dim()) == Some(t.dim())
            })
    }

    /// One Adam update in place. Parameters stay `f32`-representable.
    pub fn step(
        &mut self,
        weights: &mut AdapterWeights,
        grads: &Gradients,
        lr: f64,
    ) -> Result<(), TrainError> {
        if !self.matches(weights) {
            return Err(TrainError::Optimizer(
                "optimizer state does not match adapter tensors".into(),
            ));
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in weights.tensors_mut() {
            let g = grads
                .get(&name)
                .ok_or_else(|| TrainError::Optimizer(format!("no gradient for {name}")))?;
            let m = self.m.get_mut(&name).expect("checked by matches");
            let v = self.v.get_mut(&name).expect("checked by matches");
            Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p -= lr * update;
                });
            round_to_f32(p);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, step: usize) -> Result<(), TrainError> {
        let mut meta = Map::new();
        meta.insert("kind".into(), json!("adam"));
        meta.insert("step".into(), json!(step));
        meta.insert("t".into(), json!(self.t));
        meta.insert("beta1".into(), json!(self.beta1));
        meta.insert("beta2".into(), json!(self.beta2));
        meta.insert("eps".into(), json!(self.eps));
        let mut tensors = NamedTensors::new();
        for (k, m) in &self.m {
            tensors.insert(format!("m.{k}"), m.clone());
        }
        for (k, v) in &self.v {
            tensors.insert(format!("v.{k}"), v.clone());
        }
        write_archive(path, meta, &tensors, DType::F64)?;
        Ok(())
    }

    /// Returns the state and the step it was saved at.
    pub fn load(path: &Path) -> Result<(Self, usize), TrainError> {
        let (meta, tensors) = read_archive(path)?;
        let num = |k: &str| {
            meta.get(k)
                .and_then(Value::as_f64)
                .ok_or_else(|| TrainError::Optimizer(format!("{}: missing {k}", path.display())))
        };
        let (mut m, mut v) = (NamedTensors::new(), NamedTensors::new());
        for (k, t) in tensors {
            if let Some(rest) = k.strip_prefix("m.") {
                m.insert(rest.to_string(), t);
            } else if let Some(rest) = k.strip_prefix("v.") {
                v.insert(rest.to_string(), t);
            } else {
                return Err(TrainError::Optimizer(format!(
                    "{}: unexpected tensor {k}",
                    path.display()
                )));
            }
        }
        let state = Self {
            beta1: num("beta1")?,
            beta2: num("beta2")?,
            eps: num("eps")?,
            t: num("t")? as u64,
            m,
            v,
        };
        Ok((state, num("step")? as usize))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_adapter, AdapterConfig};
    use crate::diffusion::BackboneSpec;

    fn setup() -> (AdapterWeights, Gradients) {
        let spec = BackboneSpec::ci();
        let w = init_adapter(&spec, AdapterConfig::for_backbone(&spec), 3, None).unwrap();
        let grads = Gradients {
            by_name: w
                .to_named()
                .into_iter()
                .map(|(k, t)| (k, t.mapv(|_| 0.5)))
                .collect(),
        };
        (w, grads)
    }

    #[test]
    fn zero_lr_leaves_weights_bitwise() {
        let (mut w, g) = setup();
        let before = w.clone();
        let mut opt = AdamState::new(&w);
        opt.step(&mut w, &g, 0.0).unwrap();
        assert_eq!(w, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut w, g) = setup();
        let before = w.latent_queries.clone();
        let mut opt = AdamState::new(&w);
        opt.step(&mut w, &g, 1e-2).unwrap();
        let delta = &before - &w.latent_queries;
        assert!(delta.iter().all(|d| (d - 1e-2).abs() < 1e-6), "{delta:?}");
    }

    #[test]
    fn sidecar_round_trip() {
        let (mut w, g) = setup();
        let mut opt = AdamState::new(&w);
        opt.step(&mut w, &g, 1e-3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("opt.idk");
        opt.save(&p, 7).unwrap();
        assert_eq!(AdamState::load(&p).unwrap(), (opt, 7));
    }
}
