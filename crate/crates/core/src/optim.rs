//! Adam with bias correction.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied to this parameter so far.
    pub steps: u64,
}

/// Optimizer state. Parameters that receive no gradient in a step are left
/// untouched and their moments do not advance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    moments: BTreeMap<String, Moments>,
    steps: u64,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Optimizer steps taken.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Moments)> {
        self.moments.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn from_parts(steps: u64, moments: BTreeMap<String, Moments>) -> Self {
        Adam { moments, steps }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &HashMap<String, Tensor>, hp: &AdamConfig) -> Result<()> {
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            let g = &grads[name];
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let st = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - hp.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - hp.beta2.powi(st.steps as i32);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
                *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= hp.learning_rate * mhat / (vhat.sqrt() + hp.epsilon);
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::init(&ModelConfig::toy(), 0);
        let before = store.get("heads.detect.b").unwrap().clone();
        let grads = HashMap::from([("heads.detect.b".to_string(), Tensor::full(&[6], 2.0))]);
        let mut adam = Adam::new();
        adam.step(&mut store, &grads, &AdamConfig::default()).unwrap();
        let after = store.get("heads.detect.b").unwrap();
        for (a, b) in after.data().iter().zip(before.data()) {
            assert!((b - a - 1e-3).abs() < 1e-10);
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut store = ParamStore::init(&ModelConfig::toy(), 0);
        let before = store.clone();
        let grads = HashMap::from([("heads.mlm.w".to_string(), Tensor::full(&[32, 256], 0.7))]);
        let hp = AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new();
        for _ in 0..5 {
            adam.step(&mut store, &grads, &hp).unwrap();
        }
        assert_eq!(store, before);
    }
}
