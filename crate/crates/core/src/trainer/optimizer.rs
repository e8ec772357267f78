//! Parameter updates: plain SGD by default, Adam behind a config switch.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Plain gradient descent on a matrix parameter: `p <- p - lr * g`.
pub fn sgd_step(params: &mut Matrix, grads: &Matrix, lr: f64) -> Result<()> {
    if params.shape() != grads.shape() {
        return Err(Error::shape(
            "sgd_step",
            params.shape_string(),
            grads.shape_string(),
        ));
    }
    if !(lr > 0.0) {
        return Err(Error::arg("sgd_step", format!("lr must be positive, got {lr}")));
    }
    params.add_scaled(grads, -lr)
}

/// Plain gradient descent on a vector parameter.
pub fn sgd_step_vec(params: &mut Vector, grads: &Vector, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "sgd_step",
            params.len().to_string(),
            grads.len().to_string(),
        ));
    }
    if !(lr > 0.0) {
        return Err(Error::arg("sgd_step", format!("lr must be positive, got {lr}")));
    }
    params.add_scaled(grads, -lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer {other} (expected sgd or adam)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Holds per-parameter state for the adaptive variant; stateless for SGD.
/// Parameters are identified by a caller-chosen key.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    state: BTreeMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            state: BTreeMap::new(),
        }
    }

    fn adam_update(&mut self, key: &str, params: &mut [f64], grads: &[f64], lr: f64) {
        let entry = self.state.entry(key.to_string()).or_insert_with(|| AdamState {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            t: 0,
        });
        entry.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(entry.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(entry.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            entry.m[i] = ADAM_BETA1 * entry.m[i] + (1.0 - ADAM_BETA1) * g;
            entry.v[i] = ADAM_BETA2 * entry.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = entry.m[i] / bc1;
            let vhat = entry.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }

    pub fn step_matrix(
        &mut self,
        key: &str,
        params: &mut Matrix,
        grads: &Matrix,
        lr: f64,
    ) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, lr),
            OptimizerKind::Adam => {
                if params.shape() != grads.shape() {
                    return Err(Error::shape(
                        "adam_step",
                        params.shape_string(),
                        grads.shape_string(),
                    ));
                }
                self.adam_update(key, params.data_mut(), grads.data(), lr);
                Ok(())
            }
        }
    }

    pub fn step_vector(
        &mut self,
        key: &str,
        params: &mut Vector,
        grads: &Vector,
        lr: f64,
    ) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step_vec(params, grads, lr),
            OptimizerKind::Adam => {
                if params.len() != grads.len() {
                    return Err(Error::shape(
                        "adam_step",
                        params.len().to_string(),
                        grads.len().to_string(),
                    ));
                }
                self.adam_update(key, params.as_mut_slice(), grads.as_slice(), lr);
                Ok(())
            }
        }
    }
}
