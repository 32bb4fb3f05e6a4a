//! Adam-style adaptive optimizer with per-parameter first/second moment
//! state. Two instances (one per network) keep step counts independent when
//! the generator and discriminator alternate.

use std::collections::BTreeMap;

use crate::diffcore::GradientMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.5;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamOpt {
    lr: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamOpt {
    pub fn new(lr: f64) -> Self {
        AdamOpt { lr, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Update every parameter whose name starts with `prefix`, in place.
    /// Gradients missing a parameter are an error; extra gradient entries
    /// (for the other network's parameters) are ignored.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &GradientMap,
        prefix: &str,
    ) -> Result<()> {
        if self.lr == 0.0 {
            return Ok(()); // bitwise no-op, not just a tiny step
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, tensor) in params.iter_mut() {
            if !name.starts_with(prefix) {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(format!("no gradient for {name}")))?;
            if g.len() != tensor.len() {
                return Err(Error::InvalidShape(format!(
                    "gradient length {} vs parameter length {} for {name}",
                    g.len(),
                    tensor.len()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.values[i] -= self.lr * m_hat / (v_hat.sqrt() + EPS);
                if !tensor.values[i].is_finite() {
                    return Err(Error::Numeric(format!("non-finite parameter {name}")));
                }
            }
        }
        Ok(())
    }
}
