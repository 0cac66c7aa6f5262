//! Adam with bias correction, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Gradients};
use crate::params::ParamSet;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates every parameter that has a gradient. Parameters without one
    /// are left alone, as are gradient entries with no matching parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            if p.shape() != g.shape() {
                return Err(Error::Invalid(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
            if !p.is_finite() {
                return Err(Error::Divergence {
                    step: self.t as usize,
                    reason: format!("parameter {name} became non-finite"),
                });
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.values().map(Array::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamSet::new();
        p.insert("w", Array::vector(vec![1.0, -1.0]).unwrap());
        let mut g = Gradients::new();
        g.insert("w".into(), Array::vector(vec![0.3, -7.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamSet::new();
        p.insert("w", Array::scalar(3.0).unwrap());
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            let w = p.get("w").unwrap().item().unwrap();
            let mut g = Gradients::new();
            g.insert("w".into(), Array::scalar(2.0 * (w - 1.0)).unwrap());
            adam.step(&mut p, &g).unwrap();
        }
        assert!((p.get("w").unwrap().item().unwrap() - 1.0).abs() < 1e-2);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = Gradients::new();
        g.insert("a".into(), Array::vector(vec![3.0]).unwrap());
        g.insert("b".into(), Array::vector(vec![4.0]).unwrap());
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
        assert!((g["b"].data()[0] - 0.8).abs() < 1e-15);
        assert!((clip_global_norm(&mut g, 10.0) - 1.0).abs() < 1e-12);
    }
}
