//! Adam, optionally restricted to a subset of coordinates.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("Adam eps must be positive"));
        }
        Ok(())
    }
}

/// Adam state. With a mask, moments exist only for the active coordinates
/// and every other coordinate is never written.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    len: usize,
    active: Option<Vec<usize>>,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, len: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            len,
            active: None,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        })
    }

    pub fn masked(cfg: AdamConfig, mask: &[bool]) -> Result<Self> {
        cfg.validate()?;
        let active: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        let n = active.len();
        Ok(Self {
            cfg,
            len: mask.len(),
            active: Some(active),
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        })
    }

    pub fn n_active(&self) -> usize {
        self.m.len()
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.len || grad.len() != self.len {
            return Err(Error::invalid(format!(
                "optimizer built for {} coordinates, got params {} and grad {}",
                self.len,
                params.len(),
                grad.len()
            )));
        }
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.steps);
        let c2 = 1.0 - beta2.powi(self.steps);
        let mut update = |slot: usize, idx: usize| {
            let g = grad[idx];
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            params[idx] -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        match &self.active {
            None => (0..self.len).for_each(|i| update(i, i)),
            Some(active) => active
                .iter()
                .enumerate()
                .for_each(|(slot, &i)| update(slot, i)),
        }
        Ok(())
    }
}
