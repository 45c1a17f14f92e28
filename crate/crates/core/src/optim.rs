//! Adam, momentum SGD and parameter EMA over named flat parameter blocks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TdgError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

/// A parameter slice with its gradient.
pub struct ParamBlock<'a> {
    pub name: &'a str,
    pub values: &'a mut [f64],
    pub grads: &'a [f64],
}

impl<'a> ParamBlock<'a> {
    pub fn new(name: &'a str, values: &'a mut [f64], grads: &'a [f64]) -> Self {
        Self { name, values, grads }
    }
}

fn check_blocks(blocks: &[ParamBlock<'_>], step: u64) -> Result<()> {
    for b in blocks {
        if b.values.len() != b.grads.len() {
            return Err(TdgError::Dimension {
                expected: b.values.len(),
                got: b.grads.len(),
            });
        }
        if let Some(g) = b.grads.iter().find(|g| !g.is_finite()) {
            return Err(TdgError::NonFinite {
                step,
                param: b.name.to_string(),
                magnitude: g.abs(),
            });
        }
    }
    Ok(())
}

fn check_shape(name: &str, stored: usize, got: usize) -> Result<()> {
    if stored == got {
        Ok(())
    } else {
        Err(TdgError::Config(format!(
            "parameter {name} changed size from {stored} to {got}"
        )))
    }
}

/// Adam with bias correction; one moment pair per named block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every block. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, blocks: &mut [ParamBlock<'_>], lr: f64) -> Result<()> {
        check_blocks(blocks, self.step + 1)?;
        for b in blocks.iter() {
            if let Some((m, _)) = self.moments.get(b.name) {
                check_shape(b.name, m.len(), b.values.len())?;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for b in blocks.iter_mut() {
            let n = b.values.len();
            let (m, v) = self
                .moments
                .entry(b.name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for i in 0..n {
                let g = b.grads[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                b.values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `buf ← 0.9·buf + g; p ← p − lr·buf`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    step: u64,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, blocks: &mut [ParamBlock<'_>], lr: f64) -> Result<()> {
        check_blocks(blocks, self.step + 1)?;
        for b in blocks.iter() {
            if let Some(buf) = self.buffers.get(b.name) {
                check_shape(b.name, buf.len(), b.values.len())?;
            }
        }
        self.step += 1;
        for b in blocks.iter_mut() {
            let n = b.values.len();
            let buf = self
                .buffers
                .entry(b.name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                buf[i] = SGD_MOMENTUM * buf[i] + b.grads[i];
                b.values[i] -= lr * buf[i];
            }
        }
        Ok(())
    }
}

/// Shadow copies of parameters: `shadow ← decay·shadow + (1 − decay)·param`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub decay: f64,
    pub shadows: BTreeMap<String, Vec<f64>>,
}

impl EmaState {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(TdgError::Config(format!("EMA decay must lie in [0, 1], got {decay}")));
        }
        Ok(Self {
            decay,
            shadows: BTreeMap::new(),
        })
    }

    /// Seeds the shadow of `name` with the current values.
    pub fn register(&mut self, name: &str, values: &[f64]) {
        self.shadows.insert(name.to_string(), values.to_vec());
    }

    pub fn update(&mut self, name: &str, values: &[f64]) -> Result<()> {
        self.update_with_decay(name, values, self.decay)
    }

    /// Decay actually applied after `updates` prior updates: the configured
    /// decay, capped by `(1 + t)/(10 + t)` so early shadows are not pinned to
    /// the initialization.
    pub fn warmup_decay(&self, updates: u64) -> f64 {
        let t = updates as f64;
        self.decay.min((1.0 + t) / (10.0 + t))
    }

    pub fn update_with_decay(&mut self, name: &str, values: &[f64], decay: f64) -> Result<()> {
        let shadow = self
            .shadows
            .entry(name.to_string())
            .or_insert_with(|| values.to_vec());
        check_shape(name, shadow.len(), values.len())?;
        for (s, &p) in shadow.iter_mut().zip(values) {
            *s = decay * *s + (1.0 - decay) * p;
        }
        Ok(())
    }

    pub fn shadow(&self, name: &str) -> Option<&[f64]> {
        self.shadows.get(name).map(Vec::as_slice)
    }
}
