use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::array::NdArray;
use super::NumericsError;
use crate::scalar::Scalar;

/// One trainable array with its gradient slot and Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ParamEntry<T> {
    pub value: NdArray<T>,
    pub grad: NdArray<T>,
    pub first_moment: NdArray<T>,
    pub second_moment: NdArray<T>,
    /// Adam steps applied to this entry (entries may be updated by
    /// different subsets of the staged updates).
    pub steps: u64,
}

impl<T: Scalar> ParamEntry<T> {
    fn new(value: NdArray<T>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: NdArray::zeros(&shape),
            first_moment: NdArray::zeros(&shape),
            second_moment: NdArray::zeros(&shape),
            steps: 0,
        }
    }
}

/// Hyper-parameters of one Adam step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameter arrays shared by every network module.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
    step_count: u64,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: NdArray<T>) {
        self.entries.insert(name.to_string(), ParamEntry::new(value));
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, shape `(out, in)`.
    pub fn add_weight(&mut self, name: &str, out: usize, inp: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (out + inp) as f64).sqrt();
        let data = (0..out * inp)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        self.insert(name, NdArray::from_vec(vec![out, inp], data).expect("weight shape"));
    }

    pub fn add_zeros(&mut self, name: &str, len: usize) {
        self.insert(name, NdArray::zeros(&[len]));
    }

    pub fn add_ones(&mut self, name: &str, len: usize) {
        self.insert(name, NdArray::filled(&[len], T::one()));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>, NumericsError> {
        self.entries
            .get(name)
            .ok_or_else(|| NumericsError::MissingParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&NdArray<T>, NumericsError> {
        self.entry(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut NdArray<T>, NumericsError> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| NumericsError::MissingParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&NdArray<T>, NumericsError> {
        self.entry(name).map(|e| &e.grad)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Adds `grads` into the gradient slots; names must exist with matching shapes.
    pub fn accumulate_grads(
        &mut self,
        grads: &BTreeMap<String, NdArray<T>>,
    ) -> Result<(), NumericsError> {
        for (name, g) in grads {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| NumericsError::MissingParameter(name.clone()))?;
            if e.grad.shape() != g.shape() {
                return Err(NumericsError::Dimension(format!(
                    "gradient for {name}: slot {:?} vs incoming {:?}",
                    e.grad.shape(),
                    g.shape()
                )));
            }
            e.grad.add_assign(g);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            for v in e.grad.data_mut() {
                *v = T::zero();
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.grad.data().iter())
            .map(|v| {
                let f = v.to_f64_lossy();
                f * f
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Bias-corrected Adam step on every entry; gradients are zeroed.
    pub fn adam_update(&mut self, cfg: &AdamConfig) -> Result<(), NumericsError> {
        self.adam_update_masked(cfg, |_| true)
    }

    /// Adam step restricted to the entries accepted by `select`. All
    /// gradient slots are zeroed afterwards.
    pub fn adam_update_masked(
        &mut self,
        cfg: &AdamConfig,
        select: impl Fn(&str) -> bool,
    ) -> Result<(), NumericsError> {
        if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
            return Err(NumericsError::Config(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let lr = T::lit(cfg.lr);
        let eps = T::lit(cfg.eps);
        for (name, e) in self.entries.iter_mut() {
            if !select(name) {
                continue;
            }
            e.steps += 1;
            let t = e.steps as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let g = e.grad.data();
            let m = e.first_moment.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let v = e.second_moment.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let m = e.first_moment.data();
            let v = e.second_moment.data();
            for ((p, &mi), &vi) in e.value.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / c1;
                let vhat = vi / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step_count += 1;
        self.zero_grads();
        Ok(())
    }
}
