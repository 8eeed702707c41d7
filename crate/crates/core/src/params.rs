//! Trainable parameters, their gradient slots and optimizer state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::array::Tensor;
use crate::autodiff::Tape;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Update rule applied by [`ParamStore::step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rule {
    /// `v ← μ·v + g; p ← p − lr·v`
    SgdMomentum { momentum: f64 },
    /// Bias-corrected adaptive moments.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Rule {
    pub fn adam() -> Self {
        Rule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let shape = value.shape().to_vec();
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(Tensor::zeros(&shape));
        self.first_moment.push(Tensor::zeros(&shape));
        self.second_moment.push(Tensor::zeros(&shape));
        ParamId(self.values.len() - 1)
    }

    /// Adds a parameter drawn from `U(-bound, bound)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        self.add(name, Tensor::from_vec(shape, data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale_grads(&mut self, f: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }

    /// Adds the parameter gradients recorded on `tape` into the slots.
    pub fn accumulate_from(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            self.grads[id.0]
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b);
        }
    }

    /// Zeroes every parameter value (and leaves gradients untouched).
    pub fn zero_values(&mut self) {
        for v in &mut self.values {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Applies one update and zeroes the gradients. Refuses the step if any
    /// gradient is non-finite.
    pub fn step(&mut self, rule: Rule, lr: f64) -> Result<()> {
        for (name, g) in self.names.iter().zip(&self.grads) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.steps += 1;
        let t = self.steps as f64;
        for i in 0..self.values.len() {
            let g = self.grads[i].data();
            let p = self.values[i].data_mut();
            match rule {
                Rule::SgdMomentum { momentum } => {
                    let v = self.first_moment[i].data_mut();
                    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                        *v = momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
                Rule::Adam { beta1, beta2, eps } => {
                    let m = self.first_moment[i].data_mut();
                    let s = self.second_moment[i].data_mut();
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    for (((p, m), s), g) in p.iter_mut().zip(m.iter_mut()).zip(s.iter_mut()).zip(g)
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *s = beta2 * *s + (1.0 - beta2) * g * g;
                        let mh = *m / c1;
                        let sh = *s / c2;
                        *p -= lr * mh / (sh.sqrt() + eps);
                    }
                }
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Named values, for checkpointing.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Overwrites values by name; every parameter must be present with the
    /// same shape.
    pub fn load_named<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, t) in entries {
            let Some(id) = self.find(name) else { continue };
            if t.shape() != self.values[id.0].shape() {
                return Err(crate::error::shape_err(
                    "ParamStore::load_named",
                    format!(
                        "{name}: stored {:?}, expected {:?}",
                        t.shape(),
                        self.values[id.0].shape()
                    ),
                ));
            }
            self.values[id.0] = t.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(crate::error::invalid(
                "ParamStore::load_named",
                format!("missing parameter {}", self.names[i]),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_grad(p: f64, g: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(p));
        s.grads[id.0] = Tensor::scalar(g);
        (s, id)
    }

    #[test]
    fn vanilla_descent() {
        let (mut s, id) = store_with_grad(1.0, 0.5);
        s.step(Rule::SgdMomentum { momentum: 0.0 }, 0.1).unwrap();
        assert!((s.value(id).data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(s.grad(id).data(), &[0.0]);
    }

    #[test]
    fn momentum_unrolls() {
        let (mut s, id) = store_with_grad(0.0, 2.0);
        let lr = 0.01;
        s.step(Rule::SgdMomentum { momentum: 0.9 }, lr).unwrap();
        s.grads[id.0] = Tensor::scalar(2.0);
        s.step(Rule::SgdMomentum { momentum: 0.9 }, lr).unwrap();
        let want = -lr * 2.0 * (1.0 + 1.9);
        assert!((s.value(id).data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_keeps_values() {
        for rule in [Rule::SgdMomentum { momentum: 0.9 }, Rule::adam()] {
            let (mut s, id) = store_with_grad(3.0, 7.0);
            s.step(rule, 0.0).unwrap();
            assert_eq!(s.value(id).data(), &[3.0]);
        }
    }

    #[test]
    fn nan_gradient_refuses_step() {
        let (mut s, id) = store_with_grad(1.0, f64::NAN);
        assert!(matches!(s.step(Rule::adam(), 0.1), Err(Error::NonFinite(_))));
        assert_eq!(s.value(id).data(), &[1.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut s, id) = store_with_grad(0.0, 4.0);
        s.step(Rule::adam(), 0.01).unwrap();
        assert!((s.value(id).data()[0] + 0.01).abs() < 1e-9);
    }
}
