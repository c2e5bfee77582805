use std::collections::BTreeMap;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Slot<T> {
    value: Tensor<T>,
    grad: Tensor<T>,
}

/// Named parameters, iterated in name order, each with a same-shaped
/// gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    slots: BTreeMap<String, Slot<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            slots: BTreeMap::new(),
        }
    }

    /// Inserts a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.slots.insert(name, Slot { value, grad });
        Ok(())
    }

    /// Moves every parameter of `other` into `self`.
    pub fn merge(&mut self, other: ParamStore<T>) -> Result<()> {
        for (name, slot) in other.slots {
            self.insert(name, slot.value)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for s in self.slots.values_mut() {
            s.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[T]) {
        let slot = self
            .slots
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        for (dst, &v) in slot.grad.data_mut().iter_mut().zip(g) {
            *dst = *dst + v;
        }
    }

    pub fn scale_grads(&mut self, s: T) {
        for slot in self.slots.values_mut() {
            slot.grad.data_mut().iter_mut().for_each(|g| *g = *g * s);
        }
    }

    /// Fails with the first parameter holding a non-finite value or gradient.
    pub fn check_finite(&self) -> Result<()> {
        for (name, slot) in &self.slots {
            if !slot.value.is_finite() {
                return Err(Error::numerical(name, "non-finite parameter value"));
            }
            if !slot.grad.is_finite() {
                return Err(Error::numerical(name, "non-finite gradient"));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            slots: self
                .slots
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        Slot {
                            value: s.value.cast(),
                            grad: s.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter accepted by `trainable`.
    pub fn step(&mut self, store: &mut ParamStore<T>, trainable: impl Fn(&str) -> bool) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let step_size = T::lit(self.lr * bc2.sqrt() / bc1);
        let eps = T::lit(self.eps * bc2.sqrt());
        for (name, slot) in store.slots.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let n = slot.value.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let grad = slot.grad.data();
            for (((p, &g), m), v) in slot
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p = *p - step_size * *m / (v.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::<f64>::new();
        s.insert("b", Tensor::zeros(&[2])).unwrap();
        s.insert("a", Tensor::zeros(&[1, 3])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(s.grad("a").unwrap().shape(), &[1, 3]);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut s = ParamStore::<f64>::new();
        s.insert("p", Tensor::vector(vec![3.0, -4.0])).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            s.zero_grads();
            let g = s.get("p").unwrap().data().to_vec();
            s.accumulate_grad("p", &g);
            opt.step(&mut s, |_| true);
        }
        assert!(s.get("p").unwrap().data().iter().all(|x| x.abs() < 0.05));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut s = ParamStore::<f64>::new();
        s.insert("frozen.w", Tensor::vector(vec![1.0])).unwrap();
        s.insert("free.w", Tensor::vector(vec![1.0])).unwrap();
        s.accumulate_grad("frozen.w", &[1.0]);
        s.accumulate_grad("free.w", &[1.0]);
        Adam::new(0.1).step(&mut s, |n| !n.starts_with("frozen"));
        assert_eq!(s.get("frozen.w").unwrap().data(), &[1.0]);
        assert!(s.get("free.w").unwrap().data()[0] < 1.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::vector(vec![1.0])).unwrap();
        s.accumulate_grad("w", &[f64::NAN]);
        match s.check_finite() {
            Err(Error::Numerical { param, .. }) => assert_eq!(param, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
