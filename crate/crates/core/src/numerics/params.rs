use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::chemgraph::fnv1a64;

use super::{Matrix, NumericsError, Scalar};

static NEXT_STORE_TAG: AtomicU64 = AtomicU64::new(1);

/// Handle to a parameter inside a specific [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn store(self) -> u64 {
        self.store
    }

    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
struct Param<T> {
    name: String,
    value: Matrix<T>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with Adam moments. One store per learning-rate group.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    tag: u64,
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: &str, value: Matrix<T>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let n = value.data().len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        let index = self.params.len() - 1;
        self.index.insert(name.to_string(), index);
        ParamId {
            store: self.tag,
            index,
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&index| ParamId {
            store: self.tag,
            index,
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId {
            store: self.tag,
            index,
        })
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.index].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.index].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.index].value
    }

    /// Copy of the store in another float type, sharing nothing.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(&p.name, p.value.cast());
        }
        out
    }

    /// Named values in registration order.
    pub fn named_values(&self) -> Vec<(&str, &Matrix<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect()
    }

    /// Replaces values by name; every parameter must be present with the same shape.
    pub fn load_values(&mut self, values: &BTreeMap<String, Matrix<T>>) -> Result<(), NumericsError> {
        for p in &self.params {
            let v = values
                .get(&p.name)
                .ok_or_else(|| NumericsError::UnknownParam(p.name.clone()))?;
            if v.shape() != p.value.shape() {
                return Err(NumericsError::Shape {
                    op: "load_values",
                    left: p.value.shape(),
                    right: v.shape(),
                });
            }
        }
        for p in &mut self.params {
            p.value = values[&p.name].clone();
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and f32 bit patterns.
    pub fn hash(&self) -> u64 {
        let mut words = Vec::new();
        for p in &self.params {
            words.extend(p.name.bytes().map(u64::from));
            words.push(p.value.rows() as u64);
            words.push(p.value.cols() as u64);
            words.extend(
                p.value
                    .data()
                    .iter()
                    .map(|x| u64::from((x.as_f64() as f32).to_bits())),
            );
        }
        fnv1a64(&words)
    }

    /// One Adam step with bias correction. Parameters without a gradient are
    /// left alone. A non-finite gradient aborts before anything changes.
    pub fn adam_step(&mut self, adam: &Adam, grads: &[Option<Matrix<T>>]) -> Result<(), NumericsError> {
        for (p, g) in self.params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(NumericsError::Shape {
                        op: "adam_step",
                        left: p.value.shape(),
                        right: g.shape(),
                    });
                }
                if !g.is_finite() {
                    return Err(NumericsError::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - adam.beta1.powi(t);
        let c2 = 1.0 - adam.beta2.powi(t);
        for (p, g) in self.params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            for (k, (x, &gk)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = gk.as_f64();
                p.m[k] = adam.beta1 * p.m[k] + (1.0 - adam.beta1) * gk;
                p.v[k] = adam.beta2 * p.v[k] + (1.0 - adam.beta2) * gk * gk;
                let mhat = p.m[k] / c1;
                let vhat = p.v[k] / c2;
                *x = T::from_f64(x.as_f64() - adam.lr * mhat / (vhat.sqrt() + adam.eps));
            }
        }
        Ok(())
    }
}
