use std::collections::HashMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Registration order is stable and defines checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Resets every gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            if t.requires_grad {
                let n = t.len();
                match &mut t.grad {
                    Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                    None => t.grad = Some(vec![0.0; n]),
                }
            }
        }
    }

    pub fn clear_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Adds `grads` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &Grads) {
        for (id, g) in grads.iter() {
            let t = &mut self.tensors[id.0];
            if !t.requires_grad {
                continue;
            }
            let n = t.len();
            let buf = t.grad.get_or_insert_with(|| vec![0.0; n]);
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
    }

    /// Copies values (not gradients) from `other`, which must share layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract("parameter layouts differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Contract("parameter shapes differ".into()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape() && a.data() == b.data())
    }
}

/// Dense per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub(crate) fn with_len(n: usize) -> Self {
        Grads { bufs: vec![None; n] }
    }

    pub(crate) fn buf(&mut self, id: ParamId, len: usize) -> &mut Vec<f64> {
        if id.0 >= self.bufs.len() {
            self.bufs.resize(id.0 + 1, None);
        }
        self.bufs[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.bufs.get(id.0).and_then(|b| b.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.bufs
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
    t
}

/// Glorot-uniform initialization for a `[fan_in, fan_out]` matrix.
pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], bound)
}
