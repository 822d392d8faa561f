//! Ordered, named parameter collections shared by the denoiser, the text
//! encoder and the handle table, plus graph binding and byte serialization.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::gradcore::{Graph, NodeId, Tensor};

/// Parameter tensors in a fixed insertion order. Order is part of the
/// serialized layout, so construction code must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[self.index[name]]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    /// All tensor entries as little-endian f64 bytes in insertion order.
    /// Used for bit-exact freeze checks and checkpoint blobs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * 8);
        for t in &self.tensors {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    /// Register every tensor as a graph parameter, in order.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let mut ids = HashMap::with_capacity(self.names.len());
        for (name, tensor) in self.iter() {
            ids.insert(name.to_string(), g.param(tensor.clone()));
        }
        Bound { ids }
    }
}

/// Node ids of a bound [`ParamSet`] inside one graph.
pub struct Bound {
    ids: HashMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn ids(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(n, &i)| (n.as_str(), i))
    }
}

/// Seeded normal initialization.
pub fn normal_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    // Box-Muller keeps initialization independent of distribution-crate API
    // churn; deterministic given the stream.
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(r * theta.cos() * std);
        if data.len() < n {
            data.push(r * theta.sin() * std);
        }
    }
    Tensor::from_parts(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bytes_round_trip_order() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        p.insert("a", Tensor::new(vec![1], vec![3.0]).unwrap());
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), 24);
        // insertion order, not alphabetical
        assert_eq!(f64::from_le_bytes(bytes[0..8].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3.0);
    }

    #[test]
    fn normal_init_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = normal_init(&mut r1, vec![4, 4], 0.1);
        let b = normal_init(&mut r2, vec![4, 4], 0.1);
        assert_eq!(a, b);
    }
}
