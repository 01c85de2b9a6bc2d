//! Ordered, named parameter storage shared by the networks.
//!
//! Parameters live outside any tape as plain arrays; each forward pass binds
//! them onto the active tape (trainable or frozen). Insertion order is the
//! canonical order for optimizer state and checkpoints.

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| n == &name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, ArrayD<f64>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Vec<(String, ArrayD<f64>)> {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Bind all parameters onto `tape` in canonical order.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|(_, v)| if trainable { tape.param(v.clone()) } else { tape.leaf(v.clone()) })
            .collect()
    }

    /// Order-sensitive content hash; used to assert that an update touched
    /// (or spared) a parameter set.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, v) in &self.entries {
            for b in name.bytes() {
                eat(b);
            }
            for x in v.iter() {
                for b in x.to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

/// He-style normal initialization for convolutions followed by a leaky
/// rectifier: std = sqrt(2 / ((1 + slope^2) * fan_in)).
pub fn he_normal(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize, slope: f64) -> ArrayD<f64> {
    let std = (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    let normal = StandardNormal;
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = normal.sample(rng);
        z * std
    })
}

pub fn normal_init(rng: &mut ChaCha20Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let normal = StandardNormal;
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = normal.sample(rng);
        z * std
    })
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}

pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
