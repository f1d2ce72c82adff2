use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tape::{Gradients, Tape, Var};

pub const ANCHORS: &str = "anchors";

/// Named parameter arrays in a fixed insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Array2<f64>)>,
    seed: u64,
}

/// Gradients laid out like a [`ParamStore`].
pub type ParamGrads = Vec<Array2<f64>>;

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, v)) => *v = value,
            None => self.entries.push((name, value)),
        }
    }

    /// Uniform(lo, hi) array drawn from a stream keyed by `(seed, name)`.
    pub fn insert_uniform(&mut self, name: &str, shape: (usize, usize), lo: f64, hi: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(name_stream(name));
        let value = Array2::from_shape_fn(shape, |_| rng.random_range(lo..hi));
        self.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.entries.iter_mut().map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|(_, v)| v.dim()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Records every array on the tape as a trainable leaf.
    pub fn record(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.entries
                .iter()
                .map(|(n, v)| (n.clone(), tape.param(v.clone())))
                .collect(),
        )
    }

    /// Records every array as a constant (inference).
    pub fn record_frozen(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.entries
                .iter()
                .map(|(n, v)| (n.clone(), tape.constant(v.clone())))
                .collect(),
        )
    }

    pub fn zeros_like(&self) -> ParamGrads {
        self.entries
            .iter()
            .map(|(_, v)| Array2::zeros(v.raw_dim()))
            .collect()
    }

    pub fn check_shapes(&self, grads: &[Array2<f64>]) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::shape(format!(
                "{} gradient arrays for {} parameters",
                grads.len(),
                self.entries.len()
            )));
        }
        for ((name, p), g) in self.entries.iter().zip(grads) {
            if p.dim() != g.dim() {
                return Err(Error::shape(format!(
                    "gradient for {name} is {:?}, parameter is {:?}",
                    g.dim(),
                    p.dim()
                )));
            }
        }
        Ok(())
    }
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Tape handles for the parameters of a [`ParamStore`], same order.
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<(String, Var)>);

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        self.0
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter {name} was not recorded"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Pulls gradients in store order; unreached parameters get zeros.
    pub fn collect(&self, tape: &Tape, grads: &mut Gradients) -> ParamGrads {
        self.0
            .iter()
            .map(|(_, v)| grads.take_or_zeros(*v, tape.shape(*v)))
            .collect()
    }
}
