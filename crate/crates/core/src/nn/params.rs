use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
    Uniform(f64),
}

impl Init {
    pub fn bound(&self) -> f64 {
        match *self {
            Init::FanIn(f) => 1.0 / (f.max(1) as f64).sqrt(),
            Init::Uniform(b) => b,
            Init::Zeros | Init::Ones => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named tensors in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub specs: Vec<ParamSpec>,
    pub tensors: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let tensors = specs
            .iter()
            .enumerate()
            .map(|(i, s)| match s.init {
                Init::Zeros => vec![0.0; s.numel()],
                Init::Ones => vec![1.0; s.numel()],
                Init::FanIn(_) | Init::Uniform(_) => {
                    let b = s.init.bound();
                    let mut rng = keyed(seed, Stream::Init, &[i as u64]);
                    (0..s.numel()).map(|_| rng.random_range(-b..b)).collect()
                }
            })
            .collect();
        ParamStore { specs: specs.to_vec(), tensors }
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn get(&self, id: usize) -> &[f64] {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.tensors[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Argument(format!(
                "{} values for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Locates flat coordinate `k` as (tensor, offset).
    pub fn locate(&self, mut k: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.len() {
                return Some((i, k));
            }
            k -= t.len();
        }
        None
    }

    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|x| x.is_finite())
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().flatten().for_each(|x| *x = *x as f32 as f64);
    }
}
