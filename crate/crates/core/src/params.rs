//! Named parameter storage shared by every execution path.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::binarize::BatchNorm;
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    BinaryWeight,
    FpWeight,
    Bias,
    Threshold,
    Gain,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
    /// Non-trainable scalar state (e.g. the frozen mask threshold).
    Stat,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnMean | ParamKind::BnVar | ParamKind::Stat)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        use ParamKind::*;
        [BinaryWeight, FpWeight, Bias, Threshold, Gain, BnGamma, BnBeta, BnMean, BnVar, Stat].get(c as usize).copied()
    }

    /// Stored bits per element at inference.
    pub fn bits(self) -> u64 {
        match self {
            ParamKind::BinaryWeight => 1,
            _ => 32,
        }
    }
}

/// Optimizer group (learning-rate class).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Backbone,
    Decoder,
    Other,
}

impl Group {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [Group::Backbone, Group::Decoder, Group::Other].get(c as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Shape,
    pub data: Vec<f64>,
    pub kind: ParamKind,
    pub group: Group,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, p: Param) -> Result<()> {
        let name = name.into();
        if p.data.len() != p.shape.len() {
            return Err(Error::Shape(format!("parameter `{name}` data does not match {}", p.shape)));
        }
        if self.params.insert(name.clone(), p).is_some() {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.get(name)?.data[0])
    }

    pub fn set_scalar(&mut self, name: &str, v: f64) -> Result<()> {
        self.get_mut(name)?.data[0] = v;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Result<DenseTensor> {
        let p = self.get(name)?;
        DenseTensor::from_vec(p.shape, p.data.iter().map(|&v| v as f32).collect())
    }

    pub fn batch_norm(&self, prefix: &str) -> Result<BatchNorm> {
        let f = |s: &str| -> Result<Vec<f32>> {
            Ok(self.get(&format!("{prefix}.bn.{s}"))?.data.iter().map(|&v| v as f32).collect())
        };
        Ok(BatchNorm { gamma: f("gamma")?, beta: f("beta")?, mean: f("mean")?, var: f("var")? })
    }

    /// Parameter values of the given kinds whose name starts with `prefix`.
    pub fn select<'a>(&'a self, prefix: &'a str, kinds: &'a [ParamKind]) -> impl Iterator<Item = (&'a String, &'a Param)> + 'a {
        self.params.iter().filter(move |(n, p)| n.starts_with(prefix) && kinds.contains(&p.kind))
    }

    pub fn count_elements(&self, prefix: &str) -> u64 {
        self.params.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, p)| p.data.len() as u64).sum()
    }

    /// Inference storage in bytes for parameters under `prefix`.
    pub fn storage_bytes(&self, prefix: &str) -> f64 {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| (p.data.len() as u64 * p.kind.bits()) as f64 / 8.0)
            .sum()
    }
}

/// Seeded parameter initializer.
pub struct Init {
    pub rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
    }

    /// `r·1e−3` with `r ~ U(0, 1)`.
    pub fn small_gain(&mut self) -> f64 {
        self.rng.gen_range(0.0..1.0) * 1e-3
    }
}
