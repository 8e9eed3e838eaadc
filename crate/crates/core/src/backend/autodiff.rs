//! Training backend recording onto an f64 tape.
//!
//! Binarized layers compute `sign(pad0(x) − τ)` and `s·sign(w)` with
//! straight-through gradients. In float mode both are the identity, which
//! keeps the network differentiable for finite-difference checks.

use std::collections::HashMap;

use crate::backend::{Act, Backend, ConvLayer, GainInit, Part};
use crate::binarize::BN_EPS;
use crate::error::{Error, Result};
use crate::params::{Group, ParamStore};
use crate::shb::{self, ThresholdChoice};
use crate::tape::{BnStats, Tape, Var};
use crate::tensor::{BinaryMap, Shape};

/// How the incoherence threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauMode {
    Frozen(f64),
    /// Entropy search over the residual quantiles of the current batch.
    Optimize,
}

pub struct TapeBackend<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: HashMap<String, Var>,
    /// Parameters become gradient leaves (otherwise constants).
    pub trainable: bool,
    /// Identity in place of sign binarization.
    pub float_mode: bool,
    /// Batch statistics in batch norm (otherwise running statistics).
    pub bn_train: bool,
    pub tau_mode: TauMode,
    /// Batch statistics per batch-norm layer, in call order.
    pub bn_stats: Vec<(String, BnStats)>,
    /// Thresholds picked in [`TauMode::Optimize`].
    pub tau_used: Vec<ThresholdChoice>,
    part: Part,
}

impl<'a> TapeBackend<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        TapeBackend {
            tape: Tape::new(),
            store,
            vars: HashMap::new(),
            trainable: true,
            float_mode: false,
            bn_train: true,
            tau_mode: TauMode::Optimize,
            bn_stats: Vec::new(),
            tau_used: Vec::new(),
            part: Part::Stem,
        }
    }

    pub fn float_mode(mut self, on: bool) -> Self {
        self.float_mode = on;
        self
    }

    pub fn trainable(mut self, on: bool) -> Self {
        self.trainable = on;
        self
    }

    pub fn bn_train(mut self, on: bool) -> Self {
        self.bn_train = on;
        self
    }

    pub fn tau_mode(mut self, m: TauMode) -> Self {
        self.tau_mode = m;
        self
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// The tape variable bound to a stored parameter.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let p = self.store.get(name)?;
        let v = if self.trainable && p.kind.trainable() {
            self.tape.leaf(p.data.clone(), p.shape)
        } else {
            self.tape.constant(p.data.clone(), p.shape)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters touched so far with their tape variables.
    pub fn param_vars(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(k, &v)| (k, v))
    }

    pub fn input(&mut self, data: Vec<f64>, shape: Shape) -> Var {
        self.tape.constant(data, shape)
    }

    pub fn mask_var(&mut self, m: &BinaryMap) -> Var {
        self.tape.constant(m.bits.iter().map(|&b| b as f64).collect(), Shape::new(m.n, 1, m.h, m.w))
    }

    fn batch_norm(&mut self, y: Var, l: &ConvLayer) -> Result<Var> {
        let gamma = self.param(&l.key("bn.gamma"))?;
        let beta = self.param(&l.key("bn.beta"))?;
        if self.bn_train && self.tape.shape(y).n * self.tape.shape(y).plane() > 1 {
            let (o, st) = self.tape.batch_norm_train(y, gamma, beta)?;
            self.bn_stats.push((l.name.clone(), st));
            return Ok(o);
        }
        let p = self.store.get(&l.key("bn.var"))?;
        let inv = self.tape.constant(p.data.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(), p.shape);
        let mean = self.store.get(&l.key("bn.mean"))?;
        let mean = self.tape.constant(mean.data.clone(), mean.shape);
        let k = self.tape.mul(gamma, inv)?;
        let centered = self.tape.sub(y, mean)?;
        let scaled = self.tape.mul(centered, k)?;
        self.tape.add(scaled, beta)
    }
}

impl Backend for TapeBackend<'_> {
    type T = Var;
    type M = BinaryMap;

    fn shape(&self, x: &Var) -> Shape {
        self.tape.shape(*x)
    }

    fn enter(&mut self, part: Part) {
        self.part = part;
    }

    fn conv(&mut self, x: &Var, l: &ConvLayer) -> Result<Var> {
        let w = self.param(&l.key("w"))?;
        let mut y = if l.binary {
            let xp = if l.spec.padding > 0 { self.tape.pad_zero(*x, l.spec.padding) } else { *x };
            let tau = self.param(&l.key("tau"))?;
            let shifted = self.tape.sub(xp, tau)?;
            let (a, wb) = if self.float_mode {
                (shifted, w)
            } else {
                (self.tape.sign_ste(shifted), self.tape.binarize_weight(w))
            };
            let spec = crate::kernels::ConvSpec { padding: 0, ..l.spec };
            self.tape.conv2d(a, wb, spec)?
        } else {
            self.tape.conv2d(*x, w, l.spec)?
        };
        if l.bn {
            y = self.batch_norm(y, l)?;
        }
        if l.bias {
            let b = self.param(&l.key("b"))?;
            y = self.tape.add(y, b)?;
        }
        Ok(y)
    }

    fn sparse_conv(&mut self, x: &Var, l: &ConvLayer, m: &BinaryMap) -> Result<Var> {
        let y = self.conv(x, l)?;
        let s = self.tape.shape(y);
        if (m.n, m.h, m.w) != (s.n, s.h, s.w) {
            return Err(Error::Shape(format!("mask ({}, {}, {}) does not match {s}", m.n, m.h, m.w)));
        }
        let mv = self.mask_var(m);
        self.tape.mul(y, mv)
    }

    fn gain(&mut self, x: &Var, name: &str, _init: GainInit, _group: Group) -> Result<Var> {
        let g = self.param(name)?;
        self.tape.mul(*x, g)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.sub(*a, *b)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.mul(*a, *b)
    }

    fn affine(&mut self, x: &Var, k: f64, b: f64) -> Var {
        self.tape.affine(*x, k, b)
    }

    fn act(&mut self, x: &Var, a: Act) -> Var {
        match a {
            Act::Relu => self.tape.relu(*x),
            Act::Sigmoid => self.tape.sigmoid(*x),
            Act::Tanh => self.tape.tanh(*x),
            Act::HardSwish => self.tape.hardswish(*x),
            Act::HardSigmoid => self.tape.hardsigmoid(*x),
            Act::Clamp01 => self.tape.clamp01(*x),
        }
    }

    fn map_channels(&mut self, x: &Var, c_out: usize) -> Result<Var> {
        self.tape.map_channels(*x, c_out)
    }

    fn avg_pool2(&mut self, x: &Var) -> Result<Var> {
        self.tape.avg_pool2(*x)
    }

    fn resize(&mut self, x: &Var, h: usize, w: usize) -> Var {
        self.tape.resize_bilinear(*x, h, w)
    }

    fn global_avg_pool(&mut self, x: &Var) -> Var {
        self.tape.global_avg_pool(*x)
    }

    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.tape.concat_channels(parts)
    }

    fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        self.tape.slice_channels(*x, start, len)
    }

    fn slice_batch(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        self.tape.slice_batch(*x, start, len)
    }

    fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        self.tape.concat_batch(parts)
    }

    fn incoherence_mask(&mut self, f: &Var) -> Result<BinaryMap> {
        let s = self.tape.shape(*f);
        let vals = self.tape.value(*f);
        let tau = match self.tau_mode {
            TauMode::Frozen(t) => t,
            TauMode::Optimize => {
                let c = shb::optimize_threshold_auto(vals, s)?;
                self.tau_used.push(c);
                c.tau
            }
        };
        Ok(shb::mask_from_residual(&shb::residual(vals, s), s.n, s.h, s.w, tau))
    }

    fn full_mask(&mut self, f: &Var) -> BinaryMap {
        let s = self.tape.shape(*f);
        BinaryMap::filled(s.n, s.h, s.w, true)
    }

    fn upsample_mask(&mut self, m: &BinaryMap, k: usize) -> Result<BinaryMap> {
        shb::upsample_mask(m, k)
    }
}
