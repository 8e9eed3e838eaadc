//! Execution backends. The network is written once against [`Backend`] and
//! run for inference (packed bits, f32), training (f64 tape), or shape-only
//! profiling and parameter declaration.

pub mod autodiff;
pub mod infer;
pub mod shape;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernels::ConvSpec;
use crate::params::{Group, Init, Param, ParamKind, ParamStore};
use crate::tensor::Shape;

pub use autodiff::{TapeBackend, TauMode};
pub use infer::InferBackend;
pub use shape::{ShapeBackend, Profile};

/// Network part for FLOP accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Stem,
    Backbone,
    Aspp,
    Decoder,
    Head,
}

impl Part {
    pub const ALL: [Part; 5] = [Part::Stem, Part::Backbone, Part::Aspp, Part::Decoder, Part::Head];

    pub fn name(self) -> &'static str {
        match self {
            Part::Stem => "stem",
            Part::Backbone => "backbone",
            Part::Aspp => "aspp",
            Part::Decoder => "decoder",
            Part::Head => "head",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Act {
    Relu,
    Sigmoid,
    Tanh,
    HardSwish,
    HardSigmoid,
    Clamp01,
}

/// Initial value of a shortcut gain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GainInit {
    One,
    /// `r·1e−3`, `r ~ U(0, 1)`.
    Small,
}

/// A convolution with optional batch norm and bias.
///
/// Parameters live in the store as `{name}.w`, `{name}.tau` (binary only),
/// `{name}.bn.{gamma,beta,mean,var}` and `{name}.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub spec: ConvSpec,
    pub binary: bool,
    pub bn: bool,
    pub bias: bool,
    pub group: Group,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, spec: ConvSpec, binary: bool, group: Group) -> Self {
        ConvLayer { name: name.into(), c_in, c_out, spec, binary, bn: true, bias: false, group }
    }

    pub fn with_bn(mut self, bn: bool) -> Self {
        self.bn = bn;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.c_out, self.c_in / self.spec.groups, self.spec.k, self.spec.k)
    }

    pub fn fan_in(&self) -> usize {
        self.c_in / self.spec.groups * self.spec.k * self.spec.k
    }

    pub fn key(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    /// Inserts freshly initialized parameters unless already present.
    pub fn register(&self, store: &mut ParamStore, init: &mut Init) -> Result<()> {
        if store.contains(&self.key("w")) {
            return Ok(());
        }
        let ws = self.weight_shape();
        let bound = 1.0 / (self.fan_in() as f64).sqrt();
        let kind = if self.binary { ParamKind::BinaryWeight } else { ParamKind::FpWeight };
        let g = self.group;
        let p = |shape: Shape, data: Vec<f64>, kind| Param { shape, data, kind, group: g };
        store.insert(self.key("w"), p(ws, init.uniform(ws.len(), bound), kind))?;
        if self.binary {
            store.insert(self.key("tau"), p(Shape::scalar(), vec![0.0], ParamKind::Threshold))?;
        }
        if self.bn {
            let cs = Shape::new(1, self.c_out, 1, 1);
            let c = self.c_out;
            store.insert(self.key("bn.gamma"), p(cs, vec![1.0; c], ParamKind::BnGamma))?;
            store.insert(self.key("bn.beta"), p(cs, vec![0.0; c], ParamKind::BnBeta))?;
            store.insert(self.key("bn.mean"), p(cs, vec![0.0; c], ParamKind::BnMean))?;
            store.insert(self.key("bn.var"), p(cs, vec![1.0; c], ParamKind::BnVar))?;
        }
        if self.bias {
            store.insert(self.key("b"), p(Shape::new(1, self.c_out, 1, 1), vec![0.0; self.c_out], ParamKind::Bias))?;
        }
        Ok(())
    }
}

/// Registers a scalar gain unless present.
pub fn register_gain(store: &mut ParamStore, init: &mut Init, name: &str, gi: GainInit, group: Group) -> Result<()> {
    if store.contains(name) {
        return Ok(());
    }
    let v = match gi {
        GainInit::One => 1.0,
        GainInit::Small => init.small_gain(),
    };
    store.insert(name, Param { shape: Shape::scalar(), data: vec![v], kind: ParamKind::Gain, group })
}

/// Operations the network is written against.
pub trait Backend {
    type T: Clone;
    /// Spatial mask representation.
    type M: Clone;

    fn shape(&self, x: &Self::T) -> Shape;
    /// Sets the part subsequent work is attributed to.
    fn enter(&mut self, part: Part);

    /// Convolution followed by batch norm and bias when the layer has them.
    fn conv(&mut self, x: &Self::T, l: &ConvLayer) -> Result<Self::T>;
    /// As [`Backend::conv`], evaluated (and nonzero) only where `m` is set.
    fn sparse_conv(&mut self, x: &Self::T, l: &ConvLayer, m: &Self::M) -> Result<Self::T>;
    /// `γ·x` for the named scalar gain.
    fn gain(&mut self, x: &Self::T, name: &str, init: GainInit, group: Group) -> Result<Self::T>;

    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    /// `k·x + b`
    fn affine(&mut self, x: &Self::T, k: f64, b: f64) -> Self::T;
    fn act(&mut self, x: &Self::T, a: Act) -> Self::T;

    fn map_channels(&mut self, x: &Self::T, c_out: usize) -> Result<Self::T>;
    fn avg_pool2(&mut self, x: &Self::T) -> Result<Self::T>;
    fn resize(&mut self, x: &Self::T, h: usize, w: usize) -> Self::T;
    fn global_avg_pool(&mut self, x: &Self::T) -> Self::T;
    fn concat(&mut self, parts: &[Self::T]) -> Result<Self::T>;
    fn slice_channels(&mut self, x: &Self::T, start: usize, len: usize) -> Result<Self::T>;
    fn slice_batch(&mut self, x: &Self::T, start: usize, len: usize) -> Result<Self::T>;
    fn concat_batch(&mut self, parts: &[Self::T]) -> Result<Self::T>;

    /// Incoherence mask of a 1/16-scale feature at this backend's threshold.
    fn incoherence_mask(&mut self, f: &Self::T) -> Result<Self::M>;
    /// All-ones mask matching `f` spatially.
    fn full_mask(&mut self, f: &Self::T) -> Self::M;
    fn upsample_mask(&mut self, m: &Self::M, k: usize) -> Result<Self::M>;
}

/// Parameter-free shortcut: optional 2×2 average pool, then channel mapping.
pub fn shortcut<B: Backend>(b: &mut B, x: &B::T, c_out: usize, down: bool) -> Result<B::T> {
    let p = if down { b.avg_pool2(x)? } else { x.clone() };
    b.map_channels(&p, c_out)
}
