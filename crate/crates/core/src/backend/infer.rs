//! Packed-bit inference over f32 tensors.

use std::collections::HashMap;

use crate::backend::{Act, Backend, ConvLayer, GainInit, Part};
use crate::bits::{pack, BitTensor};
use crate::error::{Error, Result};
use crate::kernels::{bconv2d_counted, conv2d_f32, sparse_bconv2d, OpCounter};
use crate::ops;
use crate::params::{Group, ParamStore};
use crate::shb;
use crate::tensor::{BinaryMap, DenseTensor, Shape};

/// Name of the frozen mask threshold in a parameter store.
pub const TAU_STAR: &str = "dec.tau_star";

enum Weights {
    Binary { w: BitTensor, s: f32, tau: f32 },
    Float { w: DenseTensor },
}

/// A layer ready for inference: packed or dense weights plus folded affine.
pub struct PreparedConv {
    layer: ConvLayer,
    weights: Weights,
    /// Per-channel `scale·x + shift` from batch norm and bias.
    scale: Vec<f32>,
    shift: Vec<f32>,
}

impl PreparedConv {
    pub fn new(store: &ParamStore, l: &ConvLayer) -> Result<Self> {
        let w = store.tensor(&l.key("w"))?;
        if w.shape() != l.weight_shape() {
            return Err(Error::Shape(format!("`{}` weight {} expected {}", l.name, w.shape(), l.weight_shape())));
        }
        let weights = if l.binary {
            let s = w.data().iter().map(|v| v.abs() as f64).sum::<f64>() / w.len().max(1) as f64;
            Weights::Binary { w: pack(&w, 0.0)?, s: s as f32, tau: store.scalar(&l.key("tau"))? as f32 }
        } else {
            Weights::Float { w }
        };
        let (mut scale, mut shift) =
            if l.bn { store.batch_norm(&l.name)?.fold() } else { (vec![1.0; l.c_out], vec![0.0; l.c_out]) };
        if l.bias {
            let b = store.get(&l.key("b"))?;
            for (sh, &bv) in shift.iter_mut().zip(&b.data) {
                *sh += bv as f32;
            }
        }
        scale.truncate(l.c_out);
        shift.truncate(l.c_out);
        Ok(PreparedConv { layer: l.clone(), weights, scale, shift })
    }

    pub fn layer(&self) -> &ConvLayer {
        &self.layer
    }

    fn raw(&self, x: &DenseTensor, counter: &OpCounter) -> Result<DenseTensor> {
        match &self.weights {
            Weights::Binary { w, s, tau } => bconv2d_counted(&pack(x, *tau)?, w, *s, &self.layer.spec, counter),
            Weights::Float { w } => {
                let o = conv2d_f32(x, w, None, &self.layer.spec)?;
                counter.add(self.layer.spec.macs_per_pixel(self.layer.c_in, self.layer.c_out) * o.shape().n as u64 * o.shape().plane() as u64);
                Ok(o)
            }
        }
    }

    fn affine_at(&self, o: &mut DenseTensor, keep: impl Fn(usize, usize, usize) -> bool) {
        let s = o.shape();
        let data = o.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                let (a, b) = (self.scale[c], self.shift[c]);
                for y in 0..s.h {
                    for x in 0..s.w {
                        if keep(n, y, x) {
                            let i = s.index(n, c, y, x);
                            data[i] = a * data[i] + b;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &DenseTensor, counter: &OpCounter) -> Result<DenseTensor> {
        let mut o = self.raw(x, counter)?;
        self.affine_at(&mut o, |_, _, _| true);
        Ok(o)
    }

    /// Output only at mask-active pixels (affine applied there too), zero elsewhere.
    pub fn forward_sparse(&self, x: &DenseTensor, mask: &BinaryMap, counter: &OpCounter) -> Result<DenseTensor> {
        let mut o = match &self.weights {
            Weights::Binary { w, s, tau } => sparse_bconv2d(&pack(x, *tau)?, w, *s, &self.layer.spec, mask, counter)?,
            Weights::Float { .. } => {
                let mut o = self.raw(x, counter)?;
                let s = o.shape();
                check_mask(mask, s)?;
                let data = o.data_mut();
                for n in 0..s.n {
                    for c in 0..s.c {
                        for i in 0..s.plane() {
                            if mask.bits[n * s.plane() + i] == 0 {
                                data[s.index(n, c, 0, 0) + i] = 0.0;
                            }
                        }
                    }
                }
                o
            }
        };
        self.affine_at(&mut o, |n, y, x| mask.get(n, y, x));
        Ok(o)
    }
}

fn check_mask(m: &BinaryMap, s: Shape) -> Result<()> {
    if m.n != s.n || m.h != s.h || m.w != s.w {
        return Err(Error::Shape(format!("mask ({}, {}, {}) does not match {s}", m.n, m.h, m.w)));
    }
    Ok(())
}

pub fn apply_act(v: f32, a: Act) -> f32 {
    match a {
        Act::Relu => v.max(0.0),
        Act::Sigmoid => ops::sigmoid(v),
        Act::Tanh => v.tanh(),
        Act::HardSwish => v * ops::hardsigmoid(v),
        Act::HardSigmoid => ops::hardsigmoid(v),
        Act::Clamp01 => v.clamp(0.0, 1.0),
    }
}

/// Inference backend over a parameter store.
pub struct InferBackend<'a> {
    store: &'a ParamStore,
    cache: HashMap<String, PreparedConv>,
    /// Mask threshold.
    pub tau: f64,
    /// Multiply-accumulates performed by binarized convolutions.
    pub binary_macs: OpCounter,
    /// Multiply-accumulates performed by full-precision convolutions.
    pub float_macs: OpCounter,
    /// Multiply-accumulates of the sparse convolutions alone.
    pub sparse_macs: OpCounter,
    part: Part,
}

impl<'a> InferBackend<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        let tau = store.scalar(TAU_STAR).unwrap_or(0.0);
        InferBackend {
            store,
            cache: HashMap::new(),
            tau,
            binary_macs: OpCounter::new(),
            float_macs: OpCounter::new(),
            sparse_macs: OpCounter::new(),
            part: Part::Stem,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn part(&self) -> Part {
        self.part
    }

    fn prepared(&mut self, l: &ConvLayer) -> Result<&PreparedConv> {
        if !self.cache.contains_key(&l.name) {
            let p = PreparedConv::new(self.store, l)?;
            self.cache.insert(l.name.clone(), p);
        }
        let p = &self.cache[&l.name];
        if p.layer != *l {
            return Err(Error::Invalid(format!("layer `{}` redeclared with a different shape", l.name)));
        }
        Ok(p)
    }

    fn zip(&self, a: &DenseTensor, b: &DenseTensor, f: impl Fn(f32, f32) -> f32) -> Result<DenseTensor> {
        let (v, s) = ops::broadcast_zip(a.data(), a.shape(), b.data(), b.shape(), f)?;
        DenseTensor::from_vec(s, v)
    }
}

impl Backend for InferBackend<'_> {
    type T = DenseTensor;
    type M = BinaryMap;

    fn shape(&self, x: &DenseTensor) -> Shape {
        x.shape()
    }

    fn enter(&mut self, part: Part) {
        self.part = part;
    }

    fn conv(&mut self, x: &DenseTensor, l: &ConvLayer) -> Result<DenseTensor> {
        let counter = OpCounter::new();
        let o = self.prepared(l)?.forward(x, &counter)?;
        if l.binary { &self.binary_macs } else { &self.float_macs }.add(counter.get());
        Ok(o)
    }

    fn sparse_conv(&mut self, x: &DenseTensor, l: &ConvLayer, m: &BinaryMap) -> Result<DenseTensor> {
        let counter = OpCounter::new();
        let o = self.prepared(l)?.forward_sparse(x, m, &counter)?;
        if l.binary { &self.binary_macs } else { &self.float_macs }.add(counter.get());
        self.sparse_macs.add(counter.get());
        Ok(o)
    }

    fn gain(&mut self, x: &DenseTensor, name: &str, _init: GainInit, _group: Group) -> Result<DenseTensor> {
        let g = self.store.scalar(name)? as f32;
        Ok(x.map(|v| g * v))
    }

    fn add(&mut self, a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
        self.zip(a, b, |x, y| x + y)
    }

    fn sub(&mut self, a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
        self.zip(a, b, |x, y| x - y)
    }

    fn mul(&mut self, a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
        self.zip(a, b, |x, y| x * y)
    }

    fn affine(&mut self, x: &DenseTensor, k: f64, b: f64) -> DenseTensor {
        let (k, b) = (k as f32, b as f32);
        x.map(|v| k * v + b)
    }

    fn act(&mut self, x: &DenseTensor, a: Act) -> DenseTensor {
        x.map(|v| apply_act(v, a))
    }

    fn map_channels(&mut self, x: &DenseTensor, c_out: usize) -> Result<DenseTensor> {
        let (v, s) = ops::map_channels(x.data(), x.shape(), c_out)?;
        DenseTensor::from_vec(s, v)
    }

    fn avg_pool2(&mut self, x: &DenseTensor) -> Result<DenseTensor> {
        let (v, s) = ops::avg_pool2(x.data(), x.shape())?;
        DenseTensor::from_vec(s, v)
    }

    fn resize(&mut self, x: &DenseTensor, h: usize, w: usize) -> DenseTensor {
        let (v, s) = ops::resize_bilinear(x.data(), x.shape(), h, w);
        DenseTensor::from_vec(s, v).expect("resize output length")
    }

    fn global_avg_pool(&mut self, x: &DenseTensor) -> DenseTensor {
        let (v, s) = ops::global_avg_pool(x.data(), x.shape());
        DenseTensor::from_vec(s, v).expect("pool output length")
    }

    fn concat(&mut self, parts: &[DenseTensor]) -> Result<DenseTensor> {
        DenseTensor::concat_channels(&parts.iter().collect::<Vec<_>>())
    }

    fn slice_channels(&mut self, x: &DenseTensor, start: usize, len: usize) -> Result<DenseTensor> {
        x.slice_channels(start, len)
    }

    fn slice_batch(&mut self, x: &DenseTensor, start: usize, len: usize) -> Result<DenseTensor> {
        x.slice_batch(start, len)
    }

    fn concat_batch(&mut self, parts: &[DenseTensor]) -> Result<DenseTensor> {
        DenseTensor::concat_batch(&parts.iter().collect::<Vec<_>>())
    }

    fn incoherence_mask(&mut self, f: &DenseTensor) -> Result<BinaryMap> {
        let s = f.shape();
        Ok(shb::mask_from_residual(&shb::residual(f.data(), s), s.n, s.h, s.w, self.tau))
    }

    fn full_mask(&mut self, f: &DenseTensor) -> BinaryMap {
        let s = f.shape();
        BinaryMap::filled(s.n, s.h, s.w, true)
    }

    fn upsample_mask(&mut self, m: &BinaryMap, k: usize) -> Result<BinaryMap> {
        shb::upsample_mask(m, k)
    }
}
