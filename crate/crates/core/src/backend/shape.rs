//! Shape propagation: declares parameters and tallies FLOPs and storage.
//!
//! Conventions: one multiply-accumulate is one FLOP; a binarized one counts
//! 1/64. Elementwise float work is counted too (binarize 1 per input element,
//! weight scale 1 and batch norm 2 per output, add/mul/gain 1, 2×2 pool 4,
//! bilinear 7, sigmoid/tanh/hard-swish 4, relu/clamp 1). Binarized weights
//! are stored at 1 bit, everything else at 32 bits plus a 32-bit scale per
//! binarized layer. Sparse convolutions are charged at the expected mask
//! density.

use std::collections::BTreeMap;
use std::fmt;

use crate::backend::{register_gain, Act, Backend, ConvLayer, GainInit, Part};
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Group, Init, ParamStore};
use crate::tensor::Shape;

/// Expected incoherence-mask density when profiling sparse layers.
pub const DEFAULT_MASK_DENSITY: f64 = 0.5;

pub struct ShapeBackend {
    pub store: ParamStore,
    init: Init,
    part: Part,
    pub density: f64,
    flops: BTreeMap<Part, f64>,
    bytes: BTreeMap<Part, f64>,
    binary_macs: f64,
    float_macs: f64,
}

impl ShapeBackend {
    pub fn new(seed: u64, density: f64) -> Self {
        ShapeBackend {
            store: ParamStore::new(),
            init: Init::new(seed),
            part: Part::Stem,
            density,
            flops: BTreeMap::new(),
            bytes: BTreeMap::new(),
            binary_macs: 0.0,
            float_macs: 0.0,
        }
    }

    fn charge(&mut self, f: f64) {
        *self.flops.entry(self.part).or_default() += f;
    }

    fn register_conv(&mut self, l: &ConvLayer) -> Result<()> {
        if self.store.contains(&l.key("w")) {
            return Ok(());
        }
        let before = self.store.storage_bytes("");
        l.register(&mut self.store, &mut self.init)?;
        let mut added = self.store.storage_bytes("") - before;
        if l.binary {
            added += 4.0;
        }
        *self.bytes.entry(self.part).or_default() += added;
        Ok(())
    }

    fn conv_cost(&mut self, x: Shape, l: &ConvLayer, frac: f64) -> Result<Shape> {
        self.register_conv(l)?;
        let os = l.spec.check(x, l.weight_shape())?;
        let outs = os.len() as f64 * frac;
        let macs = l.spec.macs_per_pixel(l.c_in, l.c_out) as f64 * (os.n * os.plane()) as f64 * frac;
        let mut f = 0.0;
        if l.binary {
            self.binary_macs += macs;
            f += macs / 64.0 + x.len() as f64 + outs;
        } else {
            self.float_macs += macs;
            f += macs;
        }
        if l.bn {
            f += 2.0 * outs;
        } else if l.bias {
            f += outs;
        }
        self.charge(f);
        Ok(os)
    }

    pub fn profile(&self, input: Shape) -> Profile {
        Profile {
            input,
            flops: self.flops.clone(),
            bytes: self.bytes.clone(),
            binary_macs: self.binary_macs,
            float_macs: self.float_macs,
            density: self.density,
        }
    }
}

/// FLOP and storage totals per network part.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub input: Shape,
    pub flops: BTreeMap<Part, f64>,
    pub bytes: BTreeMap<Part, f64>,
    pub binary_macs: f64,
    pub float_macs: f64,
    pub density: f64,
}

impl Profile {
    pub fn total_flops(&self) -> f64 {
        self.flops.values().sum()
    }

    pub fn total_bytes(&self) -> f64 {
        self.bytes.values().sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops() / 1e9
    }

    /// Storage in MiB.
    pub fn params_mb(&self) -> f64 {
        self.total_bytes() / (1024.0 * 1024.0)
    }

    pub fn flop_share(&self, p: Part) -> f64 {
        self.flops.get(&p).copied().unwrap_or(0.0) / self.total_flops().max(f64::MIN_POSITIVE)
    }

    pub fn byte_share(&self, p: Part) -> f64 {
        self.bytes.get(&p).copied().unwrap_or(0.0) / self.total_bytes().max(f64::MIN_POSITIVE)
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "# input {}x{}; 1 MAC = 1 FLOP, binarized MAC = 1/64 FLOP, elementwise float ops counted; \
             params 1 bit binarized / 32 bit otherwise, MB = 2^20 bytes; sparse layers at mask density {:.2}",
            self.input.h, self.input.w, self.density
        )?;
        writeln!(f, "{:<10} {:>12} {:>8} {:>12} {:>8}", "part", "GFLOPs", "share", "params MB", "share")?;
        for p in Part::ALL {
            writeln!(
                f,
                "{:<10} {:>12.4} {:>7.1}% {:>12.4} {:>7.1}%",
                p.name(),
                self.flops.get(&p).copied().unwrap_or(0.0) / 1e9,
                100.0 * self.flop_share(p),
                self.bytes.get(&p).copied().unwrap_or(0.0) / (1024.0 * 1024.0),
                100.0 * self.byte_share(p)
            )?;
        }
        write!(f, "{:<10} {:>12.4} {:>8} {:>12.4}", "total", self.gflops(), "", self.params_mb())
    }
}

impl Backend for ShapeBackend {
    type T = Shape;
    type M = (Shape, f64);

    fn shape(&self, x: &Shape) -> Shape {
        *x
    }

    fn enter(&mut self, part: Part) {
        self.part = part;
    }

    fn conv(&mut self, x: &Shape, l: &ConvLayer) -> Result<Shape> {
        self.conv_cost(*x, l, 1.0)
    }

    fn sparse_conv(&mut self, x: &Shape, l: &ConvLayer, m: &(Shape, f64)) -> Result<Shape> {
        let os = self.conv_cost(*x, l, m.1)?;
        if (m.0.n, m.0.h, m.0.w) != (os.n, os.h, os.w) {
            return Err(Error::Shape(format!("mask {} does not match {os}", m.0)));
        }
        Ok(os)
    }

    fn gain(&mut self, x: &Shape, name: &str, init: GainInit, group: Group) -> Result<Shape> {
        if !self.store.contains(name) {
            register_gain(&mut self.store, &mut self.init, name, init, group)?;
            *self.bytes.entry(self.part).or_default() += 4.0;
        }
        self.charge(x.len() as f64);
        Ok(*x)
    }

    fn add(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        let s = ops::broadcast_shape(*a, *b)?;
        self.charge(s.len() as f64);
        Ok(s)
    }

    fn sub(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        self.add(a, b)
    }

    fn mul(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        self.add(a, b)
    }

    fn affine(&mut self, x: &Shape, _k: f64, _b: f64) -> Shape {
        self.charge(2.0 * x.len() as f64);
        *x
    }

    fn act(&mut self, x: &Shape, a: Act) -> Shape {
        let per = match a {
            Act::Relu | Act::Clamp01 => 1.0,
            _ => 4.0,
        };
        self.charge(per * x.len() as f64);
        *x
    }

    fn map_channels(&mut self, x: &Shape, c_out: usize) -> Result<Shape> {
        ops::check_channel_map(x.c, c_out)?;
        if c_out < x.c {
            self.charge(x.len() as f64);
        }
        Ok(x.with_c(c_out))
    }

    fn avg_pool2(&mut self, x: &Shape) -> Result<Shape> {
        if x.h % 2 != 0 || x.w % 2 != 0 {
            return Err(Error::Shape(format!("2x2 pooling needs even sizes, got {x}")));
        }
        let os = x.with_hw(x.h / 2, x.w / 2);
        self.charge(4.0 * os.len() as f64);
        Ok(os)
    }

    fn resize(&mut self, x: &Shape, h: usize, w: usize) -> Shape {
        let os = x.with_hw(h, w);
        self.charge(7.0 * os.len() as f64);
        os
    }

    fn global_avg_pool(&mut self, x: &Shape) -> Shape {
        self.charge(x.len() as f64);
        x.with_hw(1, 1)
    }

    fn concat(&mut self, parts: &[Shape]) -> Result<Shape> {
        let first = parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?;
        let mut c = 0;
        for p in parts {
            if (p.n, p.h, p.w) != (first.n, first.h, first.w) {
                return Err(Error::Shape(format!("concat mismatch {p} vs {first}")));
            }
            c += p.c;
        }
        Ok(first.with_c(c))
    }

    fn slice_channels(&mut self, x: &Shape, start: usize, len: usize) -> Result<Shape> {
        if start + len > x.c {
            return Err(Error::Shape(format!("channel slice {start}+{len} out of {}", x.c)));
        }
        Ok(x.with_c(len))
    }

    fn slice_batch(&mut self, x: &Shape, start: usize, len: usize) -> Result<Shape> {
        if start + len > x.n {
            return Err(Error::Shape(format!("batch slice {start}+{len} out of {}", x.n)));
        }
        Ok(x.with_n(len))
    }

    fn concat_batch(&mut self, parts: &[Shape]) -> Result<Shape> {
        let first = parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?;
        Ok(first.with_n(parts.iter().map(|p| p.n).sum()))
    }

    fn incoherence_mask(&mut self, f: &Shape) -> Result<(Shape, f64)> {
        // pool, resize back, |difference|, channel mean, compare
        let pooled = (f.len() / 4) as f64;
        self.charge(4.0 * pooled + 7.0 * f.len() as f64 + 3.0 * f.len() as f64 + (f.n * f.plane()) as f64);
        Ok((f.with_c(1), self.density))
    }

    fn full_mask(&mut self, f: &Shape) -> (Shape, f64) {
        (f.with_c(1), 1.0)
    }

    fn upsample_mask(&mut self, m: &(Shape, f64), k: usize) -> Result<(Shape, f64)> {
        let os = m.0.with_hw(m.0.h * k, m.0.w * k);
        self.charge(8.0 * os.len() as f64);
        Ok((os, m.1))
    }
}
