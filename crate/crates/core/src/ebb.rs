//! Evolvable binarized blocks: channel-mapping shortcuts with learnable
//! layer, cross-layer and block gains.

use crate::backend::{shortcut, Backend, ConvLayer, GainInit};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::ops;
use crate::params::{Group, ParamStore};
use crate::tensor::DenseTensor;

/// Regularizer weight on the cross-layer and block gains.
pub const LAMBDA_EBB: f64 = 1e-4;

/// Gain suffixes counted by [`ebb_regularizer`].
pub const REGULARIZED_GAINS: [&str; 3] = ["gc1", "gc2", "gb"];

/// Shortcut mapping `f`: optional 2×2 average pool, then chunk-mean or repeat.
pub fn map_channels(x: &DenseTensor, c_out: usize, spatial_factor: usize) -> Result<DenseTensor> {
    let x = match spatial_factor {
        1 => x.clone(),
        2 => {
            let (v, s) = ops::avg_pool2(x.data(), x.shape())?;
            DenseTensor::from_vec(s, v)?
        }
        f => return Err(Error::Invalid(format!("spatial factor {f} must be 1 or 2"))),
    };
    let (v, s) = ops::map_channels(x.data(), x.shape(), c_out)?;
    DenseTensor::from_vec(s, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Expand,
    Retain,
    Reduce,
}

impl Variant {
    pub fn of(c_in: usize, c_out: usize) -> Variant {
        match c_out.cmp(&c_in) {
            std::cmp::Ordering::Greater => Variant::Expand,
            std::cmp::Ordering::Equal => Variant::Retain,
            std::cmp::Ordering::Less => Variant::Reduce,
        }
    }
}

/// `x' = bconv3(x) + γL2·f(x)`, `o = bconv1(x') + γL1·f(x')`.
///
/// The 3×3 keeps the input width; the 1×1 changes it.
#[derive(Clone, Debug, PartialEq)]
pub struct SubEbb {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub dilation: usize,
    pub binary: bool,
    pub group: Group,
}

impl SubEbb {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        SubEbb { name: name.into(), c_in, c_out, stride: 1, dilation: 1, binary: true, group: Group::Backbone }
    }

    pub fn strided(mut self, stride: usize, dilation: usize) -> Self {
        self.stride = stride;
        self.dilation = dilation;
        self
    }

    pub fn binary(mut self, on: bool) -> Self {
        self.binary = on;
        self
    }

    pub fn variant(&self) -> Variant {
        Variant::of(self.c_in, self.c_out)
    }

    pub fn conv3(&self) -> ConvLayer {
        let spec = ConvSpec::same(3, self.stride, self.dilation);
        ConvLayer::new(format!("{}.conv3", self.name), self.c_in, self.c_in, spec, self.binary, self.group)
    }

    pub fn conv1(&self) -> ConvLayer {
        ConvLayer::new(format!("{}.conv1", self.name), self.c_in, self.c_out, ConvSpec::new(1, 1, 0), self.binary, self.group)
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::T) -> Result<B::T> {
        ops::check_channel_map(self.c_in, self.c_out)?;
        let down = self.stride == 2;
        let h = b.conv(x, &self.conv3())?;
        let s = shortcut(b, x, self.c_in, down)?;
        let s = b.gain(&s, &format!("{}.gl2", self.name), GainInit::One, self.group)?;
        let x1 = b.add(&h, &s)?;
        let h = b.conv(&x1, &self.conv1())?;
        let s = shortcut(b, &x1, self.c_out, false)?;
        let s = b.gain(&s, &format!("{}.gl1", self.name), GainInit::One, self.group)?;
        b.add(&h, &s)
    }
}

/// Head, middle and tail sub-blocks with cross-layer and block shortcuts:
/// `o = θ↓(θ↑(x') + γC2·f(x)) + γC1·f(x') + γB·f(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ebb {
    pub name: String,
    pub head: SubEbb,
    pub mid: SubEbb,
    pub tail: SubEbb,
}

impl Ebb {
    /// `channels` are the head, middle and tail output widths; the head carries the stride.
    pub fn new(name: &str, c_in: usize, channels: [usize; 3], stride: usize, dilation: usize, binary: bool) -> Result<Self> {
        let [c1, c2, c3] = channels;
        let sub = |tag: &str, i, o| SubEbb::new(format!("{name}.{tag}"), i, o).binary(binary);
        let head = sub("head", c_in, c1).strided(stride, dilation);
        let mid = sub("mid", c1, c2).strided(1, dilation);
        let tail = sub("tail", c2, c3).strided(1, dilation);
        if head.variant() == Variant::Reduce || mid.variant() != Variant::Expand || tail.variant() != Variant::Reduce {
            return Err(Error::Config(format!(
                "block `{name}` must widen or keep, widen, then narrow; got {c_in}->{c1}->{c2}->{c3}"
            )));
        }
        for (i, o) in [(c_in, c1), (c1, c2), (c2, c3), (c_in, c2), (c1, c3), (c_in, c3)] {
            ops::check_channel_map(i, o).map_err(|e| Error::Config(format!("block `{name}`: {e}")))?;
        }
        Ok(Ebb { name: name.into(), head, mid, tail })
    }

    pub fn c_out(&self) -> usize {
        self.tail.c_out
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::T) -> Result<B::T> {
        let down = self.head.stride == 2;
        let g = self.head.group;
        let x1 = self.head.forward(b, x)?;
        let m = self.mid.forward(b, &x1)?;
        let fx = shortcut(b, x, self.mid.c_out, down)?;
        let fx = b.gain(&fx, &format!("{}.gc2", self.name), GainInit::Small, g)?;
        let t_in = b.add(&m, &fx)?;
        let t = self.tail.forward(b, &t_in)?;
        let f1 = shortcut(b, &x1, self.c_out(), false)?;
        let f1 = b.gain(&f1, &format!("{}.gc1", self.name), GainInit::Small, g)?;
        let o = b.add(&t, &f1)?;
        let fb = shortcut(b, x, self.c_out(), down)?;
        let fb = b.gain(&fb, &format!("{}.gb", self.name), GainInit::Small, g)?;
        b.add(&o, &fb)
    }
}

/// `L_EBB = Σ |γC1| + |γC2| + |γB|` over every block in the store.
pub fn ebb_regularizer(store: &ParamStore) -> f64 {
    store.iter().filter(|(n, _)| is_regularized(n)).map(|(_, p)| p.data[0].abs()).sum()
}

pub fn is_regularized(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|s| REGULARIZED_GAINS.contains(&s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn channel_map_examples() {
        let x = DenseTensor::from_fn(Shape::new(1, 4, 2, 2), |_, c, _, _| (c + 1) as f32);
        let r = map_channels(&x, 2, 1).unwrap();
        assert_eq!(r.at(0, 0, 1, 1), 2.0);
        assert_eq!(r.at(0, 1, 0, 0), 3.0);
        let x = DenseTensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, _, _| (c + 1) as f32);
        let e = map_channels(&x, 4, 1).unwrap();
        let got: Vec<f32> = (0..4).map(|c| e.at(0, c, 0, 0)).collect();
        assert_eq!(got, vec![1.0, 2.0, 1.0, 2.0]);
        assert_eq!(map_channels(&x, 2, 1).unwrap(), x);
        assert!(map_channels(&x, 3, 1).is_err());
        assert_eq!(map_channels(&x, 2, 2).unwrap().shape(), Shape::new(1, 2, 1, 1));
    }

    #[test]
    fn regularized_names() {
        assert!(is_regularized("enc.ebb1.gc1"));
        assert!(is_regularized("enc.ebb1.gb"));
        assert!(!is_regularized("enc.ebb1.head.gl1"));
    }

    #[test]
    fn block_layout_is_validated() {
        assert!(Ebb::new("b", 16, [32, 64, 32], 2, 1, true).is_ok());
        assert!(Ebb::new("b", 64, [64, 128, 64], 2, 1, true).is_ok());
        assert!(Ebb::new("b", 16, [32, 16, 32], 1, 1, true).is_err());
        assert!(Ebb::new("b", 16, [8, 16, 8], 1, 1, true).is_err());
    }
}
