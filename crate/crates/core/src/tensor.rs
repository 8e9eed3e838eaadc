//! Dense NCHW tensors.

use crate::error::{Error, Result};

/// Logical NCHW extent shared by dense and packed tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape { n, ..self }
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major NCHW f32 tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl DenseTensor {
    pub fn zeros(shape: Shape) -> Self {
        DenseTensor { shape, data: vec![0.0; shape.len()], grad: None }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        DenseTensor { shape, data: vec![value; shape.len()], grad: None }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(DenseTensor { shape, data, grad: None })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        DenseTensor { shape, data, grad: None }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Allocates (or clears) the gradient buffer.
    pub fn zero_grad(&mut self) {
        self.grad = Some(vec![0.0; self.data.len()]);
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f32]> {
        self.grad.as_deref_mut()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match shape {}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        DenseTensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Channel range `[start, start + len)` of every batch item.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if start + len > s.c {
            return Err(Error::Shape(format!("channel slice {start}+{len} out of {}", s.c)));
        }
        let out_shape = s.with_c(len);
        let plane = s.plane();
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(DenseTensor { shape: out_shape, data, grad: None })
    }

    /// Batch range `[start, start + len)`.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if start + len > s.n {
            return Err(Error::Shape(format!("batch slice {start}+{len} out of {}", s.n)));
        }
        let item = s.item();
        Ok(DenseTensor {
            shape: s.with_n(len),
            data: self.data[start * item..(start + len) * item].to_vec(),
            grad: None,
        })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&DenseTensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?.shape;
        let mut c = 0;
        for p in parts {
            let s = p.shape;
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(Error::Shape(format!("concat mismatch {s} vs {first}")));
            }
            c += s.c;
        }
        let out_shape = first.with_c(c);
        let mut data = Vec::with_capacity(out_shape.len());
        for n in 0..first.n {
            for p in parts {
                let item = p.shape.item();
                data.extend_from_slice(&p.data[n * item..(n + 1) * item]);
            }
        }
        Ok(DenseTensor { shape: out_shape, data, grad: None })
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(parts: &[&DenseTensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.with_n(first.n) != first {
                return Err(Error::Shape(format!("batch concat mismatch {} vs {first}", p.shape)));
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(DenseTensor { shape: first.with_n(n), data, grad: None })
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }
}

/// Per-item binary spatial map (n, h, w), stored as 0/1 bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub bits: Vec<u8>,
}

impl BinaryMap {
    pub fn filled(n: usize, h: usize, w: usize, on: bool) -> Self {
        BinaryMap { n, h, w, bits: vec![on as u8; n * h * w] }
    }

    #[inline]
    pub fn get(&self, n: usize, y: usize, x: usize) -> bool {
        self.bits[(n * self.h + y) * self.w + x] != 0
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, on: bool) {
        self.bits[(n * self.h + y) * self.w + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    /// As an (n, 1, h, w) tensor of 0/1 values.
    pub fn to_dense(&self) -> DenseTensor {
        DenseTensor {
            shape: Shape::new(self.n, 1, self.h, self.w),
            data: self.bits.iter().map(|&b| b as f32).collect(),
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_row_major_nchw() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.len(), 120);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(DenseTensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = DenseTensor::zeros(Shape::new(1, 2, 2, 2));
        assert!(t.set_grad(vec![0.0; 7]).is_err());
        t.zero_grad();
        assert_eq!(t.grad().unwrap().len(), 8);
    }

    #[test]
    fn channel_concat_then_slice() {
        let a = DenseTensor::from_fn(Shape::new(2, 2, 2, 2), |n, c, y, x| (n * 100 + c * 10 + y * 2 + x) as f32);
        let b = DenseTensor::full(Shape::new(2, 1, 2, 2), -1.0);
        let cat = DenseTensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(2, 3, 2, 2));
        assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cat.slice_channels(2, 1).unwrap(), b);
    }
}
