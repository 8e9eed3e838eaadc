//! Reverse-mode autodiff over f64 NCHW tensors.
//!
//! Every op records its output value and a backward closure. Binarization
//! uses the straight-through estimator; the training backend's float mode
//! swaps it for the identity so finite differences can validate the plumbing.

use crate::binarize::{ste_pass, BN_EPS};
use crate::error::{Error, Result};
use crate::kernels::{col2im, dgemm_strided, im2col, ConvSpec};
use crate::ops;
use crate::tensor::Shape;

type Grads = [Option<Vec<f64>>];
type Backward = Box<dyn Fn(&[f64], &[Node], &mut Grads)>;

pub struct Node {
    val: Vec<f64>,
    shape: Shape,
    rg: bool,
    back: Option<Backward>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn accum(grads: &mut Grads, nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].rg {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn accum_with(grads: &mut Grads, nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].rg {
        return;
    }
    let len = nodes[id].val.len();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Batch statistics reported by [`Tape::batch_norm_train`].
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var_unbiased: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, val: Vec<f64>, shape: Shape, parents: &[Var], back: Option<Backward>) -> Var {
        debug_assert_eq!(val.len(), shape.len());
        let rg = parents.iter().any(|p| self.nodes[p.0].rg);
        let back = if rg { back } else { None };
        self.nodes.push(Node { val, shape, rg, back });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, val: Vec<f64>, shape: Shape) -> Var {
        assert_eq!(val.len(), shape.len(), "leaf value does not match {shape}");
        self.nodes.push(Node { val, shape, rg: true, back: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, val: Vec<f64>, shape: Shape) -> Var {
        assert_eq!(val.len(), shape.len(), "constant value does not match {shape}");
        self.nodes.push(Node { val, shape, rg: false, back: None });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(vec![v], Shape::scalar())
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].val
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].rg
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].val[0]
    }

    /// Detached copy.
    pub fn detach(&mut self, v: Var) -> Var {
        let (val, s) = (self.nodes[v.0].val.clone(), self.nodes[v.0].shape);
        self.constant(val, s)
    }

    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].val.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar root, got {}", self.nodes[root.0].shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                back(&g, &self.nodes, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    // ----- elementwise -----------------------------------------------------

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let s = self.shape(a);
        let val: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let back: Backward = Box::new(move |g, nodes, grads| {
            let x = &nodes[a.0].val;
            let d: Vec<f64> = g.iter().zip(x).map(|(&g, &x)| g * df(x, 0.0)).collect();
            accum(grads, nodes, a.0, d);
        });
        self.push(val, s, &[a], Some(back))
    }

    /// Unary op whose derivative is expressed through the output value.
    fn unary_out(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let s = self.shape(a);
        let val: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let out_id = self.nodes.len();
        let back: Backward = Box::new(move |g, nodes, grads| {
            let x = &nodes[a.0].val;
            let y = &nodes[out_id].val;
            let d: Vec<f64> = g.iter().zip(x).zip(y).map(|((&g, &x), &y)| g * df(x, y)).collect();
            accum(grads, nodes, a.0, d);
        });
        self.push(val, s, &[a], Some(back))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, move |x| k * x, move |_, _| k)
    }

    /// `k·a + b` with constants `k`, `b`.
    pub fn affine(&mut self, a: Var, k: f64, b: f64) -> Var {
        self.unary(a, move |x| k * x + b, move |_, _| k)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// Elementwise square root with a zero subgradient at 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary_out(a, |x| x.max(0.0).sqrt(), |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary_out(a, ops::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary_out(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn hardsigmoid(&mut self, a: Var) -> Var {
        self.unary(a, ops::hardsigmoid, |x, _| if x > -3.0 && x < 3.0 { 1.0 / 6.0 } else { 0.0 })
    }

    pub fn hardswish(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x * ops::hardsigmoid(x),
            |x, _| {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            },
        )
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.clamp(0.0, 1.0), |x, _| if x > 0.0 && x < 1.0 { 1.0 } else { 0.0 })
    }

    /// `sign(x)` (with sign(0) = +1) forward, straight-through backward in (−1, 1).
    pub fn sign_ste(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x >= 0.0 { 1.0 } else { -1.0 }, |x, _| if ste_pass(x, 0.0) { 1.0 } else { 0.0 })
    }

    /// `s·sign(w)` with `s = mean|w|` held constant in the backward pass.
    pub fn binarize_weight(&mut self, w: Var) -> Var {
        let n = self.value(w).len().max(1) as f64;
        let s = self.value(w).iter().map(|v| v.abs()).sum::<f64>() / n;
        self.unary(w, move |x| if x >= 0.0 { s } else { -s }, move |x, _| if ste_pass(x, 0.0) { s } else { 0.0 })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (val, os) = ops::broadcast_zip(self.value(a), sa, self.value(b), sb, f)?;
        let back: Backward = Box::new(move |g, nodes, grads| {
            let (va, vb) = (&nodes[a.0].val, &nodes[b.0].val);
            let mut ga = Vec::with_capacity(os.len());
            let mut gb = Vec::with_capacity(os.len());
            let mut i = 0;
            for n in 0..os.n {
                for c in 0..os.c {
                    for y in 0..os.h {
                        for x in 0..os.w {
                            let (u, v) = (va[ops::bindex(sa, n, c, y, x)], vb[ops::bindex(sb, n, c, y, x)]);
                            ga.push(g[i] * da(u, v));
                            gb.push(g[i] * db(u, v));
                            i += 1;
                        }
                    }
                }
            }
            if nodes[a.0].rg {
                accum(grads, nodes, a.0, ops::reduce_to(&ga, os, sa));
            }
            if nodes[b.0].rg {
                accum(grads, nodes, b.0, ops::reduce_to(&gb, os, sb));
            }
        });
        Ok(self.push(val, os, &[a, b], Some(back)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    // ----- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().sum();
        let back: Backward = Box::new(move |g, nodes, grads| {
            let n = nodes[a.0].val.len();
            accum(grads, nodes, a.0, vec![g[0]; n]);
        });
        self.push(vec![v], Shape::scalar(), &[a], Some(back))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-item sum, producing (n, 1, 1, 1).
    pub fn sum_per_item(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let item = s.item();
        let val: Vec<f64> = self.value(a).chunks(item.max(1)).map(|c| c.iter().sum()).collect();
        let back: Backward = Box::new(move |g, nodes, grads| {
            let d: Vec<f64> = (0..s.len()).map(|i| g[i / item]).collect();
            accum(grads, nodes, a.0, d);
        });
        self.push(val, Shape::new(s.n, 1, 1, 1), &[a], Some(back))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let (val, os) = ops::global_avg_pool(self.value(a), s);
        let back: Backward = Box::new(move |g, nodes, grads| {
            let k = 1.0 / s.plane() as f64;
            let d: Vec<f64> = (0..s.len()).map(|i| g[i / s.plane()] * k).collect();
            accum(grads, nodes, a.0, d);
        });
        self.push(val, os, &[a], Some(back))
    }

    // ----- layout ----------------------------------------------------------

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?);
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::Shape(format!("concat mismatch {s} vs {first}")));
            }
            c += s.c;
        }
        let os = first.with_c(c);
        let mut val = Vec::with_capacity(os.len());
        for n in 0..os.n {
            for &p in parts {
                let item = self.shape(p).item();
                val.extend_from_slice(&self.value(p)[n * item..(n + 1) * item]);
            }
        }
        let ps: Vec<Var> = parts.to_vec();
        let back: Backward = Box::new(move |g, nodes, grads| {
            let mut off = 0;
            for &p in &ps {
                let item = nodes[p.0].shape.item();
                if nodes[p.0].rg {
                    let mut d = Vec::with_capacity(item * os.n);
                    for n in 0..os.n {
                        d.extend_from_slice(&g[n * os.item() + off..n * os.item() + off + item]);
                    }
                    accum(grads, nodes, p.0, d);
                }
                off += item;
            }
        });
        Ok(self.push(val, os, parts, Some(back)))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s.c {
            return Err(Error::Shape(format!("channel slice {start}+{len} out of {}", s.c)));
        }
        let os = s.with_c(len);
        let mut val = Vec::with_capacity(os.len());
        for n in 0..s.n {
            val.extend_from_slice(&self.value(a)[s.index(n, start, 0, 0)..][..os.item()]);
        }
        let back: Backward = Box::new(move |g, nodes, grads| {
            accum_with(grads, nodes, a.0, |d| {
                for n in 0..s.n {
                    let dst = &mut d[s.index(n, start, 0, 0)..][..os.item()];
                    dst.iter_mut().zip(&g[n * os.item()..]).for_each(|(x, y)| *x += y);
                }
            });
        });
        Ok(self.push(val, os, &[a], Some(back)))
    }

    pub fn slice_batch(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s.n {
            return Err(Error::Shape(format!("batch slice {start}+{len} out of {}", s.n)));
        }
        let item = s.item();
        let val = self.value(a)[start * item..(start + len) * item].to_vec();
        let back: Backward = Box::new(move |g, nodes, grads| {
            accum_with(grads, nodes, a.0, |d| {
                d[start * item..(start + len) * item].iter_mut().zip(g).for_each(|(x, y)| *x += y);
            });
        });
        Ok(self.push(val, s.with_n(len), &[a], Some(back)))
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?);
        let mut n = 0;
        let mut val = Vec::new();
        for &p in parts {
            if self.shape(p).with_n(first.n) != first {
                return Err(Error::Shape(format!("batch concat mismatch {} vs {first}", self.shape(p))));
            }
            n += self.shape(p).n;
            val.extend_from_slice(self.value(p));
        }
        let ps: Vec<Var> = parts.to_vec();
        let back: Backward = Box::new(move |g, nodes, grads| {
            let mut off = 0;
            for &p in &ps {
                let len = nodes[p.0].val.len();
                accum(grads, nodes, p.0, g[off..off + len].to_vec());
                off += len;
            }
        });
        Ok(self.push(val, first.with_n(n), parts, Some(back)))
    }

    /// Keeps the top-left `h×w` window.
    pub fn crop(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(a);
        if h > s.h || w > s.w {
            return Err(Error::Shape(format!("crop {h}x{w} larger than {s}")));
        }
        if (h, w) == (s.h, s.w) {
            return Ok(a);
        }
        let os = s.with_hw(h, w);
        let mut val = Vec::with_capacity(os.len());
        for p in 0..s.n * s.c {
            for y in 0..h {
                val.extend_from_slice(&self.value(a)[p * s.plane() + y * s.w..][..w]);
            }
        }
        let back: Backward = Box::new(move |g, nodes, grads| {
            accum_with(grads, nodes, a.0, |d| {
                let mut i = 0;
                for p in 0..s.n * s.c {
                    for y in 0..h {
                        for x in 0..w {
                            d[p * s.plane() + y * s.w + x] += g[i];
                            i += 1;
                        }
                    }
                }
            });
        });
        Ok(self.push(val, os, &[a], Some(back)))
    }

    /// Spatial padding; `reflect` mirrors without repeating the edge, folding
    /// as often as needed for small inputs.
    fn pad_impl(&mut self, a: Var, p: usize, reflect: bool) -> Var {
        let s = self.shape(a);
        let os = s.with_hw(s.h + 2 * p, s.w + 2 * p);
        let fold = move |i: isize, n: usize| -> Option<usize> {
            if i >= 0 && (i as usize) < n {
                return Some(i as usize);
            }
            if !reflect {
                return None;
            }
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (n as isize - 1);
            let m = i.rem_euclid(period);
            Some(if m < n as isize { m as usize } else { (period - m) as usize })
        };
        let map: Vec<Option<usize>> = (0..os.plane())
            .map(|i| {
                let (y, x) = ((i / os.w) as isize - p as isize, (i % os.w) as isize - p as isize);
                match (fold(y, s.h), fold(x, s.w)) {
                    (Some(y), Some(x)) => Some(y * s.w + x),
                    _ => None,
                }
            })
            .collect();
        let mut val = vec![0.0; os.len()];
        for q in 0..s.n * s.c {
            let src = &self.value(a)[q * s.plane()..(q + 1) * s.plane()];
            for (i, m) in map.iter().enumerate() {
                if let Some(j) = m {
                    val[q * os.plane() + i] = src[*j];
                }
            }
        }
        let back: Backward = Box::new(move |g, nodes, grads| {
            accum_with(grads, nodes, a.0, |d| {
                for q in 0..s.n * s.c {
                    for (i, m) in map.iter().enumerate() {
                        if let Some(j) = m {
                            d[q * s.plane() + j] += g[q * os.plane() + i];
                        }
                    }
                }
            });
        });
        self.push(val, os, &[a], Some(back))
    }

    pub fn pad_zero(&mut self, a: Var, p: usize) -> Var {
        if p == 0 {
            return a;
        }
        self.pad_impl(a, p, false)
    }

    pub fn pad_reflect(&mut self, a: Var, p: usize) -> Var {
        self.pad_impl(a, p, true)
    }

    /// Every other pixel, starting at (0, 0).
    pub fn subsample2(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let os = s.with_hw(s.h.div_ceil(2), s.w.div_ceil(2));
        let mut val = Vec::with_capacity(os.len());
        for q in 0..s.n * s.c {
            for y in 0..os.h {
                for x in 0..os.w {
                    val.push(self.value(a)[q * s.plane() + 2 * y * s.w + 2 * x]);
                }
            }
        }
        let back: Backward = Box::new(move |g, nodes, grads| {
            accum_with(grads, nodes, a.0, |d| {
                let mut i = 0;
                for q in 0..s.n * s.c {
                    for y in 0..os.h {
                        for x in 0..os.w {
                            d[q * s.plane() + 2 * y * s.w + 2 * x] += g[i];
                            i += 1;
                        }
                    }
                }
            });
        });
        self.push(val, os, &[a], Some(back))
    }

    /// Doubles spatial size placing values at even positions, zeros elsewhere.
    pub fn zero_upsample2(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let os = s.with_hw(2 * s.h, 2 * s.w);
        let mut val = vec![0.0; os.len()];
        for q in 0..s.n * s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    val[q * os.plane() + 2 * y * os.w + 2 * x] = self.value(a)[q * s.plane() + y * s.w + x];
                }
            }
        }
        let back: Backward = Box::new(move |g, nodes, grads| {
            let mut d = Vec::with_capacity(s.len());
            for q in 0..s.n * s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        d.push(g[q * os.plane() + 2 * y * os.w + 2 * x]);
                    }
                }
            }
            accum(grads, nodes, a.0, d);
        });
        self.push(val, os, &[a], Some(back))
    }

    // ----- resampling ------------------------------------------------------

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let (val, os) = ops::avg_pool2(self.value(a), s)?;
        let back: Backward = Box::new(move |g, nodes, grads| accum(grads, nodes, a.0, ops::avg_pool2_backward(g, s)));
        Ok(self.push(val, os, &[a], Some(back)))
    }

    pub fn resize_bilinear(&mut self, a: Var, h: usize, w: usize) -> Var {
        let s = self.shape(a);
        if (s.h, s.w) == (h, w) {
            return a;
        }
        let (val, os) = ops::resize_bilinear(self.value(a), s, h, w);
        let back: Backward =
            Box::new(move |g, nodes, grads| accum(grads, nodes, a.0, ops::resize_bilinear_backward(g, s, h, w)));
        self.push(val, os, &[a], Some(back))
    }

    pub fn map_channels(&mut self, a: Var, c_out: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.c == c_out {
            return Ok(a);
        }
        let (val, os) = ops::map_channels(self.value(a), s, c_out)?;
        let back: Backward =
            Box::new(move |g, nodes, grads| accum(grads, nodes, a.0, ops::map_channels_backward(g, s, c_out)));
        Ok(self.push(val, os, &[a], Some(back)))
    }

    // ----- convolution / normalization -------------------------------------

    /// Dense convolution of `x` (n, c, h, w) with `w` (o, c/g, k, k).
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let os = spec.check(xs, ws)?;
        let cg = xs.c / spec.groups;
        let og = os.c / spec.groups;
        let kk = cg * spec.k * spec.k;
        let hw = os.plane();
        let mut val = vec![0.0; os.len()];
        let mut col = vec![0.0; kk * hw];
        {
            let (xv, wv) = (self.value(x), self.value(w));
            for n in 0..xs.n {
                for g in 0..spec.groups {
                    im2col(&xv[xs.index(n, g * cg, 0, 0)..][..cg * xs.plane()], cg, xs.h, xs.w, &spec, os.h, os.w, &mut col);
                    let out = &mut val[os.index(n, g * og, 0, 0)..][..og * hw];
                    dgemm_strided(og, kk, hw, &wv[g * og * kk..], kk as isize, 1, &col, hw as isize, 1, 0.0, out);
                }
            }
        }
        let back: Backward = Box::new(move |g, nodes, grads| {
            let (xv, wv) = (&nodes[x.0].val, &nodes[w.0].val);
            let mut col = vec![0.0; kk * hw];
            let mut dcol = vec![0.0; kk * hw];
            let mut dw = if nodes[w.0].rg { Some(vec![0.0; ws.len()]) } else { None };
            let mut dx = if nodes[x.0].rg { Some(vec![0.0; xs.len()]) } else { None };
            for n in 0..xs.n {
                for gi in 0..spec.groups {
                    let go = &g[os.index(n, gi * og, 0, 0)..][..og * hw];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xv[xs.index(n, gi * cg, 0, 0)..][..cg * xs.plane()], cg, xs.h, xs.w, &spec, os.h, os.w, &mut col);
                        // dW (og × kk) += dO (og × hw) · colᵀ
                        dgemm_strided(og, hw, kk, go, hw as isize, 1, &col, 1, hw as isize, 1.0, &mut dw[gi * og * kk..]);
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcol (kk × hw) = Wᵀ · dO
                        dgemm_strided(kk, og, hw, &wv[gi * og * kk..], 1, kk as isize, go, hw as isize, 1, 0.0, &mut dcol);
                        col2im(&dcol, cg, xs.h, xs.w, &spec, os.h, os.w, &mut dx[xs.index(n, gi * cg, 0, 0)..]);
                    }
                }
            }
            if let Some(dw) = dw {
                accum(grads, nodes, w.0, dw);
            }
            if let Some(dx) = dx {
                accum(grads, nodes, x.0, dx);
            }
        });
        Ok(self.push(val, os, &[x, w], Some(back)))
    }

    /// Training-mode batch norm over (n, h, w) per channel; `gamma`, `beta` are (1, c, 1, 1).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BnStats)> {
        let s = self.shape(x);
        if self.shape(gamma) != Shape::new(1, s.c, 1, 1) || self.shape(beta) != Shape::new(1, s.c, 1, 1) {
            return Err(Error::Shape(format!("batch-norm parameters do not match {s}")));
        }
        let m = (s.n * s.plane()) as f64;
        let xv = self.value(x);
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                mean[c] += xv[s.index(n, c, 0, 0)..][..s.plane()].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for n in 0..s.n {
            for c in 0..s.c {
                var[c] += xv[s.index(n, c, 0, 0)..][..s.plane()].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; s.len()];
        let mut val = vec![0.0; s.len()];
        for n in 0..s.n {
            for c in 0..s.c {
                let off = s.index(n, c, 0, 0);
                for i in off..off + s.plane() {
                    xhat[i] = (xv[i] - mean[c]) * inv[c];
                    val[i] = gv[c] * xhat[i] + bv[c];
                }
            }
        }
        let stats = BnStats {
            mean: mean.clone(),
            var_unbiased: var.iter().map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v }).collect(),
        };
        let back: Backward = Box::new(move |g, nodes, grads| {
            let gv = &nodes[gamma.0].val;
            let mut sum_g = vec![0.0; s.c];
            let mut sum_gx = vec![0.0; s.c];
            for n in 0..s.n {
                for c in 0..s.c {
                    let off = s.index(n, c, 0, 0);
                    for i in off..off + s.plane() {
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat[i];
                    }
                }
            }
            if nodes[x.0].rg {
                let mut dx = vec![0.0; s.len()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let k = gv[c] * inv[c] / m;
                        let off = s.index(n, c, 0, 0);
                        for i in off..off + s.plane() {
                            dx[i] = k * (m * g[i] - sum_g[c] - xhat[i] * sum_gx[c]);
                        }
                    }
                }
                accum(grads, nodes, x.0, dx);
            }
            accum(grads, nodes, gamma.0, sum_gx);
            accum(grads, nodes, beta.0, sum_g);
        });
        Ok((self.push(val, s, &[x, gamma, beta], Some(back)), stats))
    }

    // ----- losses ----------------------------------------------------------

    /// Mean binary cross-entropy with logits against constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let s = self.shape(logits);
        if target.len() != s.len() {
            return Err(Error::Shape(format!("target length {} vs logits {s}", target.len())));
        }
        let t = target.to_vec();
        let n = s.len().max(1) as f64;
        let v: f64 = self
            .value(logits)
            .iter()
            .zip(&t)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let back: Backward = Box::new(move |g, nodes, grads| {
            let d = nodes[logits.0].val.iter().zip(&t).map(|(&z, &y)| g[0] * (ops::sigmoid(z) - y) / n).collect();
            accum(grads, nodes, logits.0, d);
        });
        Ok(self.push(vec![v], Shape::scalar(), &[logits], Some(back)))
    }

    /// Mean softmax cross-entropy; `logits` is (n, classes, 1, 1).
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.h * s.w != 1 || labels.len() != s.n || labels.iter().any(|&l| l >= s.c) {
            return Err(Error::Shape(format!("labels do not match logits {s}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; s.len()];
        let mut loss = 0.0;
        for (n, &lab) in labels.iter().enumerate() {
            let row = &lv[n * s.c..(n + 1) * s.c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..s.c {
                probs[n * s.c + c] = (row[c] - mx).exp() / z;
            }
            loss += -(row[lab] - mx - z.ln());
        }
        let nn = s.n as f64;
        let labels = labels.to_vec();
        let back: Backward = Box::new(move |g, nodes, grads| {
            let mut d = probs.clone();
            for (n, &lab) in labels.iter().enumerate() {
                d[n * s.c + lab] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= g[0] / nn);
            accum(grads, nodes, logits.0, d);
        });
        Ok(self.push(vec![loss / nn], Shape::scalar(), &[logits], Some(back)))
    }
}

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-6;

/// Worst error between two gradients of one tensor, relative to the larger
/// of their peak magnitudes.
pub fn grad_error(numeric: &[f64], analytic: &[f64]) -> f64 {
    let peak = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = numeric.iter().zip(analytic).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if peak < 1e-12 {
        worst
    } else {
        worst / peak
    }
}

/// Central differences against the backward pass for every input element;
/// returns the worst per-tensor [`grad_error`].
pub fn grad_check(inputs: &[(Vec<f64>, Shape)], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(v, s)| t.leaf(v.clone(), *s)).collect();
    let out = f(&mut t, &vars)?;
    let g = t.backward(out)?;
    let eval = |k: usize, i: usize, d: f64| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, (w, ws))| {
                let mut w = w.clone();
                if j == k {
                    w[i] += d;
                }
                t.leaf(w, *ws)
            })
            .collect();
        let o = f(&mut t, &vs)?;
        Ok(t.item(o))
    };
    let mut worst: f64 = 0.0;
    for (k, (v, _)) in inputs.iter().enumerate() {
        let an = g.get(vars[k]).map(|x| x.to_vec()).unwrap_or(vec![0.0; v.len()]);
        let mut num = Vec::with_capacity(v.len());
        for i in 0..v.len() {
            num.push((eval(k, i, FD_STEP)? - eval(k, i, -FD_STEP)?) / (2.0 * FD_STEP));
        }
        worst = worst.max(grad_error(&num, &an));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check(inputs: &[(Vec<f64>, Shape)], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        grad_check(inputs, |t, v| Ok(f(t, v))).unwrap()
    }

    fn rnd(rng: &mut ChaCha8Rng, s: Shape) -> (Vec<f64>, Shape) {
        ((0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(), s)
    }

    #[test]
    fn conv_grad_with_groups_stride_dilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(c, o, g, k, st, d) in &[(4, 6, 2, 3, 2, 1), (3, 3, 3, 3, 1, 2), (2, 5, 1, 1, 1, 1)] {
            let x = rnd(&mut rng, Shape::new(2, c, 6, 5));
            let w = rnd(&mut rng, Shape::new(o, c / g, k, k));
            let spec = ConvSpec::same(k, st, d).with_groups(g);
            let err = check(&[x, w], |t, v| {
                let y = t.conv2d(v[0], v[1], spec).unwrap();
                let y2 = t.square(y);
                t.sum(y2)
            });
            assert!(err < 1e-6, "conv grad error {err}");
        }
    }

    #[test]
    fn batch_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rnd(&mut rng, Shape::new(3, 2, 3, 3));
        let gm = rnd(&mut rng, Shape::new(1, 2, 1, 1));
        let bt = rnd(&mut rng, Shape::new(1, 2, 1, 1));
        let wts = rnd(&mut rng, Shape::new(3, 2, 3, 3));
        let err = check(&[x, gm, bt, wts], |t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2]).unwrap();
            let y = t.mul(y, v[3]).unwrap();
            let y = t.square(y);
            t.sum(y)
        });
        assert!(err < 1e-5, "bn grad error {err}");
    }

    #[test]
    fn layout_and_resample_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rnd(&mut rng, Shape::new(2, 4, 4, 6));
        let wts = rnd(&mut rng, Shape::new(2, 2, 7, 9));
        let err = check(&[x, wts], |t, v| {
            let a = t.avg_pool2(v[0]).unwrap();
            let b = t.resize_bilinear(a, 7, 9);
            let c = t.map_channels(b, 2).unwrap();
            let d = t.map_channels(c, 8).unwrap();
            let e = t.slice_channels(d, 3, 2).unwrap();
            let f = t.mul(e, v[1]).unwrap();
            let p = t.pad_reflect(f, 3);
            let q = t.subsample2(p);
            let r = t.zero_upsample2(q);
            let r = t.crop(r, 9, 11).unwrap();
            let s = t.sigmoid(r);
            let u = t.square(s);
            t.sum(u)
        });
        assert!(err < 1e-6, "layout grad error {err}");
    }

    #[test]
    fn broadcast_and_activation_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rnd(&mut rng, Shape::new(2, 3, 2, 2));
        let ch = rnd(&mut rng, Shape::new(1, 3, 1, 1));
        let sp = rnd(&mut rng, Shape::new(2, 1, 2, 2));
        let sc = rnd(&mut rng, Shape::scalar());
        let err = check(&[x, ch, sp, sc], |t, v| {
            let a = t.mul(v[0], v[1]).unwrap();
            let b = t.add(a, v[2]).unwrap();
            let c = t.sub(b, v[3]).unwrap();
            let d = t.tanh(c);
            let e = t.affine(d, 2.5, 0.1);
            let f = t.hardswish(e);
            let g = t.global_avg_pool(f);
            let h = t.concat_channels(&[g, g]).unwrap();
            let i = t.concat_batch(&[h, h]).unwrap();
            let j = t.slice_batch(i, 1, 2).unwrap();
            let k = t.sum_per_item(j);
            let l = t.square(k);
            t.mean(l)
        });
        assert!(err < 1e-6, "broadcast grad error {err}");
    }

    #[test]
    fn loss_primitive_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = rnd(&mut rng, Shape::new(3, 4, 1, 1));
        let target: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        let err = check(&[z.clone()], |t, v| t.bce_with_logits(v[0], &target).unwrap());
        assert!(err < 1e-6);
        let err = check(&[z], |t, v| t.softmax_ce(v[0], &[1, 3, 0]).unwrap());
        assert!(err < 1e-6);
    }

    #[test]
    fn ste_sign_passes_inside_window() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.5, 1.5, -0.2, -3.0], Shape::new(1, 4, 1, 1));
        let s = t.sign_ste(x);
        assert_eq!(t.value(s), &[1.0, 1.0, -1.0, -1.0]);
        let y = t.sum(s);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn weight_binarization_scales_ste() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, -2.0, 0.0, 0.5], Shape::new(1, 4, 1, 1));
        let b = t.binarize_weight(w);
        assert_eq!(t.value(b), &[0.875, -0.875, 0.875, 0.875]);
        let y = t.sum(b);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap(), &[0.0, 0.0, 0.875, 0.875]);
    }

    #[test]
    fn reflect_pad_small_input() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 2.0], Shape::new(1, 1, 1, 2));
        let p = t.pad_reflect(x, 2);
        let row: Vec<f64> = t.value(p)[2 * 6..3 * 6].to_vec();
        assert_eq!(row, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }
}
