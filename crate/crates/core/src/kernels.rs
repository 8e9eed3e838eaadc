//! Binarized convolution kernels, the float reference oracle, and a dense
//! f32 convolution for full-precision layers.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;
use rayon::prelude::*;

use crate::bits::{dot_unmasked, BitTensor};
use crate::error::{Error, Result};
use crate::tensor::{BinaryMap, DenseTensor, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(k: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { k, stride, padding, dilation: 1, groups: 1 }
    }

    /// `k×k`, given stride and dilation, "same" padding.
    pub fn same(k: usize, stride: usize, dilation: usize) -> Self {
        ConvSpec { k, stride, padding: dilation * (k - 1) / 2, dilation, groups: 1 }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.k - 1) + 1;
        if h + 2 * self.padding < span || w + 2 * self.padding < span {
            return Err(Error::Shape(format!("{h}x{w} input smaller than kernel span {span}")));
        }
        Ok(((h + 2 * self.padding - span) / self.stride + 1, (w + 2 * self.padding - span) / self.stride + 1))
    }

    /// Checks positivity and channel/group divisibility; returns the output shape.
    pub fn check(&self, x: Shape, w: Shape) -> Result<Shape> {
        if self.k == 0 || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::Invalid(format!("non-positive conv spec {self:?}")));
        }
        if x.c % self.groups != 0 || w.n % self.groups != 0 {
            return Err(Error::Shape(format!(
                "channels in {} / out {} not divisible by groups {}",
                x.c, w.n, self.groups
            )));
        }
        if w.c != x.c / self.groups || w.h != self.k || w.w != self.k {
            return Err(Error::Shape(format!("weight {} incompatible with input {x} and {self:?}", w)));
        }
        let (ho, wo) = self.out_hw(x.h, x.w)?;
        Ok(Shape::new(x.n, w.n, ho, wo))
    }

    /// Multiply-accumulates for one output pixel across all output channels.
    pub fn macs_per_pixel(&self, c_in: usize, c_out: usize) -> u64 {
        (c_out * (c_in / self.groups) * self.k * self.k) as u64
    }
}

/// Counts multiply-accumulate work.
#[derive(Debug, Default)]
pub struct OpCounter(AtomicU64);

impl OpCounter {
    pub fn new() -> Self {
        OpCounter(AtomicU64::new(0))
    }

    pub fn add(&self, v: u64) {
        self.0.fetch_add(v, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Packed weights split per group, with per-tap weight sums for border taps.
struct PreparedWeights<'a> {
    w: &'a BitTensor,
    /// Input bits per group, word-aligned.
    inputs: Vec<Cow<'a, BitTensor>>,
    /// (oc, tap) → Σ of ±1 weights at that tap.
    tap_sums: Vec<i32>,
}

fn prepare<'a>(x: &'a BitTensor, w: &'a BitTensor, spec: &ConvSpec) -> Result<PreparedWeights<'a>> {
    let cg = x.shape().c / spec.groups;
    let inputs = if spec.groups == 1 {
        vec![Cow::Borrowed(x)]
    } else {
        (0..spec.groups).map(|g| x.extract_channels(g * cg, cg).map(Cow::Owned)).collect::<Result<_>>()?
    };
    let ws = w.shape();
    let taps = spec.k * spec.k;
    let mut tap_sums = Vec::with_capacity(ws.n * taps);
    for oc in 0..ws.n {
        for t in 0..taps {
            let ones: u32 = w.pixel(oc, t / spec.k, t % spec.k).iter().map(|v| v.count_ones()).sum();
            tap_sums.push(2 * ones as i32 - cg as i32);
        }
    }
    Ok(PreparedWeights { w, inputs, tap_sums })
}

/// Integer dot products for every output channel at one output pixel.
#[inline]
fn pixel_dots(
    pw: &PreparedWeights<'_>,
    spec: &ConvSpec,
    n: usize,
    oy: usize,
    ox: usize,
    taps: &mut Vec<Option<usize>>,
    out: &mut [i32],
) {
    let xs = pw.inputs[0].shape();
    let k = spec.k;
    taps.clear();
    for ky in 0..k {
        let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
        for kx in 0..k {
            let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
            if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                taps.push(Some(((n * xs.h + iy as usize) * xs.w + ix as usize) * pw.inputs[0].words_per_pixel()));
            } else {
                taps.push(None);
            }
        }
    }
    let cout = out.len();
    let og = cout / spec.groups;
    let cg = xs.c as i32;
    let wpp = pw.w.words_per_pixel();
    let wwords = pw.w.words();
    let ntaps = k * k;
    match wpp {
        1 => channel_loop::<1>(pw, taps, og, cg, ntaps, wwords, out),
        2 => channel_loop::<2>(pw, taps, og, cg, ntaps, wwords, out),
        3 => channel_loop::<3>(pw, taps, og, cg, ntaps, wwords, out),
        4 => channel_loop::<4>(pw, taps, og, cg, ntaps, wwords, out),
        _ => {
            for (oc, o) in out.iter_mut().enumerate() {
                let input = &pw.inputs[oc / og];
                let border = input.border();
                let xw = input.words();
                let wbase = oc * ntaps * wpp;
                let mut acc = 0i32;
                for (t, tap) in taps.iter().enumerate() {
                    match tap {
                        Some(off) => {
                            let wo = wbase + t * wpp;
                            acc += dot_unmasked(&xw[*off..*off + wpp], &wwords[wo..wo + wpp], cg);
                        }
                        None => {
                            let sum = pw.tap_sums[oc * ntaps + t];
                            acc += if border { sum } else { -sum };
                        }
                    }
                }
                *o = acc;
            }
        }
    }
}

/// Fixed-width variant of the per-channel loop so the word loop unrolls.
#[inline(always)]
fn channel_loop<const N: usize>(
    pw: &PreparedWeights<'_>,
    taps: &[Option<usize>],
    og: usize,
    cg: i32,
    ntaps: usize,
    wwords: &[u64],
    out: &mut [i32],
) {
    for (oc, o) in out.iter_mut().enumerate() {
        let input = &pw.inputs[oc / og];
        let border = input.border();
        let xw = input.words();
        let wrow = &wwords[oc * ntaps * N..(oc + 1) * ntaps * N];
        let mut diff = 0u32;
        let mut acc = 0i32;
        for (t, tap) in taps.iter().enumerate() {
            match tap {
                Some(off) => {
                    let a: &[u64; N] = xw[*off..*off + N].try_into().unwrap();
                    let b: &[u64; N] = wrow[t * N..(t + 1) * N].try_into().unwrap();
                    for j in 0..N {
                        diff += (a[j] ^ b[j]).count_ones();
                    }
                    acc += cg;
                }
                None => {
                    let sum = pw.tap_sums[oc * ntaps + t];
                    acc += if border { sum } else { -sum };
                }
            }
        }
        *o = acc - 2 * diff as i32;
    }
}

/// `o = s · (b_w ⊛ b_a)` with exact integer accumulation.
///
/// Spatial padding taps take the input's border bit.
pub fn bconv2d(x: &BitTensor, w: &BitTensor, s: f32, spec: &ConvSpec) -> Result<DenseTensor> {
    bconv2d_counted(x, w, s, spec, &OpCounter::new())
}

pub fn bconv2d_counted(x: &BitTensor, w: &BitTensor, s: f32, spec: &ConvSpec, counter: &OpCounter) -> Result<DenseTensor> {
    let os = spec.check(x.shape(), w.shape())?;
    let pw = prepare(x, w, spec)?;
    let rows: Vec<Vec<i32>> = (0..os.n * os.h)
        .into_par_iter()
        .map_init(Vec::new, |taps, r| {
            let (n, oy) = (r / os.h, r % os.h);
            let mut buf = vec![0i32; os.w * os.c];
            for ox in 0..os.w {
                pixel_dots(&pw, spec, n, oy, ox, taps, &mut buf[ox * os.c..(ox + 1) * os.c]);
            }
            buf
        })
        .collect();
    counter.add(spec.macs_per_pixel(x.shape().c, os.c) * (os.n * os.h * os.w) as u64);
    let mut out = DenseTensor::zeros(os);
    let data = out.data_mut();
    for (r, buf) in rows.iter().enumerate() {
        let (n, oy) = (r / os.h, r % os.h);
        for ox in 0..os.w {
            for oc in 0..os.c {
                data[os.index(n, oc, oy, ox)] = s * buf[ox * os.c + oc] as f32;
            }
        }
    }
    Ok(out)
}

/// Binarized convolution evaluated only where `mask` is set; zero elsewhere.
pub fn sparse_bconv2d(
    x: &BitTensor,
    w: &BitTensor,
    s: f32,
    spec: &ConvSpec,
    mask: &BinaryMap,
    counter: &OpCounter,
) -> Result<DenseTensor> {
    let os = spec.check(x.shape(), w.shape())?;
    if mask.n != os.n || mask.h != os.h || mask.w != os.w {
        return Err(Error::Shape(format!(
            "mask ({}, {}, {}) does not match output {os}",
            mask.n, mask.h, mask.w
        )));
    }
    let pw = prepare(x, w, spec)?;
    let work: Vec<(usize, usize, usize)> = (0..os.n)
        .flat_map(|n| (0..os.h).flat_map(move |y| (0..os.w).map(move |x| (n, y, x))))
        .filter(|&(n, y, x)| mask.get(n, y, x))
        .collect();
    let dots: Vec<Vec<i32>> = work
        .par_chunks(64)
        .map_init(Vec::new, |taps, chunk| {
            let mut buf = vec![0i32; chunk.len() * os.c];
            for (i, &(n, y, x)) in chunk.iter().enumerate() {
                pixel_dots(&pw, spec, n, y, x, taps, &mut buf[i * os.c..(i + 1) * os.c]);
            }
            buf
        })
        .collect();
    counter.add(spec.macs_per_pixel(x.shape().c, os.c) * work.len() as u64);
    let mut out = DenseTensor::zeros(os);
    let data = out.data_mut();
    for (ci, buf) in dots.iter().enumerate() {
        for (i, &(n, y, x)) in work[ci * 64..].iter().take(buf.len() / os.c.max(1)).enumerate() {
            for oc in 0..os.c {
                data[os.index(n, oc, y, x)] = s * buf[i * os.c + oc] as f32;
            }
        }
    }
    Ok(out)
}

/// Textbook direct convolution with zero padding.
pub fn float_conv_oracle(x: &DenseTensor, w: &DenseTensor, spec: &ConvSpec) -> Result<DenseTensor> {
    let xs = x.shape();
    let ws = w.shape();
    let os = spec.check(xs, ws)?;
    let cg = xs.c / spec.groups;
    let og = os.c / spec.groups;
    let mut out = DenseTensor::zeros(os);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for n in 0..os.n {
        for oc in 0..os.c {
            let g = oc / og;
            let oplane = &mut od[os.index(n, oc, 0, 0)..os.index(n, oc, 0, 0) + os.plane()];
            for ic in 0..cg {
                let iplane = &xd[xs.index(n, g * cg + ic, 0, 0)..][..xs.plane()];
                for ky in 0..spec.k {
                    for kx in 0..spec.k {
                        let wv = wd[ws.index(oc, ic, ky, kx)];
                        for oy in 0..os.h {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                            if iy < 0 || iy as usize >= xs.h {
                                continue;
                            }
                            let irow = &iplane[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                            let orow = &mut oplane[oy * os.w..(oy + 1) * os.w];
                            // output columns whose tap lands inside the row
                            let off = kx * spec.dilation;
                            let lo = spec.padding.saturating_sub(off).div_ceil(spec.stride);
                            let hi = if xs.w + spec.padding > off {
                                ((xs.w + spec.padding - off - 1) / spec.stride + 1).min(os.w)
                            } else {
                                0
                            };
                            if spec.stride == 1 {
                                let base = lo + off - spec.padding;
                                for (o, &v) in orow[lo..hi.max(lo)].iter_mut().zip(&irow[base..]) {
                                    *o += wv * v;
                                }
                            } else {
                                for ox in lo..hi {
                                    orow[ox] += wv * irow[ox * spec.stride + off - spec.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Unfolds one group of one batch item into a (cg·k·k, ho·wo) matrix.
pub(crate) fn im2col<F: Float>(x: &[F], c: usize, h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize, col: &mut [F]) {
    let k = spec.k;
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy as usize >= h {
                        dst.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        *d = if ix >= 0 && (ix as usize) < w { src[ix as usize] } else { F::zero() };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `x`.
pub(crate) fn col2im<F: Float>(col: &[F], c: usize, h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize, x: &mut [F]) {
    let k = spec.k;
    let hw = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] = dst[ix as usize] + row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = a·b + beta·c` for f32.
pub(crate) fn sgemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// General f64 GEMM with explicit strides: `c = alpha·op(a)·op(b) + beta·c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Dense f32 convolution (im2col + GEMM) with optional per-channel bias.
pub fn conv2d_f32(x: &DenseTensor, w: &DenseTensor, bias: Option<&[f32]>, spec: &ConvSpec) -> Result<DenseTensor> {
    let xs = x.shape();
    let ws = w.shape();
    let os = spec.check(xs, ws)?;
    let cg = xs.c / spec.groups;
    let og = os.c / spec.groups;
    let kk = cg * spec.k * spec.k;
    let hw = os.plane();
    let mut out = DenseTensor::zeros(os);
    let xd = x.data();
    let wd = w.data();
    out.data_mut().par_chunks_mut(os.item()).enumerate().for_each(|(n, oitem)| {
        let mut col = vec![0f32; kk * hw];
        for g in 0..spec.groups {
            let xin = &xd[xs.index(n, g * cg, 0, 0)..][..cg * xs.plane()];
            im2col(xin, cg, xs.h, xs.w, spec, os.h, os.w, &mut col);
            let wg = &wd[g * og * kk..(g + 1) * og * kk];
            let og_out = &mut oitem[g * og * hw..(g + 1) * og * hw];
            sgemm(og, kk, hw, wg, &col, 0.0, og_out);
        }
        if let Some(b) = bias {
            for (oc, plane) in oitem.chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[oc]);
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bits::{pack, unpack};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, s: Shape) -> DenseTensor {
        DenseTensor::from_fn(s, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = pack(&DenseTensor::full(Shape::new(1, 1, 3, 3), 1.0), 0.0).unwrap();
        let w = pack(&DenseTensor::full(Shape::new(1, 1, 3, 3), 1.0), 0.0).unwrap();
        let o = bconv2d(&x, &w, 1.0, &ConvSpec::new(3, 1, 0)).unwrap();
        assert_eq!(o.data(), &[9.0]);
    }

    #[test]
    fn self_correlation_at_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = rand_t(&mut rng, Shape::new(1, 5, 3, 3));
        let x = pack(&xs, 0.0).unwrap();
        let w = pack(&xs, 0.0).unwrap();
        let o = bconv2d(&x, &w, 1.0, &ConvSpec::new(3, 1, 0)).unwrap();
        assert_eq!(o.data(), &[45.0]);
    }

    #[test]
    fn oracle_identity_and_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&mut rng, Shape::new(1, 1, 4, 4));
        let id = DenseTensor::full(Shape::new(1, 1, 1, 1), 1.0);
        assert_eq!(float_conv_oracle(&x, &id, &ConvSpec::new(1, 1, 0)).unwrap(), x);
        let zero = DenseTensor::zeros(Shape::new(2, 1, 3, 3));
        let o = float_conv_oracle(&x, &zero, &ConvSpec::new(3, 1, 1)).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.0));
        let c = DenseTensor::full(Shape::new(1, 1, 5, 5), 0.5);
        let b = DenseTensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let o = float_conv_oracle(&c, &b, &ConvSpec::new(3, 1, 1)).unwrap();
        assert_eq!(o.at(0, 0, 2, 2), 4.5);
    }

    #[test]
    fn bad_groups_rejected() {
        let x = pack(&DenseTensor::zeros(Shape::new(1, 6, 4, 4)), 0.0).unwrap();
        let w = pack(&DenseTensor::zeros(Shape::new(4, 3, 3, 3)), 0.0).unwrap();
        assert!(bconv2d(&x, &w, 1.0, &ConvSpec::new(3, 1, 1).with_groups(4)).is_err());
    }

    #[test]
    fn f32_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(c, o, k, s, d, g) in &[(3, 8, 3, 2, 1, 1), (6, 6, 3, 1, 2, 6), (4, 8, 1, 1, 1, 2), (5, 3, 5, 1, 1, 1)] {
            let x = rand_t(&mut rng, Shape::new(2, c, 9, 7));
            let w = rand_t(&mut rng, Shape::new(o, c / g, k, k));
            let spec = ConvSpec::same(k, s, d).with_groups(g);
            let a = conv2d_f32(&x, &w, None, &spec).unwrap();
            let b = float_conv_oracle(&x, &w, &spec).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-4);
        }
    }

    #[test]
    fn sparse_zero_and_full_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = pack(&rand_t(&mut rng, Shape::new(2, 9, 6, 6)), 0.1).unwrap();
        let w = pack(&rand_t(&mut rng, Shape::new(5, 9, 3, 3)), 0.0).unwrap();
        let spec = ConvSpec::new(3, 1, 1);
        let dense_ops = OpCounter::new();
        let dense = bconv2d_counted(&x, &w, 0.7, &spec, &dense_ops).unwrap();
        let ops = OpCounter::new();
        let full = sparse_bconv2d(&x, &w, 0.7, &spec, &BinaryMap::filled(2, 6, 6, true), &ops).unwrap();
        assert_eq!(full, dense);
        assert_eq!(ops.get(), dense_ops.get());
        let ops = OpCounter::new();
        let none = sparse_bconv2d(&x, &w, 0.7, &spec, &BinaryMap::filled(2, 6, 6, false), &ops).unwrap();
        assert!(none.data().iter().all(|&v| v == 0.0));
        assert_eq!(ops.get(), 0);
    }

    #[test]
    fn depthwise_matches_per_channel_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs = rand_t(&mut rng, Shape::new(1, 70, 5, 5));
        let ws = rand_t(&mut rng, Shape::new(70, 1, 3, 3));
        let spec = ConvSpec::new(3, 1, 0).with_groups(70);
        let o = bconv2d(&pack(&xs, 0.0).unwrap(), &pack(&ws, 0.0).unwrap(), 1.0, &spec).unwrap();
        let xb = unpack(&pack(&xs, 0.0).unwrap());
        let wb = unpack(&pack(&ws, 0.0).unwrap());
        for c in 0..70 {
            for y in 0..3 {
                for x in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            acc += xb.at(0, c, y + ky, x + kx) * wb.at(c, 0, ky, kx);
                        }
                    }
                    assert_eq!(o.at(0, c, y, x), acc);
                }
            }
        }
    }
}
