//! Shape-level float operators shared by the inference and training paths.
//! Each linear operator has its adjoint alongside.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Shape;

#[inline]
fn c<F: Float>(v: f64) -> F {
    F::from(v).unwrap()
}

/// 2×2 average pooling, stride 2. Requires even spatial sizes.
pub fn avg_pool2<F: Float>(x: &[F], s: Shape) -> Result<(Vec<F>, Shape)> {
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::Shape(format!("2x2 pooling needs even spatial size, got {s}")));
    }
    let os = s.with_hw(s.h / 2, s.w / 2);
    let mut out = vec![F::zero(); os.len()];
    let q = c::<F>(0.25);
    for p in 0..s.n * s.c {
        let src = &x[p * s.plane()..(p + 1) * s.plane()];
        let dst = &mut out[p * os.plane()..(p + 1) * os.plane()];
        for y in 0..os.h {
            for xx in 0..os.w {
                let i = 2 * y * s.w + 2 * xx;
                dst[y * os.w + xx] = (src[i] + src[i + 1] + src[i + s.w] + src[i + s.w + 1]) * q;
            }
        }
    }
    Ok((out, os))
}

pub fn avg_pool2_backward<F: Float>(g: &[F], s: Shape) -> Vec<F> {
    let os = s.with_hw(s.h / 2, s.w / 2);
    let mut dx = vec![F::zero(); s.len()];
    let q = c::<F>(0.25);
    for p in 0..s.n * s.c {
        let src = &g[p * os.plane()..(p + 1) * os.plane()];
        let dst = &mut dx[p * s.plane()..(p + 1) * s.plane()];
        for y in 0..os.h {
            for xx in 0..os.w {
                let v = src[y * os.w + xx] * q;
                let i = 2 * y * s.w + 2 * xx;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + s.w] = v;
                dst[i + s.w + 1] = v;
            }
        }
    }
    dx
}

/// Source taps for half-pixel-centred linear resampling of `n_in` to `n_out`.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = if i0 + 1 < n_in { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (no corner alignment).
pub fn resize_bilinear<F: Float>(x: &[F], s: Shape, h: usize, w: usize) -> (Vec<F>, Shape) {
    let os = s.with_hw(h, w);
    let ty = linear_taps(s.h, h);
    let tx = linear_taps(s.w, w);
    let mut out = vec![F::zero(); os.len()];
    for p in 0..s.n * s.c {
        let src = &x[p * s.plane()..(p + 1) * s.plane()];
        let dst = &mut out[p * os.plane()..(p + 1) * os.plane()];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (c::<F>(ly), c::<F>(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (c::<F>(lx), c::<F>(1.0 - lx));
                dst[oy * w + ox] = hy * (hx * src[y0 * s.w + x0] + lx * src[y0 * s.w + x1])
                    + ly * (hx * src[y1 * s.w + x0] + lx * src[y1 * s.w + x1]);
            }
        }
    }
    (out, os)
}

pub fn resize_bilinear_backward<F: Float>(g: &[F], s: Shape, h: usize, w: usize) -> Vec<F> {
    let os = s.with_hw(h, w);
    let ty = linear_taps(s.h, h);
    let tx = linear_taps(s.w, w);
    let mut dx = vec![F::zero(); s.len()];
    for p in 0..s.n * s.c {
        let src = &g[p * os.plane()..(p + 1) * os.plane()];
        let dst = &mut dx[p * s.plane()..(p + 1) * s.plane()];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (c::<F>(ly), c::<F>(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (c::<F>(lx), c::<F>(1.0 - lx));
                let v = src[oy * w + ox];
                dst[y0 * s.w + x0] = dst[y0 * s.w + x0] + hy * hx * v;
                dst[y0 * s.w + x1] = dst[y0 * s.w + x1] + hy * lx * v;
                dst[y1 * s.w + x0] = dst[y1 * s.w + x0] + ly * hx * v;
                dst[y1 * s.w + x1] = dst[y1 * s.w + x1] + ly * lx * v;
            }
        }
    }
    dx
}

pub fn check_channel_map(c_in: usize, c_out: usize) -> Result<()> {
    if c_in == 0 || c_out == 0 || (c_in % c_out != 0 && c_out % c_in != 0) {
        return Err(Error::Shape(format!("channel mapping {c_in} -> {c_out} needs one to divide the other")));
    }
    Ok(())
}

/// Parameter-free channel mapping: chunk mean when reducing, repeated
/// concatenation when expanding. Spatial pooling is separate.
pub fn map_channels<F: Float>(x: &[F], s: Shape, c_out: usize) -> Result<(Vec<F>, Shape)> {
    check_channel_map(s.c, c_out)?;
    let os = s.with_c(c_out);
    let plane = s.plane();
    let mut out = vec![F::zero(); os.len()];
    for n in 0..s.n {
        let src = &x[n * s.item()..(n + 1) * s.item()];
        let dst = &mut out[n * os.item()..(n + 1) * os.item()];
        if s.c >= c_out {
            let r = s.c / c_out;
            let k = c::<F>(c_out as f64 / s.c as f64);
            for i in 0..r {
                for ch in 0..c_out {
                    let a = &src[(i * c_out + ch) * plane..][..plane];
                    let d = &mut dst[ch * plane..][..plane];
                    for (dv, &av) in d.iter_mut().zip(a) {
                        *dv = *dv + av;
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v = *v * k);
        } else {
            for j in 0..c_out / s.c {
                dst[j * s.item()..(j + 1) * s.item()].copy_from_slice(src);
            }
        }
    }
    Ok((out, os))
}

pub fn map_channels_backward<F: Float>(g: &[F], s: Shape, c_out: usize) -> Vec<F> {
    let os = s.with_c(c_out);
    let plane = s.plane();
    let mut dx = vec![F::zero(); s.len()];
    for n in 0..s.n {
        let src = &g[n * os.item()..(n + 1) * os.item()];
        let dst = &mut dx[n * s.item()..(n + 1) * s.item()];
        if s.c >= c_out {
            let k = c::<F>(c_out as f64 / s.c as f64);
            for i in 0..s.c / c_out {
                for ch in 0..c_out {
                    let a = &src[ch * plane..][..plane];
                    let d = &mut dst[(i * c_out + ch) * plane..][..plane];
                    for (dv, &av) in d.iter_mut().zip(a) {
                        *dv = av * k;
                    }
                }
            }
        } else {
            for j in 0..c_out / s.c {
                for (dv, &av) in dst.iter_mut().zip(&src[j * s.item()..(j + 1) * s.item()]) {
                    *dv = *dv + av;
                }
            }
        }
    }
    dx
}

/// Mean over each (n, c) plane, producing (n, c, 1, 1).
pub fn global_avg_pool<F: Float>(x: &[F], s: Shape) -> (Vec<F>, Shape) {
    let k = c::<F>(1.0 / s.plane() as f64);
    let out = x.chunks(s.plane()).map(|p| p.iter().fold(F::zero(), |a, &b| a + b) * k).collect();
    (out, Shape::new(s.n, s.c, 1, 1))
}

/// Broadcast shape of two NCHW shapes (each dim equal or 1).
pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let d = |x: usize, y: usize| -> Result<usize> {
        if x == y || y == 1 {
            Ok(x)
        } else if x == 1 {
            Ok(y)
        } else {
            Err(Error::Shape(format!("cannot broadcast {a} with {b}")))
        }
    };
    Ok(Shape::new(d(a.n, b.n)?, d(a.c, b.c)?, d(a.h, b.h)?, d(a.w, b.w)?))
}

/// Index of `out`'s element `(n, c, y, x)` inside a broadcast operand.
#[inline]
pub fn bindex(s: Shape, n: usize, ch: usize, y: usize, x: usize) -> usize {
    let n = if s.n == 1 { 0 } else { n };
    let ch = if s.c == 1 { 0 } else { ch };
    let y = if s.h == 1 { 0 } else { y };
    let x = if s.w == 1 { 0 } else { x };
    s.index(n, ch, y, x)
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_zip<F: Float>(a: &[F], sa: Shape, b: &[F], sb: Shape, f: impl Fn(F, F) -> F) -> Result<(Vec<F>, Shape)> {
    let os = broadcast_shape(sa, sb)?;
    if sa == os && sb == os {
        return Ok((a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(), os));
    }
    let mut out = Vec::with_capacity(os.len());
    for n in 0..os.n {
        for ch in 0..os.c {
            for y in 0..os.h {
                for x in 0..os.w {
                    out.push(f(a[bindex(sa, n, ch, y, x)], b[bindex(sb, n, ch, y, x)]));
                }
            }
        }
    }
    Ok((out, os))
}

/// Sums a gradient of shape `os` down to a broadcast operand of shape `s`.
pub fn reduce_to<F: Float>(g: &[F], os: Shape, s: Shape) -> Vec<F> {
    if os == s {
        return g.to_vec();
    }
    let mut out = vec![F::zero(); s.len()];
    let mut i = 0;
    for n in 0..os.n {
        for ch in 0..os.c {
            for y in 0..os.h {
                for x in 0..os.w {
                    let j = bindex(s, n, ch, y, x);
                    out[j] = out[j] + g[i];
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn sigmoid<F: Float>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub fn hardsigmoid<F: Float>(v: F) -> F {
    ((v + c(3.0)) / c(6.0)).max(F::zero()).min(F::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(vals: &[f64], h: usize, w: usize) -> Vec<f64> {
        vals.iter().flat_map(|&v| std::iter::repeat(v).take(h * w)).collect()
    }

    #[test]
    fn reduce_four_to_two_is_chunk_mean() {
        let s = Shape::new(1, 4, 2, 2);
        let (o, os) = map_channels(&consts(&[1.0, 2.0, 3.0, 4.0], 2, 2), s, 2).unwrap();
        assert_eq!(os.c, 2);
        assert_eq!(o, consts(&[2.0, 3.0], 2, 2));
    }

    #[test]
    fn expand_two_to_four_repeats() {
        let s = Shape::new(1, 2, 1, 3);
        let (o, _) = map_channels(&consts(&[1.0, 2.0], 1, 3), s, 4).unwrap();
        assert_eq!(o, consts(&[1.0, 2.0, 1.0, 2.0], 1, 3));
    }

    #[test]
    fn non_divisible_mapping_rejected() {
        assert!(map_channels(&[0.0f64; 6], Shape::new(1, 6, 1, 1), 4).is_err());
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let (o, os) = resize_bilinear(&[2.5f64; 6], Shape::new(1, 1, 2, 3), 4, 6);
        assert_eq!(os, Shape::new(1, 1, 4, 6));
        assert!(o.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn bilinear_matches_half_pixel_rule() {
        // 1-D row [0, 1] upsampled by two: [0, 0.25, 0.75, 1].
        let (o, _) = resize_bilinear(&[0.0f64, 1.0], Shape::new(1, 1, 1, 2), 1, 4);
        assert_eq!(o, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn broadcast_mul_over_channels() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let (o, os) = broadcast_zip(&a, Shape::new(1, 2, 1, 2), &[10.0, 100.0], Shape::new(1, 1, 1, 2), |x, y| x * y).unwrap();
        assert_eq!(os, Shape::new(1, 2, 1, 2));
        assert_eq!(o, vec![10.0, 200.0, 30.0, 400.0]);
        assert_eq!(reduce_to(&o, os, Shape::new(1, 1, 1, 2)), vec![40.0, 600.0]);
    }
}
