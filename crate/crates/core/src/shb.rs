//! Incoherence masks: down/up-sample residual, entropy-maximizing threshold,
//! bilinear mask upsampling.

use log::warn;
use num_traits::Float;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{BinaryMap, DenseTensor, Shape};

/// Number of residual quantiles searched for τ*.
pub const GRID_SIZE: usize = 33;

/// Upsampling factors used by the decoder blocks.
pub const MASK_FACTORS: [usize; 4] = [2, 4, 8, 16];

/// 2×2 average pool, partial windows at odd edges averaged over what exists.
fn down2<F: Float>(x: &[F], s: Shape) -> (Vec<F>, Shape) {
    let (h, w) = (s.h.div_ceil(2), s.w.div_ceil(2));
    let os = s.with_hw(h, w);
    let mut out = vec![F::zero(); os.len()];
    for p in 0..s.n * s.c {
        let src = &x[p * s.plane()..(p + 1) * s.plane()];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = F::zero();
                let mut cnt = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (iy, ix) = (2 * y + dy, 2 * xx + dx);
                        if iy < s.h && ix < s.w {
                            acc = acc + src[iy * s.w + ix];
                            cnt += 1;
                        }
                    }
                }
                out[p * os.plane() + y * w + xx] = acc / F::from(cnt).unwrap();
            }
        }
    }
    (out, os)
}

/// Channel mean of `|f − up2(down2(f))|`, one value per (n, y, x).
pub fn residual<F: Float>(f: &[F], s: Shape) -> Vec<f64> {
    let (d, ds) = down2(f, s);
    let (u, _) = ops::resize_bilinear(&d, ds, s.h, s.w);
    let mut r = vec![0.0f64; s.n * s.plane()];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = s.index(n, c, 0, 0);
            for i in 0..s.plane() {
                r[n * s.plane() + i] += (f[off + i] - u[off + i]).abs().to_f64().unwrap();
            }
        }
    }
    let k = 1.0 / s.c.max(1) as f64;
    r.iter_mut().for_each(|v| *v *= k);
    r
}

/// `m = bool(residual − τ)`.
pub fn mask_from_residual(res: &[f64], n: usize, h: usize, w: usize, tau: f64) -> BinaryMap {
    let mut m = BinaryMap::filled(n, h, w, false);
    for (b, &r) in m.bits.iter_mut().zip(res) {
        *b = (r - tau >= 0.0) as u8;
    }
    m
}

pub fn compute_mask(f: &DenseTensor, tau: f32) -> BinaryMap {
    let s = f.shape();
    mask_from_residual(&residual(f.data(), s), s.n, s.h, s.w, tau as f64)
}

/// Bernoulli entropy (nats) of `sign(f)` over every channel at masked pixels;
/// `None` when the mask selects nothing.
pub fn masked_sign_entropy<F: Float>(f: &[F], s: Shape, mask: &BinaryMap) -> Option<f64> {
    let (mut pos, mut total) = (0usize, 0usize);
    for n in 0..s.n {
        for i in 0..s.plane() {
            if mask.bits[n * s.plane() + i] == 0 {
                continue;
            }
            for c in 0..s.c {
                total += 1;
                if f[s.index(n, c, 0, 0) + i] >= F::zero() {
                    pos += 1;
                }
            }
        }
    }
    if total == 0 {
        return None;
    }
    Some(bernoulli_entropy(pos as f64 / total as f64))
}

pub fn bernoulli_entropy(p: f64) -> f64 {
    let h = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    h(p) + h(1.0 - p)
}

/// `count` evenly spaced order statistics of `values` (nearest rank), deduplicated.
pub fn quantile_grid(values: &[f64], count: usize) -> Vec<f64> {
    if values.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let last = v.len() - 1;
    let mut g: Vec<f64> = (0..count)
        .map(|i| {
            let q = if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
            v[(q * last as f64).round() as usize]
        })
        .collect();
    g.dedup();
    g
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdChoice {
    pub tau: f64,
    pub entropy: f64,
    pub density: f64,
}

/// τ* = argmax over `grid` of the masked sign entropy; ties go to the larger τ.
pub fn optimize_threshold<F: Float>(f: &[F], s: Shape, grid: &[f64]) -> Result<ThresholdChoice> {
    if grid.is_empty() {
        return Err(Error::Invalid("empty threshold grid".into()));
    }
    let res = residual(f, s);
    let mut best: Option<ThresholdChoice> = None;
    for &tau in grid {
        let m = mask_from_residual(&res, s.n, s.h, s.w, tau);
        let Some(h) = masked_sign_entropy(f, s, &m) else { continue };
        let better = match best {
            None => true,
            Some(b) => h > b.entropy || (h == b.entropy && tau > b.tau),
        };
        if better {
            best = Some(ThresholdChoice { tau, entropy: h, density: m.density() });
        }
    }
    Ok(best.unwrap_or_else(|| {
        warn!("incoherence mask empty for every threshold; falling back to tau = 0");
        let m = mask_from_residual(&res, s.n, s.h, s.w, 0.0);
        ThresholdChoice { tau: 0.0, entropy: masked_sign_entropy(f, s, &m).unwrap_or(0.0), density: m.density() }
    }))
}

/// Grid search over the residual's own quantiles.
pub fn optimize_threshold_auto<F: Float>(f: &[F], s: Shape) -> Result<ThresholdChoice> {
    optimize_threshold(f, s, &quantile_grid(&residual(f, s), GRID_SIZE))
}

/// Bilinear ×k of a {0,1} map, re-binarized with `> 0.5`.
pub fn upsample_mask(base: &BinaryMap, k: usize) -> Result<BinaryMap> {
    if k == 0 || !k.is_power_of_two() || k > 16 {
        return Err(Error::Invalid(format!("mask upsampling factor {k} must be a power of two <= 16")));
    }
    let s = Shape::new(base.n, 1, base.h, base.w);
    let src: Vec<f32> = base.bits.iter().map(|&b| b as f32).collect();
    let (up, os) = ops::resize_bilinear(&src, s, base.h * k, base.w * k);
    Ok(BinaryMap { n: os.n, h: os.h, w: os.w, bits: up.iter().map(|&v| (v > 0.5) as u8).collect() })
}

/// Base mask at 1/16 with its decoder-scale upsamplings.
#[derive(Clone, Debug, PartialEq)]
pub struct IncoherenceMask {
    pub base: BinaryMap,
    pub tau_star: f64,
    pub upsampled: Vec<(usize, BinaryMap)>,
}

impl IncoherenceMask {
    pub fn new(base: BinaryMap, tau_star: f64) -> Result<Self> {
        let upsampled = MASK_FACTORS.iter().map(|&k| Ok((k, upsample_mask(&base, k)?))).collect::<Result<_>>()?;
        Ok(IncoherenceMask { base, tau_star, upsampled })
    }

    pub fn from_features(f: &DenseTensor, tau: f64) -> Result<Self> {
        let s = f.shape();
        Self::new(mask_from_residual(&residual(f.data(), s), s.n, s.h, s.w, tau), tau)
    }

    pub fn at(&self, k: usize) -> Option<&BinaryMap> {
        self.upsampled.iter().find(|(f, _)| *f == k).map(|(_, m)| m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_features_give_full_or_empty_mask() {
        let f = DenseTensor::full(Shape::new(1, 3, 4, 4), 0.7);
        assert_eq!(compute_mask(&f, 0.0).count(), 16);
        assert_eq!(compute_mask(&f, 0.01).count(), 0);
    }

    #[test]
    fn impulse_mask_hugs_the_impulse() {
        let mut f = DenseTensor::zeros(Shape::new(1, 1, 8, 8));
        f.set(0, 0, 4, 4, 1.0);
        let res = residual(f.data(), f.shape());
        // the pooled cell (2,2) holds 0.25; the impulse residual is 0.75
        let peak = res[4 * 8 + 4];
        assert!((peak - (1.0 - 0.25 * 0.5625)).abs() < 1e-9, "{peak}");
        let m = compute_mask(&f, 0.5);
        assert_eq!(m.count(), 1);
        assert!(m.get(0, 4, 4));
        let m = compute_mask(&f, 0.1);
        for y in 0..8 {
            for x in 0..8 {
                if m.get(0, y, x) {
                    assert!((3..=5).contains(&y) && (3..=5).contains(&x), "({y},{x})");
                }
            }
        }
    }

    #[test]
    fn entropy_of_balanced_signs_is_ln2() {
        let f = DenseTensor::from_vec(Shape::new(1, 2, 1, 2), vec![1.0, -1.0, 2.0, -2.0]).unwrap();
        let m = BinaryMap::filled(1, 1, 2, true);
        let h = masked_sign_entropy(f.data(), f.shape(), &m).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-12);
        let f = DenseTensor::full(Shape::new(1, 2, 1, 2), 1.0);
        assert_eq!(masked_sign_entropy(f.data(), f.shape(), &m), Some(0.0));
        assert_eq!(masked_sign_entropy(f.data(), f.shape(), &BinaryMap::filled(1, 1, 2, false)), None);
    }

    #[test]
    fn empty_mask_everywhere_falls_back_to_zero() {
        let f = DenseTensor::full(Shape::new(1, 2, 4, 4), 1.0);
        let c = optimize_threshold(f.data(), f.shape(), &[0.5, 1.0]).unwrap();
        assert_eq!(c.tau, 0.0);
        assert!(optimize_threshold(f.data(), f.shape(), &[]).is_err());
    }

    #[test]
    fn ties_prefer_larger_threshold() {
        // constant residual: every τ at or below it selects the full map
        let f = DenseTensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, _, _| if c == 0 { 1.0 } else { -1.0 });
        let c = optimize_threshold(f.data(), f.shape(), &[-1.0, -0.5, 0.0]).unwrap();
        assert_eq!(c.tau, 0.0);
    }

    #[test]
    fn upsampled_all_ones_stays_all_ones() {
        let base = BinaryMap::filled(1, 3, 2, true);
        for k in MASK_FACTORS {
            let m = upsample_mask(&base, k).unwrap();
            assert_eq!((m.h, m.w), (3 * k, 2 * k));
            assert_eq!(m.count(), m.bits.len());
        }
        assert!(upsample_mask(&base, 3).is_err());
        assert!(upsample_mask(&base, 32).is_err());
    }

    #[test]
    fn single_pixel_upsample_by_two() {
        let mut base = BinaryMap::filled(1, 4, 4, false);
        base.set(0, 1, 1, true);
        let m = upsample_mask(&base, 2).unwrap();
        // source pixel (1,1) covers outputs 2..=3; half-pixel weights are .75/.25,
        // so only the 2×2 block exceeds .5 (0.75·0.75)
        let on: Vec<(usize, usize)> =
            (0..8).flat_map(|y| (0..8).map(move |x| (y, x))).filter(|&(y, x)| m.get(0, y, x)).collect();
        assert_eq!(on, vec![(2, 2), (2, 3), (3, 2), (3, 3)]);
    }

    #[test]
    fn checkerboard_density_stays_moderate() {
        let mut base = BinaryMap::filled(1, 8, 8, false);
        for y in 0..8 {
            for x in 0..8 {
                base.set(0, y, x, (x + y) % 2 == 0);
            }
        }
        let d = upsample_mask(&base, 2).unwrap().density();
        assert!((0.25..=0.75).contains(&d), "{d}");
    }

    #[test]
    fn quantile_grid_spans_range() {
        let v: Vec<f64> = (0..101).map(|i| i as f64).collect();
        let g = quantile_grid(&v, 33);
        assert_eq!(g.len(), 33);
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 100.0);
    }
}
