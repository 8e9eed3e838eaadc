//! Randomized properties of the kernels, binarization, masks, losses and
//! estimators.

use bivm::binarize::{binarize_weights, ste_backward, LayerParams};
use bivm::bits::{pack, xnor_popcount_dot};
use bivm::ebb::map_channels;
use bivm::frames::{read_png, read_ppm, write_png, write_ppm};
use bivm::info::{binned_mi, entropy, bin_values};
use bivm::kernels::{bconv2d, sparse_bconv2d, ConvSpec, OpCounter};
use bivm::losses::{lbm_loss, matting_loss};
use bivm::model::{profile, ModelConfig};
use bivm::backend::Part;
use bivm::shb::{bernoulli_entropy, compute_mask, masked_sign_entropy, optimize_threshold, quantile_grid, residual, upsample_mask};
use bivm::tape::Tape;
use bivm::{BinaryMap, DenseTensor, Shape};
use proptest::prelude::*;

fn tensor(s: Shape, vals: &[f32]) -> DenseTensor {
    DenseTensor::from_fn(s, |n, c, y, x| vals[s.index(n, c, y, x) % vals.len()])
}

fn values() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-2.0f32..2.0, 1..300)
}

fn sign(v: f32, tau: f32) -> i64 {
    if v - tau >= 0.0 {
        1
    } else {
        -1
    }
}

/// Direct ±1 correlation with the binarized zero outside the image.
fn sign_conv(x: &DenseTensor, tau: f32, w: &DenseTensor, spec: &ConvSpec) -> Vec<i64> {
    let (xs, ws) = (x.shape(), w.shape());
    let p = spec.padding as isize;
    let (oh, ow) = spec.out_hw(xs.h, xs.w).unwrap();
    let cg = xs.c / spec.groups;
    let og = ws.n / spec.groups;
    let border = sign(0.0, tau);
    let mut out = Vec::new();
    for n in 0..xs.n {
        for o in 0..ws.n {
            let g = o / og;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i64;
                    for ci in 0..cg {
                        for ky in 0..spec.k {
                            for kx in 0..spec.k {
                                let y = (oy * spec.stride) as isize + (ky * spec.dilation) as isize - p;
                                let xx = (ox * spec.stride) as isize + (kx * spec.dilation) as isize - p;
                                let a = if y < 0 || xx < 0 || y >= xs.h as isize || xx >= xs.w as isize {
                                    border
                                } else {
                                    sign(x.at(n, g * cg + ci, y as usize, xx as usize), tau)
                                };
                                acc += a * sign(w.at(o, ci, ky, kx), 0.0);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn pack_sets_bit_iff_value_reaches_threshold(
        c in 1usize..140, h in 1usize..4, w in 1usize..4, tau in -1.0f32..1.0, vals in values(),
    ) {
        let x = tensor(Shape::new(1, c, h, w), &vals);
        let b = pack(&x, tau).unwrap();
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    prop_assert_eq!(b.bit(0, ch, y, xx), x.at(0, ch, y, xx) >= tau);
                }
            }
        }
    }

    #[test]
    fn xnor_dot_is_the_signed_integer_dot(a in prop::collection::vec(any::<bool>(), 1..300), seed in any::<u64>()) {
        let n = a.len();
        let b: Vec<bool> = (0..n).map(|i| (seed.rotate_left(i as u32 % 64) ^ i as u64) & 1 == 1).collect();
        let words = |v: &[bool]| {
            let mut w = vec![0u64; n.div_ceil(64)];
            for (i, &on) in v.iter().enumerate() {
                if on {
                    w[i / 64] |= 1 << (i % 64);
                }
            }
            w
        };
        let want: i64 = a.iter().zip(&b).map(|(&x, &y)| if x == y { 1 } else { -1 }).sum();
        prop_assert_eq!(xnor_popcount_dot(&words(&a), &words(&b), n).unwrap(), want);
    }

    #[test]
    fn bconv_matches_direct_sign_correlation(
        c in 1usize..40, c_out in 1usize..6, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..=2, dilation in 1usize..=2, depthwise in any::<bool>(),
        h in 1usize..7, w in 1usize..7, tau in -0.5f32..0.5, vals in values(), wv in values(),
    ) {
        let groups = if depthwise { c } else { 1 };
        let c_out = if depthwise { c } else { c_out };
        let spec = ConvSpec::same(k, stride, dilation).with_groups(groups);
        let x = tensor(Shape::new(1, c, h, w), &vals);
        let wt = tensor(Shape::new(c_out, c / groups, k, k), &wv);
        let y = bconv2d(&pack(&x, tau).unwrap(), &pack(&wt, 0.0).unwrap(), 1.0, &spec).unwrap();
        let want = sign_conv(&x, tau, &wt, &spec);
        prop_assert_eq!(y.len(), want.len());
        for (a, b) in y.data().iter().zip(&want) {
            prop_assert_eq!(*a as i64, *b);
        }
    }

    #[test]
    fn sparse_cost_is_active_pixels_times_dense_cost(
        c in 1usize..70, c_out in 1usize..20, k in prop::sample::select(vec![1usize, 3]),
        h in 1usize..8, w in 1usize..8, bits in prop::collection::vec(any::<bool>(), 64), vals in values(),
    ) {
        let spec = ConvSpec::same(k, 1, 1);
        let xb = pack(&tensor(Shape::new(1, c, h, w), &vals), 0.0).unwrap();
        let wb = pack(&tensor(Shape::new(c_out, c, k, k), &vals), 0.1).unwrap();
        let mut m = BinaryMap::filled(1, h, w, false);
        for (i, b) in m.bits.iter_mut().enumerate() {
            *b = bits[i % bits.len()] as u8;
        }
        let ops = OpCounter::new();
        sparse_bconv2d(&xb, &wb, 1.0, &spec, &m, &ops).unwrap();
        prop_assert_eq!(ops.get(), m.count() as u64 * (c * c_out * k * k) as u64);
    }

    #[test]
    fn ste_mask_is_idempotent(vals in values(), g in values(), tau in -1.0f32..1.0) {
        let s = Shape::new(1, 1, 1, vals.len());
        let pre = tensor(s, &vals);
        let go = tensor(s, &g);
        let once = ste_backward(&go, &pre, tau).unwrap();
        let twice = ste_backward(&once, &pre, tau).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn weight_scale_is_homogeneous(vals in values(), k in 0.01f32..100.0) {
        prop_assume!(vals.iter().any(|v| *v != 0.0));
        let s = Shape::new(2, 3, 3, 3);
        let w = tensor(s, &vals);
        let (b1, s1) = binarize_weights(&LayerParams::new(w.clone(), None).unwrap()).unwrap();
        let (b2, s2) = binarize_weights(&LayerParams::new(w.map(|v| v * k), None).unwrap()).unwrap();
        prop_assert_eq!(b1.words(), b2.words());
        prop_assert!(((s2 / s1) - k).abs() <= 1e-4 * k);
    }

    #[test]
    fn channel_reduction_is_the_chunk_mean(c_out in 1usize..6, r in 1usize..5, vals in values()) {
        let s = Shape::new(2, c_out * r, 2, 3);
        let x = tensor(s, &vals);
        let y = map_channels(&x, c_out, 1).unwrap();
        for n in 0..2 {
            for ch in 0..c_out {
                for p in 0..6 {
                    let want: f64 = (0..r).map(|i| x.at(n, i * c_out + ch, p / 3, p % 3) as f64).sum::<f64>() / r as f64;
                    prop_assert!((y.at(n, ch, p / 3, p % 3) as f64 - want).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn expand_then_reduce_is_identity(c in 1usize..6, r in 1usize..5, vals in values()) {
        let x = tensor(Shape::new(1, c, 3, 2), &vals);
        let back = map_channels(&map_channels(&x, c * r, 1).unwrap(), c, 1).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn mask_density_is_non_increasing_in_tau(vals in values(), t1 in 0.0f32..1.0, dt in 0.0f32..1.0) {
        let f = tensor(Shape::new(2, 3, 6, 6), &vals);
        let (lo, hi) = (compute_mask(&f, t1), compute_mask(&f, t1 + dt));
        prop_assert!(lo.density() >= hi.density());
        for k in [2usize, 4, 8, 16] {
            prop_assert!(upsample_mask(&lo, k).unwrap().density() >= upsample_mask(&hi, k).unwrap().density());
        }
    }

    #[test]
    fn chosen_threshold_beats_every_grid_candidate(vals in values(), c in 1usize..5) {
        let s = Shape::new(1, c, 5, 5);
        let f: Vec<f64> = (0..s.len()).map(|i| vals[i % vals.len()] as f64 + 0.01 * (i % 7) as f64).collect();
        let res = residual(&f, s);
        let grid = quantile_grid(&res, 9);
        let pick = optimize_threshold(&f, s, &grid).unwrap();
        for &tau in &grid {
            let mut m = BinaryMap::filled(1, 5, 5, false);
            for (b, r) in m.bits.iter_mut().zip(&res) {
                *b = (*r >= tau) as u8;
            }
            if let Some(h) = masked_sign_entropy(&f, s, &m) {
                prop_assert!(pick.entropy >= h);
            }
        }
        prop_assert!(pick.entropy <= bernoulli_entropy(0.5) + 1e-12);
    }

    #[test]
    fn matting_terms_are_non_negative_and_vanish_at_truth(vals in prop::collection::vec(0.0f64..1.0, 1..100), frames in 1usize..3) {
        let s = Shape::new(frames * 2, 1, 4, 4);
        let a: Vec<f64> = (0..s.len()).map(|i| vals[i % vals.len()]).collect();
        let f: Vec<f64> = (0..3 * s.len()).map(|i| vals[(i * 7) % vals.len()]).collect();
        for same in [true, false] {
            let mut t = Tape::new();
            let pa = t.leaf(if same { a.clone() } else { a.iter().map(|v| 1.0 - v).collect() }, s);
            let pf = t.leaf(if same { f.clone() } else { f.iter().map(|v| v * 0.5).collect() }, s.with_c(3));
            let ta = t.constant(a.clone(), s);
            let tf = t.constant(f.clone(), s.with_c(3));
            let l = matting_loss(&mut t, pa, pf, ta, tf, frames).unwrap();
            for v in [l.l1_alpha, l.lap_alpha, l.tc_alpha, l.l1_fg, l.tc_fg].into_iter().flatten() {
                let x = t.item(v);
                prop_assert!(x >= 0.0);
                if same {
                    prop_assert_eq!(x, 0.0);
                }
            }
        }
    }

    #[test]
    fn lbm_ignores_positive_feature_scaling(vals in prop::collection::vec(-2.0f64..2.0, 8..64), k in 0.1f64..10.0) {
        let s = Shape::new(2, 3, 2, 2);
        let f: Vec<f64> = (0..s.len()).map(|i| vals[i % vals.len()] + 0.01).collect();
        let g: Vec<f64> = (0..s.len()).map(|i| vals[(i * 5 + 1) % vals.len()] - 0.02).collect();
        let mask = BinaryMap::filled(2, 1, 1, true);
        let eval = |scale: f64| {
            let mut t = Tape::new();
            let fv = t.constant(f.iter().map(|v| v * scale).collect(), s);
            let gv = t.constant(g.clone(), s);
            let l = lbm_loss(&mut t, &[fv], &[gv], &mask).unwrap();
            t.item(l)
        };
        prop_assert!((eval(1.0) - eval(k)).abs() <= 1e-6 * eval(1.0).abs().max(1.0));
    }

    #[test]
    fn binned_mi_is_bounded_by_marginal_entropies(x in prop::collection::vec(-5.0f64..5.0, 2..400), bins in 2usize..20) {
        let t: Vec<f64> = x.iter().map(|v| (v * 3.0).sin()).collect();
        let mi = binned_mi(&x, &t, bins).unwrap();
        let cap = entropy(&bin_values(&x, bins)).min(entropy(&bin_values(&t, bins)));
        prop_assert!(mi >= -1e-9);
        prop_assert!(mi <= cap + 1e-9);
    }

    #[test]
    fn eight_bit_frames_round_trip(bytes in prop::collection::vec(any::<u8>(), 1..200), w in 1usize..9, rgb in any::<bool>()) {
        let c = if rgb { 3 } else { 1 };
        let h = bytes.len().div_ceil(w);
        let s = Shape::new(1, c, h, w);
        let t = DenseTensor::from_fn(s, |_, ch, y, x| bytes[(s.index(0, ch, y, x)) % bytes.len()] as f32 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.png");
        write_png(&p, &t).unwrap();
        prop_assert_eq!(read_png(&p).unwrap(), t.clone());
        if rgb {
            let q = dir.path().join("f.ppm");
            write_ppm(&q, &t).unwrap();
            prop_assert_eq!(read_ppm(&q).unwrap(), t);
        }
    }

    #[test]
    fn sparse_decoder_never_costs_more_than_dense(density in 0.0f64..1.0) {
        let mut sparse = ModelConfig::toy();
        sparse.decoder.mask_density = density;
        let mut dense = ModelConfig::toy();
        dense.decoder.mask_density = 1.0;
        let (a, b) = (profile(&sparse, 64, 64).unwrap(), profile(&dense, 64, 64).unwrap());
        let d = |p: &bivm::backend::Profile| p.flops[&Part::Decoder];
        prop_assert!(d(&a) <= d(&b));
    }
}

#[test]
fn sparse_decoder_cost_equals_dense_only_at_full_density() {
    let mut cfg = ModelConfig::bivm();
    let dec = |cfg: &ModelConfig| profile(cfg, 64, 64).unwrap().flops[&Part::Decoder];
    cfg.decoder.mask_density = 1.0;
    let full = dec(&cfg);
    cfg.decoder.mask_density = 0.999;
    assert!(dec(&cfg) < full);
}

#[test]
fn bernoulli_entropy_peaks_at_half() {
    for i in 0..=100 {
        assert!(bernoulli_entropy(i as f64 / 100.0) <= bernoulli_entropy(0.5));
    }
}
