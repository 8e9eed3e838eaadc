//! Deterministic self-checks behind `bivm verify`.
//!
//! Every check is seed-pinned and single-pass, so two runs print the same
//! lines bit for bit.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backend::{Backend, ConvLayer, Part, ShapeBackend, TapeBackend};
use crate::bits::{pack, unpack};
use crate::ebb::{Ebb, LAMBDA_EBB};
use crate::error::{Error, Result};
use crate::info;
use crate::kernels::{bconv2d, bconv2d_counted, float_conv_oracle, sparse_bconv2d, ConvSpec, OpCounter};
use crate::losses;
use crate::model::{profile, shb_block, ModelConfig};
use crate::params::{Group, ParamStore};
use crate::shb;
use crate::tape::{self, Tape, Var};
use crate::tensor::{BinaryMap, DenseTensor, Shape};
use crate::train;

pub const SEED: u64 = 0x00b1_7b17;
pub const KERNEL_CONFIGS: usize = 200;
pub const THRESHOLD_CASES: usize = 50;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Reference figures for the full binarized network at 512×288.
pub const REF_PARAMS_MB: f64 = 0.67;
pub const REF_GFLOPS: f64 = 0.32;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckResult { name, passed, detail }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Kernels,
    Sparse,
    Profile,
    Theorem1,
    Theorem2,
    Gradients,
    Threshold,
}

impl Suite {
    pub const NAMES: [&'static str; 8] = ["all", "kernels", "sparse", "profile", "theorem1", "theorem2", "gradients", "threshold"];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "kernels" => Suite::Kernels,
            "sparse" => Suite::Sparse,
            "profile" => Suite::Profile,
            "theorem1" => Suite::Theorem1,
            "theorem2" => Suite::Theorem2,
            "gradients" => Suite::Gradients,
            "threshold" => Suite::Threshold,
            _ => return Err(Error::Invalid(format!("unknown suite `{s}` (one of {})", Suite::NAMES.join(", ")))),
        })
    }
}

pub fn run(suite: Suite) -> Result<Vec<CheckResult>> {
    let all = suite == Suite::All;
    let mut out = Vec::new();
    if all || suite == Suite::Kernels {
        out.push(kernel_oracle(KERNEL_CONFIGS, SEED)?);
    }
    if all || suite == Suite::Sparse {
        out.push(sparse_conv(SEED)?);
        out.push(shb_all_ones(SEED)?);
    }
    if all || suite == Suite::Profile {
        out.extend(profile_targets()?);
    }
    if all || suite == Suite::Theorem1 {
        out.push(theorem1(SEED)?);
    }
    if all || suite == Suite::Theorem2 {
        out.push(theorem2(SEED)?);
    }
    if all || suite == Suite::Gradients {
        out.extend(gradients(SEED)?);
    }
    if all || suite == Suite::Threshold {
        out.push(threshold_oracle(THRESHOLD_CASES, SEED)?);
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, s: Shape) -> DenseTensor {
    DenseTensor::from_fn(s, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// ±1 values of `x` after binarization at `tau`, spatially padded by `p`
/// with the binarized zero (what the packed kernel uses at the border).
fn signs_padded(x: &DenseTensor, tau: f32, p: usize) -> DenseTensor {
    let s = x.shape();
    let border = if 0.0 - tau >= 0.0 { 1.0 } else { -1.0 };
    DenseTensor::from_fn(s.with_hw(s.h + 2 * p, s.w + 2 * p), |n, c, y, xx| {
        if y < p || xx < p || y >= s.h + p || xx >= s.w + p {
            border
        } else if x.at(n, c, y - p, xx - p) - tau >= 0.0 {
            1.0
        } else {
            -1.0
        }
    })
}

/// Packed convolution against the float oracle on sign-valued inputs.
pub fn kernel_oracle(configs: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_rel = 0.0f64;
    let mut mismatches = 0usize;
    for _ in 0..configs {
        let c = rng.gen_range(1..=65);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let groups = if rng.gen_bool(0.5) { 1 } else { c };
        let c_out = if groups == 1 { rng.gen_range(1..=65) } else { c * rng.gen_range(1..=2) };
        let (h, w) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
        let n = rng.gen_range(1..=2);
        let tau: f32 = if rng.gen_bool(0.5) { rng.gen_range(-0.5..0.5) } else { 0.0 };
        let s: f32 = rng.gen_range(0.01..2.0);
        let spec = ConvSpec::same(k, stride, 1).with_groups(groups);
        let x = uniform(&mut rng, Shape::new(n, c, h, w));
        let wt = uniform(&mut rng, Shape::new(c_out, c / groups, k, k));
        let (xb, wb) = (pack(&x, tau)?, pack(&wt, 0.0)?);
        let exact = bconv2d(&xb, &wb, 1.0, &spec)?;
        let scaled = bconv2d(&xb, &wb, s, &spec)?;
        let unpadded = ConvSpec { padding: 0, ..spec };
        let oracle = float_conv_oracle(&signs_padded(&x, tau, spec.padding), &unpack(&wb), &unpadded)?;
        if exact != oracle {
            mismatches += 1;
        }
        for (a, b) in scaled.data().iter().zip(oracle.data()) {
            let want = s as f64 * *b as f64;
            worst_rel = worst_rel.max((*a as f64 - want).abs() / want.abs().max(1.0));
        }
    }
    Ok(CheckResult::new(
        "kernel-oracle",
        mismatches == 0 && worst_rel <= 1e-6,
        format!("{configs} configs, {mismatches} integer mismatches, worst scaled rel err {worst_rel:.2e}"),
    ))
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> BinaryMap {
    let p = rng.gen_range(0.0..1.0);
    let mut m = BinaryMap::filled(n, h, w, false);
    m.bits.iter_mut().for_each(|b| *b = rng.gen_bool(p) as u8);
    m
}

/// Sparse packed convolution against the dense path, plus its MAC count.
pub fn sparse_conv(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let (mut bad_values, mut bad_counts) = (0usize, 0usize);
    const CASES: usize = 60;
    for _ in 0..CASES {
        let c = rng.gen_range(1..=70);
        let c_out = rng.gen_range(1..=40);
        let k = [1, 3][rng.gen_range(0..2)];
        let spec = ConvSpec::same(k, 1, 1);
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=10), rng.gen_range(1..=10));
        let xb = pack(&uniform(&mut rng, Shape::new(n, c, h, w)), rng.gen_range(-0.3..0.3))?;
        let wb = pack(&uniform(&mut rng, Shape::new(c_out, c, k, k)), 0.0)?;
        let s = rng.gen_range(0.1..1.0);
        let mask = random_mask(&mut rng, n, h, w);
        let dense = bconv2d_counted(&xb, &wb, s, &spec, &OpCounter::new())?;
        let ops = OpCounter::new();
        let sparse = sparse_bconv2d(&xb, &wb, s, &spec, &mask, &ops)?;
        for b in 0..n {
            for oc in 0..c_out {
                for y in 0..h {
                    for x in 0..w {
                        let want = if mask.get(b, y, x) { dense.at(b, oc, y, x) } else { 0.0 };
                        if sparse.at(b, oc, y, x) != want {
                            bad_values += 1;
                        }
                    }
                }
            }
        }
        if ops.get() != mask.count() as u64 * spec.macs_per_pixel(c, c_out) {
            bad_counts += 1;
        }
    }
    Ok(CheckResult::new(
        "sparse-conv",
        bad_values == 0 && bad_counts == 0,
        format!("{CASES} cases, {bad_values} value mismatches, {bad_counts} MAC-count mismatches"),
    ))
}

/// A sparse block under an all-ones mask against its dense counterpart.
pub fn shb_all_ones(seed: u64) -> Result<CheckResult> {
    let (c, c_out, h, w) = (24, 16, 8, 8);
    let mut sb = ShapeBackend::new(seed, 1.0);
    let xs = Shape::new(2, c, h, w);
    let ones = (Shape::new(2, 1, h, w), 1.0);
    shb_block(&mut sb, &xs, "blk", c_out, true, &ones)?;
    let store = randomize_bn(sb.store, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let x = uniform(&mut rng, xs);
    let mut b = crate::backend::InferBackend::new(&store);
    let sparse = shb_block(&mut b, &x, "blk", c_out, true, &BinaryMap::filled(2, h, w, true))?;
    let g = Group::Decoder;
    let d3 = b.conv(&x, &ConvLayer::new("blk.conv3", c, c_out, ConvSpec::same(3, 1, 1), true, g))?;
    let d1 = b.conv(&x, &ConvLayer::new("blk.conv1", c, c_out, ConvSpec::new(1, 1, 0), true, g))?;
    let dense = b.add(&d3, &d1)?;
    let diff = sparse.max_abs_diff(&dense);
    Ok(CheckResult::new("shb-all-ones", diff == 0.0, format!("max |sparse - dense| = {diff:e}")))
}

/// Non-trivial batch-norm statistics so folded affines are exercised.
fn randomize_bn(mut store: ParamStore, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        let p = store.get_mut(&n).expect("listed parameter");
        let (lo, hi) = if n.ends_with("bn.var") || n.ends_with("bn.gamma") {
            (0.5, 1.5)
        } else if n.ends_with("bn.mean") || n.ends_with("bn.beta") {
            (-0.5, 0.5)
        } else {
            continue;
        };
        p.data.iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
    }
    store
}

pub fn profile_targets() -> Result<Vec<CheckResult>> {
    let p = profile(&ModelConfig::bivm(), 288, 512)?;
    let (mb, g) = (p.params_mb(), p.gflops());
    let base = profile(&ModelConfig::baseline(), 288, 512)?;
    let share = base.flop_share(Part::Decoder);
    Ok(vec![
        CheckResult::new(
            "profile-bivm",
            (mb / REF_PARAMS_MB - 1.0).abs() <= 0.15 && (g / REF_GFLOPS - 1.0).abs() <= 0.25,
            format!("512x288: {mb:.4} MB (ref {REF_PARAMS_MB}, ±15%), {g:.4} GFLOPs (ref {REF_GFLOPS}, ±25%)"),
        ),
        CheckResult::new("profile-baseline-split", share > 0.6, format!("decoder FLOP share {:.1}% (> 60%)", 100.0 * share)),
    ])
}

pub fn theorem1(seed: u64) -> Result<CheckResult> {
    let r = info::theorem1_check(info::DEFAULT_SAMPLES, 1.0, 0.0, 64, seed)?;
    let gap = r.mi_t - r.mi_that;
    Ok(CheckResult::new(
        "theorem1",
        r.holds() && gap >= 1.0,
        format!("I(X;T^) = {:.4} <= {:.4} + {}, I(X;T) = {:.4} (gap {gap:.3} nats)", r.mi_that, r.bound, info::MI_TOLERANCE, r.mi_t),
    ))
}

pub fn theorem2(seed: u64) -> Result<CheckResult> {
    let r = info::theorem2_check(info::DEFAULT_SAMPLES, &[8, 6, 4, 2], info::DEFAULT_BINS, seed)?;
    let mi: Vec<String> = r.mi.iter().map(|v| format!("{v:.4}")).collect();
    Ok(CheckResult::new("theorem2", r.monotone, format!("I(X;T_k) = [{}] nats", mi.join(", "))))
}

fn normal(rng: &mut ChaCha8Rng, n: usize, k: f64) -> Vec<f64> {
    (0..n).map(|_| k * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `Σ y ⊙ r` with a fixed random `r`, so no output direction cancels.
fn project(b: &mut TapeBackend<'_>, y: Var, seed: u64) -> Result<Var> {
    let s = b.shape(&y);
    let r = normal(&mut ChaCha8Rng::seed_from_u64(seed), s.len(), 1.0);
    let r = b.tape.constant(r, s);
    let m = b.tape.mul(y, r)?;
    Ok(b.tape.sum(m))
}

fn block_check(name: &'static str, seed: u64, xs: Shape, build: &dyn Fn(&mut dyn BlockRunner) -> Result<()>) -> Result<CheckResult> {
    let mut sb = ShapeRunner(ShapeBackend::new(seed, 1.0));
    build(&mut sb)?;
    let store = randomize_bn(sb.0.store, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
    let x = normal(&mut rng, xs.len(), 1.0);
    let err = train::grad_check(&store, 24, seed, |b| {
        let xv = b.input(x.clone(), xs);
        let mut r = TapeRunner { b, x: xv, out: None };
        build(&mut r)?;
        let y = r.out.ok_or_else(|| Error::Invalid("block produced no output".into()))?;
        project(r.b, y, seed)
    })?;
    Ok(CheckResult::new(name, err < GRAD_TOLERANCE, format!("max rel err {err:.2e}")))
}

/// Lets one block description run on the shape and tape backends.
trait BlockRunner {
    fn conv(&mut self, l: &ConvLayer) -> Result<()>;
    fn ebb(&mut self, e: &Ebb) -> Result<()>;
    fn shb(&mut self, name: &str, c_out: usize) -> Result<()>;
}

struct ShapeRunner(ShapeBackend);

struct TapeRunner<'a, 'b> {
    b: &'a mut TapeBackend<'b>,
    x: Var,
    out: Option<Var>,
}

fn input_shape(c: usize) -> Shape {
    Shape::new(2, c, 8, 8)
}

impl BlockRunner for ShapeRunner {
    fn conv(&mut self, l: &ConvLayer) -> Result<()> {
        let xs = input_shape(l.c_in);
        self.0.conv(&xs, l).map(|_| ())
    }

    fn ebb(&mut self, e: &Ebb) -> Result<()> {
        let xs = input_shape(e.head.c_in);
        e.forward(&mut self.0, &xs).map(|_| ())
    }

    fn shb(&mut self, name: &str, c_out: usize) -> Result<()> {
        let xs = input_shape(GRAD_SHB_IN);
        shb_block(&mut self.0, &xs, name, c_out, true, &(xs.with_c(1), 1.0)).map(|_| ())
    }
}

impl BlockRunner for TapeRunner<'_, '_> {
    fn conv(&mut self, l: &ConvLayer) -> Result<()> {
        self.out = Some(self.b.conv(&self.x, l)?);
        Ok(())
    }

    fn ebb(&mut self, e: &Ebb) -> Result<()> {
        self.out = Some(e.forward(self.b, &self.x)?);
        Ok(())
    }

    fn shb(&mut self, name: &str, c_out: usize) -> Result<()> {
        let s = self.b.shape(&self.x);
        self.out = Some(shb_block(self.b, &self.x, name, c_out, true, &BinaryMap::filled(s.n, s.h, s.w, true))?);
        Ok(())
    }
}

const GRAD_SHB_IN: usize = 12;

/// Float-mode finite differences on one conv, one block of each kind and
/// every loss term.
pub fn gradients(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    out.push(block_check("grad-conv", seed, Shape::new(2, 6, 8, 8), &|r| {
        r.conv(&ConvLayer::new("c", 6, 5, ConvSpec::same(3, 1, 1), true, Group::Backbone))
    })?);
    out.push(block_check("grad-ebb", seed, Shape::new(2, 8, 8, 8), &|r| {
        r.ebb(&Ebb::new("e", 8, [8, 16, 8], 1, 1, true)?)
    })?);
    out.push(block_check("grad-shb", seed, Shape::new(2, GRAD_SHB_IN, 8, 8), &|r| r.shb("s", 8))?);
    out.extend(loss_gradients(seed)?);
    Ok(out)
}

fn loss_gradients(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
    let s = Shape::new(2, 1, 8, 8);
    let s3 = s.with_c(3);
    let unit = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.gen_range(0.02..0.98)).collect::<Vec<f64>>();
    let pred = vec![(unit(&mut rng, s.len()), s), (unit(&mut rng, s3.len()), s3)];
    let ta: Vec<f64> = (0..s.len()).map(|_| rng.gen_range(-0.5f64..1.0).max(0.0)).collect();
    let tf = unit(&mut rng, s3.len());
    let mut out = Vec::new();
    const TERMS: [&str; 5] = ["grad-loss-l1-alpha", "grad-loss-lap-alpha", "grad-loss-tc-alpha", "grad-loss-l1-fg", "grad-loss-tc-fg"];
    for (k, name) in TERMS.iter().enumerate() {
        let err = tape::grad_check(&pred, |t, v| {
            let a = t.constant(ta.clone(), s);
            let f = t.constant(tf.clone(), s3);
            let l = losses::matting_loss(t, v[0], v[1], a, f, s.n)?;
            [l.l1_alpha, l.lap_alpha, l.tc_alpha, l.l1_fg, l.tc_fg][k].ok_or_else(|| Error::Invalid(format!("{name} missing")))
        })?;
        out.push(CheckResult::new(name, err < GRAD_TOLERANCE, format!("max rel err {err:.2e}")));
    }

    let logits = vec![(normal(&mut rng, s.len(), 2.0), s)];
    let target: Vec<f64> = (0..s.len()).map(|_| rng.gen_bool(0.4) as u8 as f64).collect();
    let err = tape::grad_check(&logits, |t, v| losses::seg_loss(t, v[0], &target))?;
    out.push(CheckResult::new("grad-loss-seg", err < GRAD_TOLERANCE, format!("max rel err {err:.2e}")));

    let scales: Vec<Shape> = [(8, 8, 4), (4, 4, 6), (2, 2, 8), (1, 1, 10)].iter().map(|&(h, w, c)| Shape::new(2, c, h, w)).collect();
    let student: Vec<(Vec<f64>, Shape)> = scales.iter().map(|&sh| (normal(&mut rng, sh.len(), 1.0), sh)).collect();
    let teacher: Vec<(Vec<f64>, Shape)> = scales.iter().map(|&sh| (normal(&mut rng, sh.len(), 1.0), sh)).collect();
    let mut mask = random_mask(&mut rng, 2, 1, 1);
    mask.bits = vec![1, 1];
    let err = tape::grad_check(&student, |t, v| {
        let tv: Vec<Var> = teacher.iter().map(|(d, sh)| t.constant(d.clone(), *sh)).collect();
        losses::lbm_loss(t, v, &tv, &mask)
    })?;
    out.push(CheckResult::new("grad-loss-lbm", err < GRAD_TOLERANCE, format!("max rel err {err:.2e}")));

    let gains = vec![(vec![0.3], Shape::scalar()), (vec![-0.2], Shape::scalar()), (vec![0.05], Shape::scalar())];
    let err = tape::grad_check(&gains, |t: &mut Tape, v| {
        let r = losses::ebb_reg(t, v)?;
        Ok(t.scale(r, LAMBDA_EBB))
    })?;
    out.push(CheckResult::new("grad-loss-ebb", err < GRAD_TOLERANCE, format!("max rel err {err:.2e}")));
    Ok(out)
}

/// Entropy-optimal threshold against an exhaustive scan of the same grid,
/// on centred ramp features with salt noise.
pub fn threshold_oracle(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 6);
    let (mut disagree, mut low) = (0usize, 0usize);
    let mut min_h = f64::INFINITY;
    for _ in 0..cases {
        let s = Shape::new(rng.gen_range(1..=2), rng.gen_range(1..=32), rng.gen_range(2..=12), rng.gen_range(2..=12));
        let slope = rng.gen_range(0.2..2.0);
        let salt = rng.gen_range(0.02..0.3);
        let f: Vec<f64> = (0..s.len())
            .map(|i| {
                let (c, y, x) = ((i / s.plane()) % s.c, (i / s.w) % s.h, i % s.w);
                let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
                let ramp = sign * slope * ((x + y) as f64 - (s.w + s.h - 2) as f64 / 2.0) / s.w.max(s.h) as f64;
                let spike = if rng.gen_bool(salt) { rng.gen_range(-3.0..3.0) } else { 0.0 };
                ramp + spike + 0.05 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let res = shb::residual(&f, s);
        let grid = shb::quantile_grid(&res, shb::GRID_SIZE);
        let got = shb::optimize_threshold(&f, s, &grid)?;
        let mut best: Option<(f64, f64)> = None;
        for &tau in &grid {
            let (mut pos, mut tot) = (0usize, 0usize);
            for n in 0..s.n {
                for p in 0..s.plane() {
                    if res[n * s.plane() + p] >= tau {
                        for c in 0..s.c {
                            tot += 1;
                            pos += (f[((n * s.c + c) * s.plane()) + p] >= 0.0) as usize;
                        }
                    }
                }
            }
            if tot == 0 {
                continue;
            }
            let q = pos as f64 / tot as f64;
            let h = -[q, 1.0 - q].iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
            if best.is_none_or(|(bh, bt)| h > bh || (h == bh && tau > bt)) {
                best = Some((h, tau));
            }
        }
        let (bh, bt) = best.ok_or_else(|| Error::Invalid("empty grid".into()))?;
        if bt != got.tau {
            disagree += 1;
        }
        min_h = min_h.min(bh);
        if bh < 0.95 * std::f64::consts::LN_2 {
            low += 1;
        }
    }
    Ok(CheckResult::new(
        "threshold-oracle",
        disagree == 0 && low == 0,
        format!("{cases} features, {disagree} disagreements, min entropy {min_h:.4} (>= 0.95 ln 2 = {:.4})", 0.95 * std::f64::consts::LN_2),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for n in Suite::NAMES {
            assert!(n.parse::<Suite>().is_ok(), "{n}");
        }
        assert!("kernel".parse::<Suite>().is_err());
    }

    #[test]
    fn all_suites_pass() {
        let results = run(Suite::All).unwrap();
        for r in &results {
            println!("{r}");
        }
        assert!(results.len() >= 18);
        assert!(results.iter().all(|r| r.passed));
    }
}
