//! Binned (plug-in) mutual-information estimates and the two binarization
//! information checks: a 1-bit channel caps I(X; T̂), and composing layers
//! never adds information about the input.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{encode, Model};
use crate::synth::Clip;
use crate::train::{run_stage, StagePlan, Teacher, STEPS_PER_EPOCH};

pub const DEFAULT_BINS: usize = 16;
pub const DEFAULT_SAMPLES: usize = 100_000;
/// Slack on estimated information inequalities, in nats.
pub const MI_TOLERANCE: f64 = 0.05;

/// Equal-width bin index of every value over the sample range.
pub fn bin_values(v: &[f64], bins: usize) -> Vec<usize> {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(hi > lo) {
        return vec![0; v.len()];
    }
    let k = bins as f64 / (hi - lo);
    v.iter().map(|&x| (((x - lo) * k) as usize).min(bins - 1)).collect()
}

/// Joint symbols of `dim`-dimensional rows, each coordinate binned
/// separately; symbols are numbered in order of first appearance.
pub fn bin_rows(data: &[f64], dim: usize, bins: usize) -> Result<Vec<usize>> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::Invalid(format!("{} values do not split into rows of {dim}", data.len())));
    }
    let n = data.len() / dim;
    let cols: Vec<Vec<usize>> =
        (0..dim).map(|d| bin_values(&(0..n).map(|i| data[i * dim + d]).collect::<Vec<_>>(), bins)).collect();
    let mut ids: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    Ok((0..n)
        .map(|i| {
            let key: Vec<usize> = cols.iter().map(|c| c[i]).collect();
            let next = ids.len();
            *ids.entry(key).or_insert(next)
        })
        .collect())
}

fn plogp_sum<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts.map(|&c| c as f64 / n).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

/// Plug-in entropy of discrete symbols, in nats.
pub fn entropy(a: &[usize]) -> f64 {
    let mut h: BTreeMap<usize, usize> = BTreeMap::new();
    for &s in a {
        *h.entry(s).or_default() += 1;
    }
    plogp_sum(h.values(), a.len() as f64)
}

/// Plug-in mutual information of paired discrete symbols, in nats.
pub fn discrete_mi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Invalid(format!("need equal, non-empty sample counts ({} vs {})", a.len(), b.len())));
    }
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
    }
    let hj = plogp_sum(joint.values(), a.len() as f64);
    Ok((entropy(a) + entropy(b) - hj).max(0.0))
}

/// I(X; T) from the joint histogram of two scalar samples.
pub fn binned_mi(x: &[f64], t: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Invalid(format!("need at least 2 bins, got {bins}")));
    }
    if x.len() != t.len() {
        return Err(Error::Invalid(format!("sample counts differ: {} vs {}", x.len(), t.len())));
    }
    discrete_mi(&bin_values(x, bins), &bin_values(t, bins))
}

pub fn normal_samples(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn sgn(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Theorem1Report {
    /// I(X; aX + b).
    pub mi_t: f64,
    /// I(X; a·sign(X) + b).
    pub mi_that: f64,
    /// 2·ln 2.
    pub bound: f64,
}

impl Theorem1Report {
    pub fn holds(&self) -> bool {
        self.mi_that <= self.bound + MI_TOLERANCE
    }
}

/// Estimates for `X ~ N(0, 1)`, `T = aX + b` and `T̂ = a·sign(X) + b`.
pub fn theorem1_check(n: usize, a: f64, b: f64, bins: usize, seed: u64) -> Result<Theorem1Report> {
    if a == 0.0 || !a.is_finite() || !b.is_finite() {
        return Err(Error::Invalid(format!("need a finite, non-zero slope (a = {a}, b = {b})")));
    }
    let x = normal_samples(n, seed);
    let t: Vec<f64> = x.iter().map(|&v| a * v + b).collect();
    let th: Vec<f64> = x.iter().map(|&v| a * sgn(v) + b).collect();
    Ok(Theorem1Report { mi_t: binned_mi(&x, &t, bins)?, mi_that: binned_mi(&x, &th, bins)?, bound: 2.0 * std::f64::consts::LN_2 })
}

/// `t ↦ sign(W·t + c)` with `W` stored row-major (out × in).
#[derive(Clone, Debug, PartialEq)]
pub struct SignLayer {
    pub w: Vec<f64>,
    pub c: Vec<f64>,
    pub d_in: usize,
}

impl SignLayer {
    pub fn random(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        let w = (0..d_in * d_out).map(|_| rng.sample(StandardNormal)).collect();
        let c = (0..d_out).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        SignLayer { w, c, d_in }
    }

    pub fn d_out(&self) -> usize {
        self.c.len()
    }

    pub fn apply(&self, t: &[f64]) -> Vec<f64> {
        self.c
            .iter()
            .enumerate()
            .map(|(o, &c)| sgn(self.w[o * self.d_in..(o + 1) * self.d_in].iter().zip(t).map(|(w, v)| w * v).sum::<f64>() + c))
            .collect()
    }
}

/// I(X; T_k) for `T_k = f_k(T_{k−1})`, `T_0 = X`, with `X` given as rows of
/// `dim` values.
pub fn chain_mi(x: &[f64], dim: usize, chain: &[&dyn Fn(&[f64]) -> Vec<f64>], bins: usize) -> Result<Vec<f64>> {
    let xs = bin_rows(x, dim, bins)?;
    let mut cur: Vec<Vec<f64>> = x.chunks(dim).map(<[f64]>::to_vec).collect();
    let mut out = Vec::with_capacity(chain.len());
    for f in chain {
        cur = cur.iter().map(|r| f(r)).collect();
        let d = cur.first().map_or(0, Vec::len);
        if cur.iter().any(|r| r.len() != d) {
            return Err(Error::Invalid("layer output width varies between samples".into()));
        }
        let flat: Vec<f64> = cur.iter().flatten().copied().collect();
        out.push(discrete_mi(&xs, &bin_rows(&flat, d, bins)?)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem2Report {
    pub mi: Vec<f64>,
    pub monotone: bool,
}

pub fn is_non_increasing(v: &[f64], tol: f64) -> bool {
    v.windows(2).all(|w| w[1] <= w[0] + tol)
}

/// Random chain of binarizing layers of the given widths applied to
/// two-dimensional Gaussian inputs.
pub fn theorem2_check(n: usize, widths: &[usize], bins: usize, seed: u64) -> Result<Theorem2Report> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(Error::Invalid(format!("bad layer widths {widths:?}")));
    }
    const DIM: usize = 2;
    let x = normal_samples(n * DIM, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut d = DIM;
    let layers: Vec<SignLayer> = widths
        .iter()
        .map(|&w| {
            let l = SignLayer::random(&mut rng, d, w);
            d = w;
            l
        })
        .collect();
    let fs: Vec<Box<dyn Fn(&[f64]) -> Vec<f64> + '_>> = layers.iter().map(|l| Box::new(move |t: &[f64]| l.apply(t)) as _).collect();
    let refs: Vec<&dyn Fn(&[f64]) -> Vec<f64>> = fs.iter().map(|f| f.as_ref()).collect();
    let mi = chain_mi(&x, DIM, &refs, bins)?;
    let monotone = is_non_increasing(&mi, MI_TOLERANCE);
    Ok(Theorem2Report { mi, monotone })
}

/// One information-plane point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfoPoint {
    pub epoch: usize,
    pub i_xt: f64,
    pub i_ty: f64,
}

/// Binned estimates on the 1/16 encoder output over every frame of `clips`.
///
/// Each spatial position is a sample. The network is deterministic, so
/// `I(X; T) = H(T)`; both quantities are averaged over channels, with `Y`
/// the mean ground-truth alpha of the position's receptive cell.
pub fn info_plane_point(model: &Model, clips: &[Clip], bins: usize) -> Result<(f64, f64)> {
    let mut feats: Vec<Vec<f64>> = Vec::new();
    let mut ys = Vec::new();
    for clip in clips {
        let mut b = crate::backend::InferBackend::new(&model.store);
        let f = encode(&mut b, &model.cfg, &clip.img)?.pop().ok_or_else(|| Error::Invalid("encoder has no outputs".into()))?;
        let (fs, s) = (f.shape(), clip.alpha.shape());
        if feats.is_empty() {
            feats = vec![Vec::new(); fs.c];
        }
        let (ky, kx) = (s.h.div_ceil(fs.h), s.w.div_ceil(fs.w));
        for n in 0..fs.n {
            for y in 0..fs.h {
                for x in 0..fs.w {
                    for (c, col) in feats.iter_mut().enumerate() {
                        col.push(f.at(n, c, y, x) as f64);
                    }
                    let (mut sum, mut cnt) = (0.0, 0usize);
                    for yy in y * ky..((y + 1) * ky).min(s.h) {
                        for xx in x * kx..((x + 1) * kx).min(s.w) {
                            sum += clip.alpha.at(n, 0, yy, xx) as f64;
                            cnt += 1;
                        }
                    }
                    ys.push(sum / cnt.max(1) as f64);
                }
            }
        }
    }
    if feats.is_empty() {
        return Err(Error::Invalid("no clips".into()));
    }
    let y = bin_values(&ys, bins);
    let (mut ixt, mut ity) = (0.0, 0.0);
    for col in &feats {
        let t = bin_values(col, bins);
        ixt += entropy(&t);
        ity += discrete_mi(&t, &y)?;
    }
    let c = feats.len() as f64;
    Ok((ixt / c, ity / c))
}

/// Trains stage 1 for `epochs` desk epochs, recording a point before
/// training and after every epoch.
pub fn info_plane_log(model: &mut Model, clips: &[Clip], epochs: usize, bins: usize, seed: u64) -> Result<Vec<InfoPoint>> {
    let plan = StagePlan::for_stage(1)?.with_steps(STEPS_PER_EPOCH);
    let mut out = Vec::with_capacity(epochs + 1);
    let (i_xt, i_ty) = info_plane_point(model, clips, bins)?;
    out.push(InfoPoint { epoch: 0, i_xt, i_ty });
    for e in 1..=epochs {
        run_stage(model, &plan, clips, seed.wrapping_add(e as u64), &Teacher::FloatMode)?;
        let (i_xt, i_ty) = info_plane_point(model, clips, bins)?;
        out.push(InfoPoint { epoch: e, i_xt, i_ty });
    }
    Ok(out)
}

pub fn write_info_csv(points: &[InfoPoint], mut w: impl Write) -> Result<()> {
    writeln!(w, "epoch,i_xt,i_ty")?;
    for p in points {
        writeln!(w, "{},{:.6},{:.6}", p.epoch, p.i_xt, p.i_ty)?;
    }
    Ok(())
}

pub fn save_info_csv(points: &[InfoPoint], path: &Path) -> Result<()> {
    write_info_csv(points, std::io::BufWriter::new(std::fs::File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_information_equals_entropy() {
        let x = normal_samples(20_000, 1);
        let h = entropy(&bin_values(&x, 30));
        assert!((binned_mi(&x, &x, 30).unwrap() - h).abs() < 1e-9);
    }

    #[test]
    fn independent_samples_carry_little_information() {
        let x = normal_samples(100_000, 2);
        let t = normal_samples(100_000, 3);
        assert!(binned_mi(&x, &t, 16).unwrap() < MI_TOLERANCE);
    }

    #[test]
    fn one_bit_channel() {
        let x = normal_samples(50_000, 4);
        let t: Vec<f64> = x.iter().map(|&v| if v > 0.3 { 1.0 } else { 0.0 }).collect();
        let mi = binned_mi(&x, &t, 64).unwrap();
        assert!(mi <= std::f64::consts::LN_2 + 1e-9);
        assert!(mi > 0.5, "{mi}");
    }

    #[test]
    fn hand_counted_joint() {
        // p(0,0) = p(1,1) = 1/2: one bit.
        assert!((discrete_mi(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        // Product distribution: zero.
        assert!(discrete_mi(&[0, 0, 1, 1], &[5, 7, 5, 7]).unwrap().abs() < 1e-12);
        assert!(discrete_mi(&[0], &[0, 1]).is_err());
        assert!(binned_mi(&[0.0, 1.0], &[0.0, 1.0], 1).is_err());
    }

    #[test]
    fn theorem1_rejects_zero_slope() {
        assert!(theorem1_check(100, 0.0, 1.0, 16, 0).is_err());
    }

    #[test]
    fn identity_chain_is_constant() {
        let x = normal_samples(4_000, 5);
        let id = |t: &[f64]| t.to_vec();
        let mi = chain_mi(&x, 2, &[&id, &id, &id], 8).unwrap();
        let h = entropy(&bin_rows(&x, 2, 8).unwrap());
        assert!(mi.iter().all(|m| (m - h).abs() < 1e-12), "{mi:?} vs {h}");
    }
}
