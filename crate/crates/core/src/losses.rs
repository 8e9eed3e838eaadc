//! Training objectives on the tape: the matting stack, mask-focused feature
//! distillation, segmentation and the classification pre-training loss.
//!
//! Clips are stacked along the batch axis, `frames` consecutive items per
//! clip.

use crate::ebb::LAMBDA_EBB;
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::tape::{Tape, Var};
use crate::tensor::{BinaryMap, Shape};

/// Weight of the temporal-coherence terms.
pub const TC_WEIGHT: f64 = 5.0;
pub const LAMBDA_LBM: f64 = 1e-4;
pub const LAP_LEVELS: usize = 5;
/// 5-tap binomial kernel (outer product gives the 5×5 blur).
pub const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Per-term weights of a [`LossReport`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1_alpha: f64,
    pub lap_alpha: f64,
    pub tc_alpha: f64,
    pub l1_fg: f64,
    pub tc_fg: f64,
    pub seg_bce: f64,
    pub lbm: f64,
    pub ebb_reg: f64,
}

impl LossWeights {
    /// Matting objective; distillation only when `lbm` is set.
    pub fn matting(lbm: bool) -> Self {
        LossWeights {
            l1_alpha: 1.0,
            lap_alpha: 1.0,
            tc_alpha: TC_WEIGHT,
            l1_fg: 1.0,
            tc_fg: TC_WEIGHT,
            seg_bce: 0.0,
            lbm: if lbm { LAMBDA_LBM } else { 0.0 },
            ebb_reg: LAMBDA_EBB,
        }
    }

    pub fn segmentation() -> Self {
        LossWeights {
            l1_alpha: 0.0,
            lap_alpha: 0.0,
            tc_alpha: 0.0,
            l1_fg: 0.0,
            tc_fg: 0.0,
            seg_bce: 1.0,
            lbm: 0.0,
            ebb_reg: LAMBDA_EBB,
        }
    }

    fn as_array(&self) -> [f64; 8] {
        [self.l1_alpha, self.lap_alpha, self.tc_alpha, self.l1_fg, self.tc_fg, self.seg_bce, self.lbm, self.ebb_reg]
    }
}

/// Loss term values and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l1_alpha: f64,
    pub lap_alpha: f64,
    pub tc_alpha: f64,
    pub l1_fg: f64,
    pub tc_fg: f64,
    pub seg_bce: f64,
    pub lbm: f64,
    pub ebb_reg: f64,
    pub total: f64,
}

impl LossReport {
    pub const NAMES: [&'static str; 8] = ["l1_alpha", "lap_alpha", "tc_alpha", "l1_fg", "tc_fg", "seg_bce", "lbm", "ebb_reg"];

    pub fn terms(&self) -> [f64; 8] {
        [self.l1_alpha, self.lap_alpha, self.tc_alpha, self.l1_fg, self.tc_fg, self.seg_bce, self.lbm, self.ebb_reg]
    }

    /// `L^M`, the weighted matting part alone.
    pub fn matting(&self) -> f64 {
        self.l1_alpha + self.lap_alpha + TC_WEIGHT * self.tc_alpha + self.l1_fg + TC_WEIGHT * self.tc_fg
    }

    fn weighted(terms: [f64; 8], w: &LossWeights) -> f64 {
        terms.iter().zip(w.as_array()).map(|(t, k)| t * k).sum()
    }
}

/// Loss terms on the tape; absent terms are zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossVars {
    pub l1_alpha: Option<Var>,
    pub lap_alpha: Option<Var>,
    pub tc_alpha: Option<Var>,
    pub l1_fg: Option<Var>,
    pub tc_fg: Option<Var>,
    pub seg_bce: Option<Var>,
    pub lbm: Option<Var>,
    pub ebb_reg: Option<Var>,
}

impl LossVars {
    fn slots(&self) -> [Option<Var>; 8] {
        [self.l1_alpha, self.lap_alpha, self.tc_alpha, self.l1_fg, self.tc_fg, self.seg_bce, self.lbm, self.ebb_reg]
    }

    /// Weighted sum as a scalar tape node.
    pub fn total(&self, t: &mut Tape, w: &LossWeights) -> Var {
        let mut acc = t.scalar(0.0);
        for (v, k) in self.slots().into_iter().zip(w.as_array()) {
            if let (Some(v), true) = (v, k != 0.0) {
                let s = t.scale(v, k);
                acc = t.add(acc, s).expect("scalar add");
            }
        }
        acc
    }

    pub fn report(&self, t: &Tape, w: &LossWeights) -> LossReport {
        let v = self.slots().map(|s| s.map_or(0.0, |v| t.item(v)));
        LossReport {
            l1_alpha: v[0],
            lap_alpha: v[1],
            tc_alpha: v[2],
            l1_fg: v[3],
            tc_fg: v[4],
            seg_bce: v[5],
            lbm: v[6],
            ebb_reg: v[7],
            total: LossReport::weighted(v, w),
        }
    }
}

pub fn l1(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = t.sub(a, b)?;
    let d = t.abs(d);
    Ok(t.mean(d))
}

fn blur(t: &mut Tape, x: Var, gain: f64) -> Result<Var> {
    let c = t.shape(x).c;
    let mut k = Vec::with_capacity(c * 25);
    for _ in 0..c {
        for a in BINOMIAL5 {
            for b in BINOMIAL5 {
                k.push(gain * a * b);
            }
        }
    }
    let w = t.constant(k, Shape::new(c, 1, 5, 5));
    let p = t.pad_reflect(x, 2);
    t.conv2d(p, w, ConvSpec::new(5, 1, 0).with_groups(c))
}

/// Band-pass levels, finest first. Odd sizes are cropped to even before
/// each reduction; stops early once a side drops below 2.
pub fn laplacian_pyramid(t: &mut Tape, x: Var, levels: usize) -> Result<Vec<Var>> {
    let mut cur = x;
    let mut out = Vec::with_capacity(levels);
    for _ in 0..levels {
        let s = t.shape(cur);
        if s.h < 2 || s.w < 2 {
            break;
        }
        cur = t.crop(cur, s.h - s.h % 2, s.w - s.w % 2)?;
        let b = blur(t, cur, 1.0)?;
        let down = t.subsample2(b);
        let z = t.zero_upsample2(down);
        let up = blur(t, z, 4.0)?;
        out.push(t.sub(cur, up)?);
        cur = down;
    }
    Ok(out)
}

/// `(1/L)·Σ_ℓ 2^(ℓ−1) · mean|L_ℓ(a) − L_ℓ(b)|` with `L` = [`LAP_LEVELS`].
pub fn laplacian_loss(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = t.sub(a, b)?;
    let pyr = laplacian_pyramid(t, d, LAP_LEVELS)?;
    let mut acc = t.scalar(0.0);
    for (l, band) in pyr.into_iter().enumerate() {
        let m = t.abs(band);
        let m = t.mean(m);
        let m = t.scale(m, (1u64 << l) as f64 / LAP_LEVELS as f64);
        acc = t.add(acc, m)?;
    }
    Ok(acc)
}

/// Forward frame differences `x[t] − x[t−1]` within each clip.
pub fn frame_diff(t: &mut Tape, x: Var, frames: usize) -> Result<Option<Var>> {
    let n = t.shape(x).n;
    if frames == 0 || n % frames != 0 {
        return Err(Error::Shape(format!("batch {n} is not a whole number of {frames}-frame clips")));
    }
    if frames < 2 {
        return Ok(None);
    }
    let mut parts = Vec::with_capacity(n / frames);
    for c in 0..n / frames {
        let late = t.slice_batch(x, c * frames + 1, frames - 1)?;
        let early = t.slice_batch(x, c * frames, frames - 1)?;
        parts.push(t.sub(late, early)?);
    }
    Ok(Some(t.concat_batch(&parts)?))
}

/// `mean|Δa − Δb|`; zero (with a warning) for single-frame clips.
pub fn temporal_l1(t: &mut Tape, a: Var, b: Var, frames: usize) -> Result<Var> {
    let d = t.sub(a, b)?;
    match frame_diff(t, d, frames)? {
        Some(dd) => {
            let m = t.abs(dd);
            Ok(t.mean(m))
        }
        None => {
            log::warn!("clips of one frame: temporal terms are zero");
            Ok(t.scalar(0.0))
        }
    }
}

/// Matting terms for predicted and true alpha (n, 1, h, w) and foreground
/// (n, 3, h, w). Foreground terms average over pixels where `α* > 0`.
pub fn matting_loss(
    t: &mut Tape,
    alpha: Var,
    fgr: Var,
    true_alpha: Var,
    true_fgr: Var,
    frames: usize,
) -> Result<LossVars> {
    let (sa, sf) = (t.shape(alpha), t.shape(fgr));
    if t.shape(true_alpha) != sa || t.shape(true_fgr) != sf || sa.c != 1 || sf != sa.with_c(3) {
        return Err(Error::Shape(format!("matting loss needs alpha (n,1,h,w) and fgr (n,3,h,w), got {sa} and {sf}")));
    }
    let l1_alpha = l1(t, alpha, true_alpha)?;
    let lap_alpha = laplacian_loss(t, alpha, true_alpha)?;
    let tc_alpha = temporal_l1(t, alpha, true_alpha, frames)?;

    let on: Vec<f64> = t.value(true_alpha).iter().map(|&a| (a > 0.0) as u8 as f64).collect();
    let active: f64 = on.iter().sum();
    let m = t.constant(on.clone(), sa);
    let d = t.sub(fgr, true_fgr)?;
    let md = t.mul(d, m)?;
    let a = t.abs(md);
    let s = t.sum(a);
    let l1_fg = t.scale(s, if active > 0.0 { 1.0 / (3.0 * active) } else { 0.0 });
    let tc_fg = match frame_diff(t, md, frames)? {
        Some(dd) => {
            let plane = sa.plane();
            let mut union = 0.0;
            for c in 0..sa.n / frames {
                for f in 1..frames {
                    let (cur, prev) = ((c * frames + f) * plane, (c * frames + f - 1) * plane);
                    union += (0..plane).filter(|&i| on[cur + i] > 0.0 || on[prev + i] > 0.0).count() as f64;
                }
            }
            let a = t.abs(dd);
            let s = t.sum(a);
            t.scale(s, if union > 0.0 { 1.0 / (3.0 * union) } else { 0.0 })
        }
        None => t.scalar(0.0),
    };
    Ok(LossVars {
        l1_alpha: Some(l1_alpha),
        lap_alpha: Some(lap_alpha),
        tc_alpha: Some(tc_alpha),
        l1_fg: Some(l1_fg),
        tc_fg: Some(tc_fg),
        ..Default::default()
    })
}

/// Nearest-neighbour resize of a mask (source index `⌊y·h/H⌋`).
pub fn resize_mask_nearest(m: &BinaryMap, h: usize, w: usize) -> BinaryMap {
    let mut out = BinaryMap::filled(m.n, h, w, false);
    for n in 0..m.n {
        for y in 0..h {
            for x in 0..w {
                out.set(n, y, x, m.get(n, y * m.h / h, x * m.w / w));
            }
        }
    }
    out
}

/// `f² / ‖f²‖₂` per item; `None` when some item has zero norm.
fn energy_map(t: &mut Tape, f: Var) -> Result<Option<Var>> {
    let sq = t.square(f);
    let q = t.square(sq);
    let q = t.sum_per_item(q);
    if t.value(q).iter().any(|&v| v <= 0.0) {
        return Ok(None);
    }
    let nrm = t.sqrt(q);
    Ok(Some(t.div(sq, nrm)?))
}

/// `Σ_scales mean_n ‖m·(f²/‖f²‖ − g²/‖g²‖)‖₂` with the 1/16 mask resized to
/// each scale. Scales with a zero-norm feature are skipped.
pub fn lbm_loss(t: &mut Tape, student: &[Var], teacher: &[Var], mask: &BinaryMap) -> Result<Var> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!("{} student vs {} teacher features", student.len(), teacher.len())));
    }
    let mut acc = t.scalar(0.0);
    for (i, (&f, &g)) in student.iter().zip(teacher).enumerate() {
        let s = t.shape(f);
        if t.shape(g) != s || mask.n != s.n {
            return Err(Error::Shape(format!("feature pair {i}: {s} vs {} with a mask of {} items", t.shape(g), mask.n)));
        }
        let (Some(qf), Some(qg)) = (energy_map(t, f)?, energy_map(t, g)?) else {
            log::warn!("feature {i} has zero norm; distillation term skipped");
            continue;
        };
        let m = resize_mask_nearest(mask, s.h, s.w);
        let mv = t.constant(m.bits.iter().map(|&b| b as f64).collect(), Shape::new(s.n, 1, s.h, s.w));
        let d = t.sub(qf, qg)?;
        let d = t.mul(d, mv)?;
        let d = t.square(d);
        let d = t.sum_per_item(d);
        let d = t.sqrt(d);
        let d = t.mean(d);
        acc = t.add(acc, d)?;
    }
    Ok(acc)
}

/// `Σ|γ|` over the given gain variables.
pub fn ebb_reg(t: &mut Tape, gains: &[Var]) -> Result<Var> {
    let mut acc = t.scalar(0.0);
    for &g in gains {
        let a = t.abs(g);
        let a = t.sum(a);
        acc = t.add(acc, a)?;
    }
    Ok(acc)
}

/// Mean binary cross-entropy of segmentation logits against a {0, 1} mask.
pub fn seg_loss(t: &mut Tape, logits: Var, target: &[f64]) -> Result<Var> {
    t.bce_with_logits(logits, target)
}

/// `CE + λ_EBB·Σ|γ|`.
pub fn pretraining_loss(t: &mut Tape, logits: Var, labels: &[usize], gains: &[Var]) -> Result<Var> {
    let ce = t.softmax_ce(logits, labels)?;
    let r = ebb_reg(t, gains)?;
    let r = t.scale(r, LAMBDA_EBB);
    t.add(ce, r)
}

/// `L^M + λ_LBM·L_LBM`; the distillation term only when given.
pub fn total_matting_loss(t: &mut Tape, matting: &LossVars, lbm: Option<Var>) -> Var {
    let mut v = LossVars { lbm, ..*matting };
    v.ebb_reg = None;
    v.seg_bce = None;
    v.total(t, &LossWeights::matting(lbm.is_some()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rnd(rng: &mut ChaCha8Rng, s: Shape, lo: f64, hi: f64) -> Vec<f64> {
        (0..s.len()).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn terms(pa: &[f64], pf: &[f64], ta: &[f64], tf: &[f64], s: Shape, frames: usize) -> LossReport {
        let mut t = Tape::new();
        let v: Vec<Var> = [(pa, 1), (pf, 3), (ta, 1), (tf, 3)]
            .iter()
            .map(|(d, c)| t.constant(d.to_vec(), s.with_c(*c)))
            .collect();
        let l = matting_loss(&mut t, v[0], v[1], v[2], v[3], frames).unwrap();
        l.report(&t, &LossWeights::matting(false))
    }

    #[test]
    fn identical_prediction_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Shape::new(2, 1, 32, 32);
        let a = rnd(&mut rng, s, 0.0, 1.0);
        let f = rnd(&mut rng, s.with_c(3), 0.0, 1.0);
        let r = terms(&a, &f, &a, &f, s, 2);
        assert!(r.terms().iter().all(|&v| v == 0.0), "{r:?}");
    }

    #[test]
    fn constant_bias_on_static_frames() {
        let s = Shape::new(3, 1, 32, 32);
        let ta: Vec<f64> = (0..s.len()).map(|i| (i % 32) as f64 / 40.0).collect();
        let pa: Vec<f64> = ta.iter().map(|v| v + 0.1).collect();
        let f = vec![0.5; s.len() * 3];
        let r = terms(&pa, &f, &ta, &f, s, 3);
        assert!((r.l1_alpha - 0.1).abs() < 1e-12);
        assert!(r.tc_alpha.abs() < 1e-12);
        assert!(r.lap_alpha.abs() < 1e-12, "a constant has no band-pass energy: {}", r.lap_alpha);
    }

    #[test]
    fn single_frame_clips_have_no_temporal_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Shape::new(2, 1, 32, 32);
        let (pa, ta) = (rnd(&mut rng, s, 0.0, 1.0), rnd(&mut rng, s, 0.0, 1.0));
        let (pf, tf) = (rnd(&mut rng, s.with_c(3), 0.0, 1.0), rnd(&mut rng, s.with_c(3), 0.0, 1.0));
        let r = terms(&pa, &pf, &ta, &tf, s, 1);
        assert_eq!((r.tc_alpha, r.tc_fg), (0.0, 0.0));
        assert!(r.l1_alpha > 0.0 && r.lap_alpha > 0.0 && r.l1_fg > 0.0);
    }

    #[test]
    fn report_total_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape::new(2, 1, 32, 32);
        let (pa, ta) = (rnd(&mut rng, s, 0.0, 1.0), rnd(&mut rng, s, 0.0, 1.0));
        let (pf, tf) = (rnd(&mut rng, s.with_c(3), 0.0, 1.0), rnd(&mut rng, s.with_c(3), 0.0, 1.0));
        let r = terms(&pa, &pf, &ta, &tf, s, 2);
        let want = r.l1_alpha + r.lap_alpha + 5.0 * r.tc_alpha + r.l1_fg + 5.0 * r.tc_fg;
        assert!((r.total - want).abs() < 1e-12);
        assert!((r.matting() - want).abs() < 1e-12);
    }

    #[test]
    fn lbm_identity_and_empty_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let shapes = [Shape::new(2, 3, 16, 16), Shape::new(2, 4, 8, 8), Shape::new(2, 5, 4, 4), Shape::new(2, 6, 2, 2)];
        let f: Vec<Var> = shapes.iter().map(|&s| t.constant(rnd(&mut rng, s, -1.0, 1.0), s)).collect();
        let g: Vec<Var> = shapes.iter().map(|&s| t.constant(rnd(&mut rng, s, -1.0, 1.0), s)).collect();
        let full = BinaryMap::filled(2, 2, 2, true);
        let same = lbm_loss(&mut t, &f, &f, &full).unwrap();
        assert_eq!(t.item(same), 0.0);
        let none = lbm_loss(&mut t, &f, &g, &BinaryMap::filled(2, 2, 2, false)).unwrap();
        assert_eq!(t.item(none), 0.0);
        let some = lbm_loss(&mut t, &f, &g, &full).unwrap();
        assert!(t.item(some) > 0.0);
    }

    #[test]
    fn nearest_mask_resize() {
        let mut m = BinaryMap::filled(1, 2, 2, false);
        m.set(0, 0, 1, true);
        let r = resize_mask_nearest(&m, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(r.get(0, y, x), y < 2 && x >= 2);
            }
        }
    }

    #[test]
    fn pretraining_terms() {
        let mut t = Tape::new();
        let logits = t.constant(vec![0.0; 6], Shape::new(2, 3, 1, 1));
        let g = t.constant(vec![0.0], Shape::scalar());
        let l = pretraining_loss(&mut t, logits, &[0, 2], &[g]).unwrap();
        assert!((t.item(l) - 3f64.ln()).abs() < 1e-12);
        let sharp = t.constant(vec![60.0, 0.0, 0.0, 0.0, 0.0, 60.0], Shape::new(2, 3, 1, 1));
        let l = pretraining_loss(&mut t, sharp, &[0, 2], &[g]).unwrap();
        assert!(t.item(l) < 1e-20);
        let gs: Vec<Var> = [0.002, -0.003, 0.5].iter().map(|&v| t.constant(vec![v], Shape::scalar())).collect();
        let base = t.softmax_ce(logits, &[0, 2]).unwrap();
        let l = pretraining_loss(&mut t, logits, &[0, 2], &gs).unwrap();
        assert!((t.item(l) - t.item(base) - 1e-4 * 0.505).abs() < 1e-15);
    }

    #[test]
    fn term_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Shape::new(2, 1, 8, 8);
        let inputs = vec![
            (rnd(&mut rng, s, 0.0, 1.0), s),
            (rnd(&mut rng, s.with_c(3), 0.0, 1.0), s.with_c(3)),
        ];
        let ta = rnd(&mut rng, s, -0.5, 1.0).iter().map(|v| v.max(0.0)).collect::<Vec<_>>();
        let tf = rnd(&mut rng, s.with_c(3), 0.0, 1.0);
        for k in 0..5 {
            let err = grad_check(&inputs, |t, v| {
                let a = t.constant(ta.clone(), s);
                let f = t.constant(tf.clone(), s.with_c(3));
                let l = matting_loss(t, v[0], v[1], a, f, 2)?;
                Ok([l.l1_alpha, l.lap_alpha, l.tc_alpha, l.l1_fg, l.tc_fg][k].unwrap())
            })
            .unwrap();
            assert!(err < 1e-4, "term {k}: {err}");
        }
    }
}
