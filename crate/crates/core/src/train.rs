//! Desk-scale four-stage matting training with Adam, straight-through
//! binarization, batch-norm running statistics and threshold freezing.
//!
//! Each paper epoch becomes [`STEPS_PER_EPOCH`] optimizer steps on one clip
//! window. Everything runs on one thread and is seed-pinned.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::infer::TAU_STAR;
use crate::backend::{Backend, TapeBackend, TauMode};
use crate::ebb::is_regularized;
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossVars, LossWeights};
use crate::model::{encode, forward, MaskMode, Model, ModelConfig};
use crate::ops;
use crate::params::{Group, ParamKind, ParamStore};
use crate::synth::Clip;
use crate::tape::{Var, FD_STEP};
use crate::tensor::{BinaryMap, DenseTensor, Shape};

pub const BN_MOMENTUM: f64 = 0.1;
/// Optimizer steps standing in for one epoch.
pub const STEPS_PER_EPOCH: usize = 10;
/// Epochs of the four matting stages.
pub const STAGE_EPOCHS: [usize; 4] = [20, 2, 1, 5];

/// Smallest peak gradient [`grad_check`] divides by.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, state: BTreeMap::new() }
    }
}

impl Adam {
    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update of every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: impl Fn(Group) -> f64) -> Result<()> {
        self.t += 1;
        let (c1, c2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if g.len() != p.data.len() {
                return Err(Error::Shape(format!("gradient of `{name}` has {} values for {}", g.len(), p.shape)));
            }
            let rate = lr(p.group);
            let (m, v) = self.state.entry(name.clone()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p.data[i] -= rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Schedule of one matting stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: usize,
    pub steps: usize,
    /// Clip length of the main pass.
    pub frames: usize,
    /// Upscale factor and clip length of the extra high-resolution pass.
    pub high_res: Option<(usize, usize)>,
    pub lr_backbone: f64,
    pub lr_decoder: f64,
    pub lr_other: f64,
    pub lbm: bool,
}

impl StagePlan {
    pub fn for_stage(stage: usize) -> Result<Self> {
        let steps = STAGE_EPOCHS.get(stage.wrapping_sub(1)).ok_or_else(|| Error::Invalid(format!("stage {stage} not in 1..=4")))?
            * STEPS_PER_EPOCH;
        let p = |frames, high_res, lb, ld, lo, lbm| StagePlan {
            stage,
            steps,
            frames,
            high_res,
            lr_backbone: lb,
            lr_decoder: ld,
            lr_other: lo,
            lbm,
        };
        Ok(match stage {
            1 => p(15, None, 1e-4, 2e-4, 2e-4, true),
            2 => p(50, None, 5e-5, 1e-4, 1e-4, false),
            3 => p(40, Some((2, 6)), 1e-5, 1e-5, 1e-5, false),
            _ => p(40, Some((2, 6)), 1e-5, 5e-5, 1e-5, false),
        })
    }

    pub fn lr(&self, g: Group) -> f64 {
        match g {
            Group::Backbone => self.lr_backbone,
            Group::Decoder => self.lr_decoder,
            Group::Other => self.lr_other,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }
}

/// Source of the full-precision features for distillation.
#[derive(Clone, Debug)]
pub enum Teacher {
    /// The student's own weights with binarization switched off.
    FloatMode,
    /// A separate full-precision network with matching feature shapes.
    Model(Model),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GainStats {
    /// Mean `|γC|` over cross-layer gains.
    pub cross: f64,
    /// Mean `|γB|` over block gains.
    pub block: f64,
    /// Mean `γL` over layer gains.
    pub layer: f64,
}

impl GainStats {
    pub fn of(store: &ParamStore) -> Self {
        let mean = |suffixes: &[&str], abs: bool| {
            let v: Vec<f64> = store
                .iter()
                .filter(|(n, p)| p.kind == ParamKind::Gain && suffixes.iter().any(|s| n.ends_with(s)))
                .map(|(_, p)| if abs { p.data[0].abs() } else { p.data[0] })
                .collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        GainStats { cross: mean(&[".gc1", ".gc2"], true), block: mean(&[".gb"], true), layer: mean(&[".gl1", ".gl2"], false) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: usize,
    pub loss: LossReport,
    pub gains: GainStats,
    /// Mask threshold used this step.
    pub tau: f64,
    pub mask_density: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub stage: usize,
    pub steps_per_epoch: usize,
    pub rows: Vec<LogRow>,
    /// Frozen threshold written at the end of the stage.
    pub tau_star: f64,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,stage,l1_alpha,lap_alpha,tc_alpha,l1_fg,tc_fg,seg_bce,lbm,ebb_reg,total,matting,gamma_c_mean,gamma_b_mean,gamma_l_mean,tau,mask_density";

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# steps_per_epoch={}", self.steps_per_epoch)?;
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            let l = &r.loss;
            let mut cols = vec![r.step.to_string(), r.stage.to_string()];
            cols.extend(l.terms().iter().map(|v| format!("{v:.9e}")));
            cols.extend([l.total, l.matting(), r.gains.cross, r.gains.block, r.gains.layer, r.tau, r.mask_density].map(|v| format!("{v:.9e}")));
            writeln!(w, "{}", cols.join(","))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

fn to_f64(t: &DenseTensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn upscale(t: &DenseTensor, k: usize) -> Result<DenseTensor> {
    let s = t.shape();
    let (v, os) = ops::resize_bilinear(t.data(), s, s.h * k, s.w * k);
    DenseTensor::from_vec(os, v)
}

/// Outputs of a clip run through the network on the tape.
pub struct ClipPass {
    pub alpha: Var,
    pub fgr: Var,
    pub seg: Var,
    pub feats: Vec<Var>,
    pub mask: Option<BinaryMap>,
}

fn join_maps(maps: Vec<BinaryMap>) -> Option<BinaryMap> {
    let mut it = maps.into_iter();
    let mut acc = it.next()?;
    for m in it {
        acc.n += m.n;
        acc.bits.extend(m.bits);
    }
    Some(acc)
}

/// Runs a clip; recurrent decoders step frame by frame.
pub fn forward_clip(b: &mut TapeBackend<'_>, cfg: &ModelConfig, img: Var) -> Result<ClipPass> {
    if !cfg.decoder.recurrent {
        let o = forward(b, cfg, &img, None, MaskMode::Computed)?;
        return Ok(ClipPass { alpha: o.alpha, fgr: o.fgr, seg: o.seg, feats: o.feats, mask: o.mask });
    }
    let n = b.shape(&img).n;
    let mut state: Option<Vec<Var>> = None;
    let mut outs = Vec::with_capacity(n);
    for t in 0..n {
        let f = b.slice_batch(&img, t, 1)?;
        let o = forward(b, cfg, &f, state.as_deref(), MaskMode::Computed)?;
        state = Some(o.state.clone());
        outs.push(o);
    }
    let cat = |b: &mut TapeBackend<'_>, f: &dyn Fn(&crate::model::Output<Var, BinaryMap>) -> Var| {
        b.concat_batch(&outs.iter().map(f).collect::<Vec<_>>())
    };
    let alpha = cat(b, &|o| o.alpha)?;
    let fgr = cat(b, &|o| o.fgr)?;
    let seg = cat(b, &|o| o.seg)?;
    let feats = (0..4).map(|i| cat(b, &|o| o.feats[i])).collect::<Result<Vec<_>>>()?;
    let mask = if outs.iter().all(|o| o.mask.is_some()) { join_maps(outs.iter().filter_map(|o| o.mask.clone()).collect()) } else { None };
    Ok(ClipPass { alpha, fgr, seg, feats, mask })
}

fn teacher_feats(teacher: &Teacher, student: &ParamStore, cfg: &ModelConfig, img: &[f64], s: Shape) -> Result<Vec<(Vec<f64>, Shape)>> {
    let (store, cfg) = match teacher {
        Teacher::FloatMode => (student, cfg),
        Teacher::Model(m) => (&m.store, &m.cfg),
    };
    let mut tb = TapeBackend::new(store).trainable(false).float_mode(matches!(teacher, Teacher::FloatMode));
    let x = tb.input(img.to_vec(), s);
    let feats = encode(&mut tb, cfg, &x)?;
    Ok(feats.iter().map(|&f| (tb.tape.value(f).to_vec(), tb.tape.shape(f))).collect())
}

/// Loss of one pass plus what the step needs afterwards.
struct PassResult {
    vars: LossVars,
    mask: Option<BinaryMap>,
}

fn matting_pass(b: &mut TapeBackend<'_>, cfg: &ModelConfig, clip: &Clip, lbm: Option<&Teacher>) -> Result<PassResult> {
    let s = clip.img.shape();
    let img_data = to_f64(&clip.img);
    let img = b.input(img_data.clone(), s);
    let out = forward_clip(b, cfg, img)?;
    let ta = b.input(to_f64(&clip.alpha), clip.alpha.shape());
    let tf = b.input(to_f64(&clip.fgr), clip.fgr.shape());
    let mut vars = losses::matting_loss(&mut b.tape, out.alpha, out.fgr, ta, tf, s.n)?;
    if let Some(teacher) = lbm {
        let tfeats = teacher_feats(teacher, b.store(), cfg, &img_data, s)?;
        let tvars: Vec<Var> = tfeats.into_iter().map(|(v, sh)| b.tape.constant(v, sh)).collect();
        let full;
        let mask = match &out.mask {
            Some(m) => m,
            None => {
                let f16 = b.shape(&out.feats[3]);
                full = BinaryMap::filled(s.n, f16.h, f16.w, true);
                &full
            }
        };
        vars.lbm = Some(losses::lbm_loss(&mut b.tape, &out.feats, &tvars, mask)?);
    }
    Ok(PassResult { vars, mask: out.mask })
}

fn add_opt(t: &mut crate::tape::Tape, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(t.add(a, b)?),
        (a, b) => a.or(b),
    })
}

/// One optimizer step on `clip` (plus its upscaled head for mixed-resolution
/// stages). Returns the loss report and mask statistics.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    plan: &StagePlan,
    clip: &Clip,
    high: Option<&Clip>,
    teacher: &Teacher,
) -> Result<(LossReport, f64, f64)> {
    let weights = LossWeights::matting(plan.lbm);
    let cfg = model.cfg.clone();
    let (report, grads, bn_stats, taus, density) = {
        let mut b = TapeBackend::new(&model.store).tau_mode(TauMode::Optimize);
        let main = matting_pass(&mut b, &cfg, clip, plan.lbm.then_some(teacher))?;
        let mut vars = main.vars;
        if let Some(h) = high {
            let extra = matting_pass(&mut b, &cfg, h, None)?.vars;
            let t = &mut b.tape;
            vars.l1_alpha = add_opt(t, vars.l1_alpha, extra.l1_alpha)?;
            vars.lap_alpha = add_opt(t, vars.lap_alpha, extra.lap_alpha)?;
            vars.tc_alpha = add_opt(t, vars.tc_alpha, extra.tc_alpha)?;
            vars.l1_fg = add_opt(t, vars.l1_fg, extra.l1_fg)?;
            vars.tc_fg = add_opt(t, vars.tc_fg, extra.tc_fg)?;
        }
        let mut gains: Vec<(String, Var)> =
            b.param_vars().filter(|(n, _)| is_regularized(n)).map(|(n, v)| (n.clone(), v)).collect();
        gains.sort_by(|a, b| a.0.cmp(&b.0));
        let gv: Vec<Var> = gains.iter().map(|g| g.1).collect();
        vars.ebb_reg = Some(losses::ebb_reg(&mut b.tape, &gv)?);
        let total = vars.total(&mut b.tape, &weights);
        let report = vars.report(&b.tape, &weights);
        if !report.total.is_finite() {
            return Err(Error::Diverged(format!("stage {} step {}: non-finite loss {report:?}", plan.stage, adam.steps() + 1)));
        }
        let g = b.tape.backward(total)?;
        let mut grads = BTreeMap::new();
        for (name, v) in b.param_vars() {
            if let Some(d) = g.get(v) {
                if d.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Diverged(format!("stage {} step {}: non-finite gradient in `{name}`", plan.stage, adam.steps() + 1)));
                }
                grads.insert(name.clone(), d.to_vec());
            }
        }
        let density = main.mask.as_ref().map_or(1.0, |m| m.density());
        let taus: Vec<f64> = b.tau_used.iter().map(|c| c.tau).collect();
        (report, grads, std::mem::take(&mut b.bn_stats), taus, density)
    };
    adam.step(&mut model.store, &grads, |g| plan.lr(g))?;
    for (layer, st) in bn_stats {
        for (key, batch) in [("bn.mean", &st.mean), ("bn.var", &st.var_unbiased)] {
            let p = model.store.get_mut(&format!("{layer}.{key}"))?;
            for (r, &v) in p.data.iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }
    for (name, p) in model.store.iter() {
        if p.kind == ParamKind::BinaryWeight && !p.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged(format!("binary weights of `{name}` became non-finite")));
        }
    }
    let tau = if taus.is_empty() { f64::NAN } else { taus.iter().sum::<f64>() / taus.len() as f64 };
    Ok((report, tau, density))
}

/// Trains one stage on `clips` and freezes the mean chosen threshold into
/// the model.
pub fn run_stage(model: &mut Model, plan: &StagePlan, clips: &[Clip], seed: u64, teacher: &Teacher) -> Result<TrainLog> {
    if clips.is_empty() {
        return Err(Error::Invalid("no training clips".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (plan.stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut adam = Adam::default();
    let mut rows = Vec::with_capacity(plan.steps);
    let mut taus = Vec::new();
    let available = clips.iter().map(Clip::frames).min().unwrap_or(0);
    let frames = plan.frames.min(available);
    if frames < plan.frames {
        log::warn!("stage {}: clips hold {available} frames, training on {frames} instead of {}", plan.stage, plan.frames);
    }
    for step in 0..plan.steps {
        let c = &clips[rng.gen_range(0..clips.len())];
        let start = rng.gen_range(0..=c.frames() - frames);
        let window = c.window(start, frames)?;
        let high = match plan.high_res {
            Some((k, t)) => {
                let w = window.window(0, t.min(frames))?;
                Some(Clip { img: upscale(&w.img, k)?, alpha: upscale(&w.alpha, k)?, fgr: upscale(&w.fgr, k)?, bgr: upscale(&w.bgr, k)? })
            }
            None => None,
        };
        let (loss, tau, mask_density) = train_step(model, &mut adam, plan, &window, high.as_ref(), teacher)?;
        if tau.is_finite() {
            taus.push(tau);
        }
        rows.push(LogRow { step, stage: plan.stage, loss, gains: GainStats::of(&model.store), tau, mask_density });
        log::debug!("stage {} step {step}: L^M {:.5} total {:.5}", plan.stage, loss.matting(), loss.total);
    }
    let tau_star = if taus.is_empty() { model.tau_star() } else { taus.iter().sum::<f64>() / taus.len() as f64 };
    if model.store.contains(TAU_STAR) {
        model.store.set_scalar(TAU_STAR, tau_star)?;
    }
    Ok(TrainLog { stage: plan.stage, steps_per_epoch: STEPS_PER_EPOCH, rows, tau_star })
}

/// Loss terms of the current parameters on the first `frames` frames of
/// every clip, averaged over clips. Nothing is updated.
pub fn evaluate_loss(model: &Model, clips: &[Clip], frames: usize, teacher: Option<&Teacher>) -> Result<LossReport> {
    let weights = LossWeights::matting(teacher.is_some());
    let mut acc = [0.0; 8];
    for c in clips {
        let w = c.window(0, frames.min(c.frames()))?;
        let mut b = TapeBackend::new(&model.store).trainable(false).tau_mode(TauMode::Optimize);
        let r = matting_pass(&mut b, &model.cfg, &w, teacher)?.vars.report(&b.tape, &weights);
        for (a, v) in acc.iter_mut().zip(r.terms()) {
            *a += v / clips.len() as f64;
        }
    }
    acc[7] = crate::ebb::ebb_regularizer(&model.store);
    Ok(LossReport {
        l1_alpha: acc[0],
        lap_alpha: acc[1],
        tc_alpha: acc[2],
        l1_fg: acc[3],
        tc_fg: acc[4],
        seg_bce: acc[5],
        lbm: acc[6],
        ebb_reg: acc[7],
        total: acc.iter().zip([weights.l1_alpha, weights.lap_alpha, weights.tc_alpha, weights.l1_fg, weights.tc_fg, weights.seg_bce, weights.lbm, weights.ebb_reg]).map(|(a, k)| a * k).sum(),
    })
}

/// Mean absolute alpha error of inference over whole clips.
pub fn dataset_mad(model: &Model, clips: &[Clip]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for c in clips {
        let r = model.infer(&c.img, MaskMode::Computed)?;
        sum += r.alpha.data().iter().zip(c.alpha.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        n += c.alpha.len();
    }
    Ok(sum / n.max(1) as f64)
}

/// Finite-difference check of parameter gradients with binarization off.
///
/// `f` builds a scalar on a float-mode backend over `store`. Up to
/// `per_tensor` coordinates of each trainable tensor are probed; the result
/// is the worst probed error relative to the tensor's peak gradient, with
/// the peak floored at [`GRAD_FLOOR`].
pub fn grad_check(
    store: &ParamStore,
    per_tensor: usize,
    seed: u64,
    f: impl Fn(&mut TapeBackend<'_>) -> Result<Var>,
) -> Result<f64> {
    let analytic: BTreeMap<String, Vec<f64>> = {
        let mut b = TapeBackend::new(store).float_mode(true);
        let out = f(&mut b)?;
        let g = b.tape.backward(out)?;
        b.param_vars().filter_map(|(n, v)| g.get(v).map(|d| (n.clone(), d.to_vec()))).collect()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut b = TapeBackend::new(s).float_mode(true).trainable(false);
        let out = f(&mut b)?;
        Ok(b.tape.item(out))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (name, an) in &analytic {
        let len = an.len();
        let idx: Vec<usize> = if len <= per_tensor { (0..len).collect() } else { (0..per_tensor).map(|_| rng.gen_range(0..len)).collect() };
        let (mut num, mut ana) = (Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len()));
        for &i in &idx {
            let orig = store.get(name)?.data[i];
            probe.get_mut(name)?.data[i] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.get_mut(name)?.data[i] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.get_mut(name)?.data[i] = orig;
            num.push((up - down) / (2.0 * FD_STEP));
            ana.push(an[i]);
        }
        let peak = an.iter().chain(&num).fold(0.0f64, |m, v| m.max(v.abs()));
        let err = num.iter().zip(&ana).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err / peak.max(GRAD_FLOOR));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut store = ParamStore::new();
        store
            .insert(
                "w",
                crate::params::Param { shape: Shape::new(1, 3, 1, 1), data: vec![1.0, 2.0, 3.0], kind: ParamKind::FpWeight, group: Group::Decoder },
            )
            .unwrap();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), vec![0.5, -2.0, 0.0]);
        let mut adam = Adam::default();
        adam.step(&mut store, &g, |_| 0.1).unwrap();
        let d = &store.get("w").unwrap().data;
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] - 2.1).abs() < 1e-6 && d[2] == 3.0);
    }

    #[test]
    fn plans_follow_the_schedule() {
        let p1 = StagePlan::for_stage(1).unwrap();
        assert_eq!((p1.steps, p1.frames, p1.lbm), (200, 15, true));
        assert_eq!((p1.lr(Group::Backbone), p1.lr(Group::Decoder)), (1e-4, 2e-4));
        let p2 = StagePlan::for_stage(2).unwrap();
        assert_eq!((p2.lr(Group::Backbone), p2.lr(Group::Other), p2.frames), (5e-5, 1e-4, 50));
        assert_eq!(StagePlan::for_stage(3).unwrap().high_res, Some((2, 6)));
        assert_eq!(StagePlan::for_stage(4).unwrap().lr(Group::Decoder), 5e-5);
        assert!(StagePlan::for_stage(0).is_err() && StagePlan::for_stage(5).is_err());
    }
}
