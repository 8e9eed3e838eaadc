//! Matting metrics over clips of (n, 1, h, w) alphas in [0, 1].
//!
//! MAD, MSE and foreground MSE are scaled by 1e3, dtSSD by 1e2; Grad and
//! Conn are per-frame sums divided by 1e3. Every metric is averaged over
//! frames (dtSSD over consecutive pairs).

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{MaskMode, Model};
use crate::synth::Clip;
use crate::tensor::DenseTensor;

pub const GRAD_SIGMA: f64 = 1.4;
pub const CONN_STEP: f64 = 0.1;
pub const CONN_THETA: f64 = 0.15;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub mad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
    pub dtssd: f64,
    /// Over pixels with α* > 0, when foregrounds are given.
    pub mse_fg: Option<f64>,
}

impl MetricsReport {
    pub const HEADER: &'static str = "mad_x1e3,mse_x1e3,grad_div1e3,conn_div1e3,dtssd_x1e2,mse_fg_x1e3";

    pub fn csv_row(&self) -> String {
        let fg = self.mse_fg.map_or(String::new(), |v| format!("{v:.6}"));
        format!("{:.6},{:.6},{:.6},{:.6},{:.6},{fg}", self.mad, self.mse, self.grad, self.conn, self.dtssd)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        writeln!(w, "{}", self.csv_row())?;
        Ok(())
    }

    /// Component-wise mean; the foreground term only when every report has it.
    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let fg: Option<Vec<f64>> = reports.iter().map(|r| r.mse_fg).collect();
        MetricsReport {
            mad: avg(|r| r.mad),
            mse: avg(|r| r.mse),
            grad: avg(|r| r.grad),
            conn: avg(|r| r.conn),
            dtssd: avg(|r| r.dtssd),
            mse_fg: fg.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64),
        }
    }
}

/// Single-channel frame, row-major.
struct Plane<'a> {
    v: &'a [f32],
    h: usize,
    w: usize,
}

impl Plane<'_> {
    fn get(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.v[y * self.w + x] as f64
    }
}

fn gaussian(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn dgaussian(x: f64, sigma: f64) -> f64 {
    -x * gaussian(x, sigma) / (sigma * sigma)
}

/// First-order Gaussian derivative filter along x, unit Frobenius norm;
/// `(half, taps)` with `taps[y][x]`.
pub fn gauss_derivative_filter(sigma: f64) -> (usize, Vec<Vec<f64>>) {
    const EPS: f64 = 1e-2;
    let half = (sigma * (-2.0 * ((2.0 * std::f64::consts::PI).sqrt() * sigma * EPS).ln()).sqrt()).ceil() as usize;
    let size = 2 * half + 1;
    let mut k = vec![vec![0.0; size]; size];
    for (y, row) in k.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            *v = gaussian(y as f64 - half as f64, sigma) * dgaussian(x as f64 - half as f64, sigma);
        }
    }
    let norm = k.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    k.iter_mut().flatten().for_each(|v| *v /= norm);
    (half, k)
}

fn min_max_normalized(p: &Plane) -> Vec<f32> {
    let (lo, hi) = p.v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        p.v.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; p.v.len()]
    }
}

/// Gradient magnitude under the Gaussian derivative pair, replicate border.
fn gauss_gradient(p: &Plane, half: usize, k: &[Vec<f64>]) -> Vec<f64> {
    let hs = half as isize;
    let mut out = Vec::with_capacity(p.h * p.w);
    for y in 0..p.h as isize {
        for x in 0..p.w as isize {
            let (mut gx, mut gy) = (0.0, 0.0);
            for (i, row) in k.iter().enumerate() {
                for (j, &kv) in row.iter().enumerate() {
                    let (di, dj) = (i as isize - hs, j as isize - hs);
                    gx += kv * p.get(y + di, x + dj);
                    // The y filter is the transpose of the x filter.
                    gy += kv * p.get(y + dj, x + di);
                }
            }
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

fn grad_error(pred: &Plane, truth: &Plane) -> f64 {
    let (half, k) = gauss_derivative_filter(GRAD_SIGMA);
    let pn = min_max_normalized(pred);
    let tn = min_max_normalized(truth);
    let gp = gauss_gradient(&Plane { v: &pn, ..*pred }, half, &k);
    let gt = gauss_gradient(&Plane { v: &tn, ..*truth }, half, &k);
    gp.iter().zip(&gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 1e3
}

/// Labels of the 4-connected components of `on`, numbered from 1 in raster
/// order of their first pixel (0 = off), with each label's size.
pub fn components(on: &[bool], h: usize, w: usize) -> (Vec<usize>, Vec<usize>) {
    let mut label = vec![0usize; on.len()];
    let mut sizes = vec![0];
    let mut stack = Vec::new();
    for start in 0..on.len() {
        if !on[start] || label[start] != 0 {
            continue;
        }
        let id = sizes.len();
        sizes.push(0);
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            sizes[id] += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if on[j] && label[j] == 0 {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
    }
    (label, sizes)
}

fn conn_error(pred: &Plane, truth: &Plane) -> f64 {
    let n = pred.v.len();
    let steps = (1.0 / CONN_STEP).round() as usize;
    let mut round_down = vec![-1.0f64; n];
    for i in 1..=steps {
        let th = i as f64 * CONN_STEP;
        let both: Vec<bool> = pred.v.iter().zip(truth.v).map(|(&p, &t)| p as f64 >= th && t as f64 >= th).collect();
        let (label, sizes) = components(&both, pred.h, pred.w);
        // First label of maximal size.
        let largest = (1..sizes.len()).fold(None, |best: Option<usize>, l| match best {
            Some(b) if sizes[b] >= sizes[l] => Some(b),
            _ => Some(l),
        });
        for (j, r) in round_down.iter_mut().enumerate() {
            if *r == -1.0 && largest != Some(label[j]) {
                *r = (i - 1) as f64 * CONN_STEP;
            }
        }
    }
    let phi = |a: f64, r: f64| {
        let d = a - if r == -1.0 { 1.0 } else { r };
        1.0 - if d >= CONN_THETA { d } else { 0.0 }
    };
    pred.v
        .iter()
        .zip(truth.v)
        .zip(&round_down)
        .map(|((&p, &t), &r)| (phi(t as f64, r) - phi(p as f64, r)).abs())
        .sum::<f64>()
        / 1e3
}

fn check_alpha(pred: &DenseTensor, truth: &DenseTensor) -> Result<()> {
    let (p, t) = (pred.shape(), truth.shape());
    if p != t || p.c != 1 || p.len() == 0 {
        return Err(Error::Shape(format!("alpha clips must be equal (n, 1, h, w), got {p} and {t}")));
    }
    if !pred.is_finite() || !truth.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Metrics of a predicted clip against ground truth.
pub fn evaluate(
    pred_alpha: &DenseTensor,
    true_alpha: &DenseTensor,
    fgr: Option<(&DenseTensor, &DenseTensor)>,
) -> Result<MetricsReport> {
    check_alpha(pred_alpha, true_alpha)?;
    let s = pred_alpha.shape();
    let plane = s.h * s.w;
    fn frame(t: &DenseTensor, i: usize) -> Plane<'_> {
        let s = t.shape();
        Plane { v: &t.data()[i * s.plane()..(i + 1) * s.plane()], h: s.h, w: s.w }
    }
    let (mut mad, mut mse, mut grad, mut conn, mut dt) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..s.n {
        let (p, t) = (frame(pred_alpha, i), frame(true_alpha, i));
        mad += p.v.iter().zip(t.v).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / plane as f64;
        mse += p.v.iter().zip(t.v).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / plane as f64;
        grad += grad_error(&p, &t);
        conn += conn_error(&p, &t);
        if i > 0 {
            let (pp, tp) = (frame(pred_alpha, i - 1), frame(true_alpha, i - 1));
            let ssd: f64 = (0..plane).map(|j| (((p.v[j] - pp.v[j]) - (t.v[j] - tp.v[j])) as f64).powi(2)).sum();
            dt += (ssd / plane as f64).sqrt();
        }
    }
    let n = s.n as f64;
    let mse_fg = match fgr {
        Some((pf, tf)) => {
            if pf.shape() != tf.shape() || pf.shape().n != s.n || pf.shape().c != 3 || pf.shape().plane() != plane {
                return Err(Error::Shape(format!("foreground clips {} and {} do not match alpha {s}", pf.shape(), tf.shape())));
            }
            let (mut sum, mut cnt) = (0.0, 0usize);
            for i in 0..s.n {
                for j in 0..plane {
                    if true_alpha.data()[i * plane + j] > 0.0 {
                        for c in 0..3 {
                            let k = (i * 3 + c) * plane + j;
                            sum += ((pf.data()[k] - tf.data()[k]) as f64).powi(2);
                        }
                        cnt += 3;
                    }
                }
            }
            Some(if cnt == 0 { 0.0 } else { 1e3 * sum / cnt as f64 })
        }
        None => None,
    };
    Ok(MetricsReport {
        mad: 1e3 * mad / n,
        mse: 1e3 * mse / n,
        grad: grad / n,
        conn: conn / n,
        dtssd: if s.n > 1 { 1e2 * dt / (n - 1.0) } else { 0.0 },
        mse_fg,
    })
}

/// Inference metrics averaged over clips.
pub fn evaluate_model(model: &Model, clips: &[Clip]) -> Result<MetricsReport> {
    let mut reports = Vec::with_capacity(clips.len());
    for c in clips {
        let r = model.infer(&c.img, MaskMode::Computed)?;
        reports.push(evaluate(&r.alpha, &c.alpha, Some((&r.fgr, &c.fgr)))?);
    }
    Ok(MetricsReport::mean(&reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn clip(n: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> DenseTensor {
        DenseTensor::from_fn(Shape::new(n, 1, h, w), |n, _, y, x| f(n, y, x))
    }

    #[test]
    fn identical_clips_score_zero() {
        let a = clip(3, 6, 7, |n, y, x| ((n + y * 7 + x) % 5) as f32 / 4.0);
        let r = evaluate(&a, &a, None).unwrap();
        assert_eq!(r, MetricsReport::default());
    }

    #[test]
    fn constant_offset() {
        let t = clip(2, 5, 5, |_, y, x| (y * 5 + x) as f32 / 40.0);
        let p = clip(2, 5, 5, |_, y, x| (y * 5 + x) as f32 / 40.0 + 0.01);
        let r = evaluate(&p, &t, None).unwrap();
        assert!((r.mad - 10.0).abs() < 1e-3, "{}", r.mad);
        assert!((r.mse - 0.1).abs() < 1e-4, "{}", r.mse);
        assert!(r.dtssd < 1e-4);
    }

    #[test]
    fn derivative_filter_is_odd_and_normalized() {
        let (half, k) = gauss_derivative_filter(GRAD_SIGMA);
        assert_eq!(half, 4);
        let norm: f64 = k.iter().flatten().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        for row in &k {
            for x in 0..=2 * half {
                assert!((row[x] + row[2 * half - x]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn components_in_raster_order() {
        #[rustfmt::skip]
        let on = [
            true, false, true,
            true, false, false,
            false, true, true,
        ];
        let (label, sizes) = components(&on, 3, 3);
        assert_eq!(label, vec![1, 0, 2, 1, 0, 0, 0, 3, 3]);
        assert_eq!(sizes, vec![0, 2, 1, 2]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = clip(1, 4, 4, |_, _, _| 0.0);
        let b = clip(1, 4, 5, |_, _, _| 0.0);
        assert!(evaluate(&a, &b, None).is_err());
    }
}
