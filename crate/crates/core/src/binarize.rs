//! Sign binarization with learnable threshold, STE backward, weight scale.

use crate::bits::{pack, BitTensor};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch-norm state.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchNorm {
    pub fn identity(c: usize) -> Self {
        BatchNorm { gamma: vec![1.0; c], beta: vec![0.0; c], mean: vec![0.0; c], var: vec![1.0; c] }
    }

    /// Inference affine `y = scale·x + shift` per channel.
    pub fn fold(&self) -> (Vec<f32>, Vec<f32>) {
        let mut scale = Vec::with_capacity(self.gamma.len());
        let mut shift = Vec::with_capacity(self.gamma.len());
        for i in 0..self.gamma.len() {
            let inv = 1.0 / (self.var[i] as f64 + BN_EPS).sqrt();
            let a = self.gamma[i] as f64 * inv;
            scale.push(a as f32);
            shift.push((self.beta[i] as f64 - self.mean[i] as f64 * a) as f32);
        }
        (scale, shift)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// (out_c, in_c / groups, k, k)
    pub latent_weight: DenseTensor,
    pub weight_scale: f32,
    pub act_threshold: f32,
    pub bn: Option<BatchNorm>,
}

impl LayerParams {
    pub fn new(latent_weight: DenseTensor, bn: Option<BatchNorm>) -> Result<Self> {
        let s = mean_abs(&latent_weight)?;
        Ok(LayerParams { latent_weight, weight_scale: s, act_threshold: 0.0, bn })
    }

    /// Replaces the latent weights and recomputes `s`.
    pub fn set_weights(&mut self, w: DenseTensor) -> Result<()> {
        self.weight_scale = mean_abs(&w)?;
        self.latent_weight = w;
        Ok(())
    }
}

fn mean_abs(w: &DenseTensor) -> Result<f32> {
    if w.is_empty() {
        return Err(Error::Invalid("empty weight tensor".into()));
    }
    if !w.is_finite() {
        return Err(Error::NonFinite);
    }
    let sum: f64 = w.data().iter().map(|v| v.abs() as f64).sum();
    Ok((sum / w.len() as f64) as f32)
}

/// `(sign(w) packed, mean|w|)`. Weight layout (o, i, k, k) packs the `i` axis.
pub fn binarize_weights(p: &LayerParams) -> Result<(BitTensor, f32)> {
    let s = mean_abs(&p.latent_weight)?;
    Ok((pack(&p.latent_weight, 0.0)?, s))
}

pub fn binarize_acts(x: &DenseTensor, tau: f32) -> Result<BitTensor> {
    pack(x, tau)
}

#[inline]
pub fn ste_pass(pre: f64, tau: f64) -> bool {
    let d = pre - tau;
    d > -1.0 && d < 1.0
}

/// Straight-through gradient: passes `grad_out` where `pre_act − τ ∈ (−1, 1)`.
pub fn ste_backward(grad_out: &DenseTensor, pre_act: &DenseTensor, tau: f32) -> Result<DenseTensor> {
    if grad_out.shape() != pre_act.shape() {
        return Err(Error::Shape(format!("{} vs {}", grad_out.shape(), pre_act.shape())));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(pre_act.data())
        .map(|(&g, &x)| if ste_pass(x as f64, tau as f64) { g } else { 0.0 })
        .collect();
    DenseTensor::from_vec(grad_out.shape(), data)
}

/// ∂L/∂τ for `sign(x − τ)`: minus the sum of the STE-masked upstream gradient.
pub fn threshold_grad(grad_out: &DenseTensor, pre_act: &DenseTensor, tau: f32) -> Result<f32> {
    let g = ste_backward(grad_out, pre_act, tau)?;
    Ok(-(g.data().iter().map(|&v| v as f64).sum::<f64>()) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn t(v: &[f32]) -> DenseTensor {
        DenseTensor::from_vec(Shape::new(1, v.len(), 1, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn weights_sign_and_scale() {
        let p = LayerParams::new(t(&[1.0, -2.0, 3.0]), None).unwrap();
        let (b, s) = binarize_weights(&p).unwrap();
        assert_eq!(s, 2.0);
        assert_eq!(crate::bits::unpack(&b).data(), &[1.0, -1.0, 1.0]);
    }

    #[test]
    fn zero_weights_are_plus_one_with_zero_scale() {
        let p = LayerParams::new(t(&[0.0; 4]), None).unwrap();
        let (b, s) = binarize_weights(&p).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(b.count_ones(), 4);
    }

    #[test]
    fn empty_weight_is_error() {
        let w = DenseTensor::zeros(Shape::new(0, 1, 1, 1));
        assert!(LayerParams::new(w, None).is_err());
    }

    #[test]
    fn ste_window() {
        let g = t(&[3.0]);
        assert_eq!(ste_backward(&g, &t(&[0.5]), 0.0).unwrap().data(), &[3.0]);
        assert_eq!(ste_backward(&g, &t(&[1.5]), 0.0).unwrap().data(), &[0.0]);
        assert_eq!(ste_backward(&g, &t(&[0.5]), 1.0).unwrap().data(), &[3.0]);
        assert_eq!(ste_backward(&g, &t(&[-1.0]), 0.0).unwrap().data(), &[0.0]);
    }

    #[test]
    fn threshold_gradient_is_negative_masked_sum() {
        let g = t(&[1.0, 2.0, 4.0]);
        let x = t(&[0.2, 3.0, -0.5]);
        assert_eq!(threshold_grad(&g, &x, 0.0).unwrap(), -5.0);
    }

    #[test]
    fn tau_starts_at_zero() {
        let p = LayerParams::new(t(&[1.0]), None).unwrap();
        assert_eq!(p.act_threshold, 0.0);
    }

    #[test]
    fn bn_fold_matches_formula() {
        let bn = BatchNorm { gamma: vec![2.0], beta: vec![1.0], mean: vec![0.5], var: vec![4.0] };
        let (a, b) = bn.fold();
        let x = 3.0f64;
        let want = 2.0 * (x - 0.5) / (4.0 + BN_EPS).sqrt() + 1.0;
        assert!(((a[0] as f64) * x + b[0] as f64 - want).abs() < 1e-6);
    }
}
