//! Network forward pass, generic over the execution backend.

use crate::backend::{Act, Backend, ConvLayer, Part};
use crate::ebb::{Ebb, SubEbb};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::model::config::{DecoderKind, EncoderKind, Mbv3Row, ModelConfig};
use crate::params::Group;

/// Mask source for the sparse decoder blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Incoherence mask of the bottleneck output.
    Computed,
    /// All-ones mask (dense evaluation).
    Full,
}

/// Network outputs for one batch.
pub struct Output<T, M> {
    /// (n, 1, h, w) in [0, 1].
    pub alpha: T,
    /// (n, 3, h, w) in [0, 1].
    pub fgr: T,
    /// (n, 1, h, w) segmentation logit.
    pub seg: T,
    /// Encoder features at 1/2, 1/4, 1/8, 1/16.
    pub feats: Vec<T>,
    /// Bottleneck output the mask is computed from.
    pub bottleneck: T,
    /// Base mask at 1/16 (sparse decoders only).
    pub mask: Option<M>,
    /// Upsampled masks by factor.
    pub masks: Vec<(usize, M)>,
    /// Recurrent state per decoder scale.
    pub state: Vec<T>,
}

fn conv(name: String, c_in: usize, c_out: usize, spec: ConvSpec, binary: bool, group: Group) -> ConvLayer {
    ConvLayer::new(name, c_in, c_out, spec, binary, group)
}

fn maybe_act<B: Backend>(b: &mut B, x: B::T, a: Option<Act>) -> B::T {
    match a {
        Some(a) => b.act(&x, a),
        None => x,
    }
}

fn make_divisible(v: usize, d: usize) -> usize {
    let r = ((v + d / 2) / d * d).max(d);
    if (r as f64) < 0.9 * v as f64 {
        r + d
    } else {
        r
    }
}

/// Inverted-residual block; binarized without activations when `binary`.
fn mbv3_block<B: Backend>(b: &mut B, x: &B::T, name: &str, r: &Mbv3Row, binary: bool) -> Result<B::T> {
    let c_in = b.shape(x).c;
    let g = Group::Backbone;
    let mut h = x.clone();
    if r.exp != c_in {
        h = b.conv(&h, &conv(format!("{name}.expand"), c_in, r.exp, ConvSpec::new(1, 1, 0), binary, g))?;
        h = maybe_act(b, h, r.act);
    }
    let dw = ConvSpec::same(r.k, r.stride, r.dilation).with_groups(r.exp);
    h = b.conv(&h, &conv(format!("{name}.dw"), r.exp, r.exp, dw, binary, g))?;
    h = maybe_act(b, h, r.act);
    if r.se {
        let sq = make_divisible(r.exp / 4, 8);
        let p = b.global_avg_pool(&h);
        let one = ConvSpec::new(1, 1, 0);
        let s = b.conv(&p, &conv(format!("{name}.se1"), r.exp, sq, one, false, g).with_bn(false).with_bias(true))?;
        let s = b.act(&s, Act::Relu);
        let s = b.conv(&s, &conv(format!("{name}.se2"), sq, r.exp, one, false, g).with_bn(false).with_bias(true))?;
        let s = b.act(&s, Act::HardSigmoid);
        h = b.mul(&h, &s)?;
    }
    h = b.conv(&h, &conv(format!("{name}.project"), r.exp, r.out, ConvSpec::new(1, 1, 0), binary, g))?;
    if c_in == r.out && r.stride == 1 {
        h = b.add(&h, x)?;
    }
    Ok(h)
}

/// Baseline inverted-residual block as a standalone entry point.
pub fn baseline_mbv3_block<B: Backend>(b: &mut B, x: &B::T, name: &str, r: &Mbv3Row) -> Result<B::T> {
    mbv3_block(b, x, name, r, true)
}

/// Lite ASPP: `conv1(x) ⊙ σ(conv1(gap(x)))`.
fn aspp<B: Backend>(b: &mut B, cfg: &ModelConfig, x: &B::T) -> Result<B::T> {
    let e = &cfg.encoder;
    let c = b.shape(x).c;
    let one = ConvSpec::new(1, 1, 0);
    let a = b.conv(x, &conv("aspp.a".into(), c, e.aspp, one, e.binary, Group::Other))?;
    let a = maybe_act(b, a, e.aspp_act);
    let p = b.global_avg_pool(x);
    let g = b.conv(&p, &conv("aspp.b".into(), c, e.aspp, one, e.binary, Group::Other).with_bn(false))?;
    let g = b.act(&g, Act::Sigmoid);
    b.mul(&a, &g)
}

/// Features at 1/2, 1/4, 1/8, 1/16.
pub fn encode<B: Backend>(b: &mut B, cfg: &ModelConfig, img: &B::T) -> Result<Vec<B::T>> {
    let e = &cfg.encoder;
    b.enter(Part::Stem);
    let x = b.affine(img, 2.0, -1.0);
    let stem = conv("stem".into(), 3, e.stem, ConvSpec::same(3, 2, 1), false, Group::Other);
    let x = b.conv(&x, &stem)?;
    let mut x = maybe_act(b, x, e.stem_act);
    b.enter(Part::Backbone);
    let mut feats = Vec::with_capacity(4);
    match e.kind {
        EncoderKind::Ebb => {
            feats.push(x.clone());
            for (i, bc) in e.blocks.iter().enumerate() {
                let c = b.shape(&x).c;
                let blk = Ebb::new(&format!("enc.ebb{}", i + 1), c, bc.channels, bc.stride, bc.dilation, e.binary)?;
                x = blk.forward(b, &x)?;
                if bc.tap {
                    feats.push(x.clone());
                }
            }
            for (i, &t) in e.tail.iter().enumerate() {
                let c = b.shape(&x).c;
                let sub = SubEbb::new(format!("enc.tail{}", i + 1), c, t).strided(1, e.tail_dilation).binary(e.binary);
                x = sub.forward(b, &x)?;
            }
        }
        EncoderKind::Mbv3 => {
            for (i, r) in e.rows.iter().enumerate() {
                x = mbv3_block(b, &x, &format!("enc.row{}", i + 1), r, e.binary)?;
                if e.taps.contains(&i) {
                    feats.push(x.clone());
                }
            }
            let c = b.shape(&x).c;
            x = b.conv(&x, &conv("enc.last".into(), c, e.last, ConvSpec::new(1, 1, 0), e.binary, Group::Backbone))?;
            x = maybe_act(b, x, e.last_act);
        }
    }
    b.enter(Part::Aspp);
    feats.push(aspp(b, cfg, &x)?);
    if feats.len() != 4 {
        return Err(Error::Config(format!("encoder produced {} features, expected 4", feats.len())));
    }
    Ok(feats)
}

/// Convolutional GRU on the second half of the channels.
fn gru<B: Backend>(b: &mut B, cfg: &ModelConfig, x: &B::T, name: &str, h: Option<&B::T>) -> Result<(B::T, B::T)> {
    let d = &cfg.decoder;
    let c = b.shape(x).c;
    let half = c / 2;
    let a = b.slice_channels(x, 0, half)?;
    let xb = b.slice_channels(x, half, c - half)?;
    let h = match h {
        Some(h) => h.clone(),
        None => b.affine(&xb, 0.0, 0.0),
    };
    let spec = ConvSpec::same(d.gru_kernel, 1, 1);
    let cat = b.concat(&[xb.clone(), h.clone()])?;
    let ih = conv(format!("{name}.ih"), 2 * half, 2 * half, spec, d.gru_binary, Group::Decoder).with_bn(false).with_bias(true);
    let rz = b.conv(&cat, &ih)?;
    let rz = b.act(&rz, Act::Sigmoid);
    let r = b.slice_channels(&rz, 0, half)?;
    let z = b.slice_channels(&rz, half, half)?;
    let rh = b.mul(&r, &h)?;
    let cat = b.concat(&[xb, rh])?;
    let hh = conv(format!("{name}.hh"), 2 * half, half, spec, d.gru_binary, Group::Decoder).with_bn(false).with_bias(true);
    let cand = b.conv(&cat, &hh)?;
    let cand = b.act(&cand, Act::Tanh);
    let diff = b.sub(&cand, &h)?;
    let step = b.mul(&z, &diff)?;
    let h_new = b.add(&h, &step)?;
    Ok((b.concat(&[a, h_new.clone()])?, h_new))
}

/// `BN(sparse bconv3(x; m)) + BN(bconv1(x))`.
pub fn shb_block<B: Backend>(b: &mut B, x: &B::T, name: &str, c_out: usize, binary: bool, m: &B::M) -> Result<B::T> {
    let c = b.shape(x).c;
    let g = Group::Decoder;
    let s = b.sparse_conv(x, &conv(format!("{name}.conv3"), c, c_out, ConvSpec::same(3, 1, 1), binary, g), m)?;
    let d = b.conv(x, &conv(format!("{name}.conv1"), c, c_out, ConvSpec::new(1, 1, 0), binary, g))?;
    b.add(&s, &d)
}

fn dense_block<B: Backend>(b: &mut B, cfg: &ModelConfig, x: &B::T, name: &str, c_out: usize) -> Result<B::T> {
    let d = &cfg.decoder;
    let c = b.shape(x).c;
    let y = b.conv(x, &conv(format!("{name}.conv3"), c, c_out, ConvSpec::same(3, 1, 1), d.binary, Group::Decoder))?;
    Ok(maybe_act(b, y, d.act))
}

/// Full forward. `state` is the previous frame's recurrent state, if any.
pub fn forward<B: Backend>(
    b: &mut B,
    cfg: &ModelConfig,
    img: &B::T,
    state: Option<&[B::T]>,
    mode: MaskMode,
) -> Result<Output<B::T, B::M>> {
    let s = b.shape(img);
    if s.c != 3 || s.h % 16 != 0 || s.w % 16 != 0 || s.h == 0 || s.w == 0 {
        return Err(Error::Shape(format!("input {s} must be (n, 3, h, w) with h, w positive multiples of 16")));
    }
    let feats = encode(b, cfg, img)?;
    let d = &cfg.decoder;
    b.enter(Part::Decoder);
    let s1 = b.avg_pool2(img)?;
    let s2 = b.avg_pool2(&s1)?;
    let s3 = b.avg_pool2(&s2)?;
    let mut new_state = Vec::new();
    let prev = |i: usize| state.and_then(|st| st.get(i)).cloned();

    let f16 = &feats[3];
    let mut x = match d.kind {
        DecoderKind::Shb => {
            let c = b.shape(f16).c;
            let g = Group::Decoder;
            let y3 = b.conv(f16, &conv("dec.b.conv3".into(), c, c, ConvSpec::same(3, 1, 1), d.binary, g))?;
            let y1 = b.conv(f16, &conv("dec.b.conv1".into(), c, c, ConvSpec::new(1, 1, 0), d.binary, g))?;
            let y = b.add(&y3, &y1)?;
            b.add(&y, f16)?
        }
        DecoderKind::Dense => f16.clone(),
    };
    if d.recurrent {
        let (o, h) = gru(b, cfg, &x, "dec.b.gru", prev(0).as_ref())?;
        x = o;
        new_state.push(h);
    }
    let bottleneck = x.clone();
    let (mask, masks) = match d.kind {
        DecoderKind::Shb => {
            let m = match mode {
                MaskMode::Computed => b.incoherence_mask(&bottleneck)?,
                MaskMode::Full => b.full_mask(&bottleneck),
            };
            let ups = [2, 4, 8, 16].iter().map(|&k| Ok((k, b.upsample_mask(&m, k)?))).collect::<Result<Vec<_>>>()?;
            (Some(m), ups)
        }
        DecoderKind::Dense => (None, Vec::new()),
    };
    let mask_at = |k: usize| masks.iter().find(|(f, _)| *f == k).map(|(_, m)| m.clone());

    let skips = [(&feats[2], &s3, 2usize), (&feats[1], &s2, 4), (&feats[0], &s1, 8)];
    for (i, (skip, src, k)) in skips.into_iter().enumerate() {
        let ss = b.shape(skip);
        let u = b.resize(&x, ss.h, ss.w);
        let cat = b.concat(&[u, skip.clone(), src.clone()])?;
        let name = format!("dec.up{}", i + 1);
        x = match d.kind {
            DecoderKind::Shb => shb_block(b, &cat, &name, d.ladder[i], d.binary, &mask_at(k).expect("mask factor"))?,
            DecoderKind::Dense => dense_block(b, cfg, &cat, &name, d.ladder[i])?,
        };
        if d.recurrent {
            let (o, h) = gru(b, cfg, &x, &format!("{name}.gru"), prev(i + 1).as_ref())?;
            x = o;
            new_state.push(h);
        }
    }

    let u = b.resize(&x, s.h, s.w);
    let cat = b.concat(&[u, img.clone()])?;
    let c_out = d.ladder[3];
    x = match d.kind {
        DecoderKind::Shb => {
            let m = mask_at(16).expect("mask factor");
            let y = shb_block(b, &cat, "dec.out.a", c_out, d.binary, &m)?;
            shb_block(b, &y, "dec.out.b", c_out, d.binary, &m)?
        }
        DecoderKind::Dense => {
            let y = dense_block(b, cfg, &cat, "dec.out.a", c_out)?;
            dense_block(b, cfg, &y, "dec.out.b", c_out)?
        }
    };

    b.enter(Part::Head);
    let head = conv("head".into(), c_out, 5, ConvSpec::new(1, 1, 0), false, Group::Decoder).with_bn(false).with_bias(true);
    let y = b.conv(&x, &head)?;
    let a = b.slice_channels(&y, 0, 1)?;
    let alpha = b.act(&a, Act::Clamp01);
    let res = b.slice_channels(&y, 1, 3)?;
    let f = b.add(&res, img)?;
    let fgr = b.act(&f, Act::Clamp01);
    let seg = b.slice_channels(&y, 4, 1)?;
    Ok(Output { alpha, fgr, seg, feats, bottleneck, mask, masks, state: new_state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisible_rounding() {
        assert_eq!(make_divisible(72 / 4, 8), 24);
        assert_eq!(make_divisible(120 / 4, 8), 32);
        assert_eq!(make_divisible(960 / 4, 8), 240);
    }
}
