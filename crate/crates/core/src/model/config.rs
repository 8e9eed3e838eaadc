//! Network configuration and presets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::Act;
use crate::error::{Error, Result};
use crate::ops::check_channel_map;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Ebb,
    Mbv3,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub binary: bool,
    /// Full-precision stem width (stride 2).
    pub stem: usize,
    #[serde(default)]
    pub stem_act: Option<Act>,
    /// Evolvable blocks.
    #[serde(default)]
    pub blocks: Vec<BlockConfig>,
    /// Output widths of the trailing plain sub-blocks.
    #[serde(default)]
    pub tail: Vec<usize>,
    #[serde(default = "one")]
    pub tail_dilation: usize,
    /// Inverted-residual rows.
    #[serde(default)]
    pub rows: Vec<Mbv3Row>,
    /// Final 1×1 width after the rows.
    #[serde(default)]
    pub last: usize,
    #[serde(default)]
    pub last_act: Option<Act>,
    /// Rows whose outputs feed the decoder at 1/2, 1/4, 1/8.
    #[serde(default)]
    pub taps: Vec<usize>,
    pub aspp: usize,
    #[serde(default)]
    pub aspp_act: Option<Act>,
}

fn one() -> usize {
    1
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    /// Head, middle, tail output widths.
    pub channels: [usize; 3],
    pub stride: usize,
    #[serde(default = "one")]
    pub dilation: usize,
    /// Output feeds the decoder.
    #[serde(default)]
    pub tap: bool,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Mbv3Row {
    pub k: usize,
    pub exp: usize,
    pub out: usize,
    pub stride: usize,
    #[serde(default = "one")]
    pub dilation: usize,
    #[serde(default)]
    pub se: bool,
    #[serde(default)]
    pub act: Option<Act>,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Mask-producing bottleneck plus sparse heterogeneous blocks.
    Shb,
    /// Plain 3×3 conv blocks.
    Dense,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub binary: bool,
    /// Widths at 1/8, 1/4, 1/2 and full scale.
    pub ladder: [usize; 4],
    #[serde(default)]
    pub act: Option<Act>,
    #[serde(default)]
    pub recurrent: bool,
    #[serde(default = "one")]
    pub gru_kernel: usize,
    #[serde(default)]
    pub gru_binary: bool,
    /// Expected mask density used by the profiler.
    #[serde(default = "half")]
    pub mask_density: f64,
}

fn half() -> f64 {
    0.5
}

const fn row(k: usize, exp: usize, out: usize, stride: usize, dilation: usize, se: bool, act: Option<Act>) -> Mbv3Row {
    Mbv3Row { k, exp, out, stride, dilation, se, act }
}

/// Large inverted-residual table with the last stage dilated instead of strided.
fn mbv3_rows(fp: bool) -> Vec<Mbv3Row> {
    let (re, hs) = if fp { (Some(Act::Relu), Some(Act::HardSwish)) } else { (None, None) };
    let se = fp;
    vec![
        row(3, 16, 16, 1, 1, false, re),
        row(3, 64, 24, 2, 1, false, re),
        row(3, 72, 24, 1, 1, false, re),
        row(5, 72, 40, 2, 1, se, re),
        row(5, 120, 40, 1, 1, se, re),
        row(5, 120, 40, 1, 1, se, re),
        row(3, 240, 80, 2, 1, false, hs),
        row(3, 200, 80, 1, 1, false, hs),
        row(3, 184, 80, 1, 1, false, hs),
        row(3, 184, 80, 1, 1, false, hs),
        row(3, 480, 112, 1, 1, se, hs),
        row(3, 672, 112, 1, 1, se, hs),
        row(5, 672, 160, 1, 2, se, hs),
        row(5, 960, 160, 1, 2, se, hs),
        row(5, 960, 160, 1, 2, se, hs),
    ]
}

fn block(channels: [usize; 3], stride: usize, dilation: usize, tap: bool) -> BlockConfig {
    BlockConfig { channels, stride, dilation, tap }
}

/// Decoder widths of the binarized presets, 1/8 scale down to the output block.
pub const BINARY_LADDER: [usize; 4] = [128, 64, 32, 16];

impl ModelConfig {
    /// Binarized network with evolvable blocks and sparse decoder.
    pub fn bivm() -> Self {
        ModelConfig {
            name: "bivm".into(),
            encoder: EncoderConfig {
                kind: EncoderKind::Ebb,
                binary: true,
                stem: 16,
                stem_act: None,
                blocks: vec![
                    block([32, 64, 32], 2, 1, true),
                    block([64, 128, 64], 1, 1, false),
                    block([64, 128, 64], 2, 1, true),
                    block([128, 256, 128], 2, 1, false),
                    block([128, 256, 128], 1, 2, false),
                ],
                tail: vec![256, 1024],
                tail_dilation: 2,
                rows: vec![],
                last: 0,
                last_act: None,
                taps: vec![],
                aspp: 128,
                aspp_act: None,
            },
            decoder: DecoderConfig {
                kind: DecoderKind::Shb,
                binary: true,
                ladder: BINARY_LADDER,
                act: None,
                recurrent: false,
                gru_kernel: 1,
                gru_binary: false,
                mask_density: 0.5,
            },
        }
    }

    /// Reduced-width variant for desk-scale training.
    pub fn toy() -> Self {
        let mut c = Self::bivm();
        c.name = "toy".into();
        c.encoder.stem = 8;
        c.encoder.blocks = vec![
            block([16, 32, 16], 2, 1, true),
            block([32, 64, 32], 1, 1, false),
            block([32, 64, 32], 2, 1, true),
            block([64, 128, 64], 2, 1, false),
            block([64, 128, 64], 1, 2, false),
        ];
        c.encoder.tail = vec![128, 256];
        c.encoder.aspp = 32;
        c.decoder.ladder = [32, 16, 16, 8];
        c
    }

    /// Binarized inverted-residual encoder with a dense binarized decoder.
    pub fn baseline() -> Self {
        ModelConfig {
            name: "baseline".into(),
            encoder: EncoderConfig {
                kind: EncoderKind::Mbv3,
                binary: true,
                stem: 16,
                stem_act: None,
                blocks: vec![],
                tail: vec![],
                tail_dilation: 1,
                rows: mbv3_rows(false),
                last: 960,
                last_act: None,
                taps: vec![0, 2, 5],
                aspp: 128,
                aspp_act: None,
            },
            decoder: DecoderConfig {
                kind: DecoderKind::Dense,
                binary: true,
                ladder: BINARY_LADDER,
                act: None,
                recurrent: true,
                gru_kernel: 3,
                gru_binary: true,
                mask_density: 1.0,
            },
        }
    }

    /// Full-precision recurrent reference.
    pub fn rvm() -> Self {
        let mut c = Self::baseline();
        c.name = "rvm".into();
        c.encoder.binary = false;
        c.encoder.stem_act = Some(Act::HardSwish);
        c.encoder.rows = mbv3_rows(true);
        c.encoder.last_act = Some(Act::HardSwish);
        c.encoder.aspp_act = Some(Act::Relu);
        c.decoder.binary = false;
        c.decoder.gru_binary = false;
        c.decoder.act = Some(Act::Relu);
        c.decoder.ladder = [80, 40, 32, 16];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "bivm" => Ok(Self::bivm()),
            "toy" => Ok(Self::toy()),
            "baseline" => Ok(Self::baseline()),
            "rvm" => Ok(Self::rvm()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (bivm, toy, baseline, rvm)"))),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: ModelConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Preset name or path to a TOML file.
    pub fn load(spec: &str) -> Result<Self> {
        match Self::preset(spec) {
            Ok(c) => Ok(c),
            Err(_) if std::path::Path::new(spec).exists() => Self::from_toml(&std::fs::read_to_string(spec)?),
            Err(e) => Err(e),
        }
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    /// Channels of the 1/2, 1/4, 1/8 and 1/16 features.
    pub fn feature_channels(&self) -> [usize; 4] {
        let e = &self.encoder;
        match e.kind {
            EncoderKind::Ebb => {
                let taps: Vec<usize> = e.blocks.iter().filter(|b| b.tap).map(|b| b.channels[2]).collect();
                [e.stem, taps.first().copied().unwrap_or(0), taps.get(1).copied().unwrap_or(0), e.aspp]
            }
            EncoderKind::Mbv3 => {
                let t = |i: usize| e.taps.get(i).and_then(|&r| e.rows.get(r)).map_or(0, |r| r.out);
                [t(0), t(1), t(2), e.aspp]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let e = &self.encoder;
        if e.stem == 0 || e.aspp == 0 {
            return bad("stem and aspp widths must be positive".into());
        }
        match e.kind {
            EncoderKind::Ebb => {
                if e.blocks.iter().filter(|b| b.tap).count() != 2 {
                    return bad("exactly two evolvable blocks must be tapped (1/4 and 1/8)".into());
                }
                let mut c = e.stem;
                let mut scale = 2;
                for (i, b) in e.blocks.iter().enumerate() {
                    crate::ebb::Ebb::new(&format!("enc.ebb{}", i + 1), c, b.channels, b.stride, b.dilation, e.binary)?;
                    scale *= b.stride;
                    if b.tap && ![4, 8].contains(&scale) {
                        return bad(format!("tapped block {} sits at 1/{scale}", i + 1));
                    }
                    c = b.channels[2];
                }
                if scale != 16 {
                    return bad(format!("encoder ends at 1/{scale}, expected 1/16"));
                }
                for &t in &e.tail {
                    check_channel_map(c, t).map_err(|x| Error::Config(x.to_string()))?;
                    c = t;
                }
            }
            EncoderKind::Mbv3 => {
                if e.taps.len() != 3 || e.taps.iter().any(|&t| t >= e.rows.len()) || e.last == 0 {
                    return bad("inverted-residual encoder needs three row taps and a final width".into());
                }
                let scale: usize = 2 * e.rows.iter().map(|r| r.stride).product::<usize>();
                if scale != 16 {
                    return bad(format!("encoder ends at 1/{scale}, expected 1/16"));
                }
            }
        }
        let d = &self.decoder;
        if d.ladder.contains(&0) {
            return bad("decoder widths must be positive".into());
        }
        if d.recurrent && (d.ladder[..3].iter().any(|c| c % 2 != 0) || e.aspp % 2 != 0 || d.gru_kernel % 2 == 0) {
            return bad("recurrent decoder needs even widths and an odd gate kernel".into());
        }
        if !(0.0..=1.0).contains(&d.mask_density) {
            return bad("mask density must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip() {
        for name in ["bivm", "toy", "baseline", "rvm"] {
            let c = ModelConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(ModelConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
        assert!(ModelConfig::preset("nope").is_err());
    }

    #[test]
    fn feature_widths() {
        assert_eq!(ModelConfig::bivm().feature_channels(), [16, 32, 64, 128]);
        assert_eq!(ModelConfig::rvm().feature_channels(), [16, 24, 40, 128]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut s = ModelConfig::toy().to_toml();
        s.push_str("\nbogus = 1\n");
        assert!(ModelConfig::from_toml(&s).is_err());
    }
}
