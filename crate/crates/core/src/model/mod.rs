//! Network assembly: configuration, forward pass, parameter declaration,
//! profiling and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod net;

use crate::backend::infer::TAU_STAR;
use crate::backend::{InferBackend, Profile, ShapeBackend};
use crate::error::{Error, Result};
use crate::params::{Group, Param, ParamKind, ParamStore};
use crate::tensor::{BinaryMap, DenseTensor, Shape};

pub use config::{BlockConfig, DecoderConfig, DecoderKind, EncoderConfig, EncoderKind, Mbv3Row, ModelConfig};
pub use net::{baseline_mbv3_block, encode, forward, shb_block, MaskMode, Output};

/// Spatial size used to declare parameters.
const DECLARE_HW: usize = 32;

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    /// Fresh parameters from a seed.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut sb = ShapeBackend::new(seed, cfg.decoder.mask_density);
        forward(&mut sb, &cfg, &Shape::new(1, 3, DECLARE_HW, DECLARE_HW), None, MaskMode::Computed)?;
        let mut store = sb.store;
        if cfg.decoder.kind == DecoderKind::Shb {
            store.insert(
                TAU_STAR,
                Param { shape: Shape::scalar(), data: vec![0.0], kind: ParamKind::Stat, group: Group::Decoder },
            )?;
        }
        Ok(Model { cfg, store })
    }

    pub fn tau_star(&self) -> f64 {
        self.store.scalar(TAU_STAR).unwrap_or(0.0)
    }

    /// Runs a clip (frames along the batch axis). Recurrent models step one
    /// frame at a time.
    pub fn infer(&self, frames: &DenseTensor, mode: MaskMode) -> Result<InferResult> {
        let mut b = InferBackend::new(&self.store);
        self.infer_with(&mut b, frames, mode)
    }

    pub fn infer_with(&self, b: &mut InferBackend<'_>, frames: &DenseTensor, mode: MaskMode) -> Result<InferResult> {
        if !frames.is_finite() {
            return Err(Error::NonFinite);
        }
        let n = frames.shape().n;
        let mut outs = Vec::new();
        if self.cfg.decoder.recurrent {
            let mut state: Option<Vec<DenseTensor>> = None;
            for t in 0..n {
                let f = frames.slice_batch(t, 1)?;
                let o = forward(b, &self.cfg, &f, state.as_deref(), mode)?;
                state = Some(o.state.clone());
                outs.push(o);
            }
        } else {
            outs.push(forward(b, &self.cfg, frames, None, mode)?);
        }
        InferResult::join(outs)
    }
}

/// Clip-level inference outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct InferResult {
    pub alpha: DenseTensor,
    pub fgr: DenseTensor,
    pub seg: DenseTensor,
    /// Base mask at 1/16, when the decoder is sparse.
    pub mask: Option<BinaryMap>,
    pub masks: Vec<(usize, BinaryMap)>,
}

fn join_maps(maps: Vec<BinaryMap>) -> BinaryMap {
    let mut it = maps.into_iter();
    let mut acc = it.next().expect("at least one map");
    for m in it {
        acc.n += m.n;
        acc.bits.extend(m.bits);
    }
    acc
}

impl InferResult {
    fn join(outs: Vec<Output<DenseTensor, BinaryMap>>) -> Result<Self> {
        let cat = |f: &dyn Fn(&Output<DenseTensor, BinaryMap>) -> &DenseTensor| {
            DenseTensor::concat_batch(&outs.iter().map(f).collect::<Vec<_>>())
        };
        let alpha = cat(&|o| &o.alpha)?;
        let fgr = cat(&|o| &o.fgr)?;
        let seg = cat(&|o| &o.seg)?;
        let mask = if outs.iter().all(|o| o.mask.is_some()) && !outs.is_empty() {
            Some(join_maps(outs.iter().map(|o| o.mask.clone().unwrap()).collect()))
        } else {
            None
        };
        let masks = match outs.first() {
            Some(first) => first
                .masks
                .iter()
                .enumerate()
                .map(|(i, (k, _))| (*k, join_maps(outs.iter().map(|o| o.masks[i].1.clone()).collect())))
                .collect(),
            None => Vec::new(),
        };
        Ok(InferResult { alpha, fgr, seg, mask, masks })
    }
}

/// FLOPs and storage of `cfg` on one `h×w` frame.
pub fn profile(cfg: &ModelConfig, h: usize, w: usize) -> Result<Profile> {
    cfg.validate()?;
    let mut sb = ShapeBackend::new(0, cfg.decoder.mask_density);
    let input = Shape::new(1, 3, h, w);
    forward(&mut sb, cfg, &input, None, MaskMode::Computed)?;
    Ok(sb.profile(input))
}
