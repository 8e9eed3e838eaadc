use bivm::backend::infer::TAU_STAR;
use bivm::backend::{InferBackend, ShapeBackend};
use bivm::model::{checkpoint, encode, forward, MaskMode, Model, ModelConfig};
use bivm::synth::{synth_dataset, SynthConfig};
use bivm::{DenseTensor, Shape};

fn frames(n: usize, h: usize, w: usize) -> DenseTensor {
    DenseTensor::from_fn(Shape::new(n, 3, h, w), |n, c, y, x| (((n * 7 + c * 13 + y * 3 + x * 5) % 17) as f32) / 16.0)
}

#[test]
fn encoder_pyramid_is_half_quarter_eighth_sixteenth() {
    for cfg in [ModelConfig::toy(), ModelConfig::bivm(), ModelConfig::baseline()] {
        let m = Model::new(cfg.clone(), 1).unwrap();
        let mut b = InferBackend::new(&m.store);
        let x = frames(1, 32, 48);
        let feats = encode(&mut b, &cfg, &x).unwrap();
        assert_eq!(feats.len(), 4);
        for (f, k) in feats.iter().zip([2, 4, 8, 16]) {
            let s = f.shape();
            assert_eq!((s.h, s.w), (32 / k, 48 / k), "{} at 1/{k}", cfg.name);
        }
        let chans: Vec<usize> = feats.iter().map(|f| f.shape().c).collect();
        assert_eq!(chans, cfg.feature_channels().to_vec(), "{}", cfg.name);
    }
}

#[test]
fn inference_shapes_match_the_shape_backend() {
    for cfg in [ModelConfig::toy(), ModelConfig::baseline(), ModelConfig::rvm()] {
        let m = Model::new(cfg.clone(), 2).unwrap();
        let x = frames(1, 32, 64);
        let mut sb = ShapeBackend::new(0, 0.5);
        let want = forward(&mut sb, &cfg, &x.shape(), None, MaskMode::Computed).unwrap();
        let mut b = InferBackend::new(&m.store);
        let got = forward(&mut b, &cfg, &x, None, MaskMode::Computed).unwrap();
        assert_eq!(got.alpha.shape(), want.alpha, "{}", cfg.name);
        assert_eq!(got.fgr.shape(), want.fgr);
        assert_eq!(got.seg.shape(), want.seg);
        let fs: Vec<Shape> = got.feats.iter().map(|f| f.shape()).collect();
        assert_eq!(fs, want.feats);
        assert_eq!(got.masks.len(), want.masks.len());
        for ((k, m), (k2, (s, _))) in got.masks.iter().zip(&want.masks) {
            assert_eq!(k, k2);
            assert_eq!((m.n, m.h, m.w), (s.n, s.h, s.w));
        }
    }
}

#[test]
fn all_ones_mask_equals_dense_evaluation() {
    let mut m = Model::new(ModelConfig::toy(), 3).unwrap();
    m.store.set_scalar(TAU_STAR, f64::NEG_INFINITY).unwrap();
    let x = frames(2, 32, 32);
    let sparse = m.infer(&x, MaskMode::Computed).unwrap();
    assert!(sparse.masks.iter().all(|(_, mk)| mk.count() == mk.bits.len()));
    let dense = m.infer(&x, MaskMode::Full).unwrap();
    assert_eq!(sparse.alpha.max_abs_diff(&dense.alpha), 0.0);
    assert_eq!(sparse.fgr.max_abs_diff(&dense.fgr), 0.0);
}

#[test]
fn threshold_controls_the_sparse_blocks() {
    let mut m = Model::new(ModelConfig::toy(), 3).unwrap();
    let x = frames(1, 32, 32);
    m.store.set_scalar(TAU_STAR, f64::INFINITY).unwrap();
    let empty = m.infer(&x, MaskMode::Computed).unwrap();
    assert!(empty.masks.iter().all(|(_, mk)| mk.count() == 0));
    m.store.set_scalar(TAU_STAR, f64::NEG_INFINITY).unwrap();
    let full = m.infer(&x, MaskMode::Computed).unwrap();
    assert!(empty.alpha.max_abs_diff(&full.alpha) > 0.0);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let clips = synth_dataset(&SynthConfig { clips: 1, frames: 3, h: 32, w: 32, seed: 5 }).unwrap();
    for cfg in [ModelConfig::toy(), ModelConfig::rvm()] {
        let mut m = Model::new(cfg, 9).unwrap();
        m.store.set_scalar(TAU_STAR, 0.05).ok();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bvm");
        checkpoint::save(&m, &p).unwrap();
        let back = checkpoint::load(&p).unwrap();
        assert_eq!(back, m);
        let (a, b) = (m.infer(&clips[0].img, MaskMode::Computed).unwrap(), back.infer(&clips[0].img, MaskMode::Computed).unwrap());
        assert_eq!(a.alpha.max_abs_diff(&b.alpha), 0.0);
        assert_eq!(a.fgr.max_abs_diff(&b.fgr), 0.0);
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let m = Model::new(ModelConfig::toy(), 9).unwrap();
    let mut bytes = checkpoint::to_bytes(&m);
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    bytes[0] ^= 0xff;
    assert!(checkpoint::from_bytes(&bytes).is_err());
}

#[test]
fn outputs_stay_in_range() {
    let m = Model::new(ModelConfig::toy(), 4).unwrap();
    let r = m.infer(&frames(2, 32, 32), MaskMode::Computed).unwrap();
    assert!(r.alpha.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(r.fgr.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn non_finite_frames_are_refused() {
    let m = Model::new(ModelConfig::toy(), 4).unwrap();
    let mut x = frames(1, 32, 32);
    x.set(0, 0, 0, 0, f32::NAN);
    assert!(m.infer(&x, MaskMode::Computed).is_err());
}
