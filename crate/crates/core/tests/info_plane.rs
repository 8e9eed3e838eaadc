use bivm::cli::float_variant;
use bivm::info::{info_plane_log, DEFAULT_BINS};
use bivm::model::{Model, ModelConfig};
use bivm::synth::{synth_dataset, SynthConfig};

#[test]
fn binarized_encoder_keeps_less_label_information() {
    let clips = synth_dataset(&SynthConfig { clips: 4, frames: 15, h: 32, w: 32, seed: 11 }).unwrap();
    let cfg = ModelConfig::toy();
    let mut bin = Model::new(cfg.clone(), 0).unwrap();
    let mut fp = Model::new(float_variant(&cfg), 0).unwrap();
    let a = info_plane_log(&mut bin, &clips, 2, DEFAULT_BINS, 0).unwrap();
    let b = info_plane_log(&mut fp, &clips, 2, DEFAULT_BINS, 0).unwrap();
    assert_eq!(a.len(), 3);
    for (p, q) in a.iter().zip(&b) {
        println!("epoch {}: binary ({:.4}, {:.4}) float ({:.4}, {:.4})", p.epoch, p.i_xt, p.i_ty, q.i_xt, q.i_ty);
        assert!(p.i_xt.is_finite() && p.i_ty >= 0.0 && p.i_ty <= p.i_xt + 1e-9);
        assert!(p.i_ty < q.i_ty, "epoch {}: {} vs {}", p.epoch, p.i_ty, q.i_ty);
    }
}
