//! Trains briefly, saves a checkpoint, reloads it and checks that the
//! reloaded encoder produces identical embeddings.
//!
//! cargo run --release --example checkpoint_roundtrip

use caat_ehr::data::{generate_synthetic, SynthConfig};
use caat_ehr::model::{checkpoint_manifest, encode, load_checkpoint, save_checkpoint, ModelConfig};
use caat_ehr::pretrain::{pretrain, PretrainPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let synth = SynthConfig {
        subjects: 64,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&synth, 1)?;
    let c = ModelConfig::new(synth.f1, synth.f2, 8, 2);
    let plan = PretrainPlan {
        epochs: 3,
        ..PretrainPlan::default()
    };
    let (weights, _) = pretrain(&data.samples, &c, &plan)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.caat");
    save_checkpoint(&weights, &path)?;
    println!("{} bytes", std::fs::metadata(&path)?.len());
    for (name, shape) in checkpoint_manifest(&weights) {
        println!("  {name:<32} {shape:?}");
    }

    let back = load_checkpoint(&path)?;
    let s = &data.samples[0];
    let e1 = encode(&s.m1, &s.m2, weights.encoder_view())?;
    let e2 = encode(&s.m1, &s.m2, back.encoder_view())?;
    println!(
        "embedding of {}: {} x {}, identical after reload: {}",
        s.stay_id,
        e1.time_points(),
        e1.width(),
        e1.tensor() == e2.tensor()
    );
    Ok(())
}
