//! Pre-trains the model on a synthetic cohort and prints the loss curve.
//!
//! cargo run --release --example pretrain_synthetic -- [epochs] [seed]

use caat_ehr::data::{generate_synthetic, run_pipeline, SynthConfig};
use caat_ehr::model::ModelConfig;
use caat_ehr::pretrain::{pretrain, PretrainPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAAT_LOG", "info")).init();
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(Ok(30), |a| a.parse())?;
    let seed = args.next().map_or(Ok(0), |a| a.parse())?;

    let synth = SynthConfig::default();
    let raw = generate_synthetic(&synth, seed)?;
    let prepared = run_pipeline(raw, &synth.schema(), 0.7, seed)?;
    let c = ModelConfig::new(synth.f1, synth.f2, 16, 4);
    let plan = PretrainPlan {
        epochs,
        seed,
        ..Default::default()
    };
    let start = std::time::Instant::now();
    let (_, curve) = pretrain(&prepared.embedding.samples, &c, &plan)?;
    println!("epoch  train_mse  val_mse");
    println!("{:>5}  {:.5}    {:.5}", 0, curve.initial_train_mse, curve.initial_val_mse);
    for (i, (t, v)) in curve.train_mse.iter().zip(&curve.val_mse).enumerate() {
        println!("{:>5}  {t:.5}    {v:.5}", i + 1);
    }
    println!(
        "best epoch {} ({:.5}), {:.1}s",
        curve.best_epoch,
        curve.best_val_mse(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
