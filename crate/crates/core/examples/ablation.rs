//! Pre-trains the full model and both ablations on one synthetic cohort
//! and compares their embeddings downstream.
//!
//! cargo run --release --example ablation -- [seed]

use caat_ehr::data::{generate_synthetic, make_downstream_sample, run_pipeline, SynthConfig, Task};
use caat_ehr::downstream::{
    extract_embeddings, run_benchmark, BenchmarkTask, ClassifierKind, FoldSpec, LinearHyper, Variant,
};
use caat_ehr::model::{Ablation, ModelConfig};
use caat_ehr::pretrain::{pretrain, PretrainPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAAT_LOG", "warn")).init();
    let seed = std::env::args().nth(1).map_or(Ok(0), |a| a.parse())?;

    let synth = SynthConfig::default();
    let prepared = run_pipeline(generate_synthetic(&synth, seed)?, &synth.schema(), 0.7, seed)?;
    let labeled = prepared
        .downstream
        .samples
        .iter()
        .map(|s| make_downstream_sample(s, Task::Synthetic))
        .collect::<Result<Vec<_>, _>>()?;
    let plan = PretrainPlan {
        seed,
        ..Default::default()
    };
    let mut variants = Vec::new();
    for ablation in Ablation::ALL {
        let c = ModelConfig::new(synth.f1, synth.f2, 16, 4).with_ablation(ablation);
        let (weights, curve) = pretrain(&prepared.embedding.samples, &c, &plan)?;
        println!("{ablation}: best validation MSE {:.4} after {} epochs", curve.best_val_mse(), curve.epochs_run());
        variants.push(Variant {
            name: ablation.label().into(),
            samples: extract_embeddings(&labeled, weights.encoder_view())?,
        });
    }
    let task = BenchmarkTask {
        task: Task::Synthetic.to_string(),
        variants,
    };
    let spec = FoldSpec {
        repeats: 2,
        seed,
        ..Default::default()
    };
    let report = run_benchmark(&[task], &[ClassifierKind::Linear(LinearHyper::default())], &spec)?;
    print!("{}", report.to_table());
    Ok(())
}
