//! Synthetic end-to-end comparison: a linear classifier on mean-pooled raw
//! features against one on mean-pooled embeddings from a pre-trained
//! encoder.
//!
//! cargo run --release --example embedding_benchmark -- [seed] [epochs]

use caat_ehr::data::{generate_synthetic, make_downstream_sample, run_pipeline, SynthConfig, Task};
use caat_ehr::downstream::{
    extract_embeddings, raw_sequences, run_benchmark, BenchmarkTask, ClassifierKind, FoldSpec, LinearHyper,
    Variant,
};
use caat_ehr::model::ModelConfig;
use caat_ehr::pretrain::{pretrain, PretrainPlan};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAAT_LOG", "warn")).init();
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(Ok(0), |a| a.parse())?;
    let epochs = args.next().map_or(Ok(40), |a| a.parse())?;

    let synth = SynthConfig::default();
    let prepared = run_pipeline(generate_synthetic(&synth, seed)?, &synth.schema(), 0.7, seed)?;
    let c = ModelConfig::new(synth.f1, synth.f2, 16, 4);
    let plan = PretrainPlan {
        epochs,
        seed,
        ..Default::default()
    };
    let (weights, curve) = pretrain(&prepared.embedding.samples, &c, &plan)?;
    println!("pre-trained {} epochs, best validation MSE {:.4}", curve.epochs_run(), curve.best_val_mse());

    let labeled = prepared
        .downstream
        .samples
        .iter()
        .map(|s| make_downstream_sample(s, Task::Synthetic))
        .collect::<Result<Vec<_>, _>>()?;
    let task = BenchmarkTask {
        task: Task::Synthetic.to_string(),
        variants: vec![
            Variant {
                name: "raw".into(),
                samples: raw_sequences(&labeled),
            },
            Variant {
                name: "caat".into(),
                samples: extract_embeddings(&labeled, weights.encoder_view())?,
            },
        ],
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
