//! Compares every gradient of the pre-training loss against central
//! differences at a random initialization.
//!
//! cargo run --release --example gradient_check -- [seed]

use caat_ehr::data::EhrSample;
use caat_ehr::model::{init_weights, pretrain_loss_on_graph, Ablation, ModelConfig};
use caat_ehr::pretrain::split_for_pretrain;
use caat_ehr::rng::seeded;
use caat_ehr::tensor::{grad_check_many, Tensor, TensorError};
use rand::Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map_or(Ok(0), |a| a.parse())?;
    let mut rng = seeded(seed);
    let mut random = |r: usize, c: usize| {
        Tensor::new(&[r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let sample = EhrSample::dense("p", "s", vec![0.0, 1.0, 2.0, 3.0], random(4, 3)?, random(4, 2)?);

    for ablation in Ablation::ALL {
        let c = ModelConfig::new(3, 2, 4, 2).with_ablation(ablation);
        let w = init_weights(&c, seed)?;
        let pair = split_for_pretrain(&sample, ablation)?;
        let report = grad_check_many(
            |g, vars| pretrain_loss_on_graph(g, vars, &pair, &w).map_err(|e| TensorError::Invalid(e.to_string())),
            w.store.tensors(),
            1e-5,
        )?;
        println!(
            "{ablation:>6}: {} scalars, max relative error {:.2e} at {}[{}] (analytic {:.3e}, numeric {:.3e})",
            report.checked,
            report.max_relative_error,
            w.store.names()[report.worst.0],
            report.worst.1,
            report.analytic,
            report.numeric
        );
    }
    Ok(())
}
