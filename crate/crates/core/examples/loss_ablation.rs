//! Which prompt loss terms matter: none, alignment only, similarity only,
//! both. Also sweeps λ.

use tdg::data::BenchmarkSpec;
use tdg::experiments::{
    lambda_label, run_loss_ablation, sweep_lambda, ABLATION_ALIGN_ONLY, ABLATION_FULL,
    ABLATION_NO_TEXT, ABLATION_SIM_ONLY, DEFAULT_SEEDS, LAMBDA_SWEEP,
};
use tdg::train::TrainConfig;
use tdg::words::default_pool;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (config, spec, pool) = (TrainConfig::default(), BenchmarkSpec::default(), default_pool());
    let ablation = run_loss_ablation(&config, &spec, &pool, &DEFAULT_SEEDS)?;
    for arm in [ABLATION_NO_TEXT, ABLATION_ALIGN_ONLY, ABLATION_SIM_ONLY, ABLATION_FULL] {
        println!("{arm:10} {:.4}", ablation.overall_mean(arm).unwrap_or(f64::NAN));
    }

    let sweep = sweep_lambda(&config, &spec, &pool, &DEFAULT_SEEDS, &LAMBDA_SWEEP)?;
    for &l in &LAMBDA_SWEEP {
        let label = lambda_label(l);
        println!("{label:10} {:.4}", sweep.overall_mean(&label).unwrap_or(f64::NAN));
    }
    Ok(())
}
