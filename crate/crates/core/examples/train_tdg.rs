//! Trains one TDG model with domain 3 held out and saves the checkpoint.

use tdg::data::{generate_benchmark, leave_one_domain_out, split_train_val, BenchmarkSpec};
use tdg::train::{evaluate, train, TrainConfig};
use tdg::words::default_pool;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate_benchmark(&BenchmarkSpec::default())?;
    let (sources, target) = leave_one_domain_out(&ds, 3)?;
    let config = TrainConfig::default();
    let split = split_train_val(&ds, &sources, config.seed)?;
    let model = train(&config, &ds, &split, Some(&default_pool()))?;

    for s in model.loss_trace.iter().step_by(100) {
        println!(
            "step {:3}  L_img {:.4}  L_txt {:.4}",
            s.step,
            s.image,
            s.text.unwrap_or(f64::NAN)
        );
    }
    println!(
        "selected step {} (val {:.3}); target {target}: ema {:.3}, live {:.3}",
        model.selected_step,
        model.selected_val_accuracy,
        evaluate(&model, &ds, target, true)?,
        evaluate(&model, &ds, target, false)?
    );
    if let Some(path) = std::env::args().nth(1) {
        model.write(std::fs::File::create(&path)?)?;
        println!("checkpoint written to {path}");
    }
    Ok(())
}
