//! Train on one domain, test on the other three.

use tdg::data::BenchmarkSpec;
use tdg::experiments::{run_single_source, DEFAULT_SEEDS};
use tdg::train::{Arm, TrainConfig};
use tdg::words::default_pool;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = BenchmarkSpec::default();
    let table = run_single_source(
        &TrainConfig::default(),
        &spec,
        &default_pool(),
        &DEFAULT_SEEDS,
        &[Arm::Erm, Arm::Tdg],
    )?;
    println!("source  ERM    TDG");
    for s in 0..spec.num_domains {
        let cell = |arm| table.find(arm, &s.to_string(), "avg", "mean").unwrap_or(f64::NAN);
        println!("{s:>6}  {:.3}  {:.3}", cell("ERM"), cell("TDG"));
    }
    println!("TDG gain {:+.2} pp", table.overall_gain("TDG").unwrap_or(f64::NAN));
    Ok(())
}
