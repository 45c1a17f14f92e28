//! Checks every hand-written gradient against central differences.

use tdg::experiments::run_gradcheck;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let trials: usize = std::env::args().nth(1).map_or(Ok(20), |s| s.parse())?;
    let report = run_gradcheck(0, trials)?;
    print!("{}", report.to_text());
    report.into_result()?;
    Ok(())
}
