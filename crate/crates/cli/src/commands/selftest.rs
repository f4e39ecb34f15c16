use std::time::Instant;

use clap::Args;
use longiflow::flow::inject_logdet_sign_fault;
use longiflow::verify::run_battery;

use crate::error::{CliError, Result};

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Flip the sign of every IAF log-determinant (mutation check).
    #[arg(long, hide = true)]
    pub inject_logdet_fault: bool,
}

pub fn run(args: &SelftestArgs) -> Result<()> {
    let start = Instant::now();
    inject_logdet_sign_fault(args.inject_logdet_fault);
    let rows = run_battery(args.seed);
    inject_logdet_sign_fault(false);
    println!("{:<4} {:<28} {:>12}", "", "check", "value");
    for r in &rows {
        println!("{r}");
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!(
        "{} of {} checks passed in {:.1} s",
        rows.len() - failed,
        rows.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CliError::SelftestFailed { failed });
    }
    Ok(())
}
