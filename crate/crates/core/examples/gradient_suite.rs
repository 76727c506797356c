//! A few randomized finite-difference trials of every primitive, loss and
//! module block. The `gradcheck` subcommand runs the full count.

use maestro::gradsuite::run_suite;
use maestro::numerics::GradCheckConfig;

fn main() -> maestro::Result<()> {
    let trials = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let report = run_suite(trials, 0, GradCheckConfig::default(), None)?;
    for c in &report.cases {
        println!(
            "{:<22} {} trials  worst rel {:.1e}  {}",
            c.name,
            c.trials,
            c.worst_rel,
            if c.pass() { "ok" } else { "FAIL" }
        );
    }
    println!("{:.1}s", report.seconds);
    Ok(())
}
