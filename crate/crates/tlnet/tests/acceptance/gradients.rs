use std::time::Instant;

use tlnet_core::gradsuite::run_suite;

use crate::Outcome;

const SEEDS: u64 = 20;
const BUDGET_S: f64 = 120.0;

pub fn run() -> Outcome {
    let t = Instant::now();
    let mut failures = Vec::new();
    let mut worst: (f64, &str) = (0.0, "");
    let mut cases = 0;
    for seed in 0..SEEDS {
        let suite = match run_suite(seed) {
            Ok(s) => s,
            Err(e) => return Outcome::new(false, format!("seed {seed}: {e}")),
        };
        for case in suite {
            cases += 1;
            let e = case.report.max_rel_err();
            if e / case.report.tolerance > worst.0 {
                worst = (e / case.report.tolerance, case.op);
            }
            if !case.passed() {
                failures.push(format!("{}@{seed} rel {e:.2e}", case.op));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < BUDGET_S;
    Outcome::new(
        pass,
        format!(
            "{cases} checks over {SEEDS} seeds, worst {} at {:.1e} of tolerance, {secs:.1}s of {BUDGET_S}s{}",
            worst.1,
            worst.0,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failures.join(", "))
            }
        ),
    )
}
