//! Acceptance suite: one pass/fail line per criterion.
//!
//! `TLNET_ACCEPT=1,3,5` runs a subset.

mod coherence;
mod determinism;
mod end_to_end;
mod evaluation;
mod formats;
mod geometry;
mod gradients;
mod triangulation;

use std::time::Instant;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 8] = [
    (1, "gradient suite", gradients::run),
    (2, "geometry oracles", geometry::run),
    (3, "coherence contracts", coherence::run),
    (4, "triangulation geometry", triangulation::run),
    (5, "evaluation oracle", evaluation::run),
    (6, "synthetic end-to-end", end_to_end::run),
    (7, "determinism", determinism::run),
    (8, "format fidelity", formats::run),
];

fn main() {
    let only: Option<Vec<u32>> = std::env::var("TLNET_ACCEPT")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, f) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let out = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        println!(
            "criterion {id} {name}: {} ({:.1}s) {}",
            if out.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            out.detail
        );
        if !out.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
