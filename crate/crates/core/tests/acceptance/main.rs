//! Acceptance checks, one line per criterion.
//!
//! Runs under `cargo test`; pass criterion numbers to run a subset, e.g.
//! `cargo test --test acceptance -- 1 2 9`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

mod ablation;
mod contracts;
mod fixtures;
mod metrics;
mod trained;

/// Collected sub-check failures for one criterion.
#[derive(Default)]
pub struct Verdict {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Verdict {
    pub fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.failures.push(what.into());
        }
    }

    pub fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn(&mut Verdict),
}

fn criteria() -> Vec<Criterion> {
    let secs = Duration::from_secs;
    vec![
        Criterion { id: 1, name: "geometry", budget: secs(10), run: contracts::geometry },
        Criterion { id: 2, name: "noise schedule", budget: secs(1), run: contracts::schedule },
        Criterion { id: 3, name: "gradients", budget: secs(60), run: contracts::gradients },
        Criterion { id: 4, name: "loss decomposition", budget: secs(10), run: contracts::loss_decomposition },
        Criterion { id: 5, name: "overfit training", budget: secs(15 * 60), run: trained::overfit_training },
        Criterion { id: 6, name: "sampling contracts", budget: secs(60), run: trained::sampling_contracts },
        Criterion { id: 7, name: "inpainting fidelity", budget: secs(5 * 60), run: trained::inpainting_fidelity },
        Criterion { id: 8, name: "ultra-long rollout", budget: secs(5 * 60), run: trained::ultralong_rollout },
        Criterion { id: 9, name: "metric oracles", budget: secs(60), run: metrics::oracles },
        Criterion { id: 10, name: "ablation plumbing", budget: secs(30 * 60), run: ablation::plumbing },
    ]
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria().into_iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let mut v = Verdict::default();
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| (c.run)(&mut v)));
        let elapsed = start.elapsed();
        if let Err(p) = outcome {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            v.failures.push(format!("panicked: {}", msg.unwrap_or_default()));
        }
        v.check(elapsed <= c.budget, format!("runtime {:.1}s over the {}s budget", elapsed.as_secs_f64(), c.budget.as_secs()));
        let status = if v.failures.is_empty() { "PASS" } else { "FAIL" };
        let mut line = format!("{status} criterion {:>2} {:<20} {:>7.1}s", c.id, c.name, elapsed.as_secs_f64());
        if !v.notes.is_empty() {
            line += &format!("  {}", v.notes.join("; "));
        }
        if !v.failures.is_empty() {
            failed += 1;
            line += &format!("  failed: {}", v.failures.join("; "));
        }
        println!("{line}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
