use magnet_core::pipeline::{generate_splits, run_ablations};

use crate::fixtures::desk_config;
use crate::Verdict;

pub fn plumbing(v: &mut Verdict) {
    let mut cfg = desk_config("orbit");
    for (k, val) in [("vqvae.steps", "300"), ("dfot.steps", "500"), ("sample.strategy", "joint"), ("sample.history", "4")] {
        cfg.set(k, val).unwrap();
    }
    let splits = generate_splits(&cfg).unwrap();
    let reports = run_ablations(&cfg, &splits, |_| {}).unwrap();
    let labels: Vec<&str> = reports.iter().map(|r| r.label.as_str()).collect();
    v.check(
        labels == ["full", "w/o partner transforms", "w/o vqvae (raw features)", "guidance hg", "guidance shg", "guidance phg"],
        format!("unexpected rows {labels:?}"),
    );
    let names: Vec<&str> = reports[0].rows.iter().map(|r| r.name.as_str()).collect();
    for r in &reports {
        let these: Vec<&str> = r.rows.iter().map(|m| m.name.as_str()).collect();
        v.check(these == names, format!("{}: metric set differs", r.label));
        v.check(r.rows.iter().all(|m| m.value.is_finite() && m.value >= 0.0), format!("{}: non-finite metric", r.label));
        v.check(r.config_hash.len() == 16, format!("{}: missing config hash", r.label));
    }
    println!("    {:<26}{}", "variant", names.iter().map(|n| format!("{n:>10}")).collect::<String>());
    for r in &reports {
        println!("    {:<26}{}", r.label, r.rows.iter().map(|m| format!("{:>10.4}", m.value)).collect::<String>());
    }
    v.note(format!("{} comparable reports", reports.len()));
}
