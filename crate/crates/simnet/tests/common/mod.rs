#![allow(dead_code)]

use migrant_simnet::{sweep, Scenario};

pub fn scenario(text: &str) -> Scenario {
    text.parse().expect("scenario parses")
}

/// Runs seeds 1..=100 and panics with every failure report.
pub fn sweep_100(text: &str) {
    let sc = scenario(text);
    let report = sweep(&sc, 1..=100, |_| {});
    assert_eq!(report.runs, 100);
    if !report.all_passed() {
        let msgs: Vec<String> = report.failures.iter().map(|(s, o)| format!("seed {s}: {o}")).collect();
        panic!("{} of 100 seeds failed:\n{}", msgs.len(), msgs.join("\n"));
    }
}
