use migrant_simnet::kv::{run, KvScenario};

#[test]
fn coordination_store_is_linearizable_over_100_seeds() {
    let mut failures = Vec::new();
    let mut completed = 0;
    for seed in 1..=100 {
        let r = run(&KvScenario { seed, ..KvScenario::default() });
        completed += r.completed();
        if let Err(v) = r.check() {
            failures.push(format!("seed {seed} ({:?}): {v}", r.faults));
        }
    }
    assert!(failures.is_empty(), "{} of 100 seeds failed:\n{}", failures.len(), failures.join("\n"));
    // the histories must be non-trivial
    assert!(completed > 100 * 200, "only {completed} completed operations");
}

#[test]
fn checker_rejects_a_corrupted_history() {
    let mut r = run(&KvScenario { seed: 7, ..KvScenario::default() });
    assert!(r.check().is_ok());
    let created = r
        .history
        .iter()
        .position(|o| matches!(o.returned, Some((_, migrant_core::coordkv::KvResult::AlreadyExists))))
        .expect("some create lost a race");
    let (t, _) = r.history[created].returned.clone().unwrap();
    r.history[created].returned = Some((t, migrant_core::coordkv::KvResult::Created));
    assert!(r.check().is_err());
}
