mod common;

#[test]
fn acked_messages_survive_a_crash_over_100_seeds() {
    common::sweep_100(include_str!("../scenarios/crash.scn"));
}
