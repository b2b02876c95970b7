mod common;

use pcache_sim::oracle::solve_exact;
use pcache_sim::policies::PolicyKind;

#[test]
fn optimum_never_exceeds_any_policy() {
    let report = common::check_dominance(120, 7);
    assert!(report.violations.is_empty(), "{:#?}", report.violations);
    assert!(report.pcache_beats_nocache > 0);
}

#[test]
fn simulated_runs_of_tiny_instances_pass_every_check() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 40 {
        let inst = common::random_instance(&mut rng);
        if solve_exact(&inst).is_err() {
            continue;
        }
        for p in PolicyKind::ALL {
            match inst.run_policy(p, 2, 5) {
                Ok(r) => assert_eq!(r.ledger.requests(), r.audit.unwrap().len() as u64),
                Err(pcache_sim::Error::BoundViolation(_)) => {}
                Err(e) => panic!("{} on {}: {e}", p.name(), inst.to_json()),
            }
        }
        checked += 1;
    }
}
