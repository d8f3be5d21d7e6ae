mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sybilfs::fids::simulate::{run_mock, MockRunParams};
use sybilfs::fids::LineageEvent;
use sybilfs::observer::{anonymity_curve, extinct_lineage_audit, max_name_lifetime};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn curve_matches_enumeration(seed in any::<u64>()) {
        let (log, target) = common::small_log(&mut ChaCha8Rng::seed_from_u64(seed), 6, 8);
        let got: Vec<_> = anonymity_curve(&log, target).unwrap().into_iter().map(|p| p.p).collect();
        prop_assert_eq!(got, common::enumerated_curve(&log, target));
    }

    #[test]
    fn incremental_audit_agrees_with_prefix_replay(seed in any::<u64>()) {
        let (log, _) = common::small_log(&mut ChaCha8Rng::seed_from_u64(seed), 6, 8);
        let k = log[0].products.len();
        let prefixes = common::prefix_audit(&log);
        let report = extinct_lineage_audit(&log).unwrap();
        let first_bad = prefixes.iter().position(|&(living, alive)| living < k || alive != k);
        prop_assert_eq!(report.first_violation, first_bad);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fuzzed_runs_keep_lineages_and_bound_lifetimes(seed in any::<u64>(), events in 20usize..200) {
        let p = MockRunParams::random(&mut ChaCha8Rng::seed_from_u64(seed), events);
        let run = run_mock(seed, &p).unwrap();
        prop_assert!(extinct_lineage_audit(&run.log).unwrap().passed());
        prop_assert!(max_name_lifetime(&run.log, run.end_time) <= p.t_us);
        let mut text = Vec::new();
        LineageEvent::write_jsonl(&run.log, &mut text).unwrap();
        prop_assert_eq!(LineageEvent::read_jsonl(std::str::from_utf8(&text).unwrap()).unwrap(), run.log);
    }
}
