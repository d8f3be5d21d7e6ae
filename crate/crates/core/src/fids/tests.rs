use super::*;
use crate::backstore::{Backstore, BackstoreConfig, Role};
use crate::simfs::{FsOptions, SimFs};
use simulate::{run_mock, MockRunParams};

fn mock_setup(k: usize, t: u64, n: u64, identical: bool) -> (Fids, MockBackend, Vec<DiskName>) {
    seeded_setup(k, t, n, identical, 11)
}

fn seeded_setup(k: usize, t: u64, n: u64, identical: bool, seed: u64) -> (Fids, MockBackend, Vec<DiskName>) {
    let mut fids = Fids::new(FidsConfig::new(k, t, n), seed).unwrap();
    let mut be = MockBackend::new(seed + 1);
    let names = fids.initial_names();
    for (i, &nm) in names.iter().enumerate() {
        let d = if identical { Digest::of(b"m") } else { Digest::of(&[i as u8]) };
        be.add(nm, d, i == 0);
    }
    fids.init(&names, 0).unwrap();
    (fids, be, names)
}

#[test]
fn config_rejects_single_image() {
    assert!(Fids::new(FidsConfig::new(1, 10, 10), 0).is_err());
    assert!(Fids::new(FidsConfig::new(2, 0, 10), 0).is_err());
}

#[test]
fn time_trigger_fires_at_the_boundary() {
    let (fids, _, names) = mock_setup(3, 1000, 100, true);
    assert!(fids.check_triggers(999).is_empty());
    assert_eq!(fids.check_triggers(1000).len(), names.len());
    assert_eq!(fids.next_deadline(), Some(1000));
}

#[test]
fn activity_trigger_needs_n_calls() {
    let (mut fids, _, names) = mock_setup(3, 1_000_000, 5, true);
    for _ in 0..4 {
        fids.note_call(names[1]);
    }
    assert!(fids.check_triggers(10).is_empty());
    fids.note_call(names[1]);
    assert_eq!(fids.check_triggers(10), vec![names[1]]);
}

#[test]
fn time_triggers_are_ordered_before_activity_triggers() {
    let (mut fids, mut be, names) = mock_setup(3, 100, 2, false);
    for _ in 0..2 {
        fids.note_call(names[1]);
    }
    fids.step(50, &mut be).unwrap();
    let product = *fids.log().last().unwrap().products.iter().next().unwrap();
    for _ in 0..2 {
        fids.note_call(product);
    }
    let due = fids.check_triggers(100);
    assert_eq!(due, vec![names[0], names[2], product]);
}

#[test]
fn shuffle_draws_disjoint_fresh_names() {
    let (mut fids, mut be, names) = mock_setup(4, 100, 1000, true);
    fids.step(100, &mut be).unwrap();
    let e = fids.log().last().unwrap();
    assert_eq!(e.kind, EventKind::Shuffle);
    assert_eq!(e.participants, names.iter().copied().collect());
    assert_eq!(e.products.len(), 4);
    assert!(e.products.is_disjoint(&e.participants));
    assert!(fids.images().all(|i| i.last_shuffle == 100 && i.calls_served == 0));
}

#[test]
fn singleton_is_forked_into_two_names_of_the_same_lineage() {
    let (mut fids, mut be, names) = mock_setup(2, 100, 3, false);
    for _ in 0..3 {
        fids.note_call(names[1]);
    }
    let rb = fids.step(10, &mut be).unwrap();
    let e = fids.log().last().unwrap();
    assert_eq!(e.kind, EventKind::Fork);
    assert_eq!(e.participants, [names[1]].into());
    assert_eq!(e.products.len(), 2);
    let tags: BTreeSet<usize> = fids.images().filter(|i| e.products.contains(&i.name)).map(|i| i.lineage_tag).collect();
    assert_eq!(tags, [1].into());
    assert!(matches!(rb[0], Rebinding::Cloned { from, .. } if from == names[1]));
}

#[test]
fn fork_through_the_backstore_grows_no_blob() {
    let mut bs = Backstore::new(BackstoreConfig::new(5, 1024)).unwrap();
    let mut fids = Fids::new(FidsConfig::new(2, 1000, 1), 6).unwrap();
    let names = fids.initial_names();
    bs.add_image(names[0], Role::Actual).unwrap();
    let (_fs, reqs) = SimFs::mkfs(names[0], 1024, FsOptions::default()).unwrap();
    for r in &reqs {
        bs.handle_request(r).unwrap();
    }
    bs.add_image(names[1], Role::Sybil).unwrap();
    let (_fs, reqs) = SimFs::mkfs(names[1], 1024, FsOptions { inline_threshold: 0 }).unwrap();
    for r in &reqs {
        bs.handle_request(r).unwrap();
    }
    fids.init(&names, 0).unwrap();
    let blob = bs.blob_bytes();
    fids.note_call(names[1]);
    fids.step(1, &mut bs).unwrap();
    assert_eq!(fids.log().last().unwrap().kind, EventKind::Fork);
    assert_eq!(bs.blob_bytes(), blob);
    assert_eq!(bs.images().count(), 3);
}

#[test]
fn retire_candidates_respect_lineage_and_floor() {
    let (mut fids, mut be, names) = mock_setup(2, 1_000_000, 1, false);
    assert!(fids.select_retire_candidates(&be).is_empty());
    fids.note_call(names[1]);
    fids.step(1, &mut be).unwrap();
    // Tag 1 now has two holders, tag 0 one (the actual).
    let c = fids.select_retire_candidates(&be);
    assert_eq!(c.len(), 2);
    assert!(c.iter().all(|n| !be.is_actual(*n)));
    let young: Vec<_> = fids.images().filter(|i| i.lineage_tag == 1).map(|i| (i.born, i.name)).collect();
    assert_eq!(c[0], young.iter().max().unwrap().1);
}

#[test]
fn population_stays_at_or_below_high_water() {
    let run = run_mock(
        3,
        &MockRunParams {
            k: 4,
            t_us: 1000,
            n_calls: 3,
            mean_call_gap_us: 20.0,
            p_diverge: 0.5,
            target_events: 2000,
        },
    )
    .unwrap();
    for &(living, alive) in &run.checkpoints {
        assert!((4..=8).contains(&living), "living {living}");
        assert_eq!(alive, 4);
    }
    assert!(run.log.iter().any(|e| e.kind == EventKind::Retire));
    assert!(run.log.iter().any(|e| e.kind == EventKind::Fork));
    assert!(run.log.iter().any(|e| e.kind == EventKind::Shuffle));
}

#[test]
fn linking_across_a_shuffle_is_a_blind_guess() {
    let trials = 10_000;
    let mut hits = 0;
    for seed in 0..trials {
        let (mut fids, mut be, _) = seeded_setup(4, 10, 1000, true, seed);
        fids.step(10, &mut be).unwrap();
        let e = fids.log().last().unwrap();
        // Fixed adversary strategy: the smallest new name.
        let guess = *e.products.iter().next().unwrap();
        hits += usize::from(be.is_actual(guess));
    }
    let rate = hits as f64 / trials as f64;
    assert!((rate - 0.25).abs() < 0.02, "rate {rate}");
}

#[test]
fn event_log_round_trips_as_jsonl() {
    let (mut fids, mut be, _) = mock_setup(3, 10, 1000, true);
    fids.step(10, &mut be).unwrap();
    let mut out = Vec::new();
    LineageEvent::write_jsonl(fids.log(), &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("{\"kind\":\"init\""));
    assert_eq!(LineageEvent::read_jsonl(&text).unwrap(), fids.log());
}
