//! Brute-force references the library is checked against.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use sybilfs::fids::{EventKind, LineageEvent};
use sybilfs::ids::DiskName;

/// A small random lineage log: at most `max_living` images at once and at
/// most `max_events` events after init. Shuffles take two or three images.
/// Returns the log and a target name created somewhere in it.
pub fn small_log(rng: &mut impl Rng, max_living: usize, max_events: usize) -> (Vec<LineageEvent>, DiskName) {
    let mut next = 1u64;
    let mut fresh = |n: usize| -> Vec<DiskName> {
        (0..n)
            .map(|_| {
                next += 1;
                DiskName(next)
            })
            .collect()
    };
    let k = rng.random_range(2..=4.min(max_living));
    let init = fresh(k);
    let mut living: Vec<DiskName> = init.clone();
    let mut log = vec![LineageEvent::new(EventKind::Init, 0, [], init.iter().copied())];
    let mut created = init;
    let mut worlds = 1u64;
    for t in 1..=max_events as u64 {
        let choice = rng.random_range(0..10);
        let ev = if choice < 6 && living.len() >= 2 {
            let n = rng.random_range(2..=3.min(living.len()));
            if worlds * factorial(n) > 50_000 {
                break;
            }
            worlds *= factorial(n);
            let parts: Vec<DiskName> = living.choose_multiple(rng, n).copied().collect();
            LineageEvent::new(EventKind::Shuffle, t, parts, fresh(n))
        } else if choice < 8 && living.len() < max_living {
            let parent = *living.choose(rng).expect("nonempty");
            LineageEvent::new(EventKind::Fork, t, [parent], fresh(2))
        } else if living.len() > 2 {
            let victim = *living.choose(rng).expect("nonempty");
            LineageEvent::new(EventKind::Retire, t, [victim], [])
        } else {
            continue;
        };
        living.retain(|n| !ev.participants.contains(n));
        living.extend(ev.products.iter().copied());
        created.extend(ev.products.iter().copied());
        log.push(ev);
    }
    let target = *created.choose(rng).expect("init creates names");
    (log, target)
}

fn factorial(n: usize) -> u64 {
    (1..=n as u64).product()
}

fn permutations<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head.clone());
            out.push(p);
        }
    }
    out
}

/// P(r) of `target` by enumerating every combination of shuffle
/// bijections. In each world every name traces back to exactly one origin,
/// an image alive right after the target was created; a name's possible
/// origins are the union over worlds.
pub fn enumerated_curve(log: &[LineageEvent], target: DiskName) -> Vec<Ratio<u64>> {
    let start = log.iter().position(|e| e.products.contains(&target)).expect("target created");
    let mut origins: BTreeSet<DiskName> = BTreeSet::new();
    for e in &log[..=start] {
        if e.kind != EventKind::Init {
            for p in &e.participants {
                origins.remove(p);
            }
        }
        origins.extend(e.products.iter().copied());
    }
    let later = &log[start + 1..];

    // Every world: one bijection per shuffle, as product -> participant.
    let mut worlds: Vec<BTreeMap<DiskName, DiskName>> = vec![BTreeMap::new()];
    for e in later {
        let parts: Vec<DiskName> = e.participants.iter().copied().collect();
        let prods: Vec<DiskName> = e.products.iter().copied().collect();
        match e.kind {
            EventKind::Shuffle => {
                let perms = permutations(&parts);
                worlds = worlds
                    .into_iter()
                    .flat_map(|w| {
                        let prods = &prods;
                        perms.iter().map(move |perm| {
                            let mut w = w.clone();
                            for (prod, part) in prods.iter().zip(perm) {
                                w.insert(*prod, *part);
                            }
                            w
                        })
                    })
                    .collect();
            }
            EventKind::Fork => {
                for w in &mut worlds {
                    for p in &prods {
                        w.insert(*p, parts[0]);
                    }
                }
            }
            _ => {}
        }
    }

    let mut possible: BTreeMap<DiskName, BTreeSet<DiskName>> = BTreeMap::new();
    for w in &worlds {
        for e in later {
            for &p in &e.products {
                let mut n = p;
                while let Some(&up) = w.get(&n) {
                    n = up;
                }
                assert!(origins.contains(&n), "{p} traces back to a non-origin {n}");
                possible.entry(p).or_default().insert(n);
            }
        }
    }

    let mut mixed = BTreeSet::from([target]);
    let mut curve = vec![Ratio::from_integer(1)];
    for e in later {
        if !matches!(e.kind, EventKind::Fork | EventKind::Shuffle) {
            continue;
        }
        let reach: BTreeSet<DiskName> = e.products.iter().flat_map(|p| possible[p].iter().copied()).collect();
        if !reach.contains(&target) {
            continue;
        }
        mixed.extend(reach);
        curve.push(Ratio::new(1, mixed.len() as u64));
    }
    curve
}

/// Living images and alive initial lineages after every prefix of `log`,
/// each prefix recomputed from scratch.
pub fn prefix_audit(log: &[LineageEvent]) -> Vec<(usize, usize)> {
    (0..log.len())
        .map(|i| {
            let mut roots: BTreeMap<DiskName, BTreeSet<DiskName>> = BTreeMap::new();
            for e in &log[..=i] {
                match e.kind {
                    EventKind::Init => {
                        for &p in &e.products {
                            roots.insert(p, BTreeSet::from([p]));
                        }
                    }
                    _ => {
                        let mut union = BTreeSet::new();
                        for p in &e.participants {
                            union.extend(roots.remove(p).expect("participant alive"));
                        }
                        for &p in &e.products {
                            roots.insert(p, union.clone());
                        }
                    }
                }
            }
            let alive: BTreeSet<&DiskName> = roots.values().flatten().collect();
            (roots.len(), alive.len())
        })
        .collect()
}

/// Names in `log` shuffled into a random permutation of themselves.
pub fn shuffled<T: Clone>(rng: &mut impl Rng, items: &[T]) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(rng);
    v
}
