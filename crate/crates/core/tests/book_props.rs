use std::collections::HashSet;

use bookmem::book::entry_priority;
use bookmem::*;
use proptest::prelude::*;

fn step() -> impl Strategy<Value = (f64, f64, usize, f64)> {
    (0.0f64..4.0, 0.0f64..4.0, 0usize..3, -1.0f64..1.0)
}

fn episodes() -> impl Strategy<Value = Vec<Vec<(f64, f64, usize, f64)>>> {
    prop::collection::vec(prop::collection::vec(step(), 1..12), 1..40)
}

fn to_episode(raw: &[(f64, f64, usize, f64)]) -> Episode64 {
    let steps = raw
        .iter()
        .enumerate()
        .map(|(i, &(x, y, a, r))| {
            let next = raw.get(i + 1).map(|s| vec![s.0, s.1]).unwrap_or_else(|| vec![y, x]);
            Transition { state: vec![x, y], action: a, reward: r, next_state: next, terminal: i + 1 == raw.len() }
        })
        .collect();
    Episode::new(steps).unwrap()
}

fn fill(capacity: usize, retention: Retention, eps: &[Vec<(f64, f64, usize, f64)>]) -> Book64 {
    let q = QuantizerConfig::new(8, vec![0.0, 0.0], vec![4.0, 4.0]).unwrap();
    let params = BookParams { decay_period: 5, ..BookParams::default() };
    let mut book = Book::new(q, 3, capacity, params).unwrap().with_retention(retention);
    for e in eps {
        book.record_episode(&to_episode(e)).unwrap();
    }
    book
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn capacity_and_frequency_bounds_hold(eps in episodes(), cap in 2usize..30, seed in 0u64..4) {
        for retention in [Retention::Proposed, Retention::Random { seed }, Retention::FrequencyOnly, Retention::PerStyle] {
            let book = fill(cap, retention, &eps);
            prop_assert!(book.len() <= cap);
            for e in book.entries() {
                prop_assert!(e.f.iter().all(|&f| f <= book.params().f_limit));
                prop_assert!(e.q.iter().all(|q| q.is_finite()));
                for a in 0..3 {
                    prop_assert!(e.known[a] || e.f[a] == 0);
                }
            }
        }
    }

    #[test]
    fn publish_takes_a_dominant_prefix(eps in episodes(), n in 1usize..40) {
        let book = fill(1_000, Retention::Proposed, &eps);
        let published = book.publish(n, &PublishMeta::new("grid", "random")).unwrap();
        prop_assert_eq!(published.len(), n.min(book.len()));
        let keys: HashSet<_> = published.entries().iter().map(|e| e.key.clone()).collect();
        prop_assert_eq!(keys.len(), published.len());
        let floor = published.entries().iter().map(entry_priority).fold(f64::INFINITY, f64::min);
        for e in book.entries().filter(|e| !keys.contains(&e.key)) {
            prop_assert!(entry_priority(e) <= floor);
        }
        let k = (n / 2).max(1);
        let top = published.top(k).unwrap();
        prop_assert_eq!(top.entries(), &published.entries()[..k.min(published.len())]);
    }

    #[test]
    fn json_round_trip_is_exact(eps in episodes()) {
        let book = fill(50, Retention::Proposed, &eps);
        let published = book.publish(50, &PublishMeta::new("grid", "random")).unwrap();
        let text = published.to_json().unwrap();
        let back = PublishedBook64::from_json(&text).unwrap();
        prop_assert_eq!(&back, &published);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn recording_is_deterministic(eps in episodes()) {
        let a = fill(20, Retention::Random { seed: 7 }, &eps);
        let b = fill(20, Retention::Random { seed: 7 }, &eps);
        let meta = PublishMeta::new("grid", "random");
        prop_assert_eq!(a.publish(20, &meta).unwrap(), b.publish(20, &meta).unwrap());
    }
}
