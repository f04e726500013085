use flowrec::synth::{generate_sessions, generate_universe, read_dataset, write_dataset, BehaviorPolicy, FeedbackLevel, SessionConfig};
use proptest::prelude::*;

fn session_cfg(session_size: usize) -> SessionConfig {
    SessionConfig {
        session_size,
        history_len: 5,
        behavior: BehaviorPolicy::default(),
    }
}

#[test]
fn liked_fraction_matches_expectation_over_presented_items() {
    let world = generate_universe(64, 10_000, 8, 21).unwrap();
    let records = generate_sessions(&world, &session_cfg(10), 22).unwrap();
    let (mut liked, mut shown, mut expected) = (0usize, 0usize, 0.0);
    for r in &records {
        for (item, level) in &r.presented {
            let u = world.utility(r.user_id, *item);
            shown += 1;
            liked += usize::from(*level == FeedbackLevel::Liked);
            if u > 0.8 {
                expected += u;
            }
        }
    }
    let observed = liked as f64 / shown as f64;
    let expected = expected / shown as f64;
    assert!((observed - expected).abs() < 0.02, "liked fraction {observed} vs {expected}");
}

#[test]
fn liked_fraction_matches_behavior_policy_expectation() {
    // Integrate the single-draw impression distribution directly: each user's
    // catalog weighted by the 0.7 utility / 0.3 uniform mixture.
    let world = generate_universe(64, 10_000, 8, 31).unwrap();
    let records = generate_sessions(&world, &session_cfg(10), 32).unwrap();
    let cfg = session_cfg(10);
    let mut expected = 0.0;
    for u in 0..world.users.num_users() {
        let utils = world.utilities(u);
        let probs = cfg.behavior.impression_probs(&utils);
        expected += probs.iter().zip(&utils).filter(|(_, &v)| v > 0.8).map(|(p, v)| p * v).sum::<f64>();
    }
    expected /= world.users.num_users() as f64;
    let (liked, shown) = records
        .iter()
        .flat_map(|r| &r.presented)
        .fold((0usize, 0usize), |(l, s), (_, level)| {
            (l + usize::from(*level == FeedbackLevel::Liked), s + 1)
        });
    let observed = liked as f64 / shown as f64;
    assert!((observed - expected).abs() < 0.02, "liked fraction {observed} vs {expected}");
}

#[test]
fn feedback_levels_are_ordered_by_utility() {
    let world = generate_universe(64, 2_000, 8, 41).unwrap();
    let records = generate_sessions(&world, &session_cfg(10), 42).unwrap();
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for r in &records {
        for (item, level) in &r.presented {
            let slot = match level {
                FeedbackLevel::Liked => 0,
                FeedbackLevel::Clicked => 1,
                _ => 2,
            };
            sums[slot] += world.utility(r.user_id, *item);
            counts[slot] += 1;
        }
    }
    assert!(counts.iter().sum::<usize>() >= 10_000);
    let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    assert!(means[0] - means[1] > 0.05, "{means:?}");
    assert!(means[1] - means[2] > 0.05, "{means:?}");
}

#[test]
fn thousand_records_round_trip() {
    let world = generate_universe(64, 1_000, 8, 51).unwrap();
    let records = generate_sessions(&world, &session_cfg(10), 52).unwrap();
    assert_eq!(records.len(), 1_000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&records, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), records);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_generated_corpus_round_trips(
        seed in any::<u64>(),
        items in 12usize..40,
        users in 1usize..30,
        dim in 2usize..6,
        session in 2usize..10,
    ) {
        let world = generate_universe(items, users, dim, seed).unwrap();
        let records = generate_sessions(&world, &session_cfg(session), seed ^ 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&records, &path).unwrap();
        prop_assert_eq!(read_dataset(&path).unwrap(), records);
    }
}
