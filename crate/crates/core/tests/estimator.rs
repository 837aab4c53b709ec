use playloop_core::metrics::{
    aggregate_stage, efficiency_at_1_from_successes, efficiency_at_k, estimate_at_k, SampleOutcomes, Stage,
    TokenLedger,
};
use proptest::prelude::*;

/// Fraction of k-subsets of n samples (the first c successful) that hold a success.
fn enumerate(n: usize, c: usize, k: usize) -> f64 {
    let (mut hit, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        total += 1;
        if mask & ((1u32 << c) - 1) != 0 {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}

#[test]
fn matches_exhaustive_enumeration() {
    for n in 1..=10 {
        for c in 0..=n {
            for k in 1..=n {
                let want = enumerate(n, c, k);
                let got = estimate_at_k(n, c, k).unwrap();
                let err = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
                assert!(err <= 1e-12, "n={n} c={c} k={k}: {got} vs {want}");
            }
        }
    }
}

fn outcomes(n: usize) -> impl Strategy<Value = SampleOutcomes> {
    (0..=n)
        .prop_flat_map(move |e| (Just(e), 0..=e))
        .prop_flat_map(move |(e, p)| (Just(e), Just(p), 0..=p))
        .prop_map(move |(e, p, y)| SampleOutcomes::new("t", n, e, p, y).unwrap())
}

fn suite() -> impl Strategy<Value = Vec<SampleOutcomes>> {
    (1usize..=12).prop_flat_map(|n| proptest::collection::vec(outcomes(n), 1..20))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn stages_are_ordered(records in suite()) {
        let n = records[0].n;
        for k in 1..=n {
            let exec = aggregate_stage(&records, Stage::Exec, k).unwrap();
            let pass = aggregate_stage(&records, Stage::Pass, k).unwrap();
            let play = aggregate_stage(&records, Stage::Play, k).unwrap();
            prop_assert!(play <= pass && pass <= exec, "k={} exec={} pass={} play={}", k, exec, pass, play);
        }
    }

    #[test]
    fn estimate_is_monotone_in_c_and_k((n, c, k) in (1usize..40).prop_flat_map(|n| (Just(n), 0..=n, 1..=n))) {
        let v = estimate_at_k(n, c, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        if c < n {
            prop_assert!(estimate_at_k(n, c + 1, k).unwrap() >= v);
        }
        if k < n {
            prop_assert!(estimate_at_k(n, c, k + 1).unwrap() >= v);
        }
    }

    #[test]
    fn efficiency_paths_agree(
        records in (1usize..=10).prop_flat_map(|n| proptest::collection::vec(outcomes(n), 1..30)),
        calls in proptest::collection::vec((1u64..50_000, 0u64..5_000), 1..40),
    ) {
        let mut ledger = TokenLedger::new(records.len());
        for (i, (tin, tout)) in calls.iter().enumerate() {
            ledger.record(format!("c{i}"), *tin, *tout);
        }
        let via_k = efficiency_at_k(aggregate_stage(&records, Stage::Play, 1).unwrap(), &ledger, 1).unwrap();
        let via_counts = efficiency_at_1_from_successes(&records, ledger.total_tokens()).unwrap();
        prop_assert!((via_k - via_counts).abs() <= 1e-12 * via_k.abs().max(1.0), "{} vs {}", via_k, via_counts);
    }
}
