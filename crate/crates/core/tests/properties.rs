use proptest::prelude::*;

use proxq::constraint::{
    dual_update, monotone_penalty, project_monotone_cone, prox_monotone_penalty, DualState, QRow,
};
use proxq::env::{generate_dataset, snap_bid, State};
use proxq::verify::exhaustive_projection;

fn row() -> impl Strategy<Value = [f64; 5]> {
    prop::array::uniform5(-5.0f64..5.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projection_is_feasible_idempotent_and_exact(q in row()) {
        let p = project_monotone_cone(&QRow::new(q).unwrap());
        prop_assert!(p.is_nondecreasing());
        let pp = project_monotone_cone(&p);
        prop_assert_eq!(pp.0, p.0);
        let e = exhaustive_projection(&q);
        for a in 0..5 {
            prop_assert!((p.0[a] - e[a]).abs() < 1e-9);
        }
        // block averaging preserves the sum
        prop_assert!((p.0.iter().sum::<f64>() - q.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn projection_is_shift_equivariant(q in row(), shift in -3.0f64..3.0) {
        let p = project_monotone_cone(&QRow::new(q).unwrap());
        let shifted: [f64; 5] = std::array::from_fn(|a| q[a] + shift);
        let ps = project_monotone_cone(&QRow::new(shifted).unwrap());
        for a in 0..5 {
            prop_assert!((ps.0[a] - p.0[a] - shift).abs() < 1e-9);
        }
    }

    #[test]
    fn prox_penalty_decreases_with_lambda(q in row(), l1 in 0.0f64..5.0, dl in 0.0f64..5.0) {
        let y = QRow::new(q).unwrap();
        let a = prox_monotone_penalty(&y, l1, 1e-12).unwrap();
        let b = prox_monotone_penalty(&y, l1 + dl, 1e-12).unwrap();
        let ca = monotone_penalty(&a).unwrap();
        let cb = monotone_penalty(&b).unwrap();
        prop_assert!(cb <= ca + 1e-12);
        // the prox never increases the penalty of its input
        prop_assert!(ca <= monotone_penalty(&y).unwrap() + 1e-12);
    }

    #[test]
    fn prox_fixes_monotone_rows(mut q in row(), lambda in 0.0f64..100.0) {
        q.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let y = QRow::new(q).unwrap();
        let p = prox_monotone_penalty(&y, lambda, 1e-12).unwrap();
        prop_assert_eq!(p.0, q);
    }

    #[test]
    fn dual_stays_nonnegative(lambda in 0.0f64..10.0, eta in 1e-4f64..1.0, c in -100.0f64..100.0) {
        let d = dual_update(DualState::new(lambda, eta).unwrap(), c);
        prop_assert!(d.lambda >= 0.0);
        if c >= 0.0 {
            prop_assert!(d.lambda >= lambda);
        }
    }

    #[test]
    fn snap_picks_a_nearest_bid(g in -1.0f64..2.0) {
        let a = snap_bid(g);
        let clipped = g.clamp(0.0, 1.0);
        let d = (clipped - proxq::constraint::BIDS[a]).abs();
        for b in proxq::constraint::BIDS {
            prop_assert!(d <= (clipped - b).abs() + 1e-15);
        }
    }

    #[test]
    fn state_bounds_enforced(x in -1.0f64..2.0, c in 0.0f64..0.6) {
        let ok = (0.0..=1.0).contains(&x) && (0.2..=0.4).contains(&c);
        prop_assert_eq!(State::new(x, c).is_ok(), ok);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn subsamples_are_nested(n in 10usize..400, seed in 0u64..1000) {
        let d = generate_dataset(n, seed).unwrap();
        let quarter = d.subsample(0.25, seed).unwrap();
        let sixteenth = d.subsample(0.0625, seed).unwrap();
        prop_assert_eq!(quarter.len(), ((n as f64) * 0.25).round().max(1.0) as usize);
        for t in &sixteenth.transitions {
            prop_assert!(quarter.transitions.contains(t));
        }
        for t in &quarter.transitions {
            prop_assert!(d.transitions.contains(t));
        }
    }

    #[test]
    fn dataset_round_trips_exactly(n in 1usize..200, seed in 0u64..1000) {
        let d = generate_dataset(n, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        d.save(&p).unwrap();
        let back = proxq::env::Dataset::load(&p).unwrap();
        prop_assert_eq!(back, d);
    }
}
