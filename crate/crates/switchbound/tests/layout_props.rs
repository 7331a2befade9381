//! Property tests for the interval geometry: the containment relations
//! between comparison layouts of termwise-ordered rate rows (the heart of
//! the pathwise sandwich), exact prefix-sum accounting, and the shared
//! left-endpoint structure of block layouts.

use proptest::prelude::*;

use switchbound::layout::{
    build_block_layout, build_classical_layout, comparison_entry_at, comparison_entry_from_row,
    StateEntry,
};
use switchbound::ratemat::{
    envelope_matrices, RateMatrix, StateDependentRateSpec, StateSpace,
};

/// A state-dependent spec taking finitely many "x levels": level k is
/// addressed by x = [k as f64].
fn leveled_spec(n: usize, c0: usize, levels: Vec<Vec<Vec<f64>>>) -> StateDependentRateSpec {
    let k0 = levels
        .iter()
        .flat_map(|t| t.iter().map(|row| row.iter().sum::<f64>()))
        .fold(0.0, f64::max);
    let tables = levels.clone();
    let spec = StateDependentRateSpec::new(
        StateSpace::Finite(n),
        k0,
        c0,
        move |i, j, x: &[f64]| {
            if i == j || i >= n || j >= n {
                return 0.0;
            }
            let lvl = (x[0] as usize).min(tables.len() - 1);
            tables[lvl][i][j]
        },
    );
    let tables = levels;
    spec.with_envelope_oracle(move |i, j| {
        if i == j || i >= n || j >= n {
            return (0.0, 0.0);
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in &tables {
            lo = lo.min(t[i][j]);
            hi = hi.max(t[i][j]);
        }
        (lo, hi)
    })
}

fn banded_tables(n: usize, c0: usize, n_levels: usize) -> impl Strategy<Value = Vec<Vec<Vec<f64>>>> {
    let cell = prop_oneof![3 => 0.05..1.5f64, 1 => Just(0.0)];
    proptest::collection::vec(
        proptest::collection::vec(proptest::collection::vec(cell, n), n),
        n_levels,
    )
    .prop_map(move |mut levels| {
        for t in &mut levels {
            for i in 0..n {
                for j in 0..n {
                    if i == j || i.abs_diff(j) > c0 {
                        t[i][j] = 0.0;
                    }
                }
            }
        }
        levels
    })
}

/// Extent of the upward union `∪_{r≥m} Γ_·r` = `[-S(m), 0)`.
fn upward_tail(entry: &StateEntry, m: usize) -> f64 {
    entry
        .intervals()
        .iter()
        .filter(|iv| iv.target >= m)
        .map(|iv| -iv.start)
        .fold(0.0, f64::max)
}

/// Extent of the downward union `∪_{r≤m} Γ_·r` = `[0, T(m))`.
fn downward_head(entry: &StateEntry, m: usize) -> f64 {
    entry
        .intervals()
        .iter()
        .filter(|iv| iv.target <= m)
        .map(|iv| iv.end)
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn comparison_inclusions_hold_for_random_specs(
        n in 3usize..=6,
        c0 in 1usize..=2,
        seed_tables in banded_tables(6, 2, 3),
    ) {
        let c0 = c0.min(n - 1);
        let levels: Vec<Vec<Vec<f64>>> = seed_tables
            .iter()
            .map(|t| {
                (0..n)
                    .map(|i| (0..n).map(|j| if i.abs_diff(j) <= c0 { t[i][j] } else { 0.0 }).collect())
                    .collect()
            })
            .collect();
        let spec = leveled_spec(n, c0, levels.clone());
        let env = envelope_matrices(&spec).unwrap();

        let upper_entries: Vec<StateEntry> = (0..n)
            .map(|i| comparison_entry_from_row(i, env.upper.bandwidth(), Some(n), |j| env.upper.rate(i, j)).unwrap())
            .collect();
        let lower_entries: Vec<StateEntry> = (0..n)
            .map(|i| comparison_entry_from_row(i, env.lower.bandwidth(), Some(n), |j| env.lower.rate(i, j)).unwrap())
            .collect();

        for lvl in 0..levels.len() {
            let x = [lvl as f64];
            let lam_entries: Vec<StateEntry> = (0..n)
                .map(|i| comparison_entry_at(&spec, i, &x).unwrap())
                .collect();
            // upper pair (Λ at i, Λ̄ at k ≥ i)
            for i in 0..n {
                for k in i..n {
                    for m in (k + 1)..n {
                        prop_assert!(
                            upward_tail(&lam_entries[i], m) <= upward_tail(&upper_entries[k], m),
                            "upper upward tail at (i={i}, k={k}, m={m}, lvl={lvl})"
                        );
                    }
                    for m in 0..i {
                        prop_assert!(
                            downward_head(&upper_entries[k], m) <= downward_head(&lam_entries[i], m),
                            "upper downward head at (i={i}, k={k}, m={m}, lvl={lvl})"
                        );
                    }
                }
            }
            // lower pair (Λ* at a, Λ at i ≥ a)
            for a in 0..n {
                for i in a..n {
                    for m in (i + 1)..n {
                        prop_assert!(
                            upward_tail(&lower_entries[a], m) <= upward_tail(&lam_entries[i], m),
                            "lower upward tail at (a={a}, i={i}, m={m}, lvl={lvl})"
                        );
                    }
                    for m in 0..a {
                        prop_assert!(
                            downward_head(&lam_entries[i], m) <= downward_head(&lower_entries[a], m),
                            "lower downward head at (a={a}, i={i}, m={m}, lvl={lvl})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn entry_extents_are_exact_prefix_sums(
        n in 2usize..=6,
        c0 in 1usize..=2,
        tables in banded_tables(6, 2, 1),
    ) {
        let c0 = c0.min(n - 1);
        let rates: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i.abs_diff(j) <= c0 { tables[0][i][j] } else { 0.0 }).collect())
            .collect();
        for i in 0..n {
            let entry = comparison_entry_from_row(i, c0, Some(n), |j| rates[i][j]).unwrap();
            // downward: ascending fold; upward: descending fold — bit-exact
            let mut down = 0.0f64;
            for j in 0..i {
                down += rates[i][j];
            }
            let mut up = 0.0f64;
            for j in ((i + 1)..=(i + c0).min(n - 1)).rev() {
                up += rates[i][j];
            }
            let (lo, hi) = entry.extent();
            prop_assert_eq!(hi, down);
            prop_assert_eq!(lo, -up);
        }
        // classical layout: total measure equals the sequential row-sum fold
        let q = RateMatrix::from_offdiag_fn(n, c0, |i, j| rates[i][j]).unwrap();
        let classical = build_classical_layout(&q);
        let mut offset = 0.0f64;
        for i in 0..n {
            let mut cum = offset;
            for j in 0..n {
                if j != i {
                    cum += rates[i][j];
                }
            }
            if let Some(last) = classical.entry(i).intervals().last() {
                prop_assert_eq!(last.end, cum);
            }
            offset = cum;
        }
    }

    #[test]
    fn block_layouts_share_left_endpoints_and_split_lengths(
        n in 2usize..=6,
        tables in banded_tables(6, 2, 2),
    ) {
        let c0 = 2usize.min(n - 1);
        let build = |t: &Vec<Vec<f64>>| {
            RateMatrix::from_offdiag_fn(n, c0, |i, j| t[i][j]).unwrap()
        };
        let q = build(&tables[0]);
        let qt = build(&tables[1]);
        let k0 = q.k0().max(qt.k0()).max(1e-6);
        let a = build_block_layout(&q, c0, k0).unwrap();
        let b = build_block_layout(&qt, c0, k0).unwrap();
        for s in 0..n {
            for iv in a.entry(s).intervals() {
                if let Some(jv) = b.entry(s).intervals().iter().find(|jv| jv.target == iv.target) {
                    prop_assert_eq!(iv.start, jv.start);
                    let overlap = (iv.end.min(jv.end) - iv.start).max(0.0);
                    prop_assert!((overlap - iv.rate.min(jv.rate)).abs() < 1e-14);
                    let sym_diff = (iv.end - iv.start) + (jv.end - jv.start) - 2.0 * overlap;
                    prop_assert!((sym_diff - (iv.rate - jv.rate).abs()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mark_to_jump_membership_is_consistent(
        n in 2usize..=6,
        c0 in 1usize..=2,
        tables in banded_tables(6, 2, 1),
        z in -4.0..4.0f64,
    ) {
        let c0 = c0.min(n - 1);
        for i in 0..n {
            let entry = comparison_entry_from_row(i, c0, Some(n), |j| {
                if i.abs_diff(j) <= c0 { tables[0][i][j] } else { 0.0 }
            })
            .unwrap();
            let hit = entry.mark_to_jump(z);
            let linear: Vec<usize> = entry
                .intervals()
                .iter()
                .filter(|iv| iv.start <= z && z < iv.end)
                .map(|iv| iv.target)
                .collect();
            prop_assert!(linear.len() <= 1, "overlapping intervals");
            prop_assert_eq!(hit, linear.first().copied());
        }
    }
}
