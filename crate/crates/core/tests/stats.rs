use ctfgate_core::harness::stats::{
    chi_square_independence, chi_square_sf, cohens_d, kruskal_wallis, wilson_interval,
};
use ctfgate_core::harness::{emit_report, ConditionRow, SummaryTable};
use ctfgate_core::reasoner::Condition;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

/// Reference success counts out of 45 per condition, richest first.
const REFERENCE_COUNTS: [(Condition, u64, f64); 4] = [
    (Condition::Baseline, 39, 17.1),
    (Condition::Templates, 38, 18.5),
    (Condition::Lessons, 37, 19.1),
    (Condition::Minimal, 35, 20.1),
];

fn reference_table() -> Vec<Vec<f64>> {
    REFERENCE_COUNTS
        .iter()
        .map(|(_, k, _)| vec![*k as f64, 45.0 - *k as f64])
        .collect()
}

/// Wilson bounds as the roots of (p̂ − p)² = z² p (1 − p) / n.
fn wilson_roots(k: u64, n: u64, z: f64) -> (f64, f64) {
    let (p, n) = (k as f64 / n as f64, n as f64);
    let a = 1.0 + z * z / n;
    let b = -(2.0 * p + z * z / n);
    let c = p * p;
    let disc = (b * b - 4.0 * a * c).sqrt();
    ((-b - disc) / (2.0 * a), (-b + disc) / (2.0 * a))
}

#[test]
fn reference_table_chi_square() {
    let r = chi_square_independence(&reference_table()).unwrap();
    assert_eq!(r.df, 3);
    // Expected cells are 37.25 and 7.75 in every row.
    let oracle: f64 = REFERENCE_COUNTS
        .iter()
        .map(|(_, k, _)| {
            let k = *k as f64;
            (k - 37.25).powi(2) / 37.25 + (45.0 - k - 7.75).powi(2) / 7.75
        })
        .sum();
    assert!((r.statistic - oracle).abs() < 1e-12);
    assert!((r.statistic - 1.363_931).abs() < 1e-6, "{}", r.statistic);
    let p_oracle = ChiSquared::new(3.0).unwrap().sf(r.statistic);
    assert!((r.p_value - p_oracle).abs() < 1e-8);
    assert!((r.p_value - 0.71).abs() <= 0.02, "p = {}", r.p_value);
}

#[test]
fn perfect_association_two_by_two() {
    let r = chi_square_independence(&[vec![10.0, 0.0], vec![0.0, 10.0]]).unwrap();
    assert_eq!(r.df, 1);
    assert!((r.statistic - 20.0).abs() < 1e-12);
    // One degree of freedom: P(X > x) = erfc(sqrt(x / 2)).
    let p = erfc(10f64.sqrt());
    assert!((r.p_value - p).abs() < 1e-14, "{} vs {p}", r.p_value);
    assert!((r.p_value - 7.744e-6).abs() < 1e-8);
}

#[test]
fn wilson_matches_quadratic_roots() {
    let (lo, hi) = wilson_interval(39, 45, 1.96).unwrap();
    let (olo, ohi) = wilson_roots(39, 45, 1.96);
    assert!((lo - olo).abs() < 1e-9 && (hi - ohi).abs() < 1e-9);
    // Frozen from a separate closed-form evaluation.
    assert!(
        (lo - 0.738_224_177_6).abs() < 1e-9 && (hi - 0.937_429_363_7).abs() < 1e-9,
        "({lo}, {hi})"
    );
}

#[test]
fn reference_intervals_all_overlap() {
    let iv: Vec<(f64, f64)> = REFERENCE_COUNTS
        .iter()
        .map(|(_, k, _)| wilson_interval(*k, 45, 1.96).unwrap())
        .collect();
    for a in &iv {
        for b in &iv {
            assert!(a.0 <= b.1 && b.0 <= a.1, "{a:?} and {b:?} are disjoint");
        }
    }
}

#[test]
fn kruskal_wallis_hand_ranked() {
    // Ranks 1..3 and 4..6: H = 12/42 * (36/3 + 225/3) - 21 = 27/7.
    let r = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    assert!((r.statistic - 27.0 / 7.0).abs() < 1e-12);
    assert!((r.statistic - 3.857_143).abs() < 1e-6);
    assert_eq!(r.df, 1);
    assert!((r.p_value - ChiSquared::new(1.0).unwrap().sf(27.0 / 7.0)).abs() < 1e-10);
}

#[test]
fn cohens_d_unit_pooled_sd() {
    let d = cohens_d(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
    assert!((d + 1.0).abs() < 1e-12);
}

#[test]
fn reference_report_rows() {
    let rows = REFERENCE_COUNTS
        .iter()
        .map(|(c, k, mean)| ConditionRow::from_counts(*c, *k, 45, Some(*mean)))
        .collect();
    let summary = SummaryTable::from_rows(rows);
    let dir = tempfile::tempdir().unwrap();
    emit_report(&summary, &[], dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("conditions.csv")).unwrap();
    let rows: Vec<Vec<String>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    let expect = [
        ("Baseline", "39", "86.7", "17.1"),
        ("Templates", "38", "84.4", "18.5"),
        ("Lessons", "37", "82.2", "19.1"),
        ("Minimal", "35", "77.8", "20.1"),
    ];
    assert_eq!(rows.len(), 4);
    for (row, (name, k, rate, mean)) in rows.iter().zip(expect) {
        assert_eq!(
            (row[0].as_str(), row[1].as_str(), row[2].as_str()),
            (name, k, "45")
        );
        assert_eq!(row[4], rate);
        assert_eq!(row[7], mean);
    }
    let p = summary.chi_square.unwrap().p_value;
    assert!((p - 0.71).abs() <= 0.02);
}

proptest! {
    #[test]
    fn chi_square_sf_agrees_with_statrs(df in 1u32..40, x in 0.0f64..120.0) {
        let ours = chi_square_sf(x, df);
        let theirs = ChiSquared::new(df as f64).unwrap().sf(x);
        prop_assert!((ours - theirs).abs() < 1e-8, "df={} x={} {} vs {}", df, x, ours, theirs);
    }

    #[test]
    fn wilson_bounds_hold(n in 1u64..500, frac in 0.0f64..=1.0, z in 0.5f64..4.0) {
        let k = ((n as f64) * frac).round() as u64;
        let (lo, hi) = wilson_interval(k, n, z).unwrap();
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
    }

    #[test]
    fn wilson_narrows_with_n(k in 0u64..20, extra in 1u64..20, m in 1u64..10) {
        let n = k + extra;
        let (a_lo, a_hi) = wilson_interval(k, n, 1.96).unwrap();
        let (b_lo, b_hi) = wilson_interval(k * (m + 1), n * (m + 1), 1.96).unwrap();
        prop_assert!(b_hi - b_lo < a_hi - a_lo);
    }

    #[test]
    fn chi_square_permutation_and_closed_form(
        cells in proptest::collection::vec(1u32..60, 4),
        extra_rows in proptest::collection::vec(proptest::collection::vec(1u32..60, 2), 0..3),
        rot in 0usize..5,
    ) {
        let mut table: Vec<Vec<f64>> = vec![
            vec![cells[0] as f64, cells[1] as f64],
            vec![cells[2] as f64, cells[3] as f64],
        ];
        table.extend(extra_rows.iter().map(|r| r.iter().map(|v| *v as f64).collect()));
        let base = chi_square_independence(&table).unwrap();
        prop_assert!(base.p_value > 0.0 && base.p_value <= 1.0);
        let mut permuted = table.clone();
        let len = permuted.len();
        permuted.rotate_left(rot % len);
        let r = chi_square_independence(&permuted).unwrap();
        prop_assert!((r.statistic - base.statistic).abs() <= 1e-9 * base.statistic.max(1.0));
        if table.len() == 2 {
            let [a, b, c, d] = [cells[0], cells[1], cells[2], cells[3]].map(|v| v as f64);
            let n = a + b + c + d;
            let closed = n * (a * d - b * c).powi(2) / ((a + b) * (c + d) * (a + c) * (b + d));
            prop_assert!((base.statistic - closed).abs() <= 1e-9 * closed.max(1.0));
        }
    }

    #[test]
    fn kruskal_wallis_is_rank_based(
        groups in proptest::collection::vec(proptest::collection::vec(-50i32..50, 1..8), 2..5),
    ) {
        let raw: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|v| *v as f64).collect()).collect();
        let moved: Vec<Vec<f64>> = raw.iter().map(|g| g.iter().map(|v| v.powi(3) * 0.5 + 7.0).collect()).collect();
        let a = kruskal_wallis(&raw).unwrap();
        let b = kruskal_wallis(&moved).unwrap();
        prop_assert!((a.statistic - b.statistic).abs() < 1e-9);
    }
}
