use porenet::stats::*;
use proptest::prelude::*;

#[test]
fn friedman_hand_ranked() {
    // column 3 always last, columns 1 and 2 alternate:
    // mean ranks 1.5, 1.5, 3 -> chi2 = 12*4/(3*4) * (0.25 + 0.25 + 1) = 6
    let m = ScoreMatrix::new(
        vec![vec![3.0, 2.0, 1.0], vec![2.0, 3.0, 1.0], vec![3.0, 2.0, 1.0], vec![2.0, 3.0, 1.0]],
        Orientation::HigherIsBetter,
    )
    .unwrap();
    let f = friedman(&m);
    assert_eq!(f.mean_ranks, vec![1.5, 1.5, 3.0]);
    assert!((f.chi2 - 6.0).abs() < 1e-12);
    assert!((f.p - (-3.0f64).exp()).abs() < 1e-12);
}

#[test]
fn nemenyi_critical_difference_example() {
    // ranks per row (A, B, C, D); mean ranks A = 1.2, D = 3.4, gap 2.2 > CD 2.098
    let ranks = [[1, 2, 3, 4], [1, 2, 3, 4], [1, 2, 4, 3], [1, 2, 4, 3], [2, 1, 4, 3]];
    let rows = ranks.iter().map(|r| r.iter().map(|&x| 5.0 - x as f64).collect()).collect();
    let m = ScoreMatrix::new(rows, Orientation::HigherIsBetter).unwrap();
    let pairs = nemenyi(&m).unwrap();
    let ad = pairs.iter().find(|p| p.i == 0 && p.j == 3).unwrap();
    assert_eq!(ad.significance, Significance::P05);
    assert_eq!(ad.better, Some(0));
    assert!((ad.statistic - 2.2 / (20.0f64 / 30.0).sqrt()).abs() < 1e-12);
    let ab = pairs.iter().find(|p| p.i == 0 && p.j == 1).unwrap();
    assert_eq!(ab.significance, Significance::Ns);
}

#[test]
fn analyze_groups_by_metric_and_resolution() {
    let mut rows = Vec::new();
    for (ri, region) in ["r1", "r2", "r3", "r4", "r5"].iter().enumerate() {
        for (mi, model) in ["a", "b", "c"].iter().enumerate() {
            for res in ["x2", "x4"] {
                rows.push(ScoreRow {
                    region: region.to_string(),
                    model: model.to_string(),
                    resolution: res.to_string(),
                    metric: "ssim".into(),
                    value: Some(0.9 - 0.1 * mi as f64 + 0.001 * ri as f64),
                    ci_lo: None,
                    ci_hi: None,
                });
            }
        }
    }
    let groups = analyze_rows(&rows).unwrap();
    assert_eq!(groups.len(), 2);
    let g = &groups[0];
    assert_eq!(g.models, vec!["a", "b", "c"]);
    assert_eq!(g.friedman.mean_ranks, vec![1.0, 2.0, 3.0]);
    assert!(g.friedman.p < 0.01);
    let ac = g.pairs.iter().find(|p| p.i == 0 && p.j == 2).unwrap();
    assert_eq!(ac.significance, Significance::P01);
    assert!(!render_table(&groups).is_empty());

    let mut dup = rows.clone();
    dup.push(rows[0].clone());
    assert!(analyze_rows(&dup).is_err());
    // a missing cell drops the group
    let partial: Vec<ScoreRow> = rows.iter().skip(1).cloned().collect();
    assert_eq!(analyze_rows(&partial).unwrap().len(), 1);
}

fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..8, 2usize..6).prop_flat_map(|(n, k)| {
        prop::collection::vec(prop::collection::vec((0i32..6).prop_map(|v| v as f64), k), n)
    })
}

proptest! {
    #[test]
    fn friedman_is_rank_based(rows in matrix_strategy()) {
        let m = ScoreMatrix::new(rows.clone(), Orientation::HigherIsBetter).unwrap();
        let t = ScoreMatrix::new(
            rows.iter().map(|r| r.iter().map(|v| 3.0 * (v / 2.0).exp() + 1.0).collect()).collect(),
            Orientation::HigherIsBetter,
        ).unwrap();
        let (a, b) = (friedman(&m), friedman(&t));
        prop_assert!((a.chi2 - b.chi2).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&a.p));
    }

    #[test]
    fn orientation_flip_is_consistent(rows in matrix_strategy()) {
        let m = ScoreMatrix::new(rows.clone(), Orientation::HigherIsBetter).unwrap();
        let neg = ScoreMatrix::new(
            rows.iter().map(|r| r.iter().map(|v| -v).collect()).collect(),
            Orientation::LowerIsBetter,
        ).unwrap();
        prop_assert_eq!(friedman(&m), friedman(&neg));
        prop_assert_eq!(nemenyi(&m).unwrap(), nemenyi(&neg).unwrap());
    }

    #[test]
    fn nemenyi_ignores_labels(rows in matrix_strategy()) {
        let m = ScoreMatrix::new(rows.clone(), Orientation::HigherIsBetter).unwrap();
        let rev = ScoreMatrix::new(
            rows.iter().map(|r| r.iter().rev().copied().collect()).collect(),
            Orientation::HigherIsBetter,
        ).unwrap();
        let k = rows[0].len();
        let (a, b) = (nemenyi(&m).unwrap(), nemenyi(&rev).unwrap());
        for p in &a {
            let q = b.iter().find(|q| q.i == k - 1 - p.j && q.j == k - 1 - p.i).unwrap();
            prop_assert_eq!(p.significance, q.significance);
            prop_assert!((p.statistic - q.statistic).abs() < 1e-12);
        }
    }

    #[test]
    fn two_treatments_agree_with_friedman(rows in prop::collection::vec(prop::collection::vec(0i32..6, 2), 2..12)) {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let m = ScoreMatrix::new(rows, Orientation::HigherIsBetter).unwrap();
        let f = friedman(&m);
        let p = &nemenyi(&m).unwrap()[0];
        // with k = 2 the squared Nemenyi statistic is the Friedman statistic
        prop_assert!((p.statistic * p.statistic - f.chi2).abs() < 1e-9);
        if (p.statistic - 1.96).abs() > 1e-3 {
            prop_assert_eq!(f.p < 0.05, p.significance >= Significance::P05);
        }
    }

    #[test]
    fn interval_is_symmetric_and_contains_mean(v in prop::collection::vec(-100.0f64..100.0, 2..40)) {
        let ci = mean_ci(&v).unwrap();
        prop_assert!(ci.lo <= ci.mean && ci.mean <= ci.hi);
        prop_assert!(((ci.hi - ci.mean) - (ci.mean - ci.lo)).abs() < 1e-9);
    }
}
