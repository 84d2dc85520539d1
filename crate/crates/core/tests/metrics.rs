use camseg_core::metrics::{
    average_precision, category_ap, f1_macro, parse_report_csv, per_class_csv, per_class_f1, per_class_precision,
    summary_csv, CategorySpec, ConfusionMatrix, MetricsReport, SUMMARY_COLUMNS,
};
use camseg_core::palette::{ClassMap, Palette, IGNORE};
use camseg_core::seed::rng_from;
use proptest::prelude::*;
use rand::Rng;

/// Per-class City precisions, in palette order.
const CITY: [f64; 19] = [
    98.1, 86.4, 89.2, 47.3, 43.4, 60.1, 63.0, 82.5, 92.7, 80.3, 96.0, 70.9, 64.3, 94.0, 45.0, 66.6, 43.7, 48.3, 62.7,
];

fn city_spec() -> CategorySpec {
    CategorySpec::bundled("cityscapes19", &Palette::bundled("cityscapes19").unwrap()).unwrap()
}

/// Naive recomputation straight from the definitions.
fn naive_precision(counts: &[u64], k: usize) -> Vec<Option<f64>> {
    (0..k)
        .map(|c| {
            let mut col = 0u64;
            let mut row = 0u64;
            for i in 0..k {
                col += counts[i * k + c];
                row += counts[c * k + i];
            }
            if col == 0 && row == 0 {
                None
            } else if col == 0 {
                Some(0.0)
            } else {
                Some(100.0 * counts[c * k + c] as f64 / col as f64)
            }
        })
        .collect()
}

fn naive_f1(counts: &[u64], k: usize) -> Vec<Option<f64>> {
    (0..k)
        .map(|c| {
            let tp = counts[c * k + c] as f64;
            let col: u64 = (0..k).map(|i| counts[i * k + c]).sum();
            let row: u64 = (0..k).map(|i| counts[c * k + i]).sum();
            if col == 0 && row == 0 {
                None
            } else if tp == 0.0 {
                Some(0.0)
            } else {
                Some(100.0 * 2.0 * tp / (col + row) as f64)
            }
        })
        .collect()
}

fn naive_mean(v: &[Option<f64>]) -> Option<f64> {
    let p: Vec<f64> = v.iter().flatten().copied().collect();
    (!p.is_empty()).then(|| p.iter().sum::<f64>() / p.len() as f64)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn random_cm(rng: &mut impl Rng, k: usize) -> ConfusionMatrix {
    let counts = (0..k * k)
        .map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(0..1000) })
        .collect();
    ConfusionMatrix::from_counts(k, counts).unwrap()
}

#[test]
fn city_row_category_means() {
    let p: Vec<Option<f64>> = CITY.iter().map(|&v| Some(v)).collect();
    // One-decimal inputs: the mean is 1334.5 / 19, not the printed 70.23.
    let ap = average_precision(&p).unwrap();
    assert!(close(ap, 1334.5 / 19.0), "{ap}");
    assert!((ap - 70.23).abs() < 0.01);
    let c = category_ap(&p, &city_spec());
    assert!((c.small.unwrap() - 68.16).abs() <= 0.005);
    assert!((c.medium.unwrap() - 57.67).abs() <= 0.005);
    assert!((c.frequent.unwrap() - 92.46).abs() <= 0.05);
    assert!((c.large.unwrap() - 84.26).abs() <= 0.05);
}

#[test]
fn single_present_class_and_constant_precisions() {
    let p = [None, Some(42.0), None];
    assert_eq!(average_precision(&p).unwrap(), 42.0);
    let all: Vec<Option<f64>> = vec![Some(55.5); 19];
    let c = category_ap(&all, &city_spec());
    assert!(c.as_array().iter().all(|v| (v.unwrap() - 55.5).abs() < 1e-12));
}

#[test]
fn hand_examples() {
    let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap();
    assert_eq!(per_class_precision(&cm), vec![Some(75.0), Some(75.0)]);
    assert_eq!(per_class_f1(&cm), vec![Some(75.0), Some(75.0)]);
    assert_eq!(f1_macro(&cm), 75.0);
    let diag = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 2, 0, 0, 0, 9]).unwrap();
    assert!(per_class_precision(&diag).iter().all(|&p| p == Some(100.0)));
    assert_eq!(f1_macro(&diag), 100.0);
}

#[test]
fn metrics_agree_with_naive_recomputation() {
    let mut rng = rng_from(42);
    for _ in 0..1000 {
        let k = rng.random_range(2..20);
        let cm = random_cm(&mut rng, k);
        let np = naive_precision(cm.counts(), k);
        let p = per_class_precision(&cm);
        for (a, b) in p.iter().zip(&np) {
            match (a, b) {
                (Some(a), Some(b)) => assert!(close(*a, *b)),
                (None, None) => {}
                _ => panic!("presence differs: {a:?} vs {b:?}"),
            }
        }
        let nf = naive_f1(cm.counts(), k);
        for (a, b) in per_class_f1(&cm).iter().zip(&nf) {
            assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                assert!(close(*a, *b));
            }
        }
        if let Some(m) = naive_mean(&np) {
            assert!(close(average_precision(&p).unwrap(), m));
        }
        assert!(close(f1_macro(&cm), naive_mean(&nf).unwrap_or(0.0)));
    }
}

#[test]
fn accumulate_matches_pixel_tally_and_commutes() {
    let mut rng = rng_from(9);
    let k = 5;
    let maps: Vec<(ClassMap, ClassMap)> = (0..6)
        .map(|_| {
            let mut gen = |ignore: f64| {
                let labels = (0..64)
                    .map(|_| if rng.random_bool(ignore) { IGNORE } else { rng.random_range(0..k as u8) })
                    .collect();
                ClassMap::new(8, 8, labels).unwrap()
            };
            (gen(0.05), gen(0.0))
        })
        .collect();
    let mut forward = ConfusionMatrix::new(k);
    let mut tally = vec![0u64; k * k];
    for (gt, pred) in &maps {
        forward.accumulate(gt, pred).unwrap();
        for (&g, &p) in gt.labels().iter().zip(pred.labels()) {
            if g != IGNORE {
                tally[g as usize * k + p as usize] += 1;
            }
        }
    }
    assert_eq!(forward.counts(), &tally[..]);
    let mut backward = ConfusionMatrix::new(k);
    for (gt, pred) in maps.iter().rev() {
        backward.accumulate(gt, pred).unwrap();
    }
    assert_eq!(forward, backward);
    // Split and merge gives the same total.
    let mut a = ConfusionMatrix::new(k);
    let mut b = ConfusionMatrix::new(k);
    for (i, (gt, pred)) in maps.iter().enumerate() {
        if i % 2 == 0 { &mut a } else { &mut b }.accumulate(gt, pred).unwrap();
    }
    a.merge(&b).unwrap();
    assert_eq!(a, forward);
}

#[test]
fn gt_gt_report_is_all_hundred() {
    let palette = Palette::bundled("toyscapes8").unwrap();
    let spec = CategorySpec::bundled("toyscapes8", &palette).unwrap();
    let labels: Vec<u8> = (0..64).map(|i| (i % 8) as u8).collect();
    let gt = ClassMap::new(8, 8, labels).unwrap();
    let mut cm = ConfusionMatrix::new(8);
    cm.accumulate(&gt, &gt).unwrap();
    let r = MetricsReport::from_confusion(&cm, &spec).unwrap();
    assert!(r.summary_values().iter().all(|v| *v == Some(100.0)));
    let csv = summary_csv(&[("gt".to_string(), r)]);
    assert_eq!(csv.lines().next().unwrap(), format!("dataset,{}", SUMMARY_COLUMNS.join(",")));
    assert_eq!(csv.lines().nth(1).unwrap(), "gt,100.00,100.00,100.00,100.00,100.00,100.00,100.00");
}

#[test]
fn category_means_recompute_from_the_per_class_csv() {
    let palette = Palette::bundled("cityscapes19").unwrap();
    let spec = city_spec();
    let mut rng = rng_from(5);
    let cm = random_cm(&mut rng, 19);
    let report = MetricsReport::from_confusion(&cm, &spec).unwrap();
    let rows = vec![("x".to_string(), report)];
    let summary = parse_report_csv(&summary_csv(&rows)).unwrap();
    let per_class = parse_report_csv(&per_class_csv(&rows, palette.names())).unwrap();
    let pc = &per_class[0].1;
    let values: Vec<Option<f64>> = palette.names().iter().map(|n| pc[n]).collect();
    let groups = [
        ("AP", (0..19).collect::<Vec<_>>()),
        ("AP_S", spec.small.clone()),
        ("AP_M", spec.medium.clone()),
        ("AP_L", spec.large.clone()),
        ("AP_F", spec.frequent.clone()),
        ("AP_C", spec.common.clone()),
        ("AP_R", spec.rare.clone()),
    ];
    for (col, idx) in groups {
        let sub: Vec<Option<f64>> = idx.iter().map(|&c| values[c]).collect();
        let expect = naive_mean(&sub);
        let got = summary[0].1[col];
        match (expect, got) {
            (Some(e), Some(g)) => assert!((e - g).abs() <= 0.01, "{col}: {e} vs {g}"),
            (None, None) => {}
            other => panic!("{col}: {other:?}"),
        }
    }
}

#[test]
fn size_categories_weight_back_to_overall_ap() {
    let spec = city_spec();
    let mut rng = rng_from(77);
    for _ in 0..100 {
        let p: Vec<Option<f64>> = (0..19).map(|_| Some(rng.random_range(0.0..100.0))).collect();
        let c = category_ap(&p, &spec);
        let weighted = (c.small.unwrap() * spec.small.len() as f64
            + c.medium.unwrap() * spec.medium.len() as f64
            + c.large.unwrap() * spec.large.len() as f64)
            / 19.0;
        assert!(close(weighted, average_precision(&p).unwrap()));
    }
}

#[test]
fn mismatched_and_empty_inputs_fail() {
    let mut cm = ConfusionMatrix::new(3);
    assert!(cm.accumulate(&ClassMap::filled(2, 2, 0), &ClassMap::filled(2, 3, 0)).is_err());
    assert!(average_precision(&[None, None]).is_err());
    assert!(ConfusionMatrix::from_counts(2, vec![1, 2, 3]).is_err());
}

proptest! {
    #[test]
    fn ap_is_permutation_invariant(vals in proptest::collection::vec(0.0f64..100.0, 2..30), seed in any::<u64>()) {
        let p: Vec<Option<f64>> = vals.iter().map(|&v| Some(v)).collect();
        let mut q = p.clone();
        let mut rng = rng_from(seed);
        for i in (1..q.len()).rev() {
            q.swap(i, rng.random_range(0..=i));
        }
        let a = average_precision(&p).unwrap();
        let b = average_precision(&q).unwrap();
        prop_assert!(close(a, b));
    }

    #[test]
    fn precision_is_bounded(counts in proptest::collection::vec(0u64..50, 16)) {
        let cm = ConfusionMatrix::from_counts(4, counts).unwrap();
        for v in per_class_precision(&cm).into_iter().chain(per_class_f1(&cm)).flatten() {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }
}
