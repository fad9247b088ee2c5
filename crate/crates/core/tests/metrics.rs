mod common;

use common::metric_oracle as oracle;
use proptest::prelude::*;
use rslora_ts::metrics::{
    classification_metrics, mae, mase, mase_scaled, mean_defined, mse, owa, seasonal_naive, smape,
    ConfusionCounts, MetricReport, MetricValue,
};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0f64..100.0, n),
            prop::collection::vec(-100.0f64..100.0, n),
        )
    })
}

proptest! {
    #[test]
    fn point_metrics_match_oracle((y, p) in pair()) {
        prop_assert!(close(mse(&y, &p).unwrap(), oracle::mse(&y, &p)));
        prop_assert!(close(mae(&y, &p).unwrap(), oracle::mae(&y, &p)));
        prop_assert!(close(smape(&y, &p).unwrap(), oracle::smape(&y, &p)));
    }

    #[test]
    fn smape_is_symmetric_and_bounded((y, p) in pair()) {
        let a = smape(&y, &p).unwrap();
        prop_assert!(close(a, smape(&p, &y).unwrap()));
        prop_assert!((0.0..=200.0 + 1e-9).contains(&a));
    }

    #[test]
    fn scale_free_metrics_ignore_units((y, p) in pair(), k in 0.01f64..100.0, m in 1usize..3) {
        prop_assume!(y.len() > m);
        let ys: Vec<f64> = y.iter().map(|v| v * k).collect();
        let ps: Vec<f64> = p.iter().map(|v| v * k).collect();
        prop_assert!((smape(&y, &p).unwrap() - smape(&ys, &ps).unwrap()).abs() < 1e-9);
        if let (Some(a), Some(b)) = (mase(&y, &p, m).unwrap().value(), mase(&ys, &ps, m).unwrap().value()) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
        prop_assert!(close(mse(&ys, &ps).unwrap(), k * k * mse(&y, &p).unwrap()));
    }

    #[test]
    fn mase_and_owa_match_oracle((y, p) in pair(), m in 1usize..3, seed in 0u64..1000) {
        let mut g = common::rng(seed);
        let insample = common::uniform_vec(&mut g, y.len() + 5, -50.0, 50.0);
        let naive = common::uniform_vec(&mut g, y.len(), -50.0, 50.0);
        let got = mase_scaled(&y, &p, &insample, m).unwrap();
        prop_assert!(close(got.value().unwrap(), oracle::mase(&y, &p, &insample, m).unwrap()));
        let got = owa(&y, &p, &naive, &insample, m).unwrap();
        prop_assert!(close(got.value().unwrap(), oracle::owa(&y, &p, &naive, &insample, m).unwrap()));
    }

    #[test]
    fn classification_matches_oracle(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let c = ConfusionCounts { tp, fp, tn, fn_ };
        let got = classification_metrics(&c).unwrap();
        let want = oracle::classification(tp, fp, tn, fn_);
        for (g, w) in [got.accuracy, got.precision, got.recall, got.f1].iter().zip(want) {
            match (g.value(), w) {
                (Some(a), Some(b)) => prop_assert!(close(a, b)),
                (None, None) => {}
                other => prop_assert!(false, "{:?}", other),
            }
        }
    }

    #[test]
    fn f1_lies_between_precision_and_recall(tp in 1u64..50, fp in 0u64..50, fn_ in 0u64..50) {
        let m = classification_metrics(&ConfusionCounts { tp, fp, tn: 0, fn_ }).unwrap();
        let (p, r, f) = (m.precision.value().unwrap(), m.recall.value().unwrap(), m.f1.value().unwrap());
        prop_assert!(f <= p.max(r) + 1e-15 && f >= p.min(r) - 1e-15);
    }
}

#[test]
fn perfect_forecast_is_zero_error() {
    let y = [1.0, 2.0, 3.0, 5.0];
    assert_eq!(mse(&y, &y).unwrap(), 0.0);
    assert_eq!(smape(&y, &y).unwrap(), 0.0);
    assert_eq!(mase(&y, &y, 1).unwrap().value(), Some(0.0));
}

#[test]
fn degenerate_inputs_are_marked_undefined() {
    let flat = [2.0; 6];
    assert!(!mase(&flat, &[1.0; 6], 1).unwrap().is_defined());
    let m = classification_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 5, fn_: 0 }).unwrap();
    assert!(!m.precision.is_defined() && !m.recall.is_defined() && !m.f1.is_defined());
    assert_eq!(m.accuracy.value(), Some(1.0));
    assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    assert!(mse(&[], &[]).is_err());
}

#[test]
fn seasonal_naive_repeats_last_cycle() {
    let h = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(seasonal_naive(&h, 5, 2).unwrap(), vec![4.0, 5.0, 4.0, 5.0, 4.0]);
    assert_eq!(seasonal_naive(&h, 3, 1).unwrap(), vec![5.0; 3]);
    assert!(seasonal_naive(&h, 3, 6).is_err());
}

#[test]
fn labels_build_confusion_counts() {
    let t = [true, true, false, false, true];
    let p = [true, false, false, true, true];
    let c = ConfusionCounts::from_labels(&t, &p).unwrap();
    assert_eq!((c.tp, c.fp, c.tn, c.fn_), (2, 1, 1, 1));
}

#[test]
fn mean_skips_undefined_values() {
    let vals = [MetricValue::Value(1.0), MetricValue::Undefined("x".into()), MetricValue::Value(3.0)];
    assert_eq!(mean_defined(&vals).value(), Some(2.0));
    assert!(!mean_defined(&[MetricValue::Undefined("x".into())]).is_defined());
}

#[test]
fn report_serializes_undefined_with_reason() {
    let mut r = MetricReport::default();
    r.insert_value("mse", 0.5);
    r.insert("mase", MetricValue::Undefined("flat".into()));
    let json = r.to_json().unwrap();
    assert!(json.contains("\"mse\"") && json.contains("flat"));
    assert_eq!(r.get("mse"), Some(0.5));
    assert_eq!(r.get("mase"), None);
}
