mod common;

use common::{fixtures, rng, uniform_vec};
use proptest::prelude::*;
use rslora_ts::accounting::{budget_for, count_params, efficiency_score, frozen_for, trainable_for, write_budget_csv, BudgetRow, BYTES_PER_PARAM};
use rslora_ts::backbone::{AdapterMode, AdapterSpec, FrozenTransformer, ModelConfig};
use rslora_ts::data::{make_windows, synth, SplitSpec, SynthKind, SynthParams};
use rslora_ts::linalg::{Tape, Tensor};

fn wide() -> ModelConfig {
    ModelConfig {
        hidden_dim: 64,
        heads: 4,
        ..fixtures::tiny_model(2)
    }
}

#[test]
fn enumerated_counts_match_closed_form() {
    for cfg in [fixtures::tiny_model(1), fixtures::tiny_model(3), wide()] {
        for r in [1, 2, 4, 8, 64] {
            let m = FrozenTransformer::new(cfg.clone(), AdapterSpec::new(r, 0)).unwrap();
            let b = count_params(&m).unwrap();
            assert_eq!(b.trainable, trainable_for(&cfg, r));
            assert_eq!(b.total - b.trainable, frozen_for(&cfg));
            assert_eq!(budget_for(&cfg, r).total, b.total);
        }
    }
}

#[test]
fn every_trainable_entry_receives_gradient() {
    // Count parameters by observing which entries move under real batches.
    let cfg = fixtures::tiny_model(2);
    let mut model = FrozenTransformer::new(cfg.clone(), AdapterSpec::new(3, 1)).unwrap();
    let mut g = rng(1);
    let tensors: Vec<(String, Tensor)> = model
        .adapter_tensors()
        .into_iter()
        .map(|(n, t)| (n, Tensor::new(t.shape(), uniform_vec(&mut g, t.numel(), -0.1, 0.1)).unwrap()))
        .collect();
    model.load_adapter_tensors(&tensors).unwrap();
    let table = synth(SynthKind::MultiSine, 300, 2, 0, &SynthParams::default()).unwrap();
    let s = make_windows(&table, 16, 8, &SplitSpec::whole(), 1).unwrap();
    let mut touched = vec![Vec::new(); 4];
    for batch in 0..3 {
        let windows: Vec<&[f64]> = (0..8).map(|i| s.train.input_slice(batch * 8 + i)).collect();
        let mut tape = Tape::new();
        let rec = model.record(&mut tape, &windows, AdapterMode::Trainable).unwrap();
        let sq = tape.mul(rec.output, rec.output).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let f = rec.factors.unwrap();
        for (k, v) in [f[0].y, f[0].x, f[1].y, f[1].x].into_iter().enumerate() {
            let gr = grads.get(v).unwrap().data();
            if touched[k].is_empty() {
                touched[k] = vec![false; gr.len()];
            }
            for (t, x) in touched[k].iter_mut().zip(gr) {
                *t |= *x != 0.0;
            }
        }
    }
    let moved: usize = touched.iter().flatten().filter(|b| **b).count();
    assert_eq!(moved, trainable_for(&cfg, 3));
}

#[test]
fn horizon_changes_only_the_head() {
    let a = fixtures::tiny_model(2);
    let b = ModelConfig { horizon: 24, ..a.clone() };
    let ma = FrozenTransformer::new(a, AdapterSpec::new(2, 0)).unwrap();
    let mb = FrozenTransformer::new(b, AdapterSpec::new(2, 0)).unwrap();
    for ((na, ta), (nb, tb)) in ma.frozen_tensors().iter().zip(mb.frozen_tensors()) {
        assert_eq!(na, &nb);
        if na != "head.w" {
            assert!(ta.bit_eq(tb), "{na}");
        }
    }
    let (ea, eb) = (ma.adapter_tensors(), mb.adapter_tensors());
    assert!(ea[0].1.bit_eq(eb[0].1) && ea[1].1.bit_eq(eb[1].1));
}

#[test]
fn memory_column_is_four_bytes_per_parameter() {
    let cfg = wide();
    let b = budget_for(&cfg, 8);
    assert!((b.checkpoint_mib * (1 << 20) as f64 - (b.trainable * BYTES_PER_PARAM) as f64).abs() < 1e-6);
    let m = FrozenTransformer::new(cfg, AdapterSpec::new(8, 0)).unwrap();
    let counted = count_params(&m).unwrap();
    assert!(counted.container_mib.unwrap() > counted.checkpoint_mib);
    let mut out = Vec::new();
    write_budget_csv(&[BudgetRow::new(8, 8, &b)], &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("horizon,rank,trainable_M,percent_all,mem_mib"));
}

#[test]
fn efficiency_rejects_non_positive_inputs() {
    assert!(efficiency_score(0.0, 1.0).is_err());
    assert!(efficiency_score(1.0, 0.0).is_err());
    assert!(efficiency_score(1.0, f64::NAN).is_err());
}

proptest! {
    #[test]
    fn trainable_is_linear_below_the_clamp(r in 1usize..=8, k in 1usize..=4) {
        // The smallest adapter dimension is the patch width, 4·2 = 8.
        let cfg = ModelConfig { hidden_dim: 64, horizon: 16, ..wide() };
        prop_assume!(r * k <= 8);
        prop_assert_eq!(trainable_for(&cfg, r * k), k * trainable_for(&cfg, r));
    }

    #[test]
    fn efficiency_is_inverse_in_both_arguments(p in 0.01f64..100.0, m in 0.01f64..10.0) {
        let e = efficiency_score(p, m).unwrap();
        prop_assert!((e * p * m - 1.0).abs() < 1e-12);
    }
}
