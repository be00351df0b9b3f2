//! Training-loop behavior: ledger exactness, gradient-release event
//! ordering, trajectory identities, and record artifacts.

use adama_core::data::DatasetSpec;
use adama_core::ledger::MemCategory;
use adama_core::nn::LayerSpec;
use adama_core::nn::ModelSpec;
use adama_core::optim::{AdamConfig, UpdateMode};
use adama_core::pipeline::{train_adam_ga, train_adama, ledger_report, MicroBatchPlan, Trainer};

fn lopsided_model(seed: u64) -> (ModelSpec, DatasetSpec) {
    // Distinct layer sizes so max-layer and total-params bytes differ.
    let spec = ModelSpec {
        layers: vec![
            LayerSpec::linear(6, 32, true),
            LayerSpec::relu(32),
            LayerSpec::linear(32, 2, true),
            LayerSpec::softmax_ce_head(2),
        ],
        seed,
    };
    let ds = DatasetSpec::TwoGaussians { dim: 6, seed: 99 };
    (spec, ds)
}

#[test]
fn adama_peak_gradient_is_max_layer_bytes() {
    let (spec, ds) = lopsided_model(3);
    let plan = MicroBatchPlan::new(32, 4).unwrap();
    let cfg = AdamConfig::default();
    let rec = train_adama::<f64>(&spec, &ds, plan, &cfg, 5, false).unwrap();
    // Largest layer: 32x6 weights + 32 bias = 224 params * 8 bytes.
    assert_eq!(rec.final_ledger.peak_of(MemCategory::Gradients), 224 * 8);
}

#[test]
fn ga_peak_gradient_is_total_param_bytes() {
    let (spec, ds) = lopsided_model(3);
    let plan = MicroBatchPlan::new(32, 4).unwrap();
    let cfg = AdamConfig::default();
    let rec = train_adam_ga::<f64>(&spec, &ds, plan, &cfg, 5, false).unwrap();
    let total = spec.total_param_count() as u64 * 8;
    assert_eq!(rec.final_ledger.peak_of(MemCategory::Gradients), total);
}

#[test]
fn activation_peak_scales_exactly_inverse_n() {
    let (spec, ds) = lopsided_model(5);
    let cfg = AdamConfig::default();
    let peak_at = |n: usize| {
        let plan = MicroBatchPlan::new(64, n).unwrap();
        train_adama::<f64>(&spec, &ds, plan, &cfg, 3, false)
            .unwrap()
            .final_ledger
            .peak_of(MemCategory::Activations)
    };
    let p1 = peak_at(1);
    for n in [2u64, 4, 8] {
        assert_eq!(peak_at(n as usize), p1 / n, "N = {n}");
    }
}

#[test]
fn gradient_freed_before_next_layer_allocates() {
    // In the release pipeline at most one layer gradient is ever live: every
    // gradient alloc must start from zero live gradient bytes.
    let (spec, ds) = lopsided_model(7);
    let plan = MicroBatchPlan::new(16, 2).unwrap();
    let cfg = AdamConfig::default();
    let rec = train_adama::<f64>(&spec, &ds, plan, &cfg, 3, false).unwrap();
    let mut live: i64 = 0;
    let mut saw_grad_events = false;
    for ev in &rec.ledger_events {
        if ev.category == MemCategory::Gradients {
            saw_grad_events = true;
            if ev.delta > 0 {
                assert_eq!(live, 0, "gradient alloc at step {} over live bytes", ev.step);
            }
            live += ev.delta;
            assert!(live >= 0);
        }
    }
    assert!(saw_grad_events);
}

#[test]
fn end_of_run_leaves_no_transient_bytes() {
    let (spec, ds) = lopsided_model(9);
    let plan = MicroBatchPlan::new(16, 4).unwrap();
    let cfg = AdamConfig::default();
    for rec in [
        train_adama::<f64>(&spec, &ds, plan, &cfg, 2, false).unwrap(),
        train_adam_ga::<f64>(&spec, &ds, plan, &cfg, 2, false).unwrap(),
    ] {
        assert_eq!(rec.final_ledger.live_of(MemCategory::Gradients), 0);
        assert_eq!(rec.final_ledger.live_of(MemCategory::Activations), 0);
        assert!(rec.final_ledger.live_of(MemCategory::Weights) > 0);
        assert!(rec.final_ledger.live_of(MemCategory::OptimizerStates) > 0);
    }
}

#[test]
fn n1_paths_share_every_bit() {
    let (spec, ds) = lopsided_model(21);
    let plan = MicroBatchPlan::new(16, 1).unwrap();
    let cfg = AdamConfig::default();
    let a = train_adam_ga::<f64>(&spec, &ds, plan, &cfg, 20, false).unwrap();
    let b = train_adama::<f64>(&spec, &ds, plan, &cfg, 20, false).unwrap();
    assert_eq!(a.params_digest, b.params_digest);
    for (sa, sb) in a.steps.iter().zip(&b.steps) {
        assert_eq!(sa.loss, sb.loss);
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let (spec, ds) = lopsided_model(33);
    let plan = MicroBatchPlan::new(32, 4).unwrap();
    let cfg = AdamConfig::default();
    let a = train_adama::<f64>(&spec, &ds, plan, &cfg, 10, false).unwrap();
    let b = train_adama::<f64>(&spec, &ds, plan, &cfg, 10, false).unwrap();
    assert_eq!(a.params_digest, b.params_digest);
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn dominance_holds_on_real_runs() {
    let (spec, ds) = lopsided_model(13);
    let plan = MicroBatchPlan::new(32, 8).unwrap();
    let cfg = AdamConfig::default();
    for rec in [
        train_adama::<f64>(&spec, &ds, plan, &cfg, 50, false).unwrap(),
        train_adam_ga::<f64>(&spec, &ds, plan, &cfg, 50, false).unwrap(),
    ] {
        assert_eq!(rec.dominance_violations, 0);
        assert!(rec.steps.iter().all(|s| s.dominance_ok));
    }
}

#[test]
fn divisibility_violation_rejected() {
    assert!(MicroBatchPlan::new(10, 3).is_err());
    assert!(MicroBatchPlan::new(0, 1).is_err());
}

#[test]
fn ledger_report_savings_against_ga_baseline() {
    let (spec, ds) = lopsided_model(15);
    let plan = MicroBatchPlan::new(32, 4).unwrap();
    let cfg = AdamConfig::default();
    let ga = train_adam_ga::<f64>(&spec, &ds, plan, &cfg, 3, false).unwrap();
    let adama = train_adama::<f64>(&spec, &ds, plan, &cfg, 3, false).unwrap();
    let rows = ledger_report(&adama, Some(&ga)).unwrap();
    let grad_row = rows.iter().find(|r| r.category == "gradients").unwrap();
    let total = spec.total_param_count() as u64 * 8;
    assert_eq!(grad_row.baseline_peak_bytes, Some(total));
    assert_eq!(
        grad_row.savings_bytes,
        Some(total as i64 - grad_row.peak_bytes as i64)
    );
    assert!(grad_row.savings_bytes.unwrap() > 0);

    // Mismatched specs are rejected.
    let (other_spec, other_ds) = lopsided_model(16);
    let mut other = train_adama::<f64>(&other_spec, &other_ds, plan, &cfg, 1, false).unwrap();
    other.spec.seed = 999;
    assert!(ledger_report(&adama, Some(&other)).is_err());
}

#[test]
fn csv_has_header_and_one_row_per_step() {
    let (spec, ds) = lopsided_model(17);
    let plan = MicroBatchPlan::new(16, 2).unwrap();
    let cfg = AdamConfig::default();
    let rec = train_adama::<f64>(&spec, &ds, plan, &cfg, 4, false).unwrap();
    let csv = rec.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("step,loss,lr"));
}

#[test]
fn f32_mode_trains_and_tracks_the_same_ledger() {
    let (spec, ds) = lopsided_model(19);
    let plan = MicroBatchPlan::new(16, 2).unwrap();
    let cfg = AdamConfig::default();
    let r64 = train_adama::<f64>(&spec, &ds, plan, &cfg, 5, false).unwrap();
    let r32 = train_adama::<f32>(&spec, &ds, plan, &cfg, 5, false).unwrap();
    // Byte accounting halves with the element size, category by category.
    assert_eq!(
        r64.final_ledger.peak_of(MemCategory::Gradients),
        2 * r32.final_ledger.peak_of(MemCategory::Gradients)
    );
    assert_eq!(
        r64.final_ledger.peak_of(MemCategory::Activations),
        2 * r32.final_ledger.peak_of(MemCategory::Activations)
    );
    // Loss trajectories agree to single-precision accuracy.
    for (a, b) in r64.steps.iter().zip(&r32.steps) {
        assert!((a.loss - b.loss).abs() < 1e-4);
    }
}

#[test]
fn trace_records_n_micro_slices_per_step() {
    let (spec, ds) = lopsided_model(25);
    let plan = MicroBatchPlan::new(16, 4).unwrap();
    let cfg = AdamConfig::default();
    let rec = train_adama::<f64>(&spec, &ds, plan, &cfg, 3, true).unwrap();
    let trace = rec.trace.unwrap();
    assert_eq!(trace.n_steps(), 3);
    assert_eq!(trace.n_micro, 4);
    assert!(trace.steps.iter().all(|s| s.len() == 4));
    assert_eq!(trace.dim(), spec.total_param_count());
}

#[test]
fn mode_mismatch_between_twins_rejected_by_trainer_contract() {
    let (spec, ds) = lopsided_model(27);
    let plan = MicroBatchPlan::new(16, 2).unwrap();
    let cfg = AdamConfig::default();
    let mut a = Trainer::<f64>::new(spec.clone(), ds, plan, cfg, UpdateMode::AdamA, false).unwrap();
    let mut b = Trainer::<f64>::new(spec, ds, plan, cfg, UpdateMode::AdamA, false).unwrap();
    assert!(adama_core::analysis::track_ratio(&mut a, &mut b, 1).is_err());
}
