//! Distributed-simulation contracts: single-device equivalence of the
//! state all-reduce construction, threaded/sequential bit identity, and
//! the one-round communication census.

use adama_core::data::DatasetSpec;
use adama_core::dist::{naive_gradient_census, run_distributed_adama, DistMode};
use adama_core::nn::{LayerSpec, ModelSpec};
use adama_core::optim::AdamConfig;
use adama_core::pipeline::{train_adama, MicroBatchPlan};

fn setup() -> (ModelSpec, DatasetSpec, AdamConfig) {
    let spec = ModelSpec {
        layers: vec![
            LayerSpec::linear(4, 12, true),
            LayerSpec::relu(12),
            LayerSpec::linear(12, 2, true),
            LayerSpec::softmax_ce_head(2),
        ],
        seed: 51,
    };
    let ds = DatasetSpec::TwoGaussians { dim: 4, seed: 71 };
    (spec, ds, AdamConfig::default())
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// (W, N) distributed equals single-device N' = W*N at 1e-9, same sample
/// order.
fn check_equivalence(workers: usize, n_micro: usize, steps: usize) {
    let (spec, ds, cfg) = setup();
    let minibatch = 32;
    let dist = run_distributed_adama::<f64>(
        &spec,
        &ds,
        workers,
        n_micro,
        minibatch,
        &cfg,
        steps,
        DistMode::Sequential,
    )
    .unwrap();
    let plan = MicroBatchPlan::new(minibatch, workers * n_micro).unwrap();
    let mut single = adama_core::pipeline::Trainer::<f64>::new(
        spec.clone(),
        ds,
        plan,
        cfg,
        adama_core::optim::UpdateMode::AdamA,
        false,
    )
    .unwrap();
    for _ in 0..steps {
        single.step().unwrap();
    }
    let single_flat = single.params().flatten_f64();
    let diff = max_rel_diff(&dist.final_params, &single_flat);
    assert!(diff <= 1e-9, "W={workers} N={n_micro}: max rel diff {diff}");

    // Losses agree per step inside the same tolerance.
    let single_rec = single.into_record().unwrap();
    for (a, b) in dist.record.steps.iter().zip(&single_rec.steps) {
        assert!(
            (a.loss - b.loss).abs() / b.loss.abs().max(1.0) <= 1e-9,
            "step {} loss {} vs {}",
            a.step,
            a.loss,
            b.loss
        );
    }
}

#[test]
fn w2_n2_matches_single_device_n4() {
    check_equivalence(2, 2, 25);
}

#[test]
fn w4_n2_matches_single_device_n8() {
    check_equivalence(4, 2, 25);
}

#[test]
fn threaded_equals_sequential_bitwise() {
    let (spec, ds, cfg) = setup();
    let seq = run_distributed_adama::<f64>(&spec, &ds, 4, 2, 32, &cfg, 20, DistMode::Sequential)
        .unwrap();
    let thr = run_distributed_adama::<f64>(&spec, &ds, 4, 2, 32, &cfg, 20, DistMode::Threaded)
        .unwrap();
    assert_eq!(seq.record.params_digest, thr.record.params_digest);
    for (a, b) in seq.record.steps.iter().zip(&thr.record.steps) {
        assert_eq!(a.loss, b.loss);
    }
}

#[test]
fn w1_distributed_equals_plain_run_bitwise() {
    let (spec, ds, cfg) = setup();
    let dist =
        run_distributed_adama::<f64>(&spec, &ds, 1, 4, 32, &cfg, 15, DistMode::Sequential).unwrap();
    let plan = MicroBatchPlan::new(32, 4).unwrap();
    let single = train_adama::<f64>(&spec, &ds, plan, &cfg, 15, false).unwrap();
    assert_eq!(dist.record.params_digest, single.params_digest);
}

#[test]
fn one_reduce_round_per_minibatch_independent_of_n() {
    let (spec, ds, cfg) = setup();
    let params = spec.total_param_count();
    for n in [1usize, 2, 4] {
        let run = run_distributed_adama::<f64>(
            &spec,
            &ds,
            2,
            n,
            32,
            &cfg,
            10,
            DistMode::Sequential,
        )
        .unwrap();
        assert_eq!(run.census.rounds_per_minibatch, 1, "N = {n}");
        assert_eq!(run.census.reduced_elements_per_minibatch, 2 * params);
        assert_eq!(run.census.minibatches, 10);
        assert_eq!(run.census.total_reduced_elements, (10 * 2 * params) as u64);

        // The gradient-per-micro-batch baseline needs N rounds.
        let naive = naive_gradient_census(10, n, params);
        assert_eq!(naive.rounds_per_minibatch, n);
    }
}

#[test]
fn indivisible_minibatch_rejected() {
    let (spec, ds, cfg) = setup();
    let err = run_distributed_adama::<f64>(&spec, &ds, 3, 2, 32, &cfg, 1, DistMode::Sequential);
    assert!(err.is_err());
}
