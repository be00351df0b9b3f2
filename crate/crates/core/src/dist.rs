//! Simulated W-worker data-parallel AdamA with optimizer-state all-reduce.
//!
//! Workers only ever communicate through the reduce step: each worker
//! pre-scales v by W*beta2 at mini-batch start, accumulates its own N
//! micro-batches with the per-worker 1/N gradient scale, then m is averaged
//! over workers and v is summed and divided by W^2. One reduce round per
//! mini-batch covers the whole state tensor set, independent of N.
//!
//! Reduction is always performed by a single reducer in ascending worker
//! order, so the threaded mode and the sequential lockstep mode produce
//! identical bits.

use serde::Serialize;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::ledger::MemoryLedger;
use crate::nn::{self, GradAccounting, ModelSpec, ParamSet};
use crate::optim::{AdamConfig, OptimizerState, UpdateMode};
use crate::pipeline::{params_digest, MicroBatchPlan, StepStats, TrainRecord};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistMode {
    /// Workers run one after another on the caller's thread.
    Sequential,
    /// Workers run on scoped threads; the reducer stays on the caller's
    /// thread.
    Threaded,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CommunicationCensus {
    pub minibatches: usize,
    /// All-reduce rounds per mini-batch for the state tensor set.
    pub rounds_per_minibatch: usize,
    /// Elements reduced per mini-batch: m and v for every parameter.
    pub reduced_elements_per_minibatch: usize,
    pub total_reduced_elements: u64,
}

/// What the straightforward per-micro-batch gradient all-reduce would
/// cost, kept only as a census baseline.
pub fn naive_gradient_census(
    minibatches: usize,
    n_micro: usize,
    param_count: usize,
) -> CommunicationCensus {
    CommunicationCensus {
        minibatches,
        rounds_per_minibatch: n_micro,
        reduced_elements_per_minibatch: n_micro * param_count,
        total_reduced_elements: (minibatches * n_micro * param_count) as u64,
    }
}

/// Elementwise mean across workers, summed in ascending worker order.
pub fn allreduce_mean(per_worker: &[Vec<f64>]) -> Result<Vec<f64>> {
    reduce_sum(per_worker).map(|mut out| {
        let w = per_worker.len() as f64;
        for x in &mut out {
            *x /= w;
        }
        out
    })
}

/// Elementwise sum across workers divided by W^2.
pub fn allreduce_v_w2(per_worker: &[Vec<f64>]) -> Result<Vec<f64>> {
    reduce_sum(per_worker).map(|mut out| {
        let w2 = (per_worker.len() * per_worker.len()) as f64;
        for x in &mut out {
            *x /= w2;
        }
        out
    })
}

fn reduce_sum(per_worker: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_worker
        .first()
        .ok_or_else(|| Error::State("reduce over zero workers".into()))?;
    let mut out = vec![0.0; first.len()];
    for w in per_worker {
        if w.len() != first.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![first.len()],
                got: vec![w.len()],
            });
        }
        for (a, b) in out.iter_mut().zip(w) {
            *a += b;
        }
    }
    Ok(out)
}

struct Worker<T: Scalar> {
    params: ParamSet<T>,
    state: OptimizerState<T>,
    ledger: MemoryLedger,
    loss_sum: f64,
}

impl<T: Scalar> Worker<T> {
    /// Local phase of one mini-batch: pre-scale, accumulate own
    /// micro-batches. No shared state is touched.
    fn local_phase(
        &mut self,
        spec: &ModelSpec,
        dataset: &DatasetSpec,
        config: &AdamConfig,
        worker_scale: usize,
        micro_size: usize,
        n_micro: usize,
        sample_start: u64,
    ) -> Result<()> {
        self.loss_sum = 0.0;
        self.state.begin_step(config, worker_scale)?;
        let inv_n = T::of_f64(1.0 / n_micro as f64);
        for i in 0..n_micro {
            let batch = dataset.batch::<T>(sample_start + (i * micro_size) as u64, micro_size);
            let (loss, cache) = nn::forward(spec, &self.params, &batch, Some(&mut self.ledger))?;
            self.loss_sum += loss.as_f64();
            let state = &mut self.state;
            nn::backward_layerwise(
                spec,
                &self.params,
                &batch,
                cache,
                inv_n,
                Some(&mut self.ledger),
                GradAccounting::PerLayer,
                &mut |g| state.accumulate_layer(g.layer_index, &g, config),
            )?;
        }
        Ok(())
    }
}

pub struct DistRun {
    pub record: TrainRecord,
    pub census: CommunicationCensus,
    /// Worker-0 parameters after the last step, flattened to f64 in layer
    /// order (all replicas are digest-checked identical).
    pub final_params: Vec<f64>,
}

/// W-worker data-parallel AdamA over `steps` mini-batches.
///
/// The global mini-batch is partitioned contiguously: worker w's
/// micro-batch i covers the slot w*N + i, so a single-device run with
/// W*N micro-batches sees the samples in the same order.
pub fn run_distributed_adama<T: Scalar>(
    spec: &ModelSpec,
    dataset: &DatasetSpec,
    workers: usize,
    n_micro: usize,
    minibatch_size: usize,
    config: &AdamConfig,
    steps: usize,
    mode: DistMode,
) -> Result<DistRun> {
    spec.validate()?;
    config.validate()?;
    if workers == 0 {
        return Err(Error::Config("worker count must be >= 1".into()));
    }
    if minibatch_size == 0 || minibatch_size % (workers * n_micro) != 0 {
        return Err(Error::Divisibility {
            minibatch: minibatch_size,
            divisor: workers * n_micro,
        });
    }
    let micro_size = minibatch_size / (workers * n_micro);

    let mut pool: Vec<Worker<T>> = (0..workers)
        .map(|_| {
            let params = nn::init_params::<T>(spec)?;
            let state = OptimizerState::for_model(&params)?;
            Ok(Worker {
                params,
                state,
                ledger: MemoryLedger::new(),
                loss_sum: 0.0,
            })
        })
        .collect::<Result<_>>()?;

    let param_count = pool[0].params.total_param_count();
    let mut census = CommunicationCensus {
        minibatches: 0,
        rounds_per_minibatch: 1,
        reduced_elements_per_minibatch: 2 * param_count,
        total_reduced_elements: 0,
    };
    let mut step_stats = Vec::with_capacity(steps);

    for t in 0..steps {
        let base = (t * minibatch_size) as u64;

        match mode {
            DistMode::Sequential => {
                for (w, worker) in pool.iter_mut().enumerate() {
                    let start = base + (w * n_micro * micro_size) as u64;
                    worker.local_phase(spec, dataset, config, workers, micro_size, n_micro, start)?;
                }
            }
            DistMode::Threaded => {
                let results: Vec<Result<()>> = std::thread::scope(|scope| {
                    let handles: Vec<_> = pool
                        .iter_mut()
                        .enumerate()
                        .map(|(w, worker)| {
                            let start = base + (w * n_micro * micro_size) as u64;
                            scope.spawn(move || {
                                worker.local_phase(
                                    spec, dataset, config, workers, micro_size, n_micro, start,
                                )
                            })
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().unwrap()).collect()
                });
                for r in results {
                    r?;
                }
            }
        }

        // One all-reduce round for the whole state tensor set.
        let n_groups = pool[0].state.groups().len();
        let mut reduced_m = Vec::with_capacity(n_groups);
        let mut reduced_v = Vec::with_capacity(n_groups);
        for g in 0..n_groups {
            let ms: Vec<Vec<f64>> = pool
                .iter()
                .map(|w| w.state.groups()[g].m.to_f64_vec())
                .collect();
            let vs: Vec<Vec<f64>> = pool
                .iter()
                .map(|w| w.state.groups()[g].v.to_f64_vec())
                .collect();
            reduced_m.push(allreduce_mean(&ms)?);
            reduced_v.push(allreduce_v_w2(&vs)?);
        }
        census.minibatches += 1;
        census.total_reduced_elements += census.reduced_elements_per_minibatch as u64;

        let mut loss_sum = 0.0;
        for worker in &mut pool {
            worker.state.set_moments(&reduced_m, &reduced_v)?;
            worker.state.finalize_step(&mut worker.params, config)?;
            loss_sum += worker.loss_sum / n_micro as f64;
        }
        let loss = loss_sum / workers as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: t + 1,
                what: "non-finite mini-batch loss".into(),
            });
        }

        // Replica consistency at the boundary.
        let digest0 = params_digest(&pool[0].params);
        for worker in &pool[1..] {
            if params_digest(&worker.params) != digest0 {
                return Err(Error::ReplicaDivergence { step: t + 1 });
            }
        }

        step_stats.push(StepStats {
            step: t + 1,
            loss,
            lr: config.lr_at((t + 1) as u64),
            ledger: pool[0].ledger.snapshot(),
            dominance_ok: true,
        });
    }

    let worker0 = &pool[0];
    let final_params = worker0.params.flatten_f64();
    let record = TrainRecord {
        mode: UpdateMode::AdamA,
        spec: spec.clone(),
        dataset: *dataset,
        plan: MicroBatchPlan {
            minibatch_size: minibatch_size / workers,
            n_micro,
        },
        config: *config,
        steps: step_stats,
        final_ledger: worker0.ledger.snapshot(),
        ledger_events: worker0.ledger.events().to_vec(),
        params_digest: params_digest(&worker0.params),
        dominance_violations: 0,
        trace: None,
    };
    Ok(DistRun {
        record,
        census,
        final_params,
    })
}
