//! Training loops: the gradient-accumulation baseline and the AdamA
//! accumulate-and-release pipeline, both instrumented by the memory
//! ledger.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::ledger::{LedgerEvent, LedgerSnapshot, MemCategory, MemoryLedger, ALL_CATEGORIES};
use crate::nn::{self, FullGradient, GradAccounting, ModelSpec, ParamSet};
use crate::optim::{increment_dominance_check, AdamConfig, OptimizerState, UpdateMode};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroBatchPlan {
    pub minibatch_size: usize,
    pub n_micro: usize,
}

impl MicroBatchPlan {
    pub fn new(minibatch_size: usize, n_micro: usize) -> Result<Self> {
        let plan = Self {
            minibatch_size,
            n_micro,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 || self.n_micro == 0 {
            return Err(Error::Config("mini-batch size and N must be positive".into()));
        }
        if self.minibatch_size % self.n_micro != 0 {
            return Err(Error::Divisibility {
                minibatch: self.minibatch_size,
                divisor: self.n_micro,
            });
        }
        Ok(())
    }

    pub fn micro_size(&self) -> usize {
        self.minibatch_size / self.n_micro
    }
}

/// Per-step, per-micro-batch gradients recorded for the analysis module.
/// `steps[t][b]` is the flat gradient of micro-batch b at step t, already
/// carrying the 1/N scale.
#[derive(Debug, Clone, Default)]
pub struct GradTrace {
    pub n_micro: usize,
    pub steps: Vec<Vec<Vec<f64>>>,
}

impl GradTrace {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s[0].len())
    }

    /// Full mini-batch gradient at step t (sum over micro-batches).
    pub fn minibatch_grad(&self, t: usize) -> Vec<f64> {
        let dim = self.dim();
        let mut g = vec![0.0; dim];
        for micro in &self.steps[t] {
            for (a, b) in g.iter_mut().zip(micro) {
                *a += b;
            }
        }
        g
    }

    /// max_t ||g_t||_2 over mini-batch gradients.
    pub fn g_norm_bound(&self) -> f64 {
        (0..self.n_steps())
            .map(|t| {
                self.minibatch_grad(t)
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// max_t ||g_t||_inf over mini-batch gradients.
    pub fn g_inf_bound(&self) -> f64 {
        (0..self.n_steps())
            .map(|t| {
                self.minibatch_grad(t)
                    .iter()
                    .map(|x| x.abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// ||g_{1:T,i,b}||_2, the column norm of coordinate i over steps for
    /// micro-batch slot b.
    pub fn column_norm(&self, coord: usize, micro: usize) -> f64 {
        self.steps
            .iter()
            .map(|s| s[micro][coord] * s[micro][coord])
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub ledger: LedgerSnapshot,
    pub dominance_ok: bool,
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub mode: UpdateMode,
    pub spec: ModelSpec,
    pub dataset: DatasetSpec,
    pub plan: MicroBatchPlan,
    pub config: AdamConfig,
    pub steps: Vec<StepStats>,
    pub final_ledger: LedgerSnapshot,
    pub ledger_events: Vec<LedgerEvent>,
    pub params_digest: String,
    pub dominance_violations: usize,
    pub trace: Option<GradTrace>,
}

impl TrainRecord {
    pub fn final_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.loss)
    }

    /// CSV with one row per step: step, loss, lr, live/peak per category.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,lr");
        for cat in ALL_CATEGORIES {
            out.push_str(&format!(",live_{0},peak_{0}", cat.name()));
        }
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!("{},{:.17e},{:.17e}", s.step, s.loss, s.lr));
            for cat in ALL_CATEGORIES {
                out.push_str(&format!(",{},{}", s.ledger.live_of(cat), s.ledger.peak_of(cat)));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let mut peaks = serde_json::Map::new();
        for cat in ALL_CATEGORIES {
            peaks.insert(
                cat.name().to_string(),
                serde_json::json!(self.final_ledger.peak_of(cat)),
            );
        }
        serde_json::json!({
            "mode": self.mode,
            "steps": self.steps.len(),
            "final_loss": self.final_loss(),
            "peak_bytes": peaks,
            "params_digest": self.params_digest,
            "dominance_violations": self.dominance_violations,
        })
    }
}

/// Maps layer parameter groups into one flat coordinate space, weight
/// before bias, layers in order.
struct FlatLayout {
    /// layer_index -> (weight offset, weight len, bias offset, bias len)
    per_layer: Vec<Option<(usize, usize, usize, usize)>>,
    total: usize,
}

impl FlatLayout {
    fn of<T: Scalar>(params: &ParamSet<T>) -> Self {
        let mut per_layer = Vec::with_capacity(params.layers.len());
        let mut off = 0;
        for lp in &params.layers {
            match lp {
                None => per_layer.push(None),
                Some(p) => {
                    let w_off = off;
                    let w_len = p.weight.len();
                    off += w_len;
                    let b_off = off;
                    let b_len = p.bias.as_ref().map_or(0, |b| b.len());
                    off += b_len;
                    per_layer.push(Some((w_off, w_len, b_off, b_len)));
                }
            }
        }
        Self {
            per_layer,
            total: off,
        }
    }
}

pub struct Trainer<T: Scalar> {
    pub spec: ModelSpec,
    pub dataset: DatasetSpec,
    pub plan: MicroBatchPlan,
    pub config: AdamConfig,
    pub mode: UpdateMode,
    params: ParamSet<T>,
    state: OptimizerState<T>,
    ledger: MemoryLedger,
    layout: FlatLayout,
    step: usize,
    steps: Vec<StepStats>,
    dominance_violations: usize,
    trace: Option<GradTrace>,
    ga_buffer_bytes: u64,
    finished: bool,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        spec: ModelSpec,
        dataset: DatasetSpec,
        plan: MicroBatchPlan,
        config: AdamConfig,
        mode: UpdateMode,
        record_trace: bool,
    ) -> Result<Self> {
        spec.validate()?;
        plan.validate()?;
        config.validate()?;
        if dataset.input_dim() != spec.input_dim() {
            return Err(Error::DimMismatch(format!(
                "dataset dim {} vs model input dim {}",
                dataset.input_dim(),
                spec.input_dim()
            )));
        }
        let params = nn::init_params::<T>(&spec)?;
        let state = OptimizerState::for_model(&params)?;
        let layout = FlatLayout::of(&params);
        let mut ledger = MemoryLedger::new();
        ledger.alloc(MemCategory::Weights, params.total_byte_size());
        ledger.alloc(MemCategory::OptimizerStates, state.byte_size());
        let ga_buffer_bytes = if mode == UpdateMode::Adam {
            // GA keeps a persistent full-model gradient buffer for the run.
            let b = params.total_byte_size();
            ledger.alloc(MemCategory::Gradients, b);
            b
        } else {
            0
        };
        let trace = record_trace.then(|| GradTrace {
            n_micro: plan.n_micro,
            steps: Vec::new(),
        });
        Ok(Self {
            spec,
            dataset,
            plan,
            config,
            mode,
            params,
            state,
            ledger,
            layout,
            step: 0,
            steps: Vec::new(),
            dominance_violations: 0,
            trace,
            ga_buffer_bytes,
            finished: false,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn state(&self) -> &OptimizerState<T> {
        &self.state
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn last_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.loss)
    }

    pub fn v_hat_flat(&self) -> Vec<f64> {
        self.state.v_hat_flat(&self.config)
    }

    /// Runs one mini-batch. Returns the mini-batch mean loss.
    pub fn step(&mut self) -> Result<f64> {
        let t = self.step;
        self.ledger.set_step(t + 1);
        let micro = self.plan.micro_size();
        let n = self.plan.n_micro;
        let start = (t * self.plan.minibatch_size) as u64;
        let inv_n = T::of_f64(1.0 / n as f64);

        let dim = self.layout.total;
        let mut summed = vec![0.0; dim];
        let mut summed_sq = vec![0.0; dim];
        let mut trace_step: Vec<Vec<f64>> = Vec::new();
        let mut loss_sum = 0.0;

        match self.mode {
            UpdateMode::AdamA => {
                self.state.begin_step(&self.config, 1)?;
                for i in 0..n {
                    let batch = self.dataset.batch::<T>(start + (i * micro) as u64, micro);
                    let (loss, cache) =
                        nn::forward(&self.spec, &self.params, &batch, Some(&mut self.ledger))?;
                    loss_sum += loss.as_f64();
                    let mut micro_flat = vec![0.0; dim];
                    let state = &mut self.state;
                    let config = &self.config;
                    let layout = &self.layout;
                    nn::backward_layerwise(
                        &self.spec,
                        &self.params,
                        &batch,
                        cache,
                        inv_n,
                        Some(&mut self.ledger),
                        GradAccounting::PerLayer,
                        &mut |g| {
                            flatten_into(layout, &g, &mut micro_flat);
                            state.accumulate_layer(g.layer_index, &g, config)
                        },
                    )?;
                    for (k, &x) in micro_flat.iter().enumerate() {
                        summed[k] += x;
                        summed_sq[k] += x * x;
                    }
                    if self.trace.is_some() {
                        trace_step.push(micro_flat);
                    }
                }
                self.state.finalize_step(&mut self.params, &self.config)?;
            }
            UpdateMode::Adam => {
                let mut buffer = FullGradient::zeros_like(&self.spec, &self.params);
                for i in 0..n {
                    let batch = self.dataset.batch::<T>(start + (i * micro) as u64, micro);
                    let (loss, cache) =
                        nn::forward(&self.spec, &self.params, &batch, Some(&mut self.ledger))?;
                    loss_sum += loss.as_f64();
                    let mut micro_flat = vec![0.0; dim];
                    let layout = &self.layout;
                    nn::backward_layerwise(
                        &self.spec,
                        &self.params,
                        &batch,
                        cache,
                        inv_n,
                        Some(&mut self.ledger),
                        GradAccounting::External,
                        &mut |g| {
                            flatten_into(layout, &g, &mut micro_flat);
                            buffer.add(&g)
                        },
                    )?;
                    for (k, &x) in micro_flat.iter().enumerate() {
                        summed[k] += x;
                        summed_sq[k] += x * x;
                    }
                    if self.trace.is_some() {
                        trace_step.push(micro_flat);
                    }
                }
                self.state.begin_step(&self.config, 1)?;
                self.state.accumulate_adam_minibatch(&buffer, &self.config)?;
                self.state.finalize_step(&mut self.params, &self.config)?;
            }
        }

        let loss = loss_sum / n as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: t + 1,
                what: "non-finite mini-batch loss".into(),
            });
        }

        // Cauchy-Schwarz dominance of the two v-increment paths, checked
        // every step regardless of mode.
        let adam_inc: Vec<f64> = summed.iter().map(|x| x * x).collect();
        let dominance_ok = increment_dominance_check(&adam_inc, &summed_sq, n)?;
        if !dominance_ok {
            self.dominance_violations += 1;
        }
        if let Some(trace) = &mut self.trace {
            trace.steps.push(trace_step);
        }

        self.step += 1;
        self.steps.push(StepStats {
            step: self.step,
            loss,
            lr: self.config.lr_at(self.step as u64),
            ledger: self.ledger.snapshot(),
            dominance_ok,
        });
        Ok(loss)
    }

    /// Releases the persistent GA gradient buffer and checks the ledger's
    /// end-of-run contract.
    pub fn finish(&mut self) -> Result<()> {
        if self.finished {
            return Ok(());
        }
        if self.ga_buffer_bytes > 0 {
            self.ledger
                .free(MemCategory::Gradients, self.ga_buffer_bytes)?;
        }
        self.ledger.check_end_of_run()?;
        self.finished = true;
        Ok(())
    }

    pub fn into_record(mut self) -> Result<TrainRecord> {
        self.finish()?;
        Ok(TrainRecord {
            mode: self.mode,
            spec: self.spec,
            dataset: self.dataset,
            plan: self.plan,
            config: self.config,
            steps: self.steps,
            final_ledger: self.ledger.snapshot(),
            ledger_events: self.ledger.events().to_vec(),
            params_digest: params_digest(&self.params),
            dominance_violations: self.dominance_violations,
            trace: self.trace,
        })
    }
}

fn flatten_into<T: Scalar>(layout: &FlatLayout, g: &nn::LayerGradient<T>, out: &mut [f64]) {
    let (w_off, w_len, b_off, b_len) = layout.per_layer[g.layer_index]
        .expect("gradient for parameterless layer");
    debug_assert_eq!(g.weight.len(), w_len);
    for (k, x) in g.weight.data().iter().enumerate() {
        out[w_off + k] = x.as_f64();
    }
    if let Some(b) = &g.bias {
        debug_assert_eq!(b.len(), b_len);
        for (k, x) in b.data().iter().enumerate() {
            out[b_off + k] = x.as_f64();
        }
    }
}

pub fn params_digest<T: Scalar>(params: &ParamSet<T>) -> String {
    let mut hasher = Sha256::new();
    for x in params.flatten_f64() {
        hasher.update(x.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Gradient-accumulation baseline: full-model gradient buffer, one Adam
/// update per mini-batch.
pub fn train_adam_ga<T: Scalar>(
    spec: &ModelSpec,
    dataset: &DatasetSpec,
    plan: MicroBatchPlan,
    config: &AdamConfig,
    steps: usize,
    record_trace: bool,
) -> Result<TrainRecord> {
    let mut tr = Trainer::<T>::new(
        spec.clone(),
        *dataset,
        plan,
        *config,
        UpdateMode::Adam,
        record_trace,
    )?;
    for _ in 0..steps {
        tr.step()?;
    }
    tr.into_record()
}

/// AdamA pipeline: per-layer accumulate into optimizer states, gradient
/// released immediately after use.
pub fn train_adama<T: Scalar>(
    spec: &ModelSpec,
    dataset: &DatasetSpec,
    plan: MicroBatchPlan,
    config: &AdamConfig,
    steps: usize,
    record_trace: bool,
) -> Result<TrainRecord> {
    let mut tr = Trainer::<T>::new(
        spec.clone(),
        *dataset,
        plan,
        *config,
        UpdateMode::AdamA,
        record_trace,
    )?;
    for _ in 0..steps {
        tr.step()?;
    }
    tr.into_record()
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerReportRow {
    pub category: &'static str,
    pub peak_bytes: u64,
    pub baseline_peak_bytes: Option<u64>,
    pub savings_bytes: Option<i64>,
}

/// Per-category peak breakdown, with savings against a baseline record
/// when one is supplied. The two records must share a model spec.
pub fn ledger_report(
    record: &TrainRecord,
    baseline: Option<&TrainRecord>,
) -> Result<Vec<LedgerReportRow>> {
    if let Some(base) = baseline {
        if base.spec != record.spec {
            return Err(Error::RunMismatch(
                "compared records use different model specs".into(),
            ));
        }
    }
    Ok(ALL_CATEGORIES
        .iter()
        .map(|&cat| {
            let peak = record.final_ledger.peak_of(cat);
            let base = baseline.map(|b| b.final_ledger.peak_of(cat));
            LedgerReportRow {
                category: cat.name(),
                peak_bytes: peak,
                baseline_peak_bytes: base,
                savings_bytes: base.map(|b| b as i64 - peak as i64),
            }
        })
        .collect())
}
