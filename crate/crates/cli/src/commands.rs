//! One function per subcommand. Each takes a parsed config plus an
//! artifact sink, runs the corresponding core module, and writes
//! machine-readable outputs; numeric policy lives in the core crate.

use adama_core::analysis::{lemma1_check, lemma2_check, regret_harness, theorem_bound_check, track_ratio};
use adama_core::dist::{naive_gradient_census, run_distributed_adama, DistMode};
use adama_core::memcalc::{compare_strategies, estimate, StrategyRow};
use adama_core::pipeline::{ledger_report, MicroBatchPlan, TrainRecord, Trainer};
use adama_core::optim::UpdateMode;
use adama_core::Scalar;

use crate::artifacts::ArtifactSink;
use crate::config::{
    CompareConfig, DistsimConfig, LemmaCheckConfig, MemcalcConfig, Precision, RegretConfig,
    TrainConfig,
};
use crate::CliError;

pub fn cmd_train(cfg: &TrainConfig, sink: &mut ArtifactSink) -> Result<(), CliError> {
    let record = match cfg.precision {
        Precision::F64 => train_one::<f64>(cfg)?,
        Precision::F32 => train_one::<f32>(cfg)?,
    };
    if record.dominance_violations > 0 {
        return Err(CliError::Invariant(format!(
            "{} increment-dominance violations recorded",
            record.dominance_violations
        )));
    }
    sink.table("csv", &record.to_csv())?;
    let ledger = ledger_report(&record, None)?;
    let mut summary = record.summary_json();
    let obj = summary.as_object_mut().expect("summary is an object");
    obj.insert("ledger".into(), serde_json::to_value(&ledger).map_err(adama_core::Error::from)?);
    obj.insert("artifacts".into(), sink.written().into());
    sink.json("json", summary)?;
    Ok(())
}

fn train_one<T: Scalar>(cfg: &TrainConfig) -> Result<TrainRecord, CliError> {
    let spec = cfg.model.resolve(&cfg.dataset);
    let plan = MicroBatchPlan::new(cfg.minibatch, cfg.n_micro)?;
    let mut tr = Trainer::<T>::new(
        spec,
        cfg.dataset,
        plan,
        cfg.optimizer,
        cfg.mode,
        cfg.record_trace,
    )?;
    for _ in 0..cfg.steps {
        tr.step()?;
    }
    Ok(tr.into_record()?)
}

pub fn cmd_compare(cfg: &CompareConfig, sink: &mut ArtifactSink) -> Result<(), CliError> {
    let (adam, adama, ratio_csv) = match cfg.precision {
        Precision::F64 => compare_one::<f64>(cfg)?,
        Precision::F32 => compare_one::<f32>(cfg)?,
    };
    sink.table("adam.csv", &adam.to_csv())?;
    sink.table("adama.csv", &adama.to_csv())?;
    sink.table("ratio.csv", &ratio_csv)?;

    let final_gap = (adama.final_loss() - adam.final_loss()).abs() / adam.final_loss().abs();
    let mut max_pointwise: f64 = 0.0;
    for (a, b) in adam.steps.iter().zip(&adama.steps).skip(cfg.gap_skip) {
        max_pointwise = max_pointwise.max((b.loss - a.loss).abs() / a.loss.abs());
    }
    let exact_equal = adam.params_digest == adama.params_digest;
    sink.json(
        "json",
        serde_json::json!({
            "n_micro": cfg.n_micro,
            "steps": cfg.steps,
            "final_loss_adam": adam.final_loss(),
            "final_loss_adama": adama.final_loss(),
            "final_gap_rel": final_gap,
            "max_pointwise_gap_rel": max_pointwise,
            "gap_skip": cfg.gap_skip,
            "exact_equal": exact_equal,
            "params_digest_adam": adam.params_digest,
            "params_digest_adama": adama.params_digest,
            "artifacts": sink.written(),
        }),
    )?;
    Ok(())
}

fn compare_one<T: Scalar>(
    cfg: &CompareConfig,
) -> Result<(TrainRecord, TrainRecord, String), CliError> {
    let spec = cfg.model.resolve(&cfg.dataset);
    let plan = MicroBatchPlan::new(cfg.minibatch, cfg.n_micro)?;
    let mut adam = Trainer::<T>::new(
        spec.clone(),
        cfg.dataset,
        plan,
        cfg.optimizer,
        UpdateMode::Adam,
        false,
    )?;
    let mut adama = Trainer::<T>::new(
        spec,
        cfg.dataset,
        plan,
        cfg.optimizer,
        UpdateMode::AdamA,
        false,
    )?;
    let ratio = track_ratio(&mut adam, &mut adama, cfg.steps)?;
    Ok((adam.into_record()?, adama.into_record()?, ratio.to_csv()))
}

pub fn cmd_distsim(
    cfg: &DistsimConfig,
    sink: &mut ArtifactSink,
    deterministic: bool,
    thread_cap: Option<usize>,
) -> Result<(), CliError> {
    let spec = cfg.model.resolve(&cfg.dataset);
    let capped = thread_cap.is_some_and(|cap| cap < cfg.workers);
    let mode = if cfg.threaded && !deterministic && !capped {
        DistMode::Threaded
    } else {
        DistMode::Sequential
    };
    let run = run_distributed_adama::<f64>(
        &spec,
        &cfg.dataset,
        cfg.workers,
        cfg.n_micro,
        cfg.minibatch,
        &cfg.optimizer,
        cfg.steps,
        mode,
    )?;
    sink.table("csv", &run.record.to_csv())?;

    let max_rel_diff = if cfg.reference {
        let plan = MicroBatchPlan::new(cfg.minibatch, cfg.workers * cfg.n_micro)?;
        let mut single = Trainer::<f64>::new(
            spec,
            cfg.dataset,
            plan,
            cfg.optimizer,
            UpdateMode::AdamA,
            false,
        )?;
        for _ in 0..cfg.steps {
            single.step()?;
        }
        let reference = single.params().flatten_f64();
        let mut worst: f64 = 0.0;
        for (a, b) in run.final_params.iter().zip(&reference) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
        }
        Some(worst)
    } else {
        None
    };

    let naive = naive_gradient_census(cfg.steps, cfg.n_micro, run.record.spec.total_param_count());
    sink.json(
        "json",
        serde_json::json!({
            "workers": cfg.workers,
            "n_micro": cfg.n_micro,
            "mode": match mode {
                DistMode::Threaded => "threaded",
                DistMode::Sequential => "sequential",
            },
            "census": run.census,
            "naive_gradient_census": naive,
            "final_loss": run.record.final_loss(),
            "params_digest": run.record.params_digest,
            "reference_max_rel_diff": max_rel_diff,
            "artifacts": sink.written(),
        }),
    )?;
    Ok(())
}

pub fn cmd_memcalc(cfg: &MemcalcConfig, sink: &mut ArtifactSink) -> Result<(), CliError> {
    let spec = cfg.spec.resolve()?;
    // Validate every config up front so a bad entry fails before output.
    for c in &cfg.configs {
        estimate(&spec, c, cfg.minibatch)?;
    }
    let rows = compare_strategies(&spec, &cfg.configs, cfg.minibatch)?;
    sink.table("csv", &memcalc_csv(&rows))?;
    sink.table("txt", &memcalc_text(&spec.name, cfg.minibatch, &rows))?;
    sink.json(
        "json",
        serde_json::json!({
            "spec": spec.name,
            "minibatch": cfg.minibatch,
            "rows": rows,
            "artifacts": sink.written(),
        }),
    )?;
    Ok(())
}

fn memcalc_csv(rows: &[StrategyRow]) -> String {
    let mut out = String::from(
        "strategy,n_micro,workers,os_partition,grad_partition,\
         weights,gradients,optimizer_states,activations,overhead,total,savings_vs_first\n",
    );
    for r in rows {
        let b = &r.breakdown;
        out.push_str(&format!(
            "{:?},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.config.strategy,
            r.config.n_micro,
            r.config.workers,
            r.config.os_partition,
            r.config.grad_partition,
            b.weights,
            b.gradients,
            b.optimizer_states,
            b.activations,
            b.overhead,
            b.total,
            r.savings_vs_first,
        ));
    }
    out
}

fn memcalc_text(name: &str, minibatch: u64, rows: &[StrategyRow]) -> String {
    const MIB: f64 = (1u64 << 20) as f64;
    let mut out = format!("{name}  (mini-batch {minibatch}, MiB per device)\n\n");
    out.push_str(&format!(
        "{:<10} {:>3} {:>3} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "strategy", "N", "W", "weights", "grads", "opt", "acts", "total", "savings"
    ));
    for r in rows {
        let b = &r.breakdown;
        out.push_str(&format!(
            "{:<10} {:>3} {:>3} {:>10.1} {:>10.1} {:>10.1} {:>10.1} {:>10.1} {:>10.1}\n",
            format!("{:?}", r.config.strategy),
            r.config.n_micro,
            r.config.workers,
            b.weights as f64 / MIB,
            b.gradients as f64 / MIB,
            b.optimizer_states as f64 / MIB,
            b.activations as f64 / MIB,
            b.total as f64 / MIB,
            r.savings_vs_first as f64 / MIB,
        ));
    }
    out
}

pub fn cmd_regret(cfg: &RegretConfig, sink: &mut ArtifactSink) -> Result<(), CliError> {
    let (regret, trace) = regret_harness(cfg.problem, cfg.mode, &cfg.optimizer, cfg.horizon)?;
    sink.table("csv", &regret.to_csv())?;
    let bound = theorem_bound_check(&regret, &trace, &cfg.optimizer)?;
    let (lo, hi) = cfg
        .slope_window
        .unwrap_or(((cfg.horizon / 100).max(1), cfg.horizon));
    sink.json(
        "json",
        serde_json::json!({
            "problem": cfg.problem,
            "mode": cfg.mode,
            "horizon": cfg.horizon,
            "regret_final": regret.regret_at(cfg.horizon),
            "avg_regret_final": regret.regret_at(cfg.horizon) / cfg.horizon as f64,
            "slope_window": [lo, hi],
            "loglog_slope": regret.loglog_slope(lo, hi),
            "ridge_applied": regret.ridge_applied,
            "regret_nondecreasing": regret.regret_nondecreasing,
            "bound": bound.summary_json(),
            "artifacts": sink.written(),
        }),
    )?;
    if !bound.pass {
        return Err(CliError::Invariant(format!(
            "regret exceeded the three-term bound (min slack {})",
            bound.min_slack
        )));
    }
    Ok(())
}

pub fn cmd_lemmacheck(cfg: &LemmaCheckConfig, sink: &mut ArtifactSink) -> Result<(), CliError> {
    let train = TrainConfig {
        model: cfg.model.clone(),
        dataset: cfg.dataset,
        minibatch: cfg.minibatch,
        n_micro: cfg.n_micro,
        mode: cfg.mode,
        steps: cfg.steps,
        optimizer: cfg.optimizer,
        precision: Precision::F64,
        record_trace: true,
    };
    let record = train_one::<f64>(&train)?;
    let trace = record.trace.as_ref().expect("trace was requested");
    let rep1 = lemma1_check(trace)?;
    let rep2 = lemma2_check(trace, &cfg.optimizer)?;
    let mut doc = serde_json::json!({
        "steps": cfg.steps,
        "n_micro": cfg.n_micro,
        "grad_sq_over_sqrt_t": rep1.summary_json(),
        "accumulation_path": rep2.summary_json(),
        "artifacts": sink.written(),
    });
    if cfg.per_coord {
        let obj = doc.as_object_mut().expect("doc is an object");
        obj.insert(
            "per_coord".into(),
            serde_json::json!({
                "grad_sq_over_sqrt_t": rep1.per_coord,
                "accumulation_path": rep2.per_coord,
            }),
        );
    }
    sink.json("json", doc)?;
    if !(rep1.pass && rep2.pass) {
        return Err(CliError::Invariant(format!(
            "inequality check failed (slacks {} / {})",
            rep1.min_slack, rep2.min_slack
        )));
    }
    Ok(())
}
