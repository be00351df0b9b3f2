//! Quantitative verification instruments: update-coefficient tracking
//! between twin Adam/AdamA runs, an online-convex regret harness, and
//! numeric checkers for the supporting inequalities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, LrSchedule, OptimizerState, UpdateMode};
use crate::pipeline::{GradTrace, Trainer};
use crate::rng::{counter_normal, counter_uniform_symmetric};
use crate::scalar::Scalar;
use crate::tensor::DenseArray;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RatioRow {
    pub step: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Coordinates with v_hat = 0 in either run, excluded from the stats.
    pub excluded: usize,
}

/// Per-step statistics of sqrt(v_hat_Adam) / sqrt(v_hat_AdamA) over
/// parameter coordinates.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RatioTrace {
    pub rows: Vec<RatioRow>,
}

impl RatioTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean,min,max,excluded_count\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{}\n",
                r.step, r.mean, r.min, r.max, r.excluded
            ));
        }
        out
    }
}

/// Runs twin trainers in lockstep and tracks the per-step coefficient
/// sqrt(v_hat_Adam)/sqrt(v_hat_AdamA). The twins must share everything but
/// the update mode.
pub fn track_ratio<T: Scalar>(
    adam: &mut Trainer<T>,
    adama: &mut Trainer<T>,
    steps: usize,
) -> Result<RatioTrace> {
    if adam.mode != UpdateMode::Adam || adama.mode != UpdateMode::AdamA {
        return Err(Error::RunMismatch("twins must be (Adam, AdamA)".into()));
    }
    if adam.spec != adama.spec
        || adam.dataset != adama.dataset
        || adam.plan != adama.plan
        || adam.config != adama.config
    {
        return Err(Error::RunMismatch(
            "twin runs must share spec, dataset, plan and config".into(),
        ));
    }
    let mut trace = RatioTrace::default();
    for _ in 0..steps {
        adam.step()?;
        adama.step()?;
        let va = adam.v_hat_flat();
        let vb = adama.v_hat_flat();
        let mut excluded = 0;
        let mut count = 0usize;
        let (mut sum, mut min, mut max) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        for (&a, &b) in va.iter().zip(&vb) {
            if a <= 0.0 || b <= 0.0 {
                excluded += 1;
                continue;
            }
            let r = a.sqrt() / b.sqrt();
            sum += r;
            min = min.min(r);
            max = max.max(r);
            count += 1;
        }
        trace.rows.push(RatioRow {
            step: adam.steps_done(),
            mean: if count > 0 { sum / count as f64 } else { f64::NAN },
            min,
            max,
            excluded,
        });
    }
    Ok(trace)
}

/// Online convex problem family with a closed-form hindsight optimum:
/// per-step least squares f_t(theta) = (1/N) sum_b 0.5 (x_{t,b}^T theta - y_{t,b})^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "stream")]
pub enum RegretProblem {
    /// Bounded random stream: x uniform in (-1,1)^dim, y from a fixed
    /// reference parameter plus noise.
    OnlineLsq { dim: usize, n_micro: usize, seed: u64 },
    /// Constant stream, every sample (x, y) with x replicated per
    /// coordinate.
    ConstantLsq {
        dim: usize,
        n_micro: usize,
        x: f64,
        y: f64,
    },
}

const STREAM_LSQ_X: u64 = 20;
const STREAM_LSQ_NOISE: u64 = 21;
const STREAM_LSQ_REF: u64 = 22;

impl RegretProblem {
    pub fn dim(&self) -> usize {
        match self {
            RegretProblem::OnlineLsq { dim, .. } => *dim,
            RegretProblem::ConstantLsq { dim, .. } => *dim,
        }
    }

    pub fn n_micro(&self) -> usize {
        match self {
            RegretProblem::OnlineLsq { n_micro, .. } => *n_micro,
            RegretProblem::ConstantLsq { n_micro, .. } => *n_micro,
        }
    }

    /// Sample (x, y) for micro-batch slot b at step t (1-based t).
    fn sample(&self, t: u64, b: usize) -> (Vec<f64>, f64) {
        match self {
            RegretProblem::OnlineLsq { dim, n_micro, seed } => {
                let s = (t - 1) * *n_micro as u64 + b as u64;
                let x: Vec<f64> = (0..*dim)
                    .map(|j| {
                        counter_uniform_symmetric(*seed, STREAM_LSQ_X, s * *dim as u64 + j as u64, 1.0)
                    })
                    .collect();
                let theta_ref: Vec<f64> = (0..*dim)
                    .map(|j| counter_uniform_symmetric(*seed, STREAM_LSQ_REF, j as u64, 1.0))
                    .collect();
                let noise = 0.1 * counter_normal(*seed, STREAM_LSQ_NOISE, s);
                let y = x.iter().zip(&theta_ref).map(|(a, b)| a * b).sum::<f64>() + noise;
                (x, y)
            }
            RegretProblem::ConstantLsq { dim, x, y, .. } => (vec![*x; *dim], *y),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RegretTrace {
    /// f_t(theta_t) per step.
    pub losses: Vec<f64>,
    /// R(T) prefix sums, index t-1 holds R(t).
    pub regret_prefix: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub theta_star_loss_total: f64,
    /// Trajectory diameter bounds (exact in one dimension).
    pub diameter_l2: f64,
    pub diameter_inf: f64,
    pub g_norm: f64,
    pub g_inf: f64,
    /// Bias-corrected second moment at the final step.
    pub vhat_final: Vec<f64>,
    pub ridge_applied: bool,
    pub regret_nondecreasing: bool,
}

impl RegretTrace {
    pub fn regret_at(&self, t: usize) -> f64 {
        self.regret_prefix[t - 1]
    }

    pub fn horizon(&self) -> usize {
        self.regret_prefix.len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("T,R,R_over_T\n");
        for (i, r) in self.regret_prefix.iter().enumerate() {
            let t = i + 1;
            out.push_str(&format!("{},{:.17e},{:.17e}\n", t, r, r / t as f64));
        }
        out
    }

    /// Least-squares slope of log R(T) vs log T over T in [lo, hi].
    pub fn loglog_slope(&self, lo: usize, hi: usize) -> f64 {
        let pts: Vec<(f64, f64)> = (lo..=hi.min(self.horizon()))
            .filter(|&t| self.regret_prefix[t - 1] > 0.0)
            .map(|t| ((t as f64).ln(), self.regret_prefix[t - 1].ln()))
            .collect();
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    }
}

fn solve_normal_equations(a: &[Vec<f64>], c: &[f64]) -> Option<Vec<f64>> {
    let d = c.len();
    let mut m: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut row = a[i].clone();
            row.push(c[i]);
            row
        })
        .collect();
    for col in 0..d {
        let pivot = (col..d).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        for row in 0..d {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..=d {
                    let v = m[col][k];
                    m[row][k] -= f * v;
                }
            }
        }
    }
    Some((0..d).map(|i| m[i][d] / m[i][i]).collect())
}

/// Runs AdamA (or the Adam reference) on the online least-squares stream
/// with the inverse-sqrt schedule and lambda-decayed beta1, and returns
/// the regret trace plus the recorded gradient trace.
pub fn regret_harness(
    problem: RegretProblem,
    mode: UpdateMode,
    config: &AdamConfig,
    horizon: usize,
) -> Result<(RegretTrace, GradTrace)> {
    config.validate()?;
    let dim = problem.dim();
    let n = problem.n_micro();
    let cfg = AdamConfig {
        lr_schedule: LrSchedule::InverseSqrt,
        ..*config
    };

    let mut theta = vec![0.0f64; dim];
    let mut state = OptimizerState::<f64>::init_state(&[vec![dim]])?;
    let mut params = theta_param_set(&theta)?;

    // Accumulated normal equations for the hindsight optimum.
    let mut gram = vec![vec![0.0; dim]; dim];
    let mut rhs = vec![0.0; dim];

    let mut losses = Vec::with_capacity(horizon);
    let mut trace = GradTrace {
        n_micro: n,
        steps: Vec::with_capacity(horizon),
    };
    let mut coord_min = vec![f64::INFINITY; dim];
    let mut coord_max = vec![f64::NEG_INFINITY; dim];
    // Per-step samples retained to evaluate f_t at theta_star afterwards.
    let mut all_samples: Vec<Vec<(Vec<f64>, f64)>> = Vec::with_capacity(horizon);

    for t in 1..=horizon as u64 {
        for (j, &th) in theta.iter().enumerate() {
            coord_min[j] = coord_min[j].min(th);
            coord_max[j] = coord_max[j].max(th);
        }
        let samples: Vec<(Vec<f64>, f64)> = (0..n).map(|b| problem.sample(t, b)).collect();
        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut step_grads = Vec::with_capacity(n);
        for (x, y) in &samples {
            let pred: f64 = x.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let resid = pred - y;
            loss += 0.5 * resid * resid * inv_n;
            // g_{t,b} = (1/N) grad of the per-sample loss.
            step_grads.push(x.iter().map(|&xi| inv_n * resid * xi).collect::<Vec<f64>>());
            for i in 0..dim {
                for j in 0..dim {
                    gram[i][j] += inv_n * x[i] * x[j];
                }
                rhs[i] += inv_n * x[i] * y;
            }
        }
        losses.push(loss);

        state.begin_step(&cfg, 1)?;
        match mode {
            UpdateMode::AdamA => {
                for g in &step_grads {
                    accumulate_flat(&mut state, g, &cfg)?;
                }
            }
            UpdateMode::Adam => {
                let mut summed = vec![0.0; dim];
                for g in &step_grads {
                    for (a, b) in summed.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                accumulate_flat(&mut state, &summed, &cfg)?;
            }
        }
        state.finalize_step(&mut params, &cfg)?;
        theta = params.layers[0].as_ref().unwrap().weight.to_f64_vec();
        trace.steps.push(step_grads);
        all_samples.push(samples);
    }

    // Hindsight optimum via the accumulated normal equations.
    let (theta_star, ridge_applied) = match solve_normal_equations(&gram, &rhs) {
        Some(sol) => (sol, false),
        None => {
            let mut ridged = gram.clone();
            for (i, row) in ridged.iter_mut().enumerate() {
                row[i] += 1e-10;
            }
            let sol = solve_normal_equations(&ridged, &rhs)
                .ok_or_else(|| Error::State("normal equations unsolvable even with ridge".into()))?;
            (sol, true)
        }
    };

    let mut regret_prefix = Vec::with_capacity(horizon);
    let mut acc = 0.0;
    let mut star_total = 0.0;
    let mut nondecreasing = true;
    for (t, samples) in all_samples.iter().enumerate() {
        let inv_n = 1.0 / n as f64;
        let mut star_loss = 0.0;
        for (x, y) in samples {
            let pred: f64 = x.iter().zip(&theta_star).map(|(a, b)| a * b).sum();
            star_loss += 0.5 * (pred - y) * (pred - y) * inv_n;
        }
        star_total += star_loss;
        let prev = acc;
        acc += losses[t] - star_loss;
        if acc < prev - 1e-12 {
            nondecreasing = false;
        }
        regret_prefix.push(acc);
    }

    let diameter_inf = coord_min
        .iter()
        .zip(&coord_max)
        .map(|(lo, hi)| hi - lo)
        .fold(0.0, f64::max);
    let diameter_l2 = coord_min
        .iter()
        .zip(&coord_max)
        .map(|(lo, hi)| (hi - lo) * (hi - lo))
        .sum::<f64>()
        .sqrt();

    let regret = RegretTrace {
        losses,
        regret_prefix,
        theta_star,
        theta_star_loss_total: star_total,
        diameter_l2,
        diameter_inf,
        g_norm: trace.g_norm_bound(),
        g_inf: trace.g_inf_bound(),
        vhat_final: state.v_hat_flat(&cfg),
        ridge_applied,
        regret_nondecreasing: nondecreasing,
    };
    Ok((regret, trace))
}

fn theta_param_set(theta: &[f64]) -> Result<crate::nn::ParamSet<f64>> {
    Ok(crate::nn::ParamSet {
        layers: vec![Some(crate::nn::LayerParams {
            weight: DenseArray::from_vec(&[theta.len()], theta.to_vec())?,
            bias: None,
        })],
    })
}

fn accumulate_flat(
    state: &mut OptimizerState<f64>,
    g: &[f64],
    config: &AdamConfig,
) -> Result<()> {
    let grad = crate::nn::LayerGradient {
        layer_index: 0,
        weight: DenseArray::from_vec(&[g.len()], g.to_vec())?,
        bias: None,
    };
    state.accumulate_layer(0, &grad, config)
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordBound {
    pub coord: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub name: String,
    pub gamma: f64,
    pub pass: bool,
    pub per_coord: Vec<CoordBound>,
    /// Coordinates skipped because v_hat stayed 0 for every step.
    pub excluded: usize,
    /// Named magnitudes for diagnosis (the three bound terms, constants).
    pub terms: Vec<(String, f64)>,
    /// Whether the looser main-text constant would also pass (second
    /// inequality checker only).
    pub alt_constant_pass: Option<bool>,
    pub min_slack: f64,
}

impl BoundReport {
    fn finish(mut self) -> Self {
        self.pass = self.per_coord.iter().all(|c| c.pass);
        self.min_slack = self
            .per_coord
            .iter()
            .map(|c| c.rhs - c.lhs)
            .fold(f64::INFINITY, f64::min);
        self
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name,
            "gamma": self.gamma,
            "pass": self.pass,
            "coords_checked": self.per_coord.len(),
            "excluded": self.excluded,
            "min_slack": self.min_slack,
            "terms": self.terms,
            "alt_constant_pass": self.alt_constant_pass,
        })
    }
}

/// Checks sum_t g_{t,i}^2 / sqrt(t) <= 2 G_inf ||g_{1:T,i}||_2 per
/// coordinate, on mini-batch gradients. This is the form the standard
/// induction proof supports; the commonly printed rendering with |g|/sqrt(t)
/// on the left is not scale-invariant and fails for gradients below 1/2.
pub fn lemma1_check(trace: &GradTrace) -> Result<BoundReport> {
    if trace.n_steps() == 0 {
        return Err(Error::State("empty gradient trace".into()));
    }
    let dim = trace.dim();
    let horizon = trace.n_steps();
    let g_inf = trace.g_inf_bound();
    let minibatch: Vec<Vec<f64>> = (0..horizon).map(|t| trace.minibatch_grad(t)).collect();
    let mut per_coord = Vec::with_capacity(dim);
    for i in 0..dim {
        let lhs: f64 = (0..horizon)
            .map(|t| minibatch[t][i] * minibatch[t][i] / ((t + 1) as f64).sqrt())
            .sum();
        let col_norm = (0..horizon)
            .map(|t| minibatch[t][i] * minibatch[t][i])
            .sum::<f64>()
            .sqrt();
        let rhs = 2.0 * g_inf * col_norm;
        per_coord.push(CoordBound {
            coord: i,
            lhs,
            rhs,
            pass: lhs <= rhs + 1e-12 * rhs.max(1.0),
        });
    }
    Ok(BoundReport {
        name: "grad-sq-over-sqrt-t".into(),
        gamma: f64::NAN,
        pass: false,
        per_coord,
        excluded: 0,
        terms: vec![("g_inf".into(), g_inf)],
        alt_constant_pass: None,
        min_slack: 0.0,
    }
    .finish())
}

/// Checks sum_t m_hat_{t,i}^2 / sqrt(t v_hat_{t,i}) against the
/// micro-batch column-norm bound, with moments recomputed from the trace
/// along the accumulation path. The primary constant is
/// 2 G_inf / ((1-gamma)^2 sqrt(1-beta2)); the looser constant without the
/// G_inf/(1-gamma) factor is evaluated alongside.
pub fn lemma2_check(trace: &GradTrace, config: &AdamConfig) -> Result<BoundReport> {
    config.validate()?;
    let gamma = config.gamma();
    if gamma >= 1.0 {
        return Err(Error::Hypothesis(format!("gamma = {gamma} must be < 1")));
    }
    if trace.n_steps() == 0 {
        return Err(Error::State("empty gradient trace".into()));
    }
    let dim = trace.dim();
    let horizon = trace.n_steps();
    let n = trace.n_micro;
    let g_inf = trace.g_inf_bound();
    let (b1, b2) = (config.beta1, config.beta2);

    let appendix_const = 2.0 * g_inf / ((1.0 - gamma) * (1.0 - gamma) * (1.0 - b2).sqrt());
    let main_text_const = 2.0 / ((1.0 - gamma) * (1.0 - b2).sqrt());

    let mut per_coord = Vec::with_capacity(dim);
    let mut excluded = 0;
    let mut alt_pass = true;
    for i in 0..dim {
        let mut m = 0.0;
        let mut v = 0.0;
        let mut lhs = 0.0;
        let mut any_v = false;
        for t in 1..=horizon {
            let sum_g: f64 = (0..n).map(|b| trace.steps[t - 1][b][i]).sum();
            let sum_g2: f64 = (0..n).map(|b| trace.steps[t - 1][b][i].powi(2)).sum();
            m = b1 * m + (1.0 - b1) * sum_g;
            v = b2 * v + (1.0 - b2) * sum_g2;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            if v_hat > 0.0 {
                any_v = true;
                lhs += m_hat * m_hat / (t as f64 * v_hat).sqrt();
            }
        }
        if !any_v {
            excluded += 1;
            continue;
        }
        let col_sum: f64 = (0..n).map(|b| trace.column_norm(i, b)).sum();
        let rhs = appendix_const * col_sum;
        let alt_rhs = main_text_const * col_sum;
        if lhs > alt_rhs + 1e-12 * alt_rhs.max(1.0) {
            alt_pass = false;
        }
        per_coord.push(CoordBound {
            coord: i,
            lhs,
            rhs,
            pass: lhs <= rhs + 1e-12 * rhs.max(1.0),
        });
    }
    Ok(BoundReport {
        name: "mhat-sq-over-sqrt-tvhat".into(),
        gamma,
        pass: false,
        per_coord,
        excluded,
        terms: vec![
            ("g_inf".into(), g_inf),
            ("appendix_constant".into(), appendix_const),
            ("main_text_constant".into(), main_text_const),
        ],
        alt_constant_pass: Some(alt_pass),
        min_slack: 0.0,
    }
    .finish())
}

/// Evaluates the three-term regret bound from measured quantities and
/// asserts R(T) <= RHS. Requires lambda < 1.
pub fn theorem_bound_check(
    regret: &RegretTrace,
    trace: &GradTrace,
    config: &AdamConfig,
) -> Result<BoundReport> {
    config.validate()?;
    if config.lambda >= 1.0 {
        return Err(Error::Hypothesis(
            "theorem requires lambda < 1 (beta1 decay enabled)".into(),
        ));
    }
    let gamma = config.gamma();
    if gamma >= 1.0 {
        return Err(Error::Hypothesis(format!("gamma = {gamma} must be < 1")));
    }
    let horizon = regret.horizon();
    let dim = trace.dim();
    let n = trace.n_micro;
    let (alpha, b1, b2, lambda) = (config.alpha, config.beta1, config.beta2, config.lambda);
    let d = regret.diameter_l2;
    let d_inf = regret.diameter_inf;
    let g_inf = regret.g_inf;

    let term1 = d * d / (2.0 * alpha * (1.0 - b1))
        * regret
            .vhat_final
            .iter()
            .map(|&v| (horizon as f64 * v).sqrt())
            .sum::<f64>();
    let term2 = dim as f64 * d_inf * d_inf * g_inf * (1.0 - b2).sqrt()
        / (2.0 * alpha * (1.0 - b1) * (1.0 - lambda) * (1.0 - lambda));
    let col_sum: f64 = (0..dim)
        .map(|i| (0..n).map(|b| trace.column_norm(i, b)).sum::<f64>())
        .sum();
    let term3 = alpha * (b1 + 1.0) * g_inf / ((1.0 - b1) * (1.0 - b2).sqrt()) * col_sum;

    let lhs = regret.regret_at(horizon);
    let rhs = term1 + term2 + term3;
    Ok(BoundReport {
        name: "regret-upper-bound".into(),
        gamma,
        pass: false,
        per_coord: vec![CoordBound {
            coord: 0,
            lhs,
            rhs,
            pass: lhs <= rhs,
        }],
        excluded: 0,
        terms: vec![
            ("diameter_term".into(), term1),
            ("lambda_decay_term".into(), term2),
            ("column_norm_term".into(), term3),
        ],
        alt_constant_pass: None,
        min_slack: 0.0,
    }
    .finish())
}
