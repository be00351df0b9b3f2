//! Adam and AdamA state machines.
//!
//! Both update paths share one accumulation kernel: the reference Adam path
//! feeds the kernel the summed mini-batch gradient, AdamA feeds it each
//! micro-batch layer gradient as it is produced. At N=1 the two paths are
//! the same floating-point op sequence, so trajectories are bit-identical.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FullGradient, LayerGradient, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    InverseSqrt,
    Cosine { end: f64, total_steps: u64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Constant
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// beta1 decay factor: beta1_t = beta1 * lambda^(t-1). 1.0 disables
    /// decay; the regret harness uses lambda < 1.
    pub lambda: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lambda: 1.0,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl AdamConfig {
    pub fn gamma(&self) -> f64 {
        self.beta1 * self.beta1 / self.beta2.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1, beta2 must be in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Config("lambda must be in (0, 1]".into()));
        }
        if self.gamma() >= 1.0 {
            return Err(Error::Config(format!(
                "beta1^2/sqrt(beta2) = {} must be < 1",
                self.gamma()
            )));
        }
        Ok(())
    }

    /// Learning rate at step `t` (1-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.alpha,
            LrSchedule::InverseSqrt => self.alpha / (t as f64).sqrt(),
            LrSchedule::Cosine { end, total_steps } => {
                let frac = (t.min(total_steps) as f64) / (total_steps.max(1) as f64);
                end + 0.5 * (self.alpha - end) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    Adam,
    AdamA,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentGroup<T: Scalar> {
    pub m: DenseArray<T>,
    pub v: DenseArray<T>,
}

/// Per-model optimizer state: one moment group per parameter group, in
/// layer order (weight before bias), plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    groups: Vec<MomentGroup<T>>,
    /// layer_index -> (weight group, optional bias group)
    layer_map: Vec<Option<(usize, Option<usize>)>>,
    t: u64,
    in_step: bool,
    /// Effective beta1 for the step currently open, set by begin_step.
    step_beta1: f64,
}

impl<T: Scalar> OptimizerState<T> {
    /// Raw init from parameter-group shapes: zero moments, t = 0. Group i
    /// is addressed as layer i's weight.
    pub fn init_state(param_shapes: &[Vec<usize>]) -> Result<Self> {
        if param_shapes.is_empty() {
            return Err(Error::State("no parameter shapes".into()));
        }
        let groups = param_shapes
            .iter()
            .map(|s| MomentGroup {
                m: DenseArray::zeros(s),
                v: DenseArray::zeros(s),
            })
            .collect();
        let layer_map = (0..param_shapes.len()).map(|i| Some((i, None))).collect();
        Ok(Self {
            groups,
            layer_map,
            t: 0,
            in_step: false,
            step_beta1: 0.0,
        })
    }

    /// Init with the layer structure of a model's parameter set.
    pub fn for_model(params: &ParamSet<T>) -> Result<Self> {
        let mut groups = Vec::new();
        let mut layer_map = Vec::with_capacity(params.layers.len());
        for lp in &params.layers {
            match lp {
                None => layer_map.push(None),
                Some(p) => {
                    let w_idx = groups.len();
                    groups.push(MomentGroup {
                        m: DenseArray::zeros(p.weight.shape()),
                        v: DenseArray::zeros(p.weight.shape()),
                    });
                    let b_idx = p.bias.as_ref().map(|b| {
                        groups.push(MomentGroup {
                            m: DenseArray::zeros(b.shape()),
                            v: DenseArray::zeros(b.shape()),
                        });
                        groups.len() - 1
                    });
                    layer_map.push(Some((w_idx, b_idx)));
                }
            }
        }
        if groups.is_empty() {
            return Err(Error::State("model has no parameters".into()));
        }
        Ok(Self {
            groups,
            layer_map,
            t: 0,
            in_step: false,
            step_beta1: 0.0,
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn in_step(&self) -> bool {
        self.in_step
    }

    pub fn groups(&self) -> &[MomentGroup<T>] {
        &self.groups
    }

    pub fn byte_size(&self) -> u64 {
        self.groups
            .iter()
            .map(|g| g.m.byte_size() + g.v.byte_size())
            .sum()
    }

    /// Opens a step: m scaled by the (possibly lambda-decayed) beta1, v
    /// scaled by worker_scale * beta2. The worker scale implements the
    /// distributed pre-scaling; single-device callers pass 1.
    pub fn begin_step(&mut self, config: &AdamConfig, worker_scale: usize) -> Result<()> {
        if self.in_step {
            return Err(Error::State("begin_step while a step is already open".into()));
        }
        if worker_scale == 0 {
            return Err(Error::State("worker_scale must be >= 1".into()));
        }
        // beta1_t = beta1 * lambda^(t-1) with t the step being opened.
        self.step_beta1 = config.beta1 * config.lambda.powi(self.t as i32);
        let b1 = T::of_f64(self.step_beta1);
        let vb2 = T::of_f64(worker_scale as f64 * config.beta2);
        for g in &mut self.groups {
            g.m.scale(b1);
            g.v.scale(vb2);
        }
        self.in_step = true;
        Ok(())
    }

    fn accumulate_group(&mut self, group: usize, g: &DenseArray<T>, config: &AdamConfig) -> Result<()> {
        if !g.all_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let one_minus_b1 = T::of_f64(1.0 - self.step_beta1);
        let one_minus_b2 = T::of_f64(1.0 - config.beta2);
        let grp = &mut self.groups[group];
        grp.m.axpy(one_minus_b1, g)?;
        grp.v.axpy_sq(one_minus_b2, g)?;
        Ok(())
    }

    /// Folds one layer's micro-batch gradient into the moments:
    /// m += (1-beta1) g, v += (1-beta2) g^2. The caller already applied the
    /// 1/N micro-batch scale to g and may release g immediately after.
    pub fn accumulate_layer(
        &mut self,
        layer_index: usize,
        g: &LayerGradient<T>,
        config: &AdamConfig,
    ) -> Result<()> {
        if !self.in_step {
            return Err(Error::State("accumulate_layer outside an open step".into()));
        }
        let (w_idx, b_idx) = self
            .layer_map
            .get(layer_index)
            .copied()
            .flatten()
            .ok_or_else(|| Error::State(format!("layer {layer_index} has no moment groups")))?;
        self.accumulate_group(w_idx, &g.weight, config)?;
        if let Some(gb) = &g.bias {
            let b_idx =
                b_idx.ok_or_else(|| Error::State(format!("layer {layer_index} has no bias group")))?;
            self.accumulate_group(b_idx, gb, config)?;
        }
        Ok(())
    }

    /// Reference Adam path: folds the full summed mini-batch gradient in
    /// one call, so v receives (sum g)^2. Uses the same kernel as
    /// accumulate_layer to keep the op order identical.
    pub fn accumulate_adam_minibatch(
        &mut self,
        summed: &FullGradient<T>,
        config: &AdamConfig,
    ) -> Result<()> {
        if !self.in_step {
            return Err(Error::State("accumulate outside an open step".into()));
        }
        for g in summed.layers.iter().flatten() {
            self.accumulate_layer(g.layer_index, g, config)?;
        }
        Ok(())
    }

    /// Closes the step: bumps t, applies the bias-corrected update to the
    /// parameters in place with the scheduled learning rate.
    pub fn finalize_step(&mut self, params: &mut ParamSet<T>, config: &AdamConfig) -> Result<()> {
        if !self.in_step {
            return Err(Error::State("finalize_step without begin_step".into()));
        }
        self.t += 1;
        let t = self.t;
        let lr = config.lr_at(t);
        let bc1 = T::of_f64(1.0 - config.beta1.powi(t as i32));
        let bc2 = T::of_f64(1.0 - config.beta2.powi(t as i32));
        let alpha = T::of_f64(lr);
        let eps = T::of_f64(config.epsilon);

        let mut group = 0;
        for lp in params.layers.iter_mut().flatten() {
            for arr in std::iter::once(&mut lp.weight).chain(lp.bias.iter_mut()) {
                let grp = &self.groups[group];
                for (k, p) in arr.data_mut().iter_mut().enumerate() {
                    let m_hat = grp.m.data()[k] / bc1;
                    let v_hat = grp.v.data()[k] / bc2;
                    *p = *p - alpha * m_hat / (v_hat.sqrt() + eps);
                }
                group += 1;
            }
        }
        if group != self.groups.len() {
            return Err(Error::State("params do not match optimizer groups".into()));
        }
        self.in_step = false;
        Ok(())
    }

    /// Bias-corrected second moments at the current t, flattened over all
    /// groups in order.
    pub fn v_hat_flat(&self, config: &AdamConfig) -> Vec<f64> {
        let bc2 = 1.0 - config.beta2.powi(self.t as i32);
        self.groups
            .iter()
            .flat_map(|g| g.v.data().iter().map(move |x| x.as_f64() / bc2))
            .collect()
    }

    pub fn m_flat(&self) -> Vec<f64> {
        self.groups
            .iter()
            .flat_map(|g| g.m.data().iter().map(|x| x.as_f64()))
            .collect()
    }

    pub fn v_flat(&self) -> Vec<f64> {
        self.groups
            .iter()
            .flat_map(|g| g.v.data().iter().map(|x| x.as_f64()))
            .collect()
    }

    pub fn min_v(&self) -> f64 {
        self.groups
            .iter()
            .flat_map(|g| g.v.data().iter().map(|x| x.as_f64()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Overwrites the moment arrays with externally reduced values
    /// (distributed all-reduce writes back through this).
    pub fn set_moments(&mut self, m: &[Vec<f64>], v: &[Vec<f64>]) -> Result<()> {
        if m.len() != self.groups.len() || v.len() != self.groups.len() {
            return Err(Error::State("reduced moment group count mismatch".into()));
        }
        for (g, (mm, vv)) in self.groups.iter_mut().zip(m.iter().zip(v)) {
            if mm.len() != g.m.len() || vv.len() != g.v.len() {
                return Err(Error::State("reduced moment length mismatch".into()));
            }
            for (dst, src) in g.m.data_mut().iter_mut().zip(mm) {
                *dst = T::of_f64(*src);
            }
            for (dst, src) in g.v.data_mut().iter_mut().zip(vv) {
                *dst = T::of_f64(*src);
            }
        }
        Ok(())
    }
}

/// Elementwise Cauchy-Schwarz dominance of the two v-increment paths:
/// true iff adam_inc <= n * adama_inc + 1e-12 * scale everywhere.
pub fn increment_dominance_check(
    adam_inc: &[f64],
    adama_inc: &[f64],
    n: usize,
) -> Result<bool> {
    if adam_inc.len() != adama_inc.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![adam_inc.len()],
            got: vec![adama_inc.len()],
        });
    }
    let nf = n as f64;
    Ok(adam_inc.iter().zip(adama_inc).all(|(&a, &b)| {
        let scale = a.abs().max(nf * b.abs()).max(1.0);
        a <= nf * b + 1e-12 * scale
    }))
}

/// Textbook Adam kept separate from the shared-kernel path, as a
/// tolerance-based cross-check with its own op ordering.
#[derive(Debug, Clone)]
pub struct TextbookAdam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl TextbookAdam {
    pub fn new(param_shapes: &[Vec<usize>]) -> Self {
        let m = param_shapes
            .iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { m, v, t: 0 }
    }

    /// One full Adam step on flattened parameter groups with the summed
    /// mini-batch gradient.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], config: &AdamConfig) {
        self.t += 1;
        let t = self.t;
        let lr = config.lr_at(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            for k in 0..p.len() {
                m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
                v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
                let m_hat = m[k] / (1.0 - config.beta1.powi(t as i32));
                let v_hat = v[k] / (1.0 - config.beta2.powi(t as i32));
                p[k] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
            }
        }
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"ADAMAOS1";

/// Writes the state as little-endian 64-bit floats with a shapes+t header.
pub fn write_snapshot<T: Scalar, W: Write>(state: &OptimizerState<T>, w: &mut W) -> Result<()> {
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&state.t.to_le_bytes())?;
    w.write_all(&(state.groups.len() as u64).to_le_bytes())?;
    for g in &state.groups {
        w.write_all(&(g.m.shape().len() as u64).to_le_bytes())?;
        for &d in g.m.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for g in &state.groups {
        for x in g.m.data() {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    for g in &state.groups {
        for x in g.v.data() {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_snapshot<T: Scalar, R: Read>(r: &mut R) -> Result<OptimizerState<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let t = read_u64(r)?;
    let n_groups = read_u64(r)? as usize;
    if n_groups == 0 || n_groups > 1 << 20 {
        return Err(Error::Snapshot(format!("implausible group count {n_groups}")));
    }
    let mut shapes = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let ndim = read_u64(r)? as usize;
        if ndim > 8 {
            return Err(Error::Snapshot(format!("implausible ndim {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        shapes.push(shape);
    }
    let mut state = OptimizerState::<T>::init_state(&shapes)?;
    state.t = t;
    let mut f64buf = [0u8; 8];
    for g in &mut state.groups {
        for x in g.m.data_mut() {
            r.read_exact(&mut f64buf)?;
            *x = T::of_f64(f64::from_le_bytes(f64buf));
        }
    }
    for g in &mut state.groups {
        for x in g.v.data_mut() {
            r.read_exact(&mut f64buf)?;
            *x = T::of_f64(f64::from_le_bytes(f64buf));
        }
    }
    Ok(state)
}
