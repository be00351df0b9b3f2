//! Minimal dense MLP stack with a layer-by-layer reverse pass.
//!
//! The backward pass hands each layer's gradient to a visitor and releases
//! the buffer immediately after the visitor returns, which is what lets the
//! training pipeline cap gradient memory at the largest layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{MemCategory, MemoryLedger};
use crate::rng::counter_uniform_symmetric;
use crate::scalar::Scalar;
use crate::tensor::DenseArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Linear,
    Relu,
    SoftmaxCrossEntropyHead,
    SquaredErrorHead,
}

impl LayerKind {
    pub fn is_head(self) -> bool {
        matches!(
            self,
            LayerKind::SoftmaxCrossEntropyHead | LayerKind::SquaredErrorHead
        )
    }

    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Linear)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn linear(in_dim: usize, out_dim: usize, has_bias: bool) -> Self {
        Self {
            kind: LayerKind::Linear,
            in_dim,
            out_dim,
            has_bias,
        }
    }

    pub fn relu(dim: usize) -> Self {
        Self {
            kind: LayerKind::Relu,
            in_dim: dim,
            out_dim: dim,
            has_bias: false,
        }
    }

    pub fn softmax_ce_head(dim: usize) -> Self {
        Self {
            kind: LayerKind::SoftmaxCrossEntropyHead,
            in_dim: dim,
            out_dim: dim,
            has_bias: false,
        }
    }

    pub fn squared_error_head(dim: usize) -> Self {
        Self {
            kind: LayerKind::SquaredErrorHead,
            in_dim: dim,
            out_dim: dim,
            has_bias: false,
        }
    }

    pub fn param_count(&self) -> usize {
        if self.kind.has_params() {
            self.in_dim * self.out_dim + if self.has_bias { self.out_dim } else { 0 }
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Spec("model must have at least one layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Spec(format!("layer {i}: zero dimension")));
            }
            if l.kind == LayerKind::Relu && l.in_dim != l.out_dim {
                return Err(Error::Spec(format!("layer {i}: relu requires in_dim == out_dim")));
            }
            if l.kind.is_head() {
                if i != self.layers.len() - 1 {
                    return Err(Error::Spec(format!("layer {i}: head must be the last layer")));
                }
                if l.in_dim != l.out_dim {
                    return Err(Error::Spec(format!("layer {i}: head requires in_dim == out_dim")));
                }
            }
            if i > 0 && self.layers[i - 1].out_dim != l.in_dim {
                return Err(Error::Spec(format!(
                    "layer {} out_dim {} incompatible with layer {} in_dim {}",
                    i - 1,
                    self.layers[i - 1].out_dim,
                    i,
                    l.in_dim
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    /// Output dimension of the stack before the head (== head dim when a
    /// head is present).
    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn total_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Scalar> {
    /// Row-major [out_dim, in_dim].
    pub weight: DenseArray<T>,
    pub bias: Option<DenseArray<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn byte_size(&self) -> u64 {
        self.weight.byte_size() + self.bias.as_ref().map_or(0, |b| b.byte_size())
    }
}

/// Parameters for a model, aligned with `ModelSpec::layers` (None for
/// parameterless layers).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn total_param_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|l| l.param_count())
            .sum()
    }

    pub fn total_byte_size(&self) -> u64 {
        self.layers.iter().flatten().map(|l| l.byte_size()).sum()
    }

    pub fn max_layer_byte_size(&self) -> u64 {
        self.layers
            .iter()
            .flatten()
            .map(|l| l.byte_size())
            .max()
            .unwrap_or(0)
    }

    /// Shapes of every parameter group in layer order, weights before bias.
    pub fn group_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for l in self.layers.iter().flatten() {
            shapes.push(l.weight.shape().to_vec());
            if let Some(b) = &l.bias {
                shapes.push(b.shape().to_vec());
            }
        }
        shapes
    }

    pub fn flatten_f64(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.layers.iter().flatten() {
            out.extend(l.weight.to_f64_vec());
            if let Some(b) = &l.bias {
                out.extend(b.to_f64_vec());
            }
        }
        out
    }
}

/// Deterministic init: weights uniform(-1/sqrt(in_dim), 1/sqrt(in_dim)) from
/// the counter RNG keyed on (seed, layer_index), biases zero.
pub fn init_params<T: Scalar>(spec: &ModelSpec) -> Result<ParamSet<T>> {
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (idx, l) in spec.layers.iter().enumerate() {
        if !l.kind.has_params() {
            layers.push(None);
            continue;
        }
        let bound = 1.0 / (l.in_dim as f64).sqrt();
        let mut w = vec![T::zero(); l.out_dim * l.in_dim];
        for (k, x) in w.iter_mut().enumerate() {
            *x = T::of_f64(counter_uniform_symmetric(spec.seed, idx as u64, k as u64, bound));
        }
        let weight = DenseArray::from_vec(&[l.out_dim, l.in_dim], w)?;
        let bias = if l.has_bias {
            Some(DenseArray::zeros(&[l.out_dim]))
        } else {
            None
        };
        layers.push(Some(LayerParams { weight, bias }));
    }
    Ok(ParamSet { layers })
}

#[derive(Debug, Clone)]
pub enum Targets<T: Scalar> {
    /// Class index per row, for the softmax cross-entropy head.
    Classes(Vec<usize>),
    /// Target values per row, for the squared-error head.
    Values(DenseArray<T>),
}

#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    /// [rows, in_dim]
    pub x: DenseArray<T>,
    pub targets: Targets<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn rows(&self) -> usize {
        self.x.shape()[0]
    }
}

/// Activations retained for the backward pass. `outputs[l]` is the output
/// of layer `l` for every non-head layer; each buffer is released during
/// backward once no longer needed.
pub struct ForwardCache<T: Scalar> {
    outputs: Vec<Option<DenseArray<T>>>,
    batch_rows: usize,
    targets: Targets<T>,
    /// Head input (== outputs of the last non-head layer, kept by clone-free
    /// index rather than copy).
    pub loss: T,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn activation_bytes(&self) -> u64 {
        self.outputs
            .iter()
            .flatten()
            .map(|a| a.byte_size())
            .sum()
    }
}

fn linear_forward<T: Scalar>(
    x: &DenseArray<T>,
    p: &LayerParams<T>,
    in_dim: usize,
    out_dim: usize,
) -> DenseArray<T> {
    let rows = x.shape()[0];
    let mut y = vec![T::zero(); rows * out_dim];
    let xd = x.data();
    let wd = p.weight.data();
    for r in 0..rows {
        for o in 0..out_dim {
            let mut acc = T::zero();
            for i in 0..in_dim {
                acc = acc + xd[r * in_dim + i] * wd[o * in_dim + i];
            }
            if let Some(b) = &p.bias {
                acc = acc + b.data()[o];
            }
            y[r * out_dim + o] = acc;
        }
    }
    DenseArray::from_vec(&[rows, out_dim], y).unwrap()
}

fn head_loss<T: Scalar>(kind: LayerKind, z: &DenseArray<T>, targets: &Targets<T>) -> Result<T> {
    let rows = z.shape()[0];
    let dim = z.shape()[1];
    let inv_rows = T::of_f64(1.0 / rows as f64);
    match (kind, targets) {
        (LayerKind::SoftmaxCrossEntropyHead, Targets::Classes(classes)) => {
            if classes.len() != rows {
                return Err(Error::DimMismatch("class targets vs batch rows".into()));
            }
            let mut loss = T::zero();
            for r in 0..rows {
                let row = &z.data()[r * dim..(r + 1) * dim];
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let logsum = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                let y = classes[r];
                if y >= dim {
                    return Err(Error::DimMismatch(format!("class {y} out of range {dim}")));
                }
                loss += logsum - row[y];
            }
            Ok(loss * inv_rows)
        }
        (LayerKind::SquaredErrorHead, Targets::Values(yv)) => {
            if yv.shape() != z.shape() {
                return Err(Error::ShapeMismatch {
                    expected: z.shape().to_vec(),
                    got: yv.shape().to_vec(),
                });
            }
            let half = T::of_f64(0.5);
            let mut loss = T::zero();
            for (a, b) in z.data().iter().zip(yv.data()) {
                let d = *a - *b;
                loss += half * d * d;
            }
            Ok(loss * inv_rows)
        }
        _ => Err(Error::Spec("head kind does not match target kind".into())),
    }
}

/// Gradient of the head loss w.r.t. its input, scaled by `scale`.
fn head_grad<T: Scalar>(
    kind: LayerKind,
    z: &DenseArray<T>,
    targets: &Targets<T>,
    scale: T,
) -> DenseArray<T> {
    let rows = z.shape()[0];
    let dim = z.shape()[1];
    let factor = scale * T::of_f64(1.0 / rows as f64);
    let mut dz = vec![T::zero(); rows * dim];
    match (kind, targets) {
        (LayerKind::SoftmaxCrossEntropyHead, Targets::Classes(classes)) => {
            for r in 0..rows {
                let row = &z.data()[r * dim..(r + 1) * dim];
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
                for o in 0..dim {
                    let p = (row[o] - max).exp() / sum;
                    let ind = if classes[r] == o { T::one() } else { T::zero() };
                    dz[r * dim + o] = (p - ind) * factor;
                }
            }
        }
        (LayerKind::SquaredErrorHead, Targets::Values(yv)) => {
            for (k, d) in dz.iter_mut().enumerate() {
                *d = (z.data()[k] - yv.data()[k]) * factor;
            }
        }
        _ => unreachable!("validated in head_loss"),
    }
    DenseArray::from_vec(&[rows, dim], dz).unwrap()
}

/// Runs the model forward. Returns the mean loss over the batch and the
/// activation cache. When a ledger is supplied, every retained activation
/// buffer is recorded as an allocation.
pub fn forward<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    batch: &Batch<T>,
    mut ledger: Option<&mut MemoryLedger>,
) -> Result<(T, ForwardCache<T>)> {
    spec.validate()?;
    if params.layers.len() != spec.layers.len() {
        return Err(Error::Spec("params do not match spec layer count".into()));
    }
    if batch.x.shape().len() != 2 || batch.x.shape()[1] != spec.input_dim() {
        return Err(Error::DimMismatch(format!(
            "batch features {:?} vs model input dim {}",
            batch.x.shape(),
            spec.input_dim()
        )));
    }
    if !batch.x.all_finite() {
        return Err(Error::NonFinite("batch input"));
    }

    let n_layers = spec.layers.len();
    let mut outputs: Vec<Option<DenseArray<T>>> = vec![None; n_layers];
    let mut loss = T::zero();

    // `current` borrows conceptually: we keep the running activation as an
    // owned array and stash a copy reference into outputs via move.
    let mut current = batch.x.clone();
    for (idx, l) in spec.layers.iter().enumerate() {
        match l.kind {
            LayerKind::Linear => {
                let p = params.layers[idx]
                    .as_ref()
                    .ok_or_else(|| Error::Spec(format!("missing params for layer {idx}")))?;
                let y = linear_forward(&current, p, l.in_dim, l.out_dim);
                if let Some(lg) = ledger.as_deref_mut() {
                    lg.alloc(MemCategory::Activations, y.byte_size());
                }
                outputs[idx] = Some(y.clone());
                current = y;
            }
            LayerKind::Relu => {
                let mut y = current.clone();
                for v in y.data_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
                if let Some(lg) = ledger.as_deref_mut() {
                    lg.alloc(MemCategory::Activations, y.byte_size());
                }
                outputs[idx] = Some(y.clone());
                current = y;
            }
            LayerKind::SoftmaxCrossEntropyHead | LayerKind::SquaredErrorHead => {
                loss = head_loss(l.kind, &current, &batch.targets)?;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("forward loss"));
    }
    Ok((
        loss,
        ForwardCache {
            outputs,
            batch_rows: batch.rows(),
            targets: batch.targets.clone(),
            loss,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct LayerGradient<T: Scalar> {
    pub layer_index: usize,
    pub weight: DenseArray<T>,
    pub bias: Option<DenseArray<T>>,
}

impl<T: Scalar> LayerGradient<T> {
    pub fn byte_size(&self) -> u64 {
        self.weight.byte_size() + self.bias.as_ref().map_or(0, |b| b.byte_size())
    }
}

/// Whether backward should account per-layer gradient buffers in the
/// ledger. The gradient-accumulation baseline writes into a persistent
/// full-model buffer and accounts it itself, so it turns this off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradAccounting {
    PerLayer,
    External,
}

/// Reverse pass over the cached forward. The visitor receives each
/// parameterized layer's gradient in reverse layer order; the gradient
/// buffer and the activations that fed it are released (ledger-visible)
/// right after the visitor returns.
///
/// The gradient seed is scaled by `grad_scale` (the 1/N micro-batch factor
/// in the training pipelines).
pub fn backward_layerwise<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    batch: &Batch<T>,
    mut cache: ForwardCache<T>,
    grad_scale: T,
    mut ledger: Option<&mut MemoryLedger>,
    accounting: GradAccounting,
    visitor: &mut dyn FnMut(LayerGradient<T>) -> Result<()>,
) -> Result<()> {
    if cache.outputs.len() != spec.layers.len() {
        return Err(Error::Spec("cache does not match spec layer count".into()));
    }
    if cache.batch_rows != batch.rows() {
        return Err(Error::Spec("cache does not match batch".into()));
    }
    let n_layers = spec.layers.len();
    let head_idx = n_layers - 1;
    let head = spec.layers[head_idx];
    if !head.kind.is_head() {
        return Err(Error::Spec("last layer must be a head".into()));
    }

    // Input to layer `l`: output of layer l-1, or the batch for l == 0.
    let take_input = |cache: &mut ForwardCache<T>, l: usize| -> DenseArray<T> {
        if l == 0 {
            batch.x.clone()
        } else {
            cache.outputs[l - 1]
                .take()
                .expect("activation consumed out of order")
        }
    };

    let head_input = take_input(&mut cache, head_idx);
    let mut dz = head_grad(head.kind, &head_input, &cache.targets, grad_scale);
    // Head input no longer needed.
    if head_idx > 0 {
        if let Some(lg) = ledger.as_deref_mut() {
            lg.free(MemCategory::Activations, head_input.byte_size())?;
        }
    }
    drop(head_input);

    for idx in (0..head_idx).rev() {
        let l = spec.layers[idx];
        let input = take_input(&mut cache, idx);
        match l.kind {
            LayerKind::Relu => {
                // Subgradient 0 at the kink.
                for (d, x) in dz.data_mut().iter_mut().zip(input.data()) {
                    if *x <= T::zero() {
                        *d = T::zero();
                    }
                }
            }
            LayerKind::Linear => {
                let p = params.layers[idx]
                    .as_ref()
                    .ok_or_else(|| Error::Spec(format!("missing params for layer {idx}")))?;
                let rows = cache.batch_rows;
                let (in_dim, out_dim) = (l.in_dim, l.out_dim);
                let mut dw = vec![T::zero(); out_dim * in_dim];
                for r in 0..rows {
                    for o in 0..out_dim {
                        let g = dz.data()[r * out_dim + o];
                        for i in 0..in_dim {
                            dw[o * in_dim + i] += g * input.data()[r * in_dim + i];
                        }
                    }
                }
                let dbias = if p.bias.is_some() {
                    let mut db = vec![T::zero(); out_dim];
                    for r in 0..rows {
                        for o in 0..out_dim {
                            db[o] += dz.data()[r * out_dim + o];
                        }
                    }
                    Some(DenseArray::from_vec(&[out_dim], db)?)
                } else {
                    None
                };
                let grad = LayerGradient {
                    layer_index: idx,
                    weight: DenseArray::from_vec(&[out_dim, in_dim], dw)?,
                    bias: dbias,
                };
                if !grad.weight.all_finite() {
                    return Err(Error::NonFinite("layer gradient"));
                }
                let grad_bytes = grad.byte_size();
                if accounting == GradAccounting::PerLayer {
                    if let Some(lg) = ledger.as_deref_mut() {
                        lg.alloc(MemCategory::Gradients, grad_bytes);
                    }
                }
                visitor(grad)?;
                if accounting == GradAccounting::PerLayer {
                    if let Some(lg) = ledger.as_deref_mut() {
                        lg.free(MemCategory::Gradients, grad_bytes)?;
                    }
                }

                // Propagate to the layer input (skip for the first layer).
                if idx > 0 {
                    let mut dx = vec![T::zero(); rows * in_dim];
                    let wd = p.weight.data();
                    for r in 0..rows {
                        for o in 0..out_dim {
                            let g = dz.data()[r * out_dim + o];
                            for i in 0..in_dim {
                                dx[r * in_dim + i] += g * wd[o * in_dim + i];
                            }
                        }
                    }
                    dz = DenseArray::from_vec(&[rows, in_dim], dx)?;
                }
            }
            _ => return Err(Error::Spec("head layer not last".into())),
        }
        // The input activation for this layer has been consumed.
        if idx > 0 {
            if let Some(lg) = ledger.as_deref_mut() {
                lg.free(MemCategory::Activations, input.byte_size())?;
            }
        }
    }
    Ok(())
}

/// Accumulated full-model gradient, one array slot per parameter group in
/// layer order. Shared by the finite-difference oracle and the GA pipeline.
#[derive(Debug, Clone)]
pub struct FullGradient<T: Scalar> {
    pub layers: Vec<Option<LayerGradient<T>>>,
}

impl<T: Scalar> FullGradient<T> {
    pub fn zeros_like(spec: &ModelSpec, params: &ParamSet<T>) -> Self {
        let layers = params
            .layers
            .iter()
            .enumerate()
            .map(|(idx, p)| {
                p.as_ref().map(|p| LayerGradient {
                    layer_index: idx,
                    weight: DenseArray::zeros(p.weight.shape()),
                    bias: p.bias.as_ref().map(|b| DenseArray::zeros(b.shape())),
                })
            })
            .collect();
        let _ = spec;
        Self { layers }
    }

    pub fn add(&mut self, g: &LayerGradient<T>) -> Result<()> {
        let slot = self.layers[g.layer_index]
            .as_mut()
            .ok_or_else(|| Error::Spec("gradient for parameterless layer".into()))?;
        slot.weight.axpy(T::one(), &g.weight)?;
        if let (Some(b), Some(gb)) = (&mut slot.bias, &g.bias) {
            b.axpy(T::one(), gb)?;
        }
        Ok(())
    }

    pub fn flatten_f64(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.layers.iter().flatten() {
            out.extend(g.weight.to_f64_vec());
            if let Some(b) = &g.bias {
                out.extend(b.to_f64_vec());
            }
        }
        out
    }
}

/// Full analytic gradient of the mean batch loss, via the layer-wise pass.
pub fn full_gradient<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    batch: &Batch<T>,
) -> Result<FullGradient<T>> {
    let (_, cache) = forward(spec, params, batch, None)?;
    let mut acc = FullGradient::zeros_like(spec, params);
    backward_layerwise(
        spec,
        params,
        batch,
        cache,
        T::one(),
        None,
        GradAccounting::External,
        &mut |g| acc.add(&g),
    )?;
    Ok(acc)
}

/// Central finite-difference gradient check over every parameter
/// coordinate. Returns the max relative error
/// |analytic - numeric| / max(1, |numeric|). Intended for 64-bit mode.
pub fn grad_check(
    spec: &ModelSpec,
    params: &ParamSet<f64>,
    batch: &Batch<f64>,
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let analytic = full_gradient(spec, params, batch)?.flatten_f64();
    let mut work = params.clone();
    let mut max_err: f64 = 0.0;
    let mut flat_idx = 0;

    // Walk parameter coordinates in the same order as flatten_f64.
    for li in 0..work.layers.len() {
        let Some(lp) = work.layers[li].as_ref() else {
            continue;
        };
        let n_w = lp.weight.len();
        let n_b = lp.bias.as_ref().map_or(0, |b| b.len());
        for k in 0..n_w + n_b {
            let read = |ps: &ParamSet<f64>| {
                let lp = ps.layers[li].as_ref().unwrap();
                if k < n_w {
                    lp.weight.data()[k]
                } else {
                    lp.bias.as_ref().unwrap().data()[k - n_w]
                }
            };
            let write = |ps: &mut ParamSet<f64>, v: f64| {
                let lp = ps.layers[li].as_mut().unwrap();
                if k < n_w {
                    lp.weight.data_mut()[k] = v;
                } else {
                    lp.bias.as_mut().unwrap().data_mut()[k - n_w] = v;
                }
            };
            let orig = read(&work);
            write(&mut work, orig + h);
            let (lp1, _) = forward(spec, &work, batch, None)?;
            write(&mut work, orig - h);
            let (lm1, _) = forward(spec, &work, batch, None)?;
            write(&mut work, orig);
            let numeric = (lp1 - lm1) / (2.0 * h);
            let err = (analytic[flat_idx] - numeric).abs() / numeric.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
            flat_idx += 1;
        }
    }
    Ok(max_err)
}
