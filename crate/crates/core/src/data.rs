//! Deterministic synthetic datasets.
//!
//! Samples are a pure function of (seed, global sample index), so any
//! slice of the stream can be regenerated anywhere: the distributed
//! simulation shards by sample index without materializing a dataset.

use serde::{Deserialize, Serialize};

use crate::nn::{Batch, LayerSpec, ModelSpec, Targets};
use crate::rng::{counter_normal, counter_u64, counter_uniform_symmetric};
use crate::scalar::Scalar;
use crate::tensor::DenseArray;

const STREAM_FEATURES: u64 = 1;
const STREAM_CLASSES: u64 = 2;
const STREAM_TEACHER_W1: u64 = 10;
const STREAM_TEACHER_B1: u64 = 11;
const STREAM_TEACHER_W2: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "task")]
pub enum DatasetSpec {
    /// Binary classification: two Gaussian clouds at +-1 per coordinate.
    TwoGaussians { dim: usize, seed: u64 },
    /// Regression against a fixed random one-hidden-layer teacher net.
    TeacherRegression {
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            DatasetSpec::TwoGaussians { dim, .. } => *dim,
            DatasetSpec::TeacherRegression { in_dim, .. } => *in_dim,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            DatasetSpec::TwoGaussians { seed, .. } => *seed,
            DatasetSpec::TeacherRegression { seed, .. } => *seed,
        }
    }

    /// A small MLP suited to the task, used by the experiment drivers.
    pub fn default_model(&self, model_seed: u64, hidden: usize) -> ModelSpec {
        match self {
            DatasetSpec::TwoGaussians { dim, .. } => ModelSpec {
                layers: vec![
                    LayerSpec::linear(*dim, hidden, true),
                    LayerSpec::relu(hidden),
                    LayerSpec::linear(hidden, 2, true),
                    LayerSpec::softmax_ce_head(2),
                ],
                seed: model_seed,
            },
            DatasetSpec::TeacherRegression {
                in_dim, out_dim, ..
            } => ModelSpec {
                layers: vec![
                    LayerSpec::linear(*in_dim, hidden, true),
                    LayerSpec::relu(hidden),
                    LayerSpec::linear(hidden, *out_dim, true),
                    LayerSpec::squared_error_head(*out_dim),
                ],
                seed: model_seed,
            },
        }
    }

    /// Batch covering global sample indices [start, start + rows).
    pub fn batch<T: Scalar>(&self, start: u64, rows: usize) -> Batch<T> {
        match self {
            DatasetSpec::TwoGaussians { dim, seed } => {
                let mut x = Vec::with_capacity(rows * dim);
                let mut classes = Vec::with_capacity(rows);
                for r in 0..rows {
                    let s = start + r as u64;
                    let class = (counter_u64(*seed, STREAM_CLASSES, s) & 1) as usize;
                    let mu = if class == 0 { 1.0 } else { -1.0 };
                    for j in 0..*dim {
                        let noise = counter_normal(*seed, STREAM_FEATURES, s * *dim as u64 + j as u64);
                        x.push(T::of_f64(mu + noise));
                    }
                    classes.push(class);
                }
                Batch {
                    x: DenseArray::from_vec(&[rows, *dim], x).unwrap(),
                    targets: Targets::Classes(classes),
                }
            }
            DatasetSpec::TeacherRegression {
                in_dim,
                hidden,
                out_dim,
                seed,
            } => {
                let teacher = Teacher::new(*seed, *in_dim, *hidden, *out_dim);
                let mut x = Vec::with_capacity(rows * in_dim);
                let mut y = Vec::with_capacity(rows * out_dim);
                for r in 0..rows {
                    let s = start + r as u64;
                    let mut xi = Vec::with_capacity(*in_dim);
                    for j in 0..*in_dim {
                        xi.push(counter_normal(*seed, STREAM_FEATURES, s * *in_dim as u64 + j as u64));
                    }
                    y.extend(teacher.forward(&xi).into_iter().map(T::of_f64));
                    x.extend(xi.into_iter().map(T::of_f64));
                }
                Batch {
                    x: DenseArray::from_vec(&[rows, *in_dim], x).unwrap(),
                    targets: Targets::Values(DenseArray::from_vec(&[rows, *out_dim], y).unwrap()),
                }
            }
        }
    }
}

/// Fixed random linear-relu-linear teacher used by the regression task.
struct Teacher {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
}

impl Teacher {
    fn new(seed: u64, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        let bound1 = 1.0 / (in_dim as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        let w1 = (0..hidden * in_dim)
            .map(|k| counter_uniform_symmetric(seed, STREAM_TEACHER_W1, k as u64, bound1))
            .collect();
        let b1 = (0..hidden)
            .map(|k| counter_uniform_symmetric(seed, STREAM_TEACHER_B1, k as u64, 0.5))
            .collect();
        let w2 = (0..out_dim * hidden)
            .map(|k| counter_uniform_symmetric(seed, STREAM_TEACHER_W2, k as u64, bound2))
            .collect();
        Self {
            w1,
            b1,
            w2,
            in_dim,
            hidden,
            out_dim,
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden];
        for o in 0..self.hidden {
            let mut acc = self.b1[o];
            for i in 0..self.in_dim {
                acc += self.w1[o * self.in_dim + i] * x[i];
            }
            h[o] = acc.max(0.0);
        }
        let mut y = vec![0.0; self.out_dim];
        for o in 0..self.out_dim {
            let mut acc = 0.0;
            for i in 0..self.hidden {
                acc += self.w2[o * self.hidden + i] * h[i];
            }
            y[o] = acc;
        }
        y
    }
}
