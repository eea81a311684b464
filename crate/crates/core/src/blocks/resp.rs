//! Batch normalisation and the residual MLP block used for global feature
//! processing.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::linear::{relu, relu_backward, Linear};
use crate::error::{ensure_arg, Error, Result};
use crate::params::{join, Params};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with running statistics.
    Eval,
}

/// Running mean and variance per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Mean 0, variance 1.
    pub fn unit(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }
}

/// Statistics of one training-mode batch, to be folded into the running
/// estimate by the caller. `var` is the unbiased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-feature batch normalisation over the rows of a `rows × C` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    /// Absent until initialised or trained; evaluation mode needs it.
    pub running: Option<RunningStats>,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Array2<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode) -> Result<(Array2<f64>, BatchNormCache, Option<BatchStats>)> {
        let c = self.channels();
        ensure_arg!(x.ncols() == c, "batch norm expects {c} features, got {}", x.ncols());
        let rows = x.nrows();
        let (mean, var, stats) = match mode {
            Mode::Train => {
                ensure_arg!(rows > 0, "batch norm needs at least one row in training mode");
                let mean = x.mean_axis(Axis(0)).expect("nonempty").to_vec();
                let mut var = vec![0.0; c];
                for row in x.rows() {
                    for ((v, &xv), &m) in var.iter_mut().zip(row.iter()).zip(&mean) {
                        *v += (xv - m) * (xv - m);
                    }
                }
                let n = rows as f64;
                let unbiased = var.iter().map(|v| if rows > 1 { v / (n - 1.0) } else { 0.0 }).collect();
                var.iter_mut().for_each(|v| *v /= n);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => {
                let r = self
                    .running
                    .as_ref()
                    .ok_or_else(|| Error::Usage("batch norm has no running statistics for evaluation mode".into()))?;
                (r.mean.clone(), r.var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut normalized = x.to_owned();
        for mut row in normalized.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let mut y = normalized.clone();
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.gamma[j] * *v + self.beta[j];
            }
        }
        Ok((
            y,
            BatchNormCache {
                normalized,
                inv_std,
                mode,
            },
            stats,
        ))
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: &Array2<f64>) -> (Array2<f64>, BatchNorm) {
        let c = self.channels();
        let n = dy.nrows() as f64;
        let mut grad = BatchNorm {
            gamma: vec![0.0; c],
            beta: vec![0.0; c],
            running: None,
        };
        let mut dn = dy.clone();
        for (mut drow, nrow) in dn.rows_mut().into_iter().zip(cache.normalized.rows()) {
            for j in 0..c {
                grad.gamma[j] += drow[j] * nrow[j];
                grad.beta[j] += drow[j];
                drow[j] *= self.gamma[j];
            }
        }
        let dx = match cache.mode {
            Mode::Eval => {
                let mut dx = dn;
                for mut row in dx.rows_mut() {
                    row.iter_mut().zip(&cache.inv_std).for_each(|(v, s)| *v *= s);
                }
                dx
            }
            Mode::Train => {
                let sum_dn = dn.sum_axis(Axis(0));
                let sum_dn_n = (&dn * &cache.normalized).sum_axis(Axis(0));
                let mut dx = dn;
                for (mut row, nrow) in dx.rows_mut().into_iter().zip(cache.normalized.rows()) {
                    for j in 0..c {
                        row[j] = cache.inv_std[j] / n * (n * row[j] - sum_dn[j] - nrow[j] * sum_dn_n[j]);
                    }
                }
                dx
            }
        };
        (dx, grad)
    }

    /// Exponential moving average update with the configured momentum.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let r = self.running.get_or_insert_with(|| RunningStats::unit(stats.mean.len()));
        for j in 0..stats.mean.len() {
            r.mean[j] = (1.0 - BN_MOMENTUM) * r.mean[j] + BN_MOMENTUM * stats.mean[j];
            r.var[j] = (1.0 - BN_MOMENTUM) * r.var[j] + BN_MOMENTUM * stats.var[j];
        }
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        if let Some(r) = &self.running {
            f(&join(prefix, "running_mean"), &r.mean);
            f(&join(prefix, "running_var"), &r.var);
        }
    }

    pub fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        if let Some(r) = &mut self.running {
            f(&join(prefix, "running_mean"), &mut r.mean);
            f(&join(prefix, "running_var"), &mut r.var);
        }
    }
}

impl Params for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// `y = x + fc2(relu(bn(fc1(x))))` on each row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResPBlock {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct ResPCache {
    x: Array2<f64>,
    bn: BatchNormCache,
    pre_relu: Array2<f64>,
    hidden: Array2<f64>,
}

impl ResPCache {
    pub(crate) fn kink_pattern(&self, out: &mut Vec<bool>) {
        out.extend(self.pre_relu.iter().map(|v| *v > 0.0));
    }
}

impl ResPBlock {
    pub fn new(c: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(c, c, rng),
            bn: BatchNorm::new(c),
            fc2: Linear::new(c, c, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode) -> Result<(Array2<f64>, ResPCache, Option<BatchStats>)> {
        let z1 = self.fc1.forward(x)?;
        let (pre_relu, bn, stats) = self.bn.forward(z1.view(), mode)?;
        let hidden = relu(&pre_relu);
        let y = &x + &self.fc2.forward(hidden.view())?;
        Ok((
            y,
            ResPCache {
                x: x.to_owned(),
                bn,
                pre_relu,
                hidden,
            },
            stats,
        ))
    }

    pub fn backward(&self, cache: &ResPCache, dy: &Array2<f64>) -> (Array2<f64>, ResPBlock) {
        let (dh, g2) = self.fc2.backward(cache.hidden.view(), dy.view());
        let dpre = relu_backward(&cache.pre_relu, &dh);
        let (dz1, gbn) = self.bn.backward(&cache.bn, &dpre);
        let (dx, g1) = self.fc1.backward(cache.x.view(), dz1.view());
        (
            dy + &dx,
            ResPBlock {
                fc1: g1,
                bn: gbn,
                fc2: g2,
            },
        )
    }
}

impl Params for ResPBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
