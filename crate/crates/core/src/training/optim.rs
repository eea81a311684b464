use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Default initial learning rate for this optimiser.
    pub fn default_lr(&self) -> f64 {
        match self {
            OptimizerKind::Sgd { .. } => 0.01,
            OptimizerKind::Adam { .. } => 3e-3,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Sgd { .. } => f.write_str("sgd"),
            OptimizerKind::Adam { .. } => f.write_str("adam"),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::sgd()),
            "adam" => Ok(Self::adam()),
            other => Err(Error::InvalidArgument(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// `lr(t) = lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2`, clamped to `t <= T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, t: usize) -> f64 {
        if self.total == 0 {
            return self.lr0;
        }
        let frac = t.min(self.total) as f64 / self.total as f64;
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (PI * frac).cos())
    }
}

/// Optimiser state with per-parameter moment buffers laid out like
/// [`Params::to_flat`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub schedule: CosineSchedule,
    steps: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, schedule: CosineSchedule) -> Self {
        Self {
            kind,
            schedule,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update at learning rate `lr`.
    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let g = grads.to_flat();
        let n = params.param_count();
        if g.len() != n {
            return Err(Error::InvalidArgument(format!(
                "gradient has {} entries, parameters have {n}",
                g.len()
            )));
        }
        if self.first.is_empty() && n > 0 {
            self.first = vec![0.0; n];
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = vec![0.0; n];
            }
        }
        if self.first.len() != n {
            return Err(Error::InvalidArgument(format!(
                "optimizer state sized for {} parameters, got {n}",
                self.first.len()
            )));
        }
        self.steps += 1;
        let kind = self.kind;
        let t = self.steps as i32;
        let (m, v) = (&mut self.first, &mut self.second);
        let mut offset = 0;
        params.visit_mut("", &mut |_, block| {
            for (k, p) in block.iter_mut().enumerate() {
                let i = offset + k;
                match kind {
                    OptimizerKind::Sgd { momentum } => {
                        m[i] = momentum * m[i] + g[i];
                        *p -= lr * m[i];
                    }
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mh = m[i] / (1.0 - beta1.powi(t));
                        let vh = v[i] / (1.0 - beta2.powi(t));
                        *p -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            offset += block.len();
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::join;

    #[derive(Clone, Debug, PartialEq)]
    struct Vector(Vec<f64>);

    impl Params for Vector {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
            f(&join(prefix, "v"), &self.0);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
            f(&join(prefix, "v"), &mut self.0);
        }
    }

    fn schedule() -> CosineSchedule {
        CosineSchedule {
            lr0: 0.01,
            lr_min: 1e-4,
            total: 10,
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for kind in [
            OptimizerKind::Sgd { momentum: 0.0 },
            OptimizerKind::sgd(),
            OptimizerKind::adam(),
        ] {
            let mut p = Vector(vec![1.0, -2.0]);
            let mut opt = Optimizer::new(kind, schedule());
            opt.step(&mut p, &Vector(vec![0.0, 0.0]), 0.1).unwrap();
            assert_eq!(p.0, vec![1.0, -2.0]);
        }
    }

    #[test]
    fn single_sgd_step() {
        let mut p = Vector(vec![0.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, schedule());
        opt.step(&mut p, &Vector(vec![1.0]), 0.1).unwrap();
        assert_eq!(p.0, vec![-0.1]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Vector(vec![0.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.9 }, schedule());
        opt.step(&mut p, &Vector(vec![1.0]), 1.0).unwrap();
        opt.step(&mut p, &Vector(vec![1.0]), 1.0).unwrap();
        assert!((p.0[0] + 1.0 + 1.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Vector(vec![0.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(), schedule());
        opt.step(&mut p, &Vector(vec![3.0, -0.5]), 0.01).unwrap();
        assert!((p.0[0] + 0.01).abs() < 1e-9);
        assert!((p.0[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Vector(vec![0.0]);
        let mut opt = Optimizer::new(OptimizerKind::sgd(), schedule());
        assert!(opt.step(&mut p, &Vector(vec![1.0, 2.0]), 0.1).is_err());
        opt.step(&mut p, &Vector(vec![1.0]), 0.1).unwrap();
        let mut q = Vector(vec![0.0, 0.0]);
        assert!(opt.step(&mut q, &Vector(vec![1.0, 2.0]), 0.1).is_err());
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = schedule();
        assert_eq!(s.lr(0), 0.01);
        assert!((s.lr(5) - (0.01 + 1e-4) / 2.0).abs() < 1e-15);
        assert!((s.lr(10) - 1e-4).abs() < 1e-15);
        for t in 0..10 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
    }
}
