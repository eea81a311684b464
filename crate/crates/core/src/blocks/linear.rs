use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{ensure_arg, Result};
use crate::params::{join, Params};

/// Dense layer `y = x W + b` acting on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    /// Row-major `d_in × d_out`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (d_in as f64).sqrt();
        Self {
            d_in,
            d_out,
            weight: (0..d_in * d_out).map(|_| rng.random_range(-s..s)).collect(),
            bias: vec![0.0; d_out],
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            weight: vec![0.0; d_in * d_out],
            bias: vec![0.0; d_out],
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut l = Self::zeros(d, d);
        for i in 0..d {
            l.weight[i * d + i] = 1.0;
        }
        l
    }

    pub fn weight_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.d_in, self.d_out), &self.weight).expect("weight shape")
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        ensure_arg!(
            x.ncols() == self.d_in,
            "linear layer expects {} inputs, got {}",
            self.d_in,
            x.ncols()
        );
        let mut y = x.dot(&self.weight_view());
        for mut row in y.rows_mut() {
            row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        Ok(y)
    }

    /// Gradients given the forward input `x` and upstream `dy`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> (Array2<f64>, Linear) {
        let dx = dy.dot(&self.weight_view().t());
        let dw = x.t().dot(&dy);
        let db = dy.sum_axis(Axis(0));
        let grad = Linear {
            d_in: self.d_in,
            d_out: self.d_out,
            weight: dw.iter().copied().collect(),
            bias: db.to_vec(),
        };
        (dx, grad)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub(crate) fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Masks `dy` by the sign of the pre-activation `z`.
pub(crate) fn relu_backward(z: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut out = dy.clone();
    out.zip_mut_with(z, |d, &zv| {
        if zv <= 0.0 {
            *d = 0.0
        }
    });
    out
}
