use crate::error::{ensure_arg, Result};

/// Uniform knot vector over `[lower, upper]`, extended by `order` knots past
/// each bound.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineGrid {
    pub lower: f64,
    pub upper: f64,
    pub grid_size: usize,
    pub order: usize,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(lower: f64, upper: f64, grid_size: usize, order: usize) -> Result<Self> {
        ensure_arg!(grid_size >= 1, "grid size must be at least 1");
        ensure_arg!(
            lower.is_finite() && upper.is_finite() && lower < upper,
            "spline domain [{lower}, {upper}] is empty or non-finite"
        );
        let h = (upper - lower) / grid_size as f64;
        let knots = (0..grid_size + 2 * order + 1)
            .map(|j| {
                if j == order {
                    lower
                } else if j == order + grid_size {
                    upper
                } else {
                    lower + (j as f64 - order as f64) * h
                }
            })
            .collect();
        Ok(Self {
            lower,
            upper,
            grid_size,
            order,
            knots,
        })
    }

    /// The default domain `[-1, 1]`.
    pub fn symmetric(grid_size: usize, order: usize) -> Result<Self> {
        Self::new(-1.0, 1.0, grid_size, order)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `grid_size + order`.
    pub fn basis_len(&self) -> usize {
        self.grid_size + self.order
    }

    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.basis_len()];
        self.basis_into(x, &mut out, None, &mut Vec::new());
        out
    }

    pub fn basis_with_derivative(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let mut b = vec![0.0; self.basis_len()];
        let mut d = vec![0.0; self.basis_len()];
        self.basis_into(x, &mut b, Some(&mut d), &mut Vec::new());
        (b, d)
    }

    /// Cox-de Boor recursion over the extended knot vector, writing
    /// `basis_len()` values into `out` and optionally their derivatives.
    /// `scratch` is reused across calls to avoid allocation.
    pub fn basis_into(&self, x: f64, out: &mut [f64], mut deriv: Option<&mut [f64]>, scratch: &mut Vec<f64>) {
        let t = &self.knots;
        let k = self.order;
        let intervals = t.len() - 1;
        scratch.clear();
        scratch.extend((0..intervals).map(|i| if t[i] <= x && x < t[i + 1] { 1.0 } else { 0.0 }));
        // Degree 0 has no knots beyond `upper`, so close its last interval.
        if k == 0 && x == self.upper {
            scratch[intervals - 1] = 1.0;
        }
        let b = scratch;
        for d in 1..=k {
            if d == k {
                if let Some(dv) = deriv.as_deref_mut() {
                    for i in 0..self.basis_len() {
                        let left = d as f64 / (t[i + d] - t[i]) * b[i];
                        let right = d as f64 / (t[i + d + 1] - t[i + 1]) * b[i + 1];
                        dv[i] = left - right;
                    }
                }
            }
            for i in 0..intervals - d {
                b[i] =
                    (x - t[i]) / (t[i + d] - t[i]) * b[i] + (t[i + d + 1] - x) / (t[i + d + 1] - t[i + 1]) * b[i + 1];
            }
        }
        out.copy_from_slice(&b[..self.basis_len()]);
        if k == 0 {
            // Piecewise constant: zero derivative away from the knots.
            if let Some(dv) = deriv {
                dv.fill(0.0);
            }
        }
    }
}
