//! B-spline KAN layer.
//!
//! Edge `(p, q)` carries `phi(x) = scale_base * silu(x) + scale_spline * sum_i c_i B_i(x)`
//! and output `q` sums its incoming edges plus a bias. The layer is evaluated
//! in batch form by expanding every input into `[silu(x), B_0(x), ..]` and
//! multiplying by a combined weight matrix, which keeps the per-edge algebra
//! exact while reusing a dense matmul.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::spline::SplineGrid;
use crate::error::{ensure_arg, Error, Result};
use crate::params::{join, Params};

#[derive(Debug, Clone, PartialEq)]
pub struct KanLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub grid: SplineGrid,
    /// `d_in × d_out × basis_len`, indexed `(p * d_out + q) * basis_len + i`.
    pub spline_coeffs: Vec<f64>,
    /// `d_in × d_out`.
    pub scale_base: Vec<f64>,
    /// `d_in × d_out`.
    pub scale_spline: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Values kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct KanCache {
    x: Array2<f64>,
    features: Array2<f64>,
    feature_derivs: Array2<f64>,
    weights: Array2<f64>,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl KanLayer {
    /// Spline coefficients uniform in `±0.1 / basis_len`, unit scales, zero bias.
    pub fn new(d_in: usize, d_out: usize, grid: SplineGrid, rng: &mut impl Rng) -> Self {
        let nb = grid.basis_len();
        let s = 0.1 / nb as f64;
        let b = 1.0 / (d_in as f64).sqrt();
        Self {
            d_in,
            d_out,
            spline_coeffs: (0..d_in * d_out * nb).map(|_| rng.random_range(-s..=s)).collect(),
            scale_base: (0..d_in * d_out).map(|_| rng.random_range(-b..b)).collect(),
            scale_spline: vec![1.0; d_in * d_out],
            bias: vec![0.0; d_out],
            grid,
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, grid: SplineGrid) -> Self {
        let nb = grid.basis_len();
        Self {
            d_in,
            d_out,
            spline_coeffs: vec![0.0; d_in * d_out * nb],
            scale_base: vec![0.0; d_in * d_out],
            scale_spline: vec![0.0; d_in * d_out],
            bias: vec![0.0; d_out],
            grid,
        }
    }

    fn stride(&self) -> usize {
        self.grid.basis_len() + 1
    }

    pub fn coeff(&self, p: usize, q: usize, i: usize) -> f64 {
        self.spline_coeffs[(p * self.d_out + q) * self.grid.basis_len() + i]
    }

    fn combined_weights(&self) -> Array2<f64> {
        let nb = self.grid.basis_len();
        let stride = nb + 1;
        let mut w = Array2::zeros((self.d_in * stride, self.d_out));
        for p in 0..self.d_in {
            for q in 0..self.d_out {
                let e = p * self.d_out + q;
                w[[p * stride, q]] = self.scale_base[e];
                for i in 0..nb {
                    w[[p * stride + 1 + i, q]] = self.scale_spline[e] * self.spline_coeffs[e * nb + i];
                }
            }
        }
        w
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, KanCache)> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let (y, cache) = self.forward_batch(xv)?;
        Ok((y.into_raw_vec_and_offset().0, cache))
    }

    /// Forward pass over the rows of `x` (`n × d_in`).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, KanCache)> {
        ensure_arg!(
            x.ncols() == self.d_in,
            "KAN layer expects {} inputs, got {}",
            self.d_in,
            x.ncols()
        );
        let nb = self.grid.basis_len();
        let stride = self.stride();
        let n = x.nrows();
        let mut features = Array2::zeros((n, self.d_in * stride));
        let mut derivs = Array2::zeros((n, self.d_in * stride));
        let mut scratch = Vec::new();
        for (r, xrow) in x.rows().into_iter().enumerate() {
            let mut frow = features.row_mut(r);
            let fs = frow.as_slice_mut().expect("contiguous");
            let mut drow = derivs.row_mut(r);
            let ds = drow.as_slice_mut().expect("contiguous");
            for (p, &xp) in xrow.iter().enumerate() {
                let base = p * stride;
                fs[base] = silu(xp);
                ds[base] = silu_deriv(xp);
                let (fb, db) = (&mut fs[base + 1..base + 1 + nb], &mut ds[base + 1..base + 1 + nb]);
                self.grid.basis_into(xp, fb, Some(db), &mut scratch);
            }
        }
        let weights = self.combined_weights();
        let mut y = features.dot(&weights);
        for mut row in y.rows_mut() {
            row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        let cache = KanCache {
            x: x.to_owned(),
            features,
            feature_derivs: derivs,
            weights,
        };
        Ok((y, cache))
    }

    /// Gradients with respect to the inputs and every parameter.
    pub fn backward(&self, cache: &KanCache, upstream: ArrayView2<f64>) -> Result<(Array2<f64>, KanLayer)> {
        let stride = self.stride();
        if cache.weights.dim() != (self.d_in * stride, self.d_out) {
            return Err(Error::Usage("cache was not produced by this layer".into()));
        }
        if upstream.dim() != (cache.x.nrows(), self.d_out) {
            return Err(Error::Usage(format!(
                "upstream gradient shape {:?} does not match cached forward ({} x {})",
                upstream.dim(),
                cache.x.nrows(),
                self.d_out
            )));
        }
        let nb = self.grid.basis_len();
        let dw = cache.features.t().dot(&upstream);
        let mut dfeat = upstream.dot(&cache.weights.t());
        dfeat *= &cache.feature_derivs;
        let mut dx = Array2::zeros((cache.x.nrows(), self.d_in));
        for (r, row) in dfeat.rows().into_iter().enumerate() {
            for p in 0..self.d_in {
                dx[[r, p]] = row.slice(s![p * stride..(p + 1) * stride]).sum();
            }
        }

        let mut grad = KanLayer::zeros(self.d_in, self.d_out, self.grid.clone());
        for p in 0..self.d_in {
            for q in 0..self.d_out {
                let e = p * self.d_out + q;
                grad.scale_base[e] = dw[[p * stride, q]];
                let mut ds = 0.0;
                for i in 0..nb {
                    let g = dw[[p * stride + 1 + i, q]];
                    grad.spline_coeffs[e * nb + i] = g * self.scale_spline[e];
                    ds += g * self.spline_coeffs[e * nb + i];
                }
                grad.scale_spline[e] = ds;
            }
        }
        grad.bias = upstream.sum_axis(Axis(0)).to_vec();
        Ok((dx, grad))
    }
}

impl Params for KanLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "spline_coeffs"), &self.spline_coeffs);
        f(&join(prefix, "scale_base"), &self.scale_base);
        f(&join(prefix, "scale_spline"), &self.scale_spline);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "spline_coeffs"), &mut self.spline_coeffs);
        f(&join(prefix, "scale_base"), &mut self.scale_base);
        f(&join(prefix, "scale_spline"), &mut self.scale_spline);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct double loop over edges with a fresh basis evaluation per edge.
    fn naive_forward(l: &KanLayer, x: &[f64]) -> Vec<f64> {
        (0..l.d_out)
            .map(|q| {
                let mut y = l.bias[q];
                for p in 0..l.d_in {
                    let b = l.grid.basis(x[p]);
                    let e = p * l.d_out + q;
                    let spline: f64 = (0..b.len()).map(|i| l.coeff(p, q, i) * b[i]).sum();
                    y += l.scale_base[e] * x[p] / (1.0 + (-x[p]).exp()) + l.scale_spline[e] * spline;
                }
                y
            })
            .collect()
    }

    fn random_layer(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> KanLayer {
        let mut l = KanLayer::new(d_in, d_out, SplineGrid::symmetric(5, 3).unwrap(), rng);
        l.visit_mut("", &mut |_, s| {
            s.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0))
        });
        l
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = KanLayer::new(7, 5, SplineGrid::symmetric(5, 3).unwrap(), &mut rng);
        assert_eq!(l.param_count(), 7 * 5 * (5 + 3 + 2) + 5);
    }

    #[test]
    fn zero_layer_outputs_bias() {
        let mut l = KanLayer::zeros(3, 2, SplineGrid::symmetric(5, 3).unwrap());
        l.bias = vec![0.25, -4.0];
        let (y, _) = l.forward(&[0.3, -7.0, 2.0]).unwrap();
        assert_eq!(y, vec![0.25, -4.0]);
    }

    #[test]
    fn silu_at_zero() {
        let mut l = KanLayer::zeros(1, 1, SplineGrid::symmetric(5, 3).unwrap());
        l.scale_base[0] = 1.0;
        assert_eq!(l.forward(&[0.0]).unwrap().0, vec![0.0]);
    }

    #[test]
    fn matches_naive_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = random_layer(&mut rng, 4, 3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.3..1.3)).collect();
            let (y, _) = l.forward(&x).unwrap();
            for (a, b) in y.iter().zip(naive_forward(&l, &x)) {
                assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }
        assert!(matches!(l.forward(&[0.0; 3]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = random_layer(&mut rng, 3, 2);
        let (_, cache) = l.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (dx, g) = l.backward(&cache, Array2::zeros((1, 2)).view()).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn coefficient_gradient_is_scaled_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = random_layer(&mut rng, 1, 1);
        let x = 0.37;
        let (_, cache) = l.forward(&[x]).unwrap();
        let (_, g) = l.backward(&cache, Array2::ones((1, 1)).view()).unwrap();
        let b = l.grid.basis(x);
        for i in 0..b.len() {
            assert!((g.spline_coeffs[i] - l.scale_spline[0] * b[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_layer(&mut rng, 2, 2);
        let b = random_layer(&mut rng, 3, 2);
        let (_, cache) = a.forward(&[0.0, 0.0]).unwrap();
        assert!(matches!(
            b.backward(&cache, Array2::ones((1, 2)).view()),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            a.backward(&cache, Array2::ones((2, 2)).view()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..10 {
            let (d_in, d_out) = (1 + trial % 3, 1 + trial % 4);
            let l = random_layer(&mut rng, d_in, d_out);
            let x: Array2<f64> = Array2::from_shape_fn((3, d_in), |_| rng.random_range(-1.2..1.2));
            let up: Array2<f64> = Array2::from_shape_fn((3, d_out), |_| rng.random_range(-1.0..1.0));
            let loss = |l: &KanLayer, x: &Array2<f64>| (l.forward_batch(x.view()).unwrap().0 * &up).sum();
            let (_, cache) = l.forward_batch(x.view()).unwrap();
            let (dx, g) = l.backward(&cache, up.view()).unwrap();
            let h = 1e-5;
            let flat = l.to_flat();
            let gflat = g.to_flat();
            for j in 0..flat.len() {
                let mut lp = l.clone();
                let mut f = flat.clone();
                f[j] += h;
                lp.load_flat(&f);
                let up_ = loss(&lp, &x);
                f[j] -= 2.0 * h;
                lp.load_flat(&f);
                let dn = loss(&lp, &x);
                let fd = (up_ - dn) / (2.0 * h);
                assert!((fd - gflat[j]).abs() / fd.abs().max(gflat[j].abs()).max(1.0) < 1e-5);
            }
            for idx in 0..x.len() {
                let (r, c) = (idx / d_in, idx % d_in);
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let a = loss(&l, &xp);
                xp[[r, c]] -= 2.0 * h;
                let b = loss(&l, &xp);
                let fd = (a - b) / (2.0 * h);
                assert!((fd - dx[[r, c]]).abs() / fd.abs().max(1.0) < 1e-5);
            }
        }
    }
}
