//! Grouped-rational KAN layer (the "elite" variant).
//!
//! Input channels are split into `groups` contiguous blocks. Every channel in
//! block `r` passes through the same rational function
//!
//! ```text
//! F_r(x) = P_r(x) / Q(x),   P_r(x) = a_r0 + a_r1 x + .. + a_rm x^m,
//! Q(x) = sqrt(1 + G(x)^2),  G(x)   = b_1 x + .. + b_n x^n,
//! ```
//!
//! where the denominator coefficients are shared by all groups. The activated
//! vector is then mixed by a dense `d_in × d_out` weight matrix plus bias.
//! All polynomials, including the derivative factors used in the backward
//! pass, are evaluated with Horner's scheme.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::horner::{horner, horner_with_derivative};
use crate::error::{ensure_arg, Error, Result};
use crate::params::{join, Params};

#[derive(Debug, Clone, PartialEq)]
pub struct RationalGroupLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub groups: usize,
    pub num_degree: usize,
    pub den_degree: usize,
    /// `groups × (num_degree + 1)`, `a_0` first.
    pub numerator: Vec<f64>,
    /// `b_1 ..= b_n`, shared across groups.
    pub denominator: Vec<f64>,
    /// Row-major `d_in × d_out`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RationalCache {
    x: Array2<f64>,
    activated: Array2<f64>,
    dims: (usize, usize, usize),
}

/// Pieces of `F(x) = P(x)/Q(x)` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RationalEval {
    pub p: f64,
    pub dp: f64,
    pub g: f64,
    pub dg: f64,
    pub q: f64,
}

impl RationalEval {
    pub fn value(&self) -> f64 {
        self.p / self.q
    }

    /// `dQ/dx = G(x)/Q(x) * G'(x)`.
    pub fn dq(&self) -> f64 {
        self.g / self.q * self.dg
    }

    /// `dF/dx = P'(x)/Q(x) - Q'(x) P(x)/Q(x)^2`.
    pub fn dx(&self) -> f64 {
        self.dp / self.q - self.dq() * self.p / (self.q * self.q)
    }
}

impl RationalGroupLayer {
    pub fn new(
        d_in: usize,
        d_out: usize,
        groups: usize,
        num_degree: usize,
        den_degree: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layer = Self::zeros(d_in, d_out, groups, num_degree, den_degree)?;
        // Near-identity start. With P = x (1 + x^n) and G = x^n the activation
        // x (1 + x^n) / sqrt(1 + x^2n) stays within [x, sqrt(2) x] for even n,
        // and the balanced degrees keep every coefficient gradient linear in x
        // so early updates cannot blow up large inputs. Without room for the
        // balancing term the start is plain F(x) = x.
        let n = den_degree;
        let balanced = n >= 1 && num_degree > n;
        if num_degree >= 1 {
            for r in 0..groups {
                let a = &mut layer.numerator[r * (num_degree + 1)..(r + 1) * (num_degree + 1)];
                a[1] = 1.0;
                if balanced {
                    a[n + 1] = 1.0;
                }
            }
        }
        if balanced {
            layer.denominator[n - 1] = 1.0;
        }
        let s = 1.0 / (d_in as f64).sqrt();
        layer.weight.iter_mut().for_each(|w| *w = rng.random_range(-s..s));
        Ok(layer)
    }

    pub fn zeros(d_in: usize, d_out: usize, groups: usize, num_degree: usize, den_degree: usize) -> Result<Self> {
        ensure_arg!(d_in > 0 && d_out > 0, "layer dimensions must be positive");
        ensure_arg!(
            groups > 0 && d_in.is_multiple_of(groups),
            "group count {groups} must divide input width {d_in}"
        );
        Ok(Self {
            d_in,
            d_out,
            groups,
            num_degree,
            den_degree,
            numerator: vec![0.0; groups * (num_degree + 1)],
            denominator: vec![0.0; den_degree],
            weight: vec![0.0; d_in * d_out],
            bias: vec![0.0; d_out],
        })
    }

    pub fn group_of(&self, channel: usize) -> usize {
        channel / (self.d_in / self.groups)
    }

    pub fn group_numerator(&self, r: usize) -> &[f64] {
        let m1 = self.num_degree + 1;
        &self.numerator[r * m1..(r + 1) * m1]
    }

    /// Evaluates the group-`r` rational function and its factors at `x`.
    pub fn eval(&self, r: usize, x: f64) -> RationalEval {
        let (p, dp) = horner_with_derivative(self.group_numerator(r), x);
        let (g, dg) = if self.den_degree == 0 {
            (0.0, 0.0)
        } else {
            // G(x) = x * (b_1 + b_2 x + ..), G'(x) = b_1 + 2 b_2 x + ..
            let inner = horner(&self.denominator, x);
            // Horner over the coefficients (j + 1) b_{j+1}, formed on the fly.
            let dg = self
                .denominator
                .iter()
                .enumerate()
                .rev()
                .fold(0.0, |acc, (j, b)| (j + 1) as f64 * b + x * acc);
            (x * inner, dg)
        };
        RationalEval {
            p,
            dp,
            g,
            dg,
            q: (1.0 + g * g).sqrt(),
        }
    }

    pub fn activation(&self, r: usize, x: f64) -> f64 {
        self.eval(r, x).value()
    }

    fn weight_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.d_in, self.d_out), &self.weight).expect("weight shape")
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, RationalCache)> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let (y, cache) = self.forward_batch(xv)?;
        Ok((y.into_raw_vec_and_offset().0, cache))
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, RationalCache)> {
        ensure_arg!(
            x.ncols() == self.d_in,
            "rational layer expects {} inputs, got {}",
            self.d_in,
            x.ncols()
        );
        let mut activated = Array2::zeros(x.dim());
        for ((r, p), &xv) in x.indexed_iter() {
            activated[[r, p]] = self.activation(self.group_of(p), xv);
        }
        let mut y = activated.dot(&self.weight_view());
        for mut row in y.rows_mut() {
            row.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        }
        Ok((
            y,
            RationalCache {
                x: x.to_owned(),
                activated,
                dims: (self.d_in, self.d_out, self.groups),
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &RationalCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, RationalGroupLayer)> {
        if cache.dims != (self.d_in, self.d_out, self.groups) {
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
        let mut grad = Self::zeros(self.d_in, self.d_out, self.groups, self.num_degree, self.den_degree)?;
        let dw = cache.activated.t().dot(&upstream);
        grad.weight = dw.iter().copied().collect();
        grad.bias = upstream.sum_axis(Axis(0)).to_vec();
        let dact = upstream.dot(&self.weight_view().t());

        let m1 = self.num_degree + 1;
        let mut dx = Array2::zeros(cache.x.dim());
        for ((r, p), &xv) in cache.x.indexed_iter() {
            let up = dact[[r, p]];
            let grp = self.group_of(p);
            let e = self.eval(grp, xv);
            // dF/da_j = x^j / Q
            let mut xj = 1.0;
            for j in 0..m1 {
                grad.numerator[grp * m1 + j] += up * xj / e.q;
                xj *= xv;
            }
            // dF/db_j = -x^j G P / Q^3
            let common = -e.g * e.p / (e.q * e.q * e.q);
            let mut xj = xv;
            for j in 0..self.den_degree {
                grad.denominator[j] += up * xj * common;
                xj *= xv;
            }
            dx[[r, p]] = up * e.dx();
        }
        Ok((dx, grad))
    }

    /// Closed-form count: `d_in d_out + d_out + n + m g`.
    pub fn formula_param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out + self.den_degree + self.num_degree * self.groups
    }
}

impl Params for RationalGroupLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "numerator"), &self.numerator);
        f(&join(prefix, "denominator"), &self.denominator);
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "numerator"), &mut self.numerator);
        f(&join(prefix, "denominator"), &mut self.denominator);
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(
        rng: &mut ChaCha8Rng,
        d_in: usize,
        d_out: usize,
        g: usize,
        m: usize,
        n: usize,
    ) -> RationalGroupLayer {
        let mut l = RationalGroupLayer::new(d_in, d_out, g, m, n, rng).unwrap();
        l.visit_mut("", &mut |_, s| {
            s.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0))
        });
        l
    }

    /// Monomial re-evaluation of the whole layer.
    fn naive_forward(l: &RationalGroupLayer, x: &[f64]) -> Vec<f64> {
        let act: Vec<f64> = (0..l.d_in)
            .map(|p| {
                let r = p / (l.d_in / l.groups);
                let a = l.group_numerator(r);
                let num: f64 = (0..a.len()).map(|j| a[j] * x[p].powi(j as i32)).sum();
                let g: f64 = (0..l.den_degree)
                    .map(|j| l.denominator[j] * x[p].powi(j as i32 + 1))
                    .sum();
                num / (1.0 + g * g).sqrt()
            })
            .collect();
        (0..l.d_out)
            .map(|q| l.bias[q] + (0..l.d_in).map(|p| act[p] * l.weight[p * l.d_out + q]).sum::<f64>())
            .collect()
    }

    #[test]
    fn identity_configuration() {
        let mut l = RationalGroupLayer::zeros(3, 3, 1, 1, 2).unwrap();
        l.numerator = vec![0.0, 1.0];
        for i in 0..3 {
            l.weight[i * 3 + i] = 1.0;
        }
        let x = [0.7, -2.0, 13.0];
        assert_eq!(l.forward(&x).unwrap().0, x.to_vec());
        for &v in &[-3.0, 0.0, 0.4, 10.0] {
            assert_eq!(l.eval(0, v).dx(), 1.0);
        }
    }

    #[test]
    fn initial_activation_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = RationalGroupLayer::new(4, 2, 2, 5, 4, &mut rng).unwrap();
        for i in -400..=400 {
            let x = i as f64 * 0.25;
            let f = l.activation(1, x);
            let (lo, hi) = if x >= 0.0 {
                (x, 2f64.sqrt() * x)
            } else {
                (2f64.sqrt() * x, x)
            };
            assert!(f >= lo - 1e-12 && f <= hi + 1e-12, "F({x}) = {f}");
            let e = l.eval(1, x);
            assert!((x.powi(5) / e.q).abs() <= 2.0 * x.abs() + 1.0);
        }
        let plain = RationalGroupLayer::new(2, 2, 1, 3, 3, &mut rng).unwrap();
        assert_eq!(plain.activation(0, 7.5), 7.5);
    }

    #[test]
    fn zero_input_activates_to_a0() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_layer(&mut rng, 4, 2, 2, 5, 4);
        for r in 0..2 {
            assert_eq!(l.eval(r, 0.0).q, 1.0);
            assert_eq!(l.activation(r, 0.0), l.group_numerator(r)[0]);
        }
    }

    #[test]
    fn a0_gradient_is_one_without_denominator() {
        let mut l = RationalGroupLayer::zeros(1, 1, 1, 3, 2).unwrap();
        l.numerator = vec![0.3, -1.0, 2.0, 0.5];
        l.weight = vec![1.0];
        for &x in &[-1.5, 0.0, 2.5] {
            let (_, c) = l.forward(&[x]).unwrap();
            let (_, g) = l.backward(&c, Array2::ones((1, 1)).view()).unwrap();
            assert_eq!(g.numerator[0], 1.0);
        }
    }

    #[test]
    fn matches_naive_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = random_layer(&mut rng, 6, 3, 2, 5, 4);
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = l.forward(&x).unwrap().0;
            for (a, b) in y.iter().zip(naive_forward(&l, &x)) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_bad_grouping_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(RationalGroupLayer::new(6, 2, 4, 5, 4, &mut rng).is_err());
        let l = RationalGroupLayer::new(4, 2, 4, 5, 4, &mut rng).unwrap();
        assert!(matches!(l.forward(&[1.0; 3]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn stored_and_formula_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = RationalGroupLayer::new(2, 3, 1, 5, 4, &mut rng).unwrap();
        assert_eq!(l.formula_param_count(), 18);
        assert_eq!(l.param_count(), 19);
    }

    fn fd_check(l: &RationalGroupLayer, x: &Array2<f64>, up: &Array2<f64>) {
        let loss = |l: &RationalGroupLayer, x: &Array2<f64>| (l.forward_batch(x.view()).unwrap().0 * up).sum();
        let (_, c) = l.forward_batch(x.view()).unwrap();
        let (dx, g) = l.backward(&c, up.view()).unwrap();
        let h = 1e-5;
        let flat = l.to_flat();
        let gflat = g.to_flat();
        for j in 0..flat.len() {
            let hj = h * flat[j].abs().max(1.0);
            let mut f = flat.clone();
            let mut lp = l.clone();
            f[j] += hj;
            lp.load_flat(&f);
            let a = loss(&lp, x);
            f[j] -= 2.0 * hj;
            lp.load_flat(&f);
            let b = loss(&lp, x);
            let fd = (a - b) / (2.0 * hj);
            let rel = (fd - gflat[j]).abs() / fd.abs().max(gflat[j].abs()).max(1.0);
            assert!(rel < 1e-5, "param {j}: fd {fd} analytic {}", gflat[j]);
        }
        for ((r, p), &xv) in x.indexed_iter() {
            let hj = h * xv.abs().max(1.0);
            let mut xp = x.clone();
            xp[[r, p]] += hj;
            let a = loss(l, &xp);
            xp[[r, p]] -= 2.0 * hj;
            let b = loss(l, &xp);
            let fd = (a - b) / (2.0 * hj);
            assert!((fd - dx[[r, p]]).abs() / fd.abs().max(1.0) < 1e-5);
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let g = [1, 2, 4][trial % 3];
            let l = random_layer(&mut rng, 4, 3, g, 1 + trial % 6, trial % 5);
            let x = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.5..1.5));
            let up = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
            fd_check(&l, &x, &up);
        }
    }

    proptest! {
        #[test]
        fn denominator_at_least_one_and_output_finite(seed in any::<u64>(), x in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_layer(&mut rng, 4, 2, 2, 5, 4);
            for r in 0..2 {
                let e = l.eval(r, x);
                prop_assert!(e.q >= 1.0 - 1e-12);
                prop_assert!(e.value().is_finite());
            }
            prop_assert!(l.forward(&[x; 4]).unwrap().0.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn channels_in_a_group_share_activation(seed in any::<u64>(), x in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut l = random_layer(&mut rng, 8, 8, 2, 5, 4);
            // Identity mixing exposes the activated vector directly.
            l.weight.fill(0.0);
            l.bias.fill(0.0);
            for i in 0..8 { l.weight[i * 8 + i] = 1.0; }
            let y = l.forward(&[x; 8]).unwrap().0;
            prop_assert!(y[..4].iter().all(|v| *v == y[0]));
            prop_assert!(y[4..].iter().all(|v| *v == y[4]));
        }
    }
}
