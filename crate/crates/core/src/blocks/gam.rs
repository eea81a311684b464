//! Geometric Affine Module pieces: grouped Group-Norm with a learnable affine
//! transform and center concatenation, softmax pooling (S-Pool), and the
//! plain max-pool used to collapse the neighbour axis.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{ensure_arg, Result};
use crate::geometry::Grouping;
use crate::params::{join, Params};

/// Fixed stabiliser added to the group variance.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Learnable `alpha`, `beta` of length `2d`. Only the first `d` entries act
/// on the normalised deviations; the concatenated center half passes through
/// unchanged, so the trailing entries receive zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl AffineParams {
    /// `alpha = 1`, `beta = 0` for input width `d`.
    pub fn new(d: usize) -> Self {
        Self {
            alpha: vec![1.0; 2 * d],
            beta: vec![0.0; 2 * d],
        }
    }

    pub fn epsilon(&self) -> f64 {
        GROUP_NORM_EPS
    }
}

impl Params for AffineParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "alpha"), &self.alpha);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "alpha"), &mut self.alpha);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Per-neighbour features `G × K × d` with their centers' features `G × d`.
#[derive(Debug, Clone)]
pub struct GroupedFeatures {
    pub features: Array3<f64>,
    pub centers: Array2<f64>,
    pub grouping: Grouping,
}

impl GroupedFeatures {
    /// Gathers rows of `point_features` (`N × d`) according to `grouping`.
    pub fn gather(point_features: ArrayView2<f64>, grouping: &Grouping) -> Self {
        let (g, k, d) = (grouping.groups(), grouping.k, point_features.ncols());
        let mut features = Array3::zeros((g, k, d));
        let mut centers = Array2::zeros((g, d));
        for gi in 0..g {
            centers
                .row_mut(gi)
                .assign(&point_features.row(grouping.center_indices[gi]));
            for (j, &n) in grouping.neighbors(gi).iter().enumerate() {
                features.slice_mut(s![gi, j, ..]).assign(&point_features.row(n));
            }
        }
        Self {
            features,
            centers,
            grouping: grouping.clone(),
        }
    }

    /// Adds the gradients of gathered tensors back onto `N × d` point rows.
    pub fn scatter_grad(
        grouping: &Grouping,
        dfeatures: &Array3<f64>,
        dcenters: &Array2<f64>,
        n_points: usize,
    ) -> Array2<f64> {
        let d = dcenters.ncols();
        let mut out = Array2::zeros((n_points, d));
        for gi in 0..grouping.groups() {
            let mut row = out.row_mut(grouping.center_indices[gi]);
            row += &dcenters.row(gi);
            for (j, &n) in grouping.neighbors(gi).iter().enumerate() {
                let mut row = out.row_mut(n);
                row += &dfeatures.slice(s![gi, j, ..]);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GroupNormCache {
    deviations: Array3<f64>,
    normalized: Array3<f64>,
    /// `(Var + eps)^(-1/2)` per group.
    inv_std: Vec<f64>,
    /// Mean deviation per group.
    dev_mean: Vec<f64>,
}

/// Normalises each group's deviations from its center by one scalar
/// variance, applies `alpha ⊙ · + beta` when `affine` is given, and appends
/// the raw center feature, giving `G × K × 2d`.
pub fn group_norm_affine(gf: &GroupedFeatures, affine: Option<&AffineParams>) -> Result<(Array3<f64>, GroupNormCache)> {
    let (g, k, d) = gf.features.dim();
    ensure_arg!(
        gf.centers.dim() == (g, d),
        "center features {:?} do not match grouped features {:?}",
        gf.centers.dim(),
        (g, d)
    );
    if let Some(a) = affine {
        ensure_arg!(
            a.alpha.len() == 2 * d && a.beta.len() == 2 * d,
            "affine parameters must have length {} for width {d}",
            2 * d
        );
    }
    let m = (k * d) as f64;
    let mut deviations = gf.features.clone();
    for gi in 0..g {
        let c = gf.centers.row(gi);
        for mut row in deviations.index_axis_mut(Axis(0), gi).rows_mut() {
            row -= &c;
        }
    }
    let mut normalized = deviations.clone();
    let mut out = Array3::zeros((g, k, 2 * d));
    let mut inv_std = Vec::with_capacity(g);
    let mut dev_mean = Vec::with_capacity(g);
    for gi in 0..g {
        let dev = deviations.index_axis(Axis(0), gi);
        let mean = dev.sum() / m;
        let var = dev.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let s = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        inv_std.push(s);
        dev_mean.push(mean);
        normalized.index_axis_mut(Axis(0), gi).mapv_inplace(|v| v * s);
        for j in 0..k {
            for ch in 0..d {
                let nv = normalized[[gi, j, ch]];
                out[[gi, j, ch]] = match affine {
                    Some(a) => a.alpha[ch] * nv + a.beta[ch],
                    None => nv,
                };
                out[[gi, j, d + ch]] = gf.centers[[gi, ch]];
            }
        }
    }
    Ok((
        out,
        GroupNormCache {
            deviations,
            normalized,
            inv_std,
            dev_mean,
        },
    ))
}

/// Returns gradients for the neighbour features, the center features and
/// (when present) the affine parameters.
pub fn group_norm_affine_backward(
    cache: &GroupNormCache,
    affine: Option<&AffineParams>,
    dout: &Array3<f64>,
) -> (Array3<f64>, Array2<f64>, Option<AffineParams>) {
    let (g, k, d) = cache.deviations.dim();
    let m = (k * d) as f64;
    let mut daffine = affine.map(|a| AffineParams {
        alpha: vec![0.0; a.alpha.len()],
        beta: vec![0.0; a.beta.len()],
    });
    let mut dfeat = Array3::zeros((g, k, d));
    let mut dcent = Array2::zeros((g, d));
    let mut dn = Array2::zeros((k, d));
    for gi in 0..g {
        for j in 0..k {
            for ch in 0..d {
                let up = dout[[gi, j, ch]];
                dn[[j, ch]] = match (affine, daffine.as_mut()) {
                    (Some(a), Some(da)) => {
                        da.alpha[ch] += up * cache.normalized[[gi, j, ch]];
                        da.beta[ch] += up;
                        up * a.alpha[ch]
                    }
                    _ => up,
                };
                dcent[[gi, ch]] += dout[[gi, j, d + ch]];
            }
        }
        let s = cache.inv_std[gi];
        let dev = cache.deviations.index_axis(Axis(0), gi);
        // N = D s with s = (V + eps)^(-1/2), V = mean((D - mean D)^2).
        let dot: f64 = dn.iter().zip(dev.iter()).map(|(a, b)| a * b).sum();
        let dv = -0.5 * dot * s * s * s;
        let mean = cache.dev_mean[gi];
        for j in 0..k {
            for ch in 0..d {
                let dd = s * dn[[j, ch]] + dv * 2.0 * (dev[[j, ch]] - mean) / m;
                dfeat[[gi, j, ch]] = dd;
                dcent[[gi, ch]] -= dd;
            }
        }
    }
    (dfeat, dcent, daffine)
}

#[derive(Debug, Clone)]
pub struct SPoolCache {
    input: Array3<f64>,
    weights: Array3<f64>,
    output: Array2<f64>,
}

/// Per group and channel: softmax over the `K` neighbour values, then the
/// softmax-weighted sum of those values.
pub fn s_pool(x: &Array3<f64>) -> (Array2<f64>, SPoolCache) {
    let (g, k, c) = x.dim();
    let mut weights = Array3::zeros((g, k, c));
    let mut out = Array2::zeros((g, c));
    for gi in 0..g {
        for ch in 0..c {
            let col = x.slice(s![gi, .., ch]);
            let max = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..k {
                let e = (col[j] - max).exp();
                weights[[gi, j, ch]] = e;
                z += e;
            }
            let mut acc = 0.0;
            for j in 0..k {
                let w = weights[[gi, j, ch]] / z;
                weights[[gi, j, ch]] = w;
                acc += w * col[j];
            }
            out[[gi, ch]] = acc;
        }
    }
    let cache = SPoolCache {
        input: x.clone(),
        weights,
        output: out.clone(),
    };
    (out, cache)
}

/// `dy/dx_j = w_j (1 + x_j - y)` per channel.
pub fn s_pool_backward(cache: &SPoolCache, dy: &Array2<f64>) -> Array3<f64> {
    let (g, k, c) = cache.input.dim();
    let mut dx = Array3::zeros((g, k, c));
    for gi in 0..g {
        for j in 0..k {
            for ch in 0..c {
                let w = cache.weights[[gi, j, ch]];
                dx[[gi, j, ch]] = dy[[gi, ch]] * w * (1.0 + cache.input[[gi, j, ch]] - cache.output[[gi, ch]]);
            }
        }
    }
    dx
}

/// Max over the neighbour axis; returns the winning slot per `(group, channel)`
/// (first maximum on ties).
pub fn max_pool_neighbors(x: &Array3<f64>) -> (Array2<f64>, Vec<usize>) {
    let (g, k, c) = x.dim();
    let mut out = Array2::zeros((g, c));
    let mut arg = vec![0; g * c];
    for gi in 0..g {
        for ch in 0..c {
            let mut best = 0;
            for j in 1..k {
                if x[[gi, j, ch]] > x[[gi, best, ch]] {
                    best = j;
                }
            }
            out[[gi, ch]] = x[[gi, best, ch]];
            arg[gi * c + ch] = best;
        }
    }
    (out, arg)
}

pub fn max_pool_neighbors_backward(arg: &[usize], dy: &Array2<f64>, k: usize) -> Array3<f64> {
    let (g, c) = dy.dim();
    let mut dx = Array3::zeros((g, k, c));
    for gi in 0..g {
        for ch in 0..c {
            dx[[gi, arg[gi * c + ch], ch]] = dy[[gi, ch]];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trivial_grouping(g: usize, k: usize) -> Grouping {
        Grouping {
            center_indices: (0..g).collect(),
            neighbor_indices: vec![0; g * k],
            neighbor_dists: vec![0.0; g * k],
            k,
        }
    }

    fn grouped(features: Array3<f64>, centers: Array2<f64>) -> GroupedFeatures {
        let (g, k, _) = features.dim();
        GroupedFeatures {
            features,
            centers,
            grouping: trivial_grouping(g, k),
        }
    }

    #[test]
    fn degenerate_group_gives_beta_and_center() {
        let c = Array2::from_shape_vec((1, 2), vec![0.5, -1.5]).unwrap();
        let f = Array3::from_shape_fn((1, 3, 2), |(_, _, ch)| c[[0, ch]]);
        let mut a = AffineParams::new(2);
        a.beta = vec![0.1, 0.2, 9.0, 9.0];
        a.alpha = vec![3.0, 3.0, 9.0, 9.0];
        let (out, _) = group_norm_affine(&grouped(f, c), Some(&a)).unwrap();
        for j in 0..3 {
            assert_eq!(out.slice(s![0, j, ..]).to_vec(), vec![0.1, 0.2, 0.5, -1.5]);
        }
    }

    #[test]
    fn two_neighbour_hand_evaluation() {
        let c = Array2::from_elem((1, 1), 2.0);
        let f = Array3::from_shape_vec((1, 2, 1), vec![1.0, 3.0]).unwrap();
        let (out, _) = group_norm_affine(&grouped(f, c), Some(&AffineParams::new(1))).unwrap();
        let want = 1.0 / (1.0 + GROUP_NORM_EPS).sqrt();
        assert!((out[[0, 0, 0]] + want).abs() < 1e-15);
        assert!((out[[0, 1, 0]] - want).abs() < 1e-15);
        assert_eq!(out.dim(), (1, 2, 2));
        assert_eq!(out[[0, 0, 1]], 2.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let f = Array3::zeros((2, 3, 4));
        let c = Array2::zeros((2, 3));
        assert!(group_norm_affine(&grouped(f.clone(), c), None).is_err());
        let c = Array2::zeros((2, 4));
        assert!(group_norm_affine(&grouped(f, c), Some(&AffineParams::new(3))).is_err());
    }

    #[test]
    fn normalized_variance_is_var_over_var_plus_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Array3::from_shape_fn((3, 6, 5), |_| rng.random_range(-3.0..3.0));
        let c = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let gf = grouped(f, c);
        let (out, cache) = group_norm_affine(&gf, Some(&AffineParams::new(5))).unwrap();
        for gi in 0..3 {
            let var0 = 1.0 / (cache.inv_std[gi] * cache.inv_std[gi]) - GROUP_NORM_EPS;
            let part = out.slice(s![gi, .., ..5]);
            let mean = part.sum() / 30.0;
            let var = part.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 30.0;
            assert!(var0 >= 1.0);
            assert!((var - var0 / (var0 + GROUP_NORM_EPS)).abs() < 1e-6);
        }
    }

    #[test]
    fn spool_examples() {
        let x = Array3::from_elem((1, 4, 2), 0.7);
        assert!(s_pool(&x).0.iter().all(|v| (v - 0.7).abs() < 1e-15));
        let one = Array3::from_shape_vec((1, 1, 3), vec![1.0, -2.0, 5.0]).unwrap();
        assert_eq!(s_pool(&one).0.iter().copied().collect::<Vec<_>>(), vec![1.0, -2.0, 5.0]);
        let x = Array3::from_shape_vec((1, 2, 1), vec![0.0, 3f64.ln()]).unwrap();
        let (y, cache) = s_pool(&x);
        assert!((cache.weights[[0, 0, 0]] - 0.25).abs() < 1e-15);
        assert!((cache.weights[[0, 1, 0]] - 0.75).abs() < 1e-15);
        assert!((y[[0, 0]] - 0.75 * 3f64.ln()).abs() < 1e-15);
        let big = Array3::from_shape_vec((1, 2, 1), vec![1000.0, 0.0]).unwrap();
        assert!((s_pool(&big).0[[0, 0]] - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn max_pool_round_trip() {
        let x = Array3::from_shape_vec((1, 3, 2), vec![1.0, 5.0, 4.0, 5.0, 2.0, 0.0]).unwrap();
        let (y, arg) = max_pool_neighbors(&x);
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![4.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
        let dx = max_pool_neighbors_backward(&arg, &Array2::ones((1, 2)), 3);
        assert_eq!(dx.iter().sum::<f64>(), 2.0);
        assert_eq!(dx[[0, 1, 0]], 1.0);
    }

    fn fd<F: Fn(&Array3<f64>, &Array2<f64>, &AffineParams) -> f64>(
        loss: F,
        f: &Array3<f64>,
        c: &Array2<f64>,
        a: &AffineParams,
        which: usize,
        idx: usize,
    ) -> f64 {
        let h = 1e-5;
        let eval = |delta: f64| {
            let (mut f2, mut c2, mut a2) = (f.clone(), c.clone(), a.clone());
            match which {
                0 => f2.as_slice_mut().unwrap()[idx] += delta,
                1 => c2.as_slice_mut().unwrap()[idx] += delta,
                2 => a2.alpha[idx] += delta,
                _ => a2.beta[idx] += delta,
            }
            loss(&f2, &c2, &a2)
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    #[test]
    fn group_norm_backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let (g, k, d) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..5));
            let f = Array3::from_shape_fn((g, k, d), |_| rng.random_range(-2.0..2.0));
            let c = Array2::from_shape_fn((g, d), |_| rng.random_range(-1.0..1.0));
            let mut a = AffineParams::new(d);
            a.visit_mut("", &mut |_, s| {
                s.iter_mut().for_each(|v| *v = rng.random_range(-1.5..1.5))
            });
            let up = Array3::from_shape_fn((g, k, 2 * d), |_| rng.random_range(-1.0..1.0));
            let loss = |f: &Array3<f64>, c: &Array2<f64>, a: &AffineParams| {
                (group_norm_affine(&grouped(f.clone(), c.clone()), Some(a)).unwrap().0 * &up).sum()
            };
            let (_, cache) = group_norm_affine(&grouped(f.clone(), c.clone()), Some(&a)).unwrap();
            let (df, dc, da) = group_norm_affine_backward(&cache, Some(&a), &up);
            let da = da.unwrap();
            let check = |an: f64, num: f64| {
                assert!(
                    (an - num).abs() / num.abs().max(an.abs()).max(1.0) < 1e-5,
                    "{an} vs {num}"
                )
            };
            for i in 0..f.len() {
                check(df.as_slice().unwrap()[i], fd(loss, &f, &c, &a, 0, i));
            }
            for i in 0..c.len() {
                check(dc.as_slice().unwrap()[i], fd(loss, &f, &c, &a, 1, i));
            }
            for i in 0..2 * d {
                check(da.alpha[i], fd(loss, &f, &c, &a, 2, i));
                check(da.beta[i], fd(loss, &f, &c, &a, 3, i));
            }
        }
    }

    #[test]
    fn spool_backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array3::from_shape_fn((3, 5, 4), |_| rng.random_range(-2.0..2.0));
        let up = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = s_pool(&x);
        let dx = s_pool_backward(&cache, &up);
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            let a = (s_pool(&xp).0 * &up).sum();
            xp.as_slice_mut().unwrap()[i] -= 2.0 * h;
            let b = (s_pool(&xp).0 * &up).sum();
            let num = (a - b) / (2.0 * h);
            assert!((num - dx.as_slice().unwrap()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn scatter_accumulates_repeated_points() {
        let grouping = Grouping {
            center_indices: vec![1],
            neighbor_indices: vec![1, 0, 1],
            neighbor_dists: vec![0.0, 1.0, 0.0],
            k: 3,
        };
        let df = Array3::ones((1, 3, 2));
        let dc = Array2::from_elem((1, 2), 0.5);
        let out = GroupedFeatures::scatter_grad(&grouping, &df, &dc, 3);
        assert_eq!(out.row(1).to_vec(), vec![2.5, 2.5]);
        assert_eq!(out.row(0).to_vec(), vec![1.0, 1.0]);
        assert_eq!(out.row(2).to_vec(), vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn spool_invariant_under_neighbour_permutation(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (g, k, c) = (3, 7, 4);
            let x = Array3::from_shape_fn((g, k, c), |_| rng.random_range(-5.0..5.0));
            let mut perm: Vec<usize> = (0..k).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let xp = Array3::from_shape_fn((g, k, c), |(gi, j, ch)| x[[gi, perm[j], ch]]);
            let (a, _) = s_pool(&x);
            let (b, _) = s_pool(&xp);
            for (u, v) in a.iter().zip(b.iter()) {
                prop_assert!((u - v).abs() <= 1e-9);
            }
        }
    }
}
