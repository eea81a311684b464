//! One PointKAN stage: grouping, Group-Norm with affine transform, the two
//! pooling branches and the ResP blocks.
//!
//! The per-sample ("local") part runs independently for every cloud; the
//! ResP blocks normalise across the whole batch and therefore run on the
//! stacked pooled features of all samples.

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;

use super::config::{ModelConfig, StageConfig};
use super::gam::{
    group_norm_affine, group_norm_affine_backward, max_pool_neighbors, max_pool_neighbors_backward, s_pool,
    s_pool_backward, AffineParams, GroupNormCache, GroupedFeatures, SPoolCache,
};
use super::lfp::{DwConv, Lfp, LfpCache, PhiSpec, PhiStack};
use super::resp::{BatchStats, Mode, ResPBlock, ResPCache};
use crate::error::{Error, Result};
use crate::geometry::Grouping;
use crate::params::{join, Params};

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    /// Width of the grouped input features.
    pub in_width: usize,
    pub affine: Option<AffineParams>,
    pub lfp: Option<Lfp>,
    pub s_pool: bool,
    pub gfp: Vec<ResPBlock>,
}

/// Intermediate values of the local part for one sample.
#[derive(Debug, Clone)]
pub struct LocalCache {
    n_points: usize,
    grouping: Grouping,
    norm: GroupNormCache,
    lfp: Option<LfpCache>,
    lfp_out: Option<Array3<f64>>,
    max_arg: Vec<usize>,
    spool: Option<SPoolCache>,
    k: usize,
}

impl LocalCache {
    pub(crate) fn kink_pattern(&self, out: &mut Vec<bool>, args: &mut Vec<usize>) {
        if let Some(l) = &self.lfp {
            l.kink_pattern(out);
        }
        args.extend_from_slice(&self.max_arg);
    }

    /// Output of the LFP block, `G × K × 2d`, when the stage has one.
    pub fn lfp_output(&self) -> Option<&Array3<f64>> {
        self.lfp_out.as_ref()
    }

    pub fn grouping(&self) -> &Grouping {
        &self.grouping
    }
}

impl Stage {
    pub fn new(cfg: &ModelConfig, stage: &StageConfig, in_width: usize, rng: &mut impl Rng) -> Result<Self> {
        let width = 2 * in_width;
        let ab = cfg.ablation;
        let lfp = if ab.lfp {
            let spec = PhiSpec {
                backend: stage.backend,
                grid_size: cfg.grid_size,
                spline_order: cfg.spline_order,
                num_degree: cfg.num_degree,
                den_degree: cfg.den_degree,
                groups: cfg.rational_groups,
            };
            let phi = PhiStack::new(&spec, &stage.phi_widths(width), rng)?;
            let dwconv = if ab.dwconv {
                Some(DwConv::new(width, stage.kernel_size, rng)?)
            } else {
                None
            };
            Some(Lfp { phi, dwconv })
        } else {
            None
        };
        let gfp = if ab.gfp {
            (0..stage.gfp_blocks).map(|_| ResPBlock::new(width, rng)).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            in_width,
            affine: ab.affine.then(|| AffineParams::new(in_width)),
            lfp,
            s_pool: ab.s_pool,
            gfp,
        })
    }

    pub fn out_width(&self) -> usize {
        2 * self.in_width
    }

    /// Grouped features `N × d` → pooled `G × 2d`.
    pub fn local_forward(&self, features: ArrayView2<f64>, grouping: &Grouping) -> Result<(Array2<f64>, LocalCache)> {
        if features.ncols() != self.in_width {
            return Err(Error::InvalidArgument(format!(
                "stage expects {} feature channels, got {}",
                self.in_width,
                features.ncols()
            )));
        }
        let gf = GroupedFeatures::gather(features, grouping);
        let (normed, norm) = group_norm_affine(&gf, self.affine.as_ref())?;
        let (lfp, lfp_out) = match &self.lfp {
            Some(l) => {
                let (y, c) = l.forward(&normed)?;
                (Some(c), Some(y))
            }
            None => (None, None),
        };
        let (mut pooled, max_arg) = max_pool_neighbors(lfp_out.as_ref().unwrap_or(&normed));
        let spool = if self.s_pool {
            let (sp, c) = s_pool(&normed);
            pooled += &sp;
            Some(c)
        } else {
            None
        };
        Ok((
            pooled,
            LocalCache {
                n_points: features.nrows(),
                grouping: grouping.clone(),
                norm,
                lfp,
                lfp_out,
                max_arg,
                spool,
                k: grouping.k,
            },
        ))
    }

    /// Returns the gradient with respect to the `N × d` input features and
    /// the parameter gradient of the local part (ResP entries are zero).
    pub fn local_backward(&self, cache: &LocalCache, dpooled: &Array2<f64>) -> Result<(Array2<f64>, Stage)> {
        let mut grad = self.zeros_like();
        let dbranch = max_pool_neighbors_backward(&cache.max_arg, dpooled, cache.k);
        let mut dnormed = match (&self.lfp, &cache.lfp) {
            (Some(l), Some(c)) => {
                let (dx, g) = l.backward(c, &dbranch)?;
                grad.lfp = Some(g);
                dx
            }
            (None, None) => dbranch,
            _ => return Err(Error::Usage("cache does not belong to this stage".into())),
        };
        if let Some(c) = &cache.spool {
            dnormed += &s_pool_backward(c, dpooled);
        }
        let (dfeat, dcent, daff) = group_norm_affine_backward(&cache.norm, self.affine.as_ref(), &dnormed);
        grad.affine = daff;
        let dx = GroupedFeatures::scatter_grad(&cache.grouping, &dfeat, &dcent, cache.n_points);
        Ok((dx, grad))
    }

    /// ResP blocks on stacked pooled features of every sample in the batch.
    pub fn gfp_forward(&self, x: Array2<f64>, mode: Mode) -> Result<(Array2<f64>, Vec<ResPCache>, Vec<BatchStats>)> {
        let mut h = x;
        let mut caches = Vec::with_capacity(self.gfp.len());
        let mut stats = Vec::new();
        for b in &self.gfp {
            let (y, c, s) = b.forward(h.view(), mode)?;
            caches.push(c);
            stats.extend(s);
            h = y;
        }
        Ok((h, caches, stats))
    }

    /// Accumulates ResP gradients into `grad` and returns the input gradient.
    pub fn gfp_backward(&self, caches: &[ResPCache], dy: Array2<f64>, grad: &mut Stage) -> Array2<f64> {
        let mut d = dy;
        for (i, (b, c)) in self.gfp.iter().zip(caches).enumerate().rev() {
            let (dx, g) = b.backward(c, &d);
            grad.gfp[i].accumulate(&g);
            d = dx;
        }
        d
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, b) in self.gfp.iter().enumerate() {
            b.bn.visit_buffers(&join(prefix, &format!("gfp{i}.bn")), f);
        }
    }

    pub fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, b) in self.gfp.iter_mut().enumerate() {
            b.bn.visit_buffers_mut(&join(prefix, &format!("gfp{i}.bn")), f);
        }
    }
}

impl Params for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        if let Some(a) = &self.affine {
            a.visit(&join(prefix, "affine"), f);
        }
        if let Some(l) = &self.lfp {
            l.visit(&join(prefix, "lfp"), f);
        }
        for (i, b) in self.gfp.iter().enumerate() {
            b.visit(&join(prefix, &format!("gfp{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        if let Some(a) = &mut self.affine {
            a.visit_mut(&join(prefix, "affine"), f);
        }
        if let Some(l) = &mut self.lfp {
            l.visit_mut(&join(prefix, "lfp"), f);
        }
        for (i, b) in self.gfp.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("gfp{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::config::Backend;
    use crate::geometry::{farthest_point_sample, knn_group, PointCloud};
    use ndarray::Axis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, backend: Backend) -> (Stage, PointCloud, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig::miniature(3, backend);
        let mut stage = Stage::new(&cfg, &cfg.stages[0], 4, &mut rng).unwrap();
        stage.visit_mut("", &mut |_, s| {
            s.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2))
        });
        let pts: Vec<_> = (0..16)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let feats = Array2::from_shape_fn((16, 4), |_| rng.random_range(-1.0..1.0));
        (stage, PointCloud::new(pts).unwrap(), feats)
    }

    #[test]
    fn output_rows_match_centers() {
        let (stage, cloud, feats) = setup(0, Backend::BSpline);
        let centers = farthest_point_sample(&cloud, 8).unwrap();
        let grouping = knn_group(&cloud, &centers, 4).unwrap();
        let (pooled, _) = stage.local_forward(feats.view(), &grouping).unwrap();
        assert_eq!(pooled.dim(), (8, 8));
        let (out, _, stats) = stage.gfp_forward(pooled, Mode::Train).unwrap();
        assert_eq!(out.dim(), (8, 8));
        assert_eq!(stats.len(), 1);
    }

    #[test]
    fn without_lfp_branch_a_is_max_pool_of_normalised_groups() {
        let (mut stage, cloud, feats) = setup(1, Backend::BSpline);
        stage.lfp = None;
        stage.s_pool = false;
        let centers = farthest_point_sample(&cloud, 8).unwrap();
        let grouping = knn_group(&cloud, &centers, 4).unwrap();
        let (pooled, _) = stage.local_forward(feats.view(), &grouping).unwrap();
        let gf = GroupedFeatures::gather(feats.view(), &grouping);
        let (normed, _) = group_norm_affine(&gf, stage.affine.as_ref()).unwrap();
        let want = normed.fold_axis(Axis(1), f64::NEG_INFINITY, |a, b| a.max(*b));
        assert_eq!(pooled, want);
    }

    #[test]
    fn local_backward_matches_central_differences() {
        for (seed, backend) in [(2, Backend::BSpline), (3, Backend::Rational), (4, Backend::Mlp)] {
            let (stage, cloud, feats) = setup(seed, backend);
            let centers = farthest_point_sample(&cloud, 8).unwrap();
            let grouping = knn_group(&cloud, &centers, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let up = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
            let loss = |s: &Stage, f: &Array2<f64>| (s.local_forward(f.view(), &grouping).unwrap().0 * &up).sum();
            let (_, cache) = stage.local_forward(feats.view(), &grouping).unwrap();
            let (dx, g) = stage.local_backward(&cache, &up).unwrap();
            let h = 1e-5;
            for i in 0..feats.len() {
                let mut fp = feats.clone();
                fp.as_slice_mut().unwrap()[i] += h;
                let a = loss(&stage, &fp);
                fp.as_slice_mut().unwrap()[i] -= 2.0 * h;
                let b = loss(&stage, &fp);
                let num = (a - b) / (2.0 * h);
                let ana = dx.as_slice().unwrap()[i];
                assert!(
                    (num - ana).abs() / num.abs().max(1.0) < 1e-5,
                    "{backend:?} input {i}: {num} vs {ana}"
                );
            }
            let flat = stage.to_flat();
            let gf = g.to_flat();
            let local = stage.param_count() - stage.gfp.iter().map(|b| b.param_count()).sum::<usize>();
            for j in 0..local {
                let mut f = flat.clone();
                let mut sp = stage.clone();
                f[j] += h;
                sp.load_flat(&f);
                let a = loss(&sp, &feats);
                f[j] -= 2.0 * h;
                sp.load_flat(&f);
                let b = loss(&sp, &feats);
                let num = (a - b) / (2.0 * h);
                assert!(
                    (num - gf[j]).abs() / num.abs().max(1.0) < 1e-5,
                    "{backend:?} param {j}: {num} vs {}",
                    gf[j]
                );
            }
        }
    }
}
