//! The full classifier: a shared per-point embedding, the stage stack, global
//! max+mean pooling and a two-layer head producing raw class scores.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use super::config::ModelConfig;
use super::linear::{relu, relu_backward, Linear};
use super::resp::{BatchStats, Mode, ResPCache, RunningStats};
use super::stage::{LocalCache, Stage};
use crate::error::{ensure_arg, Error, Result};
use crate::geometry::{farthest_point_sample, knn_group, Grouping, PointCloud};
use crate::params::{join, Params};

/// Geometry of one cloud through every stage. Stage `s` indexes into the
/// centers kept by stage `s - 1` (the input cloud for the first stage).
/// It depends only on coordinates, so it can be computed once per cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub groupings: Vec<Grouping>,
}

/// A cloud paired with its precomputed plan.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub cloud: &'a PointCloud,
    pub plan: &'a SamplePlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Linear,
    pub stages: Vec<Stage>,
    pub head1: Linear,
    pub head2: Linear,
}

/// Everything the backward pass needs from one batched forward pass.
#[derive(Debug, Clone)]
pub struct ModelCache {
    batch: usize,
    coords: Vec<Array2<f64>>,
    /// `[stage][sample]`.
    locals: Vec<Vec<LocalCache>>,
    resp: Vec<Vec<ResPCache>>,
    rows: Vec<usize>,
    final_argmax: Vec<Vec<usize>>,
    global: Array2<f64>,
    head_pre: Array2<f64>,
    head_hidden: Array2<f64>,
}

impl ModelCache {
    /// Hash of every piecewise-linear branch decision (rectifier signs and
    /// max-pool winners). Equal hashes at two parameter settings mean the
    /// network is smooth on the segment between them for practical purposes.
    pub fn kink_signature(&self) -> u64 {
        let mut bits = Vec::new();
        let mut args = Vec::new();
        for stage in &self.locals {
            for c in stage {
                c.kink_pattern(&mut bits, &mut args);
            }
        }
        for stage in &self.resp {
            for c in stage {
                c.kink_pattern(&mut bits);
            }
        }
        for a in &self.final_argmax {
            args.extend_from_slice(a);
        }
        bits.extend(self.head_pre.iter().map(|v| *v > 0.0));
        let mut h = DefaultHasher::new();
        bits.hash(&mut h);
        args.hash(&mut h);
        h.finish()
    }

    /// First-stage local caches, one per sample.
    pub fn first_stage(&self) -> &[LocalCache] {
        &self.locals[0]
    }
}

impl Model {
    /// Builds a model with fresh parameters and unit running statistics.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let widths = config.stage_widths();
        let embed = Linear::new(3, config.embed_dim, rng);
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, sc) in config.stages.iter().enumerate() {
            let mut st = Stage::new(&config, sc, widths[i], rng)?;
            for b in &mut st.gfp {
                b.bn.running = Some(RunningStats::unit(b.bn.channels()));
            }
            stages.push(st);
        }
        let out = *widths.last().expect("nonempty");
        let head1 = Linear::new(2 * out, config.head_hidden, rng);
        let head2 = Linear::new(config.head_hidden, config.classes, rng);
        Ok(Self {
            config,
            embed,
            stages,
            head1,
            head2,
        })
    }

    /// Runs sampling and grouping for every stage.
    pub fn plan(&self, cloud: &PointCloud) -> Result<SamplePlan> {
        let mut current = cloud.clone();
        let mut groupings = Vec::with_capacity(self.config.stages.len());
        for sc in &self.config.stages {
            let centers = farthest_point_sample(&current, sc.centers)?;
            let g = knn_group(&current, &centers, sc.neighbors)?;
            current = current.select(&centers);
            groupings.push(g);
        }
        Ok(SamplePlan { groupings })
    }

    /// Evaluation-mode scores for one cloud.
    pub fn forward(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let plan = self.plan(cloud)?;
        let (scores, _, _) = self.forward_batch(&[Sample { cloud, plan: &plan }], Mode::Eval)?;
        Ok(scores.row(0).to_vec())
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<usize> {
        Ok(argmax(&self.forward(cloud)?))
    }

    fn check_plan(&self, sample: &Sample) -> Result<()> {
        ensure_arg!(
            sample.plan.groupings.len() == self.stages.len(),
            "plan has {} stages, model has {}",
            sample.plan.groupings.len(),
            self.stages.len()
        );
        let mut available = sample.cloud.len();
        for (g, sc) in sample.plan.groupings.iter().zip(&self.config.stages) {
            ensure_arg!(
                g.groups() == sc.centers && g.k == sc.neighbors,
                "plan grouping {}x{} does not match stage {}x{}",
                g.groups(),
                g.k,
                sc.centers,
                sc.neighbors
            );
            ensure_arg!(
                g.neighbor_indices
                    .iter()
                    .chain(&g.center_indices)
                    .all(|&i| i < available),
                "plan indices exceed the available points"
            );
            available = sc.centers;
        }
        if let Some(l) = sample.cloud.label {
            ensure_arg!(
                l < self.config.classes,
                "label {l} outside the model's {} classes",
                self.config.classes
            );
        }
        Ok(())
    }

    /// Scores `B × classes` for a batch. Batch statistics produced in
    /// training mode are returned in stage order, ready for
    /// [`Model::update_running`].
    pub fn forward_batch(&self, batch: &[Sample], mode: Mode) -> Result<(Array2<f64>, ModelCache, Vec<BatchStats>)> {
        ensure_arg!(!batch.is_empty(), "empty batch");
        for s in batch {
            self.check_plan(s)?;
        }
        let coords: Vec<Array2<f64>> = batch
            .iter()
            .map(|s| {
                let p = s.cloud.points();
                Array2::from_shape_fn((p.len(), 3), |(i, j)| p[i][j])
            })
            .collect();
        let mut feats = coords
            .par_iter()
            .map(|c| self.embed.forward(c.view()))
            .collect::<Result<Vec<_>>>()?;
        let mut locals = Vec::with_capacity(self.stages.len());
        let mut resp = Vec::with_capacity(self.stages.len());
        let mut rows = Vec::with_capacity(self.stages.len());
        let mut all_stats = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            let results = feats
                .par_iter()
                .zip(batch.par_iter())
                .map(|(f, s)| stage.local_forward(f.view(), &s.plan.groupings[si]))
                .collect::<Result<Vec<_>>>()?;
            let g = results[0].0.nrows();
            let views: Vec<ArrayView2<f64>> = results.iter().map(|(p, _)| p.view()).collect();
            let stacked = concatenate(Axis(0), &views).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let (out, rc, stats) = stage.gfp_forward(stacked, mode)?;
            all_stats.extend(stats);
            feats = (0..batch.len())
                .map(|b| out.slice(s![b * g..(b + 1) * g, ..]).to_owned())
                .collect();
            locals.push(results.into_iter().map(|(_, c)| c).collect());
            resp.push(rc);
            rows.push(g);
        }
        let c = feats[0].ncols();
        let mut global = Array2::zeros((batch.len(), 2 * c));
        let mut final_argmax = Vec::with_capacity(batch.len());
        for (b, f) in feats.iter().enumerate() {
            let mut arg = vec![0; c];
            for ch in 0..c {
                let col = f.column(ch);
                let mut best = 0;
                for i in 1..col.len() {
                    if col[i] > col[best] {
                        best = i;
                    }
                }
                arg[ch] = best;
                global[[b, ch]] = col[best];
                global[[b, c + ch]] = col.sum() / col.len() as f64;
            }
            final_argmax.push(arg);
        }
        let head_pre = self.head1.forward(global.view())?;
        let head_hidden = relu(&head_pre);
        let scores = self.head2.forward(head_hidden.view())?;
        Ok((
            scores,
            ModelCache {
                batch: batch.len(),
                coords,
                locals,
                resp,
                rows,
                final_argmax,
                global,
                head_pre,
                head_hidden,
            },
            all_stats,
        ))
    }

    /// Gradient of `sum(dscores ⊙ scores)` with respect to every parameter.
    /// Per-sample contributions are summed in batch order.
    pub fn backward(&self, cache: &ModelCache, dscores: &Array2<f64>) -> Result<Model> {
        if dscores.dim() != (cache.batch, self.config.classes) {
            return Err(Error::Usage(
                "score gradient shape does not match cached forward".into(),
            ));
        }
        let mut grad = self.zeros_like();
        let (dh, g2) = self.head2.backward(cache.head_hidden.view(), dscores.view());
        grad.head2 = g2;
        let dpre = relu_backward(&cache.head_pre, &dh);
        let (dglobal, g1) = self.head1.backward(cache.global.view(), dpre.view());
        grad.head1 = g1;

        let last_rows = *cache.rows.last().expect("stages");
        let c = dglobal.ncols() / 2;
        let mut dfeats: Vec<Array2<f64>> = (0..cache.batch)
            .map(|b| {
                let mut d = Array2::zeros((last_rows, c));
                for ch in 0..c {
                    let mean_grad = dglobal[[b, c + ch]] / last_rows as f64;
                    d.column_mut(ch).fill(mean_grad);
                    d[[cache.final_argmax[b][ch], ch]] += dglobal[[b, ch]];
                }
                d
            })
            .collect();

        for (si, stage) in self.stages.iter().enumerate().rev() {
            let views: Vec<ArrayView2<f64>> = dfeats.iter().map(|d| d.view()).collect();
            let stacked = concatenate(Axis(0), &views).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let dpooled = stage.gfp_backward(&cache.resp[si], stacked, &mut grad.stages[si]);
            let g = cache.rows[si];
            let results = cache.locals[si]
                .par_iter()
                .enumerate()
                .map(|(b, lc)| stage.local_backward(lc, &dpooled.slice(s![b * g..(b + 1) * g, ..]).to_owned()))
                .collect::<Result<Vec<_>>>()?;
            dfeats = Vec::with_capacity(results.len());
            for (dx, sg) in results {
                grad.stages[si].accumulate(&sg);
                dfeats.push(dx);
            }
        }
        for (coords, d) in cache.coords.iter().zip(&dfeats) {
            let (_, g) = self.embed.backward(coords.view(), d.view());
            grad.embed.accumulate(&g);
        }
        Ok(grad)
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &[BatchStats]) -> Result<()> {
        let mut it = stats.iter();
        for stage in &mut self.stages {
            for b in &mut stage.gfp {
                let s = it
                    .next()
                    .ok_or_else(|| Error::Usage("fewer batch statistics than normalisation layers".into()))?;
                b.bn.update_running(s);
            }
        }
        if it.next().is_some() {
            return Err(Error::Usage("more batch statistics than normalisation layers".into()));
        }
        Ok(())
    }

    /// Non-trainable state (running statistics), in a fixed order.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_buffers(&format!("stage{}", i + 1), f);
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_buffers_mut(&format!("stage{}", i + 1), f);
        }
    }

    /// Sets every running statistic to mean 0, variance 1.
    pub fn reset_running(&mut self) {
        for s in &mut self.stages {
            for b in &mut s.gfp {
                b.bn.running = Some(RunningStats::unit(b.bn.channels()));
            }
        }
    }
}

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.head1.visit(&join(prefix, "head1"), f);
        self.head2.visit(&join(prefix, "head2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.head1.visit_mut(&join(prefix, "head1"), f);
        self.head2.visit_mut(&join(prefix, "head2"), f);
    }
}

/// Index of the largest score (first on ties).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::config::{Ablation, Backend};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn scores_have_class_count_and_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for backend in [Backend::BSpline, Backend::Rational, Backend::Mlp] {
            let model = Model::new(ModelConfig::miniature(5, backend), &mut rng).unwrap();
            let cloud = random_cloud(&mut rng, 16);
            let a = model.forward(&cloud).unwrap();
            let b = model.forward(&cloud).unwrap();
            assert_eq!(a.len(), 5);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn permutation_invariant_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(ModelConfig::miniature(3, Backend::BSpline), &mut rng).unwrap();
        let cloud = random_cloud(&mut rng, 20);
        let mut pts = cloud.points().to_vec();
        pts.shuffle(&mut rng);
        let a = model.forward(&cloud).unwrap();
        let b = model.forward(&PointCloud::new(pts).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn rejects_small_clouds_and_bad_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::new(ModelConfig::miniature(3, Backend::BSpline), &mut rng).unwrap();
        assert!(matches!(
            model.forward(&random_cloud(&mut rng, 5)),
            Err(Error::InvalidArgument(_))
        ));
        let cloud = random_cloud(&mut rng, 16).with_label(3);
        assert!(matches!(model.forward(&cloud), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn batched_eval_equals_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::new(ModelConfig::miniature(3, Backend::Rational), &mut rng).unwrap();
        let clouds: Vec<_> = (0..3).map(|_| random_cloud(&mut rng, 16)).collect();
        let plans: Vec<_> = clouds.iter().map(|c| model.plan(c).unwrap()).collect();
        let batch: Vec<_> = clouds
            .iter()
            .zip(&plans)
            .map(|(cloud, plan)| Sample { cloud, plan })
            .collect();
        let (scores, _, _) = model.forward_batch(&batch, Mode::Eval).unwrap();
        for (i, c) in clouds.iter().enumerate() {
            assert_eq!(scores.row(i).to_vec(), model.forward(c).unwrap());
        }
    }

    #[test]
    fn ablation_param_deltas() {
        let base = ModelConfig::toy(3, Backend::BSpline);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let full = Model::new(base.clone(), &mut rng).unwrap();
        let widths = base.stage_widths();
        let with = |f: fn(&mut Ablation)| {
            let mut c = base.clone();
            f(&mut c.ablation);
            Model::new(c, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().param_count()
        };
        let n = full.param_count();
        let affine: usize = widths[..4].iter().map(|d| 4 * d).sum();
        assert_eq!(n - with(|a| a.affine = false), affine);
        assert_eq!(n - with(|a| a.s_pool = false), 0);
        let dw: usize = widths[..4].iter().map(|d| 2 * d * (3 + 1)).sum();
        assert_eq!(n - with(|a| a.dwconv = false), dw);
        let lfp: usize = full.stages.iter().map(|s| s.lfp.as_ref().unwrap().param_count()).sum();
        assert_eq!(n - with(|a| a.lfp = false), lfp);
        let gfp: usize = full.stages.iter().flat_map(|s| &s.gfp).map(|b| b.param_count()).sum();
        assert_eq!(n - with(|a| a.gfp = false), gfp);
    }

    #[test]
    fn rational_model_is_smaller() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Model::new(ModelConfig::toy(3, Backend::BSpline), &mut rng).unwrap();
        let r = Model::new(ModelConfig::toy(3, Backend::Rational), &mut rng).unwrap();
        assert!(r.param_count() < b.param_count());
    }

    #[test]
    fn running_stats_update_in_stage_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = Model::new(ModelConfig::miniature(3, Backend::Mlp), &mut rng).unwrap();
        let clouds: Vec<_> = (0..2).map(|_| random_cloud(&mut rng, 16)).collect();
        let plans: Vec<_> = clouds.iter().map(|c| model.plan(c).unwrap()).collect();
        let batch: Vec<_> = clouds
            .iter()
            .zip(&plans)
            .map(|(cloud, plan)| Sample { cloud, plan })
            .collect();
        let (_, _, stats) = model.forward_batch(&batch, Mode::Train).unwrap();
        assert_eq!(stats.len(), 2);
        model.update_running(&stats).unwrap();
        assert!(model.update_running(&stats[..1]).is_err());
        let mut names = Vec::new();
        model.visit_buffers(&mut |n, _| names.push(n.to_string()));
        assert_eq!(names[0], "stage1.gfp0.bn.running_mean");
    }
}
