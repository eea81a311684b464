//! Central finite-difference verification of analytic gradients.
//!
//! Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, 1)`,
//! so gradients far below unit scale are compared absolutely. Coordinates
//! whose two probes land on different sides of a rectifier or max-pool
//! switch are skipped and replaced by another coordinate of the same block.

use std::fmt;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    group_norm_affine, group_norm_affine_backward, s_pool, s_pool_backward, AffineParams, Backend, DwConv,
    GroupedFeatures, Lfp, Mode, Model, ModelConfig, PhiSpec, PhiStack, ResPBlock, RunningStats, Sample,
};
use crate::error::Result;
use crate::geometry::{farthest_point_sample, knn_group, PointCloud};
use crate::kan::{KanLayer, RationalGroupLayer, SplineGrid};
use crate::params::{join, Params};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub tol: f64,
    /// Coordinates probed per block (all of them when the block is smaller).
    pub coords_per_block: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            coords_per_block: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub size: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "  {:<40} checked {:>3} skipped {:>2} max_rel_err {:.3e} {}",
                b.name,
                b.checked,
                b.skipped,
                b.max_rel_err,
                if b.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares `analytic` against central differences of `loss` around
/// `params`. `loss` returns the scalar loss and a signature of its
/// piecewise-linear branch decisions (use a constant for smooth functions).
pub fn grad_check<P, F>(params: &P, analytic: &P, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    P: Params + Clone,
    F: Fn(&P) -> Result<(f64, u64)>,
{
    let (_, base_sig) = loss(params)?;
    let layout = params.layout();
    let flat = params.to_flat();
    let grad = analytic.to_flat();
    assert_eq!(flat.len(), grad.len(), "gradient layout differs from parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut blocks = Vec::with_capacity(layout.len());
    let mut offset = 0;
    for (name, len) in layout {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        let mut report = BlockReport {
            name,
            size: len,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            passed: true,
        };
        for &k in &order {
            if report.checked >= opts.coords_per_block {
                break;
            }
            let i = offset + k;
            let p = flat[i];
            let h = 1e-5 * p.abs().max(1.0);
            let mut shifted = flat.clone();
            shifted[i] = p + h;
            probe.load_flat(&shifted);
            let (lp, sp) = loss(&probe)?;
            shifted[i] = p - h;
            probe.load_flat(&shifted);
            let (lm, sm) = loss(&probe)?;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let err = relative_error(grad[i], numeric);
            report.max_rel_err = report.max_rel_err.max(if err.is_nan() { f64::INFINITY } else { err });
            report.checked += 1;
        }
        report.passed = report.max_rel_err < opts.tol && (report.checked > 0 || len == 0);
        blocks.push(report);
        offset += len;
    }
    Ok(GradCheckReport { tol: opts.tol, blocks })
}

/// Parameters plus the block input, so input gradients are checked too.
#[derive(Debug, Clone)]
struct WithInput<P> {
    params: P,
    input: Vec<f64>,
}

impl<P: Params> Params for WithInput<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.params.visit(prefix, f);
        f(&join(prefix, "input"), &self.input);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.params.visit_mut(prefix, f);
        f(&join(prefix, "input"), &mut self.input);
    }
}

/// Which block a suite case exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    BSplineKan,
    Rational,
    GroupNorm,
    SPool,
    DwConv,
    Lfp,
    ResP,
    Model,
}

impl CheckKind {
    pub const ALL: [CheckKind; 8] = [
        CheckKind::BSplineKan,
        CheckKind::Rational,
        CheckKind::GroupNorm,
        CheckKind::SPool,
        CheckKind::DwConv,
        CheckKind::Lfp,
        CheckKind::ResP,
        CheckKind::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::BSplineKan => "bspline_kan",
            CheckKind::Rational => "rational",
            CheckKind::GroupNorm => "group_norm_affine",
            CheckKind::SPool => "s_pool",
            CheckKind::DwConv => "dwconv",
            CheckKind::Lfp => "lfp",
            CheckKind::ResP => "resp",
            CheckKind::Model => "model",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub kind: CheckKind,
    pub seed: u64,
    pub description: String,
    pub report: GradCheckReport,
}

fn jitter<P: Params>(p: &mut P, rng: &mut ChaCha8Rng, amount: f64) {
    p.visit_mut("", &mut |_, s| {
        s.iter_mut().for_each(|v| *v += rng.random_range(-amount..amount))
    });
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

/// Dot product in logical element order.
fn project<'a>(y: impl Iterator<Item = &'a f64>, u: &[f64]) -> f64 {
    y.zip(u).map(|(a, b)| a * b).sum()
}

/// Runs one randomly drawn configuration of `kind`. The loss is a fixed
/// random projection of the block output.
pub fn check_case(kind: CheckKind, seed: u64, opts: &GradCheckOptions) -> Result<CaseReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let opts = GradCheckOptions { seed, ..*opts };
    let (description, report) = match kind {
        CheckKind::BSplineKan => {
            let (di, dout, rows) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..4));
            let order = rng.random_range(1..4);
            let grid = SplineGrid::symmetric(rng.random_range(3..7), order)?;
            let mut layer = KanLayer::new(di, dout, grid, &mut rng);
            jitter(&mut layer, &mut rng, 0.3);
            let x = uniform(&mut rng, rows * di, 1.2);
            let u = uniform(&mut rng, rows * dout, 1.0);
            let f = |b: &WithInput<KanLayer>| -> Result<(f64, u64)> {
                let xa = Array2::from_shape_vec((rows, di), b.input.clone()).expect("shape");
                let (y, _) = b.params.forward_batch(xa.view())?;
                Ok((project(y.iter(), &u), 0))
            };
            let xa = Array2::from_shape_vec((rows, di), x.clone()).expect("shape");
            let (_, cache) = layer.forward_batch(xa.view())?;
            let ua = Array2::from_shape_vec((rows, dout), u.clone()).expect("shape");
            let (dx, g) = layer.backward(&cache, ua.view())?;
            let point = WithInput {
                params: layer,
                input: x,
            };
            let grad = WithInput {
                params: g,
                input: dx.iter().copied().collect(),
            };
            (
                format!("{di}->{dout} order {order}"),
                grad_check(&point, &grad, f, &opts)?,
            )
        }
        CheckKind::Rational => {
            let groups = rng.random_range(1..3);
            let di = groups * rng.random_range(1..3);
            let (dout, rows) = (rng.random_range(1..4), rng.random_range(1..4));
            let mut layer = RationalGroupLayer::new(di, dout, groups, 5, 4, &mut rng)?;
            jitter(&mut layer, &mut rng, 0.4);
            let x = uniform(&mut rng, rows * di, 1.5);
            let u = uniform(&mut rng, rows * dout, 1.0);
            let f = |b: &WithInput<RationalGroupLayer>| -> Result<(f64, u64)> {
                let xa = Array2::from_shape_vec((rows, di), b.input.clone()).expect("shape");
                let (y, _) = b.params.forward_batch(xa.view())?;
                Ok((project(y.iter(), &u), 0))
            };
            let xa = Array2::from_shape_vec((rows, di), x.clone()).expect("shape");
            let (_, cache) = layer.forward_batch(xa.view())?;
            let ua = Array2::from_shape_vec((rows, dout), u.clone()).expect("shape");
            let (dx, g) = layer.backward(&cache, ua.view())?;
            let point = WithInput {
                params: layer,
                input: x,
            };
            let grad = WithInput {
                params: g,
                input: dx.iter().copied().collect(),
            };
            (
                format!("{di}->{dout} groups {groups}"),
                grad_check(&point, &grad, f, &opts)?,
            )
        }
        CheckKind::GroupNorm => {
            let (n, gsz, k, d) = (
                12,
                rng.random_range(1..5),
                rng.random_range(2..7),
                rng.random_range(1..5),
            );
            let cloud = random_cloud(&mut rng, n)?;
            let centers = farthest_point_sample(&cloud, gsz)?;
            let grouping = knn_group(&cloud, &centers, k)?;
            let mut affine = AffineParams::new(d);
            jitter(&mut affine, &mut rng, 0.5);
            let feats = uniform(&mut rng, n * d, 1.0);
            let u = uniform(&mut rng, gsz * k * 2 * d, 1.0);
            let f = |b: &WithInput<AffineParams>| -> Result<(f64, u64)> {
                let fa = Array2::from_shape_vec((n, d), b.input.clone()).expect("shape");
                let gf = GroupedFeatures::gather(fa.view(), &grouping);
                let (y, _) = group_norm_affine(&gf, Some(&b.params))?;
                Ok((project(y.iter(), &u), 0))
            };
            let fa = Array2::from_shape_vec((n, d), feats.clone()).expect("shape");
            let gf = GroupedFeatures::gather(fa.view(), &grouping);
            let (_, cache) = group_norm_affine(&gf, Some(&affine))?;
            let ua = Array3::from_shape_vec((gsz, k, 2 * d), u.clone()).expect("shape");
            let (dfeat, dcent, da) = group_norm_affine_backward(&cache, Some(&affine), &ua);
            let dx = GroupedFeatures::scatter_grad(&grouping, &dfeat, &dcent, n);
            let point = WithInput {
                params: affine,
                input: feats,
            };
            let grad = WithInput {
                params: da.expect("affine gradient"),
                input: dx.iter().copied().collect(),
            };
            (format!("G {gsz} K {k} d {d}"), grad_check(&point, &grad, f, &opts)?)
        }
        CheckKind::SPool => {
            let (gsz, k, c) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..9));
            let x = uniform(&mut rng, gsz * k * c, 2.0);
            let u = uniform(&mut rng, gsz * c, 1.0);
            let f = |b: &WithInput<AffineParams>| -> Result<(f64, u64)> {
                let xa = Array3::from_shape_vec((gsz, k, c), b.input.clone()).expect("shape");
                let (y, _) = s_pool(&xa);
                Ok((project(y.iter(), &u), 0))
            };
            let xa = Array3::from_shape_vec((gsz, k, c), x.clone()).expect("shape");
            let (_, cache) = s_pool(&xa);
            let ua = Array2::from_shape_vec((gsz, c), u.clone()).expect("shape");
            let dx = s_pool_backward(&cache, &ua);
            // No parameters: an empty affine block carries the input.
            let empty = AffineParams::new(0);
            let point = WithInput {
                params: empty.clone(),
                input: x,
            };
            let grad = WithInput {
                params: empty,
                input: dx.iter().copied().collect(),
            };
            (format!("G {gsz} K {k} C {c}"), grad_check(&point, &grad, f, &opts)?)
        }
        CheckKind::DwConv => {
            let (gsz, k, c) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..9));
            let w = [1, 3, 5][rng.random_range(0..3)];
            let mut conv = DwConv::new(c, w, &mut rng)?;
            jitter(&mut conv, &mut rng, 0.3);
            let x = uniform(&mut rng, gsz * k * c, 1.0);
            let u = uniform(&mut rng, gsz * k * c, 1.0);
            let f = |b: &WithInput<DwConv>| -> Result<(f64, u64)> {
                let xa = Array3::from_shape_vec((gsz, k, c), b.input.clone()).expect("shape");
                let y = b.params.forward(&xa)?;
                Ok((project(y.iter(), &u), 0))
            };
            let xa = Array3::from_shape_vec((gsz, k, c), x.clone()).expect("shape");
            let ua = Array3::from_shape_vec((gsz, k, c), u.clone()).expect("shape");
            let (dx, g) = conv.backward(&xa, &ua);
            let point = WithInput { params: conv, input: x };
            let grad = WithInput {
                params: g,
                input: dx.iter().copied().collect(),
            };
            (
                format!("G {gsz} K {k} C {c} width {w}"),
                grad_check(&point, &grad, f, &opts)?,
            )
        }
        CheckKind::Lfp => {
            let backend = [Backend::BSpline, Backend::Rational, Backend::Mlp][(seed % 3) as usize];
            let (gsz, k) = (rng.random_range(1..5), rng.random_range(1..7));
            let c = 2 * rng.random_range(1..5);
            let spec = PhiSpec {
                backend,
                grid_size: 5,
                spline_order: 3,
                num_degree: 5,
                den_degree: 4,
                groups: if c % 4 == 0 { 2 } else { 1 },
            };
            let mut lfp = Lfp {
                phi: PhiStack::new(&spec, &[c, c / 2, c / 2, c], &mut rng)?,
                dwconv: Some(DwConv::new(c, 3, &mut rng)?),
            };
            jitter(&mut lfp, &mut rng, 0.2);
            let x = uniform(&mut rng, gsz * k * c, 1.0);
            let u = uniform(&mut rng, gsz * k * c, 1.0);
            let f = |b: &WithInput<Lfp>| -> Result<(f64, u64)> {
                let xa = Array3::from_shape_vec((gsz, k, c), b.input.clone()).expect("shape");
                let (y, cache) = b.params.forward(&xa)?;
                let mut bits = Vec::new();
                cache.kink_pattern(&mut bits);
                Ok((project(y.iter(), &u), signature(&bits, &[])))
            };
            let xa = Array3::from_shape_vec((gsz, k, c), x.clone()).expect("shape");
            let (_, cache) = lfp.forward(&xa)?;
            let ua = Array3::from_shape_vec((gsz, k, c), u.clone()).expect("shape");
            let (dx, g) = lfp.backward(&cache, &ua)?;
            let point = WithInput { params: lfp, input: x };
            let grad = WithInput {
                params: g,
                input: dx.iter().copied().collect(),
            };
            (
                format!("{backend} G {gsz} K {k} C {c}"),
                grad_check(&point, &grad, f, &opts)?,
            )
        }
        CheckKind::ResP => {
            let c = rng.random_range(1..9);
            let rows = rng.random_range(2..7);
            let mode = if seed.is_multiple_of(2) {
                Mode::Eval
            } else {
                Mode::Train
            };
            let mut block = ResPBlock::new(c, &mut rng);
            jitter(&mut block, &mut rng, 0.3);
            block.bn.running = Some(RunningStats {
                mean: uniform(&mut rng, c, 0.5),
                var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
            });
            let x = uniform(&mut rng, rows * c, 1.5);
            let u = uniform(&mut rng, rows * c, 1.0);
            let f = |b: &WithInput<ResPBlock>| -> Result<(f64, u64)> {
                let xa = Array2::from_shape_vec((rows, c), b.input.clone()).expect("shape");
                let (y, cache, _) = b.params.forward(xa.view(), mode)?;
                let mut bits = Vec::new();
                cache.kink_pattern(&mut bits);
                Ok((project(y.iter(), &u), signature(&bits, &[])))
            };
            let xa = Array2::from_shape_vec((rows, c), x.clone()).expect("shape");
            let (_, cache, _) = block.forward(xa.view(), mode)?;
            let ua = Array2::from_shape_vec((rows, c), u.clone()).expect("shape");
            let (dx, g) = block.backward(&cache, &ua);
            let point = WithInput {
                params: block,
                input: x,
            };
            let grad = WithInput {
                params: g,
                input: dx.iter().copied().collect(),
            };
            (
                format!("C {c} rows {rows} {mode:?}"),
                grad_check(&point, &grad, f, &opts)?,
            )
        }
        CheckKind::Model => {
            let backend = [Backend::BSpline, Backend::Rational, Backend::Mlp][(seed % 3) as usize];
            let cfg = ModelConfig::miniature(3, backend);
            let mut model = Model::new(cfg, &mut rng)?;
            jitter(&mut model, &mut rng, 0.1);
            for s in &mut model.stages {
                for b in &mut s.gfp {
                    let c = b.bn.channels();
                    b.bn.running = Some(RunningStats {
                        mean: uniform(&mut rng, c, 0.3),
                        var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
                    });
                }
            }
            let clouds = [random_cloud(&mut rng, 16)?, random_cloud(&mut rng, 16)?];
            let plans = clouds.iter().map(|c| model.plan(c)).collect::<Result<Vec<_>>>()?;
            let batch: Vec<Sample> = clouds
                .iter()
                .zip(&plans)
                .map(|(cloud, plan)| Sample { cloud, plan })
                .collect();
            let u = Array2::from_shape_vec((2, 3), uniform(&mut rng, 6, 1.0)).expect("shape");
            let f = |m: &Model| -> Result<(f64, u64)> {
                let (y, cache, _) = m.forward_batch(&batch, Mode::Eval)?;
                Ok(((&y * &u).sum(), cache.kink_signature()))
            };
            let (_, cache, _) = model.forward_batch(&batch, Mode::Eval)?;
            let g = model.backward(&cache, &u)?;
            (format!("2-stage {backend}"), grad_check(&model, &g, f, &opts)?)
        }
    };
    Ok(CaseReport {
        kind,
        seed,
        description,
        report,
    })
}

/// `cases_per_kind` seeded configurations of every block kind, seeds
/// `base_seed..base_seed + cases_per_kind`.
pub fn gradcheck_suite(base_seed: u64, cases_per_kind: usize, opts: &GradCheckOptions) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    for kind in CheckKind::ALL {
        for i in 0..cases_per_kind as u64 {
            out.push(check_case(kind, base_seed + i, opts)?);
        }
    }
    Ok(out)
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Result<PointCloud> {
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
}

fn signature(bits: &[bool], args: &[usize]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    bits.hash(&mut h);
    args.hash(&mut h);
    h.finish()
}
