//! Per-point sensitivity of the first-stage LFP block.

use std::cmp::Ordering;

use ndarray::{s, Array2};

use super::model::Model;
use crate::error::{ensure_arg, Error, Result};
use crate::geometry::{farthest_point_sample, knn_group, PointCloud};

/// For every input point, the sum of the L2 norms of the first-stage LFP
/// output vectors at each `(group, slot)` where the point occurs. Points in
/// no group score 0.
pub fn sensitivity_scores(model: &Model, cloud: &PointCloud) -> Result<Vec<f64>> {
    let stage = &model.stages[0];
    let sc = &model.config.stages[0];
    let lfp = stage
        .lfp
        .as_ref()
        .ok_or_else(|| Error::Usage("model has no first-stage LFP block".into()))?;
    let centers = farthest_point_sample(cloud, sc.centers)?;
    let grouping = knn_group(cloud, &centers, sc.neighbors)?;
    let p = cloud.points();
    let coords = Array2::from_shape_fn((p.len(), 3), |(i, j)| p[i][j]);
    let feats = model.embed.forward(coords.view())?;
    let gf = super::gam::GroupedFeatures::gather(feats.view(), &grouping);
    let (normed, _) = super::gam::group_norm_affine(&gf, stage.affine.as_ref())?;
    let (out, _) = lfp.forward(&normed)?;
    let mut scores = vec![0.0; cloud.len()];
    for gi in 0..grouping.groups() {
        for (j, &n) in grouping.neighbors(gi).iter().enumerate() {
            let v = out.slice(s![gi, j, ..]);
            scores[n] += v.dot(&v).sqrt();
        }
    }
    Ok(scores)
}

/// Flags the points strictly above the given percentile (0..=100): exactly
/// `ceil((100 - percentile) / 100 * N)` points, highest scores first, ties
/// resolved towards the smaller index.
pub fn percentile_flags(scores: &[f64], percentile: f64) -> Result<Vec<bool>> {
    ensure_arg!(
        (0.0..=100.0).contains(&percentile),
        "percentile must lie in [0, 100], got {percentile}"
    );
    let n = scores.len();
    let count = (((100.0 - percentile) * n as f64) / 100.0 - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut flags = vec![false; n];
    for &i in order.iter().take(count.min(n)) {
        flags[i] = true;
    }
    Ok(flags)
}
