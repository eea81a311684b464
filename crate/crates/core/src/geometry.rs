//! Point clouds, normalisation, farthest point sampling and KNN grouping.
//!
//! Every selection here is deterministic and depends only on coordinates:
//! ties are broken by lexicographic coordinate order, then by index. That
//! makes the sampled *geometric* points independent of the input order, which
//! the model-level permutation invariance relies on.

use std::cmp::Ordering;

use crate::error::{ensure_arg, Error, Result};

pub type Point = [f64; 3];

/// A set of 3-D points with an optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput(
                "point cloud must contain at least one point".into(),
            ));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points, label: None })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The sub-cloud at `indices`, in that order, without a label.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            label: None,
        }
    }

    /// Mean of the points, summed in lexicographic order so the result is
    /// bit-identical for any permutation of the same points.
    pub fn centroid(&self) -> Point {
        let mut sorted: Vec<&Point> = self.points.iter().collect();
        sorted.sort_by(|a, b| lex_cmp(a, b));
        let mut c = [0.0; 3];
        for p in sorted {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }
}

/// Result of sampling `G` centers and gathering `K` neighbours for each.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub center_indices: Vec<usize>,
    /// Row-major `G × K`.
    pub neighbor_indices: Vec<usize>,
    /// Row-major `G × K`, Euclidean, nondecreasing along each row.
    pub neighbor_dists: Vec<f64>,
    pub k: usize,
}

impl Grouping {
    pub fn groups(&self) -> usize {
        self.center_indices.len()
    }

    pub fn neighbors(&self, g: usize) -> &[usize] {
        &self.neighbor_indices[g * self.k..(g + 1) * self.k]
    }

    pub fn dists(&self, g: usize) -> &[f64] {
        &self.neighbor_dists[g * self.k..(g + 1) * self.k]
    }
}

pub(crate) fn lex_cmp(a: &Point, b: &Point) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Subtracts the centroid and scales so the farthest point has norm 1.
/// A cloud whose points all coincide maps to the origin.
pub fn centroid_normalize(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::InvalidInput("non-finite coordinate".into()));
    }
    let c = cloud.centroid();
    let mut points: Vec<Point> = cloud
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let max_norm = points
        .iter()
        .map(|p| dist2(p, &[0.0; 3]).sqrt())
        .fold(0.0_f64, f64::max);
    if max_norm > 0.0 {
        for p in &mut points {
            for v in p.iter_mut() {
                *v /= max_norm;
            }
        }
    } else {
        points.iter_mut().for_each(|p| *p = [0.0; 3]);
    }
    Ok(PointCloud {
        points,
        label: cloud.label,
    })
}

/// `true` when candidate `(d, p, i)` should replace the current best `(bd, bp, bi)`
/// under "largest distance, then lexicographically smallest point, then
/// smallest index".
fn beats(d: f64, p: &Point, i: usize, bd: f64, bp: &Point, bi: usize) -> bool {
    match d.partial_cmp(&bd).unwrap_or(Ordering::Equal) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => match lex_cmp(p, bp) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => i < bi,
        },
    }
}

/// Greedy farthest point sampling of `count` distinct indices.
///
/// The seed is the point farthest from the centroid; each later pick
/// maximises the minimum distance to the points already chosen.
pub fn farthest_point_sample(cloud: &PointCloud, count: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    ensure_arg!(count >= 1 && count <= n, "sample count {count} must lie in 1..={n}");
    let pts = cloud.points();
    let c = cloud.centroid();

    let mut seed = 0;
    let mut best = dist2(&pts[0], &c);
    for (i, p) in pts.iter().enumerate().skip(1) {
        let d = dist2(p, &c);
        if beats(d, p, i, best, &pts[seed], seed) {
            seed = i;
            best = d;
        }
    }

    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(count);
    let mut last = seed;
    chosen[seed] = true;
    out.push(seed);
    while out.len() < count {
        let mut pick: Option<usize> = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let d = dist2(&pts[i], &pts[last]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            pick = match pick {
                Some(b) if !beats(min_d[i], &pts[i], i, min_d[b], &pts[b], b) => Some(b),
                _ => Some(i),
            };
        }
        let p = pick.expect("unchosen point exists while out.len() < n");
        chosen[p] = true;
        out.push(p);
        last = p;
    }
    Ok(out)
}

/// The `k` nearest points to each center, nearest first.
///
/// The center is always its own first neighbour; other ties are broken by
/// lexicographic coordinate order, then index.
pub fn knn_group(cloud: &PointCloud, centers: &[usize], k: usize) -> Result<Grouping> {
    let n = cloud.len();
    ensure_arg!(k >= 1 && k <= n, "neighbour count {k} must lie in 1..={n}");
    if let Some(&bad) = centers.iter().find(|&&c| c >= n) {
        return Err(Error::InvalidArgument(format!(
            "center index {bad} out of range for {n} points"
        )));
    }
    let pts = cloud.points();
    let mut neighbor_indices = Vec::with_capacity(centers.len() * k);
    let mut neighbor_dists = Vec::with_capacity(centers.len() * k);
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(n);
    for &c in centers {
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| (a.1 != c).cmp(&(b.1 != c)))
                .then_with(|| lex_cmp(&pts[a.1], &pts[b.1]))
                .then_with(|| a.1.cmp(&b.1))
        };
        keyed.clear();
        keyed.extend(pts.iter().enumerate().map(|(i, p)| (dist2(p, &pts[c]), i)));
        if k < n {
            keyed.select_nth_unstable_by(k - 1, cmp);
        }
        let row = &mut keyed[..k];
        row.sort_by(cmp);
        for &(d2, i) in row.iter() {
            neighbor_indices.push(i);
            neighbor_dists.push(d2.sqrt());
        }
    }
    Ok(Grouping {
        center_indices: centers.to_vec(),
        neighbor_indices,
        neighbor_dists,
        k,
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force references, written independently of the incremental
    //! implementations above.
    use super::*;

    fn better(a: (f64, Point, usize), b: (f64, Point, usize)) -> bool {
        if a.0 != b.0 {
            return a.0 > b.0;
        }
        for k in 0..3 {
            if a.1[k] != b.1[k] {
                return a.1[k] < b.1[k];
            }
        }
        a.2 < b.2
    }

    pub fn fps(points: &[Point], count: usize) -> Vec<usize> {
        let n = points.len() as f64;
        // Centroid from a lexicographically sorted copy, matching the
        // permutation-stable definition.
        let mut sorted = points.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut c = [0.0; 3];
        for p in &sorted {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let c = c.map(|v| v / n);
        let sq = |a: &Point, b: &Point| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
        let mut out: Vec<usize> = Vec::new();
        while out.len() < count {
            let mut best: Option<(f64, Point, usize)> = None;
            for (i, p) in points.iter().enumerate() {
                if out.contains(&i) {
                    continue;
                }
                let score = if out.is_empty() {
                    sq(p, &c)
                } else {
                    out.iter().map(|&j| sq(p, &points[j])).fold(f64::INFINITY, f64::min)
                };
                let cand = (score, *p, i);
                if best.is_none_or(|b| better(cand, b)) {
                    best = Some(cand);
                }
            }
            out.push(best.unwrap().2);
        }
        out
    }

    pub fn knn(points: &[Point], center: usize, k: usize) -> Vec<usize> {
        let sq = |a: &Point, b: &Point| (0..3).map(|j| (a[j] - b[j]).powi(2)).sum::<f64>();
        let mut all: Vec<usize> = (0..points.len()).collect();
        all.sort_by(|&a, &b| {
            let da = sq(&points[a], &points[center]);
            let db = sq(&points[b], &points[center]);
            da.partial_cmp(&db)
                .unwrap()
                .then((a != center).cmp(&(b != center)))
                .then(points[a].partial_cmp(&points[b]).unwrap())
                .then(a.cmp(&b))
        });
        all.truncate(k);
        all
    }
}
