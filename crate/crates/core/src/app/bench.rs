//! Layer-level parameter and FLOP tables for the three layer families, plus
//! model-level totals.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::flops::{estimate_flops, linear_flops, rational_flops, vanilla_kan_flops, FLOP_CONVENTION};
use crate::blocks::{Backend, Model, ModelConfig};
use crate::error::{ensure_arg, Result};
use crate::kan::{formula_count, param_count, LayerKind};
use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub kind: LayerKind,
    pub d_in: usize,
    pub d_out: usize,
    /// Closed-form parameter count.
    pub formula: usize,
    /// Scalars held by the implemented layer.
    pub stored: usize,
    pub flops: u64,
    /// `formula / formula_mlp` at the same widths.
    pub ratio_to_mlp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub grid_size: usize,
    pub spline_order: usize,
    pub num_degree: usize,
    pub den_degree: usize,
    pub groups: Vec<usize>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            grid_size: 5,
            spline_order: 3,
            num_degree: 5,
            den_degree: 4,
            groups: vec![4],
        }
    }
}

/// Width pairs: `(d, d)` for each entry, or the full cross product.
pub fn dim_pairs(dims: &[usize], cross: bool) -> Vec<(usize, usize)> {
    if cross {
        dims.iter().flat_map(|&a| dims.iter().map(move |&b| (a, b))).collect()
    } else {
        dims.iter().map(|&d| (d, d)).collect()
    }
}

pub fn bench_rows(pairs: &[(usize, usize)], settings: &BenchSettings) -> Result<Vec<BenchRow>> {
    ensure_arg!(!settings.groups.is_empty(), "at least one group count is required");
    let mut kinds = vec![
        LayerKind::Mlp,
        LayerKind::VanillaKan {
            grid_size: settings.grid_size,
            order: settings.spline_order,
        },
    ];
    kinds.extend(settings.groups.iter().map(|&groups| LayerKind::EfficientKan {
        num_degree: settings.num_degree,
        den_degree: settings.den_degree,
        groups,
    }));
    let mut rows = Vec::new();
    for &(d_in, d_out) in pairs {
        let mlp = formula_count(LayerKind::Mlp, d_in, d_out);
        for &kind in &kinds {
            let report = param_count(kind, d_in, d_out)?;
            let flops = match kind {
                LayerKind::Mlp => linear_flops(d_in, d_out),
                LayerKind::VanillaKan { grid_size, order } => vanilla_kan_flops(d_in, d_out, grid_size, order),
                LayerKind::EfficientKan {
                    num_degree, den_degree, ..
                } => rational_flops(d_in, d_out, num_degree, den_degree),
            };
            rows.push(BenchRow {
                kind,
                d_in,
                d_out,
                formula: report.formula_count,
                stored: report.stored_count,
                flops,
                ratio_to_mlp: report.formula_count as f64 / mlp as f64,
            });
        }
    }
    Ok(rows)
}

fn kind_label(kind: LayerKind) -> String {
    match kind {
        LayerKind::EfficientKan { groups, .. } => format!("efficient_kan(g={groups})"),
        other => other.name().to_string(),
    }
}

pub fn format_rows(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<18} {:>6} {:>6} {:>12} {:>12} {:>14} {:>10}\n",
        "backend", "d_in", "d_out", "formula", "stored", "flops", "vs_mlp"
    );
    for r in rows {
        writeln!(
            out,
            "{:<18} {:>6} {:>6} {:>12} {:>12} {:>14} {:>10.4}",
            kind_label(r.kind),
            r.d_in,
            r.d_out,
            r.formula,
            r.stored,
            r.flops,
            r.ratio_to_mlp
        )
        .expect("string write");
    }
    out
}

/// Parameter and FLOP totals of `base` under each backend.
pub fn model_table(base: &ModelConfig) -> Result<String> {
    let mut out = format!("{:<10} {:>12} {:>16}\n", "backend", "params", "flops");
    for backend in [Backend::Mlp, Backend::BSpline, Backend::Rational] {
        let cfg = base.clone().with_backend(backend);
        let model = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let flops = estimate_flops(&cfg)?;
        writeln!(
            out,
            "{:<10} {:>12} {:>16}",
            backend.name(),
            model.param_count(),
            flops.total()
        )
        .expect("string write");
    }
    Ok(out)
}

/// The complete `bench` report.
pub fn bench_report(
    pairs: &[(usize, usize)],
    settings: &BenchSettings,
    models: &[(&str, ModelConfig)],
) -> Result<String> {
    let mut out = format!("{FLOP_CONVENTION}\n\n");
    out.push_str(&format_rows(&bench_rows(pairs, settings)?));
    for (name, cfg) in models {
        writeln!(out, "\nmodel {name} ({} points):", cfg.points).expect("string write");
        out.push_str(&model_table(cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_cross_pairs() {
        assert_eq!(dim_pairs(&[16, 64], false), vec![(16, 16), (64, 64)]);
        assert_eq!(dim_pairs(&[16, 64], true).len(), 4);
    }

    #[test]
    fn one_row_per_dim_per_backend() {
        let rows = bench_rows(&dim_pairs(&[64, 128, 256], false), &BenchSettings::default()).unwrap();
        assert_eq!(rows.len(), 9);
        let table = format_rows(&rows);
        assert_eq!(table.lines().count(), 10);
    }

    #[test]
    fn formulas_match_hand_counts() {
        let rows = bench_rows(&[(16, 64)], &BenchSettings::default()).unwrap();
        assert_eq!(rows[0].formula, 16 * 64 + 64);
        assert_eq!(rows[1].formula, 16 * 64 * 10 + 64);
        assert_eq!(rows[2].formula, 16 * 64 + 64 + 4 + 5 * 4);
        for r in &rows {
            assert_eq!(
                r.stored,
                r.formula
                    + if let LayerKind::EfficientKan { groups, .. } = r.kind {
                        groups
                    } else {
                        0
                    }
            );
        }
    }

    #[test]
    fn report_states_the_convention() {
        let r = bench_report(
            &[(16, 16)],
            &BenchSettings::default(),
            &[("toy", ModelConfig::toy(3, Backend::BSpline))],
        )
        .unwrap();
        assert!(r.starts_with("FLOP convention"));
        assert!(r.contains("rational"));
    }
}
