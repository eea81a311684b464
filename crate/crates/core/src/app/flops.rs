//! Analytic FLOP estimates for a model configuration.

use std::fmt;

use crate::blocks::{Backend, ModelConfig};
use crate::error::Result;

/// Counting convention, printed alongside every table.
pub const FLOP_CONVENTION: &str = "FLOP convention: multiply-add = 2 FLOPs; linear d_in->d_out = 2*d_in*d_out; \
B-spline KAN edge = 2*(G+k) + 4*k*(G+k) basis evaluation; rational channel = 2*(m+n) + 6 plus a 2*d_in*d_out mixing product";

pub fn linear_flops(d_in: usize, d_out: usize) -> u64 {
    2 * (d_in * d_out) as u64
}

pub fn vanilla_kan_flops(d_in: usize, d_out: usize, grid_size: usize, order: usize) -> u64 {
    let gk = (grid_size + order) as u64;
    (d_in * d_out) as u64 * (2 * gk + 4 * order as u64 * gk)
}

pub fn rational_flops(d_in: usize, d_out: usize, num_degree: usize, den_degree: usize) -> u64 {
    d_in as u64 * (2 * (num_degree + den_degree) as u64 + 6) + linear_flops(d_in, d_out)
}

/// FLOPs of one layer of `backend` applied to a single vector.
pub fn layer_flops(cfg: &ModelConfig, backend: Backend, d_in: usize, d_out: usize) -> u64 {
    match backend {
        Backend::BSpline => vanilla_kan_flops(d_in, d_out, cfg.grid_size, cfg.spline_order),
        Backend::Rational => rational_flops(d_in, d_out, cfg.num_degree, cfg.den_degree),
        Backend::Mlp => linear_flops(d_in, d_out),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopRow {
    /// Dotted module path, e.g. `stage2.lfp`.
    pub module: String,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub rows: Vec<FlopRow>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn get(&self, module: &str) -> Option<u64> {
        self.rows.iter().find(|r| r.module == module).map(|r| r.flops)
    }

    /// Sum over rows whose module path starts with `prefix.`.
    pub fn module_total(&self, prefix: &str) -> u64 {
        let p = format!("{prefix}.");
        self.rows
            .iter()
            .filter(|r| r.module.starts_with(&p))
            .map(|r| r.flops)
            .sum()
    }
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(f, "{:<20} {:>16}", r.module, r.flops)?;
        }
        write!(f, "{:<20} {:>16}", "total", self.total())
    }
}

/// Per-module forward FLOPs for one cloud of `cfg.points` points.
pub fn estimate_flops(cfg: &ModelConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut push = |module: String, flops: u64| rows.push(FlopRow { module, flops });
    push("embed".into(), cfg.points as u64 * linear_flops(3, cfg.embed_dim));
    let widths = cfg.stage_widths();
    let ab = cfg.ablation;
    for (i, s) in cfg.stages.iter().enumerate() {
        let p = format!("stage{}", i + 1);
        let (d, c) = (widths[i], 2 * widths[i]);
        let (g, k) = (s.centers as u64, s.neighbors as u64);
        let gk = g * k;
        push(format!("{p}.group_norm"), 6 * gk * d as u64);
        if ab.lfp {
            let phi = s.phi_widths(c);
            let per_vector: u64 = phi.windows(2).map(|w| layer_flops(cfg, s.backend, w[0], w[1])).sum();
            push(format!("{p}.lfp"), gk * per_vector);
            if ab.dwconv {
                push(format!("{p}.dwconv"), 2 * s.kernel_size as u64 * gk * c as u64);
            }
            push(format!("{p}.max_pool"), gk * c as u64);
        }
        if ab.s_pool {
            push(format!("{p}.s_pool"), 4 * gk * c as u64);
        }
        if ab.gfp {
            let c = c as u64;
            push(
                format!("{p}.gfp"),
                s.gfp_blocks as u64 * (4 * c * c * g + 4 * g * c + g * c),
            );
        }
    }
    let out = *widths.last().expect("nonempty");
    push(
        "head".into(),
        linear_flops(2 * out, cfg.head_hidden) + linear_flops(cfg.head_hidden, cfg.classes),
    );
    Ok(FlopReport { rows })
}
