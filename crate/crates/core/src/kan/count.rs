//! Closed-form parameter counts for single layers, alongside the number of
//! scalars the corresponding layer type actually stores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{KanLayer, RationalGroupLayer, SplineGrid};
use crate::blocks::Linear;
use crate::error::{ensure_arg, Result};
use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Mlp,
    VanillaKan {
        grid_size: usize,
        order: usize,
    },
    EfficientKan {
        num_degree: usize,
        den_degree: usize,
        groups: usize,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Mlp => "mlp",
            LayerKind::VanillaKan { .. } => "vanilla_kan",
            LayerKind::EfficientKan { .. } => "efficient_kan",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCountReport {
    pub formula_count: usize,
    pub stored_count: usize,
}

/// The closed forms:
///
/// - MLP: `d_in d_out + d_out`
/// - vanilla KAN: `d_in d_out (G + k + 2) + d_out`
/// - Efficient-KAN: `d_in d_out + d_out + (n + m g)`
pub fn formula_count(kind: LayerKind, d_in: usize, d_out: usize) -> usize {
    match kind {
        LayerKind::Mlp => d_in * d_out + d_out,
        LayerKind::VanillaKan { grid_size, order } => d_in * d_out * (grid_size + order + 2) + d_out,
        LayerKind::EfficientKan {
            num_degree,
            den_degree,
            groups,
        } => d_in * d_out + d_out + (den_degree + num_degree * groups),
    }
}

/// Builds the layer and counts what it holds next to the closed form.
///
/// The Efficient-KAN stored count exceeds the formula by `g`: each group
/// keeps its constant numerator term `a_0`.
pub fn param_count(kind: LayerKind, d_in: usize, d_out: usize) -> Result<ParamCountReport> {
    ensure_arg!(
        d_in > 0 && d_out > 0,
        "dimensions must be positive (got {d_in} x {d_out})"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stored_count = match kind {
        LayerKind::Mlp => Linear::zeros(d_in, d_out).param_count(),
        LayerKind::VanillaKan { grid_size, order } => {
            KanLayer::new(d_in, d_out, SplineGrid::symmetric(grid_size, order)?, &mut rng).param_count()
        }
        LayerKind::EfficientKan {
            num_degree,
            den_degree,
            groups,
        } => RationalGroupLayer::zeros(d_in, d_out, groups, num_degree, den_degree)?.param_count(),
    };
    Ok(ParamCountReport {
        formula_count: formula_count(kind, d_in, d_out),
        stored_count,
    })
}
