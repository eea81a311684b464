use std::fmt;
use std::str::FromStr;

use crate::error::{ensure_arg, Error, Result};

/// Layer family used inside the LFP stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backend {
    BSpline,
    /// Grouped rational layers (the "elite" variant).
    Rational,
    Mlp,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::BSpline => "bspline",
            Backend::Rational => "rational",
            Backend::Mlp => "mlp",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bspline" | "kan" => Ok(Backend::BSpline),
            "rational" | "efficient" | "elite" => Ok(Backend::Rational),
            "mlp" => Ok(Backend::Mlp),
            other => Err(Error::InvalidArgument(format!(
                "unknown backend '{other}' (expected bspline, rational or mlp)"
            ))),
        }
    }
}

/// Component switches. Turning one off removes exactly these parameters:
///
/// * `affine`: `alpha`, `beta`, `4d` per stage of input width `d`;
/// * `s_pool`: none (the pooling branch is parameter-free);
/// * `lfp`: the whole layer stack and depthwise convolution of each stage;
/// * `gfp`: every ResP block;
/// * `dwconv`: `2d * (kernel_size + 1)` per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub affine: bool,
    pub s_pool: bool,
    pub lfp: bool,
    pub gfp: bool,
    pub dwconv: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            affine: true,
            s_pool: true,
            lfp: true,
            gfp: true,
            dwconv: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    /// Centers kept by farthest point sampling.
    pub centers: usize,
    /// Group size.
    pub neighbors: usize,
    /// Layers in the LFP stack.
    pub kan_depth: usize,
    /// Hidden width of the LFP stack; `None` means half the stack's input width.
    pub kan_hidden: Option<usize>,
    pub backend: Backend,
    pub kernel_size: usize,
    /// ResP blocks applied to the pooled features.
    pub gfp_blocks: usize,
}

impl StageConfig {
    pub fn new(centers: usize, neighbors: usize, backend: Backend) -> Self {
        Self {
            centers,
            neighbors,
            kan_depth: 3,
            kan_hidden: None,
            backend,
            kernel_size: 3,
            gfp_blocks: 1,
        }
    }

    /// Widths of the LFP stack for a stage whose grouped features have `width` channels.
    pub fn phi_widths(&self, width: usize) -> Vec<usize> {
        let hidden = self.kan_hidden.unwrap_or(width / 2).max(1);
        let mut w = vec![width];
        w.extend(std::iter::repeat_n(hidden, self.kan_depth.saturating_sub(1)));
        w.push(width);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Points per input cloud.
    pub points: usize,
    pub embed_dim: usize,
    pub classes: usize,
    pub head_hidden: usize,
    pub grid_size: usize,
    pub spline_order: usize,
    pub num_degree: usize,
    pub den_degree: usize,
    pub rational_groups: usize,
    pub stages: Vec<StageConfig>,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Full-size network: 1024 points, four stages with 24 neighbours each.
    pub fn full(classes: usize, backend: Backend) -> Self {
        Self {
            points: 1024,
            embed_dim: 32,
            classes,
            head_hidden: 256,
            grid_size: 5,
            spline_order: 3,
            num_degree: 5,
            den_degree: 4,
            rational_groups: 4,
            stages: [512, 256, 128, 64]
                .into_iter()
                .map(|g| StageConfig::new(g, 24, backend))
                .collect(),
            ablation: Ablation::default(),
        }
    }

    /// Desk-scale network for 256-point clouds.
    pub fn toy(classes: usize, backend: Backend) -> Self {
        Self {
            points: 256,
            embed_dim: 4,
            classes,
            head_hidden: 32,
            stages: [64, 32, 16, 8]
                .into_iter()
                .map(|g| StageConfig::new(g, 8, backend))
                .collect(),
            ..Self::full(classes, backend)
        }
    }

    /// Two-stage network small enough for exhaustive gradient checks.
    pub fn miniature(classes: usize, backend: Backend) -> Self {
        Self {
            points: 16,
            embed_dim: 4,
            classes,
            head_hidden: 6,
            stages: vec![StageConfig::new(8, 4, backend), StageConfig::new(4, 4, backend)],
            ..Self::full(classes, backend)
        }
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.stages.iter_mut().for_each(|s| s.backend = backend);
        self
    }

    /// Input width of each stage; the final entry is the output width of the last stage.
    pub fn stage_widths(&self) -> Vec<usize> {
        let mut w = vec![self.embed_dim];
        for _ in &self.stages {
            w.push(2 * w.last().copied().unwrap_or(0));
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.classes >= 1, "class count must be positive");
        ensure_arg!(self.embed_dim >= 1, "embed_dim must be positive");
        ensure_arg!(self.head_hidden >= 1, "head_hidden must be positive");
        ensure_arg!(!self.stages.is_empty(), "at least one stage is required");
        ensure_arg!(self.grid_size >= 1, "grid_size must be positive");
        ensure_arg!(self.rational_groups >= 1, "rational_groups must be positive");
        ensure_arg!(
            self.stages[0].centers <= self.points,
            "first stage keeps {} centers from {} points",
            self.stages[0].centers,
            self.points
        );
        let widths = self.stage_widths();
        let mut available = self.points;
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            ensure_arg!(s.centers >= 1, "stage{n}.centers must be positive");
            ensure_arg!(
                s.centers <= available,
                "stage{n}.centers {} exceeds {available} available points",
                s.centers
            );
            ensure_arg!(
                s.neighbors >= 1 && s.neighbors <= available,
                "stage{n}.neighbors must lie in 1..={available}"
            );
            ensure_arg!(s.kan_depth >= 1, "stage{n}.kan_depth must be positive");
            ensure_arg!(s.kernel_size % 2 == 1, "stage{n}.kernel_size must be odd");
            if i > 0 {
                ensure_arg!(
                    s.centers < self.stages[i - 1].centers,
                    "stage center counts must strictly decrease"
                );
            }
            if s.backend == Backend::Rational {
                let ws = s.phi_widths(2 * widths[i]);
                for &w in &ws[..ws.len() - 1] {
                    ensure_arg!(
                        w % self.rational_groups == 0,
                        "stage{n}: rational groups {} do not divide layer width {w}",
                        self.rational_groups
                    );
                }
            }
            available = s.centers;
        }
        Ok(())
    }
}
