//! Flat `key = value` model configuration files.
//!
//! Keys: `points`, `embed_dim`, `classes`, `head_hidden`, `grid_size`,
//! `spline_order`, `num_degree`, `den_degree`, `rational_groups`,
//! `stages` (comma-separated `centers:neighbors` pairs, replacing every
//! stage), `backend` (applied to every stage), `ablation.{affine, s_pool,
//! lfp, gfp, dwconv}` and per-stage `stageN.{centers, neighbors, kan_depth,
//! kan_hidden, backend, kernel_size, gfp_blocks}` with `N` counted from 1.
//! Values not given keep the toy defaults; `stages` and `backend` take effect
//! before the per-stage keys regardless of their position in the file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::blocks::{Backend, ModelConfig, StageConfig};
use crate::error::{Error, Result};

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid value '{value}' for '{key}'"),
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Parse {
            line,
            message: format!("'{key}' expects true or false, got '{value}'"),
        }),
    }
}

fn parse_stages(line: usize, value: &str, backend: Backend) -> Result<Vec<StageConfig>> {
    value
        .split(',')
        .map(|pair| {
            let (c, k) = pair.trim().split_once(':').ok_or_else(|| Error::Parse {
                line,
                message: format!("stage '{}' is not 'centers:neighbors'", pair.trim()),
            })?;
            Ok(StageConfig::new(
                parse_value(line, "stages", c.trim())?,
                parse_value(line, "stages", k.trim())?,
                backend,
            ))
        })
        .collect()
}

/// Parses a configuration over the toy defaults and validates the result.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "expected 'key = value'".into(),
        })?;
        entries.push((i + 1, key.trim().to_string(), value.trim().to_string()));
    }

    let defaults = ModelConfig::toy(3, Backend::BSpline);
    let mut cfg = defaults.clone();
    let mut backend = Backend::BSpline;
    if let Some((line, key, value)) = entries.iter().rev().find(|e| e.1 == "backend") {
        backend = parse_value(*line, key, value)?;
        cfg = cfg.with_backend(backend);
    }
    if let Some((line, _, value)) = entries.iter().rev().find(|e| e.1 == "stages") {
        cfg.stages = parse_stages(*line, value, backend)?;
    }

    for (line, key, value) in &entries {
        let (line, key, value) = (*line, key.as_str(), value.as_str());
        match key {
            "backend" | "stages" => {}
            "points" => cfg.points = parse_value(line, key, value)?,
            "embed_dim" => cfg.embed_dim = parse_value(line, key, value)?,
            "classes" => cfg.classes = parse_value(line, key, value)?,
            "head_hidden" => cfg.head_hidden = parse_value(line, key, value)?,
            "grid_size" => cfg.grid_size = parse_value(line, key, value)?,
            "spline_order" => cfg.spline_order = parse_value(line, key, value)?,
            "num_degree" => cfg.num_degree = parse_value(line, key, value)?,
            "den_degree" => cfg.den_degree = parse_value(line, key, value)?,
            "rational_groups" => cfg.rational_groups = parse_value(line, key, value)?,
            "ablation.affine" => cfg.ablation.affine = parse_bool(line, key, value)?,
            "ablation.s_pool" => cfg.ablation.s_pool = parse_bool(line, key, value)?,
            "ablation.lfp" => cfg.ablation.lfp = parse_bool(line, key, value)?,
            "ablation.gfp" => cfg.ablation.gfp = parse_bool(line, key, value)?,
            "ablation.dwconv" => cfg.ablation.dwconv = parse_bool(line, key, value)?,
            _ => {
                let unknown = || Error::Parse {
                    line,
                    message: format!("unknown key '{key}'"),
                };
                let (stage, field) = key
                    .strip_prefix("stage")
                    .and_then(|r| r.split_once('.'))
                    .ok_or_else(unknown)?;
                let n: usize = stage.parse().map_err(|_| unknown())?;
                let count = cfg.stages.len();
                let s = n
                    .checked_sub(1)
                    .and_then(|i| cfg.stages.get_mut(i))
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("'{key}' names a stage outside 1..={count}"),
                    })?;
                match field {
                    "centers" => s.centers = parse_value(line, key, value)?,
                    "neighbors" => s.neighbors = parse_value(line, key, value)?,
                    "kan_depth" => s.kan_depth = parse_value(line, key, value)?,
                    "kan_hidden" => {
                        s.kan_hidden = if value == "auto" {
                            None
                        } else {
                            Some(parse_value(line, key, value)?)
                        }
                    }
                    "backend" => s.backend = parse_value(line, key, value)?,
                    "kernel_size" => s.kernel_size = parse_value(line, key, value)?,
                    "gfp_blocks" => s.gfp_blocks = parse_value(line, key, value)?,
                    _ => return Err(unknown()),
                }
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes every field; `parse_config(&format_config(c)) == c` for valid `c`.
pub fn format_config(cfg: &ModelConfig) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: &dyn std::fmt::Display| writeln!(out, "{k} = {v}").expect("string write");
    put("points", &cfg.points);
    put("embed_dim", &cfg.embed_dim);
    put("classes", &cfg.classes);
    put("head_hidden", &cfg.head_hidden);
    put("grid_size", &cfg.grid_size);
    put("spline_order", &cfg.spline_order);
    put("num_degree", &cfg.num_degree);
    put("den_degree", &cfg.den_degree);
    put("rational_groups", &cfg.rational_groups);
    let stages: Vec<String> = cfg
        .stages
        .iter()
        .map(|s| format!("{}:{}", s.centers, s.neighbors))
        .collect();
    put("stages", &stages.join(","));
    put("ablation.affine", &cfg.ablation.affine);
    put("ablation.s_pool", &cfg.ablation.s_pool);
    put("ablation.lfp", &cfg.ablation.lfp);
    put("ablation.gfp", &cfg.ablation.gfp);
    put("ablation.dwconv", &cfg.ablation.dwconv);
    for (i, s) in cfg.stages.iter().enumerate() {
        let p = format!("stage{}", i + 1);
        put(&format!("{p}.kan_depth"), &s.kan_depth);
        let hidden = s.kan_hidden.map_or_else(|| "auto".to_string(), |h| h.to_string());
        put(&format!("{p}.kan_hidden"), &hidden);
        put(&format!("{p}.backend"), &s.backend);
        put(&format!("{p}.kernel_size"), &s.kernel_size);
        put(&format!("{p}.gfp_blocks"), &s.gfp_blocks);
    }
    out
}

pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
