use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// One `x y z` triple per line; blank lines and `#` comments are skipped.
pub fn parse_points(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("'{f}' is not a number"),
            })?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::InvalidInput("points file contains no points".into()));
    }
    PointCloud::new(points)
}

pub fn load_points_file(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points(&text)
}

/// 17 significant digits, which round-trips every `f64`.
pub fn format_points(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 72);
    for p in cloud.points() {
        writeln!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]).expect("string write");
    }
    out
}

pub fn save_points_file(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, format_points(cloud).as_bytes())
}
