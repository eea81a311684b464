use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::points::{load_points_file, write_atomic};
use crate::error::{Error, Result};
use crate::training::Dataset;

/// Class names plus `(points file, label)` entries. Paths are relative to
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<(PathBuf, usize)>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut class_names: Option<Vec<String>> = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |message: String| Error::Parse { line: i + 1, message };
            if let Some(rest) = line.strip_prefix("classes:") {
                if class_names.is_some() {
                    return Err(perr("duplicate classes line".into()));
                }
                let names: Vec<String> = rest.split(',').map(|s| s.trim().to_string()).collect();
                if names.iter().any(|n| n.is_empty()) {
                    return Err(perr("empty class name".into()));
                }
                class_names = Some(names);
                continue;
            }
            let names = class_names
                .as_ref()
                .ok_or_else(|| perr("entries must follow the 'classes:' line".into()))?;
            let (path, label) = line
                .rsplit_once(char::is_whitespace)
                .ok_or_else(|| perr("expected '<path> <label>'".into()))?;
            let label: usize = label
                .trim()
                .parse()
                .map_err(|_| perr(format!("'{}' is not a label index", label.trim())))?;
            if label >= names.len() {
                return Err(perr(format!("label {label} but only {} classes", names.len())));
            }
            entries.push((PathBuf::from(path.trim()), label));
        }
        let class_names = class_names.ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing 'classes:' line".into(),
        })?;
        Ok(Self { class_names, entries })
    }

    pub fn format(&self) -> String {
        let mut out = format!("classes: {}\n", self.class_names.join(","));
        for (p, l) in &self.entries {
            writeln!(out, "{} {l}", p.display()).expect("string write");
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.format().as_bytes())
    }
}

/// File name of the manifest inside a dataset directory.
pub const MANIFEST_NAME: &str = "manifest.txt";

/// Loads every cloud listed in the manifest at `path`, in manifest order.
/// A directory is read through its `manifest.txt`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let joined;
    let path = if path.is_dir() {
        joined = path.join(MANIFEST_NAME);
        joined.as_path()
    } else {
        path
    };
    let manifest = DatasetManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let clouds = manifest
        .entries
        .par_iter()
        .map(|(p, label)| Ok(load_points_file(&base.join(p))?.with_label(*label)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(clouds, manifest.class_names)
}
