use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Label, Split};
use crate::error::{Result, SddError};

/// One line of a manifest: `{"path", "label", "generator", "split"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub label: Label,
    pub generator: String,
    pub split: Split,
}

/// Reads a JSON-lines manifest. Relative paths resolve against the
/// manifest's directory; every path must exist and appear only once.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| SddError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let parse_err = |line: usize, message: String| SddError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut rec: SampleRecord =
            serde_json::from_str(raw).map_err(|e| parse_err(line_no, e.to_string()))?;
        if rec.generator.trim().is_empty() {
            return Err(parse_err(line_no, "empty generator tag".into()));
        }
        if rec.path.is_relative() {
            rec.path = base.join(&rec.path);
        }
        if !rec.path.exists() {
            return Err(parse_err(
                line_no,
                format!("image {} does not exist", rec.path.display()),
            ));
        }
        if !seen.insert(rec.path.clone()) {
            return Err(parse_err(
                line_no,
                format!("duplicate path {}", rec.path.display()),
            ));
        }
        records.push(rec);
    }
    if records.is_empty() {
        log::warn!("manifest {} contains no records", path.display());
    }
    Ok(records)
}

pub fn save_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| SddError::io(path, e))?;
    f.write_all(&out).map_err(|e| SddError::io(path, e))
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
    )
}

fn class_dir_label(name: &str) -> Option<Label> {
    match name {
        "0_real" => Some(Label::Real),
        "1_fake" => Some(Label::Fake),
        _ => None,
    }
}

fn collect_class_dirs(dir: &Path, out: &mut Vec<(PathBuf, Label)>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| SddError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for p in entries {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        match class_dir_label(name) {
            Some(label) => out.push((p, label)),
            None => collect_class_dirs(&p, out)?,
        }
    }
    Ok(())
}

/// Imports a per-generator corpus laid out as
/// `root/<generator>/[<category>/]{0_real,1_fake}/*.{png,jpg}`.
pub fn import_directory(root: &Path, split: Split) -> Result<Vec<SampleRecord>> {
    let mut generators: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| SddError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    generators.sort();
    let mut records = Vec::new();
    for gdir in generators {
        let generator = gdir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        let mut class_dirs = Vec::new();
        collect_class_dirs(&gdir, &mut class_dirs)?;
        for (dir, label) in class_dirs {
            let mut files: Vec<_> = std::fs::read_dir(&dir)
                .map_err(|e| SddError::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image(p))
                .collect();
            files.sort();
            records.extend(files.into_iter().map(|path| SampleRecord {
                path,
                label,
                generator: generator.clone(),
                split,
            }));
        }
    }
    Ok(records)
}
