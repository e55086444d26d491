//! Benchmark layout:
//!
//! ```text
//! root/
//!   edits.jsonl          one {"set": ..., "shared": ..., "theme": ...} per line
//!   <set-name>/
//!     set.toml           category = "subject" | "subject-background" | "storyboard"
//!     *.png | *.jpg
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const MIN_SET_SIZE: usize = 3;
pub const MAX_SET_SIZE: usize = 15;

/// What the images of a set share.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    /// One or more shared subjects.
    Subject,
    /// Shared subjects and a shared background.
    SubjectBackground,
    /// Storyboard sketches.
    Storyboard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSpec {
    pub set: String,
    pub shared: String,
    pub theme: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSet {
    pub name: String,
    pub category: Category,
    pub images: Vec<PathBuf>,
    pub edits: Vec<EditSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkIndex {
    pub sets: Vec<BenchmarkSet>,
    /// Skipped set directories or edit lines, with reasons.
    pub skipped: Vec<(String, String)>,
}

impl BenchmarkIndex {
    pub fn edit_count(&self) -> usize {
        self.sets.iter().map(|s| s.edits.len()).sum()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SetMeta {
    category: Category,
}

fn load_set(dir: &Path) -> std::result::Result<(Category, Vec<PathBuf>), String> {
    let meta = std::fs::read_to_string(dir.join("set.toml")).map_err(|_| "missing set.toml".to_string())?;
    let meta: SetMeta = toml::from_str(&meta).map_err(|e| format!("bad set.toml: {}", e.message()))?;
    let mut images: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    images.sort();
    if !(MIN_SET_SIZE..=MAX_SET_SIZE).contains(&images.len()) {
        return Err(format!("{} images, need {MIN_SET_SIZE} to {MAX_SET_SIZE}", images.len()));
    }
    Ok((meta.category, images))
}

/// Index a benchmark root. Malformed sets and edit lines are skipped and
/// reported instead of failing the whole load.
pub fn load_benchmark(root: &Path) -> Result<BenchmarkIndex> {
    let mut index = BenchmarkIndex::default();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for d in dirs {
        let name = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if name.starts_with('.') {
            continue;
        }
        match load_set(&d) {
            Ok((category, images)) => index.sets.push(BenchmarkSet { name, category, images, edits: Vec::new() }),
            Err(reason) => index.skipped.push((name, reason)),
        }
    }
    let edits = root.join("edits.jsonl");
    if edits.exists() {
        for (k, line) in std::fs::read_to_string(&edits)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let label = format!("edits.jsonl:{}", k + 1);
            match serde_json::from_str::<EditSpec>(line) {
                Ok(e) => match index.sets.iter_mut().find(|s| s.name == e.set) {
                    Some(s) => s.edits.push(e),
                    None => index.skipped.push((label, format!("unknown or skipped set {}", e.set))),
                },
                Err(e) => index.skipped.push((label, e.to_string())),
            }
        }
    }
    Ok(index)
}
