use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum DatasetName {
    Shrec13,
    Shrec14,
    /// Any other corpus following the same layout (fixtures, synthetic data).
    Other(String),
}

impl DatasetName {
    pub fn dir_name(&self) -> &str {
        match self {
            DatasetName::Shrec13 => "SHREC13",
            DatasetName::Shrec14 => "SHREC14",
            DatasetName::Other(name) => name,
        }
    }

    /// (categories, shapes, sketches) of the complete official release.
    pub fn official_cardinality(&self) -> Option<(usize, usize, usize)> {
        match self {
            DatasetName::Shrec13 => Some((90, 1258, 7200)),
            DatasetName::Shrec14 => Some((171, 8987, 13680)),
            DatasetName::Other(_) => None,
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shrec13" | "shrec2013" => Ok(DatasetName::Shrec13),
            "shrec14" | "shrec2014" => Ok(DatasetName::Shrec14),
            "" => Err(Error::InvalidArgument("empty dataset name".into())),
            _ => Ok(DatasetName::Other(s.to_string())),
        }
    }
}

impl From<DatasetName> for String {
    fn from(d: DatasetName) -> String {
        d.dir_name().to_string()
    }
}

impl TryFrom<String> for DatasetName {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub id: String,
    pub category: String,
    pub uri: PathBuf,
    /// Every rendered candidate view, in rig order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidate_uris: Vec<PathBuf>,
    /// Views used downstream: all candidates after rendering, the selected
    /// top-k (best first) after view selection.
    #[serde(default)]
    pub view_uris: Vec<PathBuf>,
    /// Rig indices of `view_uris` within `candidate_uris`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub view_indices: Vec<usize>,
    /// Selection scores aligned with `view_uris`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub view_scores: Vec<f32>,
    /// Cached captions aligned with `view_uris`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captions: Vec<String>,
}

impl ShapeRecord {
    pub fn new(id: impl Into<String>, category: impl Into<String>, uri: impl Into<PathBuf>) -> Self {
        Self {
            id: id.into(),
            category: category.into(),
            uri: uri.into(),
            candidate_uris: Vec::new(),
            view_uris: Vec::new(),
            view_indices: Vec::new(),
            view_scores: Vec::new(),
            captions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchRecord {
    pub id: String,
    pub category: String,
    pub uri: PathBuf,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Dataset {
        name: DatasetName,
        categories: Vec<String>,
    },
    Shape(ShapeRecord),
    Sketch(SketchRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dataset: DatasetName,
    pub categories: Vec<String>,
    pub shapes: Vec<ShapeRecord>,
    pub sketches: Vec<SketchRecord>,
}

impl DatasetManifest {
    /// Checks id uniqueness and category membership.
    pub fn validate(&self) -> Result<()> {
        let cats: BTreeSet<&str> = self.categories.iter().map(String::as_str).collect();
        if cats.len() != self.categories.len() {
            return Err(Error::InvalidManifest("repeated category".into()));
        }
        let mut ids = BTreeSet::new();
        for (id, cat) in self
            .shapes
            .iter()
            .map(|s| (&s.id, &s.category))
            .chain(self.sketches.iter().map(|s| (&s.id, &s.category)))
        {
            if cat.is_empty() {
                return Err(Error::InvalidManifest(format!("{id}: empty category")));
            }
            if !cats.contains(cat.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "{id}: category {cat} not declared"
                )));
            }
            if !ids.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(())
    }

    pub fn shape(&self, id: &str) -> Option<&ShapeRecord> {
        self.shapes.iter().find(|s| s.id == id)
    }

    pub fn shape_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts: BTreeMap<&str, usize> =
            self.categories.iter().map(|c| (c.as_str(), 0)).collect();
        for s in &self.shapes {
            *counts.entry(s.category.as_str()).or_default() += 1;
        }
        counts
    }

    /// Whether the manifest has exactly the official category/shape/sketch counts.
    pub fn is_official_cardinality(&self) -> bool {
        self.dataset.official_cardinality()
            == Some((self.categories.len(), self.shapes.len(), self.sketches.len()))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let header = Line::Dataset {
            name: self.dataset.clone(),
            categories: self.categories.clone(),
        };
        out.push_str(&serde_json::to_string(&header)?);
        out.push('\n');
        for s in &self.shapes {
            out.push_str(&serde_json::to_string(&Line::Shape(s.clone()))?);
            out.push('\n');
        }
        for s in &self.sketches {
            out.push_str(&serde_json::to_string(&Line::Sketch(s.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    /// SHA-256 of the serialized manifest; binds indexes and checkpoints to it.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_jsonl()?.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io_at(&tmp, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path).map_err(|e| Error::io_at(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        let mut header = None;
        let mut shapes = Vec::new();
        let mut sketches = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| {
                Error::InvalidManifest(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            match parsed {
                Line::Dataset { name, categories } => {
                    if header.replace((name, categories)).is_some() {
                        return Err(Error::InvalidManifest("two dataset headers".into()));
                    }
                }
                Line::Shape(s) => shapes.push(s),
                Line::Sketch(s) => sketches.push(s),
            }
        }
        let (dataset, categories) =
            header.ok_or_else(|| Error::InvalidManifest("missing dataset header".into()))?;
        let manifest = Self {
            dataset,
            categories,
            shapes,
            sketches,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

fn sorted_dir_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io_at(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn category_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    Ok(sorted_dir_entries(dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect())
}

/// Scans `<root>/<dataset>/{sketches,shapes}` into a manifest.
///
/// Ids are the path below `sketches/` or `shapes/` without extension, so
/// equal file names in different categories never collide.
pub fn load_manifest(root: &Path, dataset: DatasetName) -> Result<DatasetManifest> {
    let base = root.join(dataset.dir_name());
    let sketch_dir = base.join("sketches");
    let shape_dir = base.join("shapes");
    for dir in [&sketch_dir, &shape_dir] {
        if !dir.is_dir() {
            return Err(Error::MissingDirectory(dir.clone()));
        }
    }

    let mut categories = BTreeSet::new();
    let mut seen_ids = BTreeSet::new();
    let mut check_id = |id: &str| -> Result<()> {
        if seen_ids.insert(id.to_string()) {
            Ok(())
        } else {
            Err(Error::DuplicateId(id.to_string()))
        }
    };

    let mut sketches = Vec::new();
    for (category, dir) in category_dirs(&sketch_dir)? {
        let before = sketches.len();
        for entry in sorted_dir_entries(&dir)? {
            if entry.is_dir() {
                let role = match entry.file_name().and_then(|n| n.to_str()) {
                    Some("train") => Role::Train,
                    Some("test") => Role::Test,
                    _ => continue,
                };
                let sub = entry.file_name().unwrap().to_string_lossy().into_owned();
                for file in sorted_dir_entries(&entry)? {
                    if extension(&file).as_deref() == Some("png") {
                        let id = format!("{category}/{sub}/{}", stem(&file));
                        check_id(&id)?;
                        sketches.push(SketchRecord {
                            id,
                            category: category.clone(),
                            uri: file,
                            role,
                            caption: None,
                        });
                    }
                }
            } else if extension(&entry).as_deref() == Some("png") {
                let id = format!("{category}/{}", stem(&entry));
                check_id(&id)?;
                sketches.push(SketchRecord {
                    id,
                    category: category.clone(),
                    uri: entry,
                    role: Role::Train,
                    caption: None,
                });
            }
        }
        if sketches.len() == before {
            return Err(Error::EmptyCategory(format!("sketches/{category}")));
        }
        categories.insert(category);
    }

    let mut shapes = Vec::new();
    for (category, dir) in category_dirs(&shape_dir)? {
        let before = shapes.len();
        for entry in sorted_dir_entries(&dir)? {
            if matches!(extension(&entry).as_deref(), Some("obj" | "off")) {
                let id = format!("{category}/{}", stem(&entry));
                check_id(&id)?;
                shapes.push(ShapeRecord::new(id, category.clone(), entry));
            }
        }
        if shapes.len() == before {
            return Err(Error::EmptyCategory(format!("shapes/{category}")));
        }
        categories.insert(category);
    }

    if categories.is_empty() {
        return Err(Error::MissingDirectory(base));
    }
    let manifest = DatasetManifest {
        dataset,
        categories: categories.into_iter().collect(),
        shapes,
        sketches,
    };
    manifest.validate()?;
    Ok(manifest)
}
