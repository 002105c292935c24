use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, DatasetName, Role};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitProtocol {
    /// Alphabetical prefix of categories is seen.
    #[serde(rename = "split1")]
    SplitI,
    /// Categories with few gallery shapes are unseen.
    #[serde(rename = "split2")]
    SplitII,
}

impl FromStr for SplitProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "split1" | "spliti" | "1" | "i" => Ok(SplitProtocol::SplitI),
            "split2" | "splitii" | "2" | "ii" => Ok(SplitProtocol::SplitII),
            _ => Err(Error::InvalidArgument(format!("unknown split protocol {s}"))),
        }
    }
}

impl fmt::Display for SplitProtocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitProtocol::SplitI => "split1",
            SplitProtocol::SplitII => "split2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitOptions {
    /// Number of seen categories under Split-I for non-official manifests.
    /// Defaults to the SHREC13 proportion (79 of 90).
    pub split1_seen: Option<usize>,
    /// Split-II threshold: categories with at most this many shapes are unseen.
    pub split2_max_shapes: usize,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            split1_seen: None,
            split2_max_shapes: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub protocol: SplitProtocol,
    pub seen_categories: BTreeSet<String>,
    pub unseen_categories: BTreeSet<String>,
}

impl SplitSpec {
    pub fn is_seen(&self, category: &str) -> bool {
        self.seen_categories.contains(category)
    }

    pub fn is_unseen(&self, category: &str) -> bool {
        self.unseen_categories.contains(category)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io_at(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Unseen-category counts reported for the complete official releases.
pub fn published_unseen(dataset: &DatasetName, protocol: SplitProtocol) -> Option<usize> {
    match (dataset, protocol) {
        (DatasetName::Shrec13, SplitProtocol::SplitI) => Some(11),
        (DatasetName::Shrec14, SplitProtocol::SplitI) => Some(20),
        (DatasetName::Shrec13, SplitProtocol::SplitII) => Some(23),
        (DatasetName::Shrec14, SplitProtocol::SplitII) => Some(38),
        (DatasetName::Other(_), _) => None,
    }
}

pub fn make_split(manifest: &DatasetManifest, protocol: SplitProtocol) -> Result<SplitSpec> {
    make_split_with(manifest, protocol, &SplitOptions::default())
}

pub fn make_split_with(
    manifest: &DatasetManifest,
    protocol: SplitProtocol,
    options: &SplitOptions,
) -> Result<SplitSpec> {
    let mut categories = manifest.categories.clone();
    categories.sort();
    let n = categories.len();
    let official = manifest.is_official_cardinality();

    let unseen: BTreeSet<String> = match protocol {
        SplitProtocol::SplitI => {
            let n_seen = match (official, options.split1_seen) {
                (true, _) => n - published_unseen(&manifest.dataset, protocol).unwrap_or(0),
                (false, Some(k)) => k.min(n),
                (false, None) if n >= 2 => {
                    ((n as f64 * 79.0 / 90.0).round() as usize).clamp(1, n - 1)
                }
                (false, None) => n,
            };
            categories[n_seen..].iter().cloned().collect()
        }
        SplitProtocol::SplitII => manifest
            .shape_counts()
            .into_iter()
            .filter(|(_, count)| *count <= options.split2_max_shapes)
            .map(|(c, _)| c.to_string())
            .collect(),
    };
    let seen: BTreeSet<String> = categories
        .iter()
        .filter(|c| !unseen.contains(*c))
        .cloned()
        .collect();

    if let Some(expected) = published_unseen(&manifest.dataset, protocol) {
        if unseen.len() != expected {
            let msg = format!(
                "{} {protocol}: {} unseen categories, published {expected}",
                manifest.dataset,
                unseen.len()
            );
            if official {
                return Err(Error::CountMismatch(msg));
            }
            log::warn!("{msg} (partial manifest, rule applied as-is)");
        }
    }
    Ok(SplitSpec {
        protocol,
        seen_categories: seen,
        unseen_categories: unseen,
    })
}

/// Marks every sketch of an unseen category as a test query. Seen-category
/// sketches keep their loaded role. Returns the number of records changed.
pub fn apply_split(manifest: &mut DatasetManifest, split: &SplitSpec) -> usize {
    let mut changed = 0;
    for s in &mut manifest.sketches {
        if split.is_unseen(&s.category) && s.role != Role::Test {
            s.role = Role::Test;
            changed += 1;
        }
    }
    changed
}
