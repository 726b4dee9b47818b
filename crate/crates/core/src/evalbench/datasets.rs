//! Annotation adapters.
//!
//! | kind            | file                  | query id     | reference          | text                   | targets                  |
//! |-----------------|-----------------------|--------------|--------------------|------------------------|--------------------------|
//! | `cirr`          | JSON array            | `pairid`     | `reference`        | `caption`              | `target_hard`            |
//! | `circo`         | JSON array            | `id`         | `reference_img_id` | `relative_caption`     | `gt_img_ids`             |
//! | `fashioniq`     | JSON array            | `<stem>:<i>` | `candidate`        | `captions` joined by " and " | `target`           |
//! | `generic_jsonl` | one object per line   | `query_id`   | `ref`              | `mod`                  | `targets`                |
//!
//! CIRR `img_set.members` becomes the six-member subset. A gallery manifest is
//! a JSON array of ids, a JSON object whose keys are ids, or a text file with
//! one id per line.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{ComposedQuery, ImageId};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Schema { path: String, line: usize, reason: String },
    #[error("query {query}: image {id} is not in the gallery manifest")]
    MissingGalleryEntry { query: String, id: String },
    #[error("unknown dataset kind {0:?} (expected cirr, circo, fashioniq or generic_jsonl)")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cirr,
    Circo,
    Fashioniq,
    GenericJsonl,
}

impl DatasetKind {
    /// Multi-target task families deliberate in parallel.
    pub fn multi_gt(self) -> bool {
        matches!(self, DatasetKind::Circo)
    }
}

impl FromStr for DatasetKind {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cirr" => Ok(DatasetKind::Cirr),
            "circo" => Ok(DatasetKind::Circo),
            "fashioniq" => Ok(DatasetKind::Fashioniq),
            "generic_jsonl" => Ok(DatasetKind::GenericJsonl),
            other => Err(DatasetError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub query_id: String,
    pub ref_image: ImageId,
    pub mod_text: String,
    pub targets: BTreeSet<ImageId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<ImageId>>,
    pub split: Split,
}

impl TripletRecord {
    pub fn to_query(&self) -> Result<ComposedQuery, crate::domain::DomainError> {
        ComposedQuery::new(
            self.query_id.clone(),
            self.ref_image.clone(),
            self.mod_text.clone(),
            self.targets.clone(),
            self.subset.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub triplets: Vec<TripletRecord>,
    /// Every id the embedding file must cover, ascending.
    pub gallery: Vec<ImageId>,
}

impl Dataset {
    pub fn multi_gt(&self) -> bool {
        self.kind.multi_gt()
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn schema(path: &Path, line: usize, reason: impl Into<String>) -> DatasetError {
    DatasetError::Schema {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

/// Strings stay strings; numeric ids (CIRCO) are printed without quotes.
fn id_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

struct Fields<'a> {
    path: &'a Path,
    line: usize,
    obj: &'a serde_json::Map<String, Value>,
}

impl Fields<'_> {
    fn id(&self, key: &str) -> Result<ImageId, DatasetError> {
        let raw = self
            .obj
            .get(key)
            .and_then(id_text)
            .ok_or_else(|| schema(self.path, self.line, format!("missing or invalid \"{key}\"")))?;
        ImageId::new(raw).map_err(|e| schema(self.path, self.line, format!("\"{key}\": {e}")))
    }

    fn opt_id(&self, key: &str) -> Result<Option<ImageId>, DatasetError> {
        match self.obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(_) => self.id(key).map(Some),
        }
    }

    fn ids(&self, key: &str) -> Result<Option<Vec<ImageId>>, DatasetError> {
        match self.obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    id_text(v)
                        .ok_or_else(|| schema(self.path, self.line, format!("non-id entry in \"{key}\"")))
                        .and_then(|s| ImageId::new(s).map_err(|e| schema(self.path, self.line, e.to_string())))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some(_) => Err(schema(self.path, self.line, format!("\"{key}\" must be an array"))),
        }
    }

    fn text(&self, key: &str) -> Result<String, DatasetError> {
        let s = self
            .obj
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| schema(self.path, self.line, format!("missing or invalid \"{key}\"")))?;
        if s.trim().is_empty() {
            return Err(schema(self.path, self.line, format!("\"{key}\" is empty")));
        }
        Ok(s.to_string())
    }
}

fn json_array(path: &Path) -> Result<Vec<Value>, DatasetError> {
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let value: Value = serde_json::from_str(&raw).map_err(|e| schema(path, e.line(), e.to_string()))?;
    match value {
        Value::Array(items) => Ok(items),
        _ => Err(schema(path, 1, "expected a JSON array of records")),
    }
}

fn record<'a>(path: &'a Path, index: usize, v: &'a Value) -> Result<Fields<'a>, DatasetError> {
    let obj = v
        .as_object()
        .ok_or_else(|| schema(path, index + 1, "record is not an object"))?;
    Ok(Fields {
        path,
        line: index + 1,
        obj,
    })
}

fn labeled_check(t: &TripletRecord, path: &Path, line: usize) -> Result<(), DatasetError> {
    if t.split != Split::Test && t.targets.is_empty() {
        return Err(schema(path, line, format!("query {} has no targets", t.query_id)));
    }
    if let Some(subset) = &t.subset {
        if subset.len() != 6 {
            return Err(schema(
                path,
                line,
                format!("subset of query {} has {} members", t.query_id, subset.len()),
            ));
        }
    }
    Ok(())
}

fn load_cirr(path: &Path, split: Split) -> Result<Vec<TripletRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, v) in json_array(path)?.iter().enumerate() {
        let f = record(path, i, v)?;
        let query_id = f
            .obj
            .get("pairid")
            .and_then(id_text)
            .ok_or_else(|| schema(path, i + 1, "missing \"pairid\""))?;
        let subset = match f.obj.get("img_set") {
            Some(Value::Object(set)) => Fields { obj: set, ..f }.ids("members")?,
            _ => None,
        };
        let targets: BTreeSet<ImageId> = f.opt_id("target_hard")?.into_iter().collect();
        let mut subset = subset;
        if let Some(s) = &subset {
            if targets.iter().any(|t| !s.contains(t)) {
                // The hard target lies outside the published subset; the
                // subset metric cannot be computed for this query.
                subset = None;
            }
        }
        let t = TripletRecord {
            query_id,
            ref_image: f.id("reference")?,
            mod_text: f.text("caption")?,
            targets,
            subset,
            split,
        };
        labeled_check(&t, path, i + 1)?;
        out.push(t);
    }
    Ok(out)
}

fn load_circo(path: &Path, split: Split) -> Result<Vec<TripletRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, v) in json_array(path)?.iter().enumerate() {
        let f = record(path, i, v)?;
        let query_id = f
            .obj
            .get("id")
            .and_then(id_text)
            .ok_or_else(|| schema(path, i + 1, "missing \"id\""))?;
        let mut targets: BTreeSet<ImageId> = f.ids("gt_img_ids")?.unwrap_or_default().into_iter().collect();
        if let Some(t) = f.opt_id("target_img_id")? {
            targets.insert(t);
        }
        let t = TripletRecord {
            query_id,
            ref_image: f.id("reference_img_id")?,
            mod_text: f.text("relative_caption")?,
            targets,
            subset: None,
            split,
        };
        labeled_check(&t, path, i + 1)?;
        out.push(t);
    }
    Ok(out)
}

fn load_fashioniq(path: &Path, split: Split) -> Result<Vec<TripletRecord>, DatasetError> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("fiq").to_string();
    let mut out = Vec::new();
    for (i, v) in json_array(path)?.iter().enumerate() {
        let f = record(path, i, v)?;
        let captions: Vec<&str> = f
            .obj
            .get("captions")
            .and_then(Value::as_array)
            .ok_or_else(|| schema(path, i + 1, "missing \"captions\" array"))?
            .iter()
            .filter_map(Value::as_str)
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .collect();
        if captions.is_empty() {
            return Err(schema(path, i + 1, "no non-empty caption"));
        }
        let t = TripletRecord {
            query_id: format!("{stem}:{i}"),
            ref_image: f.id("candidate")?,
            mod_text: captions.join(" and "),
            targets: f.opt_id("target")?.into_iter().collect(),
            subset: None,
            split,
        };
        labeled_check(&t, path, i + 1)?;
        out.push(t);
    }
    Ok(out)
}

fn load_generic(path: &Path, split: Split) -> Result<Vec<TripletRecord>, DatasetError> {
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| schema(path, i + 1, e.to_string()))?;
        let f = record(path, i, &v)?;
        let query_id = f.text("query_id")?;
        if !seen.insert(query_id.clone()) {
            return Err(schema(path, i + 1, format!("duplicate query_id {query_id}")));
        }
        let line_split = match f.obj.get("split").and_then(Value::as_str) {
            Some(s) => serde_json::from_value(Value::String(s.to_string()))
                .map_err(|_| schema(path, i + 1, format!("unknown split {s:?}")))?,
            None => split,
        };
        let t = TripletRecord {
            query_id,
            ref_image: f.id("ref")?,
            mod_text: f.text("mod")?,
            targets: f.ids("targets")?.unwrap_or_default().into_iter().collect(),
            subset: f.ids("subset")?,
            split: line_split,
        };
        labeled_check(&t, path, i + 1)?;
        out.push(t);
    }
    Ok(out)
}

pub fn load_gallery_manifest(path: &Path) -> Result<Vec<ImageId>, DatasetError> {
    let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let names: Vec<String> = match serde_json::from_str::<Value>(&raw) {
        Ok(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| id_text(v).ok_or_else(|| schema(path, i + 1, "non-id manifest entry")))
            .collect::<Result<_, _>>()?,
        Ok(Value::Object(map)) => map.keys().cloned().collect(),
        _ => raw
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
    };
    let mut out = Vec::with_capacity(names.len());
    let mut seen = HashSet::new();
    for (i, n) in names.into_iter().enumerate() {
        let id = ImageId::new(n).map_err(|e| schema(path, i + 1, e.to_string()))?;
        if !seen.insert(id.clone()) {
            return Err(schema(path, i + 1, format!("duplicate gallery id {id}")));
        }
        out.push(id);
    }
    out.sort();
    Ok(out)
}

/// Loads annotations and checks them against the gallery manifest. Without
/// a manifest, the gallery is every id the annotations mention.
pub fn load_dataset(
    kind: DatasetKind,
    annotations: &Path,
    gallery: Option<&Path>,
    split: Split,
) -> Result<Dataset, DatasetError> {
    let triplets = match kind {
        DatasetKind::Cirr => load_cirr(annotations, split)?,
        DatasetKind::Circo => load_circo(annotations, split)?,
        DatasetKind::Fashioniq => load_fashioniq(annotations, split)?,
        DatasetKind::GenericJsonl => load_generic(annotations, split)?,
    };
    let gallery = match gallery {
        Some(p) => {
            let manifest = load_gallery_manifest(p)?;
            let known: HashSet<&ImageId> = manifest.iter().collect();
            for t in &triplets {
                let mentioned = std::iter::once(&t.ref_image)
                    .chain(&t.targets)
                    .chain(t.subset.iter().flatten());
                for id in mentioned {
                    if !known.contains(id) {
                        return Err(DatasetError::MissingGalleryEntry {
                            query: t.query_id.clone(),
                            id: id.to_string(),
                        });
                    }
                }
            }
            manifest
        }
        None => {
            let mut all: BTreeSet<ImageId> = BTreeSet::new();
            for t in &triplets {
                all.insert(t.ref_image.clone());
                all.extend(t.targets.iter().cloned());
                all.extend(t.subset.iter().flatten().cloned());
            }
            all.into_iter().collect()
        }
    };
    Ok(Dataset {
        kind,
        triplets,
        gallery,
    })
}
