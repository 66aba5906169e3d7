//! JSON Lines test manifests.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ForegroundMask, Image};

/// One manifest line. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupedSample {
    pub id: String,
    pub image: PathBuf,
    pub label: String,
    pub group: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// A manifest entry with its pixels loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSample {
    pub id: String,
    pub label: String,
    pub group: String,
    pub image: Image,
    pub mask: Option<ForegroundMask>,
}

/// Reads and validates a manifest: every line parses, ids are unique, and
/// groups and labels are non-empty.
pub fn read_manifest(path: &Path) -> Result<Vec<GroupedSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let location = path.display().to_string();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: GroupedSample = serde_json::from_str(line).map_err(|e| Error::Parse {
            location: location.clone(),
            line: lineno,
            column: e.column(),
            message: e.to_string(),
        })?;
        let invalid = |field: &str, message: String| Error::Validation {
            location: format!("{location}:{lineno}"),
            field: field.to_string(),
            message,
        };
        if rec.id.is_empty() {
            return Err(invalid("id", "must be non-empty".into()));
        }
        if rec.label.is_empty() {
            return Err(invalid("label", "must be non-empty".into()));
        }
        if rec.group.is_empty() {
            return Err(invalid("group", "must be non-empty".into()));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(invalid("id", format!("duplicate sample id {:?}", rec.id)));
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Validation {
            location,
            field: "manifest".into(),
            message: "no samples".into(),
        });
    }
    Ok(out)
}

/// Writes one JSON object per line.
pub fn write_manifest(path: &Path, records: &[GroupedSample]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("manifest records serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// One image of a dataset being written to disk.
#[derive(Debug, Clone, Copy)]
pub struct DatasetEntry<'a> {
    pub id: &'a str,
    pub image: &'a Image,
    pub mask: Option<&'a ForegroundMask>,
    pub label: &'a str,
    pub group: &'a str,
}

/// Writes `images/<id>.png`, `masks/<id>.png` and `manifest.jsonl` under
/// `out_dir` and returns the manifest path.
pub fn write_dataset(out_dir: &Path, entries: &[DatasetEntry<'_>]) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(entries.len());
    for e in entries {
        let image = PathBuf::from("images").join(format!("{}.png", e.id));
        e.image.save_png(&out_dir.join(&image))?;
        let mask = match e.mask {
            Some(m) => {
                let p = PathBuf::from("masks").join(format!("{}.png", e.id));
                m.save_png(&out_dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        records.push(GroupedSample {
            id: e.id.to_string(),
            image,
            label: e.label.to_string(),
            group: e.group.to_string(),
            mask,
        });
    }
    let path = out_dir.join("manifest.jsonl");
    write_manifest(&path, &records)?;
    Ok(path)
}

/// Loads only the images of `records`, e.g. for a reference pool.
pub fn load_images(manifest_path: &Path, records: &[GroupedSample]) -> Result<Vec<Image>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    records.iter().map(|r| Image::load_png(&resolve(base, &r.image))).collect()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads the images and masks of `records`, checking labels against
/// `labels` and image shapes against `shape`.
pub fn load_samples(
    manifest_path: &Path,
    records: &[GroupedSample],
    labels: &[String],
    shape: (usize, usize, usize),
) -> Result<Vec<LoadedSample>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let location = manifest_path.display().to_string();
    records
        .iter()
        .map(|r| {
            let invalid = |field: &str, message: String| Error::Validation {
                location: format!("{location} [{}]", r.id),
                field: field.to_string(),
                message,
            };
            if !labels.contains(&r.label) {
                return Err(invalid("label", format!("{:?} is not one of {labels:?}", r.label)));
            }
            let image = Image::load_png(&resolve(base, &r.image))?;
            if image.shape() != shape {
                return Err(invalid(
                    "image",
                    format!("shape {:?} does not match the model input {shape:?}", image.shape()),
                ));
            }
            let mask = match &r.mask {
                Some(p) => {
                    let m = ForegroundMask::load_png(&resolve(base, p))?;
                    if !m.matches(&image) {
                        return Err(invalid("mask", "mask size differs from the image".into()));
                    }
                    Some(m)
                }
                None => None,
            };
            Ok(LoadedSample {
                id: r.id.clone(),
                label: r.label.clone(),
                group: r.group.clone(),
                image,
                mask,
            })
        })
        .collect()
}
