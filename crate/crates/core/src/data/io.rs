//! Newline-delimited JSON sample files.
//!
//! Each line is one sample:
//! `{"id": str, "label": int|null, "T": int, "M": int, "V": int, "C": int, "data": [T][M][V][C]}`.
//! Files written by this crate start with an extra `{"meta": {...}}` line
//! carrying the tool version, class names, modality, the producing config
//! and a SHA-256 checksum over the sample lines. Readers accept files with
//! or without it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Modality, SkeletonSample};
use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileMeta {
    pub tool_version: String,
    pub modality: Modality,
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
    /// Hex SHA-256 of every line after the meta line, newline-terminated.
    pub checksum: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    #[serde(default)]
    label: Option<usize>,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "C")]
    c: usize,
    data: Vec<Vec<Vec<Vec<f64>>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    meta: FileMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub files: Vec<String>,
}

pub fn content_checksum(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn to_record(s: &SkeletonSample) -> SampleRecord {
    let data = (0..s.frames)
        .map(|t| (0..s.bodies).map(|m| (0..s.joints).map(|v| s.joint(t, m, v).to_vec()).collect()).collect())
        .collect();
    SampleRecord { id: s.id.clone(), label: s.label, t: s.frames, m: s.bodies, v: s.joints, c: s.channels, data }
}

fn from_record(r: SampleRecord) -> std::result::Result<SkeletonSample, String> {
    let dims = [r.t, r.m, r.v, r.c];
    if r.data.len() != r.t {
        return Err(format!("declared T={} but data has {} frames", r.t, r.data.len()));
    }
    let mut flat = Vec::with_capacity(r.t * r.m * r.v * r.c);
    for (t, frame) in r.data.into_iter().enumerate() {
        if frame.len() != r.m {
            return Err(format!("frame {t}: declared M={} but found {} bodies", r.m, frame.len()));
        }
        for (m, body) in frame.into_iter().enumerate() {
            if body.len() != r.v {
                return Err(format!("frame {t}, body {m}: declared V={} but found {} joints", r.v, body.len()));
            }
            for (v, joint) in body.into_iter().enumerate() {
                if joint.len() != r.c {
                    return Err(format!("frame {t}, body {m}, joint {v}: declared C={} but found {}", r.c, joint.len()));
                }
                flat.extend(joint);
            }
        }
    }
    if flat.iter().any(|x| !x.is_finite()) {
        return Err("non-finite coordinate".into());
    }
    SkeletonSample::new(r.id, r.label, dims, flat).map_err(|e| e.to_string())
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Parses NDJSON text. `default_modality` applies when no meta line is
/// present. Line numbers in errors are one-based.
pub fn parse_samples_str(text: &str, default_modality: Modality) -> Result<(Dataset, Option<FileMeta>)> {
    let mut meta: Option<(usize, FileMeta)> = None;
    let mut samples = Vec::new();
    let mut hasher = Sha256::new();
    let mut shape: Option<(usize, usize, usize)> = None;
    let mut seen_ids = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if meta.is_none() && samples.is_empty() && line.trim_start().starts_with("{\"meta\"") {
            let m: MetaLine = serde_json::from_str(line).map_err(|e| parse_err(lineno, e.to_string()))?;
            meta = Some((lineno, m.meta));
            continue;
        }
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let s = from_record(rec).map_err(|m| parse_err(lineno, m))?;
        let key = (s.joints, s.channels, s.bodies);
        match shape {
            None => shape = Some(key),
            Some(k) if k != key => {
                return Err(parse_err(
                    lineno,
                    format!("sample has (V, C, M) = {key:?}, earlier samples have {k:?}"),
                ))
            }
            _ => {}
        }
        if !seen_ids.insert(s.id.clone()) {
            return Err(parse_err(lineno, format!("duplicate sample id {:?}", s.id)));
        }
        samples.push(s);
    }
    if samples.is_empty() {
        log::warn!("sample file contains no samples");
    }
    let digest: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let (classes, modality, meta) = match meta {
        Some((lineno, m)) => {
            if m.checksum != digest {
                return Err(parse_err(lineno, format!("checksum mismatch: header {} vs content {digest}", m.checksum)));
            }
            (m.classes.clone(), m.modality, Some(m))
        }
        None => (Vec::new(), default_modality, None),
    };
    Ok((Dataset::new(samples, classes, modality), meta))
}

pub fn parse_samples(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    Ok(parse_samples_str(&text, Modality::Joint)?.0)
}

/// Serializes a dataset with a leading meta line.
pub fn write_samples_string(ds: &Dataset, config: &serde_json::Value) -> Result<String> {
    let mut body = String::new();
    for s in &ds.samples {
        body.push_str(&serde_json::to_string(&to_record(s))?);
        body.push('\n');
    }
    let meta = FileMeta {
        tool_version: TOOL_VERSION.into(),
        modality: ds.modality,
        classes: ds.class_names.clone(),
        config: config.clone(),
        checksum: content_checksum(body.as_bytes()),
    };
    let mut out = serde_json::to_string(&serde_json::json!({ "meta": meta }))?;
    out.push('\n');
    out.push_str(&body);
    Ok(out)
}

pub fn write_samples(path: &Path, ds: &Dataset, config: &serde_json::Value) -> Result<()> {
    fs::write(path, write_samples_string(ds, config)?)?;
    Ok(())
}

/// Loads every file listed in a manifest (paths relative to the manifest)
/// into one dataset carrying the manifest's class names.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out: Option<Dataset> = None;
    for f in &m.files {
        let ds = parse_samples(&base.join(f))?;
        match &mut out {
            None => out = Some(ds),
            Some(acc) => {
                if acc.modality != ds.modality {
                    return Err(Error::Config(format!("{f}: modality {} differs from {}", ds.modality, acc.modality)));
                }
                acc.samples.extend(ds.samples);
            }
        }
    }
    let mut ds = out.unwrap_or_else(|| Dataset::new(Vec::new(), Vec::new(), Modality::Joint));
    ds.class_names = m.classes;
    Ok(ds)
}
