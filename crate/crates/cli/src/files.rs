//! NDJSON artifacts written by the commands: score files and training logs.
//!
//! Both start with a meta line `{"meta": {...}}` carrying the tool version,
//! the resolved run configuration and the SHA-256 of every following line.

use std::fs;
use std::path::{Path, PathBuf};

use aagcn::data::{content_checksum, load_manifest, parse_samples_str, TOOL_VERSION};
use aagcn::{Dataset, EpochLog, Modality, StreamScores};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub tool_version: String,
    pub kind: String,
    /// Modality of a stream, or `"fused"`.
    pub stream: String,
    #[serde(default)]
    pub classes: Vec<String>,
    pub config: serde_json::Value,
    pub checksum: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    meta: ArtifactMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRow {
    id: String,
    label: Option<usize>,
    scores: Vec<f64>,
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {msg}", path.display()))
}

fn render(kind: &str, stream: &str, classes: &[String], config: &serde_json::Value, body: &str) -> String {
    let meta = ArtifactMeta {
        tool_version: TOOL_VERSION.into(),
        kind: kind.into(),
        stream: stream.into(),
        classes: classes.to_vec(),
        config: config.clone(),
        checksum: content_checksum(body.as_bytes()),
    };
    let mut out = serde_json::to_string(&MetaLine { meta }).expect("meta serializes");
    out.push('\n');
    out.push_str(body);
    out
}

/// Splits off and verifies the meta line.
fn split_checked<'a>(path: &Path, text: &'a str, kind: &str) -> Result<(ArtifactMeta, &'a str), CliError> {
    let (first, body) = text.split_once('\n').unwrap_or((text, ""));
    let meta: MetaLine = serde_json::from_str(first).map_err(|e| data_err(path, format!("line 1: {e}")))?;
    let meta = meta.meta;
    if meta.kind != kind {
        return Err(data_err(path, format!("expected a {kind} file, found {}", meta.kind)));
    }
    if content_checksum(body.as_bytes()) != meta.checksum {
        return Err(data_err(path, "content checksum mismatch"));
    }
    Ok((meta, body))
}

pub fn scores_string(s: &StreamScores, classes: &[String], config: &serde_json::Value) -> String {
    let mut body = String::new();
    for ((id, label), row) in s.ids.iter().zip(&s.labels).zip(&s.scores) {
        let r = ScoreRow { id: id.clone(), label: *label, scores: row.clone() };
        body.push_str(&serde_json::to_string(&r).expect("row serializes"));
        body.push('\n');
    }
    render("scores", &s.stream, classes, config, &body)
}

pub fn write_scores(path: &Path, s: &StreamScores, classes: &[String], config: &serde_json::Value) -> Result<(), CliError> {
    fs::write(path, scores_string(s, classes, config)).map_err(|e| data_err(path, e))
}

pub fn read_scores(path: &Path) -> Result<(StreamScores, ArtifactMeta), CliError> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let (meta, body) = split_checked(path, &text, "scores")?;
    let mut s = StreamScores { stream: meta.stream.clone(), ids: vec![], labels: vec![], scores: vec![] };
    for (i, line) in body.lines().enumerate() {
        let r: ScoreRow = serde_json::from_str(line).map_err(|e| data_err(path, format!("line {}: {e}", i + 2)))?;
        s.ids.push(r.id);
        s.labels.push(r.label);
        s.scores.push(r.scores);
    }
    Ok((s, meta))
}

pub fn log_string(lines: &[EpochLog], stream: Modality, config: &serde_json::Value) -> String {
    let mut body = String::new();
    for l in lines {
        body.push_str(&serde_json::to_string(l).expect("log serializes"));
        body.push('\n');
    }
    render("train_log", stream.as_str(), &[], config, &body)
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let (_, body) = split_checked(path, &text, "train_log")?;
    body.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| data_err(path, format!("line {}: {e}", i + 2))))
        .collect()
}

/// The file a data path names for `modality`: a directory resolves to
/// `<dir>/<modality>.ndjson`.
pub fn data_file(path: &Path, modality: Modality) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{modality}.ndjson"))
    } else {
        path.to_path_buf()
    }
}

/// Loads a sample file, a manifest (`.json`) or a modality directory, and
/// checks the stored modality when the file declares one.
pub fn load_dataset(path: &Path, modality: Modality) -> Result<Dataset, CliError> {
    let file = data_file(path, modality);
    if file.extension().is_some_and(|e| e == "json") {
        return Ok(load_manifest(&file)?);
    }
    let text = fs::read_to_string(&file).map_err(|e| data_err(&file, e))?;
    let (ds, meta) = parse_samples_str(&text, modality).map_err(|e| data_err(&file, e))?;
    if let Some(m) = meta {
        if m.modality != modality {
            return Err(data_err(&file, format!("holds {} data but {modality} was requested", m.modality)));
        }
    }
    Ok(ds)
}
