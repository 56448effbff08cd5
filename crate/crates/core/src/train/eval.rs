//! Evaluation, per-stream scores and weighted score fusion.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{batch_tensor, Dataset};
use crate::error::{config_err, Error, Result};
use crate::network::Model;
use crate::nn::Mode;
use crate::params::ParamStore;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Whether `label` is among the `k` best entries, ranking ties by index.
fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let s = row[label];
    let rank = row.iter().enumerate().filter(|&(i, &v)| v > s || (v == s && i < label)).count();
    rank < k
}

/// Softmax scores of one stream, one row per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamScores {
    pub stream: String,
    pub ids: Vec<String>,
    pub labels: Vec<Option<usize>>,
    pub scores: Vec<Vec<f64>>,
}

impl StreamScores {
    pub fn predictions(&self) -> Vec<usize> {
        self.scores.iter().map(|r| argmax(r)).collect()
    }
}

/// Fraction of labeled rows whose label is in the top `k`, for each `k`.
pub fn top_k_accuracy(scores: &StreamScores, ks: &[usize]) -> Vec<f64> {
    let labeled: Vec<(usize, &Vec<f64>)> =
        scores.labels.iter().zip(&scores.scores).filter_map(|(l, r)| l.map(|l| (l, r))).collect();
    ks.iter()
        .map(|&k| {
            if labeled.is_empty() {
                return 0.0;
            }
            labeled.iter().filter(|(l, r)| in_top_k(r, *l, k)).count() as f64 / labeled.len() as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub top_k: Vec<f64>,
    pub scores: StreamScores,
}

/// Eval-mode class probabilities for every sample; labels may be absent.
pub fn predict_scores(model: &Model, store: &ParamStore, ds: &Dataset, batch_size: usize) -> Result<StreamScores> {
    if batch_size == 0 {
        return config_err("batch size must be positive");
    }
    let mut out =
        StreamScores { stream: ds.modality.to_string(), ids: Vec::new(), labels: Vec::new(), scores: Vec::new() };
    for chunk in ds.samples.chunks(batch_size) {
        let refs: Vec<_> = chunk.iter().collect();
        let mut g = Graph::new();
        let x = g.constant(batch_tensor(&refs)?);
        let logits = model.forward(&mut g, store, x, Mode::Eval)?;
        let p = g.softmax(logits, 1)?;
        let p = g.value(p);
        let k = p.shape()[1];
        for (i, s) in chunk.iter().enumerate() {
            out.ids.push(s.id.clone());
            out.labels.push(s.label);
            out.scores.push(p.data()[i * k..(i + 1) * k].to_vec());
        }
    }
    Ok(out)
}

/// Top-k accuracies plus the scores for fusion. Leaves parameters and
/// running statistics untouched.
pub fn evaluate(model: &Model, store: &ParamStore, ds: &Dataset, ks: &[usize], batch_size: usize) -> Result<EvalReport> {
    let scores = predict_scores(model, store, ds, batch_size)?;
    if scores.labels.iter().any(Option::is_none) {
        return config_err("evaluation needs every sample labeled");
    }
    Ok(EvalReport { ks: ks.to_vec(), top_k: top_k_accuracy(&scores, ks), scores })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub fused: StreamScores,
    pub per_stream_top_k: Vec<Vec<f64>>,
    pub fused_top_k: Vec<f64>,
}

/// `Σ_s w_s · scores_s` per sample, rows aligned by id in the first
/// stream's order.
pub fn fuse_scores(streams: &[StreamScores], weights: &[f64], ks: &[usize]) -> Result<FusionReport> {
    let Some(first) = streams.first() else {
        return config_err("fusion needs at least one stream");
    };
    if weights.len() != streams.len() {
        return config_err(format!("{} weights given for {} streams", weights.len(), streams.len()));
    }
    let base: BTreeSet<&str> = first.ids.iter().map(String::as_str).collect();
    if base.len() != first.ids.len() {
        return Err(Error::IdMismatch(format!("stream {:?} repeats sample ids", first.stream)));
    }
    let mut lookups = Vec::with_capacity(streams.len());
    for s in streams {
        let ids: BTreeSet<&str> = s.ids.iter().map(String::as_str).collect();
        if ids != base || ids.len() != s.ids.len() {
            let diff: Vec<&str> = base.symmetric_difference(&ids).copied().collect();
            return Err(Error::IdMismatch(format!(
                "streams {:?} and {:?} differ in ids {:?}",
                first.stream, s.stream, diff
            )));
        }
        let classes = first.scores.first().map_or(0, Vec::len);
        if s.scores.iter().any(|r| r.len() != classes) {
            return config_err(format!("stream {:?} has a different class count", s.stream));
        }
        let map: HashMap<&str, usize> = s.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        lookups.push(map);
    }
    let mut fused = StreamScores {
        stream: "fused".into(),
        ids: first.ids.clone(),
        labels: first.labels.clone(),
        scores: Vec::with_capacity(first.ids.len()),
    };
    for id in &first.ids {
        let mut row = vec![0.0; first.scores.first().map_or(0, Vec::len)];
        for ((s, map), &w) in streams.iter().zip(&lookups).zip(weights) {
            for (acc, v) in row.iter_mut().zip(&s.scores[map[id.as_str()]]) {
                *acc += w * v;
            }
        }
        fused.scores.push(row);
    }
    Ok(FusionReport {
        per_stream_top_k: streams.iter().map(|s| top_k_accuracy(s, ks)).collect(),
        fused_top_k: top_k_accuracy(&fused, ks),
        fused,
    })
}
