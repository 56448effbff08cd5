//! One function per subcommand. Each returns a report; printing and exit
//! codes are handled by the caller.

use std::fs;
use std::path::{Path, PathBuf};

use aagcn::data::{derive_modality, preprocess_sample, synth_dataset, write_samples};
use aagcn::gradcheck::{corrupted_case, run_suite, SuiteCase, DEFAULT_STEP};
use aagcn::train::{
    evaluate, fuse_scores, load_checkpoint, predict_scores, save_checkpoint, train, Checkpoint, FusionReport,
    OptimizerState, TrainState,
};
use aagcn::{Dataset, EpochLog, Graph, Modality, Mode, Model, StreamScores, Tensor};
use serde::Serialize;

use crate::config::RunConfig;
use crate::files::{load_dataset, log_string, read_log, read_scores, write_scores};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "log.ndjson";
pub const CONFIG_FILE: &str = "config.toml";
/// Gradient checks fail above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

#[derive(Clone, Debug)]
pub struct PreprocessReport {
    pub samples: usize,
    pub files: Vec<PathBuf>,
}

/// Reads raw joint data (or synthesizes it), normalizes every sample and
/// writes one file per modality into `out`.
pub fn cmd_preprocess(cfg: &RunConfig, input: Option<&Path>, synth: bool, out: &Path) -> Result<PreprocessReport, CliError> {
    let raw = match (input, synth) {
        (Some(p), false) => load_dataset(p, Modality::Joint)?,
        (None, true) => synth_dataset(&cfg.synth_config())?,
        _ => return Err(CliError::Usage("preprocess needs exactly one of --input or --synth".into())),
    };
    let Some([t, _, v, c]) = max_dims(&raw)? else {
        return Err(CliError::Data("input holds no samples".into()));
    };
    let topo = cfg.build_topology()?;
    if v != topo.num_joints {
        return Err(CliError::Data(format!("samples have {v} joints, the {:?} topology has {}", topo.preset, topo.num_joints)));
    }
    let target = cfg.target_frames.unwrap_or(t);
    let pcfg = cfg.preprocess_config(&topo, c, target);
    let joints = raw.map_samples(Modality::Joint, |s| preprocess_sample(s, &pcfg))?;
    create_dir(out)?;
    let config = cfg.to_json();
    let mut files = Vec::new();
    for m in Modality::ALL {
        let ds = joints.map_samples(m, |s| derive_modality(s, m, &topo))?;
        let path = out.join(format!("{m}.ndjson"));
        write_samples(&path, &ds, &config).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        files.push(path);
    }
    Ok(PreprocessReport { samples: joints.len(), files })
}

/// Longest sequence and shared `[M, V, C]` of raw data whose lengths differ.
fn max_dims(ds: &Dataset) -> Result<Option<[usize; 4]>, CliError> {
    let Some(first) = ds.samples.first() else { return Ok(None) };
    let [_, m, v, c] = first.dims();
    let mut t = 0;
    for s in &ds.samples {
        let d = s.dims();
        if d[2] != v || d[3] != c {
            return Err(CliError::Data(format!("sample {:?} has V={} C={}, expected V={v} C={c}", s.id, d[2], d[3])));
        }
        t = t.max(d[0]);
    }
    // body count is normalized by the pipeline
    Ok(Some([t, m, v, c]))
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub logs: Vec<EpochLog>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains one stream. Writes the resolved config, then rewrites the log
/// and the checkpoint after every epoch so an interrupted run can resume.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainReport, CliError> {
    let train_path = cfg.train_data.as_deref().ok_or_else(|| CliError::Data("train_data is not set".into()))?;
    let train_set = load_dataset(train_path, cfg.modality)?;
    let val_set = cfg.val_data.as_deref().map(|p| load_dataset(p, cfg.modality)).transpose()?;
    let dims = train_set.common_dims()?.ok_or_else(|| CliError::Data("training set is empty".into()))?;
    let model_cfg = cfg.model_config(dims, train_set.num_classes())?;
    let train_cfg = cfg.train_config(dims[3]);
    let (model, store) = Model::new(model_cfg.clone(), cfg.seed)?;
    if let Some(v) = &val_set {
        if let Some(d) = v.common_dims()? {
            model.check_input_shape(&[1, d[3], d[0], d[2], d[1]])?;
        }
    }

    let (mut state, mut history) = match resume {
        Some(p) => {
            let (_, ck) = load_checkpoint(p, Some(&model_cfg))?;
            let velocity = match ck.optimizer {
                Some(o) => o.velocity,
                None => OptimizerState::new(&ck.store, train_cfg.optimizer.clone()).velocity,
            };
            let optimizer = OptimizerState { config: train_cfg.optimizer.clone(), velocity };
            let prev_log = p.with_file_name(LOG_FILE);
            let mut history = if prev_log.exists() { read_log(&prev_log)? } else { Vec::new() };
            history.retain(|l| l.epoch < ck.epoch);
            (TrainState { store: ck.store, optimizer, epoch: ck.epoch }, history)
        }
        None => (TrainState::fresh(store, &train_cfg.optimizer), Vec::new()),
    };

    create_dir(out)?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()).map_err(|e| io_err(&config_path, e))?;
    let run_json = cfg.to_json();
    let ck_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOG_FILE);
    fs::write(&log_path, log_string(&history, cfg.modality, &run_json)).map_err(|e| io_err(&log_path, e))?;
    train(&model, &mut state, &train_set, val_set.as_ref(), &train_cfg, |log, st| {
        log::info!(
            "epoch {} lr {:.4e} loss {:.5} train {:.3}{}",
            log.epoch,
            log.lr,
            log.loss,
            log.train_acc,
            log.val_acc.map(|v| format!(" val {v:.3}")).unwrap_or_default()
        );
        history.push(log.clone());
        save_checkpoint(&ck_path, &Checkpoint::from_state(&model, st, run_json.clone()))?;
        fs::write(&log_path, log_string(&history, cfg.modality, &run_json))?;
        Ok(())
    })?;
    if state.epoch == 0 || history.is_empty() {
        // nothing trained; still leave a loadable checkpoint
        save_checkpoint(&ck_path, &Checkpoint::from_state(&model, &state, run_json.clone()))?;
    }
    Ok(TrainReport { logs: history, checkpoint: ck_path, log: log_path })
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub scores: StreamScores,
    /// Top-1 and top-5 accuracy; `None` for unlabeled data.
    pub top_k: Option<[f64; 2]>,
}

fn stored_modality(ck: &Checkpoint) -> Option<Modality> {
    ck.run.get("modality").and_then(|m| serde_json::from_value(m.clone()).ok())
}

/// Scores `data` with a trained stream. With `require_labels` every sample
/// must be labeled and accuracy is reported.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    modality: Option<Modality>,
    out: Option<&Path>,
    require_labels: bool,
) -> Result<EvalOutcome, CliError> {
    let (model, ck) = load_checkpoint(checkpoint, None)?;
    let modality = modality.or_else(|| stored_modality(&ck)).unwrap_or(cfg.modality);
    let path = data
        .or(cfg.val_data.as_deref())
        .ok_or_else(|| CliError::Usage("no data given (--data or val_data in the config)".into()))?;
    let ds = load_dataset(path, modality)?;
    if let Some([t, m, v, c]) = ds.common_dims()? {
        model.check_input_shape(&[1, c, t, v, m]).map_err(|e| CliError::Data(format!("checkpoint does not match the data: {e}")))?;
    }
    let batch = cfg.batch_size.max(1);
    let (mut scores, top_k) = if require_labels {
        let r = evaluate(&model, &ck.store, &ds, &[1, 5], batch)?;
        (r.scores, Some([r.top_k[0], r.top_k[1]]))
    } else {
        (predict_scores(&model, &ck.store, &ds, batch)?, None)
    };
    scores.stream = modality.as_str().into();
    if let Some(o) = out {
        write_scores(o, &scores, &ds.class_names, &ck.run)?;
    }
    Ok(EvalOutcome { scores, top_k })
}

/// Weighted sum of score files; equal weights unless given.
pub fn cmd_fuse(files: &[PathBuf], weights: Option<&[f64]>, out: Option<&Path>, config: &serde_json::Value) -> Result<FusionReport, CliError> {
    let mut streams = Vec::new();
    let mut classes = Vec::new();
    for f in files {
        let (s, meta) = read_scores(f)?;
        if classes.is_empty() {
            classes = meta.classes;
        }
        streams.push(s);
    }
    let w = weights.map(<[f64]>::to_vec).unwrap_or_else(|| vec![1.0; streams.len()]);
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(CliError::Data(format!("fusion weights must be finite and non-negative: {w:?}")));
    }
    let report = fuse_scores(&streams, &w, &[1, 5])?;
    if let Some(o) = out {
        write_scores(o, &report.fused, &classes, config)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerExport {
    pub block: usize,
    /// `[K][V][V]`.
    pub global_graph: serde_json::Value,
    pub gate: f64,
    /// `[K][V][V]` for the exported sample (first body).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub individual_graph: Option<serde_json::Value>,
    /// `[V]` spatial attention of the exported sample (first body).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spatial_attention: Option<serde_json::Value>,
    /// `[T']` temporal attention at the block's frame rate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temporal_attention: Option<serde_json::Value>,
    /// `[C]` channel attention.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel_attention: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GraphExport {
    pub tool_version: String,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<String>,
    pub layers: Vec<LayerExport>,
    pub checksum: String,
}

/// Nested JSON arrays following the tensor's shape.
pub fn nested(t: &Tensor) -> serde_json::Value {
    fn rec(data: &[f64], shape: &[usize]) -> serde_json::Value {
        match shape {
            [] => serde_json::json!(data[0]),
            [n] => serde_json::json!(data[..*n]),
            [n, rest @ ..] => {
                let step: usize = rest.iter().product();
                serde_json::Value::Array((0..*n).map(|i| rec(&data[i * step..(i + 1) * step], rest)).collect())
            }
        }
    }
    rec(t.data(), t.shape())
}

/// First `[..]` slab of a probe whose leading axis is the batch.
fn first_row(t: &Tensor) -> Tensor {
    let rest = &t.shape()[1..];
    let n: usize = rest.iter().product();
    Tensor::new(rest, t.data()[..n].to_vec()).expect("slab shape")
}

fn squeeze(t: Tensor) -> Tensor {
    let s: Vec<usize> = t.shape().iter().copied().filter(|&d| d != 1).collect();
    let s = if s.is_empty() { vec![1] } else { s };
    t.reshape(&s).expect("same size")
}

/// Learned graphs and gates for every adaptive layer; with a sample, also
/// its individual graphs and attention maps.
pub fn cmd_export_graph(checkpoint: &Path, data: Option<&Path>, sample: Option<&str>) -> Result<GraphExport, CliError> {
    let (model, ck) = load_checkpoint(checkpoint, None)?;
    let mut probes = std::collections::HashMap::new();
    let mut sample_id = None;
    if let Some(p) = data {
        let modality = stored_modality(&ck).unwrap_or(Modality::Joint);
        let ds = load_dataset(p, modality)?;
        let s = match sample {
            Some(id) => ds.samples.iter().find(|s| s.id == id).ok_or_else(|| CliError::Data(format!("no sample {id:?}")))?,
            None => ds.samples.first().ok_or_else(|| CliError::Data("data holds no samples".into()))?,
        };
        sample_id = Some(s.id.clone());
        let x = aagcn::data::batch_tensor(&[s])?;
        let mut g = Graph::with_probes();
        let xv = g.constant(x);
        model.forward(&mut g, &ck.store, xv, Mode::Eval)?;
        for (name, t) in g.probes() {
            probes.insert(name.to_string(), first_row(t));
        }
    }
    let mut layers = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        let Some(a) = b.agcl() else { continue };
        let get = |suffix: &str| probes.get(&format!("blocks.{i}.{suffix}")).cloned();
        layers.push(LayerExport {
            block: i,
            global_graph: nested(ck.store.value(a.global_graph)),
            gate: ck.store.value(a.gate).data()[0],
            individual_graph: get("gcn.individual_graph").map(|t| nested(&t)),
            spatial_attention: get("stc.spatial").map(|t| nested(&squeeze(t))),
            temporal_attention: get("stc.temporal").map(|t| nested(&squeeze(t))),
            channel_attention: get("stc.channel").map(|t| nested(&squeeze(t))),
        });
    }
    let body = serde_json::to_string(&layers).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(GraphExport {
        tool_version: aagcn::data::TOOL_VERSION.into(),
        config: ck.run.clone(),
        sample: sample_id,
        checksum: aagcn::data::content_checksum(body.as_bytes()),
        layers,
    })
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub cases: Vec<SuiteCase>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&SuiteCase> {
        self.cases.iter().filter(|c| !(c.max_rel_error <= self.tolerance)).collect()
    }
}

/// Finite-difference suite over every op and a toy model. The negative
/// control appends a deliberately wrong backward rule.
pub fn cmd_gradcheck(negative_control: bool) -> Result<GradcheckReport, CliError> {
    let mut cases = run_suite(DEFAULT_STEP)?;
    if negative_control {
        cases.push(corrupted_case(DEFAULT_STEP)?);
    }
    Ok(GradcheckReport { cases, tolerance: GRADCHECK_TOLERANCE })
}
