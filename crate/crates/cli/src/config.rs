//! The run configuration: one flat TOML document binding every tunable.
//!
//! Every key is optional in the file; missing keys take the defaults below.
//! Unknown keys are rejected. Command-line flags override file values, and
//! the fully resolved configuration is embedded in every output.

use std::fs;
use std::path::{Path, PathBuf};

use aagcn::data::{AugmentConfig, PreprocessConfig, SynthConfig};
use aagcn::network::chain_blocks;
use aagcn::skeleton::SkeletonTopology;
use aagcn::train::{OptimizerConfig, Schedule, TrainConfig};
use aagcn::{Arrangement, GraphInit, Modality, ModelConfig, Preset, TopologyConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSize {
    /// Nine blocks, 64/128/256 channels.
    Standard,
    /// Three blocks, 8/16/32 channels, temporal kernel 5.
    Tiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // skeleton graph
    pub topology: Preset,
    /// Zero-based bone list, required when `topology = "custom"`.
    pub edges: Option<Vec<(usize, usize)>>,
    pub center_joint: Option<usize>,

    // architecture
    pub model: ModelSize,
    /// Per-block output channels; overrides the size preset.
    pub channels: Option<Vec<usize>>,
    /// Per-block temporal strides, same length as `channels` (default all 1).
    pub strides: Option<Vec<usize>>,
    pub adaptive: bool,
    pub attention: bool,
    pub temporal_kernel: Option<usize>,
    pub attention_spatial_kernel: Option<usize>,
    pub attention_temporal_kernel: Option<usize>,
    pub attention_reduction: usize,
    pub attention_arrangement: Arrangement,
    pub graph_init: GraphInit,
    /// Defaults to the class count found in the training data.
    pub num_classes: Option<usize>,

    // data
    pub modality: Modality,
    /// A sample file, a manifest, or a directory holding `<modality>.ndjson`.
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub keep_bodies: usize,
    /// Defaults to the longest input sequence.
    pub target_frames: Option<usize>,
    pub center: bool,
    pub align: bool,

    // synthetic data
    pub synth_per_class: usize,
    pub synth_classes: usize,
    pub synth_frames: usize,
    pub synth_bodies: usize,
    pub synth_noise: f64,

    // training
    pub epochs: usize,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub freeze_epochs: usize,
    pub augment: bool,
    pub seed: u64,
    /// The engine always runs single-threaded in f64, so every run is
    /// bitwise reproducible; the flag is recorded for the record.
    pub deterministic: bool,

    // fusion
    /// Defaults to equal weights.
    pub fusion_weights: Option<Vec<f64>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sched = Schedule::default();
        let opt = OptimizerConfig::default();
        let train = TrainConfig::default();
        let synth = SynthConfig::default();
        Self {
            topology: Preset::Ntu25,
            edges: None,
            center_joint: None,
            model: ModelSize::Standard,
            channels: None,
            strides: None,
            adaptive: true,
            attention: true,
            temporal_kernel: None,
            attention_spatial_kernel: None,
            attention_temporal_kernel: None,
            attention_reduction: aagcn::attention::DEFAULT_REDUCTION,
            attention_arrangement: Arrangement::Sequential,
            graph_init: GraphInit::CopyFrozen,
            num_classes: None,
            modality: Modality::Joint,
            train_data: None,
            val_data: None,
            keep_bodies: 2,
            target_frames: None,
            center: true,
            align: true,
            synth_per_class: synth.num_per_class,
            synth_classes: synth.classes,
            synth_frames: synth.frames,
            synth_bodies: synth.bodies,
            synth_noise: synth.noise,
            epochs: sched.total_epochs,
            base_lr: sched.base_lr,
            milestones: sched.milestones,
            gamma: sched.gamma,
            momentum: opt.momentum,
            nesterov: opt.nesterov,
            weight_decay: opt.weight_decay,
            batch_size: train.batch_size,
            freeze_epochs: train.freeze_epochs,
            augment: false,
            seed: 0,
            deterministic: false,
            fusion_weights: None,
        }
    }
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub modality: Option<Modality>,
    pub weights: Option<Vec<f64>>,
    pub deterministic: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Data(format!("config: {}", e.message())))
    }

    /// Reads `path` (or starts from defaults) and applies `ov`. Relative
    /// data paths in the file are resolved against the file's directory.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                let mut c = Self::from_toml(&text)?;
                let base = p.parent().unwrap_or(Path::new(""));
                for slot in [&mut c.train_data, &mut c.val_data] {
                    if let Some(d) = slot.as_mut() {
                        if d.is_relative() {
                            *d = base.join(&*d);
                        }
                    }
                }
                c
            }
            None => Self::default(),
        };
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(m) = ov.modality {
            cfg.modality = m;
        }
        if let Some(w) = &ov.weights {
            cfg.fusion_weights = Some(w.clone());
        }
        cfg.deterministic |= ov.deterministic;
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn topology_config(&self) -> TopologyConfig {
        TopologyConfig { preset: self.topology, edges: self.edges.clone(), center_joint: self.center_joint }
    }

    pub fn build_topology(&self) -> Result<SkeletonTopology, CliError> {
        Ok(self.topology_config().build()?)
    }

    /// Architecture for data of the given `[T, M, V, C]`.
    pub fn model_config(&self, dims: [usize; 4], num_classes: usize) -> Result<ModelConfig, CliError> {
        let [t, m, v, c] = dims;
        let k = self.num_classes.unwrap_or(num_classes);
        let mut mc = match self.model {
            ModelSize::Standard => ModelConfig::standard(self.topology, c, k, t, m),
            ModelSize::Tiny => ModelConfig::tiny(c, k, t, m),
        };
        mc.topology = self.topology_config();
        if let Some(ch) = &self.channels {
            let strides = self.strides.clone().unwrap_or_else(|| vec![1; ch.len()]);
            if strides.len() != ch.len() {
                return Err(CliError::Data(format!("{} strides given for {} blocks", strides.len(), ch.len())));
            }
            mc.blocks = chain_blocks(c, ch, &strides);
        } else if self.strides.is_some() {
            return Err(CliError::Data("strides need an explicit channels list".into()));
        }
        for b in &mut mc.blocks {
            b.adaptive = self.adaptive;
            b.attention = self.attention;
        }
        if let Some(kt) = self.temporal_kernel {
            mc.temporal_kernel = kt;
        }
        mc.attention_spatial_kernel = match self.attention_spatial_kernel {
            Some(ks) => ks,
            // an odd kernel no wider than the skeleton
            None => {
                let cap = if v % 2 == 1 { v } else { v.saturating_sub(1).max(1) };
                mc.attention_spatial_kernel.min(cap)
            }
        };
        if let Some(kt) = self.attention_temporal_kernel {
            mc.attention_temporal_kernel = kt;
        }
        mc.attention_reduction = self.attention_reduction;
        mc.attention_arrangement = self.attention_arrangement;
        mc.graph_init = self.graph_init;
        mc.validate()?;
        Ok(mc)
    }

    pub fn train_config(&self, in_channels: usize) -> TrainConfig {
        TrainConfig {
            schedule: Schedule {
                base_lr: self.base_lr,
                milestones: self.milestones.clone(),
                gamma: self.gamma,
                total_epochs: self.epochs,
            },
            optimizer: OptimizerConfig { momentum: self.momentum, nesterov: self.nesterov, weight_decay: self.weight_decay },
            batch_size: self.batch_size,
            freeze_epochs: self.freeze_epochs,
            seed: self.seed,
            augment: self.augment.then(|| AugmentConfig {
                crop_frames: None,
                coord_dims: in_channels.min(3),
                ..AugmentConfig::default()
            }),
        }
    }

    pub fn preprocess_config(&self, topo: &SkeletonTopology, channels: usize, target_frames: usize) -> PreprocessConfig {
        let three_d = channels >= 3;
        PreprocessConfig {
            keep_bodies: self.keep_bodies,
            center_joint: (self.center && three_d).then_some(topo.center_joint),
            // the shoulder/spine indices belong to the 25-joint layout
            align: (self.align && three_d && topo.preset == Preset::Ntu25).then(Default::default),
            target_frames,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_per_class: self.synth_per_class,
            frames: self.synth_frames,
            classes: self.synth_classes,
            bodies: self.synth_bodies,
            seed: self.seed,
            noise: self.synth_noise,
        }
    }
}
