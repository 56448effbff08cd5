//! Basic blocks and the full multi-block classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agcl::{embed_channels, Agcl, AgclConfig, BaselineGcn, GraphInit};
use crate::attention::{clamp_odd, Arrangement, StcAttention, StcConfig, DEFAULT_REDUCTION, DEFAULT_SPATIAL_KERNEL,
    DEFAULT_TEMPORAL_KERNEL};
use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{fan_in_uniform, BatchNorm, Mode};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::skeleton::{PartitionedAdjacency, Preset, SkeletonTopology};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub adaptive: bool,
    pub attention: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_joint: Option<usize>,
}

impl TopologyConfig {
    pub fn preset(preset: Preset) -> Self {
        Self { preset, edges: None, center_joint: None }
    }

    pub fn build(&self) -> Result<SkeletonTopology> {
        SkeletonTopology::build(self.preset, self.edges.as_deref(), self.center_joint)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub frames: usize,
    pub bodies: usize,
    pub topology: TopologyConfig,
    pub blocks: Vec<BlockSpec>,
    pub temporal_kernel: usize,
    pub attention_spatial_kernel: usize,
    pub attention_temporal_kernel: usize,
    pub attention_reduction: usize,
    pub attention_arrangement: Arrangement,
    pub graph_init: GraphInit,
}

pub const DEFAULT_CHANNELS: [usize; 9] = [64, 64, 64, 128, 128, 128, 256, 256, 256];
pub const DEFAULT_STRIDES: [usize; 9] = [1, 1, 1, 2, 1, 1, 2, 1, 1];
pub const DEFAULT_TEMPORAL_KERNEL_SIZE: usize = 9;

/// Chains `channels`/`strides` into block specs starting from `c_in`.
pub fn chain_blocks(c_in: usize, channels: &[usize], strides: &[usize]) -> Vec<BlockSpec> {
    let mut prev = c_in;
    channels
        .iter()
        .zip(strides)
        .map(|(&c, &s)| {
            let b = BlockSpec { c_in: prev, c_out: c, stride: s, adaptive: true, attention: true };
            prev = c;
            b
        })
        .collect()
}

impl ModelConfig {
    /// Nine-block default for a preset topology.
    pub fn standard(preset: Preset, in_channels: usize, num_classes: usize, frames: usize, bodies: usize) -> Self {
        let joints = match preset {
            Preset::Kinetics18 => 18,
            _ => 25,
        };
        Self {
            in_channels,
            num_classes,
            frames,
            bodies,
            topology: TopologyConfig::preset(preset),
            blocks: chain_blocks(in_channels, &DEFAULT_CHANNELS, &DEFAULT_STRIDES),
            temporal_kernel: DEFAULT_TEMPORAL_KERNEL_SIZE,
            attention_spatial_kernel: clamp_odd(DEFAULT_SPATIAL_KERNEL, joints),
            attention_temporal_kernel: DEFAULT_TEMPORAL_KERNEL,
            attention_reduction: DEFAULT_REDUCTION,
            attention_arrangement: Arrangement::Sequential,
            graph_init: GraphInit::CopyFrozen,
        }
    }

    /// Three-block desk-scale model: channels 8/16/32, temporal kernel 5.
    pub fn tiny(in_channels: usize, num_classes: usize, frames: usize, bodies: usize) -> Self {
        Self {
            blocks: chain_blocks(in_channels, &[8, 16, 32], &[1, 2, 2]),
            temporal_kernel: 5,
            attention_temporal_kernel: 5,
            ..Self::standard(Preset::Ntu25, in_channels, num_classes, frames, bodies)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return config_err("model needs at least one block");
        }
        if self.temporal_kernel % 2 == 0 {
            return config_err(format!("temporal kernel must be odd, got {}", self.temporal_kernel));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.bodies == 0 || self.frames == 0 {
            return config_err("channels, classes, bodies and frames must be positive");
        }
        let mut prev = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.c_in != prev {
                return config_err(format!("block {i}: c_in {} does not follow previous c_out {prev}", b.c_in));
            }
            if !(1..=2).contains(&b.stride) {
                return config_err(format!("block {i}: stride must be 1 or 2, got {}", b.stride));
            }
            prev = b.c_out;
        }
        Ok(())
    }

    pub fn final_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.c_out)
    }

    /// Frames left after every block's stride, with same padding.
    pub fn output_frames(&self, t: usize) -> usize {
        self.blocks.iter().fold(t, |t, b| t.div_ceil(b.stride))
    }

    fn stc_config(&self, channels: usize) -> StcConfig {
        StcConfig {
            channels,
            spatial_kernel: self.attention_spatial_kernel,
            temporal_kernel: self.attention_temporal_kernel,
            reduction: self.attention_reduction,
            arrangement: self.attention_arrangement,
        }
    }
}

/// Constants that are fixed in code rather than configured, recorded
/// alongside checkpoints so a reader knows how a model was built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignConstants {
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub degree_regularizer: f64,
    pub embed_rule: String,
    pub dtype: String,
}

impl Default for DesignConstants {
    fn default() -> Self {
        Self {
            bn_eps: crate::nn::BN_EPS,
            bn_momentum: crate::nn::BN_MOMENTUM,
            degree_regularizer: crate::skeleton::DEGREE_REGULARIZER,
            embed_rule: "max(1, c_out / 4)".into(),
            dtype: "f64".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Spatial {
    Adaptive(Agcl),
    Fixed(BaselineGcn),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub spec: BlockSpec,
    pub spatial: Spatial,
    pub spatial_bn: BatchNorm,
    pub attention: Option<StcAttention>,
    pub temporal_w: ParamId,
    pub temporal_bn: BatchNorm,
    pub residual_w: Option<ParamId>,
    pub temporal_kernel: usize,
}

impl Block {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        spec: &BlockSpec,
        cfg: &ModelConfig,
        adjacency: &PartitionedAdjacency,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (ci, co) = (spec.c_in, spec.c_out);
        let spatial = if spec.adaptive {
            let acfg = AgclConfig {
                c_in: ci,
                c_out: co,
                embed_channels: embed_channels(co),
                init: cfg.graph_init,
                residual: true,
            };
            Spatial::Adaptive(Agcl::init(store, &format!("{prefix}.gcn"), adjacency, acfg, rng))
        } else {
            Spatial::Fixed(BaselineGcn::init(store, &format!("{prefix}.gcn"), adjacency, ci, co, false, true, rng))
        };
        let spatial_bn = BatchNorm::new(store, &format!("{prefix}.gcn_bn"), co);
        let attention = if spec.attention {
            Some(StcAttention::init(store, &format!("{prefix}.stc"), cfg.stc_config(co), rng)?)
        } else {
            None
        };
        let kt = cfg.temporal_kernel;
        let temporal_w = store.add(
            format!("{prefix}.tcn.weight"),
            fan_in_uniform(&[co, co, kt, 1], co * kt, rng),
            ParamKind::Weight,
        );
        let temporal_bn = BatchNorm::new(store, &format!("{prefix}.tcn_bn"), co);
        let residual_w = (ci != co || spec.stride != 1).then(|| {
            store.add(format!("{prefix}.residual.weight"), fan_in_uniform(&[co, ci, 1, 1], ci, rng), ParamKind::Weight)
        });
        Ok(Self { spec: spec.clone(), spatial, spatial_bn, attention, temporal_w, temporal_bn, residual_w, temporal_kernel: kt })
    }

    pub fn agcl(&self) -> Option<&Agcl> {
        match &self.spatial {
            Spatial::Adaptive(a) => Some(a),
            Spatial::Fixed(_) => None,
        }
    }

    /// `[NM, C_in, T, V] -> [NM, C_out, ceil(T / stride), V]`. The skip path
    /// joins after the final activation.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.spec.c_in {
            return shape_err(format!("expected [NM,{},T,V] input, got {:?}", self.spec.c_in, s));
        }
        let mut f = match &self.spatial {
            Spatial::Adaptive(a) => a.forward(g, store, x)?,
            Spatial::Fixed(b) => b.forward(g, store, x)?,
        };
        f = self.spatial_bn.forward(g, store, f, mode)?;
        f = g.relu(f);
        if let Some(att) = &self.attention {
            f = att.forward(g, store, f)?;
        }
        let w = g.param(store, self.temporal_w);
        f = g.conv(f, w, ConvGeom::new(self.spec.stride, self.temporal_kernel / 2, 0))?;
        f = self.temporal_bn.forward(g, store, f, mode)?;
        f = g.relu(f);
        let skip = match self.residual_w {
            Some(rw) => {
                let rw = g.param(store, rw);
                g.conv(x, rw, ConvGeom::new(self.spec.stride, 0, 0))?
            }
            None => x,
        };
        g.add(f, skip)
    }
}

fn in_block(i: usize, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("block {i}: {m}")),
        Error::Config(m) => Error::Config(format!("block {i}: {m}")),
        other => other,
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub topology: SkeletonTopology,
    pub adjacency: PartitionedAdjacency,
    pub data_bn: BatchNorm,
    pub blocks: Vec<Block>,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
}

impl Model {
    /// Builds the architecture and a freshly initialized parameter store.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let topology = config.topology.build()?;
        let adjacency = PartitionedAdjacency::from_topology(&topology);
        let v = topology.num_joints;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let data_bn = BatchNorm::new(&mut store, "data_bn", config.bodies * v * config.in_channels);
        let blocks = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                Block::init(&mut store, &format!("blocks.{i}"), spec, &config, &adjacency, &mut rng)
                    .map_err(|e| in_block(i, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let c = config.final_channels();
        let fc_w = store.add("fc.weight", fan_in_uniform(&[c, config.num_classes], c, &mut rng), ParamKind::Weight);
        let fc_b = store.add("fc.bias", Tensor::zeros(&[config.num_classes]), ParamKind::Bias);
        Ok((Self { config, topology, adjacency, data_bn, blocks, fc_w, fc_b }, store))
    }

    pub fn num_joints(&self) -> usize {
        self.topology.num_joints
    }

    /// Checks `[N, C, T, V, M]` against the configuration, naming the first
    /// offending axis.
    pub fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return shape_err(format!("input must be [N,C,T,V,M], got rank {} ({:?})", shape.len(), shape));
        }
        let expect = [
            ("C (channels)", 1, self.config.in_channels),
            ("V (joints)", 3, self.num_joints()),
            ("M (bodies)", 4, self.config.bodies),
        ];
        for (name, axis, want) in expect {
            if shape[axis] != want {
                return shape_err(format!("input axis {name} is {}, expected {want}", shape[axis]));
            }
        }
        if shape[0] == 0 || shape[2] == 0 {
            return shape_err(format!("input axes N and T must be positive, got {:?}", shape));
        }
        Ok(())
    }

    /// Pooled `[N, C_final]` features before the classifier.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(x).to_vec();
        self.check_input_shape(&s)?;
        let (n, c, t, v, m) = (s[0], s[1], s[2], s[3], s[4]);
        let mut f = g.permute(x, &[0, 4, 3, 1, 2])?;
        f = g.reshape(f, &[n, m * v * c, t])?;
        f = self.data_bn.forward(g, store, f, mode)?;
        g.probe("data_bn.output", f);
        f = g.reshape(f, &[n, m, v, c, t])?;
        f = g.permute(f, &[0, 1, 3, 4, 2])?;
        f = g.reshape(f, &[n * m, c, t, v])?;
        for (i, b) in self.blocks.iter().enumerate() {
            f = b.forward(g, store, f, mode).map_err(|e| in_block(i, e))?;
            g.probe(format!("blocks.{i}.output"), f);
        }
        let pooled = g.mean(f, &[2, 3], false)?;
        let cf = self.config.final_channels();
        let pooled = g.reshape(pooled, &[n, m, cf])?;
        g.mean(pooled, &[1], false)
    }

    /// Class scores `[N, num_classes]` (pre-softmax).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let feats = self.features(g, store, x, mode)?;
        let w = g.param(store, self.fc_w);
        let b = g.param(store, self.fc_b);
        let y = g.matmul(feats, w)?;
        let scores = g.add(y, b)?;
        g.probe("scores", scores);
        Ok(scores)
    }

    pub fn agcl_layers(&self) -> impl Iterator<Item = &Agcl> {
        self.blocks.iter().filter_map(Block::agcl)
    }

    pub fn unfreeze_global_graphs(&self, store: &mut ParamStore) {
        for a in self.agcl_layers() {
            a.unfreeze_global_graph(store);
        }
    }

    /// Total scalar parameters, frozen ones included, running stats excluded.
    pub fn count_parameters(store: &ParamStore) -> usize {
        store.count_trainable()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, worst, DEFAULT_STEP};
    use crate::skeleton::NUM_SUBSETS;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Parameter count derived from the configuration alone.
    fn walk_shapes(cfg: &ModelConfig, v: usize) -> usize {
        let k = NUM_SUBSETS;
        let mut total = 2 * cfg.bodies * v * cfg.in_channels;
        for b in &cfg.blocks {
            let (ci, co) = (b.c_in, b.c_out);
            let spatial = if b.adaptive {
                let ce = (co / 4).max(1);
                k * v * v + k * co * ci + 2 * k * ce * ci + 1
            } else {
                k * co * ci
            };
            let gcn_res = if ci != co { co * ci } else { 0 };
            let att = if b.attention {
                let h = co / cfg.attention_reduction;
                co * cfg.attention_spatial_kernel + 1 + co * cfg.attention_temporal_kernel + 1 + co * h + h + h * co + co
            } else {
                0
            };
            let tcn = co * co * cfg.temporal_kernel;
            let res = if ci != co || b.stride != 1 { co * ci } else { 0 };
            total += spatial + gcn_res + 2 * co + att + tcn + 2 * co + res;
        }
        total + cfg.final_channels() * cfg.num_classes + cfg.num_classes
    }

    fn toy_config(blocks: Vec<BlockSpec>) -> ModelConfig {
        ModelConfig {
            blocks,
            temporal_kernel: 3,
            attention_spatial_kernel: 3,
            attention_temporal_kernel: 3,
            topology: TopologyConfig {
                preset: Preset::Custom,
                edges: Some(vec![(0, 1), (1, 2)]),
                center_joint: Some(1),
            },
            ..ModelConfig::standard(Preset::Custom, 4, 3, 8, 1)
        }
    }

    #[test]
    fn parameter_counts() {
        let cfg = ModelConfig::standard(Preset::Ntu25, 3, 60, 300, 2);
        let (model, store) = Model::new(cfg.clone(), 0).unwrap();
        let fc: usize = store.entries().iter().filter(|e| e.name.starts_with("fc.")).map(|e| e.value.numel()).sum();
        assert_eq!(fc, 15_420);
        let total = Model::count_parameters(&store);
        assert_eq!(total, walk_shapes(&cfg, model.num_joints()));

        let doubled = ModelConfig { num_classes: 120, ..cfg };
        let (_, store2) = Model::new(doubled, 0).unwrap();
        assert_eq!(Model::count_parameters(&store2) - total, 256 * 60 + 60);
    }

    #[test]
    fn names_are_unique_and_stable() {
        let cfg = ModelConfig::tiny(3, 4, 16, 1);
        let (_, a) = Model::new(cfg.clone(), 1).unwrap();
        let (_, b) = Model::new(cfg, 2).unwrap();
        let na: Vec<_> = a.entries().iter().map(|e| e.name.clone()).collect();
        let nb: Vec<_> = b.entries().iter().map(|e| e.name.clone()).collect();
        assert_eq!(na, nb);
        let mut sorted = na.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), na.len());
    }

    #[test]
    fn default_model_on_ntu_dims() {
        let cfg = ModelConfig::standard(Preset::Ntu25, 3, 60, 300, 2);
        let (model, store) = Model::new(cfg, 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_t(&[1, 3, 300, 25, 2], 4));
        let feats = model.features(&mut g, &store, x, Mode::Eval).unwrap();
        assert_eq!(g.shape(feats), &[1, 256]);
        let y = model.forward(&mut g, &store, x, Mode::Eval).unwrap();
        assert_eq!(g.shape(y), &[1, 60]);
        assert!(g.value(y).all_finite());
        assert_eq!(model.config.output_frames(300), 75);
    }

    #[test]
    fn final_map_has_quarter_frames() {
        let cfg = ModelConfig::tiny(3, 4, 16, 1);
        let (model, store) = Model::new(cfg, 5).unwrap();
        for t in [4, 8, 16] {
            let mut g = Graph::new();
            let mut f = g.constant(rand_t(&[2, 3, t, 25], 6));
            for b in &model.blocks {
                f = b.forward(&mut g, &store, f, Mode::Train).unwrap();
            }
            assert_eq!(g.shape(f), &[2, 32, t / 4, 25]);
        }
    }

    #[test]
    fn identical_samples_give_identical_rows() {
        let cfg = ModelConfig::tiny(3, 4, 16, 2);
        let (model, store) = Model::new(cfg, 7).unwrap();
        let one = rand_t(&[1, 3, 8, 25, 2], 8);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let x = Tensor::new(&[2, 3, 8, 25, 2], data).unwrap();
        let mut g = Graph::new();
        let vx = g.constant(x);
        let y = model.forward(&mut g, &store, vx, Mode::Eval).unwrap();
        let r = g.value(y).data();
        assert_eq!(&r[..4], &r[4..]);
    }

    #[test]
    fn body_permutation_leaves_scores_unchanged() {
        let cfg = ModelConfig::tiny(3, 4, 16, 2);
        let (model, mut store) = Model::new(cfg, 9).unwrap();
        // Make the body-wise data BN statistics symmetric under the swap.
        let id = model.data_bn.running_mean;
        let mean = rand_t(&[25 * 3], 10);
        let mut stacked = mean.data().to_vec();
        stacked.extend_from_slice(mean.data());
        store.set_value(id, Tensor::new(&[150], stacked).unwrap()).unwrap();
        let x = rand_t(&[2, 3, 8, 25, 2], 11);
        let swapped = Tensor::from_fn(x.shape(), |i| {
            let m = i % 2;
            x.data()[i - m + (1 - m)]
        });
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let vx = g.constant(t.clone());
            let y = model.forward(&mut g, &store, vx, Mode::Eval).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(&x), run(&swapped));
        assert!(a.max_abs_diff(&b) < 1e-12, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn eval_is_bitwise_deterministic() {
        let (model, store) = Model::new(ModelConfig::tiny(3, 4, 16, 1), 12).unwrap();
        let x = rand_t(&[3, 3, 8, 25, 1], 13);
        let run = || {
            let mut g = Graph::new();
            let vx = g.constant(x.clone());
            let y = model.forward(&mut g, &store, vx, Mode::Eval).unwrap();
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dimension_errors_name_the_axis() {
        let (model, store) = Model::new(ModelConfig::tiny(3, 4, 16, 1), 14).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 24, 1]));
        let err = model.forward(&mut g, &store, x, Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("V (joints)"), "{err}");
        let x = g.constant(Tensor::zeros(&[1, 2, 8, 25, 1]));
        let err = model.forward(&mut g, &store, x, Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("C (channels)"), "{err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::tiny(3, 4, 16, 1);
        cfg.blocks[1].stride = 3;
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
        let mut cfg = ModelConfig::tiny(3, 4, 16, 1);
        cfg.blocks[1].c_in = 9;
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
        let mut cfg = ModelConfig::tiny(3, 4, 16, 1);
        cfg.temporal_kernel = 4;
        assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn identity_block_passes_residual_through() {
        let spec = BlockSpec { c_in: 4, c_out: 4, stride: 1, adaptive: true, attention: true };
        let cfg = toy_config(vec![spec.clone()]);
        let topo = cfg.topology.build().unwrap();
        let adj = PartitionedAdjacency::from_topology(&topo);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let block = Block::init(&mut store, "b", &spec, &cfg, &adj, &mut rng).unwrap();
        let Spatial::Adaptive(a) = &block.spatial else { unreachable!() };
        store.set_value(a.weight, Tensor::zeros(&[3, 4, 4])).unwrap();
        store.set_value(block.temporal_w, Tensor::zeros(&[4, 4, 3, 1])).unwrap();
        for bn in [&block.spatial_bn, &block.temporal_bn] {
            store.set_value(bn.gamma, Tensor::zeros(&[4])).unwrap();
        }
        let x = rand_t(&[2, 4, 6, 3], 16);
        let mut g = Graph::new();
        let vx = g.constant(x.clone());
        let y = block.forward(&mut g, &store, vx, Mode::Train).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn stride_two_halves_frames() {
        let spec = BlockSpec { c_in: 2, c_out: 2, stride: 2, adaptive: false, attention: false };
        let cfg = toy_config(vec![BlockSpec { c_in: 4, c_out: 2, ..spec.clone() }]);
        let topo = cfg.topology.build().unwrap();
        let adj = PartitionedAdjacency::from_topology(&topo);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let block = Block::init(&mut store, "b", &spec, &cfg, &adj, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 300, 3]));
        let y = block.forward(&mut g, &store, x, Mode::Eval).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 150, 3]);
    }

    fn randomize_zero_inits(store: &mut ParamStore, seed: u64) {
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let e = store.entry(id);
            let zero_init = e.name.contains("theta")
                || e.name.contains("phi")
                || e.name.contains("gate")
                || e.name.contains(".stc.")
                || e.name.ends_with("bias");
            if zero_init {
                let shape = e.value.shape().to_vec();
                store.set_value(id, Tensor::uniform(&shape, 0.5, &mut ChaCha8Rng::seed_from_u64(seed + i as u64))).unwrap();
            }
        }
    }

    #[test]
    fn block_gradients_pass_finite_difference_check() {
        let spec = BlockSpec { c_in: 4, c_out: 4, stride: 1, adaptive: true, attention: true };
        let cfg = toy_config(vec![spec.clone()]);
        let topo = cfg.topology.build().unwrap();
        let adj = PartitionedAdjacency::from_topology(&topo);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let block = Block::init(&mut store, "b", &spec, &cfg, &adj, &mut rng).unwrap();
        block.agcl().unwrap().unfreeze_global_graph(&mut store);
        randomize_zero_inits(&mut store, 100);
        let x = rand_t(&[1, 4, 8, 3], 19);
        let r = check_params(
            |g, s| {
                let vx = g.constant(x.clone());
                block.forward(g, s, vx, Mode::Train)
            },
            &store,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(worst(&r) <= 1e-5, "{:?}", r.iter().map(|c| (&c.name, c.max_rel_error)).collect::<Vec<_>>());
    }

    #[test]
    fn two_block_model_gradients() {
        let blocks = vec![
            BlockSpec { c_in: 4, c_out: 4, stride: 1, adaptive: true, attention: true },
            BlockSpec { c_in: 4, c_out: 6, stride: 2, adaptive: true, attention: true },
        ];
        let cfg = toy_config(blocks);
        let (model, mut store) = Model::new(cfg, 20).unwrap();
        model.unfreeze_global_graphs(&mut store);
        randomize_zero_inits(&mut store, 200);
        let x = rand_t(&[2, 4, 6, 3, 1], 21);
        let r = check_params(
            |g, s| {
                let vx = g.constant(x.clone());
                model.forward(g, s, vx, Mode::Train)
            },
            &store,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(worst(&r) <= 1e-5, "{:?}", r.iter().map(|c| (&c.name, c.max_rel_error)).collect::<Vec<_>>());
    }
}
