//! Spatial, temporal and channel attention refining a `[N, C, T, V]`
//! feature map in a residual manner.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{ensure_param, fan_in_uniform};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_SPATIAL_KERNEL: usize = 9;
pub const DEFAULT_TEMPORAL_KERNEL: usize = 9;
pub const DEFAULT_REDUCTION: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// `f ← f + f⊗M_s`, then temporal, then channel.
    Sequential,
    /// `f + f⊗M_s + f⊗M_t + f⊗M_c`, all maps computed from the input.
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StcConfig {
    pub channels: usize,
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    pub reduction: usize,
    pub arrangement: Arrangement,
}

impl StcConfig {
    /// Defaults for a graph with `joints` vertices: the spatial kernel is
    /// the default clamped to the largest odd value not above `joints`.
    pub fn new(channels: usize, joints: usize) -> Self {
        Self {
            channels,
            spatial_kernel: clamp_odd(DEFAULT_SPATIAL_KERNEL, joints),
            temporal_kernel: DEFAULT_TEMPORAL_KERNEL,
            reduction: DEFAULT_REDUCTION,
            arrangement: Arrangement::Sequential,
        }
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_kernel % 2 == 0 || self.temporal_kernel % 2 == 0 {
            return config_err(format!(
                "attention kernels must be odd, got spatial {} / temporal {}",
                self.spatial_kernel, self.temporal_kernel
            ));
        }
        if self.reduction == 0 || self.hidden() < 1 {
            return config_err(format!(
                "channel attention bottleneck C/r = {}/{} is below 1",
                self.channels, self.reduction
            ));
        }
        Ok(())
    }
}

pub(crate) fn clamp_odd(k: usize, limit: usize) -> usize {
    let k = k.min(limit.max(1));
    if k % 2 == 0 {
        k - 1
    } else {
        k
    }
}

#[derive(Clone, Debug)]
pub struct StcAttention {
    pub cfg: StcConfig,
    /// `[1, C, 1, K_s]`
    pub spatial_w: ParamId,
    pub spatial_b: ParamId,
    /// `[1, C, K_t, 1]`
    pub temporal_w: ParamId,
    pub temporal_b: ParamId,
    /// `[C, C/r]`
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    /// `[C/r, C]`
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    prefix: String,
}

impl StcAttention {
    /// Map-producing weights start at zero so every map is exactly 0.5;
    /// the first channel layer is random so its gradient is not stuck.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: StcConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, h) = (cfg.channels, cfg.hidden());
        let mut add = |name: &str, t: Tensor, kind| store.add(format!("{prefix}.{name}"), t, kind);
        Ok(Self {
            spatial_w: add("spatial.weight", Tensor::zeros(&[1, c, 1, cfg.spatial_kernel]), ParamKind::Weight),
            spatial_b: add("spatial.bias", Tensor::zeros(&[1]), ParamKind::Bias),
            temporal_w: add("temporal.weight", Tensor::zeros(&[1, c, cfg.temporal_kernel, 1]), ParamKind::Weight),
            temporal_b: add("temporal.bias", Tensor::zeros(&[1]), ParamKind::Bias),
            fc1_w: add("channel.fc1.weight", fan_in_uniform(&[c, h], c, rng), ParamKind::Weight),
            fc1_b: add("channel.fc1.bias", Tensor::zeros(&[h]), ParamKind::Bias),
            fc2_w: add("channel.fc2.weight", Tensor::zeros(&[h, c]), ParamKind::Weight),
            fc2_b: add("channel.fc2.bias", Tensor::zeros(&[c]), ParamKind::Bias),
            cfg,
            prefix: prefix.to_string(),
        })
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<(usize, usize, usize, usize)> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.cfg.channels {
            return shape_err(format!("attention expects [N,{},T,V], got {:?}", self.cfg.channels, s));
        }
        let v = s[3];
        if self.cfg.spatial_kernel > 2 * v - 1 {
            return config_err(format!("spatial kernel {} exceeds 2V-1 for V={v}", self.cfg.spatial_kernel));
        }
        Ok((s[0], s[1], s[2], v))
    }

    /// `M_s: [N, 1, 1, V]`
    pub fn spatial_map(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        ensure_param(store, self.fc2_b, "attention")?;
        self.check_input(g, x)?;
        let pooled = g.mean(x, &[2], true)?;
        let w = g.param(store, self.spatial_w);
        let b = g.param(store, self.spatial_b);
        let k = self.cfg.spatial_kernel;
        let z = g.conv(pooled, w, ConvGeom::new(1, 0, k / 2))?;
        let z = g.add(z, b)?;
        Ok(g.sigmoid(z))
    }

    /// `M_t: [N, 1, T, 1]`
    pub fn temporal_map(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        ensure_param(store, self.fc2_b, "attention")?;
        self.check_input(g, x)?;
        let pooled = g.mean(x, &[3], true)?;
        let w = g.param(store, self.temporal_w);
        let b = g.param(store, self.temporal_b);
        let k = self.cfg.temporal_kernel;
        let z = g.conv(pooled, w, ConvGeom::new(1, k / 2, 0))?;
        let z = g.add(z, b)?;
        Ok(g.sigmoid(z))
    }

    /// `M_c: [N, C, 1, 1]`
    pub fn channel_map(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        ensure_param(store, self.fc2_b, "attention")?;
        let (n, c, _, _) = self.check_input(g, x)?;
        let pooled = g.mean(x, &[2, 3], false)?;
        let w1 = g.param(store, self.fc1_w);
        let b1 = g.param(store, self.fc1_b);
        let w2 = g.param(store, self.fc2_w);
        let b2 = g.param(store, self.fc2_b);
        let h = g.matmul(pooled, w1)?;
        let h = g.add(h, b1)?;
        let h = g.relu(h);
        let z = g.matmul(h, w2)?;
        let z = g.add(z, b2)?;
        let m = g.sigmoid(z);
        g.reshape(m, &[n, c, 1, 1])
    }

    fn refine(g: &mut Graph, f: Var, m: Var) -> Result<Var> {
        let fm = g.mul(f, m)?;
        g.add(f, fm)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self.cfg.arrangement {
            Arrangement::Sequential => {
                let ms = self.spatial_map(g, store, x)?;
                g.probe(format!("{}.spatial", self.prefix), ms);
                let f = Self::refine(g, x, ms)?;
                let mt = self.temporal_map(g, store, f)?;
                g.probe(format!("{}.temporal", self.prefix), mt);
                let f = Self::refine(g, f, mt)?;
                let mc = self.channel_map(g, store, f)?;
                g.probe(format!("{}.channel", self.prefix), mc);
                Self::refine(g, f, mc)
            }
            Arrangement::Parallel => {
                let ms = self.spatial_map(g, store, x)?;
                g.probe(format!("{}.spatial", self.prefix), ms);
                let mt = self.temporal_map(g, store, x)?;
                g.probe(format!("{}.temporal", self.prefix), mt);
                let mc = self.channel_map(g, store, x)?;
                g.probe(format!("{}.channel", self.prefix), mc);
                let mut out = x;
                for m in [ms, mt, mc] {
                    let fm = g.mul(x, m)?;
                    out = g.add(out, fm)?;
                }
                Ok(out)
            }
        }
    }
}
