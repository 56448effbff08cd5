//! Spatial graph convolution: the fixed-graph baseline and the adaptive
//! layer that learns a global graph and a per-sample similarity graph.
//!
//! Vertex aggregation follows the neighbor-subset semantics: for subset
//! `k`, output vertex `i` collects `Σ_j A_k[i, j] · f(j)`, and the
//! per-subset results are weighted by 1×1 convolutions and summed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::error::{shape_err, Result};
use crate::nn::{ensure_param, fan_in_uniform};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::skeleton::PartitionedAdjacency;
use crate::tensor::Tensor;

/// How the learned global graph is initialized and combined with the
/// fixed body graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphInit {
    /// `B` starts as a copy of `A` with gradients blocked until unfrozen;
    /// the adjacency is `B + α·C`.
    CopyFrozen,
    /// `A` stays fixed, `B` starts at zero and trains from the start; the
    /// adjacency is `A + B + α·C`.
    AdditiveZero,
}

/// Embedding width for the similarity graph: a quarter of the output
/// channels, at least one.
pub fn embed_channels(c_out: usize) -> usize {
    (c_out / 4).max(1)
}

/// `Σ_k W_k (f ⋅ adj_kᵀ)` for `x: [N, C_in, T, V]`, `adj: [K, V, V]` or
/// `[N, K, V, V]` and `w: [K, C_out, C_in]`.
pub fn graph_contract(g: &mut Graph, x: Var, adj: Var, w: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let (ws, adj_s) = (g.shape(w).to_vec(), g.shape(adj).to_vec());
    if xs.len() != 4 || ws.len() != 3 {
        return shape_err(format!("graph conv expects [N,C,T,V] input and [K,Cout,Cin] weights, got {:?} / {:?}", xs, ws));
    }
    let (n, c, t, v) = (xs[0], xs[1], xs[2], xs[3]);
    let k = ws[0];
    let rank = adj_s.len();
    if rank < 3 || adj_s[rank - 1] != v || adj_s[rank - 2] != v || adj_s[rank - 3] != k {
        return shape_err(format!("adjacency {:?} does not match {k} subsets over V={v}", adj_s));
    }
    if ws[2] != c {
        return shape_err(format!("graph conv weights {:?} expect {} input channels, got {c}", ws, ws[2]));
    }
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 1, rank - 2);
    let adj_t = g.permute(adj, &perm)?;
    let xr = g.reshape(x, &[n, 1, c * t, v])?;
    let y = g.matmul(xr, adj_t)?;
    let y = g.reshape(y, &[n, k * c, t, v])?;
    let wp = g.permute(w, &[1, 0, 2])?;
    let wr = g.reshape(wp, &[ws[1], k * c, 1, 1])?;
    g.conv(y, wr, ConvGeom::pointwise())
}

/// Per-sample similarity graph: both embeddings are 1×1 convolutions,
/// flattened over (channel, frame), multiplied and softmax-normalized along
/// the last axis. `theta`, `phi`: `[K, C_e, C_in]`. Returns `[N, K, V, V]`.
pub fn individual_graph(g: &mut Graph, x: Var, theta: Var, phi: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ts = g.shape(theta).to_vec();
    if xs.len() != 4 || ts.len() != 3 || g.shape(phi) != ts.as_slice() || ts[2] != xs[1] {
        return shape_err(format!(
            "individual graph expects [N,C,T,V] input and matching [K,Ce,C] embeddings, got {:?}, {:?}, {:?}",
            xs,
            ts,
            g.shape(phi)
        ));
    }
    let (n, c, t, v) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, ce) = (ts[0], ts[1]);
    let tw = g.reshape(theta, &[k * ce, c, 1, 1])?;
    let pw = g.reshape(phi, &[k * ce, c, 1, 1])?;
    let te = g.conv(x, tw, ConvGeom::pointwise())?;
    let pe = g.conv(x, pw, ConvGeom::pointwise())?;
    let te = g.reshape(te, &[n, k, ce, t, v])?;
    let te = g.permute(te, &[0, 1, 4, 2, 3])?;
    let te = g.reshape(te, &[n, k, v, ce * t])?;
    let pe = g.reshape(pe, &[n, k, ce * t, v])?;
    let sim = g.matmul(te, pe)?;
    g.softmax(sim, 3)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgclConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub embed_channels: usize,
    pub init: GraphInit,
    /// Adds the layer-level residual (identity or 1×1 projection).
    pub residual: bool,
}

impl AgclConfig {
    pub fn new(c_in: usize, c_out: usize) -> Self {
        Self { c_in, c_out, embed_channels: embed_channels(c_out), init: GraphInit::CopyFrozen, residual: true }
    }
}

/// Adaptive graph convolutional layer.
#[derive(Clone, Debug)]
pub struct Agcl {
    pub cfg: AgclConfig,
    /// Fixed body graph `[K, V, V]`, used by [`GraphInit::AdditiveZero`].
    pub fixed: Tensor,
    pub global_graph: ParamId,
    pub weight: ParamId,
    pub theta: ParamId,
    pub phi: ParamId,
    pub gate: ParamId,
    pub residual_w: Option<ParamId>,
    prefix: String,
}

impl Agcl {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        adjacency: &PartitionedAdjacency,
        cfg: AgclConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let a = adjacency.stacked();
        let k = a.shape()[0];
        let (c_in, c_out, ce) = (cfg.c_in, cfg.c_out, cfg.embed_channels);
        let b0 = match cfg.init {
            GraphInit::CopyFrozen => a.clone(),
            GraphInit::AdditiveZero => Tensor::zeros(a.shape()),
        };
        let global_graph = store.add(format!("{prefix}.global_graph"), b0, ParamKind::Weight);
        if cfg.init == GraphInit::CopyFrozen {
            store.set_frozen(global_graph, true);
        }
        let weight = store.add(
            format!("{prefix}.weight"),
            fan_in_uniform(&[k, c_out, c_in], c_in * k, rng),
            ParamKind::Weight,
        );
        let theta = store.add(format!("{prefix}.theta"), Tensor::zeros(&[k, ce, c_in]), ParamKind::Weight);
        let phi = store.add(format!("{prefix}.phi"), Tensor::zeros(&[k, ce, c_in]), ParamKind::Weight);
        let gate = store.add(format!("{prefix}.gate"), Tensor::zeros(&[1]), ParamKind::Weight);
        let residual_w = (c_in != c_out).then(|| {
            store.add(
                format!("{prefix}.residual"),
                fan_in_uniform(&[c_out, c_in, 1, 1], c_in, rng),
                ParamKind::Weight,
            )
        });
        Self { cfg, fixed: a, global_graph, weight, theta, phi, gate, residual_w, prefix: prefix.to_string() }
    }

    pub fn unfreeze_global_graph(&self, store: &mut ParamStore) {
        store.set_frozen(self.global_graph, false);
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        store.entry(self.global_graph).frozen
    }

    /// `[N, K, V, V]` similarity graph for input `x`.
    pub fn individual_graph(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        ensure_param(store, self.gate, "adaptive graph layer")?;
        let theta = g.param(store, self.theta);
        let phi = g.param(store, self.phi);
        individual_graph(g, x, theta, phi)
    }

    /// Effective adjacency `[N, K, V, V]` for input `x`.
    pub fn adjacency(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let c = self.individual_graph(g, store, x)?;
        g.probe(format!("{}.individual_graph", self.prefix), c);
        let gate = g.param(store, self.gate);
        let gated = g.mul(gate, c)?;
        let b = g.param(store, self.global_graph);
        let adj = g.add(b, gated)?;
        match self.cfg.init {
            GraphInit::CopyFrozen => Ok(adj),
            GraphInit::AdditiveZero => {
                let a = g.constant(self.fixed.clone());
                g.add(a, adj)
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let adj = self.adjacency(g, store, x)?;
        let w = g.param(store, self.weight);
        let y = graph_contract(g, x, adj, w)?;
        if !self.cfg.residual {
            return Ok(y);
        }
        let skip = match self.residual_w {
            Some(rw) => {
                let rw = g.param(store, rw);
                g.conv(x, rw, ConvGeom::pointwise())?
            }
            None => x,
        };
        g.add(y, skip)
    }
}

/// Fixed-graph spatial convolution with an optional learnable mask.
#[derive(Clone, Debug)]
pub struct BaselineGcn {
    pub adjacency: Tensor,
    pub weight: ParamId,
    pub mask: Option<ParamId>,
    pub residual_w: Option<ParamId>,
    pub residual: bool,
}

impl BaselineGcn {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        adjacency: &PartitionedAdjacency,
        c_in: usize,
        c_out: usize,
        with_mask: bool,
        residual: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let a = adjacency.stacked();
        let k = a.shape()[0];
        let weight = store.add(
            format!("{prefix}.weight"),
            fan_in_uniform(&[k, c_out, c_in], c_in * k, rng),
            ParamKind::Weight,
        );
        let mask = with_mask.then(|| store.add(format!("{prefix}.mask"), Tensor::ones(a.shape()), ParamKind::Weight));
        let residual_w = (residual && c_in != c_out).then(|| {
            store.add(
                format!("{prefix}.residual"),
                fan_in_uniform(&[c_out, c_in, 1, 1], c_in, rng),
                ParamKind::Weight,
            )
        });
        Self { adjacency: a, weight, mask, residual_w, residual }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        ensure_param(store, self.weight, "baseline graph layer")?;
        let v = self.adjacency.shape()[1];
        if g.shape(x).len() != 4 || g.shape(x)[3] != v {
            return shape_err(format!("input {:?} does not match a graph of {v} joints", g.shape(x)));
        }
        let mut adj = g.constant(self.adjacency.clone());
        if let Some(m) = self.mask {
            let m = g.param(store, m);
            adj = g.mul(adj, m)?;
        }
        let w = g.param(store, self.weight);
        let y = graph_contract(g, x, adj, w)?;
        if !self.residual {
            return Ok(y);
        }
        let skip = match self.residual_w {
            Some(rw) => {
                let rw = g.param(store, rw);
                g.conv(x, rw, ConvGeom::pointwise())?
            }
            None => x,
        };
        g.add(y, skip)
    }
}
