//! Message passing over the taxonomy.
//!
//! Each layer computes, per node `v`,
//! `m_v = h_v W_self + agg_{u in N(v)} h_u W_neigh + b` and outputs
//! `GELU(LayerNorm(m_v + h_v))`. Neighborhoods are undirected
//! (parents and children). The aggregator is a named strategy; `mean` is
//! the default and treats an empty neighborhood as the zero vector.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::encoder::LN_EPS;
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::registry::Registry;
use crate::tensor::{Adjacency, Graph, Scalar, Var};

/// Undirected neighbor lists; sorted by id when built from edges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyPlan {
    neighbors: Vec<Vec<usize>>,
}

impl AdjacencyPlan {
    pub fn from_hierarchy(h: &LabelHierarchy) -> Self {
        Self::from_edges(h.len(), h.edges())
    }

    /// Symmetrizes `edges`; duplicates and self-loops are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a != b {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Self { neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    /// The plan with node `i` renamed to `perm[i]`. Each neighbor list keeps
    /// its enumeration order, so aggregation sums run in the same order and
    /// relabeled outputs are bit-identical.
    pub fn relabeled(&self, perm: &[usize]) -> Self {
        let mut neighbors = vec![Vec::new(); self.len()];
        for (v, list) in self.neighbors.iter().enumerate() {
            neighbors[perm[v]] = list.iter().map(|&u| perm[u]).collect();
        }
        Self { neighbors }
    }
}

/// Turns a neighborhood structure into per-edge weights.
pub trait Aggregator: Send + Sync {
    fn name(&self) -> &'static str;

    fn weights(&self, plan: &AdjacencyPlan) -> Adjacency;
}

/// GraphSAGE mean: `w_vu = 1 / deg(v)`.
pub struct MeanAggregator;

impl Aggregator for MeanAggregator {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn weights(&self, plan: &AdjacencyPlan) -> Adjacency {
        Adjacency {
            rows: (0..plan.len())
                .map(|v| {
                    let w = 1.0 / plan.degree(v) as f64;
                    plan.neighbors(v).iter().map(|&u| (u, w)).collect()
                })
                .collect(),
        }
    }
}

/// Unnormalized sum: `w_vu = 1`.
pub struct SumAggregator;

impl Aggregator for SumAggregator {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn weights(&self, plan: &AdjacencyPlan) -> Adjacency {
        Adjacency {
            rows: (0..plan.len())
                .map(|v| plan.neighbors(v).iter().map(|&u| (u, 1.0)).collect())
                .collect(),
        }
    }
}

/// Symmetric degree normalization: `w_vu = 1 / sqrt(deg(v) deg(u))`.
pub struct GcnAggregator;

impl Aggregator for GcnAggregator {
    fn name(&self) -> &'static str {
        "gcn"
    }

    fn weights(&self, plan: &AdjacencyPlan) -> Adjacency {
        Adjacency {
            rows: (0..plan.len())
                .map(|v| {
                    plan.neighbors(v)
                        .iter()
                        .map(|&u| (u, 1.0 / ((plan.degree(v) * plan.degree(u)) as f64).sqrt()))
                        .collect()
                })
                .collect(),
        }
    }
}

pub fn aggregator_registry() -> Registry<(), dyn Aggregator> {
    let mut r: Registry<(), dyn Aggregator> = Registry::new("aggregator");
    r.register("mean", |_| Ok(Box::new(MeanAggregator)));
    r.register("sum", |_| Ok(Box::new(SumAggregator)));
    r.register("gcn", |_| Ok(Box::new(GcnAggregator)));
    r
}

pub fn param_shapes(dim: usize, layers: usize) -> Vec<(String, Vec<usize>)> {
    (0..layers)
        .flat_map(|k| {
            [
                (format!("gnn.{k}.w_self"), vec![dim, dim]),
                (format!("gnn.{k}.w_neigh"), vec![dim, dim]),
                (format!("gnn.{k}.bias"), vec![dim]),
                (format!("gnn.{k}.norm.gain"), vec![dim]),
                (format!("gnn.{k}.norm.bias"), vec![dim]),
            ]
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct GnnLayer {
    pub w_self: Var,
    pub w_neigh: Var,
    pub bias: Var,
    pub gain: Var,
    pub norm_bias: Var,
}

impl GnnLayer {
    pub fn from_params(p: &BTreeMap<String, Var>, k: usize) -> Result<Self> {
        let get = |s: &str| {
            let name = format!("gnn.{k}.{s}");
            p.get(&name)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter '{name}'")))
        };
        Ok(Self {
            w_self: get("w_self")?,
            w_neigh: get("w_neigh")?,
            bias: get("bias")?,
            gain: get("norm.gain")?,
            norm_bias: get("norm.bias")?,
        })
    }
}

/// One layer on `h: [B, M, d]`.
pub fn message_pass<T: Scalar>(g: &mut Graph<T>, h: Var, adjacency: &Arc<Adjacency>, layer: &GnnLayer) -> Result<Var> {
    let shape = g.shape(h);
    if shape.len() != 3 || shape[1] != adjacency.rows.len() {
        return Err(Error::shape(
            "message_pass",
            format!("H {shape:?} with {} graph nodes", adjacency.rows.len()),
        ));
    }
    let own = g.matmul(h, layer.w_self)?;
    let agg = g.neighbor_aggregate(h, adjacency.clone())?;
    let neigh = g.matmul(agg, layer.w_neigh)?;
    let m = g.add(own, neigh)?;
    let m = g.add(m, layer.bias)?;
    let r = g.add(m, h)?;
    let n = g.layer_norm(r, layer.gain, layer.norm_bias, LN_EPS)?;
    g.gelu(n)
}

/// Applies `layers` in order with dropout between consecutive layers.
pub fn refine<T: Scalar>(
    g: &mut Graph<T>,
    h0: Var,
    adjacency: &Arc<Adjacency>,
    layers: &[GnnLayer],
    dropout: f64,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("refine needs at least one GNN layer".into()));
    }
    let mut h = h0;
    for (i, layer) in layers.iter().enumerate() {
        if i > 0 {
            h = g.dropout(h, dropout)?;
        }
        h = message_pass(g, h, adjacency, layer)?;
    }
    Ok(h)
}
