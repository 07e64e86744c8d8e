//! The full classifier and its flat baseline.
//!
//! `maple` mode: class tokens (semantic or random init) go through the
//! multi-token encoder, are refined on the taxonomy graph, fused with the
//! image descriptor by the gate and pooled into one logit per node.
//! `flat` mode: the encoder runs with its global token only and a linear
//! head predicts the leaves.
//!
//! Checkpoints are a tensor container (`*.bin`) plus a JSON sidecar
//! (`*.json`) holding the model config and the hierarchy.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion_head::{self, GateNet, Head};
use crate::graph_refine::{self, aggregator_registry, AdjacencyPlan, GnnLayer};
use crate::hierarchy::{LabelHierarchy, LabelVector, LevelPartition};
use crate::params::{decode_tensors, encode_tensors, write_atomic, ParamStore};
use crate::semantic_init::{self, provider_registry, EmbeddingProvider, ProviderConfig, RowProvenance, NORM_EPS};
use crate::tensor::{Adjacency, Graph, Scalar, Tensor, Var};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const PSI_BUFFER: &str = "buffers.psi";
pub const INIT_TOKENS_BUFFER: &str = "buffers.init_tokens";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Maple,
    Flat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Semantic,
    Random,
}

/// Which node states are mean-pooled into the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolSource {
    Fused,
    Gnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub init: InitMode,
    pub encoder: EncoderConfig,
    pub gnn_layers: usize,
    pub aggregator: String,
    pub dropout: f64,
    /// Sentence-embedding width D_psi.
    pub embed_dim: usize,
    /// Embedding provider used for semantic initialization.
    pub provider: String,
    pub pool_source: PoolSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::Maple,
            init: InitMode::Semantic,
            encoder: EncoderConfig::desk(),
            gnn_layers: 2,
            aggregator: "mean".into(),
            dropout: 0.1,
            embed_dim: semantic_init::DEFAULT_EMBED_DIM,
            provider: "deterministic_fallback".into(),
            pool_source: PoolSource::Fused,
        }
    }
}

impl ModelConfig {
    pub fn vit_b16() -> Self {
        Self {
            encoder: EncoderConfig::vit_b16(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.mode == ModelMode::Maple && self.gnn_layers == 0 {
            return Err(Error::InvalidArgument("gnn_layers must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidArgument("embed_dim must be positive".into()));
        }
        aggregator_registry().build(&self.aggregator, &())?;
        Ok(())
    }
}

/// Every trainable tensor of a model over `num_nodes` nodes and
/// `num_leaves` leaves, in name order. Nothing is allocated.
pub fn param_shapes(cfg: &ModelConfig, num_nodes: usize, num_leaves: usize) -> BTreeMap<String, Vec<usize>> {
    let d = cfg.encoder.dim;
    let mut out: BTreeMap<String, Vec<usize>> = encoder::param_shapes(&cfg.encoder).into_iter().collect();
    match cfg.mode {
        ModelMode::Flat => out.extend(fusion_head::head_param_shapes(d, num_leaves)),
        ModelMode::Maple => {
            match cfg.init {
                InitMode::Semantic => {
                    out.insert("tokens.w_psi".into(), vec![cfg.embed_dim, d]);
                    out.insert("tokens.class_offset".into(), vec![num_nodes, d]);
                }
                InitMode::Random => {
                    out.insert("tokens.class".into(), vec![num_nodes, d]);
                }
            }
            out.extend(graph_refine::param_shapes(d, cfg.gnn_layers));
            out.extend(fusion_head::gate_param_shapes(d));
            out.extend(fusion_head::head_param_shapes(2 * d, num_nodes));
        }
    }
    out
}

/// Accounting group of a parameter name.
pub fn component_of(name: &str) -> &'static str {
    if name == "tokens.w_psi" {
        return "w_psi";
    }
    match name.split('.').next().unwrap_or("") {
        "tokens" => "tokens",
        "encoder" => "encoder",
        "gnn" => "gnn",
        "gate" => "gate",
        "head" => "head",
        _ => "other",
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    pub z: Var,
    /// `[M, d]` class tokens fed to the encoder.
    pub tokens: Option<Var>,
    pub node_tokens: Option<Var>,
    pub gnn: Option<Var>,
    pub gamma: Option<Var>,
    pub fused: Option<Var>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: u32,
    pub model: ModelConfig,
    pub hierarchy_sha256: String,
    pub hierarchy_yaml: String,
    pub num_parameters: usize,
    pub init_provenance: Vec<RowProvenance>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct MapleModel {
    pub config: ModelConfig,
    pub hierarchy: LabelHierarchy,
    pub params: ParamStore<f32>,
    /// Constants saved with the checkpoint but never trained.
    pub buffers: ParamStore<f64>,
    pub init_provenance: Vec<RowProvenance>,
    partition: LevelPartition,
    adjacency: Arc<Adjacency>,
}

fn build_adjacency(cfg: &ModelConfig, h: &LabelHierarchy) -> Result<Arc<Adjacency>> {
    let agg = aggregator_registry().build(&cfg.aggregator, &())?;
    Ok(Arc::new(agg.weights(&AdjacencyPlan::from_hierarchy(h))))
}

impl MapleModel {
    /// Builds a model with the provider named in `cfg.provider`.
    pub fn init(cfg: ModelConfig, h: LabelHierarchy, provider_cfg: &ProviderConfig, seed: u64) -> Result<Self> {
        let mut pc = provider_cfg.clone();
        let name = match cfg.init {
            InitMode::Semantic => {
                pc.dim = cfg.embed_dim;
                cfg.provider.clone()
            }
            InitMode::Random => {
                pc.dim = cfg.encoder.dim;
                pc.seed = seed;
                "random".to_string()
            }
        };
        let provider = provider_registry().build(&name, &pc)?;
        Self::with_provider(cfg, h, provider.as_ref(), seed)
    }

    pub fn with_provider(
        cfg: ModelConfig,
        h: LabelHierarchy,
        provider: &dyn EmbeddingProvider,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.dim;
        let shapes = param_shapes(&cfg, h.len(), h.leaf_ids().len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in &shapes {
            params.insert(name.clone(), init_tensor(name, shape, cfg.embed_dim, &mut rng)?);
        }

        let mut buffers = ParamStore::new();
        let mut provenance = Vec::new();
        if cfg.mode == ModelMode::Maple {
            let emb = semantic_init::embed_hierarchy(&h, provider)?;
            match cfg.init {
                InitMode::Semantic => {
                    if !emb.projects || provider.dim() != cfg.embed_dim {
                        return Err(Error::InvalidArgument(format!(
                            "semantic init needs a projecting provider of width {}, got '{}' of width {}",
                            cfg.embed_dim,
                            provider.kind(),
                            provider.dim()
                        )));
                    }
                    let w: Tensor<f64> = params.get("tokens.w_psi")?.cast();
                    buffers.insert(INIT_TOKENS_BUFFER, semantic_init::project_rows(&emb, Some(&w))?);
                    buffers.insert(PSI_BUFFER, emb.psi.clone());
                }
                InitMode::Random => {
                    if emb.projects || provider.dim() != d {
                        return Err(Error::InvalidArgument(format!(
                            "random init needs a non-projecting provider of width {d}"
                        )));
                    }
                    let rows = semantic_init::project_rows(&emb, None)?;
                    params.insert("tokens.class", rows.cast());
                    buffers.insert(INIT_TOKENS_BUFFER, rows);
                }
            }
            provenance = emb.provenance;
        }
        let adjacency = build_adjacency(&cfg, &h)?;
        Ok(Self {
            partition: h.level_partition(),
            config: cfg,
            hierarchy: h,
            params,
            buffers,
            init_provenance: provenance,
            adjacency,
        })
    }

    pub fn partition(&self) -> &LevelPartition {
        &self.partition
    }

    pub fn adjacency(&self) -> &Arc<Adjacency> {
        &self.adjacency
    }

    /// Node ids scored by the logits, in column order.
    pub fn output_nodes(&self) -> Vec<usize> {
        match self.config.mode {
            ModelMode::Maple => (0..self.hierarchy.len()).collect(),
            ModelMode::Flat => self.hierarchy.leaf_ids().to_vec(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    /// Class tokens `[M, d]` as they enter the encoder.
    pub fn class_tokens<T: Scalar>(&self, g: &mut Graph<T>, p: &BTreeMap<String, Var>) -> Result<Option<Var>> {
        if self.config.mode == ModelMode::Flat {
            return Ok(None);
        }
        let get = |n: &str| {
            p.get(n)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter '{n}'")))
        };
        Ok(Some(match self.config.init {
            InitMode::Random => get("tokens.class")?,
            InitMode::Semantic => {
                let psi = g.constant(self.buffers.get(PSI_BUFFER)?.cast())?;
                let proj = g.matmul(psi, get("tokens.w_psi")?)?;
                let unit = g.l2_normalize_rows(proj, NORM_EPS)?;
                g.add(unit, get("tokens.class_offset")?)?
            }
        }))
    }

    /// Runs the model on `[B, C, S, S]` images with parameters bound in `g`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &BTreeMap<String, Var>, images: &Tensor<T>) -> Result<Forward> {
        let tokens = self.class_tokens(g, p)?;
        let enc = encoder::encode(g, p, images, tokens, &self.config.encoder)?;
        let z = enc.global;
        let Some(node_tokens) = enc.node_tokens else {
            let head = Head::from_params(p)?;
            let out = g.matmul(z, head.weight)?;
            let logits = g.add(out, head.bias)?;
            return Ok(Forward {
                logits,
                z,
                tokens,
                node_tokens: None,
                gnn: None,
                gamma: None,
                fused: None,
            });
        };
        let layers: Vec<GnnLayer> = (0..self.config.gnn_layers)
            .map(|k| GnnLayer::from_params(p, k))
            .collect::<Result<_>>()?;
        let gnn = graph_refine::refine(g, node_tokens, &self.adjacency, &layers, self.config.dropout)?;
        let gamma = fusion_head::gate(g, z, gnn, &GateNet::from_params(p)?)?;
        let fused = fusion_head::fuse(g, z, gnn, gamma)?;
        let pooled = match self.config.pool_source {
            PoolSource::Fused => fused,
            PoolSource::Gnn => gnn,
        };
        let logits = fusion_head::predict(g, pooled, z, &Head::from_params(p)?)?;
        Ok(Forward {
            logits,
            z,
            tokens,
            node_tokens: Some(node_tokens),
            gnn: Some(gnn),
            gamma: Some(gamma),
            fused: Some(fused),
        })
    }

    /// Training objective against full `[B, |V|]` targets.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        match self.config.mode {
            ModelMode::Maple => fusion_head::total_loss(g, logits, targets, &self.partition),
            ModelMode::Flat => {
                let leaves = fusion_head::select_columns(targets, self.hierarchy.leaf_ids())?;
                fusion_head::flat_loss(g, logits, &leaves)
            }
        }
    }

    /// Stacks label vectors into `[B, |V|]` 0/1 targets.
    pub fn targets<T: Scalar>(&self, labels: &[&LabelVector]) -> Result<Tensor<T>> {
        let n = self.hierarchy.len();
        let mut data = Vec::with_capacity(labels.len() * n);
        for y in labels {
            if y.len() != n {
                return Err(Error::shape("targets", format!("label vector of {} for {n} nodes", y.len())));
            }
            data.extend(y.bits().iter().map(|&b| if b { T::one() } else { T::zero() }));
        }
        Tensor::new(vec![labels.len(), n], data)
    }

    pub fn sidecar(&self, meta: BTreeMap<String, serde_json::Value>) -> Sidecar {
        Sidecar {
            format: CHECKPOINT_FORMAT,
            model: self.config.clone(),
            hierarchy_sha256: self.hierarchy.digest(),
            hierarchy_yaml: self.hierarchy.to_yaml_string(),
            num_parameters: self.num_parameters(),
            init_provenance: self.init_provenance.clone(),
            meta,
        }
    }

    /// Writes `path` (tensor container) and `path` with a `.json` extension.
    pub fn save(&self, path: &Path, meta: BTreeMap<String, serde_json::Value>) -> Result<()> {
        let mut bytes = encode_tensors(self.params.iter().map(|(k, v)| (k.as_str(), v)));
        bytes.extend(encode_tensors(self.buffers.iter().map(|(k, v)| (k.as_str(), v))));
        write_atomic(path, &bytes)?;
        let json = serde_json::to_vec_pretty(&self.sidecar(meta))?;
        write_atomic(&sidecar_path(path), &json)
    }

    /// Loads a checkpoint from its container path or from a directory
    /// holding `checkpoint.bin`.
    pub fn load(path: &Path) -> Result<(Self, Sidecar)> {
        let path = resolve_checkpoint(path);
        let side_path = sidecar_path(&path);
        let text = std::fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let side: Sidecar = serde_json::from_slice(&text)?;
        if side.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unsupported checkpoint format {}", side.format)));
        }
        let h = LabelHierarchy::from_yaml_str(&side.hierarchy_yaml)?;
        if h.digest() != side.hierarchy_sha256 {
            return Err(Error::Parse("checkpoint hierarchy does not match its recorded hash".into()));
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        for rec in decode_tensors(&bytes)? {
            if rec.name.starts_with("buffers.") {
                buffers.insert(rec.name, rec.tensor);
            } else {
                params.insert(rec.name, rec.tensor.cast());
            }
        }
        let expected = param_shapes(&side.model, h.len(), h.leaf_ids().len());
        if expected.len() != params.len() {
            return Err(Error::Parse(format!(
                "checkpoint holds {} parameters, config implies {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            if params.get(name)?.shape() != shape.as_slice() {
                return Err(Error::Parse(format!("parameter '{name}' has the wrong shape")));
            }
        }
        let adjacency = build_adjacency(&side.model, &h)?;
        let model = Self {
            partition: h.level_partition(),
            config: side.model.clone(),
            hierarchy: h,
            params,
            buffers,
            init_provenance: side.init_provenance.clone(),
            adjacency,
        };
        Ok((model, side))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("checkpoint.bin")
    } else {
        path.to_path_buf()
    }
}

fn init_tensor(name: &str, shape: &[usize], embed_dim: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let n: usize = shape.iter().product();
    let last = name.rsplit('.').next().unwrap_or("");
    let constant = |v: f32| Tensor::new(shape.to_vec(), vec![v; n]);
    let std = match (name, last) {
        (_, "gain") => return constant(1.0),
        (_, "bias") | ("tokens.class_offset", _) => return constant(0.0),
        ("encoder.pos", _) | ("encoder.global_token", _) => 0.02,
        ("tokens.w_psi", _) => 1.0 / (embed_dim as f64).sqrt(),
        _ => 1.0 / (shape[0] as f64).sqrt(),
    };
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::fixtures;

    pub(crate) fn toy_config(mode: ModelMode, init: InitMode) -> ModelConfig {
        ModelConfig {
            mode,
            init,
            encoder: EncoderConfig {
                image_size: 8,
                channels: 3,
                patch_size: 4,
                dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
            },
            gnn_layers: 2,
            embed_dim: 16,
            ..ModelConfig::default()
        }
    }

    fn images(b: usize) -> Tensor<f32> {
        Tensor::from_f64(vec![b, 3, 8, 8], &(0..b * 192).map(|i| ((i * 31 % 17) as f64) / 17.0 - 0.5).collect::<Vec<_>>())
            .unwrap()
    }

    #[test]
    fn forward_shapes_for_both_modes() {
        let h = fixtures::aid();
        for (mode, width) in [(ModelMode::Maple, 35), (ModelMode::Flat, 17)] {
            let m = MapleModel::init(toy_config(mode, InitMode::Semantic), h.clone(), &ProviderConfig::default(), 1).unwrap();
            let mut g = Graph::new(false, 0);
            let p = g.bind(m.params.as_map()).unwrap();
            let f = m.forward(&mut g, &p, &images(2)).unwrap();
            assert_eq!(g.shape(f.logits), &[2, width]);
            assert_eq!(m.output_nodes().len(), width);
        }
    }

    #[test]
    fn flat_has_no_graph_or_gate_tensors() {
        let m = MapleModel::init(toy_config(ModelMode::Flat, InitMode::Semantic), fixtures::dfc15(), &ProviderConfig::default(), 1).unwrap();
        assert!(m.params.names().all(|n| !n.starts_with("gnn.") && !n.starts_with("gate.") && !n.starts_with("tokens.")));
        assert!(m.buffers.is_empty());
    }

    #[test]
    fn initial_tokens_are_unit_rows() {
        for init in [InitMode::Semantic, InitMode::Random] {
            let m = MapleModel::init(toy_config(ModelMode::Maple, init), fixtures::dfc15(), &ProviderConfig::default(), 3).unwrap();
            let mut g = Graph::<f64>::new(false, 0);
            let p = g.bind(&m.params.cast::<f64>().as_map().clone()).unwrap();
            let t = m.class_tokens(&mut g, &p).unwrap().unwrap();
            let init_buf = m.buffers.get(INIT_TOKENS_BUFFER).unwrap();
            for r in 0..17 {
                let row = g.value(t).row(r);
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6, "{init:?} row {r} norm {n}");
                for (a, b) in row.iter().zip(init_buf.row(r)) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = MapleModel::init(toy_config(ModelMode::Maple, InitMode::Semantic), fixtures::aid(), &ProviderConfig::default(), 5).unwrap();
        let path = dir.path().join("checkpoint.bin");
        m.save(&path, BTreeMap::new()).unwrap();
        let (back, side) = MapleModel::load(dir.path()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.buffers, m.buffers);
        assert_eq!(side.hierarchy_sha256, m.hierarchy.digest());
        assert_eq!(side.num_parameters, m.num_parameters());
        let walk: usize = crate::params::load_tensors(&path)
            .unwrap()
            .iter()
            .filter(|t| !t.name.starts_with("buffers."))
            .map(|t| t.tensor.numel())
            .sum();
        assert_eq!(walk, m.num_parameters());
    }

    #[test]
    fn every_component_receives_gradient() {
        let h = fixtures::aid_ship_branch();
        let m = MapleModel::init(toy_config(ModelMode::Maple, InitMode::Semantic), h.clone(), &ProviderConfig::default(), 7).unwrap();
        let mut g = Graph::<f32>::new(true, 1);
        let p = g.bind(m.params.as_map()).unwrap();
        let f = m.forward(&mut g, &p, &images(2)).unwrap();
        let y1 = h.closed_vector(&[h.id_of("ship").unwrap()]).unwrap();
        let y2 = h.closed_vector(&[h.id_of("cars").unwrap(), h.id_of("dock").unwrap()]).unwrap();
        let t = m.targets(&[&y1, &y2]).unwrap();
        let loss = m.loss(&mut g, f.logits, &t).unwrap();
        let grads = g.backward(loss).unwrap().collect(&p);
        for (name, gt) in grads {
            assert!(gt.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }

    #[test]
    fn shapes_table_matches_allocation() {
        let cfg = toy_config(ModelMode::Maple, InitMode::Random);
        let m = MapleModel::init(cfg.clone(), fixtures::mured(), &ProviderConfig::default(), 1).unwrap();
        let table = param_shapes(&cfg, 34, 20);
        assert_eq!(table.len(), m.params.len());
        for (k, v) in m.params.iter() {
            assert_eq!(&table[k], v.shape());
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        use crate::hierarchy::NodeSpec;
        let h = LabelHierarchy::from_specs(
            2,
            vec![
                NodeSpec::new("land", 1, &[]),
                NodeSpec::new("water", 1, &[]),
                NodeSpec::new("field", 2, &["land"]),
                NodeSpec::new("port", 2, &["land", "water"]),
                NodeSpec::new("lake", 2, &["water"]),
            ],
        )
        .unwrap();
        let mut cfg = toy_config(ModelMode::Maple, InitMode::Semantic);
        cfg.encoder.dim = 16;
        cfg.encoder.heads = 4;
        let mut m = MapleModel::init(cfg, h.clone(), &ProviderConfig::default(), 11).unwrap();
        // A nonzero offset so the gradient through the normalization is generic.
        for v in m.params.get_mut("tokens.class_offset").unwrap().data_mut().iter_mut().enumerate() {
            *v.1 = ((v.0 % 7) as f32 - 3.0) * 0.05;
        }
        let params = m.params.cast::<f64>().as_map().clone();
        let img: Tensor<f64> = images(2).cast();
        let y1 = h.closed_vector(&[h.id_of("port").unwrap()]).unwrap();
        let y2 = h.closed_vector(&[h.id_of("field").unwrap(), h.id_of("lake").unwrap()]).unwrap();
        let t: Tensor<f64> = m.targets(&[&y1, &y2]).unwrap();
        let report = crate::tensor::grad_check(&params, 1e-4, 0, false, |g, p| {
            let f = m.forward(g, p, &img)?;
            m.loss(g, f.logits, &t)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
