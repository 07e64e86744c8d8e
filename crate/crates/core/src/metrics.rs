//! Micro-averaged precision/recall curves, AU-PRC, per-level reports,
//! leaf confusion deltas and parameter accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{LabelHierarchy, LabelVector};
use crate::model::{component_of, param_shapes, ModelConfig, ModelMode};

/// Parameter overhead of the hierarchical model over the flat baseline as
/// published for the AID setup, in percent.
pub const PUBLISHED_OVERHEAD_PCT: f64 = 2.6;
pub const DEFAULT_CONFUSION_THRESHOLD: f64 = 0.5;

/// Precision/recall after each threshold group, from the highest score down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)` pairs.
    pub points: Vec<(f64, f64)>,
    /// Score at which each point was taken.
    pub thresholds: Vec<f64>,
    pub positives: usize,
    pub count: usize,
}

/// Pools every (sample, label) pair and sweeps the threshold downwards.
/// Equal scores form one threshold group.
pub fn micro_pr(scores: &[f64], truth: &[bool]) -> Result<PrCurve> {
    if scores.len() != truth.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} truth values",
            scores.len(),
            truth.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not comparable")));
    }
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(Error::Metric("no positive labels; precision/recall undefined".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::new();
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
        thresholds.push(s);
    }
    Ok(PrCurve {
        points,
        thresholds,
        positives,
        count: scores.len(),
    })
}

/// Average-precision step rule: sum of `(R_k - R_{k-1}) * P_k` with `R_0 = 0`.
pub fn auprc(curve: &PrCurve) -> Result<f64> {
    if curve.points.is_empty() {
        return Err(Error::Metric("empty precision/recall curve".into()));
    }
    let mut prev = 0.0;
    let mut area = 0.0;
    for &(r, p) in &curve.points {
        area += (r - prev) * p;
        prev = r;
    }
    Ok(area)
}

pub fn micro_auprc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    auprc(&micro_pr(scores, truth)?)
}

/// One line of a prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    /// Sigmoid probability per scored node: all nodes for the hierarchical
    /// model, leaves only for the flat baseline.
    pub scores: Vec<f64>,
    pub leaf_scores: Vec<f64>,
    /// Highest-scoring node name per level; empty for leaf-only dumps.
    #[serde(default)]
    pub per_level_argmax: Vec<String>,
}

pub fn write_dump(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    crate::params::write_atomic(path, &out)
}

pub fn read_dump(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `l1`, `l2`, ... to micro AU-PRC over that level's nodes. `null` when
    /// the level has no positive label in the evaluated set.
    pub per_level_auprc: BTreeMap<String, Option<f64>>,
    pub leaf_auprc: f64,
    pub num_samples: usize,
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
    pub hierarchy_sha256: String,
}

/// A report and the curves behind each of its numbers.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub curves: BTreeMap<String, PrCurve>,
}

fn level_key(level: usize) -> String {
    format!("l{level}")
}

/// Micro AU-PRC per level and over the leaves. `truth` maps sample ids to
/// label vectors over all nodes.
pub fn per_level_report(
    preds: &[PredictionRecord],
    truth: &BTreeMap<String, LabelVector>,
    h: &LabelHierarchy,
) -> Result<Evaluation> {
    if preds.is_empty() {
        return Err(Error::Metric("empty prediction dump".into()));
    }
    let leaves = h.leaf_ids();
    let full = preds[0].scores.len() == h.len();
    let mut rows = Vec::with_capacity(preds.len());
    for p in preds {
        let y = truth
            .get(&p.id)
            .ok_or_else(|| Error::Metric(format!("no ground truth for sample '{}'", p.id)))?;
        if y.len() != h.len() {
            return Err(Error::Metric(format!("ground truth for '{}' has {} nodes", p.id, y.len())));
        }
        let width_ok = if full { p.scores.len() == h.len() } else { p.scores.len() == leaves.len() };
        if !width_ok || p.leaf_scores.len() != leaves.len() {
            return Err(Error::Metric(format!(
                "sample '{}' scores {} nodes and {} leaves; the hierarchy has {} nodes and {} leaves",
                p.id,
                p.scores.len(),
                p.leaf_scores.len(),
                h.len(),
                leaves.len()
            )));
        }
        rows.push((p, y));
    }

    let slice = |ids: &[usize], from_leaf: bool| {
        let mut s = Vec::with_capacity(rows.len() * ids.len());
        let mut t = Vec::with_capacity(s.capacity());
        for (p, y) in &rows {
            for (k, &id) in ids.iter().enumerate() {
                s.push(if from_leaf { p.leaf_scores[k] } else { p.scores[id] });
                t.push(y.get(id));
            }
        }
        (s, t)
    };

    let mut curves = BTreeMap::new();
    let mut per_level = BTreeMap::new();
    if full {
        for (k, ids) in h.level_partition().levels.iter().enumerate() {
            let (s, t) = slice(ids, false);
            let key = level_key(k + 1);
            if t.iter().any(|&b| b) {
                let c = micro_pr(&s, &t)?;
                per_level.insert(key.clone(), Some(auprc(&c)?));
                curves.insert(key, c);
            } else {
                per_level.insert(key, None);
            }
        }
    }
    let (s, t) = slice(leaves, true);
    let leaf_curve = micro_pr(&s, &t)?;
    let leaf_auprc = auprc(&leaf_curve)?;
    curves.insert("leaf".into(), leaf_curve);
    Ok(Evaluation {
        report: EvalReport {
            per_level_auprc: per_level,
            leaf_auprc,
            num_samples: rows.len(),
            seed: None,
            config_digest: None,
            hierarchy_sha256: h.digest(),
        },
        curves,
    })
}

/// Writes `pr_<name>.csv` with a `recall,precision,threshold` header for
/// every curve.
pub fn write_pr_csvs(dir: &Path, curves: &BTreeMap<String, PrCurve>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, c) in curves {
        let path = dir.join(format!("pr_{name}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["recall", "precision", "threshold"])?;
        for (&(r, p), t) in c.points.iter().zip(&c.thresholds) {
            w.write_record([r.to_string(), p.to_string(), t.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCell {
    pub true_leaf: String,
    pub predicted_leaf: String,
    pub count_baseline: usize,
    pub count_maple: usize,
    pub delta: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionDelta {
    pub threshold: f64,
    /// Nonzero cells only, ordered by (true, predicted) leaf position.
    pub cells: Vec<ConfusionCell>,
    pub total_baseline: usize,
    pub total_maple: usize,
    /// `total_baseline - total_maple`.
    pub absolute_reduction: i64,
    /// Reduction relative to the baseline total, in percent.
    pub relative_reduction_pct: Option<f64>,
}

/// Leaf confusion counts `(true position, predicted position) -> n`: every
/// leaf called positive but absent is paired with each true leaf.
pub fn confusion_counts(
    preds: &[PredictionRecord],
    truth: &BTreeMap<String, LabelVector>,
    h: &LabelHierarchy,
    threshold: f64,
) -> Result<BTreeMap<(usize, usize), usize>> {
    let leaves = h.leaf_ids();
    let mut counts = BTreeMap::new();
    for p in preds {
        let y = truth
            .get(&p.id)
            .ok_or_else(|| Error::Metric(format!("no ground truth for sample '{}'", p.id)))?;
        if p.leaf_scores.len() != leaves.len() || y.len() != h.len() {
            return Err(Error::Metric(format!("sample '{}' does not cover the leaf set", p.id)));
        }
        let true_pos: Vec<usize> = (0..leaves.len()).filter(|&k| y.get(leaves[k])).collect();
        for (j, &s) in p.leaf_scores.iter().enumerate() {
            if s >= threshold && !y.get(leaves[j]) {
                for &i in &true_pos {
                    *counts.entry((i, j)).or_insert(0) += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// Confusion difference between a baseline dump and a hierarchical-model
/// dump over the same samples.
pub fn confusion_delta(
    baseline: &[PredictionRecord],
    maple: &[PredictionRecord],
    truth: &BTreeMap<String, LabelVector>,
    h: &LabelHierarchy,
    threshold: f64,
) -> Result<ConfusionDelta> {
    let ids = |d: &[PredictionRecord]| d.iter().map(|r| r.id.clone()).collect::<BTreeSet<_>>();
    let (ia, ib) = (ids(baseline), ids(maple));
    if ia != ib || ia.len() != baseline.len() || ib.len() != maple.len() {
        return Err(Error::Metric("the two dumps cover different (or repeated) samples".into()));
    }
    let a = confusion_counts(baseline, truth, h, threshold)?;
    let b = confusion_counts(maple, truth, h, threshold)?;
    let keys: BTreeSet<_> = a.keys().chain(b.keys()).copied().collect();
    let leaves = h.leaf_ids();
    let name = |k: usize| h.nodes()[leaves[k]].name.clone();
    let cells = keys
        .into_iter()
        .map(|k| {
            let (ca, cb) = (a.get(&k).copied().unwrap_or(0), b.get(&k).copied().unwrap_or(0));
            ConfusionCell {
                true_leaf: name(k.0),
                predicted_leaf: name(k.1),
                count_baseline: ca,
                count_maple: cb,
                delta: cb as i64 - ca as i64,
            }
        })
        .collect();
    let total_baseline: usize = a.values().sum();
    let total_maple: usize = b.values().sum();
    let absolute_reduction = total_baseline as i64 - total_maple as i64;
    Ok(ConfusionDelta {
        threshold,
        cells,
        total_baseline,
        total_maple,
        absolute_reduction,
        relative_reduction_pct: (total_baseline > 0)
            .then(|| 100.0 * absolute_reduction as f64 / total_baseline as f64),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamAccount {
    /// Component name to parameter count for the hierarchical model.
    pub maple: BTreeMap<String, usize>,
    pub flat: BTreeMap<String, usize>,
    pub maple_total: usize,
    pub flat_total: usize,
    pub overhead_pct: f64,
    pub published_overhead_pct: f64,
    /// Closed-form counts per component for cross-checking the table walk.
    pub formula: BTreeMap<String, usize>,
}

fn by_component(shapes: &BTreeMap<String, Vec<usize>>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (name, s) in shapes {
        *out.entry(component_of(name).to_string()).or_insert(0) += s.iter().product::<usize>();
    }
    out
}

/// Closed-form parameter counts of the hierarchical model's components.
pub fn formula_counts(cfg: &ModelConfig, num_nodes: usize) -> BTreeMap<String, usize> {
    let d = cfg.encoder.dim;
    let e = &cfg.encoder;
    let block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + 2 * (d * d * e.mlp_ratio) + d * e.mlp_ratio + d;
    let encoder = e.patch_dim() * d + d + e.num_patches() * d + d + d * d + d + e.depth * block;
    let mut out = BTreeMap::from([
        ("encoder".to_string(), encoder),
        ("gnn".to_string(), cfg.gnn_layers * (2 * d * d + d + 2 * d)),
        ("gate".to_string(), 2 * d * d + d + 2 * d),
        ("head".to_string(), 2 * d * num_nodes + num_nodes),
        ("tokens".to_string(), num_nodes * d),
    ]);
    if cfg.init == crate::model::InitMode::Semantic {
        out.insert("w_psi".into(), cfg.embed_dim * d);
    }
    out
}

/// Per-component counts of the hierarchical model and of the flat baseline
/// sharing its encoder.
pub fn param_account(cfg: &ModelConfig, num_nodes: usize, num_leaves: usize) -> Result<ParamAccount> {
    let mut maple_cfg = cfg.clone();
    maple_cfg.mode = ModelMode::Maple;
    let mut flat_cfg = cfg.clone();
    flat_cfg.mode = ModelMode::Flat;
    maple_cfg.validate()?;
    let maple = by_component(&param_shapes(&maple_cfg, num_nodes, num_leaves));
    let flat = by_component(&param_shapes(&flat_cfg, num_nodes, num_leaves));
    if maple.get("encoder") != flat.get("encoder") {
        return Err(Error::InvalidArgument("models do not share an encoder shape".into()));
    }
    let maple_total: usize = maple.values().sum();
    let flat_total: usize = flat.values().sum();
    Ok(ParamAccount {
        formula: formula_counts(&maple_cfg, num_nodes),
        overhead_pct: 100.0 * (maple_total as f64 - flat_total as f64) / flat_total as f64,
        published_overhead_pct: PUBLISHED_OVERHEAD_PCT,
        maple,
        flat,
        maple_total,
        flat_total,
    })
}

/// Parameter counts per component read back from a checkpoint container,
/// excluding non-trainable buffers.
pub fn walk_checkpoint(path: &Path) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for t in crate::params::load_tensors(path)? {
        if t.name.starts_with("buffers.") {
            continue;
        }
        *out.entry(component_of(&t.name).to_string()).or_insert(0) += t.tensor.numel();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointWalk {
    pub maple: BTreeMap<String, usize>,
    pub flat: BTreeMap<String, usize>,
    pub maple_total: usize,
    pub flat_total: usize,
}

/// Initializes both models, writes their checkpoints under `dir` and counts
/// what was written.
pub fn materialize_and_walk(
    cfg: &ModelConfig,
    h: &LabelHierarchy,
    provider: &crate::semantic_init::ProviderConfig,
    dir: &Path,
) -> Result<CheckpointWalk> {
    let walk = |mode: ModelMode| -> Result<BTreeMap<String, usize>> {
        let mut c = cfg.clone();
        c.mode = mode;
        let m = crate::model::MapleModel::init(c, h.clone(), provider, 0)?;
        let path = dir.join(format!("{mode:?}.bin").to_lowercase());
        m.save(&path, BTreeMap::new())?;
        drop(m);
        walk_checkpoint(&path)
    };
    let maple = walk(ModelMode::Maple)?;
    let flat = walk(ModelMode::Flat)?;
    Ok(CheckpointWalk {
        maple_total: maple.values().sum(),
        flat_total: flat.values().sum(),
        maple,
        flat,
    })
}

/// Writes a report as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    crate::params::write_atomic(path, &bytes)
}
