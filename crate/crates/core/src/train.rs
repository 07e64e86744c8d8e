//! Training loop, inference, evaluation and the K-shot experiment runner.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainConfig};
use crate::data::{kshot_sample, Dataset, Split};
use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::metrics::{per_level_report, write_dump, Evaluation, PredictionRecord};
use crate::model::{MapleModel, ModelMode};
use crate::optim::{clip_grad_norm, lr_schedule, AdamW};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_auprc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auprc: f64,
    pub stopped_early: bool,
    pub checkpoint: Option<PathBuf>,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step as u64
}

fn save_best(model: &MapleModel, out: Option<&Path>, meta: &BTreeMap<String, serde_json::Value>) -> Result<Option<PathBuf>> {
    let Some(dir) = out else { return Ok(None) };
    let path = dir.join(CHECKPOINT_FILE);
    model.save(&path, meta.clone())?;
    Ok(Some(path))
}

/// Trains `model` in place. The parameters left in the model (and in
/// `out/checkpoint.bin`) are those of the epoch with the best leaf AU-PRC on
/// `val`, or on `train` when `val` is empty.
pub fn train(
    model: &mut MapleModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    meta: BTreeMap<String, serde_json::Value>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    train_set.check_consistent(&model.hierarchy)?;
    let selection = if val_set.is_empty() { train_set } else { val_set };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log_file = match out {
        Some(dir) => {
            let p = dir.join(LOG_FILE);
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule();
    let mut opt = AdamW::<f32>::new(cfg.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut checkpoint = None;
    let mut report_log = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step = 0;
    let meta_for = |epoch: usize, val: f64| {
        let mut m = meta.clone();
        m.insert("best_epoch".into(), epoch.into());
        m.insert("best_val_auprc".into(), val.into());
        m
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            lr = lr_schedule(step, steps_per_epoch, &schedule);
            let value = match train_step(model, &mut opt, train_set, batch, cfg, step, lr) {
                Ok(v) if v.is_finite() && model.params.is_finite() => v,
                Ok(_) | Err(Error::NonFinite { .. }) => return Err(diverged(model, best, epoch, out, &meta_for)),
                Err(e) => return Err(e),
            };
            loss_sum += value * batch.len() as f64;
            step += 1;
        }

        let val = match evaluate(model, selection, cfg.eval_batch_size) {
            Ok(ev) => ev.report.leaf_auprc,
            Err(Error::NonFinite { .. }) => return Err(diverged(model, best, epoch, out, &meta_for)),
            Err(e) => return Err(e),
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_auprc: val,
        };
        if let Some((f, p)) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &entry)?;
            f.write_all(b"\n").map_err(|e| Error::io(p.as_path(), e))?;
        }
        log::info!("epoch {epoch}: loss {:.5} val leaf AU-PRC {val:.4}", entry.train_loss);
        report_log.push(entry);

        if best.as_ref().map_or(true, |(_, b, _)| val > *b) {
            best = Some((epoch, val, model.params.clone()));
            since_best = 0;
            checkpoint = save_best(model, out, &meta_for(epoch, val))?;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_auprc, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainReport {
        log: report_log,
        best_epoch,
        best_val_auprc,
        stopped_early,
        checkpoint,
    })
}

/// One optimizer update; returns the batch loss. A non-finite loss leaves
/// the parameters untouched.
fn train_step(
    model: &mut MapleModel,
    opt: &mut AdamW<f32>,
    ds: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
    step: usize,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::<f32>::new(true, step_seed(cfg.seed, step));
    let p = g.bind(model.params.as_map())?;
    let images = ds.batch(batch)?;
    let labels: Vec<_> = batch.iter().map(|&i| &ds.samples[i].labels).collect();
    let targets: Tensor<f32> = model.targets(&labels)?;
    let fwd = model.forward(&mut g, &p, &images)?;
    let loss = model.loss(&mut g, fwd.logits, &targets)?;
    let value = g.value(loss).item()? as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    let mut grads = g.backward(loss)?.collect(&p);
    if let Some(max) = cfg.grad_clip {
        clip_grad_norm(&mut grads, max);
    }
    opt.step(&mut model.params, &grads, lr)?;
    Ok(value)
}

fn diverged(
    model: &mut MapleModel,
    best: Option<(usize, f64, ParamStore<f32>)>,
    epoch: usize,
    out: Option<&Path>,
    meta_for: &dyn Fn(usize, f64) -> BTreeMap<String, serde_json::Value>,
) -> Error {
    let last_good = match best {
        Some((e, v, params)) => {
            model.params = params;
            out.map(|d| d.join(CHECKPOINT_FILE)).filter(|p| {
                // The best checkpoint was written when it was found; rewrite
                // it in case the directory was cleaned meanwhile.
                model.save(p, meta_for(e, v)).is_ok()
            })
        }
        None => None,
    };
    Error::Diverged { epoch, last_good }
}

/// Sigmoid scores for every sample, in dataset order.
pub fn predict(model: &MapleModel, ds: &Dataset, batch_size: usize) -> Result<Vec<PredictionRecord>> {
    let h = &model.hierarchy;
    let leaves = h.leaf_ids();
    let levels = &model.partition().levels;
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for batch in idx.chunks(batch_size.max(1)) {
        let mut g = Graph::<f32>::new(false, 0);
        let p = g.bind(model.params.as_map())?;
        let fwd = model.forward(&mut g, &p, &ds.batch(batch)?)?;
        let logits = g.value(fwd.logits);
        for (r, &i) in batch.iter().enumerate() {
            let row = logits.row(r);
            let scores: Vec<f64> = row.iter().map(|&x| 1.0 / (1.0 + (-(x as f64)).exp())).collect();
            let (leaf_scores, per_level_argmax) = match model.config.mode {
                ModelMode::Maple => {
                    let argmax = levels
                        .iter()
                        .map(|ids| {
                            let best = ids
                                .iter()
                                .copied()
                                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                                .expect("levels are nonempty");
                            h.nodes()[best].name.clone()
                        })
                        .collect();
                    (leaves.iter().map(|&l| scores[l]).collect(), argmax)
                }
                ModelMode::Flat => (scores.clone(), Vec::new()),
            };
            out.push(PredictionRecord {
                id: ds.samples[i].id.clone(),
                scores,
                leaf_scores,
                per_level_argmax,
            });
        }
    }
    Ok(out)
}

pub fn evaluate(model: &MapleModel, ds: &Dataset, batch_size: usize) -> Result<Evaluation> {
    per_level_report(&predict(model, ds, batch_size)?, &ds.truth(), &model.hierarchy)
}

/// Where along the pipeline node embeddings are read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingStage {
    /// Class tokens as initialized, before any training.
    Init,
    /// Class tokens with the trained parameters.
    Learned,
    /// Graph-refined node states, averaged over images.
    Gnn,
    /// Gated fused states, averaged over images.
    Fused,
}

impl std::str::FromStr for EmbeddingStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Self::Init),
            "learned" => Ok(Self::Learned),
            "gnn" => Ok(Self::Gnn),
            "fused" => Ok(Self::Fused),
            _ => Err(Error::InvalidArgument(format!("unknown embedding stage '{s}'"))),
        }
    }
}

/// `[M, d]` node embeddings at `stage`. Image-dependent stages average over
/// every sample of `ds`.
pub fn node_embeddings(model: &MapleModel, stage: EmbeddingStage, ds: Option<&Dataset>, batch_size: usize) -> Result<Tensor<f64>> {
    if model.config.mode == ModelMode::Flat {
        return Err(Error::InvalidArgument("the flat baseline has no node embeddings".into()));
    }
    match stage {
        EmbeddingStage::Init => Ok(model.buffers.get(crate::model::INIT_TOKENS_BUFFER)?.clone()),
        EmbeddingStage::Learned => {
            let mut g = Graph::<f64>::new(false, 0);
            let p = g.bind(model.params.cast::<f64>().as_map())?;
            let t = model.class_tokens(&mut g, &p)?.expect("hierarchical model has tokens");
            Ok(g.value(t).clone())
        }
        EmbeddingStage::Gnn | EmbeddingStage::Fused => {
            let ds = ds
                .filter(|d| !d.is_empty())
                .ok_or_else(|| Error::InvalidArgument("this stage needs images to run the model on".into()))?;
            let (m, d) = (model.hierarchy.len(), model.config.encoder.dim);
            let mut acc = vec![0.0f64; m * d];
            let idx: Vec<usize> = (0..ds.len()).collect();
            for batch in idx.chunks(batch_size.max(1)) {
                let mut g = Graph::<f32>::new(false, 0);
                let p = g.bind(model.params.as_map())?;
                let fwd = model.forward(&mut g, &p, &ds.batch(batch)?)?;
                let v = if stage == EmbeddingStage::Gnn { fwd.gnn } else { fwd.fused };
                for (k, x) in g.value(v.expect("hierarchical forward")).data().iter().enumerate() {
                    acc[k % (m * d)] += *x as f64;
                }
            }
            let n = ds.len() as f64;
            Tensor::new(vec![m, d], acc.into_iter().map(|x| x / n).collect())
        }
    }
}

/// One row per node: name, level, leaf flag, then the embedding.
pub fn write_embeddings_csv(path: &Path, h: &LabelHierarchy, emb: &Tensor<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = emb.shape()[1];
    let mut header = vec!["node".to_string(), "level".to_string(), "is_leaf".to_string()];
    header.extend((0..d).map(|i| format!("d{i}")));
    w.write_record(&header)?;
    for (i, n) in h.nodes().iter().enumerate() {
        let mut row = vec![n.name.clone(), n.level.to_string(), n.is_leaf().to_string()];
        row.extend(emb.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One trained model in a K-shot experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotRun {
    pub mode: ModelMode,
    pub k: usize,
    pub repeat: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub per_leaf: Vec<usize>,
    pub best_epoch: usize,
    pub test_leaf_auprc: f64,
}

fn mode_name(m: ModelMode) -> &'static str {
    match m {
        ModelMode::Maple => "maple",
        ModelMode::Flat => "flat",
    }
}

/// Trains every mode on `repeats` independent K-shot draws per K and scores
/// the test fold. Both modes see the same draw. Per-run logs and prediction
/// dumps go under `out/runs/` when `out` is given.
pub fn fewshot(
    cfg: &RunConfig,
    h: &LabelHierarchy,
    ds: &Dataset,
    split: &Split,
    out: Option<&Path>,
) -> Result<Vec<FewshotRun>> {
    let train_pool = ds.subset(&split.train);
    let val = ds.subset(&split.val);
    let test = ds.subset(&split.test);
    if test.is_empty() {
        return Err(Error::Data("few-shot evaluation needs a nonempty test split".into()));
    }
    let mut runs = Vec::new();
    for &k in &cfg.fewshot.ks {
        for repeat in 0..cfg.fewshot.repeats {
            let seed = cfg.train.seed.wrapping_add(1000 * k as u64 + repeat as u64);
            let shot = kshot_sample(&train_pool, h, k, seed)?;
            let subset = train_pool.subset(&shot.indices);
            for &mode in &cfg.fewshot.modes {
                let mut model_cfg = cfg.model.clone();
                model_cfg.mode = mode;
                let mut model = MapleModel::init(model_cfg, h.clone(), &cfg.embed, seed)?;
                let mut tcfg = cfg.train.clone();
                tcfg.seed = seed;
                let run_dir = out.map(|d| d.join("runs").join(format!("{}-k{k}-r{repeat}", mode_name(mode))));
                let report = train(&mut model, &subset, &val, &tcfg, run_dir.as_deref(), BTreeMap::new())?;
                let preds = predict(&model, &test, tcfg.eval_batch_size)?;
                if let Some(d) = &run_dir {
                    write_dump(&d.join("predictions.jsonl"), &preds)?;
                }
                let ev = per_level_report(&preds, &test.truth(), h)?;
                log::info!(
                    "{} K={k} repeat {repeat}: {} samples, test leaf AU-PRC {:.4}",
                    mode_name(mode),
                    subset.len(),
                    ev.report.leaf_auprc
                );
                runs.push(FewshotRun {
                    mode,
                    k,
                    repeat,
                    seed,
                    train_samples: subset.len(),
                    per_leaf: shot.per_leaf.clone(),
                    best_epoch: report.best_epoch,
                    test_leaf_auprc: ev.report.leaf_auprc,
                });
            }
        }
    }
    Ok(runs)
}

/// Mean and sample standard deviation of leaf AU-PRC per (mode, K).
pub fn summarize(runs: &[FewshotRun]) -> BTreeMap<(String, usize), (f64, f64, usize)> {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((mode_name(r.mode).to_string(), r.k))
            .or_default()
            .push(r.test_leaf_auprc);
    }
    groups
        .into_iter()
        .map(|(key, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            (key, (mean, var.sqrt(), v.len()))
        })
        .collect()
}

/// Table with one row per mode and one `mean±std` column per K, AU-PRC in
/// percent.
pub fn write_fewshot_table(path: &Path, runs: &[FewshotRun]) -> Result<()> {
    let summary = summarize(runs);
    let mut ks: Vec<usize> = runs.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string()];
    header.extend(ks.iter().map(|k| format!("K={k}")));
    w.write_record(&header)?;
    for (mode, label) in [("flat", "Flat baseline"), ("maple", "MAPLE")] {
        if !summary.keys().any(|(m, _)| m == mode) {
            continue;
        }
        let mut row = vec![label.to_string()];
        for k in &ks {
            row.push(match summary.get(&(mode.to_string(), *k)) {
                Some((m, s, _)) => format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s),
                None => String::new(),
            });
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Every run as its own CSV row.
pub fn write_fewshot_runs(path: &Path, runs: &[FewshotRun]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "k", "repeat", "seed", "train_samples", "best_epoch", "test_leaf_auprc"])?;
    for r in runs {
        w.write_record([
            mode_name(r.mode).to_string(),
            r.k.to_string(),
            r.repeat.to_string(),
            r.seed.to_string(),
            r.train_samples.to_string(),
            r.best_epoch.to_string(),
            r.test_leaf_auprc.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};
    use crate::encoder::EncoderConfig;
    use crate::hierarchy::fixtures;
    use crate::model::{InitMode, ModelConfig};
    use crate::semantic_init::ProviderConfig;

    fn tiny_model(mode: ModelMode, h: &LabelHierarchy, seed: u64) -> MapleModel {
        let cfg = ModelConfig {
            mode,
            init: InitMode::Semantic,
            encoder: EncoderConfig {
                image_size: 16,
                channels: 3,
                patch_size: 8,
                dim: 16,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
            },
            embed_dim: 32,
            ..ModelConfig::default()
        };
        MapleModel::init(cfg, h.clone(), &ProviderConfig::default(), seed).unwrap()
    }

    fn tiny_data(h: &LabelHierarchy, n: usize) -> Dataset {
        let cfg = SynthConfig { n, image_size: 16, patch: 6, jitter: 1, ..SynthConfig::default() };
        synth_dataset(h, &cfg).unwrap()
    }

    fn tiny_train(epochs: usize) -> TrainConfig {
        TrainConfig { lr: 3e-3, warmup_epochs: 1, epochs, batch_size: 8, ..TrainConfig::default() }
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let h = fixtures::dfc15();
        let ds = tiny_data(&h, 24);
        let mut bytes = vec![];
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let mut m = tiny_model(ModelMode::Maple, &h, 3);
            train(&mut m, &ds, &Dataset::default(), &tiny_train(3), Some(dir.path()), BTreeMap::new()).unwrap();
            bytes.push((
                std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap(),
                std::fs::read(dir.path().join("checkpoint.json")).unwrap(),
                std::fs::read(dir.path().join(LOG_FILE)).unwrap(),
            ));
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn log_has_one_line_per_epoch_and_loss_falls() {
        let h = fixtures::dfc15();
        let ds = tiny_data(&h, 16);
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model(ModelMode::Maple, &h, 1);
        let rep = train(&mut m, &ds, &Dataset::default(), &tiny_train(15), Some(dir.path()), BTreeMap::new()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<EpochLog> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, rep.log);
        assert_eq!(lines.len(), 15);
        assert!(lines.last().unwrap().train_loss < lines[0].train_loss);
        let best = lines.iter().map(|l| l.val_auprc).fold(0.0, f64::max);
        assert_eq!(rep.best_val_auprc, best);
        // The model holds the best epoch's weights.
        let again = evaluate(&m, &ds, 64).unwrap().report.leaf_auprc;
        assert_eq!(again, best);
    }

    #[test]
    fn patience_stops_training() {
        let h = fixtures::dfc15();
        let ds = tiny_data(&h, 16);
        let mut m = tiny_model(ModelMode::Flat, &h, 1);
        // A tiny rate keeps validation flat so patience triggers.
        let cfg = TrainConfig { lr: 1e-12, patience: Some(2), ..tiny_train(30) };
        let rep = train(&mut m, &ds, &Dataset::default(), &cfg, None, BTreeMap::new()).unwrap();
        assert!(rep.stopped_early);
        assert!(rep.log.len() < 30);
    }

    #[test]
    fn divergence_restores_last_good_checkpoint() {
        let h = fixtures::dfc15();
        let ds = tiny_data(&h, 16);
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model(ModelMode::Flat, &h, 1);
        let cfg = TrainConfig { lr: 1e38, grad_clip: None, weight_decay: 0.0, ..tiny_train(6) };
        match train(&mut m, &ds, &Dataset::default(), &cfg, Some(dir.path()), BTreeMap::new()) {
            Err(Error::Diverged { last_good, .. }) => {
                if let Some(p) = last_good {
                    let (back, _) = MapleModel::load(&p).unwrap();
                    assert!(back.params.is_finite());
                }
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(m.params.is_finite());
    }

    #[test]
    fn flat_checkpoint_has_no_hierarchy_machinery() {
        let h = fixtures::dfc15();
        let ds = tiny_data(&h, 16);
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model(ModelMode::Flat, &h, 1);
        train(&mut m, &ds, &Dataset::default(), &tiny_train(2), Some(dir.path()), BTreeMap::new()).unwrap();
        let names: Vec<String> = crate::params::load_tensors(&dir.path().join(CHECKPOINT_FILE))
            .unwrap()
            .into_iter()
            .map(|t| t.name)
            .collect();
        assert!(names.iter().all(|n| !n.starts_with("gnn.") && !n.starts_with("gate.")));
        let preds = predict(&m, &ds, 5).unwrap();
        assert_eq!(preds[0].scores.len(), 8);
        assert!(preds[0].per_level_argmax.is_empty());
    }

    #[test]
    fn maple_predictions_name_one_node_per_level() {
        let h = fixtures::dfc15();
        let ds = tiny_data(&h, 16);
        let m = tiny_model(ModelMode::Maple, &h, 2);
        let preds = predict(&m, &ds, 7).unwrap();
        assert_eq!(preds.len(), 16);
        for p in &preds {
            assert_eq!(p.scores.len(), 17);
            assert_eq!(p.per_level_argmax.len(), 3);
            for (lvl, name) in p.per_level_argmax.iter().enumerate() {
                assert_eq!(h.nodes()[h.id_of(name).unwrap()].level, lvl + 1);
            }
            assert!(p.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn embedding_stages() {
        let h = fixtures::dfc15();
        let ds = tiny_data(&h, 10);
        let m = tiny_model(ModelMode::Maple, &h, 2);
        let init = node_embeddings(&m, EmbeddingStage::Init, None, 4).unwrap();
        let learned = node_embeddings(&m, EmbeddingStage::Learned, None, 4).unwrap();
        for (a, b) in init.data().iter().zip(learned.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(node_embeddings(&m, EmbeddingStage::Gnn, None, 4).is_err());
        // Averaging is independent of batching.
        let a = node_embeddings(&m, EmbeddingStage::Fused, Some(&ds), 3).unwrap();
        let b = node_embeddings(&m, EmbeddingStage::Fused, Some(&ds), 10).unwrap();
        assert_eq!(a.shape(), &[17, 16]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        write_embeddings_csv(&p, &h, &a).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 18);
        assert!(text.starts_with("node,level,is_leaf,d0,"));
    }

    #[test]
    fn fewshot_table_layout() {
        let runs: Vec<FewshotRun> = [(ModelMode::Flat, 4, 0.5), (ModelMode::Flat, 4, 0.7), (ModelMode::Maple, 4, 0.8), (ModelMode::Maple, 4, 0.8)]
            .iter()
            .enumerate()
            .map(|(i, &(mode, k, v))| FewshotRun {
                mode,
                k,
                repeat: i % 2,
                seed: 0,
                train_samples: 10,
                per_leaf: vec![],
                best_epoch: 1,
                test_leaf_auprc: v,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_fewshot_table(&p, &runs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "method,K=4\nFlat baseline,60.00±14.14\nMAPLE,80.00±0.00\n");
    }
}
