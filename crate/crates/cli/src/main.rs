//! `maple`: command-line front end for hierarchy tooling, synthetic data,
//! training, evaluation and analysis.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input (hierarchy, config
//! or labels), 3 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use maple_core::config::RunConfig;
use maple_core::data::{self, Dataset, ImageFormat, SynthConfig};
use maple_core::hierarchy::{fixtures, LabelHierarchy};
use maple_core::metrics::{self, DEFAULT_CONFUSION_THRESHOLD};
use maple_core::model::{InitMode, MapleModel, ModelMode, PoolSource};
use maple_core::train::{self, EmbeddingStage};
use maple_core::Error;

#[derive(Parser, Debug)]
#[command(name = "maple", version, about = "Hierarchical multi-label classification toolkit")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Hierarchy file tools.
    #[command(subcommand)]
    Hierarchy(HierarchyCmd),
    /// Dataset tools.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// K-shot comparison of the flat baseline and the hierarchical model.
    Fewshot(FewshotArgs),
    /// Post-hoc analyses of prediction dumps.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Export model internals.
    #[command(subcommand)]
    Export(ExportCmd),
    /// Static reports.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Subcommand, Debug)]
enum HierarchyCmd {
    /// Check a hierarchy file and print its level sizes.
    Validate { file: PathBuf },
    /// Print the contextual description of every node.
    Prompts {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand, Debug)]
enum DataCmd {
    /// Render a synthetic hierarchy-consistent dataset.
    Synth {
        /// Hierarchy file or built-in name (aid, mured, dfc15, aid-ship-branch).
        #[arg(long)]
        hierarchy: String,
        #[arg(long)]
        n: usize,
        #[arg(long, env = "MAPLE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long, value_parser = ["ppm", "f32"], default_value = "ppm")]
        format: String,
    },
}

#[derive(Args, Debug, Clone)]
struct EmbedArgs {
    /// Remote embedding service base URL; selects the remote provider.
    #[arg(long)]
    embed_endpoint: Option<String>,
    /// Directory caching prompt embeddings.
    #[arg(long)]
    embed_cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = ["maple", "flat"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["semantic", "random"])]
    init: Option<String>,
    #[arg(long, value_parser = ["fused", "gnn"])]
    pool_source: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; overrides the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, env = "MAPLE_SEED")]
    seed: Option<u64>,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file or training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Also write the prediction dump here.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Also write one precision/recall CSV per level here.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FewshotArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, env = "MAPLE_SEED")]
    seed: Option<u64>,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCmd {
    /// Leaf confusion difference between a baseline dump (a) and a
    /// hierarchical-model dump (b).
    Confusion {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Dataset directory holding the ground truth.
        #[arg(long)]
        truth: PathBuf,
        /// Defaults to `hierarchy.yaml` inside the truth directory.
        #[arg(long)]
        hierarchy: Option<String>,
        #[arg(long, default_value_t = DEFAULT_CONFUSION_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum ExportCmd {
    /// Node embeddings at one pipeline stage as CSV.
    Embeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = ["init", "learned", "gnn", "fused"])]
        stage: String,
        #[arg(long)]
        out: PathBuf,
        /// Images to average over; needed for the gnn and fused stages.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum ReportCmd {
    /// Per-component parameter counts and overhead over the flat baseline.
    Params {
        #[arg(long)]
        config: PathBuf,
        /// Also build both models, save them and count the saved tensors.
        #[arg(long)]
        walk: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Hierarchy(HierarchyCmd::Validate { file }) => {
            let h = LabelHierarchy::load(&file)?;
            let p = h.level_partition();
            println!(
                "ok: {} nodes, {} levels, level sizes {:?}, {} leaves",
                h.len(),
                h.num_levels(),
                p.sizes(),
                p.leaves.len()
            );
            Ok(())
        }
        Command::Hierarchy(HierarchyCmd::Prompts { file, json }) => {
            let h = LabelHierarchy::load(&file)?;
            let prompts = maple_core::semantic_init::node_prompts(&h)?;
            if json {
                let rows: Vec<_> = h
                    .nodes()
                    .iter()
                    .zip(&prompts)
                    .map(|(n, p)| serde_json::json!({"node": n.name, "level": n.level, "prompt": p}))
                    .collect();
                println!("{}", serde_json::to_string_pretty(&rows).map_err(Error::from)?);
            } else {
                for (n, p) in h.nodes().iter().zip(&prompts) {
                    println!("{}\t{}", n.name, p);
                }
            }
            Ok(())
        }
        Command::Data(DataCmd::Synth { hierarchy, n, seed, out, noise, image_size, format }) => {
            let h = resolve_hierarchy(&hierarchy)?;
            let mut cfg = SynthConfig { n, seed, ..SynthConfig::default() };
            if let Some(v) = noise {
                cfg.noise = v;
            }
            if let Some(s) = image_size {
                cfg.image_size = s;
            }
            let ds = data::synth_dataset(&h, &cfg)?;
            let fmt = if format == "ppm" { ImageFormat::Ppm } else { ImageFormat::F32 };
            data::save_dataset(&out, &ds, &h, fmt)?;
            write_text(&out.join("hierarchy.yaml"), &h.to_yaml_string())?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Fewshot(args) => cmd_fewshot(args),
        Command::Analyze(AnalyzeCmd::Confusion { a, b, truth, hierarchy, threshold, out }) => {
            let h = match hierarchy {
                Some(name) => resolve_hierarchy(&name)?,
                None => LabelHierarchy::load(truth.join("hierarchy.yaml"))?,
            };
            let ds = data::load_dataset(&truth, &h)?;
            let da = metrics::read_dump(&a)?;
            let db = metrics::read_dump(&b)?;
            let delta = metrics::confusion_delta(&da, &db, &ds.truth(), &h, threshold)?;
            emit_json(out.as_deref(), &delta)
        }
        Command::Export(ExportCmd::Embeddings { checkpoint, stage, out, data: images }) => {
            let (model, _) = MapleModel::load(&checkpoint)?;
            let stage: EmbeddingStage = stage.parse()?;
            if matches!(stage, EmbeddingStage::Gnn | EmbeddingStage::Fused) && images.is_none() {
                return Err(Failure::Usage("--data is required for the gnn and fused stages".into()));
            }
            let ds = images.map(|d| data::load_dataset(&d, &model.hierarchy)).transpose()?;
            let emb = train::node_embeddings(&model, stage, ds.as_ref(), 64)?;
            train::write_embeddings_csv(&out, &model.hierarchy, &emb)?;
            Ok(())
        }
        Command::Report(ReportCmd::Params { config, walk, out }) => {
            let cfg = RunConfig::load(&config)?;
            let h = cfg.hierarchy()?;
            let account = metrics::param_account(&cfg.model, h.len(), h.leaf_ids().len())?;
            let mut value = serde_json::to_value(&account).map_err(Error::from)?;
            if walk {
                let dir = tempfile_dir()?;
                let result = metrics::materialize_and_walk(&cfg.model, &h, &cfg.embed, &dir);
                let _ = std::fs::remove_dir_all(&dir);
                let w = result?;
                let matches = w.maple == account.maple && w.flat == account.flat;
                value["checkpoint_walk"] = serde_json::to_value(&w).map_err(Error::from)?;
                value["walk_matches_table"] = matches.into();
            }
            emit_json(out.as_deref(), &value)
        }
    }
}

fn tempfile_dir() -> CliResult<PathBuf> {
    let dir = std::env::temp_dir().join(format!("maple-walk-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(Error::Io { path: path.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn emit_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> CliResult {
    match out {
        Some(p) => metrics::write_json(p, value)?,
        None => println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?),
    }
    Ok(())
}

fn resolve_hierarchy(name: &str) -> CliResult<LabelHierarchy> {
    match fixtures::by_name(name) {
        Some(h) => Ok(h),
        None => Ok(LabelHierarchy::load(name)?),
    }
}

fn apply_embed(cfg: &mut RunConfig, e: &EmbedArgs) {
    if let Some(url) = &e.embed_endpoint {
        cfg.embed.endpoint = Some(url.clone());
        cfg.model.provider = "remote".into();
    }
    if let Some(dir) = &e.embed_cache {
        cfg.embed.cache_dir = Some(dir.clone());
    }
}

/// The configured dataset: loaded from disk when a directory is given,
/// otherwise generated.
fn dataset(cfg: &RunConfig, h: &LabelHierarchy) -> CliResult<Dataset> {
    Ok(match &cfg.data.dir {
        Some(d) => data::load_dataset(d, h)?,
        None => data::synth_dataset(h, &cfg.data.synth)?,
    })
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(m) = &args.mode {
        cfg.model.mode = if m == "maple" { ModelMode::Maple } else { ModelMode::Flat };
    }
    if let Some(i) = &args.init {
        cfg.model.init = if i == "semantic" { InitMode::Semantic } else { InitMode::Random };
    }
    if let Some(p) = &args.pool_source {
        cfg.model.pool_source = if p == "fused" { PoolSource::Fused } else { PoolSource::Gnn };
    }
    if let Some(d) = args.data {
        cfg.data.dir = Some(d);
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    apply_embed(&mut cfg, &args.embed);
    cfg.validate()?;

    let h = cfg.hierarchy()?;
    let ds = dataset(&cfg, &h)?;
    let sp = data::split(&ds, &cfg.data.split)?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    write_text(&args.out.join("config.yaml"), &cfg.to_yaml_string()?)?;

    let mut model = MapleModel::init(cfg.model.clone(), h.clone(), &cfg.embed, cfg.train.seed)?;
    let meta = BTreeMap::from([
        ("config_digest".to_string(), cfg.digest().into()),
        ("seed".to_string(), cfg.train.seed.into()),
    ]);
    let report = train::train(&mut model, &ds.subset(&sp.train), &ds.subset(&sp.val), &cfg.train, Some(&args.out), meta)?;

    let test = if sp.test.is_empty() { ds.subset(&sp.val) } else { ds.subset(&sp.test) };
    if !test.is_empty() {
        let preds = train::predict(&model, &test, cfg.train.eval_batch_size)?;
        metrics::write_dump(&args.out.join("predictions.jsonl"), &preds)?;
        let mut ev = metrics::per_level_report(&preds, &test.truth(), &h)?;
        ev.report.seed = Some(cfg.train.seed);
        ev.report.config_digest = Some(cfg.digest());
        metrics::write_json(&args.out.join("eval_report.json"), &ev.report)?;
        metrics::write_pr_csvs(&args.out.join("curves"), &ev.curves)?;
        println!("test leaf AU-PRC {:.4}", ev.report.leaf_auprc);
    }
    println!(
        "best epoch {} (val leaf AU-PRC {:.4}); checkpoint in {}",
        report.best_epoch,
        report.best_val_auprc,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let (model, side) = MapleModel::load(&args.checkpoint)?;
    let ds = data::load_dataset(&args.data, &model.hierarchy)?;
    let preds = train::predict(&model, &ds, 64)?;
    let mut ev = metrics::per_level_report(&preds, &ds.truth(), &model.hierarchy)?;
    ev.report.seed = side.meta.get("seed").and_then(|v| v.as_u64());
    ev.report.config_digest = side.meta.get("config_digest").and_then(|v| v.as_str()).map(String::from);
    metrics::write_json(&args.report, &ev.report)?;
    if let Some(p) = &args.dump {
        metrics::write_dump(p, &preds)?;
    }
    if let Some(dir) = &args.curves {
        metrics::write_pr_csvs(dir, &ev.curves)?;
    }
    println!("leaf AU-PRC {:.4} on {} samples", ev.report.leaf_auprc, ev.report.num_samples);
    Ok(())
}

fn cmd_fewshot(args: FewshotArgs) -> CliResult {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(k) = args.k {
        cfg.fewshot.ks = k;
    }
    if let Some(r) = args.repeats {
        cfg.fewshot.repeats = r;
    }
    if let Some(d) = args.data {
        cfg.data.dir = Some(d);
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    apply_embed(&mut cfg, &args.embed);
    cfg.validate()?;
    if cfg.fewshot.ks.is_empty() || cfg.fewshot.repeats == 0 {
        return Err(Failure::Usage("need at least one K and one repeat".into()));
    }
    let h = cfg.hierarchy()?;
    let ds = dataset(&cfg, &h)?;
    let sp = data::split(&ds, &cfg.data.split)?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    write_text(&args.out.join("config.yaml"), &cfg.to_yaml_string()?)?;
    let runs = train::fewshot(&cfg, &h, &ds, &sp, Some(&args.out))?;
    train::write_fewshot_runs(&args.out.join("fewshot_runs.csv"), &runs)?;
    let table = args.out.join("fewshot_table.csv");
    train::write_fewshot_table(&table, &runs)?;
    print!("{}", std::fs::read_to_string(&table).map_err(|e| io_err(&table, e))?);
    Ok(())
}
