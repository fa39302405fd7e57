use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use etc_core::eval::{evaluate, EvalReport};
use etc_core::expand::{build_dictionary, CaptionProvider, HttpCaptionClient, ReplayProvider};
use etc_core::io::{self, ArtifactMeta};
use etc_core::losses::hard_pcl_loss;
use etc_core::matchers::{cache_rows, score_dataset, scores_from_cache, Aggregation, ScoreCacheRow, TokenEmbedder};
use etc_core::model::PredictorParams;
use etc_core::synth::{generate_dataset, oracle_boundary, SynthConfig, SynthTruth};
use etc_core::train::{
    ground_truths, infer, resume, Ablation, EpochLog, ExpansionContext, TrainConfig, TrainData, TrainState, Trainer,
};
use etc_core::{DescriptionDict, GroundingInstance, ScoreKind};

mod report;

#[derive(Parser, Debug)]
#[command(name = "etc", version, about = "Expand-then-clarify temporal grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML file with optional [synth] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the seeds in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Worker threads (falls back to ETC_BOUND_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth sidecar.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Artifact name; also the video id prefix.
        #[arg(long, default_value = "dataset")]
        name: String,
        /// Number of instances (overrides the config).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Caption every frame and store the description dictionary.
    BuildDict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Ground-truth sidecar driving the offline captioner.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Existing dictionary to replay.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Base URL of a caption service.
        #[arg(long)]
        caption_endpoint: Option<String>,
        /// Output file stem.
        #[arg(long, default_value = "dict")]
        name: String,
    },
    /// Precompute QDM and QFM score sequences.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, value_parser = ["max", "mean"], default_value = "max")]
        aggregation: String,
        /// Output file stem.
        #[arg(long, default_value = "scores")]
        name: String,
    },
    /// Train both predictors.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        /// Score cache from `score`; computed on the fly when absent.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Dataset evaluated after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Continue from the train state in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained run on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Needed for the expanded or midpoint inference branch.
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Evaluate even if the dataset does not match the checkpoint.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Exhaustive contrastive-loss minimizer over each score sequence.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 128)]
        grid: usize,
    },
    /// Consolidated ablation table from several eval reports.
    Report {
        #[command(flatten)]
        common: Common,
        /// Eval report files or run directories containing eval.json.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
    },
}

/// A wrong combination of flags; exits with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    synth: Option<SynthConfig>,
    train: Option<TrainConfig>,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ConfigFile = toml::from_str(&text).map_err(|e| etc_core::Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(t) = &cfg.train {
        t.validate()?;
    }
    if let Some(s) = &cfg.synth {
        s.validate()?;
    }
    Ok(cfg)
}

fn train_config(common: &Common) -> anyhow::Result<TrainConfig> {
    let mut cfg = load_config(common.config.as_deref())?
        .train
        .unwrap_or_else(TrainConfig::synthetic_benchmark);
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.expansion.rng_seed = seed;
    }
    Ok(cfg)
}

fn setup_threads(threads: Option<usize>) -> anyhow::Result<()> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("ETC_BOUND_THREADS") {
            Ok(v) => Some(
                v.parse()
                    .map_err(|_| UsageError(format!("ETC_BOUND_THREADS={v} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(UsageError("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn meta(kind: &str, config_hash: String, seed: u64) -> ArtifactMeta {
    ArtifactMeta {
        kind: kind.into(),
        config_hash,
        seed,
    }
}

/// Hash of a synthetic config with the per-split fields blanked, so the
/// train and test splits of one benchmark share it.
fn family_hash(cfg: &SynthConfig) -> String {
    io::config_hash(&SynthConfig {
        n_instances: 0,
        seed: 0,
        id_prefix: String::new(),
        ..cfg.clone()
    })
}

fn cmd_gen_data(common: &Common, name: &str, n: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = load_config(common.config.as_deref())?.synth.unwrap_or_default();
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = n {
        cfg.n_instances = n;
    }
    cfg.id_prefix = name.to_string();
    let data = generate_dataset(&cfg)?;
    create_dir(&common.out)?;
    let path = common.out.join(format!("{name}.jsonl"));
    io::save_dataset(&path, &data.instances)?;
    io::write_meta(&path, &meta("dataset", family_hash(&cfg), cfg.seed))?;
    let truth_path = common.out.join(format!("{name}.truth.json"));
    io::write_json(&truth_path, &data.truth)?;
    io::write_meta(&truth_path, &meta("truth", family_hash(&cfg), cfg.seed))?;
    println!("wrote {} instances to {}", data.instances.len(), path.display());
    Ok(())
}

fn cmd_build_dict(
    common: &Common,
    dataset: &Path,
    truth: Option<&Path>,
    replay: Option<&Path>,
    endpoint: Option<&str>,
    name: &str,
) -> anyhow::Result<()> {
    let instances = io::load_dataset(dataset)?;
    let cfg = train_config(common)?.expansion;
    let provider: Box<dyn CaptionProvider> = match (truth, replay, endpoint) {
        (Some(t), None, None) => {
            let truth: SynthTruth = io::read_json(t)?;
            Box::new(truth.caption_provider())
        }
        (None, Some(r), None) => Box::new(ReplayProvider::from_file(r)?),
        (None, None, Some(url)) => Box::new(HttpCaptionClient::new(url)),
        _ => {
            return Err(UsageError("build-dict needs exactly one of --truth, --replay or --caption-endpoint".into()).into())
        }
    };
    let dict = build_dictionary(&instances, provider.as_ref(), &cfg)?;
    create_dir(&common.out)?;
    let path = common.out.join(format!("{name}.jsonl"));
    io::save_dictionary(&path, &dict)?;
    io::write_meta(&path, &meta("dictionary", io::config_hash(&cfg), cfg.rng_seed))?;
    println!("wrote {} dictionary entries to {}", dict.len(), path.display());
    Ok(())
}

fn cmd_score(common: &Common, dataset: &Path, dict: &Path, aggregation: &str, name: &str) -> anyhow::Result<()> {
    let instances = io::load_dataset(dataset)?;
    let dict = io::load_dictionary(dict)?;
    let agg = if aggregation == "mean" { Aggregation::Mean } else { Aggregation::Max };
    let embedder = embedder_for(&instances)?;
    let scores = score_dataset(&instances, &dict, &embedder, agg)?;
    create_dir(&common.out)?;
    let path = common.out.join(format!("{name}.jsonl"));
    io::write_jsonl(&path, cache_rows(&instances, &scores))?;
    let seed = io::read_meta(dataset).map(|m| m.seed).unwrap_or(0);
    io::write_meta(&path, &meta("scores", io::config_hash(&agg), seed))?;
    println!("wrote {} score sequences to {}", 2 * scores.len(), path.display());
    Ok(())
}

fn embedder_for(instances: &[GroundingInstance]) -> anyhow::Result<TokenEmbedder> {
    let first = instances
        .first()
        .ok_or_else(|| etc_core::Error::Data("dataset is empty".into()))?;
    Ok(TokenEmbedder::with_dim(first.feature_dim()))
}

/// A params checkpoint file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamsFile {
    #[serde(flatten)]
    params: PredictorParams,
    seed: u64,
    step: u64,
    config_hash: String,
    /// Config hash of the training dataset.
    data_hash: String,
    ablation: Ablation,
    feature_dim: usize,
}

fn data_hash(dataset: &Path) -> String {
    io::read_meta(dataset)
        .map(|m| m.config_hash)
        .unwrap_or_else(|_| "unknown".into())
}

fn write_checkpoint(
    out: &Path,
    cfg: &TrainConfig,
    state: &TrainState,
    k: f64,
    data_hash: &str,
    feature_dim: usize,
) -> anyhow::Result<()> {
    let hash = io::config_hash(cfg);
    for (name, params) in [("params_o.json", &state.params_o), ("params_n.json", &state.params_n)] {
        let mut params = params.clone();
        params.k = k;
        io::write_json(
            out.join(name),
            &ParamsFile {
                params,
                seed: cfg.seed,
                step: state.step,
                config_hash: hash.clone(),
                data_hash: data_hash.to_string(),
                ablation: cfg.ablation,
                feature_dim,
            },
        )?;
    }
    let state_path = out.join("train_state.json");
    io::write_json(&state_path, state)?;
    io::write_meta(&state_path, &meta("train-state", hash, cfg.seed))?;
    Ok(())
}

#[derive(Serialize)]
struct EpochRow<'a> {
    #[serde(flatten)]
    log: &'a EpochLog,
    config_hash: &'a str,
    seed: u64,
}

fn cmd_train(
    common: &Common,
    dataset: &Path,
    dict_path: &Path,
    scores_path: Option<&Path>,
    val: Option<&Path>,
    ablation: Option<Ablation>,
    resume_run: bool,
) -> anyhow::Result<()> {
    let mut cfg = train_config(common)?;
    if let Some(a) = ablation {
        cfg.ablation = a;
    }
    let instances = io::load_dataset(dataset)?;
    let dict: DescriptionDict = io::load_dictionary(dict_path)?;
    let embedder = embedder_for(&instances)?;
    let scores = match scores_path {
        Some(p) => {
            let rows: Vec<ScoreCacheRow> = io::read_jsonl(p)?;
            scores_from_cache(&instances, &rows)?
        }
        None => score_dataset(&instances, &dict, &embedder, Aggregation::Max)?,
    };
    let validation = val.map(io::load_dataset).transpose()?;
    let data = TrainData {
        instances: &instances,
        scores: &scores,
        dict: &dict,
        embedder: &embedder,
    };
    create_dir(&common.out)?;
    let config_path = common.out.join("config.json");
    io::write_json(&config_path, &cfg)?;
    io::write_meta(&config_path, &meta("train-config", io::config_hash(&cfg), cfg.seed))?;
    let feature_dim = embedder.dim();
    let trainer = if resume_run {
        let state: TrainState = io::read_json(common.out.join("train_state.json"))?;
        let saved: ParamsFile = io::read_json(common.out.join("params_o.json"))?;
        if saved.config_hash != io::config_hash(&cfg) {
            return Err(etc_core::Error::Config("resume config differs from the checkpointed run".into()).into());
        }
        Trainer::from_state(cfg.clone(), state, instances.len())?
    } else {
        Trainer::new(cfg.clone(), feature_dim, instances.len())?
    };
    let d_hash = data_hash(dataset);
    let c_hash = io::config_hash(&cfg);
    let epochs_path = common.out.join("epochs.jsonl");
    let mut epoch_rows: Vec<serde_json::Value> = if resume_run && epochs_path.exists() {
        io::read_jsonl(&epochs_path)?
    } else {
        Vec::new()
    };
    let mut last_good: Option<(TrainState, f64)> = None;
    let total = trainer.total_steps().max(2) - 1;
    let k_at = |step: u64| etc_core::optim::anneal(cfg.k_schedule.0, cfg.k_schedule.1, step as f64 / total as f64);
    let result = resume(trainer, &data, validation.as_deref(), &mut |log, state| {
        epoch_rows.push(serde_json::to_value(EpochRow {
            log,
            config_hash: &c_hash,
            seed: cfg.seed,
        })?);
        io::write_jsonl(&epochs_path, &epoch_rows)?;
        write_checkpoint(&common.out, &cfg, state, k_at(state.step), &d_hash, feature_dim)
            .map_err(|e| etc_core::Error::Config(e.to_string()))?;
        last_good = Some((state.clone(), k_at(state.step)));
        Ok(())
    });
    let outcome = match result {
        Ok(o) => o,
        Err(e @ etc_core::Error::NonFinite { .. }) => {
            if let Some((state, k)) = &last_good {
                write_checkpoint(&common.out, &cfg, state, *k, &d_hash, feature_dim)?;
            }
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let steps_path = common.out.join("steps.jsonl");
    let mut steps: Vec<serde_json::Value> = if resume_run && steps_path.exists() {
        io::read_jsonl(&steps_path)?
    } else {
        Vec::new()
    };
    for s in &outcome.steps {
        steps.push(serde_json::to_value(s)?);
    }
    io::write_jsonl(&steps_path, &steps)?;
    io::write_meta(&steps_path, &meta("train-steps", c_hash.clone(), cfg.seed))?;
    io::write_meta(&epochs_path, &meta("train-epochs", c_hash.clone(), cfg.seed))?;
    write_checkpoint(&common.out, &cfg, &outcome.state, outcome.params_o.k, &d_hash, feature_dim)?;
    if let Some(last) = outcome.epochs.last() {
        println!(
            "trained {} ({} steps); last epoch total loss {:.4}",
            cfg.ablation.name(),
            outcome.state.step,
            last.total
        );
    }
    Ok(())
}

/// Evaluation output file.
#[derive(Debug, Serialize, Deserialize)]
struct EvalFile {
    ablation: Ablation,
    report: EvalReport,
    config_hash: String,
    seed: u64,
    dataset_hash: String,
}

fn cmd_eval(
    common: &Common,
    dataset: &Path,
    checkpoint: &Path,
    dict: Option<&Path>,
    force: bool,
    bins: usize,
) -> anyhow::Result<()> {
    let instances = io::load_dataset(dataset)?;
    let po: ParamsFile = io::read_json(checkpoint.join("params_o.json"))?;
    let pn: ParamsFile = io::read_json(checkpoint.join("params_n.json"))?;
    let ds_hash = data_hash(dataset);
    if !force && ds_hash != po.data_hash {
        return Err(etc_core::Error::Data(format!(
            "dataset {} (config {ds_hash}) does not match the checkpoint's training data (config {}); pass --force to evaluate anyway",
            dataset.display(),
            po.data_hash
        ))
        .into());
    }
    let feature_dim = instances.first().map_or(0, |i| i.feature_dim());
    if feature_dim != po.feature_dim {
        return Err(etc_core::Error::Data(format!(
            "dataset features have dim {feature_dim}, checkpoint expects {}",
            po.feature_dim
        ))
        .into());
    }
    let cfg: TrainConfig = io::read_json(checkpoint.join("config.json"))?;
    let branch = cfg.infer_branch;
    let dict = dict.map(io::load_dictionary).transpose()?;
    let embedder = embedder_for(&instances)?;
    let ctx = dict.as_ref().map(|d| ExpansionContext {
        dict: d,
        embedder: &embedder,
        cfg: &cfg.expansion,
        seed: po.seed,
    });
    let preds = infer(&instances, &po.params, &pn.params, branch, ctx.as_ref())?;
    let gts = ground_truths(&instances)?;
    let report = evaluate(&preds, &gts, &cfg.thresholds, bins)?;
    create_dir(&common.out)?;
    io::write_json(
        common.out.join("eval.json"),
        &EvalFile {
            ablation: po.ablation,
            report: report.clone(),
            config_hash: po.config_hash.clone(),
            seed: po.seed,
            dataset_hash: ds_hash,
        },
    )?;
    if let Some(h) = &report.histogram {
        let path = common.out.join("histogram.csv");
        std::fs::write(&path, h.to_csv()).context("writing histogram.csv")?;
        io::write_meta(&path, &meta("histogram", po.config_hash.clone(), po.seed))?;
    }
    print!("{}", report.table(po.ablation.label()));
    Ok(())
}

#[derive(Serialize)]
struct OracleRow {
    video_id: String,
    kind: ScoreKind,
    center: f64,
    width: f64,
    loss: f64,
}

fn cmd_oracle(common: &Common, dataset: &Path, scores: &Path, grid: usize) -> anyhow::Result<()> {
    let instances = io::load_dataset(dataset)?;
    let rows: Vec<ScoreCacheRow> = io::read_jsonl(scores)?;
    let scores = scores_from_cache(&instances, &rows)?;
    let w = train_config(common)?.weights;
    let mut out = Vec::with_capacity(2 * instances.len());
    for (inst, s) in instances.iter().zip(&scores) {
        for seq in [&s.qdm, &s.qfm] {
            let b = oracle_boundary(seq, grid, w.tau, w.delta_pcl);
            out.push(OracleRow {
                video_id: inst.video_id.clone(),
                kind: seq.kind,
                center: b.center,
                width: b.width,
                loss: hard_pcl_loss(b, &seq.scores, w.tau, w.delta_pcl, &inst.timeline()),
            });
        }
    }
    create_dir(&common.out)?;
    let path = common.out.join("oracle.jsonl");
    io::write_jsonl(&path, &out)?;
    io::write_meta(&path, &meta("oracle", io::config_hash(&(grid, w)), common.seed.unwrap_or(0)))?;
    println!("wrote {} oracle boundaries to {}", out.len(), path.display());
    Ok(())
}

fn cmd_report(common: &Common, runs: &[PathBuf]) -> anyhow::Result<()> {
    let mut reports = Vec::new();
    let mut sources = Vec::new();
    for r in runs {
        let path = if r.is_dir() { r.join("eval.json") } else { r.clone() };
        let f: EvalFile = io::read_json(&path)?;
        sources.push((f.config_hash, f.seed));
        reports.push((f.ablation, f.report));
    }
    let table = report::ablation_table(&reports)?;
    create_dir(&common.out)?;
    let path = common.out.join("report.md");
    std::fs::write(&path, &table).context("writing report.md")?;
    // The table spans runs: hash every run's config and seed, and record the
    // first run's seed.
    let seed = sources.first().map_or(0, |s| s.1);
    io::write_meta(&path, &meta("report", io::config_hash(&sources), seed))?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData { common, name, n } => {
            setup_threads(common.threads)?;
            cmd_gen_data(common, name, *n)
        }
        Command::BuildDict {
            common,
            dataset,
            truth,
            replay,
            caption_endpoint,
            name,
        } => {
            setup_threads(common.threads)?;
            cmd_build_dict(
                common,
                dataset,
                truth.as_deref(),
                replay.as_deref(),
                caption_endpoint.as_deref(),
                name,
            )
        }
        Command::Score {
            common,
            dataset,
            dict,
            aggregation,
            name,
        } => {
            setup_threads(common.threads)?;
            cmd_score(common, dataset, dict, aggregation, name)
        }
        Command::Train {
            common,
            dataset,
            dict,
            scores,
            val,
            ablation,
            resume,
        } => {
            setup_threads(common.threads)?;
            cmd_train(common, dataset, dict, scores.as_deref(), val.as_deref(), *ablation, *resume)
        }
        Command::Eval {
            common,
            dataset,
            checkpoint,
            dict,
            force,
            bins,
        } => {
            setup_threads(common.threads)?;
            cmd_eval(common, dataset, checkpoint, dict.as_deref(), *force, *bins)
        }
        Command::Oracle {
            common,
            dataset,
            scores,
            grid,
        } => {
            setup_threads(common.threads)?;
            cmd_oracle(common, dataset, scores, *grid)
        }
        Command::Report { common, runs } => cmd_report(common, runs),
    }
}

fn diagnostic(err: &anyhow::Error) -> serde_json::Value {
    let kind = match err.downcast_ref::<etc_core::Error>() {
        Some(etc_core::Error::Config(_)) => "config",
        Some(etc_core::Error::Data(_)) => "data",
        Some(etc_core::Error::Diff(_)) => "numeric",
        Some(etc_core::Error::Io { .. }) => "io",
        Some(etc_core::Error::Json(_)) => "json",
        Some(etc_core::Error::MissingEntries { .. }) => "missing-entries",
        Some(etc_core::Error::Provider(_)) => "provider",
        Some(etc_core::Error::NonFinite { .. }) => "non-finite",
        None => "error",
    };
    // Library errors already print their source, so skip chain links that
    // repeat the previous message.
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    let mut v = serde_json::json!({ "error": kind, "message": parts.join(": ") });
    match err.downcast_ref::<etc_core::Error>() {
        Some(etc_core::Error::MissingEntries { missing }) => v["missing"] = serde_json::json!(missing),
        Some(etc_core::Error::NonFinite { term, step }) => {
            v["term"] = serde_json::json!(term);
            v["step"] = serde_json::json!(step);
        }
        _ => {}
    }
    v
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{}", diagnostic(&e));
            ExitCode::from(3)
        }
    }
}
