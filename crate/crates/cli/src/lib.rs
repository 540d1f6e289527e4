//! Headless access to the ncdkit pipeline.
//!
//! Config files use the same JSON shapes as the HTTP bodies, plus the
//! dataset path and output location.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ncdkit_core::dataset::{load_csv, Dataset, SelectionState};
use ncdkit_core::nn::Mlp;
use ncdkit_core::pipeline::{
    explain_run, restore_run, run_model, tsne_input, tsne_payload, ModelConfig, ModelKind, RunResult, RunSummary,
    TsneJob,
};
use ncdkit_core::progress::NoProgress;
use ncdkit_core::projection::{content_digest, tsne_fit, TsneSource};
use ncdkit_core::rules::{RenderFormat, RuleTreeConfig, TreeMode};
use ncdkit_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Parser)]
#[command(name = "ncdkit", version, about = "Novel class discovery workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inspect a CSV file.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model or run a clustering from a config file.
    Run(RunArgs),
    /// Fit explanation trees for a saved result.
    Rules(RulesArgs),
    /// Compute a t-SNE plot payload from a config file.
    Tsne(TsneArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Print the schema and, with --target, the class values.
    Info {
        path: PathBuf,
        #[arg(long)]
        target: Option<String>,
        /// The first line is data, not column names.
        #[arg(long)]
        no_header: bool,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub config: PathBuf,
    /// Output directory; overrides the config file.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Overrides the config file seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RulesArgs {
    pub result_dir: PathBuf,
    #[arg(long, default_value = "text")]
    pub format: RenderFormat,
    /// One tree per label instead of one multi-class tree.
    #[arg(long)]
    pub one_vs_rest: bool,
    #[arg(long, default_value_t = 4, conflicts_with = "unlimited")]
    pub max_depth: usize,
    #[arg(long)]
    pub unlimited: bool,
    #[arg(long, default_value_t = 1)]
    pub min_samples_leaf: usize,
    /// Directory receiving one file per tree; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TsneArgs {
    pub config: PathBuf,
    /// Payload file; overrides the config file. Stdout when neither is set.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "NCDKIT_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "NCDKIT_HOST", default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
    /// Write every result to this directory as well.
    #[arg(long)]
    pub results_dir: Option<PathBuf>,
}

/// A failed command: process exit code plus a diagnostic.
#[derive(Debug)]
pub struct Failure {
    pub exit_code: u8,
    pub code: String,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            exit_code: 2,
            code: "Usage".into(),
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            exit_code: 3,
            code: "Io".into(),
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let exit_code = match e {
            Error::DivergedError(_)
            | Error::Checkpoint(_)
            | Error::ShapeError(_)
            | Error::UnknownHead(_)
            | Error::Cancelled => 3,
            _ => 2,
        };
        Self {
            exit_code,
            code: e.code().into(),
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

pub fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Dataset(DatasetCommand::Info { path, target, no_header }) => dataset_info(&path, target, !no_header),
        Command::Run(args) => run(args),
        Command::Rules(args) => rules(args),
        Command::Tsne(args) => tsne(args),
        Command::Serve(args) => serve(args),
    }
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable output");
    s.push('\n');
    s
}

/// Loads a CSV and names it by its content digest so outputs do not
/// depend on a random id.
fn load_dataset(path: &Path, header: bool) -> CliResult<(Dataset, String)> {
    let bytes = read_file(path)?;
    let digest = content_digest(&bytes);
    let mut ds = load_csv(&bytes, header)?;
    ds.id = format!("sha256:{digest}");
    Ok((ds, digest))
}

fn dataset_info(path: &Path, target: Option<String>, header: bool) -> CliResult<()> {
    let (ds, digest) = load_dataset(path, header)?;
    let mut out = serde_json::json!({
        "path": path,
        "sha256": digest,
        "n_rows": ds.row_count(),
        "schema": ds.schema,
    });
    if let Some(target) = target {
        let classes: Vec<Value> = ds
            .list_class_values(&target)?
            .into_iter()
            .map(|(value, count)| serde_json::json!({"value": value, "count": count}))
            .collect();
        out["target"] = target.into();
        out["classes"] = classes.into();
    }
    print!("{}", to_json(&out));
    Ok(())
}

fn yes() -> bool {
    true
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    dataset: PathBuf,
    #[serde(default = "yes")]
    header: bool,
    kind: String,
    selection: SelectionState,
    #[serde(default = "empty_object")]
    config: Value,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    output: Option<PathBuf>,
}

/// Where a result directory's data came from.
#[derive(Debug, Serialize, Deserialize)]
struct SourceFile {
    dataset: PathBuf,
    header: bool,
    sha256: String,
}

fn parse_config<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::BadConfig(format!("{}: {e}", path.display())).into())
}

/// Resolves `p` against the directory holding the config file.
fn relative_to(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    config.parent().unwrap_or(Path::new(".")).join(p)
}

fn run(args: RunArgs) -> CliResult<()> {
    let cfg: RunConfig = parse_config(&args.config)?;
    let kind: ModelKind = cfg.kind.parse()?;
    let model_cfg = ModelConfig::parse(kind, &cfg.config, args.seed.or(cfg.seed))?;
    let out = args
        .output
        .or_else(|| cfg.output.as_ref().map(|o| relative_to(&args.config, o)))
        .ok_or_else(|| Failure::usage("no output directory: set \"output\" in the config or pass --output"))?;
    let dataset_path = relative_to(&args.config, &cfg.dataset);
    let (ds, digest) = load_dataset(&dataset_path, cfg.header)?;
    let mut selection = cfg.selection;
    selection.dataset_id = ds.id.clone();
    selection.validate(&ds)?;
    let result = run_model(&ds, &selection, &model_cfg, &NoProgress)?;

    fs::create_dir_all(&out).map_err(|e| Failure::io(format!("cannot create {}: {e}", out.display())))?;
    let mut labels = String::from("row,cluster\n");
    for (row, label) in result.unknown_rows.iter().zip(&result.unknown_labels) {
        labels.push_str(&format!("{row},{label}\n"));
    }
    write_file(&out.join("labels.csv"), labels)?;
    write_file(&out.join("metrics.json"), to_json(&result.metrics))?;
    if let Some(history) = &result.history {
        write_file(&out.join("history.json"), to_json(history))?;
    }
    write_file(&out.join("summary.json"), to_json(&result.summary()))?;
    if let Some(model) = &result.model {
        write_file(&out.join("model.json"), model.to_checkpoint())?;
    }
    let absolute = fs::canonicalize(&dataset_path).unwrap_or(dataset_path);
    let source = SourceFile {
        dataset: absolute,
        header: cfg.header,
        sha256: digest,
    };
    write_file(&out.join("source.json"), to_json(&source))?;
    eprintln!(
        "{}: acc={:.4} nmi={:.4} ari={:.4} -> {}",
        kind.as_str(),
        result.metrics.acc,
        result.metrics.nmi,
        result.metrics.ari,
        out.display()
    );
    Ok(())
}

/// Reloads a result directory written by `run`, checking that the dataset
/// file is unchanged.
fn load_result_dir(dir: &Path) -> CliResult<(Dataset, RunResult)> {
    let source: SourceFile = parse_config(&dir.join("source.json"))?;
    let summary: RunSummary = parse_config(&dir.join("summary.json"))?;
    let (ds, digest) = load_dataset(&source.dataset, source.header)?;
    if digest != source.sha256 {
        return Err(Error::StaleResult(format!("{} changed since the run", source.dataset.display())).into());
    }
    let model_path = dir.join("model.json");
    let model = if model_path.exists() {
        let text = String::from_utf8(read_file(&model_path)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Some(Mlp::from_checkpoint(&text)?)
    } else {
        None
    };
    let run = restore_run(&ds, &summary, model)?;
    Ok((ds, run))
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn rules(args: RulesArgs) -> CliResult<()> {
    let (ds, run) = load_result_dir(&args.result_dir)?;
    let cfg = RuleTreeConfig {
        max_depth: (!args.unlimited).then_some(args.max_depth),
        min_samples_leaf: args.min_samples_leaf,
        mode: if args.one_vs_rest { TreeMode::OneVsRest } else { TreeMode::MultiClass },
    };
    let doc = explain_run(&ds, &run.summary(), &cfg)?;
    let rendered: BTreeMap<&String, String> = doc
        .trees
        .iter()
        .map(|(name, t)| {
            let body = match args.format {
                RenderFormat::Text => t.text.clone(),
                RenderFormat::Structured => to_json(&t.tree),
            };
            (name, body)
        })
        .collect();
    match &args.output {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Failure::io(format!("cannot create {}: {e}", dir.display())))?;
            let ext = match args.format {
                RenderFormat::Text => "txt",
                RenderFormat::Structured => "json",
            };
            for (name, body) in &rendered {
                write_file(&dir.join(format!("{}.{ext}", file_stem(name))), body)?;
            }
        }
        None if rendered.len() == 1 => print!("{}", rendered.values().next().expect("one tree")),
        None => {
            for (name, body) in &rendered {
                println!("# {name}");
                print!("{body}");
            }
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct TsneConfig {
    dataset: PathBuf,
    #[serde(default = "yes")]
    header: bool,
    #[serde(default)]
    output: Option<PathBuf>,
    #[serde(flatten)]
    job: TsneJob,
}

/// Latent sources and `color_by` name result directories written by `run`.
fn tsne(args: TsneArgs) -> CliResult<()> {
    let cfg: TsneConfig = parse_config(&args.config)?;
    let (ds, _) = load_dataset(&relative_to(&args.config, &cfg.dataset), cfg.header)?;
    let mut job = cfg.job;
    job.selection.dataset_id = ds.id.clone();
    if let Some(seed) = args.seed {
        job.seed = seed;
    }
    let load = |name: &str| -> CliResult<RunResult> {
        let (other, run) = load_result_dir(&relative_to(&args.config, Path::new(name)))?;
        if other.id != ds.id {
            return Err(Error::StaleResult(format!("result {name:?} was computed on another dataset")).into());
        }
        Ok(run)
    };
    let model = match &job.source {
        TsneSource::Latent { model_id } => Some(load(model_id)?),
        TsneSource::RawFeatures => None,
    };
    let clusters = job.color_by.as_deref().map(load).transpose()?;
    let (req, x, rows) = tsne_input(&ds, &job, model.as_ref())?;
    let embedding = tsne_fit(&x, &rows, &req)?;
    let payload = tsne_payload(&ds, &embedding, &job.selection, clusters.as_ref())?;
    let text = to_json(&payload);
    match args.output.or_else(|| cfg.output.map(|o| relative_to(&args.config, &o))) {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Failure::io(format!("cannot create {}: {e}", parent.display())))?;
            }
            write_file(&path, text)?;
            eprintln!("{} points -> {}", payload.points.len(), path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn serve(args: ServeArgs) -> CliResult<()> {
    let config = ncdkit_service::ServiceConfig {
        workers: args.workers,
        persist_dir: args.results_dir,
        ..Default::default()
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::io(e.to_string()))?;
    runtime
        .block_on(ncdkit_service::serve(SocketAddr::new(args.host, args.port), config))
        .map_err(|e| Failure::io(format!("server error: {e}")))
}
