use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tab_core::intervene::{intervention_report, Protocol};
use tab_core::metrics::{evaluate, upscale_nearest, EvalReport};
use tab_core::model::{load_checkpoint, save_checkpoint, ModelConfig, RowOverride};
use tab_core::synthdata::{generate_dataset, read_dataset, write_dataset, DatasetSpec, ScenePair, Split};
use tab_core::training::{train_stage1, train_stage2, write_metrics_line, TrainRecipe};
use tab_core::{Model32, Result, TabError};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tracing::info;

use crate::api::{router, AppState};
use crate::pgm;

#[derive(Debug, Parser)]
#[command(name = "tab", version, about = "Change captioning through a gated attention bottleneck")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic pair dataset.
    GenData(GenData),
    /// Run one training stage.
    Train(Train),
    /// Score a checkpoint on the validation and test splits.
    Eval(Eval),
    /// Apply an attention-editing protocol to the test split.
    Intervene(Intervene),
    /// Write the upsampled attention map of one sample as a binary PGM.
    Viz(Viz),
    /// Serve the HTTP API.
    Serve(Serve),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub no_change_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long, value_enum)]
    pub stage: Stage,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; defaults to the toy recipe of the chosen stage.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to continue from (for example a stage-1 result).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines file receiving one line per epoch.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProtocolArg {
    Zero,
    Correct,
}

#[derive(Debug, Args)]
pub struct Intervene {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_enum)]
    pub protocol: ProtocolArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SideArg {
    /// Element-wise maximum of both sides.
    Both,
    First,
    Second,
}

#[derive(Debug, Args)]
pub struct Viz {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sample: u32,
    #[arg(long, value_enum, default_value = "both")]
    pub side: SideArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, env = "TAB_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Precomputed evaluation report served at /api/report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Allowed CORS origin; any origin when omitted.
    #[arg(long)]
    pub cors_origin: Option<String>,
}

/// Contents of `train --config`; every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub recipe: Option<TrainRecipe>,
    /// Parameter initialisation seed, ignored with `--init`.
    pub seed: u64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(fs::write(path, text)?)
}

fn load_model(path: &Path) -> Result<Model32> {
    load_checkpoint(path)
}

fn split_of(pairs: &[ScenePair], split: Split) -> Vec<ScenePair> {
    pairs.iter().filter(|p| p.split == split).cloned().collect()
}

pub fn gen_data(args: &GenData) -> Result<()> {
    let pairs = generate_dataset(&DatasetSpec::new(args.pairs, args.seed, args.no_change_ratio))?;
    write_dataset(&pairs, &args.out)?;
    info!(pairs = pairs.len(), out = %args.out.display(), "dataset written");
    Ok(())
}

pub fn train(args: &Train) -> Result<()> {
    let config: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    let recipe = config.recipe.clone().unwrap_or_else(|| match args.stage {
        Stage::One => TrainRecipe::toy_stage1(),
        Stage::Two => TrainRecipe::toy_stage2(),
    });
    let mut model = match &args.init {
        Some(p) => load_model(p)?,
        None => Model32::new(config.model.clone(), config.seed)?,
    };
    let train = split_of(&read_dataset(&args.data)?, Split::Train);
    if train.is_empty() {
        return Err(TabError::Config(format!("{} has no training pairs", args.data.display())));
    }
    let mut sink: Box<dyn std::io::Write> = match &args.metrics {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stderr()),
    };
    let mut log = |m: &tab_core::training::EpochMetrics| write_metrics_line(sink.as_mut(), m);
    match args.stage {
        Stage::One => train_stage1(&mut model, &train, &recipe, &mut log)?,
        Stage::Two => train_stage2(&mut model, &train, &recipe, &mut log)?,
    };
    save_checkpoint(&model, &args.out)?;
    info!(out = %args.out.display(), "checkpoint written");
    Ok(())
}

pub fn eval(args: &Eval) -> Result<EvalReport> {
    let model = load_model(&args.ckpt)?;
    let report = evaluate(&model, &read_dataset(&args.data)?)?;
    write_json(&args.report, &report)?;
    Ok(report)
}

pub fn intervene(args: &Intervene) -> Result<()> {
    let model = load_model(&args.ckpt)?;
    let test = split_of(&read_dataset(&args.data)?, Split::Test);
    let protocol = match args.protocol {
        ProtocolArg::Zero => Protocol::Zero,
        ProtocolArg::Correct => Protocol::Correct,
    };
    let report = intervention_report(&model, &test.iter().collect::<Vec<_>>(), protocol)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(p) = &args.report {
        write_json(p, &report)?;
    }
    Ok(())
}

pub fn viz(args: &Viz) -> Result<()> {
    let model = load_model(&args.ckpt)?;
    let data = read_dataset(&args.data)?;
    let pair = data
        .iter()
        .find(|p| p.id == args.sample)
        .ok_or_else(|| TabError::Config(format!("no sample with id {}", args.sample)))?;
    let out = model.forward_pair(&pair.image_a, &pair.image_b, &RowOverride::none())?;
    let patches = match args.side {
        SideArg::Both => out.state.combined_patch_attention(),
        SideArg::First => out.state.sides[0].patch_attention().to_vec(),
        SideArg::Second => out.state.sides[1].patch_attention().to_vec(),
    };
    let map = upscale_nearest(&patches, pair.image_a.height, pair.image_a.width)?;
    fs::write(&args.out, pgm::encode_heatmap(&map))?;
    println!("{}", out.caption);
    Ok(())
}

pub async fn serve(args: &Serve) -> Result<()> {
    let model = load_model(&args.ckpt)?;
    let pairs = read_dataset(&args.data)?;
    let report = args.report.as_deref().map(read_json).transpose()?;
    let state = AppState::new(model, pairs, report)?;
    let cors = match &args.cors_origin {
        Some(origin) => {
            let value = origin.parse().map_err(|_| TabError::Config(format!("invalid CORS origin {origin:?}")))?;
            CorsLayer::permissive().allow_origin(AllowOrigin::exact(value))
        }
        None => CorsLayer::permissive(),
    };
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|_| TabError::Config(format!("invalid address {}:{}", args.host, args.port)))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state, cors))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Runs a parsed command; the caller maps errors to exit code 1.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => {
            let report = eval(&a)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Intervene(a) => intervene(&a),
        Command::Viz(a) => viz(&a),
        Command::Serve(a) => tokio::runtime::Runtime::new()?.block_on(serve(&a)),
    }
}
