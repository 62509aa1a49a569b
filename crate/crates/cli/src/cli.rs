use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use capsule_core::checkpoint::Checkpoint;
use capsule_core::data::{
    generate_synthetic, load_polyvore, make_retrieval_queries, write_polyvore, DatasetSplit, LoadOptions, SplitName,
};
use capsule_core::eval::{evaluate_cp, evaluate_fitb, recall_at_k, EvalReport};
use capsule_core::index::EmbeddingIndex;
use capsule_core::model::ModelConfig;
use capsule_core::training::{CirInit, EpochRecord, TrainConfig, Trainer};
use capsule_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::service::{self, ServiceState, Snapshot};

#[derive(Parser, Debug)]
#[command(
    name = "capsule",
    version,
    about = "Outfit compatibility scoring and complementary-item retrieval"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset with planted styles.
    GenerateSynthetic(GenerateArgs),
    /// Train a model.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Embed every catalog item with a retrieval checkpoint.
    BuildIndex(BuildIndexArgs),
    /// Evaluate a checkpoint and print a JSON report.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file; only its `[synthetic]` section is read.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CommonTrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Best-validation model checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Resumable training state; defaults to `<out>.state`.
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Continue from a training-state checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Also append epoch records to this file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum TrainCommand {
    /// Compatibility pre-training.
    Cp(CommonTrainArgs),
    /// Retrieval fine-tuning.
    Cir {
        #[command(flatten)]
        common: CommonTrainArgs,
        /// Pre-trained compatibility checkpoint, or `scratch`.
        #[arg(long, default_value = "scratch")]
        init: String,
    },
}

#[derive(Args, Debug)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTask {
    Cp,
    Fitb,
    Cir,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Valid,
    Test,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Valid => SplitName::Valid,
            SplitArg::Test => SplitName::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(value_enum)]
    pub task: EvalTask,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Prebuilt index for `cir`; built in memory when absent.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Cutoffs for `cir`.
    #[arg(long, value_delimiter = ',', default_values_t = vec![10, 30, 50])]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Retrieval checkpoint that built the index.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Compatibility checkpoint; the retrieval checkpoint is used when it
    /// carries a compatibility head.
    #[arg(long)]
    pub cp_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Writes one stdout line; a closed pipe on the reader side is not an error.
fn emit(line: &str) -> std::io::Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}").and_then(|()| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => other,
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateSynthetic(a) => generate(a),
        Command::Train(TrainCommand::Cp(a)) => train(a, None),
        Command::Train(TrainCommand::Cir { common, init }) => train(common, Some(init)),
        Command::BuildIndex(a) => build_index(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let split = generate_synthetic(&cfg.synthetic, args.seed)?;
    write_polyvore(&split, &args.out)?;
    let summary = json!({
        "out": args.out,
        "items": split.catalog.len(),
        "train": split.train.len(),
        "valid": split.valid.len(),
        "test": split.test.len(),
    });
    Ok(emit(&summary.to_string())?)
}

fn load_data(dir: &Path, cfg: &RunConfig, model: &ModelConfig, seed: u64) -> anyhow::Result<DatasetSplit> {
    let options = LoadOptions {
        max_outfit_len: Some(cfg.data.max_outfit_len.unwrap_or(model.encoder.max_outfit_len)),
        seed,
    };
    Ok(load_polyvore(dir, cfg.data.disjoint, &options)?)
}

fn train_config(cfg: &RunConfig, args: &CommonTrainArgs, cir: bool) -> TrainConfig {
    let mut t = cfg.train.clone();
    if let Some(s) = args.seed {
        t.seed = s;
    }
    if let Some(e) = args.epochs {
        if cir {
            t.epochs_cir = e;
        } else {
            t.epochs_cp = e;
        }
    }
    if let Some(lr) = args.lr {
        t.lr_initial = lr;
    }
    if let Some(b) = args.batch_size {
        t.batch_size = b;
    }
    t
}

fn state_path(args: &CommonTrainArgs) -> PathBuf {
    args.state.clone().unwrap_or_else(|| sibling(&args.out, "state"))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn train(args: CommonTrainArgs, init: Option<String>) -> anyhow::Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let cir = init.is_some();
    let tcfg = train_config(&cfg, &args, cir);
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let pretrained = match init.as_deref() {
        Some("scratch") | None => None,
        Some(path) => Some(Checkpoint::load(Path::new(path))?),
    };
    let model_cfg = match (&resume, &pretrained) {
        (Some(c), _) | (None, Some(c)) => c.config.clone(),
        (None, None) => cfg.model.clone(),
    };
    let data = load_data(&args.data, &cfg, &model_cfg, tcfg.seed)?;

    let mut trainer = match (&resume, &pretrained) {
        (Some(state), _) => Trainer::resume(state, &data)?,
        (None, Some(ckpt)) => Trainer::cir(CirInit::Pretrained(ckpt), tcfg, &data)?,
        (None, None) if cir => Trainer::cir(CirInit::Scratch(model_cfg), tcfg, &data)?,
        (None, None) => Trainer::cp(model_cfg, tcfg, &data)?,
    };
    if resume.is_some() && (trainer.phase() == capsule_core::training::Phase::Cir) != cir {
        bail!("resume state belongs to the other training phase");
    }
    if let Some(hash) = trainer.transferred_trunk_hash() {
        eprintln!("transferred trunk verified, hash {hash}");
    }

    let mut metrics = match &args.metrics {
        Some(p) => Some(
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .with_context(|| format!("opening {}", p.display()))?,
        ),
        None => None,
    };
    let mut sink_error = None;
    let outcome = trainer.run(|record: &EpochRecord| {
        let line = serde_json::to_string(record).expect("record serializes");
        if let Err(e) = emit(&line) {
            sink_error.get_or_insert(e);
        }
        if let Some(f) = metrics.as_mut() {
            if let Err(e) = writeln!(f, "{line}") {
                sink_error.get_or_insert(e);
            }
        }
    });
    if let Err(e) = outcome {
        if let Error::Diverged { epoch, step, detail } = &e {
            let dump = sibling(&args.out, "divergence.json");
            let state = sibling(&args.out, "divergence.state");
            trainer.state_checkpoint().save(&state)?;
            let body = json!({
                "error": e.to_string(),
                "epoch": epoch,
                "step": step,
                "detail": detail,
                "lr": trainer.config().lr_at(*epoch),
                "config": trainer.config(),
                "history": trainer.history(),
                "state_checkpoint": state,
            });
            fs::write(&dump, serde_json::to_string_pretty(&body)?)
                .with_context(|| format!("writing {}", dump.display()))?;
            bail!("{e}; diagnostics written to {}", dump.display());
        }
        return Err(e.into());
    }
    if let Some(e) = sink_error {
        return Err(anyhow::Error::new(e).context("writing metrics"));
    }
    trainer.best_checkpoint().save(&args.out)?;
    trainer.state_checkpoint().save(&state_path(&args))?;
    Ok(())
}

fn build_index(args: BuildIndexArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.to_model()?;
    if !model.heads().cir {
        bail!(
            "{} has no retrieval head; train it with `train cir`",
            args.checkpoint.display()
        );
    }
    let data = load_data(&args.data, &cfg, &ckpt.config, 0)?;
    let index = EmbeddingIndex::build(&data.catalog, &model)?;
    index.save(&args.out)?;
    let summary = json!({
        "out": args.out,
        "items": index.len(),
        "dim": index.dim(),
        "bytes": index.table_bytes(),
        "fingerprint": index.fingerprint(),
    });
    Ok(emit(&summary.to_string())?)
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.to_model()?;
    let data = load_data(&args.data, &cfg, &ckpt.config, args.seed)?;
    let split: SplitName = args.split.into();
    let report: EvalReport = match args.task {
        EvalTask::Cp => {
            let outfits = data
                .compatibility
                .get(&split)
                .with_context(|| format!("{} has no {split} compatibility set", args.data.display()))?;
            evaluate_cp(&model, &data.catalog, outfits, args.seed)?
        }
        EvalTask::Fitb => {
            let questions = data
                .fitb
                .get(&split)
                .with_context(|| format!("{} has no {split} fill-in-the-blank questions", args.data.display()))?;
            evaluate_fitb(&model, &data.catalog, questions, args.seed)?
        }
        EvalTask::Cir => {
            let index = match &args.index {
                Some(p) => {
                    let index = EmbeddingIndex::load(p)?;
                    index.check_fingerprint(&model.fingerprint())?;
                    index
                }
                None => EmbeddingIndex::build(&data.catalog, &model)?,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let queries = make_retrieval_queries(data.outfits(split), &data.catalog, &mut rng)?;
            recall_at_k(&model, &index, &data.catalog, &queries, &args.k, args.seed)?
        }
    };
    let text = report.to_json();
    if let Some(out) = &args.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(emit(&text)?)
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let retrieval = ckpt.to_model()?;
    let compatibility = match &args.cp_checkpoint {
        Some(p) => Some(Checkpoint::load(p)?.to_model()?),
        None if retrieval.heads().cp => Some(retrieval.clone()),
        None => None,
    };
    let index = EmbeddingIndex::load(&args.index)?;
    let data = load_data(&args.data, &cfg, &ckpt.config, 0)?;

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let addr: SocketAddr = format!("{}:{}", args.host, args.port)
            .parse()
            .with_context(|| format!("invalid address {}:{}", args.host, args.port))?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let bound = listener.local_addr()?;
        emit(&format!("listening on http://{bound}"))?;

        let state = Arc::new(ServiceState::new());
        let loading = state.clone();
        tokio::task::spawn_blocking(
            move || match Snapshot::new(retrieval, compatibility, index, data.catalog) {
                Ok(s) => {
                    log::info!("snapshot verified, fingerprint {}", s.fingerprint());
                    loading.install(s);
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    std::process::exit(1);
                }
            },
        );
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
