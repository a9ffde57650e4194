mod commands;
mod config;
mod spec_file;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use noisylab::noisegen::{NoisySpec, DEFAULT_TAU_OPEN};
use noisylab::trainer::{BlobsConfig, Protocol};

use config::{
    AblateConfig, ContainerFormat, ConvertCheckConfig, DataSource, EvalConfig, GenConfig, GmmInput, GmmInspectConfig,
    PoolFormat, PoolSource, RunConfig, TrainConfig, RUN_FILE,
};
use spec_file::SpecFile;

#[derive(Parser)]
#[command(
    name = "noisylab",
    version,
    about = "Noisy-label dataset synthesis, evaluation and label correction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a noisy dataset from image pools and word embeddings.
    Gen(GenArgs),
    /// Parse a container and report its contents.
    ConvertCheck(ConvertCheckArgs),
    /// Warmup, stage 1, then filtered soft-label correction on one dataset.
    Train(TrainArgs),
    /// Accuracy, mAP and the cumulative difference curve for saved scores.
    Eval(EvalArgs),
    /// Provenance ablation table over several seeds.
    Ablate(AblateArgs),
    /// Fit the two-component mixture to values or prediction entropies.
    GmmInspect(GmmInspectArgs),
    /// Replay a run from its run.json.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct GenArgs {
    /// key=value spec file; flags given here override its values.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Word vectors, one `token v1 v2 ...` per line.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Base categories in pool class order.
    #[arg(long)]
    base_categories: Option<PathBuf>,
    /// Open source categories in pool class order.
    #[arg(long)]
    open_categories: Option<PathBuf>,
    #[arg(long = "base-pool")]
    base_pools: Vec<PathBuf>,
    /// Default cifar100.
    #[arg(long, value_enum)]
    base_format: Option<PoolFormat>,
    #[arg(long = "open-pool")]
    open_pools: Vec<PathBuf>,
    /// Default cifar100.
    #[arg(long, value_enum)]
    open_format: Option<PoolFormat>,
    /// Open-noise rate.
    #[arg(long)]
    x: Option<f64>,
    /// Closed-noise rate.
    #[arg(long)]
    y: Option<f64>,
    /// Examples per category.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau_open: Option<f64>,
    /// Default 0.
    #[arg(long, env = "NOISYLAB_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ConvertCheckArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "ric")]
    format: ContainerFormat,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Training container; the blobs fixture is used when absent.
    #[arg(long, requires = "test")]
    data: Option<PathBuf>,
    /// Test container with clean labels.
    #[arg(long, requires = "data")]
    test: Option<PathBuf>,
    /// Provenance manifest of the training container.
    #[arg(long, requires = "data")]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    fixture_seed: u64,
    #[arg(long)]
    open_rate: Option<f64>,
    #[arg(long)]
    closed_rate: Option<f64>,
}

impl DataArgs {
    fn resolve(self) -> DataSource {
        match self.data {
            Some(train) => DataSource::Container {
                train,
                manifest: self.manifest,
                test: self.test.expect("clap enforces --test"),
            },
            None => {
                let d = BlobsConfig::default();
                DataSource::Fixture(BlobsConfig {
                    seed: self.fixture_seed,
                    open_rate: self.open_rate.unwrap_or(d.open_rate),
                    closed_rate: self.closed_rate.unwrap_or(d.closed_rate),
                    ..d
                })
            }
        }
    }
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long)]
    hidden: Option<usize>,
    /// Warmup epochs with the backbone frozen.
    #[arg(long)]
    u: Option<usize>,
    /// Warmup epochs updating everything.
    #[arg(long)]
    v: Option<usize>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Stage-2 epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    decay_epoch: Option<usize>,
    #[arg(long)]
    stage2_lr: Option<f64>,
    #[arg(long)]
    soft_lr: Option<f64>,
    #[arg(long)]
    init_from_predictions: bool,
}

impl ProtocolArgs {
    fn resolve(self) -> Protocol {
        let mut p = Protocol::default();
        p.hidden = self.hidden.unwrap_or(p.hidden);
        p.warmup.u = self.u.unwrap_or(p.warmup.u);
        p.warmup.v = self.v.unwrap_or(p.warmup.v);
        p.stage1_epochs = self.stage1_epochs.unwrap_or(p.stage1_epochs);
        p.opt.lr = self.lr.unwrap_or(p.opt.lr);
        p.opt.batch_size = self.batch_size.unwrap_or(p.opt.batch_size);
        p.opt.weight_decay = self.weight_decay.unwrap_or(p.opt.weight_decay);
        p.schedule.epochs = self.epochs.unwrap_or(p.schedule.epochs);
        p.schedule.decay_epoch = self.decay_epoch.unwrap_or(p.schedule.decay_epoch);
        p.schedule.network_lr = self.stage2_lr.unwrap_or(p.schedule.network_lr);
        p.schedule.soft_lr = self.soft_lr.unwrap_or(p.schedule.soft_lr);
        p.init_from_predictions = self.init_from_predictions;
        p
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Posterior threshold of the entropy filter.
    #[arg(long, default_value_t = noisylab::filtering::DEFAULT_P_E)]
    pe: f64,
    #[arg(long, env = "NOISYLAB_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON array of score rows; give one or two.
    #[arg(long = "pred", required = true)]
    preds: Vec<PathBuf>,
    /// JSON array of true labels.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Number of consecutive run seeds starting at --seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, env = "NOISYLAB_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GmmInspectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "values")]
    kind: GmmInput,
    #[arg(long, default_value_t = noisylab::filtering::DEFAULT_P_E)]
    pe: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RerunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn count_categories(path: &Option<PathBuf>) -> Result<usize> {
    match path {
        Some(p) if p.is_file() => Ok(commands::read_categories(p)?.len()),
        // Missing files are reported by validation.
        _ => Ok(0),
    }
}

fn resolve(command: Command) -> Result<RunConfig> {
    Ok(match command {
        Command::Gen(a) => {
            let file = match &a.spec {
                Some(path) => SpecFile::load(path)?,
                None => SpecFile::default(),
            };
            let required = |flag: &str| anyhow!("--{flag} is required (as a flag or in --spec)");
            let embeddings = a.embeddings.or(file.embeddings).ok_or_else(|| required("embeddings"))?;
            let base_categories = a
                .base_categories
                .or(file.base_categories)
                .ok_or_else(|| required("base-categories"))?;
            let open_categories = a.open_categories.or(file.open_categories);
            let base_pools = if a.base_pools.is_empty() {
                file.base_pools
            } else {
                a.base_pools
            };
            let open_pools = if a.open_pools.is_empty() {
                file.open_pools
            } else {
                a.open_pools
            };
            if base_pools.is_empty() {
                return Err(required("base-pool"));
            }
            let spec = NoisySpec {
                x: a.x.or(file.x).ok_or_else(|| required("x"))?,
                y: a.y.or(file.y).ok_or_else(|| required("y"))?,
                n: count_categories(&Some(base_categories.clone()))?,
                m: count_categories(&open_categories)?,
                k: a.k.or(file.k).ok_or_else(|| required("k"))?,
                tau_open: a.tau_open.or(file.tau_open).unwrap_or(DEFAULT_TAU_OPEN),
                seed: a.seed.or(file.seed).unwrap_or(0),
            };
            let pools = |paths: Vec<PathBuf>, format: Option<PoolFormat>, fallback: Option<PoolFormat>| {
                let format = format.or(fallback).unwrap_or(PoolFormat::Cifar100);
                paths.into_iter().map(|path| PoolSource { path, format }).collect()
            };
            RunConfig::Gen(GenConfig {
                embeddings,
                base_categories,
                open_categories,
                base_pools: pools(base_pools, a.base_format, file.base_format),
                open_pools: pools(open_pools, a.open_format, file.open_format),
                spec,
                out_dir: a.out_dir,
            })
        }
        Command::ConvertCheck(a) => RunConfig::ConvertCheck(ConvertCheckConfig {
            input: a.input,
            format: a.format,
            out_dir: a.out_dir,
        }),
        Command::Train(a) => RunConfig::Train(TrainConfig {
            data: a.data.resolve(),
            protocol: a.protocol.resolve(),
            p_e: a.pe,
            seed: a.seed,
            out_dir: a.out_dir,
        }),
        Command::Eval(a) => RunConfig::Eval(EvalConfig {
            preds: a.preds,
            labels: a.labels,
            out_dir: a.out_dir,
        }),
        Command::Ablate(a) => RunConfig::Ablate(AblateConfig {
            data: a.data.resolve(),
            protocol: a.protocol.resolve(),
            seeds: (a.seed..a.seed + a.seeds).collect(),
            out_dir: a.out_dir,
        }),
        Command::GmmInspect(a) => RunConfig::GmmInspect(GmmInspectConfig {
            input: a.input,
            kind: a.kind,
            p_e: a.pe,
            out_dir: a.out_dir,
        }),
        Command::Rerun(a) => {
            let mut cfg = RunConfig::load(&a.config)?;
            if let Some(dir) = a.out_dir {
                cfg.set_out_dir(dir);
            }
            cfg
        }
    })
}

fn execute(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.out_dir();
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(RUN_FILE), cfg.to_json())
        .with_context(|| format!("writing {}", dir.join(RUN_FILE).display()))?;
    match cfg {
        RunConfig::Gen(c) => commands::gen(c),
        RunConfig::ConvertCheck(c) => commands::convert_check(c),
        RunConfig::Train(c) => commands::train(c),
        RunConfig::Eval(c) => commands::eval(c),
        RunConfig::Ablate(c) => commands::ablate(c),
        RunConfig::GmmInspect(c) => commands::gmm_inspect(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match resolve(cli.command).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match execute(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
