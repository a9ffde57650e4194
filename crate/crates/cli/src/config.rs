//! Fully resolved run configurations. Each one is written to `run.json` in
//! the output directory before any work starts and can be replayed with
//! `noisylab rerun`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use noisylab::noisegen::NoisySpec;
use noisylab::trainer::{BlobsConfig, Protocol};

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunConfig {
    Gen(GenConfig),
    ConvertCheck(ConvertCheckConfig),
    Train(TrainConfig),
    Eval(EvalConfig),
    Ablate(AblateConfig),
    GmmInspect(GmmInspectConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PoolFormat {
    Cifar10,
    Cifar100,
    Ric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSource {
    pub path: PathBuf,
    pub format: PoolFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub embeddings: PathBuf,
    pub base_categories: PathBuf,
    pub open_categories: Option<PathBuf>,
    /// Concatenated in order, class by class.
    pub base_pools: Vec<PoolSource>,
    pub open_pools: Vec<PoolSource>,
    /// `n` and `m` are filled in from the category lists.
    pub spec: NoisySpec,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ContainerFormat {
    Ric,
    Ncif,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvertCheckConfig {
    pub input: PathBuf,
    pub format: ContainerFormat,
    pub out_dir: PathBuf,
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Fixture(BlobsConfig),
    Container {
        train: PathBuf,
        /// Provenance for ablations; training itself ignores it.
        manifest: Option<PathBuf>,
        /// Test container with clean labels.
        test: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataSource,
    pub protocol: Protocol,
    pub p_e: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub preds: Vec<PathBuf>,
    pub labels: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub data: DataSource,
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GmmInput {
    /// One number per line.
    Values,
    /// JSON array of probability rows; entropies are computed first.
    Predictions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmInspectConfig {
    pub input: PathBuf,
    pub kind: GmmInput,
    pub p_e: f64,
    pub out_dir: PathBuf,
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("input file not found: {}", path.display());
    }
    Ok(())
}

fn validate_source(data: &DataSource, need_manifest: bool) -> Result<()> {
    match data {
        DataSource::Fixture(cfg) => {
            if cfg.classes < 2 || cfg.per_class == 0 || cfg.test_per_class == 0 {
                bail!("fixture needs at least 2 classes and positive example counts");
            }
            if !(cfg.sigma > 0.0 && cfg.radius > 0.0 && cfg.ring_radius > 0.0 && cfg.ring_width >= 0.0) {
                bail!("fixture geometry must be positive");
            }
            if cfg.open_rate > 0.0 && (cfg.open_sectors == 0 || cfg.open_pool_per_sector == 0) {
                bail!("open noise requested but the fixture has no open pool");
            }
            Ok(())
        }
        DataSource::Container { train, manifest, test } => {
            require_file(train)?;
            require_file(test)?;
            match manifest {
                Some(m) => require_file(m),
                None if need_manifest => bail!("ablation on a container needs --manifest"),
                None => Ok(()),
            }
        }
    }
}

fn validate_protocol(p: &Protocol) -> Result<()> {
    p.opt.validate()?;
    if p.hidden == 0 {
        bail!("hidden width must be positive");
    }
    p.schedule.validate()?;
    Ok(())
}

impl RunConfig {
    pub fn out_dir(&self) -> &Path {
        match self {
            RunConfig::Gen(c) => &c.out_dir,
            RunConfig::ConvertCheck(c) => &c.out_dir,
            RunConfig::Train(c) => &c.out_dir,
            RunConfig::Eval(c) => &c.out_dir,
            RunConfig::Ablate(c) => &c.out_dir,
            RunConfig::GmmInspect(c) => &c.out_dir,
        }
    }

    pub fn set_out_dir(&mut self, dir: PathBuf) {
        match self {
            RunConfig::Gen(c) => c.out_dir = dir,
            RunConfig::ConvertCheck(c) => c.out_dir = dir,
            RunConfig::Train(c) => c.out_dir = dir,
            RunConfig::Eval(c) => c.out_dir = dir,
            RunConfig::Ablate(c) => c.out_dir = dir,
            RunConfig::GmmInspect(c) => c.out_dir = dir,
        }
    }

    /// Checks everything that can be checked without doing the work:
    /// parameter ranges and the presence of every input file.
    pub fn validate(&self) -> Result<()> {
        match self {
            RunConfig::Gen(c) => {
                require_file(&c.embeddings)?;
                require_file(&c.base_categories)?;
                if let Some(p) = &c.open_categories {
                    require_file(p)?;
                }
                if c.base_pools.is_empty() {
                    bail!("at least one --base-pool is required");
                }
                if c.spec.x > 0.0 && (c.open_categories.is_none() || c.open_pools.is_empty()) {
                    bail!("open noise needs --open-categories and at least one --open-pool");
                }
                for p in c.base_pools.iter().chain(&c.open_pools) {
                    require_file(&p.path)?;
                }
                c.spec.validate()?;
                Ok(())
            }
            RunConfig::ConvertCheck(c) => require_file(&c.input),
            RunConfig::Train(c) => {
                validate_source(&c.data, false)?;
                validate_protocol(&c.protocol)?;
                c.protocol.stage2(c.p_e).validate()?;
                Ok(())
            }
            RunConfig::Eval(c) => {
                if c.preds.is_empty() || c.preds.len() > 2 {
                    bail!("eval takes one or two --pred files, got {}", c.preds.len());
                }
                for p in &c.preds {
                    require_file(p)?;
                }
                require_file(&c.labels)
            }
            RunConfig::Ablate(c) => {
                validate_source(&c.data, true)?;
                validate_protocol(&c.protocol)?;
                if c.seeds.is_empty() {
                    bail!("ablation needs at least one seed");
                }
                Ok(())
            }
            RunConfig::GmmInspect(c) => {
                if !(0.0..1.0).contains(&c.p_e) {
                    bail!("p_e = {} must lie in [0, 1)", c.p_e);
                }
                require_file(&c.input)
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("configs serialize");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::GmmInspect(GmmInspectConfig {
            input: "v.txt".into(),
            kind: GmmInput::Values,
            p_e: 0.5,
            out_dir: "out".into(),
        });
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let bad = cfg.to_json().replace("\"p_e\"", "\"bogus\": 1, \"p_e\"");
        assert!(serde_json::from_str::<RunConfig>(&bad).is_err());
    }

    #[test]
    fn nested_train_config_rejects_unknown_keys() {
        let cfg = RunConfig::Train(TrainConfig {
            data: DataSource::Fixture(BlobsConfig::default()),
            protocol: Protocol::default(),
            p_e: 0.5,
            seed: 3,
            out_dir: "o".into(),
        });
        let json = cfg.to_json();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
        let bad = json.replace("\"ring_width\"", "\"ring_widht\": 0.1, \"ring_width\"");
        assert!(serde_json::from_str::<RunConfig>(&bad).is_err());
    }
}
