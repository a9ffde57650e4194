//! `key=value` generation spec files for `gen --spec`.
//!
//! ```text
//! # nCIFAR100-0.3-0.3
//! x=0.3
//! y=0.3
//! k=500
//! seed=0
//! embeddings=glove.txt
//! base_categories=cifar100.tsv
//! open_categories=tiny.tsv
//! base_pool=train.bin
//! base_format=cifar100
//! open_pool=tiny.ric
//! open_format=ric
//! ```
//!
//! Relative paths resolve against the spec file's directory. `base_pool`
//! and `open_pool` may repeat; every other key appears at most once.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;

use crate::config::PoolFormat;

#[derive(Debug, Default, Clone, PartialEq)]
pub struct SpecFile {
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub k: Option<usize>,
    pub tau_open: Option<f64>,
    pub seed: Option<u64>,
    pub embeddings: Option<PathBuf>,
    pub base_categories: Option<PathBuf>,
    pub open_categories: Option<PathBuf>,
    pub base_pools: Vec<PathBuf>,
    pub open_pools: Vec<PathBuf>,
    pub base_format: Option<PoolFormat>,
    pub open_format: Option<PoolFormat>,
}

fn set<T>(slot: &mut Option<T>, key: &str, value: T) -> Result<()> {
    if slot.is_some() {
        bail!("duplicate key {key}");
    }
    *slot = Some(value);
    Ok(())
}

fn number<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow!("{key}: {e}"))
}

fn format(value: &str) -> Result<PoolFormat> {
    PoolFormat::from_str(value, true).map_err(|e| anyhow!("pool format: {e}"))
}

impl SpecFile {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut s = SpecFile::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key=value", idx + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let path = || base_dir.join(value);
            match key {
                "x" => set(&mut s.x, key, number(key, value)?),
                "y" => set(&mut s.y, key, number(key, value)?),
                "k" => set(&mut s.k, key, number(key, value)?),
                "tau_open" => set(&mut s.tau_open, key, number(key, value)?),
                "seed" => set(&mut s.seed, key, number(key, value)?),
                "embeddings" => set(&mut s.embeddings, key, path()),
                "base_categories" => set(&mut s.base_categories, key, path()),
                "open_categories" => set(&mut s.open_categories, key, path()),
                "base_pool" => {
                    s.base_pools.push(path());
                    Ok(())
                }
                "open_pool" => {
                    s.open_pools.push(path());
                    Ok(())
                }
                "base_format" => set(&mut s.base_format, key, format(value)?),
                "open_format" => set(&mut s.open_format, key, format(value)?),
                _ => Err(anyhow!("unknown key {key}")),
            }
            .with_context(|| format!("line {}", idx + 1))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            bail!("input file not found: {}", path.display());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, dir).with_context(|| format!("parsing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let text = "# comment\nx=0.3\ny = 0.2\nk=50\ntau_open=0.05\nseed=9\nembeddings=v.txt\nbase_categories=b.tsv\n\
                    open_categories=/abs/o.tsv\nbase_pool=a.bin\nbase_pool=b.bin\nbase_format=CIFAR10\nopen_pool=o.ric\nopen_format=ric\n";
        let s = SpecFile::parse(text, Path::new("/d")).unwrap();
        assert_eq!(
            (s.x, s.y, s.k, s.tau_open, s.seed),
            (Some(0.3), Some(0.2), Some(50), Some(0.05), Some(9))
        );
        assert_eq!(s.embeddings, Some(PathBuf::from("/d/v.txt")));
        assert_eq!(s.open_categories, Some(PathBuf::from("/abs/o.tsv")));
        assert_eq!(s.base_pools, vec![PathBuf::from("/d/a.bin"), PathBuf::from("/d/b.bin")]);
        assert_eq!(
            (s.base_format, s.open_format),
            (Some(PoolFormat::Cifar10), Some(PoolFormat::Ric))
        );
    }

    #[test]
    fn rejects_bad_lines() {
        for (text, needle) in [
            ("x=0.1\nx=0.2", "duplicate"),
            ("z=1", "unknown key z"),
            ("k", "key=value"),
            ("k=-1", "k:"),
        ] {
            let e = format!("{:#}", SpecFile::parse(text, Path::new(".")).unwrap_err());
            assert!(e.contains(needle), "{e}");
        }
    }
}
