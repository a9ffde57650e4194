//! Synthetic inputs for driving the binary: word vectors, category lists
//! and CIFAR-100-format pools.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const IMAGE_BYTES: usize = 3072;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_noisylab"));
    c.env_remove("NOISYLAB_SEED").env("RUST_LOG", "warn");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// `classes` CIFAR-100 records per class, class-major; pixel bytes encode
/// the class and index so every image is distinct.
pub fn cifar100_pool(classes: usize, per_class: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(classes * per_class * (IMAGE_BYTES + 2));
    for c in 0..classes {
        for i in 0..per_class {
            out.push((c / 5) as u8);
            out.push(c as u8);
            out.extend((0..IMAGE_BYTES).map(|b| (c * 31 + i * 7 + b) as u8));
        }
    }
    out
}

/// Writes embeddings, category lists and pools for `n` base and `m` open
/// categories into `dir`.
pub struct GenInputs {
    pub embeddings: PathBuf,
    pub base_categories: PathBuf,
    pub open_categories: PathBuf,
    pub base_pool: PathBuf,
    pub open_pool: PathBuf,
}

impl GenInputs {
    pub fn write(dir: &Path, n: usize, m: usize, base_per_class: usize, open_per_class: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut emb = String::new();
        for name in (0..n)
            .map(|i| format!("base{i}"))
            .chain((0..m).map(|i| format!("open{i}")))
        {
            let v: Vec<String> = (0..8).map(|_| format!("{:.6}", rng.random_range(-1.0..1.0))).collect();
            emb.push_str(&format!("{name} {}\n", v.join(" ")));
        }
        let list = |prefix: &str, k: usize| (0..k).map(|i| format!("{prefix}{i}\n")).collect::<String>();
        let g = GenInputs {
            embeddings: dir.join("vectors.txt"),
            base_categories: dir.join("base.txt"),
            open_categories: dir.join("open.txt"),
            base_pool: dir.join("base.bin"),
            open_pool: dir.join("open.bin"),
        };
        fs::write(&g.embeddings, emb).unwrap();
        fs::write(&g.base_categories, list("base", n)).unwrap();
        fs::write(&g.open_categories, list("open", m)).unwrap();
        fs::write(&g.base_pool, cifar100_pool(n, base_per_class)).unwrap();
        fs::write(&g.open_pool, cifar100_pool(m, open_per_class)).unwrap();
        g
    }

    pub fn args<'a>(&'a self, out: &'a Path) -> Vec<&'a str> {
        vec![
            "gen",
            "--embeddings",
            p(&self.embeddings),
            "--base-categories",
            p(&self.base_categories),
            "--open-categories",
            p(&self.open_categories),
            "--base-pool",
            p(&self.base_pool),
            "--open-pool",
            p(&self.open_pool),
            "--out-dir",
            p(out),
        ]
    }
}

/// Every file in `dir` except `run.json`, by name.
pub fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "run.json")
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

/// Reruns the command recorded in `dir/run.json` into `dir2` and reports
/// whether every artifact matches byte for byte.
pub fn rerun_matches(dir: &Path, dir2: &Path) -> Result<(), String> {
    let out = run(&["rerun", "--config", p(&dir.join("run.json")), "--out-dir", p(dir2)]);
    if code(&out) != 0 {
        return Err(format!("rerun failed: {}", stderr(&out)));
    }
    let (a, b) = (artifacts(dir), artifacts(dir2));
    if a.is_empty() {
        return Err("no artifacts".into());
    }
    if a.keys().ne(b.keys()) {
        return Err(format!("artifact sets differ: {:?} vs {:?}", a.keys(), b.keys()));
    }
    for (name, bytes) in &a {
        if b[name] != *bytes {
            return Err(format!("{name} differs"));
        }
    }
    Ok(())
}

/// Arguments for a few-epoch run on the blobs fixture.
pub const QUICK_PROTOCOL: &[&str] = &[
    "--u",
    "2",
    "--v",
    "1",
    "--stage1-epochs",
    "2",
    "--epochs",
    "2",
    "--decay-epoch",
    "1",
];
