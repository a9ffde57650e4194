//! Two-dimensional blobs with synthetic open and closed noise, built through
//! the same sampling machinery as the image datasets.
//!
//! Base classes are Gaussian blobs whose centers sit on a circle. Open
//! source classes are angular sectors of a ring outside every blob. Category
//! similarity is the cosine between center (or sector) directions.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::embeddings::{MatrixKind, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::noisegen::{generate, NoiseTag, NoisyDataset, NoisySpec, SourceDataset, DEFAULT_TAU_OPEN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    /// Generated training examples per label.
    pub per_class: usize,
    /// Source points available per blob.
    pub pool_per_class: usize,
    pub test_per_class: usize,
    pub radius: f64,
    pub sigma: f64,
    /// Maximum angular offset of a center from its even spacing, in radians.
    pub angle_jitter: f64,
    pub open_sectors: usize,
    pub open_pool_per_sector: usize,
    pub ring_radius: f64,
    pub ring_width: f64,
    pub open_rate: f64,
    pub closed_rate: f64,
    pub tau_open: f64,
    pub seed: u64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            classes: 10,
            per_class: 500,
            pool_per_class: 500,
            test_per_class: 200,
            radius: 4.0,
            sigma: 0.8,
            angle_jitter: 0.2,
            open_sectors: 20,
            open_pool_per_sector: 300,
            ring_radius: 7.0,
            ring_width: 0.3,
            open_rate: 0.3,
            closed_rate: 0.3,
            tau_open: DEFAULT_TAU_OPEN,
            seed: 0,
        }
    }
}

impl BlobsConfig {
    pub fn noise_free(self) -> Self {
        BlobsConfig {
            open_rate: 0.0,
            closed_rate: 0.0,
            ..self
        }
    }
}

/// Noisy training set, clean test set and the ground truth of every
/// training example.
#[derive(Debug, Clone)]
pub struct NoisyFixture {
    pub train: Dataset,
    pub test: Dataset,
    pub tags: Vec<NoiseTag>,
    /// Present when the fixture was synthesized in memory.
    pub generated: Option<NoisyDataset>,
}

impl NoisyFixture {
    /// Training set with per-example provenance tags, e.g. read back from a
    /// container and its manifest.
    pub fn new(train: Dataset, test: Dataset, tags: Vec<NoiseTag>) -> Result<Self> {
        if tags.len() != train.len() {
            return Err(Error::invalid(format!(
                "{} tags for {} training examples",
                tags.len(),
                train.len()
            )));
        }
        if train.dim() != test.dim() || train.classes() != test.classes() {
            return Err(Error::invalid("training and test sets disagree in shape"));
        }
        Ok(NoisyFixture {
            train,
            test,
            tags,
            generated: None,
        })
    }

    pub fn indices_with(&self, keep: impl Fn(NoiseTag) -> bool) -> Vec<usize> {
        (0..self.tags.len()).filter(|&j| keep(self.tags[j])).collect()
    }
}

pub fn blobs_fixture(cfg: &BlobsConfig) -> Result<NoisyFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.classes;
    let angles: Vec<f64> = (0..n)
        .map(|c| TAU * c as f64 / n as f64 + rng.random_range(-cfg.angle_jitter..=cfg.angle_jitter))
        .collect();
    let centers: Vec<[f64; 2]> = angles
        .iter()
        .map(|a| [cfg.radius * a.cos(), cfg.radius * a.sin()])
        .collect();
    let noise = Normal::new(0.0, cfg.sigma).expect("positive sigma");
    let blob_point =
        |c: usize, rng: &mut ChaCha8Rng| [centers[c][0] + noise.sample(rng), centers[c][1] + noise.sample(rng)];
    let base: Vec<Vec<[f64; 2]>> = (0..n)
        .map(|c| (0..cfg.pool_per_class).map(|_| blob_point(c, &mut rng)).collect())
        .collect();
    let sector = TAU / cfg.open_sectors as f64;
    let open: Vec<Vec<[f64; 2]>> = (0..cfg.open_sectors)
        .map(|s| {
            (0..cfg.open_pool_per_sector)
                .map(|_| {
                    let a = sector * (s as f64 + rng.random::<f64>());
                    let r = cfg.ring_radius + cfg.ring_width * (rng.random::<f64>() - 0.5);
                    [r * a.cos(), r * a.sin()]
                })
                .collect()
        })
        .collect();
    let mut test_x = Vec::with_capacity(n * cfg.test_per_class * 2);
    let mut test_y = Vec::with_capacity(n * cfg.test_per_class);
    for c in 0..n {
        for _ in 0..cfg.test_per_class {
            test_x.extend(blob_point(c, &mut rng));
            test_y.push(c);
        }
    }

    let dir = |a: f64| vec![a.cos(), a.sin()];
    let base_dirs: Vec<Vec<f64>> = angles.iter().map(|&a| dir(a)).collect();
    let open_dirs: Vec<Vec<f64>> = (0..cfg.open_sectors).map(|s| dir(sector * (s as f64 + 0.5))).collect();
    let closed = SimilarityMatrix::from_vectors(&base_dirs, &base_dirs, MatrixKind::Closed)?;
    let open_sim = SimilarityMatrix::from_vectors(&open_dirs, &base_dirs, MatrixKind::Open)?;
    let spec = NoisySpec {
        x: cfg.open_rate,
        y: cfg.closed_rate,
        n,
        m: cfg.open_sectors,
        k: cfg.per_class,
        tau_open: cfg.tau_open,
        seed: cfg.seed.wrapping_add(1),
    };
    let generated = generate(
        &spec,
        &closed,
        (cfg.open_rate > 0.0).then_some(&open_sim),
        &vec![cfg.pool_per_class; n],
        &vec![cfg.open_pool_per_sector; cfg.open_sectors],
    )?;
    let mut xs = Vec::with_capacity(generated.examples.len() * 2);
    let mut ys = Vec::with_capacity(generated.examples.len());
    let mut tags = Vec::with_capacity(generated.examples.len());
    for e in &generated.examples {
        let p = match e.image.dataset {
            SourceDataset::Base => base[e.image.class][e.image.index],
            SourceDataset::Open => open[e.image.class][e.image.index],
        };
        xs.extend(p);
        ys.push(e.noisy_label);
        tags.push(e.provenance.tag);
    }
    Ok(NoisyFixture {
        train: Dataset::new(2, n, xs, ys)?,
        test: Dataset::new(2, n, test_x, test_y)?,
        tags,
        generated: Some(generated),
    })
}
