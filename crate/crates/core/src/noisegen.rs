//! Similarity-driven synthesis of noisy-label datasets.
//!
//! Every base category `j` receives `k` examples: `x*k` open-noise images drawn
//! from the open source categories according to the temperature softmax of
//! column `j` of the open similarity matrix, followed by `(1-x)*k` closed-world
//! images drawn from the base categories according to column `j` of the closed
//! matrix. A closed-world draw from class `j` itself is clean; any other class
//! is closed noise. The closed temperature is found by bisection so that the
//! expected closed-noise fraction among closed-world draws equals `y/(1-x)`.
//!
//! Images are never reused: every draw consumes one slot of its source pool.
//! When a class pool runs dry the remaining column mass is renormalized over
//! the classes that still have images, and a final repair pass swaps source
//! images between draws until the clean count is exactly `(1-x-y)*n*k`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{MatrixKind, SimilarityMatrix};
use crate::error::{Error, Result};

/// Default open-noise temperature.
pub const DEFAULT_TAU_OPEN: f64 = 0.1;
/// Default tolerance on the closed-noise rate for the temperature search.
pub const DEFAULT_TAU_TOL: f64 = 1e-6;

const BRACKET_LO: f64 = 1e-3;
const BRACKET_HI: f64 = 1e3;
const BRACKET_LIMIT: f64 = 1e12;
const INTEGRALITY_TOL: f64 = 1e-9;

/// Generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisySpec {
    /// Open-noise rate.
    pub x: f64,
    /// Closed-noise rate.
    pub y: f64,
    /// Number of base classes.
    pub n: usize,
    /// Number of open source classes.
    pub m: usize,
    /// Examples per generated category.
    pub k: usize,
    pub tau_open: f64,
    pub seed: u64,
}

/// Exact example counts by provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseCounts {
    pub clean: usize,
    pub open: usize,
    pub closed: usize,
}

impl NoiseCounts {
    pub fn total(&self) -> usize {
        self.clean + self.open + self.closed
    }
}

fn whole(rate: f64, k: usize, what: &str) -> Result<usize> {
    let v = rate * k as f64;
    let r = v.round();
    if (v - r).abs() > INTEGRALITY_TOL * (k as f64).max(1.0) {
        return Err(Error::InvalidSpec(format!("{what}*k = {v} is not a whole number")));
    }
    Ok(r as usize)
}

impl NoisySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(0.0..1.0).contains(&self.x) {
            return bad(format!("x = {} must lie in [0, 1)", self.x));
        }
        if !(0.0..1.0).contains(&self.y) {
            return bad(format!("y = {} must lie in [0, 1)", self.y));
        }
        if self.x + self.y >= 1.0 {
            return bad(format!("x + y = {} must be below 1", self.x + self.y));
        }
        if self.n == 0 || self.k == 0 {
            return bad("n and k must be positive".into());
        }
        if self.x > 0.0 && self.m == 0 {
            return bad("open noise requested but there are no open source classes".into());
        }
        if !(self.tau_open > 0.0 && self.tau_open.is_finite()) {
            return bad(format!("tau_open = {} must be positive", self.tau_open));
        }
        whole(self.x, self.k, "x")?;
        whole(self.y, self.k, "y")?;
        if self.y > 0.0 {
            let target = self.closed_rate_target();
            let ceiling = 1.0 - 1.0 / self.n as f64;
            if target >= ceiling {
                return bad(format!(
                    "closed-noise fraction y/(1-x) = {target:.6} is not below 1 - 1/n = {ceiling:.6}"
                ));
            }
        }
        Ok(())
    }

    pub fn open_per_class(&self) -> usize {
        (self.x * self.k as f64).round() as usize
    }

    pub fn closed_noise_per_class(&self) -> usize {
        (self.y * self.k as f64).round() as usize
    }

    /// Clean plus closed-noise draws per category.
    pub fn closed_world_per_class(&self) -> usize {
        self.k - self.open_per_class()
    }

    /// Fraction of closed-world draws that must be closed noise.
    pub fn closed_rate_target(&self) -> f64 {
        self.y / (1.0 - self.x)
    }

    pub fn expected_counts(&self) -> NoiseCounts {
        let open = self.open_per_class() * self.n;
        let closed = self.closed_noise_per_class() * self.n;
        NoiseCounts {
            clean: self.n * self.k - open - closed,
            open,
            closed,
        }
    }

    /// `nCIFAR<n>-<x>-<y>` style name.
    pub fn dataset_name(&self, prefix: &str) -> String {
        format!("{prefix}{}-{}-{}", self.n, self.x, self.y)
    }
}

/// A probability vector over the rows of one matrix column.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDistribution {
    pub probs: Vec<f64>,
}

impl ColumnDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("distribution entries must be finite and nonnegative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("distribution sums to {sum}")));
        }
        Ok(ColumnDistribution { probs })
    }

    fn point_mass(rows: usize, at: usize) -> Self {
        let mut probs = vec![0.0; rows];
        probs[at] = 1.0;
        ColumnDistribution { probs }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature {tau} must be positive and finite")))
    }
}

/// `p_i = exp(M_ij / tau) / sum_t exp(M_tj / tau)`.
pub fn column_softmax(matrix: &SimilarityMatrix, col: usize, tau: f64) -> Result<ColumnDistribution> {
    check_tau(tau)?;
    if col >= matrix.cols() {
        return Err(Error::invalid(format!(
            "column {col} out of range for {} columns",
            matrix.cols()
        )));
    }
    let column = matrix.column(col);
    if column.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidMatrix(format!("non-finite entry in column {col}")));
    }
    let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = column.iter().map(|v| ((v - max) / tau).exp()).collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    Ok(ColumnDistribution { probs })
}

fn require_closed(matrix: &SimilarityMatrix) -> Result<()> {
    if matrix.kind() != MatrixKind::Closed {
        return Err(Error::InvalidMatrix("expected a closed similarity matrix".into()));
    }
    Ok(())
}

/// Off-diagonal mass of each softmaxed column, as exponents relative to the
/// diagonal: `a_t = (C_ti - C_ii) / tau` for `t != i`.
fn off_diagonal_exponents(matrix: &SimilarityMatrix, i: usize, tau: f64) -> impl Iterator<Item = f64> + '_ {
    let diag = matrix.get(i, i);
    (0..matrix.rows())
        .filter(move |&t| t != i)
        .map(move |t| (matrix.get(t, i) - diag) / tau)
}

/// Closed-noise rate `r = 1 - mean_i C'_ii`.
///
/// Evaluated as the mean off-diagonal mass so that small rates do not vanish
/// in the subtraction from one.
pub fn closed_noise_rate(matrix: &SimilarityMatrix, tau: f64) -> Result<f64> {
    require_closed(matrix)?;
    check_tau(tau)?;
    let n = matrix.rows();
    let total: f64 = (0..n)
        .map(|i| {
            let off: f64 = off_diagonal_exponents(matrix, i, tau).map(f64::exp).sum();
            off / (1.0 + off)
        })
        .sum();
    Ok(total / n as f64)
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Natural log of [`closed_noise_rate`], computed entirely in log space. It
/// stays finite at temperatures where the rate itself underflows.
pub fn log_closed_noise_rate(matrix: &SimilarityMatrix, tau: f64) -> Result<f64> {
    require_closed(matrix)?;
    check_tau(tau)?;
    let n = matrix.rows();
    let per_column = (0..n).map(|i| {
        let l = log_sum_exp(off_diagonal_exponents(matrix, i, tau));
        // ln(S / (1 + S)) with S = exp(l)
        let softplus = if l > 0.0 {
            l + (-l).exp().ln_1p()
        } else {
            l.exp().ln_1p()
        };
        l - softplus
    });
    Ok(log_sum_exp(per_column) - (n as f64).ln())
}

/// Finds the closed temperature whose noise rate is within `tol` of
/// `target_r`.
///
/// The bracket starts at `[1e-3, 1e3]` and is widened by factors of ten until
/// it contains the target; bisection then proceeds on the geometric midpoint.
pub fn solve_tau_closed(matrix: &SimilarityMatrix, target_r: f64, tol: f64) -> Result<f64> {
    require_closed(matrix)?;
    let n = matrix.rows();
    let ceiling = 1.0 - 1.0 / n as f64;
    if !(target_r > 0.0 && target_r < ceiling) {
        return Err(Error::Solver(format!(
            "target rate {target_r} outside the attainable range (0, {ceiling})"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::Solver(format!("tolerance {tol} must be positive")));
    }
    for i in 0..n {
        for t in 0..n {
            if t != i && matrix.get(t, i) >= matrix.get(i, i) {
                return Err(Error::Solver(format!(
                    "off-diagonal entry ({t}, {i}) is not below the diagonal; the rate is not strictly monotone"
                )));
            }
        }
    }
    let rate = |tau: f64| closed_noise_rate(matrix, tau);

    let mut lo = BRACKET_LO;
    while rate(lo)? > target_r {
        lo /= 10.0;
        if lo < 1.0 / BRACKET_LIMIT {
            return Err(Error::Solver("lower bracket expansion exceeded 1e-12".into()));
        }
    }
    let mut hi = BRACKET_HI;
    while rate(hi)? < target_r {
        hi *= 10.0;
        if hi > BRACKET_LIMIT {
            return Err(Error::Solver("upper bracket expansion exceeded 1e12".into()));
        }
    }
    for _ in 0..2000 {
        let mid = (lo * hi).sqrt();
        let r = rate(mid)?;
        if (r - target_r).abs() <= tol {
            return Ok(mid);
        }
        if r < target_r {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi <= lo * (1.0 + f64::EPSILON) {
            break;
        }
    }
    Err(Error::Solver(format!(
        "bisection stalled before reaching tolerance {tol}"
    )))
}

/// Remaining source images, one list of unused slot indices per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourcePools {
    available: Vec<Vec<usize>>,
}

impl SourcePools {
    /// Pools holding slots `0..capacity` for each row.
    pub fn with_capacities(capacities: &[usize]) -> Self {
        SourcePools {
            available: capacities.iter().map(|&c| (0..c).collect()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.available.len()
    }

    pub fn remaining(&self, row: usize) -> usize {
        self.available[row].len()
    }

    pub fn total_remaining(&self) -> usize {
        self.available.iter().map(Vec::len).sum()
    }

    fn take<R: Rng + ?Sized>(&mut self, row: usize, rng: &mut R) -> usize {
        let slots = &mut self.available[row];
        let pick = rng.random_range(0..slots.len());
        slots.swap_remove(pick)
    }

    fn put_back(&mut self, row: usize, slot: usize) {
        self.available[row].push(slot);
    }
}

/// Draws `count` (row, slot) pairs. Rows are chosen with probability
/// proportional to `dist` among rows that still have slots; each draw consumes
/// the chosen slot. Fails without consuming anything when the rows carrying
/// probability mass cannot supply `count` slots.
pub fn sample_without_replacement<R: Rng + ?Sized>(
    dist: &ColumnDistribution,
    count: usize,
    pools: &mut SourcePools,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if dist.probs.len() != pools.rows() {
        return Err(Error::invalid(format!(
            "distribution has {} rows but there are {} pools",
            dist.probs.len(),
            pools.rows()
        )));
    }
    let capacity: usize = (0..pools.rows())
        .filter(|&r| dist.probs[r] > 0.0)
        .map(|r| pools.remaining(r))
        .sum();
    if capacity < count {
        return Err(Error::PoolExhausted {
            requested: count,
            drawn: capacity,
        });
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let eligible = |r: usize| dist.probs[r] > 0.0 && pools.remaining(r) > 0;
        let total: f64 = (0..pools.rows()).filter(|&r| eligible(r)).map(|r| dist.probs[r]).sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for r in (0..pools.rows()).filter(|&r| eligible(r)) {
            acc += dist.probs[r];
            chosen = Some(r);
            if u < acc {
                break;
            }
        }
        // Capacity was checked up front, so some row is always eligible.
        let row = chosen.expect("eligible row");
        let slot = pools.take(row, rng);
        out.push((row, slot));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceDataset {
    Base,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTag {
    Clean,
    ClosedNoise,
    OpenNoise,
}

/// Location of a source image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub dataset: SourceDataset,
    pub class: usize,
    pub index: usize,
}

/// Ground truth for one generated example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tag: NoiseTag,
    /// Base class for clean and closed-noise examples, open source class for
    /// open noise.
    pub true_class: usize,
    pub source_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisyExample {
    pub image: ImageRef,
    pub noisy_label: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyDataset {
    pub spec: NoisySpec,
    /// Closed temperature found by the search; 0 when `y = 0`, where the
    /// closed-world column distributions are point masses on the diagonal.
    pub tau_closed: f64,
    pub examples: Vec<NoisyExample>,
}

impl NoisyDataset {
    pub fn counts(&self) -> NoiseCounts {
        let mut c = NoiseCounts {
            clean: 0,
            open: 0,
            closed: 0,
        };
        for e in &self.examples {
            match e.provenance.tag {
                NoiseTag::Clean => c.clean += 1,
                NoiseTag::OpenNoise => c.open += 1,
                NoiseTag::ClosedNoise => c.closed += 1,
            }
        }
        c
    }

    pub fn open_counts_per_class(&self) -> Vec<usize> {
        let mut out = vec![0; self.spec.n];
        for e in &self.examples {
            if e.provenance.tag == NoiseTag::OpenNoise {
                out[e.noisy_label] += 1;
            }
        }
        out
    }

    /// Checks every dataset invariant: totals, per-label counts, exact
    /// provenance counts, provenance consistency and image uniqueness.
    pub fn check_invariants(&self) -> Result<()> {
        let spec = &self.spec;
        let fail = |m: String| Err(Error::invalid(m));
        if self.examples.len() != spec.n * spec.k {
            return fail(format!(
                "{} examples, expected {}",
                self.examples.len(),
                spec.n * spec.k
            ));
        }
        let mut per_label = vec![0usize; spec.n];
        for e in &self.examples {
            if e.noisy_label >= spec.n {
                return fail(format!("label {} out of range", e.noisy_label));
            }
            per_label[e.noisy_label] += 1;
            let p = e.provenance;
            let consistent = match p.tag {
                NoiseTag::Clean => e.image.dataset == SourceDataset::Base && p.true_class == e.noisy_label,
                NoiseTag::ClosedNoise => e.image.dataset == SourceDataset::Base && p.true_class != e.noisy_label,
                NoiseTag::OpenNoise => e.image.dataset == SourceDataset::Open,
            };
            if !consistent || p.true_class != e.image.class || p.source_index != e.image.index {
                return fail(format!("inconsistent provenance {e:?}"));
            }
        }
        if let Some(j) = per_label.iter().position(|&c| c != spec.k) {
            return fail(format!("label {j} appears {} times, expected {}", per_label[j], spec.k));
        }
        if self.counts() != spec.expected_counts() {
            return fail(format!(
                "counts {:?} differ from expected {:?}",
                self.counts(),
                spec.expected_counts()
            ));
        }
        if self.open_counts_per_class().iter().any(|&c| c != spec.open_per_class()) {
            return fail("open-noise count differs between categories".into());
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.examples {
            if !seen.insert((e.image.dataset, e.image.class, e.image.index)) {
                return fail(format!("image {:?} used twice", e.image));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Draw {
    label: usize,
    class: usize,
    slot: usize,
}

impl Draw {
    fn is_clean(&self) -> bool {
        self.label == self.class
    }
}

/// Generates a dataset with the generator seeded from `spec.seed`.
///
/// `base_capacity[i]` and `open_capacity[i]` are the number of images available
/// in each source class; slots refer to positions within those classes.
pub fn generate(
    spec: &NoisySpec,
    closed: &SimilarityMatrix,
    open: Option<&SimilarityMatrix>,
    base_capacity: &[usize],
    open_capacity: &[usize],
) -> Result<NoisyDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    generate_with_rng(spec, closed, open, base_capacity, open_capacity, &mut rng)
}

pub fn generate_with_rng<R: Rng + ?Sized>(
    spec: &NoisySpec,
    closed: &SimilarityMatrix,
    open: Option<&SimilarityMatrix>,
    base_capacity: &[usize],
    open_capacity: &[usize],
    rng: &mut R,
) -> Result<NoisyDataset> {
    spec.validate()?;
    require_closed(closed)?;
    let n = spec.n;
    if closed.rows() != n {
        return Err(Error::InvalidSpec(format!(
            "closed matrix is {}x{} but n = {n}",
            closed.rows(),
            closed.cols()
        )));
    }
    if base_capacity.len() != n {
        return Err(Error::InvalidSpec(format!(
            "{} base pools for {n} classes",
            base_capacity.len()
        )));
    }
    let open_per_class = spec.open_per_class();
    let open = match (open, open_per_class) {
        (_, 0) => None,
        (None, _) => return Err(Error::InvalidSpec("open noise requested without an open matrix".into())),
        (Some(o), _) => {
            if o.rows() != spec.m || o.cols() != n || o.kind() != MatrixKind::Open {
                return Err(Error::InvalidSpec(format!(
                    "open matrix must be an open {}x{n} matrix, got {}x{}",
                    spec.m,
                    o.rows(),
                    o.cols()
                )));
            }
            if open_capacity.len() != spec.m {
                return Err(Error::InvalidSpec(format!(
                    "{} open pools for m = {}",
                    open_capacity.len(),
                    spec.m
                )));
            }
            Some(o)
        }
    };

    let tau_closed = if spec.y > 0.0 {
        solve_tau_closed(closed, spec.closed_rate_target(), DEFAULT_TAU_TOL)?
    } else {
        0.0
    };
    let closed_dists: Vec<ColumnDistribution> = (0..n)
        .map(|j| {
            if spec.y > 0.0 {
                column_softmax(closed, j, tau_closed)
            } else {
                Ok(ColumnDistribution::point_mass(n, j))
            }
        })
        .collect::<Result<_>>()?;

    let mut base_pools = SourcePools::with_capacities(base_capacity);
    let mut open_pools = SourcePools::with_capacities(if open.is_some() { open_capacity } else { &[] });

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let mut open_draws: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut closed_draws: Vec<Draw> = Vec::with_capacity(n * spec.closed_world_per_class());
    for &j in &order {
        if let Some(o) = open {
            let dist = column_softmax(o, j, spec.tau_open)?;
            open_draws[j] = sample_without_replacement(&dist, open_per_class, &mut open_pools, rng)?;
        }
        let draws = sample_without_replacement(&closed_dists[j], spec.closed_world_per_class(), &mut base_pools, rng)?;
        closed_draws.extend(draws.into_iter().map(|(class, slot)| Draw { label: j, class, slot }));
    }

    let target_clean = spec.expected_counts().clean;
    repair_clean_count(&mut closed_draws, target_clean, &mut base_pools, &closed_dists, rng)?;

    // Stable grouping by label; within a label, open draws precede closed-world draws.
    let mut by_label: Vec<Vec<NoisyExample>> = vec![Vec::with_capacity(spec.k); n];
    for (j, draws) in open_draws.into_iter().enumerate() {
        for (class, slot) in draws {
            by_label[j].push(NoisyExample {
                image: ImageRef {
                    dataset: SourceDataset::Open,
                    class,
                    index: slot,
                },
                noisy_label: j,
                provenance: Provenance {
                    tag: NoiseTag::OpenNoise,
                    true_class: class,
                    source_index: slot,
                },
            });
        }
    }
    for d in &closed_draws {
        by_label[d.label].push(NoisyExample {
            image: ImageRef {
                dataset: SourceDataset::Base,
                class: d.class,
                index: d.slot,
            },
            noisy_label: d.label,
            provenance: Provenance {
                tag: if d.is_clean() {
                    NoiseTag::Clean
                } else {
                    NoiseTag::ClosedNoise
                },
                true_class: d.class,
                source_index: d.slot,
            },
        });
    }
    let dataset = NoisyDataset {
        spec: *spec,
        tau_closed,
        examples: by_label.into_iter().flatten().collect(),
    };
    dataset.check_invariants()?;
    Ok(dataset)
}

fn weighted_pick<R: Rng + ?Sized>(candidates: &[(usize, f64)], rng: &mut R) -> Option<usize> {
    let total: f64 = candidates.iter().map(|c| c.1).sum();
    if candidates.is_empty() || !(total > 0.0) {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for &(idx, w) in candidates {
        acc += w;
        if u < acc {
            return Some(idx);
        }
    }
    candidates.last().map(|c| c.0)
}

fn random_from<R: Rng + ?Sized>(items: &[usize], rng: &mut R) -> Option<usize> {
    if items.is_empty() {
        None
    } else {
        Some(items[rng.random_range(0..items.len())])
    }
}

/// Moves the clean count of the closed-world draws to exactly `target`.
///
/// Each step changes one draw's source image, either by trading it for an
/// unused image of a suitable class or by swapping source images with another
/// draw. Both keep every image used at most once and leave every label's
/// draw count unchanged. Steps that move the count by exactly one are
/// preferred; two-step swaps are used only when no single step exists.
fn repair_clean_count<R: Rng + ?Sized>(
    draws: &mut [Draw],
    target: usize,
    pools: &mut SourcePools,
    dists: &[ColumnDistribution],
    rng: &mut R,
) -> Result<()> {
    let max_steps = 4 * draws.len() + 16;
    let mut clean = draws.iter().filter(|d| d.is_clean()).count();
    if clean != target {
        log::debug!("repairing clean count {clean} -> {target}");
    }
    for _ in 0..max_steps {
        if clean == target {
            return Ok(());
        }
        let decrease = clean > target;
        let gap = clean.abs_diff(target);
        let mut candidates: Vec<usize> = (0..draws.len()).filter(|&i| draws[i].is_clean() == decrease).collect();
        candidates.shuffle(rng);

        let mut moved = None;
        for &a in &candidates {
            moved = if decrease {
                make_noisy(a, draws, pools, dists, rng)
            } else {
                make_clean(a, draws, pools, rng)
            };
            if moved.is_some() {
                break;
            }
        }
        if moved.is_none() && gap >= 2 {
            moved = double_swap(decrease, &candidates, draws, rng);
        }
        match moved {
            Some(delta) => {
                clean = if decrease { clean - delta } else { clean + delta };
            }
            None => {
                return Err(Error::PoolExhausted {
                    requested: target,
                    drawn: clean,
                })
            }
        }
    }
    Err(Error::Solver("clean-count repair did not converge".into()))
}

/// Turns clean draw `a` into closed noise without touching any other draw's
/// clean status. Returns the number of clean draws removed.
fn make_noisy<R: Rng + ?Sized>(
    a: usize,
    draws: &mut [Draw],
    pools: &mut SourcePools,
    dists: &[ColumnDistribution],
    rng: &mut R,
) -> Option<usize> {
    let j = draws[a].label;
    let spare: Vec<(usize, f64)> = (0..pools.rows())
        .filter(|&i| i != j && pools.remaining(i) > 0)
        .map(|i| (i, dists[j].probs[i]))
        .collect();
    if let Some(i) = weighted_pick(&spare, rng) {
        let slot = pools.take(i, rng);
        pools.put_back(j, draws[a].slot);
        draws[a].class = i;
        draws[a].slot = slot;
        return Some(1);
    }
    // Partner: a noisy draw under another label whose source class differs
    // from j, so after the swap both draws are noisy.
    let partners: Vec<usize> = (0..draws.len())
        .filter(|&b| b != a && !draws[b].is_clean() && draws[b].class != j && draws[b].label != j)
        .collect();
    let b = random_from(&partners, rng)?;
    swap_sources(draws, a, b);
    Some(1)
}

/// Turns noisy draw `a` into a clean one while leaving other draws' clean
/// status unchanged. Returns the number of clean draws added.
fn make_clean<R: Rng + ?Sized>(a: usize, draws: &mut [Draw], pools: &mut SourcePools, rng: &mut R) -> Option<usize> {
    let j = draws[a].label;
    if pools.remaining(j) > 0 {
        let slot = pools.take(j, rng);
        pools.put_back(draws[a].class, draws[a].slot);
        draws[a].class = j;
        draws[a].slot = slot;
        return Some(1);
    }
    let i = draws[a].class;
    // Partner: holds a class-j image under another label and would not become
    // clean on receiving a class-i image.
    let partners: Vec<usize> = (0..draws.len())
        .filter(|&b| b != a && draws[b].class == j && draws[b].label != j && draws[b].label != i)
        .collect();
    let b = random_from(&partners, rng)?;
    swap_sources(draws, a, b);
    Some(1)
}

/// Swap that moves the clean count by two.
fn double_swap<R: Rng + ?Sized>(
    decrease: bool,
    candidates: &[usize],
    draws: &mut [Draw],
    rng: &mut R,
) -> Option<usize> {
    for &a in candidates {
        let da = draws[a];
        let partners: Vec<usize> = (0..draws.len())
            .filter(|&b| {
                let db = draws[b];
                if decrease {
                    b != a && db.is_clean() && db.label != da.label
                } else {
                    b != a && db.label == da.class && db.class == da.label
                }
            })
            .collect();
        if let Some(b) = random_from(&partners, rng) {
            swap_sources(draws, a, b);
            return Some(2);
        }
    }
    None
}

fn swap_sources(draws: &mut [Draw], a: usize, b: usize) {
    let (ca, sa) = (draws[a].class, draws[a].slot);
    draws[a].class = draws[b].class;
    draws[a].slot = draws[b].slot;
    draws[b].class = ca;
    draws[b].slot = sa;
}
