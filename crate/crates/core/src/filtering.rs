//! Confidence filtering: prediction entropy, a two-component 1-D Gaussian
//! mixture fit by EM, and posterior thresholding.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 200;
/// Stopping threshold on the gain in mean per-point log-likelihood.
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_P_E: f64 = 0.5;

/// `-sum f_i ln f_i` with `0 ln 0 = 0`.
pub fn entropy(f: &[f64]) -> Result<f64> {
    if f.is_empty() {
        return Err(Error::EmptyInput("entropy of an empty distribution".into()));
    }
    if f.iter().any(|v| !(0.0..=1.0 + 1e-9).contains(v)) {
        return Err(Error::invalid("distribution entries must lie in [0, 1]"));
    }
    let s: f64 = f.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("distribution sums to {s}")));
    }
    let h = -f.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    Ok(h.clamp(0.0, (f.len() as f64).ln()))
}

/// Entropy of every prediction row.
pub fn entropy_profile(predictions: &[Vec<f64>]) -> Result<Vec<f64>> {
    predictions
        .iter()
        .enumerate()
        .map(|(j, f)| entropy(f).map_err(|e| Error::invalid(format!("example {j}: {e}"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub mean: f64,
    pub variance: f64,
    pub weight: f64,
}

impl GmmComponent {
    fn log_density(&self, x: f64) -> f64 {
        let d = x - self.mean;
        self.weight.ln() - 0.5 * ((2.0 * std::f64::consts::PI * self.variance).ln() + d * d / self.variance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: [GmmComponent; 2],
    /// Index of the lower-mean component.
    pub confident: usize,
    /// Mean per-point log-likelihood before the first M step and after each
    /// subsequent one.
    pub log_likelihood: Vec<f64>,
}

impl GmmModel {
    /// `P(confident component | x)`.
    pub fn posterior(&self, x: f64) -> f64 {
        let a = self.components[self.confident].log_density(x);
        let b = self.components[1 - self.confident].log_density(x);
        // 1 / (1 + exp(b - a)), stable for large |b - a|.
        let d = b - a;
        if d > 0.0 {
            let e = (-d).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + d.exp())
        }
    }

    pub fn confident_component(&self) -> &GmmComponent {
        &self.components[self.confident]
    }
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn mean_log_likelihood(values: &[f64], comps: &[GmmComponent; 2], resp: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (x, r) in values.iter().zip(resp.iter_mut()) {
        let a = comps[0].log_density(*x);
        let b = comps[1].log_density(*x);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        *r = (a - lse).exp();
        total += lse;
    }
    total / values.len() as f64
}

/// EM fit from a fixed initialization: means at the 25th and 75th
/// percentiles (min and max if those coincide), equal weights and the
/// overall variance for both components.
pub fn fit_gmm2(values: &[f64], max_iters: usize, tol: f64) -> Result<GmmModel> {
    if values.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 values, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if lo == hi {
        return Err(Error::Degenerate(format!("all {} values equal {lo}", values.len())));
    }
    let (mut m0, mut m1) = (percentile(&sorted, 0.25), percentile(&sorted, 0.75));
    if m0 == m1 {
        (m0, m1) = (lo, hi);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);
    let mut comps = [
        GmmComponent {
            mean: m0,
            variance: var,
            weight: 0.5,
        },
        GmmComponent {
            mean: m1,
            variance: var,
            weight: 0.5,
        },
    ];
    let mut resp = vec![0.0; values.len()];
    let mut trace = vec![mean_log_likelihood(values, &comps, &mut resp)];
    for _ in 0..max_iters {
        let r0: f64 = resp.iter().sum();
        let r1 = n - r0;
        if r0 <= 0.0 || r1 <= 0.0 {
            return Err(Error::Degenerate("a mixture component lost all mass".into()));
        }
        let mu0 = resp.iter().zip(values).map(|(r, x)| r * x).sum::<f64>() / r0;
        let mu1 = resp.iter().zip(values).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / r1;
        let v0 = resp.iter().zip(values).map(|(r, x)| r * (x - mu0).powi(2)).sum::<f64>() / r0;
        let v1 = resp
            .iter()
            .zip(values)
            .map(|(r, x)| (1.0 - r) * (x - mu1).powi(2))
            .sum::<f64>()
            / r1;
        comps = [
            GmmComponent {
                mean: mu0,
                variance: v0.max(VARIANCE_FLOOR),
                weight: r0 / n,
            },
            GmmComponent {
                mean: mu1,
                variance: v1.max(VARIANCE_FLOOR),
                weight: r1 / n,
            },
        ];
        let ll = mean_log_likelihood(values, &comps, &mut resp);
        let gain = ll - trace[trace.len() - 1];
        trace.push(ll);
        if gain < tol {
            break;
        }
    }
    if comps[0].mean == comps[1].mean {
        return Err(Error::Degenerate("components converged to the same mean".into()));
    }
    Ok(GmmModel {
        confident: usize::from(comps[1].mean < comps[0].mean),
        components: comps,
        log_likelihood: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: Vec<bool>,
    pub posterior: Vec<f64>,
    pub threshold: f64,
}

impl FilterDecision {
    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&j| self.keep[j]).collect()
    }

    /// Keep everything; used when no meaningful split exists.
    pub fn keep_all(n: usize, threshold: f64) -> Self {
        FilterDecision {
            keep: vec![true; n],
            posterior: vec![1.0; n],
            threshold,
        }
    }
}

fn check_threshold(p_e: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p_e) {
        return Err(Error::invalid(format!("threshold {p_e} outside [0, 1)")));
    }
    Ok(())
}

/// Keeps example j iff its posterior of belonging to the confident
/// component is strictly above `p_e`. Posteriors are floored at the
/// smallest positive float so `p_e = 0` keeps everything.
pub fn filter(values: &[f64], model: &GmmModel, p_e: f64) -> Result<FilterDecision> {
    check_threshold(p_e)?;
    let posterior: Vec<f64> = values
        .iter()
        .map(|&x| model.posterior(x).max(f64::MIN_POSITIVE))
        .collect();
    Ok(FilterDecision {
        keep: posterior.iter().map(|&p| p > p_e).collect(),
        posterior,
        threshold: p_e,
    })
}

/// Fit then filter. A degenerate profile keeps every example and logs a
/// warning; the model is `None` in that case.
pub fn fit_and_filter(values: &[f64], p_e: f64) -> Result<(FilterDecision, Option<GmmModel>)> {
    check_threshold(p_e)?;
    match fit_gmm2(values, DEFAULT_MAX_ITERS, DEFAULT_TOL) {
        Ok(model) => Ok((filter(values, &model, p_e)?, Some(model))),
        Err(Error::Degenerate(why)) => {
            log::warn!(
                "entropy profile is degenerate ({why}); keeping all {} examples",
                values.len()
            );
            Ok((FilterDecision::keep_all(values.len(), p_e), None))
        }
        Err(e) => Err(e),
    }
}

/// One row of the per-epoch filter log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterLogRow {
    pub epoch: usize,
    pub branch: usize,
    pub kept: usize,
    pub dropped: usize,
    pub means: Option<[f64; 2]>,
    pub weights: Option<[f64; 2]>,
}

impl FilterLogRow {
    pub fn new(epoch: usize, branch: usize, decision: &FilterDecision, model: Option<&GmmModel>) -> Self {
        let kept = decision.kept_count();
        // Confident component first.
        let ordered = model.map(|m| [m.components[m.confident], m.components[1 - m.confident]]);
        FilterLogRow {
            epoch,
            branch,
            kept,
            dropped: decision.keep.len() - kept,
            means: ordered.map(|c| [c[0].mean, c[1].mean]),
            weights: ordered.map(|c| [c[0].weight, c[1].weight]),
        }
    }

    pub const CSV_HEADER: &'static str =
        "epoch,branch,kept_count,dropped_count,mean_confident,mean_other,weight_confident,weight_other";
}

pub fn filter_log_csv(rows: &[FilterLogRow]) -> String {
    let mut out = format!("{}\n", FilterLogRow::CSV_HEADER);
    let fmt = |v: Option<[f64; 2]>, i: usize| v.map_or(String::new(), |a| a[i].to_string());
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.branch,
            r.kept,
            r.dropped,
            fmt(r.means, 0),
            fmt(r.means, 1),
            fmt(r.weights, 0),
            fmt(r.weights, 1)
        );
    }
    out
}

/// Synthetic entropy profile: the first half drawn around 0.1, the second
/// half around 2.0, both with standard deviation 0.05.
pub fn bimodal_fixture(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let low = Normal::new(0.1, 0.05).expect("valid normal");
    let high = Normal::new(2.0, 0.05).expect("valid normal");
    let half = n / 2;
    let values = (0..n)
        .map(|i| {
            if i < half {
                low.sample(&mut rng)
            } else {
                high.sample(&mut rng)
            }
        })
        .collect();
    let is_low = (0..n).map(|i| i < half).collect();
    (values, is_low)
}
