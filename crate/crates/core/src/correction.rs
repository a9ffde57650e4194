//! Soft-label correction with a reverse cross-entropy loss.
//!
//! Each training example owns a row of free logits `z_j`; its soft label is
//! `y_j = softmax(z_j)`. Given network predictions `f_j`, the label loss is
//! `-sum_i f_ji ln y_ji` summed (not averaged) over the batch, which makes the
//! per-example update independent of batch size. The network sees the same
//! loss averaged over the batch, with the soft labels held constant.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::math::{argmax, softmax};

/// Scale of the one-hot initialization `z_j = K * onehot(label_j)`.
pub const DEFAULT_INIT_SCALE: f64 = 10.0;
pub const DEFAULT_SOFT_LR: f64 = 0.5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

const CHECKPOINT_HEADER: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelTable {
    classes: usize,
    original: Vec<usize>,
    logits: Vec<f64>,
    velocity: Vec<f64>,
    momentum: f64,
}

impl SoftLabelTable {
    /// One row per example, initialized to `scale * onehot(label)`.
    pub fn from_hard_labels(labels: &[usize], classes: usize, scale: f64) -> Result<Self> {
        check_labels(labels, classes)?;
        let mut logits = vec![0.0; labels.len() * classes];
        for (j, &l) in labels.iter().enumerate() {
            logits[j * classes + l] = scale;
        }
        Ok(Self::with_logits(labels.to_vec(), classes, logits))
    }

    /// Rows initialized so that each soft label equals the given prediction.
    /// Probabilities are floored at 1e-12 before taking logs.
    pub fn from_predictions(labels: &[usize], predictions: &[Vec<f64>]) -> Result<Self> {
        let classes = predictions.first().map_or(0, Vec::len);
        check_labels(labels, classes)?;
        if predictions.len() != labels.len() {
            return Err(Error::invalid("one prediction row per label required"));
        }
        let mut logits = Vec::with_capacity(labels.len() * classes);
        for (j, row) in predictions.iter().enumerate() {
            check_distribution(row, 1e-6).map_err(|e| Error::invalid(format!("prediction {j}: {e}")))?;
            if row.len() != classes {
                return Err(Error::invalid(format!("prediction {j}: wrong width")));
            }
            logits.extend(row.iter().map(|p| p.max(1e-12).ln()));
        }
        Ok(Self::with_logits(labels.to_vec(), classes, logits))
    }

    fn with_logits(original: Vec<usize>, classes: usize, logits: Vec<f64>) -> Self {
        SoftLabelTable {
            classes,
            velocity: vec![0.0; logits.len()],
            original,
            logits,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn original_labels(&self) -> &[usize] {
        &self.original
    }

    pub fn logits(&self, j: usize) -> &[f64] {
        &self.logits[j * self.classes..(j + 1) * self.classes]
    }

    pub fn velocity(&self, j: usize) -> &[f64] {
        &self.velocity[j * self.classes..(j + 1) * self.classes]
    }

    pub fn soft_label(&self, j: usize) -> Vec<f64> {
        softmax(self.logits(j))
    }

    /// One momentum-SGD step on every row in the batch. The step for row j
    /// depends only on `f_j` and row j's own state.
    pub fn update(&mut self, batch: &BatchView, lr: f64) -> Result<()> {
        let mut seen = HashSet::with_capacity(batch.len());
        for &j in &batch.indices {
            if j >= self.len() {
                return Err(Error::invalid(format!("index {j} out of range")));
            }
            if !seen.insert(j) {
                return Err(Error::invalid(format!("index {j} appears twice in one batch")));
            }
        }
        if batch.classes() != self.classes {
            return Err(Error::invalid("batch and table disagree on class count"));
        }
        let c = self.classes;
        for (&j, f) in batch.indices.iter().zip(&batch.predictions) {
            let g = soft_label_gradient(f, self.logits(j));
            let z = &mut self.logits[j * c..(j + 1) * c];
            let v = &mut self.velocity[j * c..(j + 1) * c];
            for i in 0..c {
                v[i] = self.momentum * v[i] + g[i];
                z[i] -= lr * v[i];
            }
        }
        Ok(())
    }

    /// Binary dump: `N u64`, `c u64`, `epoch u64`, then `N*c` f64 logits, all
    /// little-endian. Momentum is not stored.
    pub fn to_checkpoint(&self, epoch: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER + self.logits.len() * 8);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.classes as u64).to_le_bytes());
        out.extend_from_slice(&epoch.to_le_bytes());
        for v in &self.logits {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Restores logits from a checkpoint; `original` supplies the hard labels
    /// the checkpoint was created from. Returns the table and its epoch.
    pub fn from_checkpoint(bytes: &[u8], original: &[usize]) -> Result<(Self, u64)> {
        if bytes.len() < CHECKPOINT_HEADER {
            return Err(Error::format(0, "truncated checkpoint header"));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
        let (n, c, epoch) = (word(0) as usize, word(1) as usize, word(2));
        let expected = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(8))
            .map(|v| v + CHECKPOINT_HEADER);
        if expected != Some(bytes.len()) {
            return Err(Error::format(
                0,
                format!("header {n}x{c} disagrees with {} bytes", bytes.len()),
            ));
        }
        if original.len() != n {
            return Err(Error::invalid(format!(
                "checkpoint has {n} rows, {} labels given",
                original.len()
            )));
        }
        check_labels(original, c)?;
        let logits = bytes[CHECKPOINT_HEADER..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok((Self::with_logits(original.to_vec(), c, logits), epoch))
    }

    /// CSV of `index,original_label,corrected_label,max_prob`.
    pub fn corrected_csv(&self) -> String {
        let mut out = String::from("index,original_label,corrected_label,max_prob\n");
        for j in 0..self.len() {
            let y = self.soft_label(j);
            let k = argmax(&y);
            let _ = writeln!(out, "{j},{},{k},{}", self.original[j], y[k]);
        }
        out
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    match labels.iter().position(|&l| l >= classes) {
        Some(j) => Err(Error::invalid(format!("label {} at {j} out of range", labels[j]))),
        None => Ok(()),
    }
}

fn check_distribution(p: &[f64], tol: f64) -> Result<()> {
    if p.iter().any(|v| !(0.0..=1.0 + tol).contains(v)) {
        return Err(Error::invalid("entries must lie in [0, 1]"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(Error::invalid(format!("sums to {s}")));
    }
    Ok(())
}

/// A mini-batch of network predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchView {
    pub indices: Vec<usize>,
    pub predictions: Vec<Vec<f64>>,
    pub hard_labels: Vec<usize>,
}

impl BatchView {
    pub fn new(indices: Vec<usize>, predictions: Vec<Vec<f64>>, hard_labels: Vec<usize>) -> Result<Self> {
        if indices.len() != predictions.len() || indices.len() != hard_labels.len() {
            return Err(Error::invalid("batch fields differ in length"));
        }
        let classes = predictions.first().map_or(0, Vec::len);
        for (b, f) in predictions.iter().enumerate() {
            if f.len() != classes {
                return Err(Error::invalid(format!("row {b}: wrong width")));
            }
            check_distribution(f, 1e-6).map_err(|e| Error::invalid(format!("row {b}: {e}")))?;
        }
        check_labels(&hard_labels, classes.max(1))?;
        Ok(BatchView {
            indices,
            predictions,
            hard_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.predictions.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PencilSchedule {
    pub epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub momentum: f64,
    pub network_lr: f64,
    pub soft_lr: f64,
}

impl PencilSchedule {
    pub fn with_network_lr(network_lr: f64) -> Self {
        PencilSchedule {
            epochs: 20,
            decay_epoch: 10,
            decay_factor: 0.1,
            momentum: DEFAULT_MOMENTUM,
            network_lr,
            soft_lr: DEFAULT_SOFT_LR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.decay_epoch >= self.epochs {
            return Err(Error::InvalidSpec(format!(
                "decay epoch {} must precede the last epoch ({})",
                self.decay_epoch, self.epochs
            )));
        }
        if !(self.network_lr > 0.0 && self.soft_lr > 0.0 && self.decay_factor > 0.0) {
            return Err(Error::InvalidSpec(
                "learning rates and decay factor must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidSpec("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// `(network_lr, soft_lr)` for a 0-based epoch.
    pub fn rates(&self, epoch: usize) -> (f64, f64) {
        let f = if epoch >= self.decay_epoch {
            self.decay_factor
        } else {
            1.0
        };
        (self.network_lr * f, self.soft_lr * f)
    }
}

/// `(1/c) KL(f || y) + alpha CE(onehot(y_hat), y) + (beta/c) H(f)`.
pub fn original_pencil_loss(f: &[f64], y_d: &[f64], y_hat: usize, alpha: f64, beta: f64, c: usize) -> Result<f64> {
    if f.len() != y_d.len() || y_hat >= y_d.len() {
        return Err(Error::invalid("shape mismatch"));
    }
    let mut kl = 0.0;
    let mut h = 0.0;
    for (&fi, &yi) in f.iter().zip(y_d) {
        if fi > 0.0 {
            if yi <= 0.0 {
                return Err(Error::invalid("soft label has a zero where the prediction does not"));
            }
            kl += fi * (fi / yi).ln();
            h -= fi * fi.ln();
        }
    }
    let ce = if alpha != 0.0 {
        if y_d[y_hat] <= 0.0 {
            return Err(Error::invalid("soft label is zero at the hard label"));
        }
        -y_d[y_hat].ln()
    } else {
        0.0
    };
    let c = c as f64;
    Ok(kl / c + alpha * ce + beta / c * h)
}

/// `-sum_i f_i ln y_i`.
pub fn reverse_ce(f: &[f64], y_d: &[f64]) -> f64 {
    -f.iter()
        .zip(y_d)
        .map(|(fi, yi)| if *fi == 0.0 { 0.0 } else { fi * yi.ln() })
        .sum::<f64>()
}

/// Gradient of `reverse_ce(f, softmax(z))` with respect to `z`.
pub fn soft_label_gradient(f: &[f64], logits: &[f64]) -> Vec<f64> {
    let mut y = softmax(logits);
    for (yi, fi) in y.iter_mut().zip(f) {
        *yi -= fi;
    }
    y
}

pub struct NetworkLoss {
    pub loss: f64,
    /// dL/df per batch row.
    pub grad_probs: Vec<Vec<f64>>,
    /// dL/ds per batch row, where `f = softmax(s)`.
    pub grad_logits: Vec<Vec<f64>>,
}

/// Batch-averaged reverse cross-entropy with the soft labels treated as
/// constants.
pub fn network_loss_and_grad(batch: &BatchView, table: &SoftLabelTable) -> Result<NetworkLoss> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    if batch.classes() != table.classes() {
        return Err(Error::invalid("batch and table disagree on class count"));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad_probs = Vec::with_capacity(batch.len());
    let mut grad_logits = Vec::with_capacity(batch.len());
    for (&j, f) in batch.indices.iter().zip(&batch.predictions) {
        if j >= table.len() {
            return Err(Error::invalid(format!("index {j} out of range")));
        }
        let y = table.soft_label(j);
        loss += reverse_ce(f, &y);
        let g: Vec<f64> = y.iter().map(|yi| -inv_b * yi.ln()).collect();
        let fg: f64 = f.iter().zip(&g).map(|(a, b)| a * b).sum();
        grad_logits.push(f.iter().zip(&g).map(|(fk, gk)| fk * (gk - fg)).collect());
        grad_probs.push(g);
    }
    Ok(NetworkLoss {
        loss: loss * inv_b,
        grad_probs,
        grad_logits,
    })
}

/// Argmax of every soft label, ties to the lowest class.
pub fn corrected_labels(table: &SoftLabelTable) -> Vec<usize> {
    (0..table.len()).map(|j| argmax(table.logits(j))).collect()
}
