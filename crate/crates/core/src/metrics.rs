//! Accuracy, one-vs-rest average precision, mAP and the cumulative
//! per-class difference between two models.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, softmax};

/// Per-example score vectors with their true labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPredictions {
    classes: usize,
    scores: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl ScoredPredictions {
    pub fn new(classes: usize, scores: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("predictions need at least one class"));
        }
        if scores.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} score rows but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        for (i, (row, &l)) in scores.iter().zip(&labels).enumerate() {
            if row.len() != classes {
                return Err(Error::invalid(format!(
                    "example {i}: {} scores, expected {classes}",
                    row.len()
                )));
            }
            if l >= classes {
                return Err(Error::invalid(format!("example {i}: label {l} out of range")));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("example {i}: non-finite score")));
            }
        }
        Ok(ScoredPredictions {
            classes,
            scores,
            labels,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn predicted(&self) -> Vec<usize> {
        self.scores.iter().map(|r| argmax(r)).collect()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.classes];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Number of correctly classified examples per true class.
    pub fn per_class_correct(&self) -> Vec<usize> {
        let mut correct = vec![0; self.classes];
        for (row, &l) in self.scores.iter().zip(&self.labels) {
            if argmax(row) == l {
                correct[l] += 1;
            }
        }
        correct
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub map: f64,
    pub per_class_ap: Vec<f64>,
    pub per_class_correct: Vec<usize>,
}

pub fn accuracy(preds: &ScoredPredictions) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("no predictions to score".into()));
    }
    let correct: usize = preds.per_class_correct().iter().sum();
    Ok(correct as f64 / preds.len() as f64)
}

/// Non-interpolated AP: mean of precision@r over the ranks r of positives.
/// Ranking is by descending score, ties by ascending example index.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::invalid("scores and positives differ in length"));
    }
    let total = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return Err(Error::invalid("average precision needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

/// Full report. Every class must have at least one test example.
pub fn map(preds: &ScoredPredictions) -> Result<EvalReport> {
    let acc = accuracy(preds)?;
    let sizes = preds.class_sizes();
    let empty: Vec<usize> = (0..preds.classes).filter(|&c| sizes[c] == 0).collect();
    if !empty.is_empty() {
        return Err(Error::invalid(format!("classes without test positives: {empty:?}")));
    }
    let mut per_class_ap = Vec::with_capacity(preds.classes);
    let mut column = vec![0.0; preds.len()];
    let mut positives = vec![false; preds.len()];
    for c in 0..preds.classes {
        for (i, (row, &l)) in preds.scores.iter().zip(&preds.labels).enumerate() {
            column[i] = row[c];
            positives[i] = l == c;
        }
        per_class_ap.push(average_precision(&column, &positives)?);
    }
    let map = per_class_ap.iter().sum::<f64>() / preds.classes as f64;
    Ok(EvalReport {
        accuracy: acc,
        map,
        per_class_ap,
        per_class_correct: preds.per_class_correct(),
    })
}

/// Per-class correct-count differences of two models, classes ordered by
/// ascending test size (ties by class index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeDifference {
    pub order: Vec<usize>,
    pub sizes: Vec<usize>,
    pub d: Vec<i64>,
    pub s: Vec<i64>,
}

impl CumulativeDifference {
    pub fn total(&self) -> i64 {
        self.s.last().copied().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,test_size,d,s\n");
        for i in 0..self.order.len() {
            let _ = writeln!(out, "{},{},{},{}", self.order[i], self.sizes[i], self.d[i], self.s[i]);
        }
        out
    }
}

/// `test_class_sizes` only fixes the ranking; it may come from a different
/// split than the predictions themselves.
pub fn cumulative_difference(
    a: &ScoredPredictions,
    b: &ScoredPredictions,
    test_class_sizes: &[usize],
) -> Result<CumulativeDifference> {
    if a.classes != b.classes || a.labels != b.labels {
        return Err(Error::invalid("models were scored on different test sets"));
    }
    if test_class_sizes.len() != a.classes {
        return Err(Error::invalid(format!(
            "{} class sizes for {} classes",
            test_class_sizes.len(),
            a.classes
        )));
    }
    let mut order: Vec<usize> = (0..a.classes).collect();
    order.sort_by_key(|&c| (test_class_sizes[c], c));
    let ca = a.per_class_correct();
    let cb = b.per_class_correct();
    let d: Vec<i64> = order.iter().map(|&c| ca[c] as i64 - cb[c] as i64).collect();
    let s = d
        .iter()
        .scan(0i64, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect();
    Ok(CumulativeDifference {
        sizes: order.iter().map(|&c| test_class_sizes[c]).collect(),
        order,
        d,
        s,
    })
}

/// Softmax of the summed branch logits.
pub fn ensemble_logits(a: &[Vec<f64>], b: &[Vec<f64>], labels: Vec<usize>) -> Result<ScoredPredictions> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{} rows vs {} rows", a.len(), b.len())));
    }
    let classes = a.first().map_or(0, Vec::len);
    let mut scores = Vec::with_capacity(a.len());
    for (i, (ra, rb)) in a.iter().zip(b).enumerate() {
        if ra.len() != rb.len() || ra.len() != classes {
            return Err(Error::invalid(format!("example {i}: logit shapes differ")));
        }
        let sum: Vec<f64> = ra.iter().zip(rb).map(|(x, y)| x + y).collect();
        scores.push(softmax(&sum));
    }
    ScoredPredictions::new(classes, scores, labels)
}

/// The imbalanced two-model fixture: a heavy majority plus small classes.
/// Model A is right on every majority example and sacrifices whole
/// minority classes, ranking their examples below everything else. Model B
/// misses the same number of examples but spreads the misses over the
/// majority, so every class keeps a clean ranking.
pub fn imbalanced_fixture() -> (ScoredPredictions, ScoredPredictions) {
    // Class sizes: one large class and four small ones.
    let sizes = [960usize, 10, 10, 10, 10];
    let classes = sizes.len();
    let mut labels = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        labels.extend(std::iter::repeat_n(c, n));
    }
    let one_hot = |hot: usize, strength: f64| -> Vec<f64> {
        let mut v = vec![(1.0 - strength) / (classes - 1) as f64; classes];
        v[hot] = strength;
        v
    };
    let mut sa = Vec::with_capacity(labels.len());
    let mut sb = Vec::with_capacity(labels.len());
    let mut majority_seen = 0;
    for &l in &labels {
        if l == 0 {
            sa.push(one_hot(0, 0.9));
            // B misclassifies 20 majority examples, spreading them as weak
            // votes for the small classes.
            if majority_seen < 20 {
                sb.push(one_hot(1 + majority_seen % 4, 0.4));
            } else {
                sb.push(one_hot(0, 0.9));
            }
            majority_seen += 1;
        } else if l <= 2 {
            // A sacrifices classes 1 and 2 outright, scoring them below
            // every majority example.
            sa.push(one_hot(0, 0.97));
            sb.push(one_hot(l, 0.9));
        } else {
            sa.push(one_hot(l, 0.9));
            sb.push(one_hot(l, 0.9));
        }
    }
    (
        ScoredPredictions::new(classes, sa, labels.clone()).expect("valid fixture"),
        ScoredPredictions::new(classes, sb, labels).expect("valid fixture"),
    )
}
