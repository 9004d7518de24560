//! Evaluation metrics: confusion counts, precision/recall/F2, normalized
//! confusion matrices, ROC curves with AUC, and an age-only logistic
//! regression baseline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, Subject};
use crate::error::{Error, Result};

/// Raw outcome tallies with PD as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// True when F2 = 1 only because there were no positives to find and
    /// none were claimed (tp = fn = fp = 0).
    pub fn f2_vacuous(&self) -> bool {
        self.tp == 0 && self.fn_ == 0 && self.fp == 0
    }
}

/// Tallies predictions against truth.
pub fn confusion(pred: &[Label], truth: &[Label]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction/truth length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot tally an empty prediction set".into(),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (Label::Pd, Label::Pd) => c.tp += 1,
            (Label::Hc, Label::Hc) => c.tn += 1,
            (Label::Pd, Label::Hc) => c.fp += 1,
            (Label::Hc, Label::Pd) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Row-stochastic 2×2 confusion matrix. By default rows are predicted
/// classes (row 0 = predicted HC, row 1 = predicted PD) and columns are
/// true classes; `by_truth` transposes to truth-rows. Rows whose class
/// never occurs are left all-zero.
pub fn normalized_matrix(c: &ConfusionCounts, by_truth: bool) -> [[f64; 2]; 2] {
    let raw = if by_truth {
        // rows: true HC, true PD; columns: predicted HC, PD
        [[c.tn, c.fp], [c.fn_, c.tp]]
    } else {
        // rows: predicted HC, PD; columns: true HC, PD
        [[c.tn, c.fn_], [c.fp, c.tp]]
    };
    let mut out = [[0.0; 2]; 2];
    for (row, counts) in out.iter_mut().zip(raw) {
        let sum = (counts[0] + counts[1]) as f64;
        if sum > 0.0 {
            row[0] = counts[0] as f64 / sum;
            row[1] = counts[1] as f64 / sum;
        }
    }
    out
}

/// Precision, recall, and F2 = 5·P·R / (4·P + R). Degenerate counts use
/// total conventions: precision = 0 when nothing was claimed positive,
/// recall = 0 when there were no positives, F2 = 0 when both are 0 —
/// except the vacuous all-negative-correct case, which scores 1.
pub fn precision_recall_f2(c: &ConfusionCounts) -> (f64, f64, f64) {
    if c.f2_vacuous() {
        return (0.0, 0.0, 1.0);
    }
    let precision = if c.tp + c.fp == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let recall = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let f2 = if precision == 0.0 && recall == 0.0 {
        0.0
    } else {
        5.0 * precision * recall / (4.0 * precision + recall)
    };
    (precision, recall, f2)
}

/// ROC curve and AUC from scores (higher = more PD-like). Thresholds sweep
/// the distinct scores in descending order with ties grouped, so the AUC
/// (trapezoidal rule, integer arithmetic) equals the pairwise-concordance
/// estimate with ties counted half.
pub fn roc_auc(scores: &[f64], truth: &[Label]) -> Result<(Vec<(f64, f64)>, f64)> {
    if scores.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "score/truth length mismatch: {} vs {}",
            scores.len(),
            truth.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite score at index {i}"
        )));
    }
    let positives = truth.iter().filter(|&&t| t == Label::Pd).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut area2 = 0u64; // twice the unnormalized area, exact
    let mut i = 0;
    while i < order.len() {
        // One threshold per distinct score: consume the whole tie group.
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (tp_prev, fp_prev) = (tp, fp);
        for &k in &order[i..j] {
            match truth[k] {
                Label::Pd => tp += 1,
                Label::Hc => fp += 1,
            }
        }
        area2 += ((fp - fp_prev) as u64) * ((tp_prev + tp) as u64);
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
        i = j;
    }
    let auc = area2 as f64 / (2.0 * positives as f64 * negatives as f64);
    Ok((points, auc))
}

/// One-feature logistic regression fitted by full-batch gradient descent.
#[derive(Debug, Clone)]
pub struct LogisticModel {
    pub weight: f64,
    pub bias: f64,
    pub loss_history: Vec<f64>,
}

impl LogisticModel {
    pub fn predict(&self, x: f64) -> Label {
        if self.weight * x + self.bias >= 0.0 {
            Label::Pd
        } else {
            Label::Hc
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stable per-sample cross-entropy: ln(1+e^z) − y·z without overflow.
fn bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// Fits y ≈ σ(w·x + b) with `iters` gradient steps of size `lr`, recording
/// the mean loss before each step.
pub fn logistic_fit(xs: &[f64], ys: &[f64], iters: usize, lr: f64) -> LogisticModel {
    assert_eq!(xs.len(), ys.len());
    assert!(!xs.is_empty());
    let n = xs.len() as f64;
    let mut w = 0.0;
    let mut b = 0.0;
    let mut loss_history = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut loss = 0.0;
        let mut gw = 0.0;
        let mut gb = 0.0;
        for (&x, &y) in xs.iter().zip(ys) {
            let z = w * x + b;
            loss += bce(z, y);
            let d = sigmoid(z) - y;
            gw += d * x;
            gb += d;
        }
        loss_history.push(loss / n);
        w -= lr * gw / n;
        b -= lr * gb / n;
    }
    LogisticModel {
        weight: w,
        bias: b,
        loss_history,
    }
}

const BASELINE_ITERS: usize = 1000;
const BASELINE_LR: f64 = 0.1;
const BASELINE_MIN_PER_CLASS: usize = 10;

/// Accuracy of age-only logistic regression on a seeded stratified 80/20
/// holdout. A reference point for how much of the label is explained by
/// age alone.
pub fn age_logistic_baseline(subjects: &[Subject], seed: u64) -> Result<f64> {
    let mut by_class: [Vec<&Subject>; 2] = [Vec::new(), Vec::new()];
    for s in subjects {
        by_class[s.label.class_index()].push(s);
    }
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::SingleClass);
    }
    if by_class.iter().any(|c| c.len() < BASELINE_MIN_PER_CLASS) {
        return Err(Error::InvalidArgument(format!(
            "age baseline needs at least {BASELINE_MIN_PER_CLASS} subjects per class"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train: Vec<&Subject> = Vec::new();
    let mut holdout: Vec<&Subject> = Vec::new();
    for class in by_class.iter_mut() {
        class.shuffle(&mut rng);
        let cut = (class.len() as f64 * 0.8).floor() as usize;
        train.extend(&class[..cut]);
        holdout.extend(&class[cut..]);
    }

    let mean = train.iter().map(|s| s.age as f64).sum::<f64>() / train.len() as f64;
    let var = train
        .iter()
        .map(|s| (s.age as f64 - mean).powi(2))
        .sum::<f64>()
        / train.len() as f64;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let z = |s: &Subject| (s.age as f64 - mean) / std;

    let xs: Vec<f64> = train.iter().map(|s| z(s)).collect();
    let ys: Vec<f64> = train.iter().map(|s| s.label.class_index() as f64).collect();
    let model = logistic_fit(&xs, &ys, BASELINE_ITERS, BASELINE_LR);

    let correct = holdout
        .iter()
        .filter(|s| model.predict(z(s)) == s.label)
        .count();
    Ok(correct as f64 / holdout.len() as f64)
}

/// Everything `eval` reports for one subject set. `roc_points`/`auc` are
/// absent when scores were unavailable or the truth is single-class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
    pub f2_vacuous: bool,
    /// Rows are predicted classes (HC, PD); columns are true classes.
    pub normalized_matrix: [[f64; 2]; 2],
    pub roc_points: Option<Vec<(f64, f64)>>,
    pub auc: Option<f64>,
}

impl ClassificationReport {
    /// Builds the full report; `scores` (P(PD) per sample) enable ROC/AUC
    /// unless the truth contains only one class.
    pub fn from_predictions(
        pred: &[Label],
        truth: &[Label],
        scores: Option<&[f64]>,
    ) -> Result<Self> {
        let counts = confusion(pred, truth)?;
        let (precision, recall, f2) = precision_recall_f2(&counts);
        let (roc_points, auc) = match scores {
            Some(s) => match roc_auc(s, truth) {
                Ok((points, auc)) => (Some(points), Some(auc)),
                Err(Error::SingleClass) => (None, None),
                Err(e) => return Err(e),
            },
            None => (None, None),
        };
        Ok(ClassificationReport {
            counts,
            accuracy: counts.accuracy(),
            precision,
            recall,
            f2,
            f2_vacuous: counts.f2_vacuous(),
            normalized_matrix: normalized_matrix(&counts, false),
            roc_points,
            auc,
        })
    }

    /// Line-oriented human-readable rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let c = self.counts;
        out.push_str(&format!(
            "samples: {}\ntp: {}  tn: {}  fp: {}  fn: {}\n",
            c.total(),
            c.tp,
            c.tn,
            c.fp,
            c.fn_
        ));
        out.push_str(&format!("accuracy: {:.4}\n", self.accuracy));
        out.push_str(&format!("precision: {:.4}\n", self.precision));
        out.push_str(&format!("recall: {:.4}\n", self.recall));
        let vacuous = if self.f2_vacuous { " (vacuous)" } else { "" };
        out.push_str(&format!("f2: {:.4}{vacuous}\n", self.f2));
        out.push_str("normalized confusion (rows = predicted HC, PD):\n");
        for row in &self.normalized_matrix {
            out.push_str(&format!("  [{:.4}, {:.4}]\n", row[0], row[1]));
        }
        match self.auc {
            Some(auc) => out.push_str(&format!("auc: {auc:.4}\n")),
            None => out.push_str("auc: undefined (no scores or single-class truth)\n"),
        }
        out
    }

    /// Machine-readable JSON rendering.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("cannot encode report: {e}")))
    }

    /// ROC points as two-column text (fpr tpr), one point per line.
    pub fn roc_text(&self) -> Option<String> {
        self.roc_points.as_ref().map(|points| {
            points
                .iter()
                .map(|(fpr, tpr)| format!("{fpr} {tpr}\n"))
                .collect()
        })
    }
}
