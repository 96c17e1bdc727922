//! Patient-grouped splitting and classification metrics: accuracy, macro
//! one-vs-rest mean average precision, per-class F-score and Cohen's kappa,
//! plus report serialization.

use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};

/// Group-respecting train/test split: no group id ever appears on both sides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_image_ids: Vec<String>,
    pub test_image_ids: Vec<String>,
    pub seed: u64,
}

/// Shuffle the groups with the seed and greedily assign whole groups to the
/// train side until its image-count fraction reaches `train_frac`.
pub fn split_by_group(
    items: &[(String, String)],
    train_frac: f64,
    seed: u64,
) -> Result<SplitPlan> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_frac must be in (0,1), got {train_frac}"
        )));
    }
    let mut groups: Vec<String> = items.iter().map(|(_, g)| g.clone()).collect();
    groups.sort_unstable();
    groups.dedup();
    if groups.len() < 2 {
        return Err(Error::InvalidConfig("need at least 2 groups to split".into()));
    }
    groups.shuffle(&mut rng::stream(seed, &[domain::SPLIT]));

    let total = items.len();
    let mut train_groups: Vec<&String> = Vec::new();
    let mut train_count = 0usize;
    let mut iter = groups.iter();
    while (train_count as f64) < train_frac * total as f64 {
        let g = iter.next().expect("fraction < 1 leaves groups");
        train_count += items.iter().filter(|(_, ig)| ig == g).count();
        train_groups.push(g);
    }
    if train_groups.len() == groups.len() {
        return Err(Error::InvalidConfig(
            "train_frac leaves no test groups; lower it or add groups".into(),
        ));
    }
    let mut train_image_ids = Vec::new();
    let mut test_image_ids = Vec::new();
    for (id, g) in items {
        if train_groups.iter().any(|tg| *tg == g) {
            train_image_ids.push(id.clone());
        } else {
            test_image_ids.push(id.clone());
        }
    }
    Ok(SplitPlan { train_image_ids, test_image_ids, seed })
}

/// Row-major counts, rows = ground truth, cols = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_count: usize,
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn get(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.class_count + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        self.counts.chunks(self.class_count).map(|r| r.to_vec()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.class_count).map(|c| format!("pred_{c}")).collect();
        out.push_str(&format!("truth,{}\n", header.join(",")));
        for (t, row) in self.counts.chunks(self.class_count).enumerate() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{t},{}\n", cells.join(",")));
        }
        out
    }
}

pub fn confusion_matrix(
    truth: &[usize],
    predictions: &[usize],
    class_count: usize,
) -> Result<ConfusionMatrix> {
    if truth.len() != predictions.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} truths vs {} predictions",
            truth.len(),
            predictions.len()
        )));
    }
    let mut counts = vec![0usize; class_count * class_count];
    for (&t, &p) in truth.iter().zip(predictions) {
        if t >= class_count || p >= class_count {
            return Err(Error::InvalidArgument(format!(
                "label ({t},{p}) outside [0,{class_count})"
            )));
        }
        counts[t * class_count + p] += 1;
    }
    Ok(ConfusionMatrix { class_count, counts })
}

/// trace / total.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyInput("empty confusion matrix".into()));
    }
    let trace: usize = (0..cm.class_count).map(|c| cm.get(c, c)).sum();
    Ok(trace as f64 / total as f64)
}

/// F = 2PR/(P+R), defined as 0 when P+R = 0 (including the degenerate class
/// with zero predictions and zero truths).
pub fn f_score(cm: &ConfusionMatrix, class: usize) -> f64 {
    let tp = cm.get(class, class) as f64;
    let pred_sum: usize = (0..cm.class_count).map(|t| cm.get(t, class)).sum();
    let truth_sum: usize = (0..cm.class_count).map(|p| cm.get(class, p)).sum();
    let precision = if pred_sum == 0 { 0.0 } else { tp / pred_sum as f64 };
    let recall = if truth_sum == 0 { 0.0 } else { tp / truth_sum as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Average precision with descending-score ranking, ties broken by stable
/// input order: the mean over positives of precision at each positive's rank.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} positives",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores must be finite".into()));
    }
    let positive_count = positives.iter().filter(|&&p| p).count();
    if positive_count == 0 {
        return Err(Error::EmptyInput("average precision needs >= 1 positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut seen_positives = 0usize;
    let mut precision_sum = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if positives[idx] {
            seen_positives += 1;
            precision_sum += seen_positives as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(precision_sum / positive_count as f64)
}

/// Macro one-vs-rest mAP over classes with at least one positive; classes
/// without positives are excluded with a warning.
pub fn mean_average_precision(
    class_scores: &[Vec<f64>],
    truth: &[usize],
    class_count: usize,
) -> Result<f64> {
    if class_scores.len() != truth.len() {
        return Err(Error::DimensionMismatch(
            "class_scores and truth lengths differ".into(),
        ));
    }
    let mut aps = Vec::new();
    for class in 0..class_count {
        let positives: Vec<bool> = truth.iter().map(|&t| t == class).collect();
        if !positives.iter().any(|&p| p) {
            log::warn!("class {class} has no positives; excluded from mAP");
            continue;
        }
        let scores: Vec<f64> = class_scores.iter().map(|s| s[class]).collect();
        aps.push(average_precision(&scores, &positives)?);
    }
    if aps.is_empty() {
        return Err(Error::EmptyInput("no class had positives".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Collapse a multiclass matrix to 2x2 target-vs-rest (index 0 = target).
pub fn binary_collapse(cm: &ConfusionMatrix, target: usize) -> Result<ConfusionMatrix> {
    if target >= cm.class_count {
        return Err(Error::InvalidArgument(format!(
            "target {target} outside [0,{})",
            cm.class_count
        )));
    }
    let mut counts = vec![0usize; 4];
    for t in 0..cm.class_count {
        for p in 0..cm.class_count {
            let bt = usize::from(t != target);
            let bp = usize::from(p != target);
            counts[bt * 2 + bp] += cm.get(t, p);
        }
    }
    Ok(ConfusionMatrix { class_count: 2, counts })
}

/// Cohen's kappa of a 2x2 matrix: (p_o - p_e) / (1 - p_e), with the p_e = 1
/// degenerate case defined as 1 when agreement is perfect and 0 otherwise.
pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.class_count != 2 {
        return Err(Error::InvalidArgument("kappa requires a 2x2 matrix".into()));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyInput("empty confusion matrix".into()));
    }
    let n = total as f64;
    let p_o = (cm.get(0, 0) + cm.get(1, 1)) as f64 / n;
    let truth0 = (cm.get(0, 0) + cm.get(0, 1)) as f64 / n;
    let pred0 = (cm.get(0, 0) + cm.get(1, 0)) as f64 / n;
    let p_e = truth0 * pred0 + (1.0 - truth0) * (1.0 - pred0);
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(if (p_o - 1.0).abs() < 1e-15 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Evaluation summary for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub accuracy: f64,
    pub mean_average_precision: f64,
    pub per_class_f_score: Vec<f64>,
    /// One-vs-rest kappa per class, mirroring binary collapses of the task.
    pub kappa_vs_rest: Vec<f64>,
    pub confusion_matrix: Vec<Vec<usize>>,
    pub config_echo: serde_json::Value,
    pub seed: u64,
}

impl Report {
    pub fn from_predictions(
        truth: &[usize],
        predictions: &[usize],
        class_scores: &[Vec<f64>],
        class_count: usize,
        config_echo: serde_json::Value,
        seed: u64,
    ) -> Result<Report> {
        let cm = confusion_matrix(truth, predictions, class_count)?;
        let acc = accuracy(&cm)?;
        let map = mean_average_precision(class_scores, truth, class_count)?;
        let per_class_f_score = (0..class_count).map(|c| f_score(&cm, c)).collect();
        let kappa_vs_rest = (0..class_count)
            .map(|c| cohens_kappa(&binary_collapse(&cm, c)?))
            .collect::<Result<_>>()?;
        Ok(Report {
            accuracy: acc,
            mean_average_precision: map,
            per_class_f_score,
            kappa_vs_rest,
            confusion_matrix: cm.rows(),
            config_echo,
            seed,
        })
    }

    /// Aligned plain-text rendering with fixed 4-decimal formatting.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<26}{:>8.4}\n", "accuracy", self.accuracy));
        out.push_str(&format!(
            "{:<26}{:>8.4}\n",
            "mean_average_precision", self.mean_average_precision
        ));
        for (c, f) in self.per_class_f_score.iter().enumerate() {
            out.push_str(&format!("{:<26}{:>8.4}\n", format!("f_score[{c}]"), f));
        }
        for (c, k) in self.kappa_vs_rest.iter().enumerate() {
            out.push_str(&format!("{:<26}{:>8.4}\n", format!("kappa[{c} vs rest]"), k));
        }
        out.push_str("confusion (rows = ground truth):\n");
        for row in &self.confusion_matrix {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
            out.push_str(&format!("  {}\n", cells.join(" ")));
        }
        out
    }
}
