//! Evaluation metrics: confusion matrix, overall and per-class accuracy,
//! per-class IoU, subset mIoU, and the harmonic mean of seen/unseen scores.
//!
//! Classes absent from both truth and prediction are flagged undefined and
//! excluded from means rather than counted as zero.

use crate::data::{ClassId, SplitConfig};
use crate::error::{GzslError, Result};

/// C x C counts, rows = ground truth, columns = prediction, with the class
/// ordering recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    class_ids: Vec<ClassId>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_ids: Vec<ClassId>) -> Result<Self> {
        if class_ids.is_empty() {
            return Err(GzslError::arg("confusion matrix needs at least one class"));
        }
        let mut sorted = class_ids.clone();
        sorted.dedup();
        if sorted.len() != class_ids.len() {
            return Err(GzslError::arg("confusion matrix classes must be distinct"));
        }
        let n = class_ids.len();
        Ok(ConfusionMatrix {
            class_ids,
            counts: vec![0; n * n],
        })
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn size(&self) -> usize {
        self.class_ids.len()
    }

    pub fn index_of(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    pub fn count(&self, truth_idx: usize, pred_idx: usize) -> u64 {
        self.counts[truth_idx * self.size() + pred_idx]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.size()).map(|i| self.count(i, i)).sum()
    }

    pub fn row_sum(&self, truth_idx: usize) -> u64 {
        (0..self.size()).map(|j| self.count(truth_idx, j)).sum()
    }

    pub fn col_sum(&self, pred_idx: usize) -> u64 {
        (0..self.size()).map(|i| self.count(i, pred_idx)).sum()
    }

    /// Adds one `(truth, prediction)` pair per position.
    pub fn accumulate(&mut self, truths: &[ClassId], predictions: &[ClassId]) -> Result<()> {
        if truths.len() != predictions.len() {
            return Err(GzslError::shape(format!(
                "accumulate: {} truths vs {} predictions",
                truths.len(),
                predictions.len()
            )));
        }
        let n = self.size();
        for (&t, &p) in truths.iter().zip(predictions) {
            let ti = self
                .index_of(t)
                .ok_or_else(|| GzslError::arg(format!("label {t} not in the class set")))?;
            let pi = self
                .index_of(p)
                .ok_or_else(|| GzslError::arg(format!("label {p} not in the class set")))?;
            self.counts[ti * n + pi] += 1;
        }
        Ok(())
    }

    /// Elementwise addition; shards evaluated in parallel merge this way.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.class_ids != other.class_ids {
            return Err(GzslError::arg("merging confusion matrices over different classes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Builds directly from counts, row-major. Test and I/O helper.
    pub fn from_counts(class_ids: Vec<ClassId>, counts: Vec<u64>) -> Result<Self> {
        let n = class_ids.len();
        if counts.len() != n * n {
            return Err(GzslError::shape(format!(
                "{n} classes need {} counts, got {}",
                n * n,
                counts.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(class_ids)?;
        cm.counts = counts;
        Ok(cm)
    }
}

/// `IoU_c = TP / (TP + FP + FN)`; `None` when the class never occurs in
/// either truth or prediction.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.size())
        .map(|c| {
            let tp = cm.count(c, c);
            let fp = cm.col_sum(c) - tp;
            let fn_ = cm.row_sum(c) - tp;
            let denom = tp + fp + fn_;
            if denom == 0 {
                None
            } else {
                Some(tp as f64 / denom as f64)
            }
        })
        .collect()
}

/// Per-class accuracy (recall): `diag / row sum`, undefined on empty rows.
pub fn recall_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.size())
        .map(|c| {
            let row = cm.row_sum(c);
            if row == 0 {
                None
            } else {
                Some(cm.count(c, c) as f64 / row as f64)
            }
        })
        .collect()
}

fn subset_mean(values: &[Option<f64>], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, v) in values.iter().enumerate() {
        if let Some(x) = v {
            if keep(i) {
                sum += x;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Unweighted mean of the defined per-class IoUs within the seen subset,
/// the unseen subset, and over all classes (not the mean of the two subset
/// means).
pub fn miou_subsets(
    cm: &ConfusionMatrix,
    split: &SplitConfig,
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    for &c in cm.class_ids() {
        if !split.contains(c) {
            return Err(GzslError::arg(format!("split does not cover class {c}")));
        }
    }
    let ious = iou_per_class(cm);
    let seen = subset_mean(&ious, |i| split.is_seen(cm.class_ids[i]));
    let unseen = subset_mean(&ious, |i| split.is_unseen(cm.class_ids[i]));
    let all = subset_mean(&ious, |_| true);
    Ok((seen, unseen, all))
}

/// `2ab / (a + b)`, and 0 when both inputs are 0. Works in any consistent
/// units (fractions or percentages).
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if a < 0.0 || b < 0.0 {
        return Err(GzslError::arg("harmonic mean of a negative value"));
    }
    if a + b == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * a * b / (a + b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub class_ids: Vec<ClassId>,
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
    pub accuracy_seen: Option<f64>,
    pub accuracy_unseen: Option<f64>,
    pub miou_seen: Option<f64>,
    pub miou_unseen: Option<f64>,
    pub miou_all: Option<f64>,
    /// Harmonic mean of the seen and unseen mean recalls.
    pub hm_accuracy: Option<f64>,
    /// Harmonic mean of the seen and unseen mIoU.
    pub hm_miou: Option<f64>,
}

/// Full report from a confusion matrix: overall accuracy is `trace/total`;
/// subset accuracies are unweighted means of per-class recalls.
pub fn build_report(cm: &ConfusionMatrix, split: &SplitConfig) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(GzslError::arg("confusion matrix is empty"));
    }
    let per_class_accuracy = recall_per_class(cm);
    let per_class_iou = iou_per_class(cm);
    let accuracy_seen = subset_mean(&per_class_accuracy, |i| split.is_seen(cm.class_ids[i]));
    let accuracy_unseen = subset_mean(&per_class_accuracy, |i| split.is_unseen(cm.class_ids[i]));
    let (miou_seen, miou_unseen, miou_all) = miou_subsets(cm, split)?;
    let hm = |a: Option<f64>, b: Option<f64>| -> Result<Option<f64>> {
        match (a, b) {
            (Some(a), Some(b)) => Ok(Some(harmonic_mean(a, b)?)),
            _ => Ok(None),
        }
    };
    Ok(MetricsReport {
        class_ids: cm.class_ids.clone(),
        overall_accuracy: cm.trace() as f64 / total as f64,
        hm_accuracy: hm(accuracy_seen, accuracy_unseen)?,
        hm_miou: hm(miou_seen, miou_unseen)?,
        per_class_accuracy,
        per_class_iou,
        accuracy_seen,
        accuracy_unseen,
        miou_seen,
        miou_unseen,
        miou_all,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "undefined".to_string(),
    }
}

/// Human-readable table.
pub fn report_text(report: &MetricsReport, name_of: impl Fn(ClassId) -> String) -> String {
    let mut out = String::new();
    out.push_str("metric                value\n");
    out.push_str(&format!("overall_accuracy      {:.6}\n", report.overall_accuracy));
    out.push_str(&format!("accuracy_seen         {}\n", fmt_opt(report.accuracy_seen)));
    out.push_str(&format!("accuracy_unseen       {}\n", fmt_opt(report.accuracy_unseen)));
    out.push_str(&format!("hm_accuracy           {}\n", fmt_opt(report.hm_accuracy)));
    out.push_str(&format!("miou_seen             {}\n", fmt_opt(report.miou_seen)));
    out.push_str(&format!("miou_unseen           {}\n", fmt_opt(report.miou_unseen)));
    out.push_str(&format!("miou_all              {}\n", fmt_opt(report.miou_all)));
    out.push_str(&format!("hm_miou               {}\n", fmt_opt(report.hm_miou)));
    out.push('\n');
    out.push_str("class                 accuracy     iou\n");
    for (i, &id) in report.class_ids.iter().enumerate() {
        out.push_str(&format!(
            "{:<20}  {:<11}  {}\n",
            name_of(id),
            fmt_opt(report.per_class_accuracy[i]),
            fmt_opt(report.per_class_iou[i]),
        ));
    }
    out
}

/// `metric,value` rows. Undefined entries render as empty values.
pub fn report_csv(report: &MetricsReport, name_of: impl Fn(ClassId) -> String) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.12}")).unwrap_or_default();
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("overall_accuracy,{:.12}\n", report.overall_accuracy));
    out.push_str(&format!("accuracy_seen,{}\n", opt(report.accuracy_seen)));
    out.push_str(&format!("accuracy_unseen,{}\n", opt(report.accuracy_unseen)));
    out.push_str(&format!("hm_accuracy,{}\n", opt(report.hm_accuracy)));
    out.push_str(&format!("miou_seen,{}\n", opt(report.miou_seen)));
    out.push_str(&format!("miou_unseen,{}\n", opt(report.miou_unseen)));
    out.push_str(&format!("miou_all,{}\n", opt(report.miou_all)));
    out.push_str(&format!("hm_miou,{}\n", opt(report.hm_miou)));
    for (i, &id) in report.class_ids.iter().enumerate() {
        out.push_str(&format!(
            "accuracy_{},{}\n",
            name_of(id),
            opt(report.per_class_accuracy[i])
        ));
        out.push_str(&format!("iou_{},{}\n", name_of(id), opt(report.per_class_iou[i])));
    }
    out
}

/// CSV grid: header row of class names, then one row per ground-truth class.
pub fn confusion_csv(cm: &ConfusionMatrix, name_of: impl Fn(ClassId) -> String) -> String {
    let names: Vec<String> = cm.class_ids.iter().map(|&id| name_of(id)).collect();
    let mut out = format!("truth\\pred,{}\n", names.join(","));
    for (i, name) in names.iter().enumerate() {
        let row: Vec<String> = (0..cm.size()).map(|j| cm.count(i, j).to_string()).collect();
        out.push_str(&format!("{name},{}\n", row.join(",")));
    }
    out
}
