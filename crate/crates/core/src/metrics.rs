//! Confusion matrix, one-vs-rest scalar metrics, ROC AUC and report tables.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// `counts[t][p]` = examples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub labels: Vec<String>,
}

/// One-vs-rest counts for a single class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(true_labels: &[usize], predicted: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted.len() {
        return Err(Error::InvalidArgument(format!("{} true labels but {} predictions", true_labels.len(), predicted.len())));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in true_labels.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::InvalidArgument(format!("label {} out of range for {k} classes", t.max(p))));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts, labels: (0..k).map(|i| i.to_string()).collect() })
}

impl ConfusionMatrix {
    /// Two-class matrix with class 1 as the positive class.
    pub fn binary(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionMatrix { counts: vec![vec![tn, fp], vec![fn_, tp]], labels: vec!["negative".into(), "positive".into()] }
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.counts.len() {
            return Err(Error::InvalidArgument(format!("{} labels for {} classes", labels.len(), self.counts.len())));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn one_vs_rest(&self, class: usize) -> BinaryCounts {
        let tp = self.counts[class][class];
        let row: u64 = self.counts[class].iter().sum();
        let col: u64 = self.counts.iter().map(|r| r[class]).sum();
        BinaryCounts { tp, fp: col - tp, fn_: row - tp, tn: self.total() + tp - row - col }
    }

    /// Header `true\predicted,<labels…>`, then one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(&csv_field(l));
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Set when a ratio had a zero denominator and was reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct UndefinedFlags {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
    pub fpr: bool,
}

impl UndefinedFlags {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1 || self.fpr
    }

    fn merge(&mut self, other: UndefinedFlags) {
        self.precision |= other.precision;
        self.recall |= other.recall;
        self.f1 |= other.f1;
        self.fpr |= other.fpr;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub counts: BinaryCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub undefined: UndefinedFlags,
}

fn ratio(num: u64, den: u64, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ClassMetrics {
    pub fn from_counts(c: BinaryCounts) -> Self {
        let mut undefined = UndefinedFlags::default();
        let precision = ratio(c.tp, c.tp + c.fp, &mut undefined.precision);
        let recall = ratio(c.tp, c.tp + c.fn_, &mut undefined.recall);
        let fpr = ratio(c.fp, c.fp + c.tn, &mut undefined.fpr);
        let f1 = if precision + recall == 0.0 {
            undefined.f1 = true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics { counts: c, precision, recall, f1, fpr, undefined }
    }
}

/// Precision, recall, F1 and false-positive rate under one aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
}

/// Per-class one-vs-rest ROC AUC and its macro average.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AucReport {
    /// `None` for classes without both positives and negatives.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with a defined AUC; 0 when there are none.
    pub macro_auc: f64,
    pub excluded: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Aggregate,
    pub micro_avg: Aggregate,
    /// Union of the per-class and micro flags.
    pub undefined: UndefinedFlags,
    pub auc: Option<AucReport>,
}

pub fn scalar_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 || cm.num_classes() == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let k = cm.num_classes();
    let per_class: Vec<ClassMetrics> = (0..k).map(|c| ClassMetrics::from_counts(cm.one_vs_rest(c))).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let macro_avg = Aggregate { precision: mean(|m| m.precision), recall: mean(|m| m.recall), f1: mean(|m| m.f1), fpr: mean(|m| m.fpr) };
    let pooled = per_class.iter().fold(BinaryCounts { tp: 0, fp: 0, fn_: 0, tn: 0 }, |a, m| BinaryCounts {
        tp: a.tp + m.counts.tp,
        fp: a.fp + m.counts.fp,
        fn_: a.fn_ + m.counts.fn_,
        tn: a.tn + m.counts.tn,
    });
    let micro = ClassMetrics::from_counts(pooled);
    let mut undefined = micro.undefined;
    for m in &per_class {
        undefined.merge(m.undefined);
    }
    Ok(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        per_class,
        macro_avg,
        micro_avg: Aggregate { precision: micro.precision, recall: micro.recall, f1: micro.f1, fpr: micro.fpr },
        undefined,
        auc: None,
    })
}

/// Area under the ROC curve of one binary problem, by a descending
/// threshold sweep with tied scores entering together.
fn binary_auc(mut scored: Vec<(f64, bool)>) -> Option<f64> {
    let pos = scored.iter().filter(|(_, p)| *p).count() as u64;
    let neg = scored.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Twice the area in units of one (positive, negative) cell.
    let (mut tp, mut fp, mut twice_area) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < scored.len() {
        let (prev_tp, prev_fp) = (tp, fp);
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - prev_fp) * (tp + prev_tp);
    }
    Some(twice_area as f64 / (2 * pos * neg) as f64)
}

/// One-vs-rest ROC AUC per class with its macro average.
pub fn roc_auc(true_labels: &[usize], class_scores: &[Vec<f64>], k: usize) -> Result<AucReport> {
    if true_labels.len() != class_scores.len() {
        return Err(Error::InvalidArgument(format!("{} labels but {} score vectors", true_labels.len(), class_scores.len())));
    }
    for (i, (t, s)) in true_labels.iter().zip(class_scores).enumerate() {
        if *t >= k || s.len() != k || s.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "example {i}: label {t} or score vector of length {} invalid for {k} classes",
                s.len()
            )));
        }
    }
    let per_class: Vec<Option<f64>> =
        (0..k).map(|c| binary_auc(true_labels.iter().zip(class_scores).map(|(&t, s)| (s[c], t == c)).collect())).collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    Ok(AucReport { excluded: (0..k).filter(|&c| per_class[c].is_none()).collect(), per_class, macro_auc })
}

/// Confusion matrix, scalar metrics and AUC from predicted distributions.
pub fn evaluate(true_labels: &[usize], class_scores: &[Vec<f64>], k: usize) -> Result<MetricsReport> {
    let predicted: Vec<usize> = class_scores.iter().map(|s| crate::model::argmax(s)).collect();
    let cm = confusion(true_labels, &predicted, k)?;
    let mut report = scalar_metrics(&cm)?;
    report.auc = Some(roc_auc(true_labels, class_scores, k)?);
    Ok(report)
}

/// `100·x` rounded half away from zero to two decimals.
pub fn percent_2dp(x: f64) -> String {
    let hundredths = x * 10_000.0;
    // Clean binary noise such as 1234.4999999997 before rounding.
    let cleaned = (hundredths * 1e6).round() / 1e6;
    format!("{:.2}", cleaned.round() / 100.0)
}

pub const REPORT_CSV_HEADER: &str = "model_name,accuracy,recall_macro,precision_macro,f1_macro,auc_macro";
pub const REPORT_COLUMNS: [&str; 5] = ["Accuracy (%)", "Recall (%)", "Precision (%)", "F1-score (%)", "AUC-ROC (%)"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportTable {
    pub csv: String,
    pub text: String,
}

/// Comparison table over named reports; a missing AUC prints as `n/a`.
pub fn report_table(reports: &[(String, MetricsReport)]) -> Result<ReportTable> {
    if reports.is_empty() {
        return Err(Error::Empty("report list"));
    }
    let rows: Vec<(String, [String; 5])> = reports
        .iter()
        .map(|(name, r)| {
            let auc = r.auc.as_ref().map_or("n/a".to_owned(), |a| percent_2dp(a.macro_auc));
            (
                name.clone(),
                [
                    percent_2dp(r.accuracy),
                    percent_2dp(r.macro_avg.recall),
                    percent_2dp(r.macro_avg.precision),
                    percent_2dp(r.macro_avg.f1),
                    auc,
                ],
            )
        })
        .collect();

    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    for (name, cells) in &rows {
        let _ = writeln!(csv, "{},{}", csv_field(name), cells.join(","));
    }

    let name_w = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max("Model".len());
    let widths: Vec<usize> =
        REPORT_COLUMNS.iter().enumerate().map(|(j, h)| rows.iter().map(|(_, c)| c[j].len()).max().unwrap_or(0).max(h.len())).collect();
    let mut text = format!("{:<name_w$}", "Model");
    for (h, w) in REPORT_COLUMNS.iter().zip(&widths) {
        let _ = write!(text, "  {h:>w$}");
    }
    text.push('\n');
    for (name, cells) in &rows {
        let _ = write!(text, "{name:<name_w$}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(text, "  {c:>w$}");
        }
        text.push('\n');
    }
    Ok(ReportTable { csv, text })
}

/// Per-class CSV: `class,precision,recall,f1,fpr,tp,fp,fn,tn,auc`.
pub fn per_class_csv(report: &MetricsReport, labels: &[String]) -> String {
    let mut out = String::from("class,precision,recall,f1,fpr,tp,fp,fn,tn,auc\n");
    for (c, m) in report.per_class.iter().enumerate() {
        let label = labels.get(c).cloned().unwrap_or_else(|| c.to_string());
        let auc = report.auc.as_ref().and_then(|a| a.per_class[c]).map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            csv_field(&label),
            m.precision,
            m.recall,
            m.f1,
            m.fpr,
            m.counts.tp,
            m.counts.fp,
            m.counts.fn_,
            m.counts.tn,
            auc
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// P(score⁺ > score⁻) + ½·P(tie) over every positive/negative pair.
    fn pairwise_auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        (pairs > 0.0).then(|| wins / pairs)
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let cm = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let r = scalar_metrics(&cm).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for m in &r.per_class {
            assert_eq!((m.precision, m.recall, m.f1, m.fpr), (1.0, 1.0, 1.0, 0.0));
        }
        assert_eq!(r.macro_avg.f1, 1.0);
    }

    #[test]
    fn empty_input_is_zero_matrix() {
        let cm = confusion(&[], &[], 3).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.counts.iter().flatten().all(|&c| c == 0));
        assert!(matches!(scalar_metrics(&cm), Err(Error::Empty(_))));
    }

    #[test]
    fn hand_tally() {
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [0, 1, 1, 1, 0, 2];
        let cm = confusion(&truth, &pred, 3).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1, 0], vec![0, 2, 0], vec![1, 0, 1]]);
        assert_eq!(cm.one_vs_rest(0), BinaryCounts { tp: 1, fp: 1, fn_: 1, tn: 3 });
        assert!(confusion(&[3], &[0], 3).is_err());
        assert!(confusion(&[0, 1], &[0], 3).is_err());
    }

    #[test]
    fn binary_substitution() {
        let r = scalar_metrics(&ConfusionMatrix::binary(2, 3, 1, 0)).unwrap();
        let pos = r.per_class[1];
        assert!((r.accuracy - 5.0 / 6.0).abs() < 1e-15);
        assert!((pos.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(pos.recall, 1.0);
        assert!((pos.f1 - 0.8).abs() < 1e-15);
        assert!((pos.fpr - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_denominator_sets_flag() {
        let r = scalar_metrics(&ConfusionMatrix::binary(0, 5, 0, 2)).unwrap();
        let pos = r.per_class[1];
        assert_eq!(pos.precision, 0.0);
        assert!(pos.undefined.precision);
        assert!(pos.undefined.f1);
        assert!(!pos.undefined.recall);
        assert!(r.undefined.precision);
    }

    #[test]
    fn auc_analytic_cases() {
        let labels = [0, 0, 1, 1];
        let separating = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.1, 0.9]];
        let a = roc_auc(&labels, &separating, 2).unwrap();
        assert_eq!(a.macro_auc, 1.0);
        let flat = vec![vec![0.5, 0.5]; 4];
        assert_eq!(roc_auc(&labels, &flat, 2).unwrap().macro_auc, 0.5);
    }

    #[test]
    fn auc_four_example_hand_case() {
        let labels = [1, 0, 1, 0];
        let scores = vec![vec![0.4, 0.6], vec![0.6, 0.4], vec![0.6, 0.4], vec![0.2, 0.8]];
        let a = roc_auc(&labels, &scores, 2).unwrap();
        // Class 1 pairs: (0.6 vs 0.4) win, (0.6 vs 0.8) loss, (0.4 vs 0.4) tie, (0.4 vs 0.8) loss.
        assert_eq!(a.per_class[1], Some(0.375));
        let truth: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        let s1: Vec<f64> = scores.iter().map(|s| s[1]).collect();
        assert_eq!(a.per_class[1], pairwise_auc(&truth, &s1));
    }

    #[test]
    fn class_without_positives_is_excluded() {
        let labels = [0, 1, 0, 1];
        let scores = vec![vec![0.7, 0.2, 0.1], vec![0.2, 0.7, 0.1], vec![0.6, 0.3, 0.1], vec![0.3, 0.6, 0.1]];
        let a = roc_auc(&labels, &scores, 3).unwrap();
        assert_eq!(a.excluded, vec![2]);
        assert_eq!(a.per_class[2], None);
        assert_eq!(a.macro_auc, 1.0);
        let none = roc_auc(&[0, 0], &[vec![0.5, 0.5], vec![0.4, 0.6]], 2).unwrap();
        assert_eq!(none.macro_auc, 0.0);
        assert_eq!(none.excluded, vec![0, 1]);
    }

    #[test]
    fn auc_rejects_bad_inputs() {
        assert!(roc_auc(&[0], &[vec![0.5, 0.5], vec![0.5, 0.5]], 2).is_err());
        assert!(roc_auc(&[2], &[vec![0.5, 0.5]], 2).is_err());
        assert!(roc_auc(&[0], &[vec![f64::NAN, 0.5]], 2).is_err());
        assert!(roc_auc(&[0], &[vec![1.0]], 2).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(percent_2dp(1.0), "100.00");
        assert_eq!(percent_2dp(0.123_45), "12.35");
        assert_eq!(percent_2dp(0.123_449), "12.34");
        assert_eq!(percent_2dp(0.000_05), "0.01");
        assert_eq!(percent_2dp(5.0 / 6.0), "83.33");
        assert_eq!(percent_2dp(0.0), "0.00");
    }

    #[test]
    fn perfect_model_table_row() {
        let cm = confusion(&[0, 1, 1, 2], &[0, 1, 1, 2], 3).unwrap();
        let mut r = scalar_metrics(&cm).unwrap();
        r.auc =
            Some(roc_auc(&[0, 1, 1, 2], &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], 3).unwrap());
        let t = report_table(&[("perfect".into(), r)]).unwrap();
        assert_eq!(t.csv, format!("{REPORT_CSV_HEADER}\nperfect,100.00,100.00,100.00,100.00,100.00\n"));
        let lines: Vec<&str> = t.text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].len(), lines[1].len());
        let header: Vec<&str> = lines[0].split("  ").map(str::trim).filter(|s| !s.is_empty()).collect();
        assert_eq!(header, ["Model", "Accuracy (%)", "Recall (%)", "Precision (%)", "F1-score (%)", "AUC-ROC (%)"]);
        assert!(report_table(&[]).is_err());
    }

    #[test]
    fn confusion_csv_layout() {
        let cm = confusion(&[0, 1], &[1, 1], 2).unwrap().with_labels(vec!["flu".into(), "a,b".into()]).unwrap();
        assert_eq!(cm.to_csv(), "true\\predicted,flu,\"a,b\"\nflu,0,1\n\"a,b\",0,1\n");
    }

    fn confusion_strategy() -> impl Strategy<Value = ConfusionMatrix> {
        (2usize..6).prop_flat_map(|k| {
            proptest::collection::vec(proptest::collection::vec(0u64..20, k), k)
                .prop_map(move |counts| ConfusionMatrix { counts, labels: (0..k).map(|i| i.to_string()).collect() })
        })
    }

    proptest! {
        #[test]
        fn micro_precision_recall_equal_accuracy(cm in confusion_strategy()) {
            prop_assume!(cm.total() > 0);
            let r = scalar_metrics(&cm).unwrap();
            prop_assert!((r.micro_avg.precision - r.accuracy).abs() < 1e-12);
            prop_assert!((r.micro_avg.recall - r.accuracy).abs() < 1e-12);
            for m in &r.per_class {
                for v in [m.precision, m.recall, m.f1, m.fpr] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                prop_assert!(m.f1 <= m.precision.max(m.recall) + 1e-15);
                if m.precision == m.recall {
                    prop_assert!((m.f1 - m.precision).abs() < 1e-15);
                }
            }
        }

        #[test]
        fn sweep_matches_pairwise_oracle(
            rows in proptest::collection::vec((0usize..3, proptest::collection::vec(0u8..6, 3)), 1..50)
        ) {
            let labels: Vec<usize> = rows.iter().map(|(l, _)| *l).collect();
            // Coarse integer scores make ties common.
            let scores: Vec<Vec<f64>> = rows
                .iter()
                .map(|(_, s)| {
                    let total: f64 = s.iter().map(|&v| v as f64 + 1.0).sum();
                    s.iter().map(|&v| (v as f64 + 1.0) / total).collect()
                })
                .collect();
            let a = roc_auc(&labels, &scores, 3).unwrap();
            for c in 0..3 {
                let truth: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
                match (a.per_class[c], pairwise_auc(&truth, &col)) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}"),
                    (None, None) => {}
                    other => prop_assert!(false, "{other:?}"),
                }
            }
        }
    }
}
