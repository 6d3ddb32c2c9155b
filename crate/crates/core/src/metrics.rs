//! Classification metrics for the downstream evaluation protocol: confusion
//! matrices, per-class and averaged precision/recall/F1 (in percent), and
//! side-by-side comparison of two runs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidConfig("confusion matrix must be square".into()));
        }
        Ok(Self { num_classes: n, counts: rows.concat() })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::DimensionMismatch { expected: truth.len(), got: predicted.len() });
        }
        let mut m = Self::new(num_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for c in [truth, predicted] {
            if c >= self.num_classes {
                return Err(Error::UnknownClass(c));
            }
        }
        self.counts[truth * self.num_classes + predicted] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, predicted)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes.max(1)).map(<[u64]>::to_vec).collect()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, with the 0/0 case reported as 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Unweighted mean of the per-class metrics.
    #[default]
    Macro,
    /// Metrics from pooled counts; for single-label data all three equal accuracy.
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub label: String,
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub averaging: Averaging,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
    #[serde(default)]
    pub config: serde_json::Value,
    pub seed: u64,
}

impl EvalReport {
    /// Computes every metric from the confusion matrix. Fails if a class has no
    /// holdout samples.
    pub fn from_confusion(
        label: impl Into<String>,
        matrix: &ConfusionMatrix,
        class_names: &[String],
        averaging: Averaging,
        seed: u64,
    ) -> Result<Self> {
        let c = matrix.num_classes();
        if class_names.len() != c {
            return Err(Error::DimensionMismatch { expected: c, got: class_names.len() });
        }
        if let Some(empty) = (0..c).find(|&i| matrix.row_sum(i) == 0) {
            return Err(Error::EmptyClass(empty));
        }
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|i| {
                let tp = matrix.get(i, i);
                let p = ratio(tp, matrix.col_sum(i));
                let r = ratio(tp, matrix.row_sum(i));
                ClassMetrics {
                    class_name: class_names[i].clone(),
                    precision: 100.0 * p,
                    recall: 100.0 * r,
                    f1: 100.0 * f1_score(p, r),
                    support: matrix.row_sum(i),
                }
            })
            .collect();
        let correct: u64 = (0..c).map(|i| matrix.get(i, i)).sum();
        let accuracy = 100.0 * ratio(correct, matrix.total());
        let (precision, recall, f1) = match averaging {
            Averaging::Macro => {
                let n = c as f64;
                (
                    per_class.iter().map(|m| m.precision).sum::<f64>() / n,
                    per_class.iter().map(|m| m.recall).sum::<f64>() / n,
                    per_class.iter().map(|m| m.f1).sum::<f64>() / n,
                )
            }
            Averaging::Micro => (accuracy, accuracy, accuracy),
        };
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            label: label.into(),
            class_names: class_names.to_vec(),
            per_class,
            averaging,
            precision,
            recall,
            f1,
            accuracy,
            confusion: matrix.rows(),
            config: serde_json::Value::Null,
            seed,
        })
    }

    /// Plain-text table with a Method/Precision/Recall/F1 header, then per-class rows.
    pub fn render_table(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(String::len)
            .chain([self.label.len(), "Method".len()])
            .max()
            .unwrap_or(6);
        let mut out = String::new();
        let header = |out: &mut String, first: &str| {
            let _ = writeln!(out, "{first:<width$} | Precision (%) | Recall (%) | F1 Score (%)");
            let _ = writeln!(out, "{}", "-".repeat(width + 44));
        };
        header(&mut out, "Method");
        let _ = writeln!(
            out,
            "{:<width$} | {:>13.2} | {:>10.2} | {:>12.2}",
            self.label, self.precision, self.recall, self.f1
        );
        let _ = writeln!(out);
        header(&mut out, "Class");
        for m in &self.per_class {
            let _ = writeln!(
                out,
                "{:<width$} | {:>13.2} | {:>10.2} | {:>12.2}",
                m.class_name, m.precision, m.recall, m.f1
            );
        }
        let _ = writeln!(out, "\naccuracy {:.2}%  averaging {:?}  seed {}", self.accuracy, self.averaging, self.seed);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Differences `b - a`, overall and per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub label_a: String,
    pub label_b: String,
    pub seed_a: u64,
    pub seed_b: u64,
    pub overall: MetricDelta,
    pub per_class: Vec<MetricDelta>,
}

pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> Result<RunComparison> {
    if a.class_names != b.class_names {
        return Err(Error::ClassMapMismatch(format!("{:?} vs {:?}", a.class_names, b.class_names)));
    }
    let delta = |name: &str, pa: f64, ra: f64, fa: f64, pb: f64, rb: f64, fb: f64| MetricDelta {
        name: name.to_string(),
        precision: pb - pa,
        recall: rb - ra,
        f1: fb - fa,
    };
    let per_class = a
        .per_class
        .iter()
        .zip(&b.per_class)
        .map(|(x, y)| delta(&x.class_name, x.precision, x.recall, x.f1, y.precision, y.recall, y.f1))
        .collect();
    Ok(RunComparison {
        label_a: a.label.clone(),
        label_b: b.label.clone(),
        seed_a: a.seed,
        seed_b: b.seed,
        overall: delta("overall", a.precision, a.recall, a.f1, b.precision, b.recall, b.f1),
        per_class,
    })
}

impl RunComparison {
    pub fn render(&self) -> String {
        let width = self.per_class.iter().map(|d| d.name.len()).chain([7]).max().unwrap_or(7);
        let mut out = format!(
            "{} (seed {}) -> {} (seed {}), deltas in points\n",
            self.label_a, self.seed_a, self.label_b, self.seed_b
        );
        let _ = writeln!(out, "{:<width$} | Precision | Recall | F1 Score", "Class");
        for d in std::iter::once(&self.overall).chain(&self.per_class) {
            let _ = writeln!(out, "{:<width$} | {:>+9.2} | {:>+6.2} | {:>+8.2}", d.name, d.precision, d.recall, d.f1);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn hand_confusion_matrix() {
        let m = ConfusionMatrix::from_rows(&[vec![45, 5], vec![10, 40]]).unwrap();
        let r = EvalReport::from_confusion("x", &m, &names(2), Averaging::Macro, 0).unwrap();
        let c0 = &r.per_class[0];
        assert!((c0.precision - 4500.0 / 55.0).abs() < 1e-9);
        assert!((c0.precision - 81.82).abs() < 1e-2);
        assert!((c0.recall - 90.0).abs() < 1e-9);
        assert!((c0.f1 - 85.71).abs() < 1e-2);
        assert_eq!(r.accuracy, 85.0);
    }

    #[test]
    fn perfect_predictions() {
        let truth = vec![0, 1, 2, 2, 1, 0];
        let m = ConfusionMatrix::from_predictions(&truth, &truth, 3).unwrap();
        let r = EvalReport::from_confusion("p", &m, &names(3), Averaging::Macro, 1).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (100.0, 100.0, 100.0));
    }

    #[test]
    fn empty_holdout_class_is_an_error() {
        let m = ConfusionMatrix::from_rows(&[vec![3, 0], vec![0, 0]]).unwrap();
        assert!(matches!(
            EvalReport::from_confusion("x", &m, &names(2), Averaging::Macro, 0),
            Err(Error::EmptyClass(1))
        ));
    }

    #[test]
    fn micro_average_is_accuracy() {
        let m = ConfusionMatrix::from_rows(&[vec![45, 5], vec![10, 40]]).unwrap();
        let r = EvalReport::from_confusion("x", &m, &names(2), Averaging::Micro, 0).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (85.0, 85.0, 85.0));
    }

    #[test]
    fn random_predictions_recall_near_chance() {
        let c = 5;
        let mut rng = seeded(17);
        let truth: Vec<usize> = (0..20_000).map(|i| i % c).collect();
        let pred: Vec<usize> = truth.iter().map(|_| rng.gen_range(0..c)).collect();
        let m = ConfusionMatrix::from_predictions(&truth, &pred, c).unwrap();
        let r = EvalReport::from_confusion("rand", &m, &names(c), Averaging::Macro, 0).unwrap();
        // per-class recall is Binomial(4000, 0.2)/4000: sd ~0.63 points
        for cm in &r.per_class {
            assert!((cm.recall - 20.0).abs() < 4.0 * 0.64, "{}", cm.recall);
        }
        assert!((r.recall - 20.0).abs() < 1.5);
    }

    fn fixture(label: &str, p: f64, r: f64, f: f64) -> EvalReport {
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            label: label.into(),
            class_names: names(1),
            per_class: vec![ClassMetrics { class_name: "c0".into(), precision: p, recall: r, f1: f, support: 50 }],
            averaging: Averaging::Macro,
            precision: p,
            recall: r,
            f1: f,
            accuracy: r,
            confusion: vec![vec![50]],
            config: serde_json::Value::Null,
            seed: 0,
        }
    }

    #[test]
    fn compare_table_values() {
        let base = fixture("Baseline (Classifier Free Guidance)", 61.50, 65.43, 63.40);
        let ours = fixture("Ours", 72.65, 76.64, 74.58);
        let cmp = compare_runs(&base, &ours).unwrap();
        assert!((cmp.overall.f1 - 11.18).abs() < 1e-9);
        assert!(cmp.render().contains("+11.18"));
        let back = compare_runs(&ours, &base).unwrap();
        assert_eq!(back.overall.f1, -cmp.overall.f1);
        let same = compare_runs(&ours, &ours).unwrap();
        assert_eq!((same.overall.precision, same.overall.recall, same.overall.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn compare_rejects_class_mismatch() {
        let mut other = fixture("b", 1.0, 1.0, 1.0);
        other.class_names = vec!["zz".into()];
        assert!(matches!(compare_runs(&fixture("a", 1.0, 1.0, 1.0), &other), Err(Error::ClassMapMismatch(_))));
    }

    #[test]
    fn table_has_method_and_metric_columns() {
        let m = ConfusionMatrix::from_rows(&[vec![45, 5], vec![10, 40]]).unwrap();
        let r = EvalReport::from_confusion("Ours", &m, &names(2), Averaging::Macro, 0).unwrap();
        let t = r.render_table();
        assert!(t.contains("Precision (%) | Recall (%) | F1 Score (%)"));
        assert!(t.contains("Ours"));
    }

    proptest! {
        #[test]
        fn metric_identities(rows in proptest::collection::vec(proptest::collection::vec(0u64..50, 3), 3), seed in any::<u64>()) {
            let mut rows = rows;
            for (i, r) in rows.iter_mut().enumerate() { r[i] += 1; }
            let m = ConfusionMatrix::from_rows(&rows).unwrap();
            let r = EvalReport::from_confusion("x", &m, &names(3), Averaging::Macro, 0).unwrap();
            for (i, c) in r.per_class.iter().enumerate() {
                prop_assert!((0.0..=100.0).contains(&c.precision));
                prop_assert!((0.0..=100.0).contains(&c.recall));
                let want = f1_score(c.precision / 100.0, c.recall / 100.0) * 100.0;
                prop_assert!((c.f1 - want).abs() < 1e-9);
                prop_assert_eq!(c.support, rows[i].iter().sum::<u64>());
            }
            prop_assert_eq!(m.total(), rows.iter().flatten().sum::<u64>());

            // order invariance: shuffled (truth, pred) pairs give the same matrix
            let mut pairs: Vec<(usize, usize)> = Vec::new();
            for (t, row) in rows.iter().enumerate() {
                for (p, &n) in row.iter().enumerate() {
                    pairs.extend(std::iter::repeat_n((t, p), n as usize));
                }
            }
            use rand::seq::SliceRandom;
            pairs.shuffle(&mut seeded(seed));
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let m2 = ConfusionMatrix::from_predictions(&t, &p, 3).unwrap();
            let r2 = EvalReport::from_confusion("x", &m2, &names(3), Averaging::Macro, 0).unwrap();
            prop_assert_eq!(r, r2);
        }
    }
}
