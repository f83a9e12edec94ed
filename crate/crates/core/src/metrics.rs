//! Confusion-matrix metrics: per-class, macro and pooled IoU and F-score.

use std::fmt::Write;

use crate::error::{ensure, Result};
use crate::fields::NUM_CLASSES;

/// Square confusion matrix; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        ensure!(
            pred.len() == truth.len(),
            Contract,
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        );
        let k = self.classes;
        if let Some((p, t)) = pred.iter().zip(truth).find(|(&p, &t)| p as usize >= k || t as usize >= k) {
            return Err(crate::Error::Contract(format!(
                "class pair (truth {t}, pred {p}) outside [0, {k})"
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Sums another matrix of the same size into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        ensure!(other.classes == self.classes, Contract, "confusion matrices differ in size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, fp, fn)` of class `c`.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }
}

pub fn confusion_matrix(pred: &[u8], truth: &[u8], classes: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(classes);
    m.add(pred, truth)?;
    Ok(m)
}

/// Per-class values (`None` where the class is absent from truth and
/// prediction), their mean over present classes, and the pooled value.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub aggregate: f64,
}

fn scores(m: &ConfusionMatrix, f: impl Fn(u64, u64, u64) -> f64) -> ClassScores {
    let mut pooled = (0, 0, 0);
    let per_class: Vec<Option<f64>> = (0..m.classes())
        .map(|c| {
            let (tp, fp, fn_) = m.class_counts(c);
            pooled = (pooled.0 + tp, pooled.1 + fp, pooled.2 + fn_);
            (tp + fp + fn_ > 0).then(|| f(tp, fp, fn_))
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let aggregate = if pooled.0 + pooled.1 + pooled.2 > 0 {
        f(pooled.0, pooled.1, pooled.2)
    } else {
        0.0
    };
    ClassScores {
        per_class,
        mean,
        aggregate,
    }
}

/// `tp / (tp + fp + fn)`.
pub fn iou(m: &ConfusionMatrix) -> ClassScores {
    scores(m, |tp, fp, fn_| tp as f64 / (tp + fp + fn_) as f64)
}

/// `2 tp / (2 tp + fp + fn)`.
pub fn f_score(m: &ConfusionMatrix) -> ClassScores {
    scores(m, |tp, fp, fn_| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// F-score equivalent of an IoU value.
pub fn f_from_iou(iou: f64) -> f64 {
    2.0 * iou / (1.0 + iou)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub iou: ClassScores,
    pub f: ClassScores,
    pub params: usize,
    pub runtime_s: f64,
    pub seed: u64,
}

impl MetricsReport {
    pub fn new(confusion: ConfusionMatrix, params: usize, runtime_s: f64, seed: u64) -> Self {
        Self {
            iou: iou(&confusion),
            f: f_score(&confusion),
            confusion,
            params,
            runtime_s,
            seed,
        }
    }

    /// Header of [`MetricsReport::csv_row`]: `seed, params, runtime_s,
    /// aggregate_iou, mean_iou, aggregate_f, mean_f`, then `iou_<c>` and
    /// `f_<c>` for every class (empty when the class never occurs).
    pub fn csv_header(classes: usize) -> String {
        let mut h = String::from("seed,params,runtime_s,aggregate_iou,mean_iou,aggregate_f,mean_f");
        for c in 0..classes {
            write!(h, ",iou_{c}").unwrap();
        }
        for c in 0..classes {
            write!(h, ",f_{c}").unwrap();
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{:.3},{:.6},{:.6},{:.6},{:.6}",
            self.seed, self.params, self.runtime_s, self.iou.aggregate, self.iou.mean, self.f.aggregate, self.f.mean
        );
        for v in self.iou.per_class.iter().chain(&self.f.per_class) {
            match v {
                Some(v) => write!(r, ",{v:.6}").unwrap(),
                None => r.push(','),
            }
        }
        r
    }

    /// Human-readable table with per-class rows and the confusion matrix.
    pub fn table(&self) -> String {
        let names = (self.confusion.classes() == NUM_CLASSES).then_some(crate::data::CLASS_NAMES);
        let name = |c: usize| names.map_or_else(|| format!("class {c}"), |n| n[c].to_string());
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        writeln!(s, "{:<16} {:>8} {:>8}", "class", "IoU", "F").unwrap();
        for c in 0..self.confusion.classes() {
            writeln!(s, "{:<16} {:>8} {:>8}", name(c), fmt(self.iou.per_class[c]), fmt(self.f.per_class[c])).unwrap();
        }
        writeln!(s, "{:<16} {:>8.4} {:>8.4}", "mean", self.iou.mean, self.f.mean).unwrap();
        writeln!(s, "{:<16} {:>8.4} {:>8.4}", "aggregate", self.iou.aggregate, self.f.aggregate).unwrap();
        writeln!(s, "params {}  runtime {:.1}s  seed {}", self.params, self.runtime_s, self.seed).unwrap();
        writeln!(s, "confusion (rows truth, cols prediction):").unwrap();
        for t in 0..self.confusion.classes() {
            let row: Vec<String> = (0..self.confusion.classes())
                .map(|p| format!("{:>8}", self.confusion.get(t, p)))
                .collect();
            writeln!(s, "{}", row.join("")).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let m = confusion_matrix(&[0, 1, 1, 2], &[0, 1, 1, 2], 3).unwrap();
        assert_eq!((m.get(0, 0), m.get(1, 1), m.get(2, 2), m.total()), (1, 2, 1, 4));
        let m = confusion_matrix(&[0; 5], &[1; 5], 6).unwrap();
        assert_eq!(m.get(1, 0), 5);
        assert_eq!(m.total(), 5);
        assert!(confusion_matrix(&[6], &[0], 6).is_err());
        assert!(confusion_matrix(&[0], &[0, 1], 6).is_err());
    }

    #[test]
    fn iou_examples() {
        let m = confusion_matrix(&[0, 1, 2, 3, 4, 5], &[0, 1, 2, 3, 4, 5], 6).unwrap();
        let s = iou(&m);
        assert!(s.per_class.iter().all(|&v| v == Some(1.0)));
        assert_eq!((s.mean, s.aggregate), (1.0, 1.0));

        let m = confusion_matrix(&[0, 0], &[1, 1], 6).unwrap();
        assert_eq!(iou(&m).per_class[1], Some(0.0));
        assert_eq!(iou(&m).per_class[3], None);

        // Truth: 4 pixels of class 1 and 4 background; prediction covers two
        // of the class-1 pixels and two background pixels.
        let truth = [1, 1, 1, 1, 0, 0, 0, 0];
        let pred = [1, 1, 0, 0, 1, 1, 0, 0];
        let s = iou(&confusion_matrix(&pred, &truth, 6).unwrap());
        assert!((s.per_class[1].unwrap() - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn table_one_pairs() {
        for (i, f) in [(0.689, 0.816), (0.725, 0.840), (0.758, 0.862), (0.760, 0.863)] {
            assert!((f_from_iou(i) - f).abs() <= 0.001, "{i} -> {}", f_from_iou(i));
        }
        assert_eq!((f_from_iou(1.0), f_from_iou(0.0)), (1.0, 0.0));
    }

    #[test]
    fn csv_row_matches_header() {
        let m = confusion_matrix(&[0, 1, 1], &[0, 1, 0], 6).unwrap();
        let r = MetricsReport::new(m, 10, 0.5, 3);
        let cols = MetricsReport::csv_header(6).split(',').count();
        assert_eq!(r.csv_row().split(',').count(), cols);
        assert!(r.table().contains("aggregate"));
    }

    fn labels() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (1usize..200).prop_flat_map(|n| (prop::collection::vec(0u8..6, n), prop::collection::vec(0u8..6, n)))
    }

    proptest! {
        #[test]
        fn f_is_a_function_of_iou((pred, truth) in labels()) {
            let m = confusion_matrix(&pred, &truth, 6).unwrap();
            let (i, f) = (iou(&m), f_score(&m));
            prop_assert_eq!(m.total(), pred.len() as u64);
            for c in 0..6 {
                let row: u64 = (0..6).map(|p| m.get(c, p)).sum();
                prop_assert_eq!(row, truth.iter().filter(|&&t| t as usize == c).count() as u64);
                match (i.per_class[c], f.per_class[c]) {
                    (Some(a), Some(b)) => {
                        prop_assert!((b - f_from_iou(a)).abs() < 1e-12);
                        prop_assert!((0.0..=1.0).contains(&a));
                    }
                    (None, None) => {}
                    _ => prop_assert!(false),
                }
            }
            prop_assert!((f.aggregate - f_from_iou(i.aggregate)).abs() < 1e-12);
            let present: Vec<f64> = i.per_class.iter().flatten().copied().collect();
            let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(i.mean >= lo - 1e-15 && i.mean <= hi + 1e-15);
        }

        #[test]
        fn permutation_invariance((pred, truth) in labels(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut idx: Vec<usize> = (0..pred.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p2: Vec<u8> = idx.iter().map(|&i| pred[i]).collect();
            let t2: Vec<u8> = idx.iter().map(|&i| truth[i]).collect();
            prop_assert_eq!(
                confusion_matrix(&pred, &truth, 6).unwrap(),
                confusion_matrix(&p2, &t2, 6).unwrap()
            );
        }
    }
}
