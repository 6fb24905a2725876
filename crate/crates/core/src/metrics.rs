//! Confusion-matrix evaluation: per-class IoU and its mean over defined
//! classes, accumulated exactly in integers so batched and sequential
//! accumulation agree bit for bit.

use crate::error::{Error, Result};
use crate::label::LabelMap;

/// K x K counts, rows = ground truth, cols = prediction. Pixels whose
/// truth label equals the ignore index are excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
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

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds per-pixel counts from one prediction/truth pair.
    pub fn accumulate(
        &mut self,
        pred: &LabelMap,
        truth: &LabelMap,
        ignore_index: u8,
    ) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        let k = self.classes;
        for (px, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
            if t == ignore_index {
                continue;
            }
            if t as usize >= k || p as usize >= k {
                return Err(Error::Data(format!(
                    "class out of range (truth {t}, pred {p}, {k} classes) at pixel ({}, {})",
                    px / pred.width,
                    px % pred.width
                )));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Exact integer merge of another matrix; order never matters.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::Shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
        Ok(())
    }

    /// `IoU_c = diag / (row + col - diag)`. Classes absent from both
    /// prediction and truth have a zero denominator and come back as
    /// `None`; they are excluded from the mean.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let diag = self.counts[c * k + c];
                let row: u64 = (0..k).map(|j| self.counts[c * k + j]).sum();
                let col: u64 = (0..k).map(|i| self.counts[i * k + c]).sum();
                let denom = row + col - diag;
                (denom > 0).then(|| diag as f64 / denom as f64)
            })
            .collect()
    }

    /// Arithmetic mean of the defined per-class IoUs.
    pub fn miou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::Undefined(
                "mIoU over a confusion matrix with no defined class".into(),
            ));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Column-aligned per-class IoU table plus the mean, one class per line.
pub fn iou_table(cm: &ConfusionMatrix, class_names: &[String]) -> String {
    let ious = cm.per_class_iou();
    let width = class_names
        .iter()
        .map(|n| n.len())
        .chain(["mean".len()].into_iter())
        .max()
        .unwrap_or(8)
        .max(5);
    let mut out = String::new();
    for (c, iou) in ious.iter().enumerate() {
        let name = class_names.get(c).map(String::as_str).unwrap_or("?");
        match iou {
            Some(v) => out.push_str(&format!("{name:<width$}  {:7.2}\n", v * 100.0)),
            None => out.push_str(&format!("{name:<width$}  {:>7}\n", "-")),
        }
    }
    match cm.miou() {
        Ok(m) => out.push_str(&format!("{:<width$}  {:7.2}\n", "mean", m * 100.0)),
        Err(_) => out.push_str(&format!("{:<width$}  {:>7}\n", "mean", "-")),
    }
    out
}
