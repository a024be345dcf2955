use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major map of class labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "LabelMap",
                format!("{} labels for {height}x{width}", labels.len()),
            ));
        }
        Ok(Self { height, width, labels })
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= num_classes) {
            Some(&l) => Err(Error::LabelRange {
                label: l as usize,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    /// One-vs-rest mask of `class`.
    pub fn mask(&self, class: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == class).collect()
    }
}

/// One-vs-rest pixel counts for a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, 1.0)
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, 1.0)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total(), 1.0)
    }

    /// 1 if prediction and truth are both empty, 0 if only the prediction is.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, if self.both_empty() { 1.0 } else { 0.0 })
    }

    /// 1 if prediction and truth are both empty, 0 if only the truth is.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, if self.both_empty() { 1.0 } else { 0.0 })
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp, 1.0)
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, class: usize, num_classes: usize) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "confusion",
            format!("{}x{} vs {}x{}", pred.height, pred.width, gt.height, gt.width),
        ));
    }
    pred.check_classes(num_classes)?;
    gt.check_classes(num_classes)?;
    if class >= num_classes {
        return Err(Error::LabelRange { label: class, num_classes });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        match (p as usize == class, g as usize == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}
