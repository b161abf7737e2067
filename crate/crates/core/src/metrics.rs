//! Intersection-over-union for PT, HT and BG after overlap expansion.
//!
//! OV pixels count towards both the HT and the PT mask; the BG mask is the
//! set of BG-labelled pixels. Classes absent from both prediction and
//! ground truth have no IoU and are left out of the mean.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::labelcodec::{expand_overlap, Class, LabelMap};

/// Classes scored, in report order.
pub const EVAL_CLASSES: [Class; 3] = [Class::Pt, Class::Ht, Class::Bg];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassCounts {
    /// Counts for predicted mask `pred` against `gt`, optionally restricted
    /// to pixels where `region` is set.
    pub fn from_masks(pred: &[bool], gt: &[bool], region: Option<&[bool]>) -> Self {
        let mut c = ClassCounts::default();
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if region.is_some_and(|r| !r[i]) {
                continue;
            }
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }

    /// `TP / (TP + FP + FN)`, or `None` when the denominator is zero.
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    pub fn merge(&mut self, other: &ClassCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Per-class counts in [`EVAL_CLASSES`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: [ClassCounts; 3],
}

impl ConfusionCounts {
    pub fn get(&self, c: Class) -> Option<&ClassCounts> {
        EVAL_CLASSES.iter().position(|&k| k == c).map(|i| &self.classes[i])
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.merge(b);
        }
    }
}

pub fn iou(counts: &ConfusionCounts, c: Class) -> Option<f64> {
    counts.get(c).and_then(ClassCounts::iou)
}

/// Arithmetic mean over the defined entries; `None` if none is defined.
pub fn mean_iou(per_class: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// HT, PT and BG masks in [`EVAL_CLASSES`] order. Three-class maps are
/// treated as four-class maps without OV.
fn eval_masks(labels: &LabelMap) -> Result<[Vec<bool>; 3]> {
    let four = labels.as_four();
    let expanded = expand_overlap(&four)?;
    let bg = four.classes().iter().map(|&c| c == Class::Bg).collect();
    Ok([expanded.pt, expanded.ht, bg])
}

/// Confusion counts of `pred` against `gt`, optionally restricted to a
/// region mask in row-major order.
pub fn confusion(pred: &LabelMap, gt: &LabelMap, region: Option<&[bool]>) -> Result<ConfusionCounts> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return shape_err(format!(
            "evaluate: prediction {}×{} vs ground truth {}×{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        ));
    }
    if let Some(r) = region {
        if r.len() != gt.classes().len() {
            return shape_err("evaluate: region mask size differs from label map");
        }
    }
    let (pm, gm) = (eval_masks(pred)?, eval_masks(gt)?);
    let mut counts = ConfusionCounts::default();
    for i in 0..3 {
        counts.classes[i] = ClassCounts::from_masks(&pm[i], &gm[i], region);
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub counts: ConfusionCounts,
    /// IoU per class in [`EVAL_CLASSES`] order; `None` marks an undefined class.
    pub per_class: [Option<f64>; 3],
    pub mean: Option<f64>,
}

/// One machine-readable line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub name: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou: Option<f64>,
}

impl IouReport {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let per_class = [0, 1, 2].map(|i| counts.classes[i].iou());
        Self { counts, per_class, mean: mean_iou(&per_class) }
    }

    pub fn iou(&self, c: Class) -> Option<f64> {
        EVAL_CLASSES.iter().position(|&k| k == c).and_then(|i| self.per_class[i])
    }

    /// Classes with no IoU (absent from both prediction and ground truth).
    pub fn undefined(&self) -> Vec<Class> {
        EVAL_CLASSES
            .iter()
            .zip(&self.per_class)
            .filter(|(_, v)| v.is_none())
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn records(&self) -> Vec<ClassRecord> {
        EVAL_CLASSES
            .iter()
            .enumerate()
            .map(|(i, c)| ClassRecord {
                name: c.name().to_string(),
                tp: self.counts.classes[i].tp,
                fp: self.counts.classes[i].fp,
                fn_: self.counts.classes[i].fn_,
                iou: self.per_class[i],
            })
            .collect()
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<6}{:>12}{:>12}{:>12}{:>10}\n", "class", "TP", "FP", "FN", "IoU %");
        for r in self.records() {
            let _ = writeln!(s, "{:<6}{:>12}{:>12}{:>12}{:>10}", r.name, r.tp, r.fp, r.fn_, percent(r.iou));
        }
        let _ = writeln!(s, "{:<6}{:>46}", "mean", percent(self.mean));
        s
    }
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |x| format!("{:.2}", 100.0 * x))
}

pub fn evaluate(pred: &LabelMap, gt: &LabelMap) -> Result<IouReport> {
    Ok(IouReport::from_counts(confusion(pred, gt, None)?))
}

/// Pools confusion counts over many images before dividing.
#[derive(Clone, Debug, Default)]
pub struct IouAccumulator {
    counts: ConfusionCounts,
    images: usize,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        self.add_region(pred, gt, None)
    }

    pub fn add_region(&mut self, pred: &LabelMap, gt: &LabelMap, region: Option<&[bool]>) -> Result<()> {
        self.counts.merge(&confusion(pred, gt, region)?);
        self.images += 1;
        Ok(())
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn report(&self) -> IouReport {
        IouReport::from_counts(self.counts)
    }
}

/// Side-by-side IoU columns, one group per named report, e.g. without
/// post-processing, with CRF and with CRFH.
pub fn comparison_table(columns: &[(&str, &IouReport)]) -> String {
    let mut s = format!("{:<6}", "class");
    for (name, _) in columns {
        let _ = write!(s, "{:>16}", format!("{name} (IoU %)"));
    }
    s.push('\n');
    let rows = EVAL_CLASSES.iter().enumerate().map(|(i, c)| (c.name(), i));
    for (name, i) in rows {
        let _ = write!(s, "{name:<6}");
        for (_, r) in columns {
            let _ = write!(s, "{:>16}", percent(r.per_class[i]));
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<6}", "mean");
    for (_, r) in columns {
        let _ = write!(s, "{:>16}", percent(r.mean));
    }
    s.push('\n');
    s
}
