//! Overlap metrics, per-set reports and a paired t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::types::{binarize, BinaryMap, Mask, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &BinaryMap, gt: &Mask) -> Result<Confusion> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(Error::invalid(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.bits().iter().zip(gt.labels()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// `num / den`, or 1.0 when the denominator is zero.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn dice(c: &Confusion) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn iou(c: &Confusion) -> f64 {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

pub fn accuracy(c: &Confusion) -> f64 {
    ratio(c.tp + c.tn, c.total())
}

pub fn sensitivity(c: &Confusion) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn specificity(c: &Confusion) -> f64 {
    ratio(c.tn, c.tn + c.fp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub dice: f64,
    pub iou: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl From<&Confusion> for ImageMetrics {
    fn from(c: &Confusion) -> Self {
        Self {
            dice: dice(c),
            iou: iou(c),
            accuracy: accuracy(c),
            sensitivity: sensitivity(c),
            specificity: specificity(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImage {
    pub id: String,
    #[serde(flatten)]
    pub metrics: ImageMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub sample_count: usize,
    pub dice: Summary,
    pub iou: Summary,
    pub accuracy: Summary,
    pub sensitivity: Summary,
    pub specificity: Summary,
    pub training_seconds: f64,
    pub per_image: Vec<PerImage>,
}

pub const CSV_HEADER: &str = "method,DC,IoU,Accuracy,Sensitivity,Specificity,training time (s)";

impl MetricsReport {
    pub fn from_per_image(method: impl Into<String>, per_image: Vec<PerImage>, training_seconds: f64) -> Self {
        let column = |f: fn(&ImageMetrics) -> f64| -> Summary {
            Summary::of(&per_image.iter().map(|p| f(&p.metrics)).collect::<Vec<_>>())
        };
        Self {
            method: method.into(),
            sample_count: per_image.len(),
            dice: column(|m| m.dice),
            iou: column(|m| m.iou),
            accuracy: column(|m| m.accuracy),
            sensitivity: column(|m| m.sensitivity),
            specificity: column(|m| m.specificity),
            training_seconds,
            per_image,
        }
    }

    pub fn per_image_dice(&self) -> Vec<f64> {
        self.per_image.iter().map(|p| p.metrics.dice).collect()
    }

    /// One row in `CSV_HEADER` order; metric cells read `mean±std`.
    pub fn csv_row(&self) -> String {
        let cell = |s: &Summary| format!("{:.3}±{:.3}", s.mean, s.std);
        format!(
            "{},{},{},{},{},{},{:.1}",
            self.method,
            cell(&self.dice),
            cell(&self.iou),
            cell(&self.accuracy),
            cell(&self.sensitivity),
            cell(&self.specificity),
            self.training_seconds
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row())
    }
}

/// Scores `model` on samples that carry ground-truth masks.
pub fn evaluate<M: Segmenter>(
    model: &M,
    test: &[Sample],
    threshold: f64,
    foreground_class: usize,
) -> Result<Vec<PerImage>> {
    let missing: Vec<String> = test.iter().filter(|s| s.mask.is_none()).map(|s| s.id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("test samples without masks: {}", missing.join(", "))));
    }
    test.iter()
        .map(|s| {
            let probs = model.predict(&s.image).map_err(|e| Error::Inference {
                id: s.id.clone(),
                source: Box::new(e),
            })?;
            let pred = binarize(&probs, foreground_class, threshold)?;
            let c = confusion(&pred, s.mask.as_ref().expect("checked above"))?;
            Ok(PerImage {
                id: s.id.clone(),
                metrics: ImageMetrics::from(&c),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    None,
    /// Every difference is zero; p = 1.
    NoDifference,
    /// Identical nonzero differences; the statistic is infinite and p = 0.
    ConstantShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub degeneracy: Degeneracy,
}

/// Two-sided paired t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(format!(
            "paired t-test needs two equal-length samples of at least 2 (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let df = diffs.len() - 1;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd <= f64::EPSILON * mean.abs().max(1.0) {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, df, degeneracy: Degeneracy::NoDifference }
        } else {
            TTest {
                t: f64::INFINITY.copysign(mean),
                p: 0.0,
                df,
                degeneracy: Degeneracy::ConstantShift,
            }
        });
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::invalid(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df, degeneracy: Degeneracy::None })
}
