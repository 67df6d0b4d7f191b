//! Challenge scores: accuracy, Dice, Jaccard, sensitivity and specificity.
//!
//! Empty-versus-empty images (no foreground in the ground truth and none predicted) score
//! 1.0 for sensitivity, Jaccard and Dice, and likewise 1.0 for specificity when the
//! ground truth has no background. Evaluation servers disagree here; scoring a perfect
//! empty prediction as 0 would rank it below a wrong one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const THRESHOLD: f64 = 0.5;

/// Binary mask, row-major, values 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DataLength {
                shape: crate::Shape::new(1, 1, height, width),
                expected: height * width,
                found: data.len(),
            });
        }
        Ok(Mask { height, width, data })
    }

    /// Mask from a `(1, 1, H, W)` tensor whose values are exactly 0 or 1.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 1 {
            return Err(Error::Metrics(format!("mask tensor must be (1,1,H,W), got {s}")));
        }
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v == T::zero() {
                    Ok(0)
                } else if v == T::one() {
                    Ok(1)
                } else {
                    Err(Error::Metrics(format!("mask value {} is not binary", v.to_f64_lossy())))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Mask { height: s.h, width: s.w, data })
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_parts(
            crate::Shape::new(1, 1, self.height, self.width),
            self.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect(),
        )
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

/// Pixel counts of `pred` against `gt`. Values other than 0 and 1 are rejected.
pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Metrics(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.data.iter().zip(&gt.data).enumerate() {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => {
                return Err(Error::Metrics(format!(
                    "non-binary value at pixel {i} (prediction {p}, ground truth {g})"
                )))
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(rename = "ACC")]
    pub acc: f64,
    #[serde(rename = "DIC")]
    pub dic: f64,
    #[serde(rename = "JAC")]
    pub jac: f64,
    #[serde(rename = "SEN")]
    pub sen: f64,
    #[serde(rename = "SPE")]
    pub spe: f64,
}

impl Scores {
    pub fn values(&self) -> [f64; 5] {
        [self.acc, self.dic, self.jac, self.sen, self.spe]
    }

    /// Mean over images; each column is summed in sorted order so the result does not
    /// depend on image order.
    fn mean(items: &[Scores]) -> Scores {
        let n = items.len() as f64;
        let column = |k: usize| {
            let mut v: Vec<f64> = items.iter().map(|s| s.values()[k]).collect();
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>() / n
        };
        Scores { acc: column(0), dic: column(1), jac: column(2), sen: column(3), spe: column(4) }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> Result<Scores> {
    if c.total() == 0 {
        return Err(Error::Metrics("no pixels to evaluate".into()));
    }
    Ok(Scores {
        acc: ratio(c.tp + c.tn, c.total()),
        dic: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        jac: ratio(c.tp, c.tp + c.fp + c.fn_),
        sen: ratio(c.tp, c.tp + c.fn_),
        spe: ratio(c.tn, c.tn + c.fp),
    })
}

/// Foreground masks from probabilities `(N, 2, H, W)` (channel 1 is the lesion) or
/// `(N, 1, H, W)`; a pixel is foreground when `p ≥ 0.5`.
pub fn binarize<T: Real>(prob: &Tensor<T>) -> Result<Vec<Mask>> {
    let s = prob.shape();
    let channel = match s.c {
        1 => 0,
        2 => 1,
        c => return Err(Error::Metrics(format!("binarize expects 1 or 2 channels, got {c}"))),
    };
    (0..s.n)
        .map(|n| {
            let data = prob
                .plane(n, channel)
                .iter()
                .map(|&v| {
                    let v = v.to_f64_lossy();
                    if !(0.0..=1.0).contains(&v) {
                        Err(Error::Metrics(format!("probability {v} outside [0, 1]")))
                    } else {
                        Ok(u8::from(v >= THRESHOLD))
                    }
                })
                .collect::<Result<_>>()?;
            Ok(Mask { height: s.h, width: s.w, data })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    /// Unweighted mean over images.
    pub aggregate: Scores,
    /// Summed counts over all images.
    pub counts: ConfusionCounts,
    /// Scores of the summed counts, when requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pooled: Option<Scores>,
    pub per_image: Vec<ImageMetrics>,
}

/// Scores every `(name, prediction, ground truth)` triple and averages them per image.
pub fn evaluate_dataset(pairs: &[(String, Mask, Mask)], pooled: bool) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Metrics("no images to evaluate".into()));
    }
    let per_image = pairs
        .par_iter()
        .map(|(name, pred, gt)| {
            let counts = confusion(pred, gt).map_err(|e| Error::Metrics(format!("{name}: {e}")))?;
            Ok(ImageMetrics { name: name.clone(), counts, scores: metrics_from_counts(&counts)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<Scores> = per_image.iter().map(|m| m.scores).collect();
    let counts = per_image.iter().fold(ConfusionCounts::default(), |a, m| a + m.counts);
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        aggregate: Scores::mean(&scores),
        counts,
        pooled: if pooled { Some(metrics_from_counts(&counts)?) } else { None },
        per_image,
    })
}
