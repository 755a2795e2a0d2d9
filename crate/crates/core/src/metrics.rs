//! Pixel-level segmentation metrics from confusion counts.
//!
//! Ratios whose denominator is empty are defined as 1: sensitivity with no
//! positives, specificity with no negatives, precision with no predicted
//! positives and Dice/Jaccard with an empty union all count as vacuously
//! perfect.

use std::collections::BTreeSet;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Footer printed under result tables.
pub const CONVENTIONS_NOTE: &str = "0/0 conventions: SE=1 when TP+FN=0, SP=1 when TN+FP=0, \
     PC=1 when TP+FP=0, F1=JS=1 when the union of GT and SR is empty";

/// `1` where `probs >= threshold`, else `0`.
pub fn binarize<T: Scalar>(probs: &Tensor<T>, threshold: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config(format!("threshold {threshold} is outside [0, 1]")));
    }
    let t = T::from_f64(threshold);
    Ok(probs.map(|p| if p >= t { T::one() } else { T::zero() }))
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for ConfusionCounts {
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

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn check_binary<T: Scalar>(mask: &Tensor<T>, what: &str) -> Result<()> {
    if let Some(v) = mask.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::data(format!("{what} mask holds non-binary value {v:?}")));
    }
    Ok(())
}

fn check_pair<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    check_binary(pred, "prediction")?;
    check_binary(gt, "ground-truth")
}

pub fn confusion_counts<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ConfusionCounts> {
    check_pair(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == T::one(), g == T::one()) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub ac: f64,
    pub se: f64,
    pub sp: f64,
    pub pc: f64,
    pub f1: f64,
    pub js: f64,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 6] = ["AC", "SE", "SP", "PC", "F1", "JS"];

    pub fn values(&self) -> [f64; 6] {
        [self.ac, self.se, self.sp, self.pc, self.f1, self.js]
    }

    fn from_values(v: [f64; 6]) -> Self {
        Self {
            ac: v[0],
            se: v[1],
            sp: v[2],
            pc: v[3],
            f1: v[4],
            js: v[5],
        }
    }

    /// The six values at four decimals, comma separated.
    pub fn csv_fields(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::data("cannot compute metrics from zero evaluated pixels"));
    }
    Ok(MetricsReport {
        ac: (c.tp + c.tn) as f64 / total as f64,
        se: ratio_or_one(c.tp, c.tp + c.fn_),
        sp: ratio_or_one(c.tn, c.tn + c.fp),
        pc: ratio_or_one(c.tp, c.tp + c.fp),
        // 2·SE·PC/(SE+PC) written over counts: 2TP / (2TP + FP + FN).
        f1: ratio_or_one(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        js: ratio_or_one(c.tp, c.tp + c.fp + c.fn_),
    })
}

fn positive_set<T: Scalar>(mask: &Tensor<T>) -> BTreeSet<usize> {
    mask.data()
        .iter()
        .enumerate()
        .filter_map(|(i, &v)| (v == T::one()).then_some(i))
        .collect()
}

/// `|GT ∩ SR| / |GT ∪ SR|` over the sets of foreground pixel indices.
pub fn jaccard_set<T: Scalar>(sr: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_pair(sr, gt)?;
    let (s, g) = (positive_set(sr), positive_set(gt));
    let inter = s.intersection(&g).count() as u64;
    let union = s.union(&g).count() as u64;
    Ok(ratio_or_one(inter, union))
}

/// `2|GT ∩ SR| / (|GT| + |SR|)`.
pub fn dice_set<T: Scalar>(sr: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_pair(sr, gt)?;
    let (s, g) = (positive_set(sr), positive_set(gt));
    let inter = s.intersection(&g).count() as u64;
    Ok(ratio_or_one(2 * inter, (s.len() + g.len()) as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Metrics from counts pooled over every image.
    #[default]
    Micro,
    /// Mean of per-image metrics.
    PerImage,
}

impl std::str::FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "micro" => Ok(Averaging::Micro),
            "per_image" => Ok(Averaging::PerImage),
            other => Err(Error::config(format!(
                "averaging must be micro or per_image, got {other:?}"
            ))),
        }
    }
}

/// Accumulates counts image by image.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    pub mode: Averaging,
    counts: ConfusionCounts,
    per_image: Vec<MetricsReport>,
}

impl MetricsAccumulator {
    pub fn new(mode: Averaging) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn add(&mut self, counts: ConfusionCounts) -> Result<()> {
        if self.mode == Averaging::PerImage {
            self.per_image.push(compute_metrics(&counts)?);
        }
        self.counts += counts;
        Ok(())
    }

    /// Thresholds `probs` and tallies it against `gt`.
    pub fn add_prediction<T: Scalar>(
        &mut self,
        probs: &Tensor<T>,
        gt: &Tensor<T>,
        threshold: f64,
    ) -> Result<()> {
        let pred = binarize(probs, threshold)?;
        self.add(confusion_counts(&pred, gt)?)
    }

    pub fn counts(&self) -> ConfusionCounts {
        self.counts
    }

    pub fn report(&self) -> Result<MetricsReport> {
        match self.mode {
            Averaging::Micro => compute_metrics(&self.counts),
            Averaging::PerImage => {
                if self.per_image.is_empty() {
                    return Err(Error::data("no images were evaluated"));
                }
                let n = self.per_image.len() as f64;
                let mut sums = [0.0; 6];
                for r in &self.per_image {
                    for (s, v) in sums.iter_mut().zip(r.values()) {
                        *s += v;
                    }
                }
                Ok(MetricsReport::from_values(sums.map(|s| s / n)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(&[v.len()], v).unwrap()
    }

    #[test]
    fn binarize_is_inclusive() {
        let p = mask(&[0.4, 0.5, 0.6]);
        assert_eq!(binarize(&p, 0.5).unwrap().data(), &[0.0, 1.0, 1.0]);
        assert_eq!(binarize(&p, 0.0).unwrap().data(), &[1.0; 3]);
        assert_eq!(binarize(&p, 1.0).unwrap().data(), &[0.0; 3]);
        assert!(matches!(binarize(&p, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn tallies() {
        let gt = mask(&[[1.0; 10].as_slice(), &[0.0; 6]].concat());
        assert_eq!(confusion_counts(&gt, &gt).unwrap(), ConfusionCounts::new(10, 6, 0, 0));
        let inv = gt.map(|v| 1.0 - v);
        let c = confusion_counts(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        let c = confusion_counts(&mask(&[1.0, 1.0, 0.0, 0.0, 1.0]), &mask(&[1.0, 0.0, 0.0, 1.0, 1.0]))
            .unwrap();
        assert_eq!(c, ConfusionCounts::new(2, 1, 1, 1));
        assert!(matches!(
            confusion_counts(&mask(&[0.5]), &mask(&[1.0])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn worked_instance() {
        let r = compute_metrics(&ConfusionCounts::new(3, 4, 1, 2)).unwrap();
        let want = [0.7, 0.6, 0.8, 0.75, 2.0 / 3.0, 0.5];
        for (got, want) in r.values().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
        let perfect = compute_metrics(&ConfusionCounts::new(5, 5, 0, 0)).unwrap();
        assert_eq!(perfect.values(), [1.0; 6]);
        assert!(compute_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn vacuous_cases() {
        let r = compute_metrics(&ConfusionCounts::new(0, 9, 0, 0)).unwrap();
        assert_eq!(r.values(), [1.0; 6]);
        let empty = mask(&[0.0, 0.0]);
        assert_eq!(jaccard_set(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn set_forms() {
        let a = mask(&[1.0, 1.0, 0.0]);
        let b = mask(&[0.0, 0.0, 1.0]);
        assert_eq!(jaccard_set(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard_set(&a, &b).unwrap(), 0.0);
        assert_eq!(dice_set(&a, &mask(&[1.0, 0.0, 0.0])).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn per_image_averaging() {
        let mut acc = MetricsAccumulator::new(Averaging::PerImage);
        acc.add(ConfusionCounts::new(1, 1, 0, 0)).unwrap();
        acc.add(ConfusionCounts::new(0, 1, 1, 0)).unwrap();
        let r = acc.report().unwrap();
        assert!((r.ac - 0.75).abs() < 1e-12);
        assert_eq!(acc.counts(), ConfusionCounts::new(1, 2, 1, 0));
    }
}
