//! Segmentation and seed-quality metrics.
//!
//! Ground-truth pixels marked unlabeled are ignored everywhere. Background is
//! an ordinary class for IoU purposes.

use crate::detector::CleanMask;
use crate::error::{Error, Result};
use crate::tensorio::LabelMap;

/// Which classes enter the mean IoU.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum ClassAveraging {
    /// Classes present in the prediction or the ground truth.
    #[default]
    Present,
    /// A fixed class list; listed classes absent from both maps are skipped.
    Fixed(Vec<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassIou {
    pub class: u8,
    pub intersection: u64,
    pub union: u64,
}

impl ClassIou {
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// Classes included in the mean, ascending.
    pub per_class: Vec<ClassIou>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    pub correct: u64,
    pub evaluated: u64,
}

/// Integer confusion counts; summing them over images gives dataset-level
/// IoU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub intersection: Vec<u64>,
    pub predicted: Vec<u64>,
    pub actual: Vec<u64>,
    pub correct: u64,
    pub evaluated: u64,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            intersection: vec![0; num_classes],
            predicted: vec![0; num_classes],
            actual: vec![0; num_classes],
            correct: 0,
            evaluated: 0,
        }
    }

    pub fn from_maps(pred: &LabelMap, gt: &LabelMap) -> Result<Self> {
        if !pred.same_shape(gt) {
            return Err(Error::shape(format!(
                "prediction is {}x{}, ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let mut c = Confusion::new(pred.num_classes().max(gt.num_classes()));
        for (pixel, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            let Some(p) = p else {
                return Err(Error::InvalidParameter(format!(
                    "prediction is unlabeled at pixel {pixel}"
                )));
            };
            let Some(g) = g else { continue };
            let (p, g) = (p as usize, g as usize);
            c.evaluated += 1;
            c.predicted[p] += 1;
            c.actual[g] += 1;
            if p == g {
                c.correct += 1;
                c.intersection[p] += 1;
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Confusion) {
        let n = self.intersection.len().max(other.intersection.len());
        for v in [&mut self.intersection, &mut self.predicted, &mut self.actual] {
            v.resize(n, 0);
        }
        for c in 0..other.intersection.len() {
            self.intersection[c] += other.intersection[c];
            self.predicted[c] += other.predicted[c];
            self.actual[c] += other.actual[c];
        }
        self.correct += other.correct;
        self.evaluated += other.evaluated;
    }

    pub fn report(&self, averaging: &ClassAveraging) -> IouReport {
        let class_iou = |c: usize| ClassIou {
            class: c as u8,
            intersection: self.intersection[c],
            union: self.predicted[c] + self.actual[c] - self.intersection[c],
        };
        let per_class: Vec<ClassIou> = match averaging {
            ClassAveraging::Present => (0..self.intersection.len())
                .map(class_iou)
                .filter(|c| c.union > 0)
                .collect(),
            ClassAveraging::Fixed(list) => {
                let mut list = list.clone();
                list.sort_unstable();
                list.dedup();
                list.into_iter()
                    .filter(|&c| (c as usize) < self.intersection.len())
                    .map(|c| class_iou(c as usize))
                    .filter(|c| c.union > 0)
                    .collect()
            }
        };
        let mean_iou = if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(ClassIou::iou).sum::<f64>() / per_class.len() as f64
        };
        let pixel_accuracy = if self.evaluated == 0 {
            0.0
        } else {
            self.correct as f64 / self.evaluated as f64
        };
        IouReport {
            per_class,
            mean_iou,
            pixel_accuracy,
            correct: self.correct,
            evaluated: self.evaluated,
        }
    }
}

/// Per-class IoU, mean IoU over present classes and pixel accuracy.
pub fn iou(pred: &LabelMap, gt: &LabelMap) -> Result<IouReport> {
    iou_with(pred, gt, &ClassAveraging::Present)
}

pub fn iou_with(pred: &LabelMap, gt: &LabelMap, averaging: &ClassAveraging) -> Result<IouReport> {
    Ok(Confusion::from_maps(pred, gt)?.report(averaging))
}

/// Fraction of labeled ground-truth pixels where the maps agree.
pub fn pixel_accuracy(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    Ok(iou(pred, gt)?.pixel_accuracy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedQuality {
    /// Correct fraction of the clean set, or `-1` when it is empty.
    pub precision: f64,
    /// Clean pixels over labeled pixels.
    pub coverage: f64,
    pub empty: bool,
    pub selected: u64,
    pub correct: u64,
    pub labeled: u64,
}

/// Precision and coverage of a clean set. Clean pixels without ground truth
/// do not count toward precision.
pub fn seed_quality(clean: &CleanMask, init: &LabelMap, gt: &LabelMap) -> Result<SeedQuality> {
    if !init.same_shape(gt) || clean.height() != init.height() || clean.width() != init.width() {
        return Err(Error::shape(
            "clean mask, initial labels and ground truth differ in size",
        ));
    }
    let (mut selected, mut judged, mut correct, mut labeled) = (0u64, 0u64, 0u64, 0u64);
    for (p, (&l, &g)) in init.labels().iter().zip(gt.labels()).enumerate() {
        if l.is_some() {
            labeled += 1;
        }
        if clean.is_clean(p) && l.is_some() {
            selected += 1;
            if g.is_some() {
                judged += 1;
                if l == g {
                    correct += 1;
                }
            }
        }
    }
    let empty = judged == 0;
    Ok(SeedQuality {
        precision: if empty { -1.0 } else { correct as f64 / judged as f64 },
        coverage: if labeled == 0 {
            0.0
        } else {
            selected as f64 / labeled as f64
        },
        empty,
        selected,
        correct,
        labeled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(labels: &[u8]) -> LabelMap {
        LabelMap::new(2, 2, 3, labels.iter().map(|&l| Some(l)).collect()).unwrap()
    }

    #[test]
    fn toy_two_by_two() {
        let r = iou(&map(&[0, 1, 1, 1]), &map(&[0, 1, 0, 1])).unwrap();
        assert_eq!(r.per_class.len(), 2);
        assert!((r.per_class[0].iou() - 0.5).abs() < 1e-15);
        assert!((r.per_class[1].iou() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.mean_iou - 7.0 / 12.0).abs() < 1e-15);
        assert!((r.pixel_accuracy - 0.75).abs() < 1e-15);
    }

    #[test]
    fn identical_and_disjoint() {
        let m = map(&[0, 2, 2, 0]);
        let r = iou(&m, &m).unwrap();
        assert_eq!(r.mean_iou, 1.0);
        let a = map(&[1, 1, 0, 0]);
        let b = map(&[0, 0, 1, 1]);
        assert!(iou(&a, &b).unwrap().per_class.iter().all(|c| c.iou() == 0.0));
    }

    #[test]
    fn fixed_list_averaging() {
        let r = iou_with(
            &map(&[0, 1, 1, 1]),
            &map(&[0, 1, 0, 1]),
            &ClassAveraging::Fixed(vec![1, 2]),
        )
        .unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert!((r.mean_iou - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shape_and_sentinel_errors() {
        let small = LabelMap::filled(1, 1, 3, Some(0)).unwrap();
        assert!(matches!(iou(&small, &map(&[0; 4])), Err(Error::ShapeMismatch(_))));
        let holes = LabelMap::new(2, 2, 3, vec![Some(0), None, Some(0), Some(0)]).unwrap();
        assert!(iou(&holes, &map(&[0; 4])).is_err());
        // unlabeled ground truth is ignored
        assert_eq!(iou(&map(&[0; 4]), &holes).unwrap().evaluated, 3);
    }

    #[test]
    fn seed_quality_cases() {
        let init = map(&[1, 1, 2, 2]);
        let gt = map(&[1, 0, 2, 0]);
        let all = CleanMask::new(2, 2, vec![true, false, true, false], 0.1).unwrap();
        let q = seed_quality(&all, &init, &gt).unwrap();
        assert_eq!((q.precision, q.coverage), (1.0, 0.5));
        let half = CleanMask::new(2, 2, vec![true, true, false, false], 0.1).unwrap();
        assert_eq!(seed_quality(&half, &init, &gt).unwrap().precision, 0.5);
        let none = CleanMask::new(2, 2, vec![false; 4], 0.1).unwrap();
        let q = seed_quality(&none, &init, &gt).unwrap();
        assert!(q.empty);
        assert_eq!(q.precision, -1.0);
    }
}
