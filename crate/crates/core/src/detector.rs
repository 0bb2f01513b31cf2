//! Small-loss clean label detection and threshold selection.

use std::fmt::Write as _;

use log::warn;

use crate::error::{Error, Result};
use crate::tensorio::{LabelMap, Tensor};

/// Loss stored for pixels that carry no label (or zero probability on it).
pub const LOSS_MARKER: f32 = 3.4e38;
pub const DEFAULT_THETA: f64 = 1e-3;
pub const DEFAULT_TARGET_PRECISION: f64 = 0.97;
const SUM_TOLERANCE: f64 = 1e-4;

/// Clean-model class probabilities, `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    num_classes: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(num_classes: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let n = height * width;
        if data.len() != num_classes * n {
            return Err(Error::shape(format!(
                "[{num_classes},{height},{width}] probabilities given {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter(format!(
                "probability {} at index {i} outside [0,1]",
                data[i]
            )));
        }
        for p in 0..n {
            let sum: f64 = (0..num_classes).map(|c| data[c * n + p] as f64).sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::InvalidParameter(format!(
                    "probabilities at pixel {p} sum to {sum}"
                )));
            }
        }
        Ok(ProbabilityMap {
            num_classes,
            height,
            width,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [c, h, w] => ProbabilityMap::new(c, h, w, t.data().to_vec()),
            _ => Err(Error::shape(format!(
                "probability maps are [C,H,W], got {:?}",
                t.dims()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.num_classes, self.height, self.width], self.data.clone())
            .expect("validated probabilities")
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn prob(&self, class: usize, pixel: usize) -> f32 {
        self.data[class * self.height * self.width + pixel]
    }
}

/// Per-pixel cross-entropy of the initial label under the clean model.
pub fn pixel_loss(probs: &ProbabilityMap, init: &LabelMap) -> Result<Tensor> {
    if probs.height != init.height() || probs.width != init.width() {
        return Err(Error::shape(format!(
            "probabilities are {}x{}, labels {}x{}",
            probs.height,
            probs.width,
            init.height(),
            init.width()
        )));
    }
    if init.num_classes() > probs.num_classes {
        return Err(Error::shape(format!(
            "labels use {} classes, probabilities only {}",
            init.num_classes(),
            probs.num_classes
        )));
    }
    let data = init
        .labels()
        .iter()
        .enumerate()
        .map(|(p, l)| match l {
            None => LOSS_MARKER,
            Some(c) => {
                let loss = -(probs.prob(*c as usize, p) as f64).ln();
                if loss.is_finite() && loss < LOSS_MARKER as f64 {
                    // ln(1) can come out as -0.0
                    (loss as f32).max(0.0)
                } else {
                    LOSS_MARKER
                }
            }
        })
        .collect();
    Tensor::new(vec![init.height(), init.width()], data)
}

/// Pixels whose initial label is trusted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanMask {
    height: usize,
    width: usize,
    clean: Vec<bool>,
    theta_bits: u64,
}

impl CleanMask {
    pub fn new(height: usize, width: usize, clean: Vec<bool>, theta: f64) -> Result<Self> {
        if clean.len() != height * width {
            return Err(Error::shape("clean mask size does not match its dims"));
        }
        Ok(CleanMask {
            height,
            width,
            clean,
            theta_bits: theta.to_bits(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn theta(&self) -> f64 {
        f64::from_bits(self.theta_bits)
    }

    pub fn flags(&self) -> &[bool] {
        &self.clean
    }

    pub fn is_clean(&self, pixel: usize) -> bool {
        self.clean[pixel]
    }

    pub fn count(&self) -> usize {
        self.clean.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Initial labels restricted to clean pixels; everything else unlabeled.
    pub fn apply(&self, init: &LabelMap) -> Result<LabelMap> {
        if init.height() != self.height || init.width() != self.width {
            return Err(Error::shape("clean mask and label map differ in size"));
        }
        let labels = init
            .labels()
            .iter()
            .zip(&self.clean)
            .map(|(l, &c)| if c { *l } else { None })
            .collect();
        LabelMap::new(self.height, self.width, init.num_classes(), labels)
    }
}

fn losses_hw(losses: &Tensor) -> Result<(usize, usize)> {
    match *losses.dims() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::shape(format!("losses are [H,W], got {:?}", losses.dims()))),
    }
}

// Losses are stored as f32, so the threshold is compared at that precision.
fn is_selected(loss: f32, theta: f64) -> bool {
    loss < LOSS_MARKER && loss <= theta as f32
}

/// Marks pixels with `loss <= theta` as clean. Unlabeled pixels never are.
pub fn detect_clean(losses: &Tensor, theta: f64) -> Result<CleanMask> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::NonPositiveTheta(theta));
    }
    let (height, width) = losses_hw(losses)?;
    let clean: Vec<bool> = losses.data().iter().map(|&l| is_selected(l, theta)).collect();
    let mask = CleanMask::new(height, width, clean, theta)?;
    if mask.is_empty() {
        warn!("no pixel has loss <= {theta}; clean set is empty");
    }
    Ok(mask)
}

/// One image's contribution to threshold selection.
#[derive(Debug, Clone, Copy)]
pub struct ThetaSample<'a> {
    pub id: &'a str,
    pub losses: &'a Tensor,
    pub init: &'a LabelMap,
    pub gt: Option<&'a LabelMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaRow {
    pub theta: f64,
    /// Fraction of selected pixels whose initial label matches ground truth.
    /// Reported as 1 when nothing is selected.
    pub precision: f64,
    /// Selected pixels over labeled pixels.
    pub selected_fraction: f64,
    pub selected: u64,
    pub correct: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaReport {
    pub rows: Vec<ThetaRow>,
    pub chosen: f64,
    pub target_precision: f64,
    pub labeled: u64,
    pub unmet_precision: bool,
}

impl ThetaReport {
    pub fn chosen_row(&self) -> &ThetaRow {
        self.rows
            .iter()
            .find(|r| r.theta == self.chosen)
            .expect("chosen theta is a candidate")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("theta\tprecision\tselected_fraction\tselected\tcorrect\tchosen\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:e}\t{:.6}\t{:.6}\t{}\t{}\t{}",
                r.theta,
                r.precision,
                r.selected_fraction,
                r.selected,
                r.correct,
                u8::from(r.theta == self.chosen)
            );
        }
        let _ = writeln!(
            out,
            "# target_precision={} chosen={:e} unmet_precision={}",
            self.target_precision, self.chosen, self.unmet_precision
        );
        out
    }
}

/// 40 log-spaced thresholds from 1e-5 to 1e-1.
pub fn default_theta_grid() -> Vec<f64> {
    let n = 40;
    (0..n)
        .map(|i| 10f64.powf(-5.0 + 4.0 * i as f64 / (n - 1) as f64))
        .collect()
}

/// Picks the largest candidate threshold whose selected-label precision on
/// annotated images reaches `target_precision`.
///
/// Pixels unlabeled in either the initial or the ground-truth map are
/// ignored. When no candidate qualifies the smallest one is returned and
/// `unmet_precision` is set.
pub fn select_theta(samples: &[ThetaSample<'_>], target_precision: f64, candidates: &[f64]) -> Result<ThetaReport> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidateGrid);
    }
    if candidates.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidParameter(
            "theta candidates must be strictly ascending".into(),
        ));
    }
    if let Some(&bad) = candidates.iter().find(|&&t| !(t > 0.0)) {
        return Err(Error::NonPositiveTheta(bad));
    }
    if !(target_precision > 0.5 && target_precision < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "target precision must be in (0.5,1), got {target_precision}"
        )));
    }
    let mut ordered: Vec<&ThetaSample<'_>> = samples.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(b.id));

    let mut selected = vec![0u64; candidates.len()];
    let mut correct = vec![0u64; candidates.len()];
    let mut labeled = 0u64;
    for s in ordered {
        let gt = s.gt.ok_or_else(|| Error::MissingGroundTruth(s.id.to_string()))?;
        let (h, w) = losses_hw(s.losses)?;
        if !s.init.same_shape(gt) || s.init.height() != h || s.init.width() != w {
            return Err(Error::shape(format!("image {}: inputs differ in size", s.id)));
        }
        for ((&loss, init), truth) in s.losses.data().iter().zip(s.init.labels()).zip(gt.labels()) {
            let (Some(init), Some(truth)) = (init, truth) else {
                continue;
            };
            labeled += 1;
            // candidates are ascending, so the selecting ones form a suffix
            let first = candidates.partition_point(|&t| !is_selected(loss, t));
            for k in first..candidates.len() {
                selected[k] += 1;
                if init == truth {
                    correct[k] += 1;
                }
            }
        }
    }

    let rows: Vec<ThetaRow> = candidates
        .iter()
        .enumerate()
        .map(|(k, &theta)| ThetaRow {
            theta,
            precision: if selected[k] == 0 {
                1.0
            } else {
                correct[k] as f64 / selected[k] as f64
            },
            selected_fraction: if labeled == 0 {
                0.0
            } else {
                selected[k] as f64 / labeled as f64
            },
            selected: selected[k],
            correct: correct[k],
        })
        .collect();
    let qualifying = rows.iter().rev().find(|r| r.precision >= target_precision);
    let (chosen, unmet_precision) = match qualifying {
        Some(r) => (r.theta, false),
        None => {
            warn!("no theta reaches precision {target_precision}; using the smallest candidate");
            (candidates[0], true)
        }
    };
    Ok(ThetaReport {
        rows,
        chosen,
        target_precision,
        labeled,
        unmet_precision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_2x1(p_true: f32) -> ProbabilityMap {
        // pixel 0: class 1 has p_true; pixel 1: class 0 certain
        ProbabilityMap::new(2, 1, 2, vec![1.0 - p_true, 1.0, p_true, 0.0]).unwrap()
    }

    #[test]
    fn loss_values() {
        let init = LabelMap::new(1, 2, 2, vec![Some(1), None]).unwrap();
        let l = pixel_loss(&probs_2x1(1.0), &init).unwrap();
        assert_eq!(l.data()[0], 0.0);
        assert_eq!(l.data()[1], LOSS_MARKER);
        let l = pixel_loss(&probs_2x1(0.5), &init).unwrap();
        assert!((l.data()[0] as f64 - std::f64::consts::LN_2).abs() < 1e-5);
    }

    #[test]
    fn zero_probability_gets_marker() {
        let init = LabelMap::new(1, 2, 2, vec![Some(1), Some(1)]).unwrap();
        let l = pixel_loss(&probs_2x1(0.5), &init).unwrap();
        assert_eq!(l.data()[1], LOSS_MARKER);
    }

    #[test]
    fn probability_map_validation() {
        assert!(ProbabilityMap::new(2, 1, 1, vec![0.5, 0.6]).is_err());
        assert!(ProbabilityMap::new(2, 1, 1, vec![1.5, -0.5]).is_err());
        assert!(ProbabilityMap::new(2, 1, 1, vec![0.5, 0.50005]).is_ok());
        let init = LabelMap::new(2, 2, 2, vec![Some(0); 4]).unwrap();
        assert!(matches!(
            pixel_loss(&probs_2x1(0.5), &init),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn clean_boundary_is_inclusive() {
        let losses = Tensor::new(vec![1, 4], vec![0.0, 0.001, 0.0011, LOSS_MARKER]).unwrap();
        let m = detect_clean(&losses, 0.001).unwrap();
        assert_eq!(m.flags(), &[true, true, false, false]);
        let all = detect_clean(&losses, f64::MAX).unwrap();
        assert!(!all.is_clean(3));
        let none = detect_clean(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), 0.001).unwrap();
        assert!(none.is_empty());
        assert!(matches!(detect_clean(&losses, 0.0), Err(Error::NonPositiveTheta(_))));
    }

    #[test]
    fn grid_shape() {
        let g = default_theta_grid();
        assert_eq!(g.len(), 40);
        assert!((g[0] - 1e-5).abs() < 1e-18);
        assert!((g[39] - 1e-1).abs() < 1e-14);
    }

    #[test]
    fn selection_rule_on_constructed_table() {
        // 100 labeled pixels; 50 correct at loss 0.0005, 1 wrong at 0.0005,
        // 46 correct + 3 wrong at 0.003. Precision at 0.001: 50/51 = 0.980,
        // at 0.005: 96/100 = 0.96.
        let mut losses = Vec::new();
        let mut init = Vec::new();
        let gt = vec![Some(1u8); 100];
        for i in 0..100 {
            let (loss, ok) = match i {
                0..=49 => (0.0005, true),
                50 => (0.0005, false),
                51..=96 => (0.003, true),
                _ => (0.003, false),
            };
            losses.push(loss);
            init.push(Some(if ok { 1 } else { 0 }));
        }
        let losses = Tensor::new(vec![10, 10], losses).unwrap();
        let init = LabelMap::new(10, 10, 2, init).unwrap();
        let gt = LabelMap::new(10, 10, 2, gt).unwrap();
        let sample = ThetaSample {
            id: "a",
            losses: &losses,
            init: &init,
            gt: Some(&gt),
        };
        let report = select_theta(&[sample], 0.97, &[0.001, 0.005]).unwrap();
        assert!((report.rows[0].precision - 50.0 / 51.0).abs() < 1e-12);
        assert!((report.rows[1].precision - 0.96).abs() < 1e-12);
        assert_eq!(report.chosen, 0.001);
        assert!(!report.unmet_precision);

        let report = select_theta(&[sample], 0.99, &[0.001, 0.005]).unwrap();
        assert!(report.unmet_precision);
        assert_eq!(report.chosen, 0.001);
    }

    #[test]
    fn selection_errors() {
        let losses = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let init = LabelMap::new(1, 1, 2, vec![Some(1)]).unwrap();
        let sample = ThetaSample {
            id: "x",
            losses: &losses,
            init: &init,
            gt: None,
        };
        assert!(matches!(
            select_theta(&[sample], 0.97, &[]),
            Err(Error::EmptyCandidateGrid)
        ));
        assert!(matches!(
            select_theta(&[sample], 0.97, &[0.1]),
            Err(Error::MissingGroundTruth(_))
        ));
        assert!(select_theta(&[], 0.97, &[0.2, 0.1]).is_err());
        assert!(select_theta(&[], 0.4, &[0.1]).is_err());
    }
}
