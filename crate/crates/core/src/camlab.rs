//! Class activation maps and initial label assignment.
//!
//! Foreground class `c` (1-based, background is 0) owns plane `c - 1` of a
//! score set and row `c - 1` of the classifier weights.

use std::collections::BTreeSet;

use log::warn;

use crate::error::{Error, Result};
use crate::tensorio::{LabelMap, Tensor};

pub const DEFAULT_BACKGROUND_THRESHOLD: f64 = 0.05;

/// Linear classifier weights, one row per foreground class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    num_foreground: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ClassifierWeights {
    pub fn new(num_foreground: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != num_foreground * channels {
            return Err(Error::shape(format!(
                "{num_foreground}x{channels} weights given {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("classifier weights must be finite".into()));
        }
        Ok(ClassifierWeights {
            num_foreground,
            channels,
            data,
        })
    }

    /// Reads a `[num_classes - 1, K]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [rows, cols] => ClassifierWeights::new(rows, cols, t.data().to_vec()),
            _ => Err(Error::shape(format!(
                "classifier weights must be 2-D, got {:?}",
                t.dims()
            ))),
        }
    }

    /// Weights that pass feature channel `k` straight through as class `k + 1`.
    pub fn identity(num_foreground: usize) -> Self {
        let mut data = vec![0.0; num_foreground * num_foreground];
        for i in 0..num_foreground {
            data[i * num_foreground + i] = 1.0;
        }
        ClassifierWeights {
            num_foreground,
            channels: num_foreground,
            data,
        }
    }

    pub fn num_foreground(&self) -> usize {
        self.num_foreground
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn row(&self, fg_index: usize) -> &[f32] {
        &self.data[fg_index * self.channels..(fg_index + 1) * self.channels]
    }
}

/// Normalized per-class activation planes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMapSet {
    height: usize,
    width: usize,
    planes: Vec<Vec<f32>>,
    relevant: BTreeSet<u8>,
    degenerate: Vec<u8>,
}

impl ScoreMapSet {
    /// Wraps already-normalized planes. Irrelevant planes must be zero and
    /// relevant ones inside `[0, 1]`.
    pub fn new(height: usize, width: usize, planes: Vec<Vec<f32>>, relevant: BTreeSet<u8>) -> Result<Self> {
        validate_relevant(&relevant, planes.len())?;
        for (i, plane) in planes.iter().enumerate() {
            if plane.len() != height * width {
                return Err(Error::shape(format!(
                    "plane {i} has {} values for a {height}x{width} map",
                    plane.len()
                )));
            }
            let class = (i + 1) as u8;
            let ok = if relevant.contains(&class) {
                plane.iter().all(|v| (0.0..=1.0).contains(v))
            } else {
                plane.iter().all(|&v| v == 0.0)
            };
            if !ok {
                return Err(Error::InvalidParameter(format!(
                    "plane for class {class} violates score range"
                )));
            }
        }
        Ok(ScoreMapSet {
            height,
            width,
            planes,
            relevant,
            degenerate: Vec::new(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of classes including background.
    pub fn num_classes(&self) -> usize {
        self.planes.len() + 1
    }

    pub fn relevant(&self) -> &BTreeSet<u8> {
        &self.relevant
    }

    /// Relevant classes whose plane was constant and got zeroed.
    pub fn degenerate(&self) -> &[u8] {
        &self.degenerate
    }

    /// Plane of foreground class `class` (1-based).
    pub fn plane(&self, class: u8) -> &[f32] {
        &self.planes[class as usize - 1]
    }

    pub fn planes(&self) -> &[Vec<f32>] {
        &self.planes
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.planes.iter().flatten().copied().collect();
        Tensor::new(vec![self.planes.len(), self.height, self.width], data).expect("score planes are finite")
    }
}

fn validate_relevant(relevant: &BTreeSet<u8>, num_foreground: usize) -> Result<()> {
    if relevant.is_empty() {
        return Err(Error::EmptyRelevantSet);
    }
    if let Some(&c) = relevant.iter().find(|&&c| c == 0 || c as usize > num_foreground) {
        return Err(Error::InvalidParameter(format!(
            "relevant class {c} not in 1..={num_foreground}"
        )));
    }
    Ok(())
}

/// Raw class activation planes `sum_k w[c][k] * f_k(x, y)`, before clamping
/// and normalization. Classes outside `relevant` get zero planes.
pub fn raw_cam(
    features: &Tensor,
    weights: &ClassifierWeights,
    relevant: &BTreeSet<u8>,
) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let (channels, height, width) = features.as_stack()?;
    if channels != weights.channels() {
        return Err(Error::shape(format!(
            "features have {channels} channels, weights expect {}",
            weights.channels()
        )));
    }
    validate_relevant(relevant, weights.num_foreground())?;
    let n = height * width;
    let mut planes = vec![vec![0.0f64; n]; weights.num_foreground()];
    for &class in relevant {
        let row = weights.row(class as usize - 1);
        let plane = &mut planes[class as usize - 1];
        for (k, &w) in row.iter().enumerate() {
            let w = w as f64;
            for (acc, &f) in plane.iter_mut().zip(features.plane(k)) {
                *acc += w * f as f64;
            }
        }
    }
    Ok((height, width, planes))
}

/// Class activation maps clamped at zero and min-max normalized per class.
///
/// A relevant plane that is constant after clamping cannot be normalized; it
/// is zeroed, reported through [`ScoreMapSet::degenerate`], and logged.
pub fn compute_cam(features: &Tensor, weights: &ClassifierWeights, relevant: &BTreeSet<u8>) -> Result<ScoreMapSet> {
    let (height, width, raw) = raw_cam(features, weights, relevant)?;
    let mut degenerate = Vec::new();
    let planes = raw
        .into_iter()
        .enumerate()
        .map(|(i, plane)| {
            let class = (i + 1) as u8;
            if !relevant.contains(&class) {
                return vec![0.0f32; plane.len()];
            }
            let clamped: Vec<f64> = plane.into_iter().map(|v| v.max(0.0)).collect();
            let lo = clamped.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = clamped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                warn!("class {class}: activation plane is constant, zeroing it");
                degenerate.push(class);
                return vec![0.0f32; clamped.len()];
            }
            let span = hi - lo;
            clamped.iter().map(|v| ((v - lo) / span) as f32).collect()
        })
        .collect();
    Ok(ScoreMapSet {
        height,
        width,
        planes,
        relevant: relevant.clone(),
        degenerate,
    })
}

fn best_class(scores: &ScoreMapSet, pixel: usize) -> (u8, f32) {
    let mut best = (0u8, f32::NEG_INFINITY);
    // ascending class order, strict comparison: ties go to the lower index
    for &class in &scores.relevant {
        let v = scores.plane(class)[pixel];
        if v > best.1 {
            best = (class, v);
        }
    }
    best
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be in (0,1), got {v}")))
    }
}

/// Labels each pixel with its highest-scoring relevant class, or background
/// when that score is below `background_threshold`.
pub fn assign_labels(scores: &ScoreMapSet, background_threshold: f64) -> Result<LabelMap> {
    check_fraction("background threshold", background_threshold)?;
    let labels = (0..scores.height * scores.width)
        .map(|p| {
            let (class, score) = best_class(scores, p);
            Some(if (score as f64) < background_threshold {
                0
            } else {
                class
            })
        })
        .collect();
    LabelMap::new(scores.height, scores.width, scores.num_classes(), labels)
}

/// Two-threshold seed baseline: foreground above `foreground_threshold`,
/// background below `background_threshold`, unlabeled in between.
pub fn assign_labels_with_foreground(
    scores: &ScoreMapSet,
    background_threshold: f64,
    foreground_threshold: f64,
) -> Result<LabelMap> {
    check_fraction("background threshold", background_threshold)?;
    check_fraction("foreground threshold", foreground_threshold)?;
    if foreground_threshold < background_threshold {
        return Err(Error::InvalidParameter(
            "foreground threshold below background threshold".into(),
        ));
    }
    let labels = (0..scores.height * scores.width)
        .map(|p| {
            let (class, score) = best_class(scores, p);
            let score = score as f64;
            if score < background_threshold {
                Some(0)
            } else if score > foreground_threshold {
                Some(class)
            } else {
                None
            }
        })
        .collect();
    LabelMap::new(scores.height, scores.width, scores.num_classes(), labels)
}
