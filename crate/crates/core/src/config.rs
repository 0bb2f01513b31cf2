//! Flat pipeline configuration shared by the library and the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camlab::DEFAULT_BACKGROUND_THRESHOLD;
use crate::detector::{DEFAULT_TARGET_PRECISION, DEFAULT_THETA};
use crate::error::{Error, Result};
use crate::gat::{GatShape, TrainConfig};
use crate::graphbuild::Symmetrize;
use crate::superpixel::SlicParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct PipelineConfig {
    pub bg_thresh: f64,
    pub theta: f64,
    pub target_precision: f64,
    pub superpixels: usize,
    pub compactness: f64,
    pub slic_iterations: usize,
    pub edge_symmetrize: Symmetrize,
    pub heads: usize,
    pub hidden: usize,
    pub att_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub patience: usize,
    pub init_scale: f64,
    pub seed: u64,
    /// Worker threads; 0 means one per logical CPU.
    pub workers: usize,
    pub trust_gat_everywhere: bool,
    /// Classifier weights `[C-1, K]`. When set, the CAM column of a manifest
    /// holds feature stacks; otherwise it holds raw activation planes.
    pub classifier_weights: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let slic = SlicParams::default();
        let shape = GatShape::default();
        let train = TrainConfig::default();
        PipelineConfig {
            bg_thresh: DEFAULT_BACKGROUND_THRESHOLD,
            theta: DEFAULT_THETA,
            target_precision: DEFAULT_TARGET_PRECISION,
            superpixels: slic.target_count,
            compactness: slic.compactness,
            slic_iterations: slic.iterations,
            edge_symmetrize: Symmetrize::default(),
            heads: shape.heads,
            hidden: shape.hidden,
            att_dim: shape.att_dim,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            weight_decay: train.weight_decay,
            patience: train.patience,
            init_scale: train.init_scale,
            seed: train.seed,
            workers: 0,
            trust_gat_everywhere: false,
            classifier_weights: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.bg_thresh > 0.0 && self.bg_thresh < 1.0) {
            return bad(format!("bg-thresh must be in (0,1), got {}", self.bg_thresh));
        }
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return bad(format!("theta must be positive, got {}", self.theta));
        }
        if !(self.target_precision > 0.5 && self.target_precision < 1.0) {
            return bad(format!(
                "target-precision must be in (0.5,1), got {}",
                self.target_precision
            ));
        }
        if self.superpixels == 0 || self.slic_iterations == 0 || !(self.compactness > 0.0) {
            return bad("superpixels, slic-iterations and compactness must be positive".into());
        }
        if self.heads == 0 || self.hidden == 0 || self.att_dim == 0 {
            return bad("heads, hidden and att-dim must be positive".into());
        }
        self.train_config(self.seed)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn slic_params(&self) -> SlicParams {
        SlicParams {
            target_count: self.superpixels,
            compactness: self.compactness,
            iterations: self.slic_iterations,
        }
    }

    pub fn gat_shape(&self) -> GatShape {
        GatShape {
            heads: self.heads,
            hidden: self.hidden,
            att_dim: self.att_dim,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            seed,
            patience: self.patience,
            init_scale: self.init_scale,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn overrides_and_round_trip() {
        let cfg = PipelineConfig::from_toml_str("theta = 0.01\nedge-symmetrize = \"and\"\nepochs = 20\n").unwrap();
        assert_eq!(cfg.theta, 0.01);
        assert_eq!(cfg.edge_symmetrize, Symmetrize::And);
        assert_eq!(cfg.epochs, 20);
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            PipelineConfig::from_toml_str("thetta = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml_str("bg-thresh = 1.5"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml_str("epochs = 0"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml_str("theta = \"x\""),
            Err(Error::Config(_))
        ));
    }
}
