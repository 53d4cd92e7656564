//! Run configuration, loadable from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Per-shape inclusion probabilities for the procedural renderer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeProbabilities {
    pub rectangle: f64,
    pub circle: f64,
    pub triangle: f64,
    pub pole: f64,
}

impl Default for ShapeProbabilities {
    fn default() -> Self {
        Self { rectangle: 0.8, circle: 0.8, triangle: 0.8, pole: 0.7 }
    }
}

impl ShapeProbabilities {
    pub fn none() -> Self {
        Self { rectangle: 0.0, circle: 0.0, triangle: 0.0, pole: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub shape_probabilities: ShapeProbabilities,
    /// Peak texture deviation from the class anchor color.
    pub texture_amplitude: f64,
    pub canny_low: f64,
    pub canny_high: f64,
    pub canny_sigma: f64,
    /// Training scene ids are `0..train_scenes`.
    pub train_scenes: u64,
    /// Held-out scene ids start here.
    pub heldout_offset: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: crate::data::NUM_CLASSES,
            shape_probabilities: ShapeProbabilities::default(),
            texture_amplitude: 0.1,
            canny_low: 0.1,
            canny_high: 0.2,
            canny_sigma: 1.0,
            train_scenes: 2048,
            heldout_offset: 1 << 32,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "image dims must be positive, got {}x{}",
                self.height, self.width
            )));
        }
        if self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::Config(format!(
                "image dims must be divisible by 16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.num_classes != crate::data::NUM_CLASSES {
            return Err(Error::Config(format!(
                "the shapes world has {} classes, config asks for {}",
                crate::data::NUM_CLASSES,
                self.num_classes
            )));
        }
        if !(0.0..=0.1).contains(&self.texture_amplitude) {
            return Err(Error::Config(format!(
                "texture amplitude must lie in [0, 0.1], got {}",
                self.texture_amplitude
            )));
        }
        let p = &self.shape_probabilities;
        for (name, v) in [
            ("rectangle", p.rectangle),
            ("circle", p.circle),
            ("triangle", p.triangle),
            ("pole", p.pole),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("probability for {name} is {v}")));
            }
        }
        if !(self.canny_low > 0.0 && self.canny_low < self.canny_high && self.canny_high <= 1.0) {
            return Err(Error::Config(format!(
                "canny thresholds need 0 < low < high <= 1, got {} / {}",
                self.canny_low, self.canny_high
            )));
        }
        if self.canny_sigma <= 0.0 {
            return Err(Error::Config("canny sigma must be positive".into()));
        }
        if self.train_scenes == 0 {
            return Err(Error::Config("train_scenes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channel width C of the shared feature F.
    pub channels: usize,
    /// Number n of edge/image generator stages.
    pub stages: usize,
    pub encoder_layers: usize,
    pub decoder_hidden: usize,
    pub disc_channels: usize,
    pub proxy_channels: usize,
    pub perceptual_channels: [usize; 3],
    pub init_std: f64,
    pub leaky_slope: f64,
    /// Side length of the label maps compared by the similarity loss.
    pub similarity_resolution: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            stages: 3,
            encoder_layers: 4,
            decoder_hidden: 16,
            disc_channels: 32,
            proxy_channels: 16,
            perceptual_channels: [8, 16, 32],
            init_std: 0.02,
            leaky_slope: 0.2,
            similarity_resolution: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.stages == 0 || self.encoder_layers == 0 {
            return Err(Error::Config("model widths and depths must be positive".into()));
        }
        if self.similarity_resolution * self.similarity_resolution > crate::similarity::MAX_SIMILARITY_PIXELS {
            return Err(Error::Config(format!(
                "similarity resolution {} exceeds the {}-pixel cap",
                self.similarity_resolution,
                crate::similarity::MAX_SIMILARITY_PIXELS
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub embed_dim: usize,
    pub strides: [usize; 4],
    pub scale_weights: [f64; 4],
    pub cross_pairs: Vec<(usize, usize)>,
    pub cross_weights: Vec<f64>,
    pub anchors_per_class: usize,
    pub negatives_cap: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            embed_dim: 32,
            strides: [1, 4, 8, 16],
            scale_weights: [1.0, 0.7, 0.4, 0.1],
            cross_pairs: vec![(4, 8), (4, 16)],
            cross_weights: vec![0.1, 0.1],
            anchors_per_class: 64,
            negatives_cap: 512,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.scale_weights.iter().chain(&self.cross_weights).any(|&w| w < 0.0) {
            return Err(Error::Config("contrastive weights must be non-negative".into()));
        }
        if self.cross_pairs.len() != self.cross_weights.len() {
            return Err(Error::Config("one weight per cross-scale pair required".into()));
        }
        if self.anchors_per_class == 0 || self.embed_dim == 0 {
            return Err(Error::Config("anchor cap and embedding dim must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of the generator objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_l: f64,
    pub lambda_f: f64,
    pub lambda_p: f64,
    /// Weight of the refined-image terms relative to the coarse image.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_s: 1.0,
            lambda_l: 1.0,
            lambda_f: 10.0,
            lambda_p: 10.0,
            lambda: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_c,
            self.lambda_s,
            self.lambda_l,
            self.lambda_f,
            self.lambda_p,
            self.lambda,
        ];
        if all.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {all:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub divergence_limit: f64,
    pub eval_scenes: usize,
    /// Average the class-specific output with the refined image.
    pub fuse_ig: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 8,
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
            divergence_limit: 1e4,
            eval_scenes: 64,
            fuse_ig: false,
        }
    }
}

/// Module and loss switches; the named rows are built by
/// [`crate::training::ablation_config`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub edge_branch: bool,
    pub edge_transfer: bool,
    pub semantic_preserving: bool,
    pub similarity_loss: bool,
    pub pixel_contrastive: bool,
    pub multiscale: bool,
    pub crossscale: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::all()
    }
}

impl AblationFlags {
    pub fn all() -> Self {
        Self {
            edge_branch: true,
            edge_transfer: true,
            semantic_preserving: true,
            similarity_loss: true,
            pixel_contrastive: true,
            multiscale: true,
            crossscale: true,
        }
    }

    pub fn none() -> Self {
        Self {
            edge_branch: false,
            edge_transfer: false,
            semantic_preserving: false,
            similarity_loss: false,
            pixel_contrastive: false,
            multiscale: false,
            crossscale: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.edge_transfer && !self.edge_branch {
            return Err(Error::Config("edge transfer requires the edge branch".into()));
        }
        if (self.multiscale || self.crossscale) && !self.pixel_contrastive {
            return Err(Error::Config(
                "multi/cross-scale losses require pixel contrastive learning".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub contrastive: ContrastiveConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.contrastive.validate()?;
        self.loss.validate()?;
        self.ablation.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.dataset.height % self.model.similarity_resolution != 0 {
            return Err(Error::Config(
                "similarity resolution must divide the image size".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Short stable digest of the serialized configuration.
    pub fn hash(&self) -> String {
        let text = self.to_toml_string().unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Reduced-width preset that trains on a single CPU core in minutes.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model.channels = 16;
        cfg.model.disc_channels = 16;
        cfg.model.similarity_resolution = 16;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn published_constants() {
        let c = ContrastiveConfig::default();
        assert_eq!(c.scale_weights, [1.0, 0.7, 0.4, 0.1]);
        assert_eq!(c.strides, [1, 4, 8, 16]);
        assert_eq!(c.cross_pairs, vec![(4, 8), (4, 16)]);
        assert_eq!(c.cross_weights, vec![0.1, 0.1]);
        let w = LossWeights::default();
        assert_eq!(
            [w.lambda_c, w.lambda_s, w.lambda_l, w.lambda_f, w.lambda_p, w.lambda],
            [1.0, 1.0, 1.0, 10.0, 10.0, 2.0]
        );
        let t = TrainConfig::default();
        assert_eq!((t.beta1, t.beta2, t.batch_size), (0.0, 0.999, 8));
        assert_eq!(ModelConfig::default().channels, 64);
        assert_eq!(ModelConfig::default().stages, 3);
    }

    #[test]
    fn rejects_bad_dims() {
        let mut d = DatasetConfig::default();
        d.height = 0;
        assert!(matches!(d.validate(), Err(Error::Config(_))));
        d.height = 40;
        assert!(matches!(d.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = Config::from_toml_str("[train]\nsteps = 5\n[dataset]\ntexture_amplitude = 0.0\n").unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.dataset.texture_amplitude, 0.0);
        assert_eq!(cfg.dataset.height, 64);
    }
}
