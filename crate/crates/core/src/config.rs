//! Run configuration, read from TOML.
//!
//! ```toml
//! [model]
//! channels = 12
//! hidden_dim = 128
//! fire_rate = 0.5
//! padding = "replicate"
//!
//! [train]
//! epochs = 1000
//! n_range = [32, 64]
//! steps_per_frame = 24
//! pose_count = 8
//! multiview = true
//! density_encoding = true
//! velocity_encoding = true
//! lambda_app = 1.0
//! lambda_motion = 0.5
//! lambda_dir = 1.0
//! lambda_mag = 1.0
//! lambda_overflow = 100.0
//! motion_gate = "verbatim"
//! pool_size = 32
//! pool_reseed_prob = 0.1
//! seed = 0
//! render_size = 256
//! checkpoint_every = 100
//! [train.lr]
//! base = 1e-3
//! milestones = [0.6, 0.85]
//! factor = 0.3
//!
//! [extractor]
//! kind = "random"        # or "safetensors" with `weights = "vgg16.safetensors"`
//! width_divisor = 1
//! seed = 0
//!
//! [data]
//! style = "style.png"
//! style_size = 256
//! density_dir = "data/density"
//! velocity_dir = "data/velocity"
//! frame_index = 60
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VncaError};
use crate::grid::{DEFAULT_CHANNELS, MIN_CHANNELS};
use crate::losses::{FeatureExtractor, MotionGate, MotionWeights, VggExtractor};
use crate::nca::{DEFAULT_FIRE_RATE, DEFAULT_HIDDEN_DIM};
use crate::optim::LrSchedule;
use crate::render::{default_gamma, CameraPose};
use crate::volume::Padding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub hidden_dim: usize,
    pub fire_rate: f32,
    pub padding: Padding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: DEFAULT_CHANNELS,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            fire_rate: DEFAULT_FIRE_RATE,
            padding: Padding::Replicate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: LrSchedule,
    /// Inclusive range of the per-epoch rollout length `n`.
    pub n_range: [usize; 2],
    /// Update steps mapped to one simulation frame.
    pub steps_per_frame: usize,
    /// Azimuths evenly spaced over the circle; ignored when `poses` is set.
    pub pose_count: usize,
    pub poses: Option<Vec<CameraPose>>,
    /// When false, only the frontal pose is used.
    pub multiview: bool,
    pub density_encoding: bool,
    pub velocity_encoding: bool,
    pub lambda_app: f32,
    pub lambda_motion: f32,
    pub lambda_dir: f32,
    pub lambda_mag: f32,
    /// Weight of the penalty on post-rollout cell states outside [-1, 1].
    pub lambda_overflow: f32,
    pub motion_gate: MotionGate,
    /// Absorption constant; defaults to `0.05 * 64 / D`.
    pub gamma: Option<f32>,
    pub pool_size: usize,
    pub pool_reseed_prob: f32,
    pub seed: u64,
    /// Rendered image side length fed to the losses.
    pub render_size: usize,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            lr: LrSchedule::default(),
            n_range: [32, 64],
            steps_per_frame: 24,
            pose_count: 8,
            poses: None,
            multiview: true,
            density_encoding: true,
            velocity_encoding: true,
            lambda_app: 1.0,
            lambda_motion: 0.5,
            lambda_dir: 1.0,
            lambda_mag: 1.0,
            lambda_overflow: 100.0,
            motion_gate: MotionGate::Verbatim,
            gamma: None,
            pool_size: 32,
            pool_reseed_prob: 0.1,
            seed: 0,
            render_size: 256,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.n_range;
        if lo < 1 || hi < lo {
            return Err(VncaError::Config(format!("n_range must satisfy 1 <= min <= max, got [{lo}, {hi}]")));
        }
        if self.steps_per_frame < 1 {
            return Err(VncaError::Config("steps_per_frame must be at least 1".into()));
        }
        if self.pool_size < 1 {
            return Err(VncaError::Config("pool_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pool_reseed_prob) {
            return Err(VncaError::Config(format!(
                "pool_reseed_prob {} outside [0, 1]",
                self.pool_reseed_prob
            )));
        }
        if self.render_size < 32 {
            return Err(VncaError::Config(format!(
                "render_size must be at least 32 for the feature extractor, got {}",
                self.render_size
            )));
        }
        if self.poses.as_ref().map_or(self.pose_count == 0, |p| p.is_empty()) {
            return Err(VncaError::Config("camera pose set is empty".into()));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(VncaError::Config(format!("gamma must be positive, got {g}")));
            }
        }
        for (name, v) in [
            ("lambda_app", self.lambda_app),
            ("lambda_motion", self.lambda_motion),
            ("lambda_dir", self.lambda_dir),
            ("lambda_mag", self.lambda_mag),
            ("lambda_overflow", self.lambda_overflow),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(VncaError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        self.lr.validate()
    }

    /// The camera poses sampled during training, sized to `render_size`.
    pub fn pose_set(&self) -> Vec<CameraPose> {
        let poses = if !self.multiview {
            vec![CameraPose::front()]
        } else if let Some(p) = &self.poses {
            p.clone()
        } else {
            CameraPose::ring(self.pose_count)
        };
        poses
            .into_iter()
            .map(|p| p.with_image_size(self.render_size, self.render_size))
            .collect()
    }

    pub fn gamma_for(&self, depth: usize) -> f32 {
        self.gamma.unwrap_or_else(|| default_gamma(depth))
    }

    pub fn motion_weights(&self) -> MotionWeights {
        MotionWeights {
            lambda_dir: self.lambda_dir,
            lambda_mag: self.lambda_mag,
            gate: self.motion_gate,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    /// Frozen VGG16-shaped network with seeded random weights.
    #[default]
    Random,
    /// Torchvision VGG16 weights exported to safetensors.
    Safetensors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub kind: ExtractorKind,
    pub weights: Option<PathBuf>,
    pub width_divisor: usize,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            kind: ExtractorKind::Random,
            weights: None,
            width_divisor: 1,
            seed: 0,
        }
    }
}

impl ExtractorConfig {
    pub fn build(&self) -> Result<Box<dyn FeatureExtractor>> {
        match self.kind {
            ExtractorKind::Random => Ok(Box::new(VggExtractor::random(self.width_divisor, self.seed)?)),
            ExtractorKind::Safetensors => {
                let path = self
                    .weights
                    .as_ref()
                    .ok_or_else(|| VncaError::Config("extractor kind \"safetensors\" needs `weights`".into()))?;
                Ok(Box::new(VggExtractor::from_safetensors(path)?))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub style: Option<PathBuf>,
    pub style_size: Option<usize>,
    pub density_dir: Option<PathBuf>,
    pub velocity_dir: Option<PathBuf>,
    pub frame_index: u32,
}

impl DataConfig {
    pub fn style_size(&self) -> usize {
        self.style_size.unwrap_or(256)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub extractor: ExtractorConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| VncaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| VncaError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            VncaError::Config(msg) => VncaError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.data.style);
        fix(&mut self.data.density_dir);
        fix(&mut self.data.velocity_dir);
        fix(&mut self.extractor.weights);
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.channels < MIN_CHANNELS {
            return Err(VncaError::Config(format!(
                "model.channels must be at least {MIN_CHANNELS}, got {}",
                m.channels
            )));
        }
        if m.hidden_dim == 0 {
            return Err(VncaError::Config("model.hidden_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&m.fire_rate) {
            return Err(VncaError::Config(format!("model.fire_rate {} outside [0, 1]", m.fire_rate)));
        }
        if self.extractor.width_divisor == 0 {
            return Err(VncaError::Config("extractor.width_divisor must be positive".into()));
        }
        if self.data.style_size() < 32 {
            return Err(VncaError::Config("data.style_size must be at least 32".into()));
        }
        self.train.validate()
    }
}
