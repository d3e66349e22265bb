//! Run configuration: one TOML file covering every module, with CLI
//! overrides layered on top. Unknown keys are hard errors, and every run
//! writes its resolved configuration next to its outputs so a run can be
//! reproduced from the artifact alone.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::NetConfig;
use crate::error::{Error, Result};
use crate::geometry::CropConfig;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub crop: CropSection,
    pub network: NetworkSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub propagation: PropagationSection,
    pub synth: SynthSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Worker cap; `HVC_THREADS` overrides, hardware count when absent.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, threads: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropSection {
    pub view_size: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub min_overlap: f64,
    pub max_retries: u32,
    pub min_side: usize,
}

impl Default for CropSection {
    fn default() -> Self {
        Self {
            view_size: 64,
            scale_min: 0.2,
            scale_max: 1.0,
            aspect_min: 0.75,
            aspect_max: 4.0 / 3.0,
            min_overlap: 0.1,
            max_retries: 20,
            min_side: 32,
        }
    }
}

impl CropSection {
    pub fn to_crop_config(&self) -> CropConfig {
        CropConfig {
            scale_range: (self.scale_min, self.scale_max),
            aspect_range: (self.aspect_min, self.aspect_max),
            min_overlap: self.min_overlap,
            max_retries: self.max_retries,
            view_size: self.view_size,
            min_side: self.min_side,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub backbone_channels: Vec<usize>,
    pub backbone_kernel: usize,
    pub backbone_stride: usize,
    pub hidden_channels: usize,
    pub embed_channels: usize,
    pub pseudo_hidden: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            backbone_channels: vec![32, 64, 64],
            backbone_kernel: 3,
            backbone_stride: 2,
            hidden_channels: 64,
            embed_channels: 64,
            pseudo_hidden: 64,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl NetworkSection {
    pub fn to_net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: 3,
            backbone_channels: self.backbone_channels.clone(),
            backbone_kernel: self.backbone_kernel,
            backbone_stride: self.backbone_stride,
            hidden_channels: self.hidden_channels,
            embed_channels: self.embed_channels,
            pseudo_hidden: self.pseudo_hidden,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Weight of the dynamic term.
    pub alpha: f64,
    /// Positive radius, a fraction of the source-image extent.
    pub positive_radius: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            positive_radius: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Initial EMA momentum; the schedule raises it to 1.
    pub momentum_start: f64,
    /// `cosine` or `linear`.
    pub momentum_schedule: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 20,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            momentum_start: 0.99,
            momentum_schedule: "cosine".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationSection {
    pub n_context: usize,
    pub top_k: usize,
    pub temperature: f64,
}

impl Default for PropagationSection {
    fn default() -> Self {
        // At desk scale the feature grid is tiny and similarities bunch
        // together; a small top-k and a sharp softmax keep labels from
        // smearing across the few available reference cells.
        Self {
            n_context: 5,
            top_k: 5,
            temperature: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub train_images: usize,
    pub eval_videos: usize,
    pub video_frames: usize,
    pub canvas: usize,
    pub train_min_shapes: usize,
    pub train_max_shapes: usize,
    pub eval_min_shapes: usize,
    pub eval_max_shapes: usize,
    pub min_shape_size: usize,
    pub max_shape_size: usize,
    /// Object speed range in pixels per frame, evaluation videos only.
    pub min_speed: f64,
    pub max_speed: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        // Evaluation objects are sized so they span a few feature-grid
        // cells; far smaller shapes are unresolvable at an 8x8 grid no
        // matter how good the features are.
        Self {
            train_images: 512,
            eval_videos: 20,
            video_frames: 24,
            canvas: 64,
            train_min_shapes: 1,
            train_max_shapes: 3,
            eval_min_shapes: 1,
            eval_max_shapes: 2,
            min_shape_size: 16,
            max_shape_size: 30,
            min_speed: 0.5,
            max_speed: 1.6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Boundary tolerance as a fraction of the image diagonal.
    pub boundary_tol_frac: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            boundary_tol_frac: 0.008,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config '{}': {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the resolved configuration text.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        hasher.finalize().into()
    }

    pub fn validate(&self) -> Result<()> {
        self.crop.to_crop_config().validate()?;
        let r = self.loss.positive_radius;
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!(
                "loss.positive_radius must be in (0, 1), got {r}"
            )));
        }
        if self.loss.alpha < 0.0 {
            return Err(Error::Config(format!(
                "loss.alpha must be >= 0, got {}",
                self.loss.alpha
            )));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::Config(
                "train.batch_size and train.epochs must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.train.momentum_start) {
            return Err(Error::Config(format!(
                "train.momentum_start must be in [0, 1], got {}",
                self.train.momentum_start
            )));
        }
        match self.train.momentum_schedule.as_str() {
            "cosine" | "linear" => {}
            other => {
                return Err(Error::Config(format!(
                    "train.momentum_schedule must be 'cosine' or 'linear', got '{other}'"
                )))
            }
        }
        if self.network.backbone_channels.is_empty() {
            return Err(Error::Config("network.backbone_channels is empty".into()));
        }
        let grid = self
            .network
            .to_net_config()
            .feature_grid_for(self.crop.view_size);
        if grid == 0 {
            return Err(Error::Config(format!(
                "view_size {} collapses to an empty feature grid",
                self.crop.view_size
            )));
        }
        if self.propagation.top_k == 0 {
            return Err(Error::Config("propagation.top_k must be >= 1".into()));
        }
        if self.propagation.temperature <= 0.0 {
            return Err(Error::Config(
                "propagation.temperature must be > 0".into(),
            ));
        }
        if self.synth.min_shape_size < 4
            || self.synth.max_shape_size < self.synth.min_shape_size
            || self.synth.min_speed < 0.0
            || self.synth.max_speed < self.synth.min_speed
        {
            return Err(Error::Config("invalid synth shape size range".into()));
        }
        if self.synth.canvas < self.crop.min_side {
            return Err(Error::Config(format!(
                "synth.canvas {} below crop.min_side {}",
                self.synth.canvas, self.crop.min_side
            )));
        }
        Ok(())
    }

    /// Worker cap: `HVC_THREADS` env var wins, then `run.threads`, then 0
    /// (let the pool pick the hardware parallelism).
    pub fn effective_threads(&self) -> usize {
        std::env::var("HVC_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(self.run.threads)
    }
}
