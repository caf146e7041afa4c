//! Run configuration: one JSON document holding every knob of the
//! pipeline, with documented defaults, strict validation, and dotted-path
//! overrides for the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cinn::FlowConfig;
use crate::condnet::CondNetConfig;
use crate::drr::CameraConfig;
use crate::error::{Error, Result};
use crate::geometry::PoseSamplerConfig;

/// Phantom population: marker-free (symmetric) and marked volumes share
/// the geometry parameters; per-phantom shape jitter comes from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub n_vertebrae: usize,
    /// Per-vertebra size jitter; 0 gives every phantom the same shape so
    /// held-out evaluation tests new poses rather than new anatomy.
    pub shape_jitter: f64,
    pub body_density: f64,
    pub process_density: f64,
    /// Fraction of phantoms carrying the symmetry-breaking marker.
    pub marked_fraction: f64,
}

impl Default for PhantomSetConfig {
    fn default() -> Self {
        PhantomSetConfig {
            n_train: 4,
            n_test: 2,
            dims: [64, 128, 64],
            spacing_mm: [2.0, 2.0, 2.0],
            n_vertebrae: 5,
            shape_jitter: 0.0,
            body_density: 0.7,
            process_density: 0.9,
            marked_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    /// Save a checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: usize,
    /// With probability ½ per epoch, swap a marker-free record's pose
    /// target for its 180°-flipped twin. The two poses produce the same
    /// projection on a symmetric phantom, so without this the network can
    /// only memorize which side each training image came from; with it the
    /// bimodal posterior is the training optimum.
    pub symmetry_flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 40,
            stage2_epochs: 120,
            batch_size: 32,
            lr: 0.01,
            lr_decay_every: 100,
            lr_decay_factor: 0.1,
            weight_decay: 1e-5,
            checkpoint_every: 20,
            symmetry_flip_augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stochastic stage derives its own stream from it.
    pub seed: u64,
    /// Output root; overridable by the CINNREG_OUT environment variable.
    pub out_dir: PathBuf,
    pub phantoms: PhantomSetConfig,
    pub sampler: PoseSamplerConfig,
    /// Poses rendered per phantom.
    pub poses_per_phantom: usize,
    /// Test-split override for poses per phantom (training needs dense
    /// pose coverage; evaluation doesn't).
    pub test_poses_per_phantom: Option<usize>,
    pub camera: CameraConfig,
    pub condnet: CondNetConfig,
    pub flow: FlowConfig,
    pub training: TrainConfig,
    /// AIC margin for the multi-modality decision.
    pub aic_threshold: f64,
    pub n_posterior_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            phantoms: PhantomSetConfig::default(),
            sampler: PoseSamplerConfig::default(),
            poses_per_phantom: 64,
            test_poses_per_phantom: None,
            camera: CameraConfig::default(),
            condnet: CondNetConfig::default(),
            flow: FlowConfig::default(),
            training: TrainConfig::default(),
            aic_threshold: 2000.0,
            n_posterior_samples: 4096,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.phantoms;
        if p.n_train == 0 || p.n_test == 0 {
            return Err(Error::Config("need at least one train and test phantom".into()));
        }
        if !(0.0..=1.0).contains(&p.marked_fraction) {
            return Err(Error::Config("marked_fraction must be in [0, 1]".into()));
        }
        if self.poses_per_phantom == 0 || self.test_poses_per_phantom == Some(0) {
            return Err(Error::Config("poses_per_phantom must be positive".into()));
        }
        self.sampler.validate()?;
        self.camera.validate()?;
        self.condnet.validate()?;
        if self.flow.cond_dim != self.condnet.cond_dim {
            return Err(Error::Config(format!(
                "flow.cond_dim ({}) must equal condnet.cond_dim ({})",
                self.flow.cond_dim, self.condnet.cond_dim
            )));
        }
        if self.flow.depth == 0 || self.flow.subnet_width == 0 || self.flow.clamp_alpha <= 0.0 {
            return Err(Error::Config("invalid flow config".into()));
        }
        let t = &self.training;
        if t.batch_size == 0 || t.lr <= 0.0 || t.lr_decay_every == 0 || t.checkpoint_every == 0 {
            return Err(Error::Config("invalid training config".into()));
        }
        if !(self.aic_threshold >= 0.0) && !self.aic_threshold.is_infinite() {
            return Err(Error::Config("aic_threshold must be >= 0".into()));
        }
        if self.n_posterior_samples < 50 {
            return Err(Error::Config("n_posterior_samples must be >= 50".into()));
        }
        if self.camera.detector_px != self.condnet.image_input_dims {
            return Err(Error::Config(format!(
                "camera.detector_px {:?} must match condnet.image_input_dims {:?}",
                self.camera.detector_px, self.condnet.image_input_dims
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Apply a `key.path=value` override. The value is parsed as JSON when
    /// possible (numbers, booleans, arrays) and as a string otherwise.
    ///
    /// Does not validate: interdependent fields (e.g. detector size and
    /// image input size) may be inconsistent between consecutive overrides,
    /// so callers validate once after the last one.
    pub fn apply_override(&self, assignment: &str) -> Result<RunConfig> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("override '{assignment}' is not key=value")))?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(self)?;
        let mut node = &mut doc;
        let keys: Vec<&str> = path.split('.').collect();
        for (i, key) in keys.iter().enumerate() {
            let map = node.as_object_mut().ok_or_else(|| {
                Error::Parameter(format!("'{}' is not an object", keys[..i].join(".")))
            })?;
            if i + 1 == keys.len() {
                if !map.contains_key(*key) {
                    return Err(Error::Parameter(format!("unknown config key '{path}'")));
                }
                map.insert((*key).to_string(), value);
                break;
            }
            node = map
                .get_mut(*key)
                .ok_or_else(|| Error::Parameter(format!("unknown config key '{path}'")))?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("override '{assignment}': {e}")))
    }
}
