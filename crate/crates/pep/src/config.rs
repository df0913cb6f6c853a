//! Run configuration: every tunable in one structured file.
//!
//! The file format is TOML with five sections (model, data, train, eval,
//! infer). Unknown keys are rejected so a typo cannot silently fall back to a
//! default. `RunConfig::default()` is the documented desk-scale recipe;
//! `print-config` dumps it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor inside every log. Not a tunable: oracle tests pin it.
pub const CLAMP_EPS: f64 = 1e-12;

/// Inference-time mask binarization threshold.
pub const MASK_BINARIZE: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel width of every pyramid stage.
    pub c_feat: usize,
    /// Descriptor width. Must equal `c_b`.
    pub c_d: usize,
    /// General-feature (mask basis) width. Must equal `c_d`.
    pub c_b: usize,
    /// Width of the four shared 3x3 conv layers in each subnetwork head.
    pub head_width: usize,
    /// Foreground classes (background channel added internally).
    pub num_classes: usize,
    /// Confidence threshold for selecting original descriptors.
    pub tau_conf: f64,
    /// Score threshold for key pixels inside excavation windows.
    pub tau_key: f64,
    /// Affinity threshold for merging descriptors at inference.
    pub tau_merge: f64,
    /// Hard cap on descriptors per image.
    pub n_cap: usize,
    /// Maximum key pixels kept per excavation window.
    pub k_max: usize,
    /// Excavation window radius in grid cells (Chebyshev).
    pub window_radius: usize,
    /// Excavate over the whole stage map instead of a window.
    pub full_map_excavation: bool,
    /// Count the source instance's own center as an excavation positive.
    pub excavate_source_center: bool,
    /// Pre-sigmoid additive bias on the affinity diagonal.
    pub bias_self: f64,
    /// Output stride of the mask basis (stage-2 resolution by default).
    pub mask_stride: usize,
    /// Width of the excavation conv head's hidden layers.
    pub excav_width: usize,
    /// Enables the excavating pathway (mined descriptors + their losses).
    pub enable_excavating: bool,
    /// Enables the purifying pathway (affinity loss + merge at inference).
    pub enable_purifying: bool,
    /// Average member masks within a merged group instead of taking the
    /// representative's mask.
    pub merge_average_masks: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_feat: 64,
            c_d: 64,
            c_b: 64,
            head_width: 64,
            num_classes: 3,
            tau_conf: 0.3,
            tau_key: 0.3,
            tau_merge: 0.5,
            n_cap: 30,
            k_max: 8,
            window_radius: 8,
            full_map_excavation: false,
            excavate_source_center: false,
            bias_self: 1.0,
            mask_stride: 4,
            excav_width: 32,
            enable_excavating: true,
            enable_purifying: true,
            merge_average_masks: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Square canvas side; must be a multiple of 32.
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Probability that a new shape is placed overlapping an existing one.
    pub overlap_bias: f64,
    pub seed: u64,
    /// Fraction of the instance bbox that counts as its center region.
    pub center_fraction: f64,
    /// sqrt(area) upper bounds in absolute pixels routing instances to
    /// stages 1..4; anything larger goes to stage 5.
    pub scale_ranges: [f64; 4],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_instances: 2,
            max_instances: 5,
            overlap_bias: 0.7,
            seed: 0,
            center_fraction: 0.2,
            scale_ranges: [16.0, 32.0, 64.0, 128.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Per-element means: loss magnitude independent of resolution.
    Mean,
    /// Literal raw sums, used by the summation oracles.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherForcing {
    /// Alternate ground-truth-derived and predicted descriptor locations
    /// deterministically per batch item.
    Mixed,
    /// Predicted selection only.
    Predicted,
    /// Ground-truth-derived locations only.
    GroundTruth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight on the excavating center-map loss.
    pub alpha: f64,
    /// Weight on the mined-descriptor classification loss.
    pub beta: f64,
    /// Weight on the affinity-matrix loss.
    pub gamma: f64,
    /// Weight on the mask loss.
    pub delta: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Fractions of `steps` at which lr is multiplied by `decay_factor`.
    pub milestones: Vec<f64>,
    pub decay_factor: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub teacher_forcing: TeacherForcing,
    pub loss_norm: LossNorm,
    /// Checkpoint every N steps (a final checkpoint is always written).
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Stop once total loss falls to this fraction of its step-10 value and
    /// the training-set AP50 reaches `early_stop_ap50`. Disabled when absent.
    pub early_stop_loss_ratio: Option<f64>,
    pub early_stop_ap50: f64,
    /// Recheck the early-stop condition every N steps.
    pub early_stop_every: usize,
    pub early_stop_min_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
            batch_size: 8,
            steps: 2000,
            milestones: vec![0.75, 0.92],
            decay_factor: 0.1,
            grad_clip_norm: 10.0,
            seed: 0,
            teacher_forcing: TeacherForcing::Mixed,
            loss_norm: LossNorm::Mean,
            checkpoint_every: 500,
            log_every: 10,
            early_stop_loss_ratio: None,
            early_stop_ap50: 0.75,
            early_stop_every: 25,
            early_stop_min_steps: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBuckets {
    /// COCO small/medium/large area thresholds scaled by canvas_area/640^2.
    Scaled,
    /// Raw COCO thresholds (32^2, 96^2).
    Coco,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub size_buckets: SizeBuckets,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            size_buckets: SizeBuckets::Scaled,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Detections below this score are dropped from output.
    pub min_score: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { min_score: 0.0 }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::ReadFile {
            path: path.to_owned(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Number of classifier channels: foreground classes plus background.
    pub fn c_p(&self) -> usize {
        self.model.num_classes + 1
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if m.c_feat == 0 || m.c_d == 0 || m.c_b == 0 || m.head_width == 0 || m.excav_width == 0 {
            return fail("channel widths must be positive".into());
        }
        if m.c_b != m.c_d {
            return fail(format!(
                "c_b ({}) must equal c_d ({}): masks are rendered by convolving descriptors with the basis",
                m.c_b, m.c_d
            ));
        }
        if m.num_classes == 0 {
            return fail("num_classes must be at least 1".into());
        }
        for (name, v) in [
            ("tau_conf", m.tau_conf),
            ("tau_key", m.tau_key),
            ("tau_merge", m.tau_merge),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0,1], got {v}"));
            }
        }
        if m.n_cap == 0 {
            return fail("n_cap must be at least 1".into());
        }
        if m.k_max == 0 {
            return fail("k_max must be at least 1".into());
        }
        if m.window_radius == 0 {
            return fail("window_radius must be at least 1".into());
        }
        if !m.bias_self.is_finite() {
            return fail("bias_self must be finite".into());
        }
        if m.mask_stride == 0 || !m.mask_stride.is_power_of_two() || m.mask_stride > 32 {
            return fail(format!(
                "mask_stride must be a power of two in 1..=32, got {}",
                m.mask_stride
            ));
        }

        let d = &self.data;
        if d.image_size == 0 || d.image_size % 32 != 0 {
            return fail(format!(
                "image_size must be a positive multiple of 32, got {}",
                d.image_size
            ));
        }
        if d.min_instances > d.max_instances {
            return fail(format!(
                "min_instances ({}) exceeds max_instances ({})",
                d.min_instances, d.max_instances
            ));
        }
        if !(0.0..=1.0).contains(&d.overlap_bias) {
            return fail(format!("overlap_bias must lie in [0,1], got {}", d.overlap_bias));
        }
        if !(d.center_fraction > 0.0 && d.center_fraction <= 1.0) {
            return fail(format!(
                "center_fraction must lie in (0,1], got {}",
                d.center_fraction
            ));
        }
        if !d.scale_ranges.windows(2).all(|w| w[0] < w[1]) || d.scale_ranges[0] <= 0.0 {
            return fail(format!(
                "scale_ranges must be positive and strictly increasing, got {:?}",
                d.scale_ranges
            ));
        }

        let t = &self.train;
        if !(t.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return fail(format!("momentum must lie in [0,1), got {}", t.momentum));
        }
        if t.weight_decay < 0.0 {
            return fail(format!("weight_decay must be non-negative, got {}", t.weight_decay));
        }
        for (name, v) in [("alpha", t.alpha), ("beta", t.beta), ("gamma", t.gamma), ("delta", t.delta)] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("loss weight {name} must be finite and non-negative, got {v}"));
            }
        }
        if t.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if t.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if !(t.decay_factor > 0.0 && t.decay_factor < 1.0) {
            return fail(format!("decay_factor must lie in (0,1), got {}", t.decay_factor));
        }
        if !t
            .milestones
            .windows(2)
            .all(|w| w[0] < w[1])
            || t.milestones.iter().any(|&f| !(0.0 < f && f <= 1.0))
        {
            return fail(format!(
                "milestones must be strictly increasing fractions in (0,1], got {:?}",
                t.milestones
            ));
        }
        if !(t.grad_clip_norm > 0.0) {
            return fail(format!("grad_clip_norm must be positive, got {}", t.grad_clip_norm));
        }
        if let Some(r) = t.early_stop_loss_ratio {
            if !(0.0 < r && r < 1.0) {
                return fail(format!("early_stop_loss_ratio must lie in (0,1), got {r}"));
            }
        }
        if t.early_stop_every == 0 {
            return fail("early_stop_every must be at least 1".into());
        }

        if !(0.0..=1.0).contains(&self.infer.min_score) {
            return fail(format!(
                "infer.min_score must lie in [0,1], got {}",
                self.infer.min_score
            ));
        }
        Ok(())
    }
}
