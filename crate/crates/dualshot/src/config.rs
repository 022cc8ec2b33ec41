//! The full detector hyperparameter record, its TOML serialization, validation,
//! dotted-path overrides, and the content hash used for checkpoint compatibility.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Variances;

/// Training-time sampling and augmentation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Anchor side lengths, strictly increasing. Shared with the anchor
    /// pyramid: these are the second-shot sizes.
    pub anchor_sizes: Vec<f64>,
    /// Probability of the balanced anchor branch; the SSD branch gets the rest.
    pub bdas_probability: f64,
    pub crop_size: u32,
    /// Target-size interval around the chosen anchor, as multipliers.
    pub size_interval_lo: f64,
    pub size_interval_hi: f64,
    /// Cap the target anchor index at one above the face's nearest index.
    /// Disabling lets the balanced branch pick any anchor uniformly.
    pub cap_target_index: bool,
    pub color_distort_probability: f64,
    pub hflip_probability: f64,
    pub brightness_delta: f64,
    pub contrast_lo: f64,
    pub contrast_hi: f64,
    pub saturation_lo: f64,
    pub saturation_hi: f64,
    /// Hue rotation bound in degrees.
    pub hue_delta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            anchor_sizes: vec![16.0, 32.0, 64.0, 128.0, 256.0, 512.0],
            bdas_probability: 0.8,
            crop_size: 640,
            size_interval_lo: 0.5,
            size_interval_hi: 2.0,
            cap_target_index: true,
            color_distort_probability: 0.5,
            hflip_probability: 0.5,
            brightness_delta: 32.0,
            contrast_lo: 0.5,
            contrast_hi: 1.5,
            saturation_lo: 0.5,
            saturation_hi: 1.5,
            hue_delta: 18.0,
        }
    }
}

/// Two-stage anchor matching thresholds and context-branch ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub primary_iou: f64,
    pub compensate_iou: f64,
    pub compensate_top_n: usize,
    /// Region multipliers for the face/head/body branches.
    pub context_ratios: Vec<f64>,
    /// Anchors overlapping an invalid-flagged box beyond this become ignore.
    pub ignore_iou: f64,
    /// Supervise the context branches on the first shot too (not just face).
    pub first_shot_context_branches: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            primary_iou: 0.35,
            compensate_iou: 0.1,
            compensate_top_n: 6,
            context_ratios: vec![1.0, 2.0, 4.0],
            ignore_iou: 0.35,
            first_shot_context_branches: true,
        }
    }
}

/// Dense prediction block: each stage consumes the concatenation of the block
/// input and all earlier stage outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenseContextConfig {
    pub stages: usize,
    pub growth_channels: usize,
    /// Channel width of the final 1x1 projection feeding the heads.
    pub projection_channels: usize,
}

impl Default for DenseContextConfig {
    fn default() -> Self {
        DenseContextConfig { stages: 4, growth_channels: 32, projection_channels: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Backbone registry key.
    pub backbone: String,
    /// Feature strides per pyramid level; must pair with `sampler.anchor_sizes`.
    pub strides: Vec<u32>,
    /// Backbone channel width per level.
    pub channels: Vec<usize>,
    pub dense: DenseContextConfig,
    /// Number of lowest levels that get product-fused pyramid features.
    pub lfpn_levels: usize,
    /// Level index carrying the anchor-free head.
    pub af_level: usize,
    /// Center-region shrink factor defining anchor-free positives.
    pub af_shrink: f64,
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            backbone: "strided".to_string(),
            strides: vec![4, 8, 16, 32, 64, 128],
            channels: vec![32, 64, 64, 96, 96, 128],
            dense: DenseContextConfig::default(),
            lfpn_levels: 3,
            af_level: 0,
            af_shrink: 0.3,
            normalize_mean: [0.485, 0.456, 0.406],
            normalize_std: [0.229, 0.224, 0.225],
        }
    }
}

/// Weights of the multi-task objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the first-shot (half-size anchor) terms.
    pub first_shot_weight: f64,
    pub regression_weight: f64,
    pub segmentation_weight: f64,
    pub anchor_free_weight: f64,
    /// Per context branch (face/head/body), applied to classification terms.
    pub context_branch_weights: Vec<f64>,
    /// Kept hardest negatives per positive in classification mining.
    pub mining_ratio: usize,
    /// First-shot background probability above which an easy negative is
    /// dropped from the second-shot classification loss.
    pub negative_filter_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            first_shot_weight: 0.5,
            regression_weight: 1.0,
            segmentation_weight: 0.1,
            anchor_free_weight: 0.1,
            context_branch_weights: vec![1.0, 0.5, 0.25],
            mining_ratio: 3,
            negative_filter_threshold: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: u64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub decay_iters: Vec<u64>,
    pub decay_factor: f64,
    pub total_iters: u64,
    pub batch_size: usize,
    /// Divides every iteration count above, shrinking the schedule shape-preservingly.
    pub scale: u64,
    pub checkpoint_every: u64,
    /// Sampler worker streams feeding the training queue.
    pub workers: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            momentum: 0.9,
            weight_decay: 0.0005,
            warmup_iters: 3000,
            lr_start: 1e-6,
            lr_peak: 4e-3,
            decay_iters: vec![80_000, 100_000],
            decay_factor: 0.1,
            total_iters: 120_000,
            batch_size: 28,
            scale: 1,
            checkpoint_every: 5000,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Detections below this score are dropped before suppression.
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Greedy matching threshold of the scoring protocol.
    pub match_iou: f64,
    /// Number of score bins on the precision-recall curve.
    pub curve_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_threshold: 0.01,
            nms_iou: 0.35,
            max_detections: 750,
            match_iou: 0.5,
            curve_points: 1000,
        }
    }
}

/// Filesystem layout: a dataset root holding images plus an annotation file,
/// and an output directory for checkpoints, logs and metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub dataset_root: String,
    pub annotation_file: String,
    pub image_dir: String,
    pub output_dir: String,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            dataset_root: "data".to_string(),
            annotation_file: "annotations.txt".to_string(),
            image_dir: "images".to_string(),
            output_dir: "out".to_string(),
        }
    }
}

/// Synthetic corpus used by `sample-stats` when no dataset is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub corpus_images: usize,
    pub faces_per_image: usize,
    pub size_lo: f64,
    pub size_hi: f64,
    pub image_size: u32,
    /// Band whose mass fraction is reported per sampler.
    pub band_lo: f64,
    pub band_hi: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            corpus_images: 2000,
            faces_per_image: 3,
            size_lo: 8.0,
            size_hi: 400.0,
            image_size: 1024,
            band_lo: 32.0,
            band_hi: 128.0,
        }
    }
}

/// The root configuration. `Default` is the full-scale recipe; [`DetectorConfig::desk`]
/// shrinks everything so the whole pipeline runs in seconds on a CPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub seed: u64,
    pub variances: Variances,
    pub sampler: SamplerConfig,
    pub matching: MatchConfig,
    pub network: NetworkConfig,
    pub losses: LossWeights,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
    pub stats: StatsConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            seed: 7,
            variances: Variances::default(),
            sampler: SamplerConfig::default(),
            matching: MatchConfig::default(),
            network: NetworkConfig::default(),
            losses: LossWeights::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
            io: IoConfig::default(),
            stats: StatsConfig::default(),
        }
    }
}

impl DetectorConfig {
    /// Full-scale recipe (the documented training configuration).
    pub fn full_scale() -> Self {
        DetectorConfig::default()
    }

    /// Desk-scale preset: quarter-resolution crops, a narrow backbone, and a
    /// schedule shrunk by 100x. Runs end to end in seconds.
    pub fn desk() -> Self {
        let mut cfg = DetectorConfig::default();
        cfg.sampler.anchor_sizes = vec![4.0, 8.0, 16.0, 32.0, 64.0, 128.0];
        cfg.sampler.crop_size = 160;
        cfg.network.strides = vec![1, 2, 4, 8, 16, 32];
        cfg.network.channels = vec![6, 12, 16, 16, 24, 24];
        cfg.network.dense = DenseContextConfig {
            stages: 2,
            growth_channels: 6,
            projection_channels: 12,
        };
        cfg.optim.batch_size = 4;
        cfg.optim.scale = 100;
        cfg.optim.checkpoint_every = 100;
        cfg.eval.max_detections = 200;
        cfg.stats.corpus_images = 200;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: DetectorConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable content hash over the canonical serialization, used to pair
    /// checkpoints with the configuration that produced them.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies a `section.key=value` override by editing the TOML tree and
    /// re-validating. Unknown paths are rejected.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("override `{assignment}` is not key=value"))
        })?;
        let mut tree: toml::Value = toml::from_str(&self.to_toml())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut node = &mut tree;
        let parts: Vec<&str> = path.trim().split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .get_mut(part)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown config section `{part}`")))?;
        }
        let leaf = parts.last().unwrap().trim();
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("`{path}` is not a table path")))?;
        if !table.contains_key(leaf) {
            return Err(Error::InvalidConfig(format!("unknown config key `{path}`")));
        }
        let parsed: toml::Value = toml::from_str(&format!("v = {}", value.trim()))
            .or_else(|_| toml::from_str(&format!("v = \"{}\"", value.trim())))
            .map_err(|e| Error::InvalidConfig(format!("bad value for `{path}`: {e}")))?;
        table.insert(leaf.to_string(), parsed["v"].clone());
        let text = toml::to_string(&tree).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        *self = Self::from_toml(&text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));

        let sizes = &self.sampler.anchor_sizes;
        if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
            return fail("sampler.anchor_sizes must be non-empty and strictly increasing".into());
        }
        if !(0.0..=1.0).contains(&self.sampler.bdas_probability) {
            return fail("sampler.bdas_probability must be in [0, 1]".into());
        }
        if self.sampler.size_interval_lo >= self.sampler.size_interval_hi {
            return fail("sampler.size_interval_lo must be below size_interval_hi".into());
        }
        if self.matching.compensate_iou >= self.matching.primary_iou {
            return fail("matching.compensate_iou must be below primary_iou".into());
        }
        if self.matching.context_ratios.is_empty()
            || self.matching.context_ratios.iter().any(|&r| r < 1.0)
        {
            return fail("matching.context_ratios must all be >= 1".into());
        }
        if self.network.strides.len() != sizes.len() {
            return fail(format!(
                "network.strides has {} levels but sampler.anchor_sizes has {}",
                self.network.strides.len(),
                sizes.len()
            ));
        }
        if self.network.channels.len() != self.network.strides.len() {
            return fail("network.channels must list one width per level".into());
        }
        if self.network.strides.windows(2).any(|w| w[1] % w[0] != 0 || w[1] <= w[0]) {
            return fail("network.strides must be strictly increasing and nested".into());
        }
        let largest = *self.network.strides.last().unwrap();
        if self.sampler.crop_size % largest != 0 {
            return fail(format!(
                "sampler.crop_size {} is not divisible by the largest stride {largest}",
                self.sampler.crop_size
            ));
        }
        if self.network.dense.stages < 2 {
            return fail("network.dense.stages must be at least 2".into());
        }
        if self.network.dense.growth_channels == 0 || self.network.dense.projection_channels == 0 {
            return fail("network.dense channel counts must be positive".into());
        }
        if self.network.lfpn_levels >= self.network.strides.len() {
            return fail("network.lfpn_levels must leave at least one unfused top level".into());
        }
        if self.network.af_level >= self.network.strides.len() {
            return fail("network.af_level out of range".into());
        }
        if !(0.0..=1.0).contains(&self.network.af_shrink) {
            return fail("network.af_shrink must be in [0, 1]".into());
        }
        if self.losses.context_branch_weights.len() != self.matching.context_ratios.len() {
            return fail("losses.context_branch_weights must match matching.context_ratios".into());
        }
        if self.losses.first_shot_weight < 0.0
            || self.losses.regression_weight < 0.0
            || self.losses.segmentation_weight < 0.0
            || self.losses.anchor_free_weight < 0.0
            || self.losses.context_branch_weights.iter().any(|&w| w < 0.0)
        {
            return fail("loss weights must be non-negative".into());
        }
        if self.optim.lr_start >= self.optim.lr_peak {
            return fail("optim.lr_start must be below lr_peak".into());
        }
        if self.optim.scale == 0 {
            return fail("optim.scale must be at least 1".into());
        }
        let decays = &self.optim.decay_iters;
        if decays.windows(2).any(|w| w[0] >= w[1])
            || decays.iter().any(|&d| d >= self.optim.total_iters)
        {
            return fail("optim.decay_iters must be strictly increasing and below total_iters".into());
        }
        if self.optim.batch_size == 0 || self.optim.workers == 0 {
            return fail("optim.batch_size and optim.workers must be positive".into());
        }
        if self.eval.curve_points == 0 {
            return fail("eval.curve_points must be positive".into());
        }
        Ok(())
    }

    /// Number of pyramid levels.
    pub fn levels(&self) -> usize {
        self.network.strides.len()
    }

    /// Number of context branches.
    pub fn branches(&self) -> usize {
        self.matching.context_ratios.len()
    }
}
