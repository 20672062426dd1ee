//! Pipeline configuration: one TOML file with a section per stage.
//! Unknown keys are rejected; every numeric default is documented inline.

use crate::error::{Error, Result};
use crate::networks::{ClassBalance, TrainConfig};
use crate::preprocess::PreprocessParams;
use crate::synthdata::{GradeRules, SynthSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed; stage seeds derive from it. CLI `--seed` overrides.
    pub seed: u64,
    pub preprocess: PreprocessSection,
    pub tiling: TilingSection,
    pub localnet: LocalNetSection,
    pub globalnet: GlobalNetSection,
    pub train: TrainSection,
    pub synth: SynthSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    /// Eq-style enhancement weights: out = alpha*I + beta*(G*I) + gamma.
    pub alpha: f64, // 4
    pub beta: f64, // -4
    pub gamma: f64, // 128
    /// Gaussian scale in pixels at the working size.
    pub theta: f64, // 10
    /// Kernel truncation radius; 0 selects ceil(3*theta).
    pub kernel_radius: usize, // 0
    /// ROI brightness threshold on the 0-255 scale.
    pub roi_threshold: f64, // 15
    /// Square working resolution images are brought to before tiling.
    pub working_size: usize, // 800
    /// Crop to the ROI bounding box before resizing. Disable for synthetic
    /// corpora generated at the working size: lesion annotations are only
    /// valid when preprocessing preserves geometry.
    pub crop_to_roi: bool, // true
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            alpha: 4.0,
            beta: -4.0,
            gamma: 128.0,
            theta: 10.0,
            kernel_radius: 0,
            roi_threshold: 15.0,
            working_size: 800,
            crop_to_roi: true,
        }
    }
}

impl PreprocessSection {
    pub fn params(&self) -> PreprocessParams {
        PreprocessParams {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            theta: self.theta,
            kernel_radius: self.kernel_radius,
            roi_threshold: self.roi_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilingSection {
    /// Patch side in pixels (must divide by 4 for the local net).
    pub h: usize, // 64
    /// Overlap between adjacent windows in pixels.
    pub ov: usize, // 16
}

impl Default for TilingSection {
    fn default() -> Self {
        TilingSection { h: 64, ov: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalNetSection {
    /// Dropout rate after each hidden FC layer.
    pub dropout: f64, // 0.5
}

impl Default for LocalNetSection {
    fn default() -> Self {
        LocalNetSection { dropout: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalNetSection {
    /// Dropout rate after each hidden FC layer.
    pub dropout: f64, // 0.5
}

impl Default for GlobalNetSection {
    fn default() -> Self {
        GlobalNetSection { dropout: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64, // 0.9
    /// Learning-rate multiplier applied every `lr_decay_every` epochs (0 = off).
    pub lr_decay_factor: f64, // 1.0
    pub lr_decay_every: usize, // 0
    /// Epochs without validation improvement before stopping (0 = off).
    pub early_stop_patience: usize, // 0
    /// "none" or "oversample_to_max".
    pub class_balance: ClassBalance,
    /// Stop once validation accuracy reaches this value.
    pub target_val_accuracy: Option<f64>,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay_factor: 1.0,
            lr_decay_every: 0,
            early_stop_patience: 0,
            class_balance: ClassBalance::OversampleToMax,
            target_val_accuracy: None,
        }
    }
}

impl TrainParams {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            seed,
            early_stop_patience: self.early_stop_patience,
            class_balance: self.class_balance,
            target_val_accuracy: self.target_val_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub local: TrainParams,
    pub global: TrainParams,
    /// Cap on training patches per class for the local net (0 = unlimited).
    pub max_patches_per_class: usize, // 2000
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            local: TrainParams::default(),
            global: TrainParams { epochs: 10, batch_size: 8, learning_rate: 0.005, ..Default::default() },
            max_patches_per_class: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Total images, split evenly over the four grades.
    pub count: usize, // 200
    /// Rendered image side; keep equal to preprocess.working_size when the
    /// corpus feeds training (annotations stay valid).
    pub side: usize, // 800
    pub disk_radius: [f64; 2],       // [0.88, 0.96] of side/2
    pub vessels: [usize; 2],         // [4, 8]
    pub vessel_curvature: [f64; 2],  // [0.02, 0.12]
    pub ma_radius: [f64; 2],         // [1, 3] px
    pub hem_radius: [f64; 2],        // [5, 20] px
    pub exu_radius: [f64; 2],        // [4, 15] px
    pub contrast: [f64; 2],          // [0.85, 1.1]
    /// Severe-NPDR stand-in thresholds (hemorrhage count / box pixels).
    pub severe_hem_count: usize, // 15
    pub severe_hem_box: usize, // 40
    pub train_fraction: f64, // 0.7
    pub val_fraction: f64, // 0.1
    /// Extra augmented copies of each training image (0 = off).
    pub augment_per_image: usize, // 0
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            count: 200,
            side: 800,
            disk_radius: [0.88, 0.96],
            vessels: [4, 8],
            vessel_curvature: [0.02, 0.12],
            ma_radius: [1.0, 3.0],
            hem_radius: [5.0, 20.0],
            exu_radius: [4.0, 15.0],
            contrast: [0.85, 1.1],
            severe_hem_count: 15,
            severe_hem_box: 40,
            train_fraction: 0.7,
            val_fraction: 0.1,
            augment_per_image: 0,
        }
    }
}

impl SynthSection {
    pub fn base_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: 0,
            side: self.side,
            disk_radius_range: (self.disk_radius[0], self.disk_radius[1]),
            vessel_count_range: (self.vessels[0], self.vessels[1]),
            vessel_curvature_range: (self.vessel_curvature[0], self.vessel_curvature[1]),
            ma_count: 0,
            hem_count: 0,
            exu_count: 0,
            ma_radius_range: (self.ma_radius[0], self.ma_radius[1]),
            hem_radius_range: (self.hem_radius[0], self.hem_radius[1]),
            exu_radius_range: (self.exu_radius[0], self.exu_radius[1]),
            contrast_range: (self.contrast[0], self.contrast[1]),
        }
    }

    pub fn grade_rules(&self) -> GradeRules {
        GradeRules { severe_hem_count: self.severe_hem_count, severe_hem_box: self.severe_hem_box }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Also train/evaluate the all-ones weighting baseline.
    pub ablation: bool, // true
    pub batch_size: usize, // 16
    /// Dump L/P CSV grids and M/I* renderings for the first N test images.
    pub dump_artifacts: usize, // 0
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { ablation: true, batch_size: 16, dump_artifacts: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Output directory; CLI `--out` overrides.
    pub out_dir: String, // "out"
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { out_dir: "out".into() }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(format!("config file {}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.params().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.tiling.h == 0 || self.tiling.ov >= self.tiling.h {
            return Err(Error::Config(format!(
                "tiling: need 0 <= ov < h, got h={} ov={}",
                self.tiling.h, self.tiling.ov
            )));
        }
        if self.tiling.h > self.preprocess.working_size {
            return Err(Error::Config("tiling.h exceeds preprocess.working_size".into()));
        }
        if self.tiling.h % 4 != 0 {
            return Err(Error::Config("tiling.h must be divisible by 4 (local net pools)".into()));
        }
        for (name, d) in [("localnet", self.localnet.dropout), ("globalnet", self.globalnet.dropout)] {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("{name}.dropout must be in [0, 1)")));
            }
        }
        for (name, t) in [("train.local", &self.train.local), ("train.global", &self.train.global)] {
            if t.epochs == 0 || t.batch_size < 2 {
                return Err(Error::Config(format!(
                    "{name}: epochs >= 1 and batch_size >= 2 required"
                )));
            }
            if t.learning_rate < 0.0 || !(0.0..1.0).contains(&t.momentum) {
                return Err(Error::Config(format!("{name}: bad learning_rate/momentum")));
            }
        }
        if self.synth.count < 4 {
            return Err(Error::Config("synth.count must be at least 4 (one per grade)".into()));
        }
        let f = self.synth.train_fraction + self.synth.val_fraction;
        if !(0.0..1.0).contains(&f) || self.synth.train_fraction <= 0.0 || self.synth.val_fraction <= 0.0 {
            return Err(Error::Config(
                "synth: train_fraction and val_fraction must be positive and sum below 1".into(),
            ));
        }
        self.synth.base_spec().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Canonical serialization used for stage hashing.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.preprocess.alpha, 4.0);
        assert_eq!(cfg.preprocess.beta, -4.0);
        assert_eq!(cfg.preprocess.gamma, 128.0);
        assert_eq!(cfg.preprocess.theta, 10.0);
        assert_eq!(cfg.tiling.h, 64);
        assert_eq!(cfg.tiling.ov, 16);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = PipelineConfig::from_toml_str("[preprocess]\nalfa = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("alfa"), "{err}");
        assert!(PipelineConfig::from_toml_str("[nosuchsection]\nx = 1\n").is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = PipelineConfig::from_toml_str("seed = 7\n[tiling]\nh = 32\nov = 8\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.tiling.h, 32);
        assert_eq!(cfg.preprocess.gamma, 128.0);
    }

    #[test]
    fn bad_tiling_rejected() {
        assert!(PipelineConfig::from_toml_str("[tiling]\nh = 16\nov = 16\n").is_err());
        assert!(PipelineConfig::from_toml_str("[tiling]\nh = 30\nov = 4\n").is_err());
    }

    #[test]
    fn canonical_roundtrip() {
        let cfg = PipelineConfig::default();
        let text = cfg.canonical_toml();
        let back = PipelineConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
