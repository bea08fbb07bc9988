//! Experiment configuration: a single TOML document with flat sections per
//! subsystem. A SHA-256 hash of the canonical (experiment-defining) portion
//! is embedded into every output for reproducibility auditing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use msloc_core::geom::RansacConfig;
use msloc_core::model::{ModelConfig, SharingStrategy};
use msloc_core::optim::OptimizerConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub experiment: Experiment,
    #[serde(default, rename = "scene")]
    pub scenes: Vec<SceneCfg>,
    #[serde(default)]
    pub sim: SimCfg,
    #[serde(default)]
    pub model: ModelCfg,
    #[serde(default)]
    pub optim: OptimCfg,
    #[serde(default)]
    pub ransac: RansacCfg,
    #[serde(default)]
    pub generalize: Option<GeneralizeCfg>,
    #[serde(default)]
    pub evaluate: Option<EvaluateCfg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    #[serde(default = "d_name")]
    pub name: String,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_out")]
    pub out_dir: PathBuf,
    #[serde(default = "d_strategy")]
    pub strategy: SharingStrategy,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
}

impl Default for Experiment {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn d_name() -> String {
    "run".into()
}
fn d_seed() -> u64 {
    7
}
fn d_out() -> PathBuf {
    "out".into()
}
fn d_strategy() -> SharingStrategy {
    SharingStrategy::GatedConvSpecificNorm
}
fn d_beta() -> f64 {
    0.25
}
fn d_lambda() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneCfg {
    pub name: String,
    pub seed: u64,
    #[serde(default = "d_extent")]
    pub extent: [f64; 2],
    /// Scenes sharing a `height_seed` have the same geometry but different
    /// textures (closely related tasks).
    #[serde(default)]
    pub height_seed: Option<u64>,
}

fn d_extent() -> [f64; 2] {
    [4.0, 4.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimCfg {
    #[serde(default = "d_image")]
    pub image_size: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "d_train_views")]
    pub train_views: usize,
    #[serde(default = "d_test_views")]
    pub test_views: usize,
    /// Focal length in pixels; defaults to the image size.
    #[serde(default)]
    pub focal: Option<f64>,
}

impl Default for SimCfg {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn d_image() -> usize {
    64
}
fn d_channels() -> usize {
    3
}
fn d_sigma() -> f64 {
    0.01
}
fn d_train_views() -> usize {
    120
}
fn d_test_views() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    #[serde(default = "d_pre_width")]
    pub pre_width: usize,
    #[serde(default = "d_widths")]
    pub widths: [usize; 4],
    #[serde(default = "d_strides")]
    pub strides: [usize; 4],
    #[serde(default = "d_true")]
    pub attention: bool,
    #[serde(default = "d_se_reduction")]
    pub se_reduction: usize,
    #[serde(default = "d_head_hidden")]
    pub head_hidden: usize,
    #[serde(default = "d_score_init")]
    pub score_init: f64,
    #[serde(default = "d_uncert_floor")]
    pub uncert_floor: f64,
}

impl Default for ModelCfg {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn d_pre_width() -> usize {
    16
}
fn d_widths() -> [usize; 4] {
    [16, 16, 32, 32]
}
fn d_strides() -> [usize; 4] {
    [1, 1, 2, 2]
}
fn d_true() -> bool {
    true
}
fn d_se_reduction() -> usize {
    4
}
fn d_head_hidden() -> usize {
    64
}
fn d_score_init() -> f64 {
    0.5
}
fn d_uncert_floor() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimCfg {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// 0 disables smoothing (raw previous-iteration norms in the relative
    /// weights); a value in (0, 1) enables the EMA.
    #[serde(default)]
    pub grad_ema: f64,
    #[serde(default = "d_workers")]
    pub workers_per_task: usize,
    #[serde(default = "d_true")]
    pub grad_norm: bool,
}

impl Default for OptimCfg {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn d_lr() -> f64 {
    3e-3
}
fn d_wd() -> f64 {
    0.05
}
fn d_iterations() -> usize {
    5000
}
fn d_batch() -> usize {
    4
}
fn d_workers() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacCfg {
    #[serde(default = "d_ransac_iters")]
    pub iterations: usize,
    #[serde(default = "d_threshold")]
    pub threshold_px: f64,
    #[serde(default = "d_min_sample")]
    pub min_sample: usize,
    #[serde(default = "d_confidence")]
    pub confidence: f64,
    #[serde(default = "d_refine")]
    pub refine_iterations: usize,
    /// Cells above this uncertainty percentile are dropped; 0 disables.
    #[serde(default = "d_percentile")]
    pub uncertainty_percentile: f64,
}

impl Default for RansacCfg {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn d_ransac_iters() -> usize {
    256
}
fn d_threshold() -> f64 {
    8.0
}
fn d_min_sample() -> usize {
    6
}
fn d_confidence() -> f64 {
    0.999
}
fn d_refine() -> usize {
    50
}
fn d_percentile() -> f64 {
    80.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralizeCfg {
    pub base_checkpoint: PathBuf,
    /// Name of the scene (from `[[scene]]`) to add to the bundle.
    pub scene: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateCfg {
    pub checkpoint: PathBuf,
    pub scene: String,
    #[serde(default = "d_split")]
    pub split: String,
}

fn d_split() -> String {
    "test".into()
}

/// The experiment-defining portion of the config; verb-specific sections
/// and the output directory do not affect the hash, so `evaluate` runs can
/// verify a checkpoint against the config that trained it.
#[derive(Serialize)]
struct CanonicalConfig<'a> {
    name: &'a str,
    seed: u64,
    strategy: &'a SharingStrategy,
    beta: f64,
    lambda: f64,
    scenes: &'a [SceneCfg],
    sim: &'a SimCfg,
    model: &'a ModelCfg,
    optim: &'a OptimCfg,
    ransac: &'a RansacCfg,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.scenes.is_empty() {
            return Err(ConfigError::Invalid("no [[scene]] entries".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for s in &self.scenes {
            if !names.insert(&s.name) {
                return Err(ConfigError::Invalid(format!("duplicate scene `{}`", s.name)));
            }
            if s.extent[0] <= 0.0 || s.extent[1] <= 0.0 {
                return Err(ConfigError::Invalid(format!("scene `{}` has non-positive extent", s.name)));
            }
        }
        if self.sim.image_size % 8 != 0 {
            return Err(ConfigError::Invalid("sim.image_size must be divisible by 8".into()));
        }
        if self.optim.learning_rate <= 0.0 || self.optim.iterations == 0 {
            return Err(ConfigError::Invalid("optim.learning_rate and iterations must be positive".into()));
        }
        if self.experiment.beta < 0.0 {
            return Err(ConfigError::Invalid("experiment.beta must be >= 0".into()));
        }
        if self.ransac.min_sample < 4 {
            return Err(ConfigError::Invalid("ransac.min_sample must be >= 4".into()));
        }
        if let Some(g) = &self.generalize {
            if !self.scenes.iter().any(|s| s.name == g.scene) {
                return Err(ConfigError::Invalid(format!(
                    "generalize.scene `{}` is not defined in [[scene]]",
                    g.scene
                )));
            }
        }
        if let Some(e) = &self.evaluate {
            if !self.scenes.iter().any(|s| s.name == e.scene) {
                return Err(ConfigError::Invalid(format!(
                    "evaluate.scene `{}` is not defined in [[scene]]",
                    e.scene
                )));
            }
            if e.split != "train" && e.split != "test" {
                return Err(ConfigError::Invalid(format!("unknown split `{}`", e.split)));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical experiment definition, hex-encoded.
    pub fn hash(&self) -> String {
        let canon = CanonicalConfig {
            name: &self.experiment.name,
            seed: self.experiment.seed,
            strategy: &self.experiment.strategy,
            beta: self.experiment.beta,
            lambda: self.experiment.lambda,
            scenes: &self.scenes,
            sim: &self.sim,
            model: &self.model,
            optim: &self.optim,
            ransac: &self.ransac,
        };
        let json = serde_json::to_string(&canon).expect("canonical config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_encode(&hasher.finalize())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.sim.channels,
            pre_width: self.model.pre_width,
            widths: self.model.widths,
            strides: self.model.strides,
            attention: self.model.attention,
            se_reduction: self.model.se_reduction,
            head_hidden: self.model.head_hidden,
            lambda: self.experiment.lambda,
            score_init: self.model.score_init,
            uncert_floor: self.model.uncert_floor,
            strategy: self.experiment.strategy,
            ..ModelConfig::default()
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.optim.learning_rate,
            weight_decay: self.optim.weight_decay,
            iterations: self.optim.iterations,
            batch_size: self.optim.batch_size,
            beta: self.experiment.beta,
            seed: self.experiment.seed,
            grad_ema: (self.optim.grad_ema > 0.0).then_some(self.optim.grad_ema),
            workers_per_task: self.optim.workers_per_task,
            grad_norm: self.optim.grad_norm,
        }
    }

    pub fn ransac_config(&self) -> RansacConfig {
        RansacConfig {
            max_iterations: self.ransac.iterations,
            inlier_threshold_px: self.ransac.threshold_px,
            min_sample_size: self.ransac.min_sample,
            confidence: self.ransac.confidence,
            refine_iterations: self.ransac.refine_iterations,
            uncertainty_percentile: (self.ransac.uncertainty_percentile > 0.0)
                .then_some(self.ransac.uncertainty_percentile),
        }
    }

    pub fn focal(&self) -> f64 {
        self.sim.focal.unwrap_or(self.sim.image_size as f64)
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[scene]]
name = "alpha"
seed = 101
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: Config = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.sim.image_size, 64);
        assert_eq!(cfg.optim.batch_size, 4);
        assert_eq!(cfg.experiment.beta, 0.25);
        assert_eq!(cfg.experiment.lambda, 0.5);
        assert_eq!(cfg.ransac.min_sample, 6);
    }

    #[test]
    fn hash_ignores_out_dir_and_verb_sections() {
        let a: Config = toml::from_str(MINIMAL).unwrap();
        let mut b = a.clone();
        b.experiment.out_dir = "elsewhere".into();
        b.evaluate = Some(EvaluateCfg {
            checkpoint: "x.ckpt".into(),
            scene: "alpha".into(),
            split: "test".into(),
        });
        assert_eq!(a.hash(), b.hash());

        let mut c = a.clone();
        c.experiment.seed = 8;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let empty: Config = toml::from_str("").unwrap();
        assert!(empty.validate().is_err());

        let mut dup: Config = toml::from_str(MINIMAL).unwrap();
        dup.scenes.push(dup.scenes[0].clone());
        assert!(dup.validate().is_err());

        let mut bad: Config = toml::from_str(MINIMAL).unwrap();
        bad.sim.image_size = 30;
        assert!(bad.validate().is_err());
    }
}
