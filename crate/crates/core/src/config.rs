//! Run configuration: one JSON document, every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentPolicy, SceneConfig};
use crate::error::{Error, Result};
use crate::image::UNetConfig;
use crate::losses::{CircleParams, LossVariant, TupleLayout};
use crate::point::PointNetConfig;
use crate::tensor::{AdamWConfig, LrSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Scene `i` of the training split uses seed `scene_seed + i`; the
    /// validation split starts at `scene_seed + val_seed_offset`.
    pub scene_seed: u64,
    pub val_seed_offset: u64,
    pub scene: SceneConfig,
    pub augment: AugmentPolicy,
    /// Load scenes from a `gen-data` directory instead of generating them.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scenes: 16,
            val_scenes: 2,
            scene_seed: 0,
            val_seed_offset: 1_000_000,
            scene: SceneConfig::default(),
            augment: AugmentPolicy::default(),
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub point: PointNetConfig,
    pub image: UNetConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub gamma: f64,
    pub margin: f64,
    pub d_shared: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { variant: LossVariant::TupleCircle, gamma: 32.0, margin: 0.25, d_shared: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub decay: f64,
    pub epochs: usize,
    /// Correspondences per step (N).
    pub batch_n: usize,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        OptimConfig {
            lr: 0.01,
            decay: 0.985,
            epochs: 100,
            batch_n: 64,
            max_steps: None,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { initial: self.lr, decay: self.decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Correspondences per validation batch.
    pub batch_n: usize,
    /// Rows sampled from each batch for the accuracies.
    pub n_sample: usize,
    /// Evaluate every this many training steps (plus step 0 and the end).
    pub every: usize,
    pub k_clusters: usize,
    pub kmeans_iters: usize,
    pub bin_edges: Vec<f64>,
    pub palette_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch_n: 64,
            n_sample: 64,
            every: 50,
            k_clusters: 16,
            kmeans_iters: 100,
            bin_edges: vec![0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 10.0],
            palette_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Feature width shared by both encoders.
    pub fn feature_dim(&self) -> usize {
        self.model.image.head_dim
    }

    pub fn layout(&self) -> Result<TupleLayout> {
        let d = self.feature_dim();
        if self.loss.d_shared >= d {
            return Err(Error::Config(format!("d_shared {} must be < feature width {d}", self.loss.d_shared)));
        }
        TupleLayout::new(self.loss.d_shared, d - self.loss.d_shared)
    }

    pub fn circle(&self) -> Result<CircleParams> {
        CircleParams::new(self.loss.gamma, self.loss.margin)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.data.augment.validate()?;
        self.model.point.validate()?;
        self.model.image.validate()?;
        if self.model.point.head_dim != self.model.image.head_dim {
            return Err(Error::Config(format!(
                "encoder widths differ: point {} vs image {}",
                self.model.point.head_dim, self.model.image.head_dim
            )));
        }
        self.layout().map_err(|e| Error::Config(e.to_string()))?;
        self.circle().map_err(|e| Error::Config(e.to_string()))?;
        let div = self.model.image.divisor();
        let s = &self.data.scene;
        if s.height % div != 0 || s.width % div != 0 {
            return Err(Error::Config(format!("image {}x{} not divisible by {div}", s.height, s.width)));
        }
        if let Some([h, w]) = self.data.augment.crop {
            if h % div != 0 || w % div != 0 || h > s.height || w > s.width {
                return Err(Error::Config(format!("crop {h}x{w} must fit the image and be divisible by {div}")));
            }
        }
        let min_pts = self.model.point.min_points();
        if s.n_points < min_pts || self.data.augment.downsample.is_some_and(|d| d < min_pts || d > s.n_points) {
            return Err(Error::Config(format!(
                "point counts must be >= {min_pts} (first SA level) and downsample <= n_points"
            )));
        }
        if self.data.train_scenes == 0 || self.data.val_scenes == 0 {
            return Err(Error::Config("need at least one training and one validation scene".into()));
        }
        if self.optim.batch_n < 2 || self.eval.batch_n < 2 {
            return Err(Error::Config("batch sizes must be >= 2".into()));
        }
        if self.eval.n_sample < 2 || self.eval.n_sample > self.eval.batch_n {
            return Err(Error::Config(format!(
                "eval.n_sample {} must lie in [2, eval.batch_n = {}]",
                self.eval.n_sample, self.eval.batch_n
            )));
        }
        if self.eval.every == 0 || self.eval.k_clusters == 0 {
            return Err(Error::Config("eval.every and eval.k_clusters must be >= 1".into()));
        }
        if !(self.optim.lr > 0.0) || !(self.optim.decay > 0.0) {
            return Err(Error::Config("lr and decay must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let c = RunConfig::from_json("{}", Path::new("x.json")).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.layout().unwrap().total(), 32);
    }

    #[test]
    fn resolved_echo_roundtrips() {
        let c = RunConfig::from_json(r#"{"seed": 3, "loss": {"variant": "circle"}}"#, Path::new("x")).unwrap();
        assert_eq!(c.loss.variant, LossVariant::Circle);
        assert_eq!(RunConfig::from_json(&c.to_json(), Path::new("x")).unwrap(), c);
    }

    #[test]
    fn inconsistent_widths_rejected() {
        let bad = [
            r#"{"model": {"point": {"head_dim": 16}}}"#,
            r#"{"loss": {"d_shared": 32}}"#,
            r#"{"loss": {"margin": 1.5}}"#,
            r#"{"data": {"scene": {"width": 60}}}"#,
            r#"{"eval": {"n_sample": 100}}"#,
            r#"{"unknown": 1}"#,
        ];
        for text in bad {
            assert!(RunConfig::from_json(text, Path::new("x")).is_err(), "{text}");
        }
    }
}
