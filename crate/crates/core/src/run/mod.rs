//! End-to-end pipeline: model construction, scene sets, training,
//! evaluation and cluster visualisation.

mod evaluate;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_scene, load_pair_dir, save_pair_dir, scene_dir_name, Encoders, SceneSample};
use crate::error::{Error, Result};
use crate::image::UNet;
use crate::point::PointNet;
use crate::tensor::{load_checkpoint, ParamStore};

pub use evaluate::{evaluate, visualize, EvalOutcome, SceneEval, VisualizeOutput};
pub use train::{train, write_curve_csv, CurvePoint, TrainOutcome};

pub const IMAGE_PREFIX: &str = "img";
pub const POINT_PREFIX: &str = "pc";

/// Both encoders with their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub unet: UNet,
    pub pnet: PointNet,
    pub params: ParamStore,
}

impl Model {
    /// Fresh initialisation from `cfg.seed`.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let unet = UNet::new(&mut ps, &mut rng, IMAGE_PREFIX, cfg.model.image.clone())?;
        let pnet = PointNet::new(&mut ps, &mut rng, POINT_PREFIX, cfg.model.point.clone())?;
        Ok(Model { unet, pnet, params: ps })
    }

    /// Architecture from `cfg`, values from `path`. Every parameter must be
    /// present with the expected shape and nothing else may be.
    pub fn from_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let mut model = Self::init(cfg)?;
        let loaded = load_checkpoint(path)?;
        model.replace_params(loaded, path)?;
        Ok(model)
    }

    fn replace_params(&mut self, loaded: ParamStore, origin: &Path) -> Result<()> {
        let mismatch = |msg: String| Error::Config(format!("{}: checkpoint does not fit config: {msg}", origin.display()));
        if loaded.len() != self.params.len() {
            return Err(mismatch(format!("{} tensors, model has {}", loaded.len(), self.params.len())));
        }
        for (path, t) in self.params.iter() {
            let other = loaded.get(path).map_err(|_| mismatch(format!("missing `{path}`")))?;
            if other.shape() != t.shape() {
                return Err(mismatch(format!("`{path}` has shape {:?}, expected {:?}", other.shape(), t.shape())));
            }
        }
        self.params = loaded;
        Ok(())
    }

    pub fn encoders(&self) -> Encoders<'_> {
        Encoders { image: &self.unet, point: &self.pnet, params: &self.params }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub scene_id: u64,
    pub seed: u64,
    pub split: Split,
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub scenes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// `(split, scene_id, seed)` of every scene described by the config.
pub fn scene_plan(cfg: &RunConfig) -> Vec<(Split, u64, u64)> {
    let d = &cfg.data;
    let train = (0..d.train_scenes as u64).map(|i| (Split::Train, i, d.scene_seed + i));
    let val = (0..d.val_scenes as u64)
        .map(|j| (Split::Val, d.train_scenes as u64 + j, d.scene_seed + d.val_seed_offset + j));
    train.chain(val).collect()
}

#[derive(Debug, Clone)]
pub struct SceneSets {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
}

/// Generate every planned scene in memory.
pub fn generate_scenes(cfg: &RunConfig) -> Result<SceneSets> {
    let mut sets = SceneSets { train: Vec::new(), val: Vec::new() };
    for (split, id, seed) in scene_plan(cfg) {
        let s = generate_scene(seed, id, &cfg.data.scene)?;
        match split {
            Split::Train => sets.train.push(s),
            Split::Val => sets.val.push(s),
        }
    }
    Ok(sets)
}

/// Write every planned scene plus `manifest.json` under `root`.
pub fn write_dataset(cfg: &RunConfig, root: &Path) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut scenes = Vec::new();
    for (split, id, seed) in scene_plan(cfg) {
        let s = generate_scene(seed, id, &cfg.data.scene)?;
        save_pair_dir(root, &s)?;
        scenes.push(ManifestEntry { scene_id: id, seed, split, dir: scene_dir_name(id) });
    }
    let manifest = Manifest { scenes };
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Load a `write_dataset` directory, checking each scene against its
/// manifest entry.
pub fn read_dataset(root: &Path) -> Result<SceneSets> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    let mut sets = SceneSets { train: Vec::new(), val: Vec::new() };
    for (k, e) in manifest.scenes.iter().enumerate() {
        if e.dir.contains(['/', '\\']) || e.dir.starts_with('.') {
            return Err(Error::parse(&path, format!("entry {k}: bad directory name `{}`", e.dir)));
        }
        let s = load_pair_dir(&root.join(&e.dir))?;
        if s.scene_id != e.scene_id || s.seed != e.seed {
            return Err(Error::parse(
                &path,
                format!("entry {k}: lists scene {} seed {}, directory holds scene {} seed {}", e.scene_id, e.seed, s.scene_id, s.seed),
            ));
        }
        match e.split {
            Split::Train => sets.train.push(s),
            Split::Val => sets.val.push(s),
        }
    }
    if sets.train.is_empty() || sets.val.is_empty() {
        return Err(Error::parse(&path, "manifest needs at least one train and one val scene"));
    }
    Ok(sets)
}

/// Scenes for a run: from `cfg.data.dir` when set, else generated.
pub fn scenes_for(cfg: &RunConfig) -> Result<SceneSets> {
    match &cfg.data.dir {
        Some(dir) => read_dataset(dir),
        None => generate_scenes(cfg),
    }
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

/// A small but complete configuration used by tests and benches.
pub fn tiny_config() -> RunConfig {
    use crate::data::{AugmentPolicy, SceneConfig};
    use crate::image::UNetConfig;
    use crate::point::{PointNetConfig, SAConfig};
    let mut cfg = RunConfig::default();
    cfg.data.train_scenes = 2;
    cfg.data.val_scenes = 1;
    cfg.data.scene = SceneConfig { n_points: 512, ..SceneConfig::default() };
    cfg.data.augment = AugmentPolicy { downsample: Some(384), ..AugmentPolicy::default() };
    cfg.model.image = UNetConfig { channels: vec![4, 4, 8, 8], head_dim: 8, ..UNetConfig::default() };
    cfg.model.point = PointNetConfig {
        sa_levels: vec![
            SAConfig { n_out: 32, radii: vec![1.6], k_max: 8, mlp_widths: vec![vec![8]] },
            SAConfig { n_out: 8, radii: vec![3.2], k_max: 8, mlp_widths: vec![vec![8]] },
        ],
        decoder_widths: vec![vec![8], vec![8]],
        asfp_group_widths: vec![8],
        head_dim: 8,
        ..PointNetConfig::default()
    };
    cfg.loss.d_shared = 4;
    cfg.optim.batch_n = 16;
    cfg.optim.epochs = 2;
    cfg.eval.batch_n = 16;
    cfg.eval.n_sample = 16;
    cfg.eval.every = 2;
    cfg.eval.k_clusters = 4;
    cfg
}
