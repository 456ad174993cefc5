//! Synthetic paired scenes (image + point cloud + exact pixel/point
//! correspondences), correspondence-preserving augmentation, batching and
//! the on-disk pair directory format.

mod augment;
mod camera;
mod pairdir;
mod scene;

use std::collections::{HashMap, HashSet};

use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{sample_pixel_features, ImageGrid, UNet};
use crate::losses::CorrespondenceBatch;
use crate::point::{PointCloud, PointNet};
use crate::tensor::{ParamStore, Tensor};

pub use augment::{augment_cloud, augment_image, flip_horizontal, gaussian_blur, rotate_z, AugmentPolicy, PixelMap};
pub use camera::{CameraModel, Mat3, Projection};
pub(crate) use pairdir::pnm_header;
pub use pairdir::{load_pair_dir, read_pgm16, read_points_bin, save_pair_dir, scene_dir_name, write_pgm16};
pub use scene::{generate_scene, realize, Hit, Primitive, Scene, SceneConfig, Shape, Texture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Correspondence {
    pub row: usize,
    pub col: usize,
    pub point: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: ImageGrid,
    pub cloud: PointCloud,
    pub correspondences: Vec<Correspondence>,
    pub camera: CameraModel,
    pub scene_id: u64,
    pub seed: u64,
}

impl SceneSample {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (k, c) in self.correspondences.iter().enumerate() {
            if c.row >= self.image.height || c.col >= self.image.width {
                return Err(Error::invalid(
                    "scene_sample",
                    format!("correspondence {k}: pixel ({}, {}) out of bounds", c.row, c.col),
                ));
            }
            if c.point >= self.cloud.len() {
                return Err(Error::invalid(
                    "scene_sample",
                    format!("correspondence {k}: point {} of {}", c.point, self.cloud.len()),
                ));
            }
            if !seen.insert(c.point) {
                return Err(Error::invalid("scene_sample", format!("correspondence {k}: point {} repeated", c.point)));
            }
        }
        Ok(())
    }

    /// Copy with the image quantised to 16 bits, as stored on disk.
    pub fn quantized(&self) -> SceneSample {
        let mut s = self.clone();
        s.image.values.iter_mut().for_each(|v| *v = quantize16(*v) as f64 / 65535.0);
        s
    }
}

pub(crate) fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// A correspondence that survives both augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Survivor {
    pub pixel: (usize, usize),
    pub pixel_aug: (usize, usize),
    pub point: usize,
    pub point_aug: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub sample: SceneSample,
    pub image_aug: ImageGrid,
    pub pixel_map: PixelMap,
    pub cloud_aug: PointCloud,
    /// Source index of each augmented point.
    pub point_map: Vec<usize>,
    pub survivors: Vec<Survivor>,
}

impl AugmentedPair {
    pub fn new(sample: SceneSample, seed: u64, policy: &AugmentPolicy) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (image_aug, pixel_map) = augment_image(&sample.image, rng.random(), policy)?;
        let (cloud_aug, point_map) = augment_cloud(&sample.cloud, rng.random(), policy)?;
        let inverse: HashMap<usize, usize> = point_map.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let survivors = sample
            .correspondences
            .iter()
            .filter_map(|c| {
                let pixel_aug = pixel_map.forward(c.row, c.col)?;
                let point_aug = *inverse.get(&c.point)?;
                Some(Survivor { pixel: (c.row, c.col), pixel_aug, point: c.point, point_aug })
            })
            .collect();
        Ok(AugmentedPair { sample, image_aug, pixel_map, cloud_aug, point_map, survivors })
    }

    /// `n` distinct survivors drawn without replacement.
    pub fn select(&self, n: usize, seed: u64) -> Result<Vec<Survivor>> {
        if n > self.survivors.len() {
            return Err(Error::DegenerateBatch(format!(
                "{n} correspondences requested, {} survive augmentation",
                self.survivors.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(index::sample(&mut rng, self.survivors.len(), n).into_iter().map(|i| self.survivors[i]).collect())
    }
}

/// Both encoders and their parameters.
#[derive(Debug, Clone, Copy)]
pub struct Encoders<'a> {
    pub image: &'a UNet,
    pub point: &'a PointNet,
    pub params: &'a ParamStore,
}

/// Dense features of all four views.
#[derive(Debug, Clone)]
pub struct PairFeatures {
    pub image: Tensor,
    pub image_aug: Tensor,
    pub cloud: Tensor,
    pub cloud_aug: Tensor,
}

impl Encoders<'_> {
    pub fn encode(&self, pair: &AugmentedPair) -> Result<PairFeatures> {
        Ok(PairFeatures {
            image: self.image.forward(self.params, &pair.sample.image)?,
            image_aug: self.image.forward(self.params, &pair.image_aug)?,
            cloud: self.point.forward(self.params, &pair.sample.cloud)?,
            cloud_aug: self.point.forward(self.params, &pair.cloud_aug)?,
        })
    }
}

/// Gather the four aligned feature matrices at the given survivors.
pub fn gather_batch(f: &PairFeatures, rows: &[Survivor]) -> Result<CorrespondenceBatch> {
    let px: Vec<_> = rows.iter().map(|s| s.pixel).collect();
    let px_aug: Vec<_> = rows.iter().map(|s| s.pixel_aug).collect();
    let pt: Vec<_> = rows.iter().map(|s| s.point).collect();
    let pt_aug: Vec<_> = rows.iter().map(|s| s.point_aug).collect();
    CorrespondenceBatch::new(
        sample_pixel_features(&f.image, &px)?,
        sample_pixel_features(&f.image_aug, &px_aug)?,
        f.cloud.gather_rows(&pt)?,
        f.cloud_aug.gather_rows(&pt_aug)?,
    )
}

/// Sample `n` surviving correspondences, encode all four views and gather.
pub fn make_batch(pair: &AugmentedPair, n: usize, seed: u64, enc: Encoders<'_>) -> Result<(CorrespondenceBatch, Vec<Survivor>)> {
    let rows = pair.select(n, seed)?;
    let feats = enc.encode(pair)?;
    Ok((gather_batch(&feats, &rows)?, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::UNetConfig;
    use crate::point::PointNetConfig;

    fn small_scene() -> SceneSample {
        let cfg = SceneConfig { n_points: 600, ..SceneConfig::default() };
        generate_scene(11, 0, &cfg).unwrap()
    }

    #[test]
    fn survivors_are_a_subset_and_exact() {
        let s = small_scene();
        let pair = AugmentedPair::new(s.clone(), 4, &AugmentPolicy { downsample: Some(400), ..AugmentPolicy::default() }).unwrap();
        assert!(!pair.survivors.is_empty());
        let orig: HashSet<_> = s.correspondences.iter().map(|c| ((c.row, c.col), c.point)).collect();
        for sv in &pair.survivors {
            assert!(orig.contains(&(sv.pixel, sv.point)));
            assert_eq!(pair.pixel_map.forward(sv.pixel.0, sv.pixel.1), Some(sv.pixel_aug));
            assert_eq!(pair.point_map[sv.point_aug], sv.point);
        }
    }

    #[test]
    fn identity_pair_keeps_everything() {
        let s = small_scene();
        let pair = AugmentedPair::new(s.clone(), 0, &AugmentPolicy::identity()).unwrap();
        assert_eq!(pair.survivors.len(), s.correspondences.len());
        let all = pair.select(pair.survivors.len(), 1).unwrap();
        let distinct: HashSet<_> = all.iter().map(|r| r.point).collect();
        assert_eq!(distinct.len(), all.len());
        assert!(pair.select(pair.survivors.len() + 1, 1).is_err());
        assert_eq!(pair.select(10, 5).unwrap(), pair.select(10, 5).unwrap());
    }

    #[test]
    fn batch_rows_match_pixel_and_point_features() {
        let s = small_scene();
        let pair = AugmentedPair::new(s, 2, &AugmentPolicy { downsample: Some(400), ..AugmentPolicy::default() }).unwrap();
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img_cfg = UNetConfig { channels: vec![4, 4, 8, 8], head_dim: 8, ..UNetConfig::default() };
        let pc_cfg = PointNetConfig { head_dim: 8, ..PointNetConfig::default() };
        let unet = UNet::new(&mut ps, &mut rng, "img", img_cfg).unwrap();
        let pnet = PointNet::new(&mut ps, &mut rng, "pc", pc_cfg).unwrap();
        let enc = Encoders { image: &unet, point: &pnet, params: &ps };
        let (batch, rows) = make_batch(&pair, 16, 3, enc).unwrap();
        let fmap = unet.forward(&ps, &pair.image_aug).unwrap();
        let pfeat = pnet.forward(&ps, &pair.sample.cloud).unwrap();
        let d = 8;
        for (k, r) in rows.iter().enumerate() {
            let want = sample_pixel_features(&fmap, &[r.pixel_aug]).unwrap();
            assert_eq!(&batch.img_aug.values()[k * d..(k + 1) * d], want.values());
            assert_eq!(&batch.pc.values()[k * d..(k + 1) * d], &pfeat.values()[r.point * d..(r.point + 1) * d]);
        }
    }
}
