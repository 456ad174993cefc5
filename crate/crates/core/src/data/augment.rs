use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::point::{Point3, PointCloud};

/// Random view changes applied independently to each modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// `(height, width)` of a randomly placed crop window.
    pub crop: Option<[usize; 2]>,
    pub flip_prob: f64,
    /// Intensity gain drawn from `[1 - a, 1 + a]`.
    pub intensity_scale: f64,
    /// Intensity offset drawn from `[-b, b]`.
    pub intensity_shift: f64,
    pub blur_prob: f64,
    pub blur_sigma_max: f64,
    /// Rotation about the vertical (z) axis drawn from `[-r, r]` degrees.
    pub rot_max_deg: f64,
    pub jitter_sigma: f64,
    pub downsample: Option<usize>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            crop: Some([32, 56]),
            flip_prob: 0.5,
            intensity_scale: 0.2,
            intensity_shift: 0.1,
            blur_prob: 0.5,
            blur_sigma_max: 1.0,
            rot_max_deg: 15.0,
            jitter_sigma: 0.01,
            downsample: Some(1024),
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            crop: None,
            flip_prob: 0.0,
            intensity_scale: 0.0,
            intensity_shift: 0.0,
            blur_prob: 0.0,
            blur_sigma_max: 0.0,
            rot_max_deg: 0.0,
            jitter_sigma: 0.0,
            downsample: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_prob, self.blur_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augment: probabilities must lie in [0, 1]".into()));
        }
        let mags = [self.intensity_scale, self.intensity_shift, self.blur_sigma_max, self.rot_max_deg, self.jitter_sigma];
        if mags.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::Config("augment: magnitudes must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Geometric part of an image augmentation: crop window then optional
/// horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelMap {
    pub src_height: usize,
    pub src_width: usize,
    pub offset: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub flip: bool,
}

impl PixelMap {
    pub fn identity(height: usize, width: usize) -> Self {
        PixelMap { src_height: height, src_width: width, offset: (0, 0), height, width, flip: false }
    }

    /// Source pixel → augmented pixel, if it survives the crop.
    pub fn forward(&self, row: usize, col: usize) -> Option<(usize, usize)> {
        let (oy, ox) = self.offset;
        if row < oy || col < ox || row >= oy + self.height || col >= ox + self.width {
            return None;
        }
        let c = col - ox;
        Some((row - oy, if self.flip { self.width - 1 - c } else { c }))
    }

    pub fn inverse(&self, row: usize, col: usize) -> Option<(usize, usize)> {
        if row >= self.height || col >= self.width {
            return None;
        }
        let c = if self.flip { self.width - 1 - col } else { col };
        Some((row + self.offset.0, c + self.offset.1))
    }
}

pub fn flip_horizontal(img: &ImageGrid) -> ImageGrid {
    let mut out = img.clone();
    for ch in 0..img.channels {
        for r in 0..img.height {
            for c in 0..img.width {
                *out.at_mut(ch, r, c) = img.at(ch, r, img.width - 1 - c);
            }
        }
    }
    out
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &ImageGrid, sigma: f64) -> ImageGrid {
    if sigma <= 0.0 {
        return img.clone();
    }
    let rad = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-rad..=rad).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / z).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for ch in 0..img.channels {
        for r in 0..h {
            for c in 0..w {
                let v = (-rad..=rad)
                    .zip(&kernel)
                    .map(|(k, wk)| wk * img.at(ch, r as usize, (c + k).clamp(0, w - 1) as usize))
                    .sum();
                *tmp.at_mut(ch, r as usize, c as usize) = v;
            }
        }
        for r in 0..h {
            for c in 0..w {
                let v = (-rad..=rad)
                    .zip(&kernel)
                    .map(|(k, wk)| wk * tmp.at(ch, (r + k).clamp(0, h - 1) as usize, c as usize))
                    .sum();
                *out.at_mut(ch, r as usize, c as usize) = v;
            }
        }
    }
    out
}

/// Crop, flip, intensity gain/offset, blur. Returns the augmented image and
/// the pixel map from source to augmented coordinates.
pub fn augment_image(img: &ImageGrid, seed: u64, policy: &AugmentPolicy) -> Result<(ImageGrid, PixelMap)> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [ch, cw] = policy.crop.unwrap_or([img.height, img.width]);
    if ch == 0 || cw == 0 || ch > img.height || cw > img.width {
        return Err(Error::invalid(
            "augment_image",
            format!("crop {ch}x{cw} does not fit image {}x{}", img.height, img.width),
        ));
    }
    let offset = (rng.random_range(0..=img.height - ch), rng.random_range(0..=img.width - cw));
    let flip = rng.random_bool(policy.flip_prob);
    let map = PixelMap { src_height: img.height, src_width: img.width, offset, height: ch, width: cw, flip };

    let mut out = ImageGrid::filled(img.channels, ch, cw, 0.0);
    for c in 0..img.channels {
        for r in 0..ch {
            for col in 0..cw {
                let (sr, sc) = map.inverse(r, col).expect("in range");
                *out.at_mut(c, r, col) = img.at(c, sr, sc);
            }
        }
    }
    let gain = 1.0 + rng.random_range(-1.0..=1.0) * policy.intensity_scale;
    let shift = rng.random_range(-1.0..=1.0) * policy.intensity_shift;
    if gain != 1.0 || shift != 0.0 {
        out.values.iter_mut().for_each(|v| *v = (*v * gain + shift).clamp(0.0, 1.0));
    }
    if rng.random_bool(policy.blur_prob) {
        out = gaussian_blur(&out, rng.random_range(0.0..=policy.blur_sigma_max));
    }
    Ok((out, map))
}

/// Rotate about the z axis by `theta` radians.
pub fn rotate_z(xyz: &[Point3], theta: f64) -> Vec<Point3> {
    let (s, c) = theta.sin_cos();
    xyz.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]).collect()
}

/// Downsample without replacement, rotate about the vertical axis, jitter.
/// The returned map gives, for each augmented point, its source index.
pub fn augment_cloud(pc: &PointCloud, seed: u64, policy: &AugmentPolicy) -> Result<(PointCloud, Vec<usize>)> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map: Vec<usize> = match policy.downsample {
        Some(k) if k > pc.len() => {
            return Err(Error::invalid("augment_cloud", format!("downsample to {k} from {} points", pc.len())));
        }
        Some(0) => return Err(Error::invalid("augment_cloud", "downsample to 0 points")),
        Some(k) => {
            let mut m = index::sample(&mut rng, pc.len(), k).into_vec();
            m.sort_unstable();
            m
        }
        None => (0..pc.len()).collect(),
    };
    let mut sub = pc.select(&map);
    let theta = rng.random_range(-1.0..=1.0) * policy.rot_max_deg.to_radians();
    if theta != 0.0 {
        sub.xyz = rotate_z(&sub.xyz, theta);
    }
    if policy.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, policy.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for p in &mut sub.xyz {
            for v in p.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok((sub, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize) -> ImageGrid {
        ImageGrid::new(1, h, w, (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap()
    }

    fn cloud(n: usize) -> PointCloud {
        let xyz = (0..n).map(|i| [i as f64 * 0.1, (i as f64 * 0.7).sin(), 0.5]).collect();
        PointCloud::new(xyz, (0..n).map(|i| i as f64 / n as f64).collect(), 1).unwrap()
    }

    #[test]
    fn identity_policy_is_identity() {
        let im = img(8, 16);
        let (out, map) = augment_image(&im, 3, &AugmentPolicy::identity()).unwrap();
        assert_eq!(out, im);
        assert_eq!(map, PixelMap::identity(8, 16));
        let pc = cloud(20);
        let (out, m) = augment_cloud(&pc, 3, &AugmentPolicy::identity()).unwrap();
        assert_eq!(out, pc);
        assert_eq!(m, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn flip_is_involution() {
        let im = img(5, 7);
        assert_eq!(flip_horizontal(&flip_horizontal(&im)), im);
        assert_ne!(flip_horizontal(&im), im);
    }

    #[test]
    fn crop_and_flip_map_preserves_intensity() {
        let im = img(16, 32);
        let policy = AugmentPolicy { crop: Some([8, 24]), flip_prob: 0.5, ..AugmentPolicy::identity() };
        for seed in 0..20 {
            let (out, map) = augment_image(&im, seed, &policy).unwrap();
            let mut hits = 0;
            for r in 0..16 {
                for c in 0..32 {
                    if let Some((ar, ac)) = map.forward(r, c) {
                        assert_eq!(out.at(0, ar, ac), im.at(0, r, c));
                        assert_eq!(map.inverse(ar, ac), Some((r, c)));
                        hits += 1;
                    }
                }
            }
            assert_eq!(hits, 8 * 24);
        }
    }

    #[test]
    fn oversized_crop_rejected() {
        let policy = AugmentPolicy { crop: Some([9, 4]), ..AugmentPolicy::identity() };
        assert!(augment_image(&img(8, 8), 0, &policy).is_err());
    }

    #[test]
    fn blur_preserves_constant_and_mean_mass() {
        let c = ImageGrid::filled(1, 6, 6, 0.4);
        for v in gaussian_blur(&c, 1.3).values {
            assert!((v - 0.4).abs() < 1e-12);
        }
        let mut spike = ImageGrid::filled(1, 15, 15, 0.0);
        *spike.at_mut(0, 7, 7) = 1.0;
        let b = gaussian_blur(&spike, 1.0);
        assert!((b.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(b.at(0, 7, 7) < 1.0 && b.at(0, 7, 8) > 0.0);
    }

    #[test]
    fn rotation_inverts() {
        let pc = cloud(30);
        let back = rotate_z(&rotate_z(&pc.xyz, 0.83), -0.83);
        for (a, b) in back.iter().zip(&pc.xyz) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn downsample_contract() {
        let pc = cloud(50);
        let policy = AugmentPolicy { downsample: Some(17), ..AugmentPolicy::identity() };
        let (out, map) = augment_cloud(&pc, 9, &policy).unwrap();
        assert_eq!(out.len(), 17);
        let mut seen = std::collections::HashSet::new();
        for (k, &i) in map.iter().enumerate() {
            assert!(i < 50 && seen.insert(i));
            assert_eq!(out.xyz[k], pc.xyz[i]);
            assert_eq!(out.attr(k), pc.attr(i));
        }
        let too_many = AugmentPolicy { downsample: Some(51), ..AugmentPolicy::identity() };
        assert!(augment_cloud(&pc, 9, &too_many).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let p = AugmentPolicy::default();
        let im = img(32, 64);
        assert_eq!(augment_image(&im, 5, &p).unwrap(), augment_image(&im, 5, &p).unwrap());
        let pc = cloud(2000);
        assert_eq!(augment_cloud(&pc, 5, &p).unwrap(), augment_cloud(&pc, 5, &p).unwrap());
    }
}
