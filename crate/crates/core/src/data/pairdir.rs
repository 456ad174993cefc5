//! `scene_<id>/` directories: `image.pgm` (16-bit P5), `points.bin`
//! ("XPC1", u32 P, u32 A, P·(3+A) f64, all little-endian), `corr.txt`
//! (`row col point_index` lines) and `camera.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{quantize16, CameraModel, Correspondence, SceneSample};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::point::PointCloud;

const POINTS_MAGIC: &[u8; 4] = b"XPC1";

pub fn scene_dir_name(scene_id: u64) -> String {
    format!("scene_{scene_id}")
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    focal: f64,
    principal_point: [f64; 2],
    height: usize,
    width: usize,
    /// Row-major 3x3.
    rotation: [f64; 9],
    translation: [f64; 3],
    scene_id: u64,
    seed: u64,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_pgm16(path: &Path, img: &ImageGrid) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::invalid("write_pgm16", format!("{} channels, PGM holds 1", img.channels)));
    }
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for v in &img.values {
        out.extend_from_slice(&quantize16(*v).to_be_bytes());
    }
    write_file(path, &out)
}

/// Whitespace-separated header token starting at `*pos`; `#` comments run
/// to end of line.
fn pnm_token<'a>(path: &Path, b: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match b.get(*pos) {
            Some(b'#') => {
                while b.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::parse(path, format!("header ends at byte {}", *pos))),
        }
    }
    let start = *pos;
    while b.get(*pos).is_some_and(|c| !c.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&b[start..*pos])
}

pub(crate) fn pnm_header(path: &Path, b: &[u8], magic: &str) -> Result<(usize, usize, usize, usize)> {
    let mut pos = 0;
    let m = pnm_token(path, b, &mut pos)?;
    if m != magic.as_bytes() {
        return Err(Error::parse(path, format!("expected magic {magic} at byte 0")));
    }
    let mut nums = [0usize; 3];
    for n in &mut nums {
        let at = pos;
        let t = pnm_token(path, b, &mut pos)?;
        *n = std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, format!("bad header number at byte {at}")))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !b.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(Error::parse(path, format!("missing raster separator at byte {pos}")));
    }
    Ok((nums[0], nums[1], nums[2], pos + 1))
}

pub fn read_pgm16(path: &Path) -> Result<ImageGrid> {
    let b = read_file(path)?;
    let (w, h, maxval, start) = pnm_header(path, &b, "P5")?;
    if maxval != 65535 {
        return Err(Error::parse(path, format!("maxval {maxval}, expected 65535")));
    }
    if w == 0 || h == 0 {
        return Err(Error::parse(path, "zero image size"));
    }
    let need = start + 2 * w * h;
    if b.len() != need {
        return Err(Error::parse(path, format!("raster needs {need} bytes, file has {}", b.len())));
    }
    let values = b[start..].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0).collect();
    ImageGrid::new(1, h, w, values)
}

fn write_points_bin(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut out = Vec::with_capacity(12 + pc.len() * (3 + pc.n_attrs) * 8);
    out.extend_from_slice(POINTS_MAGIC);
    out.extend_from_slice(&(pc.len() as u32).to_le_bytes());
    out.extend_from_slice(&(pc.n_attrs as u32).to_le_bytes());
    for i in 0..pc.len() {
        for v in pc.xyz[i].iter().chain(pc.attr(i)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(path, &out)
}

pub fn read_points_bin(path: &Path) -> Result<PointCloud> {
    let b = read_file(path)?;
    if b.len() < 12 || &b[..4] != POINTS_MAGIC {
        return Err(Error::parse(path, "missing XPC1 header at byte 0"));
    }
    let p = u32::from_le_bytes(b[4..8].try_into().unwrap()) as usize;
    let a = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
    let need = 12 + p * (3 + a) * 8;
    if b.len() != need {
        return Err(Error::parse(path, format!("{p} points x {} values need {need} bytes, file has {}", 3 + a, b.len())));
    }
    let vals: Vec<f64> = b[12..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let mut xyz = Vec::with_capacity(p);
    let mut attrs = Vec::with_capacity(p * a);
    for row in vals.chunks_exact(3 + a) {
        xyz.push([row[0], row[1], row[2]]);
        attrs.extend_from_slice(&row[3..]);
    }
    PointCloud::new(xyz, attrs, a).map_err(|e| Error::parse(path, e.to_string()))
}

fn read_corr(path: &Path) -> Result<Vec<Correspondence>> {
    let b = read_file(path)?;
    let text = String::from_utf8(b).map_err(|e| Error::parse(path, format!("not UTF-8: {e}")))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<usize> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, format!("line {}: {e}", ln + 1)))?;
        let [row, col, point] = f[..] else {
            return Err(Error::parse(path, format!("line {}: expected 3 fields, got {}", ln + 1, f.len())));
        };
        out.push(Correspondence { row, col, point });
    }
    Ok(out)
}

/// Write `s` into `root/scene_<id>/`; returns that directory.
pub fn save_pair_dir(root: &Path, s: &SceneSample) -> Result<PathBuf> {
    let dir = root.join(scene_dir_name(s.scene_id));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_pgm16(&dir.join("image.pgm"), &s.image)?;
    write_points_bin(&dir.join("points.bin"), &s.cloud)?;
    let corr: String = s.correspondences.iter().map(|c| format!("{} {} {}\n", c.row, c.col, c.point)).collect();
    write_file(&dir.join("corr.txt"), corr.as_bytes())?;
    let cam = &s.camera;
    let file = CameraFile {
        focal: cam.focal,
        principal_point: cam.principal_point,
        height: cam.height,
        width: cam.width,
        rotation: [0, 1, 2, 3, 4, 5, 6, 7, 8].map(|k| cam.rotation[k / 3][k % 3]),
        translation: cam.translation,
        scene_id: s.scene_id,
        seed: s.seed,
    };
    let json = serde_json::to_string_pretty(&file).expect("camera serialises");
    write_file(&dir.join("camera.json"), json.as_bytes())?;
    Ok(dir)
}

pub fn load_pair_dir(dir: &Path) -> Result<SceneSample> {
    let image = read_pgm16(&dir.join("image.pgm"))?;
    let cloud = read_points_bin(&dir.join("points.bin"))?;
    let corr_path = dir.join("corr.txt");
    let correspondences = read_corr(&corr_path)?;
    let cam_path = dir.join("camera.json");
    let cam_bytes = read_file(&cam_path)?;
    let f: CameraFile = serde_json::from_slice(&cam_bytes)
        .map_err(|e| Error::parse(&cam_path, format!("line {}: {e}", e.line())))?;
    let r = f.rotation;
    let camera = CameraModel::new(
        f.focal,
        f.principal_point,
        f.height,
        f.width,
        [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
        f.translation,
    )
    .map_err(|e| Error::parse(&cam_path, e.to_string()))?;
    if (camera.height, camera.width) != (image.height, image.width) {
        return Err(Error::parse(&cam_path, "image size disagrees with image.pgm"));
    }
    let s = SceneSample { image, cloud, correspondences, camera, scene_id: f.scene_id, seed: f.seed };
    s.validate().map_err(|e| Error::parse(&corr_path, e.to_string()))?;
    Ok(s)
}
