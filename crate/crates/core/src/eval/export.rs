use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::pnm_header;
use crate::error::{Error, Result};
use crate::point::Point3;

/// `k` pairwise distinct RGB colours. Random colours are kept only if they
/// are far enough from those already chosen; the threshold relaxes if the
/// palette gets crowded.
pub fn palette(k: usize, seed: u64) -> Vec<[u8; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<[u8; 3]> = Vec::with_capacity(k);
    let mut min_gap = 96u32;
    let mut misses = 0;
    while out.len() < k {
        let c: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        let far = out.iter().all(|o| o.iter().zip(&c).map(|(a, b)| a.abs_diff(*b) as u32).sum::<u32>() >= min_gap.max(1));
        if far {
            out.push(c);
            misses = 0;
        } else {
            misses += 1;
            if misses > 200 {
                min_gap /= 2;
                misses = 0;
            }
        }
    }
    out
}

/// Label map as a binary P6 image, one palette colour per label.
pub fn write_label_ppm(path: &Path, labels: &[usize], height: usize, width: usize, palette_seed: u64) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::invalid("write_label_ppm", format!("{} labels for {height}x{width}", labels.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let colors = palette(k, palette_seed);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &l in labels {
        out.extend_from_slice(&colors[l]);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns `(height, width, rgb)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let b = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, maxval, start) = pnm_header(path, &b, "P6")?;
    if maxval != 255 {
        return Err(Error::parse(path, format!("maxval {maxval}, expected 255")));
    }
    let need = start + 3 * w * h;
    if b.len() != need {
        return Err(Error::parse(path, format!("raster needs {need} bytes, file has {}", b.len())));
    }
    Ok((h, w, b[start..].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

/// One `x y z label` line per point.
pub fn write_point_labels(path: &Path, xyz: &[Point3], labels: &[usize]) -> Result<()> {
    if xyz.len() != labels.len() {
        return Err(Error::invalid("write_point_labels", format!("{} points, {} labels", xyz.len(), labels.len())));
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for (p, l) in xyz.iter().zip(labels) {
        writeln!(w, "{} {} {} {l}", p[0], p[1], p[2]).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
