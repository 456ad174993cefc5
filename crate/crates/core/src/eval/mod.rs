//! Matching accuracies, mismatch pixel distances, cosine k-means and
//! label-map export.

mod export;
mod kmeans;

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{CameraModel, Projection};
use crate::error::{Error, Result};
use crate::losses::{CorrespondenceBatch, TupleLayout};
use crate::point::Point3;

pub use export::{palette, read_ppm, write_label_ppm, write_point_labels};
pub use kmeans::{positional_kmeans, spherical_kmeans, spherical_kmeans_best_of, ClusterResult};

/// Row-major matrix view: `data.len() == rows * cols`.
#[derive(Debug, Clone, Copy)]
pub struct Rows<'a> {
    pub data: &'a [f64],
    pub cols: usize,
}

impl<'a> Rows<'a> {
    pub fn new(data: &'a [f64], cols: usize) -> Result<Self> {
        if cols == 0 || data.len() % cols != 0 {
            return Err(Error::invalid("rows", format!("{} values do not split into rows of {cols}", data.len())));
        }
        Ok(Rows { data, cols })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-norm copies of the rows; errors on a zero row.
pub(crate) fn normalized(rows: Rows<'_>, op: &'static str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.data.len());
    for i in 0..rows.len() {
        let r = rows.row(i);
        let n = dot(r, r).sqrt();
        if n <= 1e-12 {
            return Err(Error::ZeroNorm(op));
        }
        out.extend(r.iter().map(|v| v / n));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub anchor: usize,
    pub predicted: usize,
    pub truth: usize,
    pub similarity: f64,
}

impl MatchRecord {
    pub fn correct(&self) -> bool {
        self.predicted == self.truth
    }
}

/// For each anchor row, the candidate row of highest cosine similarity (ties
/// to the lowest index). Returns the fraction matched to their own index.
pub fn match_accuracy(anchors: Rows<'_>, candidates: Rows<'_>) -> Result<(f64, Vec<MatchRecord>)> {
    if anchors.len() != candidates.len() || anchors.cols != candidates.cols {
        return Err(Error::shape("match_accuracy", &[anchors.len(), anchors.cols], &[candidates.len(), candidates.cols]));
    }
    let n = anchors.len();
    if n < 2 {
        return Err(Error::invalid("match_accuracy", "need at least 2 rows"));
    }
    let a = normalized(anchors, "match_accuracy anchors")?;
    let c = normalized(candidates, "match_accuracy candidates")?;
    let d = anchors.cols;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        let (mut best, mut best_s) = (0, f64::NEG_INFINITY);
        for j in 0..n {
            let s = dot(ai, &c[j * d..(j + 1) * d]);
            if s > best_s {
                best = j;
                best_s = s;
            }
        }
        records.push(MatchRecord { anchor: i, predicted: best, truth: i, similarity: best_s });
    }
    let correct = records.iter().filter(|r| r.correct()).count();
    Ok((correct as f64 / n as f64, records))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub acc_i: f64,
    pub acc_p: f64,
    pub acc_c: f64,
    pub acc_s: f64,
    pub n_sampled: usize,
    /// Batch rows used, in sample order; record indices refer to positions here.
    pub sampled: Vec<usize>,
    /// Image anchors matched against points on the shared span.
    pub records_s: Vec<MatchRecord>,
    /// Image anchors matched against points on full vectors.
    pub records_c: Vec<MatchRecord>,
}

fn pick(data: &[f64], width: usize, rows: &[usize], span: std::ops::Range<usize>) -> Vec<f64> {
    rows.iter().flat_map(|&r| data[r * width + span.start..r * width + span.end].iter().copied()).collect()
}

/// ACC_I (image vs augmented image, full), ACC_P (cloud vs augmented cloud,
/// full), ACC_C (image vs cloud, full) and ACC_S (image vs cloud, shared
/// span) over `n_sample` rows drawn without replacement.
pub fn acc_suite(batch: &CorrespondenceBatch, layout: TupleLayout, n_sample: usize, seed: u64) -> Result<MatchReport> {
    let n = batch.n();
    let width = batch.width();
    if layout.total() != width {
        return Err(Error::invalid("acc_suite", format!("layout width {} vs features {width}", layout.total())));
    }
    if n_sample > n || n_sample < 2 {
        return Err(Error::invalid("acc_suite", format!("n_sample {n_sample} outside [2, {n}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = index::sample(&mut rng, n, n_sample).into_vec();
    let full = 0..width;
    let shared = 0..layout.d_sh;
    let m = |t: &crate::tensor::Tensor, span: std::ops::Range<usize>| pick(t.values(), width, &sampled, span);
    let acc = |a: Vec<f64>, b: Vec<f64>, cols: usize| -> Result<(f64, Vec<MatchRecord>)> {
        match_accuracy(Rows::new(&a, cols)?, Rows::new(&b, cols)?)
    };
    let (acc_i, _) = acc(m(&batch.img, full.clone()), m(&batch.img_aug, full.clone()), width)?;
    let (acc_p, _) = acc(m(&batch.pc, full.clone()), m(&batch.pc_aug, full.clone()), width)?;
    let (acc_c, records_c) = acc(m(&batch.img, full.clone()), m(&batch.pc, full), width)?;
    let (acc_s, records_s) = acc(m(&batch.img, shared.clone()), m(&batch.pc, shared), layout.d_sh)?;
    Ok(MatchReport { acc_i, acc_p, acc_c, acc_s, n_sampled: n_sample, sampled, records_s, records_c })
}

/// Pixel distance between the projection of each wrongly predicted point
/// and the true pixel of the anchor. `pixels[k]`/`points[k]` belong to
/// record position `k`.
pub fn mismatch_distances(
    records: &[MatchRecord],
    pixels: &[(usize, usize)],
    points: &[Point3],
    cam: &CameraModel,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for r in records.iter().filter(|r| !r.correct()) {
        let (Some(&(row, col)), Some(p)) = (pixels.get(r.truth), points.get(r.predicted)) else {
            return Err(Error::invalid("mismatch_distances", format!("record {} has no pixel/point data", r.anchor)));
        };
        match cam.project_point(p) {
            Projection::Front { row: pr, col: pc, .. } => {
                out.push(((pr - row as f64).powi(2) + (pc - col as f64).powi(2)).sqrt());
            }
            Projection::Behind => {
                return Err(Error::invalid("mismatch_distances", format!("predicted point {} is behind the camera", r.predicted)));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Bins `[0, e1), [e1, e2), ..., [ek, inf)` for increasing positive edges.
pub fn histogram(values: &[f64], edges: &[f64]) -> Result<Vec<HistBin>> {
    if edges.iter().any(|e| !(*e > 0.0)) || edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("histogram", format!("edges must be positive and increasing: {edges:?}")));
    }
    let mut lows = vec![0.0];
    lows.extend_from_slice(edges);
    let mut bins: Vec<HistBin> = lows
        .iter()
        .enumerate()
        .map(|(i, &low)| HistBin { low, high: edges.get(i).copied().unwrap_or(f64::INFINITY), count: 0 })
        .collect();
    for &v in values {
        let k = edges.partition_point(|&e| e <= v);
        bins[k].count += 1;
    }
    Ok(bins)
}

pub fn write_histogram_csv(path: &Path, bins: &[HistBin]) -> Result<()> {
    let mut s = String::from("bin_low,bin_high,count\n");
    for b in bins {
        s.push_str(&format!("{},{},{}\n", b.low, b.high, b.count));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn random(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn oracle(a: &[f64], c: &[f64], d: usize) -> f64 {
        let n = a.len() / d;
        let mut correct = 0;
        for i in 0..n {
            let mut best = (0, f64::NEG_INFINITY);
            for j in 0..n {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for k in 0..d {
                    ab += a[i * d + k] * c[j * d + k];
                    aa += a[i * d + k] * a[i * d + k];
                    bb += c[j * d + k] * c[j * d + k];
                }
                let s = ab / (aa.sqrt() * bb.sqrt());
                if s > best.1 {
                    best = (j, s);
                }
            }
            correct += usize::from(best.0 == i);
        }
        correct as f64 / n as f64
    }

    #[test]
    fn identical_rows_all_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random(10, 4, &mut rng);
        let (acc, recs) = match_accuracy(Rows::new(&a, 4).unwrap(), Rows::new(&a, 4).unwrap()).unwrap();
        assert_eq!(acc, 1.0);
        assert!(recs.iter().all(|r| r.correct()));
    }

    #[test]
    fn cyclic_shift_matches_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(10, 4, &mut rng);
        let mut c = a[4..].to_vec();
        c.extend_from_slice(&a[..4]);
        let (acc, _) = match_accuracy(Rows::new(&a, 4).unwrap(), Rows::new(&c, 4).unwrap()).unwrap();
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = random(20, 8, &mut rng);
            let c = random(20, 8, &mut rng);
            let (acc, _) = match_accuracy(Rows::new(&a, 8).unwrap(), Rows::new(&c, 8).unwrap()).unwrap();
            assert_eq!(acc, oracle(&a, &c, 8));
        }
    }

    #[test]
    fn zero_row_is_an_error() {
        let a = [1.0, 0.0, 0.0, 0.0];
        assert!(match_accuracy(Rows::new(&a, 2).unwrap(), Rows::new(&a, 2).unwrap()).is_err());
    }

    fn batch_of(img: &[f64], img_aug: &[f64], pc: &[f64], pc_aug: &[f64], n: usize, d: usize) -> CorrespondenceBatch {
        let t = |v: &[f64]| Tensor::new(v.to_vec(), &[n, d]).unwrap();
        CorrespondenceBatch::new(t(img), t(img_aug), t(pc), t(pc_aug)).unwrap()
    }

    #[test]
    fn suite_identical_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random(16, 6, &mut rng);
        let b = batch_of(&f, &f, &f, &f, 16, 6);
        let r = acc_suite(&b, TupleLayout::new(3, 3).unwrap(), 12, 0).unwrap();
        assert_eq!((r.acc_i, r.acc_p, r.acc_c, r.acc_s), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.sampled.len(), 12);
        assert!(acc_suite(&b, TupleLayout::new(3, 3).unwrap(), 17, 0).is_err());
    }

    #[test]
    fn suite_shared_aligned_private_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d_sh, d_pr) = (24, 4, 12);
        let shared = random(n, d_sh, &mut rng);
        let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let private = random(n, d_pr, rng);
            (0..n).flat_map(|i| shared[i * d_sh..(i + 1) * d_sh].iter().chain(&private[i * d_pr..(i + 1) * d_pr]).copied().collect::<Vec<_>>()).collect()
        };
        let img = mk(&mut rng);
        let pc = mk(&mut rng);
        let b = batch_of(&img, &img, &pc, &pc, n, d_sh + d_pr);
        let r = acc_suite(&b, TupleLayout::new(d_sh, d_pr).unwrap(), n, 9).unwrap();
        assert_eq!(r.acc_s, 1.0);
        let rows: Vec<f64> = r.sampled.iter().flat_map(|&i| img[i * 16..(i + 1) * 16].to_vec()).collect();
        let rows_pc: Vec<f64> = r.sampled.iter().flat_map(|&i| pc[i * 16..(i + 1) * 16].to_vec()).collect();
        assert_eq!(r.acc_c, oracle(&rows, &rows_pc, 16));
        assert!(r.acc_c < 1.0);
    }

    #[test]
    fn suite_invariant_to_row_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<Vec<f64>> = (0..4).map(|_| random(20, 6, &mut rng)).collect();
        let b = batch_of(&v[0], &v[1], &v[2], &v[3], 20, 6);
        let scaled: Vec<Vec<f64>> = v
            .iter()
            .map(|m| m.iter().enumerate().map(|(k, x)| x * (1.0 + (k / 6) as f64 * 0.5)).collect())
            .collect();
        let bs = batch_of(&scaled[0], &scaled[1], &scaled[2], &scaled[3], 20, 6);
        let l = TupleLayout::new(2, 4).unwrap();
        let (r, rs) = (acc_suite(&b, l, 15, 3).unwrap(), acc_suite(&bs, l, 15, 3).unwrap());
        assert_eq!((r.acc_i, r.acc_p, r.acc_c, r.acc_s), (rs.acc_i, rs.acc_p, rs.acc_c, rs.acc_s));
    }

    #[test]
    fn histogram_bins() {
        let bins = histogram(&[], &[1.5]).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 0);
        let bins = histogram(&[1.0], &[1.5]).unwrap();
        assert_eq!(bins[0].count, 1);
        let vals = [0.0, 0.5, 1.5, 2.9, 3.0, 100.0];
        let bins = histogram(&vals, &[1.0, 3.0]).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 2, 2]);
        assert!(histogram(&vals, &[2.0, 1.0]).is_err());
    }

    #[test]
    fn mismatch_distance_single() {
        let cam = CameraModel::look(10.0, 8, 8, [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        // both points on the optical axis: they project to (3.5, 3.5)
        let pts = [[0.0, 2.0, 0.0], [0.0, 5.0, 0.0]];
        let pixels = [(0, 0), (3, 4)];
        let recs = [
            MatchRecord { anchor: 0, predicted: 0, truth: 0, similarity: 1.0 },
            MatchRecord { anchor: 1, predicted: 0, truth: 1, similarity: 0.5 },
        ];
        let d = mismatch_distances(&recs, &pixels, &pts, &cam).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d[0] - (0.25f64 + 0.25).sqrt()).abs() < 1e-12);
        let bins = histogram(&d, &[1.5]).unwrap();
        assert_eq!(bins[0].count, 1);
    }

    #[test]
    fn histogram_csv_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_histogram_csv(&p, &histogram(&[0.2, 2.0], &[1.5]).unwrap()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, ["bin_low,bin_high,count", "0,1.5,1", "1.5,inf,1"]);
    }
}
