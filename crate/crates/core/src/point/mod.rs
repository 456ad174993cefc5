//! PointNet++-style point encoder: sampling and grouping geometry, set
//! abstraction, feature propagation, and set-abstraction feature propagation
//! (ASFP), where a grouped MLP over the coarse cloud supplies learnable
//! features alongside the fixed 3-NN interpolation.

mod layers;
mod net;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use layers::{AsfpLayer, FeaturePropagation, Mlp, SetAbstraction};
pub use net::{PointNet, PointNetConfig};

pub type Point3 = [f64; 3];

/// Coordinates plus `n_attrs` per-point attributes (e.g. intensity).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub xyz: Vec<Point3>,
    pub attrs: Vec<f64>,
    pub n_attrs: usize,
}

impl PointCloud {
    pub fn new(xyz: Vec<Point3>, attrs: Vec<f64>, n_attrs: usize) -> Result<Self> {
        if xyz.is_empty() {
            return Err(Error::invalid("point_cloud", "empty cloud"));
        }
        if attrs.len() != xyz.len() * n_attrs {
            return Err(Error::invalid(
                "point_cloud",
                format!("{} attrs for {} points x {n_attrs}", attrs.len(), xyz.len()),
            ));
        }
        if xyz.iter().flatten().chain(&attrs).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud".into()));
        }
        Ok(PointCloud { xyz, attrs, n_attrs })
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn attr(&self, i: usize) -> &[f64] {
        &self.attrs[i * self.n_attrs..][..self.n_attrs]
    }

    /// `[P, A]` attribute tensor, or `None` when there are no attributes.
    pub fn attrs_tensor(&self) -> Result<Option<Tensor>> {
        if self.n_attrs == 0 {
            return Ok(None);
        }
        Tensor::new(self.attrs.clone(), &[self.len(), self.n_attrs]).map(Some)
    }

    pub fn xyz_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.xyz.iter().flatten().copied().collect(), &[self.len(), 3])
    }

    /// Reorder points: output point `k` is input point `order[k]`.
    pub fn select(&self, order: &[usize]) -> PointCloud {
        PointCloud {
            xyz: order.iter().map(|&i| self.xyz[i]).collect(),
            attrs: order.iter().flat_map(|&i| self.attr(i).iter().copied()).collect(),
            n_attrs: self.n_attrs,
        }
    }
}

/// One set-abstraction level: keep `n_out` points, group at each radius
/// (up to `k_max` neighbours) and run that radius's MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SAConfig {
    pub n_out: usize,
    pub radii: Vec<f64>,
    pub k_max: usize,
    pub mlp_widths: Vec<Vec<usize>>,
}

impl SAConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("set abstraction: {m}")));
        if self.n_out == 0 || self.k_max == 0 {
            return bad("n_out and k_max must be positive".into());
        }
        if self.radii.is_empty() || self.radii.len() != self.mlp_widths.len() {
            return bad(format!("{} radii vs {} MLPs", self.radii.len(), self.mlp_widths.len()));
        }
        if self.radii[0] <= 0.0 || self.radii.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("radii must be positive and strictly increasing: {:?}", self.radii));
        }
        if self.mlp_widths.iter().any(|w| w.is_empty() || w.contains(&0)) {
            return bad("MLP widths must be nonempty and >= 1".into());
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        self.mlp_widths.iter().map(|w| *w.last().unwrap()).sum()
    }
}

pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy max-min sampling starting at `seed_index`; each next pick is the
/// point farthest from everything picked so far (lowest index on ties).
pub fn farthest_point_sample(xyz: &[Point3], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let p = xyz.len();
    if k == 0 || k > p {
        return Err(Error::invalid("farthest_point_sample", format!("k = {k} for {p} points")));
    }
    if seed_index >= p {
        return Err(Error::invalid("farthest_point_sample", format!("seed {seed_index} of {p}")));
    }
    let mut picked = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; p];
    let mut cur = seed_index;
    for _ in 0..k {
        picked.push(cur);
        min_d[cur] = f64::NEG_INFINITY;
        let c = xyz[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, q) in xyz.iter().enumerate() {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(q, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(picked)
}

/// Up to `k_max` indices within `radius` of each center, ascending index
/// order, flattened to `[M * k_max]`. Short neighbourhoods repeat their first
/// member; empty ones use the nearest point.
pub fn ball_query(centers: &[Point3], xyz: &[Point3], radius: f64, k_max: usize) -> Result<Vec<usize>> {
    if !(radius > 0.0) || k_max == 0 || xyz.is_empty() {
        return Err(Error::invalid("ball_query", format!("radius {radius}, k_max {k_max}, {} points", xyz.len())));
    }
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(centers.len() * k_max);
    for c in centers {
        let start = out.len();
        for (i, q) in xyz.iter().enumerate() {
            if dist2(q, c) <= r2 {
                out.push(i);
                if out.len() - start == k_max {
                    break;
                }
            }
        }
        let found = out.len() - start;
        let fill = if found == 0 { nearest(c, xyz) } else { out[start] };
        out.extend(std::iter::repeat_n(fill, k_max - found));
    }
    Ok(out)
}

fn nearest(c: &Point3, xyz: &[Point3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, q) in xyz.iter().enumerate() {
        let d = dist2(q, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Inverse-square-distance weights over the (up to) 3 nearest `down` points
/// of each `up` point. A coincident point (d < 1e-10) takes weight 1.
pub fn three_nn_weights(up: &[Point3], down: &[Point3]) -> Result<Vec<Vec<(usize, f64)>>> {
    if down.is_empty() {
        return Err(Error::invalid("feature_propagation", "no coarse points"));
    }
    let k = down.len().min(3);
    let mut out = Vec::with_capacity(up.len());
    for q in up {
        // (dist2, index), kept sorted; ties keep the lower index first.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (i, d) in down.iter().enumerate() {
            let dd = dist2(q, d);
            if best.len() < k || dd < best[k - 1].0 {
                let pos = best.partition_point(|&(bd, _)| bd <= dd);
                best.insert(pos, (dd, i));
                best.truncate(k);
            }
        }
        if best[0].0.sqrt() < 1e-10 {
            out.push(vec![(best[0].1, 1.0)]);
            continue;
        }
        let inv: Vec<f64> = best.iter().map(|&(d2, _)| 1.0 / d2).collect();
        let total: f64 = inv.iter().sum();
        out.push(best.iter().zip(&inv).map(|(&(_, i), w)| (i, w / total)).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
    }

    /// Exhaustive greedy: at every step scan all unpicked points and all
    /// picked points.
    pub(crate) fn fps_oracle(xyz: &[Point3], k: usize, seed: usize) -> Vec<usize> {
        let mut picked = vec![seed];
        while picked.len() < k {
            let mut best = None;
            let mut best_d = -1.0;
            for i in 0..xyz.len() {
                if picked.contains(&i) {
                    continue;
                }
                let d = picked.iter().map(|&j| dist2(&xyz[i], &xyz[j])).fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = Some(i);
                }
            }
            picked.push(best.unwrap());
        }
        picked
    }

    #[test]
    fn fps_small_examples() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 1]);
        let all = farthest_point_sample(&pts, 3, 0).unwrap();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(farthest_point_sample(&pts, 4, 0).is_err());
    }

    #[test]
    fn fps_matches_exhaustive_greedy() {
        for seed in 0..20 {
            let pts = random_points(50, seed);
            for k in [1, 7, 25, 50] {
                assert_eq!(farthest_point_sample(&pts, k, 0).unwrap(), fps_oracle(&pts, k, 0));
            }
        }
    }

    #[test]
    fn ball_query_fill_rules() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        assert_eq!(ball_query(&[[0.0, 0.0, 0.0]], &pts, 1e-6, 4).unwrap(), vec![0; 4]);
        // nothing within radius: nearest point fills all slots
        assert_eq!(ball_query(&[[0.9, 0.3, 0.0]], &pts, 0.1, 3).unwrap(), vec![1; 3]);
        // two found: ascending order, then repeat the first
        assert_eq!(ball_query(&[[0.5, 0.0, 0.0]], &pts, 0.6, 4).unwrap(), vec![0, 1, 0, 0]);
    }

    #[test]
    fn ball_query_matches_range_search() {
        let pts = random_points(80, 5);
        let centers = random_points(10, 6);
        let got = ball_query(&centers, &pts, 0.3, 200).unwrap();
        for (c, slots) in centers.iter().zip(got.chunks(200)) {
            let mut want: Vec<usize> = (0..pts.len()).filter(|&i| dist2(&pts[i], c) <= 0.09).collect();
            if want.is_empty() {
                want.push(nearest(c, &pts));
            }
            let mut have: Vec<usize> = slots.to_vec();
            have.sort();
            have.dedup();
            assert_eq!(have, want);
        }
    }

    #[test]
    fn interpolation_weights() {
        let down = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0]];
        let w = three_nn_weights(&[[0.0, 0.0, 0.0]], &down).unwrap();
        for &(_, x) in &w[0] {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = three_nn_weights(&[[0.0, 1.0, 0.0]], &down).unwrap();
        assert_eq!(w[0], vec![(2, 1.0)]);
        let w = three_nn_weights(&random_points(5, 1), &[[0.2, 0.2, 0.2]]).unwrap();
        assert!(w.iter().all(|r| r == &vec![(0, 1.0)]));
        for r in three_nn_weights(&random_points(40, 2), &random_points(9, 3)).unwrap() {
            let s: f64 = r.iter().map(|x| x.1).sum();
            assert!((s - 1.0).abs() < 1e-12 && r.iter().all(|x| x.1 >= 0.0));
        }
    }

    #[test]
    fn sa_config_validation() {
        let ok = SAConfig { n_out: 4, radii: vec![0.2, 0.4], k_max: 8, mlp_widths: vec![vec![8], vec![8, 16]] };
        ok.validate().unwrap();
        assert_eq!(ok.out_dim(), 24);
        let mut bad = ok.clone();
        bad.radii = vec![0.4, 0.2];
        assert!(bad.validate().is_err());
    }
}
