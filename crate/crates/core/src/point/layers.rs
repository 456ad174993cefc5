use rand_chacha::ChaCha8Rng;

use super::{ball_query, farthest_point_sample, three_nn_weights, Point3, SAConfig};
use crate::error::{Error, Result};
use crate::tensor::{Init, ParamStore, Tensor};

/// Shared per-row MLP: linear layers with ReLU between them (and after the
/// last one when `relu_last`).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(String, String)>,
    relu_last: bool,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        widths: &[usize],
        relu_last: bool,
    ) -> Result<Self> {
        if in_dim == 0 || widths.is_empty() {
            return Err(Error::Config(format!("{prefix}: MLP needs input and at least one layer")));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (k, &w) in widths.iter().enumerate() {
            let wp = ps.create(format!("{prefix}.{k}.w"), &[d, w], Init::HeUniform { fan_in: d }, rng)?;
            let bp = ps.create(format!("{prefix}.{k}.b"), &[w], Init::BiasUniform { fan_in: d }, rng)?;
            layers.push((wp, bp));
            d = w;
        }
        Ok(Mlp { layers, relu_last, in_dim, out_dim: d })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::shape("mlp", x.shape(), &[x.shape()[0], self.in_dim]));
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            h = h.linear(ps.get(w)?, Some(ps.get(b)?))?;
            if k < last || self.relu_last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn param_paths(&self) -> impl Iterator<Item = &String> {
        self.layers.iter().flat_map(|(w, b)| [w, b])
    }
}

/// Group `xyz` around each center (ball query), feed center-relative
/// coordinates (in units of the radius) ‖ neighbour features through `mlp`,
/// max-pool over the group.
fn grouped_branch(
    ps: &ParamStore,
    mlp: &Mlp,
    centers: &[Point3],
    xyz: &[Point3],
    feats: Option<&Tensor>,
    radius: f64,
    k_max: usize,
) -> Result<Tensor> {
    let idx = ball_query(centers, xyz, radius, k_max)?;
    let mut rel = Vec::with_capacity(idx.len() * 3);
    for (slot, &i) in idx.iter().enumerate() {
        let c = &centers[slot / k_max];
        rel.extend((0..3).map(|a| (xyz[i][a] - c[a]) / radius));
    }
    let rel = Tensor::new(rel, &[idx.len(), 3])?;
    let input = match feats {
        Some(f) => Tensor::concat_last(&[rel, f.gather_rows(&idx)?])?,
        None => rel,
    };
    let h = mlp.forward(ps, &input)?;
    let width = h.shape()[1];
    h.reshape(&[centers.len(), k_max, width])?.max_axis(1)
}

fn feat_width(feats: Option<&Tensor>) -> usize {
    feats.map_or(0, |f| f.shape()[1])
}

#[derive(Debug, Clone)]
pub struct SetAbstraction {
    pub cfg: SAConfig,
    branches: Vec<Mlp>,
    in_feat: usize,
}

/// Output of one set-abstraction level.
#[derive(Debug, Clone)]
pub struct SaOutput {
    /// Indices of the kept points in the input cloud.
    pub picked: Vec<usize>,
    pub xyz: Vec<Point3>,
    pub feats: Tensor,
}

impl SetAbstraction {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: SAConfig, in_feat: usize) -> Result<Self> {
        cfg.validate()?;
        let branches = cfg
            .mlp_widths
            .iter()
            .enumerate()
            .map(|(r, w)| Mlp::new(ps, rng, &format!("{prefix}.r{r}"), 3 + in_feat, w, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(SetAbstraction { cfg, branches, in_feat })
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim()
    }

    /// Sample `n_out` centers by FPS, then one grouped branch per radius,
    /// concatenated.
    pub fn forward(&self, ps: &ParamStore, xyz: &[Point3], feats: Option<&Tensor>, seed_index: usize) -> Result<SaOutput> {
        if feat_width(feats) != self.in_feat {
            return Err(Error::invalid(
                "set_abstraction",
                format!("feature width {} vs configured {}", feat_width(feats), self.in_feat),
            ));
        }
        if self.cfg.n_out > xyz.len() {
            return Err(Error::invalid(
                "set_abstraction",
                format!("n_out {} exceeds {} points", self.cfg.n_out, xyz.len()),
            ));
        }
        let picked = farthest_point_sample(xyz, self.cfg.n_out, seed_index)?;
        let centers: Vec<Point3> = picked.iter().map(|&i| xyz[i]).collect();
        let parts = self
            .branches
            .iter()
            .zip(&self.cfg.radii)
            .map(|(mlp, &r)| grouped_branch(ps, mlp, &centers, xyz, feats, r, self.cfg.k_max))
            .collect::<Result<Vec<_>>>()?;
        let feats = if parts.len() == 1 { parts[0].clone() } else { Tensor::concat_last(&parts)? };
        Ok(SaOutput { picked, xyz: centers, feats })
    }
}

fn interpolate(up: &[Point3], down: &[Point3], down_feats: &Tensor) -> Result<Tensor> {
    if down_feats.shape().first() != Some(&down.len()) {
        return Err(Error::shape("feature_propagation", down_feats.shape(), &[down.len()]));
    }
    down_feats.mix_rows(&three_nn_weights(up, down)?)
}

fn check_skip(skip: Option<&Tensor>, up: usize) -> Result<()> {
    match skip {
        Some(s) if s.shape().first() != Some(&up) => Err(Error::shape("feature_propagation", s.shape(), &[up])),
        _ => Ok(()),
    }
}

/// Plain feature propagation: 3-NN interpolation ‖ skip → MLP.
#[derive(Debug, Clone)]
pub struct FeaturePropagation {
    pub mlp: Mlp,
}

impl FeaturePropagation {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        down_feat: usize,
        skip_feat: usize,
        widths: &[usize],
    ) -> Result<Self> {
        Ok(FeaturePropagation { mlp: Mlp::new(ps, rng, &format!("{prefix}.mlp"), down_feat + skip_feat, widths, true)? })
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        up_xyz: &[Point3],
        down_xyz: &[Point3],
        down_feats: &Tensor,
        skip: Option<&Tensor>,
    ) -> Result<Tensor> {
        check_skip(skip, up_xyz.len())?;
        let interp = interpolate(up_xyz, down_xyz, down_feats)?;
        let x = match skip {
            Some(s) => Tensor::concat_last(&[interp, s.clone()])?,
            None => interp,
        };
        self.mlp.forward(ps, &x)
    }
}

/// Feature propagation preceded by a set-abstraction branch: each upsampled
/// point groups its neighbourhood in the coarse cloud through a learned MLP;
/// the result is concatenated with the interpolated and skip features.
#[derive(Debug, Clone)]
pub struct AsfpLayer {
    branches: Vec<Mlp>,
    radii: Vec<f64>,
    k_max: usize,
    pub mlp: Mlp,
    down_feat: usize,
}

impl AsfpLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        radii: &[f64],
        k_max: usize,
        group_widths: &[usize],
        down_feat: usize,
        skip_feat: usize,
        widths: &[usize],
    ) -> Result<Self> {
        let branches = radii
            .iter()
            .enumerate()
            .map(|(r, _)| Mlp::new(ps, rng, &format!("{prefix}.group.r{r}"), 3 + down_feat, group_widths, true))
            .collect::<Result<Vec<_>>>()?;
        let new_width: usize = branches.iter().map(|b| b.out_dim).sum();
        let mlp = Mlp::new(ps, rng, &format!("{prefix}.mlp"), new_width + down_feat + skip_feat, widths, true)?;
        Ok(AsfpLayer { branches, radii: radii.to_vec(), k_max, mlp, down_feat })
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim
    }

    pub fn group_width(&self) -> usize {
        self.branches.iter().map(|b| b.out_dim).sum()
    }

    pub fn group_param_paths(&self) -> impl Iterator<Item = &String> {
        self.branches.iter().flat_map(Mlp::param_paths)
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        up_xyz: &[Point3],
        down_xyz: &[Point3],
        down_feats: &Tensor,
        skip: Option<&Tensor>,
    ) -> Result<Tensor> {
        check_skip(skip, up_xyz.len())?;
        if down_feats.shape()[1] != self.down_feat {
            return Err(Error::shape("asfp", down_feats.shape(), &[down_xyz.len(), self.down_feat]));
        }
        let mut parts = self
            .branches
            .iter()
            .zip(&self.radii)
            .map(|(mlp, &r)| grouped_branch(ps, mlp, up_xyz, down_xyz, Some(down_feats), r, self.k_max))
            .collect::<Result<Vec<_>>>()?;
        parts.push(interpolate(up_xyz, down_xyz, down_feats)?);
        if let Some(s) = skip {
            parts.push(s.clone());
        }
        self.mlp.forward(ps, &Tensor::concat_last(&parts)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::tensor::{grad_check_with, GradCheckOptions};

    fn pts(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
    }

    fn feats(n: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new((0..n * f).map(|_| rng.random_range(-1.0..1.0)).collect(), &[n, f]).unwrap()
    }

    /// Rebuild a store from perturbed tensors for finite differences.
    fn store_from(ps: &ParamStore, ts: &[Tensor]) -> ParamStore {
        let mut out = ParamStore::new();
        for ((p, _), t) in ps.iter().zip(ts) {
            out.insert_tensor(p.clone(), t.clone());
        }
        out
    }

    #[test]
    fn singleton_group_is_relu_linear() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SAConfig { n_out: 1, radii: vec![10.0], k_max: 1, mlp_widths: vec![vec![2]] };
        let sa = SetAbstraction::new(&mut ps, &mut rng, "sa", cfg, 1).unwrap();
        let xyz = [[0.5, 0.0, 0.0]];
        let f = Tensor::new(vec![2.0], &[1, 1]).unwrap();
        let out = sa.forward(&ps, &xyz, Some(&f), 0).unwrap();
        // the only neighbour is the center itself: relative coords are 0
        let w = ps.get("sa.r0.0.w").unwrap().values();
        let b = ps.get("sa.r0.0.b").unwrap().values();
        let want: Vec<f64> = (0..2).map(|j| (2.0 * w[3 * 2 + j] + b[j]).max(0.0)).collect();
        assert_eq!(out.feats.values(), want.as_slice());
    }

    #[test]
    fn duplicate_neighbour_does_not_change_max_pool() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut ps, &mut rng, "m", 4, &[6], true).unwrap();
        let xyz = pts(3, 2);
        let f = feats(3, 1, 3);
        let a = grouped_branch(&ps, &mlp, &xyz[..1], &xyz, Some(&f), 5.0, 3).unwrap();
        // k_max 5 repeats the first neighbour twice
        let b = grouped_branch(&ps, &mlp, &xyz[..1], &xyz, Some(&f), 5.0, 5).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn group_order_invariance() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(&mut ps, &mut rng, "m", 5, &[8, 8], true).unwrap();
        let xyz = pts(12, 5);
        let f = feats(12, 2, 6);
        let center = [[0.5, 0.5, 0.5]];
        let a = grouped_branch(&ps, &mlp, &center, &xyz, Some(&f), 2.0, 12).unwrap();
        let perm: Vec<usize> = (0..12).rev().collect();
        let xyz_p: Vec<Point3> = perm.iter().map(|&i| xyz[i]).collect();
        let f_p = f.gather_rows(&perm).unwrap();
        let b = grouped_branch(&ps, &mlp, &center, &xyz_p, Some(&f_p), 2.0, 12).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fp_single_coarse_point_broadcasts() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fp = FeaturePropagation::new(&mut ps, &mut rng, "fp", 3, 0, &[4]).unwrap();
        let up = pts(5, 8);
        let down_f = feats(1, 3, 9);
        let interp = interpolate(&up, &[[0.1, 0.2, 0.3]], &down_f).unwrap();
        for r in interp.values().chunks(3) {
            assert_eq!(r, down_f.values());
        }
        let out = fp.forward(&ps, &up, &[[0.1, 0.2, 0.3]], &down_f, None).unwrap();
        assert_eq!(out.shape(), &[5, 4]);
    }

    #[test]
    fn asfp_with_zeroed_group_equals_widened_fp() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let layer = AsfpLayer::new(&mut ps, &mut rng, "asfp", &[0.3, 0.6], 4, &[5], 6, 2, &[7, 3]).unwrap();
        let paths: Vec<String> = layer.group_param_paths().cloned().collect();
        for p in &paths {
            let n = ps.get(p).unwrap().len();
            ps.set(p, vec![0.0; n]).unwrap();
        }
        let up = pts(20, 11);
        let down = pts(6, 12);
        let df = feats(6, 6, 13);
        let skip = feats(20, 2, 14);
        let got = layer.forward(&ps, &up, &down, &df, Some(&skip)).unwrap();

        // Same final MLP fed with zeros in place of the grouped features.
        let gw = layer.group_width();
        let zeros = Tensor::zeros(&[20, gw]);
        let interp = interpolate(&up, &down, &df).unwrap();
        let widened = Tensor::concat_last(&[zeros, interp, skip]).unwrap();
        let want = layer.mlp.forward(&ps, &widened).unwrap();
        assert_eq!(got.values(), want.values());
    }

    #[test]
    fn asfp_output_shape() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let layer = AsfpLayer::new(&mut ps, &mut rng, "a", &[0.4], 8, &[8], 16, 4, &[24]).unwrap();
        let out = layer.forward(&ps, &pts(32, 1), &pts(8, 2), &feats(8, 16, 3), Some(&feats(32, 4, 4))).unwrap();
        assert_eq!(out.shape(), &[32, 24]);
    }

    #[test]
    fn asfp_grad_check() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let layer = AsfpLayer::new(&mut ps, &mut rng, "a", &[0.5], 4, &[4], 3, 2, &[5]).unwrap();
        let up = pts(16, 17);
        let down = pts(5, 18);
        let df = feats(5, 3, 19);
        let skip = feats(16, 2, 20);
        let inputs: Vec<Tensor> = ps.iter().map(|(_, t)| t.clone()).collect();
        let r = grad_check_with(
            |ts| {
                let store = store_from(&ps, ts);
                let y = layer.forward(&store, &up, &down, &df, Some(&skip))?;
                Ok(y.mul(&y)?.sum_all())
            },
            &inputs,
            GradCheckOptions::new(1e-5, 1e-4),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn sa_two_level_grad_check() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sa1 = SetAbstraction::new(
            &mut ps,
            &mut rng,
            "sa1",
            SAConfig { n_out: 8, radii: vec![0.3, 0.6], k_max: 4, mlp_widths: vec![vec![4], vec![4]] },
            1,
        )
        .unwrap();
        let sa2 = SetAbstraction::new(
            &mut ps,
            &mut rng,
            "sa2",
            SAConfig { n_out: 3, radii: vec![0.8], k_max: 4, mlp_widths: vec![vec![5, 3]] },
            8,
        )
        .unwrap();
        let xyz = pts(16, 22);
        let attrs = feats(16, 1, 23);
        let inputs: Vec<Tensor> = ps.iter().map(|(_, t)| t.clone()).collect();
        let r = grad_check_with(
            |ts| {
                let store = store_from(&ps, ts);
                let l1 = sa1.forward(&store, &xyz, Some(&attrs), 0)?;
                let l2 = sa2.forward(&store, &l1.xyz, Some(&l1.feats), 0)?;
                Ok(l2.feats.sum_all())
            },
            &inputs,
            GradCheckOptions::new(1e-5, 1e-4),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
