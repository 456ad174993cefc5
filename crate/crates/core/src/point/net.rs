use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{AsfpLayer, FeaturePropagation, SetAbstraction};
use super::{PointCloud, Point3, SAConfig};
use crate::error::{Error, Result};
use crate::tensor::{Init, ParamStore, Tensor};

/// Encoder pyramid, decoder widths and head of the point network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointNetConfig {
    /// Per-point attribute count (A).
    pub in_attrs: usize,
    pub sa_levels: Vec<SAConfig>,
    /// MLP widths of each decoder layer, deepest first. One entry per SA level.
    pub decoder_widths: Vec<Vec<usize>>,
    pub asfp: bool,
    /// Neighbour cap of the grouped branch in ASFP layers.
    pub asfp_k_max: usize,
    pub asfp_group_widths: Vec<usize>,
    pub head_dim: usize,
    pub fps_seed: usize,
}

impl Default for PointNetConfig {
    fn default() -> Self {
        PointNetConfig {
            in_attrs: 1,
            sa_levels: vec![
                SAConfig { n_out: 64, radii: vec![0.8, 1.6], k_max: 16, mlp_widths: vec![vec![32], vec![32]] },
                SAConfig { n_out: 16, radii: vec![1.6, 3.2], k_max: 16, mlp_widths: vec![vec![64], vec![64]] },
            ],
            decoder_widths: vec![vec![64], vec![32]],
            asfp: true,
            asfp_k_max: 8,
            asfp_group_widths: vec![32],
            head_dim: 32,
            fps_seed: 0,
        }
    }
}

impl PointNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sa_levels.is_empty() {
            return Err(Error::Config("point net needs at least one SA level".into()));
        }
        for sa in &self.sa_levels {
            sa.validate()?;
        }
        if self.sa_levels.windows(2).any(|w| w[1].n_out > w[0].n_out) {
            return Err(Error::Config("SA n_out must be non-increasing".into()));
        }
        if self.decoder_widths.len() != self.sa_levels.len() {
            return Err(Error::Config(format!(
                "{} decoder layers for {} SA levels",
                self.decoder_widths.len(),
                self.sa_levels.len()
            )));
        }
        if self.decoder_widths.iter().any(|w| w.is_empty() || w.contains(&0)) || self.head_dim == 0 {
            return Err(Error::Config("decoder and head widths must be >= 1".into()));
        }
        if self.asfp && (self.asfp_k_max == 0 || self.asfp_group_widths.is_empty() || self.asfp_group_widths.contains(&0)) {
            return Err(Error::Config("asfp group widths and k_max must be >= 1".into()));
        }
        Ok(())
    }

    pub fn min_points(&self) -> usize {
        self.sa_levels[0].n_out
    }
}

#[derive(Debug, Clone)]
enum Decoder {
    Fp(FeaturePropagation),
    Asfp(AsfpLayer),
}

impl Decoder {
    fn forward(&self, ps: &ParamStore, up: &[Point3], down: &[Point3], df: &Tensor, skip: Option<&Tensor>) -> Result<Tensor> {
        match self {
            Decoder::Fp(l) => l.forward(ps, up, down, df, skip),
            Decoder::Asfp(l) => l.forward(ps, up, down, df, skip),
        }
    }
}

/// Set-abstraction encoder, FP or ASFP decoder back to every input point,
/// linear head to `head_dim`.
#[derive(Debug, Clone)]
pub struct PointNet {
    pub cfg: PointNetConfig,
    encoder: Vec<SetAbstraction>,
    decoder: Vec<Decoder>,
    head: (String, String),
}

impl PointNet {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: PointNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut widths = vec![3 + cfg.in_attrs];
        let mut encoder = Vec::new();
        let mut in_feat = cfg.in_attrs;
        for (l, sa) in cfg.sa_levels.iter().enumerate() {
            let layer = SetAbstraction::new(ps, rng, &format!("{prefix}.sa{l}"), sa.clone(), in_feat)?;
            in_feat = layer.out_dim();
            widths.push(in_feat);
            encoder.push(layer);
        }
        // Decoder layer j lifts level L-j to level L-j-1.
        let levels = cfg.sa_levels.len();
        let mut decoder = Vec::new();
        let mut down_feat = in_feat;
        for j in 0..levels {
            let down_level = levels - j;
            let skip = widths[down_level - 1];
            let name = format!("{prefix}.dec{j}");
            let layer = if cfg.asfp {
                Decoder::Asfp(AsfpLayer::new(
                    ps,
                    rng,
                    &name,
                    &cfg.sa_levels[down_level - 1].radii,
                    cfg.asfp_k_max,
                    &cfg.asfp_group_widths,
                    down_feat,
                    skip,
                    &cfg.decoder_widths[j],
                )?)
            } else {
                Decoder::Fp(FeaturePropagation::new(ps, rng, &name, down_feat, skip, &cfg.decoder_widths[j])?)
            };
            down_feat = *cfg.decoder_widths[j].last().unwrap();
            decoder.push(layer);
        }
        let w = ps.create(format!("{prefix}.head.w"), &[down_feat, cfg.head_dim], Init::HeUniform { fan_in: down_feat }, rng)?;
        let b = ps.create(format!("{prefix}.head.b"), &[cfg.head_dim], Init::BiasUniform { fan_in: down_feat }, rng)?;
        Ok(PointNet { cfg, encoder, decoder, head: (w, b) })
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.head_dim
    }

    /// Per-point feature rows `[P, head_dim]`.
    pub fn forward(&self, ps: &ParamStore, pc: &PointCloud) -> Result<Tensor> {
        if pc.n_attrs != self.cfg.in_attrs {
            return Err(Error::invalid(
                "point_net",
                format!("cloud has {} attrs, network expects {}", pc.n_attrs, self.cfg.in_attrs),
            ));
        }
        if pc.len() < self.cfg.min_points() {
            return Err(Error::invalid(
                "point_net",
                format!("{} points, need at least {}", pc.len(), self.cfg.min_points()),
            ));
        }
        if self.cfg.fps_seed >= pc.len() {
            return Err(Error::invalid("point_net", format!("fps seed {} out of range", self.cfg.fps_seed)));
        }
        let attrs = pc.attrs_tensor()?;
        let skip0 = match &attrs {
            Some(a) => Tensor::concat_last(&[pc.xyz_tensor()?, a.clone()])?,
            None => pc.xyz_tensor()?,
        };
        let mut xyz_levels = vec![pc.xyz.clone()];
        let mut feat_levels = vec![skip0];
        let mut feats = attrs;
        for (l, sa) in self.encoder.iter().enumerate() {
            let seed = if l == 0 { self.cfg.fps_seed } else { 0 };
            let out = sa.forward(ps, xyz_levels.last().unwrap(), feats.as_ref(), seed)?;
            xyz_levels.push(out.xyz);
            feat_levels.push(out.feats.clone());
            feats = Some(out.feats);
        }
        let levels = self.encoder.len();
        let mut cur = feat_levels[levels].clone();
        for (j, layer) in self.decoder.iter().enumerate() {
            let down = levels - j;
            cur = layer.forward(ps, &xyz_levels[down - 1], &xyz_levels[down], &cur, Some(&feat_levels[down - 1]))?;
        }
        cur.linear(ps.get(&self.head.0)?, Some(ps.get(&self.head.1)?))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::tensor::{grad_check_with, GradCheckOptions};

    fn cloud(p: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xyz = (0..p).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let attrs = (0..p).map(|_| rng.random()).collect();
        PointCloud::new(xyz, attrs, 1).unwrap()
    }

    fn micro_cfg(asfp: bool) -> PointNetConfig {
        PointNetConfig {
            in_attrs: 1,
            sa_levels: vec![
                SAConfig { n_out: 8, radii: vec![0.4], k_max: 16, mlp_widths: vec![vec![4]] },
                SAConfig { n_out: 3, radii: vec![0.7], k_max: 8, mlp_widths: vec![vec![4]] },
            ],
            decoder_widths: vec![vec![4], vec![4]],
            asfp,
            asfp_k_max: 8,
            asfp_group_widths: vec![3],
            head_dim: 4,
            fps_seed: 0,
        }
    }

    #[test]
    fn toy_shape() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PointNet::new(&mut ps, &mut rng, "pc", PointNetConfig::default()).unwrap();
        let out = net.forward(&ps, &cloud(256, 1)).unwrap();
        assert_eq!(out.shape(), &[256, 32]);
    }

    #[test]
    fn vanilla_decoder_shape() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = PointNetConfig { asfp: false, ..PointNetConfig::default() };
        let net = PointNet::new(&mut ps, &mut rng, "pc", cfg).unwrap();
        assert_eq!(net.forward(&ps, &cloud(128, 2)).unwrap().shape(), &[128, 32]);
        assert!(!ps.paths().any(|p| p.contains("group")));
    }

    #[test]
    fn too_few_points_rejected() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = PointNet::new(&mut ps, &mut rng, "pc", PointNetConfig::default()).unwrap();
        assert!(net.forward(&ps, &cloud(40, 3)).is_err());
    }

    #[test]
    fn permutation_equivariance() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = 24;
        let mut cfg = micro_cfg(true);
        cfg.sa_levels[0].k_max = p;
        cfg.fps_seed = 5;
        let net = PointNet::new(&mut ps, &mut rng, "pc", cfg.clone()).unwrap();
        let pc = cloud(p, 5);
        let base = net.forward(&ps, &pc).unwrap();

        let mut perm: Vec<usize> = (0..p).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(6);
        for i in (1..p).rev() {
            perm.swap(i, prng.random_range(0..=i));
        }
        let permuted = pc.select(&perm);
        let mut cfg_p = cfg;
        cfg_p.fps_seed = perm.iter().position(|&i| i == 5).unwrap();
        let net_p = PointNet { cfg: cfg_p, ..net };
        let out = net_p.forward(&ps, &permuted).unwrap();
        let d = base.shape()[1];
        for (row, &src) in perm.iter().enumerate() {
            let a = &out.values()[row * d..(row + 1) * d];
            let b = &base.values()[src * d..(src + 1) * d];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12, "row {row}");
            }
        }
    }

    #[test]
    fn micro_arch_grad_check() {
        for asfp in [true, false] {
            let mut ps = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let net = PointNet::new(&mut ps, &mut rng, "pc", micro_cfg(asfp)).unwrap();
            let pc = cloud(16, 8);
            let paths: Vec<String> = ps.paths().cloned().collect();
            let inputs: Vec<Tensor> = ps.iter().map(|(_, t)| t.clone()).collect();
            let r = grad_check_with(
                |ts| {
                    let mut store = ParamStore::new();
                    for (p, t) in paths.iter().zip(ts) {
                        store.insert_tensor(p.clone(), t.clone());
                    }
                    let y = net.forward(&store, &pc)?;
                    Ok(y.mul(&y)?.mean_all())
                },
                &inputs,
                GradCheckOptions::new(1e-5, 1e-4),
            )
            .unwrap();
            assert!(r.passed(), "asfp={asfp}: {r:?}");
        }
    }
}
