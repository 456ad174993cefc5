//! Finite-difference checks of every differentiable piece: primitives,
//! losses and micro-sized encoders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::{sample_pixel_features, ImageGrid, Norm, UNet, UNetConfig};
use crate::losses::{circle_loss, circle_loss_batch, tuple_circle_loss, CircleParams, CorrespondenceBatch, TupleLayout};
use crate::point::{PointCloud, PointNet, PointNetConfig, SAConfig};
use crate::tensor::{grad_check_with, Conv2dSpec, GradCheckOptions, ParamStore, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOL_PRIMITIVE: f64 = 1e-6;
pub const TOL_LOSS: f64 = 1e-5;
pub const TOL_ENCODER: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub passed: bool,
}

type Objective = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

struct Case {
    name: &'static str,
    tol: f64,
    inputs: Vec<Tensor>,
    f: Objective,
    max_coords: Option<usize>,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).expect("shape")
}

/// Random weights for a scalar readout so every output element matters.
fn readout(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).expect("shape")
}

fn weighted(y: Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(y.mul(w)?.sum_all())
}

fn primitive(name: &'static str, inputs: Vec<Tensor>, out_shape: &[usize], rng: &mut ChaCha8Rng, op: impl Fn(&[Tensor]) -> Result<Tensor> + 'static) -> Case {
    let w = readout(rng, out_shape);
    Case { name, tol: TOL_PRIMITIVE, inputs, f: Box::new(move |x| weighted(op(x)?, &w)), max_coords: None }
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut c = Vec::new();
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| rand_t(rng, s, -1.0, 1.0);
    let (a, b) = (r(rng, &[3, 4]), r(rng, &[4, 2]));
    c.push(primitive("matmul", vec![a, b], &[3, 2], rng, |x| x[0].matmul(&x[1])));
    let (a, b) = (r(rng, &[3, 4]), r(rng, &[3, 4]));
    c.push(primitive("add", vec![a.clone(), b.clone()], &[3, 4], rng, |x| x[0].add(&x[1])));
    c.push(primitive("sub", vec![a.clone(), b.clone()], &[3, 4], rng, |x| x[0].sub(&x[1])));
    c.push(primitive("mul", vec![a.clone(), b], &[3, 4], rng, |x| x[0].mul(&x[1])));
    let bias = r(rng, &[4]);
    c.push(primitive("add_bias", vec![a.clone(), bias], &[3, 4], rng, |x| x[0].add_bias(&x[1])));
    c.push(primitive("scale", vec![a.clone()], &[3, 4], rng, |x| Ok(x[0].scale(-2.5))));
    c.push(primitive("add_scalar", vec![a.clone()], &[3, 4], rng, |x| Ok(x[0].add_scalar(0.75))));
    c.push(primitive("relu", vec![a.clone()], &[3, 4], rng, |x| Ok(x[0].relu())));
    c.push(primitive("clamp_min", vec![a.clone()], &[3, 4], rng, |x| Ok(x[0].clamp_min(0.1))));
    c.push(primitive("exp", vec![a.clone()], &[3, 4], rng, |x| Ok(x[0].exp())));
    let pos = rand_t(rng, &[3, 4], 0.2, 2.0);
    c.push(primitive("log", vec![pos], &[3, 4], rng, |x| Ok(x[0].log())));
    let wide = rand_t(rng, &[3, 4], -4.0, 4.0);
    c.push(primitive("softplus", vec![wide], &[3, 4], rng, |x| Ok(x[0].softplus())));
    c.push(primitive("sum_all", vec![a.clone()], &[1], rng, |x| Ok(x[0].sum_all())));
    c.push(primitive("mean_all", vec![a.clone()], &[1], rng, |x| Ok(x[0].mean_all())));
    let t3 = r(rng, &[2, 3, 4]);
    c.push(primitive("sum_axis", vec![t3.clone()], &[2, 4], rng, |x| x[0].sum_axis(1)));
    c.push(primitive("max_axis", vec![t3.clone()], &[2, 4], rng, |x| x[0].max_axis(1)));
    c.push(primitive("reshape", vec![t3.clone()], &[6, 4], rng, |x| x[0].reshape(&[6, 4])));
    let (p, q) = (r(rng, &[3, 2]), r(rng, &[3, 3]));
    c.push(primitive("concat_last", vec![p, q], &[3, 5], rng, |x| Tensor::concat_last(&[x[0].clone(), x[1].clone()])));
    c.push(primitive("slice_last", vec![a.clone()], &[3, 2], rng, |x| x[0].slice_last(1, 3)));
    c.push(primitive("l2_normalize_rows", vec![a.clone()], &[3, 4], rng, |x| x[0].l2_normalize_rows()));
    c.push(primitive("gather_rows", vec![a.clone()], &[4, 4], rng, |x| x[0].gather_rows(&[2, 0, 2, 1])));
    c.push(primitive("gather_flat", vec![a.clone()], &[2, 3], rng, |x| x[0].gather_flat(&[11, 0, 5, 5, 7, 3], &[2, 3])));
    let mix = vec![vec![(0, 0.2), (2, 0.8)], vec![(1, 1.0)], vec![(0, 0.5), (1, 0.25), (2, 0.25)]];
    c.push(primitive("mix_rows", vec![a.clone()], &[3, 4], rng, move |x| x[0].mix_rows(&mix)));
    c.push(primitive("transpose", vec![a.clone()], &[4, 3], rng, |x| x[0].transpose()));
    let (w, bb) = (r(rng, &[4, 2]), r(rng, &[2]));
    c.push(primitive("linear", vec![a, w, bb], &[3, 2], rng, |x| x[0].linear(&x[1], Some(&x[2]))));
    let (img, k, kb) = (r(rng, &[2, 5, 5]), r(rng, &[3, 2, 3, 3]), r(rng, &[3]));
    c.push(primitive("conv2d", vec![img.clone(), k, kb], &[3, 3, 3], rng, |x| {
        x[0].conv2d(&x[1], Some(&x[2]), Conv2dSpec::new(2, 1))
    }));
    let (k, kb) = (r(rng, &[2, 3, 2, 2]), r(rng, &[3]));
    c.push(primitive("conv_transpose2d", vec![img.clone(), k, kb], &[3, 10, 10], rng, |x| {
        x[0].conv_transpose2d(&x[1], Some(&x[2]), Conv2dSpec::new(2, 0))
    }));
    c.push(primitive("instance_norm", vec![img.clone()], &[2, 5, 5], rng, |x| x[0].instance_norm(1e-5)));
    let (sc, sh) = (r(rng, &[2]), r(rng, &[2]));
    c.push(primitive("channel_affine", vec![img, sc, sh], &[2, 5, 5], rng, |x| x[0].channel_affine(&x[1], &x[2])));
    c
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Tensor> {
    (0..4).map(|_| rand_t(rng, &[n, d], -1.0, 1.0)).collect()
}

fn batch_of(x: &[Tensor]) -> Result<CorrespondenceBatch> {
    CorrespondenceBatch::new(x[0].clone(), x[1].clone(), x[2].clone(), x[3].clone())
}

fn loss_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let p = CircleParams::new(2.0, 0.25).expect("params");
    let sims = vec![rand_t(rng, &[3], -0.9, 0.9), rand_t(rng, &[4], -0.9, 0.9)];
    let layout = TupleLayout::new(3, 3).expect("layout");
    vec![
        Case { name: "circle_loss", tol: TOL_LOSS, inputs: sims, f: Box::new(move |x| circle_loss(&x[0], &x[1], p)), max_coords: None },
        Case {
            name: "tuple_circle_loss",
            tol: TOL_LOSS,
            inputs: random_batch(rng, 4, 6),
            f: Box::new(move |x| tuple_circle_loss(&batch_of(x)?, layout, p)),
            max_coords: None,
        },
        Case {
            name: "circle_loss_batch",
            tol: TOL_LOSS,
            inputs: random_batch(rng, 4, 6),
            f: Box::new(move |x| circle_loss_batch(&batch_of(x)?, p)),
            max_coords: None,
        },
    ]
}

pub fn micro_point_config(asfp: bool, head_dim: usize) -> PointNetConfig {
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
        head_dim,
        fps_seed: 0,
    }
}

pub fn micro_image_config(head_dim: usize) -> UNetConfig {
    UNetConfig { in_channels: 1, channels: vec![2, 2, 3, 3], blocks_per_stage: 1, head_dim, norm: Norm::Instance }
}

fn random_cloud(rng: &mut ChaCha8Rng, p: usize) -> PointCloud {
    let xyz = (0..p).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let attrs = (0..p).map(|_| rng.random()).collect();
    PointCloud::new(xyz, attrs, 1).expect("cloud")
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageGrid {
    ImageGrid::new(1, h, w, (0..h * w).map(|_| rng.random()).collect()).expect("image")
}

fn store_from(paths: &[String], ts: &[Tensor]) -> ParamStore {
    let mut s = ParamStore::new();
    for (p, t) in paths.iter().zip(ts) {
        s.insert_tensor(p.clone(), t.clone());
    }
    s
}

fn encoder_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for (name, asfp) in [("point_encoder_asfp", true), ("point_encoder_fp", false)] {
        let mut ps = ParamStore::new();
        let net = PointNet::new(&mut ps, rng, "pc", micro_point_config(asfp, 4))?;
        let pc = random_cloud(rng, 16);
        let paths: Vec<String> = ps.paths().cloned().collect();
        let w = readout(rng, &[16, 4]);
        cases.push(Case {
            name,
            tol: TOL_ENCODER,
            inputs: ps.iter().map(|(_, t)| t.clone()).collect(),
            f: Box::new(move |ts| weighted(net.forward(&store_from(&paths, ts), &pc)?, &w)),
            max_coords: None,
        });
    }

    let mut ps = ParamStore::new();
    let unet = UNet::new(&mut ps, rng, "img", micro_image_config(4))?;
    let img = random_image(rng, 8, 8);
    let paths: Vec<String> = ps.paths().cloned().collect();
    let w = readout(rng, &[4, 8, 8]);
    cases.push(Case {
        name: "image_encoder",
        tol: TOL_ENCODER,
        inputs: ps.iter().map(|(_, t)| t.clone()).collect(),
        f: Box::new(move |ts| weighted(unet.forward(&store_from(&paths, ts), &img)?, &w)),
        max_coords: Some(12),
    });

    // Both encoders and the loss on a 16-point micro scene: pixel k of the
    // diagonal corresponds to point k.
    let mut ps = ParamStore::new();
    let unet = UNet::new(&mut ps, rng, "img", micro_image_config(6))?;
    let pnet = PointNet::new(&mut ps, rng, "pc", micro_point_config(true, 6))?;
    let (img, img_aug) = (random_image(rng, 8, 8), random_image(rng, 8, 8));
    let (pc, pc_aug) = (random_cloud(rng, 16), random_cloud(rng, 16));
    let pixels: Vec<(usize, usize)> = (0..4).map(|k| (2 * k, 2 * k + 1)).collect();
    let points: Vec<usize> = vec![1, 5, 9, 13];
    let paths: Vec<String> = ps.paths().cloned().collect();
    let layout = TupleLayout::new(3, 3)?;
    let p = CircleParams::new(2.0, 0.25)?;
    cases.push(Case {
        name: "dual_encoder_loss",
        tol: TOL_ENCODER,
        inputs: ps.iter().map(|(_, t)| t.clone()).collect(),
        f: Box::new(move |ts| {
            let s = store_from(&paths, ts);
            let batch = CorrespondenceBatch::new(
                sample_pixel_features(&unet.forward(&s, &img)?, &pixels)?,
                sample_pixel_features(&unet.forward(&s, &img_aug)?, &pixels)?,
                pnet.forward(&s, &pc)?.gather_rows(&points)?,
                pnet.forward(&s, &pc_aug)?.gather_rows(&points)?,
            )?;
            tuple_circle_loss(&batch, layout, p)
        }),
        max_coords: Some(12),
    });
    Ok(cases)
}

/// Names of every check, in report order.
pub fn check_names() -> Result<Vec<&'static str>> {
    Ok(all_cases(0)?.iter().map(|c| c.name).collect())
}

fn all_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = primitive_cases(&mut rng);
    cases.extend(loss_cases(&mut rng));
    cases.extend(encoder_cases(&mut rng)?);
    Ok(cases)
}

/// Identity forward whose backward halves the gradient.
fn corrupt(t: Tensor) -> Tensor {
    Tensor::from_op("corrupted", t.to_vec(), t.shape().to_vec(), vec![t], Box::new(|g, _, _| vec![Some(g.iter().map(|v| 0.5 * v).collect())]))
}

/// Run every check. `corrupt_check` names a check whose objective gets a
/// deliberately wrong backward, for testing the harness itself.
pub fn run_suite(seed: u64, corrupt_check: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for case in all_cases(seed)? {
        let broken = corrupt_check == Some(case.name);
        let f = &case.f;
        let objective = |x: &[Tensor]| -> Result<Tensor> {
            let y = f(x)?;
            Ok(if broken { corrupt(y) } else { y })
        };
        let mut opts = GradCheckOptions::new(STEP, case.tol);
        opts.max_coords = case.max_coords;
        let r = grad_check_with(objective, &case.inputs, opts)?;
        out.push(CheckResult {
            name: case.name,
            max_rel_err: r.max_rel_err(),
            tol: case.tol,
            checked: r.inputs.iter().map(|c| c.checked).sum(),
            passed: r.passed(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn every_check_passes_once() {
        let results = run_suite(0, None).unwrap();
        let names: HashSet<_> = results.iter().map(|r| r.name).collect();
        assert_eq!(names.len(), results.len());
        for r in &results {
            assert!(r.passed, "{r:?}");
            assert!(r.checked > 0, "{r:?}");
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let results = run_suite(0, Some("mul")).unwrap();
        let bad: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert_eq!(bad, vec!["mul"]);
    }
}
