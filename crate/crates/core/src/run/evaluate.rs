use std::path::{Path, PathBuf};

use super::{ensure_dir, Model};
use crate::config::RunConfig;
use crate::data::{make_batch, AugmentedPair, SceneSample};
use crate::error::{Error, Result};
use crate::eval::{
    acc_suite, histogram, mismatch_distances, positional_kmeans, spherical_kmeans, write_label_ppm, write_point_labels,
    ClusterResult, HistBin, MatchReport, Rows,
};
use crate::losses::batch_loss;

#[derive(Debug, Clone)]
pub struct SceneEval {
    pub scene_id: u64,
    pub report: MatchReport,
    pub loss: f64,
    /// Pixel distances of the mismatched shared-span cross-modal anchors.
    pub mismatch_px: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub acc_i: f64,
    pub acc_p: f64,
    pub acc_c: f64,
    pub acc_s: f64,
    pub loss: f64,
    pub scenes: Vec<SceneEval>,
}

impl EvalOutcome {
    pub fn mismatch_histogram(&self, edges: &[f64]) -> Result<Vec<HistBin>> {
        let all: Vec<f64> = self.scenes.iter().flat_map(|s| s.mismatch_px.iter().copied()).collect();
        histogram(&all, edges)
    }
}

const EVAL_SALT: u64 = 0xe7a1_0000_0000_0001;

/// Accuracy suite and loss on one fixed augmented batch per scene,
/// averaged over scenes. The augmentation and sampling depend only on the
/// scene seed, so repeated evaluations see the same batches.
pub fn evaluate(model: &Model, scenes: &[SceneSample], cfg: &RunConfig) -> Result<EvalOutcome> {
    if scenes.is_empty() {
        return Err(Error::invalid("evaluate", "no scenes"));
    }
    let layout = cfg.layout()?;
    let circle = cfg.circle()?;
    let mut per_scene = Vec::with_capacity(scenes.len());
    for s in scenes {
        let seed = s.seed ^ EVAL_SALT;
        let pair = AugmentedPair::new(s.clone(), seed, &cfg.data.augment)?;
        let (batch, rows) = make_batch(&pair, cfg.eval.batch_n, seed.rotate_left(17), model.encoders())?;
        let loss = batch_loss(&batch, cfg.loss.variant, layout, circle)?.item();
        let report = acc_suite(&batch, layout, cfg.eval.n_sample, seed.rotate_left(31))?;
        let pixels: Vec<_> = report.sampled.iter().map(|&k| rows[k].pixel).collect();
        let points: Vec<_> = report.sampled.iter().map(|&k| s.cloud.xyz[rows[k].point]).collect();
        let mismatch_px = mismatch_distances(&report.records_s, &pixels, &points, &s.camera)?;
        per_scene.push(SceneEval { scene_id: s.scene_id, report, loss, mismatch_px });
    }
    let n = per_scene.len() as f64;
    let mean = |f: &dyn Fn(&SceneEval) -> f64| per_scene.iter().map(f).sum::<f64>() / n;
    Ok(EvalOutcome {
        acc_i: mean(&|s| s.report.acc_i),
        acc_p: mean(&|s| s.report.acc_p),
        acc_c: mean(&|s| s.report.acc_c),
        acc_s: mean(&|s| s.report.acc_s),
        loss: mean(&|s| s.loss),
        scenes: per_scene,
    })
}

#[derive(Debug, Clone)]
pub struct VisualizeOutput {
    pub files: Vec<PathBuf>,
    pub image_full: ClusterResult,
    pub point_full: ClusterResult,
    /// Pixels first (row-major), then points; one centroid set for both.
    pub joint_shared: ClusterResult,
    pub positional: ClusterResult,
}

/// `[D, H, W]` feature map as `H·W` rows of width `D`.
fn pixel_rows(map: &[f64], d: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; hw * d];
    for c in 0..d {
        for p in 0..hw {
            out[p * d + c] = map[c * hw + p];
        }
    }
    out
}

/// Cluster label maps of one scene: full-feature clusters per modality,
/// joint shared-span clusters and the positional reference.
pub fn visualize(model: &Model, scene: &SceneSample, cfg: &RunConfig, out_dir: &Path) -> Result<VisualizeOutput> {
    ensure_dir(out_dir)?;
    let layout = cfg.layout()?;
    let d = layout.total();
    let (k, iters, seed) = (cfg.eval.k_clusters, cfg.eval.kmeans_iters, cfg.seed);
    let (h, w) = (scene.image.height, scene.image.width);
    let img = pixel_rows(model.unet.forward(&model.params, &scene.image)?.values(), d, h * w);
    let pts = model.pnet.forward(&model.params, &scene.cloud)?.to_vec();

    let image_full = spherical_kmeans(Rows::new(&img, d)?, k, iters, seed)?;
    let point_full = spherical_kmeans(Rows::new(&pts, d)?, k, iters, seed)?;
    let shared: Vec<f64> = img.chunks(d).chain(pts.chunks(d)).flat_map(|r| r[..layout.d_sh].to_vec()).collect();
    let joint_shared = spherical_kmeans(Rows::new(&shared, layout.d_sh)?, k, iters, seed)?;
    let positional = positional_kmeans(h, w, k, seed, None, iters)?;

    let ps = cfg.eval.palette_seed;
    let files = vec![
        out_dir.join("image_full.ppm"),
        out_dir.join("points_full.txt"),
        out_dir.join("image_shared.ppm"),
        out_dir.join("points_shared.txt"),
        out_dir.join("image_positional.ppm"),
    ];
    write_label_ppm(&files[0], &image_full.assignments, h, w, ps)?;
    write_point_labels(&files[1], &scene.cloud.xyz, &point_full.assignments)?;
    let (img_lab, pt_lab) = joint_shared.assignments.split_at(h * w);
    write_label_ppm(&files[2], img_lab, h, w, ps)?;
    write_point_labels(&files[3], &scene.cloud.xyz, pt_lab)?;
    write_label_ppm(&files[4], &positional.assignments, h, w, ps)?;
    Ok(VisualizeOutput { files, image_full, point_full, joint_shared, positional })
}
