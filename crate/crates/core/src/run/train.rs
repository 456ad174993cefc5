use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ensure_dir, evaluate, Model, SceneSets, IMAGE_PREFIX, POINT_PREFIX};
use crate::config::RunConfig;
use crate::data::AugmentedPair;
use crate::error::{Error, Result};
use crate::losses::batch_loss;
use crate::tensor::{save_checkpoint, AdamW};

/// One row of `acc_curve.csv`. Accuracies and loss are validation means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub acc_i: f64,
    pub acc_p: f64,
    pub acc_c: f64,
    pub acc_s: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
    /// Steps skipped because too few correspondences survived augmentation.
    pub skipped: usize,
    pub best_step: usize,
    pub best_acc_s: f64,
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut s = String::from("step,acc_i,acc_p,acc_c,acc_s,loss\n");
    for c in curve {
        s.push_str(&format!("{},{},{},{},{},{}\n", c.step, c.acc_i, c.acc_p, c.acc_c, c.acc_s, c.loss));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Joint training of both encoders.
///
/// One epoch visits every training scene once in a seeded order, one
/// augmented pair and one batch of `optim.batch_n` correspondences per
/// step. The learning rate is `lr · decay^epoch`. Validation runs at step
/// 0, every `eval.every` steps and after the last step. With `out` set, the
/// resolved config, `acc_curve.csv`, `final.ckpt` and `best.ckpt` (highest
/// validation ACC_S, earliest on ties) are written there.
pub fn train(cfg: &RunConfig, scenes: &SceneSets, out: Option<&Path>, mut progress: impl FnMut(&CurvePoint)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let circle = cfg.circle()?;
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let path = dir.join("config.json");
        fs::write(&path, cfg.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
    }
    let mut model = Model::init(cfg)?;
    let mut opt = AdamW::new(cfg.optim.adamw());
    let schedule = cfg.optim.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed);

    let mut curve = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut record = |model: &Model, step: usize, curve: &mut Vec<CurvePoint>| -> Result<()> {
        let ev = evaluate(model, &scenes.val, cfg)?;
        let point = CurvePoint { step, acc_i: ev.acc_i, acc_p: ev.acc_p, acc_c: ev.acc_c, acc_s: ev.acc_s, loss: ev.loss };
        progress(&point);
        curve.push(point);
        if ev.acc_s > best.1 {
            best = (step, ev.acc_s);
            if let Some(dir) = out {
                save_checkpoint(&model.params, &dir.join("best.ckpt"))?;
            }
        }
        Ok(())
    };
    record(&model, 0, &mut curve)?;

    let max_steps = cfg.optim.max_steps.unwrap_or(usize::MAX);
    let mut step = 0;
    let mut skipped = 0;
    let mut last_norms = (0.0, 0.0);
    let mut order: Vec<usize> = (0..scenes.train.len()).collect();
    'epochs: for epoch in 0..cfg.optim.epochs {
        let lr = schedule.at_epoch(epoch);
        opt.set_lr(lr);
        order.shuffle(&mut rng);
        for &si in &order {
            if step >= max_steps {
                break 'epochs;
            }
            step += 1;
            let aug_seed: u64 = rng.random();
            let pick_seed: u64 = rng.random();
            let pair = AugmentedPair::new(scenes.train[si].clone(), aug_seed, &cfg.data.augment)?;
            let diagnose = |what: &str, (gi, gp): (f64, f64)| {
                Error::NonFinite(format!(
                    "{what} at step {step} (epoch {epoch}, scene {}): lr {lr}, grad norm image {gi}, grad norm point {gp}",
                    scenes.train[si].scene_id
                ))
            };
            let batch = match crate::data::make_batch(&pair, cfg.optim.batch_n, pick_seed, model.encoders()) {
                Ok((b, _)) => b,
                Err(Error::DegenerateBatch(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(Error::NonFinite(_)) => return Err(diagnose("non-finite features", last_norms)),
                Err(e) => return Err(e),
            };
            let loss = match batch_loss(&batch, cfg.loss.variant, layout, circle) {
                Err(Error::NonFinite(_)) => return Err(diagnose("non-finite features", last_norms)),
                other => other?,
            };
            let value = loss.item();
            loss.backward()?;
            last_norms = (model.params.grad_norm(IMAGE_PREFIX), model.params.grad_norm(POINT_PREFIX));
            if !value.is_finite() || !last_norms.0.is_finite() || !last_norms.1.is_finite() {
                return Err(diagnose(&format!("loss {value}"), last_norms));
            }
            opt.step(&mut model.params)?;
            if step % cfg.eval.every == 0 {
                record(&model, step, &mut curve)?;
            }
        }
    }
    if curve.last().is_none_or(|c| c.step != step) {
        record(&model, step, &mut curve)?;
    }
    if let Some(dir) = out {
        write_curve_csv(&dir.join("acc_curve.csv"), &curve)?;
        save_checkpoint(&model.params, &dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { model, curve, steps: step, skipped, best_step: best.0, best_acc_s: best.1 })
}
