use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::detector::{fit_cloud, Detector, LossBreakdown};
use crate::autodiff::{apply_bn_updates, Ctx, Mode, OptimizerState};
use crate::boxgeom::BoundingBox;
use crate::data::{augment, scene_seed, AugmentParams, ClassVocab, Scene};
use crate::error::{Error, Result};
use crate::{par, Point3};

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Line-delimited JSON metrics, one record per step.
    pub metrics_path: Option<PathBuf>,
    /// Directory for `step_<n>.brn` periodic checkpoints and `final.brn`.
    pub checkpoint_dir: Option<PathBuf>,
    pub vocab: Option<ClassVocab>,
    pub on_step: Option<&'a (dyn Fn(&MetricsRecord) + Sync)>,
}

pub struct TrainOutcome {
    pub detector: Detector,
    pub optimizer: OptimizerState,
    pub history: Vec<MetricsRecord>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.loss.total)
    }
}

fn prepare_batch(
    scenes: &[Scene],
    batch: &[usize],
    cfg: &TrainConfig,
    step: u64,
    num_points: usize,
) -> Result<(Vec<Vec<Point3>>, Vec<Vec<BoundingBox>>)> {
    let prepared = par::try_map(batch, |&i| -> Result<_> {
        let seed = scene_seed(cfg.seed ^ step.wrapping_mul(0x2545_F491_4F6C_DD1D), i);
        let scene = if cfg.augment {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment(&scenes[i], &AugmentParams::sample(&mut rng))
        } else {
            scenes[i].clone()
        };
        let cloud = fit_cloud(&scene.points, num_points, seed)?;
        Ok((cloud, scene.boxes))
    })?;
    Ok(prepared.into_iter().unzip())
}

/// Minibatch Adam with a cosine schedule over `cfg.total_steps(scenes.len())` steps.
pub fn train(
    mut detector: Detector,
    scenes: &[Scene],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let total = cfg.total_steps(scenes.len());
    let mut optimizer = OptimizerState::new(&detector.store, cfg.base_lr, total);
    let mut metrics = match &opts.metrics_path {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => None,
    };
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let vocab = opts.vocab.clone().unwrap_or_else(|| {
        ClassVocab(
            (0..detector.config.num_classes)
                .map(|i| format!("class{i}"))
                .collect(),
        )
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut history = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    let mut epoch = 0usize;
    while step < total {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let (clouds, gt) = prepare_batch(scenes, batch, cfg, step, detector.config.num_points)?;
            let (grads, bn, loss) = {
                let mut ctx = Ctx::new(&detector.store, Mode::Train);
                let fwd = detector.forward(&mut ctx, &clouds)?;
                let (l, breakdown) = detector.loss(&mut ctx, &fwd, &gt, &cfg.loss_weights)?;
                if let Some((term, _)) = breakdown.terms().iter().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        term: term.to_string(),
                        step,
                    });
                }
                let grads = ctx.g.backward(l)?.param_grads(&ctx.g);
                (grads, ctx.take_bn_updates(), breakdown)
            };
            let lr = optimizer.adam_step(&mut detector.store, &grads)?;
            apply_bn_updates(&mut detector.store, &bn);
            let rec = MetricsRecord {
                step,
                epoch,
                lr,
                loss,
            };
            if let Some(w) = metrics.as_mut() {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(w, "{line}")
                    .map_err(|e| Error::io(opts.metrics_path.as_ref().unwrap(), e))?;
            }
            if let Some(cb) = opts.on_step {
                cb(&rec);
            }
            history.push(rec);
            step += 1;
            if let Some(dir) = &opts.checkpoint_dir {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                    detector
                        .to_checkpoint(step, Some(optimizer.clone()), &vocab)
                        .save(&dir.join(format!("step_{step}.brn")))?;
                }
            }
        }
        epoch += 1;
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()
            .map_err(|e| Error::io(opts.metrics_path.as_ref().unwrap(), e))?;
    }
    if let Some(dir) = &opts.checkpoint_dir {
        detector
            .to_checkpoint(step, Some(optimizer.clone()), &vocab)
            .save(&dir.join("final.brn"))?;
    }
    Ok(TrainOutcome {
        detector,
        optimizer,
        history,
    })
}
