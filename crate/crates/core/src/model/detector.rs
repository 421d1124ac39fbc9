use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, SeedBatch};
use super::config::{EvalConfig, HeadVariant, ModelConfig};
use super::heads::{
    proposal_targets, refine_loss, rep_loss, sample_rep_points, BaselineHead, BoxRegression,
    ProposalTarget, RefineHead, RevisitModule, RpgHead,
};
use super::voting::{
    assign_objectness, vote_loss, ClusterBatch, ClusterModule, Objectness, VoteBatch, VoteHead,
};
use crate::autodiff::{
    softmax_row, Checkpoint, Ctx, LossWeights, Mode, OptimizerState, ParamStore, Tensor,
};
use crate::boxgeom::{box_from_offsets, nms3d, BoundingBox, OffsetVector, MIN_OFFSET};
use crate::data::ClassVocab;
use crate::error::{Error, Result};
use crate::{par, Point3};

#[derive(Debug, Clone)]
enum Heads {
    Brnet {
        rpg: RpgHead,
        revisit: RevisitModule,
        refine: RefineHead,
    },
    Baseline(BaselineHead),
}

/// The detector: parameters plus the module wiring selected by the head variant.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    vote: VoteHead,
    cluster: ClusterModule,
    heads: Heads,
}

/// Graph handles and geometry of one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub seeds: SeedBatch,
    pub votes: VoteBatch,
    pub clusters: ClusterBatch,
    /// `[R, 2]`
    pub objectness: Tensor,
    /// `[R, N_C]`
    pub semantic: Tensor,
    pub regression: BoxRegression,
    /// (Δx `[R, 6]`, Δθ `[R, 1]`) when refinement is active.
    pub refinement: Option<(Tensor, Tensor)>,
    /// Per scene, `K` points per proposal generated from the initial boxes.
    pub rep_points: Vec<Vec<Point3>>,
}

/// A decoded proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub center: Point3,
    pub offsets: [f64; 6],
    pub heading: f64,
    pub offset_delta: [f64; 6],
    pub heading_delta: f64,
    /// Positive-class objectness probability.
    pub objectness: f64,
    pub class_probs: Vec<f64>,
    /// Final box with the arg-max label and the confidence as score.
    pub bbox: BoundingBox,
}

impl Proposal {
    pub fn final_offsets(&self) -> [f64; 6] {
        std::array::from_fn(|k| (self.offsets[k] + self.offset_delta[k]).max(MIN_OFFSET))
    }

    pub fn final_heading(&self) -> f64 {
        self.heading + self.heading_delta
    }

    pub fn confidence(&self) -> f64 {
        self.bbox.score.unwrap_or(0.0)
    }
}

/// Raw (unweighted) loss terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vote: f64,
    pub objectness: f64,
    pub semantic: f64,
    pub rep: f64,
    pub refine: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("vote", self.vote),
            ("objectness", self.objectness),
            ("semantic", self.semantic),
            ("rep", self.rep),
            ("refine", self.refine),
            ("total", self.total),
        ]
    }

    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.vote
            + w.obj_cls * self.objectness
            + w.sem_cls * self.semantic
            + w.rep * self.rep
            + w.refine * self.refine
    }
}

/// Checkpoint metadata: enough to rebuild the network and label its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub classes: Vec<String>,
}

/// Takes exactly `n` points: all of them in order when the cloud has `n`,
/// otherwise a subset drawn with `seed`.
pub fn fit_cloud(points: &[Point3], n: usize, seed: u64) -> Result<Vec<Point3>> {
    if points.len() < n {
        return Err(Error::Input(format!(
            "cloud has {} points, the model needs {n}",
            points.len()
        )));
    }
    if points.len() == n {
        return Ok(points.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, points.len(), n).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| points[i]).collect())
}

impl Detector {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &mut rng, &config);
        let vote = VoteHead::new(&mut store, &mut rng, &config);
        let cluster = ClusterModule::new(
            &mut store,
            &mut rng,
            &config,
            config.variant == HeadVariant::SeedPtsBaseline,
        );
        let heads = if config.variant.uses_rep_points() {
            Heads::Brnet {
                rpg: RpgHead::new(&mut store, &mut rng, &config)?,
                revisit: RevisitModule::new(&mut store, &mut rng, &config),
                refine: RefineHead::new(&mut store, &mut rng, &config),
            }
        } else {
            Heads::Baseline(BaselineHead::new(&mut store, &mut rng, &config)?)
        };
        Ok(Self {
            config,
            store,
            backbone,
            vote,
            cluster,
            heads,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn vote_head(&self) -> &VoteHead {
        &self.vote
    }

    pub fn rpg_head(&self) -> Option<&RpgHead> {
        match &self.heads {
            Heads::Brnet { rpg, .. } => Some(rpg),
            Heads::Baseline(_) => None,
        }
    }

    pub fn revisit_module(&self) -> Option<&RevisitModule> {
        match &self.heads {
            Heads::Brnet { revisit, .. } => Some(revisit),
            Heads::Baseline(_) => None,
        }
    }

    pub fn refine_head(&self) -> Option<&RefineHead> {
        match &self.heads {
            Heads::Brnet { refine, .. } => Some(refine),
            Heads::Baseline(_) => None,
        }
    }

    fn codec(&self) -> crate::boxgeom::AngleBinCodec {
        match &self.heads {
            Heads::Brnet { rpg, .. } => rpg.codec,
            Heads::Baseline(h) => h.codec,
        }
    }

    /// Forward pass over clouds of exactly `num_points` points each.
    pub fn forward(&self, ctx: &mut Ctx, clouds: &[Vec<Point3>]) -> Result<BatchForward> {
        if let Some(c) = clouds.iter().find(|c| c.len() != self.config.num_points) {
            return Err(Error::Input(format!(
                "cloud has {} points, the model expects {}",
                c.len(),
                self.config.num_points
            )));
        }
        let seeds = self.backbone.forward(ctx, clouds)?;
        let votes = self.vote.forward(ctx, &seeds)?;
        let clusters = self.cluster.forward(ctx, &votes, &seeds)?;
        match &self.heads {
            Heads::Brnet {
                rpg,
                revisit,
                refine,
            } => {
                let regression = rpg.forward(ctx, clusters.features)?;
                let rows = regression.offset_rows(ctx);
                let m = clusters.per_scene;
                let strategy = self.config.strategy;
                let rep_points: Vec<Vec<Point3>> = par::map_range(clusters.centers.len(), |b| {
                    clusters.centers[b]
                        .iter()
                        .enumerate()
                        .flat_map(|(i, c)| {
                            let r = b * m + i;
                            sample_rep_points(c, &rows[r], regression.headings[r], strategy)
                        })
                        .collect()
                });
                let rev = revisit.forward(ctx, &rep_points, &seeds)?;
                let fused = ctx.g.concat_cols(&[rev.fused, clusters.features])?;
                let out = refine.forward(ctx, fused)?;
                let refinement = (self.config.variant == HeadVariant::Full)
                    .then_some((out.offset_delta, out.heading_delta));
                Ok(BatchForward {
                    seeds,
                    votes,
                    clusters,
                    objectness: out.objectness,
                    semantic: out.semantic,
                    regression,
                    refinement,
                    rep_points,
                })
            }
            Heads::Baseline(head) => {
                let (objectness, regression, semantic) = head.forward(ctx, clusters.features)?;
                Ok(BatchForward {
                    seeds,
                    votes,
                    clusters,
                    objectness,
                    semantic,
                    regression,
                    refinement: None,
                    rep_points: Vec::new(),
                })
            }
        }
    }

    /// Decode every proposal (M per scene, before thresholding and NMS).
    pub fn proposals(&self, ctx: &Ctx, fwd: &BatchForward) -> Vec<Vec<Proposal>> {
        let g = &ctx.g;
        let offsets = fwd.regression.offset_rows(ctx);
        let obj = g.value(fwd.objectness);
        let sem = g.value(fwd.semantic);
        let nc = self.config.num_classes;
        let (dx, dth) = match fwd.refinement {
            Some((dx, dth)) => (Some(g.value(dx)), Some(g.value(dth))),
            None => (None, None),
        };
        let m = fwd.clusters.per_scene;
        fwd.clusters
            .centers
            .iter()
            .enumerate()
            .map(|(b, centers)| {
                centers
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        let r = b * m + i;
                        let (po, _) = softmax_row(&obj[2 * r..2 * r + 2]);
                        let (ps, _) = softmax_row(&sem[nc * r..nc * (r + 1)]);
                        let mut label = 0;
                        for k in 1..nc {
                            if ps[k] > ps[label] {
                                label = k;
                            }
                        }
                        let offset_delta: [f64; 6] = match dx {
                            Some(v) => v[6 * r..6 * r + 6].try_into().unwrap(),
                            None => [0.0; 6],
                        };
                        let mut p = Proposal {
                            center: *c,
                            offsets: offsets[r],
                            heading: fwd.regression.headings[r],
                            offset_delta,
                            heading_delta: dth.map_or(0.0, |v| v[r]),
                            objectness: po[1],
                            class_probs: ps.clone(),
                            bbox: BoundingBox::new([0.0; 3], [1.0; 3], 0.0),
                        };
                        let off = OffsetVector {
                            distances: p.final_offsets(),
                            heading: p.final_heading(),
                        };
                        let mut bbox = box_from_offsets(c, &off).with_label(label);
                        bbox.score = Some(po[1] * ps[label]);
                        p.bbox = bbox;
                        p
                    })
                    .collect()
            })
            .collect()
    }

    /// Targets for every proposal of the batch, scene-major.
    pub fn targets(&self, fwd: &BatchForward, gt: &[Vec<BoundingBox>]) -> Vec<ProposalTarget> {
        let codec = self.codec();
        let per_scene = par::map_range(fwd.clusters.centers.len(), |b| {
            let centers = &fwd.clusters.centers[b];
            let gt_centers: Vec<Point3> = gt[b].iter().map(|g| g.center).collect();
            let assign = assign_objectness(centers, &gt_centers);
            proposal_targets(centers, &assign, &gt[b], &codec)
        });
        per_scene.into_iter().flatten().collect()
    }

    /// Weighted total loss (a graph scalar) and its breakdown.
    pub fn loss(
        &self,
        ctx: &mut Ctx,
        fwd: &BatchForward,
        gt: &[Vec<BoundingBox>],
        weights: &LossWeights,
    ) -> Result<(Tensor, LossBreakdown)> {
        if gt.len() != fwd.clusters.centers.len() {
            return Err(Error::Input(format!(
                "{} ground-truth scenes for a batch of {}",
                gt.len(),
                fwd.clusters.centers.len()
            )));
        }
        let targets = self.targets(fwd, gt);
        let l_vote = vote_loss(ctx, &fwd.votes, &fwd.seeds, gt)?;

        let included = targets
            .iter()
            .filter(|t| t.assignment != Objectness::Ignored)
            .count();
        let obj_labels: Vec<usize> = targets.iter().map(|t| t.is_positive() as usize).collect();
        let obj_w: Vec<f64> = targets
            .iter()
            .map(|t| {
                if t.assignment == Objectness::Ignored {
                    0.0
                } else {
                    1.0 / included as f64
                }
            })
            .collect();
        let ce = ctx.g.softmax_cross_entropy(fwd.objectness, &obj_labels)?;
        let l_obj = ctx.g.weighted_sum(ce, &obj_w)?;

        let n_pos = targets.iter().filter(|t| t.is_positive()).count();
        let sem_labels: Vec<usize> = targets.iter().map(|t| t.label).collect();
        let sem_w: Vec<f64> = targets
            .iter()
            .map(|t| {
                if t.is_positive() {
                    1.0 / n_pos as f64
                } else {
                    0.0
                }
            })
            .collect();
        let ce = ctx.g.softmax_cross_entropy(fwd.semantic, &sem_labels)?;
        let l_sem = ctx.g.weighted_sum(ce, &sem_w)?;

        let l_rep = rep_loss(ctx, &fwd.regression, &targets, weights.offset)?;
        let l_ref = match fwd.refinement {
            Some((dx, dth)) => refine_loss(
                ctx,
                fwd.regression.offsets,
                dx,
                &fwd.regression.headings,
                dth,
                &targets,
                weights.offset,
            )?,
            None => ctx.g.constant(&[1], vec![0.0])?,
        };

        let mut total = l_vote;
        for (t, w) in [
            (l_obj, weights.obj_cls),
            (l_sem, weights.sem_cls),
            (l_rep, weights.rep),
            (l_ref, weights.refine),
        ] {
            let s = ctx.g.scale(t, w);
            total = ctx.g.add(total, s)?;
        }
        let breakdown = LossBreakdown {
            vote: ctx.g.scalar(l_vote),
            objectness: ctx.g.scalar(l_obj),
            semantic: ctx.g.scalar(l_sem),
            rep: ctx.g.scalar(l_rep),
            refine: ctx.g.scalar(l_ref),
            total: ctx.g.scalar(total),
        };
        Ok((total, breakdown))
    }

    /// Proposals for one cloud in eval mode (resampled to `num_points` if larger).
    pub fn propose(&self, cloud: &[Point3]) -> Result<Vec<Proposal>> {
        let cloud = fit_cloud(cloud, self.config.num_points, 0)?;
        let mut ctx = Ctx::new(&self.store, Mode::Eval);
        let fwd = self.forward(&mut ctx, &[cloud])?;
        Ok(self.proposals(&ctx, &fwd).remove(0))
    }

    /// Thresholded, NMS-filtered detections for one cloud.
    pub fn detect(&self, cloud: &[Point3], eval: &EvalConfig) -> Result<Vec<BoundingBox>> {
        let boxes: Vec<BoundingBox> = self
            .propose(cloud)?
            .into_iter()
            .filter(|p| p.confidence() > eval.score_threshold)
            .map(|p| p.bbox)
            .collect();
        let scores: Vec<f64> = boxes.iter().map(|b| b.score.unwrap_or(0.0)).collect();
        let keep = nms3d(&boxes, &scores, eval.nms_iou)?;
        Ok(keep.into_iter().map(|i| boxes[i]).collect())
    }

    /// [`Detector::detect`] over many clouds in parallel.
    pub fn detect_many(
        &self,
        clouds: &[Vec<Point3>],
        eval: &EvalConfig,
    ) -> Result<Vec<Vec<BoundingBox>>> {
        par::try_map(clouds, |c| self.detect(c, eval))
    }

    pub fn to_checkpoint(
        &self,
        step: u64,
        optimizer: Option<OptimizerState>,
        vocab: &ClassVocab,
    ) -> Checkpoint {
        let meta = CheckpointMeta {
            model: self.config.clone(),
            classes: vocab.0.clone(),
        };
        Checkpoint {
            metadata: serde_json::to_string(&meta).expect("metadata serializes"),
            step,
            params: self.store.entries().to_vec(),
            optimizer,
        }
    }

    pub fn checkpoint_meta(ckpt: &Checkpoint) -> Result<CheckpointMeta> {
        serde_json::from_str(&ckpt.metadata)
            .map_err(|e| Error::Load(format!("bad checkpoint metadata: {e}")))
    }

    /// Rebuild from a checkpoint; with `expected`, the stored model config must match it.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        expected: Option<&ModelConfig>,
    ) -> Result<(Self, ClassVocab)> {
        let meta = Self::checkpoint_meta(ckpt)?;
        if let Some(want) = expected {
            if *want != meta.model {
                return Err(Error::Load(format!(
                    "checkpoint was trained with a different model config:\n  checkpoint: {:?}\n  requested:  {want:?}",
                    meta.model
                )));
            }
        }
        let mut det = Self::new(meta.model.clone(), 0)?;
        det.store.load_from(&ckpt.params)?;
        Ok((det, ClassVocab(meta.classes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_params;
    use crate::autodiff::ParamId;
    use crate::data::{generate_dataset, SyntheticSceneSpec};
    use crate::model::config::SamplingStrategy;

    pub(crate) fn tiny_config(variant: HeadVariant) -> ModelConfig {
        ModelConfig {
            num_points: 512,
            num_seeds: 64,
            seed_channels: 16,
            sa1_group: 8,
            sa1_channels: [8, 12],
            sa2_centers: 16,
            sa2_group: 8,
            sa2_channels: [12, 16],
            num_clusters: 8,
            cluster_group: 8,
            cluster_channels: 16,
            head_channels: 16,
            heading_bins: 4,
            revisit_group: 8,
            revisit_channels: [12, 8, 6],
            revisit_proj: 16,
            variant,
            ..ModelConfig::default()
        }
    }

    fn tiny_scenes(n: usize) -> Vec<crate::data::Scene> {
        let spec = SyntheticSceneSpec {
            num_points: 512,
            seed: 11,
            ..SyntheticSceneSpec::oriented()
        };
        generate_dataset(&spec, n).unwrap()
    }

    /// Small objects so that clusters at initialization already fall within
    /// the positive radius of a box center.
    fn compact_scenes(n: usize) -> Vec<crate::data::Scene> {
        let spec = SyntheticSceneSpec {
            num_points: 512,
            object_count: [4, 4],
            classes: ["a", "b", "c"]
                .iter()
                .map(|&name| crate::data::ClassSpec {
                    name: name.into(),
                    size_mean: [0.3, 0.3, 0.3],
                    size_spread: [0.02, 0.02, 0.02],
                    high_variance: false,
                    open_front: false,
                })
                .collect(),
            clutter_fraction: 0.0,
            floor_fraction: 0.1,
            seed: 5,
            ..SyntheticSceneSpec::oriented()
        };
        generate_dataset(&spec, n).unwrap()
    }

    fn batch(scenes: &[crate::data::Scene]) -> (Vec<Vec<Point3>>, Vec<Vec<BoundingBox>>) {
        scenes
            .iter()
            .map(|s| (s.points.clone(), s.boxes.clone()))
            .unzip()
    }

    fn compact_config(variant: HeadVariant) -> ModelConfig {
        ModelConfig {
            num_clusters: 24,
            ..tiny_config(variant)
        }
    }

    fn has_positive(det: &Detector, clouds: &[Vec<Point3>], gt: &[Vec<BoundingBox>]) -> bool {
        let mut ctx = Ctx::new(&det.store, Mode::Train);
        let fwd = det.forward(&mut ctx, clouds).unwrap();
        det.targets(&fwd, gt)
            .iter()
            .any(|t| matches!(t.assignment, Objectness::Positive(_)))
    }

    /// Parameters downstream of all grouping geometry must match central
    /// differences through the whole pipeline. Upstream parameters also move
    /// vote or representative-point positions, whose grouping is held constant.
    #[test]
    fn downstream_gradients_match_finite_differences() {
        let (clouds, gt) = batch(&compact_scenes(2));
        for variant in HeadVariant::ALL {
            let det = Detector::new(compact_config(variant), 3).unwrap();
            assert!(has_positive(&det, &clouds, &gt), "{variant}");
            let moves_geometry = |name: &str| {
                name.starts_with("backbone.")
                    || name.starts_with("vote.")
                    || (variant.uses_rep_points()
                        && (name.starts_with("cluster.") || name.starts_with("rpg.")))
            };
            let only: Vec<_> = (0..det.store.len())
                .map(ParamId::from_index)
                .filter(|&id| {
                    let e = det.store.entry(id);
                    e.trainable && !moves_geometry(&e.name)
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let report = check_params(&det.store, Mode::Train, 3, Some(&only), &mut rng, |ctx| {
                let fwd = det.forward(ctx, &clouds)?;
                Ok(det.loss(ctx, &fwd, &gt, &LossWeights::default())?.0)
            })
            .unwrap();
            assert!(report.checked > 40, "{variant}: {}", report.checked);
            assert!(report.max_rel_error < 1e-4, "{variant}: {report:?}");
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (clouds, gt) = batch(&compact_scenes(2));
        for variant in HeadVariant::ALL {
            let det = Detector::new(compact_config(variant), 3).unwrap();
            let mut ctx = Ctx::new(&det.store, Mode::Train);
            let fwd = det.forward(&mut ctx, &clouds).unwrap();
            let (l, _) = det
                .loss(&mut ctx, &fwd, &gt, &LossWeights::default())
                .unwrap();
            let grads = ctx.g.backward(l).unwrap().param_grads(&ctx.g);
            let trainable = det.store.entries().iter().filter(|e| e.trainable).count();
            assert_eq!(grads.len(), trainable, "{variant}");
            for (id, g) in &grads {
                let name = &det.store.entry(*id).name;
                // Biases ahead of batch norm cancel exactly.
                if name.ends_with(".bias")
                    && det
                        .store
                        .entries()
                        .iter()
                        .any(|e| e.name == name.replace(".bias", ".bn.gamma"))
                {
                    continue;
                }
                assert!(g.iter().any(|v| *v != 0.0), "{variant}: {name}");
            }
        }
    }

    #[test]
    fn proposals_satisfy_decode_identity() {
        let scenes = tiny_scenes(1);
        for strategy in SamplingStrategy::ALL {
            let cfg = ModelConfig {
                strategy,
                ..tiny_config(HeadVariant::Full)
            };
            let det = Detector::new(cfg, 1).unwrap();
            let props = det.propose(&scenes[0].points).unwrap();
            assert_eq!(props.len(), 8);
            for p in &props {
                let d = p.final_offsets();
                let pts = sample_rep_points(&p.center, &d, p.final_heading(), strategy);
                let b = crate::boxgeom::min_max_clip(&pts, &p.center, p.final_heading());
                for k in 0..3 {
                    assert!((b.center[k] - p.bbox.center[k]).abs() < 1e-9);
                    assert!((b.size[k] - p.bbox.size[k]).abs() < 1e-9);
                }
                let c = p.confidence();
                assert!((0.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let scenes = tiny_scenes(1);
        let det = Detector::new(tiny_config(HeadVariant::Full), 2).unwrap();
        assert_eq!(
            det.propose(&scenes[0].points).unwrap(),
            det.propose(&scenes[0].points).unwrap()
        );
    }

    #[test]
    fn zero_refine_head_keeps_generated_boxes() {
        let scenes = tiny_scenes(1);
        let mut det = Detector::new(tiny_config(HeadVariant::Full), 4).unwrap();
        let refine = det.refine_head().unwrap().mlp.clone();
        refine.zero_last(&mut det.store);
        for p in det.propose(&scenes[0].points).unwrap() {
            assert_eq!(p.offset_delta, [0.0; 6]);
            let init = box_from_offsets(
                &p.center,
                &OffsetVector {
                    distances: p.offsets,
                    heading: p.heading,
                },
            );
            assert_eq!(p.bbox.center, init.center);
            assert_eq!(p.bbox.size, init.size);
        }
    }

    #[test]
    fn loss_breakdown_adds_up() {
        let scenes = tiny_scenes(2);
        let clouds: Vec<_> = scenes.iter().map(|s| s.points.clone()).collect();
        let gt: Vec<_> = scenes.iter().map(|s| s.boxes.clone()).collect();
        let det = Detector::new(tiny_config(HeadVariant::Full), 5).unwrap();
        let w = LossWeights::default();
        let mut ctx = Ctx::new(&det.store, Mode::Train);
        let fwd = det.forward(&mut ctx, &clouds).unwrap();
        let (_, b) = det.loss(&mut ctx, &fwd, &gt, &w).unwrap();
        assert!((b.weighted_sum(&w) - b.total).abs() < 1e-12);
        let w2 = LossWeights { rep: 2.0, ..w };
        let (_, b2) = det.loss(&mut ctx, &fwd, &gt, &w2).unwrap();
        assert!((b2.total - b.total - b.rep).abs() < 1e-9);
        assert!(b.total.is_finite());
    }

    #[test]
    fn single_cluster_gives_at_most_one_detection() {
        let scenes = tiny_scenes(1);
        let cfg = ModelConfig {
            num_clusters: 1,
            ..tiny_config(HeadVariant::Full)
        };
        let det = Detector::new(cfg, 2).unwrap();
        let all = EvalConfig {
            score_threshold: 0.0,
            nms_iou: 1.0,
            ..EvalConfig::default()
        };
        assert!(det.detect(&scenes[0].points, &all).unwrap().len() <= 1);
    }

    #[test]
    fn offset_residual_moves_the_front_face() {
        let p = Proposal {
            center: [0.0; 3],
            offsets: [1.0; 6],
            heading: 0.0,
            offset_delta: [0.5, 0.0, 0.0, 0.0, 0.0, 0.0],
            heading_delta: 0.0,
            objectness: 1.0,
            class_probs: vec![1.0],
            bbox: BoundingBox::new([0.0; 3], [1.0; 3], 0.0),
        };
        let off = OffsetVector {
            distances: p.final_offsets(),
            heading: p.final_heading(),
        };
        let b = box_from_offsets(&p.center, &off);
        let want_c = [0.25, 0.0, 0.0];
        let want_s = [2.5, 2.0, 2.0];
        for k in 0..3 {
            assert!((b.center[k] - want_c[k]).abs() < 1e-12);
            assert!((b.size[k] - want_s[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_and_nms_behave() {
        let scenes = tiny_scenes(1);
        let det = Detector::new(tiny_config(HeadVariant::Full), 6).unwrap();
        let all = EvalConfig {
            score_threshold: 0.0,
            nms_iou: 1.0,
            ..EvalConfig::default()
        };
        assert_eq!(det.detect(&scenes[0].points, &all).unwrap().len(), 8);
        let none = EvalConfig {
            score_threshold: 1.0,
            ..EvalConfig::default()
        };
        assert!(det.detect(&scenes[0].points, &none).unwrap().is_empty());
        let mut last = usize::MAX;
        for t in [0.0, 0.05, 0.1, 0.2, 0.5] {
            let n = det
                .detect(
                    &scenes[0].points,
                    &EvalConfig {
                        score_threshold: t,
                        ..EvalConfig::default()
                    },
                )
                .unwrap()
                .len();
            assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let det = Detector::new(tiny_config(HeadVariant::Full), 7).unwrap();
        let vocab = ClassVocab(vec!["a".into(), "b".into(), "c".into()]);
        let ckpt = Checkpoint::from_bytes(&det.to_checkpoint(3, None, &vocab).to_bytes()).unwrap();
        let (back, v) = Detector::from_checkpoint(&ckpt, Some(&det.config)).unwrap();
        assert_eq!(v, vocab);
        assert_eq!(back.store.entries(), det.store.entries());
        let other = tiny_config(HeadVariant::CaRegBaseline);
        assert!(matches!(
            Detector::from_checkpoint(&ckpt, Some(&other)),
            Err(Error::Load(_))
        ));
    }

    #[test]
    fn undersized_cloud_is_an_input_error() {
        let det = Detector::new(tiny_config(HeadVariant::Full), 8).unwrap();
        assert!(matches!(det.propose(&[[0.0; 3]; 10]), Err(Error::Input(_))));
    }
}
