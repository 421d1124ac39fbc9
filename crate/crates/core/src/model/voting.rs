use rand::Rng;

use super::backbone::SeedBatch;
use super::config::ModelConfig;
use crate::autodiff::{Ctx, ParamStore, SharedMlp, Tensor};
use crate::boxgeom::BoundingBox;
use crate::error::Result;
use crate::pointops::{
    ball_query, dist2, farthest_point_sample, Grouping, NeighborGroup, PointNetBlock,
};
use crate::{par, Point3};

/// Cluster centers within this distance of a ground-truth center are positives.
pub const POSITIVE_RADIUS: f64 = 0.3;
/// Cluster centers farther than this from every ground-truth center are negatives.
pub const NEGATIVE_RADIUS: f64 = 0.6;
/// Seeds sampled from a face sit on the box boundary (plus noise); this much
/// slack keeps them inside for the vote target.
pub const VOTE_BOX_MARGIN: f64 = 0.05;

/// Per-seed offset and feature residual.
#[derive(Debug, Clone)]
pub struct VoteHead {
    pub mlp: SharedMlp,
}

#[derive(Debug, Clone)]
pub struct VoteBatch {
    pub positions: Vec<Vec<Point3>>,
    /// `[B·N_seed, 3]`
    pub offsets: Tensor,
    /// `[B·N_seed, C_seed]`
    pub features: Tensor,
}

impl VoteHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.seed_channels;
        Self {
            mlp: SharedMlp::new(store, rng, "vote", &[c, c, 3 + c], true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, seeds: &SeedBatch) -> Result<VoteBatch> {
        let out = self.mlp.forward(ctx, seeds.features)?;
        let c = self.mlp.cout();
        let offsets = ctx.g.slice_cols(out, 0, 3)?;
        let residual = ctx.g.slice_cols(out, 3, c)?;
        let features = ctx.g.add(seeds.features, residual)?;
        let off = ctx.g.value(offsets);
        let positions = seeds
            .positions
            .iter()
            .enumerate()
            .map(|(b, scene)| {
                scene
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let r = (b * seeds.per_scene + i) * 3;
                        [p[0] + off[r], p[1] + off[r + 1], p[2] + off[r + 2]]
                    })
                    .collect()
            })
            .collect();
        Ok(VoteBatch {
            positions,
            offsets,
            features,
        })
    }
}

/// Vote clusters of a batch: `M` per scene, scene `b` owning rows `b·M .. (b+1)·M`.
#[derive(Debug, Clone)]
pub struct ClusterBatch {
    pub centers: Vec<Vec<Point3>>,
    pub groups: Vec<Vec<NeighborGroup>>,
    /// `[B·M, C_cluster]`
    pub features: Tensor,
    pub per_scene: usize,
}

/// Groups votes around FPS-selected vote centers and pools their features.
#[derive(Debug, Clone)]
pub struct ClusterModule {
    pub block: PointNetBlock,
    pub num_clusters: usize,
    pub radius: f64,
    pub group: usize,
    /// Also feed each member's source seed feature to the block.
    pub with_seed_features: bool,
}

impl ClusterModule {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &ModelConfig,
        with_seed_features: bool,
    ) -> Self {
        let c = cfg.seed_channels;
        let feats: Vec<usize> = if with_seed_features {
            vec![c, c]
        } else {
            vec![c]
        };
        let sizes = [cfg.cluster_channels, cfg.cluster_channels];
        Self {
            block: PointNetBlock::new(store, rng, "cluster", 6, &feats, &sizes),
            num_clusters: cfg.num_clusters,
            radius: cfg.cluster_radius,
            group: cfg.cluster_group,
            with_seed_features,
        }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        votes: &VoteBatch,
        seeds: &SeedBatch,
    ) -> Result<ClusterBatch> {
        let scenes: Vec<_> = votes.positions.iter().zip(&seeds.positions).collect();
        let plans = par::try_map(&scenes, |&(pos, seed_pos)| -> Result<_> {
            let idx = farthest_point_sample(pos, self.num_clusters)?;
            let centers: Vec<Point3> = idx.iter().map(|&i| pos[i]).collect();
            let groups = ball_query(&centers, pos, self.radius, self.group)?;
            // each member also sees where its seed sits relative to its vote
            let back: Vec<f64> = seed_pos
                .iter()
                .zip(pos)
                .flat_map(|(s, v)| (0..3).map(move |k| (s[k] - v[k]) / self.radius))
                .collect();
            let grouping = Grouping::with_extra(&groups, &centers, pos, self.radius, &back, 3);
            Ok((centers, groups, grouping))
        })?;
        let grouping = Grouping::concat(
            &plans
                .iter()
                .enumerate()
                .map(|(b, p)| (p.2.clone(), b * seeds.per_scene))
                .collect::<Vec<_>>(),
        );
        let sources: Vec<Tensor> = if self.with_seed_features {
            vec![votes.features, seeds.features]
        } else {
            vec![votes.features]
        };
        let features = self.block.forward(ctx, &grouping, &sources)?;
        let (centers, groups) = plans.into_iter().map(|p| (p.0, p.1)).unzip();
        Ok(ClusterBatch {
            centers,
            groups,
            features,
            per_scene: self.num_clusters,
        })
    }
}

/// Regression target (GT center − seed) per seed lying inside a box, else `None`.
/// A seed inside several boxes takes the nearest center.
pub fn vote_targets(seeds: &[Point3], gt: &[BoundingBox]) -> Vec<Option<Point3>> {
    seeds
        .iter()
        .map(|s| {
            gt.iter()
                .filter(|b| b.contains(s, VOTE_BOX_MARGIN))
                .min_by(|a, b| dist2(&a.center, s).total_cmp(&dist2(&b.center, s)))
                .map(|b| [b.center[0] - s[0], b.center[1] - s[1], b.center[2] - s[2]])
        })
        .collect()
}

/// Smooth-L1 between vote offsets and targets, summed over coordinates and
/// averaged over seeds inside a ground-truth box (0 when there are none).
pub fn vote_loss(
    ctx: &mut Ctx,
    votes: &VoteBatch,
    seeds: &SeedBatch,
    gt: &[Vec<BoundingBox>],
) -> Result<Tensor> {
    let mut target = Vec::new();
    let mut mask = Vec::new();
    for (pos, boxes) in seeds.positions.iter().zip(gt) {
        for t in vote_targets(pos, boxes) {
            target.extend(t.unwrap_or([0.0; 3]));
            mask.push(t.is_some());
        }
    }
    let n_pos = mask.iter().filter(|m| **m).count();
    let w = if n_pos > 0 { 1.0 / n_pos as f64 } else { 0.0 };
    let weights: Vec<f64> = mask
        .iter()
        .flat_map(|&m| [if m { w } else { 0.0 }; 3])
        .collect();
    let err = ctx.g.smooth_l1(votes.offsets, &target, 1.0)?;
    ctx.g.weighted_sum(err, &weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objectness {
    /// Index of the nearest ground-truth box.
    Positive(usize),
    Negative,
    Ignored,
}

pub fn assign_objectness(centers: &[Point3], gt_centers: &[Point3]) -> Vec<Objectness> {
    centers
        .iter()
        .map(|c| {
            let nearest = gt_centers
                .iter()
                .enumerate()
                .map(|(i, g)| (i, dist2(c, g).sqrt()))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match nearest {
                Some((i, d)) if d <= POSITIVE_RADIUS => Objectness::Positive(i),
                Some((_, d)) if d <= NEGATIVE_RADIUS => Objectness::Ignored,
                _ => Objectness::Negative,
            }
        })
        .collect()
}
