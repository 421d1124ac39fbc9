use rand::Rng;

use super::config::ModelConfig;
use crate::autodiff::{Ctx, ParamStore, SharedMlp, Tensor};
use crate::error::{Error, Result};
use crate::pointops::{
    ball_query, farthest_point_sample, three_nn_weights, Grouping, PointNetBlock,
};
use crate::{par, Point3};

/// Height above the estimated floor (1st percentile of z, nearest rank).
pub fn height_feature(points: &[Point3]) -> Vec<f64> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut z: Vec<f64> = points.iter().map(|p| p[2]).collect();
    let rank = ((z.len() - 1) as f64 * 0.01).floor() as usize;
    let (_, floor, _) = z.select_nth_unstable_by(rank, f64::total_cmp);
    let floor = *floor;
    points.iter().map(|p| p[2] - floor).collect()
}

/// Seed points for a batch of scenes. Scene `b` owns feature rows
/// `b * per_scene .. (b + 1) * per_scene`.
#[derive(Debug, Clone)]
pub struct SeedBatch {
    pub positions: Vec<Vec<Point3>>,
    pub features: Tensor,
    pub per_scene: usize,
}

/// Two set-abstraction stages and one feature-propagation stage.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub sa1: PointNetBlock,
    pub sa2: PointNetBlock,
    pub fp: SharedMlp,
    num_seeds: usize,
    sa1_radius: f64,
    sa1_group: usize,
    sa2_centers: usize,
    sa2_radius: f64,
    sa2_group: usize,
}

struct ScenePlan {
    centers: Vec<Point3>,
    sa1: Grouping,
    sa2: Grouping,
    nn_idx: Vec<[usize; 3]>,
    nn_w: Vec<[f64; 3]>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let sa1 = PointNetBlock::new(store, rng, "backbone.sa1", 4, &[], &cfg.sa1_channels);
        let sa2 = PointNetBlock::new(
            store,
            rng,
            "backbone.sa2",
            3,
            &[cfg.sa1_channels[1]],
            &cfg.sa2_channels,
        );
        let fp_in = cfg.sa1_channels[1] + cfg.sa2_channels[1];
        let fp = SharedMlp::new(
            store,
            rng,
            "backbone.fp",
            &[fp_in, cfg.seed_channels, cfg.seed_channels],
            false,
        );
        Self {
            sa1,
            sa2,
            fp,
            num_seeds: cfg.num_seeds,
            sa1_radius: cfg.sa1_radius,
            sa1_group: cfg.sa1_group,
            sa2_centers: cfg.sa2_centers,
            sa2_radius: cfg.sa2_radius,
            sa2_group: cfg.sa2_group,
        }
    }

    fn plan(&self, cloud: &[Point3]) -> Result<ScenePlan> {
        if cloud.len() < self.num_seeds {
            return Err(Error::Input(format!(
                "cloud has {} points, at least {} required",
                cloud.len(),
                self.num_seeds
            )));
        }
        let heights = height_feature(cloud);
        let idx = farthest_point_sample(cloud, self.num_seeds)?;
        let centers: Vec<Point3> = idx.iter().map(|&i| cloud[i]).collect();
        let groups = ball_query(&centers, cloud, self.sa1_radius, self.sa1_group)?;
        let sa1 = Grouping::with_extra(&groups, &centers, cloud, self.sa1_radius, &heights, 1);

        let idx2 = farthest_point_sample(&centers, self.sa2_centers)?;
        let centers2: Vec<Point3> = idx2.iter().map(|&i| centers[i]).collect();
        let groups2 = ball_query(&centers2, &centers, self.sa2_radius, self.sa2_group)?;
        let sa2 = Grouping::new(&groups2, &centers2, &centers, self.sa2_radius);
        let (nn_idx, nn_w) = three_nn_weights(&centers, &centers2)?;
        Ok(ScenePlan {
            centers,
            sa1,
            sa2,
            nn_idx,
            nn_w,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, clouds: &[Vec<Point3>]) -> Result<SeedBatch> {
        if clouds.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let plans = par::try_map(clouds, |c| self.plan(c))?;
        let ns = self.num_seeds;
        let n2 = self.sa2_centers;

        let sa1_grouping =
            Grouping::concat(&plans.iter().map(|p| (p.sa1.clone(), 0)).collect::<Vec<_>>());
        let f1 = self.sa1.forward(ctx, &sa1_grouping, &[])?;
        let sa2_grouping = Grouping::concat(
            &plans
                .iter()
                .enumerate()
                .map(|(b, p)| (p.sa2.clone(), b * ns))
                .collect::<Vec<_>>(),
        );
        let f2 = self.sa2.forward(ctx, &sa2_grouping, &[f1])?;

        let mut nn_idx = Vec::with_capacity(plans.len() * ns);
        let mut nn_w = Vec::with_capacity(plans.len() * ns);
        for (b, p) in plans.iter().enumerate() {
            nn_idx.extend(p.nn_idx.iter().map(|t| t.map(|i| i + b * n2)));
            nn_w.extend_from_slice(&p.nn_w);
        }
        let up = ctx.g.interp_rows(f2, &nn_idx, &nn_w)?;
        let cat = ctx.g.concat_cols(&[up, f1])?;
        let features = self.fp.forward(ctx, cat)?;
        Ok(SeedBatch {
            positions: plans.into_iter().map(|p| p.centers).collect(),
            features,
            per_scene: ns,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            num_points: 64,
            num_seeds: 16,
            seed_channels: 8,
            sa1_channels: [4, 6],
            sa2_centers: 4,
            sa2_channels: [6, 8],
            num_clusters: 4,
            ..ModelConfig::default()
        }
    }

    fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn height_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = cloud(&mut rng, 300);
        let up: Vec<Point3> = pts.iter().map(|p| [p[0], p[1], p[2] + 2.0]).collect();
        for (a, b) in height_feature(&pts).iter().zip(height_feature(&up)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_floor_heights_equal_z() {
        let mut pts: Vec<Point3> = (0..200).map(|i| [i as f64 * 0.01, 0.0, 0.0]).collect();
        pts.push([0.0, 0.0, 1.5]);
        let h = height_feature(&pts);
        assert_eq!(h[200], 1.5);
        assert!(h[..200].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn seed_shapes_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut rng, &cfg);
        let clouds = vec![cloud(&mut rng, 64), cloud(&mut rng, 64)];
        let mut ctx = Ctx::new(&store, Mode::Train);
        let seeds = bb.forward(&mut ctx, &clouds).unwrap();
        assert_eq!(ctx.g.shape(seeds.features), &[32, 8]);
        assert_eq!(seeds.positions[1].len(), 16);
        let mut ctx = Ctx::new(&store, Mode::Train);
        assert!(matches!(
            bb.forward(&mut ctx, &[cloud(&mut rng, 10)]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn exactly_num_seeds_points_are_all_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut rng, &cfg);
        let pts = cloud(&mut rng, 16);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let seeds = bb.forward(&mut ctx, std::slice::from_ref(&pts)).unwrap();
        let mut got = seeds.positions[0].clone();
        let mut want = pts.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn zero_weights_give_zero_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut rng, &cfg);
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            if store.entry(id).name.contains("weight") {
                store.values_mut(id).fill(0.0);
            }
        }
        let pts = cloud(&mut rng, 64);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let seeds = bb.forward(&mut ctx, &[pts]).unwrap();
        assert!(ctx.g.value(seeds.features).iter().all(|v| *v == 0.0));
    }
}
