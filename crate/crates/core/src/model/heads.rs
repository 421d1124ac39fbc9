use rand::Rng;

use super::backbone::SeedBatch;
use super::config::{ModelConfig, SamplingStrategy};
use super::voting::Objectness;
use crate::autodiff::{Ctx, Linear, ParamStore, SharedMlp, Tensor};
use crate::boxgeom::{offsets_from_box, rotate_z, wrap_angle, AngleBinCodec, BoundingBox};
use crate::error::{Error, Result};
use crate::pointops::{ball_query, Grouping, NeighborGroup, PointNetBlock};
use crate::{par, Point3};

/// Raw offset outputs are clamped to this range before `exp`.
pub const RAW_OFFSET_LIMIT: f64 = 5.0;
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Channel layout of the refinement head output.
pub const REFINE_OBJ: std::ops::Range<usize> = 0..2;
pub const REFINE_HEADING: usize = 2;
pub const REFINE_OFFSETS: std::ops::Range<usize> = 3..9;
pub const REFINE_SEM_START: usize = 9;

/// Positive face distances via `exp` of clamped raw outputs.
pub fn positive_offsets(ctx: &mut Ctx, raw: Tensor) -> Tensor {
    let c = ctx.g.clamp(raw, -RAW_OFFSET_LIMIT, RAW_OFFSET_LIMIT);
    ctx.g.exp(c)
}

/// Heading from the arg-max bin (lowest index on ties) and that bin's residual.
pub fn decode_headings(codec: &AngleBinCodec, logits: &[f64], residuals: &[f64]) -> Vec<f64> {
    let nh = codec.bins();
    logits
        .chunks(nh)
        .zip(residuals.chunks(nh))
        .map(|(l, r)| {
            let mut best = 0;
            for i in 1..nh {
                if l[i] > l[best] {
                    best = i;
                }
            }
            codec.decode(best, r[best])
        })
        .collect()
}

/// Box parameters regressed from cluster features: six face distances and a binned heading.
#[derive(Debug, Clone)]
pub struct BoxRegression {
    /// `[R, 6]`, strictly positive
    pub offsets: Tensor,
    /// `[R, NH]`
    pub bin_logits: Tensor,
    /// `[R, NH]`
    pub bin_residuals: Tensor,
    pub headings: Vec<f64>,
}

impl BoxRegression {
    /// Reads the `6 + 2·NH` channels starting at `start` of `out`.
    pub fn from_channels(
        ctx: &mut Ctx,
        out: Tensor,
        start: usize,
        codec: &AngleBinCodec,
    ) -> Result<Self> {
        let nh = codec.bins();
        let raw = ctx.g.slice_cols(out, start, start + 6)?;
        let offsets = positive_offsets(ctx, raw);
        let bin_logits = ctx.g.slice_cols(out, start + 6, start + 6 + nh)?;
        let bin_residuals = ctx.g.slice_cols(out, start + 6 + nh, start + 6 + 2 * nh)?;
        let headings = decode_headings(codec, ctx.g.value(bin_logits), ctx.g.value(bin_residuals));
        Ok(Self {
            offsets,
            bin_logits,
            bin_residuals,
            headings,
        })
    }

    pub fn offset_rows(&self, ctx: &Ctx) -> Vec<[f64; 6]> {
        ctx.g
            .value(self.offsets)
            .chunks(6)
            .map(|c| c.try_into().unwrap())
            .collect()
    }
}

/// Representative point generation head: `C → h → h → 6 + 2·NH`.
#[derive(Debug, Clone)]
pub struct RpgHead {
    pub mlp: SharedMlp,
    pub codec: AngleBinCodec,
}

impl RpgHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        let codec = AngleBinCodec::new(cfg.heading_bins)?;
        let h = cfg.head_channels;
        let sizes = [cfg.cluster_channels, h, h, 6 + 2 * cfg.heading_bins];
        Ok(Self {
            mlp: SharedMlp::new(store, rng, "rpg", &sizes, true),
            codec,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, cluster_features: Tensor) -> Result<BoxRegression> {
        let out = self.mlp.forward(ctx, cluster_features)?;
        BoxRegression::from_channels(ctx, out, 0, &self.codec)
    }
}

/// Representative points around `center` for face distances `d` and heading `theta`.
///
/// Rays: for each direction (front, back, left, right, up, down) the points at
/// fractions `1/n, 2/n, .., 1` of that face distance. Grid: an `m³` lattice over the
/// spanned box in lexicographic (x′, y′, z′) order, corners included.
pub fn sample_rep_points(
    center: &Point3,
    d: &[f64; 6],
    theta: f64,
    strategy: SamplingStrategy,
) -> Vec<Point3> {
    let to_world = |local: Point3| {
        let r = rotate_z(local, theta);
        [center[0] + r[0], center[1] + r[1], center[2] + r[2]]
    };
    match strategy {
        SamplingStrategy::Ray { per_direction: n } => {
            const DIRS: [Point3; 6] = [
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, 0.0, -1.0],
            ];
            let mut out = Vec::with_capacity(6 * n);
            for (dir, dist) in DIRS.iter().zip(d) {
                for k in 1..=n {
                    let t = dist * k as f64 / n as f64;
                    out.push(to_world([dir[0] * t, dir[1] * t, dir[2] * t]));
                }
            }
            out
        }
        SamplingStrategy::Grid { per_axis: m } => {
            let lo = [-d[1], -d[3], -d[5]];
            let hi = [d[0], d[2], d[4]];
            let at = |axis: usize, i: usize| {
                lo[axis] + (hi[axis] - lo[axis]) * i as f64 / (m - 1) as f64
            };
            let mut out = Vec::with_capacity(m * m * m);
            for i in 0..m {
                for j in 0..m {
                    for k in 0..m {
                        out.push(to_world([at(0, i), at(1, j), at(2, k)]));
                    }
                }
            }
            out
        }
    }
}

/// Seed revisiting: a set-abstraction block around every representative point,
/// concatenated in rep-point order and projected.
#[derive(Debug, Clone)]
pub struct RevisitModule {
    pub block: PointNetBlock,
    pub projection: Linear,
    pub radius: f64,
    pub group: usize,
    pub points_per_proposal: usize,
}

#[derive(Debug, Clone)]
pub struct RevisitOutput {
    /// `[R·K, C_rev]`
    pub point_features: Tensor,
    /// `[R, C_proj]`
    pub fused: Tensor,
    /// Per scene, one group per representative point.
    pub groups: Vec<Vec<NeighborGroup>>,
}

impl RevisitModule {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let k = cfg.strategy.num_points();
        let block = PointNetBlock::new(
            store,
            rng,
            "revisit",
            3,
            &[cfg.seed_channels],
            &cfg.revisit_channels,
        );
        let projection = Linear::new(
            store,
            rng,
            "revisit.proj",
            k * cfg.revisit_channels[2],
            cfg.revisit_proj,
            false,
        );
        Self {
            block,
            projection,
            radius: cfg.revisit_radius,
            group: cfg.revisit_group,
            points_per_proposal: k,
        }
    }

    /// `rep_points[b]` holds `K` points per proposal of scene `b`, proposal-major.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        rep_points: &[Vec<Point3>],
        seeds: &SeedBatch,
    ) -> Result<RevisitOutput> {
        let k = self.points_per_proposal;
        if let Some(bad) = rep_points.iter().find(|r| r.len() % k != 0) {
            return Err(Error::Config(format!(
                "{} representative points is not a multiple of K = {k}",
                bad.len()
            )));
        }
        let cw = self.block.cout();
        if self.projection.cin != k * cw {
            return Err(Error::Config(format!(
                "revisit projection expects {} inputs, K·C = {}",
                self.projection.cin,
                k * cw
            )));
        }
        let jobs: Vec<(&Vec<Point3>, &Vec<Point3>)> =
            rep_points.iter().zip(&seeds.positions).collect();
        let plans = par::try_map(&jobs, |(reps, seed_pos)| -> Result<_> {
            let groups = ball_query(reps, seed_pos, self.radius, self.group)?;
            let grouping = Grouping::new(&groups, reps, seed_pos, self.radius);
            Ok((groups, grouping))
        })?;
        let grouping = Grouping::concat(
            &plans
                .iter()
                .enumerate()
                .map(|(b, p)| (p.1.clone(), b * seeds.per_scene))
                .collect::<Vec<_>>(),
        );
        let point_features = self.block.forward(ctx, &grouping, &[seeds.features])?;
        let rows = grouping.num_groups() / k;
        let flat = ctx.g.reshape(point_features, &[rows, k * cw])?;
        let fused = self.projection.forward(ctx, flat)?;
        Ok(RevisitOutput {
            point_features,
            fused,
            groups: plans.into_iter().map(|p| p.0).collect(),
        })
    }
}

/// Refinement and classification on the fused feature: `C_in → h → h → 9 + N_C`.
#[derive(Debug, Clone)]
pub struct RefineHead {
    pub mlp: SharedMlp,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct RefineOutput {
    pub objectness: Tensor,
    pub heading_delta: Tensor,
    pub offset_delta: Tensor,
    pub semantic: Tensor,
}

impl RefineHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let h = cfg.head_channels;
        let cin = cfg.revisit_proj + cfg.cluster_channels;
        Self {
            mlp: SharedMlp::new(
                store,
                rng,
                "refine",
                &[cin, h, h, 9 + cfg.num_classes],
                true,
            ),
            num_classes: cfg.num_classes,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, fused: Tensor) -> Result<RefineOutput> {
        let out = self.mlp.forward(ctx, fused)?;
        Ok(RefineOutput {
            objectness: ctx.g.slice_cols(out, REFINE_OBJ.start, REFINE_OBJ.end)?,
            heading_delta: ctx.g.slice_cols(out, REFINE_HEADING, REFINE_HEADING + 1)?,
            offset_delta: ctx
                .g
                .slice_cols(out, REFINE_OFFSETS.start, REFINE_OFFSETS.end)?,
            semantic: ctx.g.slice_cols(
                out,
                REFINE_SEM_START,
                REFINE_SEM_START + self.num_classes,
            )?,
        })
    }
}

/// Single-stage baseline head on the cluster feature:
/// `C → h → h → 2 + 6 + 2·NH + N_C` (objectness, box, semantics).
#[derive(Debug, Clone)]
pub struct BaselineHead {
    pub mlp: SharedMlp,
    pub codec: AngleBinCodec,
    pub num_classes: usize,
}

impl BaselineHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        let codec = AngleBinCodec::new(cfg.heading_bins)?;
        let h = cfg.head_channels;
        let out = 2 + 6 + 2 * cfg.heading_bins + cfg.num_classes;
        Ok(Self {
            mlp: SharedMlp::new(
                store,
                rng,
                "baseline",
                &[cfg.cluster_channels, h, h, out],
                true,
            ),
            codec,
            num_classes: cfg.num_classes,
        })
    }

    /// Returns (objectness logits, box regression, semantic logits).
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        cluster_features: Tensor,
    ) -> Result<(Tensor, BoxRegression, Tensor)> {
        let out = self.mlp.forward(ctx, cluster_features)?;
        let obj = ctx.g.slice_cols(out, 0, 2)?;
        let reg = BoxRegression::from_channels(ctx, out, 2, &self.codec)?;
        let s = 2 + 6 + 2 * self.codec.bins();
        let sem = ctx.g.slice_cols(out, s, s + self.num_classes)?;
        Ok((obj, reg, sem))
    }
}

/// Supervision for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalTarget {
    pub assignment: Objectness,
    /// Face distances from the cluster center to the assigned box (positives only).
    pub offsets: [f64; 6],
    pub heading: f64,
    pub bin: usize,
    pub residual: f64,
    pub label: usize,
}

impl ProposalTarget {
    pub fn is_positive(&self) -> bool {
        matches!(self.assignment, Objectness::Positive(_))
    }
}

pub fn proposal_targets(
    centers: &[Point3],
    assignments: &[Objectness],
    gt: &[BoundingBox],
    codec: &AngleBinCodec,
) -> Vec<ProposalTarget> {
    centers
        .iter()
        .zip(assignments)
        .map(|(c, a)| match *a {
            Objectness::Positive(i) => {
                let b = &gt[i];
                let (bin, residual) = codec.encode(b.heading);
                ProposalTarget {
                    assignment: *a,
                    offsets: offsets_from_box(c, b).distances,
                    heading: b.heading,
                    bin,
                    residual,
                    label: b.label.unwrap_or(0),
                }
            }
            _ => ProposalTarget {
                assignment: *a,
                offsets: [0.0; 6],
                heading: 0.0,
                bin: 0,
                residual: 0.0,
                label: 0,
            },
        })
        .collect()
}

fn positive_weight(targets: &[ProposalTarget]) -> Option<f64> {
    let n = targets.iter().filter(|t| t.is_positive()).count();
    (n > 0).then(|| 1.0 / n as f64)
}

fn zero(ctx: &mut Ctx) -> Result<Tensor> {
    ctx.g.constant(&[1], vec![0.0])
}

/// `λ · L_off + L_ang`, averaged over positive proposals; 0 without positives.
pub fn rep_loss(
    ctx: &mut Ctx,
    reg: &BoxRegression,
    targets: &[ProposalTarget],
    offset_weight: f64,
) -> Result<Tensor> {
    let Some(w) = positive_weight(targets) else {
        return zero(ctx);
    };
    let nh = ctx.g.dims(reg.bin_logits).1;
    let off_target: Vec<f64> = targets.iter().flat_map(|t| t.offsets).collect();
    let off_w: Vec<f64> = targets
        .iter()
        .flat_map(|t| {
            [if t.is_positive() {
                offset_weight * w
            } else {
                0.0
            }; 6]
        })
        .collect();
    let off = ctx.g.smooth_l1(reg.offsets, &off_target, SMOOTH_L1_BETA)?;
    let l_off = ctx.g.weighted_sum(off, &off_w)?;

    let bins: Vec<usize> = targets.iter().map(|t| t.bin).collect();
    let ce_w: Vec<f64> = targets
        .iter()
        .map(|t| if t.is_positive() { w } else { 0.0 })
        .collect();
    let ce = ctx.g.softmax_cross_entropy(reg.bin_logits, &bins)?;
    let l_cls = ctx.g.weighted_sum(ce, &ce_w)?;

    let current = ctx.g.value(reg.bin_residuals).to_vec();
    let mut res_target = current;
    let mut res_w = vec![0.0; res_target.len()];
    for (r, t) in targets.iter().enumerate() {
        if t.is_positive() {
            res_target[r * nh + t.bin] = t.residual;
            res_w[r * nh + t.bin] = w;
        }
    }
    let res = ctx
        .g
        .smooth_l1(reg.bin_residuals, &res_target, SMOOTH_L1_BETA)?;
    let l_res = ctx.g.weighted_sum(res, &res_w)?;
    let ang = ctx.g.add(l_cls, l_res)?;
    ctx.g.add(l_off, ang)
}

/// `λ‖x + Δx − x*‖ + ‖wrap(θ + Δθ − θ*)‖` (smooth-L1), averaged over positives.
pub fn refine_loss(
    ctx: &mut Ctx,
    offsets: Tensor,
    offset_delta: Tensor,
    headings: &[f64],
    heading_delta: Tensor,
    targets: &[ProposalTarget],
    offset_weight: f64,
) -> Result<Tensor> {
    let Some(w) = positive_weight(targets) else {
        return zero(ctx);
    };
    let total = ctx.g.add(offsets, offset_delta)?;
    let off_target: Vec<f64> = targets.iter().flat_map(|t| t.offsets).collect();
    let off_w: Vec<f64> = targets
        .iter()
        .flat_map(|t| {
            [if t.is_positive() {
                offset_weight * w
            } else {
                0.0
            }; 6]
        })
        .collect();
    let off = ctx.g.smooth_l1(total, &off_target, SMOOTH_L1_BETA)?;
    let l_off = ctx.g.weighted_sum(off, &off_w)?;

    // smooth_l1(Δθ − τ) with τ chosen so that Δθ − τ = wrap(θ + Δθ − θ*)
    let dv = ctx.g.value(heading_delta).to_vec();
    let tau: Vec<f64> = targets
        .iter()
        .zip(headings)
        .zip(&dv)
        .map(|((t, &th), &d)| d - wrap_angle(th + d - t.heading))
        .collect();
    let ang_w: Vec<f64> = targets
        .iter()
        .map(|t| if t.is_positive() { w } else { 0.0 })
        .collect();
    let ang = ctx.g.smooth_l1(heading_delta, &tau, SMOOTH_L1_BETA)?;
    let l_ang = ctx.g.weighted_sum(ang, &ang_w)?;
    ctx.g.add(l_off, l_ang)
}
