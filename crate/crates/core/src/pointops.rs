//! Neighborhood primitives on point sets: farthest point sampling, ball query,
//! grouping and PointNet-style aggregation.

use rand::Rng;

use crate::autodiff::{kaiming_uniform, BatchNorm, Ctx, ParamId, ParamStore, SharedMlp, Tensor};
use crate::error::{Error, Result};
use crate::{par, Point3};

/// Positions plus optional per-point features (`channels` wide, row-major).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSet {
    pub positions: Vec<Point3>,
    pub features: Vec<f64>,
    pub channels: usize,
}

impl PointSet {
    pub fn from_positions(positions: Vec<Point3>) -> Self {
        Self {
            positions,
            features: Vec::new(),
            channels: 0,
        }
    }

    pub fn with_features(
        positions: Vec<Point3>,
        features: Vec<f64>,
        channels: usize,
    ) -> Result<Self> {
        if features.len() != positions.len() * channels {
            return Err(Error::Dimension(format!(
                "{} feature values for {} points × {channels} channels",
                features.len(),
                positions.len()
            )));
        }
        Ok(Self {
            positions,
            features,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .positions
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(Error::Input(format!(
                "point {i} has non-finite coordinates"
            )));
        }
        if self.channels > 0 && self.features.len() != self.positions.len() * self.channels {
            return Err(Error::Dimension(
                "feature rows do not match point count".into(),
            ));
        }
        Ok(())
    }
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling starting from index 0; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Point3], count: usize) -> Result<Vec<usize>> {
    if count > points.len() {
        return Err(Error::Argument(format!(
            "cannot sample {count} of {} points",
            points.len()
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let zs: Vec<f64> = points.iter().map(|p| p[2]).collect();
    let mut chosen = Vec::with_capacity(count);
    // Chosen points hold -1 so they can never win the arg-max again.
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut current = 0;
    for _ in 0..count {
        chosen.push(current);
        min_d[current] = -1.0;
        let (cx, cy, cz) = (xs[current], ys[current], zs[current]);
        let mut best_d = f64::NEG_INFINITY;
        for (((m, x), y), z) in min_d.iter_mut().zip(&xs).zip(&ys).zip(&zs) {
            let (dx, dy, dz) = (x - cx, y - cy, z - cz);
            let d = dx * dx + dy * dy + dz * dz;
            let v = if d < *m { d } else { *m };
            *m = v;
            best_d = if v > best_d { v } else { best_d };
        }
        let best = min_d.iter().position(|&m| m == best_d).unwrap_or(0);
        current = best;
    }
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGroup {
    pub center: usize,
    /// Sorted by distance to the center, ties by index.
    pub members: Vec<usize>,
    pub radius: f64,
}

/// Up to `max_members` nearest points within `radius` (inclusive) of each center.
pub fn ball_query(
    centers: &[Point3],
    points: &[Point3],
    radius: f64,
    max_members: usize,
) -> Result<Vec<NeighborGroup>> {
    validate_query(radius, max_members)?;
    let grid = CellGrid::new(points, radius);
    Ok(par::map_range(centers.len(), |c| {
        grid.query(c, &centers[c], points, radius, max_members)
    }))
}

/// Sequential counterpart of [`ball_query`].
pub fn ball_query_seq(
    centers: &[Point3],
    points: &[Point3],
    radius: f64,
    max_members: usize,
) -> Result<Vec<NeighborGroup>> {
    validate_query(radius, max_members)?;
    let grid = CellGrid::new(points, radius);
    Ok(par::map_range_seq(centers.len(), |c| {
        grid.query(c, &centers[c], points, radius, max_members)
    }))
}

fn validate_query(radius: f64, max_members: usize) -> Result<()> {
    if !(radius > 0.0) {
        return Err(Error::Argument(format!("ball query radius {radius}")));
    }
    if max_members == 0 {
        return Err(Error::Argument("ball query needs max_members ≥ 1".into()));
    }
    Ok(())
}

const MAX_CELLS_PER_AXIS: usize = 64;

/// Uniform bucketing of points; cells are at least `radius` wide so a query
/// only scans the cells overlapping its bounding cube.
struct CellGrid {
    origin: Point3,
    cell: Point3,
    dims: [usize; 3],
    /// Point indices ordered by cell; cell `k` owns `order[start[k]..start[k + 1]]`.
    order: Vec<usize>,
    start: Vec<usize>,
}

impl CellGrid {
    fn new(points: &[Point3], radius: f64) -> Self {
        let finite = points.iter().all(|p| p.iter().all(|c| c.is_finite()));
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if !finite || points.is_empty() {
            // One cell holding everything: a plain scan.
            return Self {
                origin: [0.0; 3],
                cell: [f64::INFINITY; 3],
                dims: [1, 1, 1],
                order: (0..points.len()).collect(),
                start: vec![0, points.len()],
            };
        }
        let mut cell = [radius; 3];
        let mut dims = [1; 3];
        for k in 0..3 {
            cell[k] = radius.max((hi[k] - lo[k]) / MAX_CELLS_PER_AXIS as f64);
            dims[k] =
                (((hi[k] - lo[k]) / cell[k]).floor() as usize + 1).min(MAX_CELLS_PER_AXIS + 1);
        }
        let mut grid = Self {
            origin: lo,
            cell,
            dims,
            order: Vec::new(),
            start: Vec::new(),
        };
        let keys: Vec<usize> = points.iter().map(|p| grid.key(p)).collect();
        let mut start = vec![0usize; dims[0] * dims[1] * dims[2] + 1];
        for &k in &keys {
            start[k + 1] += 1;
        }
        for k in 1..start.len() {
            start[k] += start[k - 1];
        }
        let mut fill = start.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.order = order;
        grid.start = start;
        grid
    }

    fn axis_cell(&self, k: usize, v: f64) -> isize {
        if self.cell[k].is_infinite() {
            return 0;
        }
        ((v - self.origin[k]) / self.cell[k]).floor() as isize
    }

    fn key(&self, p: &Point3) -> usize {
        let c: [usize; 3] = std::array::from_fn(|k| {
            self.axis_cell(k, p[k]).clamp(0, self.dims[k] as isize - 1) as usize
        });
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    fn query(
        &self,
        center: usize,
        c: &Point3,
        points: &[Point3],
        radius: f64,
        max_members: usize,
    ) -> NeighborGroup {
        let r2 = radius * radius;
        let mut range = [(0usize, 0usize); 3];
        for k in 0..3 {
            let last = self.dims[k] as isize - 1;
            let a = self.axis_cell(k, c[k] - radius).max(0);
            let b = self.axis_cell(k, c[k] + radius).min(last);
            if a > b || !c[k].is_finite() {
                return NeighborGroup {
                    center,
                    members: Vec::new(),
                    radius,
                };
            }
            range[k] = (a as usize, b as usize);
        }
        let mut hits: Vec<(f64, usize)> = Vec::new();
        for x in range[0].0..=range[0].1 {
            for y in range[1].0..=range[1].1 {
                let row = (x * self.dims[1] + y) * self.dims[2];
                let cells = self.start[row + range[2].0]..self.start[row + range[2].1 + 1];
                for &i in &self.order[cells] {
                    let d = dist2(&points[i], c);
                    if d <= r2 {
                        hits.push((d, i));
                    }
                }
            }
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        hits.truncate(max_members);
        NeighborGroup {
            center,
            members: hits.into_iter().map(|(_, i)| i).collect(),
            radius,
        }
    }
}

/// Inverse-distance weights over the three nearest `sources` of each target.
pub fn three_nn_weights(
    targets: &[Point3],
    sources: &[Point3],
) -> Result<(Vec<[usize; 3]>, Vec<[f64; 3]>)> {
    if sources.is_empty() {
        return Err(Error::Argument(
            "interpolation needs at least one source".into(),
        ));
    }
    let rows = par::map(targets, |t| {
        let mut best = [(f64::INFINITY, 0usize); 3];
        for (i, s) in sources.iter().enumerate() {
            let d = dist2(t, s);
            if d < best[2].0 {
                best[2] = (d, i);
                if best[2].0 < best[1].0 {
                    best.swap(1, 2);
                    if best[1].0 < best[0].0 {
                        best.swap(0, 1);
                    }
                }
            }
        }
        // fewer than three sources: repeat the nearest
        for k in 1..3 {
            if !best[k].0.is_finite() {
                best[k] = best[0];
            }
        }
        let inv: Vec<f64> = best.iter().map(|(d, _)| 1.0 / (d.sqrt() + 1e-8)).collect();
        let s: f64 = inv.iter().sum();
        (
            [best[0].1, best[1].1, best[2].1],
            [inv[0] / s, inv[1] / s, inv[2] / s],
        )
    });
    Ok(rows.into_iter().unzip())
}

/// Flattened group membership with per-member constant input features
/// (center-relative coordinates, optionally followed by extra scalars).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grouping {
    pub members: Vec<usize>,
    pub ranges: Vec<std::ops::Range<usize>>,
    pub local: Vec<f64>,
    pub local_width: usize,
}

impl Grouping {
    /// Relative coordinates are divided by `scale`.
    pub fn new(
        groups: &[NeighborGroup],
        centers: &[Point3],
        points: &[Point3],
        scale: f64,
    ) -> Self {
        Self::with_extra(groups, centers, points, scale, &[], 0)
    }

    /// Like [`Grouping::new`] but appends `extra[member * extra_width ..]` to each local row.
    pub fn with_extra(
        groups: &[NeighborGroup],
        centers: &[Point3],
        points: &[Point3],
        scale: f64,
        extra: &[f64],
        extra_width: usize,
    ) -> Self {
        let mut g = Grouping {
            local_width: 3 + extra_width,
            ..Default::default()
        };
        for grp in groups {
            let start = g.members.len();
            let c = centers[grp.center];
            for &m in &grp.members {
                let p = points[m];
                g.members.push(m);
                g.local.extend((0..3).map(|k| (p[k] - c[k]) / scale));
                g.local
                    .extend_from_slice(&extra[m * extra_width..(m + 1) * extra_width]);
            }
            g.ranges.push(start..g.members.len());
        }
        g
    }

    /// Concatenate groupings whose member indices refer to row blocks offset by `row_offsets`.
    pub fn concat(parts: &[(Grouping, usize)]) -> Self {
        let mut out = Grouping {
            local_width: parts.first().map(|p| p.0.local_width).unwrap_or(3),
            ..Default::default()
        };
        for (g, off) in parts {
            let base = out.members.len();
            out.members.extend(g.members.iter().map(|m| m + off));
            out.ranges
                .extend(g.ranges.iter().map(|r| r.start + base..r.end + base));
            out.local.extend_from_slice(&g.local);
        }
        out
    }

    pub fn num_rows(&self) -> usize {
        self.members.len()
    }

    pub fn num_groups(&self) -> usize {
        self.ranges.len()
    }
}

/// PointNet block: shared MLP over `[local, features...]` of every member, then max-pool.
///
/// The first layer is stored split by input block so that feature projections
/// can be computed once per source row and gathered, which is the same affine
/// map as projecting the concatenated member row.
#[derive(Debug, Clone)]
pub struct PointNetBlock {
    pub w_local: ParamId,
    pub w_feat: Vec<ParamId>,
    pub bias: ParamId,
    pub bn: Option<BatchNorm>,
    pub rest: Option<SharedMlp>,
    pub local_width: usize,
    pub feat_widths: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl PointNetBlock {
    /// `sizes` are the output widths of each MLP layer; every layer uses BN + ReLU.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        local_width: usize,
        feat_widths: &[usize],
        sizes: &[usize],
    ) -> Self {
        assert!(!sizes.is_empty(), "PointNet block needs at least one layer");
        let cin = local_width + feat_widths.iter().sum::<usize>();
        let c1 = sizes[0];
        let w_local = store.add(
            format!("{name}.0.weight_local"),
            &[local_width, c1],
            kaiming_uniform(rng, cin, local_width * c1),
        );
        let w_feat = feat_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                store.add(
                    format!("{name}.0.weight_feat{i}"),
                    &[w, c1],
                    kaiming_uniform(rng, cin, w * c1),
                )
            })
            .collect();
        let bias = store.add(format!("{name}.0.bias"), &[c1], vec![0.0; c1]);
        let bn = Some(BatchNorm::new(store, &format!("{name}.0.bn"), c1));
        let rest = (sizes.len() > 1).then(|| {
            let mut s = vec![c1];
            s.extend_from_slice(&sizes[1..]);
            SharedMlp::new(store, rng, &format!("{name}.rest"), &s, false)
        });
        Self {
            w_local,
            w_feat,
            bias,
            bn,
            rest,
            local_width,
            feat_widths: feat_widths.to_vec(),
            sizes: sizes.to_vec(),
        }
    }

    pub fn cout(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Per-member activations before pooling, `[rows, cout]`.
    pub fn member_features(
        &self,
        ctx: &mut Ctx,
        grouping: &Grouping,
        sources: &[Tensor],
    ) -> Result<Tensor> {
        if sources.len() != self.w_feat.len() {
            return Err(Error::Dimension(format!(
                "PointNet block expects {} feature sources, got {}",
                self.w_feat.len(),
                sources.len()
            )));
        }
        if grouping.local_width != self.local_width {
            return Err(Error::Dimension(format!(
                "local width {} vs block {}",
                grouping.local_width, self.local_width
            )));
        }
        let rows = grouping.num_rows();
        let local = ctx
            .g
            .constant(&[rows, self.local_width], grouping.local.clone())?;
        let w = ctx.p(self.w_local);
        let b = ctx.p(self.bias);
        let mut h = ctx.g.linear(local, w, Some(b))?;
        for (&src, &wid) in sources.iter().zip(&self.w_feat) {
            let w = ctx.p(wid);
            let n_src = ctx.g.dims(src).0;
            let part = if rows < n_src {
                let gathered = ctx.g.gather_rows(src, &grouping.members)?;
                ctx.g.linear(gathered, w, None)?
            } else {
                let proj = ctx.g.linear(src, w, None)?;
                ctx.g.gather_rows(proj, &grouping.members)?
            };
            h = ctx.g.add(h, part)?;
        }
        if let Some(bn) = &self.bn {
            h = bn.forward(ctx, h)?;
        }
        h = ctx.g.relu(h);
        if let Some(rest) = &self.rest {
            h = rest.forward(ctx, h)?;
        }
        Ok(h)
    }

    /// Pooled features, `[groups, cout]`; empty groups give zero rows.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        grouping: &Grouping,
        sources: &[Tensor],
    ) -> Result<Tensor> {
        let h = self.member_features(ctx, grouping, sources)?;
        ctx.g.group_max(h, &grouping.ranges)
    }
}

/// Group `points` around `centers` and aggregate their features with `block`.
/// Returns the groups alongside the pooled features `[centers, cout]`.
pub fn set_abstraction(
    ctx: &mut Ctx,
    block: &PointNetBlock,
    centers: &[Point3],
    points: &[Point3],
    features: Tensor,
    radius: f64,
    max_members: usize,
) -> Result<(Vec<NeighborGroup>, Tensor)> {
    let groups = ball_query(centers, points, radius, max_members)?;
    let grouping = Grouping::new(&groups, centers, points, radius);
    let out = block.forward(ctx, &grouping, &[features])?;
    Ok((groups, out))
}
