//! Oriented 3D boxes with z-axis headings, the six-face offset parameterization,
//! bin-based heading codec, rotated IoU and greedy 3D NMS.
//!
//! Canonical frame of a box: origin at its center, `x'` along the heading.
//! Faces map to directions as front `+x'`, back `-x'`, left `+y'`, right `-y'`,
//! up `+z'`, down `-z'`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Point3;

/// Floor applied to regression targets so they stay in the range of `exp`.
pub const MIN_OFFSET: f64 = 0.01;

/// Normalize an angle to `[0, 2π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Wrap an angle difference to `(-π, π]`.
pub fn wrap_angle(delta: f64) -> f64 {
    let t = normalize_angle(delta);
    if t > PI {
        t - TAU
    } else {
        t
    }
}

#[inline]
pub fn rotate_z(v: Point3, theta: f64) -> Point3 {
    let (s, c) = theta.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center: Point3,
    /// Full extents along the canonical axes.
    pub size: Point3,
    pub heading: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoundingBox {
    pub fn new(center: Point3, size: Point3, heading: f64) -> Self {
        Self {
            center,
            size,
            heading: normalize_angle(heading),
            label: None,
            score: None,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.size.iter().all(|s| *s > 0.0 && s.is_finite())
            || !self.center.iter().all(|c| c.is_finite())
            || !self.heading.is_finite()
        {
            return Err(Error::Input(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Point in the canonical frame.
    pub fn to_local(&self, p: &Point3) -> Point3 {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        rotate_z(d, -self.heading)
    }

    pub fn contains(&self, p: &Point3, margin: f64) -> bool {
        let q = self.to_local(p);
        (0..3).all(|k| q[k].abs() <= self.size[k] / 2.0 + margin)
    }

    /// Bird's-eye-view corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (a, b) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let local = [[a, b], [-a, b], [-a, -b], [a, -b]];
        local.map(|[x, y]| {
            let r = rotate_z([x, y, 0.0], self.heading);
            [r[0] + self.center[0], r[1] + self.center[1]]
        })
    }

    /// The 8 corners; index bits are (x, y, z) signs with bit set meaning `+`.
    pub fn corners(&self) -> [Point3; 8] {
        std::array::from_fn(|i| {
            let local = [
                if i & 1 != 0 { 0.5 } else { -0.5 } * self.size[0],
                if i & 2 != 0 { 0.5 } else { -0.5 } * self.size[1],
                if i & 4 != 0 { 0.5 } else { -0.5 } * self.size[2],
            ];
            let r = rotate_z(local, self.heading);
            [
                r[0] + self.center[0],
                r[1] + self.center[1],
                r[2] + self.center[2],
            ]
        })
    }

    fn z_range(&self) -> (f64, f64) {
        (
            self.center[2] - self.size[2] / 2.0,
            self.center[2] + self.size[2] / 2.0,
        )
    }
}

/// Distances from a point to the six faces of a box, in canonical order
/// (front, back, left, right, up, down), with the box heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetVector {
    pub distances: [f64; 6],
    pub heading: f64,
}

impl OffsetVector {
    pub fn front(&self) -> f64 {
        self.distances[0]
    }
    pub fn back(&self) -> f64 {
        self.distances[1]
    }
    pub fn left(&self) -> f64 {
        self.distances[2]
    }
    pub fn right(&self) -> f64 {
        self.distances[3]
    }
    pub fn up(&self) -> f64 {
        self.distances[4]
    }
    pub fn down(&self) -> f64 {
        self.distances[5]
    }
}

/// Face distances from `vote` to `b`, each floored at [`MIN_OFFSET`].
pub fn offsets_from_box(vote: &Point3, b: &BoundingBox) -> OffsetVector {
    offsets_from_box_unclamped(vote, b).map_distances(|d| d.max(MIN_OFFSET))
}

/// Face distances without the floor; negative when the vote lies outside a face.
pub fn offsets_from_box_unclamped(vote: &Point3, b: &BoundingBox) -> OffsetVector {
    let q = b.to_local(vote);
    let h = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
    OffsetVector {
        distances: [
            h[0] - q[0],
            h[0] + q[0],
            h[1] - q[1],
            h[1] + q[1],
            h[2] - q[2],
            h[2] + q[2],
        ],
        heading: b.heading,
    }
}

impl OffsetVector {
    fn map_distances(mut self, f: impl Fn(f64) -> f64) -> Self {
        self.distances = self.distances.map(f);
        self
    }
}

/// Inverse of [`offsets_from_box`] for unclamped offsets.
pub fn box_from_offsets(vote: &Point3, off: &OffsetVector) -> BoundingBox {
    let d = &off.distances;
    let size = [d[0] + d[1], d[2] + d[3], d[4] + d[5]];
    let local = [
        (d[0] - d[1]) / 2.0,
        (d[2] - d[3]) / 2.0,
        (d[4] - d[5]) / 2.0,
    ];
    let r = rotate_z(local, off.heading);
    BoundingBox::new(
        [vote[0] + r[0], vote[1] + r[1], vote[2] + r[2]],
        size,
        off.heading,
    )
}

/// Axis extent of `points` in the frame centered at `origin` with heading `theta`.
pub fn min_max_clip(points: &[Point3], origin: &Point3, theta: f64) -> BoundingBox {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        let q = rotate_z(
            [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]],
            -theta,
        );
        for k in 0..3 {
            lo[k] = lo[k].min(q[k]);
            hi[k] = hi[k].max(q[k]);
        }
    }
    let mid = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    let r = rotate_z(mid, theta);
    BoundingBox::new(
        [origin[0] + r[0], origin[1] + r[1], origin[2] + r[2]],
        [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
        theta,
    )
}

/// Heading classes of width `2π / bins`; bin `i` is centered at `i · width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AngleBinCodec {
    bins: usize,
}

impl AngleBinCodec {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Config(format!(
                "need at least 2 heading bins, got {bins}"
            )));
        }
        Ok(Self { bins })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn width(&self) -> f64 {
        TAU / self.bins as f64
    }

    /// `(bin, residual)` with residual normalized by half the bin width, in `[-1, 1)`.
    pub fn encode(&self, theta: f64) -> (usize, f64) {
        let w = self.width();
        let shifted = normalize_angle(theta + w / 2.0);
        let bin = ((shifted / w).floor() as usize).min(self.bins - 1);
        let residual = (shifted - w / 2.0 - bin as f64 * w) / (w / 2.0);
        (bin, residual.clamp(-1.0, 1.0 - f64::EPSILON))
    }

    pub fn decode(&self, bin: usize, residual: f64) -> f64 {
        let w = self.width();
        normalize_angle(bin as f64 * w + residual * w / 2.0)
    }
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        s += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * s.abs()
}

/// Sutherland–Hodgman clipping of `subject` by the convex counter-clockwise `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let side = |p: &[f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(&cur), side(&prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn is_axis_aligned(theta: f64) -> bool {
    theta.sin().abs() < 1e-12
}

/// Intersection volume of two oriented boxes.
pub fn intersection_volume(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = a1.min(b1) - a0.max(b0);
    if dz <= 0.0 {
        return 0.0;
    }
    let area = if is_axis_aligned(a.heading) && is_axis_aligned(b.heading) {
        let ox = (a.center[0] + a.size[0] / 2.0).min(b.center[0] + b.size[0] / 2.0)
            - (a.center[0] - a.size[0] / 2.0).max(b.center[0] - b.size[0] / 2.0);
        let oy = (a.center[1] + a.size[1] / 2.0).min(b.center[1] + b.size[1] / 2.0)
            - (a.center[1] - a.size[1] / 2.0).max(b.center[1] - b.size[1] / 2.0);
        ox.max(0.0) * oy.max(0.0)
    } else {
        polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners()))
    };
    if area <= 0.0 {
        0.0
    } else {
        area * dz
    }
}

pub fn iou3d(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_volume(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy class-agnostic NMS; returns kept indices in descending score order.
pub fn nms3d(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Dimension(format!(
            "{} boxes with {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Argument(format!("NMS threshold {iou_threshold}")));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou3d(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const E: f64 = 1e-12;

    fn unit(center: Point3, heading: f64) -> BoundingBox {
        BoundingBox::new(center, [1.0, 1.0, 1.0], heading)
    }

    #[test]
    fn offsets_centered_are_half_sizes() {
        let b = BoundingBox::new([1.0, 2.0, 3.0], [2.0, 2.0, 2.0], 0.0);
        let o = offsets_from_box(&[1.0, 2.0, 3.0], &b);
        assert_eq!(o.distances, [1.0; 6]);
    }

    #[test]
    fn offsets_shifted_front() {
        let b = BoundingBox::new([0.0; 3], [2.0, 2.0, 2.0], 0.0);
        let o = offsets_from_box(&[0.5, 0.0, 0.0], &b);
        assert_eq!(o.distances, [0.5, 1.5, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn offsets_rotated_quarter_turn() {
        // heading π/2: world +x is canonical -y', the right face
        let b = BoundingBox::new([0.0; 3], [2.0, 2.0, 2.0], PI / 2.0);
        let o = offsets_from_box(&[0.5, 0.0, 0.0], &b);
        let want = [1.0, 1.0, 1.5, 0.5, 1.0, 1.0];
        for (g, w) in o.distances.iter().zip(want) {
            assert!((g - w).abs() < E, "{:?}", o.distances);
        }
    }

    #[test]
    fn offsets_clamp_outside_vote() {
        let b = BoundingBox::new([0.0; 3], [1.0, 1.0, 1.0], 0.0);
        let o = offsets_from_box(&[2.0, 0.0, 0.0], &b);
        assert_eq!(o.front(), MIN_OFFSET);
        assert!((o.back() - 2.5).abs() < E);
    }

    #[test]
    fn box_from_offsets_examples() {
        let b = box_from_offsets(
            &[0.0; 3],
            &OffsetVector {
                distances: [1.0; 6],
                heading: 0.0,
            },
        );
        assert_eq!(b.center, [0.0; 3]);
        assert_eq!(b.size, [2.0; 3]);

        let off = OffsetVector {
            distances: [2.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            heading: PI / 2.0,
        };
        let b = box_from_offsets(&[0.0; 3], &off);
        assert!(b.center[0].abs() < E && (b.center[1] - 0.5).abs() < E && b.center[2].abs() < E);
        assert_eq!(b.size, [3.0, 2.0, 2.0]);
        assert!((b.heading - PI / 2.0).abs() < E);
    }

    #[test]
    fn angle_codec_examples() {
        let c = AngleBinCodec::new(12).unwrap();
        assert_eq!(c.encode(0.0), (0, 0.0));
        let (bin, res) = c.encode(PI / 6.0);
        assert_eq!(bin, 1);
        assert!(res.abs() < E);
        assert!((c.decode(3, 0.0) - PI / 2.0).abs() < E);
        assert!(AngleBinCodec::new(1).is_err());
    }

    #[test]
    fn angle_codec_residual_range() {
        let c = AngleBinCodec::new(12).unwrap();
        // just below 2π falls in bin 0 with a negative residual
        let (bin, res) = c.encode(TAU - 0.01);
        assert_eq!(bin, 0);
        assert!((-1.0..0.0).contains(&res));
    }

    #[test]
    fn iou_identical_and_shifted() {
        let a = unit([0.0; 3], 0.0);
        assert!((iou3d(&a, &a) - 1.0).abs() < E);
        let b = unit([0.5, 0.0, 0.0], 0.0);
        assert!((iou3d(&a, &b) - 1.0 / 3.0).abs() < E);
        let far = unit([5.0, 0.0, 0.0], 0.3);
        assert_eq!(iou3d(&a, &far), 0.0);
    }

    #[test]
    fn iou_fast_path_matches_polygon_path() {
        let a = BoundingBox::new([0.1, 0.2, 0.0], [1.0, 2.0, 1.0], 0.0);
        let b = BoundingBox::new([0.5, -0.3, 0.2], [1.5, 0.7, 1.1], PI);
        let fast = iou3d(&a, &b);
        let poly = {
            let inter = polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners()))
                * (0.5f64.min(0.75) - (-0.5f64).max(-0.35));
            inter / (a.volume() + b.volume() - inter)
        };
        assert!((fast - poly).abs() < 1e-12);
    }

    #[test]
    fn rotated_square_inside_square() {
        // a unit square rotated 45° inside a 2×2 square is fully contained
        let a = BoundingBox::new([0.0; 3], [2.0, 2.0, 1.0], 0.0);
        let b = BoundingBox::new([0.0; 3], [1.0, 1.0, 1.0], PI / 4.0);
        assert!((iou3d(&a, &b) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn nms_examples() {
        let a = BoundingBox::new([0.0; 3], [1.0, 1.0, 1.0], 0.0);
        assert_eq!(nms3d(&[a], &[0.5], 0.25).unwrap(), vec![0]);
        // IoU(a, b) = 0.5 for b overlapping a by 2/3 along x
        let b = BoundingBox::new([1.0 / 3.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0);
        assert!((iou3d(&a, &b) - 0.5).abs() < E);
        let c = BoundingBox::new([10.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0);
        assert_eq!(
            nms3d(&[a, b, c], &[0.9, 0.8, 0.7], 0.25).unwrap(),
            vec![0, 2]
        );
        assert!(nms3d(&[], &[], 0.25).unwrap().is_empty());
        assert!(nms3d(&[a], &[0.1], 0.0).is_err());
    }

    #[test]
    fn min_max_clip_of_corners_recovers_box() {
        let b = BoundingBox::new([1.0, -2.0, 0.5], [1.2, 0.4, 0.9], 2.0);
        let clipped = min_max_clip(&b.corners(), &[0.3, 0.1, 0.0], b.heading);
        for k in 0..3 {
            assert!((clipped.center[k] - b.center[k]).abs() < 1e-12);
            assert!((clipped.size[k] - b.size[k]).abs() < 1e-12);
        }
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (
            -3.0..3.0f64,
            -3.0..3.0f64,
            -1.0..1.0f64,
            0.2..2.0f64,
            0.2..2.0f64,
            0.2..2.0f64,
            0.0..TAU,
        )
            .prop_map(|(x, y, z, a, b, c, t)| BoundingBox::new([x, y, z], [a, b, c], t))
    }

    proptest! {
        #[test]
        fn offsets_round_trip(b in arb_box(), fx in -0.49..0.49f64, fy in -0.49..0.49f64, fz in -0.49..0.49f64) {
            let local = [fx * b.size[0], fy * b.size[1], fz * b.size[2]];
            let r = rotate_z(local, b.heading);
            let p = [b.center[0] + r[0], b.center[1] + r[1], b.center[2] + r[2]];
            let o = offsets_from_box_unclamped(&p, &b);
            let back = box_from_offsets(&p, &o);
            for k in 0..3 {
                prop_assert!((back.center[k] - b.center[k]).abs() < 1e-9);
                prop_assert!((back.size[k] - b.size[k]).abs() < 1e-9);
            }
            let again = offsets_from_box_unclamped(&p, &back);
            for k in 0..6 {
                prop_assert!((again.distances[k] - o.distances[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn angle_round_trip(theta in -20.0..20.0f64, bins in 2usize..40) {
            let c = AngleBinCodec::new(bins).unwrap();
            let (bin, res) = c.encode(theta);
            prop_assert!(bin < bins && (-1.0..1.0).contains(&res));
            let d = wrap_angle(c.decode(bin, res) - theta);
            prop_assert!(d.abs() < 1e-9);
        }

        #[test]
        fn iou_symmetric_and_invariant(a in arb_box(), b in arb_box(), t in 0.0..TAU, dx in -5.0..5.0f64) {
            let ab = iou3d(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - iou3d(&b, &a)).abs() < 1e-9);
            let shift = |x: &BoundingBox| BoundingBox::new([x.center[0] + dx, x.center[1] - dx, x.center[2] + 0.5], x.size, x.heading);
            prop_assert!((ab - iou3d(&shift(&a), &shift(&b))).abs() < 1e-9);
            let rot = |x: &BoundingBox| BoundingBox::new(rotate_z(x.center, t), x.size, x.heading + t);
            prop_assert!((ab - iou3d(&rot(&a), &rot(&b))).abs() < 1e-9);
        }

        #[test]
        fn nms_order_independent(boxes in proptest::collection::vec(arb_box(), 1..20), seed in 0u64..1000) {
            let scores: Vec<f64> = (0..boxes.len()).map(|i| ((i as u64 * 7919 + seed) % 13) as f64 / 13.0).collect();
            let kept = nms3d(&boxes, &scores, 0.25).unwrap();
            // reverse the input; map kept indices back
            let rb: Vec<_> = boxes.iter().rev().copied().collect();
            let rs: Vec<_> = scores.iter().rev().copied().collect();
            let n = boxes.len();
            let kept_rev = nms3d(&rb, &rs, 0.25).unwrap();
            let mut a: Vec<_> = kept.iter().map(|&i| (boxes[i].center.map(f64::to_bits), scores[i].to_bits())).collect();
            let mut b: Vec<_> = kept_rev.iter().map(|&i| (rb[i].center.map(f64::to_bits), rs[i].to_bits())).collect();
            a.sort();
            b.sort();
            // equal-score ties may resolve differently once indices flip, so
            // only compare when scores are distinct
            let mut ss = scores.clone();
            ss.sort_by(f64::total_cmp);
            ss.dedup();
            if ss.len() == n {
                prop_assert_eq!(a, b);
            }
        }
    }
}
