use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ClassVocab;
use crate::boxgeom::{rotate_z, BoundingBox};
use crate::error::{Error, Result};
use crate::{par, Point3};

/// Size distribution of one object class. Extents are `[depth, width, height]`
/// along the canonical axes, drawn uniformly from `mean ± spread`
/// (`± 2·spread` for high-variance classes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub size_mean: [f64; 3],
    pub size_spread: [f64; 3],
    #[serde(default)]
    pub high_variance: bool,
    /// Front face never carries points (shelves, cabinets); makes the heading observable.
    #[serde(default)]
    pub open_front: bool,
}

impl ClassSpec {
    pub fn effective_spread(&self) -> [f64; 3] {
        let k = if self.high_variance { 2.0 } else { 1.0 };
        self.size_spread.map(|s| s * k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    /// Room extents; the floor spans `[-x/2, x/2] × [-y/2, y/2]` at `z = 0`.
    pub room: [f64; 3],
    pub object_count: [usize; 2],
    pub classes: Vec<ClassSpec>,
    /// Probability that each candidate face of an object stays unobserved.
    pub occlusion: f64,
    pub noise_sigma: f64,
    /// Fraction of points on the walls.
    pub clutter_fraction: f64,
    /// Walls carrying clutter, taken in order from the `-y` wall counter-clockwise.
    #[serde(default = "all_walls")]
    pub clutter_walls: usize,
    pub floor_fraction: f64,
    pub num_points: usize,
    /// All headings are 0 when set.
    pub axis_aligned: bool,
    pub seed: u64,
}

fn all_walls() -> usize {
    4
}

const PLACEMENT_RETRIES: usize = 500;
const PLACEMENT_MARGIN: f64 = 0.15;

impl SyntheticSceneSpec {
    /// Single-view, randomly oriented scenes; the viewer sees two adjacent walls.
    pub fn oriented() -> Self {
        Self {
            room: [4.0, 4.0, 2.5],
            object_count: [2, 4],
            classes: default_classes(),
            occlusion: 0.2,
            noise_sigma: 0.005,
            clutter_fraction: 0.1,
            clutter_walls: 2,
            floor_fraction: 0.3,
            num_points: 4096,
            axis_aligned: false,
            seed: 0,
        }
    }

    /// Fuller coverage of the whole room, every box axis-aligned.
    pub fn axis_aligned() -> Self {
        Self {
            occlusion: 0.05,
            clutter_walls: 4,
            axis_aligned: true,
            ..Self::oriented()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "oriented" => Ok(Self::oriented()),
            "axis-aligned" => Ok(Self::axis_aligned()),
            other => Err(Error::Config(format!("unknown scene preset `{other}`"))),
        }
    }

    pub fn vocab(&self) -> ClassVocab {
        ClassVocab(self.classes.iter().map(|c| c.name.clone()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        let ok = !self.classes.is_empty()
            && self.room.iter().all(|r| *r > 0.0)
            && self.object_count[0] <= self.object_count[1]
            && frac(self.occlusion)
            && frac(self.clutter_fraction)
            && frac(self.floor_fraction)
            && self.clutter_fraction + self.floor_fraction <= 1.0
            && (1..=4).contains(&self.clutter_walls)
            && self.noise_sigma >= 0.0
            && self.num_points > 0
            && self.classes.iter().all(|c| {
                c.size_spread.iter().all(|s| *s >= 0.0)
                    && c.size_mean
                        .iter()
                        .zip(c.effective_spread())
                        .all(|(m, s)| m - s > 0.0)
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scene spec: {self:?}")))
        }
    }
}

fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "table".into(),
            size_mean: [0.8, 1.2, 0.75],
            size_spread: [0.1, 0.2, 0.05],
            high_variance: false,
            open_front: true,
        },
        ClassSpec {
            name: "chair".into(),
            size_mean: [0.6, 0.6, 0.9],
            size_spread: [0.05, 0.05, 0.08],
            high_variance: false,
            open_front: true,
        },
        ClassSpec {
            name: "bookshelf".into(),
            size_mean: [0.4, 1.0, 1.5],
            size_spread: [0.05, 0.2, 0.2],
            high_variance: true,
            open_front: true,
        },
    ]
}

/// Candidate object faces (the bottom rests on the floor and is never observed).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Face {
    Front,
    Back,
    Left,
    Right,
    Top,
}

impl Face {
    pub const ALL: [Face; 5] = [Face::Front, Face::Back, Face::Left, Face::Right, Face::Top];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<Point3>,
    /// Ground-truth boxes; every label is set.
    pub boxes: Vec<BoundingBox>,
    /// Per box: bitmask of faces that were populated (bit `Face as u8`).
    pub visible_faces: Vec<u8>,
    /// Per box: bitmask of faces that were eligible before occlusion.
    pub candidate_faces: Vec<u8>,
}

impl Scene {
    pub fn face_visible(&self, obj: usize, face: Face) -> bool {
        self.visible_faces[obj] & face.bit() != 0
    }

    pub fn face_candidate(&self, obj: usize, face: Face) -> bool {
        self.candidate_faces[obj] & face.bit() != 0
    }
}

/// Seed for scene `index` of a dataset generated from `base`.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    // splitmix64 step
    let mut z = base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` scenes with seeds derived from `spec.seed`, generated in parallel.
pub fn generate_dataset(spec: &SyntheticSceneSpec, count: usize) -> Result<Vec<Scene>> {
    let specs: Vec<SyntheticSceneSpec> = (0..count)
        .map(|i| SyntheticSceneSpec {
            seed: scene_seed(spec.seed, i),
            ..spec.clone()
        })
        .collect();
    par::try_map(&specs, generate_scene)
}

fn bev_overlaps(a: &BoundingBox, b: &BoundingBox) -> bool {
    let grow = |x: &BoundingBox| {
        let mut g = *x;
        g.size[0] += PLACEMENT_MARGIN;
        g.size[1] += PLACEMENT_MARGIN;
        g.size[2] = 1.0;
        g.center[2] = 0.0;
        g
    };
    crate::boxgeom::intersection_volume(&grow(a), &grow(b)) > 0.0
}

pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [rx, ry, rz] = spec.room;
    let n_obj = rng.random_range(spec.object_count[0]..=spec.object_count[1]);

    let mut boxes: Vec<BoundingBox> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let label = rng.random_range(0..spec.classes.len());
        let class = &spec.classes[label];
        let spread = class.effective_spread();
        let size: Point3 =
            std::array::from_fn(|k| class.size_mean[k] + spread[k] * rng.random_range(-1.0..=1.0));
        let heading = if spec.axis_aligned {
            0.0
        } else {
            rng.random_range(0.0..TAU)
        };
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let cx = rng.random_range(-rx / 2.0..rx / 2.0);
            let cy = rng.random_range(-ry / 2.0..ry / 2.0);
            let b = BoundingBox::new([cx, cy, size[2] / 2.0], size, heading).with_label(label);
            let inside = size[2] <= rz
                && b.bev_corners()
                    .iter()
                    .all(|c| c[0].abs() <= rx / 2.0 - 0.05 && c[1].abs() <= ry / 2.0 - 0.05);
            if inside && boxes.iter().all(|o| !bev_overlaps(o, &b)) {
                placed = Some(b);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => {
                return Err(Error::Generation(format!(
                    "could not place object {} of {n_obj} ({}) after {PLACEMENT_RETRIES} tries; spec: {spec:?}",
                    boxes.len(),
                    class.name
                )))
            }
        }
    }

    let mut candidate_faces = Vec::with_capacity(n_obj);
    let mut visible_faces = Vec::with_capacity(n_obj);
    // (object, face, area) for every populated face
    let mut surfaces: Vec<(usize, Face, f64)> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let open_front = spec.classes[b.label.unwrap()].open_front;
        let mut cand = 0u8;
        let mut vis = 0u8;
        for face in Face::ALL {
            if face == Face::Front && open_front {
                continue;
            }
            cand |= face.bit();
            if rng.random::<f64>() >= spec.occlusion {
                vis |= face.bit();
                surfaces.push((i, face, face_area(b, face)));
            }
        }
        candidate_faces.push(cand);
        visible_faces.push(vis);
    }

    let n = spec.num_points;
    let n_clutter = (spec.clutter_fraction * n as f64).round() as usize;
    let total_area: f64 = surfaces.iter().map(|s| s.2).sum();
    let n_floor = if total_area > 0.0 {
        (spec.floor_fraction * n as f64).round() as usize
    } else {
        n - n_clutter
    };
    let n_obj_pts = n - n_clutter - n_floor;

    let mut points = Vec::with_capacity(n);
    if n_obj_pts > 0 {
        // cumulative area table for face selection
        let mut cdf = Vec::with_capacity(surfaces.len());
        let mut acc = 0.0;
        for s in &surfaces {
            acc += s.2;
            cdf.push(acc);
        }
        for _ in 0..n_obj_pts {
            let u = rng.random::<f64>() * total_area;
            let k = cdf.partition_point(|&c| c < u).min(surfaces.len() - 1);
            let (obj, face, _) = surfaces[k];
            points.push(sample_face(&boxes[obj], face, &mut rng));
        }
    }
    for _ in 0..n_floor {
        let mut p = [0.0; 3];
        for _ in 0..20 {
            p = [
                rng.random_range(-rx / 2.0..rx / 2.0),
                rng.random_range(-ry / 2.0..ry / 2.0),
                0.0,
            ];
            if !boxes.iter().any(|b| b.contains(&p, 0.0)) {
                break;
            }
        }
        points.push(p);
    }
    let walls = [rx, ry, rx, ry];
    let perimeter: f64 = walls[..spec.clutter_walls].iter().sum();
    for _ in 0..n_clutter {
        let t = rng.random_range(0.0..perimeter);
        let z = rng.random_range(0.0..rz);
        let p = if t < rx {
            [t - rx / 2.0, -ry / 2.0, z]
        } else if t < rx + ry {
            [rx / 2.0, t - rx - ry / 2.0, z]
        } else if t < 2.0 * rx + ry {
            [t - rx - ry - rx / 2.0, ry / 2.0, z]
        } else {
            [-rx / 2.0, t - 2.0 * rx - ry - ry / 2.0, z]
        };
        points.push(p);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        for p in &mut points {
            for c in p.iter_mut() {
                *c += normal.sample(&mut rng);
            }
        }
    }
    points.shuffle(&mut rng);
    Ok(Scene {
        points,
        boxes,
        visible_faces,
        candidate_faces,
    })
}

fn face_area(b: &BoundingBox, face: Face) -> f64 {
    let [sx, sy, sz] = b.size;
    match face {
        Face::Front | Face::Back => sy * sz,
        Face::Left | Face::Right => sx * sz,
        Face::Top => sx * sy,
    }
}

fn sample_face(b: &BoundingBox, face: Face, rng: &mut impl Rng) -> Point3 {
    let h = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
    let mut u = |k: usize| rng.random_range(-h[k]..=h[k]);
    let local = match face {
        Face::Front => [h[0], u(1), u(2)],
        Face::Back => [-h[0], u(1), u(2)],
        Face::Left => [u(0), h[1], u(2)],
        Face::Right => [u(0), -h[1], u(2)],
        Face::Top => [u(0), u(1), h[2]],
    };
    let r = rotate_z(local, b.heading);
    [r[0] + b.center[0], r[1] + b.center[1], r[2] + b.center[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_spec(seed: u64) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            clutter_fraction: 0.0,
            noise_sigma: 0.0,
            occlusion: 0.0,
            seed,
            ..SyntheticSceneSpec::oriented()
        }
    }

    /// Distance from `p` to the surface of `b`.
    fn surface_distance(b: &BoundingBox, p: &Point3) -> f64 {
        let q = b.to_local(p);
        let h = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
        let outside: f64 = (0..3)
            .map(|k| (q[k].abs() - h[k]).max(0.0).powi(2))
            .sum::<f64>()
            .sqrt();
        if outside > 0.0 {
            outside
        } else {
            (0..3)
                .map(|k| h[k] - q[k].abs())
                .fold(f64::INFINITY, f64::min)
        }
    }

    #[test]
    fn clean_scene_points_lie_on_surfaces() {
        for seed in 0..5 {
            let s = generate_scene(&clean_spec(seed)).unwrap();
            assert_eq!(s.points.len(), 4096);
            for p in &s.points {
                if p[2] == 0.0 {
                    continue;
                }
                let d = s
                    .boxes
                    .iter()
                    .map(|b| surface_distance(b, p))
                    .fold(f64::INFINITY, f64::min);
                assert!(d < 1e-9, "point {p:?} is {d} from every box");
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let spec = SyntheticSceneSpec {
            seed: 17,
            ..SyntheticSceneSpec::oriented()
        };
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn boxes_are_inside_room() {
        for scene in generate_dataset(&SyntheticSceneSpec::oriented(), 30).unwrap() {
            for b in &scene.boxes {
                for c in b.corners() {
                    assert!(c[0].abs() <= 2.0 && c[1].abs() <= 2.0);
                    assert!(c[2] >= -1e-12 && c[2] <= 2.5);
                }
            }
        }
    }

    #[test]
    fn occlusion_half_drops_about_half_the_faces() {
        let spec = SyntheticSceneSpec {
            occlusion: 0.5,
            ..SyntheticSceneSpec::oriented()
        };
        let (mut cand, mut vis) = (0u32, 0u32);
        for scene in generate_dataset(&spec, 100).unwrap() {
            for i in 0..scene.boxes.len() {
                cand += scene.candidate_faces[i].count_ones();
                vis += scene.visible_faces[i].count_ones();
            }
        }
        let n = cand as f64;
        let expected = 0.5 * n;
        let sigma = (n * 0.25).sqrt();
        assert!(
            (vis as f64 - expected).abs() <= 3.0 * sigma,
            "{vis} visible of {cand}"
        );
    }

    #[test]
    fn impossible_placement_is_reported() {
        let spec = SyntheticSceneSpec {
            room: [1.0, 1.0, 2.5],
            object_count: [5, 5],
            ..SyntheticSceneSpec::oriented()
        };
        assert!(matches!(generate_scene(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn rejects_bad_fractions() {
        let spec = SyntheticSceneSpec {
            occlusion: 1.5,
            ..SyntheticSceneSpec::oriented()
        };
        assert!(matches!(generate_scene(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn axis_aligned_preset_has_zero_headings() {
        let s = generate_scene(&SyntheticSceneSpec::axis_aligned()).unwrap();
        assert!(s.boxes.iter().all(|b| b.heading == 0.0));
    }
}
