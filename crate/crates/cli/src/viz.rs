//! ASCII PLY export: cloud points as colored vertices, box edges as thin prisms.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use brnet::boxgeom::BoundingBox;
use brnet::data::AnnotationRecord;
use brnet::Point3;

pub const CLOUD_COLOR: [u8; 3] = [160, 160, 160];
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];
pub const VERTICES_PER_EDGE: usize = 8;
pub const TRIANGLES_PER_EDGE: usize = 12;
pub const EDGES_PER_BOX: usize = 12;

#[derive(Debug, Default)]
pub struct Mesh {
    pub vertices: Vec<(Point3, [u8; 3])>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn to_ply(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ply\nformat ascii 1.0");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s.push_str("property float x\nproperty float y\nproperty float z\n");
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        let _ = writeln!(s, "element face {}", self.faces.len());
        s.push_str("property list uchar int vertex_indices\nend_header\n");
        for (p, c) in &self.vertices {
            let _ = writeln!(s, "{} {} {} {} {} {}", p[0] as f32, p[1] as f32, p[2] as f32, c[0], c[1], c[2]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
        }
        s
    }

    /// Square prism of side `width` from `a` to `b`.
    fn add_prism(&mut self, a: Point3, b: Point3, width: f64, color: [u8; 3]) {
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
        let d = [d[0] / len, d[1] / len, d[2] / len];
        let helper = if d[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let u = normalize(cross(d, helper));
        let v = cross(d, u);
        let h = width / 2.0;
        let base = self.vertices.len();
        for end in [a, b] {
            for (su, sv) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
                let p = std::array::from_fn(|k| end[k] + h * (su * u[k] + sv * v[k]));
                self.vertices.push((p, color));
            }
        }
        debug_assert_eq!(self.vertices.len() - base, VERTICES_PER_EDGE);
        let faces = self.faces.len();
        let f = |i: usize, j: usize, k: usize| [base + i, base + j, base + k];
        self.faces.extend([f(0, 2, 1), f(0, 3, 2), f(4, 5, 6), f(4, 6, 7)]);
        for k in 0..4 {
            let n = (k + 1) % 4;
            self.faces.push(f(k, n, 4 + n));
            self.faces.push(f(k, 4 + n, 4 + k));
        }
        debug_assert_eq!(self.faces.len() - faces, TRIANGLES_PER_EDGE);
    }
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Point3) -> Point3 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Corner pairs differing in exactly one axis bit.
pub fn box_edges() -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(EDGES_PER_BOX);
    for i in 0..8 {
        for bit in [1, 2, 4] {
            if i & bit == 0 {
                edges.push((i, i | bit));
            }
        }
    }
    edges
}

/// Classes are colored by their rank among the sorted labels present.
pub fn scene_mesh(cloud: &[Point3], boxes: &[AnnotationRecord], edge_width: f64) -> Mesh {
    let mut mesh = Mesh::default();
    mesh.vertices.extend(cloud.iter().map(|&p| (p, CLOUD_COLOR)));
    let labels: Vec<&str> = boxes
        .iter()
        .map(|b| b.label.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    for r in boxes {
        let rank = labels.binary_search(&r.label.as_str()).unwrap_or(0);
        let color = PALETTE[rank % PALETTE.len()];
        let corners = BoundingBox::new(r.center, r.size, r.heading).corners();
        for (i, j) in box_edges() {
            mesh.add_prism(corners[i], corners[j], edge_width, color);
        }
    }
    mesh
}
