use std::collections::HashMap;
use std::sync::OnceLock;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::renderer::Field;

/// Triangle mesh in scene units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Every undirected edge is used by exactly two triangles, once in each
    /// direction.
    pub fn is_watertight(&self) -> bool {
        let mut count: HashMap<(usize, usize), (u32, u32)> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let e = count.entry((a.min(b), a.max(b))).or_default();
                if a < b {
                    e.0 += 1
                } else {
                    e.1 += 1
                }
            }
        }
        !count.is_empty() && count.values().all(|&(f, b)| f == 1 && b == 1)
    }

    pub fn triangle_normal(&self, t: usize) -> [f64; 3] {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let n = self.triangle_normal(t);
        0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }
}

/// Centre of voxel `i` of a `g`-voxel axis spanning `[-1, 1]`.
pub fn voxel_center(i: usize, g: usize) -> f64 {
    -1.0 + (i as f64 + 0.5) * 2.0 / g as f64
}

/// Samples `field`'s density at the `G³` voxel centres of `[-1, 1]³`,
/// indexed `[x][y][z]`.
pub fn density_grid(field: &dyn Field, g: usize) -> Result<Tensor> {
    if g < 2 {
        return Err(Error::invalid(format!("grid resolution must be >= 2, got {g}")));
    }
    let mut data = Vec::with_capacity(g * g * g);
    for i in 0..g {
        let pts: Vec<[f64; 3]> = (0..g * g).map(|jk| [voxel_center(i, g), voxel_center(jk / g, g), voxel_center(jk % g, g)]).collect();
        data.extend_from_slice(field.query(&pts)?.1.data());
    }
    Tensor::new([g, g, g], data)
}

/// Corner `c` of a cube has offset `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
fn corner(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The twelve cube edges as corner pairs `(lo, hi)` differing in one bit.
const EDGES: [(usize, usize); 12] =
    [(0, 1), (2, 3), (4, 5), (6, 7), (0, 2), (1, 3), (4, 6), (5, 7), (0, 4), (1, 5), (2, 6), (3, 7)];

/// Faces as corner cycles with their outward normals.
const FACES: [([usize; 4], [i32; 3]); 6] = [
    ([0, 2, 6, 4], [-1, 0, 0]),
    ([1, 3, 7, 5], [1, 0, 0]),
    ([0, 1, 5, 4], [0, -1, 0]),
    ([2, 3, 7, 6], [0, 1, 0]),
    ([0, 1, 3, 2], [0, 0, -1]),
    ([4, 5, 7, 6], [0, 0, 1]),
];

fn edge_of(a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    EDGES.iter().position(|e| *e == key).expect("corners share an edge")
}

fn edge_mid(e: usize) -> [f64; 3] {
    let (a, b) = EDGES[e];
    let (p, q) = (corner(a), corner(b));
    std::array::from_fn(|k| 0.5 * (p[k] + q[k]) as f64)
}

/// Closed polygons (as cube-edge cycles) for one inside/outside corner
/// pattern. On each face, crossing edges are paired so that segments cut off
/// inside corners; the choice depends on the face alone, so neighbouring
/// cubes agree and the surface closes. Segments are oriented so that loops
/// wind counter-clockwise seen from the outside (lower values).
fn polygons_for(case: usize) -> Vec<Vec<u8>> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mut next: [Option<usize>; 12] = [None; 12];
    for (cyc, n) in FACES {
        let mut segs: Vec<(usize, usize, usize)> = Vec::new();
        let crossings: Vec<usize> = (0..4).filter(|&i| inside(cyc[i]) != inside(cyc[(i + 1) % 4])).collect();
        match crossings.len() {
            0 => {}
            2 => {
                let (i, j) = (crossings[0], crossings[1]);
                // Any inside corner of the face lies on the inside side.
                let c_in = (0..4).map(|k| cyc[k]).find(|&c| inside(c)).expect("a crossing face has an inside corner");
                segs.push((edge_of(cyc[i], cyc[(i + 1) % 4]), edge_of(cyc[j], cyc[(j + 1) % 4]), c_in));
            }
            4 => {
                for k in 0..4 {
                    if inside(cyc[k]) {
                        let prev = edge_of(cyc[(k + 3) % 4], cyc[k]);
                        let nxt = edge_of(cyc[k], cyc[(k + 1) % 4]);
                        segs.push((prev, nxt, cyc[k]));
                    }
                }
            }
            _ => unreachable!("a face has an even number of sign changes"),
        }
        for (a, b, c_in) in segs {
            let (pa, pb) = (edge_mid(a), edge_mid(b));
            let ci = corner(c_in);
            let d: [f64; 3] = std::array::from_fn(|k| pb[k] - pa[k]);
            let m: [f64; 3] = std::array::from_fn(|k| ci[k] as f64 - 0.5 * (pa[k] + pb[k]));
            let cr = [d[1] * m[2] - d[2] * m[1], d[2] * m[0] - d[0] * m[2], d[0] * m[1] - d[1] * m[0]];
            let s: f64 = (0..3).map(|k| cr[k] * n[k] as f64).sum();
            let (from, to) = if s < 0.0 { (a, b) } else { (b, a) };
            debug_assert!(next[from].is_none());
            next[from] = Some(to);
        }
    }
    let mut seen = [false; 12];
    let mut polys = Vec::new();
    for start in 0..12 {
        if seen[start] || next[start].is_none() {
            continue;
        }
        let mut poly = Vec::new();
        let mut e = start;
        while !seen[e] {
            seen[e] = true;
            poly.push(e as u8);
            e = next[e].expect("face segments form closed loops");
        }
        polys.push(poly);
    }
    polys
}

/// Whether two cube edges lie on a common face.
fn share_face(e1: usize, e2: usize) -> bool {
    let (a, b) = EDGES[e1];
    let (c, d) = EDGES[e2];
    (0..3).any(|bit| [a, b, c, d].iter().all(|&x| x >> bit & 1 == a >> bit & 1))
}

/// Triangulates a polygon without diagonals that lie in a cube face: such a
/// diagonal would coincide with the neighbouring cube's and pinch the mesh.
fn triangulate(poly: &[u8]) -> Vec<[u8; 3]> {
    let n = poly.len();
    let ok = |i: usize, j: usize| j == i + 1 || (i == 0 && j == n - 1) || !share_face(poly[i] as usize, poly[j] as usize);
    // best[i][j]: apex k splitting the sub-polygon i..=j, if one exists.
    let mut best = vec![vec![None; n]; n];
    for len in 2..n {
        for i in 0..n - len {
            let j = i + len;
            if !ok(i, j) {
                continue;
            }
            best[i][j] = (i + 1..j).find(|&k| (k == i + 1 || best[i][k].is_some()) && (k + 1 == j || best[k][j].is_some()));
        }
    }
    fn emit(i: usize, j: usize, best: &[Vec<Option<usize>>], poly: &[u8], out: &mut Vec<[u8; 3]>) {
        if j <= i + 1 {
            return;
        }
        let k = best[i][j].expect("a face-free triangulation exists");
        out.push([poly[i], poly[k], poly[j]]);
        emit(i, k, best, poly, out);
        emit(k, j, best, poly, out);
    }
    let mut out = Vec::with_capacity(n - 2);
    emit(0, n - 1, &best, poly, &mut out);
    out
}

/// The 256-entry case table: triangles as cube-edge triples, built once.
pub fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(|c| polygons_for(c).iter().flat_map(|p| triangulate(p)).collect()).collect())
}

/// Extracts the `iso` level set of a `G × G × G` grid of voxel-centre
/// samples over `[-1, 1]³` (see [`density_grid`]). Values above `iso` are
/// inside; triangle normals point towards lower values. Vertices are
/// welded per grid edge and numbered in cube scan order.
pub fn marching_cubes(grid: &Tensor, iso: f64) -> Result<TriMesh> {
    let s = grid.shape();
    if s.len() != 3 || s[0] != s[1] || s[1] != s[2] {
        return Err(Error::Shape(format!("marching cubes needs a cubic grid, got {s:?}")));
    }
    let g = s[0];
    if g < 2 {
        return Err(Error::invalid(format!("grid resolution must be >= 2, got {g}")));
    }
    if !iso.is_finite() {
        return Err(Error::invalid("iso level must be finite"));
    }
    let v = grid.data();
    let at = |p: [usize; 3]| v[(p[0] * g + p[1]) * g + p[2]];
    let table = case_table();
    let mut mesh = TriMesh::default();
    let mut welded: HashMap<usize, usize> = HashMap::new();
    for i in 0..g - 1 {
        for j in 0..g - 1 {
            for k in 0..g - 1 {
                let base = [i, j, k];
                let pos = |c: usize| {
                    let o = corner(c);
                    [base[0] + o[0], base[1] + o[1], base[2] + o[2]]
                };
                let case = (0..8).fold(0, |acc, c| acc | ((at(pos(c)) > iso) as usize) << c);
                let tris = &table[case];
                if tris.is_empty() {
                    continue;
                }
                let mut vertex = |e: u8| {
                    let (a, b) = EDGES[e as usize];
                    let (pa, pb) = (pos(a), pos(b));
                    let axis = (b - a).trailing_zeros() as usize;
                    let key = ((pa[0] * g + pa[1]) * g + pa[2]) * 3 + axis;
                    *welded.entry(key).or_insert_with(|| {
                        let (va, vb) = (at(pa), at(pb));
                        let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
                        let x = std::array::from_fn(|d| {
                            let (ca, cb) = (voxel_center(pa[d], g), voxel_center(pb[d], g));
                            ca + t * (cb - ca)
                        });
                        mesh.vertices.push(x);
                        mesh.vertices.len() - 1
                    })
                };
                for tri in tris {
                    let t = tri.map(&mut vertex);
                    mesh.triangles.push(t);
                }
            }
        }
    }
    let keep: Vec<bool> = (0..mesh.triangles.len()).map(|t| mesh.triangle_area(t) > 1e-12).collect();
    let mut t = 0;
    mesh.triangles.retain(|_| {
        t += 1;
        keep[t - 1]
    });
    Ok(mesh)
}

#[cfg(test)]
pub(crate) fn tests_edges() -> [(usize, usize); 12] {
    EDGES
}

#[cfg(test)]
pub(crate) fn tests_polygons(case: usize) -> Vec<Vec<u8>> {
    polygons_for(case)
}
