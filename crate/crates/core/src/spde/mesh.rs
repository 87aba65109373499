//! Triangular meshes over the farm domain.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use spade::{DelaunayTriangulation, Point2, Triangulation};

use crate::error::{Error, Result};

const FORMAT_HEADER: &str = "windcast-mesh 1";
const MAX_REFINEMENT_ROUNDS: usize = 40;

/// Piecewise-linear triangulation. Triangles are counter-clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
}

/// Mesh construction controls. Lengths in km.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshParams {
    /// Longest allowed edge inside the convex hull of the locations.
    pub max_edge_inner: f64,
    /// Longest allowed edge in the extension ring.
    pub max_edge_outer: f64,
    /// Ring width as a fraction of the hull diameter.
    pub extension_factor: f64,
    /// Locations closer than this to an existing vertex are not inserted.
    pub cutoff: f64,
}

impl MeshParams {
    pub fn new(max_edge_inner: f64, extension_factor: f64) -> Self {
        Self {
            max_edge_inner,
            max_edge_outer: 3.0 * max_edge_inner,
            extension_factor,
            cutoff: 0.05 * max_edge_inner,
        }
    }

    /// Inner edge a third of the prior range, ring 0.3 of the diameter.
    pub fn for_range(prior_range: f64) -> Self {
        Self::new(prior_range / 3.0, 0.3)
    }

    fn validate(&self) -> Result<()> {
        let ok = self.max_edge_inner > 0.0
            && self.max_edge_outer >= self.max_edge_inner
            && self.extension_factor > 0.0
            && self.cutoff >= 0.0
            && self.cutoff < self.max_edge_inner;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid mesh parameters {self:?}")))
        }
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Counter-clockwise convex hull without collinear points (monotone chain).
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| cross([0.0, 0.0], poly[i], poly[(i + 1) % n]))
        .sum::<f64>()
        / 2.0
}

/// Signed distance to a counter-clockwise convex polygon: negative inside.
pub fn convex_signed_distance(poly: &[[f64; 2]], p: [f64; 2]) -> f64 {
    let n = poly.len();
    let mut inside = true;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let ab = [b[0] - a[0], b[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        let t = (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0);
        best = best.min(dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]]));
        if cross(a, b, p) < 0.0 {
            inside = false;
        }
    }
    if inside {
        -best
    } else {
        best
    }
}

fn diameter(points: &[[f64; 2]]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, &a) in points.iter().enumerate() {
        for &b in &points[i + 1..] {
            d = d.max(dist(a, b));
        }
    }
    d
}

/// Points at spacing ≤ `h` along a closed polygon, vertices included.
fn subdivide_boundary(poly: &[[f64; 2]], h: f64) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let n = (dist(a, b) / h).ceil().max(1.0) as usize;
        for k in 0..n {
            let t = k as f64 / n as f64;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

/// Equilateral triangular lattice covering the bounding box of `poly`.
fn lattice(poly: &[[f64; 2]], h: f64) -> Vec<[f64; 2]> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in poly {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let dy = h * 3f64.sqrt() / 2.0;
    let mut out = Vec::new();
    let mut row = 0usize;
    let mut y = lo[1];
    while y <= hi[1] {
        let shift = if row % 2 == 1 { h / 2.0 } else { 0.0 };
        let mut x = lo[0] + shift;
        while x <= hi[0] {
            out.push([x, y]);
            x += h;
        }
        y += dy;
        row += 1;
    }
    out
}

struct Builder {
    tri: DelaunayTriangulation<Point2<f64>>,
    points: Vec<[f64; 2]>,
    cell: f64,
    grid: std::collections::HashMap<(i64, i64), Vec<usize>>,
}

impl Builder {
    fn new(cell: f64) -> Self {
        Self {
            tri: DelaunayTriangulation::new(),
            points: Vec::new(),
            cell,
            grid: Default::default(),
        }
    }

    fn key(&self, p: [f64; 2]) -> (i64, i64) {
        (
            (p[0] / self.cell).floor() as i64,
            (p[1] / self.cell).floor() as i64,
        )
    }

    fn nearest_within(&self, p: [f64; 2], r: f64) -> bool {
        let (kx, ky) = self.key(p);
        let reach = (r / self.cell).ceil() as i64;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                if let Some(ids) = self.grid.get(&(kx + dx, ky + dy)) {
                    if ids.iter().any(|&i| dist(self.points[i], p) < r) {
                        return true;
                    }
                }
            }
        }
        false
    }

    fn insert(&mut self, p: [f64; 2], min_sep: f64) -> Result<bool> {
        if min_sep > 0.0 && self.nearest_within(p, min_sep) {
            return Ok(false);
        }
        let before = self.tri.num_vertices();
        self.tri.insert(Point2::new(p[0], p[1])).map_err(|e| {
            Error::DegenerateGeometry(format!("cannot insert ({}, {}): {e:?}", p[0], p[1]))
        })?;
        if self.tri.num_vertices() == before {
            return Ok(false);
        }
        let id = self.points.len();
        self.points.push(p);
        let k = self.key(p);
        self.grid.entry(k).or_default().push(id);
        Ok(true)
    }
}

/// Counter-clockwise boundary around the hull grown by `ext`, sampled at
/// most 0.9·`h` apart.
///
/// The corner polygon circumscribes hull ⊕ disk(`ext`) with `m` equally
/// spaced edge normals, so it contains the grown hull, turns by 2π/m at every
/// corner and has no edge shorter than 2·ext·tan(π/m). Edges are subdivided
/// along a slight outward parabola so that no three boundary vertices are
/// collinear: Delaunay triangulations turn those into slivers.
fn outer_ring(hull: &[[f64; 2]], ext: f64, h: f64) -> Vec<[f64; 2]> {
    // shortest corner edge about h/2
    let m = (std::f64::consts::PI / (0.25 * h / ext).atan())
        .ceil()
        .clamp(8.0, 256.0) as usize;
    let step = std::f64::consts::TAU / m as f64;
    let normals: Vec<[f64; 2]> = (0..m)
        .map(|k| [(k as f64 * step).cos(), (k as f64 * step).sin()])
        .collect();
    let support: Vec<f64> = normals
        .iter()
        .map(|u| {
            hull.iter()
                .map(|v| v[0] * u[0] + v[1] * u[1])
                .fold(f64::NEG_INFINITY, f64::max)
                + ext
        })
        .collect();
    let det = step.sin();
    let corners: Vec<[f64; 2]> = (0..m)
        .map(|k| {
            let j = (k + 1) % m;
            let (u, s, w, t) = (normals[k], support[k], normals[j], support[j]);
            [(s * w[1] - t * u[1]) / det, (u[0] * t - w[0] * s) / det]
        })
        .collect();
    let mut out = Vec::new();
    for k in 0..m {
        let (a, b) = (corners[k], corners[(k + 1) % m]);
        let normal = normals[(k + 1) % m];
        let len = dist(a, b);
        // end slope 4·sag/len stays below a quarter of the corner turn
        let sag = len * step / 16.0;
        let parts = (len / (0.9 * h)).ceil().max(1.0) as usize;
        for i in 0..parts {
            let t = i as f64 / parts as f64;
            let bulge = sag * 4.0 * t * (1.0 - t);
            out.push([
                a[0] + t * (b[0] - a[0]) + bulge * normal[0],
                a[1] + t * (b[1] - a[1]) + bulge * normal[1],
            ]);
        }
    }
    out
}

/// Delaunay mesh over the convex hull of `locations` extended by a ring
/// `extension_factor` hull diameters wide.
///
/// Every location becomes a vertex unless it lies within `cutoff` of an
/// earlier one. The hull interior is filled with a triangular lattice and
/// refined until no edge whose midpoint lies in the hull exceeds
/// `max_edge_inner`; the ring uses `max_edge_outer`.
pub fn build_mesh(locations: &[[f64; 2]], params: &MeshParams) -> Result<Mesh> {
    params.validate()?;
    if locations
        .iter()
        .any(|p| !p[0].is_finite() || !p[1].is_finite())
    {
        return Err(Error::DegenerateGeometry("non-finite location".into()));
    }
    let hull = convex_hull(locations);
    let diam = diameter(&hull);
    if hull.len() < 3 || polygon_area(&hull) <= 1e-10 * diam * diam {
        return Err(Error::DegenerateGeometry(
            "locations are collinear or coincident".into(),
        ));
    }
    let h_in = params.max_edge_inner;
    let h_out = params.max_edge_outer;
    let ext = params.extension_factor * diam;

    let outer = outer_ring(&hull, ext, h_out);
    let mut b = Builder::new(h_in);
    for &p in locations {
        b.insert(p, params.cutoff)?;
    }
    let sep = 0.45 * h_in;
    for p in subdivide_boundary(&hull, h_in) {
        b.insert(p, sep)?;
    }
    for p in lattice(&hull, 0.98 * h_in) {
        if convex_signed_distance(&hull, p) < -0.3 * h_in {
            b.insert(p, sep)?;
        }
    }
    // every ring point must land, or refinement would split a boundary edge
    let ring_sep = sep.min(0.5 * ext);
    for &p in &outer {
        b.insert(p, ring_sep)?;
    }
    for p in lattice(&outer, 0.98 * h_out) {
        if convex_signed_distance(&hull, p) > 0.5 * h_out
            && convex_signed_distance(&outer, p) < -0.3 * h_out
        {
            b.insert(p, sep)?;
        }
    }

    for _ in 0..MAX_REFINEMENT_ROUNDS {
        let mut split = Vec::new();
        for e in b.tri.undirected_edges() {
            let [u, v] = e.vertices();
            let (pu, pv) = (u.position(), v.position());
            let (a, c) = ([pu.x, pu.y], [pv.x, pv.y]);
            let mid = [(a[0] + c[0]) / 2.0, (a[1] + c[1]) / 2.0];
            let limit = if convex_signed_distance(&hull, mid) <= 1e-9 * diam {
                h_in
            } else {
                h_out
            };
            let len = dist(a, c);
            if len > limit {
                if e.is_part_of_convex_hull() {
                    // an exact midpoint rounds to either side of the boundary
                    // and leaves a zero-area triangle; bulge it outward instead
                    let o = outward_normal(a, c, &b.points);
                    split.push([mid[0] + 0.05 * len * o[0], mid[1] + 0.05 * len * o[1]]);
                } else {
                    split.push(mid);
                }
            }
        }
        let mut added = 0;
        for p in split {
            added += usize::from(b.insert(p, 1e-6 * h_in)?);
        }
        // a midpoint that rounds onto an existing vertex cannot split its edge
        if added == 0 {
            return finish(&b);
        }
    }
    Err(Error::DegenerateGeometry(
        "mesh refinement did not terminate".into(),
    ))
}

/// Unit normal of segment `a`–`c` pointing away from the other points.
fn outward_normal(a: [f64; 2], c: [f64; 2], points: &[[f64; 2]]) -> [f64; 2] {
    let len = dist(a, c);
    let n = [(c[1] - a[1]) / len, (a[0] - c[0]) / len];
    let side: f64 = points
        .iter()
        .map(|p| (p[0] - a[0]) * n[0] + (p[1] - a[1]) * n[1])
        .sum();
    if side > 0.0 {
        [-n[0], -n[1]]
    } else {
        n
    }
}

fn finish(b: &Builder) -> Result<Mesh> {
    let vertices: Vec<[f64; 2]> = b
        .tri
        .vertices()
        .map(|v| {
            let p = v.position();
            [p.x, p.y]
        })
        .collect();
    let triangles: Vec<[usize; 3]> = b
        .tri
        .inner_faces()
        .map(|f| {
            let [a, c, d] = f.vertices();
            [a.fix().index(), c.fix().index(), d.fix().index()]
        })
        .collect();
    Mesh::new(vertices, triangles)
}

impl Mesh {
    /// Validates indices and orients every triangle counter-clockwise.
    pub fn new(vertices: Vec<[f64; 2]>, mut triangles: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.len() < 3 || triangles.is_empty() {
            return Err(Error::DegenerateGeometry(
                "mesh needs at least 3 vertices and 1 triangle".into(),
            ));
        }
        for t in triangles.iter_mut() {
            if t.iter().any(|&i| i >= vertices.len()) {
                return Err(Error::DegenerateGeometry(format!(
                    "triangle {t:?} references a missing vertex"
                )));
            }
            let area = cross(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
            if area < 0.0 {
                t.swap(1, 2);
            } else if area == 0.0 || !area.is_finite() {
                return Err(Error::DegenerateGeometry(format!(
                    "triangle {t:?} has zero area"
                )));
            }
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    /// `nx × ny` vertices at the given spacing, cells split along
    /// alternating diagonals.
    pub fn regular_grid(nx: usize, ny: usize, spacing: f64) -> Result<Self> {
        if nx < 2 || ny < 2 || !(spacing > 0.0) {
            return Err(Error::Argument(
                "grid needs nx, ny >= 2 and positive spacing".into(),
            ));
        }
        let idx = |i: usize, j: usize| j * nx + i;
        let mut vertices = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                vertices.push([i as f64 * spacing, j as f64 * spacing]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                if (i + j) % 2 == 0 {
                    triangles.push([a, b, c]);
                    triangles.push([a, c, d]);
                } else {
                    triangles.push([a, b, d]);
                    triangles.push([b, c, d]);
                }
            }
        }
        Self::new(vertices, triangles)
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        cross(self.vertices[a], self.vertices[b], self.vertices[c]) / 2.0
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| self.triangle_area(t))
            .sum()
    }

    /// Unique undirected edges as (low, high) vertex pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }

    pub fn edge_length(&self, (a, b): (usize, usize)) -> f64 {
        dist(self.vertices[a], self.vertices[b])
    }

    fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        let total = cross(pa, pb, pc);
        [
            cross(p, pb, pc) / total,
            cross(pa, p, pc) / total,
            cross(pa, pb, p) / total,
        ]
    }

    /// Containing triangle and barycentric weights, or `None` outside.
    ///
    /// Points on shared edges resolve to the triangle with the largest
    /// minimum weight; weights are clamped to be nonnegative and sum to 1.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for t in 0..self.triangles.len() {
            let w = self.barycentric(t, p);
            let m = w[0].min(w[1]).min(w[2]);
            if m >= -1e-10 && best.as_ref().is_none_or(|b| m > b.2) {
                best = Some((t, w, m));
            }
        }
        best.map(|(t, w, _)| {
            let mut w = w.map(|x| x.max(0.0));
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            (t, w)
        })
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{FORMAT_HEADER}")?;
        writeln!(w, "vertices {}", self.vertices.len())?;
        for v in &self.vertices {
            writeln!(w, "{:?} {:?}", v[0], v[1])?;
        }
        writeln!(w, "triangles {}", self.triangles.len())?;
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
        let mut next = || -> Result<(u64, String)> {
            match lines.next() {
                Some((n, l)) => Ok((n, l?)),
                None => Err(Error::Parse {
                    line: 0,
                    message: "unexpected end of mesh file".into(),
                }),
            }
        };
        let (n, header) = next()?;
        if header.trim() != FORMAT_HEADER {
            return Err(Error::Parse {
                line: n,
                message: format!("expected header {FORMAT_HEADER:?}"),
            });
        }
        let count = |n: u64, line: &str, key: &str| -> Result<usize> {
            let mut it = line.split_whitespace();
            match (it.next(), it.next().and_then(|s| s.parse().ok()), it.next()) {
                (Some(k), Some(c), None) if k == key => Ok(c),
                _ => Err(Error::Parse {
                    line: n,
                    message: format!("expected '{key} <count>'"),
                }),
            }
        };
        let (n, l) = next()?;
        let nv = count(n, &l, "vertices")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (n, l) = next()?;
            let v: Vec<f64> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e: std::num::ParseFloatError| Error::Parse {
                    line: n,
                    message: e.to_string(),
                })?;
            if v.len() != 2 {
                return Err(Error::Parse {
                    line: n,
                    message: "expected two coordinates".into(),
                });
            }
            vertices.push([v[0], v[1]]);
        }
        let (n, l) = next()?;
        let nt = count(n, &l, "triangles")?;
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (n, l) = next()?;
            let t: Vec<usize> = l
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e: std::num::ParseIntError| Error::Parse {
                    line: n,
                    message: e.to_string(),
                })?;
            if t.len() != 3 {
                return Err(Error::Parse {
                    line: n,
                    message: "expected three vertex indices".into(),
                });
            }
            triangles.push([t[0], t[1], t[2]]);
        }
        Self::new(vertices, triangles)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inner_edges_max(mesh: &Mesh, locations: &[[f64; 2]]) -> f64 {
        let hull = convex_hull(locations);
        mesh.edges()
            .into_iter()
            .filter(|&(a, b)| {
                let (p, q) = (mesh.vertices()[a], mesh.vertices()[b]);
                convex_signed_distance(&hull, [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0]) <= 1e-12
            })
            .map(|e| mesh.edge_length(e))
            .fold(0.0, f64::max)
    }

    #[test]
    fn three_points_large_edge() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let m = build_mesh(&pts, &MeshParams::new(10.0, 0.3)).unwrap();
        assert!(m.n_vertices() >= 3);
        for p in pts {
            assert!(m.locate(p).is_some());
        }
    }

    #[test]
    fn unit_square_inner_edges_bounded() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let m = build_mesh(&pts, &MeshParams::new(0.1, 0.3)).unwrap();
        assert!(inner_edges_max(&m, &pts) <= 0.1);
        assert!((0..m.triangles().len()).all(|t| m.triangle_area(t) > 0.0));
        // the ring extends 0.3 · √2 beyond the square
        let reach = m
            .vertices()
            .iter()
            .map(|v| v[0].max(v[1]))
            .fold(0.0, f64::max);
        assert!(reach > 1.3);
    }

    #[test]
    fn collinear_rejected() {
        let pts = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert!(matches!(
            build_mesh(&pts, &MeshParams::new(1.0, 0.3)),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn hull_and_distance() {
        let h = convex_hull(&[
            [0.0, 0.0],
            [2.0, 0.0],
            [1.0, 1.0],
            [2.0, 2.0],
            [0.0, 2.0],
            [1.0, 0.0],
        ]);
        assert_eq!(h.len(), 4);
        assert!((polygon_area(&h) - 4.0).abs() < 1e-12);
        assert!((convex_signed_distance(&h, [1.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((convex_signed_distance(&h, [3.0, 1.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn locate_vertex_and_centroid() {
        let m = Mesh::new(vec![[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]], vec![[0, 2, 1]]).unwrap();
        let (_, w) = m.locate([1.0, 1.0]).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        let (t, w) = m.locate([3.0, 0.0]).unwrap();
        let [a, b, c] = m.triangles()[t];
        let at = [a, b, c].iter().position(|&v| v == 1).unwrap();
        assert_eq!(w[at], 1.0);
        assert!(m.locate([2.0, 2.0]).is_none());
    }

    #[test]
    fn text_round_trip() {
        let m = Mesh::regular_grid(4, 3, 0.7).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let back = Mesh::read_text(buf.as_slice()).unwrap();
        assert_eq!(m, back);
        let bad = b"windcast-mesh 1\nvertices 1\n0 0 0\n";
        assert!(matches!(
            Mesh::read_text(&bad[..]),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(Mesh::read_text(&b"mesh v0\n"[..]).is_err());
    }

    #[test]
    fn regular_grid_area() {
        let m = Mesh::regular_grid(5, 4, 2.0).unwrap();
        assert_eq!(m.n_vertices(), 20);
        assert_eq!(m.triangles().len(), 24);
        assert!((m.total_area() - 8.0 * 6.0).abs() < 1e-12);
    }

    #[test]
    fn random_farms_covered_with_ring_and_factorizable() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for n in [5, 50, 200] {
            let pts: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.random::<f64>() * 150.0, rng.random::<f64>() * 250.0])
                .collect();
            let params = MeshParams::for_range(62.1);
            let m = build_mesh(&pts, &params).unwrap();
            assert!(inner_edges_max(&m, &pts) <= params.max_edge_inner);
            let hull = convex_hull(&pts);
            let ext = 0.99 * params.extension_factor * diameter(&hull);
            for v in &hull {
                for k in 0..8 {
                    let a = k as f64 * std::f64::consts::TAU / 8.0;
                    assert!(m
                        .locate([v[0] + ext * a.cos(), v[1] + ext * a.sin()])
                        .is_some());
                }
            }
            for &p in &pts {
                assert!(m.locate(p).is_some());
            }
            let fem = crate::spde::fem_matrices(&m);
            let kappa = 8f64.sqrt() / 62.1;
            assert!(crate::spde::spatial_precision(
                &fem,
                kappa,
                crate::spde::tau_from_sigma(1.0, kappa)
            )
            .is_ok());
        }
    }
}
