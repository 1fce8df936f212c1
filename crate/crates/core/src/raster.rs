//! Orthographic depth-buffer queries over screen-space triangles.
//!
//! Triangles are bucketed on a uniform screen grid; a query returns the
//! front-most triangle covering a point (largest depth, the viewer sits at
//! `+z`). Used to render synthetic scenes and as the exact-visibility
//! reference for the back-face occlusion approximation.

use nalgebra::{Matrix2xX, Matrix3, Matrix3xX, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::grid;
use crate::sampler::Image;

/// Barycentric slack when testing coverage.
const COVER_EPS: f64 = 1e-9;
/// Largest bucket grid allowed before cells are enlarged.
const MAX_CELLS: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub triangle: usize,
    pub barycentric: [f64; 3],
    pub depth: f64,
}

#[derive(Clone, Debug)]
pub struct DepthBuffer {
    points: Vec<[f64; 2]>,
    depth: Vec<f64>,
    triangles: Vec<[usize; 3]>,
    origin: [f64; 2],
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<u32>>,
}

impl DepthBuffer {
    /// Buckets of side `cell_size` screen units.
    pub fn new(points: &Matrix2xX<f64>, depth: &[f64], triangles: &[[usize; 3]], cell_size: f64) -> Result<Self> {
        let n = points.ncols();
        if depth.len() != n {
            return Err(Error::invalid("depth length does not match the point count"));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid("bucket size must be positive"));
        }
        if triangles.iter().flatten().any(|&v| v >= n) {
            return Err(Error::invalid("triangle references a missing vertex"));
        }
        if !points.iter().chain(depth).all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite raster input"));
        }
        let pts: Vec<[f64; 2]> = points.column_iter().map(|c| [c[0], c[1]]).collect();
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &pts {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if n == 0 {
            lo = [0.0; 2];
            hi = [0.0; 2];
        }
        let mut cell = cell_size;
        let (mut nx, mut ny);
        loop {
            nx = ((hi[0] - lo[0]) / cell).floor() as usize + 1;
            ny = ((hi[1] - lo[1]) / cell).floor() as usize + 1;
            if nx.saturating_mul(ny) <= MAX_CELLS {
                break;
            }
            cell *= 2.0;
        }
        let mut buf = DepthBuffer {
            points: pts,
            depth: depth.to_vec(),
            triangles: Vec::new(),
            origin: lo,
            cell,
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
        };
        for (t, tri) in triangles.iter().enumerate() {
            if buf.twice_area(tri).abs() <= 1e-14 * buf.extent_sq(tri) {
                continue; // edge-on in screen space
            }
            let (mut bl, mut bh) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for &v in tri {
                for a in 0..2 {
                    bl[a] = bl[a].min(buf.points[v][a]);
                    bh[a] = bh[a].max(buf.points[v][a]);
                }
            }
            let (x0, y0) = buf.cell_of(bl[0], bl[1]);
            let (x1, y1) = buf.cell_of(bh[0], bh[1]);
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    buf.buckets[cy * nx + cx].push(t as u32);
                }
            }
        }
        buf.triangles = triangles.to_vec();
        Ok(buf)
    }

    /// Buckets a quarter of the mean screen-space edge length.
    pub fn for_mesh(points: &Matrix2xX<f64>, depth: &[f64], triangles: &[[usize; 3]]) -> Result<Self> {
        let mut total = 0.0;
        let mut count = 0usize;
        for t in triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                if a < points.ncols() && b < points.ncols() {
                    total += (points.column(a) - points.column(b)).norm();
                    count += 1;
                }
            }
        }
        let mean = if count > 0 { total / count as f64 } else { 1.0 };
        let cell = if mean > 0.0 { mean / 4.0 } else { 1.0 };
        Self::new(points, depth, triangles, cell)
    }

    fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let cx = ((x - self.origin[0]) / self.cell)
            .floor()
            .clamp(0.0, (self.nx - 1) as f64);
        let cy = ((y - self.origin[1]) / self.cell)
            .floor()
            .clamp(0.0, (self.ny - 1) as f64);
        (cx as usize, cy as usize)
    }

    fn twice_area(&self, t: &[usize; 3]) -> f64 {
        let [a, b, c] = t.map(|v| self.points[v]);
        (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    }

    fn extent_sq(&self, t: &[usize; 3]) -> f64 {
        let [a, b, c] = t.map(|v| self.points[v]);
        let d = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
        d(a, b).max(d(b, c)).max(d(c, a))
    }

    fn barycentric(&self, t: &[usize; 3], x: f64, y: f64) -> Option<[f64; 3]> {
        let area = self.twice_area(t);
        let [a, b, c] = t.map(|v| self.points[v]);
        let edge = |p: [f64; 2], q: [f64; 2]| (p[0] - x) * (q[1] - y) - (p[1] - y) * (q[0] - x);
        let w = [edge(b, c) / area, edge(c, a) / area, edge(a, b) / area];
        w.iter().all(|v| *v >= -COVER_EPS).then_some(w)
    }

    /// Front-most triangle covering `(x, y)`, if any.
    pub fn front(&self, x: f64, y: f64) -> Option<Hit> {
        if self.nx == 0 || self.ny == 0 {
            return None;
        }
        let fx = (x - self.origin[0]) / self.cell;
        let fy = (y - self.origin[1]) / self.cell;
        if fx < -1.0 || fy < -1.0 || fx > self.nx as f64 + 1.0 || fy > self.ny as f64 + 1.0 {
            return None;
        }
        let (cx, cy) = self.cell_of(x, y);
        let mut best: Option<Hit> = None;
        for &t in &self.buckets[cy * self.nx + cx] {
            let tri = &self.triangles[t as usize];
            let Some(w) = self.barycentric(tri, x, y) else { continue };
            let depth = w[0] * self.depth[tri[0]] + w[1] * self.depth[tri[1]] + w[2] * self.depth[tri[2]];
            if best.is_none_or(|b| depth > b.depth) {
                best = Some(Hit {
                    triangle: t as usize,
                    barycentric: w,
                    depth,
                });
            }
        }
        best
    }

    /// Vertex `v` is visible when its depth is within `tolerance` of the
    /// front depth at its own projection.
    pub fn vertex_visibility(&self, tolerance: f64) -> Vec<bool> {
        (0..self.points.len())
            .into_par_iter()
            .map(|v| {
                let [x, y] = self.points[v];
                match self.front(x, y) {
                    Some(hit) => self.depth[v] >= hit.depth - tolerance,
                    None => true,
                }
            })
            .collect()
    }

    /// Renders per-vertex attributes (`C` values per vertex) at pixel
    /// centres `(k, j)`, `k = 1..=width`, `j = 1..=height`.
    pub fn render(
        &self,
        attributes: &[f64],
        channels: usize,
        height: usize,
        width: usize,
        background: f64,
    ) -> Result<Image> {
        if attributes.len() != self.points.len() * channels {
            return Err(Error::invalid("attribute buffer does not match the vertex count"));
        }
        let mut data = vec![background; height * width * channels];
        data.par_chunks_mut(width * channels)
            .enumerate()
            .for_each(|(row, out)| {
                let y = (row + 1) as f64;
                for col in 0..width {
                    let x = (col + 1) as f64;
                    let Some(hit) = self.front(x, y) else { continue };
                    let tri = &self.triangles[hit.triangle];
                    for ch in 0..channels {
                        out[col * channels + ch] = (0..3)
                            .map(|k| hit.barycentric[k] * attributes[tri[k] * channels + ch])
                            .sum();
                    }
                }
            });
        Image::new(height, width, channels, data)
    }

    /// Whether any triangle covers `(x, y)`.
    pub fn covers(&self, x: f64, y: f64) -> bool {
        self.front(x, y).is_some()
    }
}

/// Grid mesh with every quad split into four triangles around an added
/// centre vertex (index `h * w + quad`), so the triangulation is invariant
/// under the left-right grid mirror. Returns the triangles; centre values of
/// any per-vertex field are the mean of the quad corners.
pub fn split_quads(height: usize, width: usize) -> Vec<[usize; 3]> {
    let n = height * width;
    let mut tris = Vec::with_capacity(4 * (height - 1) * (width - 1));
    for r in 0..height.saturating_sub(1) {
        for c in 0..width.saturating_sub(1) {
            let q = n + r * (width - 1) + c;
            let tl = grid::vertex(width, r, c);
            let tr = grid::vertex(width, r, c + 1);
            let bl = grid::vertex(width, r + 1, c);
            let br = grid::vertex(width, r + 1, c + 1);
            tris.extend_from_slice(&[[tl, tr, q], [tr, br, q], [br, bl, q], [bl, tl, q]]);
        }
    }
    tris
}

/// Appends quad-centre values (corner means) to a per-vertex field with
/// `channels` values per vertex.
pub fn with_quad_centres(height: usize, width: usize, field: &[f64], channels: usize) -> Vec<f64> {
    let mut out = field.to_vec();
    for r in 0..height.saturating_sub(1) {
        for c in 0..width.saturating_sub(1) {
            let corners = [
                grid::vertex(width, r, c),
                grid::vertex(width, r, c + 1),
                grid::vertex(width, r + 1, c),
                grid::vertex(width, r + 1, c + 1),
            ];
            for ch in 0..channels {
                // pairwise sums keep mirrored quads bit-identical
                let a = field[corners[0] * channels + ch] + field[corners[1] * channels + ch];
                let b = field[corners[2] * channels + ch] + field[corners[3] * channels + ch];
                out.push(0.25 * (a + b));
            }
        }
    }
    out
}

/// Grid surface closed by a fan from its rim to an apex (vertex `h * w`),
/// consistently wound with the grid triangles. Without the cap the back of an
/// open surface shows through its rim. The apex sits behind the rim centroid,
/// against the mean normal, at ten times the surface extent, so a convex
/// sheet closes into a convex solid.
pub fn capped_grid(height: usize, width: usize, positions: &Matrix3xX<f64>) -> (Matrix3xX<f64>, Vec<[usize; 3]>) {
    let n = height * width;
    let mut rim: Vec<usize> = (0..width).map(|c| grid::vertex(width, 0, c)).collect();
    rim.extend((1..height).map(|r| grid::vertex(width, r, width - 1)));
    rim.extend((0..width - 1).rev().map(|c| grid::vertex(width, height - 1, c)));
    rim.extend((1..height - 1).rev().map(|r| grid::vertex(width, r, 0)));
    let centroid = rim
        .iter()
        .map(|&v| positions.column(v).into_owned())
        .sum::<Vector3<f64>>()
        / rim.len() as f64;
    let normal: Vector3<f64> = crate::sampler::vertex_normal_sums(height, width, positions)
        .iter()
        .sum();
    let extent = (0..3)
        .map(|k| positions.row(k).max() - positions.row(k).min())
        .fold(0.0, f64::max);
    let apex = if normal.norm() > 0.0 {
        centroid - normal.normalize() * (10.0 * extent)
    } else {
        centroid
    };
    let mut closed = positions.clone().insert_column(n, 0.0);
    closed.set_column(n, &apex);
    let mut tris = grid::triangles(height, width);
    for k in 0..rim.len() {
        tris.push([rim[(k + 1) % rim.len()], rim[k], n]);
    }
    (closed, tris)
}

/// Exact visibility of grid vertices under rotation `R` and orthographic
/// projection, from a depth buffer over the capped surface.
pub fn capped_grid_visibility(
    height: usize,
    width: usize,
    positions: &Matrix3xX<f64>,
    rotation: &Matrix3<f64>,
    tolerance: f64,
) -> Result<Vec<bool>> {
    let (closed, tris) = capped_grid(height, width, positions);
    let rotated = rotation * closed;
    let points = Matrix2xX::from_fn(rotated.ncols(), |i, j| rotated[(i, j)]);
    let depth: Vec<f64> = rotated.row(2).iter().copied().collect();
    let mut vis = DepthBuffer::for_mesh(&points, &depth, &tris)?.vertex_visibility(tolerance);
    vis.truncate(height * width);
    Ok(vis)
}

/// Grid vertices of the capped surface whose incident triangles face both
/// towards and away from the viewer under `R`.
pub fn capped_grid_silhouette(
    height: usize,
    width: usize,
    positions: &Matrix3xX<f64>,
    rotation: &Matrix3<f64>,
) -> Vec<bool> {
    let (closed, tris) = capped_grid(height, width, positions);
    let view = rotation.row(2).transpose();
    let mut front = vec![false; closed.ncols()];
    let mut back = vec![false; closed.ncols()];
    for t in &tris {
        let p0 = closed.column(t[0]);
        let normal = (closed.column(t[1]) - p0).cross(&(closed.column(t[2]) - p0));
        let side = if view.dot(&normal) > 0.0 { &mut front } else { &mut back };
        for &v in t {
            side[v] = true;
        }
    }
    (0..height * width).map(|v| front[v] && back[v]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> (Matrix2xX<f64>, Vec<f64>, Vec<[usize; 3]>) {
        let pts = Matrix2xX::from_column_slice(&[0.0, 0.0, 4.0, 0.0, 4.0, 4.0, 0.0, 4.0]);
        (pts, vec![0.0, 1.0, 2.0, 1.0], vec![[0, 1, 2], [0, 2, 3]])
    }

    #[test]
    fn depth_is_interpolated() {
        let (p, d, t) = square();
        let buf = DepthBuffer::new(&p, &d, &t, 0.5).unwrap();
        let hit = buf.front(2.0, 1.0).unwrap();
        assert!((hit.depth - 0.75).abs() < 1e-12);
        assert!(buf.front(5.0, 1.0).is_none());
        assert!(buf.front(-100.0, 1.0).is_none());
    }

    #[test]
    fn nearest_layer_wins() {
        let p = Matrix2xX::from_column_slice(&[0.0, 0.0, 4.0, 0.0, 0.0, 4.0, 0.0, 0.0, 4.0, 0.0, 0.0, 4.0]);
        let d = vec![0.0, 0.0, 0.0, 5.0, 5.0, 5.0];
        let buf = DepthBuffer::for_mesh(&p, &d, &[[0, 1, 2], [3, 4, 5]]).unwrap();
        assert_eq!(buf.front(1.0, 1.0).unwrap().triangle, 1);
        let vis = buf.vertex_visibility(1e-6);
        assert_eq!(vis, vec![false, false, false, true, true, true]);
    }

    #[test]
    fn render_interpolates_attributes() {
        let (p, d, t) = square();
        let pts = p.map(|v| v + 1.0); // pixel centres 1..=5
        let buf = DepthBuffer::new(&pts, &d, &t, 1.0).unwrap();
        let attrs = vec![0.0, 1.0, 1.0, 0.0];
        let img = buf.render(&attrs, 1, 6, 6, -1.0).unwrap();
        for j in 1..=5 {
            for k in 1..=5 {
                let expected = (k as f64 - 1.0) / 4.0;
                assert!((img.at(j - 1, k - 1, 0) - expected).abs() < 1e-12);
            }
        }
        assert_eq!(img.at(5, 5, 0), -1.0);
    }

    #[test]
    fn split_quads_is_mirror_invariant() {
        let (h, w) = (4, 5);
        let tris = split_quads(h, w);
        assert_eq!(tris.len(), 4 * 3 * 4);
        let n = h * w;
        let mirror = |v: usize| {
            if v < n {
                grid::mirror_map(h, w)[v]
            } else {
                let q = v - n;
                n + (q / (w - 1)) * (w - 1) + (w - 2 - q % (w - 1))
            }
        };
        let mut canon: Vec<Vec<usize>> = tris
            .iter()
            .map(|t| {
                let mut s = t.to_vec();
                s.sort();
                s
            })
            .collect();
        canon.sort();
        let mut mirrored: Vec<Vec<usize>> = tris
            .iter()
            .map(|t| {
                let mut s: Vec<usize> = t.iter().map(|&v| mirror(v)).collect();
                s.sort();
                s
            })
            .collect();
        mirrored.sort();
        assert_eq!(canon, mirrored);
    }

    #[test]
    fn cap_closes_the_surface_consistently() {
        let (h, w) = (4, 5);
        let pos = Matrix3xX::from_fn(h * w, |k, v| match k {
            0 => (v % w) as f64,
            1 => (v / w) as f64,
            _ => 1.0,
        });
        let (closed, tris) = capped_grid(h, w, &pos);
        assert_eq!(closed.ncols(), h * w + 1);
        let mut directed = std::collections::HashSet::new();
        for t in &tris {
            for k in 0..3 {
                assert!(
                    directed.insert((t[k], t[(k + 1) % 3])),
                    "edge traversed twice in one direction"
                );
            }
        }
        assert!(
            directed.iter().all(|&(a, b)| directed.contains(&(b, a))),
            "surface is not closed"
        );
        // a flat sheet seen face-on: the cap faces away, so only the rim touches both sides
        let sil = capped_grid_silhouette(h, w, &pos, &Matrix3::identity());
        for (v, &on) in sil.iter().enumerate().take(h * w) {
            let (r, c) = (v / w, v % w);
            assert_eq!(on, r == 0 || c == 0 || r == h - 1 || c == w - 1);
        }
    }
}
