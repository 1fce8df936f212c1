//! Output-grid construction: Tutte embedding of a disk-topology mesh into the
//! unit square, mirroring of a half-mesh embedding, and resampling of mesh
//! fields onto a regular `H' x W'` grid.
//!
//! Three boundary layouts are supported, chosen from the symmetry line:
//! - no symmetry line: the whole boundary goes round the square by arc
//!   length, starting at the first loop vertex in the corner `(0, 0)`;
//! - symmetry line on the boundary (a half mesh): the line runs down
//!   `u = 1/2` and the rest of the boundary covers the left half of the
//!   square, so the embedding lies in `[0, 1/2] x [0, 1]`;
//! - symmetry line through the interior: its endpoints sit at the midpoints
//!   of the top and bottom edges, each boundary half covers its half of the
//!   perimeter and the line's interior vertices are held at `u = 1/2`.
//!
//! Faces must be consistently oriented. The boundary is laid out so that
//! faces with positive signed area in the mesh `(x, y)` projection keep a
//! positive signed area in `(u, v)`.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3xX, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};
use crate::model::{grid, ModeSymmetry, MorphableModel};
use crate::synthetic;

const CG_TOLERANCE: f64 = 1e-10;
const COTAN_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    positions: Matrix3xX<f64>,
    faces: Vec<[usize; 3]>,
    boundary_loop: Vec<usize>,
    symmetry_line: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layout {
    Whole,
    Half,
    Split,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl TriangleMesh {
    /// Validates topology and orientation. `boundary_loop` may be empty, in
    /// which case it is derived; otherwise it must be the mesh's boundary
    /// cycle in either direction. The stored loop follows the orientation
    /// induced by the faces.
    pub fn new(
        positions: Matrix3xX<f64>,
        faces: Vec<[usize; 3]>,
        boundary_loop: Vec<usize>,
        symmetry_line: Vec<usize>,
    ) -> Result<Self> {
        let m = positions.ncols();
        if faces.is_empty() {
            return Err(Error::invalid("mesh has no faces"));
        }
        if !positions.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("mesh positions must be finite"));
        }
        let mut used = vec![false; m];
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        for (f, t) in faces.iter().enumerate() {
            if t.iter().any(|&v| v >= m) {
                return Err(Error::invalid(format!("face {f} references a missing vertex")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::invalid(format!("face {f} repeats a vertex")));
            }
            for k in 0..3 {
                used[t[k]] = true;
                let e = (t[k], t[(k + 1) % 3]);
                if directed.insert(e, f).is_some() {
                    return Err(Error::invalid(format!(
                        "edge {}-{} is used twice in the same direction (non-manifold or inconsistent orientation)",
                        e.0, e.1
                    )));
                }
            }
        }
        if let Some(v) = used.iter().position(|u| !u) {
            return Err(Error::invalid(format!("vertex {v} is not used by any face")));
        }
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for &(a, b) in directed.keys() {
            *edges.entry(edge_key(a, b)).or_insert(0) += 1;
        }
        // A directed edge without its reverse is a boundary edge, oriented by its face.
        let mut next: HashMap<usize, usize> = HashMap::new();
        for &(a, b) in directed.keys() {
            if !directed.contains_key(&(b, a)) && next.insert(a, b).is_some() {
                return Err(Error::invalid(format!("boundary is not a simple cycle at vertex {a}")));
            }
        }
        let euler = m as i64 - edges.len() as i64 + faces.len() as i64;
        if euler != 1 {
            return Err(Error::invalid(format!(
                "mesh is not a disk: Euler characteristic {euler}"
            )));
        }
        if next.is_empty() {
            return Err(Error::invalid("mesh has no boundary"));
        }
        let start = *next.keys().min().expect("non-empty");
        let mut cycle = vec![start];
        let mut cur = next[&start];
        while cur != start {
            if cycle.len() > next.len() {
                return Err(Error::invalid("boundary is not a simple cycle"));
            }
            cycle.push(cur);
            cur = *next
                .get(&cur)
                .ok_or_else(|| Error::invalid(format!("boundary is not a simple cycle at vertex {cur}")))?;
        }
        if cycle.len() != next.len() {
            return Err(Error::invalid("mesh has more than one boundary loop"));
        }
        let boundary_loop = if boundary_loop.is_empty() {
            cycle
        } else {
            align_cycle(&cycle, &boundary_loop)
                .ok_or_else(|| Error::invalid("given boundary loop does not match the mesh boundary"))?
        };
        let mesh = TriangleMesh {
            positions,
            faces,
            boundary_loop,
            symmetry_line,
        };
        mesh.layout()?;
        Ok(mesh)
    }

    pub fn positions(&self) -> &Matrix3xX<f64> {
        &self.positions
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn boundary_loop(&self) -> &[usize] {
        &self.boundary_loop
    }

    pub fn symmetry_line(&self) -> &[usize] {
        &self.symmetry_line
    }

    pub fn num_vertices(&self) -> usize {
        self.positions.ncols()
    }

    fn edge_set(&self) -> HashMap<(usize, usize), Vec<usize>> {
        let mut edges: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for t in &self.faces {
            for k in 0..3 {
                edges
                    .entry(edge_key(t[k], t[(k + 1) % 3]))
                    .or_default()
                    .push(t[(k + 2) % 3]);
            }
        }
        edges
    }

    fn layout(&self) -> Result<Layout> {
        let line = &self.symmetry_line;
        if line.is_empty() {
            return Ok(Layout::Whole);
        }
        if line.len() < 2 {
            return Err(Error::invalid("symmetry line needs at least two vertices"));
        }
        let m = self.num_vertices();
        let mut seen = vec![false; m];
        for &v in line {
            if v >= m || std::mem::replace(&mut seen[v], true) {
                return Err(Error::invalid("symmetry line has an invalid or repeated vertex"));
            }
        }
        let edges = self.edge_set();
        let on_boundary: Vec<bool> = {
            let mut b = vec![false; m];
            self.boundary_loop.iter().for_each(|&v| b[v] = true);
            b
        };
        let mut boundary_edges = 0;
        for w in line.windows(2) {
            let Some(opp) = edges.get(&edge_key(w[0], w[1])) else {
                return Err(Error::invalid(format!(
                    "symmetry line step {}-{} is not a mesh edge",
                    w[0], w[1]
                )));
            };
            if opp.len() == 1 {
                boundary_edges += 1;
            }
        }
        if !on_boundary[line[0]] || !on_boundary[*line.last().expect("len >= 2")] {
            return Err(Error::invalid("symmetry line endpoints must lie on the boundary"));
        }
        let inner = &line[1..line.len() - 1];
        if boundary_edges == line.len() - 1 {
            Ok(Layout::Half)
        } else if boundary_edges == 0 && inner.iter().all(|&v| !on_boundary[v]) {
            Ok(Layout::Split)
        } else {
            Err(Error::invalid(
                "symmetry line must run either entirely along the boundary or through the interior",
            ))
        }
    }
}

/// `given` rotated and possibly reversed to match `cycle`'s orientation.
fn align_cycle(cycle: &[usize], given: &[usize]) -> Option<Vec<usize>> {
    if cycle.len() != given.len() {
        return None;
    }
    let start = given.iter().position(|&v| v == cycle[0])?;
    let n = cycle.len();
    let forward: Vec<usize> = (0..n).map(|k| given[(start + k) % n]).collect();
    if forward == cycle {
        return Some(given.to_vec());
    }
    let backward: Vec<usize> = (0..n).map(|k| given[(start + n - k) % n]).collect();
    (backward == cycle).then(|| cycle.to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightScheme {
    Uniform,
    /// Cotangent weights with values below `1e-6` raised to `1e-6`.
    CotangentClamped,
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightScheme::Uniform),
            "cotangent" | "cotangent-clamped" => Ok(WeightScheme::CotangentClamped),
            other => Err(Error::invalid(format!("unknown weight scheme `{other}`"))),
        }
    }
}

/// Per-vertex `(u, v)` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub uv: Vec<[f64; 2]>,
}

impl Embedding {
    /// Twice the signed `uv` area of each face.
    pub fn signed_areas(&self, faces: &[[usize; 3]]) -> Vec<f64> {
        faces
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|v| self.uv[v]);
                (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            })
            .collect()
    }

    /// Faces with non-positive signed area.
    pub fn flipped_faces(&self, faces: &[[usize; 3]]) -> usize {
        self.signed_areas(faces).iter().filter(|a| **a <= 0.0).count()
    }
}

/// Points spaced by arc length along `path`, mapped onto a polyline of
/// square-boundary corners with the given cumulative parameters.
fn place_by_arc_length(positions: &Matrix3xX<f64>, path: &[usize], corners: &[[f64; 2]], uv: &mut [[f64; 2]]) {
    let mut cum = vec![0.0; path.len()];
    for k in 1..path.len() {
        cum[k] = cum[k - 1] + (positions.column(path[k]) - positions.column(path[k - 1])).norm();
    }
    let total = cum[path.len() - 1];
    let mut seg = vec![0.0; corners.len()];
    for k in 1..corners.len() {
        seg[k] = seg[k - 1] + (corners[k][0] - corners[k - 1][0]).abs() + (corners[k][1] - corners[k - 1][1]).abs();
    }
    let perim = seg[corners.len() - 1];
    for (k, &v) in path.iter().enumerate() {
        let s = if k + 1 == path.len() {
            perim
        } else {
            cum[k] / total * perim
        };
        let mut j = 1;
        while j + 1 < corners.len() && seg[j] < s {
            j += 1;
        }
        let (a, b) = (corners[j - 1], corners[j]);
        let len = seg[j] - seg[j - 1];
        let f = if len > 0.0 {
            ((s - seg[j - 1]) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        // Exactly one coordinate varies along an axis-aligned side.
        uv[v] = if a[0] == b[0] {
            [a[0], a[1] + f * (b[1] - a[1])]
        } else {
            [a[0] + f * (b[0] - a[0]), a[1]]
        };
    }
}

/// Symmetric edge weights `w_ij` keyed by ordered vertex pair.
fn edge_weights(mesh: &TriangleMesh, scheme: WeightScheme) -> HashMap<(usize, usize), f64> {
    let mut out = HashMap::new();
    for ((a, b), opposite) in mesh.edge_set() {
        let w = match scheme {
            WeightScheme::Uniform => 1.0,
            WeightScheme::CotangentClamped => {
                let pa = mesh.positions.column(a);
                let pb = mesh.positions.column(b);
                let sum: f64 = opposite
                    .iter()
                    .map(|&k| {
                        let pk = mesh.positions.column(k);
                        let (e1, e2) = (pa - pk, pb - pk);
                        let cross = e1.cross(&e2).norm();
                        if cross > 0.0 {
                            e1.dot(&e2) / cross
                        } else {
                            0.0
                        }
                    })
                    .sum();
                (0.5 * sum).max(COTAN_FLOOR)
            }
        };
        out.insert((a, b), w);
    }
    out
}

/// Symmetric positive-definite system restricted to free vertices.
struct Laplacian {
    rows: Vec<Vec<(usize, f64)>>,
    diag: Vec<f64>,
}

impl Laplacian {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            *o = self.diag[i] * x[i] - self.rows[i].iter().map(|&(j, w)| w * x[j]).sum::<f64>();
        });
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients. Stops when every scaled row
/// residual `|b - Ax|_i / diag_i` is below the tolerance.
fn conjugate_gradient(a: &Laplacian, b: &[f64], tol: f64) -> Result<Vec<f64>> {
    let n = b.len();
    let mut x = vec![0.0; n];
    if n == 0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&a.diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let scaled_max = |r: &[f64]| r.iter().zip(&a.diag).map(|(ri, d)| (ri / d).abs()).fold(0.0, f64::max);
    let max_iter = 10 * n + 1000;
    for _ in 0..max_iter {
        if scaled_max(&r) < tol * 1e-3 {
            break;
        }
        a.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] / a.diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    // Recompute the true residual rather than trusting the recurrence.
    a.apply(&x, &mut ap);
    let true_r: Vec<f64> = b.iter().zip(&ap).map(|(bi, ai)| bi - ai).collect();
    let res = scaled_max(&true_r);
    if !(res < tol) {
        return Err(Error::Solver(format!(
            "conjugate gradients stalled at residual {res:e}"
        )));
    }
    Ok(x)
}

/// Harmonic solve for one coordinate with `fixed` values held.
fn solve_coordinate(m: usize, weights: &HashMap<(usize, usize), f64>, fixed: &[Option<f64>]) -> Result<Vec<f64>> {
    let mut index = vec![usize::MAX; m];
    let mut free = Vec::new();
    for v in 0..m {
        if fixed[v].is_none() {
            index[v] = free.len();
            free.push(v);
        }
    }
    let k = free.len();
    let mut rows = vec![Vec::new(); k];
    let mut diag = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    let mut keys: Vec<_> = weights.iter().collect();
    keys.sort_by_key(|(e, _)| **e);
    for (&(a, b), &w) in keys {
        for (p, q) in [(a, b), (b, a)] {
            if index[p] == usize::MAX {
                continue;
            }
            let i = index[p];
            diag[i] += w;
            match fixed[q] {
                Some(val) => rhs[i] += w * val,
                None => rows[i].push((index[q], w)),
            }
        }
    }
    if diag.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::Solver("free vertex without neighbours".into()));
    }
    let x = conjugate_gradient(&Laplacian { rows, diag }, &rhs, CG_TOLERANCE)?;
    let mut out: Vec<f64> = fixed.iter().map(|f| f.unwrap_or(0.0)).collect();
    for (i, &v) in free.iter().enumerate() {
        out[v] = x[i];
    }
    Ok(out)
}

/// Tutte embedding with the boundary layout chosen by the symmetry line.
pub fn tutte_embed(mesh: &TriangleMesh, scheme: WeightScheme) -> Result<Embedding> {
    let m = mesh.num_vertices();
    let loop_ = &mesh.boundary_loop;
    let nb = loop_.len();
    let mut uv = vec![[0.0; 2]; m];
    let mut fixed_u: Vec<Option<f64>> = vec![None; m];
    let mut fixed_v: Vec<Option<f64>> = vec![None; m];
    let pos_in_loop = |v: usize| loop_.iter().position(|&b| b == v).expect("vertex on boundary");
    // Boundary path from loop index `from` to `to` inclusive, in loop order.
    let arc = |from: usize, to: usize| -> Vec<usize> {
        let mut out = vec![loop_[from]];
        let mut k = from;
        while k != to {
            k = (k + 1) % nb;
            out.push(loop_[k]);
        }
        out
    };
    match mesh.layout()? {
        Layout::Whole => {
            let mut path = loop_.clone();
            path.push(loop_[0]);
            let corners = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]];
            place_by_arc_length(&mesh.positions, &path, &corners, &mut uv);
        }
        Layout::Half => {
            let line = &mesh.symmetry_line;
            let (a, b) = (pos_in_loop(line[0]), pos_in_loop(*line.last().expect("len >= 2")));
            // The line is the loop run between its endpoints; orient it along the loop.
            let (top, bottom) = if arc(a, b) == *line {
                (a, b)
            } else if arc(b, a).iter().rev().eq(line.iter()) {
                (b, a)
            } else {
                return Err(Error::invalid("symmetry line is not a contiguous run of the boundary"));
            };
            place_by_arc_length(&mesh.positions, &arc(top, bottom), &[[0.5, 0.0], [0.5, 1.0]], &mut uv);
            let corners = [[0.5, 1.0], [0.0, 1.0], [0.0, 0.0], [0.5, 0.0]];
            place_by_arc_length(&mesh.positions, &arc(bottom, top), &corners, &mut uv);
        }
        Layout::Split => {
            let line = &mesh.symmetry_line;
            let (a, b) = (pos_in_loop(line[0]), pos_in_loop(*line.last().expect("len >= 2")));
            let mean_x = |path: &[usize]| path.iter().map(|&v| mesh.positions[(0, v)]).sum::<f64>() / path.len() as f64;
            // `top -> bottom` in loop order is the right half of the square.
            let (top, bottom) = if mean_x(&arc(a, b)) >= mean_x(&arc(b, a)) {
                (a, b)
            } else {
                (b, a)
            };
            let right = [[0.5, 0.0], [1.0, 0.0], [1.0, 1.0], [0.5, 1.0]];
            let left = [[0.5, 1.0], [0.0, 1.0], [0.0, 0.0], [0.5, 0.0]];
            place_by_arc_length(&mesh.positions, &arc(top, bottom), &right, &mut uv);
            place_by_arc_length(&mesh.positions, &arc(bottom, top), &left, &mut uv);
            for &v in &line[1..line.len() - 1] {
                fixed_u[v] = Some(0.5);
            }
        }
    }
    for &v in loop_ {
        fixed_u[v] = Some(uv[v][0]);
        fixed_v[v] = Some(uv[v][1]);
    }
    let weights = edge_weights(mesh, scheme);
    let u = solve_coordinate(m, &weights, &fixed_u)?;
    let v = solve_coordinate(m, &weights, &fixed_v)?;
    let mut emb = Embedding {
        uv: (0..m).map(|i| [u[i], v[i]]).collect(),
    };
    // Fixed values are copied, not recomputed.
    for i in 0..m {
        if let Some(x) = fixed_u[i] {
            emb.uv[i][0] = x;
        }
        if let Some(y) = fixed_v[i] {
            emb.uv[i][1] = y;
        }
    }
    // A boundary traversed against the face orientation gives a mirrored map.
    let total: f64 = emb.signed_areas(&mesh.faces).iter().sum();
    if total < 0.0 {
        return Err(Error::invalid("faces are oriented clockwise in the mesh xy projection"));
    }
    Ok(emb)
}

/// A half mesh mirrored across `x = 0`, with its vertex mirror map.
#[derive(Clone, Debug)]
pub struct MirroredMesh {
    pub mesh: TriangleMesh,
    pub sym_index: Vec<usize>,
    /// Number of vertices of the original half; they keep their indices.
    pub half_vertices: usize,
}

/// Mirrors a half mesh (symmetry line on its boundary, `x <= 0`) into the
/// full mesh. Mirrored copies of off-line vertices are appended in order.
pub fn mirror_mesh(half: &TriangleMesh) -> Result<MirroredMesh> {
    if half.layout()? != Layout::Half {
        return Err(Error::invalid(
            "mirroring needs a half mesh whose symmetry line lies on its boundary",
        ));
    }
    let m = half.num_vertices();
    let scale = half.positions.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let on_line = {
        let mut b = vec![false; m];
        half.symmetry_line.iter().for_each(|&v| b[v] = true);
        b
    };
    for &v in &half.symmetry_line {
        if half.positions[(0, v)].abs() > 1e-9 * scale {
            return Err(Error::invalid(format!(
                "symmetry line vertex {v} is off the plane x = 0"
            )));
        }
    }
    if (0..m).any(|v| !on_line[v] && half.positions[(0, v)] > 1e-9 * scale) {
        return Err(Error::invalid("half mesh must lie on the x <= 0 side"));
    }
    let mut sym: Vec<usize> = (0..m).collect();
    let mut cols: Vec<Vector3<f64>> = half.positions.column_iter().map(|c| c.into_owned()).collect();
    for v in 0..m {
        if on_line[v] {
            cols[v][0] = 0.0;
        } else {
            let p = half.positions.column(v);
            sym[v] = cols.len();
            sym.push(v);
            cols.push(Vector3::new(-p[0], p[1], p[2]));
        }
    }
    let mut faces = half.faces.clone();
    faces.extend(half.faces.iter().map(|t| [sym[t[0]], sym[t[2]], sym[t[1]]]));
    let positions = Matrix3xX::from_columns(&cols);
    let full = TriangleMesh::new(positions, faces, Vec::new(), half.symmetry_line.clone())?;
    Ok(MirroredMesh {
        mesh: full,
        sym_index: sym,
        half_vertices: m,
    })
}

/// Full embedding from a half embedding: `uv(sym(i)) = (1 - u_i, v_i)`.
pub fn mirror_embedding(half_embedding: &Embedding, half: &TriangleMesh) -> Result<Embedding> {
    if half_embedding.uv.len() != half.num_vertices() {
        return Err(Error::invalid("embedding does not match the mesh"));
    }
    for &v in &half.symmetry_line {
        if half_embedding.uv[v][0] != 0.5 {
            return Err(Error::invalid(format!(
                "symmetry line vertex {v} has u = {} instead of 1/2",
                half_embedding.uv[v][0]
            )));
        }
    }
    let mirrored = mirror_mesh(half)?;
    let mut uv = half_embedding.uv.clone();
    uv.resize(mirrored.mesh.num_vertices(), [0.0; 2]);
    for v in 0..mirrored.half_vertices {
        let s = mirrored.sym_index[v];
        if s != v {
            let [u, w] = half_embedding.uv[v];
            uv[s] = [1.0 - u, w];
        }
    }
    Ok(Embedding { uv })
}

/// Fields resampled on the regular grid. `fields[0]` is the mean shape and
/// the rest are basis columns, each `3 x (H' W')` in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryImage {
    pub height: usize,
    pub width: usize,
    pub fields: Vec<Matrix3xX<f64>>,
}

impl GeometryImage {
    /// `(u, v)` of grid node `(row, col)`, 0-based.
    pub fn node_uv(&self, row: usize, col: usize) -> [f64; 2] {
        node_uv(self.height, self.width, row, col)
    }
}

fn node_uv(h: usize, w: usize, row: usize, col: usize) -> [f64; 2] {
    [col as f64 / (w - 1) as f64, row as f64 / (h - 1) as f64]
}

/// Barycentric stencil for one grid node. `wa = 1 - wb - wc`, so a node on
/// a mesh vertex reproduces that vertex's values exactly.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    a: usize,
    b: usize,
    c: usize,
    wa: f64,
    wb: f64,
    wc: f64,
}

struct UvLocator<'a> {
    uv: &'a [[f64; 2]],
    faces: &'a [[usize; 3]],
    cells: usize,
    buckets: Vec<Vec<u32>>,
}

impl<'a> UvLocator<'a> {
    fn new(uv: &'a [[f64; 2]], faces: &'a [[usize; 3]]) -> Self {
        let cells = ((faces.len() as f64).sqrt().ceil() as usize).clamp(1, 1024);
        let mut buckets = vec![Vec::new(); cells * cells];
        let cell_of = |x: f64| ((x * cells as f64).floor().max(0.0) as usize).min(cells - 1);
        for (f, t) in faces.iter().enumerate() {
            let us = t.map(|v| uv[v][0]);
            let vs = t.map(|v| uv[v][1]);
            let (u0, u1) = (
                us.iter().cloned().fold(f64::INFINITY, f64::min),
                us.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
            let (v0, v1) = (
                vs.iter().cloned().fold(f64::INFINITY, f64::min),
                vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
            for cy in cell_of(v0)..=cell_of(v1) {
                for cx in cell_of(u0)..=cell_of(u1) {
                    buckets[cy * cells + cx].push(f as u32);
                }
            }
        }
        UvLocator {
            uv,
            faces,
            cells,
            buckets,
        }
    }

    fn locate(&self, p: [f64; 2]) -> Option<Stencil> {
        let cell_of = |x: f64| ((x * self.cells as f64).floor().max(0.0) as usize).min(self.cells - 1);
        let bucket = &self.buckets[cell_of(p[1]) * self.cells + cell_of(p[0])];
        let mut best: Option<(f64, Stencil)> = None;
        for &f in bucket {
            let [a, b, c] = self.faces[f as usize];
            let (pa, pb, pc) = (self.uv[a], self.uv[b], self.uv[c]);
            let area = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0]);
            if area == 0.0 {
                continue;
            }
            let wb = ((p[0] - pa[0]) * (pc[1] - pa[1]) - (p[1] - pa[1]) * (pc[0] - pa[0])) / area;
            let wc = ((pb[0] - pa[0]) * (p[1] - pa[1]) - (pb[1] - pa[1]) * (p[0] - pa[0])) / area;
            let worst = wb.min(wc).min(1.0 - wb - wc);
            if best.as_ref().is_none_or(|(w, _)| worst > *w) {
                best = Some((
                    worst,
                    Stencil {
                        a,
                        b,
                        c,
                        wa: 1.0 - wb - wc,
                        wb,
                        wc,
                    },
                ));
            }
            if worst >= 0.0 {
                break;
            }
        }
        best.filter(|(w, _)| *w >= -1e-12).map(|(_, s)| s)
    }
}

/// Nearest point on the embedding boundary, as a stencil on one edge.
fn snap_to_boundary(uv: &[[f64; 2]], loop_: &[usize], p: [f64; 2]) -> Stencil {
    let v0 = loop_[0];
    let mut best = (
        f64::INFINITY,
        Stencil {
            a: v0,
            b: v0,
            c: v0,
            wa: 1.0,
            wb: 0.0,
            wc: 0.0,
        },
    );
    for k in 0..loop_.len() {
        let (a, b) = (loop_[k], loop_[(k + 1) % loop_.len()]);
        let (pa, pb) = (uv[a], uv[b]);
        let d = [pb[0] - pa[0], pb[1] - pa[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = if len2 > 0.0 {
            (((p[0] - pa[0]) * d[0] + (p[1] - pa[1]) * d[1]) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = [pa[0] + t * d[0], pa[1] + t * d[1]];
        let dist = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        if dist < best.0 {
            best = (
                dist,
                Stencil {
                    a,
                    b,
                    c: a,
                    wa: 1.0 - t,
                    wb: t,
                    wc: 0.0,
                },
            );
        }
    }
    best.1
}

/// Resamples each `3 x M` field at the grid nodes by barycentric
/// interpolation in `uv`. Nodes outside the embedding (rounding at the
/// boundary) use the nearest boundary point.
pub fn remesh_to_grid(
    mesh: &TriangleMesh,
    embedding: &Embedding,
    fields: &[Matrix3xX<f64>],
    height: usize,
    width: usize,
) -> Result<GeometryImage> {
    if height < 2 || width < 2 {
        return Err(Error::invalid("grid must be at least 2x2"));
    }
    let m = mesh.num_vertices();
    if embedding.uv.len() != m {
        return Err(Error::invalid("embedding does not match the mesh"));
    }
    if let Some(f) = fields.iter().position(|f| f.ncols() != m) {
        return Err(Error::invalid(format!("field {f} does not match the mesh")));
    }
    let flipped = embedding.flipped_faces(&mesh.faces);
    if flipped > 0 {
        return Err(Error::invalid(format!(
            "embedding is not injective: {flipped} flipped faces"
        )));
    }
    let locator = UvLocator::new(&embedding.uv, &mesh.faces);
    let stencils: Vec<Stencil> = (0..height * width)
        .into_par_iter()
        .map(|node| {
            let p = node_uv(height, width, node / width, node % width);
            locator
                .locate(p)
                .unwrap_or_else(|| snap_to_boundary(&embedding.uv, &mesh.boundary_loop, p))
        })
        .collect();
    let out = fields
        .iter()
        .map(|f| {
            Matrix3xX::from_fn(height * width, |i, node| {
                let s = stencils[node];
                s.wa * f[(i, s.a)] + s.wb * f[(i, s.b)] + s.wc * f[(i, s.c)]
            })
        })
        .collect();
    Ok(GeometryImage {
        height,
        width,
        fields: out,
    })
}

/// Builds a model from a geometry image with the grid mirror map.
/// Mode symmetry is classified from the resampled basis.
pub fn assemble_model(geometry: &GeometryImage, landmark_indices: Vec<usize>) -> Result<MorphableModel> {
    let (h, w) = (geometry.height, geometry.width);
    let Some((mean, basis_fields)) = geometry.fields.split_first() else {
        return Err(Error::invalid("geometry image has no mean field"));
    };
    let n = h * w;
    let d = basis_fields.len();
    let mut basis = DMatrix::zeros(3 * n, d);
    for (k, f) in basis_fields.iter().enumerate() {
        basis.column_mut(k).copy_from_slice(f.as_slice());
    }
    let provisional = MorphableModel::new(
        DVector::from_column_slice(mean.as_slice()),
        basis.clone(),
        h,
        w,
        grid::uv_coords(h, w),
        grid::mirror_map(h, w),
        landmark_indices.clone(),
        vec![ModeSymmetry::Asymmetric; d],
    )?;
    let scale = basis.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let symmetry = basis_fields
        .iter()
        .map(|f| provisional.classify_mode(f, 1e-9 * scale))
        .collect();
    MorphableModel::new(
        DVector::from_column_slice(mean.as_slice()),
        basis,
        h,
        w,
        grid::uv_coords(h, w),
        grid::mirror_map(h, w),
        landmark_indices,
        symmetry,
    )
}

/// Reads `v` and `f` records of a Wavefront OBJ file. Polygons are fanned
/// into triangles; texture and normal indices are ignored.
pub fn read_obj(path: &Path) -> Result<(Matrix3xX<f64>, Vec<[usize; 3]>)> {
    const KIND: &str = "OBJ";
    let text = String::from_utf8(read_bytes(path)?).map_err(|_| Error::format(KIND, path, "not valid UTF-8"))?;
    let mut verts: Vec<Vector3<f64>> = Vec::new();
    let mut faces = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let bad = |why: String| Error::format(KIND, path, format!("line {}: {why}", lineno + 1));
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let xyz: Vec<f64> = parts
                    .take(3)
                    .map(|s| s.parse::<f64>().map_err(|_| bad(format!("`{s}` is not a number"))))
                    .collect::<Result<_>>()?;
                if xyz.len() != 3 {
                    return Err(bad("vertex needs three coordinates".into()));
                }
                verts.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|s| {
                        let head = s.split('/').next().unwrap_or("");
                        let i: i64 = head
                            .parse()
                            .map_err(|_| bad(format!("`{s}` is not a vertex reference")))?;
                        let resolved = if i > 0 { i - 1 } else { verts.len() as i64 + i };
                        if resolved < 0 || resolved as usize >= verts.len() {
                            return Err(bad(format!("vertex reference {i} is out of range")));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face needs at least three vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok((Matrix3xX::from_columns(&verts), faces))
}

pub fn write_obj(path: &Path, positions: &Matrix3xX<f64>, faces: &[[usize; 3]]) -> Result<()> {
    let mut s = String::new();
    for p in positions.column_iter() {
        s.push_str(&format!("v {} {} {}\n", p[0], p[1], p[2]));
    }
    for t in faces {
        s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    write_atomic(path, s.as_bytes())
}

/// Mesh annotations: `boundary` and `symmetry` lines, each followed by
/// 1-based OBJ vertex numbers. `boundary` may be omitted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Sidecar {
    pub boundary: Vec<usize>,
    pub symmetry: Vec<usize>,
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    const KIND: &str = "sidecar";
    let text = String::from_utf8(read_bytes(path)?).map_err(|_| Error::format(KIND, path, "not valid UTF-8"))?;
    let mut out = Sidecar::default();
    for (lineno, raw) in text.lines().enumerate() {
        let bad = |why: String| Error::format(KIND, path, format!("line {}: {why}", lineno + 1));
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else { continue };
        let values: Vec<usize> = parts
            .map(|s| match s.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(bad(format!("`{s}` is not a 1-based vertex number"))),
            })
            .collect::<Result<_>>()?;
        match key {
            "boundary" => out.boundary.extend(values),
            "symmetry" => out.symmetry.extend(values),
            other => return Err(bad(format!("unknown record `{other}`"))),
        }
    }
    Ok(out)
}

pub fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let list = |v: &[usize]| v.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(" ");
    let mut s = String::new();
    if !sidecar.boundary.is_empty() {
        s.push_str(&format!("boundary {}\n", list(&sidecar.boundary)));
    }
    if !sidecar.symmetry.is_empty() {
        s.push_str(&format!("symmetry {}\n", list(&sidecar.symmetry)));
    }
    write_atomic(path, s.as_bytes())
}

pub fn load_mesh(obj: &Path, sidecar: &Path) -> Result<TriangleMesh> {
    let (positions, faces) = read_obj(obj)?;
    let side = read_sidecar(sidecar)?;
    TriangleMesh::new(positions, faces, side.boundary, side.symmetry)
}

/// Parameters of the synthetic half-face mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfMeshConfig {
    pub seed: u64,
    /// Vertex rows, top to bottom.
    pub rows: usize,
    /// Vertex columns including the symmetry line.
    pub cols: usize,
    /// Interior jitter as a fraction of the cell size.
    pub jitter: f64,
    pub nose_bump: bool,
}

impl Default for HalfMeshConfig {
    fn default() -> Self {
        HalfMeshConfig {
            seed: 11,
            rows: 25,
            cols: 13,
            jitter: 0.3,
            nose_bump: true,
        }
    }
}

/// Left half (`x <= 0`) of the synthetic face surface on a jittered grid,
/// with quads split along alternating diagonals (corner quads split through
/// the corner). The symmetry line is the last column, top to bottom.
/// Returns the mesh and the normalised `(xi, eta)` of every vertex.
pub fn synthetic_half_mesh(config: &HalfMeshConfig) -> Result<(TriangleMesh, Vec<(f64, f64)>)> {
    let (r, c) = (config.rows, config.cols);
    if r < 3 || c < 3 {
        return Err(Error::invalid("half mesh needs at least 3 rows and 3 columns"));
    }
    if !(0.0..0.5).contains(&config.jitter) {
        return Err(Error::invalid("jitter must be in [0, 0.5)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (dx, dy) = (1.0 / (c - 1) as f64, 2.0 / (r - 1) as f64);
    let mut coords = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            let mut xi = -1.0 + j as f64 * dx;
            let mut eta = -1.0 + i as f64 * dy;
            let border_row = i == 0 || i == r - 1;
            let border_col = j == 0 || j == c - 1;
            if !border_row && !border_col {
                xi += config.jitter * dx * rng.random_range(-1.0..1.0);
            }
            if !border_row {
                eta += config.jitter * dy * rng.random_range(-1.0..1.0);
            }
            if j == c - 1 {
                xi = 0.0;
            }
            coords.push((xi, eta));
        }
    }
    let positions = Matrix3xX::from_fn(r * c, |k, v| {
        synthetic::mean_point(coords[v].0, coords[v].1, config.nose_bump)[k]
    });
    let id = |i: usize, j: usize| i * c + j;
    let mut faces = Vec::with_capacity(2 * (r - 1) * (c - 1));
    for i in 0..r - 1 {
        for j in 0..c - 1 {
            let (tl, tr, bl, br) = (id(i, j), id(i, j + 1), id(i + 1, j), id(i + 1, j + 1));
            let corner_main = (i == 0 && j == 0) || (i == r - 2 && j == c - 2);
            let corner_anti = (i == 0 && j == c - 2) || (i == r - 2 && j == 0);
            let main = if corner_main {
                true
            } else if corner_anti {
                false
            } else {
                (i + j) % 2 == 0
            };
            if main {
                faces.push([tl, tr, br]);
                faces.push([tl, br, bl]);
            } else {
                faces.push([tl, tr, bl]);
                faces.push([tr, br, bl]);
            }
        }
    }
    let line: Vec<usize> = (0..r).map(|i| id(i, c - 1)).collect();
    let mesh = TriangleMesh::new(positions, faces, Vec::new(), line)?;
    Ok((mesh, coords))
}

/// Report of a full flattening run.
#[derive(Clone, Debug)]
pub struct FlattenOutput {
    pub model: MorphableModel,
    pub full_mesh: TriangleMesh,
    pub embedding: Embedding,
    pub flipped_faces: usize,
    /// Largest `|uv(sym(i)) - (1 - u_i, v_i)|` over the full embedding; only
    /// meaningful for half meshes.
    pub mirror_error: f64,
}

/// Embeds a mesh, mirroring it first when it is a half mesh, and resamples
/// the mean plus `basis` onto an `H' x W'` model. Basis fields refer to the
/// full mesh vertex order; when `basis` is empty, `synthetic_modes` smooth
/// modes are evaluated at the embedding coordinates.
pub fn flatten_to_model(
    mesh: &TriangleMesh,
    scheme: WeightScheme,
    basis: &[Matrix3xX<f64>],
    synthetic_modes: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<FlattenOutput> {
    let (full_mesh, embedding, sym) = if mesh.layout()? == Layout::Half {
        let half_emb = tutte_embed(mesh, scheme)?;
        let mirrored = mirror_mesh(mesh)?;
        let emb = mirror_embedding(&half_emb, mesh)?;
        (mirrored.mesh, emb, Some(mirrored.sym_index))
    } else {
        (mesh.clone(), tutte_embed(mesh, scheme)?, None)
    };
    let flipped = embedding.flipped_faces(&full_mesh.faces);
    let mirror_error = sym.as_ref().map_or(0.0, |s| {
        s.iter()
            .enumerate()
            .map(|(i, &j)| {
                let (a, b) = (embedding.uv[i], embedding.uv[j]);
                ((1.0 - a[0]) - b[0]).abs().max((a[1] - b[1]).abs())
            })
            .fold(0.0, f64::max)
    });
    let mut fields = vec![full_mesh.positions.clone()];
    if basis.is_empty() {
        let coords: Vec<(f64, f64)> = embedding
            .uv
            .iter()
            .map(|p| (2.0 * p[0] - 1.0, 2.0 * p[1] - 1.0))
            .collect();
        let (modes, _) = synthetic::smooth_mode_fields(seed, &coords, synthetic_modes);
        fields.extend(modes.iter().map(|f| Matrix3xX::from_column_slice(f)));
    } else {
        fields.extend(basis.iter().cloned());
    }
    let geometry = remesh_to_grid(&full_mesh, &embedding, &fields, height, width)?;
    let model = assemble_model(&geometry, synthetic::landmark_indices(height, width))?;
    Ok(FlattenOutput {
        model,
        full_mesh,
        embedding,
        flipped_faces: flipped,
        mirror_error,
    })
}
