//! Linear statistical shape model over a regular output grid.
//!
//! Vertices are stored row-major over the `grid_height x grid_width` grid and
//! the stacked shape vector interleaves `(x, y, z)` per vertex, so component
//! `i` of vertex `j` lives at index `3 * j + i`. A `Matrix3xX` built from that
//! vector column-major is therefore the shape matrix with one column per vertex.

use nalgebra::{DMatrix, DVector, Matrix3xX};

use crate::error::{Error, Result};

/// How a basis column behaves under the bilateral mirror `x -> -x` composed
/// with the vertex permutation `sym`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeSymmetry {
    /// `d(sym(i)) = M d(i)` with `M = diag(-1, 1, 1)`.
    Symmetric,
    /// `d(sym(i)) = -M d(i)`.
    Antisymmetric,
    /// Neither; reflection leaves the coefficient unchanged.
    Asymmetric,
}

impl ModeSymmetry {
    /// Sign applied to the coefficient of this mode when the scene is mirrored.
    pub fn reflection_sign(self) -> f64 {
        match self {
            ModeSymmetry::Antisymmetric => -1.0,
            _ => 1.0,
        }
    }

    pub(crate) fn code(self) -> i8 {
        match self {
            ModeSymmetry::Symmetric => 1,
            ModeSymmetry::Antisymmetric => -1,
            ModeSymmetry::Asymmetric => 0,
        }
    }

    pub(crate) fn from_code(code: i8) -> Option<Self> {
        match code {
            1 => Some(ModeSymmetry::Symmetric),
            -1 => Some(ModeSymmetry::Antisymmetric),
            0 => Some(ModeSymmetry::Asymmetric),
            _ => None,
        }
    }
}

/// A 3D shape with one column per vertex, in model units.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeInstance {
    pub positions: Matrix3xX<f64>,
}

impl ShapeInstance {
    pub fn num_vertices(&self) -> usize {
        self.positions.ncols()
    }
}

/// Mean shape, deformation basis, grid topology and landmark selection.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphableModel {
    mean_shape: DVector<f64>,
    basis: DMatrix<f64>,
    grid_height: usize,
    grid_width: usize,
    uv_coords: Vec<[f64; 2]>,
    sym_index: Vec<usize>,
    landmark_indices: Vec<usize>,
    mode_symmetry: Vec<ModeSymmetry>,
}

/// Tolerance (relative to the largest mean coordinate) for the mirror check.
const MIRROR_TOLERANCE: f64 = 1e-9;

impl MorphableModel {
    /// Builds a model and checks every structural invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mean_shape: DVector<f64>,
        basis: DMatrix<f64>,
        grid_height: usize,
        grid_width: usize,
        uv_coords: Vec<[f64; 2]>,
        sym_index: Vec<usize>,
        landmark_indices: Vec<usize>,
        mode_symmetry: Vec<ModeSymmetry>,
    ) -> Result<Self> {
        let model = MorphableModel {
            mean_shape,
            basis,
            grid_height,
            grid_width,
            uv_coords,
            sym_index,
            landmark_indices,
            mode_symmetry,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let n = self.grid_height * self.grid_width;
        if n == 0 {
            return Err(Error::invalid("grid must have at least one vertex"));
        }
        if self.mean_shape.len() != 3 * n {
            return Err(Error::invalid(format!(
                "mean shape has length {}, expected 3N = {}",
                self.mean_shape.len(),
                3 * n
            )));
        }
        if self.basis.nrows() != 3 * n {
            return Err(Error::invalid(format!(
                "basis has {} rows, expected 3N = {}",
                self.basis.nrows(),
                3 * n
            )));
        }
        let d = self.basis.ncols();
        if d == 0 || d >= 3 * n {
            return Err(Error::invalid(format!("basis must have 1 <= D < 3N columns, got {d}")));
        }
        if self.mode_symmetry.len() != d {
            return Err(Error::invalid("one symmetry flag is required per basis column"));
        }
        if self.uv_coords.len() != n {
            return Err(Error::invalid("uv coordinates must have one entry per vertex"));
        }
        if self.sym_index.len() != n {
            return Err(Error::invalid("symmetry map must have one entry per vertex"));
        }
        for (i, &s) in self.sym_index.iter().enumerate() {
            if s >= n || self.sym_index[s] != i {
                return Err(Error::invalid(format!(
                    "symmetry map is not an involution at vertex {i}"
                )));
            }
        }
        let mut seen = vec![false; n];
        for &l in &self.landmark_indices {
            if l >= n {
                return Err(Error::invalid(format!("landmark index {l} out of range")));
            }
            if std::mem::replace(&mut seen[l], true) {
                return Err(Error::invalid(format!("landmark index {l} repeated")));
            }
        }
        if !self.mean_shape.iter().all(|v| v.is_finite()) || !self.basis.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("model contains non-finite values"));
        }
        let scale = self.mean_shape.amax().max(1.0);
        let mean = self.mean_positions();
        let mirrored = self.mirror_positions(&mean);
        let asym = (&mirrored - &mean).amax();
        if asym > MIRROR_TOLERANCE * scale {
            return Err(Error::invalid(format!(
                "mean shape is not bilaterally symmetric (max deviation {asym:e})"
            )));
        }
        check_full_rank(&self.basis)?;
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn num_modes(&self) -> usize {
        self.basis.ncols()
    }

    pub fn grid_height(&self) -> usize {
        self.grid_height
    }

    pub fn grid_width(&self) -> usize {
        self.grid_width
    }

    pub fn mean_shape(&self) -> &DVector<f64> {
        &self.mean_shape
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn uv_coords(&self) -> &[[f64; 2]] {
        &self.uv_coords
    }

    pub fn sym_index(&self) -> &[usize] {
        &self.sym_index
    }

    pub fn landmark_indices(&self) -> &[usize] {
        &self.landmark_indices
    }

    pub fn mode_symmetry(&self) -> &[ModeSymmetry] {
        &self.mode_symmetry
    }

    /// Replaces the landmark selection, keeping everything else.
    pub fn with_landmarks(mut self, landmark_indices: Vec<usize>) -> Result<Self> {
        self.landmark_indices = landmark_indices;
        self.validate()?;
        Ok(self)
    }

    /// Mean shape as a `3 x N` matrix.
    pub fn mean_positions(&self) -> Matrix3xX<f64> {
        Matrix3xX::from_column_slice(self.mean_shape.as_slice())
    }

    /// `X(alpha) = reshape(P alpha + mu)`.
    pub fn synthesize_shape(&self, alpha: &DVector<f64>) -> Result<ShapeInstance> {
        self.check_alpha(alpha)?;
        let x = &self.basis * alpha + &self.mean_shape;
        Ok(ShapeInstance {
            positions: Matrix3xX::from_column_slice(x.as_slice()),
        })
    }

    /// Synthesises only the listed vertices, in the order given.
    pub fn synthesize_vertices(&self, alpha: &DVector<f64>, vertices: &[usize]) -> Result<Matrix3xX<f64>> {
        self.check_alpha(alpha)?;
        let n = self.num_vertices();
        let mut out = Matrix3xX::zeros(vertices.len());
        for (col, &v) in vertices.iter().enumerate() {
            if v >= n {
                return Err(Error::invalid(format!("vertex {v} out of range")));
            }
            for i in 0..3 {
                let row = 3 * v + i;
                out[(i, col)] = self.basis.row(row).dot(&alpha.transpose()) + self.mean_shape[row];
            }
        }
        Ok(out)
    }

    /// Adjoint of [`synthesize_shape`](Self::synthesize_shape): `P^T vec(G)`.
    pub fn shape_backward(&self, grad_positions: &Matrix3xX<f64>) -> Result<DVector<f64>> {
        if grad_positions.ncols() != self.num_vertices() {
            return Err(Error::invalid(format!(
                "gradient has {} columns, expected N = {}",
                grad_positions.ncols(),
                self.num_vertices()
            )));
        }
        let g = DVector::from_column_slice(grad_positions.as_slice());
        Ok(self.basis.tr_mul(&g))
    }

    /// Adjoint of [`synthesize_vertices`](Self::synthesize_vertices).
    pub fn vertices_backward(&self, vertices: &[usize], grad: &Matrix3xX<f64>) -> Result<DVector<f64>> {
        if grad.ncols() != vertices.len() {
            return Err(Error::invalid("gradient columns must match the vertex list"));
        }
        let mut out = DVector::zeros(self.num_modes());
        for (col, &v) in vertices.iter().enumerate() {
            for i in 0..3 {
                let g = grad[(i, col)];
                if g != 0.0 {
                    out += self.basis.row(3 * v + i).transpose() * g;
                }
            }
        }
        Ok(out)
    }

    /// Scales basis column `k` by `std_devs[k]` so that unit-variance
    /// coefficients reproduce the original coefficient distribution.
    pub fn whiten_basis(&self, std_devs: &[f64]) -> Result<MorphableModel> {
        if std_devs.len() != self.num_modes() {
            return Err(Error::invalid(format!(
                "expected {} standard deviations, got {}",
                self.num_modes(),
                std_devs.len()
            )));
        }
        if let Some(bad) = std_devs.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "standard deviation {bad} is not strictly positive"
            )));
        }
        let mut whitened = self.clone();
        for (k, s) in std_devs.iter().enumerate() {
            whitened.basis.column_mut(k).scale_mut(*s);
        }
        Ok(whitened)
    }

    /// `X'_i = M X_{sym(i)}` with `M = diag(-1, 1, 1)`.
    pub fn mirror_positions(&self, positions: &Matrix3xX<f64>) -> Matrix3xX<f64> {
        let mut out = Matrix3xX::zeros(positions.ncols());
        for (i, &s) in self.sym_index.iter().enumerate() {
            out[(0, i)] = -positions[(0, s)];
            out[(1, i)] = positions[(1, s)];
            out[(2, i)] = positions[(2, s)];
        }
        out
    }

    /// Classifies a displacement field under the bilateral mirror.
    pub fn classify_mode(&self, field: &Matrix3xX<f64>, tolerance: f64) -> ModeSymmetry {
        let mirrored = self.mirror_positions(field);
        let scale = field.amax().max(f64::MIN_POSITIVE);
        if (&mirrored - field).amax() <= tolerance * scale {
            ModeSymmetry::Symmetric
        } else if (&mirrored + field).amax() <= tolerance * scale {
            ModeSymmetry::Antisymmetric
        } else {
            ModeSymmetry::Asymmetric
        }
    }

    fn check_alpha(&self, alpha: &DVector<f64>) -> Result<()> {
        if alpha.len() != self.num_modes() {
            return Err(Error::invalid(format!(
                "coefficient vector has length {}, expected D = {}",
                alpha.len(),
                self.num_modes()
            )));
        }
        Ok(())
    }
}

/// Rejects bases whose Gram matrix is numerically singular.
fn check_full_rank(basis: &DMatrix<f64>) -> Result<()> {
    let gram = basis.tr_mul(basis);
    let eig = gram.symmetric_eigenvalues();
    let max = eig.amax();
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= max * 1e-14 {
        return Err(Error::invalid("basis does not have full column rank"));
    }
    Ok(())
}

/// Row-major grid helpers shared by the model builders.
pub mod grid {
    /// Vertex index of grid node `(row, col)`, both 0-based.
    pub fn vertex(width: usize, row: usize, col: usize) -> usize {
        row * width + col
    }

    /// Bilateral mirror map: column `c` maps to `width - 1 - c` on the same row.
    pub fn mirror_map(height: usize, width: usize) -> Vec<usize> {
        (0..height * width)
            .map(|v| {
                let (r, c) = (v / width, v % width);
                r * width + (width - 1 - c)
            })
            .collect()
    }

    /// Output-grid coordinates `(x^t, y^t)`, 1-based, x along columns.
    pub fn uv_coords(height: usize, width: usize) -> Vec<[f64; 2]> {
        (0..height * width)
            .map(|v| [(v % width + 1) as f64, (v / width + 1) as f64])
            .collect()
    }

    /// The two triangles of every grid quad, split along the top-left to
    /// bottom-right diagonal and wound so a flat grid (x right, y down) has
    /// its normal along +z.
    pub fn triangles(height: usize, width: usize) -> Vec<[usize; 3]> {
        let mut tris = Vec::with_capacity(2 * (height - 1) * (width - 1));
        for r in 0..height - 1 {
            for c in 0..width - 1 {
                let tl = vertex(width, r, c);
                let tr = tl + 1;
                let bl = tl + width;
                let br = bl + 1;
                tris.push([tl, tr, br]);
                tris.push([tl, br, bl]);
            }
        }
        tris
    }
}
