//! Grid generator: axis-angle to rotation, rotation, orthographic projection,
//! exponentiated scale and translation, each with an exact backward pass.
//!
//! Camera convention: orthographic along +z, viewer at `z = +inf` looking
//! down `-z`. Sample coordinates are 1-based pixels, x along columns, y down.

use nalgebra::{DVector, Matrix2xX, Matrix3, Matrix3xX, Rotation3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::model::{MorphableModel, ShapeInstance};

/// Below this norm the Jacobian uses the exact `r = 0` limit.
pub const JACOBIAN_BRANCH_THRESHOLD: f64 = 1e-12;

/// Pose and shape parameters `(r, t, logs, alpha)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseShapeParams {
    /// Axis-angle rotation in radians; angle is the norm.
    pub rotation: Vector3<f64>,
    /// Translation in source-image pixels.
    pub translation: Vector2<f64>,
    /// Natural log of pixels per model unit.
    pub log_scale: f64,
    pub alpha: DVector<f64>,
}

impl PoseShapeParams {
    pub fn zeros(num_modes: usize) -> Self {
        PoseShapeParams {
            rotation: Vector3::zeros(),
            translation: Vector2::zeros(),
            log_scale: 0.0,
            alpha: DVector::zeros(num_modes),
        }
    }

    pub fn num_modes(&self) -> usize {
        self.alpha.len()
    }

    /// Flat layout `[r1, r2, r3, t1, t2, logs, alpha...]` of length `6 + D`.
    pub fn to_vec(&self) -> DVector<f64> {
        let mut v = DVector::zeros(6 + self.alpha.len());
        v.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        v.fixed_rows_mut::<2>(3).copy_from(&self.translation);
        v[5] = self.log_scale;
        v.rows_mut(6, self.alpha.len()).copy_from(&self.alpha);
        v
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() < 6 {
            return Err(Error::invalid("parameter vector needs at least 6 entries"));
        }
        Ok(PoseShapeParams {
            rotation: Vector3::new(values[0], values[1], values[2]),
            translation: Vector2::new(values[3], values[4]),
            log_scale: values[5],
            alpha: DVector::from_column_slice(&values[6..]),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// A proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix(pub Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Axis-angle vector of this rotation.
    pub fn to_axis_angle(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.0).scaled_axis()
    }

    /// Geodesic distance in radians to another rotation.
    pub fn angle_to(&self, other: &RotationMatrix) -> f64 {
        let rel = self.0.transpose() * other.0;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

/// 2D sample points, one column per vertex, in source-image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    pub points: Matrix2xX<f64>,
}

impl SampleGrid {
    pub fn num_points(&self) -> usize {
        self.points.ncols()
    }
}

/// Cross-product matrix `[a]x`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// `R = cos(th) I + sin(th) [rb]x + (1 - cos(th)) rb rb^T`, identity at `r = 0`.
pub fn axis_angle_to_matrix(r: &Vector3<f64>) -> RotationMatrix {
    let theta = r.norm();
    if theta == 0.0 {
        return RotationMatrix::identity();
    }
    let rb = r / theta;
    let (s, c) = theta.sin_cos();
    RotationMatrix(Matrix3::identity() * c + skew(&rb) * s + (rb * rb.transpose()) * (1.0 - c))
}

/// `I - R(r)` evaluated without cancellation for small angles.
fn identity_minus_rotation(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    let rb = r / theta;
    let k = skew(&rb);
    let half = (0.5 * theta).sin();
    -(k * theta.sin()) - (k * k) * (2.0 * half * half)
}

/// Partial derivatives `dR/dr_i` for `i = 1..3`.
pub fn axis_angle_jacobian(r: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    let theta2 = r.norm_squared();
    if theta2.sqrt() < JACOBIAN_BRANCH_THRESHOLD {
        return basis.map(|e| skew(&e));
    }
    let rot = axis_angle_to_matrix(r).0;
    let i_minus_r = identity_minus_rotation(r);
    let rx = skew(r);
    let mut out = [Matrix3::zeros(); 3];
    for (i, e) in basis.iter().enumerate() {
        let v = r.cross(&(i_minus_r * e));
        out[i] = ((rx * r[i] + skew(&v)) / theta2) * rot;
    }
    out
}

/// Gradient with respect to `r` given the gradient with respect to `R`.
pub fn axis_angle_backward(r: &Vector3<f64>, grad_rotation: &Matrix3<f64>) -> Vector3<f64> {
    let jac = axis_angle_jacobian(r);
    Vector3::new(
        jac[0].component_mul(grad_rotation).sum(),
        jac[1].component_mul(grad_rotation).sum(),
        jac[2].component_mul(grad_rotation).sum(),
    )
}

/// `X' = R X`.
pub fn rotate_points(rotation: &RotationMatrix, shape: &ShapeInstance) -> ShapeInstance {
    ShapeInstance {
        positions: rotation.0 * &shape.positions,
    }
}

/// Returns `(dL/dR, dL/dX) = (G X^T, R^T G)`.
pub fn rotate_backward(
    rotation: &RotationMatrix,
    shape: &ShapeInstance,
    grad: &Matrix3xX<f64>,
) -> Result<(Matrix3<f64>, Matrix3xX<f64>)> {
    if grad.ncols() != shape.positions.ncols() {
        return Err(Error::invalid("rotation gradient does not match the point count"));
    }
    let grad_r = grad * shape.positions.transpose();
    let grad_x = rotation.0.tr_mul(grad);
    Ok((grad_r, grad_x))
}

/// Orthographic projection along z: keeps rows 1-2.
pub fn project_ortho(shape: &ShapeInstance) -> SampleGrid {
    SampleGrid {
        points: shape.positions.fixed_rows::<2>(0).into_owned(),
    }
}

/// Scatters a 2D gradient into rows 1-2, zero into row 3.
pub fn project_backward(grad: &Matrix2xX<f64>) -> Matrix3xX<f64> {
    let mut out = Matrix3xX::zeros(grad.ncols());
    out.fixed_rows_mut::<2>(0).copy_from(grad);
    out
}

/// `s = exp(logs)`; its derivative is `s` itself.
pub fn exp_scale(log_scale: f64) -> f64 {
    log_scale.exp()
}

pub fn exp_scale_backward(log_scale: f64, grad_scale: f64) -> f64 {
    grad_scale * log_scale.exp()
}

/// `Y' = s Y`.
pub fn scale_points(scale: f64, grid: &SampleGrid) -> Result<SampleGrid> {
    if !(scale > 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    Ok(SampleGrid {
        points: &grid.points * scale,
    })
}

/// Returns `(dL/ds, dL/dY) = (<G, Y>, s G)`.
pub fn scale_backward(scale: f64, grid: &SampleGrid, grad: &Matrix2xX<f64>) -> Result<(f64, Matrix2xX<f64>)> {
    if grad.ncols() != grid.points.ncols() {
        return Err(Error::invalid("scale gradient does not match the point count"));
    }
    Ok((grad.dot(&grid.points), grad * scale))
}

/// `Y'' = Y' + 1_N (x) t`.
pub fn translate_points(translation: &Vector2<f64>, grid: &SampleGrid) -> SampleGrid {
    let mut points = grid.points.clone();
    for mut col in points.column_iter_mut() {
        col += translation;
    }
    SampleGrid { points }
}

/// Returns `(dL/dt, dL/dY') = (row sums of G, G)`.
pub fn translate_backward(grad: &Matrix2xX<f64>) -> (Vector2<f64>, Matrix2xX<f64>) {
    let mut sum = Vector2::zeros();
    for col in grad.column_iter() {
        sum += col;
    }
    (sum, grad.clone())
}

/// Gradient of a scalar with respect to every entry of `theta`.
pub type ParamGradient = PoseShapeParams;

/// Forward pass of the grid generator with every intermediate kept for the
/// backward pass. `vertices` is `None` for the full grid or the subset of
/// vertices to generate.
#[derive(Clone, Debug)]
pub struct GridForward {
    pub theta: PoseShapeParams,
    pub vertices: Option<Vec<usize>>,
    pub rotation: RotationMatrix,
    pub shape: ShapeInstance,
    pub rotated: ShapeInstance,
    pub projected: SampleGrid,
    pub scale: f64,
    pub scaled: SampleGrid,
    pub output: SampleGrid,
}

impl GridForward {
    pub fn new(model: &MorphableModel, theta: &PoseShapeParams) -> Result<Self> {
        let shape = model.synthesize_shape(&theta.alpha)?;
        Self::from_shape(theta, None, shape)
    }

    /// Generates only the listed vertices (e.g. the landmarks).
    pub fn subset(model: &MorphableModel, theta: &PoseShapeParams, vertices: &[usize]) -> Result<Self> {
        let positions = model.synthesize_vertices(&theta.alpha, vertices)?;
        Self::from_shape(theta, Some(vertices.to_vec()), ShapeInstance { positions })
    }

    fn from_shape(theta: &PoseShapeParams, vertices: Option<Vec<usize>>, shape: ShapeInstance) -> Result<Self> {
        if !theta.is_finite() {
            return Err(Error::invalid("pose/shape parameters must be finite"));
        }
        let rotation = axis_angle_to_matrix(&theta.rotation);
        let rotated = rotate_points(&rotation, &shape);
        let projected = project_ortho(&rotated);
        let scale = exp_scale(theta.log_scale);
        let scaled = scale_points(scale, &projected)?;
        let output = translate_points(&theta.translation, &scaled);
        Ok(GridForward {
            theta: theta.clone(),
            vertices,
            rotation,
            shape,
            rotated,
            projected,
            scale,
            scaled,
            output,
        })
    }

    /// Depth of every generated vertex after rotation and scaling; larger is
    /// closer to the viewer.
    pub fn depths(&self) -> Vec<f64> {
        self.rotated.positions.row(2).iter().map(|z| z * self.scale).collect()
    }

    /// Back-propagates `dL/dY''` to every component of `theta`.
    pub fn backward(&self, model: &MorphableModel, grad_output: &Matrix2xX<f64>) -> Result<ParamGradient> {
        if grad_output.ncols() != self.output.num_points() {
            return Err(Error::invalid("grid gradient does not match the point count"));
        }
        let (grad_t, grad_scaled) = translate_backward(grad_output);
        let (grad_s, grad_projected) = scale_backward(self.scale, &self.projected, &grad_scaled)?;
        let grad_logs = exp_scale_backward(self.theta.log_scale, grad_s);
        let grad_rotated = project_backward(&grad_projected);
        let (grad_rot, grad_shape) = rotate_backward(&self.rotation, &self.shape, &grad_rotated)?;
        let grad_r = axis_angle_backward(&self.theta.rotation, &grad_rot);
        let grad_alpha = match &self.vertices {
            None => model.shape_backward(&grad_shape)?,
            Some(v) => model.vertices_backward(v, &grad_shape)?,
        };
        Ok(PoseShapeParams {
            rotation: grad_r,
            translation: grad_t,
            log_scale: grad_logs,
            alpha: grad_alpha,
        })
    }
}

/// `Y'' = t + exp(logs) P R(r) X(alpha)` over the whole grid.
pub fn grid_generate(model: &MorphableModel, theta: &PoseShapeParams) -> Result<SampleGrid> {
    Ok(GridForward::new(model, theta)?.output)
}

/// Rotation from yaw (about y), pitch (about x) and roll (about z), applied
/// as `Rz(roll) Rx(pitch) Ry(yaw)`, returned as axis-angle.
pub fn axis_angle_from_euler(yaw: f64, pitch: f64, roll: f64) -> Vector3<f64> {
    let ry = axis_angle_to_matrix(&Vector3::new(0.0, yaw, 0.0)).0;
    let rx = axis_angle_to_matrix(&Vector3::new(pitch, 0.0, 0.0)).0;
    let rz = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, roll)).0;
    RotationMatrix(rz * rx * ry).to_axis_angle()
}
