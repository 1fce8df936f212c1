//! Bilinear sampling onto the output grid, back-face occlusion masking and
//! the masking layer.
//!
//! Pixel `(j, k)` is row `j`, column `k`, both 1-based; its centre is at
//! sample coordinate `x = k`, `y = j`. Pixels outside the image contribute
//! zero, exactly as in the kernel sum `sum_jk I_jk max(0, 1-|x-k|) max(0, 1-|y-j|)`.

use nalgebra::{DVector, Matrix2xX, Matrix3, Matrix3xX, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{grid, MorphableModel};
use crate::transform::{RotationMatrix, SampleGrid};

/// Source image, row-major `H x W x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value at 0-based `(row, col, channel)`.
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// The image mirrored left to right: `I'(j, k) = I(j, W + 1 - k)`.
    pub fn flip_horizontal(&self) -> Image {
        let mut data = vec![0.0; self.data.len()];
        let c = self.channels;
        for row in 0..self.height {
            for col in 0..self.width {
                let src = (row * self.width + (self.width - 1 - col)) * c;
                let dst = (row * self.width + col) * c;
                data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        Image { data, ..self.clone() }
    }

    /// Channel mean, giving a single-channel image.
    pub fn to_gray(&self) -> Image {
        let data = self
            .data
            .chunks(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }
}

/// Values resampled onto the output grid, vertex-major `N x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatImage {
    num_points: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FlatImage {
    pub fn new(num_points: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_points * channels {
            return Err(Error::invalid("flat image buffer has the wrong length"));
        }
        Ok(FlatImage {
            num_points,
            channels,
            values,
        })
    }

    pub fn zeros(num_points: usize, channels: usize) -> Self {
        FlatImage {
            num_points,
            channels,
            values: vec![0.0; num_points * channels],
        }
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, point: usize, channel: usize) -> f64 {
        self.values[point * self.channels + channel]
    }

    /// `out_i = self_{perm(i)}`.
    pub fn permuted(&self, perm: &[usize]) -> Result<FlatImage> {
        if perm.len() != self.num_points {
            return Err(Error::invalid("permutation length does not match the flat image"));
        }
        let c = self.channels;
        let mut values = vec![0.0; self.values.len()];
        for (i, &p) in perm.iter().enumerate() {
            values[i * c..(i + 1) * c].copy_from_slice(&self.values[p * c..(p + 1) * c]);
        }
        Ok(FlatImage { values, ..*self })
    }

    fn same_shape(&self, other: &FlatImage) -> Result<()> {
        if self.num_points != other.num_points || self.channels != other.channels {
            return Err(Error::invalid(format!(
                "flat image shapes differ: {}x{} vs {}x{}",
                self.num_points, self.channels, other.num_points, other.channels
            )));
        }
        Ok(())
    }
}

/// Binary visibility per output-grid vertex.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcclusionMask {
    bits: Vec<bool>,
}

impl OcclusionMask {
    pub fn new(bits: Vec<bool>) -> Self {
        OcclusionMask { bits }
    }

    pub fn all_visible(n: usize) -> Self {
        OcclusionMask { bits: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn value(&self, i: usize) -> f64 {
        if self.bits[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn count_visible(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn permuted(&self, perm: &[usize]) -> OcclusionMask {
        OcclusionMask {
            bits: perm.iter().map(|&p| self.bits[p]).collect(),
        }
    }
}

/// Interpolation cell along one axis: lower pixel index (1-based, may be
/// outside the image) and fractional offset in `[0, 1)`.
#[derive(Clone, Copy, Debug)]
struct Cell {
    lower: i64,
    frac: f64,
}

impl Cell {
    fn new(coord: f64) -> Cell {
        let lower = coord.floor();
        Cell {
            lower: lower as i64,
            frac: coord - lower,
        }
    }

    /// 0-based index of pixel `lower + offset` if it lies inside `1..=size`.
    fn index(&self, offset: i64, size: usize) -> Option<usize> {
        let p = self.lower + offset;
        (p >= 1 && p <= size as i64).then(|| (p - 1) as usize)
    }

    /// Kernel weights of the lower and upper pixel.
    fn weights(&self) -> [f64; 2] {
        [1.0 - self.frac, self.frac]
    }
}

/// `(1 - f) a + f b` in midpoint form. Constant inputs and mirrored
/// `(a, b, f) -> (b, a, 1 - f)` inputs give bit-identical results, and
/// `f = 0` returns `a` exactly.
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    if f == 0.0 {
        a
    } else {
        0.5 * (a + b) + (f - 0.5) * (b - a)
    }
}

struct PointCells {
    x: Cell,
    y: Cell,
    cols: [Option<usize>; 2],
    rows: [Option<usize>; 2],
}

impl PointCells {
    fn new(image: &Image, x: f64, y: f64) -> PointCells {
        let cx = Cell::new(x);
        let cy = Cell::new(y);
        PointCells {
            x: cx,
            y: cy,
            cols: [cx.index(0, image.width), cx.index(1, image.width)],
            rows: [cy.index(0, image.height), cy.index(1, image.height)],
        }
    }

    fn touches_image(&self) -> bool {
        self.cols.iter().any(Option::is_some) && self.rows.iter().any(Option::is_some)
    }

    fn pixel(&self, image: &Image, r: usize, c: usize, channel: usize) -> f64 {
        match (self.rows[r], self.cols[c]) {
            (Some(row), Some(col)) => image.at(row, col, channel),
            _ => 0.0,
        }
    }

    fn row_value(&self, image: &Image, r: usize, channel: usize) -> f64 {
        lerp(
            self.pixel(image, r, 0, channel),
            self.pixel(image, r, 1, channel),
            self.x.frac,
        )
    }
}

/// Bilinear sampling of `image` at every grid point.
pub fn bilinear_sample(image: &Image, grid: &SampleGrid) -> FlatImage {
    let c = image.channels;
    let n = grid.num_points();
    let mut values = vec![0.0; n * c];
    values.par_chunks_mut(c).enumerate().for_each(|(i, out)| {
        let p = grid.points.column(i);
        let cells = PointCells::new(image, p[0], p[1]);
        if !cells.touches_image() {
            return;
        }
        for (ch, o) in out.iter_mut().enumerate() {
            let top = cells.row_value(image, 0, ch);
            let bottom = cells.row_value(image, 1, ch);
            *o = lerp(top, bottom, cells.y.frac);
        }
    });
    FlatImage {
        num_points: n,
        channels: c,
        values,
    }
}

/// Gradients of the sampler with respect to the image and the grid.
#[derive(Clone, Debug)]
pub struct SamplerGradients {
    pub image: Image,
    pub grid: Matrix2xX<f64>,
}

/// Backward pass of [`bilinear_sample`]. At integer coordinates the
/// derivative is taken from the cell `[floor(x), floor(x) + 1]`.
pub fn bilinear_backward(image: &Image, grid: &SampleGrid, grad_out: &FlatImage) -> Result<SamplerGradients> {
    let c = image.channels;
    if grad_out.num_points != grid.num_points() || grad_out.channels != c {
        return Err(Error::invalid("sampler gradient does not match the grid and image"));
    }
    let grad_grid = bilinear_grid_backward(image, grid, grad_out)?;
    let mut grad_image = vec![0.0; image.data.len()];
    // Sequential scatter keeps the summation order independent of threads.
    for i in 0..grid.num_points() {
        let g = &grad_out.values[i * c..(i + 1) * c];
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let p = grid.points.column(i);
        let cells = PointCells::new(image, p[0], p[1]);
        let wx = cells.x.weights();
        let wy = cells.y.weights();
        for (r, row) in cells.rows.iter().enumerate() {
            let Some(row) = row else { continue };
            for (cc, col) in cells.cols.iter().enumerate() {
                let Some(col) = col else { continue };
                let w = wy[r] * wx[cc];
                let base = (row * image.width + col) * c;
                for ch in 0..c {
                    grad_image[base + ch] += w * g[ch];
                }
            }
        }
    }
    Ok(SamplerGradients {
        image: Image {
            data: grad_image,
            ..image.clone()
        },
        grid: grad_grid,
    })
}

/// Gradient with respect to the sample coordinates only.
pub fn bilinear_grid_backward(image: &Image, grid: &SampleGrid, grad_out: &FlatImage) -> Result<Matrix2xX<f64>> {
    let c = image.channels;
    if grad_out.num_points != grid.num_points() || grad_out.channels != c {
        return Err(Error::invalid("sampler gradient does not match the grid and image"));
    }
    let n = grid.num_points();
    let mut out = vec![0.0; 2 * n];
    out.par_chunks_mut(2).enumerate().for_each(|(i, o)| {
        let g = &grad_out.values[i * c..(i + 1) * c];
        let p = grid.points.column(i);
        let cells = PointCells::new(image, p[0], p[1]);
        if !cells.touches_image() {
            return;
        }
        let fy = cells.y.frac;
        let (mut gx, mut gy) = (0.0, 0.0);
        for (ch, gc) in g.iter().enumerate() {
            if *gc == 0.0 {
                continue;
            }
            let d_top = cells.pixel(image, 0, 1, ch) - cells.pixel(image, 0, 0, ch);
            let d_bottom = cells.pixel(image, 1, 1, ch) - cells.pixel(image, 1, 0, ch);
            let dv_dx = (1.0 - fy) * d_top + fy * d_bottom;
            let dv_dy = cells.row_value(image, 1, ch) - cells.row_value(image, 0, ch);
            gx += gc * dv_dx;
            gy += gc * dv_dy;
        }
        o[0] = gx;
        o[1] = gy;
    });
    Ok(Matrix2xX::from_column_slice(&out))
}

/// Diagnostics from the occlusion layer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OcclusionReport {
    /// Vertices whose incident triangles have zero total area.
    pub degenerate_vertices: Vec<usize>,
}

/// Area-weighted vertex normals of the grid mesh (unnormalised sums of
/// triangle cross products). Quads are split top-left to bottom-right.
pub fn vertex_normal_sums(height: usize, width: usize, positions: &Matrix3xX<f64>) -> Vec<Vector3<f64>> {
    let mut normals = vec![Vector3::zeros(); height * width];
    for t in grid::triangles(height, width) {
        let p0 = positions.column(t[0]);
        let e1 = positions.column(t[1]) - p0;
        let e2 = positions.column(t[2]) - p0;
        let n = e1.cross(&e2);
        for v in t {
            normals[v] += n;
        }
    }
    normals
}

/// Back-face visibility of the deformed mesh `X(alpha)` under rotation `R`:
/// vertex `i` is visible iff `(R n_i)_z > 0`. The layer passes back zero
/// gradient to both `R` and `alpha`.
pub fn compute_occlusion(
    model: &MorphableModel,
    rotation: &RotationMatrix,
    alpha: &DVector<f64>,
) -> Result<(OcclusionMask, OcclusionReport)> {
    let shape = model.synthesize_shape(alpha)?;
    Ok(occlusion_from_positions(
        model.grid_height(),
        model.grid_width(),
        &shape.positions,
        rotation.matrix(),
    ))
}

/// Back-face visibility for explicit grid positions.
pub fn occlusion_from_positions(
    height: usize,
    width: usize,
    positions: &Matrix3xX<f64>,
    rotation: &Matrix3<f64>,
) -> (OcclusionMask, OcclusionReport) {
    let sums = vertex_normal_sums(height, width, positions);
    let view_row = rotation.row(2).transpose();
    let mut report = OcclusionReport::default();
    let bits = sums
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if !(len > 0.0) {
                report.degenerate_vertices.push(i);
                return false;
            }
            view_row.dot(&(n / len)) > 0.0
        })
        .collect();
    (OcclusionMask { bits }, report)
}

/// `W_i^c = V_i^c M_i`.
pub fn mask_sample(sampled: &FlatImage, mask: &OcclusionMask) -> Result<FlatImage> {
    if mask.len() != sampled.num_points {
        return Err(Error::invalid("mask length does not match the flat image"));
    }
    let c = sampled.channels;
    let mut values = sampled.values.clone();
    for (i, chunk) in values.chunks_mut(c).enumerate() {
        if !mask.bits[i] {
            chunk.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(FlatImage { values, ..*sampled })
}

/// Returns `(dL/dV, dL/dM)` with `dL/dV = G M` and `dL/dM_i = sum_c G V`.
pub fn mask_backward(sampled: &FlatImage, mask: &OcclusionMask, grad: &FlatImage) -> Result<(FlatImage, Vec<f64>)> {
    sampled.same_shape(grad)?;
    if mask.len() != sampled.num_points {
        return Err(Error::invalid("mask length does not match the flat image"));
    }
    let c = sampled.channels;
    let mut grad_v = grad.values.clone();
    let mut grad_m = vec![0.0; mask.len()];
    for i in 0..mask.len() {
        let m = mask.value(i);
        for ch in 0..c {
            grad_m[i] += grad.values[i * c + ch] * sampled.values[i * c + ch];
            grad_v[i * c + ch] *= m;
        }
    }
    Ok((
        FlatImage {
            values: grad_v,
            ..*grad
        },
        grad_m,
    ))
}
