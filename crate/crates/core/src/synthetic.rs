//! Deterministic synthetic face-like models.
//!
//! The mean shape is an ellipsoidal cap over the unit disk, reached from the
//! square grid through the elliptical square-to-disk map, with its rim at
//! `z = 0`. Basis columns are smooth band-limited displacement fields that are
//! exactly symmetric or antisymmetric under the grid mirror. All functions of
//! the horizontal coordinate are evaluated on `|xi|` so that mirrored vertices
//! get bit-identical values.

use nalgebra::{DMatrix, DVector, Matrix3xX};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{grid, ModeSymmetry, MorphableModel};

/// Half extents of the face in model units; at unit scale the face spans
/// about 100 x 120 pixels.
pub const HALF_WIDTH: f64 = 50.0;
pub const HALF_HEIGHT: f64 = 60.0;
/// Apex height of the cap above its rim.
pub const DEPTH: f64 = 40.0;
/// Curvature parameter of the ellipsoid: the cap is `sqrt(1 - K rho^2)`.
const CAP_K: f64 = 0.75;

const NOSE_HEIGHT: f64 = 16.0;
const NOSE_SIGMA: f64 = 7.0;
const NOSE_OFFSET_Y: f64 = 4.0;

/// Landmark sites in normalised grid coordinates `(u, v)`, u along columns.
/// Pairs are listed left side first; the right side is mirrored exactly.
const LANDMARK_PAIRS: [(f64, f64); 6] = [
    (0.30, 0.28), // brow
    (0.20, 0.40), // outer eye corner
    (0.40, 0.40), // inner eye corner
    (0.42, 0.62), // nostril
    (0.34, 0.76), // mouth corner
    (0.12, 0.60), // cheek
];
const LANDMARK_MIDLINE: [f64; 3] = [0.15, 0.55, 0.90]; // forehead, nose tip, chin

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticModelConfig {
    pub seed: u64,
    pub grid_height: usize,
    pub grid_width: usize,
    pub num_modes: usize,
    /// Adds a nose-like bump, making the surface non-convex.
    pub nose_bump: bool,
}

/// Convex synthetic model (no nose bump).
pub fn make_synthetic_model(
    seed: u64,
    grid_height: usize,
    grid_width: usize,
    num_modes: usize,
) -> Result<MorphableModel> {
    make_synthetic_model_with(&SyntheticModelConfig {
        seed,
        grid_height,
        grid_width,
        num_modes,
        nose_bump: false,
    })
}

pub fn make_synthetic_model_with(config: &SyntheticModelConfig) -> Result<MorphableModel> {
    let (h, w, d) = (config.grid_height, config.grid_width, config.num_modes);
    if h < 8 || w < 8 {
        return Err(Error::invalid(format!("grid must be at least 8x8, got {h}x{w}")));
    }
    if d == 0 {
        return Err(Error::invalid("at least one basis mode is required"));
    }
    if d > 64 {
        return Err(Error::invalid("synthetic models support at most 64 modes"));
    }
    let n = h * w;
    let coords = grid_params(h, w);

    let mut mean = DVector::zeros(3 * n);
    for (v, &(xi, eta)) in coords.iter().enumerate() {
        let p = mean_point(xi, eta, config.nose_bump);
        mean[3 * v] = p[0];
        mean[3 * v + 1] = p[1];
        mean[3 * v + 2] = p[2];
    }

    let (mut fields, symmetry) = smooth_mode_fields(config.seed, &coords, d);
    for (field, sym) in fields.iter_mut().zip(&symmetry) {
        let rms = |f: &[f64]| (f.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let before = rms(field);
        remove_rigid_motion(field, &mean, *sym);
        let after = rms(field);
        if after > 0.0 {
            field.iter_mut().for_each(|v| *v *= before / after);
        }
    }
    let mut basis = DMatrix::zeros(3 * n, d);
    for (k, field) in fields.iter().enumerate() {
        basis.column_mut(k).copy_from_slice(field);
    }

    MorphableModel::new(
        mean,
        basis,
        h,
        w,
        grid::uv_coords(h, w),
        grid::mirror_map(h, w),
        landmark_indices(h, w),
        symmetry,
    )
}

/// `num_modes` smooth displacement fields (stacked xyz per point) at the
/// normalised coordinates `coords`, with their mirror parity. Mode `k` is
/// antisymmetric when `k % 3 == 2` and has RMS amplitude `6 / (1 + 0.3 k)`.
pub fn smooth_mode_fields(seed: u64, coords: &[(f64, f64)], num_modes: usize) -> (Vec<Vec<f64>>, Vec<ModeSymmetry>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = coords.len().max(1);
    let mut fields = Vec::with_capacity(num_modes);
    let mut symmetry = Vec::with_capacity(num_modes);
    for k in 0..num_modes {
        let sym = if k % 3 == 2 {
            ModeSymmetry::Antisymmetric
        } else {
            ModeSymmetry::Symmetric
        };
        let mut field = mode_field(&mut rng, coords, sym);
        let rms = (field.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let amplitude = 6.0 / (1.0 + 0.3 * k as f64);
        if rms > 0.0 {
            field.iter_mut().for_each(|v| *v *= amplitude / rms);
        }
        fields.push(field);
        symmetry.push(sym);
    }
    (fields, symmetry)
}

/// Projects out of `field` the infinitesimal rigid motions and uniform
/// scaling of `mean` that share its mirror parity, as Procrustes alignment
/// does for a trained model. Coefficients are scalars, so exact parity is kept.
fn remove_rigid_motion(field: &mut [f64], mean: &DVector<f64>, sym: ModeSymmetry) {
    let n = mean.len() / 3;
    let gen = |f: &dyn Fn([f64; 3]) -> [f64; 3]| -> Vec<f64> {
        (0..n)
            .flat_map(|v| f([mean[3 * v], mean[3 * v + 1], mean[3 * v + 2]]))
            .collect()
    };
    let mut basis: Vec<Vec<f64>> = match sym {
        ModeSymmetry::Symmetric => vec![
            gen(&|_| [0.0, 1.0, 0.0]),
            gen(&|_| [0.0, 0.0, 1.0]),
            gen(&|p| [0.0, -p[2], p[1]]),
            gen(&|p| p),
        ],
        ModeSymmetry::Antisymmetric => vec![
            gen(&|_| [1.0, 0.0, 0.0]),
            gen(&|p| [p[2], 0.0, -p[0]]),
            gen(&|p| [-p[1], p[0], 0.0]),
        ],
        ModeSymmetry::Asymmetric => return,
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for k in 0..basis.len() {
        let (done, rest) = basis.split_at_mut(k);
        let g = &mut rest[0];
        for q in done.iter() {
            let c = dot(g, q);
            g.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
        }
        let len = dot(g, g).sqrt();
        g.iter_mut().for_each(|x| *x /= len);
    }
    for g in &basis {
        let c = dot(field, g);
        field.iter_mut().zip(g).for_each(|(x, y)| *x -= c * y);
    }
}

/// Normalised coordinates `(xi, eta)` in `[-1, 1]^2` per vertex, with
/// `xi(mirror(v)) == -xi(v)` exactly.
fn grid_params(h: usize, w: usize) -> Vec<(f64, f64)> {
    let (wd, hd) = ((w - 1) as f64, (h - 1) as f64);
    (0..h * w)
        .map(|v| {
            let (r, c) = (v / w, v % w);
            let xi = (2.0 * c as f64 - wd) / wd;
            let eta = (2.0 * r as f64 - hd) / hd;
            (xi, eta)
        })
        .collect()
}

/// Square-to-disk map followed by the ellipsoidal cap.
pub(crate) fn mean_point(xi: f64, eta: f64, nose: bool) -> [f64; 3] {
    let dx = xi * (1.0 - 0.5 * eta * eta).sqrt();
    let dy = eta * (1.0 - 0.5 * xi * xi).sqrt();
    let rho2 = (dx * dx + dy * dy).min(1.0);
    let rim = (1.0 - CAP_K).sqrt();
    let mut z = DEPTH * ((1.0 - CAP_K * rho2).sqrt() - rim) / (1.0 - rim);
    let x = HALF_WIDTH * dx;
    let y = HALF_HEIGHT * dy;
    if nose {
        let ry = y - NOSE_OFFSET_Y;
        z += NOSE_HEIGHT * (-(x * x + ry * ry) / (2.0 * NOSE_SIGMA * NOSE_SIGMA)).exp();
    }
    [x, y, z]
}

const BAND: usize = 6;

/// Even and odd 1D factors in the horizontal direction, evaluated on `|xi|`.
fn even_fn(m: usize, xi: f64) -> f64 {
    (m as f64 * std::f64::consts::FRAC_PI_2 * xi.abs()).cos()
}

fn odd_fn(m: usize, xi: f64) -> f64 {
    let a = xi.abs();
    let s = ((m + 1) as f64 * std::f64::consts::FRAC_PI_2 * a).sin();
    if xi < 0.0 {
        -s
    } else {
        s
    }
}

fn vertical_fn(n: usize, eta: f64) -> f64 {
    (n as f64 * std::f64::consts::FRAC_PI_2 * (eta + 1.0)).cos()
}

/// A random smooth displacement field with the requested mirror parity.
/// Symmetric modes are odd in x and even in y, z; antisymmetric the reverse.
fn mode_field(rng: &mut ChaCha8Rng, coords: &[(f64, f64)], sym: ModeSymmetry) -> Vec<f64> {
    let mut coeffs = [[[0.0; BAND]; BAND]; 3];
    for comp in coeffs.iter_mut() {
        for (m, row) in comp.iter_mut().enumerate() {
            for (n, c) in row.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                *c = z / (1.0 + (m + n) as f64).powi(2);
            }
        }
    }
    let mut out = vec![0.0; 3 * coords.len()];
    for (v, &(xi, eta)) in coords.iter().enumerate() {
        for (comp, table) in coeffs.iter().enumerate() {
            let odd_in_x = match sym {
                ModeSymmetry::Antisymmetric => comp != 0,
                _ => comp == 0,
            };
            let mut acc = 0.0;
            for (m, row) in table.iter().enumerate() {
                let fx = if odd_in_x { odd_fn(m, xi) } else { even_fn(m, xi) };
                for (n, c) in row.iter().enumerate() {
                    acc += c * fx * vertical_fn(n, eta);
                }
            }
            // x, y, z weights: in-plane motion is smaller than depth change.
            let weight = if comp == 2 { 1.0 } else { 0.4 };
            out[3 * v + comp] = weight * acc;
        }
    }
    out
}

/// Landmark vertex indices, mirror pairs first then the midline sites.
/// Duplicates arising on small grids are dropped.
pub fn landmark_indices(h: usize, w: usize) -> Vec<usize> {
    let (wd, hd) = ((w - 1) as f64, (h - 1) as f64);
    let mut out: Vec<usize> = Vec::with_capacity(15);
    let push = |v: usize, out: &mut Vec<usize>| {
        if !out.contains(&v) {
            out.push(v);
        }
    };
    for &(u, v) in &LANDMARK_PAIRS {
        let col = (u * wd).round() as usize;
        let row = (v * hd).round() as usize;
        push(grid::vertex(w, row, col), &mut out);
        push(grid::vertex(w, row, w - 1 - col), &mut out);
    }
    for &v in &LANDMARK_MIDLINE {
        let row = (v * hd).round() as usize;
        push(grid::vertex(w, row, (w - 1) / 2), &mut out);
    }
    out
}

/// Mean positions of a synthetic configuration without building the basis.
pub fn synthetic_mean(h: usize, w: usize, nose: bool) -> Matrix3xX<f64> {
    let coords = grid_params(h, w);
    Matrix3xX::from_fn(h * w, |i, v| mean_point(coords[v].0, coords[v].1, nose)[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = make_synthetic_model(7, 16, 12, 10).unwrap();
        let b = make_synthetic_model(7, 16, 12, 10).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_model(8, 16, 12, 10).unwrap();
        assert_ne!(a.basis(), c.basis());
    }

    #[test]
    fn mean_is_exactly_mirror_symmetric() {
        for nose in [false, true] {
            for (h, w) in [(8, 8), (9, 13), (64, 64)] {
                let m = make_synthetic_model_with(&SyntheticModelConfig {
                    seed: 1,
                    grid_height: h,
                    grid_width: w,
                    num_modes: 4,
                    nose_bump: nose,
                })
                .unwrap();
                let mean = m.mean_positions();
                assert_eq!(m.mirror_positions(&mean), mean);
            }
        }
    }

    #[test]
    fn modes_have_declared_parity() {
        let m = make_synthetic_model(3, 12, 11, 9).unwrap();
        for k in 0..9 {
            let col = m.basis().column(k).clone_owned();
            let field = Matrix3xX::from_column_slice(col.as_slice());
            let mirrored = m.mirror_positions(&field);
            match m.mode_symmetry()[k] {
                ModeSymmetry::Symmetric => assert_eq!(mirrored, field),
                ModeSymmetry::Antisymmetric => assert_eq!(mirrored, -field),
                ModeSymmetry::Asymmetric => unreachable!(),
            }
        }
    }

    #[test]
    fn sizes_and_landmarks() {
        let m = make_synthetic_model(1, 64, 64, 10).unwrap();
        assert_eq!(m.num_vertices(), 4096);
        assert_eq!(m.landmark_indices().len(), 15);
        let m = make_synthetic_model(1, 8, 8, 2).unwrap();
        assert!(!m.landmark_indices().is_empty());
        assert!(make_synthetic_model(1, 4, 64, 2).is_err());
        assert!(make_synthetic_model(1, 64, 7, 2).is_err());
        assert!(make_synthetic_model(1, 8, 8, 0).is_err());
    }

    #[test]
    fn rim_is_flat_and_apex_is_depth() {
        let mean = synthetic_mean(33, 33, false);
        let top = mean.column(5); // row 0 lies on the rim
        assert!(top[2].abs() < 1e-9);
        let centre = mean.column(16 * 33 + 16);
        assert!((centre[2] - DEPTH).abs() < 1e-9);
    }
}
