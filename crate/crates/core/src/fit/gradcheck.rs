//! Central finite differences against every analytic backward pass.
//!
//! Each probe draws a random input `x` and a random output weighting `G`,
//! and compares the analytic gradient of `<G, f(x)>` with central
//! differences of step `1e-5 * max(1, |x_i|)`. Probes whose stencil straddles
//! a non-differentiable locus are excluded and counted.

use std::fmt::Write as _;

use nalgebra::{DVector, Matrix2xX, Matrix3, Matrix3xX, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{
    landmark_loss, multiview_loss, prior_loss, reflect_gradient, reflect_params, symmetry_loss, LandmarkSet,
};
use crate::model::{grid, MorphableModel, ShapeInstance};
use crate::sampler::{bilinear_backward, bilinear_sample, mask_backward, mask_sample, FlatImage, Image, OcclusionMask};
use crate::synthetic::make_synthetic_model;
use crate::transform::{
    axis_angle_backward, axis_angle_jacobian, axis_angle_to_matrix, exp_scale, exp_scale_backward, project_backward,
    project_ortho, rotate_backward, rotate_points, scale_backward, scale_points, skew, translate_backward,
    translate_points, GridForward, PoseShapeParams, RotationMatrix, SampleGrid,
};

/// Largest acceptable relative error.
pub const THRESHOLD: f64 = 1e-5;
const REL_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    /// `max |analytic - numeric| / max(1, |numeric|)` over checked probes.
    pub max_rel_error: f64,
    pub probes: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub seed: u64,
    pub probes: usize,
    pub ops: Vec<OpReport>,
    /// One line per probe above [`THRESHOLD`].
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn op(&self, name: &str) -> Option<&OpReport> {
        self.ops.iter().find(|o| o.name == name)
    }

    /// Fixed-width table, one row per operation.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>12} {:>7} {:>9}\n",
            "operation", "max rel err", "probes", "excluded"
        );
        for op in &self.ops {
            let _ = writeln!(
                out,
                "{:<24} {:>12.3e} {:>7} {:>9}",
                op.name, op.max_rel_error, op.probes, op.excluded
            );
        }
        out
    }
}

type Probe = fn(&mut ChaCha8Rng, &Fixture) -> Result<Option<f64>>;

struct Fixture {
    model: MorphableModel,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Max relative error of `analytic` against central differences of `f` at `x`.
fn compare(x: &[f64], f: impl Fn(&[f64]) -> f64, analytic: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        let h = REL_STEP * x[i].abs().max(1.0);
        p[i] = x[i] + h;
        let fp = f(&p);
        p[i] = x[i] - h;
        let fm = f(&p);
        p[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    worst
}

fn probe_axis_angle(rng: &mut ChaCha8Rng, _: &Fixture) -> Result<Option<f64>> {
    // away from the r = 0 branch
    let dir = Vector3::from_vec(normals(rng, 3)).normalize();
    let r = dir * rng.random_range(0.01..3.0);
    let g = Matrix3::from_vec(normals(rng, 9));
    let f = |x: &[f64]| axis_angle_to_matrix(&Vector3::from_column_slice(x)).0.dot(&g);
    Ok(Some(compare(r.as_slice(), f, axis_angle_backward(&r, &g).as_slice())))
}

fn probe_rotate(rng: &mut ChaCha8Rng, _: &Fixture) -> Result<Option<f64>> {
    let n = 6;
    let x: Vec<f64> = normals(rng, 9 + 3 * n);
    let g = Matrix3xX::from_vec(normals(rng, 3 * n));
    let split = |x: &[f64]| {
        (
            RotationMatrix(Matrix3::from_column_slice(&x[..9])),
            ShapeInstance {
                positions: Matrix3xX::from_column_slice(&x[9..]),
            },
        )
    };
    let (rot, shape) = split(&x);
    let (gr, gx) = rotate_backward(&rot, &shape, &g)?;
    let analytic: Vec<f64> = gr.iter().chain(gx.iter()).copied().collect();
    let f = |x: &[f64]| {
        let (r, s) = split(x);
        rotate_points(&r, &s).positions.dot(&g)
    };
    Ok(Some(compare(&x, f, &analytic)))
}

fn probe_project(rng: &mut ChaCha8Rng, _: &Fixture) -> Result<Option<f64>> {
    let n = 7;
    let x = normals(rng, 3 * n);
    let g = Matrix2xX::from_vec(normals(rng, 2 * n));
    let f = |x: &[f64]| {
        project_ortho(&ShapeInstance {
            positions: Matrix3xX::from_column_slice(x),
        })
        .points
        .dot(&g)
    };
    Ok(Some(compare(&x, f, project_backward(&g).as_slice())))
}

fn probe_exp_scale(rng: &mut ChaCha8Rng, _: &Fixture) -> Result<Option<f64>> {
    let logs = rng.random_range(-2.0..2.0);
    let g = normal(rng);
    let f = |x: &[f64]| g * exp_scale(x[0]);
    Ok(Some(compare(&[logs], f, &[exp_scale_backward(logs, g)])))
}

fn probe_scale(rng: &mut ChaCha8Rng, _: &Fixture) -> Result<Option<f64>> {
    let n = 7;
    let mut x = normals(rng, 1 + 2 * n);
    x[0] = rng.random_range(0.2..3.0);
    let g = Matrix2xX::from_vec(normals(rng, 2 * n));
    let grid = SampleGrid {
        points: Matrix2xX::from_column_slice(&x[1..]),
    };
    let (gs, gy) = scale_backward(x[0], &grid, &g)?;
    let analytic: Vec<f64> = std::iter::once(gs).chain(gy.iter().copied()).collect();
    let f = |x: &[f64]| {
        let grid = SampleGrid {
            points: Matrix2xX::from_column_slice(&x[1..]),
        };
        scale_points(x[0], &grid).map_or(f64::NAN, |y| y.points.dot(&g))
    };
    Ok(Some(compare(&x, f, &analytic)))
}

fn probe_translate(rng: &mut ChaCha8Rng, _: &Fixture) -> Result<Option<f64>> {
    let n = 7;
    let x: Vec<f64> = normals(rng, 2 + 2 * n).iter().map(|v| 10.0 * v).collect();
    let g = Matrix2xX::from_vec(normals(rng, 2 * n));
    let (gt, gy) = translate_backward(&g);
    let analytic: Vec<f64> = gt.iter().chain(gy.iter()).copied().collect();
    let f = |x: &[f64]| {
        let grid = SampleGrid {
            points: Matrix2xX::from_column_slice(&x[2..]),
        };
        translate_points(&Vector2::new(x[0], x[1]), &grid).points.dot(&g)
    };
    Ok(Some(compare(&x, f, &analytic)))
}

fn probe_synthesize(rng: &mut ChaCha8Rng, fx: &Fixture) -> Result<Option<f64>> {
    let m = &fx.model;
    let alpha = normals(rng, m.num_modes());
    let g = Matrix3xX::from_vec(normals(rng, 3 * m.num_vertices()));
    let analytic = m.shape_backward(&g)?;
    let f = |x: &[f64]| {
        m.synthesize_shape(&DVector::from_column_slice(x))
            .map_or(f64::NAN, |s| s.positions.dot(&g))
    };
    Ok(Some(compare(&alpha, f, analytic.as_slice())))
}

fn probe_sampler(rng: &mut ChaCha8Rng, _: &Fixture) -> Result<Option<f64>> {
    let (h, w, c, n) = (9, 11, 2, 12);
    let pixels = h * w * c;
    let mut x: Vec<f64> = (0..pixels).map(|_| rng.random_range(0.0..1.0)).collect();
    for _ in 0..n {
        x.push(rng.random_range(0.5..w as f64 + 0.5));
        x.push(rng.random_range(0.5..h as f64 + 0.5));
    }
    if on_kink(&x[pixels..]) {
        return Ok(None);
    }
    let g = FlatImage::new(n, c, normals(rng, n * c))?;
    let split = |x: &[f64]| -> Result<(Image, SampleGrid)> {
        Ok((
            Image::new(h, w, c, x[..pixels].to_vec())?,
            SampleGrid {
                points: Matrix2xX::from_column_slice(&x[pixels..]),
            },
        ))
    };
    let (img, grid) = split(&x)?;
    let grads = bilinear_backward(&img, &grid, &g)?;
    let analytic: Vec<f64> = grads.image.data().iter().chain(grads.grid.iter()).copied().collect();
    let f = |x: &[f64]| {
        let (img, grid) = split(x).expect("fixed shapes");
        dot_flat(&bilinear_sample(&img, &grid), &g)
    };
    Ok(Some(compare(&x, f, &analytic)))
}

/// Whether a difference stencil around any coordinate crosses an integer,
/// where the bilinear kernel has a kink.
fn on_kink(coords: &[f64]) -> bool {
    coords
        .iter()
        .any(|v| (v - v.round()).abs() < 2.0 * REL_STEP * v.abs().max(1.0))
}

fn dot_flat(a: &FlatImage, b: &FlatImage) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> OcclusionMask {
    OcclusionMask::new((0..n).map(|_| rng.random_bool(0.7)).collect())
}

fn probe_mask(rng: &mut ChaCha8Rng, _: &Fixture) -> Result<Option<f64>> {
    let (n, c) = (10, 3);
    let x = normals(rng, n * c);
    let mask = random_mask(rng, n);
    let g = FlatImage::new(n, c, normals(rng, n * c))?;
    let v = FlatImage::new(n, c, x.clone())?;
    let (gv, _) = mask_backward(&v, &mask, &g)?;
    let f = |x: &[f64]| {
        let v = FlatImage::new(n, c, x.to_vec()).expect("fixed shape");
        mask_sample(&v, &mask).map_or(f64::NAN, |w| dot_flat(&w, &g))
    };
    Ok(Some(compare(&x, f, gv.values())))
}

fn probe_symmetry(rng: &mut ChaCha8Rng, _: &Fixture) -> Result<Option<f64>> {
    let (h, w, c) = (4, 5, 3);
    let n = h * w;
    let sym = grid::mirror_map(h, w);
    let x = normals(rng, n * c);
    let mask = random_mask(rng, n);
    let loss = symmetry_loss(&FlatImage::new(n, c, x.clone())?, &mask, &sym)?;
    let analytic = loss.gradients.sampled.expect("sampled gradient");
    let f = |x: &[f64]| {
        let v = FlatImage::new(n, c, x.to_vec()).expect("fixed shape");
        symmetry_loss(&v, &mask, &sym).map_or(f64::NAN, |l| l.value)
    };
    Ok(Some(compare(&x, f, analytic.values())))
}

fn probe_multiview(rng: &mut ChaCha8Rng, _: &Fixture) -> Result<Option<f64>> {
    let (n, c) = (12, 3);
    let x = normals(rng, 2 * n * c);
    let (ma, mb) = (random_mask(rng, n), random_mask(rng, n));
    let split = |x: &[f64]| {
        (
            FlatImage::new(n, c, x[..n * c].to_vec()).expect("fixed shape"),
            FlatImage::new(n, c, x[n * c..].to_vec()).expect("fixed shape"),
        )
    };
    let (a, b) = split(&x);
    let loss = multiview_loss(&a, &ma, &b, &mb)?;
    let ga = loss.gradients.sampled.expect("first gradient");
    let gb = loss.gradients.sampled_other.expect("second gradient");
    let analytic: Vec<f64> = ga.values().iter().chain(gb.values()).copied().collect();
    let f = |x: &[f64]| {
        let (a, b) = split(x);
        multiview_loss(&a, &ma, &b, &mb).map_or(f64::NAN, |l| l.value)
    };
    Ok(Some(compare(&x, f, &analytic)))
}

fn probe_landmark(rng: &mut ChaCha8Rng, fx: &Fixture) -> Result<Option<f64>> {
    let m = &fx.model;
    let n = m.num_vertices();
    let l = m.landmark_indices().len();
    let x: Vec<f64> = normals(rng, 2 * n).iter().map(|v| 20.0 + 5.0 * v).collect();
    let points = Matrix2xX::from_vec(normals(rng, 2 * l).iter().map(|v| 20.0 + 5.0 * v).collect());
    let conf = (0..l).map(|_| rng.random_range(0.0..1.0)).collect();
    let lms = LandmarkSet::new(points, conf)?;
    let grid = |x: &[f64]| SampleGrid {
        points: Matrix2xX::from_column_slice(x),
    };
    let analytic = landmark_loss(&grid(&x), m, &lms)?
        .gradients
        .grid
        .expect("grid gradient");
    let f = |x: &[f64]| landmark_loss(&grid(x), m, &lms).map_or(f64::NAN, |l| l.value);
    Ok(Some(compare(&x, f, analytic.as_slice())))
}

fn probe_prior(rng: &mut ChaCha8Rng, _: &Fixture) -> Result<Option<f64>> {
    let x = normals(rng, 10);
    let analytic = prior_loss(&DVector::from_column_slice(&x))
        .gradients
        .alpha
        .expect("alpha gradient");
    let f = |x: &[f64]| prior_loss(&DVector::from_column_slice(x)).value;
    Ok(Some(compare(&x, f, analytic.as_slice())))
}

fn random_theta(rng: &mut ChaCha8Rng, num_modes: usize) -> PoseShapeParams {
    let dir = Vector3::from_vec(normals(rng, 3)).normalize();
    PoseShapeParams {
        rotation: dir * rng.random_range(0.01..1.5),
        translation: Vector2::new(rng.random_range(20.0..80.0), rng.random_range(20.0..80.0)),
        log_scale: rng.random_range(-1.0..0.3),
        alpha: DVector::from_vec(normals(rng, num_modes)),
    }
}

fn probe_grid_generate(rng: &mut ChaCha8Rng, fx: &Fixture) -> Result<Option<f64>> {
    let m = &fx.model;
    let theta = random_theta(rng, m.num_modes());
    let g = Matrix2xX::from_vec(normals(rng, 2 * m.num_vertices()));
    let analytic = GridForward::new(m, &theta)?.backward(m, &g)?.to_vec();
    let f = |x: &[f64]| {
        PoseShapeParams::from_slice(x)
            .and_then(|t| GridForward::new(m, &t))
            .map_or(f64::NAN, |gf| gf.output.points.dot(&g))
    };
    Ok(Some(compare(theta.to_vec().as_slice(), f, analytic.as_slice())))
}

fn probe_reflect(rng: &mut ChaCha8Rng, fx: &Fixture) -> Result<Option<f64>> {
    let m = &fx.model;
    let theta = random_theta(rng, m.num_modes());
    let g = DVector::from_vec(normals(rng, 6 + m.num_modes()));
    let analytic = reflect_gradient(&PoseShapeParams::from_slice(g.as_slice())?, m.mode_symmetry())?.to_vec();
    let f = |x: &[f64]| {
        PoseShapeParams::from_slice(x)
            .and_then(|t| reflect_params(&t, m.mode_symmetry(), 100))
            .map_or(f64::NAN, |r| r.to_vec().dot(&g))
    };
    Ok(Some(compare(theta.to_vec().as_slice(), f, analytic.as_slice())))
}

const PROBES: [(&str, Probe); 15] = [
    ("axis_angle_to_matrix", probe_axis_angle),
    ("rotate_points", probe_rotate),
    ("project_ortho", probe_project),
    ("exp_scale", probe_exp_scale),
    ("scale_points", probe_scale),
    ("translate_points", probe_translate),
    ("synthesize_shape", probe_synthesize),
    ("grid_generate", probe_grid_generate),
    ("reflect_params", probe_reflect),
    ("bilinear_sample", probe_sampler),
    ("mask_sample", probe_mask),
    ("symmetry_loss", probe_symmetry),
    ("multiview_loss", probe_multiview),
    ("landmark_loss", probe_landmark),
    ("prior_loss", probe_prior),
];

/// Runs `probes` probes of every operation. Results depend only on `seed`.
pub fn grad_check_all(seed: u64, probes: usize) -> Result<GradCheckReport> {
    if probes == 0 {
        return Err(Error::invalid("at least one probe is required"));
    }
    let fixture = Fixture {
        model: make_synthetic_model(seed, 8, 9, 4)?,
    };
    let results: Vec<(OpReport, Vec<String>)> = PROBES
        .par_iter()
        .enumerate()
        .map(|(k, (name, probe))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k as u64));
            let mut report = OpReport {
                name: name.to_string(),
                max_rel_error: 0.0,
                probes: 0,
                excluded: 0,
            };
            let mut failures = Vec::new();
            for p in 0..probes {
                match probe(&mut rng, &fixture) {
                    Ok(Some(err)) => {
                        report.probes += 1;
                        report.max_rel_error = report.max_rel_error.max(err);
                        if !(err < THRESHOLD) {
                            failures.push(format!("{name}: probe {p} relative error {err:.3e}"));
                        }
                    }
                    Ok(None) => report.excluded += 1,
                    Err(e) => failures.push(format!("{name}: probe {p} failed: {e}")),
                }
            }
            (report, failures)
        })
        .collect();

    // the r = 0 branch is exact by construction
    let jac = axis_angle_jacobian(&Vector3::zeros());
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    let err = (0..3)
        .map(|i| (jac[i] - skew(&basis[i])).abs().max())
        .fold(0.0, f64::max);
    let mut ops = Vec::with_capacity(results.len() + 1);
    let mut failures = Vec::new();
    for (r, f) in results {
        ops.push(r);
        failures.extend(f);
    }
    if err != 0.0 {
        failures.push(format!("axis_angle_jacobian_at_zero: error {err:.3e}"));
    }
    ops.push(OpReport {
        name: "axis_angle_jacobian_at_zero".into(),
        max_rel_error: err,
        probes: 1,
        excluded: 0,
    });
    Ok(GradCheckReport {
        seed,
        probes,
        ops,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes_and_repeats() {
        let a = grad_check_all(3, 5).unwrap();
        assert!(a.passed(), "{:?}", a.failures);
        assert_eq!(a, grad_check_all(3, 5).unwrap());
        assert_eq!(a.op("axis_angle_jacobian_at_zero").unwrap().max_rel_error, 0.0);
        assert!(grad_check_all(3, 0).is_err());
    }

    #[test]
    fn integer_coordinates_are_excluded() {
        assert!(on_kink(&[2.5, 3.0]));
        assert!(on_kink(&[4.0 + 1e-6]));
        assert!(!on_kink(&[2.5, 3.4]));
        let op = grad_check_all(9, 40).unwrap().op("bilinear_sample").unwrap().clone();
        assert_eq!(op.probes + op.excluded, 40);
    }
}
