//! Synthetic ground-truth scenes: a textured model rendered orthographically
//! under known parameters, with projected landmarks.

use nalgebra::{DVector, Matrix2xX, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::LandmarkSet;
use crate::model::MorphableModel;
use crate::raster::{split_quads, with_quad_centres, DepthBuffer};
use crate::sampler::{vertex_normal_sums, Image};
use crate::transform::{axis_angle_from_euler, GridForward, PoseShapeParams};

/// Depth slack when deciding whether a landmark is visible.
const VISIBILITY_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: Image,
    pub true_theta: PoseShapeParams,
    pub landmarks: LandmarkSet,
}

/// Smooth RGB texture on the model grid, exactly mirror symmetric: every
/// term depends on the horizontal grid coordinate only through `|xi|`.
pub fn symmetric_texture(model: &MorphableModel, seed: u64) -> Vec<f64> {
    let (h, w) = (model.grid_height(), model.grid_width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms: Vec<[f64; 5]> = (0..3 * 4)
        .map(|_| {
            [
                rng.random_range(0..4) as f64,
                rng.random_range(0..4) as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.04..0.09),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let (wd, hd) = ((w - 1) as f64, (h - 1) as f64);
    let mut out = Vec::with_capacity(3 * h * w);
    for v in 0..h * w {
        let (r, c) = (v / w, v % w);
        let xi = ((2.0 * c as f64 - wd) / wd).abs();
        let eta = (2.0 * r as f64 - hd) / hd;
        for ch in 0..3 {
            let mut val = 0.5;
            for t in &terms[4 * ch..4 * ch + 4] {
                let pi = std::f64::consts::PI;
                val += t[3] * (pi * (t[0] + 0.5) * xi + t[4]).cos() * (pi * (t[1] + 0.5) * eta + t[2]).cos();
            }
            out.push(val);
        }
    }
    out
}

/// Ranges used to draw random scene parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseRange {
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
    pub max_roll_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Largest offset of the translation from the image centre, in pixels.
    pub max_offset: f64,
    pub alpha_std: f64,
}

impl Default for PoseRange {
    fn default() -> Self {
        PoseRange {
            max_yaw_deg: 30.0,
            max_pitch_deg: 20.0,
            max_roll_deg: 15.0,
            min_scale: 0.6,
            max_scale: 0.8,
            max_offset: 6.0,
            alpha_std: 0.5,
        }
    }
}

/// Draws parameters uniformly within `range`, centred in an `H x W` image.
pub fn sample_theta(
    rng: &mut ChaCha8Rng,
    num_modes: usize,
    height: usize,
    width: usize,
    range: &PoseRange,
) -> PoseShapeParams {
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let yaw = sym(range.max_yaw_deg).to_radians();
    let pitch = sym(range.max_pitch_deg).to_radians();
    let roll = sym(range.max_roll_deg).to_radians();
    let tx = (width + 1) as f64 / 2.0 + sym(range.max_offset);
    let ty = (height + 1) as f64 / 2.0 + sym(range.max_offset);
    let scale = if range.max_scale > range.min_scale {
        rng.random_range(range.min_scale..range.max_scale)
    } else {
        range.min_scale
    };
    let normal = Normal::new(0.0, range.alpha_std.max(0.0)).expect("finite std");
    let alpha = DVector::from_fn(num_modes, |_, _| normal.sample(rng));
    PoseShapeParams {
        rotation: axis_angle_from_euler(yaw, pitch, roll),
        translation: Vector2::new(tx, ty),
        log_scale: scale.ln(),
        alpha,
    }
}

/// Renders the model under `theta` into an `H x W` RGB image with a black
/// background. Landmarks are the projected landmark vertices plus Gaussian
/// noise; landmarks hidden in the depth buffer get confidence 0.
pub fn render_synthetic_scene(
    model: &MorphableModel,
    theta: &PoseShapeParams,
    texture_seed: u64,
    height: usize,
    width: usize,
    landmark_noise_std: f64,
) -> Result<SyntheticScene> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidConfig("image dimensions must be positive".into()));
    }
    if !(landmark_noise_std >= 0.0 && landmark_noise_std.is_finite()) {
        return Err(Error::InvalidConfig("landmark noise must be non-negative".into()));
    }
    let gf = GridForward::new(model, theta)?;
    let pts = &gf.output.points;
    let inside = pts
        .column_iter()
        .all(|p| p[0] >= 1.0 && p[0] <= width as f64 && p[1] >= 1.0 && p[1] <= height as f64);
    if !inside {
        return Err(Error::InvalidConfig(format!(
            "the shape leaves the {height}x{width} frame under the requested pose"
        )));
    }
    let (gh, gw) = (model.grid_height(), model.grid_width());
    let xy = with_quad_centres(gh, gw, pts.as_slice(), 2);
    let depth = with_quad_centres(gh, gw, &gf.depths(), 1);
    let texture = with_quad_centres(gh, gw, &symmetric_texture(model, texture_seed), 3);
    let buffer = DepthBuffer::for_mesh(&Matrix2xX::from_column_slice(&xy), &depth, &split_quads(gh, gw))?;
    let image = buffer.render(&texture, 3, height, width, 0.0)?;
    let visible = buffer.vertex_visibility(VISIBILITY_TOLERANCE);

    let idx = model.landmark_indices();
    let mut points = pts.select_columns(idx);
    if landmark_noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(texture_seed ^ 0x6c61_6e64_6d61_726b);
        let normal = Normal::new(0.0, landmark_noise_std).expect("finite std");
        points.iter_mut().for_each(|p| *p += normal.sample(&mut rng));
    }
    let confidences = idx.iter().map(|&v| if visible[v] { 1.0 } else { 0.0 }).collect();
    Ok(SyntheticScene {
        image,
        true_theta: theta.clone(),
        landmarks: LandmarkSet::new(points, confidences)?,
    })
}

/// Gray rendering of the shape under `theta`, shaded by the view-facing
/// component of the vertex normals, on a black background.
pub fn render_shaded(model: &MorphableModel, theta: &PoseShapeParams, height: usize, width: usize) -> Result<Image> {
    let gf = GridForward::new(model, theta)?;
    let (gh, gw) = (model.grid_height(), model.grid_width());
    let view = gf.rotation.matrix().row(2).transpose();
    let shade: Vec<f64> = vertex_normal_sums(gh, gw, &gf.shape.positions)
        .iter()
        .map(|n| {
            let len = n.norm();
            if len > 0.0 {
                (view.dot(n) / len).max(0.0)
            } else {
                0.0
            }
        })
        .collect();
    let xy = with_quad_centres(gh, gw, gf.output.points.as_slice(), 2);
    let depth = with_quad_centres(gh, gw, &gf.depths(), 1);
    let shade = with_quad_centres(gh, gw, &shade, 1);
    let buffer = DepthBuffer::for_mesh(&Matrix2xX::from_column_slice(&xy), &depth, &split_quads(gh, gw))?;
    buffer.render(&shade, 1, height, width, 0.0)
}

/// Coarse start: no rotation or shape, scale from the ratio of landmark
/// bounding-box diagonals, translation matching the centroids.
pub fn init_from_landmarks(landmarks: &LandmarkSet, model: &MorphableModel) -> Result<PoseShapeParams> {
    let idx = model.landmark_indices();
    if idx.len() != landmarks.len() {
        return Err(Error::invalid("landmark count does not match the model"));
    }
    let used: Vec<usize> = (0..idx.len()).filter(|&k| landmarks.confidences()[k] > 0.0).collect();
    if used.len() < 2 {
        return Err(Error::invalid("at least two confident landmarks are needed"));
    }
    let mean = model.mean_positions();
    let source: Vec<[f64; 2]> = used.iter().map(|&k| [mean[(0, idx[k])], mean[(1, idx[k])]]).collect();
    let target: Vec<[f64; 2]> = used
        .iter()
        .map(|&k| [landmarks.points()[(0, k)], landmarks.points()[(1, k)]])
        .collect();
    let diag = |p: &[[f64; 2]]| {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for q in p {
            for a in 0..2 {
                lo[a] = lo[a].min(q[a]);
                hi[a] = hi[a].max(q[a]);
            }
        }
        ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt()
    };
    let (ds, dt) = (diag(&source), diag(&target));
    if !(ds > 0.0 && dt > 0.0) {
        return Err(Error::invalid("confident landmarks are all at one point"));
    }
    let s = dt / ds;
    let centroid = |p: &[[f64; 2]]| {
        let n = p.len() as f64;
        [
            p.iter().map(|q| q[0]).sum::<f64>() / n,
            p.iter().map(|q| q[1]).sum::<f64>() / n,
        ]
    };
    let (cs, ct) = (centroid(&source), centroid(&target));
    let mut theta = PoseShapeParams::zeros(model.num_modes());
    theta.log_scale = s.ln();
    theta.translation = Vector2::new(ct[0] - s * cs[0], ct[1] - s * cs[1]);
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::symmetry_loss;
    use crate::sampler::{bilinear_sample, compute_occlusion};
    use crate::synthetic::make_synthetic_model;
    use crate::transform::grid_generate;

    fn model() -> MorphableModel {
        make_synthetic_model(1, 24, 24, 4).unwrap()
    }

    #[test]
    fn noiseless_landmarks_are_projections_and_scenes_repeat() {
        let m = model();
        let mut theta = PoseShapeParams::zeros(4);
        theta.translation = Vector2::new(40.0, 41.0);
        theta.log_scale = 0.5f64.ln();
        theta.rotation = nalgebra::Vector3::new(0.1, 0.2, 0.05);
        let a = render_synthetic_scene(&m, &theta, 3, 80, 80, 0.0).unwrap();
        let g = grid_generate(&m, &theta).unwrap();
        assert_eq!(a.landmarks.points(), &g.points.select_columns(m.landmark_indices()));
        let b = render_synthetic_scene(&m, &theta, 3, 80, 80, 0.0).unwrap();
        assert_eq!(a, b);
        let noisy = render_synthetic_scene(&m, &theta, 3, 80, 80, 1.0).unwrap();
        assert_ne!(noisy.landmarks.points(), a.landmarks.points());
        assert_eq!(noisy.image, a.image);
    }

    #[test]
    fn out_of_frame_is_rejected() {
        let m = model();
        let theta = PoseShapeParams::zeros(4);
        assert!(matches!(
            render_synthetic_scene(&m, &theta, 1, 64, 64, 0.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn frontal_symmetric_scene_has_symmetric_sample() {
        let m = model();
        let mut theta = PoseShapeParams::zeros(4);
        theta.translation = Vector2::new(40.5, 40.0);
        theta.log_scale = 0.5f64.ln();
        let scene = render_synthetic_scene(&m, &theta, 9, 80, 80, 0.0).unwrap();
        let v = bilinear_sample(&scene.image, &grid_generate(&m, &theta).unwrap());
        let (mask, _) = compute_occlusion(&m, &crate::RotationMatrix::identity(), &theta.alpha).unwrap();
        let loss = symmetry_loss(&v, &mask, m.sym_index()).unwrap();
        assert!(loss.value < 1e-10, "{}", loss.value);
        assert!(v.values().iter().any(|x| *x > 0.0));
    }

    #[test]
    fn shaded_rendering_is_brightest_facing_the_viewer() {
        let m = model();
        let mut theta = PoseShapeParams::zeros(4);
        theta.translation = Vector2::new(40.5, 40.5);
        theta.log_scale = 0.5f64.ln();
        let img = render_shaded(&m, &theta, 80, 80).unwrap();
        assert_eq!(img.at(0, 0, 0), 0.0);
        assert!(img.at(39, 39, 0) > 0.95);
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn init_examples() {
        let m = model();
        let mean = m.mean_positions();
        let idx = m.landmark_indices();
        let shifted = Matrix2xX::from_fn(idx.len(), |r, k| mean[(r, idx[k])] + if r == 0 { 30.0 } else { 40.0 });
        let theta = init_from_landmarks(&LandmarkSet::confident(shifted.clone()).unwrap(), &m).unwrap();
        assert!(theta.log_scale.abs() < 1e-9);
        assert!((theta.translation - Vector2::new(30.0, 40.0)).norm() < 1e-9);
        assert_eq!(theta.rotation, nalgebra::Vector3::zeros());
        let c = shifted.column_mean();
        let doubled = Matrix2xX::from_fn(idx.len(), |r, k| c[r] + 2.0 * (shifted[(r, k)] - c[r]));
        let theta = init_from_landmarks(&LandmarkSet::confident(doubled).unwrap(), &m).unwrap();
        assert!((theta.log_scale - 2f64.ln()).abs() < 1e-12);
        let mut conf = vec![0.0; idx.len()];
        conf[0] = 1.0;
        assert!(init_from_landmarks(&LandmarkSet::new(shifted, conf).unwrap(), &m).is_err());
    }
}
