//! Direct first-order fitting of pose and shape to one image, synthetic
//! scenes, a toy end-to-end localiser and the finite-difference harness.

mod gradcheck;
mod localiser;
mod scene;

pub use gradcheck::{grad_check_all, GradCheckReport, OpReport};
pub use localiser::{
    localiser_input, output_gradient_check, train_toy_localiser, Localiser, LocaliserConfig, TrainReport, INPUT_SIDE,
};
pub use scene::{
    init_from_landmarks, render_shaded, render_synthetic_scene, sample_theta, symmetric_texture, PoseRange,
    SyntheticScene,
};

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Matrix2xX;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::{
    landmark_loss_points, multiview_loss, reflect_gradient, reflect_params, symmetry_loss, LandmarkSet,
};
use crate::model::MorphableModel;
use crate::sampler::{
    bilinear_grid_backward, bilinear_sample, occlusion_from_positions, FlatImage, Image, OcclusionMask,
};
use crate::transform::{GridForward, PoseShapeParams};

/// Window, in iterations, over which the relative loss decrease is measured.
pub const CONVERGENCE_WINDOW: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub landmark: f64,
    pub symmetry: f64,
    pub multiview: f64,
    pub prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            landmark: 1.0,
            symmetry: 0.1,
            multiview: 0.1,
            prior: 0.01,
        }
    }
}

impl LossWeights {
    pub fn landmark_only() -> Self {
        LossWeights {
            landmark: 1.0,
            symmetry: 0.0,
            multiview: 0.0,
            prior: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("landmark", self.landmark),
            ("symmetry", self.symmetry),
            ("multiview", self.multiview),
            ("prior", self.prior),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} weight must be non-negative and finite"
                )));
            }
        }
        Ok(())
    }

    fn needs_image(&self) -> bool {
        self.symmetry > 0.0 || self.multiview > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Zeros,
    LandmarkBox,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(InitMode::Zeros),
            "landmark-box" | "landmarks" => Ok(InitMode::LandmarkBox),
            _ => Err(Error::InvalidConfig(format!("unknown initialisation mode `{s}`"))),
        }
    }
}

/// Multipliers on the base step for each parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepScales {
    pub rotation: f64,
    pub translation: f64,
    pub log_scale: f64,
    pub alpha: f64,
}

impl Default for StepScales {
    fn default() -> Self {
        StepScales {
            rotation: 1.0,
            translation: 10.0,
            log_scale: 1.0,
            alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub max_iterations: usize,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop when the best loss fell by less than this fraction over the last
    /// [`CONVERGENCE_WINDOW`] iterations.
    pub tolerance: f64,
    /// Per-iteration multiplicative decay of the step.
    pub step_decay: f64,
    pub step_scales: StepScales,
    pub weights: LossWeights,
    pub init: InitMode,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iterations: 20000,
            step_size: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            tolerance: 1e-12,
            step_decay: 0.999,
            step_scales: StepScales::default(),
            weights: LossWeights::default(),
            init: InitMode::LandmarkBox,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step size must be positive");
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return bad("tolerance must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("moment decay rates must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return bad("step decay must lie in (0, 1]");
        }
        let s = self.step_scales;
        if ![s.rotation, s.translation, s.log_scale, s.alpha]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
        {
            return bad("step scales must be non-negative");
        }
        self.weights.validate()
    }
}

/// Weighted components of the fitting objective; `total` is their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub landmark: f64,
    pub symmetry: f64,
    pub multiview: f64,
    pub prior: f64,
}

/// The fitting objective for one image.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    model: &'a MorphableModel,
    image: Option<&'a Image>,
    flipped: Option<Image>,
    landmarks: &'a LandmarkSet,
    weights: LossWeights,
}

struct Sampled {
    forward: GridForward,
    values: FlatImage,
    mask: OcclusionMask,
}

impl<'a> Objective<'a> {
    pub fn new(
        model: &'a MorphableModel,
        image: Option<&'a Image>,
        landmarks: &'a LandmarkSet,
        weights: LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        if landmarks.len() != model.landmark_indices().len() {
            return Err(Error::invalid(format!(
                "model has {} landmarks but {} were given",
                model.landmark_indices().len(),
                landmarks.len()
            )));
        }
        if weights.needs_image() && image.is_none() {
            return Err(Error::InvalidConfig(
                "image terms are weighted but no image was given".into(),
            ));
        }
        let flipped = (weights.multiview > 0.0).then(|| image.expect("checked").flip_horizontal());
        Ok(Objective {
            model,
            image,
            flipped,
            landmarks,
            weights,
        })
    }

    fn sample(&self, image: &Image, theta: &PoseShapeParams) -> Result<Sampled> {
        let forward = GridForward::new(self.model, theta)?;
        let values = bilinear_sample(image, &forward.output);
        let (mask, _) = occlusion_from_positions(
            self.model.grid_height(),
            self.model.grid_width(),
            &forward.shape.positions,
            forward.rotation.matrix(),
        );
        Ok(Sampled { forward, values, mask })
    }

    /// Loss components and the gradient of the weighted total.
    pub fn evaluate(&self, theta: &PoseShapeParams) -> Result<(LossBreakdown, PoseShapeParams)> {
        let m = self.model;
        let w = self.weights;
        if theta.num_modes() != m.num_modes() {
            return Err(Error::invalid("parameter vector does not match the model"));
        }
        let mut out = LossBreakdown::default();
        let mut grad = PoseShapeParams::zeros(m.num_modes());

        if w.landmark > 0.0 {
            let gf = GridForward::subset(m, theta, m.landmark_indices())?;
            let loss = landmark_loss_points(&gf.output.points, self.landmarks)?;
            out.landmark = loss.value;
            let g = loss.gradients.grid.expect("landmark gradient") * w.landmark;
            accumulate(&mut grad, &gf.backward(m, &g)?);
        }
        if w.prior > 0.0 {
            out.prior = theta.alpha.norm_squared();
            grad.alpha += 2.0 * w.prior * &theta.alpha;
        }
        if w.needs_image() {
            let image = self.image.expect("checked in new");
            let a = self.sample(image, theta)?;
            let mut grad_values = FlatImage::zeros(a.values.num_points(), a.values.channels());
            if w.symmetry > 0.0 {
                let loss = symmetry_loss(&a.values, &a.mask, m.sym_index())?;
                out.symmetry = loss.value;
                axpy(
                    &mut grad_values,
                    &loss.gradients.sampled.expect("sampled gradient"),
                    w.symmetry,
                );
            }
            if w.multiview > 0.0 {
                let flipped = self.flipped.as_ref().expect("built in new");
                let reflected = reflect_params(theta, m.mode_symmetry(), image.width())?;
                let b = self.sample(flipped, &reflected)?;
                let loss = multiview_loss(&a.values, &a.mask, &b.values, &b.mask)?;
                out.multiview = loss.value;
                axpy(
                    &mut grad_values,
                    &loss.gradients.sampled.expect("sampled gradient"),
                    w.multiview,
                );
                let mut gb = loss.gradients.sampled_other.expect("second gradient");
                gb.values_mut().iter_mut().for_each(|v| *v *= w.multiview);
                let grid_b = bilinear_grid_backward(flipped, &b.forward.output, &gb)?;
                accumulate(
                    &mut grad,
                    &reflect_gradient(&b.forward.backward(m, &grid_b)?, m.mode_symmetry())?,
                );
            }
            let grid_a = bilinear_grid_backward(image, &a.forward.output, &grad_values)?;
            accumulate(&mut grad, &a.forward.backward(m, &grid_a)?);
        }
        out.total =
            w.landmark * out.landmark + w.symmetry * out.symmetry + w.multiview * out.multiview + w.prior * out.prior;
        Ok((out, grad))
    }
}

fn accumulate(acc: &mut PoseShapeParams, g: &PoseShapeParams) {
    acc.rotation += g.rotation;
    acc.translation += g.translation;
    acc.log_scale += g.log_scale;
    acc.alpha += &g.alpha;
}

fn axpy(acc: &mut FlatImage, g: &FlatImage, w: f64) {
    for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
        *a += w * b;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub losses: LossBreakdown,
    pub theta: PoseShapeParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    /// Parameters with the lowest total loss seen.
    pub theta: PoseShapeParams,
    pub losses: LossBreakdown,
    /// Number of parameter updates performed.
    pub iterations: usize,
    pub converged: bool,
    /// One entry per evaluated iterate, starting with the initial one.
    pub trace: Vec<TraceEntry>,
}

impl FitResult {
    /// Running minimum of the total loss along the trace.
    pub fn running_minimum(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trace
            .iter()
            .map(|e| {
                best = best.min(e.losses.total);
                best
            })
            .collect()
    }
}

/// Fits pose and shape to `image` and `landmarks`, starting from the
/// configured initialisation.
pub fn fit_params(
    image: &Image,
    landmarks: &LandmarkSet,
    model: &MorphableModel,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    let init = match config.init {
        InitMode::Zeros => PoseShapeParams::zeros(model.num_modes()),
        InitMode::LandmarkBox => init_from_landmarks(landmarks, model)?,
    };
    fit_params_from(image, landmarks, model, config, init)
}

/// As [`fit_params`] with an explicit starting point.
pub fn fit_params_from(
    image: &Image,
    landmarks: &LandmarkSet,
    model: &MorphableModel,
    config: &FitConfig,
    init: PoseShapeParams,
) -> Result<FitResult> {
    config.validate()?;
    let objective = Objective::new(model, Some(image), landmarks, config.weights)?;
    let d = model.num_modes();
    let n = 6 + d;
    let s = config.step_scales;
    let group_scale: Vec<f64> = (0..n)
        .map(|k| match k {
            0..=2 => s.rotation,
            3 | 4 => s.translation,
            5 => s.log_scale,
            _ => s.alpha,
        })
        .collect();

    let mut theta = init;
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut trace = Vec::new();
    let mut best_history = Vec::new();
    let mut best: Option<(f64, PoseShapeParams, LossBreakdown)> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut step = config.step_size;

    for k in 0..=config.max_iterations {
        let (losses, grad) = objective.evaluate(&theta)?;
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                iteration: k,
                what: "loss".into(),
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                iteration: k,
                what: "gradient".into(),
            });
        }
        trace.push(TraceEntry {
            iteration: k,
            losses,
            theta: theta.clone(),
        });
        if best.as_ref().is_none_or(|b| losses.total < b.0) {
            best = Some((losses.total, theta.clone(), losses));
        }
        let current = best.as_ref().expect("set above").0;
        best_history.push(current);
        if k >= CONVERGENCE_WINDOW {
            let before = best_history[k - CONVERGENCE_WINDOW];
            if before - current <= config.tolerance * before.abs() {
                converged = true;
                break;
            }
        }
        if k == config.max_iterations {
            break;
        }

        let g = grad.to_vec();
        let mut x = theta.to_vec();
        let t = (k + 1) as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for i in 0..n {
            m1[i] = config.beta1 * m1[i] + (1.0 - config.beta1) * g[i];
            m2[i] = config.beta2 * m2[i] + (1.0 - config.beta2) * g[i] * g[i];
            x[i] -= step * group_scale[i] * (m1[i] / c1) / ((m2[i] / c2).sqrt() + config.epsilon);
        }
        theta = PoseShapeParams::from_slice(x.as_slice())?;
        // a runaway step can leave a finite log scale whose exponential is 0 or inf
        let scale = theta.log_scale.exp();
        if !theta.is_finite() || !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::NonFinite {
                iteration: k + 1,
                what: "parameters".into(),
            });
        }
        step *= config.step_decay;
        iterations = k + 1;
    }
    let (_, theta, losses) = best.expect("at least one evaluation");
    Ok(FitResult {
        theta,
        losses,
        iterations,
        converged,
        trace,
    })
}

/// Root-mean-square distance over confident landmarks between the model's
/// projected landmarks under `theta` and `landmarks`.
pub fn landmark_rmse(model: &MorphableModel, theta: &PoseShapeParams, landmarks: &LandmarkSet) -> Result<f64> {
    let gf = GridForward::subset(model, theta, model.landmark_indices())?;
    let pred: &Matrix2xX<f64> = &gf.output.points;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, &c) in landmarks.confidences().iter().enumerate() {
        if c > 0.0 {
            sum += (pred.column(k) - landmarks.points().column(k)).norm_squared();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no confident landmarks"));
    }
    Ok((sum / count as f64).sqrt())
}

/// CSV with one row per trace entry: iteration, total and component losses,
/// then every entry of theta.
pub fn trace_to_csv(trace: &[TraceEntry]) -> String {
    let d = trace.first().map_or(0, |e| e.theta.num_modes());
    let mut out = String::from("iteration,total,landmark,symmetry,multiview,prior,r1,r2,r3,tx,ty,log_scale");
    for k in 1..=d {
        let _ = write!(out, ",alpha{k}");
    }
    out.push('\n');
    for e in trace {
        let l = e.losses;
        let _ = write!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?}",
            e.iteration, l.total, l.landmark, l.symmetry, l.multiview, l.prior
        );
        for v in e.theta.to_vec().iter() {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn write_trace_csv(path: &Path, trace: &[TraceEntry]) -> Result<()> {
    write_atomic(path, trace_to_csv(trace).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::make_synthetic_model;
    use nalgebra::{DVector, Vector2, Vector3};

    fn setup() -> (MorphableModel, SyntheticScene) {
        let m = make_synthetic_model(2, 24, 24, 3).unwrap();
        let theta = PoseShapeParams {
            rotation: Vector3::new(0.1, -0.25, 0.05),
            translation: Vector2::new(40.3, 39.6),
            log_scale: 0.55f64.ln(),
            alpha: DVector::from_vec(vec![0.3, -0.2, 0.4]),
        };
        let scene = render_synthetic_scene(&m, &theta, 5, 80, 80, 0.0).unwrap();
        (m, scene)
    }

    fn central_difference(obj: &Objective, theta: &PoseShapeParams) -> Vec<f64> {
        let x = theta.to_vec();
        (0..x.len())
            .map(|i| {
                let h = 1e-6 * x[i].abs().max(1.0);
                let mut p = x.clone();
                p[i] += h;
                let mut q = x.clone();
                q[i] -= h;
                let fp = obj
                    .evaluate(&PoseShapeParams::from_slice(p.as_slice()).unwrap())
                    .unwrap()
                    .0
                    .total;
                let fq = obj
                    .evaluate(&PoseShapeParams::from_slice(q.as_slice()).unwrap())
                    .unwrap()
                    .0
                    .total;
                (fp - fq) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn objective_gradient_matches_differences() {
        let (m, scene) = setup();
        let w = LossWeights {
            landmark: 1.0,
            symmetry: 2.0,
            multiview: 3.0,
            prior: 0.5,
        };
        let obj = Objective::new(&m, Some(&scene.image), &scene.landmarks, w).unwrap();
        let mut theta = scene.true_theta.clone();
        theta.translation += Vector2::new(0.37, -0.21);
        theta.rotation[1] += 0.03;
        let (_, g) = obj.evaluate(&theta).unwrap();
        let fd = central_difference(&obj, &theta);
        for (a, n) in g.to_vec().iter().zip(&fd) {
            assert!((a - n).abs() / n.abs().max(1.0) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn ground_truth_start_is_stationary() {
        let (m, scene) = setup();
        let config = FitConfig {
            weights: LossWeights::landmark_only(),
            ..Default::default()
        };
        let fit = fit_params_from(&scene.image, &scene.landmarks, &m, &config, scene.true_theta.clone()).unwrap();
        let first = fit.trace[0].losses.total;
        assert!(fit.trace.iter().all(|e| (e.losses.total - first).abs() < 1e-9));
        assert!(fit.converged);
    }

    #[test]
    fn prior_dominance_shrinks_alpha() {
        let (m, scene) = setup();
        let config = FitConfig {
            weights: LossWeights {
                landmark: 0.0,
                symmetry: 0.0,
                multiview: 0.0,
                prior: 1e6,
            },
            ..Default::default()
        };
        let fit = fit_params_from(&scene.image, &scene.landmarks, &m, &config, scene.true_theta.clone()).unwrap();
        assert!(fit.theta.alpha.norm() < 1e-3, "{}", fit.theta.alpha.norm());
    }

    #[test]
    fn landmark_fit_recovers_pose_and_trace_min_decreases() {
        let (m, scene) = setup();
        let config = FitConfig {
            weights: LossWeights::landmark_only(),
            ..Default::default()
        };
        let fit = fit_params(&scene.image, &scene.landmarks, &m, &config).unwrap();
        let run = fit.running_minimum();
        assert!(run.windows(2).all(|p| p[1] <= p[0]));
        assert!(landmark_rmse(&m, &fit.theta, &scene.landmarks).unwrap() < 0.5);
        let r_fit = crate::transform::axis_angle_to_matrix(&fit.theta.rotation);
        let r_true = crate::transform::axis_angle_to_matrix(&scene.true_theta.rotation);
        assert!(r_fit.angle_to(&r_true).to_degrees() < 2.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        let (m, scene) = setup();
        for config in [
            FitConfig {
                step_size: 0.0,
                ..Default::default()
            },
            FitConfig {
                tolerance: 0.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                fit_params(&scene.image, &scene.landmarks, &m, &config),
                Err(Error::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let (m, scene) = setup();
        let config = FitConfig {
            max_iterations: 3,
            weights: LossWeights::landmark_only(),
            ..Default::default()
        };
        let fit = fit_params(&scene.image, &scene.landmarks, &m, &config).unwrap();
        let csv = trace_to_csv(&fit.trace);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].ends_with("alpha3"));
        assert_eq!(lines[1].split(',').count(), 6 + 6 + 3);
    }
}
