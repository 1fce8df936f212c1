//! Toy end-to-end localiser: a small fully connected regressor from a
//! downsampled grayscale image to pose and shape, trained through the grid
//! generator, the sampler and the losses.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{FitConfig, LossWeights, Objective, SyntheticScene};
use crate::error::{Error, Result};
use crate::losses::reflect_params;
use crate::model::MorphableModel;
use crate::sampler::{occlusion_from_positions, Image};
use crate::transform::{GridForward, PoseShapeParams};

/// Side of the square grayscale input.
pub const INPUT_SIDE: usize = 32;
const HIDDEN: [usize; 2] = [256, 64];
/// Training aborts once the loss exceeds this multiple of the initial loss.
const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Clone, Debug, PartialEq)]
pub struct LocaliserConfig {
    /// Step size, moment decays, epsilon and loss weights are taken from here.
    pub fit: FitConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Step multiplier per layer, input side first.
    pub layer_step_scales: [f64; 3],
    /// Standard deviation of the output layer weights, relative to `1/sqrt(fan_in)`.
    pub output_gain: f64,
    /// Pixels of translation per unit of network output.
    pub translation_unit: f64,
    /// Log scale predicted for a zero output.
    pub base_log_scale: f64,
}

impl Default for LocaliserConfig {
    fn default() -> Self {
        LocaliserConfig {
            fit: FitConfig {
                step_size: 1e-3,
                ..FitConfig::default()
            },
            epochs: 50,
            batch_size: 10,
            seed: 1,
            layer_step_scales: [1.0, 1.0, 1.0],
            output_gain: 1e-2,
            translation_unit: 32.0,
            base_log_scale: 0.7f64.ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localiser {
    layers: Vec<Layer>,
    num_modes: usize,
    base: PoseShapeParams,
    units: DVector<f64>,
}

struct Activations {
    input: DVector<f64>,
    hidden: Vec<DVector<f64>>,
    output: DVector<f64>,
}

/// Grayscale box-filtered down to `INPUT_SIDE x INPUT_SIDE`, centred on 0.
pub fn localiser_input(image: &Image) -> DVector<f64> {
    let gray = image.to_gray();
    let (h, w) = (gray.height(), gray.width());
    let mut out = DVector::zeros(INPUT_SIDE * INPUT_SIDE);
    for i in 0..INPUT_SIDE {
        let (r0, r1) = (
            i * h / INPUT_SIDE,
            ((i + 1) * h / INPUT_SIDE).max(i * h / INPUT_SIDE + 1).min(h),
        );
        for j in 0..INPUT_SIDE {
            let (c0, c1) = (
                j * w / INPUT_SIDE,
                ((j + 1) * w / INPUT_SIDE).max(j * w / INPUT_SIDE + 1).min(w),
            );
            let mut sum = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    sum += gray.at(r, c, 0);
                }
            }
            out[i * INPUT_SIDE + j] = sum / ((r1 - r0) * (c1 - c0)) as f64 - 0.5;
        }
    }
    out
}

impl Localiser {
    /// Random weights scaled by `1/sqrt(fan_in)`; the output layer further by
    /// `output_gain`, so initial predictions sit near the base parameters.
    pub fn new(config: &LocaliserConfig, num_modes: usize, image_height: usize, image_width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sizes = [INPUT_SIDE * INPUT_SIDE, HIDDEN[0], HIDDEN[1], 6 + num_modes];
        let layers = (0..3)
            .map(|l| {
                let gain = if l == 2 { config.output_gain } else { 1.0 };
                let std = gain / (sizes[l] as f64).sqrt();
                Layer {
                    w: DMatrix::from_fn(sizes[l + 1], sizes[l], |_, _| {
                        std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    }),
                    b: DVector::zeros(sizes[l + 1]),
                }
            })
            .collect();
        let mut base = PoseShapeParams::zeros(num_modes);
        base.translation.x = (image_width + 1) as f64 / 2.0;
        base.translation.y = (image_height + 1) as f64 / 2.0;
        base.log_scale = config.base_log_scale;
        let units = DVector::from_fn(6 + num_modes, |k, _| {
            if k == 3 || k == 4 {
                config.translation_unit
            } else {
                1.0
            }
        });
        Localiser {
            layers,
            num_modes,
            base,
            units,
        }
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    /// All weights and biases, layer by layer.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied().collect::<Vec<_>>())
            .collect()
    }

    fn forward(&self, input: &DVector<f64>) -> Activations {
        let mut hidden = Vec::with_capacity(2);
        let mut x = input.clone();
        for layer in &self.layers[..2] {
            x = (&layer.w * &x + &layer.b).map(f64::tanh);
            hidden.push(x.clone());
        }
        let out = &self.layers[2].w * &x + &self.layers[2].b;
        Activations {
            input: input.clone(),
            hidden,
            output: out,
        }
    }

    /// Maps raw network outputs to parameters.
    pub fn output_to_theta(&self, output: &DVector<f64>) -> Result<PoseShapeParams> {
        let v = self.base.to_vec() + self.units.component_mul(output);
        PoseShapeParams::from_slice(v.as_slice())
    }

    pub fn raw_output(&self, image: &Image) -> DVector<f64> {
        self.forward(&localiser_input(image)).output
    }

    pub fn predict(&self, image: &Image) -> Result<PoseShapeParams> {
        self.output_to_theta(&self.raw_output(image))
    }

    /// Gradients of every layer given `dL/d(output)`.
    fn backward(&self, act: &Activations, grad_out: &DVector<f64>) -> Vec<Layer> {
        let mut grads = Vec::with_capacity(3);
        let mut g = grad_out.clone();
        for l in (0..3).rev() {
            let input = if l == 0 { &act.input } else { &act.hidden[l - 1] };
            grads.push(Layer {
                w: &g * input.transpose(),
                b: g.clone(),
            });
            if l > 0 {
                let back = self.layers[l].w.transpose() * &g;
                g = back.component_mul(&act.hidden[l - 1].map(|a| 1.0 - a * a));
            }
        }
        grads.reverse();
        grads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean loss of each minibatch, in order.
    pub step_losses: Vec<f64>,
    /// Mean loss over each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean loss of the untrained network over all scenes.
    pub initial_loss: f64,
}

struct SceneGrad {
    loss: f64,
    layers: Vec<Layer>,
}

fn scene_gradient(
    net: &Localiser,
    model: &MorphableModel,
    scene: &SyntheticScene,
    weights: LossWeights,
) -> Result<SceneGrad> {
    let act = net.forward(&localiser_input(&scene.image));
    let theta = net.output_to_theta(&act.output)?;
    let objective = Objective::new(model, Some(&scene.image), &scene.landmarks, weights)?;
    let (loss, grad) = objective.evaluate(&theta)?;
    let grad_out = grad.to_vec().component_mul(&net.units);
    Ok(SceneGrad {
        loss: loss.total,
        layers: net.backward(&act, &grad_out),
    })
}

/// Trains a fresh localiser on `scenes` with Adam over shuffled minibatches.
/// Per-scene gradients run in parallel and are summed in scene order.
pub fn train_toy_localiser(
    scenes: &[SyntheticScene],
    model: &MorphableModel,
    config: &LocaliserConfig,
) -> Result<(Localiser, TrainReport)> {
    if scenes.len() < 10 {
        return Err(Error::InvalidConfig("at least 10 scenes are needed".into()));
    }
    let fit = &config.fit;
    if !(fit.step_size >= 0.0 && fit.step_size.is_finite()) {
        return Err(Error::InvalidConfig("step size must be non-negative".into()));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
    }
    if !config.layer_step_scales.iter().all(|s| *s >= 0.0 && s.is_finite()) {
        return Err(Error::InvalidConfig("layer step scales must be non-negative".into()));
    }
    let (h, w) = (scenes[0].image.height(), scenes[0].image.width());
    if scenes.iter().any(|s| s.image.height() != h || s.image.width() != w) {
        return Err(Error::invalid("scenes must share image dimensions"));
    }
    let mut net = Localiser::new(config, model.num_modes(), h, w);
    let weights = fit.weights;

    let evaluate = |net: &Localiser, batch: &[usize]| -> Result<Vec<SceneGrad>> {
        batch
            .par_iter()
            .map(|&i| scene_gradient(net, model, &scenes[i], weights))
            .collect()
    };
    let all: Vec<usize> = (0..scenes.len()).collect();
    let initial: Vec<f64> = evaluate(&net, &all)?.iter().map(|g| g.loss).collect();
    let initial_loss = initial.iter().sum::<f64>() / initial.len() as f64;
    if !initial_loss.is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            what: "initial localiser loss".into(),
        });
    }

    let zero_like = |net: &Localiser| -> Vec<Layer> {
        net.layers
            .iter()
            .map(|l| Layer {
                w: DMatrix::zeros(l.w.nrows(), l.w.ncols()),
                b: DVector::zeros(l.b.len()),
            })
            .collect()
    };
    let mut m1 = zero_like(&net);
    let mut m2 = zero_like(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x74_7261_696e);
    let mut order = all.clone();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut t = 0i32;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let grads = evaluate(&net, batch)?;
            let mut total = zero_like(&net);
            let mut loss = 0.0;
            for g in &grads {
                loss += g.loss;
                for (acc, add) in total.iter_mut().zip(&g.layers) {
                    acc.w += &add.w;
                    acc.b += &add.b;
                }
            }
            let n = batch.len() as f64;
            loss /= n;
            t += 1;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    iteration: t as usize,
                    what: "localiser loss".into(),
                });
            }
            let limit = DIVERGENCE_FACTOR * initial_loss;
            if loss > limit {
                return Err(Error::Diverged {
                    step: t as usize,
                    loss,
                    limit,
                });
            }
            step_losses.push(loss);
            epoch_sum += loss * n;
            let (c1, c2) = (1.0 - fit.beta1.powi(t), 1.0 - fit.beta2.powi(t));
            for (l, layer) in net.layers.iter_mut().enumerate() {
                let step = fit.step_size * config.layer_step_scales[l];
                let g = &total[l];
                let update = |p: &mut f64, g: f64, a: &mut f64, b: &mut f64| {
                    let g = g / n;
                    *a = fit.beta1 * *a + (1.0 - fit.beta1) * g;
                    *b = fit.beta2 * *b + (1.0 - fit.beta2) * g * g;
                    *p -= step * (*a / c1) / ((*b / c2).sqrt() + fit.epsilon);
                };
                for (((p, g), a), b) in layer
                    .w
                    .iter_mut()
                    .zip(g.w.iter())
                    .zip(m1[l].w.iter_mut())
                    .zip(m2[l].w.iter_mut())
                {
                    update(p, *g, a, b);
                }
                for (((p, g), a), b) in layer
                    .b
                    .iter_mut()
                    .zip(g.b.iter())
                    .zip(m1[l].b.iter_mut())
                    .zip(m2[l].b.iter_mut())
                {
                    update(p, *g, a, b);
                }
            }
        }
        epoch_losses.push(epoch_sum / scenes.len() as f64);
    }
    Ok((
        net,
        TrainReport {
            step_losses,
            epoch_losses,
            initial_loss,
        },
    ))
}

/// Largest relative error between the analytic gradient of the scene loss
/// with respect to the raw network outputs and central differences, plus
/// the number of output components skipped because the difference stencil
/// crossed a sampler cell edge or changed the occlusion mask.
pub fn output_gradient_check(
    net: &Localiser,
    model: &MorphableModel,
    scene: &SyntheticScene,
    weights: LossWeights,
) -> Result<(f64, usize)> {
    let objective = Objective::new(model, Some(&scene.image), &scene.landmarks, weights)?;
    let out = net.raw_output(&scene.image);
    let (_, grad) = objective.evaluate(&net.output_to_theta(&out)?)?;
    let analytic = grad.to_vec().component_mul(&net.units);
    let width = scene.image.width();
    let signature = |theta: &PoseShapeParams| -> Result<(Vec<[i64; 2]>, Vec<bool>)> {
        let mut cells = Vec::new();
        let mut bits = Vec::new();
        for t in [theta.clone(), reflect_params(theta, model.mode_symmetry(), width)?] {
            let gf = GridForward::new(model, &t)?;
            cells.extend(
                gf.output
                    .points
                    .column_iter()
                    .map(|p| [p[0].floor() as i64, p[1].floor() as i64]),
            );
            let (mask, _) = occlusion_from_positions(
                model.grid_height(),
                model.grid_width(),
                &gf.shape.positions,
                gf.rotation.matrix(),
            );
            bits.extend_from_slice(mask.bits());
        }
        Ok((cells, bits))
    };
    let mut worst: f64 = 0.0;
    let mut excluded = 0;
    for k in 0..out.len() {
        let h = 1e-6 * out[k].abs().max(1e-2);
        let mut plus = out.clone();
        plus[k] += h;
        let mut minus = out.clone();
        minus[k] -= h;
        let (tp, tm) = (net.output_to_theta(&plus)?, net.output_to_theta(&minus)?);
        if signature(&tp)? != signature(&tm)? {
            excluded += 1;
            continue;
        }
        let numeric = (objective.evaluate(&tp)?.0.total - objective.evaluate(&tm)?.0.total) / (2.0 * h);
        worst = worst.max((analytic[k] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok((worst, excluded))
}
