use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use morphstn::fit::{
    fit_params, grad_check_all, landmark_rmse, render_shaded, render_synthetic_scene, sample_theta, write_trace_csv,
    FitConfig, InitMode, LossWeights, PoseRange, StepScales,
};
use morphstn::flatten::{flatten_to_model, load_mesh, read_obj, TriangleMesh, WeightScheme};
use morphstn::io::{
    flat_to_image, read_image, read_landmarks, read_mask_png, read_model, read_theta, write_landmarks, write_mask_png,
    write_model, write_png, write_png16_gray, write_theta,
};
use morphstn::sampler::{bilinear_sample, mask_sample, occlusion_from_positions};
use morphstn::synthetic::{make_synthetic_model_with, SyntheticModelConfig};
use morphstn::transform::{axis_angle_to_matrix, GridForward};
use morphstn::{Image, MorphableModel, OcclusionMask, PoseShapeParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::settings::Settings;
use crate::staging::Staging;
use crate::{
    AverageArgs, CliError, Command, FitArgs, FlattenArgs, GenModelArgs, GradCheckArgs, SampleArgs, SynthDataArgs,
};

type Outcome = Result<(String, Vec<PathBuf>), CliError>;

pub(crate) fn dispatch(command: &Command, s: &Settings) -> Outcome {
    match command {
        Command::GenModel(a) => gen_model(a, s),
        Command::Flatten(a) => flatten(a, s),
        Command::GradCheck(a) => grad_check(a, s),
        Command::Fit(a) => fit(a, s),
        Command::Sample(a) => sample(a, s),
        Command::Average(a) => average(a, s),
        Command::SynthData(a) => synth_data(a, s),
    }
}

fn gen_model(a: &GenModelArgs, s: &Settings) -> Outcome {
    let config = SyntheticModelConfig {
        seed: s.get_or(a.seed, "seed", 1)?,
        grid_height: s.get_or(a.height, "height", 64)?,
        grid_width: s.get_or(a.width, "width", 64)?,
        num_modes: s.get_or(a.modes, "modes", 10)?,
        nose_bump: s.get_or(a.nose_bump, "nose-bump", false)?,
    };
    let output: PathBuf = s.require(a.output.clone(), "output")?;
    s.finish()?;
    let model = make_synthetic_model_with(&config)?;
    write_model(&output, &model)?;
    Ok((
        format!(
            "model: {} vertices ({}x{} grid), {} modes, {} landmarks, {}\nwrote {}\n",
            model.num_vertices(),
            model.grid_height(),
            model.grid_width(),
            model.num_modes(),
            model.landmark_indices().len(),
            if config.nose_bump { "nose bump" } else { "convex" },
            output.display()
        ),
        vec![output],
    ))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}_{suffix}"))
}

/// Mean shape with each coordinate stretched to `[0, 1]`, as RGB.
fn geometry_image(model: &MorphableModel) -> Result<Image, CliError> {
    let mean = model.mean_positions();
    let mut data = vec![0.0; 3 * model.num_vertices()];
    for axis in 0..3 {
        let row = mean.row(axis);
        let (lo, hi) = (row.min(), row.max());
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (v, x) in row.iter().enumerate() {
            data[3 * v + axis] = (x - lo) / span;
        }
    }
    Ok(Image::new(model.grid_height(), model.grid_width(), 3, data)?)
}

fn flatten(a: &FlattenArgs, s: &Settings) -> Outcome {
    let mesh_path: PathBuf = s.require(a.mesh.clone(), "mesh")?;
    let sidecar: Option<PathBuf> = s.get(a.sidecar.clone(), "sidecar")?;
    let weights: String = s.get_or(a.weights.clone(), "weights", "uniform".into())?;
    let height = s.get_or(a.height, "height", 64)?;
    let width = s.get_or(a.width, "width", 64)?;
    let modes = s.get_or(a.modes, "modes", 10)?;
    let seed = s.get_or(a.seed, "seed", 1)?;
    let output: PathBuf = s.require(a.output.clone(), "output")?;
    s.finish()?;
    let scheme: WeightScheme = weights.parse()?;
    let mesh = match &sidecar {
        Some(side) => load_mesh(&mesh_path, side)?,
        None => {
            let (positions, faces) = read_obj(&mesh_path)?;
            TriangleMesh::new(positions, faces, Vec::new(), Vec::new())?
        }
    };
    let out = flatten_to_model(&mesh, scheme, &[], modes, seed, height, width)?;

    // deviation of uv from the bounding-box normalised xy
    let pos = out.full_mesh.positions();
    let (x0, x1, y0, y1) = (pos.row(0).min(), pos.row(0).max(), pos.row(1).min(), pos.row(1).max());
    let planar_dev = out
        .embedding
        .uv
        .iter()
        .enumerate()
        .map(|(i, uv)| {
            let x = (pos[(0, i)] - x0) / (x1 - x0);
            let y = (pos[(1, i)] - y0) / (y1 - y0);
            (uv[0] - x).abs().max((uv[1] - y).abs())
        })
        .fold(0.0, f64::max);

    let mut stage = Staging::near(&output)?;
    write_model(&stage.file(&output), &out.model)?;
    write_png(
        &stage.file(&sibling(&output, "geometry.png")),
        &geometry_image(&out.model)?,
    )?;
    let depth: Vec<f64> = out.model.mean_positions().row(2).iter().copied().collect();
    let (lo, hi) = depth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), z| (l.min(*z), h.max(*z)));
    write_png16_gray(
        &stage.file(&sibling(&output, "depth.png")),
        &depth,
        height,
        width,
        lo,
        hi,
    )?;
    let artifacts = stage.commit()?;

    let mut summary = format!(
        "full mesh: {} vertices, {} faces\nflipped triangles: {}\nmirror error: {:.3e}\n",
        out.full_mesh.num_vertices(),
        out.full_mesh.faces().len(),
        out.flipped_faces,
        out.mirror_error
    );
    let _ = writeln!(summary, "max |uv - xy| (bounding box normalised): {planar_dev:.3e}");
    if planar_dev < 1e-9 {
        summary.push_str("uv equals xy within 1e-9\n");
    }
    let _ = writeln!(
        summary,
        "model: {} vertices ({height}x{width} grid), {} modes",
        out.model.num_vertices(),
        out.model.num_modes()
    );
    for p in &artifacts {
        let _ = writeln!(summary, "wrote {}", p.display());
    }
    Ok((summary, artifacts))
}

fn grad_check(a: &GradCheckArgs, s: &Settings) -> Outcome {
    let seed = s.get_or(a.seed, "seed", 1)?;
    let probes = s.get_or(a.probes, "probes", 100)?;
    let output: Option<PathBuf> = s.get(a.output.clone(), "output")?;
    s.finish()?;
    let report = grad_check_all(seed, probes)?;
    let mut text = report.table();
    if !report.passed() {
        for f in &report.failures {
            let _ = writeln!(text, "FAIL {f}");
        }
        return Err(CliError::numerical(text));
    }
    text.push_str("all operations within 1e-5\n");
    let mut artifacts = Vec::new();
    if let Some(path) = output {
        morphstn::io::write_atomic(&path, text.as_bytes())?;
        artifacts.push(path);
    }
    Ok((text, artifacts))
}

fn fit(a: &FitArgs, s: &Settings) -> Outcome {
    let image_path: PathBuf = s.require(a.image.clone(), "image")?;
    let landmarks_path: PathBuf = s.require(a.landmarks.clone(), "landmarks")?;
    let model_path: PathBuf = s.require(a.model.clone(), "model")?;
    let out_dir: PathBuf = s.require(a.output_dir.clone(), "output-dir")?;
    let truth_path: Option<PathBuf> = s.get(a.truth.clone(), "truth")?;
    let d = FitConfig::default();
    let w = LossWeights::default();
    let init: String = s.get_or(a.init.clone(), "init", "landmark-box".into())?;
    let config = FitConfig {
        max_iterations: s.get_or(a.max_iterations, "max-iterations", d.max_iterations)?,
        step_size: s.get_or(a.step_size, "step-size", d.step_size)?,
        step_decay: s.get_or(a.step_decay, "step-decay", d.step_decay)?,
        tolerance: s.get_or(a.tolerance, "tolerance", d.tolerance)?,
        beta1: s.get_or(a.beta1, "beta1", d.beta1)?,
        beta2: s.get_or(a.beta2, "beta2", d.beta2)?,
        weights: LossWeights {
            landmark: s.get_or(a.landmark_weight, "landmark-weight", w.landmark)?,
            symmetry: s.get_or(a.symmetry_weight, "symmetry-weight", w.symmetry)?,
            multiview: s.get_or(a.multiview_weight, "multiview-weight", w.multiview)?,
            prior: s.get_or(a.prior_weight, "prior-weight", w.prior)?,
        },
        init: init.parse::<InitMode>()?,
        epsilon: d.epsilon,
        step_scales: StepScales::default(),
    };
    s.finish()?;
    config.validate()?;

    let model = read_model(&model_path)?;
    let image = read_image(&image_path)?;
    let landmarks = read_landmarks(&landmarks_path, model.landmark_indices().len())?;
    let truth = truth_path.as_deref().map(read_theta).transpose()?;
    let result = fit_params(&image, &landmarks, &model, &config)?;
    let theta = &result.theta;

    let gf = GridForward::new(&model, theta)?;
    let (gh, gw) = (model.grid_height(), model.grid_width());
    let sampled = bilinear_sample(&image, &gf.output);
    let (mask, _) = occlusion_from_positions(gh, gw, &gf.shape.positions, gf.rotation.matrix());
    let masked = mask_sample(&sampled, &mask)?;
    let rendering = render_shaded(&model, theta, image.height(), image.width())?;

    let mut stage = Staging::near(&out_dir.join("theta.txt"))?;
    write_theta(&stage.file(&out_dir.join("theta.txt")), theta)?;
    write_trace_csv(&stage.file(&out_dir.join("trace.csv")), &result.trace)?;
    write_png(&stage.file(&out_dir.join("input.png")), &image)?;
    write_png(&stage.file(&out_dir.join("rendering.png")), &rendering)?;
    write_png(
        &stage.file(&out_dir.join("sampled.png")),
        &flat_to_image(&sampled, gh, gw)?,
    )?;
    write_mask_png(&stage.file(&out_dir.join("mask.png")), &mask, gh, gw)?;
    write_png(
        &stage.file(&out_dir.join("output.png")),
        &flat_to_image(&masked, gh, gw)?,
    )?;
    let artifacts = stage.commit()?;

    let l = result.losses;
    let mut summary =
        format!(
        "iterations: {} ({})\nloss: total {:.6e}, landmark {:.6e}, symmetry {:.6e}, multiview {:.6e}, prior {:.6e}\n",
        result.iterations,
        if result.converged { "converged" } else { "iteration limit" },
        l.total,
        l.landmark,
        l.symmetry,
        l.multiview,
        l.prior
    );
    let _ = writeln!(
        summary,
        "landmark rmse: {:.6} px",
        landmark_rmse(&model, theta, &landmarks)?
    );
    let _ = writeln!(summary, "|alpha|: {:.6e}", theta.alpha.norm());
    let _ = writeln!(summary, "visible vertices: {}/{}", mask.count_visible(), mask.len());
    if let Some(t) = truth {
        let rot = axis_angle_to_matrix(&theta.rotation).angle_to(&axis_angle_to_matrix(&t.rotation));
        let _ = writeln!(
            summary,
            "recovery: rotation {:.4} deg, log scale {:.2e}, translation {:.4} px",
            rot.to_degrees(),
            (theta.log_scale - t.log_scale).abs(),
            (theta.translation - t.translation).norm()
        );
    }
    for p in &artifacts {
        let _ = writeln!(summary, "wrote {}", p.display());
    }
    Ok((summary, artifacts))
}

fn sample(a: &SampleArgs, s: &Settings) -> Outcome {
    let image_path: PathBuf = s.require(a.image.clone(), "image")?;
    let model_path: PathBuf = s.require(a.model.clone(), "model")?;
    let theta_path: PathBuf = s.require(a.theta.clone(), "theta")?;
    let out_dir: PathBuf = s.require(a.output_dir.clone(), "output-dir")?;
    s.finish()?;
    let model = read_model(&model_path)?;
    let image = read_image(&image_path)?;
    let theta: PoseShapeParams = read_theta(&theta_path)?;
    if theta.num_modes() != model.num_modes() {
        return Err(CliError::input(format!(
            "parameters have {} modes but the model has {}",
            theta.num_modes(),
            model.num_modes()
        )));
    }
    let gf = GridForward::new(&model, &theta)?;
    let (gh, gw) = (model.grid_height(), model.grid_width());
    let sampled = bilinear_sample(&image, &gf.output);
    let (mask, _) = occlusion_from_positions(gh, gw, &gf.shape.positions, gf.rotation.matrix());
    let masked = mask_sample(&sampled, &mask)?;
    let mut stage = Staging::near(&out_dir.join("sampled.png"))?;
    write_png(
        &stage.file(&out_dir.join("sampled.png")),
        &flat_to_image(&sampled, gh, gw)?,
    )?;
    write_mask_png(&stage.file(&out_dir.join("mask.png")), &mask, gh, gw)?;
    write_png(
        &stage.file(&out_dir.join("output.png")),
        &flat_to_image(&masked, gh, gw)?,
    )?;
    let artifacts = stage.commit()?;
    let mut summary = format!("visible vertices: {}/{}\n", mask.count_visible(), mask.len());
    for p in &artifacts {
        let _ = writeln!(summary, "wrote {}", p.display());
    }
    Ok((summary, artifacts))
}

/// `out = sum_k M_k V_k / max(1, sum_k M_k)` per pixel, with the coverage
/// map of pixels seen at least once.
pub(crate) fn average_images(inputs: &[(Image, OcclusionMask)]) -> Result<(Image, OcclusionMask), CliError> {
    let Some((first, _)) = inputs.first() else {
        return Err(CliError::input("at least one image and mask pair is required"));
    };
    let (h, w, c) = (first.height(), first.width(), first.channels());
    for (k, (img, mask)) in inputs.iter().enumerate() {
        if img.height() != h || img.width() != w || img.channels() != c {
            return Err(CliError::input(format!(
                "input {} is {}x{}x{}, expected {h}x{w}x{c}",
                k + 1,
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        if mask.len() != h * w {
            return Err(CliError::input(format!("mask {} does not match its image", k + 1)));
        }
    }
    let mut sum = vec![0.0; h * w * c];
    let mut count = vec![0.0f64; h * w];
    for (img, mask) in inputs {
        for p in 0..h * w {
            if mask.bits()[p] {
                count[p] += 1.0;
                for ch in 0..c {
                    sum[p * c + ch] += img.data()[p * c + ch];
                }
            }
        }
    }
    for p in 0..h * w {
        let n = count[p].max(1.0);
        for ch in 0..c {
            sum[p * c + ch] /= n;
        }
    }
    let coverage = OcclusionMask::new(count.iter().map(|n| *n > 0.0).collect());
    Ok((Image::new(h, w, c, sum)?, coverage))
}

fn average(a: &AverageArgs, s: &Settings) -> Outcome {
    let output: PathBuf = s.require(a.output.clone(), "output")?;
    let coverage_path: PathBuf = s.get_or(a.coverage.clone(), "coverage", sibling(&output, "coverage.png"))?;
    s.finish()?;
    let mut inputs = Vec::with_capacity(a.pairs.len() / 2);
    for pair in a.pairs.chunks(2) {
        let img = read_image(&pair[0])?;
        let (mask, mh, mw) = read_mask_png(&pair[1])?;
        if (mh, mw) != (img.height(), img.width()) {
            return Err(CliError::input(format!(
                "mask {} is {mh}x{mw} but image {} is {}x{}",
                pair[1].display(),
                pair[0].display(),
                img.height(),
                img.width()
            )));
        }
        inputs.push((img, mask));
    }
    let (mean, coverage) = average_images(&inputs)?;
    let mut stage = Staging::near(&output)?;
    write_png(&stage.file(&output), &mean)?;
    write_mask_png(&stage.file(&coverage_path), &coverage, mean.height(), mean.width())?;
    let artifacts = stage.commit()?;
    let mut summary = format!(
        "averaged {} images; {} of {} pixels covered\n",
        inputs.len(),
        coverage.count_visible(),
        coverage.len()
    );
    for p in &artifacts {
        let _ = writeln!(summary, "wrote {}", p.display());
    }
    Ok((summary, artifacts))
}

fn synth_data(a: &SynthDataArgs, s: &Settings) -> Outcome {
    let model_path: PathBuf = s.require(a.model.clone(), "model")?;
    let count = s.get_or(a.count, "count", 50)?;
    let seed = s.get_or(a.seed, "seed", 7)?;
    let noise = s.get_or(a.noise, "noise", 0.0)?;
    let out_dir: PathBuf = s.require(a.output_dir.clone(), "output-dir")?;
    let height = s.get_or(a.height, "height", 128)?;
    let width = s.get_or(a.width, "width", 128)?;
    let d = PoseRange::default();
    let range = PoseRange {
        max_yaw_deg: s.get_or(a.max_yaw, "max-yaw", d.max_yaw_deg)?,
        max_pitch_deg: s.get_or(a.max_pitch, "max-pitch", d.max_pitch_deg)?,
        max_roll_deg: s.get_or(a.max_roll, "max-roll", d.max_roll_deg)?,
        min_scale: s.get_or(a.min_scale, "min-scale", d.min_scale)?,
        max_scale: s.get_or(a.max_scale, "max-scale", d.max_scale)?,
        max_offset: s.get_or(a.max_offset, "max-offset", d.max_offset)?,
        alpha_std: s.get_or(a.alpha_std, "alpha-std", d.alpha_std)?,
    };
    s.finish()?;
    if count == 0 {
        return Err(CliError::input("--count must be at least 1"));
    }
    let finite = [
        range.max_yaw_deg,
        range.max_pitch_deg,
        range.max_roll_deg,
        range.max_offset,
        range.alpha_std,
    ];
    if !(range.min_scale > 0.0 && range.max_scale >= range.min_scale && range.max_scale.is_finite())
        || !finite.iter().all(|v| *v >= 0.0 && v.is_finite())
    {
        return Err(CliError::input(
            "pose ranges must be non-negative with 0 < min-scale <= max-scale",
        ));
    }
    let model = read_model(&model_path)?;
    let scenes = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let theta = sample_theta(&mut rng, model.num_modes(), height, width, &range);
            let texture_seed: u64 = rng.random();
            render_synthetic_scene(&model, &theta, texture_seed, height, width, noise)
                .map_err(|e| CliError::from(e).with_prefix(&format!("scene {i}")))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let mut stage = Staging::near(&out_dir.join("x"))?;
    for (i, scene) in scenes.iter().enumerate() {
        let dir = out_dir.join(format!("scene_{i:04}"));
        write_png(&stage.file(&dir.join("image.png")), &scene.image)?;
        write_landmarks(&stage.file(&dir.join("landmarks.txt")), &scene.landmarks)?;
        write_theta(&stage.file(&dir.join("theta.txt")), &scene.true_theta)?;
    }
    let artifacts = stage.commit()?;
    let occluded: usize = scenes
        .iter()
        .map(|s| s.landmarks.len() - s.landmarks.num_confident())
        .sum();
    Ok((
        format!(
            "wrote {count} scenes ({height}x{width}) to {}; {occluded} landmarks occluded in total\n",
            out_dir.display()
        ),
        artifacts,
    ))
}

impl CliError {
    fn with_prefix(mut self, prefix: &str) -> Self {
        self.message = format!("{prefix}: {}", self.message);
        self
    }
}
