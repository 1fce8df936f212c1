//! Geometric losses on sampled images, sample grids and shape coefficients.
//!
//! Every loss returns its value together with gradients for the inputs it
//! depends on. [`total_loss`] combines weighted components.

use nalgebra::{DVector, Matrix2xX, Vector3};

use crate::error::{Error, Result};
use crate::model::{ModeSymmetry, MorphableModel};
use crate::sampler::{FlatImage, OcclusionMask};
use crate::transform::{PoseShapeParams, SampleGrid};

/// Target landmark positions (source-image pixels) and confidences.
/// Undetected or invisible landmarks carry confidence 0.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Matrix2xX<f64>,
    confidences: Vec<f64>,
}

impl LandmarkSet {
    pub fn new(points: Matrix2xX<f64>, confidences: Vec<f64>) -> Result<Self> {
        if points.ncols() != confidences.len() {
            return Err(Error::invalid(format!(
                "{} landmark points but {} confidences",
                points.ncols(),
                confidences.len()
            )));
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("landmark positions must be finite"));
        }
        if !confidences.iter().all(|c| c.is_finite() && *c >= 0.0) {
            return Err(Error::invalid("landmark confidences must be finite and non-negative"));
        }
        Ok(LandmarkSet { points, confidences })
    }

    /// All confidences 1.
    pub fn confident(points: Matrix2xX<f64>) -> Result<Self> {
        let n = points.ncols();
        Self::new(points, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }

    pub fn points(&self) -> &Matrix2xX<f64> {
        &self.points
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn num_confident(&self) -> usize {
        self.confidences.iter().filter(|c| **c > 0.0).count()
    }

    /// Confidences multiplied by `factor`.
    pub fn scaled_confidences(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.points.clone(),
            self.confidences.iter().map(|c| c * factor).collect(),
        )
    }
}

/// Gradients of a loss, one slot per possible input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossGradients {
    /// Sampled image (first image for the multiview loss).
    pub sampled: Option<FlatImage>,
    /// Second sampled image of the multiview loss.
    pub sampled_other: Option<FlatImage>,
    /// Sample grid, `2 x N`.
    pub grid: Option<Matrix2xX<f64>>,
    pub alpha: Option<DVector<f64>>,
    pub theta: Option<PoseShapeParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradients: LossGradients,
}

/// `sum_i sum_c M_i M_sym(i) (V_i - V_sym(i))^2`, summed over all `i` so each
/// mirror pair is counted twice.
pub fn symmetry_loss(sampled: &FlatImage, mask: &OcclusionMask, sym_index: &[usize]) -> Result<LossValue> {
    let n = sampled.num_points();
    let c = sampled.channels();
    if mask.len() != n || sym_index.len() != n {
        return Err(Error::invalid("symmetry loss inputs have mismatched lengths"));
    }
    if sym_index.iter().enumerate().any(|(i, &s)| s >= n || sym_index[s] != i) {
        return Err(Error::invalid("symmetry index is not an involution"));
    }
    let v = sampled.values();
    let mut value = 0.0;
    let mut grad = vec![0.0; n * c];
    for (i, &s) in sym_index.iter().enumerate() {
        let m = mask.value(i) * mask.value(s);
        if m == 0.0 {
            continue;
        }
        for ch in 0..c {
            let d = v[i * c + ch] - v[s * c + ch];
            value += m * d * d;
            grad[i * c + ch] += 2.0 * m * d;
            grad[s * c + ch] -= 2.0 * m * d;
        }
    }
    Ok(LossValue {
        value,
        gradients: LossGradients {
            sampled: Some(FlatImage::new(n, c, grad)?),
            ..Default::default()
        },
    })
}

/// `sum_i sum_c M_i N_i (V_i - W_i)^2` between two sampled images.
pub fn multiview_loss(
    sampled_a: &FlatImage,
    mask_a: &OcclusionMask,
    sampled_b: &FlatImage,
    mask_b: &OcclusionMask,
) -> Result<LossValue> {
    let n = sampled_a.num_points();
    let c = sampled_a.channels();
    if sampled_b.num_points() != n || sampled_b.channels() != c || mask_a.len() != n || mask_b.len() != n {
        return Err(Error::invalid("multiview loss inputs have mismatched shapes"));
    }
    let (a, b) = (sampled_a.values(), sampled_b.values());
    let mut value = 0.0;
    let mut ga = vec![0.0; n * c];
    let mut gb = vec![0.0; n * c];
    for i in 0..n {
        let m = mask_a.value(i) * mask_b.value(i);
        if m == 0.0 {
            continue;
        }
        for ch in 0..c {
            let k = i * c + ch;
            let d = a[k] - b[k];
            value += m * d * d;
            ga[k] = 2.0 * m * d;
            gb[k] = -2.0 * m * d;
        }
    }
    Ok(LossValue {
        value,
        gradients: LossGradients {
            sampled: Some(FlatImage::new(n, c, ga)?),
            sampled_other: Some(FlatImage::new(n, c, gb)?),
            ..Default::default()
        },
    })
}

/// Parameters describing the horizontally mirrored image of width `W`:
/// `r -> (r1, -r2, -r3)`, `t_x -> W + 1 - t_x`, antisymmetric modes negated.
/// Asymmetric modes are left unchanged, so the result is then only
/// approximately the mirror.
pub fn reflect_params(
    theta: &PoseShapeParams,
    mode_symmetry: &[ModeSymmetry],
    image_width: usize,
) -> Result<PoseShapeParams> {
    if mode_symmetry.len() != theta.alpha.len() {
        return Err(Error::invalid("mode symmetry flags do not match alpha"));
    }
    let r = theta.rotation;
    let mut out = theta.clone();
    out.rotation = Vector3::new(r[0], -r[1], -r[2]);
    out.translation[0] = (image_width + 1) as f64 - theta.translation[0];
    for (a, s) in out.alpha.iter_mut().zip(mode_symmetry) {
        if *s == ModeSymmetry::Antisymmetric {
            *a = -*a;
        }
    }
    Ok(out)
}

/// Chain rule through [`reflect_params`]: maps a gradient with respect to
/// the reflected parameters back to the original ones.
pub fn reflect_gradient(grad: &PoseShapeParams, mode_symmetry: &[ModeSymmetry]) -> Result<PoseShapeParams> {
    if mode_symmetry.len() != grad.alpha.len() {
        return Err(Error::invalid("mode symmetry flags do not match alpha"));
    }
    let mut out = grad.clone();
    out.rotation = Vector3::new(grad.rotation[0], -grad.rotation[1], -grad.rotation[2]);
    out.translation[0] = -grad.translation[0];
    for (a, s) in out.alpha.iter_mut().zip(mode_symmetry) {
        if *s == ModeSymmetry::Antisymmetric {
            *a = -*a;
        }
    }
    Ok(out)
}

/// `sum_i c_i |L_i - l_i|^2` on already selected landmark points (`2 x L`).
/// The gradient slot `grid` holds the `2 x L` gradient.
pub fn landmark_loss_points(predicted: &Matrix2xX<f64>, landmarks: &LandmarkSet) -> Result<LossValue> {
    if predicted.ncols() != landmarks.len() {
        return Err(Error::invalid(format!(
            "{} predicted landmarks but {} targets",
            predicted.ncols(),
            landmarks.len()
        )));
    }
    let mut value = 0.0;
    let mut grad = Matrix2xX::zeros(landmarks.len());
    for (i, &c) in landmarks.confidences.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let d = predicted.column(i) - landmarks.points.column(i);
        value += c * d.norm_squared();
        grad.set_column(i, &(2.0 * c * d));
    }
    Ok(LossValue {
        value,
        gradients: LossGradients {
            grid: Some(grad),
            ..Default::default()
        },
    })
}

/// Landmark loss on the full sample grid: selects the model's landmark
/// columns. The grid gradient is `2 x N`, zero off the landmarks.
pub fn landmark_loss(grid: &SampleGrid, model: &MorphableModel, landmarks: &LandmarkSet) -> Result<LossValue> {
    let idx = model.landmark_indices();
    if idx.len() != landmarks.len() {
        return Err(Error::invalid(format!(
            "model has {} landmarks but {} were given",
            idx.len(),
            landmarks.len()
        )));
    }
    if grid.num_points() != model.num_vertices() {
        return Err(Error::invalid("grid does not match the model"));
    }
    let selected = grid.points.select_columns(idx);
    let mut loss = landmark_loss_points(&selected, landmarks)?;
    let small = loss.gradients.grid.take().expect("landmark gradient");
    let mut full = Matrix2xX::zeros(grid.num_points());
    for (k, &v) in idx.iter().enumerate() {
        full.set_column(v, &small.column(k));
    }
    loss.gradients.grid = Some(full);
    Ok(loss)
}

/// `|alpha|^2`.
pub fn prior_loss(alpha: &DVector<f64>) -> LossValue {
    LossValue {
        value: alpha.norm_squared(),
        gradients: LossGradients {
            alpha: Some(2.0 * alpha),
            ..Default::default()
        },
    }
}

fn add_slot<T>(
    acc: &mut Option<T>,
    add: &Option<T>,
    weight: f64,
    combine: impl Fn(&mut T, &T, f64) -> Result<()>,
    scale: impl Fn(&T, f64) -> T,
) -> Result<()> {
    if let Some(g) = add {
        match acc {
            Some(a) => combine(a, g, weight)?,
            None => *acc = Some(scale(g, weight)),
        }
    }
    Ok(())
}

fn flat_axpy(a: &mut FlatImage, g: &FlatImage, w: f64) -> Result<()> {
    if a.num_points() != g.num_points() || a.channels() != g.channels() {
        return Err(Error::invalid("cannot combine gradients of different shapes"));
    }
    for (x, y) in a.values_mut().iter_mut().zip(g.values()) {
        *x += w * y;
    }
    Ok(())
}

fn flat_scaled(g: &FlatImage, w: f64) -> FlatImage {
    let mut out = g.clone();
    out.values_mut().iter_mut().for_each(|v| *v *= w);
    out
}

/// Weighted sum of loss components; gradients combine linearly.
pub fn total_loss(components: &[(&LossValue, f64)]) -> Result<LossValue> {
    let mut value = 0.0;
    let mut grads = LossGradients::default();
    for (loss, w) in components {
        let w = *w;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::invalid(format!(
                "loss weight must be non-negative and finite, got {w}"
            )));
        }
        value += w * loss.value;
        let g = &loss.gradients;
        add_slot(&mut grads.sampled, &g.sampled, w, flat_axpy, flat_scaled)?;
        add_slot(&mut grads.sampled_other, &g.sampled_other, w, flat_axpy, flat_scaled)?;
        add_slot(
            &mut grads.grid,
            &g.grid,
            w,
            |a, b, w| {
                if a.shape() != b.shape() {
                    return Err(Error::invalid("cannot combine grid gradients of different shapes"));
                }
                *a += w * b;
                Ok(())
            },
            |b, w| w * b,
        )?;
        add_slot(
            &mut grads.alpha,
            &g.alpha,
            w,
            |a, b, w| {
                if a.len() != b.len() {
                    return Err(Error::invalid("cannot combine alpha gradients of different lengths"));
                }
                *a += w * b;
                Ok(())
            },
            |b, w| w * b,
        )?;
        add_slot(
            &mut grads.theta,
            &g.theta,
            w,
            |a, b, w| {
                if a.alpha.len() != b.alpha.len() {
                    return Err(Error::invalid("cannot combine parameter gradients of different sizes"));
                }
                a.rotation += w * b.rotation;
                a.translation += w * b.translation;
                a.log_scale += w * b.log_scale;
                a.alpha += w * &b.alpha;
                Ok(())
            },
            |b, w| PoseShapeParams {
                rotation: w * b.rotation,
                translation: w * b.translation,
                log_scale: w * b.log_scale,
                alpha: w * &b.alpha,
            },
        )?;
    }
    Ok(LossValue {
        value,
        gradients: grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::make_synthetic_model;
    use crate::transform::grid_generate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_flat(rng: &mut ChaCha8Rng, n: usize, c: usize) -> FlatImage {
        FlatImage::new(n, c, (0..n * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> OcclusionMask {
        OcclusionMask::new((0..n).map(|_| rng.random_bool(0.7)).collect())
    }

    fn fd_flat(f: impl Fn(&FlatImage) -> f64, x: &FlatImage, analytic: &FlatImage) {
        let h = 1e-6;
        for k in 0..x.values().len() {
            let mut p = x.clone();
            let mut q = x.clone();
            p.values_mut()[k] += h;
            q.values_mut()[k] -= h;
            let numeric = (f(&p) - f(&q)) / (2.0 * h);
            let rel = (analytic.values()[k] - numeric).abs() / numeric.abs().max(1.0);
            assert!(rel < 1e-6, "entry {k}: {} vs {numeric}", analytic.values()[k]);
        }
    }

    #[test]
    fn symmetry_toy_pair() {
        // Enumerate the formula: i = 0 pairs with 1 and i = 1 with 0.
        let v = FlatImage::new(2, 1, vec![0.2, 0.6]).unwrap();
        let sym = [1, 0];
        let expected: f64 = (0..2).map(|i: usize| (v.at(i, 0) - v.at(sym[i], 0)).powi(2)).sum();
        let loss = symmetry_loss(&v, &OcclusionMask::all_visible(2), &sym).unwrap();
        assert!((loss.value - expected).abs() < 1e-15);
        assert!((loss.value - 0.32).abs() < 1e-15);
        let zero = symmetry_loss(&v, &OcclusionMask::new(vec![false, false]), &sym).unwrap();
        assert_eq!(zero.value, 0.0);
    }

    #[test]
    fn symmetric_image_has_zero_symmetry_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sym = crate::model::grid::mirror_map(4, 5);
        let base = random_flat(&mut rng, 20, 3);
        let mut v = base.clone();
        for (i, &s) in sym.iter().enumerate() {
            for ch in 0..3 {
                v.values_mut()[i * 3 + ch] = base.at(i, ch) + base.at(s, ch);
            }
        }
        let loss = symmetry_loss(&v, &random_mask(&mut rng, 20), &sym).unwrap();
        assert_eq!(loss.value, 0.0);
    }

    #[test]
    fn symmetry_gradient_and_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sym = crate::model::grid::mirror_map(4, 5);
        let v = random_flat(&mut rng, 20, 2);
        let m = random_mask(&mut rng, 20);
        let loss = symmetry_loss(&v, &m, &sym).unwrap();
        fd_flat(
            |x| symmetry_loss(x, &m, &sym).unwrap().value,
            &v,
            loss.gradients.sampled.as_ref().unwrap(),
        );
        let permuted = symmetry_loss(&v.permuted(&sym).unwrap(), &m.permuted(&sym), &sym).unwrap();
        assert!((permuted.value - loss.value).abs() < 1e-14);
        assert!(symmetry_loss(&v, &m, &[0; 20]).is_err());
    }

    #[test]
    fn multiview_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_flat(&mut rng, 30, 2);
        let b = random_flat(&mut rng, 30, 2);
        let (ma, mb) = (random_mask(&mut rng, 30), random_mask(&mut rng, 30));
        assert_eq!(multiview_loss(&a, &ma, &a, &mb).unwrap().value, 0.0);
        let ab = multiview_loss(&a, &ma, &b, &mb).unwrap();
        let ba = multiview_loss(&b, &mb, &a, &ma).unwrap();
        assert_eq!(ab.value, ba.value);
        let bits: Vec<bool> = ma.bits().iter().map(|x| !x).collect();
        assert_eq!(
            multiview_loss(&a, &ma, &b, &OcclusionMask::new(bits)).unwrap().value,
            0.0
        );
        fd_flat(
            |x| multiview_loss(x, &ma, &b, &mb).unwrap().value,
            &a,
            ab.gradients.sampled.as_ref().unwrap(),
        );
        fd_flat(
            |x| multiview_loss(&a, &ma, x, &mb).unwrap().value,
            &b,
            ab.gradients.sampled_other.as_ref().unwrap(),
        );
    }

    #[test]
    fn reflect_params_examples() {
        let m = make_synthetic_model(1, 12, 12, 6).unwrap();
        let mut theta = PoseShapeParams::zeros(6);
        theta.translation = nalgebra::Vector2::new(10.0, 20.0);
        let r = reflect_params(&theta, m.mode_symmetry(), 100).unwrap();
        assert_eq!(r.translation, nalgebra::Vector2::new(91.0, 20.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = PoseShapeParams {
            rotation: Vector3::new(0.3, -0.2, 0.5),
            translation: nalgebra::Vector2::new(33.25, 41.5),
            log_scale: 0.1,
            alpha: DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0)),
        };
        let twice = reflect_params(
            &reflect_params(&theta, m.mode_symmetry(), 64).unwrap(),
            m.mode_symmetry(),
            64,
        )
        .unwrap();
        assert_eq!(twice, theta);
    }

    #[test]
    fn reflected_grid_is_the_mirrored_grid() {
        let m = make_synthetic_model(5, 16, 14, 6).unwrap();
        let theta = PoseShapeParams {
            rotation: Vector3::new(0.2, 0.4, -0.3),
            translation: nalgebra::Vector2::new(60.0, 55.0),
            log_scale: -0.2,
            alpha: DVector::from_vec(vec![0.5, -1.0, 0.8, 0.3, 0.2, -0.6]),
        };
        let w = 120;
        let g = grid_generate(&m, &theta).unwrap();
        let gr = grid_generate(&m, &reflect_params(&theta, m.mode_symmetry(), w).unwrap()).unwrap();
        for (i, &s) in m.sym_index().iter().enumerate() {
            assert!((gr.points[(0, i)] - ((w + 1) as f64 - g.points[(0, s)])).abs() < 1e-10);
            assert!((gr.points[(1, i)] - g.points[(1, s)]).abs() < 1e-10);
        }
    }

    #[test]
    fn landmark_examples() {
        let pred = Matrix2xX::from_column_slice(&[3.0, 4.0]);
        let target = LandmarkSet::confident(Matrix2xX::zeros(1)).unwrap();
        assert_eq!(landmark_loss_points(&pred, &target).unwrap().value, 25.0);
        assert_eq!(
            landmark_loss_points(&pred, &LandmarkSet::confident(pred.clone()).unwrap())
                .unwrap()
                .value,
            0.0
        );
        let none = LandmarkSet::new(Matrix2xX::zeros(1), vec![0.0]).unwrap();
        assert_eq!(landmark_loss_points(&pred, &none).unwrap().value, 0.0);
        assert!(LandmarkSet::new(Matrix2xX::zeros(1), vec![-1.0]).is_err());
        assert!(landmark_loss_points(&Matrix2xX::zeros(2), &target).is_err());
    }

    #[test]
    fn landmark_loss_on_full_grid() {
        let m = make_synthetic_model(2, 16, 16, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = SampleGrid {
            points: Matrix2xX::from_fn(m.num_vertices(), |_, _| rng.random_range(0.0..50.0)),
        };
        let l = m.landmark_indices().len();
        let targets = LandmarkSet::new(
            Matrix2xX::from_fn(l, |_, _| rng.random_range(0.0..50.0)),
            (0..l).map(|_| rng.random_range(0.0..2.0)).collect(),
        )
        .unwrap();
        let loss = landmark_loss(&grid, &m, &targets).unwrap();
        let g = loss.gradients.grid.as_ref().unwrap();
        let h = 1e-5;
        for v in 0..m.num_vertices() {
            for r in 0..2 {
                let mut p = grid.clone();
                let mut q = grid.clone();
                p.points[(r, v)] += h;
                q.points[(r, v)] -= h;
                let numeric = (landmark_loss(&p, &m, &targets).unwrap().value
                    - landmark_loss(&q, &m, &targets).unwrap().value)
                    / (2.0 * h);
                assert!((g[(r, v)] - numeric).abs() / numeric.abs().max(1.0) < 1e-6);
            }
        }
        let scaled = landmark_loss(&grid, &m, &targets.scaled_confidences(3.0).unwrap()).unwrap();
        assert!((scaled.value - 3.0 * loss.value).abs() < 1e-9 * loss.value);
    }

    #[test]
    fn prior_examples() {
        assert_eq!(prior_loss(&DVector::zeros(4)).value, 0.0);
        let a = DVector::from_vec(vec![1.0, 2.0, 2.0, 0.0]);
        let loss = prior_loss(&a);
        assert_eq!(loss.value, 9.0);
        let h = 1e-6;
        for k in 0..4 {
            let mut p = a.clone();
            let mut q = a.clone();
            p[k] += h;
            q[k] -= h;
            let numeric = (prior_loss(&p).value - prior_loss(&q).value) / (2.0 * h);
            assert!((loss.gradients.alpha.as_ref().unwrap()[k] - numeric).abs() / numeric.abs().max(1.0) < 1e-9);
        }
    }

    #[test]
    fn total_combines_linearly() {
        let a = prior_loss(&DVector::from_vec(vec![1.0, -2.0]));
        assert_eq!(total_loss(&[(&a, 1.0)]).unwrap(), a);
        let zero = total_loss(&[(&a, 0.0)]).unwrap();
        assert_eq!(zero.value, 0.0);
        assert!(zero.gradients.alpha.unwrap().iter().all(|v| *v == 0.0));
        let twice = total_loss(&[(&a, 1.0), (&a, 1.0)]).unwrap();
        assert_eq!(twice.value, 2.0 * a.value);
        assert!(total_loss(&[(&a, -1.0)]).is_err());
    }
}
