//! Back-face visibility against an exact depth-buffer reference on the
//! closed synthetic surface.

use morphstn::raster::{capped_grid_silhouette, capped_grid_visibility};
use morphstn::sampler::occlusion_from_positions;
use morphstn::synthetic::{make_synthetic_model_with, SyntheticModelConfig};
use morphstn::transform::{axis_angle_from_euler, axis_angle_to_matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 64;

fn mean(nose_bump: bool) -> nalgebra::Matrix3xX<f64> {
    make_synthetic_model_with(&SyntheticModelConfig {
        seed: 1,
        grid_height: SIDE,
        grid_width: SIDE,
        num_modes: 10,
        nose_bump,
    })
    .unwrap()
    .mean_positions()
}

#[test]
fn convex_mismatches_lie_on_the_discrete_silhouette() {
    let x = mean(false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let r = axis_angle_from_euler(
            rng.random_range(-75f64..75.0).to_radians(),
            rng.random_range(-75f64..75.0).to_radians(),
            rng.random_range(-180f64..180.0).to_radians(),
        );
        let rot = axis_angle_to_matrix(&r).0;
        let exact = capped_grid_visibility(SIDE, SIDE, &x, &rot, 1e-6).unwrap();
        let silhouette = capped_grid_silhouette(SIDE, SIDE, &x, &rot);
        let (mask, report) = occlusion_from_positions(SIDE, SIDE, &x, &rot);
        assert!(report.degenerate_vertices.is_empty());
        for v in 0..SIDE * SIDE {
            if exact[v] != mask.bits()[v] {
                assert!(
                    silhouette[v],
                    "vertex {v} disagrees away from the silhouette at r = {r:?}"
                );
            }
        }
    }
}

#[test]
fn frontal_convex_view_is_exact() {
    let x = mean(false);
    let rot = nalgebra::Matrix3::identity();
    let exact = capped_grid_visibility(SIDE, SIDE, &x, &rot, 1e-6).unwrap();
    let (mask, _) = occlusion_from_positions(SIDE, SIDE, &x, &rot);
    assert_eq!(exact, mask.bits());
    assert!(exact.iter().all(|v| *v));
}

#[test]
fn nose_self_occlusion_is_missed_by_the_approximation() {
    let x = mean(true);
    let rot = axis_angle_to_matrix(&axis_angle_from_euler(45f64.to_radians(), 0.0, 0.0)).0;
    let exact = capped_grid_visibility(SIDE, SIDE, &x, &rot, 1e-6).unwrap();
    let silhouette = capped_grid_silhouette(SIDE, SIDE, &x, &rot);
    let (mask, _) = occlusion_from_positions(SIDE, SIDE, &x, &rot);
    let wrong: Vec<usize> = (0..SIDE * SIDE).filter(|&v| exact[v] != mask.bits()[v]).collect();
    // facing the viewer but behind the bump
    let hidden_front = wrong
        .iter()
        .filter(|&&v| !silhouette[v] && mask.bits()[v] && !exact[v])
        .count();
    assert!(hidden_front > 0);
    assert!(
        (wrong.len() as f64) < 0.1 * (SIDE * SIDE) as f64,
        "{} mismatches",
        wrong.len()
    );
}
