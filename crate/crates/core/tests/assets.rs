//! The bundled half-face mesh and its flattening.

use std::path::PathBuf;

use morphstn::flatten::{
    flatten_to_model, load_mesh, mirror_embedding, mirror_mesh, synthetic_half_mesh, tutte_embed, HalfMeshConfig,
    TriangleMesh, WeightScheme,
};

fn bundled() -> TriangleMesh {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets");
    load_mesh(&dir.join("half_face.obj"), &dir.join("half_face.sidecar")).unwrap()
}

fn signed_area(uv: &[[f64; 2]], t: &[usize; 3]) -> f64 {
    let [a, b, c] = t.map(|v| uv[v]);
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

#[test]
fn bundled_mesh_matches_its_generator() {
    let (generated, _) = synthetic_half_mesh(&HalfMeshConfig::default()).unwrap();
    let mesh = bundled();
    assert_eq!(mesh.faces(), generated.faces());
    assert_eq!(mesh.positions(), generated.positions());
    assert_eq!(mesh.symmetry_line(), generated.symmetry_line());
    assert_eq!(mesh.boundary_loop(), generated.boundary_loop());
}

#[test]
fn uniform_embedding_of_the_bundled_mesh_is_injective_and_mirrored() {
    let half = bundled();
    let emb = tutte_embed(&half, WeightScheme::Uniform).unwrap();
    assert!(half.faces().iter().all(|t| signed_area(&emb.uv, t) > 0.0));

    let full = mirror_mesh(&half).unwrap();
    let full_emb = mirror_embedding(&emb, &half).unwrap();
    let uv = &full_emb.uv;
    assert!(full.mesh.faces().iter().all(|t| signed_area(uv, t) > 0.0));
    let total: f64 = full.mesh.faces().iter().map(|t| signed_area(uv, t)).sum();
    // inside the unit square, which corners may clip when no vertex lands on them
    assert!(total <= 1.0 + 1e-12 && total > 0.99, "embedded area {total}");
    for (i, &j) in full.sym_index.iter().enumerate() {
        assert!((uv[j][0] - (1.0 - uv[i][0])).abs() <= 1e-9 && (uv[j][1] - uv[i][1]).abs() <= 1e-9);
    }
    for &b in full.mesh.boundary_loop() {
        let [u, v] = uv[b];
        assert!((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v));
        assert!(
            u == 0.0 || u == 1.0 || v == 0.0 || v == 1.0,
            "boundary vertex {b} at ({u}, {v})"
        );
    }
    // the symmetry line maps onto u = 1/2
    for &s in half.symmetry_line() {
        assert_eq!(uv[s][0], 0.5);
    }
}

#[test]
fn flattening_the_bundled_mesh_reports_no_flips() {
    let out = flatten_to_model(&bundled(), WeightScheme::Uniform, &[], 10, 1, 32, 32).unwrap();
    assert_eq!(out.flipped_faces, 0);
    assert!(out.mirror_error <= 1e-9);
    assert_eq!(out.model.num_vertices(), 32 * 32);
    assert_eq!(out.model.num_modes(), 10);
}
