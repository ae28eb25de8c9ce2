//! Property-based invariants over randomized inputs.

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use liquidwarp::body::{
    project, rigid_transform, rodrigues, rot_y, skin, synth_model, CameraWP, Mesh, PoseParams,
    ShapeParams,
};
use liquidwarp::flow::{compose_flow, identity_flow};
use liquidwarp::fusion::{add_lwb, attention_weights, gate, mean_agg, FusionParams};
use liquidwarp::io::{tensor_read, tensor_write, Tensor};
use liquidwarp::metrics::{compose_output, psnr, ssim, AttentionMap};
use liquidwarp::raster::{face_tris, rasterize};
use liquidwarp::warp::{bilinear_sample, FeatureMap};

fn feature_strategy(c: usize, h: usize, w: usize) -> impl Strategy<Value = FeatureMap> {
    proptest::collection::vec(-10.0f32..10.0, c * h * w)
        .prop_map(move |v| Array3::from_shape_vec((c, h, w), v).unwrap())
}

fn small_pose() -> impl Strategy<Value = PoseParams> {
    proptest::collection::vec(-0.8f64..0.8, 6)
        .prop_map(|v| PoseParams::from_flat(&v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Bilinear interpolation is a convex combination: the warped values
    /// never leave the range spanned by the source and zero padding.
    #[test]
    fn bilinear_is_a_contraction(src in feature_strategy(2, 9, 9), shift in -0.5f64..0.5) {
        let mut tf = identity_flow(9, 9);
        for v in tf.flow.iter_mut() {
            *v += shift;
        }
        let out = bilinear_sample(&src, &tf).unwrap();
        let hi = src.iter().cloned().fold(0.0f32, f32::max);
        let lo = src.iter().cloned().fold(0.0f32, f32::min);
        for &v in out.iter() {
            prop_assert!(v <= hi + 1e-4 && v >= lo - 1e-4);
        }
    }

    /// Attention weights form a probability simplex and permute with the
    /// source order.
    #[test]
    fn attention_weights_simplex_and_permutation(
        xt in feature_strategy(3, 4, 4),
        xa in feature_strategy(3, 4, 4),
        xb in feature_strategy(3, 4, 4),
        seed in 0u64..1000,
    ) {
        let params = FusionParams::seeded(3, seed);
        let w_ab = attention_weights(&params, &[xa.clone(), xb.clone()], &xt).unwrap();
        let w_ba = attention_weights(&params, &[xb, xa], &xt).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let sum = w_ab[[0, i, j]] + w_ab[[1, i, j]];
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(w_ab[[0, i, j]] >= 0.0);
                prop_assert!((w_ab[[0, i, j]] - w_ba[[1, i, j]]).abs() < 1e-12);
            }
        }
    }

    /// Additive fusion is a superposition: summing sources one at a time
    /// equals summing them at once, and mean_agg interpolates.
    #[test]
    fn add_and_mean_superpose(
        xt in feature_strategy(2, 5, 5),
        xa in feature_strategy(2, 5, 5),
        xb in feature_strategy(2, 5, 5),
    ) {
        let both = add_lwb(&[xa.clone(), xb.clone()], &xt).unwrap();
        let step = add_lwb(&[xb.clone()], &add_lwb(&[xa.clone()], &xt).unwrap()).unwrap();
        for (&x, &y) in both.iter().zip(step.iter()) {
            prop_assert!((x - y).abs() < 1e-4);
        }
        let mean = mean_agg(&[xa, xb], &xt).unwrap();
        for ((&m, &a), &t) in mean.iter().zip(both.iter()).zip(xt.iter()) {
            prop_assert!((m - ((a - t) / 2.0 + t)).abs() < 1e-4);
        }
    }

    /// The learned gate is a proper sigmoid output: always in [0, 1], and
    /// strictly interior when the pre-activation cannot saturate f32.
    #[test]
    fn gate_stays_in_unit_interval(xt in feature_strategy(2, 6, 6), seed in 0u64..1000) {
        let params = FusionParams::seeded(2, seed);
        let g = gate(&params, &xt).unwrap();
        for &v in g.iter() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let small = xt.mapv(|v| v * 1e-3);
        for &v in gate(&params, &small).unwrap().iter() {
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }

    /// Rigid transforms preserve pairwise distances.
    #[test]
    fn rigid_preserves_distances(
        angle in -3.0f64..3.0,
        tx in -2.0f64..2.0,
        axis in proptest::collection::vec(-1.0f64..1.0, 3),
    ) {
        let model = synth_model(1);
        let mesh = skin(&model, &PoseParams::zeros(2), &ShapeParams::zeros(1)).unwrap();
        let norm = (axis[0].powi(2) + axis[1].powi(2) + axis[2].powi(2)).sqrt();
        let r = if norm > 1e-6 {
            rodrigues([axis[0] / norm * angle, axis[1] / norm * angle, axis[2] / norm * angle])
        } else {
            rot_y(angle)
        };
        let moved = rigid_transform(&mesh, &r, [tx, 0.3, -0.1]).unwrap();
        let d = |m: &Mesh, a: usize, b: usize| -> f64 {
            (0..3)
                .map(|k| (m.vertices[[a, k]] - m.vertices[[b, k]]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        for (a, b) in [(0, 1), (0, 5), (3, 9)] {
            prop_assert!((d(&mesh, a, b) - d(&moved, a, b)).abs() < 1e-6);
        }
    }

    /// Weak-perspective projection is affine in the camera parameters:
    /// doubling the scale doubles centered image coordinates.
    #[test]
    fn projection_is_affine(s in 0.2f64..2.0, tx in -0.5f64..0.5, ty in -0.5f64..0.5) {
        let model = synth_model(1);
        let mesh = skin(&model, &PoseParams::zeros(2), &ShapeParams::zeros(1)).unwrap();
        let p1 = project(&mesh, &CameraWP::new(s, tx, ty).unwrap());
        let p2 = project(&mesh, &CameraWP::new(2.0 * s, tx, ty).unwrap());
        for v in 0..mesh.vertices.nrows() {
            prop_assert!((p2[[v, 0]] - 2.0 * p1[[v, 0]]).abs() < 1e-6);
            prop_assert!((p2[[v, 1]] - 2.0 * p1[[v, 1]]).abs() < 1e-6);
            prop_assert!((p2[[v, 2]] - p1[[v, 2]]).abs() < 1e-12);
        }
    }

    /// The tensor container round trips every dtype losslessly.
    #[test]
    fn tensor_container_roundtrip(data in proptest::collection::vec(-1e6f32..1e6, 24)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.lwt");
        let t = Tensor::F32(vec![2, 3, 4], data.clone());
        tensor_write(&path, &t).unwrap();
        let (dims, back) = tensor_read(&path).unwrap().into_f32().unwrap();
        prop_assert_eq!(dims, vec![2, 3, 4]);
        for (a, b) in data.iter().zip(back.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Rasterization is deterministic regardless of scheduling.
    #[test]
    fn raster_is_deterministic(pose in small_pose(), beta in -0.3f64..0.5) {
        let model = synth_model(2);
        let shape = ShapeParams { beta: vec![beta] };
        let mesh = skin(&model, &pose, &shape).unwrap();
        let cam = CameraWP::new(1.0, 0.0, -0.5).unwrap();
        let ftris = face_tris(&project(&mesh, &cam), &model.faces).unwrap();
        let a = rasterize(&ftris, 40, 40);
        let b = rasterize(&ftris, 40, 40);
        prop_assert_eq!(a, b);
    }

    /// Self-flow under a random pose stays on pixel centers.
    #[test]
    fn self_flow_identity_random_pose(pose in small_pose()) {
        let model = synth_model(2);
        let mesh = skin(&model, &pose, &ShapeParams::zeros(1)).unwrap();
        let cam = CameraWP::new(1.0, 0.0, -0.5).unwrap();
        let ftris = face_tris(&project(&mesh, &cam), &model.faces).unwrap();
        let maps = rasterize(&ftris, 32, 32);
        let tf = compose_flow(&maps, &ftris, &maps).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                if tf.valid[[i, j]] {
                    let cx = (2 * j + 1) as f64 / 32.0 - 1.0;
                    let cy = (2 * i + 1) as f64 / 32.0 - 1.0;
                    prop_assert!((tf.flow[[i, j, 0]] - cx).abs() < 1e-6);
                    prop_assert!((tf.flow[[i, j, 1]] - cy).abs() < 1e-6);
                }
            }
        }
    }

    /// Output composition is a per-pixel convex combination.
    #[test]
    fn compose_output_is_convex(
        fg in proptest::collection::vec(0.0f32..1.0, 4 * 4 * 3),
        bg in proptest::collection::vec(0.0f32..1.0, 4 * 4 * 3),
        att in proptest::collection::vec(0.0f32..1.0, 16),
    ) {
        let fg = Array3::from_shape_vec((4, 4, 3), fg).unwrap();
        let bg = Array3::from_shape_vec((4, 4, 3), bg).unwrap();
        let a = AttentionMap::new(Array2::from_shape_vec((4, 4), att).unwrap()).unwrap();
        let out = compose_output(&fg, &a, &bg).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..3 {
                    let lo = fg[[i, j, k]].min(bg[[i, j, k]]);
                    let hi = fg[[i, j, k]].max(bg[[i, j, k]]);
                    prop_assert!(out[[i, j, k]] >= lo - 1e-6 && out[[i, j, k]] <= hi + 1e-6);
                }
            }
        }
    }

    /// Both image metrics are symmetric in their arguments.
    #[test]
    fn metric_symmetry(
        a in proptest::collection::vec(0.0f32..1.0, 16 * 16 * 3),
        b in proptest::collection::vec(0.0f32..1.0, 16 * 16 * 3),
    ) {
        let a = Array3::from_shape_vec((16, 16, 3), a).unwrap();
        let b = Array3::from_shape_vec((16, 16, 3), b).unwrap();
        let (p1, p2) = (psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((p1 - p2).abs() < 1e-9 || (p1.is_infinite() && p2.is_infinite()));
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }
}

/// Silhouette area fraction stabilizes as resolution grows.
#[test]
fn silhouette_area_converges_with_resolution() {
    let model = synth_model(2);
    let mesh = skin(&model, &PoseParams::zeros(2), &ShapeParams::zeros(1)).unwrap();
    let cam = CameraWP::new(1.0, 0.0, -0.5).unwrap();
    let ftris = face_tris(&project(&mesh, &cam), &model.faces).unwrap();
    let frac = |n: usize| {
        let maps = rasterize(&ftris, n, n);
        maps.silhouette.iter().filter(|&&v| v).count() as f64 / (n * n) as f64
    };
    let lo = frac(256);
    let hi = frac(512);
    assert!(
        (lo - hi).abs() / hi < 0.02,
        "area fraction moved from {lo} to {hi} between 256 and 512"
    );
}
