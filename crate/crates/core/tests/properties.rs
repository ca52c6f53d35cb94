use mvpose::body::BodyParams;
use mvpose::fitting::{select_min_loss, CanonicalParams};
use mvpose::geometry::{
    axis_angle_to_matrix, matrix_to_axis_angle, matrix_to_rot6d, rot6d_to_matrix, AxisAngle,
    CameraIntrinsics, Rot6D,
};
use mvpose::metrics::{auc, mpjpe, pa_mpjpe, pck};
use mvpose::observations::{
    filter_confidence, loss_2d_multi, loss_2d_single, reprojection_residuals, CameraView,
    Detection2D,
};
use mvpose::toy::toy_model;
use nalgebra::{Matrix3, Vector2, Vector3, Vector6};
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = Matrix3<f64>> {
    vec3(3.0).prop_map(|v| axis_angle_to_matrix(&AxisAngle(v)))
}

fn skeleton(n: usize) -> impl Strategy<Value = Vec<Vector3<f64>>> {
    prop::collection::vec(vec3(1000.0), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn axis_angle_round_trip(v in vec3(3.1)) {
        let r = axis_angle_to_matrix(&AxisAngle(v));
        let back = axis_angle_to_matrix(&matrix_to_axis_angle(&r).unwrap());
        prop_assert!((r - back).amax() < 1e-9);
    }

    #[test]
    fn rot6d_round_trip(r in rotation()) {
        let back = rot6d_to_matrix(&matrix_to_rot6d(&r).unwrap()).unwrap();
        prop_assert!((r - back).amax() < 1e-12);
    }

    #[test]
    fn rot6d_gram_schmidt_is_orthonormal(v in prop::array::uniform6(-2.0f64..2.0)) {
        let six = Rot6D(Vector6::from_row_slice(&v));
        let (a, b) = six.columns();
        prop_assume!(a.norm() > 1e-3 && a.cross(&b).norm() > 1e-3 * a.norm() * b.norm());
        let r = rot6d_to_matrix(&six).unwrap();
        prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pa_mpjpe_never_exceeds_mpjpe(pred in skeleton(12), gt in skeleton(12)) {
        let pa = pa_mpjpe(&pred, &gt).unwrap();
        prop_assert!(pa <= mpjpe(&pred, &gt).unwrap() + 1e-9);
    }

    #[test]
    fn pa_mpjpe_ignores_similarity_transforms(
        pred in skeleton(12), gt in skeleton(12), r in rotation(), t in vec3(500.0), s in 0.2f64..5.0,
    ) {
        let moved: Vec<_> = pred.iter().map(|p| r * p * s + t).collect();
        let a = pa_mpjpe(&pred, &gt).unwrap();
        let b = pa_mpjpe(&moved, &gt).unwrap();
        prop_assert!((a - b).abs() < 1e-6 * (1.0 + a));
    }

    #[test]
    fn rigid_motion_of_both_preserves_mpjpe(pred in skeleton(12), gt in skeleton(12), r in rotation(), t in vec3(500.0)) {
        let f = |p: &Vector3<f64>| r * p + t;
        let a = mpjpe(&pred, &gt).unwrap();
        let b = mpjpe(&pred.iter().map(f).collect::<Vec<_>>(), &gt.iter().map(f).collect::<Vec<_>>()).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
    }

    #[test]
    fn pck_and_auc_are_monotone(pred in skeleton(12), gt in skeleton(12), lo in 1.0f64..500.0, step in 0.0f64..500.0) {
        let hi = lo + step;
        prop_assert!(pck(&pred, &gt, lo).unwrap() <= pck(&pred, &gt, hi).unwrap());
        let near: Vec<_> = pred.iter().zip(&gt).map(|(p, g)| g + (p - g) * 0.5).collect();
        let grid: Vec<f64> = (1..=30).map(|i| 5.0 * i as f64).collect();
        prop_assert!(auc(&pred, &gt, &grid).unwrap() <= auc(&near, &gt, &grid).unwrap());
        let p = pck(&pred, &gt, hi).unwrap();
        prop_assert!((0.0..=100.0).contains(&p));
    }

    #[test]
    fn screening_is_scale_invariant(losses in prop::collection::vec(prop::option::of(0.0f64..1e4), 1..6), k in 1e-3f64..1e3) {
        let scaled: Vec<_> = losses.iter().map(|l| l.map(|v| v * k)).collect();
        prop_assert_eq!(select_min_loss(&losses), select_min_loss(&scaled));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn multi_view_loss_is_sum_of_views(
        pose in prop::collection::vec(vec3(0.4), 23),
        betas in prop::collection::vec(-1.5f64..1.5, 10),
        orients in prop::collection::vec(vec3(2.0), 1..4),
        noise in prop::collection::vec(-3.0f64..3.0, 48),
        conf in prop::collection::vec(0.0f64..1.0, 24),
        lambda in 0.0f64..1.0,
    ) {
        let m = toy_model();
        let n = orients.len();
        let canon = CanonicalParams {
            global_orients: orients.iter().map(|v| AxisAngle(*v)).collect(),
            translations: (0..n).map(|i| Vector3::new(0.1 * i as f64, -0.1, 5.0 + i as f64)).collect(),
            body_pose: pose.iter().map(|v| AxisAngle(*v)).collect(),
            betas,
        };
        let k = CameraIntrinsics::new(1000.0, 500.0, 500.0).unwrap();
        let cams: Vec<_> = (0..n).map(|_| CameraView::new(k, Vector3::zeros())).collect();
        let dets: Vec<_> = (0..n)
            .map(|i| {
                let kp: Vec<_> = (0..24).map(|j| Vector2::new(500.0 + noise[2 * j] * 40.0 + i as f64, 500.0 + noise[2 * j + 1] * 40.0)).collect();
                filter_confidence(&Detection2D::new(i, kp, conf.clone()).unwrap(), lambda)
            })
            .collect();
        let total = loss_2d_multi(&m, &canon, &cams, &dets).unwrap();
        let mut sum = 0.0;
        for (i, d) in dets.iter().enumerate() {
            let p: BodyParams<f64> = canon.view_params(i);
            let cam = CameraView::new(k, canon.translations[i]);
            let single = loss_2d_single(&m, &p, &cam, d).unwrap();
            let r = reprojection_residuals(&m, &p, &cam, d).unwrap();
            prop_assert!((r.norm_squared() - single).abs() <= 1e-12 * (1.0 + single));
            sum += single;
        }
        prop_assert!((total - sum).abs() <= 1e-12 * (1.0 + total));
    }
}
