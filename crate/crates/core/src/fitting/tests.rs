use super::*;
use crate::geometry::{procrustes_align, project, AlignMode};
use crate::observations::{filter_confidence, Detection2D};
use crate::toy::toy_model;
use nalgebra::Vector2;

fn intrinsics() -> CameraIntrinsics<f64> {
    CameraIntrinsics::new(1000.0, 500.0, 500.0).unwrap()
}

fn posed(model: &BodyModel<f64>, orient: [f64; 3]) -> BodyParams<f64> {
    let mut p = BodyParams::zeros(model);
    p.global_orient = AxisAngle::new(orient[0], orient[1], orient[2]);
    p.body_pose[0] = AxisAngle::new(-0.3, 0.0, 0.1);
    p.body_pose[3] = AxisAngle::new(0.4, 0.0, 0.0);
    p.body_pose[15] = AxisAngle::new(0.0, 0.2, 0.5);
    p.body_pose[17] = AxisAngle::new(0.0, -0.3, 0.4);
    p.betas[0] = 0.4;
    p.betas[1] = -0.3;
    p
}

fn detect(
    model: &BodyModel<f64>,
    p: &BodyParams<f64>,
    t: Vector3<f64>,
    noise: f64,
) -> FilteredDetection<f64> {
    let kp = model.keypoints_of(p).unwrap();
    let mut px = project(&kp, &intrinsics(), &Matrix3::identity(), &t).unwrap();
    for (k, q) in px.iter_mut().enumerate() {
        let s = (k as f64 * 1.7).sin();
        *q += Vector2::new(s, -s * 0.5) * noise;
    }
    filter_confidence(&Detection2D::new(0, px, vec![0.9; kp.len()]).unwrap(), 0.3)
}

fn pseudo_random(n: usize, seed: f64) -> DVector<f64> {
    DVector::from_fn(n, |i, _| ((i as f64 + 1.0) * seed).sin())
}

fn check_jacobian(problem: &BodyProblem<f64>, x: &DVector<f64>) {
    let jac = problem.jacobian(x).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for c in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += h;
        xm[c] -= h;
        let fd = (problem.residuals(&xp).unwrap() - problem.residuals(&xm).unwrap()) / (2.0 * h);
        let scale = 1.0 + fd.amax();
        worst = worst.max((fd - jac.column(c)).amax() / scale);
    }
    assert!(worst < 1e-5, "max relative jacobian error {worst}");
}

#[test]
fn problem_jacobian_matches_finite_differences() {
    let m = toy_model();
    let (nj, nb) = (m.n_joints(), m.n_betas());
    let p0 = posed(&m, [3.0, 0.3, 0.1]);
    let p1 = posed(&m, [2.6, -0.8, 0.0]);
    let view_block = ROT_DIM + 3;
    let pose_offset = 2 * view_block;
    let betas_offset = pose_offset + ROT_DIM * (nj - 1);
    let n_params = betas_offset + nb;
    let d0 = detect(&m, &p0, Vector3::new(0.1, -0.2, 4.5), 3.0);
    let mut d1 = detect(&m, &p1, Vector3::new(-0.2, 0.1, 5.5), 3.0);
    d1.weights[4] = 0.0;
    let views = vec![
        view_term(&intrinsics(), &d0, 1.3, 0, ROT_DIM),
        view_term(&intrinsics(), &d1, 1.3, view_block, view_block + ROT_DIM),
    ];
    let target = axis_angle_to_matrix(&AxisAngle::new(0.2, -0.1, 0.3));
    let problem = BodyProblem {
        rig: m.rig(),
        views,
        body: BodyBlock::Free {
            pose_offset,
            betas_offset,
        },
        rotation_anchors: vec![
            RotationAnchor {
                offset: 0,
                target: axis_angle_to_matrix(&p0.global_orient),
                sqrt_weight: 0.7,
            },
            RotationAnchor {
                offset: pose_offset + ROT_DIM * 3,
                target,
                sqrt_weight: 0.5,
            },
        ],
        shape_anchor: Some(ShapeAnchor {
            offset: betas_offset,
            target: vec![0.1; nb],
            sqrt_weight: 0.4,
        }),
        n_params,
    };
    // a point off the 6D manifold: non-orthonormal blocks
    let mut x = pseudo_random(n_params, 0.37) * 0.2;
    let base = |x: &mut DVector<f64>, off: usize, r: &Matrix3<f64>| {
        let mut v = matrix_to_rot6d_raw(r);
        v += x.rows(off, ROT_DIM).into_owned() * 0.5;
        x.rows_mut(off, ROT_DIM).copy_from(&v);
    };
    base(
        &mut x,
        0,
        &axis_angle_to_matrix(&AxisAngle::new(2.9, 0.3, 0.2)),
    );
    base(
        &mut x,
        view_block,
        &axis_angle_to_matrix(&AxisAngle::new(2.5, -0.7, 0.1)),
    );
    for j in 0..nj - 1 {
        base(&mut x, pose_offset + ROT_DIM * j, &Matrix3::identity());
    }
    x[ROT_DIM + 2] = 4.8;
    x[view_block + ROT_DIM + 2] = 5.2;
    check_jacobian(&problem, &x);
}

fn matrix_to_rot6d_raw(r: &Matrix3<f64>) -> nalgebra::Vector6<f64> {
    crate::geometry::matrix_to_rot6d_unchecked(r).0
}

#[test]
fn rigid_jacobian_matches_finite_differences() {
    let m = toy_model();
    let p = posed(&m, [3.0, 0.3, 0.1]);
    let d = detect(&m, &p, Vector3::new(0.1, -0.2, 4.5), 2.0);
    let locals = p.local_rotations();
    let problem = BodyProblem {
        rig: m.rig(),
        views: vec![view_term(&intrinsics(), &d, 1.0, 0, ROT_DIM)],
        body: BodyBlock::Fixed {
            pose: locals[1..].to_vec(),
            betas: p.betas.clone(),
        },
        rotation_anchors: Vec::new(),
        shape_anchor: None,
        n_params: ROT_DIM + 3,
    };
    let mut x = DVector::zeros(ROT_DIM + 3);
    write_rotation(
        &mut x,
        0,
        &axis_angle_to_matrix(&AxisAngle::new(2.7, 0.5, -0.2)),
    );
    x[ROT_DIM] = 0.3;
    x[ROT_DIM + 2] = 5.0;
    check_jacobian(&problem, &x);
}

#[test]
fn fixed_point_at_ground_truth() {
    let m = toy_model();
    let p = posed(&m, [3.0, 0.3, 0.1]);
    let t = Vector3::new(0.1, -0.2, 4.5);
    let d = detect(&m, &p, t, 0.0);
    let cfg = FitConfig {
        shape_prior_weight: 0.0,
        pose_prior_weight: 0.0,
        ..FitConfig::default()
    };
    let fit = fit_single_view_from(&m, &intrinsics(), &d, &cfg, &p, t).unwrap();
    let diag = fit.refine.unwrap();
    assert!(fit.loss_2d < 1e-12, "{}", fit.loss_2d);
    assert_eq!(diag.accepted_steps, 0);
    assert!((fit.translation - t).norm() < 1e-9);
}

#[test]
fn single_view_recovers_noiseless_pose() {
    let m = toy_model();
    let p = posed(&m, [3.0, 0.3, 0.1]);
    let t = Vector3::new(0.1, -0.2, 4.5);
    let d = detect(&m, &p, t, 0.0);
    let cfg = FitConfig {
        shape_prior_weight: 1e-3,
        pose_prior_weight: 1e-3,
        max_iterations: 400,
        ..FitConfig::default()
    };
    let fit = fit_single_view(&m, &intrinsics(), &d, &cfg).unwrap();
    // monocular limb depth is weakly observed, so only demand a large reduction
    let start = fit.rigid.as_ref().unwrap().initial_cost;
    assert!(
        fit.loss_2d < 1.0 && fit.loss_2d < 1e-5 * start,
        "loss {} from {start}",
        fit.loss_2d
    );
    assert!(fit.refine.as_ref().unwrap().is_strictly_decreasing());
    assert!(fit.rigid.as_ref().unwrap().is_strictly_decreasing());
}

#[test]
fn too_few_keypoints_is_under_constrained() {
    let m = toy_model();
    let p = posed(&m, [3.0, 0.3, 0.1]);
    let mut d = detect(&m, &p, Vector3::new(0.0, 0.0, 5.0), 0.0);
    for w in d.weights.iter_mut().skip(5) {
        *w = 0.0;
    }
    let err = fit_single_view(&m, &intrinsics(), &d, &FitConfig::default()).unwrap_err();
    assert!(
        matches!(
            err,
            FitError::UnderConstrained {
                survivors: 5,
                required: 6
            }
        ),
        "{err}"
    );
    let stage = run_stage_one(&m, &[intrinsics()], &[d], &FitConfig::default()).unwrap();
    assert!(!stage.views[0].is_fitted());
}

#[test]
fn selection_ties_go_to_lowest_index() {
    assert_eq!(select_min_loss(&[Some(2.0), Some(1.0), Some(1.0)]), Some(1));
    assert_eq!(select_min_loss(&[None, Some(3.0), Some(1.0)]), Some(2));
    assert_eq!(select_min_loss::<f64>(&[None, None]), None);
}

#[test]
fn two_stage_recovers_noiseless_scene() {
    let m = toy_model();
    let body = posed(&m, [0.0, 0.0, 0.0]);
    let flip = axis_angle_to_matrix(&AxisAngle::new(std::f64::consts::PI, 0.0, 0.0));
    let views = [
        (0.3, Vector3::new(0.0, 0.1, 4.5)),
        (1.9, Vector3::new(0.1, 0.0, 5.0)),
        (-2.0, Vector3::new(-0.1, 0.2, 4.8)),
    ];
    let mut dets = Vec::new();
    let mut truth = Vec::new();
    for (yaw_angle, t) in views {
        let mut p = body.clone();
        p.global_orient = matrix_to_axis_angle_unchecked(&(flip * yaw(yaw_angle)));
        dets.push(detect(&m, &p, t, 0.0));
        truth.push(
            m.keypoints_of(&p)
                .unwrap()
                .iter()
                .map(|k| k + t)
                .collect::<Vec<_>>(),
        );
    }
    let cfg = FitConfig {
        shape_prior_weight: 1e-2,
        pose_prior_weight: 1e-2,
        ..FitConfig::default()
    };
    let res = run_two_stage(&m, &[intrinsics(); 3], &dets, &cfg).unwrap();
    let fit = &res.stage_two;
    assert_eq!(fit.reference_view, 0);
    assert!(fit.rounds.iter().all(Diagnostics::is_strictly_decreasing));
    let pred: Vec<Vector3<f64>> = fit
        .keypoints
        .iter()
        .map(|k| k + fit.params.translations[0])
        .collect();
    let aligned = procrustes_align(&pred, &truth[0], AlignMode::Similarity)
        .unwrap()
        .aligned;
    let err = aligned
        .iter()
        .zip(&truth[0])
        .map(|(a, b)| (a - b).norm())
        .sum::<f64>()
        / pred.len() as f64;
    assert!(fit.loss_2d < 1e-6, "stage-two loss {}", fit.loss_2d);
    assert!(err < 1e-3, "aligned mean joint error {err} m");
}

#[test]
fn config_validation() {
    assert!(FitConfig::default().validate().is_ok());
    assert!(FitConfig {
        lambda: 1.5,
        ..FitConfig::default()
    }
    .validate()
    .is_err());
    assert!(FitConfig {
        gamma: -1.0,
        ..FitConfig::default()
    }
    .validate()
    .is_err());
    assert!(FitConfig {
        anchor_rounds: 0,
        ..FitConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn single_view_stage_two_does_not_undo_stage_one() {
    let m = toy_model();
    let p = posed(&m, [3.0, 0.3, 0.1]);
    let d = detect(&m, &p, Vector3::new(0.1, -0.2, 4.5), 2.0);
    let cfg = FitConfig {
        gamma: 0.0,
        ..FitConfig::default()
    };
    let res = run_two_stage(&m, &[intrinsics()], std::slice::from_ref(&d), &cfg).unwrap();
    assert_eq!(res.screened.view, 0);
    assert_eq!(res.stage_two.reference_view, 0);
    assert!(res.stage_two.loss_2d <= res.stage_one.views[0].loss_2d * (1.0 + 1e-12));
    assert!(res
        .stage_two
        .rounds
        .iter()
        .all(Diagnostics::is_strictly_decreasing));
}

#[test]
fn stage_two_pack_unpack_round_trip() {
    let m = toy_model();
    let p = posed(&m, [3.0, 0.3, 0.1]);
    let d = detect(&m, &p, Vector3::new(0.0, 0.0, 5.0), 0.0);
    let canon = CanonicalParams {
        global_orients: vec![p.global_orient, AxisAngle::new(0.1, 2.0, 0.0)],
        translations: vec![Vector3::new(0.0, 0.0, 5.0), Vector3::new(1.0, 2.0, 3.0)],
        body_pose: p.body_pose.clone(),
        betas: p.betas.clone(),
    };
    let obj = StageTwoObjective::new(
        &m,
        &[intrinsics(); 2],
        &[d.clone(), d],
        &[false, true],
        &FitConfig::default(),
        &canon,
    )
    .unwrap();
    assert_eq!(obj.active_views(), &[0]);
    let back = obj.unpack(&obj.pack(&canon), &canon).unwrap();
    assert_eq!(back.translations, canon.translations);
    for (a, b) in back.body_pose.iter().zip(&canon.body_pose) {
        assert!((a.0 - b.0).norm() < 1e-12);
    }
    // anchored at the truth with exact detections: zero residual
    assert!(obj.residuals(&obj.pack(&canon)).unwrap().norm() < 1e-9);
}

#[test]
fn f32_pipeline_runs() {
    let m64 = toy_model();
    let m: BodyModel<f32> = crate::body::parse_model(crate::toy::TOY_MODEL_JSON).unwrap();
    let p64 = posed(&m64, [3.0, 0.3, 0.1]);
    let d64 = detect(&m64, &p64, Vector3::new(0.0, 0.0, 5.0), 0.0);
    let det = Detection2D::new(
        0,
        d64.detection
            .keypoints
            .iter()
            .map(|q| q.cast::<f32>())
            .collect(),
        d64.detection
            .confidences
            .iter()
            .map(|c| *c as f32)
            .collect(),
    )
    .unwrap();
    let d = filter_confidence(&det, 0.3f32);
    let k = CameraIntrinsics::new(1000.0f32, 500.0, 500.0).unwrap();
    let stage = run_stage_one(&m, &[k], &[d], &FitConfig::default()).unwrap();
    assert!(stage.views[0].is_fitted());
    assert!(stage.views[0].loss_2d.is_finite());
    let kp = m.keypoints_of(&stage.views[0].params).unwrap();
    assert_eq!(kp.len(), 24);
}
