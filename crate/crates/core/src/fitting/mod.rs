//! Two-stage estimator over the canonical parameter space.
//!
//! Stage one fits every view on its own (global orientation, camera
//! translation, body pose and shape) from the mean initialization. The view
//! with the least reprojection loss provides the initial shared body. Stage
//! two refines per-view orientations and translations together with one
//! shared body pose and shape against all views at once, anchored to the
//! stage-one estimates.

pub mod lm;
mod problem;

use nalgebra::{DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lm::{
    solve_least_squares, Diagnostics, EvalError, FnProblem, LeastSquaresProblem, SolverConfig,
    SolverError, Termination,
};

use crate::body::{BodyModel, BodyParams, ModelError};
use crate::geometry::{
    axis_angle_to_matrix, matrix_to_axis_angle_unchecked, AxisAngle, CameraIntrinsics,
};
use crate::observations::{loss_2d_single, CameraView, FilteredDetection, ObservationError};
use crate::scalar::Real;
use problem::{
    read_rotation, read_vec3, write_rotation, BodyBlock, BodyProblem, RotationAnchor, ShapeAnchor,
    ViewTerm, ROT_DIM,
};

#[derive(Debug, Error)]
pub enum FitError {
    #[error(
        "view has {survivors} keypoints above the confidence threshold, at least {required} needed"
    )]
    UnderConstrained { survivors: usize, required: usize },
    #[error("optimizer diverged{}: {source}", view.map(|v| format!(" in view {v}")).unwrap_or_default())]
    Diverged {
        view: Option<usize>,
        source: SolverError,
    },
    #[error("every view is inert")]
    AllViewsInert,
    #[error("no successfully fitted view to screen")]
    NothingToScreen,
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error("{0} intrinsics for {1} detections")]
    ViewCount(usize, usize),
    #[error(transparent)]
    Observation(#[from] ObservationError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Loss weights, threshold, solver tolerances and priors. All values are
/// plain `f64` so the struct maps directly onto the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Weight of the reprojection loss.
    pub alpha: f64,
    /// Weight of the stage-two anchor loss.
    pub gamma: f64,
    /// Confidence threshold.
    pub lambda: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub gradient_tolerance: f64,
    pub relative_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_damping: f64,
    /// Stage one `||beta||^2` weight.
    pub shape_prior_weight: f64,
    /// Stage one `||theta_b||^2` weight (radians).
    pub pose_prior_weight: f64,
    /// Initial global orientation, axis-angle. Default: upright, facing the camera.
    pub mean_orientation: [f64; 3],
    /// Initial camera translation, meters.
    pub mean_translation: [f64; 3],
    /// Yaw hypotheses tried by the rigid pre-alignment of stage one,
    /// evenly spaced about the body's vertical axis.
    pub orientation_candidates: usize,
    /// Yaw hypotheses tried when re-aligning each view to the screened body
    /// before stage two; 1 keeps the stage-one orientations.
    pub realign_candidates: usize,
    /// Stage-two rounds; after each round the anchors move to its optimum.
    pub anchor_rounds: usize,
    /// Minimum surviving keypoints for a stage-one fit.
    pub min_keypoints: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 0.1,
            lambda: crate::observations::DEFAULT_CONFIDENCE_THRESHOLD,
            max_iterations: 100,
            step_tolerance: 1e-10,
            gradient_tolerance: 1e-8,
            relative_tolerance: 1e-10,
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 0.3,
            max_damping: 1e12,
            shape_prior_weight: 10.0,
            pose_prior_weight: 10.0,
            mean_orientation: [std::f64::consts::PI, 0.0, 0.0],
            mean_translation: [0.0, 0.0, 5.0],
            orientation_candidates: 4,
            realign_candidates: 4,
            anchor_rounds: 10,
            min_keypoints: 6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) {
            return bad("alpha and gamma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.step_tolerance > 0.0
            && self.gradient_tolerance > 0.0
            && self.relative_tolerance > 0.0)
        {
            return bad("tolerances must be positive");
        }
        if !(self.initial_damping > 0.0
            && self.damping_increase > 1.0
            && self.damping_decrease > 0.0
            && self.damping_decrease < 1.0)
        {
            return bad(
                "damping schedule must satisfy initial > 0, increase > 1, 0 < decrease < 1",
            );
        }
        if !(self.shape_prior_weight >= 0.0 && self.pose_prior_weight >= 0.0) {
            return bad("prior weights must be non-negative");
        }
        if self.orientation_candidates == 0
            || self.realign_candidates == 0
            || self.anchor_rounds == 0
        {
            return bad(
                "orientation_candidates, realign_candidates and anchor_rounds must be at least 1",
            );
        }
        if !(self.mean_translation[2] > 0.0) {
            return bad("mean translation must place the body in front of the camera");
        }
        Ok(())
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            max_iterations: self.max_iterations,
            step_tolerance: self.step_tolerance,
            gradient_tolerance: self.gradient_tolerance,
            relative_tolerance: self.relative_tolerance,
            initial_damping: self.initial_damping,
            damping_increase: self.damping_increase,
            damping_decrease: self.damping_decrease,
            max_damping: self.max_damping,
        }
    }
}

/// Per-view global orientation and camera translation, plus one body pose
/// and shape shared by every view.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalParams<T: Real> {
    pub global_orients: Vec<AxisAngle<T>>,
    pub translations: Vec<Vector3<T>>,
    pub body_pose: Vec<AxisAngle<T>>,
    pub betas: Vec<T>,
}

impl<T: Real> CanonicalParams<T> {
    pub fn n_views(&self) -> usize {
        self.global_orients.len()
    }

    /// Body parameters as seen from view `i`.
    pub fn view_params(&self, i: usize) -> BodyParams<T> {
        BodyParams {
            betas: self.betas.clone(),
            global_orient: self.global_orients[i],
            body_pose: self.body_pose.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum ViewStatus {
    Fitted,
    /// Not fitted; excluded from screening and from stage two.
    Inert(String),
}

#[derive(Debug, Clone)]
pub struct ViewFit<T: Real> {
    pub params: BodyParams<T>,
    pub translation: Vector3<T>,
    /// Confidence-weighted reprojection loss at the fit.
    pub loss_2d: T,
    pub status: ViewStatus,
    /// Index of the yaw hypothesis kept by the rigid pre-alignment.
    pub candidate: usize,
    pub rigid: Option<Diagnostics>,
    pub refine: Option<Diagnostics>,
}

impl<T: Real> ViewFit<T> {
    pub fn is_fitted(&self) -> bool {
        self.status == ViewStatus::Fitted
    }

    pub fn camera(&self, intrinsics: CameraIntrinsics<T>) -> CameraView<T> {
        CameraView::new(intrinsics, self.translation)
    }
}

#[derive(Debug, Clone)]
pub struct StageOneResult<T: Real> {
    pub views: Vec<ViewFit<T>>,
}

#[derive(Debug, Clone)]
pub struct Screened<T: Real> {
    pub view: usize,
    pub body_pose: Vec<AxisAngle<T>>,
    pub betas: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct MultiViewFit<T: Real> {
    pub params: CanonicalParams<T>,
    /// Keypoints of the shared body with the reference view's global
    /// orientation, before camera translation.
    pub keypoints: Vec<Vector3<T>>,
    pub reference_view: usize,
    /// Views left out of the joint solve.
    pub inert: Vec<bool>,
    /// Summed reprojection loss over the active views.
    pub loss_2d: T,
    pub rounds: Vec<Diagnostics>,
}

/// Which initialization produced the kept stage-two result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTwoStart {
    Assembled,
    Realigned,
}

#[derive(Debug, Clone)]
pub struct TwoStageResult<T: Real> {
    pub stage_one: StageOneResult<T>,
    pub screened: Screened<T>,
    pub stage_two: MultiViewFit<T>,
    pub start: StageTwoStart,
}

/// Mean shape, rest body pose, configured orientation and translation.
pub fn mean_init<T: Real>(model: &BodyModel<T>, cfg: &FitConfig) -> (BodyParams<T>, Vector3<T>) {
    let mut params = BodyParams::zeros(model);
    let [x, y, z] = cfg.mean_orientation;
    params.global_orient = AxisAngle::new(T::lit(x), T::lit(y), T::lit(z));
    let [tx, ty, tz] = cfg.mean_translation;
    (params, Vector3::new(T::lit(tx), T::lit(ty), T::lit(tz)))
}

fn diverged(view: Option<usize>) -> impl Fn(SolverError) -> FitError {
    move |source| FitError::Diverged { view, source }
}

fn view_term<T: Real>(
    intrinsics: &CameraIntrinsics<T>,
    det: &FilteredDetection<T>,
    alpha: T,
    orient_offset: usize,
    trans_offset: usize,
) -> ViewTerm<T> {
    ViewTerm {
        intrinsics: *intrinsics,
        camera_rotation: Matrix3::identity(),
        detected: det.detection.keypoints.clone(),
        sqrt_weights: det.weights.iter().map(|w| (alpha * *w).sqrt()).collect(),
        orient_offset,
        trans_offset,
    }
}

fn check_detection<T: Real>(
    model: &BodyModel<T>,
    det: &FilteredDetection<T>,
) -> Result<(), FitError> {
    if det.detection.len() != model.n_keypoints() || det.weights.len() != model.n_keypoints() {
        return Err(ObservationError::KeypointCount {
            expected: model.n_keypoints(),
            found: det.detection.len(),
        }
        .into());
    }
    Ok(())
}

fn yaw<T: Real>(angle: T) -> Matrix3<T> {
    axis_angle_to_matrix(&AxisAngle::new(T::zero(), angle, T::zero()))
}

/// Rigid alignment of the body held at `params` (orientation and
/// translation only).
fn fit_rigid<T: Real>(
    model: &BodyModel<T>,
    intrinsics: &CameraIntrinsics<T>,
    det: &FilteredDetection<T>,
    cfg: &FitConfig,
    params: &BodyParams<T>,
    translation: Vector3<T>,
) -> Result<(Matrix3<T>, Vector3<T>, Diagnostics), SolverError> {
    let locals = params.local_rotations();
    let problem = BodyProblem {
        rig: model.rig(),
        views: vec![view_term(intrinsics, det, T::lit(cfg.alpha), 0, ROT_DIM)],
        body: BodyBlock::Fixed {
            pose: locals[1..].to_vec(),
            betas: params.betas.clone(),
        },
        rotation_anchors: Vec::new(),
        shape_anchor: None,
        n_params: ROT_DIM + 3,
    };
    let mut x = DVector::zeros(problem.n_params);
    write_rotation(&mut x, 0, &locals[0]);
    x.fixed_rows_mut::<3>(ROT_DIM).copy_from(&translation);
    let (x, diag) = solve_least_squares(&problem, x, &cfg.solver())?;
    let rot = read_rotation(&x, 0).expect("solver keeps feasible rotations");
    Ok((rot, read_vec3(&x, ROT_DIM), diag))
}

/// Stage-one refinement of all view parameters from `init`, minimizing
/// `alpha * L2D + w_shape ||beta||^2 + w_pose ||theta_b||^2`.
pub fn fit_single_view_from<T: Real>(
    model: &BodyModel<T>,
    intrinsics: &CameraIntrinsics<T>,
    det: &FilteredDetection<T>,
    cfg: &FitConfig,
    init: &BodyParams<T>,
    init_translation: Vector3<T>,
) -> Result<ViewFit<T>, FitError> {
    cfg.validate()?;
    model.check_params(init)?;
    check_detection(model, det)?;
    let survivors = det.survivors();
    if survivors < cfg.min_keypoints {
        return Err(FitError::UnderConstrained {
            survivors,
            required: cfg.min_keypoints,
        });
    }
    let (nj, nb) = (model.n_joints(), model.n_betas());
    let pose_offset = ROT_DIM + 3;
    let betas_offset = pose_offset + ROT_DIM * (nj - 1);
    let pose_w = T::lit(cfg.pose_prior_weight).sqrt();
    let problem = BodyProblem {
        rig: model.rig(),
        views: vec![view_term(intrinsics, det, T::lit(cfg.alpha), 0, ROT_DIM)],
        body: BodyBlock::Free {
            pose_offset,
            betas_offset,
        },
        rotation_anchors: if cfg.pose_prior_weight > 0.0 {
            (0..nj - 1)
                .map(|j| RotationAnchor {
                    offset: pose_offset + ROT_DIM * j,
                    target: Matrix3::identity(),
                    sqrt_weight: pose_w,
                })
                .collect()
        } else {
            Vec::new()
        },
        shape_anchor: (cfg.shape_prior_weight > 0.0).then(|| ShapeAnchor {
            offset: betas_offset,
            target: vec![T::zero(); nb],
            sqrt_weight: T::lit(cfg.shape_prior_weight).sqrt(),
        }),
        n_params: betas_offset + nb,
    };
    let locals = init.local_rotations();
    let mut x = DVector::zeros(problem.n_params);
    write_rotation(&mut x, 0, &locals[0]);
    x.fixed_rows_mut::<3>(ROT_DIM).copy_from(&init_translation);
    for j in 1..nj {
        write_rotation(&mut x, pose_offset + ROT_DIM * (j - 1), &locals[j]);
    }
    x.rows_mut(betas_offset, nb).copy_from_slice(&init.betas);

    let (x, diag) = solve_least_squares(&problem, x, &cfg.solver()).map_err(diverged(None))?;
    let rot = |off| matrix_to_axis_angle_unchecked(&read_rotation(&x, off).expect("feasible"));
    let params = BodyParams {
        betas: x.rows(betas_offset, nb).iter().copied().collect(),
        global_orient: rot(0),
        body_pose: (0..nj - 1)
            .map(|j| rot(pose_offset + ROT_DIM * j))
            .collect(),
    };
    let translation = read_vec3(&x, ROT_DIM);
    let loss_2d = loss_2d_single(
        model,
        &params,
        &CameraView::new(*intrinsics, translation),
        det,
    )?;
    Ok(ViewFit {
        params,
        translation,
        loss_2d,
        status: ViewStatus::Fitted,
        candidate: 0,
        rigid: None,
        refine: Some(diag),
    })
}

/// Stage-one fit of one view from the mean initialization.
///
/// The mean body is first aligned rigidly under each yaw hypothesis; the
/// best alignment (lowest cost, ties to the first) seeds the full fit.
pub fn fit_single_view<T: Real>(
    model: &BodyModel<T>,
    intrinsics: &CameraIntrinsics<T>,
    det: &FilteredDetection<T>,
    cfg: &FitConfig,
) -> Result<ViewFit<T>, FitError> {
    cfg.validate()?;
    check_detection(model, det)?;
    let survivors = det.survivors();
    if survivors < cfg.min_keypoints {
        return Err(FitError::UnderConstrained {
            survivors,
            required: cfg.min_keypoints,
        });
    }
    let (mean, mean_t) = mean_init(model, cfg);
    let mean_rot = axis_angle_to_matrix(&mean.global_orient);
    let n = cfg.orientation_candidates;
    let mut best: Option<(usize, Matrix3<T>, Vector3<T>, Diagnostics)> = None;
    for c in 0..n {
        let angle = T::two_pi() * T::from_usize(c).unwrap() / T::from_usize(n).unwrap();
        let mut start = mean.clone();
        start.global_orient = matrix_to_axis_angle_unchecked(&(mean_rot * yaw(angle)));
        let (rot, t, diag) =
            fit_rigid(model, intrinsics, det, cfg, &start, mean_t).map_err(diverged(None))?;
        if best
            .as_ref()
            .is_none_or(|b| diag.final_cost < b.3.final_cost)
        {
            best = Some((c, rot, t, diag));
        }
    }
    let (candidate, rot, t, rigid) = best.expect("at least one candidate");
    let mut start = mean;
    start.global_orient = matrix_to_axis_angle_unchecked(&rot);
    let mut fit = fit_single_view_from(model, intrinsics, det, cfg, &start, t)?;
    fit.candidate = candidate;
    fit.rigid = Some(rigid);
    Ok(fit)
}

/// Independent stage-one fits, one per view. Views that cannot be fitted are
/// kept as inert entries at the mean initialization.
pub fn run_stage_one<T: Real>(
    model: &BodyModel<T>,
    intrinsics: &[CameraIntrinsics<T>],
    dets: &[FilteredDetection<T>],
    cfg: &FitConfig,
) -> Result<StageOneResult<T>, FitError> {
    cfg.validate()?;
    if intrinsics.len() != dets.len() {
        return Err(FitError::ViewCount(intrinsics.len(), dets.len()));
    }
    let fits: Vec<Result<ViewFit<T>, FitError>> = intrinsics
        .par_iter()
        .zip(dets.par_iter())
        .map(|(k, d)| fit_single_view(model, k, d, cfg))
        .collect();
    let mut views = Vec::with_capacity(fits.len());
    for (i, fit) in fits.into_iter().enumerate() {
        match fit {
            Ok(f) => views.push(f),
            Err(e @ FitError::UnderConstrained { .. }) => {
                let (params, translation) = mean_init(model, cfg);
                views.push(ViewFit {
                    params,
                    translation,
                    loss_2d: T::zero(),
                    status: ViewStatus::Inert(e.to_string()),
                    candidate: 0,
                    rigid: None,
                    refine: None,
                });
            }
            Err(FitError::Diverged { source, .. }) => {
                return Err(FitError::Diverged {
                    view: Some(i),
                    source,
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(StageOneResult { views })
}

/// Index of the smallest loss, skipping `None`; ties go to the lowest index.
pub fn select_min_loss<T: Real>(losses: &[Option<T>]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, l) in losses.iter().enumerate() {
        if let Some(l) = l {
            if best.is_none_or(|(_, b)| *l < b) {
                best = Some((i, *l));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Picks the fitted view with the least reprojection loss and returns its
/// body pose and shape.
pub fn screen_best_view<T: Real>(
    model: &BodyModel<T>,
    stage_one: &StageOneResult<T>,
    intrinsics: &[CameraIntrinsics<T>],
    dets: &[FilteredDetection<T>],
) -> Result<Screened<T>, FitError> {
    if intrinsics.len() != stage_one.views.len() || dets.len() != stage_one.views.len() {
        return Err(FitError::ViewCount(intrinsics.len(), dets.len()));
    }
    let mut losses = Vec::with_capacity(dets.len());
    for ((fit, k), d) in stage_one.views.iter().zip(intrinsics).zip(dets) {
        losses.push(if fit.is_fitted() {
            Some(loss_2d_single(model, &fit.params, &fit.camera(*k), d)?)
        } else {
            None
        });
    }
    let view = select_min_loss(&losses).ok_or(FitError::NothingToScreen)?;
    let best = &stage_one.views[view].params;
    Ok(Screened {
        view,
        body_pose: best.body_pose.clone(),
        betas: best.betas.clone(),
    })
}

/// Per-view orientation and translation from stage one, screened body shared.
pub fn assemble_canonical<T: Real>(
    stage_one: &StageOneResult<T>,
    screened: &Screened<T>,
) -> CanonicalParams<T> {
    CanonicalParams {
        global_orients: stage_one
            .views
            .iter()
            .map(|v| v.params.global_orient)
            .collect(),
        translations: stage_one.views.iter().map(|v| v.translation).collect(),
        body_pose: screened.body_pose.clone(),
        betas: screened.betas.clone(),
    }
}

/// Rigidly re-fits every fitted view's orientation and translation to the
/// shared body of `canonical`, starting from its current orientation and
/// from `realign_candidates - 1` further yaw offsets about the body's
/// vertical axis. The lowest cost wins; ties keep the earlier candidate, so
/// the incoming orientation is kept unless another one is strictly better.
///
/// Monocular fits are ambiguous under front/back flips, and a flipped view
/// cannot be corrected by local descent in stage two.
pub fn realign_views<T: Real>(
    model: &BodyModel<T>,
    canonical: &CanonicalParams<T>,
    intrinsics: &[CameraIntrinsics<T>],
    dets: &[FilteredDetection<T>],
    cfg: &FitConfig,
    stage_one: &StageOneResult<T>,
) -> Result<CanonicalParams<T>, FitError> {
    cfg.validate()?;
    let n = canonical.n_views();
    if intrinsics.len() != n || dets.len() != n || stage_one.views.len() != n {
        return Err(FitError::ViewCount(intrinsics.len(), dets.len()));
    }
    let mut out = canonical.clone();
    if cfg.realign_candidates < 2 {
        return Ok(out);
    }
    type Placement<T> = Option<(Matrix3<T>, Vector3<T>)>;
    let results: Vec<Result<Placement<T>, FitError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !stage_one.views[i].is_fitted() || dets[i].survivors() == 0 {
                return Ok(None);
            }
            let base = axis_angle_to_matrix(&canonical.global_orients[i]);
            let nc = cfg.realign_candidates;
            let mut best: Option<(Matrix3<T>, Vector3<T>, T)> = None;
            for c in 0..nc {
                let angle = T::two_pi() * T::from_usize(c).unwrap() / T::from_usize(nc).unwrap();
                let mut start = canonical.view_params(i);
                start.global_orient = matrix_to_axis_angle_unchecked(&(base * yaw(angle)));
                let (rot, t, diag) = fit_rigid(
                    model,
                    &intrinsics[i],
                    &dets[i],
                    cfg,
                    &start,
                    canonical.translations[i],
                )
                .map_err(diverged(Some(i)))?;
                let cost = T::lit(diag.final_cost);
                if best.as_ref().is_none_or(|b| cost < b.2) {
                    best = Some((rot, t, cost));
                }
            }
            Ok(best.map(|(r, t, _)| (r, t)))
        })
        .collect();
    for (i, r) in results.into_iter().enumerate() {
        if let Some((rot, t)) = r? {
            out.global_orients[i] = matrix_to_axis_angle_unchecked(&rot);
            out.translations[i] = t;
        }
    }
    Ok(out)
}

/// Stage-two residuals over the active views of a canonical parameter set:
/// `sqrt(alpha w) * reprojection` per view, then, when `gamma > 0`,
/// `sqrt(gamma) * log(A^T R)` for every per-view orientation and body
/// rotation and `sqrt(gamma) * (beta - beta_anchor)`.
///
/// Packed layout: `[6D orientation, translation]` per active view, then the
/// 23 body rotations in 6D, then the shape coefficients.
pub struct StageTwoObjective<'a, T: Real> {
    problem: BodyProblem<'a, T>,
    active: Vec<usize>,
    n_joints: usize,
    n_betas: usize,
}

impl<'a, T: Real> StageTwoObjective<'a, T> {
    /// `anchor` supplies the orientation targets per view and the body
    /// targets; its translations are ignored. Views flagged in `inert` get
    /// no residuals and keep their values on unpacking.
    pub fn new(
        model: &'a BodyModel<T>,
        intrinsics: &[CameraIntrinsics<T>],
        dets: &[FilteredDetection<T>],
        inert: &[bool],
        cfg: &FitConfig,
        anchor: &CanonicalParams<T>,
    ) -> Result<Self, FitError> {
        let n = inert.len();
        if intrinsics.len() != n || dets.len() != n || anchor.n_views() != n {
            return Err(FitError::ViewCount(intrinsics.len(), dets.len()));
        }
        model.check_params(&anchor.view_params(0))?;
        for d in dets {
            check_detection(model, d)?;
        }
        let active: Vec<usize> = (0..n).filter(|i| !inert[*i]).collect();
        if active.is_empty() {
            return Err(FitError::AllViewsInert);
        }
        let (nj, nb) = (model.n_joints(), model.n_betas());
        let view_block = ROT_DIM + 3;
        let pose_offset = view_block * active.len();
        let betas_offset = pose_offset + ROT_DIM * (nj - 1);
        let alpha = T::lit(cfg.alpha);
        let views = active
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                view_term(
                    &intrinsics[i],
                    &dets[i],
                    alpha,
                    slot * view_block,
                    slot * view_block + ROT_DIM,
                )
            })
            .collect();
        let (rotation_anchors, shape_anchor) = if cfg.gamma > 0.0 {
            let w = T::lit(cfg.gamma).sqrt();
            let mut ra: Vec<RotationAnchor<T>> = active
                .iter()
                .enumerate()
                .map(|(slot, &i)| RotationAnchor {
                    offset: slot * view_block,
                    target: axis_angle_to_matrix(&anchor.global_orients[i]),
                    sqrt_weight: w,
                })
                .collect();
            ra.extend(
                anchor
                    .body_pose
                    .iter()
                    .enumerate()
                    .map(|(j, aa)| RotationAnchor {
                        offset: pose_offset + ROT_DIM * j,
                        target: axis_angle_to_matrix(aa),
                        sqrt_weight: w,
                    }),
            );
            (
                ra,
                Some(ShapeAnchor {
                    offset: betas_offset,
                    target: anchor.betas.clone(),
                    sqrt_weight: w,
                }),
            )
        } else {
            (Vec::new(), None)
        };
        let problem = BodyProblem {
            rig: model.rig(),
            views,
            body: BodyBlock::Free {
                pose_offset,
                betas_offset,
            },
            rotation_anchors,
            shape_anchor,
            n_params: betas_offset + nb,
        };
        Ok(Self {
            problem,
            active,
            n_joints: nj,
            n_betas: nb,
        })
    }

    pub fn n_params(&self) -> usize {
        self.problem.n_params
    }

    pub fn n_residuals(&self) -> usize {
        self.problem.n_residuals()
    }

    pub fn active_views(&self) -> &[usize] {
        &self.active
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let view_block = ROT_DIM + 3;
        let pose_offset = view_block * self.active.len();
        (
            view_block,
            pose_offset,
            pose_offset + ROT_DIM * (self.n_joints - 1),
        )
    }

    pub fn pack(&self, params: &CanonicalParams<T>) -> DVector<T> {
        let (view_block, pose_offset, betas_offset) = self.offsets();
        let mut x = DVector::zeros(self.n_params());
        for (slot, &i) in self.active.iter().enumerate() {
            write_rotation(
                &mut x,
                slot * view_block,
                &axis_angle_to_matrix(&params.global_orients[i]),
            );
            x.fixed_rows_mut::<3>(slot * view_block + ROT_DIM)
                .copy_from(&params.translations[i]);
        }
        for (j, aa) in params.body_pose.iter().enumerate() {
            write_rotation(&mut x, pose_offset + ROT_DIM * j, &axis_angle_to_matrix(aa));
        }
        x.rows_mut(betas_offset, self.n_betas)
            .copy_from_slice(&params.betas);
        x
    }

    /// Overwrites the active views and the shared body of `base` from `x`.
    pub fn unpack(
        &self,
        x: &DVector<T>,
        base: &CanonicalParams<T>,
    ) -> Result<CanonicalParams<T>, EvalError> {
        let (view_block, pose_offset, betas_offset) = self.offsets();
        let mut out = base.clone();
        for (slot, &i) in self.active.iter().enumerate() {
            out.global_orients[i] =
                matrix_to_axis_angle_unchecked(&read_rotation(x, slot * view_block)?);
            out.translations[i] = read_vec3(x, slot * view_block + ROT_DIM);
        }
        for j in 0..self.n_joints - 1 {
            out.body_pose[j] =
                matrix_to_axis_angle_unchecked(&read_rotation(x, pose_offset + ROT_DIM * j)?);
        }
        out.betas = x.rows(betas_offset, self.n_betas).iter().copied().collect();
        Ok(out)
    }
}

impl<'a, T: Real> LeastSquaresProblem<T> for StageTwoObjective<'a, T> {
    fn residuals(&self, x: &DVector<T>) -> Result<DVector<T>, EvalError> {
        self.problem.residuals(x)
    }

    fn jacobian(&self, x: &DVector<T>) -> Result<nalgebra::DMatrix<T>, EvalError> {
        self.problem.jacobian(x)
    }

    fn normalize(&self, x: &mut DVector<T>) {
        self.problem.normalize(x)
    }
}

/// Joint refinement of the canonical parameters against every active view:
/// `alpha * sum_i L2D_i + gamma * (||(beta, theta_b) - anchor||^2 +
/// sum_i ||theta_g_i - anchor_i||^2)`, rotation differences measured as
/// `log(A^T R)`.
///
/// The first round anchors to `init`'s body and to the stage-one
/// orientations; each further round re-anchors to the previous optimum and
/// the loop ends after `anchor_rounds` rounds or a round without progress.
/// Views without surviving keypoints or without a stage-one fit are inert.
pub fn fit_multi_view<T: Real>(
    model: &BodyModel<T>,
    init: &CanonicalParams<T>,
    intrinsics: &[CameraIntrinsics<T>],
    dets: &[FilteredDetection<T>],
    cfg: &FitConfig,
    anchor: &StageOneResult<T>,
) -> Result<MultiViewFit<T>, FitError> {
    cfg.validate()?;
    let n = init.n_views();
    if anchor.views.len() != n || dets.len() != n {
        return Err(FitError::ViewCount(anchor.views.len(), dets.len()));
    }
    let inert: Vec<bool> = (0..n)
        .map(|i| dets[i].survivors() == 0 || !anchor.views[i].is_fitted())
        .collect();
    let mut targets = init.clone();
    for (i, v) in anchor.views.iter().enumerate() {
        targets.global_orients[i] = v.params.global_orient;
    }
    let mut current = init.clone();
    let mut rounds = Vec::new();
    let n_rounds = if cfg.gamma > 0.0 {
        cfg.anchor_rounds
    } else {
        1
    };
    let mut active = Vec::new();
    for _ in 0..n_rounds {
        let objective = StageTwoObjective::new(model, intrinsics, dets, &inert, cfg, &targets)?;
        active = objective.active_views().to_vec();
        let (x, diag) = solve_least_squares(&objective, objective.pack(&current), &cfg.solver())
            .map_err(diverged(None))?;
        current = objective
            .unpack(&x, &current)
            .expect("solver keeps feasible rotations");
        targets = current.clone();
        let progressed = diag.accepted_steps > 0;
        rounds.push(diag);
        if !progressed {
            break;
        }
    }

    let mut loss_2d = T::zero();
    for &i in &active {
        loss_2d += loss_2d_single(
            model,
            &current.view_params(i),
            &CameraView::new(intrinsics[i], current.translations[i]),
            &dets[i],
        )?;
    }
    let reference_view = active[0];
    let keypoints = model.keypoints_of(&current.view_params(reference_view))?;
    Ok(MultiViewFit {
        params: current,
        keypoints,
        reference_view,
        inert,
        loss_2d,
        rounds,
    })
}

/// Stage one, screening, canonical assembly and stage two.
///
/// With `realign_candidates >= 2` stage two also runs from the re-aligned
/// assembly (see [`realign_views`]) and the start reaching the lower final
/// reprojection loss is kept; ties keep the literal assembly.
pub fn run_two_stage<T: Real>(
    model: &BodyModel<T>,
    intrinsics: &[CameraIntrinsics<T>],
    dets: &[FilteredDetection<T>],
    cfg: &FitConfig,
) -> Result<TwoStageResult<T>, FitError> {
    let stage_one = run_stage_one(model, intrinsics, dets, cfg)?;
    let screened = screen_best_view(model, &stage_one, intrinsics, dets)?;
    let assembled = assemble_canonical(&stage_one, &screened);
    let literal = || fit_multi_view(model, &assembled, intrinsics, dets, cfg, &stage_one);
    if cfg.realign_candidates < 2 {
        let stage_two = literal()?;
        return Ok(TwoStageResult {
            stage_one,
            screened,
            stage_two,
            start: StageTwoStart::Assembled,
        });
    }
    let realigned = || -> Result<MultiViewFit<T>, FitError> {
        let init = realign_views(model, &assembled, intrinsics, dets, cfg, &stage_one)?;
        // anchor the orientations this start begins from
        let mut anchor = stage_one.clone();
        for (v, (o, t)) in anchor
            .views
            .iter_mut()
            .zip(init.global_orients.iter().zip(&init.translations))
        {
            v.params.global_orient = *o;
            v.translation = *t;
        }
        fit_multi_view(model, &init, intrinsics, dets, cfg, &anchor)
    };
    let (a, b) = rayon::join(literal, realigned);
    let (a, b) = (a?, b?);
    let (stage_two, start) = if b.loss_2d < a.loss_2d {
        (b, StageTwoStart::Realigned)
    } else {
        (a, StageTwoStart::Assembled)
    };
    Ok(TwoStageResult {
        stage_one,
        screened,
        stage_two,
        start,
    })
}

#[cfg(test)]
mod tests;
