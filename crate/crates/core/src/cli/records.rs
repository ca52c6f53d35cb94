//! On-disk records written by the commands: fit results, manifests and
//! metric rows.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, BodyParams};
use crate::fitting::{
    CanonicalParams, Diagnostics, StageOneResult, StageTwoStart, TwoStageResult, ViewStatus,
};
use crate::geometry::AxisAngle;
use crate::observations::FilteredDetection;

use super::RunConfig;

pub const RESULT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub type Vec3 = [f64; 3];

pub fn v3(v: &Vector3<f64>) -> Vec3 {
    [v.x, v.y, v.z]
}

fn aa(a: &AxisAngle<f64>) -> Vec3 {
    v3(&a.0)
}

fn points(p: &[Vector3<f64>]) -> Vec<Vec3> {
    p.iter().map(v3).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum FitMode {
    /// Independent per-view fits only.
    Stage1,
    /// Per-view fits, screening and the joint multi-view refinement.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewResult {
    pub view_id: usize,
    #[serde(flatten)]
    pub status: ViewStatus,
    pub survivors: usize,
    pub global_orient: Vec3,
    pub translation: Vec3,
    pub body_pose: Vec<Vec3>,
    pub betas: Vec<f64>,
    pub loss_2d: f64,
    pub candidate: usize,
    /// Fitted keypoints in this view's camera frame, meters.
    pub keypoints_camera: Vec<Vec3>,
    pub rigid: Option<Diagnostics>,
    pub refine: Option<Diagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalRecord {
    pub global_orients: Vec<Vec3>,
    pub translations: Vec<Vec3>,
    pub body_pose: Vec<Vec3>,
    pub betas: Vec<f64>,
}

impl CanonicalRecord {
    pub fn new(c: &CanonicalParams<f64>) -> Self {
        Self {
            global_orients: c.global_orients.iter().map(aa).collect(),
            translations: c.translations.iter().map(v3).collect(),
            body_pose: c.body_pose.iter().map(aa).collect(),
            betas: c.betas.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoints3d {
    /// Shared body with the reference view's orientation, no translation.
    pub reference: Vec<Vec3>,
    /// Shared body with identity global orientation.
    pub body_frame: Vec<Vec3>,
    /// Per view, in that camera's frame; `null` for inert views.
    pub camera_frames: Vec<Option<Vec<Vec3>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoRecord {
    pub start: StageTwoStart,
    pub reference_view: usize,
    pub inert: Vec<bool>,
    pub loss_2d: f64,
    pub canonical: CanonicalRecord,
    pub keypoints_3d: Keypoints3d,
    pub rounds: Vec<Diagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResultFile {
    pub schema_version: u32,
    pub scene_id: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub manifest: String,
    pub mode: FitMode,
    pub view_ids: Vec<usize>,
    pub stage_one: Vec<ViewResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screened_view: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_two: Option<StageTwoRecord>,
}

impl FitResultFile {
    /// Index of the fitted stage-one view with the least loss.
    pub fn best_stage_one_view(&self) -> Option<usize> {
        let losses: Vec<Option<f64>> = self
            .stage_one
            .iter()
            .map(|v| (v.status == ViewStatus::Fitted).then_some(v.loss_2d))
            .collect();
        crate::fitting::select_min_loss(&losses)
    }

    /// The prediction to evaluate and the view whose camera frame it is in.
    pub fn prediction(&self) -> Option<(usize, Vec<Vector3<f64>>)> {
        let to_vec = |p: &[Vec3]| p.iter().map(|q| Vector3::from(*q)).collect();
        match &self.stage_two {
            Some(s) => {
                let r = s.reference_view;
                s.keypoints_3d
                    .camera_frames
                    .get(r)?
                    .as_ref()
                    .map(|p| (r, to_vec(p)))
            }
            None => {
                let v = self.best_stage_one_view()?;
                Some((v, to_vec(&self.stage_one[v].keypoints_camera)))
            }
        }
    }
}

pub fn stage_one_records(
    model: &BodyModel<f64>,
    stage_one: &StageOneResult<f64>,
    dets: &[FilteredDetection<f64>],
) -> Result<Vec<ViewResult>, crate::body::ModelError> {
    stage_one
        .views
        .iter()
        .zip(dets)
        .map(|(v, d)| {
            let kp = model.keypoints_of(&v.params)?;
            Ok(ViewResult {
                view_id: d.detection.view_id,
                status: v.status.clone(),
                survivors: d.survivors(),
                global_orient: aa(&v.params.global_orient),
                translation: v3(&v.translation),
                body_pose: v.params.body_pose.iter().map(aa).collect(),
                betas: v.params.betas.clone(),
                loss_2d: v.loss_2d,
                candidate: v.candidate,
                keypoints_camera: kp.iter().map(|k| v3(&(k + v.translation))).collect(),
                rigid: v.rigid.clone(),
                refine: v.refine.clone(),
            })
        })
        .collect()
}

pub fn stage_two_record(
    model: &BodyModel<f64>,
    res: &TwoStageResult<f64>,
) -> Result<StageTwoRecord, crate::body::ModelError> {
    let fit = &res.stage_two;
    let c = &fit.params;
    let body = BodyParams {
        betas: c.betas.clone(),
        global_orient: AxisAngle::zero(),
        body_pose: c.body_pose.clone(),
    };
    let camera_frames = (0..c.n_views())
        .map(|i| {
            if fit.inert[i] {
                return Ok(None);
            }
            let kp = model.keypoints_of(&c.view_params(i))?;
            Ok(Some(
                kp.iter().map(|k| v3(&(k + c.translations[i]))).collect(),
            ))
        })
        .collect::<Result<_, crate::body::ModelError>>()?;
    Ok(StageTwoRecord {
        start: res.start,
        reference_view: fit.reference_view,
        inert: fit.inert.clone(),
        loss_2d: fit.loss_2d,
        canonical: CanonicalRecord::new(c),
        keypoints_3d: Keypoints3d {
            reference: points(&fit.keypoints),
            body_frame: points(&model.keypoints_of(&body)?),
            camera_frames,
        },
        rounds: fit.rounds.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub input: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    /// File path, or `builtin:toy`.
    pub source: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Resolved invocation, replayable with a new output directory.
    pub invocation: super::Invocation,
    pub config: RunConfig,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub model: ModelRecord,
    pub jobs: usize,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub failures: Vec<Failure>,
    pub notices: Vec<String>,
    pub duration_seconds: f64,
}

/// One row of the metrics CSV. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scene: String,
    pub seed: Option<u64>,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pck: f64,
    pub auc: f64,
    pub pa_pck: f64,
    pub pa_auc: f64,
    pub config_hash: String,
    pub manifest: String,
}

pub const METRICS_HEADER: [&str; 10] = [
    "scene",
    "seed",
    "mpjpe",
    "pa_mpjpe",
    "pck",
    "auc",
    "pa_pck",
    "pa_auc",
    "config_hash",
    "manifest",
];

/// One row of the comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub scenes: usize,
    pub pck: f64,
    pub auc: f64,
    pub mpjpe: f64,
    pub pa_pck: f64,
    pub pa_auc: f64,
    pub pa_mpjpe: f64,
    /// Metrics for which this row is best, separated by `;`.
    pub best: String,
    pub manifest: String,
}

pub const REPORT_HEADER: [&str; 10] = [
    "label", "scenes", "pck", "auc", "mpjpe", "pa_pck", "pa_auc", "pa_mpjpe", "best", "manifest",
];
