//! Scene files: per-view intrinsics, optional extrinsics, detections and
//! optional ground truth.
//!
//! JSON layout (`schema_version` 1, meters, pixels, radians):
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "scene_id": "scene_000007",
//!   "seed": 7,                        optional
//!   "config_hash": "...",             optional
//!   "manifest": "manifest_gen.json",  optional
//!   "views": [{
//!     "view_id": 0,
//!     "intrinsics": {"focal": 1000.0, "principal_point": [500.0, 500.0]},
//!     "rotation": [[r00, r01, r02], [r10, r11, r12], [r20, r21, r22]],  optional, world to camera
//!     "translation": [tx, ty, tz],                                      optional
//!     "keypoints_2d": [[u, v], ...],
//!     "confidences": [c, ...]
//!   }],
//!   "ground_truth": {                 optional
//!     "betas": [...], "global_orient": [x, y, z], "body_pose": [[x, y, z], ...],
//!     "keypoints_3d": [[x, y, z], ...]   world frame
//!   }
//! }
//! ```

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::body::{BodyModel, BodyParams, ModelError};
use crate::fitting::CanonicalParams;
use crate::geometry::{
    axis_angle_to_matrix, check_rotation, matrix_to_axis_angle_unchecked, AxisAngle,
    CameraIntrinsics, GeometryError,
};
use crate::io::write_atomic;
use crate::observations::{filter_confidence, Detection2D, FilteredDetection, ObservationError};

pub const SCENE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: schema error: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("unsupported scene schema version {0}")]
    Version(u32),
    #[error("view {view}: {message}")]
    InvalidView { view: usize, message: String },
    #[error("invalid ground truth: {0}")]
    GroundTruth(String),
    #[error("invalid scene configuration: {0}")]
    Config(String),
    #[error("no camera placement with positive depth after {attempts} attempts")]
    ImpossibleRig { attempts: usize },
    #[error("ablation needs at least 2 views, scene has {0}")]
    TooFewViews(usize),
    #[error("unknown ablation variant {0:?}")]
    UnknownVariant(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// World-to-camera transform: `x_cam = rotation * x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneView {
    pub intrinsics: CameraIntrinsics<f64>,
    pub extrinsics: Option<Extrinsics>,
    pub detection: Detection2D<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// World-frame parameters.
    pub params: BodyParams<f64>,
    /// World-frame keypoints, meters.
    pub keypoints_3d: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub manifest: Option<String>,
    pub views: Vec<SceneView>,
    pub ground_truth: Option<GroundTruth>,
}

impl Scene {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn intrinsics(&self) -> Vec<CameraIntrinsics<f64>> {
        self.views.iter().map(|v| v.intrinsics).collect()
    }

    pub fn filtered(&self, threshold: f64) -> Vec<FilteredDetection<f64>> {
        self.views
            .iter()
            .map(|v| filter_confidence(&v.detection, threshold))
            .collect()
    }

    pub fn survivor_counts(&self, threshold: f64) -> Vec<usize> {
        self.filtered(threshold)
            .iter()
            .map(FilteredDetection::survivors)
            .collect()
    }

    /// Ground-truth keypoints in the camera frame of `view`, when both the
    /// ground truth and that view's extrinsics are present.
    pub fn ground_truth_camera(&self, view: usize) -> Option<Vec<Vector3<f64>>> {
        let gt = self.ground_truth.as_ref()?;
        let ext = self.views.get(view)?.extrinsics?;
        Some(gt.keypoints_3d.iter().map(|p| ext.apply(p)).collect())
    }

    /// Ground truth expressed in the canonical parameter space: per view,
    /// orientation `R_cam R_body` and the translation that reproduces the
    /// camera-frame keypoints.
    pub fn ground_truth_canonical(
        &self,
        model: &BodyModel<f64>,
    ) -> Result<Option<CanonicalParams<f64>>, SceneError> {
        let Some(gt) = &self.ground_truth else {
            return Ok(None);
        };
        let Some(ext) = self
            .views
            .iter()
            .map(|v| v.extrinsics)
            .collect::<Option<Vec<_>>>()
        else {
            return Ok(None);
        };
        model.check_params(&gt.params)?;
        let (_, joints) = model.shaped_rest(&gt.params.betas)?;
        let root = joints[0];
        let body_rot = axis_angle_to_matrix(&gt.params.global_orient);
        Ok(Some(CanonicalParams {
            global_orients: ext
                .iter()
                .map(|e| matrix_to_axis_angle_unchecked(&(e.rotation * body_rot)))
                .collect(),
            translations: ext
                .iter()
                .map(|e| e.rotation * root + e.translation - root)
                .collect(),
            body_pose: gt.params.body_pose.clone(),
            betas: gt.params.betas.clone(),
        }))
    }

    /// Scene restricted to `views`, in the given order.
    pub fn select_views(&self, views: &[usize]) -> Scene {
        Scene {
            views: views.iter().map(|&i| self.views[i].clone()).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsRecord {
    focal: f64,
    principal_point: [f64; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewRecord {
    view_id: usize,
    intrinsics: IntrinsicsRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    translation: Option<[f64; 3]>,
    keypoints_2d: Vec<[f64; 2]>,
    confidences: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthRecord {
    betas: Vec<f64>,
    global_orient: [f64; 3],
    body_pose: Vec<[f64; 3]>,
    keypoints_3d: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    schema_version: u32,
    scene_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest: Option<String>,
    views: Vec<ViewRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<GroundTruthRecord>,
}

fn v3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn to_file(scene: &Scene) -> SceneFile {
    SceneFile {
        schema_version: SCENE_SCHEMA_VERSION,
        scene_id: scene.scene_id.clone(),
        seed: scene.seed,
        config_hash: scene.config_hash.clone(),
        manifest: scene.manifest.clone(),
        views: scene
            .views
            .iter()
            .map(|v| ViewRecord {
                view_id: v.detection.view_id,
                intrinsics: IntrinsicsRecord {
                    focal: v.intrinsics.focal,
                    principal_point: [
                        v.intrinsics.principal_point.x,
                        v.intrinsics.principal_point.y,
                    ],
                },
                rotation: v.extrinsics.map(|e| {
                    let r = e.rotation;
                    [
                        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
                    ]
                }),
                translation: v.extrinsics.map(|e| v3(&e.translation)),
                keypoints_2d: v.detection.keypoints.iter().map(|p| [p.x, p.y]).collect(),
                confidences: v.detection.confidences.clone(),
            })
            .collect(),
        ground_truth: scene.ground_truth.as_ref().map(|gt| GroundTruthRecord {
            betas: gt.params.betas.clone(),
            global_orient: v3(&gt.params.global_orient.0),
            body_pose: gt.params.body_pose.iter().map(|a| v3(&a.0)).collect(),
            keypoints_3d: gt.keypoints_3d.iter().map(v3).collect(),
        }),
    }
}

fn aa(v: &[f64; 3]) -> AxisAngle<f64> {
    AxisAngle::new(v[0], v[1], v[2])
}

fn from_file(f: SceneFile) -> Result<Scene, SceneError> {
    if f.schema_version != SCENE_SCHEMA_VERSION {
        return Err(SceneError::Version(f.schema_version));
    }
    let mut views = Vec::with_capacity(f.views.len());
    for (i, v) in f.views.into_iter().enumerate() {
        let bad = |message: String| SceneError::InvalidView { view: i, message };
        let [cx, cy] = v.intrinsics.principal_point;
        let intrinsics =
            CameraIntrinsics::new(v.intrinsics.focal, cx, cy).map_err(|e| bad(e.to_string()))?;
        let extrinsics = match (v.rotation, v.translation) {
            (Some(r), Some(t)) => {
                let rotation = Matrix3::from_row_slice(&r.concat());
                check_rotation(&rotation).map_err(|e: GeometryError| bad(e.to_string()))?;
                Some(Extrinsics {
                    rotation,
                    translation: Vector3::from(t),
                })
            }
            (None, None) => None,
            _ => return Err(bad("rotation and translation must be given together".into())),
        };
        let keypoints = v
            .keypoints_2d
            .iter()
            .map(|p| Vector2::new(p[0], p[1]))
            .collect();
        let detection = Detection2D::new(v.view_id, keypoints, v.confidences)
            .map_err(|e: ObservationError| bad(e.to_string()))?;
        views.push(SceneView {
            intrinsics,
            extrinsics,
            detection,
        });
    }
    let ground_truth = f.ground_truth.map(|g| GroundTruth {
        params: BodyParams {
            betas: g.betas,
            global_orient: aa(&g.global_orient),
            body_pose: g.body_pose.iter().map(aa).collect(),
        },
        keypoints_3d: g.keypoints_3d.iter().map(|p| Vector3::from(*p)).collect(),
    });
    if let Some(gt) = &ground_truth {
        if !gt.params.is_finite()
            || gt
                .keypoints_3d
                .iter()
                .any(|p| !p.iter().all(|c| c.is_finite()))
        {
            return Err(SceneError::GroundTruth("non-finite values".into()));
        }
    }
    Ok(Scene {
        scene_id: f.scene_id,
        seed: f.seed,
        config_hash: f.config_hash,
        manifest: f.manifest,
        views,
        ground_truth,
    })
}

pub fn scene_to_json(scene: &Scene) -> String {
    let mut s = serde_json::to_string_pretty(&to_file(scene)).expect("scene serializes");
    s.push('\n');
    s
}

pub fn scene_from_json(text: &str, path: &str) -> Result<Scene, SceneError> {
    let f: SceneFile = serde_json::from_str(text).map_err(|source| SceneError::Parse {
        path: path.to_string(),
        source,
    })?;
    from_file(f)
}

pub fn write_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    write_atomic(path, scene_to_json(scene).as_bytes()).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: name.clone(),
        source,
    })?;
    scene_from_json(&text, &name)
}
