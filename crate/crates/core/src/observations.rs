//! Per-view detections, confidence filtering and the confidence-weighted
//! reprojection loss.

use nalgebra::{DVector, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::body::{BodyModel, BodyParams, ModelError};
use crate::fitting::CanonicalParams;
use crate::geometry::{project, CameraIntrinsics, GeometryError};
use crate::scalar::Real;

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.3;

#[derive(Debug, Error)]
pub enum ObservationError {
    #[error("confidence {value} of keypoint {index} is outside [0, 1]")]
    Confidence { index: usize, value: f64 },
    #[error("detection has {keypoints} keypoints but {confidences} confidences")]
    Length {
        keypoints: usize,
        confidences: usize,
    },
    #[error("detection has {found} keypoints, model regresses {expected}")]
    KeypointCount { expected: usize, found: usize },
    #[error("{0} cameras for {1} detections")]
    ViewCount(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Projection(#[from] GeometryError),
    #[error("view {view}: {source}")]
    View {
        view: usize,
        source: Box<ObservationError>,
    },
}

/// Detected keypoints (pixels) and detector confidences of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection2D<T: Real> {
    pub view_id: usize,
    pub keypoints: Vec<Vector2<T>>,
    pub confidences: Vec<T>,
}

impl<T: Real> Detection2D<T> {
    pub fn new(
        view_id: usize,
        keypoints: Vec<Vector2<T>>,
        confidences: Vec<T>,
    ) -> Result<Self, ObservationError> {
        if keypoints.len() != confidences.len() {
            return Err(ObservationError::Length {
                keypoints: keypoints.len(),
                confidences: confidences.len(),
            });
        }
        if let Some((index, c)) = confidences
            .iter()
            .enumerate()
            .find(|(_, c)| !(**c >= T::zero() && **c <= T::one()))
        {
            return Err(ObservationError::Confidence {
                index,
                value: c.as_f64(),
            });
        }
        Ok(Self {
            view_id,
            keypoints,
            confidences,
        })
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// Detection with per-keypoint loss weights: the confidence where it
/// reaches the threshold, zero otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredDetection<T: Real> {
    pub detection: Detection2D<T>,
    pub weights: Vec<T>,
    pub threshold: T,
}

impl<T: Real> FilteredDetection<T> {
    pub fn survivors(&self) -> usize {
        self.weights.iter().filter(|w| **w > T::zero()).count()
    }

    /// Same keypoints with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            weights: self.weights.iter().map(|w| *w * factor).collect(),
            ..self.clone()
        }
    }
}

pub fn filter_confidence<T: Real>(d: &Detection2D<T>, threshold: T) -> FilteredDetection<T> {
    let weights = d
        .confidences
        .iter()
        .map(|&c| if c >= threshold { c } else { T::zero() })
        .collect();
    FilteredDetection {
        detection: d.clone(),
        weights,
        threshold,
    }
}

/// Intrinsics plus pose. Fitted views keep `rotation` at identity and carry
/// the viewing direction in the body's global orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView<T: Real> {
    pub intrinsics: CameraIntrinsics<T>,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> CameraView<T> {
    pub fn new(intrinsics: CameraIntrinsics<T>, translation: Vector3<T>) -> Self {
        Self {
            intrinsics,
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn to_camera(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }
}

fn projected<T: Real>(
    model: &BodyModel<T>,
    params: &BodyParams<T>,
    cam: &CameraView<T>,
    d: &FilteredDetection<T>,
) -> Result<Vec<Vector2<T>>, ObservationError> {
    if d.detection.len() != model.n_keypoints() || d.weights.len() != model.n_keypoints() {
        return Err(ObservationError::KeypointCount {
            expected: model.n_keypoints(),
            found: d.detection.len(),
        });
    }
    let kp = model.keypoints_of(params)?;
    Ok(project(
        &kp,
        &cam.intrinsics,
        &cam.rotation,
        &cam.translation,
    )?)
}

/// `sqrt(w_j) * (detected_j - projected_j)` stacked as `[u0, v0, u1, v1, ...]`.
pub fn reprojection_residuals<T: Real>(
    model: &BodyModel<T>,
    params: &BodyParams<T>,
    cam: &CameraView<T>,
    d: &FilteredDetection<T>,
) -> Result<DVector<T>, ObservationError> {
    let px = projected(model, params, cam, d)?;
    let mut r = DVector::zeros(2 * px.len());
    for (j, (p, det)) in px.iter().zip(&d.detection.keypoints).enumerate() {
        let s = d.weights[j].sqrt();
        r[2 * j] = s * (det.x - p.x);
        r[2 * j + 1] = s * (det.y - p.y);
    }
    Ok(r)
}

/// Confidence-weighted squared reprojection error of one view.
pub fn loss_2d_single<T: Real>(
    model: &BodyModel<T>,
    params: &BodyParams<T>,
    cam: &CameraView<T>,
    d: &FilteredDetection<T>,
) -> Result<T, ObservationError> {
    let px = projected(model, params, cam, d)?;
    Ok(px
        .iter()
        .zip(&d.detection.keypoints)
        .zip(&d.weights)
        .fold(T::zero(), |acc, ((p, det), w)| {
            acc + *w * (det - p).norm_squared()
        }))
}

/// Sum of per-view losses at canonical parameters, in view order.
pub fn loss_2d_multi<T: Real>(
    model: &BodyModel<T>,
    canonical: &CanonicalParams<T>,
    cams: &[CameraView<T>],
    dets: &[FilteredDetection<T>],
) -> Result<T, ObservationError> {
    if cams.len() != dets.len() || cams.len() != canonical.n_views() {
        return Err(ObservationError::ViewCount(cams.len(), dets.len()));
    }
    let mut total = T::zero();
    for (view, (cam, d)) in cams.iter().zip(dets).enumerate() {
        let params = canonical.view_params(view);
        let cam = CameraView {
            translation: canonical.translations[view],
            ..*cam
        };
        total += loss_2d_single(model, &params, &cam, d).map_err(|e| ObservationError::View {
            view,
            source: Box::new(e),
        })?;
    }
    Ok(total)
}
