//! 3D pose error metrics. Inputs are keypoint arrays in millimeters.
//!
//! PCK counts a joint as correct when its error is strictly below the
//! threshold. AUC is the mean PCK over a threshold grid (5 to 150 mm in
//! steps of 5 by default).

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{procrustes_align, AlignMode, GeometryError};
use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction has {pred} joints, ground truth {gt}")]
    Shape { pred: usize, gt: usize },
    #[error("no joints to evaluate")]
    Empty,
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error("threshold grid must be strictly ascending")]
    UnsortedGrid,
    #[error("root joint {root} out of range for {joints} joints")]
    Root { root: usize, joints: usize },
    #[error(transparent)]
    Alignment(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pck_threshold_mm: f64,
    /// AUC grid, ascending, in mm.
    pub auc_thresholds_mm: Vec<f64>,
    /// Subtract the root joint before the unaligned metrics.
    pub root_relative: bool,
    /// Subtract the root joint before Procrustes alignment too.
    pub aligned_root_relative: bool,
    pub root_joint: usize,
    pub align_mode: AlignMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pck_threshold_mm: 150.0,
            auc_thresholds_mm: default_auc_grid(),
            root_relative: true,
            aligned_root_relative: false,
            root_joint: 0,
            align_mode: AlignMode::Similarity,
        }
    }
}

pub fn default_auc_grid() -> Vec<f64> {
    (1..=30).map(|i| 5.0 * i as f64).collect()
}

/// Metrics of one prediction. Unaligned values follow the root-relative
/// flag; `pa_*` values are computed after Procrustes alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub per_joint_mm: Vec<f64>,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pck: f64,
    pub auc: f64,
    pub pa_pck: f64,
    pub pa_auc: f64,
}

fn check<T: Real>(pred: &[Vector3<T>], gt: &[Vector3<T>]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Shape {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn per_joint_errors<T: Real>(
    pred: &[Vector3<T>],
    gt: &[Vector3<T>],
) -> Result<Vec<T>, MetricsError> {
    check(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).collect())
}

fn mean<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, b| a + *b) / T::from_usize(v.len()).unwrap()
}

pub fn mpjpe<T: Real>(pred: &[Vector3<T>], gt: &[Vector3<T>]) -> Result<T, MetricsError> {
    Ok(mean(&per_joint_errors(pred, gt)?))
}

/// Prediction aligned onto the ground truth by Procrustes.
pub fn align<T: Real>(
    pred: &[Vector3<T>],
    gt: &[Vector3<T>],
    mode: AlignMode,
) -> Result<Vec<Vector3<T>>, MetricsError> {
    check(pred, gt)?;
    Ok(procrustes_align(pred, gt, mode)?.aligned)
}

/// MPJPE after similarity alignment.
pub fn pa_mpjpe<T: Real>(pred: &[Vector3<T>], gt: &[Vector3<T>]) -> Result<T, MetricsError> {
    mpjpe(&align(pred, gt, AlignMode::Similarity)?, gt)
}

fn pck_of<T: Real>(errors: &[T], threshold: T) -> T {
    let hits = errors.iter().filter(|e| **e < threshold).count();
    T::lit(100.0) * T::from_usize(hits).unwrap() / T::from_usize(errors.len()).unwrap()
}

fn check_grid<T: Real>(grid: &[T]) -> Result<(), MetricsError> {
    if grid.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(MetricsError::UnsortedGrid);
    }
    Ok(())
}

fn auc_of<T: Real>(errors: &[T], grid: &[T]) -> T {
    mean(&grid.iter().map(|t| pck_of(errors, *t)).collect::<Vec<_>>())
}

/// Percentage of joints with error strictly below `threshold_mm`.
pub fn pck<T: Real>(
    pred: &[Vector3<T>],
    gt: &[Vector3<T>],
    threshold_mm: T,
) -> Result<T, MetricsError> {
    Ok(pck_of(&per_joint_errors(pred, gt)?, threshold_mm))
}

/// Mean PCK over an ascending threshold grid.
pub fn auc<T: Real>(
    pred: &[Vector3<T>],
    gt: &[Vector3<T>],
    grid_mm: &[T],
) -> Result<T, MetricsError> {
    check_grid(grid_mm)?;
    Ok(auc_of(&per_joint_errors(pred, gt)?, grid_mm))
}

/// Copy of `points` with `points[root]` subtracted.
pub fn root_relative<T: Real>(
    points: &[Vector3<T>],
    root: usize,
) -> Result<Vec<Vector3<T>>, MetricsError> {
    let r = *points.get(root).ok_or(MetricsError::Root {
        root,
        joints: points.len(),
    })?;
    Ok(points.iter().map(|p| p - r).collect())
}

/// All metrics for one prediction, per `cfg`.
pub fn evaluate<T: Real>(
    pred: &[Vector3<T>],
    gt: &[Vector3<T>],
    cfg: &EvalConfig,
) -> Result<PoseError, MetricsError> {
    check(pred, gt)?;
    let grid: Vec<T> = cfg.auc_thresholds_mm.iter().map(|t| T::lit(*t)).collect();
    check_grid(&grid)?;
    let threshold = T::lit(cfg.pck_threshold_mm);
    let (p, g) = if cfg.root_relative {
        (
            root_relative(pred, cfg.root_joint)?,
            root_relative(gt, cfg.root_joint)?,
        )
    } else {
        (pred.to_vec(), gt.to_vec())
    };
    let errors = per_joint_errors(&p, &g)?;
    let (pa_p, pa_g) = if cfg.aligned_root_relative {
        (
            root_relative(pred, cfg.root_joint)?,
            root_relative(gt, cfg.root_joint)?,
        )
    } else {
        (pred.to_vec(), gt.to_vec())
    };
    let pa_errors = per_joint_errors(&align(&pa_p, &pa_g, cfg.align_mode)?, &pa_g)?;
    Ok(PoseError {
        per_joint_mm: errors.iter().map(|e| e.as_f64()).collect(),
        mpjpe: mean(&errors).as_f64(),
        pa_mpjpe: mean(&pa_errors).as_f64(),
        pck: pck_of(&errors, threshold).as_f64(),
        auc: auc_of(&errors, &grid).as_f64(),
        pa_pck: pck_of(&pa_errors, threshold).as_f64(),
        pa_auc: auc_of(&pa_errors, &grid).as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn skeleton() -> Vec<Vector3<f64>> {
        (0..24)
            .map(|i| {
                Vector3::new(
                    (i as f64 * 0.7).sin() * 300.0,
                    i as f64 * 40.0,
                    (i as f64 * 1.3).cos() * 120.0,
                )
            })
            .collect()
    }

    #[test]
    fn three_four_five() {
        let gt = skeleton();
        let pred: Vec<_> = gt
            .iter()
            .map(|g| g + Vector3::new(30.0, 40.0, 0.0))
            .collect();
        assert_eq!(mpjpe(&pred, &gt).unwrap(), 50.0);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn pck_examples() {
        let gt = skeleton();
        assert_eq!(pck(&gt, &gt, 150.0).unwrap(), 100.0);
        let half: Vec<_> = gt
            .iter()
            .enumerate()
            .map(|(i, g)| {
                if i % 2 == 0 {
                    g + Vector3::new(200.0, 0.0, 0.0)
                } else {
                    *g
                }
            })
            .collect();
        assert_eq!(pck(&half, &gt, 150.0).unwrap(), 50.0);
        let boundary: Vec<_> = gt
            .iter()
            .map(|g| g + Vector3::new(0.0, 150.0, 0.0))
            .collect();
        assert_eq!(pck(&boundary, &gt, 150.0).unwrap(), 0.0);
    }

    #[test]
    fn auc_examples() {
        let gt = skeleton();
        let grid = default_auc_grid();
        assert_eq!(auc(&gt, &gt, &grid).unwrap(), 100.0);
        let off: Vec<_> = gt
            .iter()
            .map(|g| g + Vector3::new(0.0, 0.0, 76.0))
            .collect();
        assert_eq!(auc(&off, &gt, &grid).unwrap(), 50.0);
        assert_eq!(auc(&gt, &gt, &[] as &[f64]), Err(MetricsError::EmptyGrid));
        assert_eq!(auc(&gt, &gt, &[10.0, 5.0]), Err(MetricsError::UnsortedGrid));
    }

    #[test]
    fn pa_removes_similarity() {
        let gt = skeleton();
        let r =
            crate::geometry::axis_angle_to_matrix(&crate::geometry::AxisAngle::new(0.3, -1.1, 0.4));
        let pred: Vec<_> = gt
            .iter()
            .map(|g| r * g * 1.3 + Vector3::new(10.0, -500.0, 3000.0))
            .collect();
        assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-9);
        let mut bumped = gt.clone();
        bumped[7].x += 25.0;
        assert!(pa_mpjpe(&bumped, &gt).unwrap() > 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let gt = skeleton();
        assert_eq!(
            mpjpe(&gt[..3], &gt),
            Err(MetricsError::Shape { pred: 3, gt: 24 })
        );
        assert_eq!(pck::<f64>(&[], &[], 150.0), Err(MetricsError::Empty));
    }

    #[test]
    fn evaluate_root_relative_flag() {
        let gt = skeleton();
        let shifted: Vec<_> = gt
            .iter()
            .map(|g| g + Vector3::new(100.0, 0.0, 0.0))
            .collect();
        let rel = evaluate(&shifted, &gt, &EvalConfig::default()).unwrap();
        assert!(rel.mpjpe < 1e-9 && rel.pck == 100.0);
        let abs = evaluate(
            &shifted,
            &gt,
            &EvalConfig {
                root_relative: false,
                ..EvalConfig::default()
            },
        )
        .unwrap();
        assert!((abs.mpjpe - 100.0).abs() < 1e-9);
        assert!(abs.pa_mpjpe < 1e-9);
    }
}
