//! Residuals and analytic Jacobian of the body fitting objectives.
//!
//! Rotations are optimized as 6D vectors. Each view contributes
//! `sqrt(alpha * w_k) * (detected_k - projected_k)` per keypoint; anchor
//! terms contribute `sqrt(weight) * log(A^T R)` per rotation and
//! `sqrt(weight) * (beta - target)` for shape.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix3x6, Vector2, Vector3};

use super::lm::{EvalError, LeastSquaresProblem};
use crate::body::KeypointRig;
use crate::geometry::{
    matrix_to_axis_angle_unchecked, matrix_to_rot6d_unchecked, rot6d_to_matrix, rot6d_with_tangent,
    so3_left_jacobian_inv, CameraIntrinsics, Rot6D,
};
use crate::scalar::Real;

pub(crate) const ROT_DIM: usize = 6;

pub(crate) fn write_rotation<T: Real>(x: &mut DVector<T>, offset: usize, r: &Matrix3<T>) {
    x.rows_mut(offset, ROT_DIM)
        .copy_from(&matrix_to_rot6d_unchecked(r).0);
}

pub(crate) fn read_rot6d<T: Real>(x: &DVector<T>, offset: usize) -> Rot6D<T> {
    Rot6D(x.fixed_rows::<6>(offset).into_owned())
}

pub(crate) fn read_rotation<T: Real>(
    x: &DVector<T>,
    offset: usize,
) -> Result<Matrix3<T>, EvalError> {
    rot6d_to_matrix(&read_rot6d(x, offset)).map_err(|e| EvalError::Infeasible(e.to_string()))
}

pub(crate) fn read_vec3<T: Real>(x: &DVector<T>, offset: usize) -> Vector3<T> {
    x.fixed_rows::<3>(offset).into_owned()
}

#[derive(Debug, Clone)]
pub(crate) struct ViewTerm<T: Real> {
    pub intrinsics: CameraIntrinsics<T>,
    pub camera_rotation: Matrix3<T>,
    pub detected: Vec<Vector2<T>>,
    /// `sqrt(alpha * w_k)`
    pub sqrt_weights: Vec<T>,
    pub orient_offset: usize,
    pub trans_offset: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum BodyBlock<T: Real> {
    /// Body rotations (joints 1..) and shape are parameters.
    Free {
        pose_offset: usize,
        betas_offset: usize,
    },
    /// Body held at fixed local rotations (joints 1..) and shape.
    Fixed {
        pose: Vec<Matrix3<T>>,
        betas: Vec<T>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct RotationAnchor<T: Real> {
    pub offset: usize,
    pub target: Matrix3<T>,
    pub sqrt_weight: T,
}

#[derive(Debug, Clone)]
pub(crate) struct ShapeAnchor<T: Real> {
    pub offset: usize,
    pub target: Vec<T>,
    pub sqrt_weight: T,
}

pub(crate) struct BodyProblem<'a, T: Real> {
    pub rig: &'a KeypointRig<T>,
    pub views: Vec<ViewTerm<T>>,
    pub body: BodyBlock<T>,
    pub rotation_anchors: Vec<RotationAnchor<T>>,
    pub shape_anchor: Option<ShapeAnchor<T>>,
    pub n_params: usize,
}

struct Decoded<T: Real> {
    body_rot: Vec<Matrix3<T>>,
    body_tangent: Vec<Matrix3x6<T>>,
    betas: Vec<T>,
}

impl<'a, T: Real> BodyProblem<'a, T> {
    pub fn n_residuals(&self) -> usize {
        let k = self.rig.n_keypoints();
        self.views.len() * 2 * k
            + 3 * self.rotation_anchors.len()
            + self.shape_anchor.as_ref().map_or(0, |s| s.target.len())
    }

    fn rotation_offsets(&self) -> Vec<usize> {
        let mut offs: Vec<usize> = self.views.iter().map(|v| v.orient_offset).collect();
        if let BodyBlock::Free { pose_offset, .. } = self.body {
            offs.extend((0..self.rig.n_joints() - 1).map(|j| pose_offset + ROT_DIM * j));
        }
        offs
    }

    fn decode(&self, x: &DVector<T>, with_tangent: bool) -> Result<Decoded<T>, EvalError> {
        match &self.body {
            BodyBlock::Fixed { pose, betas } => Ok(Decoded {
                body_rot: pose.clone(),
                body_tangent: Vec::new(),
                betas: betas.clone(),
            }),
            BodyBlock::Free {
                pose_offset,
                betas_offset,
            } => {
                let nj = self.rig.n_joints();
                let mut body_rot = Vec::with_capacity(nj - 1);
                let mut body_tangent = Vec::with_capacity(if with_tangent { nj - 1 } else { 0 });
                for j in 0..nj - 1 {
                    let off = pose_offset + ROT_DIM * j;
                    if with_tangent {
                        let (r, e) = rot6d_with_tangent(&read_rot6d(x, off))
                            .map_err(|e| EvalError::Infeasible(e.to_string()))?;
                        body_rot.push(r);
                        body_tangent.push(e);
                    } else {
                        body_rot.push(read_rotation(x, off)?);
                    }
                }
                let betas = x
                    .rows(*betas_offset, self.rig.n_betas())
                    .iter()
                    .copied()
                    .collect();
                Ok(Decoded {
                    body_rot,
                    body_tangent,
                    betas,
                })
            }
        }
    }

    fn anchor_residual(
        &self,
        x: &DVector<T>,
        a: &RotationAnchor<T>,
    ) -> Result<Vector3<T>, EvalError> {
        let r = read_rotation(x, a.offset)?;
        Ok(matrix_to_axis_angle_unchecked(&(a.target.transpose() * r)).0 * a.sqrt_weight)
    }
}

fn projection_derivative<T: Real>(p: &Vector3<T>, f: T) -> Matrix2x3<T> {
    let iz = T::one() / p.z;
    Matrix2x3::new(
        f * iz,
        T::zero(),
        -f * p.x * iz * iz,
        T::zero(),
        f * iz,
        -f * p.y * iz * iz,
    )
}

impl<'a, T: Real> LeastSquaresProblem<T> for BodyProblem<'a, T> {
    fn residuals(&self, x: &DVector<T>) -> Result<DVector<T>, EvalError> {
        let nk = self.rig.n_keypoints();
        let body = self.decode(x, false)?;
        let mut r = DVector::zeros(self.n_residuals());
        let mut row = 0;
        for (vi, view) in self.views.iter().enumerate() {
            let mut local = Vec::with_capacity(self.rig.n_joints());
            local.push(read_rotation(x, view.orient_offset)?);
            local.extend_from_slice(&body.body_rot);
            let state = self.rig.evaluate(&body.betas, &local);
            let t = read_vec3(x, view.trans_offset);
            for k in 0..nk {
                let pc = view.camera_rotation * state.keypoints[k] + t;
                if !(pc.z > T::zero()) {
                    return Err(EvalError::Infeasible(format!(
                        "view {vi} keypoint {k} behind camera"
                    )));
                }
                let s = view.sqrt_weights[k];
                if s != T::zero() {
                    let f = view.intrinsics.focal;
                    let c = view.intrinsics.principal_point;
                    r[row] = s * (view.detected[k].x - (f * pc.x / pc.z + c.x));
                    r[row + 1] = s * (view.detected[k].y - (f * pc.y / pc.z + c.y));
                }
                row += 2;
            }
        }
        for a in &self.rotation_anchors {
            r.fixed_rows_mut::<3>(row)
                .copy_from(&self.anchor_residual(x, a)?);
            row += 3;
        }
        if let Some(s) = &self.shape_anchor {
            for (b, target) in s.target.iter().enumerate() {
                r[row + b] = s.sqrt_weight * (x[s.offset + b] - *target);
            }
        }
        Ok(r)
    }

    fn jacobian(&self, x: &DVector<T>) -> Result<DMatrix<T>, EvalError> {
        let (nk, nj, nb) = (
            self.rig.n_keypoints(),
            self.rig.n_joints(),
            self.rig.n_betas(),
        );
        let body = self.decode(x, true)?;
        let mut jac = DMatrix::zeros(self.n_residuals(), self.n_params);
        let mut row = 0;
        for (vi, view) in self.views.iter().enumerate() {
            let (root_rot, root_tangent) = rot6d_with_tangent(&read_rot6d(x, view.orient_offset))
                .map_err(|e| EvalError::Infeasible(e.to_string()))?;
            let mut local = Vec::with_capacity(nj);
            local.push(root_rot);
            local.extend_from_slice(&body.body_rot);
            let state = self.rig.evaluate(&body.betas, &local);
            let t = read_vec3(x, view.trans_offset);
            // world-frame angular increment per 6D coordinate, per joint
            let omega: Vec<Matrix3x6<T>> = (0..nj)
                .map(|q| {
                    if q == 0 {
                        root_tangent
                    } else if body.body_tangent.is_empty() {
                        Matrix3x6::zeros()
                    } else {
                        let parent = self
                            .rig
                            .parent(q)
                            .map_or(Matrix3::identity(), |p| state.world_rotations[p]);
                        parent * body.body_tangent[q - 1]
                    }
                })
                .collect();
            for k in 0..nk {
                let s = view.sqrt_weights[k];
                let pc = view.camera_rotation * state.keypoints[k] + t;
                if !(pc.z > T::zero()) {
                    return Err(EvalError::Infeasible(format!(
                        "view {vi} keypoint {k} behind camera"
                    )));
                }
                if s == T::zero() {
                    row += 2;
                    continue;
                }
                // d r / d (camera point)
                let dr_dp = projection_derivative(&pc, view.intrinsics.focal) * (-s);
                let dr_dk = dr_dp * view.camera_rotation;
                jac.fixed_view_mut::<2, 3>(row, view.trans_offset)
                    .copy_from(&dr_dp);
                jac.fixed_view_mut::<2, 6>(row, view.orient_offset)
                    .copy_from(&(dr_dk * state.d_keypoint_d_world_omega(k, 0) * omega[0]));
                if let BodyBlock::Free {
                    pose_offset,
                    betas_offset,
                } = self.body
                {
                    for q in 1..nj {
                        let block = dr_dk * state.d_keypoint_d_world_omega(k, q) * omega[q];
                        jac.fixed_view_mut::<2, 6>(row, pose_offset + ROT_DIM * (q - 1))
                            .copy_from(&block);
                    }
                    for b in 0..nb {
                        jac.fixed_view_mut::<2, 1>(row, betas_offset + b)
                            .copy_from(&(dr_dk * state.d_keypoint_d_beta(k, b)));
                    }
                }
                row += 2;
            }
        }
        for a in &self.rotation_anchors {
            let (rot, tangent) = rot6d_with_tangent(&read_rot6d(x, a.offset))
                .map_err(|e| EvalError::Infeasible(e.to_string()))?;
            let phi = matrix_to_axis_angle_unchecked(&(a.target.transpose() * rot)).0;
            let block =
                so3_left_jacobian_inv(&phi) * a.target.transpose() * tangent * a.sqrt_weight;
            jac.fixed_view_mut::<3, 6>(row, a.offset).copy_from(&block);
            row += 3;
        }
        if let Some(s) = &self.shape_anchor {
            for b in 0..s.target.len() {
                jac[(row + b, s.offset + b)] = s.sqrt_weight;
            }
        }
        Ok(jac)
    }

    fn normalize(&self, x: &mut DVector<T>) {
        for off in self.rotation_offsets() {
            if let Ok(r) = rot6d_to_matrix(&read_rot6d(x, off)) {
                write_rotation(x, off, &r);
            }
        }
    }
}
