//! Parametric skinned body: shape blendshapes, forward kinematics over a
//! joint tree, linear blend skinning and linear keypoint regression.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{axis_angle_to_matrix, skew, AxisAngle};
use crate::scalar::Real;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

type Points<T> = Vec<Vector3<T>>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("field `{field}` has {found} entries, expected {expected}")]
    Shape {
        field: String,
        expected: usize,
        found: usize,
    },
    #[error("skinning weights of vertex {vertex} sum to {sum}, expected 1")]
    SkinWeightSum { vertex: usize, sum: f64 },
    #[error("skinning weight of vertex {vertex} on joint {joint} is negative ({weight})")]
    NegativeSkinWeight {
        vertex: usize,
        joint: usize,
        weight: f64,
    },
    #[error("kinematic tree: {0}")]
    Tree(String),
    #[error("{regressor} regressor row {row} sums to {sum}, expected 1")]
    RegressorRow {
        regressor: &'static str,
        row: usize,
        sum: f64,
    },
    #[error("parameters have {found} {what}, model expects {expected}")]
    ParamShape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

/// World transform of one joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTransform<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> JointTransform<T> {
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }
}

/// Shape coefficients plus global and per-joint body rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyParams<T: Real> {
    pub betas: Vec<T>,
    pub global_orient: AxisAngle<T>,
    pub body_pose: Vec<AxisAngle<T>>,
}

impl<T: Real> BodyParams<T> {
    /// Rest pose, mean shape.
    pub fn zeros(model: &BodyModel<T>) -> Self {
        Self {
            betas: vec![T::zero(); model.n_betas()],
            global_orient: AxisAngle::zero(),
            body_pose: vec![AxisAngle::zero(); model.n_joints() - 1],
        }
    }

    /// Local rotation of every joint, root first.
    pub fn local_rotations(&self) -> Vec<Matrix3<T>> {
        std::iter::once(&self.global_orient)
            .chain(&self.body_pose)
            .map(axis_angle_to_matrix)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.betas.iter().all(|b| b.is_finite())
            && std::iter::once(&self.global_orient)
                .chain(&self.body_pose)
                .all(|a| a.0.iter().all(|x| x.is_finite()))
    }
}

/// On-disk body model document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BodyModelFile {
    pub schema_version: u32,
    pub n_vertices: usize,
    pub n_joints: usize,
    pub n_keypoints: usize,
    /// `n_vertices x 3`, meters.
    pub template: Vec<[f64; 3]>,
    /// `n_vertices x 3 x n_betas`, meters per unit coefficient.
    pub shape_dirs: Vec<[Vec<f64>; 3]>,
    /// `n_vertices x n_joints`.
    pub skin_weights: Vec<Vec<f64>>,
    /// Parent joint per joint; `-1` (or the joint itself) marks the root.
    pub parents: Vec<i64>,
    /// `n_joints x n_vertices`.
    pub joint_regressor: Vec<Vec<f64>>,
    /// `n_keypoints x n_vertices`.
    pub keypoint_regressor: Vec<Vec<f64>>,
    /// Pose-corrective blendshapes, `n_vertices x 3 x P`. Validated, not applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_dirs: Option<Vec<[Vec<f64>; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_names: Option<Vec<String>>,
}

/// Immutable body model. Construct through [`BodyModel::from_file`] or
/// [`load_model`]; every invariant is checked there.
#[derive(Debug, Clone)]
pub struct BodyModel<T: Real> {
    template: Vec<Vector3<T>>,
    /// `[beta][vertex]`
    shape_dirs: Vec<Vec<Vector3<T>>>,
    /// Non-zero `(joint, weight)` pairs per vertex.
    skin_weights: Vec<Vec<(usize, T)>>,
    parents: Vec<Option<usize>>,
    /// Parents always precede children.
    order: Vec<usize>,
    joint_regressor: DMatrix<T>,
    keypoint_regressor: DMatrix<T>,
    n_pose_dirs: usize,
    joint_names: Option<Vec<String>>,
    rig: KeypointRig<T>,
}

fn shape_err(field: impl Into<String>, expected: usize, found: usize) -> ModelError {
    ModelError::Shape {
        field: field.into(),
        expected,
        found,
    }
}

fn check_len<X>(field: &str, v: &[X], expected: usize) -> Result<(), ModelError> {
    if v.len() != expected {
        return Err(shape_err(field, expected, v.len()));
    }
    Ok(())
}

fn regressor_matrix<T: Real>(
    name: &'static str,
    rows: &[Vec<f64>],
    n_rows: usize,
    n_vertices: usize,
) -> Result<DMatrix<T>, ModelError> {
    check_len(name, rows, n_rows)?;
    let mut m = DMatrix::zeros(n_rows, n_vertices);
    for (r, row) in rows.iter().enumerate() {
        check_len(&format!("{name}[{r}]"), row, n_vertices)?;
        let sum: f64 = row.iter().sum();
        if !((sum - 1.0).abs() <= 1e-6) {
            return Err(ModelError::RegressorRow {
                regressor: name,
                row: r,
                sum,
            });
        }
        for (c, &v) in row.iter().enumerate() {
            m[(r, c)] = T::lit(v);
        }
    }
    Ok(m)
}

fn kinematic_order(parents: &[i64]) -> Result<(Vec<Option<usize>>, Vec<usize>), ModelError> {
    let n = parents.len();
    if n == 0 {
        return Err(ModelError::Tree("model has no joints".into()));
    }
    let mut out = Vec::with_capacity(n);
    for (j, &p) in parents.iter().enumerate() {
        let parent = if p < 0 || p as usize == j {
            None
        } else if (p as usize) < n {
            Some(p as usize)
        } else {
            return Err(ModelError::Tree(format!(
                "joint {j} has out-of-range parent {p}"
            )));
        };
        out.push(parent);
    }
    if out[0].is_some() {
        return Err(ModelError::Tree("joint 0 must be the root".into()));
    }
    if let Some(j) = (1..n).find(|&j| out[j].is_none()) {
        return Err(ModelError::Tree(format!("joint {j} is a second root")));
    }
    let mut children = vec![Vec::new(); n];
    for (j, p) in out.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(j);
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![0];
    while let Some(j) = stack.pop() {
        order.push(j);
        stack.extend(children[j].iter().rev());
    }
    if order.len() != n {
        return Err(ModelError::Tree("parent indices contain a cycle".into()));
    }
    Ok((out, order))
}

impl<T: Real> BodyModel<T> {
    pub fn from_file(f: &BodyModelFile) -> Result<Self, ModelError> {
        let nv = f.n_vertices;
        let nj = f.n_joints;
        check_len("template", &f.template, nv)?;
        check_len("shape_dirs", &f.shape_dirs, nv)?;
        check_len("skin_weights", &f.skin_weights, nv)?;
        check_len("parents", &f.parents, nj)?;
        let n_betas = f.shape_dirs.first().map_or(0, |d| d[0].len());

        let template = f
            .template
            .iter()
            .map(|p| Vector3::new(T::lit(p[0]), T::lit(p[1]), T::lit(p[2])))
            .collect();

        let mut shape_dirs = vec![Vec::with_capacity(nv); n_betas];
        for (v, dirs) in f.shape_dirs.iter().enumerate() {
            for (axis, d) in dirs.iter().enumerate() {
                check_len(&format!("shape_dirs[{v}][{axis}]"), d, n_betas)?;
            }
            for (b, sd) in shape_dirs.iter_mut().enumerate() {
                sd.push(Vector3::new(
                    T::lit(dirs[0][b]),
                    T::lit(dirs[1][b]),
                    T::lit(dirs[2][b]),
                ));
            }
        }

        let mut skin_weights = Vec::with_capacity(nv);
        for (v, row) in f.skin_weights.iter().enumerate() {
            check_len(&format!("skin_weights[{v}]"), row, nj)?;
            if let Some((joint, &weight)) = row.iter().enumerate().find(|(_, w)| !(**w >= 0.0)) {
                return Err(ModelError::NegativeSkinWeight {
                    vertex: v,
                    joint,
                    weight,
                });
            }
            let sum: f64 = row.iter().sum();
            if !((sum - 1.0).abs() <= 1e-9) {
                return Err(ModelError::SkinWeightSum { vertex: v, sum });
            }
            skin_weights.push(
                row.iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(j, w)| (j, T::lit(*w)))
                    .collect(),
            );
        }

        let (parents, order) = kinematic_order(&f.parents)?;
        let joint_regressor = regressor_matrix("joint", &f.joint_regressor, nj, nv)?;
        let keypoint_regressor =
            regressor_matrix("keypoint", &f.keypoint_regressor, f.n_keypoints, nv)?;

        let mut n_pose_dirs = 0;
        if let Some(pd) = &f.pose_dirs {
            check_len("pose_dirs", pd, nv)?;
            n_pose_dirs = pd.first().map_or(0, |d| d[0].len());
            for (v, dirs) in pd.iter().enumerate() {
                for (axis, d) in dirs.iter().enumerate() {
                    check_len(&format!("pose_dirs[{v}][{axis}]"), d, n_pose_dirs)?;
                }
            }
        }
        if let Some(names) = &f.joint_names {
            check_len("joint_names", names, nj)?;
        }

        let mut model = Self {
            template,
            shape_dirs,
            skin_weights,
            parents,
            order,
            joint_regressor,
            keypoint_regressor,
            n_pose_dirs,
            joint_names: f.joint_names.clone(),
            rig: KeypointRig::empty(),
        };
        model.rig = KeypointRig::build(&model);
        Ok(model)
    }

    pub fn n_vertices(&self) -> usize {
        self.template.len()
    }
    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }
    pub fn n_keypoints(&self) -> usize {
        self.keypoint_regressor.nrows()
    }
    pub fn n_betas(&self) -> usize {
        self.shape_dirs.len()
    }
    /// Number of pose-corrective blendshapes present in the source file.
    /// They are not applied.
    pub fn n_pose_dirs(&self) -> usize {
        self.n_pose_dirs
    }
    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }
    pub fn kinematic_order(&self) -> &[usize] {
        &self.order
    }
    pub fn joint_names(&self) -> Option<&[String]> {
        self.joint_names.as_deref()
    }
    pub fn template(&self) -> &[Vector3<T>] {
        &self.template
    }
    pub fn skin_weights(&self, vertex: usize) -> &[(usize, T)] {
        &self.skin_weights[vertex]
    }
    pub fn keypoint_regressor(&self) -> &DMatrix<T> {
        &self.keypoint_regressor
    }
    pub fn rig(&self) -> &KeypointRig<T> {
        &self.rig
    }

    pub fn check_params(&self, params: &BodyParams<T>) -> Result<(), ModelError> {
        if params.betas.len() != self.n_betas() {
            return Err(ModelError::ParamShape {
                what: "shape coefficients",
                expected: self.n_betas(),
                found: params.betas.len(),
            });
        }
        if params.body_pose.len() + 1 != self.n_joints() {
            return Err(ModelError::ParamShape {
                what: "body joint rotations",
                expected: self.n_joints() - 1,
                found: params.body_pose.len(),
            });
        }
        Ok(())
    }

    fn shaped_vertices(&self, betas: &[T]) -> Vec<Vector3<T>> {
        let mut verts = self.template.clone();
        for (dirs, &b) in self.shape_dirs.iter().zip(betas) {
            if b == T::zero() {
                continue;
            }
            for (v, d) in verts.iter_mut().zip(dirs) {
                *v += d * b;
            }
        }
        verts
    }

    fn regress(m: &DMatrix<T>, verts: &[Vector3<T>]) -> Vec<Vector3<T>> {
        (0..m.nrows())
            .map(|r| {
                m.row(r)
                    .iter()
                    .zip(verts)
                    .filter(|(w, _)| **w != T::zero())
                    .fold(Vector3::zeros(), |acc, (w, v)| acc + v * *w)
            })
            .collect()
    }

    /// Rest vertices `T + S b` and rest joints regressed from them.
    pub fn shaped_rest(&self, betas: &[T]) -> Result<(Points<T>, Points<T>), ModelError> {
        if betas.len() != self.n_betas() {
            return Err(ModelError::ParamShape {
                what: "shape coefficients",
                expected: self.n_betas(),
                found: betas.len(),
            });
        }
        let verts = self.shaped_vertices(betas);
        let joints = Self::regress(&self.joint_regressor, &verts);
        Ok((verts, joints))
    }

    fn chain(&self, rest_joints: &[Vector3<T>], local: &[Matrix3<T>]) -> Vec<JointTransform<T>> {
        let mut world = vec![
            JointTransform {
                rotation: Matrix3::identity(),
                translation: Vector3::zeros()
            };
            self.n_joints()
        ];
        // displacement of each joint from its rest position
        let mut disp = vec![Vector3::zeros(); self.n_joints()];
        let id = Matrix3::identity();
        for &j in &self.order {
            world[j].rotation = match self.parents[j] {
                None => local[j],
                Some(p) => {
                    disp[j] =
                        disp[p] + (world[p].rotation - id) * (rest_joints[j] - rest_joints[p]);
                    world[p].rotation * local[j]
                }
            };
            world[j].translation = rest_joints[j] + disp[j];
        }
        world
    }

    /// World transform of every joint. The translation is the posed joint
    /// position; the root stays at its rest position.
    pub fn forward_kinematics(
        &self,
        params: &BodyParams<T>,
    ) -> Result<Vec<JointTransform<T>>, ModelError> {
        self.check_params(params)?;
        let (_, rest_joints) = self.shaped_rest(&params.betas)?;
        Ok(self.chain(&rest_joints, &params.local_rotations()))
    }

    /// Linear blend skinning of the shaped rest mesh.
    pub fn skin(&self, params: &BodyParams<T>) -> Result<Vec<Vector3<T>>, ModelError> {
        self.check_params(params)?;
        let (verts, rest_joints) = self.shaped_rest(&params.betas)?;
        let world = self.chain(&rest_joints, &params.local_rotations());
        // sum_j w_j A_j v written as v + sum_j w_j (A_j v - v), with
        // A_j = world_j composed with the inverse rest transform; the rest
        // pose then reproduces the shaped vertices bit for bit.
        let id = Matrix3::identity();
        Ok(verts
            .iter()
            .zip(&self.skin_weights)
            .map(|(v, weights)| {
                v + weights.iter().fold(Vector3::zeros(), |acc, (j, w)| {
                    let (rot, pos, rest) = (
                        &world[*j].rotation,
                        &world[*j].translation,
                        &rest_joints[*j],
                    );
                    acc + ((rot - id) * (v - rest) + (pos - rest)) * *w
                })
            })
            .collect())
    }

    pub fn regress_keypoints(
        &self,
        vertices: &[Vector3<T>],
    ) -> Result<Vec<Vector3<T>>, ModelError> {
        check_len("vertices", vertices, self.n_vertices())?;
        Ok(Self::regress(&self.keypoint_regressor, vertices))
    }

    /// `W * M(beta, theta)`: skin the mesh, then regress keypoints.
    pub fn keypoints_of(&self, params: &BodyParams<T>) -> Result<Vec<Vector3<T>>, ModelError> {
        self.regress_keypoints(&self.skin(params)?)
    }
}

pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<BodyModel<T>, ModelError> {
    let text = std::fs::read_to_string(path)?;
    parse_model(&text)
}

pub fn parse_model<T: Real>(text: &str) -> Result<BodyModel<T>, ModelError> {
    let file: BodyModelFile = serde_json::from_str(text)?;
    BodyModel::from_file(&file)
}

/// Keypoint map folded through the skinning weights.
///
/// Regressing skinned vertices is linear in the per-joint skinning
/// transforms, so each keypoint is
/// `sum_j Rw_j (m_kj - c_kj J_j) + c_kj p_j` with
/// `c_kj = sum_v W_kv w_vj` and `m_kj = sum_v W_kv w_vj v_v`. Both are
/// precomputed (and `m` is linear in the shape coefficients), which makes
/// keypoints and their derivatives independent of the vertex count.
#[derive(Debug, Clone)]
pub struct KeypointRig<T: Real> {
    n_keypoints: usize,
    n_joints: usize,
    n_betas: usize,
    parents: Vec<Option<usize>>,
    order: Vec<usize>,
    /// `[k * n_joints + j]`
    mass: Vec<T>,
    moment: Vec<Vector3<T>>,
    /// `[(k * n_joints + j) * n_betas + b]`
    moment_dirs: Vec<Vector3<T>>,
    rest_joints: Vec<Vector3<T>>,
    /// `[j * n_betas + b]`
    joint_dirs: Vec<Vector3<T>>,
}

impl<T: Real> KeypointRig<T> {
    fn empty() -> Self {
        Self {
            n_keypoints: 0,
            n_joints: 0,
            n_betas: 0,
            parents: Vec::new(),
            order: Vec::new(),
            mass: Vec::new(),
            moment: Vec::new(),
            moment_dirs: Vec::new(),
            rest_joints: Vec::new(),
            joint_dirs: Vec::new(),
        }
    }

    fn build(model: &BodyModel<T>) -> Self {
        let (nk, nj, nb) = (model.n_keypoints(), model.n_joints(), model.n_betas());
        let mut mass = vec![T::zero(); nk * nj];
        let mut moment = vec![Vector3::zeros(); nk * nj];
        let mut moment_dirs = vec![Vector3::zeros(); nk * nj * nb];
        for k in 0..nk {
            for v in 0..model.n_vertices() {
                let wk = model.keypoint_regressor[(k, v)];
                if wk == T::zero() {
                    continue;
                }
                for &(j, wj) in &model.skin_weights[v] {
                    let w = wk * wj;
                    let idx = k * nj + j;
                    mass[idx] += w;
                    moment[idx] += model.template[v] * w;
                    for b in 0..nb {
                        moment_dirs[idx * nb + b] += model.shape_dirs[b][v] * w;
                    }
                }
            }
        }
        let rest_joints = BodyModel::regress(&model.joint_regressor, &model.template);
        let mut joint_dirs = vec![Vector3::zeros(); nj * nb];
        for b in 0..nb {
            for (j, d) in BodyModel::regress(&model.joint_regressor, &model.shape_dirs[b])
                .into_iter()
                .enumerate()
            {
                joint_dirs[j * nb + b] = d;
            }
        }
        Self {
            n_keypoints: nk,
            n_joints: nj,
            n_betas: nb,
            parents: model.parents.clone(),
            order: model.order.clone(),
            mass,
            moment,
            moment_dirs,
            rest_joints,
            joint_dirs,
        }
    }

    pub fn n_keypoints(&self) -> usize {
        self.n_keypoints
    }
    pub fn n_joints(&self) -> usize {
        self.n_joints
    }
    pub fn n_betas(&self) -> usize {
        self.n_betas
    }
    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    /// Keypoints and derivative terms for shape `betas` and per-joint local
    /// rotations (root first).
    pub fn evaluate(&self, betas: &[T], local: &[Matrix3<T>]) -> RigState<T> {
        let (nk, nj, nb) = (self.n_keypoints, self.n_joints, self.n_betas);
        assert_eq!(betas.len(), nb, "shape coefficient count");
        assert_eq!(local.len(), nj, "joint rotation count");

        let mut joints = self.rest_joints.clone();
        for (j, joint) in joints.iter_mut().enumerate() {
            for (b, &beta) in betas.iter().enumerate() {
                *joint += self.joint_dirs[j * nb + b] * beta;
            }
        }

        let mut rot = vec![Matrix3::identity(); nj];
        let mut pos = vec![Vector3::zeros(); nj];
        for &j in &self.order {
            match self.parents[j] {
                None => {
                    rot[j] = local[j];
                    pos[j] = joints[j];
                }
                Some(p) => {
                    rot[j] = rot[p] * local[j];
                    pos[j] = pos[p] + rot[p] * (joints[j] - joints[p]);
                }
            }
        }

        // u_kj: contribution of joint j to keypoint k
        let mut contrib = vec![Vector3::zeros(); nk * nj];
        let mut keypoints = vec![Vector3::zeros(); nk];
        for k in 0..nk {
            for j in 0..nj {
                let idx = k * nj + j;
                let c = self.mass[idx];
                if c == T::zero() {
                    continue;
                }
                let mut m = self.moment[idx];
                for (b, &beta) in betas.iter().enumerate() {
                    m += self.moment_dirs[idx * nb + b] * beta;
                }
                let u = rot[j] * (m - joints[j] * c) + pos[j] * c;
                contrib[idx] = u;
                keypoints[k] += u;
            }
        }

        // subtree sums: lever[k, q] = sum_{j in sub(q)} (u_kj - c_kj p_q)
        let mut sub_u = contrib.clone();
        let mut sub_c = self.mass.clone();
        for &q in self.order.iter().rev() {
            if let Some(p) = self.parents[q] {
                for k in 0..nk {
                    let (a, b) = (k * nj + q, k * nj + p);
                    let u = sub_u[a];
                    let c = sub_c[a];
                    sub_u[b] += u;
                    sub_c[b] += c;
                }
            }
        }
        let lever = (0..nk * nj)
            .map(|idx| sub_u[idx] - pos[idx % nj] * sub_c[idx])
            .collect();

        // shape derivatives
        let mut d_pos = vec![Vector3::zeros(); nj * nb];
        for &j in &self.order {
            for b in 0..nb {
                d_pos[j * nb + b] = match self.parents[j] {
                    None => self.joint_dirs[j * nb + b],
                    Some(p) => {
                        d_pos[p * nb + b]
                            + rot[p] * (self.joint_dirs[j * nb + b] - self.joint_dirs[p * nb + b])
                    }
                };
            }
        }
        let mut d_beta = vec![Vector3::zeros(); nk * nb];
        for k in 0..nk {
            for j in 0..nj {
                let idx = k * nj + j;
                let c = self.mass[idx];
                if c == T::zero() {
                    continue;
                }
                for b in 0..nb {
                    let dm = self.moment_dirs[idx * nb + b];
                    d_beta[k * nb + b] +=
                        rot[j] * (dm - self.joint_dirs[j * nb + b] * c) + d_pos[j * nb + b] * c;
                }
            }
        }

        RigState {
            n_joints: nj,
            n_betas: nb,
            keypoints,
            world_rotations: rot,
            joint_positions: pos,
            lever,
            d_beta,
        }
    }
}

/// Output of [`KeypointRig::evaluate`].
#[derive(Debug, Clone)]
pub struct RigState<T: Real> {
    n_joints: usize,
    n_betas: usize,
    pub keypoints: Vec<Vector3<T>>,
    pub world_rotations: Vec<Matrix3<T>>,
    pub joint_positions: Vec<Vector3<T>>,
    lever: Vec<Vector3<T>>,
    d_beta: Vec<Vector3<T>>,
}

impl<T: Real> RigState<T> {
    /// Derivative of keypoint `k` with respect to a world-frame angular
    /// increment applied at joint `q` (moving its whole subtree).
    pub fn d_keypoint_d_world_omega(&self, k: usize, q: usize) -> Matrix3<T> {
        -skew(&self.lever[k * self.n_joints + q])
    }

    pub fn d_keypoint_d_beta(&self, k: usize, b: usize) -> Vector3<T> {
        self.d_beta[k * self.n_betas + b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_left_jacobian;
    use crate::toy::{toy_model, toy_model_file, TOY_REST_JOINTS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(model: &BodyModel<f64>, rng: &mut ChaCha8Rng, scale: f64) -> BodyParams<f64> {
        let mut aa = || {
            AxisAngle::new(
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
            )
        };
        let global_orient = aa();
        let body_pose = (1..model.n_joints()).map(|_| aa()).collect();
        let betas = (0..model.n_betas())
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        BodyParams {
            betas,
            global_orient,
            body_pose,
        }
    }

    #[test]
    fn toy_dimensions() {
        let m = toy_model();
        assert_eq!(
            (m.n_vertices(), m.n_joints(), m.n_keypoints(), m.n_betas()),
            (120, 24, 24, 10)
        );
    }

    #[test]
    fn rejects_bad_skin_row() {
        let mut f = toy_model_file();
        f.skin_weights[7].iter_mut().for_each(|w| *w *= 0.9);
        assert!(matches!(
            BodyModel::<f64>::from_file(&f),
            Err(ModelError::SkinWeightSum { vertex: 7, .. })
        ));
    }

    #[test]
    fn rejects_negative_weight() {
        let mut f = toy_model_file();
        f.skin_weights[3][0] += 0.25;
        f.skin_weights[3][5] = -0.25;
        let r = BodyModel::<f64>::from_file(&f);
        assert!(
            matches!(
                r,
                Err(ModelError::NegativeSkinWeight {
                    vertex: 3,
                    joint: 5,
                    ..
                })
            ),
            "{r:?}"
        );
    }

    #[test]
    fn rejects_parent_cycle_and_second_root() {
        let mut f = toy_model_file();
        f.parents[1] = 4; // 4's parent is 1
        assert!(matches!(
            BodyModel::<f64>::from_file(&f),
            Err(ModelError::Tree(_))
        ));
        let mut f = toy_model_file();
        f.parents[5] = -1;
        assert!(matches!(
            BodyModel::<f64>::from_file(&f),
            Err(ModelError::Tree(_))
        ));
    }

    #[test]
    fn rejects_header_mismatch_and_bad_regressor() {
        let mut f = toy_model_file();
        f.n_vertices = 121;
        assert!(matches!(
            BodyModel::<f64>::from_file(&f),
            Err(ModelError::Shape { .. })
        ));
        let mut f = toy_model_file();
        f.keypoint_regressor[2][0] += 0.01;
        assert!(matches!(
            BodyModel::<f64>::from_file(&f),
            Err(ModelError::RegressorRow { row: 2, .. })
        ));
    }

    #[test]
    fn pose_dirs_are_validated_but_optional() {
        let mut f = toy_model_file();
        f.pose_dirs = Some(vec![[vec![0.0; 207], vec![0.0; 207], vec![0.0; 207]]; 120]);
        assert_eq!(BodyModel::<f64>::from_file(&f).unwrap().n_pose_dirs(), 207);
        f.pose_dirs.as_mut().unwrap()[4][1].pop();
        assert!(BodyModel::<f64>::from_file(&f).is_err());
    }

    #[test]
    fn shaped_rest_examples() {
        let m = toy_model();
        let zero = vec![0.0; 10];
        let (v, j) = m.shaped_rest(&zero).unwrap();
        assert_eq!(v, m.template());
        for (a, b) in j.iter().zip(TOY_REST_JOINTS.iter()) {
            assert!((a - Vector3::from(*b)).norm() < 1e-12);
        }
        let mut e1 = zero.clone();
        e1[0] = 1.0;
        let (v1, _) = m.shaped_rest(&e1).unwrap();
        for (i, p) in v1.iter().enumerate() {
            assert_eq!(*p, m.template()[i] + m.shape_dirs[0][i]);
        }
    }

    #[test]
    fn shape_is_linear() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b1: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b2: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sum: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| a + b).collect();
        let (v1, _) = m.shaped_rest(&b1).unwrap();
        let (v2, _) = m.shaped_rest(&b2).unwrap();
        let (vs, _) = m.shaped_rest(&sum).unwrap();
        for i in 0..m.n_vertices() {
            let t = m.template()[i];
            assert!(((vs[i] - t) - ((v1[i] - t) + (v2[i] - t))).norm() < 1e-12);
        }
    }

    #[test]
    fn fk_rest_pose() {
        let m = toy_model();
        let p = BodyParams::zeros(&m);
        let (_, rest) = m.shaped_rest(&p.betas).unwrap();
        for (w, r) in m.forward_kinematics(&p).unwrap().iter().zip(&rest) {
            assert_eq!(w.rotation, Matrix3::identity());
            assert!((w.translation - r).norm() < 1e-15);
        }
    }

    #[test]
    fn fk_global_rotation_is_rigid_about_root() {
        let m = toy_model();
        let mut p = BodyParams::zeros(&m);
        p.global_orient = AxisAngle::new(0.3, -1.1, 0.4);
        let r = axis_angle_to_matrix(&p.global_orient);
        let (_, rest) = m.shaped_rest(&p.betas).unwrap();
        for (w, j) in m.forward_kinematics(&p).unwrap().iter().zip(&rest) {
            let expected = r * (j - rest[0]) + rest[0];
            assert!((w.translation - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn fk_bent_elbow_matches_two_link_kinematics() {
        // left elbow (18) bent 90 degrees about +z: forearm turns from +x to +y
        let m = toy_model();
        let mut p = BodyParams::zeros(&m);
        p.body_pose[17] = AxisAngle::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let fk = m.forward_kinematics(&p).unwrap();
        let elbow = Vector3::from(TOY_REST_JOINTS[18]);
        let wrist = Vector3::from(TOY_REST_JOINTS[20]);
        let hand = Vector3::from(TOY_REST_JOINTS[22]);
        // rotating (dx, dy, dz) by +90 deg about z gives (-dy, dx, dz)
        let turn = |d: Vector3<f64>| Vector3::new(-d.y, d.x, d.z);
        assert!((fk[18].translation - elbow).norm() < 1e-12);
        assert!((fk[20].translation - (elbow + turn(wrist - elbow))).norm() < 1e-12);
        assert!((fk[22].translation - (elbow + turn(hand - elbow))).norm() < 1e-12);
        assert!((fk[16].translation - Vector3::from(TOY_REST_JOINTS[16])).norm() < 1e-15);
    }

    #[test]
    fn skin_examples() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_params(&m, &mut rng, 0.4);
        p.global_orient = AxisAngle::zero();
        p.body_pose.iter_mut().for_each(|a| *a = AxisAngle::zero());
        let (rest, rest_joints) = m.shaped_rest(&p.betas).unwrap();
        assert_eq!(m.skin(&p).unwrap(), rest);

        p.global_orient = AxisAngle::new(0.7, 0.2, -0.5);
        let r = axis_angle_to_matrix(&p.global_orient);
        for (s, v) in m.skin(&p).unwrap().iter().zip(&rest) {
            assert!((s - (r * (v - rest_joints[0]) + rest_joints[0])).norm() < 1e-12);
        }

        let p = random_params(&m, &mut rng, 0.5);
        let fk = m.forward_kinematics(&p).unwrap();
        let (rest, rest_joints) = m.shaped_rest(&p.betas).unwrap();
        let skinned = m.skin(&p).unwrap();
        let mut checked = 0;
        for v in 0..m.n_vertices() {
            if let [(j, w)] = m.skin_weights(v) {
                assert_eq!(*w, 1.0);
                let expected = fk[*j].rotation * (rest[v] - rest_joints[*j]) + fk[*j].translation;
                assert!((skinned[v] - expected).norm() < 1e-12);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn regression_examples() {
        let m = toy_model();
        let mut f = toy_model_file();
        for (k, row) in f.keypoint_regressor.iter_mut().enumerate() {
            row.iter_mut().for_each(|w| *w = 0.0);
            row[k * 5] = 1.0;
        }
        let onehot = BodyModel::<f64>::from_file(&f).unwrap();
        let kp = onehot.regress_keypoints(m.template()).unwrap();
        for k in 0..24 {
            assert_eq!(kp[k], m.template()[k * 5]);
        }

        let c = Vector3::new(0.3, -2.0, 5.0);
        let shifted: Vec<_> = m.template().iter().map(|v| v + c).collect();
        let a = m.regress_keypoints(m.template()).unwrap();
        let b = m.regress_keypoints(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - (x + c)).norm() < 1e-12);
        }
        assert!(matches!(
            m.regress_keypoints(&shifted[..10]),
            Err(ModelError::Shape { .. })
        ));

        let rest = m.keypoints_of(&BodyParams::zeros(&m)).unwrap();
        for (a, b) in rest.iter().zip(TOY_REST_JOINTS.iter()) {
            assert!((a - Vector3::from(*b)).norm() < 1e-12);
        }
    }

    #[test]
    fn keypoints_equivariant_under_global_rotation() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let mut p = random_params(&m, &mut rng, 0.5);
            p.global_orient = AxisAngle::zero();
            let base = m.keypoints_of(&p).unwrap();
            let root = m.shaped_rest(&p.betas).unwrap().1[0];
            p.global_orient = AxisAngle::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let r = axis_angle_to_matrix(&p.global_orient);
            for (k, b) in m.keypoints_of(&p).unwrap().iter().zip(&base) {
                assert!((k - (r * (b - root) + root)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_outputs() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&m, &mut rng, 0.6);
        assert_eq!(m.keypoints_of(&p).unwrap(), m.keypoints_of(&p).unwrap());
    }

    #[test]
    fn rig_matches_skinning_path() {
        let m = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p = random_params(&m, &mut rng, 0.8);
            let slow = m.keypoints_of(&p).unwrap();
            let fast = m.rig().evaluate(&p.betas, &p.local_rotations());
            for (a, b) in slow.iter().zip(&fast.keypoints) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn rig_jacobian_matches_finite_differences() {
        let m = toy_model();
        let rig = m.rig();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = 1e-6;
        for _ in 0..5 {
            let p = random_params(&m, &mut rng, 0.6);
            let state = rig.evaluate(&p.betas, &p.local_rotations());
            let eval = |p: &BodyParams<f64>| m.keypoints_of(p).unwrap();
            for b in 0..m.n_betas() {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.betas[b] += h;
                pm.betas[b] -= h;
                let (kp, km) = (eval(&pp), eval(&pm));
                for k in 0..m.n_keypoints() {
                    let fd = (kp[k] - km[k]) / (2.0 * h);
                    assert!((fd - state.d_keypoint_d_beta(k, b)).norm() < 1e-7 * (1.0 + fd.norm()));
                }
            }
            for q in 0..m.n_joints() {
                let aa = if q == 0 {
                    p.global_orient
                } else {
                    p.body_pose[q - 1]
                };
                let parent_rot = rig
                    .parent(q)
                    .map_or(Matrix3::identity(), |pq| state.world_rotations[pq]);
                let d_omega = parent_rot * so3_left_jacobian(&aa.0);
                for c in 0..3 {
                    let (mut pp, mut pm) = (p.clone(), p.clone());
                    let set = |params: &mut BodyParams<f64>, d: f64| {
                        let a = if q == 0 {
                            &mut params.global_orient
                        } else {
                            &mut params.body_pose[q - 1]
                        };
                        a.0[c] += d;
                    };
                    set(&mut pp, h);
                    set(&mut pm, -h);
                    let (kp, km) = (eval(&pp), eval(&pm));
                    for k in 0..m.n_keypoints() {
                        let fd = (kp[k] - km[k]) / (2.0 * h);
                        let an = state.d_keypoint_d_world_omega(k, q) * d_omega.column(c);
                        assert!(
                            (fd - an).norm() < 1e-7 * (1.0 + fd.norm()),
                            "joint {q} comp {c} kp {k}: {fd:?} vs {an:?}"
                        );
                    }
                }
            }
        }
    }
}
