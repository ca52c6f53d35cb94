//! Desk-scale body model with the 24-joint tree of the SMPL family.
//!
//! 120 vertices: every joint owns a ring of four vertices centred on the
//! joint plus one vertex along its bone. The joint and keypoint regressors
//! average the rings, so rest keypoints equal [`TOY_REST_JOINTS`] and posed
//! keypoints coincide with the forward-kinematics joint positions.
//!
//! Frame: y up, +z is the front of the body, +x is the body's left side.
//! Units are meters. The rest pose is a T-pose.
//!
//! | # | joint | rest position |
//! |---|-------|---------------|
//! | 0 | pelvis | (0, 0, 0) |
//! | 1, 2 | hips | (±0.09, −0.08, 0) |
//! | 3, 6, 9 | spine | (0, 0.10, −0.01), (0, 0.23, 0), (0, 0.29, 0.01) |
//! | 4, 5 | knees | (±0.10, −0.48, 0.01) |
//! | 7, 8 | ankles | (±0.10, −0.88, −0.03) |
//! | 10, 11 | feet | (±0.11, −0.94, 0.10) |
//! | 12 | neck | (0, 0.50, −0.02) |
//! | 13, 14 | collars | (±0.07, 0.41, −0.01) |
//! | 15 | head | (0, 0.63, 0.04) |
//! | 16, 17 | shoulders | (±0.18, 0.43, −0.02) |
//! | 18, 19 | elbows | (±0.44, 0.41, −0.03) |
//! | 20, 21 | wrists | (±0.69, 0.42, −0.02) |
//! | 22, 23 | hands | (±0.77, 0.41, −0.03) |

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::{BodyModel, BodyModelFile, MODEL_SCHEMA_VERSION};

pub const TOY_PARENTS: [i64; 24] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21,
];

pub const TOY_JOINT_NAMES: [&str; 24] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

pub const TOY_REST_JOINTS: [[f64; 3]; 24] = [
    [0.0, 0.0, 0.0],
    [0.09, -0.08, 0.0],
    [-0.09, -0.08, 0.0],
    [0.0, 0.10, -0.01],
    [0.10, -0.48, 0.01],
    [-0.10, -0.48, 0.01],
    [0.0, 0.23, 0.0],
    [0.10, -0.88, -0.03],
    [-0.10, -0.88, -0.03],
    [0.0, 0.29, 0.01],
    [0.11, -0.94, 0.10],
    [-0.11, -0.94, 0.10],
    [0.0, 0.50, -0.02],
    [0.07, 0.41, -0.01],
    [-0.07, 0.41, -0.01],
    [0.0, 0.63, 0.04],
    [0.18, 0.43, -0.02],
    [-0.18, 0.43, -0.02],
    [0.44, 0.41, -0.03],
    [-0.44, 0.41, -0.03],
    [0.69, 0.42, -0.02],
    [-0.69, 0.42, -0.02],
    [0.77, 0.41, -0.03],
    [-0.77, 0.41, -0.03],
];

const VERTS_PER_JOINT: usize = 5;
const N_BETAS: usize = 10;

fn joint(j: usize) -> Vector3<f64> {
    Vector3::from(TOY_REST_JOINTS[j])
}

fn ring_radius(j: usize) -> f64 {
    match j {
        0 | 3 | 6 | 9 => 0.12,
        1 | 2 => 0.08,
        4 | 5 | 12 | 13 | 14 | 16 | 17 => 0.06,
        15 => 0.09,
        _ => 0.04,
    }
}

/// Unit direction of the bone ending at joint `j` (up for the root).
fn bone_direction(j: usize) -> Vector3<f64> {
    match TOY_PARENTS[j] {
        p if p < 0 => Vector3::y(),
        p => (joint(j) - joint(p as usize)).normalize(),
    }
}

fn first_child(j: usize) -> Option<usize> {
    TOY_PARENTS.iter().position(|&p| p == j as i64)
}

/// Template vertices and skinning weights, five per joint.
fn mesh() -> (Vec<Vector3<f64>>, Vec<Vec<f64>>) {
    let mut verts = Vec::with_capacity(24 * VERTS_PER_JOINT);
    let mut weights = Vec::with_capacity(24 * VERTS_PER_JOINT);
    for j in 0..24 {
        let c = joint(j);
        let d = bone_direction(j);
        let helper = if d.x.abs() < 0.8 {
            Vector3::x()
        } else {
            Vector3::z()
        };
        let e1 = d.cross(&helper).normalize();
        let e2 = d.cross(&e1);
        let r = ring_radius(j);
        let mut ring_w = vec![0.0; 24];
        match TOY_PARENTS[j] {
            p if p < 0 => ring_w[j] = 1.0,
            p => {
                ring_w[j] = 0.6;
                ring_w[p as usize] = 0.4;
            }
        }
        for offset in [e1 * r, -e1 * r, e2 * r, -e2 * r] {
            verts.push(c + offset);
            weights.push(ring_w.clone());
        }
        let tip = match first_child(j) {
            Some(ch) => c + (joint(ch) - c) * 0.5 + e2 * (0.5 * r),
            None => c + d * 0.05,
        };
        let mut tip_w = vec![0.0; 24];
        tip_w[j] = 1.0;
        verts.push(tip);
        weights.push(tip_w);
    }
    (verts, weights)
}

fn owner(v: usize) -> usize {
    v / VERTS_PER_JOINT
}

fn is_leg(j: usize) -> bool {
    matches!(j, 1 | 2 | 4 | 5 | 7 | 8 | 10 | 11)
}

fn is_arm(j: usize) -> bool {
    j >= 16 || j == 13 || j == 14
}

/// Shape directions `[vertex][beta]`, meters per unit coefficient.
fn shape_dirs(verts: &[Vector3<f64>]) -> Vec<[Vector3<f64>; N_BETAS]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let jitter: Vec<Vector3<f64>> = (0..24)
        .map(|_| {
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ) * 0.01
        })
        .collect();
    verts
        .iter()
        .enumerate()
        .map(|(v, p)| {
            let j = owner(v);
            let side = p.x.signum();
            let mut d = [Vector3::zeros(); N_BETAS];
            // stature
            d[0] = Vector3::new(0.0, 0.06 * p.y, 0.0);
            // girth
            d[1] = Vector3::new(0.05 * p.x, 0.0, 0.05 * p.z);
            // leg length
            if p.y < -0.08 {
                d[2] = Vector3::new(0.0, 0.05 * (p.y + 0.08), 0.0);
            }
            // arm span
            if p.x.abs() > 0.15 && is_arm(j) {
                d[3] = Vector3::new(0.05 * (p.x - side * 0.15), 0.0, 0.0);
            }
            // torso depth
            if !is_leg(j) && !is_arm(j) {
                d[4] = Vector3::new(0.0, 0.0, 0.04 * p.z + 0.01);
            }
            // shoulder width
            if is_arm(j) {
                d[5] = Vector3::new(0.02 * side, 0.0, 0.0);
            }
            // hip width
            if is_leg(j) {
                d[6] = Vector3::new(0.015 * side, 0.0, 0.0);
            }
            // neck length
            if j == 12 || j == 15 {
                d[7] = Vector3::new(0.0, 0.02, 0.0);
            }
            // soft tissue: rings swell about their joint, joints stay put
            if v % VERTS_PER_JOINT != VERTS_PER_JOINT - 1 {
                d[8] = (p - joint(j)) * 0.15;
            }
            // asymmetric per-segment offsets
            d[9] = jitter[j];
            d
        })
        .collect()
}

/// The toy model as a serializable document.
pub fn toy_model_file() -> BodyModelFile {
    let (verts, weights) = mesh();
    let nv = verts.len();
    let dirs = shape_dirs(&verts);
    let mut joint_regressor = vec![vec![0.0; nv]; 24];
    for (j, row) in joint_regressor.iter_mut().enumerate() {
        for k in 0..4 {
            row[j * VERTS_PER_JOINT + k] = 0.25;
        }
    }
    BodyModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        n_vertices: nv,
        n_joints: 24,
        n_keypoints: 24,
        template: verts.iter().map(|p| [p.x, p.y, p.z]).collect(),
        shape_dirs: dirs
            .iter()
            .map(|d| {
                [
                    d.iter().map(|x| x.x).collect(),
                    d.iter().map(|x| x.y).collect(),
                    d.iter().map(|x| x.z).collect(),
                ]
            })
            .collect(),
        skin_weights: weights,
        parents: TOY_PARENTS.to_vec(),
        keypoint_regressor: joint_regressor.clone(),
        joint_regressor,
        pose_dirs: None,
        joint_names: Some(TOY_JOINT_NAMES.iter().map(|s| s.to_string()).collect()),
    }
}

/// The shipped toy model document, as stored in `assets/toy_body.json`.
pub const TOY_MODEL_JSON: &str = include_str!("../assets/toy_body.json");

pub fn toy_model() -> BodyModel<f64> {
    crate::body::parse_model(TOY_MODEL_JSON).expect("shipped toy model is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_file_matches_generator() {
        let shipped: BodyModelFile = serde_json::from_str(TOY_MODEL_JSON).unwrap();
        assert_eq!(shipped, toy_model_file());
    }

    #[test]
    fn single_precision_model_loads() {
        let m: BodyModel<f32> = crate::body::parse_model(TOY_MODEL_JSON).unwrap();
        let kp = m.keypoints_of(&crate::body::BodyParams::zeros(&m)).unwrap();
        assert!((kp[20] - Vector3::new(0.69f32, 0.42, -0.02)).norm() < 1e-5);
    }
}
