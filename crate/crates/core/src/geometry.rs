//! Rotation representations, pinhole projection and Procrustes alignment.
//!
//! Rotation matrices are plain [`Matrix3`] values. Functions that accept a
//! matrix from outside validate it with [`check_rotation`]; the `*_unchecked`
//! variants are for matrices produced by this module.

use nalgebra::{Matrix3, Matrix3x6, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not a rotation (orthonormality error {orthonormality:.3e}, det {determinant:.6})")]
    NotARotation {
        orthonormality: f64,
        determinant: f64,
    },
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRot6d(&'static str),
    #[error("point {index} has non-positive camera depth {depth}")]
    NonPositiveDepth { index: usize, depth: f64 },
    #[error("focal length must be positive, got {0}")]
    InvalidFocal(f64),
    #[error("alignment needs matching point sets with at least 3 points, got {pred} and {gt}")]
    PointCount { pred: usize, gt: usize },
    #[error("point configuration is collinear or degenerate")]
    DegenerateConfiguration,
}

/// Rotation as axis times angle (radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle<T: Real>(pub Vector3<T>);

impl<T: Real> AxisAngle<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn angle(&self) -> T {
        self.0.norm()
    }

    /// Re-expresses the rotation with angle in `[0, pi]`.
    ///
    /// At exactly `pi` the axis is chosen so that its first non-negligible
    /// component is positive.
    pub fn canonical(&self) -> Self {
        let angle = self.0.norm();
        if angle == T::zero() {
            return *self;
        }
        let axis = self.0 / angle;
        let two_pi = T::two_pi();
        let mut a = angle % two_pi;
        let mut axis = axis;
        if a > T::pi() {
            a = two_pi - a;
            axis = -axis;
        }
        if (a - T::pi()).abs() <= T::default_epsilon() * T::lit(4.0) {
            axis = positive_hemisphere(axis);
        }
        Self(axis * a)
    }
}

fn positive_hemisphere<T: Real>(axis: Vector3<T>) -> Vector3<T> {
    let cut = T::lit(1e-12);
    for i in 0..3 {
        if axis[i].abs() > cut {
            return if axis[i] < T::zero() { -axis } else { axis };
        }
    }
    axis
}

/// First two columns of a rotation matrix, unconstrained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D<T: Real>(pub Vector6<T>);

impl<T: Real> Rot6D<T> {
    pub fn columns(&self) -> (Vector3<T>, Vector3<T>) {
        let v = &self.0;
        (
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        )
    }
}

/// Skew-free pinhole intrinsics with square pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T: Real> {
    pub focal: T,
    pub principal_point: Vector2<T>,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(focal: T, cx: T, cy: T) -> Result<Self, GeometryError> {
        if !(focal > T::zero()) || !focal.is_finite() {
            return Err(GeometryError::InvalidFocal(focal.as_f64()));
        }
        Ok(Self {
            focal,
            principal_point: Vector2::new(cx, cy),
        })
    }
}

pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
pub fn vee<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    let half = T::lit(0.5);
    Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) * half,
        (m[(0, 2)] - m[(2, 0)]) * half,
        (m[(1, 0)] - m[(0, 1)]) * half,
    )
}

/// Checks orthonormality and `det = +1` within [`Real::rotation_tolerance`].
pub fn check_rotation<T: Real>(m: &Matrix3<T>) -> Result<(), GeometryError> {
    let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
    let det = m.determinant();
    let tol = T::rotation_tolerance();
    if !(ortho <= tol) || !((det - T::one()).abs() <= tol) {
        return Err(GeometryError::NotARotation {
            orthonormality: ortho.as_f64(),
            determinant: det.as_f64(),
        });
    }
    Ok(())
}

/// Rodrigues formula.
pub fn axis_angle_to_matrix<T: Real>(aa: &AxisAngle<T>) -> Matrix3<T> {
    let w = aa.0;
    let theta2 = w.norm_squared();
    let k = skew(&w);
    let (a, b) = if theta2 < T::lit(1e-8) {
        // sin(t)/t and (1 - cos t)/t^2 to fourth order
        (
            T::one() - theta2 / T::lit(6.0) + theta2 * theta2 / T::lit(120.0),
            T::lit(0.5) - theta2 / T::lit(24.0) + theta2 * theta2 / T::lit(720.0),
        )
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Logarithm of a rotation, returned in the canonical range.
pub fn matrix_to_axis_angle<T: Real>(m: &Matrix3<T>) -> Result<AxisAngle<T>, GeometryError> {
    check_rotation(m)?;
    Ok(matrix_to_axis_angle_unchecked(m))
}

pub fn matrix_to_axis_angle_unchecked<T: Real>(m: &Matrix3<T>) -> AxisAngle<T> {
    let half = T::lit(0.5);
    let cos = ((m.trace() - T::one()) * half).clamp(-T::one(), T::one());
    // v = sin(theta) * axis
    let v = vee(m);
    let sin = v.norm();
    let angle = sin.atan2(cos);

    if cos > -half {
        let scale = if sin < T::lit(1e-6) {
            // theta / sin(theta)
            T::one() + angle * angle / T::lit(6.0)
        } else {
            angle / sin
        };
        return AxisAngle(v * scale);
    }

    // Near pi: the symmetric part minus cos*I is (1 - cos) a a^T, whose
    // dominant column is parallel to the axis.
    let sym = (m + m.transpose()) * half - Matrix3::identity() * cos;
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    let mut axis = sym.column(best).into_owned();
    axis /= axis.norm();
    let along = axis.dot(&v);
    if along < T::zero() {
        axis = -axis;
    } else if along == T::zero() || (angle - T::pi()).abs() <= T::default_epsilon() * T::lit(4.0) {
        axis = positive_hemisphere(axis);
    }
    AxisAngle(axis * angle)
}

/// Gram-Schmidt on the two stored columns; the third is their cross product.
pub fn rot6d_to_matrix<T: Real>(r: &Rot6D<T>) -> Result<Matrix3<T>, GeometryError> {
    let (a1, a2) = r.columns();
    let n1 = a1.norm();
    if !(n1 > T::lit(1e-12)) {
        return Err(GeometryError::DegenerateRot6d(
            "first column has near-zero norm",
        ));
    }
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(&a2);
    let nu = u.norm();
    if !(nu > T::lit(1e-12) * (T::one() + a2.norm())) {
        return Err(GeometryError::DegenerateRot6d(
            "columns are parallel or second is zero",
        ));
    }
    let b2 = u / nu;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

pub fn matrix_to_rot6d<T: Real>(m: &Matrix3<T>) -> Result<Rot6D<T>, GeometryError> {
    check_rotation(m)?;
    Ok(matrix_to_rot6d_unchecked(m))
}

pub fn matrix_to_rot6d_unchecked<T: Real>(m: &Matrix3<T>) -> Rot6D<T> {
    Rot6D(Vector6::new(
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ))
}

/// Rotation of a 6D vector together with the map from a 6D perturbation to
/// the left angular increment `w`, defined by `dR R^T = [w]x`.
pub fn rot6d_with_tangent<T: Real>(
    r: &Rot6D<T>,
) -> Result<(Matrix3<T>, Matrix3x6<T>), GeometryError> {
    let rot = rot6d_to_matrix(r)?;
    let (a1, a2) = r.columns();
    let n1 = a1.norm();
    let b1 = rot.column(0).into_owned();
    let b2 = rot.column(1).into_owned();
    let u = a2 - b1 * b1.dot(&a2);
    let nu = u.norm();
    let p1 = (Matrix3::identity() - b1 * b1.transpose()) / n1;
    let p2 = (Matrix3::identity() - b2 * b2.transpose()) / nu;

    let mut tangent = Matrix3x6::zeros();
    for c in 0..6 {
        let mut da1 = Vector3::zeros();
        let mut da2 = Vector3::zeros();
        if c < 3 {
            da1[c] = T::one();
        } else {
            da2[c - 3] = T::one();
        }
        let db1 = p1 * da1;
        let du = da2 - b1 * (db1.dot(&a2) + b1.dot(&da2)) - db1 * b1.dot(&a2);
        let db2 = p2 * du;
        let db3 = db1.cross(&b2) + b1.cross(&db2);
        let drot = Matrix3::from_columns(&[db1, db2, db3]);
        tangent.set_column(c, &vee(&(drot * rot.transpose())));
    }
    Ok((rot, tangent))
}

/// Left Jacobian of the rotation exponential: `d exp(w) exp(w)^T = [J dw]x`.
pub fn so3_left_jacobian<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if theta2 < T::lit(1e-8) {
        (
            T::lit(0.5) - theta2 / T::lit(24.0),
            T::one() / T::lit(6.0) - theta2 / T::lit(120.0),
        )
    } else {
        let theta = theta2.sqrt();
        (
            (T::one() - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`so3_left_jacobian`].
pub fn so3_left_jacobian_inv<T: Real>(w: &Vector3<T>) -> Matrix3<T> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let c = if theta2 < T::lit(1e-8) {
        T::one() / T::lit(12.0) + theta2 / T::lit(720.0)
    } else {
        let theta = theta2.sqrt();
        T::one() / theta2 - (T::one() + theta.cos()) / (T::lit(2.0) * theta * theta.sin())
    };
    Matrix3::identity() - k * T::lit(0.5) + k * k * c
}

/// Pinhole projection of one camera-frame point.
#[inline]
pub fn project_camera_point<T: Real>(p: &Vector3<T>, k: &CameraIntrinsics<T>) -> Vector2<T> {
    Vector2::new(
        k.focal * p.x / p.z + k.principal_point.x,
        k.focal * p.y / p.z + k.principal_point.y,
    )
}

/// Projects world points through camera `(r, t)`; fails on the first point
/// with non-positive camera depth.
pub fn project<T: Real>(
    points: &[Vector3<T>],
    k: &CameraIntrinsics<T>,
    r: &Matrix3<T>,
    t: &Vector3<T>,
) -> Result<Vec<Vector2<T>>, GeometryError> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let pc = r * p + t;
            if !(pc.z > T::zero()) {
                return Err(GeometryError::NonPositiveDepth {
                    index,
                    depth: pc.z.as_f64(),
                });
            }
            Ok(project_camera_point(&pc, k))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Rotation, translation and uniform scale.
    #[default]
    Similarity,
    /// Rotation and translation only.
    Rigid,
}

/// Transform `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity<T: Real> {
    pub scale: T,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Similarity<T> {
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p * self.scale + self.translation
    }
}

#[derive(Debug, Clone)]
pub struct Alignment<T: Real> {
    pub transform: Similarity<T>,
    pub aligned: Vec<Vector3<T>>,
}

fn centroid<T: Real>(pts: &[Vector3<T>]) -> Vector3<T> {
    let n = T::from_usize(pts.len()).unwrap();
    pts.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n
}

fn is_degenerate<T: Real>(centered: &[Vector3<T>]) -> bool {
    let scatter = centered
        .iter()
        .fold(Matrix3::zeros(), |acc: Matrix3<T>, p| {
            acc + p * p.transpose()
        });
    let mut ev: Vec<T> = scatter.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    !(ev[0] > T::zero()) || ev[1] <= ev[0] * T::default_epsilon().sqrt() * T::lit(1e-2)
}

/// Least-squares alignment of `pred` onto `gt` (Umeyama), reflections excluded.
pub fn procrustes_align<T: Real>(
    pred: &[Vector3<T>],
    gt: &[Vector3<T>],
    mode: AlignMode,
) -> Result<Alignment<T>, GeometryError> {
    if pred.len() != gt.len() || pred.len() < 3 {
        return Err(GeometryError::PointCount {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let n = T::from_usize(pred.len()).unwrap();
    let mu_p = centroid(pred);
    let mu_g = centroid(gt);
    let cp: Vec<_> = pred.iter().map(|p| p - mu_p).collect();
    let cg: Vec<_> = gt.iter().map(|g| g - mu_g).collect();
    if is_degenerate(&cp) || is_degenerate(&cg) {
        return Err(GeometryError::DegenerateConfiguration);
    }

    let cov = cg
        .iter()
        .zip(&cp)
        .fold(Matrix3::zeros(), |acc: Matrix3<T>, (g, p)| {
            acc + g * p.transpose()
        })
        / n;
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(GeometryError::DegenerateConfiguration)?;
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateConfiguration)?;
    let mut signs = Vector3::repeat(T::one());
    if (u * v_t).determinant() < T::zero() {
        signs[2] = -T::one();
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;

    let scale = match mode {
        AlignMode::Rigid => T::one(),
        AlignMode::Similarity => {
            let var_p = cp
                .iter()
                .map(|p| p.norm_squared())
                .fold(T::zero(), |a, b| a + b)
                / n;
            svd.singular_values.component_mul(&signs).sum() / var_p
        }
    };
    let translation = mu_g - rotation * mu_p * scale;
    let transform = Similarity {
        scale,
        rotation,
        translation,
    };
    let aligned = pred.iter().map(|p| transform.apply(p)).collect();
    Ok(Alignment { transform, aligned })
}
