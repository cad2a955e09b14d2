//! Rigid-body geometry: Euler/rotation conversions, SE(3) poses, relative
//! poses and trajectory accumulation.
//!
//! The Euler convention is fixed to intrinsic Z·Y·X (R = Rz·Ry·Rx) in the
//! camera frame (x right, y down, z forward), which makes the pitch-like
//! angle θy the dominant one for driving data. Gimbal lock is an error,
//! never a silent approximation.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("gimbal lock: |R[2][0]| = {0} too close to 1")]
    GimbalLock(f64),
    #[error("rotation outside the supported regime: |pitch| = {0} rad >= pi/2 - 1e-6")]
    PitchOutOfRange(f64),
    #[error("matrix is not a rigid transform: {0}")]
    NotRigid(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

pub type Mat3 = [[f64; 3]; 3];

const ORTHO_TOL: f64 = 1e-9;

// ── Motion vectors ───────────────────────────────────────────────────

/// Frame-to-frame camera motion: translation in meters, rotation as
/// intrinsic Z·Y·X Euler angles in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionVector {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

impl MotionVector {
    pub fn new(translation: [f64; 3], rotation: [f64; 3]) -> Self {
        MotionVector {
            translation,
            rotation,
        }
    }

    pub fn zero() -> Self {
        MotionVector {
            translation: [0.0; 3],
            rotation: [0.0; 3],
        }
    }

    /// Flat [τx, τy, τz, θx, θy, θz] layout used by network labels.
    pub fn to_array(&self) -> [f64; 6] {
        [
            self.translation[0],
            self.translation[1],
            self.translation[2],
            self.rotation[0],
            self.rotation[1],
            self.rotation[2],
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        MotionVector {
            translation: [a[0], a[1], a[2]],
            rotation: [a[3], a[4], a[5]],
        }
    }
}

// ── Rotation matrices ────────────────────────────────────────────────

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn mat3_det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn mat3_inverse(a: &Mat3) -> Option<Mat3> {
    let det = mat3_det(a);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
            let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
            // Cofactor transpose.
            inv[j][i] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) * inv_det;
        }
    }
    Some(inv)
}

/// Max-norm deviation of RᵀR from the identity.
pub fn orthonormality_drift(r: &Mat3) -> f64 {
    let rtr = mat3_mul(&mat3_transpose(r), r);
    let mut worst = 0.0f64;
    for (i, row) in rtr.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
    }
    worst
}

/// Nearest rotation by Newton iteration on the polar factor:
/// X ← (X + X⁻ᵀ)/2. Converges quadratically for near-orthonormal input.
pub fn orthonormalize(r: &Mat3) -> Result<Mat3> {
    let mut x = *r;
    for _ in 0..32 {
        if orthonormality_drift(&x) < 1e-15 {
            break;
        }
        let inv_t = mat3_transpose(&mat3_inverse(&x).ok_or_else(|| {
            GeometryError::NotRigid("singular rotation block".to_string())
        })?);
        for i in 0..3 {
            for j in 0..3 {
                x[i][j] = 0.5 * (x[i][j] + inv_t[i][j]);
            }
        }
    }
    if orthonormality_drift(&x) > ORTHO_TOL || (mat3_det(&x) - 1.0).abs() > ORTHO_TOL {
        return Err(GeometryError::NotRigid(format!(
            "polar iteration did not reach a proper rotation (drift {}, det {})",
            orthonormality_drift(&x),
            mat3_det(&x)
        )));
    }
    Ok(x)
}

/// R = Rz(θz)·Ry(θy)·Rx(θx).
pub fn euler_to_rot(theta: &[f64; 3]) -> Mat3 {
    let (sx, cx) = theta[0].sin_cos();
    let (sy, cy) = theta[1].sin_cos();
    let (sz, cz) = theta[2].sin_cos();
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// Inverse of [`euler_to_rot`] away from the |θy| = π/2 singularity.
pub fn rot_to_euler(r: &Mat3) -> Result<[f64; 3]> {
    let s = -r[2][0];
    if s.abs() >= 1.0 - 1e-9 {
        return Err(GeometryError::GimbalLock(s.abs()));
    }
    let theta_y = s.asin();
    let theta_x = r[2][1].atan2(r[2][2]);
    let theta_z = r[1][0].atan2(r[0][0]);
    Ok([theta_x, theta_y, theta_z])
}

// ── Poses ────────────────────────────────────────────────────────────

/// 4×4 homogeneous rigid transform with an orthonormal rotation block and
/// last row (0,0,0,1). Construction validates rigidity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    m: [[f64; 4]; 4],
}

impl Pose {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Pose { m }
    }

    /// Builds from rotation and translation, rejecting non-rigid input.
    pub fn from_parts(rotation: Mat3, translation: [f64; 3]) -> Result<Self> {
        let drift = orthonormality_drift(&rotation);
        if drift > ORTHO_TOL {
            return Err(GeometryError::NotRigid(format!(
                "rotation drift {drift} exceeds {ORTHO_TOL}"
            )));
        }
        let det = mat3_det(&rotation);
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::NotRigid(format!("det(R) = {det}")));
        }
        Ok(Self::from_parts_unchecked(rotation, translation))
    }

    /// As [`Pose::from_parts`] but re-orthonormalizes rotations whose drift
    /// lies within `tol`; used by the pose-file parser.
    pub fn from_parts_tol(rotation: Mat3, translation: [f64; 3], tol: f64) -> Result<Self> {
        let drift = orthonormality_drift(&rotation);
        if drift > ORTHO_TOL {
            if drift > tol {
                return Err(GeometryError::NotRigid(format!(
                    "rotation drift {drift} exceeds tolerance {tol}"
                )));
            }
            return Ok(Self::from_parts_unchecked(
                orthonormalize(&rotation)?,
                translation,
            ));
        }
        Self::from_parts(rotation, translation)
    }

    fn from_parts_unchecked(rotation: Mat3, translation: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&rotation[i]);
            m[i][3] = translation[i];
        }
        m[3][3] = 1.0;
        Pose { m }
    }

    pub fn rotation(&self) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            r[i].copy_from_slice(&self.m[i][..3]);
        }
        r
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        let ra = self.rotation();
        let rb = other.rotation();
        let r = mat3_mul(&ra, &rb);
        let tb = other.translation();
        let ta = self.translation();
        let mut t = [0.0; 3];
        for i in 0..3 {
            t[i] = ra[i][0] * tb[0] + ra[i][1] * tb[1] + ra[i][2] * tb[2] + ta[i];
        }
        Self::from_parts_unchecked(r, t)
    }

    pub fn inverse(&self) -> Pose {
        let rt = mat3_transpose(&self.rotation());
        let t = self.translation();
        let mut ti = [0.0; 3];
        for i in 0..3 {
            ti[i] = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        Self::from_parts_unchecked(rt, ti)
    }

    pub fn orthonormality_drift(&self) -> f64 {
        orthonormality_drift(&self.rotation())
    }

    /// Rotation angle in radians: arccos((trace(R) − 1)/2), domain-clamped.
    pub fn rotation_angle(&self) -> f64 {
        let r = self.rotation();
        let c = ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn translation_norm(&self) -> f64 {
        let t = self.translation();
        (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt()
    }
}

const PITCH_LIMIT: f64 = std::f64::consts::FRAC_PI_2 - 1e-6;

/// Motion vector → pose. Rejects pitch outside the supported regime.
pub fn to_se3(y: &MotionVector) -> Result<Pose> {
    if y.rotation[1].abs() >= PITCH_LIMIT {
        return Err(GeometryError::PitchOutOfRange(y.rotation[1].abs()));
    }
    Pose::from_parts(euler_to_rot(&y.rotation), y.translation)
}

/// Pose → motion vector; inverse of [`to_se3`] on the non-degenerate domain.
pub fn from_se3(pose: &Pose) -> Result<MotionVector> {
    let rotation = rot_to_euler(&pose.rotation())?;
    if rotation[1].abs() >= PITCH_LIMIT {
        return Err(GeometryError::PitchOutOfRange(rotation[1].abs()));
    }
    Ok(MotionVector {
        translation: pose.translation(),
        rotation,
    })
}

/// T_i⁻¹ · T_j: the pose of frame j expressed in frame i.
pub fn relative_pose(t_i: &Pose, t_j: &Pose) -> Pose {
    t_i.inverse().compose(t_j)
}

/// Accumulates frame-to-frame motions from `start`: T_{k+1} = T_k · to_se3(y_k).
/// Output length is motions.len() + 1. Rotations are re-orthonormalized via
/// the polar factor whenever drift exceeds 1e-9.
pub fn compose_trajectory(motions: &[MotionVector], start: &Pose) -> Result<Vec<Pose>> {
    let mut poses = Vec::with_capacity(motions.len() + 1);
    poses.push(*start);
    let mut current = *start;
    for y in motions {
        current = current.compose(&to_se3(y)?);
        if current.orthonormality_drift() > ORTHO_TOL {
            current =
                Pose::from_parts_unchecked(orthonormalize(&current.rotation())?, current.translation());
            debug_assert!(current.orthonormality_drift() <= ORTHO_TOL);
        }
        poses.push(current);
    }
    Ok(poses)
}
