//! Camera model, Plücker line algebra, CGR rotations and SO(3) utilities.
//!
//! Conventions used throughout the crate:
//!
//! - Extrinsics map source-camera coordinates into the target camera:
//!   `X_target = R * X_source + t`, with `t` in meters.
//! - A Plücker line stores a unit direction `d` and the moment `m = p × d`
//!   for any point `p` on the line. Moments carry meter units.
//! - `vec(R)` is row-major wherever a rotation is flattened.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the unit-direction and orthogonality invariants of [`PluckerLine`].
pub const PLUCKER_TOLERANCE: f64 = 1e-9;
/// Minimum separation of the two points used to build a line (meters).
pub const MIN_SEGMENT_LENGTH: f64 = 1e-6;
/// Rotations closer than this to 180° cannot be expressed with CGR parameters.
pub const CGR_SINGULARITY_MARGIN: f64 = 1e-3;
const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate line: endpoints closer than {MIN_SEGMENT_LENGTH} m")]
    DegenerateLine,
    #[error("invalid Plücker coordinates: {0}")]
    InvalidPlucker(&'static str),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("matrix is not a rotation (orthonormality residual {residual:.3e}, det {det:.6})")]
    NotARotation { residual: f64, det: f64 },
    #[error("rotation angle {angle_deg:.6}° is too close to 180° for CGR parameters")]
    NearSingularRotation { angle_deg: f64 },
    #[error("SO(3) projection is not unique: two smallest singular values vanish")]
    RankDeficient,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Skew-symmetric matrix `[v]×` such that `[v]× w = v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Pinhole intrinsics of a rectified camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx.is_finite() && self.fy.is_finite() && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::NonFinite("intrinsics"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if self.cx < 0.0 || self.cx >= f64::from(self.width) {
            return Err(GeometryError::InvalidIntrinsics("cx outside image"));
        }
        if self.cy < 0.0 || self.cy >= f64::from(self.height) {
            return Err(GeometryError::InvalidIntrinsics("cy outside image"));
        }
        Ok(())
    }

    /// The 3×3 calibration matrix `K`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Line projection matrix: maps a camera-frame line moment to its image line.
    ///
    /// Equal to `fx * fy * K^-T`, so `l = 𝓚 m` is the homogeneous image of
    /// the line whose moment is `m`.
    pub fn line_projection_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fy,
            0.0,
            0.0,
            0.0,
            self.fx,
            0.0,
            -self.fy * self.cx,
            -self.fx * self.cy,
            self.fx * self.fy,
        )
    }

    /// Pixel projection of a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Unit-depth ray through a pixel.
    pub fn back_project(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < f64::from(self.width) && px.y < f64::from(self.height)
    }
}

/// 3D line as unit direction plus moment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluckerLine {
    d: Vector3<f64>,
    m: Vector3<f64>,
}

impl PluckerLine {
    pub fn new(d: Vector3<f64>, m: Vector3<f64>) -> Result<Self, GeometryError> {
        if !(d.iter().all(|v| v.is_finite()) && m.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinite("Plücker coordinates"));
        }
        if (d.norm() - 1.0).abs() > PLUCKER_TOLERANCE {
            return Err(GeometryError::InvalidPlucker("direction is not unit length"));
        }
        if d.dot(&m).abs() > PLUCKER_TOLERANCE {
            return Err(GeometryError::InvalidPlucker("direction and moment are not orthogonal"));
        }
        Ok(Self { d, m })
    }

    /// Line through two points, directed from `p1` to `p2`.
    pub fn from_points(p1: &Vector3<f64>, p2: &Vector3<f64>) -> Result<Self, GeometryError> {
        let diff = p2 - p1;
        let len = diff.norm();
        if !len.is_finite() {
            return Err(GeometryError::NonFinite("line endpoints"));
        }
        if len <= MIN_SEGMENT_LENGTH {
            return Err(GeometryError::DegenerateLine);
        }
        let d = diff / len;
        Ok(Self { d, m: p1.cross(&d) })
    }

    /// Line through `point` with direction `dir` (normalized here).
    pub fn from_point_direction(
        point: &Vector3<f64>,
        dir: &Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let len = dir.norm();
        if !len.is_finite() || len <= f64::EPSILON {
            return Err(GeometryError::DegenerateLine);
        }
        let d = dir / len;
        Ok(Self { d, m: point.cross(&d) })
    }

    pub fn direction(&self) -> &Vector3<f64> {
        &self.d
    }

    pub fn moment(&self) -> &Vector3<f64> {
        &self.m
    }

    /// Point of the line closest to the origin.
    pub fn closest_point_to_origin(&self) -> Vector3<f64> {
        self.d.cross(&self.m)
    }

    pub fn distance_to_point(&self, p: &Vector3<f64>) -> f64 {
        (p.cross(&self.d) - self.m).norm()
    }

    /// Re-express the line in the target frame of `t`.
    pub fn transform(&self, t: &Extrinsics) -> Self {
        let d = t.rotation() * self.d;
        let m = t.rotation() * self.m + t.translation().cross(&d);
        Self { d, m }
    }

    /// Dual Plücker matrix `L*`; `L* X̄ = 0` exactly for homogeneous points on the line.
    ///
    /// With the moment convention `m = p × d` the block form reads
    /// `[[-d^, -m], [mᵀ, 0]]`.
    pub fn dual_matrix(&self) -> Matrix4<f64> {
        let mut out = Matrix4::zeros();
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&self.d)));
        out.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-self.m));
        out.fixed_view_mut::<1, 3>(3, 0).copy_from(&self.m.transpose());
        out
    }
}

/// Free-function form of [`PluckerLine::from_points`].
pub fn plucker_from_points(p1: &Vector3<f64>, p2: &Vector3<f64>) -> Result<PluckerLine, GeometryError> {
    PluckerLine::from_points(p1, p2)
}

/// Free-function form of [`PluckerLine::transform`].
pub fn transform_line(line: &PluckerLine, t: &Extrinsics) -> PluckerLine {
    line.transform(t)
}

/// Homogeneous image line with `l1² + l2² = 1`, plus the observed segment endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line2D {
    coeffs: Vector3<f64>,
    endpoints: [Vector2<f64>; 2],
}

impl Line2D {
    /// Line through two pixel points.
    pub fn from_endpoints(x1: Vector2<f64>, x2: Vector2<f64>) -> Result<Self, GeometryError> {
        if !(x1.iter().chain(x2.iter()).all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinite("2D endpoints"));
        }
        let l = x1.push(1.0).cross(&x2.push(1.0));
        let n = l.x.hypot(l.y);
        if n <= 1e-9 {
            return Err(GeometryError::DegenerateLine);
        }
        Ok(Self { coeffs: l / n, endpoints: [x1, x2] })
    }

    pub fn coeffs(&self) -> &Vector3<f64> {
        &self.coeffs
    }

    pub fn endpoints(&self) -> &[Vector2<f64>; 2] {
        &self.endpoints
    }

    pub fn homogeneous_endpoints(&self) -> [Vector3<f64>; 2] {
        [self.endpoints[0].push(1.0), self.endpoints[1].push(1.0)]
    }

    pub fn signed_distance(&self, px: &Vector2<f64>) -> f64 {
        self.coeffs.dot(&px.push(1.0))
    }

    pub fn length(&self) -> f64 {
        (self.endpoints[1] - self.endpoints[0]).norm()
    }
}

/// Cayley-Gibbs-Rodrigues parameters `s = tan(θ/2) * axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgrParams(pub Vector3<f64>);

impl CgrParams {
    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    /// Unnormalized rotation `R̄ = (1 - sᵀs) I + 2[s]× + 2ssᵀ`.
    pub fn unnormalized_rotation(&self) -> Matrix3<f64> {
        let s = &self.0;
        let ss = s.dot(s);
        Matrix3::identity() * (1.0 - ss) + skew(s) * 2.0 + s * s.transpose() * 2.0
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        self.unnormalized_rotation() / (1.0 + self.0.norm_squared())
    }

    pub fn from_rotation(r: &Matrix3<f64>) -> Result<Self, GeometryError> {
        check_rotation(r)?;
        let q = UnitQuaternion::from_matrix(r);
        let angle = q.angle();
        if angle >= std::f64::consts::PI - CGR_SINGULARITY_MARGIN {
            return Err(GeometryError::NearSingularRotation { angle_deg: angle.to_degrees() });
        }
        Ok(Self(q.imag() / q.w))
    }

    pub fn angle(&self) -> f64 {
        2.0 * self.0.norm().atan()
    }
}

/// Free-function form of [`CgrParams::to_rotation`].
pub fn cgr_to_rotation(s: &CgrParams) -> Matrix3<f64> {
    s.to_rotation()
}

/// Free-function form of [`CgrParams::from_rotation`].
pub fn rotation_to_cgr(r: &Matrix3<f64>) -> Result<CgrParams, GeometryError> {
    CgrParams::from_rotation(r)
}

/// Frobenius residual of `RᵀR - I`.
pub fn orthonormality_residual(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite("rotation"));
    }
    let residual = orthonormality_residual(r);
    let det = r.determinant();
    if residual > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(GeometryError::NotARotation { residual, det });
    }
    Ok(())
}

/// Rigid source-to-target transform: `X_target = R X_source + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("translation"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Build from an axis-angle vector (radians) and a translation.
    pub fn from_axis_angle(axis_angle: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = *nalgebra::Rotation3::new(*axis_angle).matrix();
        Self { rotation, translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Extrinsics) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Geodesic angle between the rotations, in degrees.
    pub fn rotation_error_deg(&self, other: &Extrinsics) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation)).to_degrees()
    }

    pub fn translation_error(&self, other: &Extrinsics) -> f64 {
        (self.translation - other.translation).norm()
    }
}

#[derive(Serialize, Deserialize)]
struct ExtrinsicsRepr {
    rotation: [[f64; 3]; 3],
    translation_m: [f64; 3],
}

impl Serialize for Extrinsics {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let r = &self.rotation;
        ExtrinsicsRepr {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation_m: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Extrinsics {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = ExtrinsicsRepr::deserialize(deserializer)?;
        let rows = repr.rotation;
        let rotation = Matrix3::from_fn(|i, j| rows[i][j]);
        Extrinsics::new(rotation, Vector3::from(repr.translation_m)).map_err(serde::de::Error::custom)
    }
}

/// Rotation angle of a (near-)rotation matrix, in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    // The trace formula loses precision near zero; the skew part keeps it.
    let sin = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
    let cos = (r.trace() - 1.0) / 2.0;
    sin.atan2(cos)
}

/// Result of projecting a 3×3 matrix onto SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct So3Projection {
    pub rotation: Matrix3<f64>,
    /// Singular values of the input, descending.
    pub sigma: Vector3<f64>,
    /// Diagonal of `Σ'`: `(1, 1, det(U Vᵀ))`.
    pub sigma_prime: Vector3<f64>,
}

impl So3Projection {
    pub fn distance(&self) -> f64 {
        so3_distance(&self.sigma, &self.sigma_prime)
    }
}

/// Special orthogonalization: `R' = U diag(1, 1, det(U Vᵀ)) Vᵀ`.
pub fn project_so3(m: &Matrix3<f64>) -> Result<So3Projection, GeometryError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite("matrix"));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::RankDeficient),
    };
    let sigma = svd.singular_values;
    if sigma[1].abs() <= 1e-12 && sigma[2].abs() <= 1e-12 {
        return Err(GeometryError::RankDeficient);
    }
    let det = (u * v_t).determinant().signum();
    let sigma_prime = Vector3::new(1.0, 1.0, det);
    let rotation = u * Matrix3::from_diagonal(&sigma_prime) * v_t;
    Ok(So3Projection { rotation, sigma, sigma_prime })
}

/// `‖Σ - Σ'‖_F` on the singular-value diagonals.
pub fn so3_distance(sigma: &Vector3<f64>, sigma_prime: &Vector3<f64>) -> f64 {
    (sigma - sigma_prime).norm()
}

/// Rotation about the x axis by `angle` radians.
pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Rotation about the y axis by `angle` radians.
pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation about the z axis by `angle` radians.
pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}
