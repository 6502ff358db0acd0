//! Evaluation metrics: step errors over pose sequences and the plane-merge
//! check of a calibration against a planar board seen by both cameras.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Extrinsics;

/// Pitch magnitudes at or above this are rejected as too close to gimbal lock.
pub const MAX_PITCH_DEG: f64 = 85.0;
pub const MIN_PLANE_POINTS: usize = 10;
/// Required ratio of the two largest scatter eigenvalues to the smallest.
pub const PLANE_CONDITION_RATIO: f64 = 100.0;
pub const DEFAULT_SQUARE_MM: f64 = 108.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("pitch {0:.3}° is within {MAX_PITCH_DEG}° gimbal-lock guard")]
    GimbalLock(f64),
    #[error("group {group} has {count} poses, need at least 2")]
    InsufficientPoses { group: usize, count: usize },
    #[error("{which} point set is not a well-conditioned plane: {reason}")]
    IllConditionedPlane { which: &'static str, reason: String },
    #[error("corner lists must be non-empty and of equal length, squares positive")]
    InvalidCorners,
}

/// Intrinsic XYZ Euler angles `(roll, pitch, yaw)` in degrees, with
/// `R = Rx(roll) · Ry(pitch) · Rz(yaw)`.
pub fn euler_xyz_deg(r: &Matrix3<f64>) -> Result<Vector3<f64>, EvalError> {
    let pitch = r[(0, 2)].clamp(-1.0, 1.0).asin().to_degrees();
    if pitch.abs() >= MAX_PITCH_DEG {
        return Err(EvalError::GimbalLock(pitch));
    }
    let roll = (-r[(1, 2)]).atan2(r[(2, 2)]).to_degrees();
    let yaw = (-r[(0, 1)]).atan2(r[(0, 0)]).to_degrees();
    Ok(Vector3::new(roll, pitch, yaw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariedParameter {
    /// Rotation changes between poses, translation is held.
    Rotation,
    /// Translation changes between poses, rotation is held.
    Translation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseGroup {
    pub varied: VariedParameter,
    pub poses: Vec<Extrinsics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepError {
    pub group: usize,
    pub step: usize,
    pub varied: VariedParameter,
    /// Degrees for rotation groups, centimeters for translation groups.
    pub error: f64,
}

/// `‖(θ_{i+1} − θ_i) − (0, step, 0)‖` over consecutive poses, in degrees.
pub fn rotation_step_errors(poses: &[Extrinsics], step_deg: f64) -> Result<Vec<f64>, EvalError> {
    let angles = poses.iter().map(|p| euler_xyz_deg(p.rotation())).collect::<Result<Vec<_>, _>>()?;
    let expected = Vector3::new(0.0, step_deg, 0.0);
    Ok(angles.windows(2).map(|w| ((w[1] - w[0]) - expected).norm()).collect())
}

/// `| ‖t_{i+1} − t_i‖ − step |` over consecutive poses, in centimeters.
pub fn translation_step_errors(poses: &[Extrinsics], step_cm: f64) -> Vec<f64> {
    poses
        .windows(2)
        .map(|w| ((w[1].translation() - w[0].translation()).norm() * 100.0 - step_cm).abs())
        .collect()
}

pub fn pose_variation_errors(
    groups: &[PoseGroup],
    step_rot_deg: f64,
    step_trans_cm: f64,
) -> Result<Vec<StepError>, EvalError> {
    let mut out = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        if group.poses.len() < 2 {
            return Err(EvalError::InsufficientPoses { group: g, count: group.poses.len() });
        }
        let errors = match group.varied {
            VariedParameter::Rotation => rotation_step_errors(&group.poses, step_rot_deg)?,
            VariedParameter::Translation => translation_step_errors(&group.poses, step_trans_cm),
        };
        out.extend(errors.into_iter().enumerate().map(|(step, error)| StepError {
            group: g,
            step,
            varied: group.varied,
            error,
        }));
    }
    Ok(out)
}

/// Board corners used for the length metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardCorners {
    /// Corner points seen by the target camera, target frame.
    pub target: Vec<[f64; 3]>,
    /// Matching far corners seen by the source camera, source frame.
    pub source: Vec<[f64; 3]>,
    /// Board squares between each target/source corner pair.
    pub squares: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneMergeInput {
    /// Board points in the target frame (m).
    pub target_points: Vec<[f64; 3]>,
    /// Board points in the source frame (m).
    pub source_points: Vec<[f64; 3]>,
    #[serde(default)]
    pub corners: Option<BoardCorners>,
    #[serde(default = "default_square_mm")]
    pub square_mm: f64,
}

fn default_square_mm() -> f64 {
    DEFAULT_SQUARE_MM
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneMergeMetrics {
    /// Mean square length error, mm; only with corners.
    pub l_mm: Option<f64>,
    /// Difference of origin-to-plane distances, mm.
    pub d_mm: f64,
    /// Angle between the plane normals, degrees in `[0, 90]`.
    pub theta_deg: f64,
}

/// Total least squares plane: unit normal and a point on it (the centroid).
pub fn fit_plane(points: &[Vector3<f64>], which: &'static str) -> Result<(Vector3<f64>, Vector3<f64>), EvalError> {
    if points.len() < MIN_PLANE_POINTS {
        return Err(EvalError::IllConditionedPlane {
            which,
            reason: format!("{} points, need {MIN_PLANE_POINTS}", points.len()),
        });
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let scatter = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let q = p - centroid;
        acc + q * q.transpose()
    }) / points.len() as f64;
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (small, mid) = (eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]]);
    if !(mid > PLANE_CONDITION_RATIO * small) {
        return Err(EvalError::IllConditionedPlane {
            which,
            reason: format!("scatter eigenvalues {small:e} and {mid:e} differ by less than {PLANE_CONDITION_RATIO}x"),
        });
    }
    Ok((eig.eigenvectors.column(order[0]).into_owned(), centroid))
}

/// Compare the board plane seen by the target camera with the source view
/// mapped through `t`.
pub fn plane_merge_metrics(input: &PlaneMergeInput, t: &Extrinsics) -> Result<PlaneMergeMetrics, EvalError> {
    let target: Vec<Vector3<f64>> = input.target_points.iter().map(|p| Vector3::from(*p)).collect();
    let source: Vec<Vector3<f64>> = input.source_points.iter().map(|p| t.transform_point(&Vector3::from(*p))).collect();
    let (n1, c1) = fit_plane(&target, "target")?;
    let (n2, c2) = fit_plane(&source, "source")?;
    let d1 = n1.dot(&c1).abs();
    let d2 = n2.dot(&c2).abs();
    let theta_deg = n1.dot(&n2).abs().min(1.0).acos().to_degrees();

    let l_mm = match &input.corners {
        None => None,
        Some(corners) => {
            if corners.target.is_empty() || corners.target.len() != corners.source.len() || corners.squares == 0 {
                return Err(EvalError::InvalidCorners);
            }
            let mean_span_mm = corners
                .target
                .iter()
                .zip(&corners.source)
                .map(|(p, q)| (Vector3::from(*p) - t.transform_point(&Vector3::from(*q))).norm() * 1e3)
                .sum::<f64>()
                / corners.target.len() as f64;
            Some((mean_span_mm / f64::from(corners.squares) - input.square_mm).abs())
        }
    };
    Ok(PlaneMergeMetrics { l_mm, d_mm: (d1 - d2).abs() * 1e3, theta_deg })
}
