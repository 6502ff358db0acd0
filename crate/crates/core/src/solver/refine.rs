//! Levenberg-Marquardt refinement of the combined line cost.
//!
//! Fully 3D pairs contribute point-to-line residuals of both transformed
//! source endpoints, PnL pairs contribute line reprojection residuals. The
//! rotation is perturbed on the left, `R ← exp([δ]×) R`, and projected back
//! onto SO(3) after every accepted step.

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, Rotation3, SMatrix, Vector3, Vector6};

use super::{PoseSolution, SolverConfig, SolverError};
use crate::constraints::{
    line_reprojection_residual, point_to_line_residual, CaseKind, Correspondence,
};
use crate::geometry::{project_so3, skew, CameraIntrinsics, CgrParams, Extrinsics};

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub solution: PoseSolution,
    pub initial_cost: f64,
    pub iterations: usize,
    /// `false` when the iteration cap was hit before the cost settled.
    pub converged: bool,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub point_weight: f64,
}

/// Pixel-equivalent weight `fx / z̄` for point-to-line residuals, `z̄` being
/// the mean depth of the target 3D endpoints.
pub fn point_weight_for(cs: &[Correspondence], k_t: &CameraIntrinsics, cfg: &SolverConfig) -> f64 {
    if let Some(w) = cfg.point_weight {
        return w;
    }
    let depths: Vec<f64> = cs
        .iter()
        .filter_map(|c| c.target_line_3d())
        .flat_map(|t| t.endpoints.iter().map(|p| p.z.abs()))
        .collect();
    if depths.is_empty() {
        return 1.0;
    }
    let mean = depths.iter().sum::<f64>() / depths.len() as f64;
    if mean > 1e-6 {
        k_t.fx / mean
    } else {
        1.0
    }
}

fn residual_len(cs: &[Correspondence]) -> usize {
    cs.iter()
        .map(|c| match c.kind() {
            CaseKind::Full3D => 6,
            CaseKind::PnL => 2,
        })
        .sum()
}

pub fn residual_vector(
    cs: &[Correspondence],
    t: &Extrinsics,
    k_t: &CameraIntrinsics,
    point_weight: f64,
) -> Result<DVector<f64>, SolverError> {
    let mut out = DVector::zeros(residual_len(cs));
    let mut row = 0;
    for c in cs {
        match c.kind() {
            CaseKind::Full3D => {
                for e in point_to_line_residual(c, t)? {
                    out.fixed_rows_mut::<3>(row).copy_from(&(e * point_weight));
                    row += 3;
                }
            }
            CaseKind::PnL => {
                let e = line_reprojection_residual(c, t, k_t)?;
                out.fixed_rows_mut::<2>(row).copy_from(&e);
                row += 2;
            }
        }
    }
    Ok(out)
}

/// Weighted sum of squared residuals.
pub fn refinement_cost(
    cs: &[Correspondence],
    t: &Extrinsics,
    k_t: &CameraIntrinsics,
    point_weight: f64,
) -> Result<f64, SolverError> {
    Ok(residual_vector(cs, t, k_t, point_weight)?.norm_squared())
}

/// Jacobian of [`residual_vector`] w.r.t. `(δθ, δt)`.
pub fn analytic_jacobian(
    cs: &[Correspondence],
    t: &Extrinsics,
    k_t: &CameraIntrinsics,
    point_weight: f64,
) -> Result<DMatrix<f64>, SolverError> {
    let rot = t.rotation();
    let trans = t.translation();
    let line_proj = k_t.line_projection_matrix();
    let mut jac = DMatrix::zeros(residual_len(cs), 6);
    let mut row = 0;
    for c in cs {
        match c.kind() {
            CaseKind::Full3D => {
                let target = c.target_line_3d().expect("full3d carries a target line");
                let d = target.line.direction();
                let projector = Matrix3::identity() - d * d.transpose();
                for x in c.source_endpoints() {
                    let rx = rot * x;
                    let d_rot = -projector * skew(&rx) * point_weight;
                    let d_trans = projector * point_weight;
                    jac.view_mut((row, 0), (3, 3)).copy_from(&d_rot);
                    jac.view_mut((row, 3), (3, 3)).copy_from(&d_trans);
                    row += 3;
                }
            }
            CaseKind::PnL => {
                let line = c.source_line();
                let u = rot * line.direction();
                let moment = rot * line.moment() + trans.cross(&u);
                let dm_rot = -skew(&(rot * line.moment())) - skew(trans) * skew(&u);
                let dm_trans = -skew(&u);
                let l = line_proj * moment;
                let norm_sq = l.x * l.x + l.y * l.y;
                if norm_sq < 1e-18 {
                    return Err(SolverError::DegeneratePose("projected line degenerates to a point".into()));
                }
                let n = norm_sq.sqrt();
                for x in c.target_line_2d().homogeneous_endpoints() {
                    let a = x.dot(&l);
                    let de_dl: RowVector3<f64> =
                        x.transpose() / n - RowVector3::new(l.x, l.y, 0.0) * (a / (n * n * n));
                    let de_dm = de_dl * line_proj;
                    jac.view_mut((row, 0), (1, 3)).copy_from(&(de_dm * dm_rot));
                    jac.view_mut((row, 3), (1, 3)).copy_from(&(de_dm * dm_trans));
                    row += 1;
                }
            }
        }
    }
    Ok(jac)
}

/// Apply a left rotation increment and a translation increment.
pub fn apply_increment(t: &Extrinsics, delta: &Vector6<f64>) -> Result<Extrinsics, SolverError> {
    let dr = Rotation3::new(Vector3::new(delta[0], delta[1], delta[2]));
    let rotated = dr.matrix() * t.rotation();
    let rotation = project_so3(&rotated)?.rotation;
    let translation = t.translation() + Vector3::new(delta[3], delta[4], delta[5]);
    Ok(Extrinsics::new(rotation, translation)?)
}

/// Largest relative deviation between the analytic Jacobian and central
/// finite differences (step 1e-6) on the same increment parameterization.
pub fn jacobian_check(
    cs: &[Correspondence],
    k_t: &CameraIntrinsics,
    t: &Extrinsics,
    point_weight: f64,
) -> Result<f64, SolverError> {
    const STEP: f64 = 1e-6;
    let analytic = analytic_jacobian(cs, t, k_t, point_weight)?;
    let mut numeric = DMatrix::zeros(analytic.nrows(), 6);
    for k in 0..6 {
        let mut delta = Vector6::zeros();
        delta[k] = STEP;
        let plus = residual_vector(cs, &apply_increment(t, &delta)?, k_t, point_weight)?;
        let minus = residual_vector(cs, &apply_increment(t, &(-delta))?, k_t, point_weight)?;
        numeric.set_column(k, &((plus - minus) / (2.0 * STEP)));
    }
    let floor = 1e-3 * numeric.amax().max(f64::MIN_POSITIVE);
    Ok(analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / n.abs().max(a.abs()).max(floor))
        .fold(0.0, f64::max))
}

// Residuals are pixels or weighted meters; 1e-10 RMS is round-off.
const ABSOLUTE_COST_FLOOR: f64 = 1e-20;
const MAX_DAMPING: f64 = 1e16;

/// Levenberg-Marquardt on the combined cost, starting from `initial`.
///
/// Accepted steps never increase the cost. When the iteration cap is hit
/// first, the best iterate is returned with `converged = false`.
pub fn refine(
    initial: &PoseSolution,
    cs: &[Correspondence],
    k_t: &CameraIntrinsics,
    cfg: &SolverConfig,
) -> Result<Refinement, SolverError> {
    let weight = point_weight_for(cs, k_t, cfg);
    let mut pose = initial.extrinsics;
    let mut residual = residual_vector(cs, &pose, k_t, weight)?;
    let mut cost = residual.norm_squared();
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = cfg.lm_initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_lm_iterations {
        if cost <= ABSOLUTE_COST_FLOOR {
            converged = true;
            break;
        }
        let jac = analytic_jacobian(cs, &pose, k_t, weight)?;
        let jt = jac.transpose();
        let hessian: SMatrix<f64, 6, 6> = SMatrix::from_iterator((&jt * &jac).iter().copied());
        let gradient: Vector6<f64> = Vector6::from_iterator((&jt * &residual).iter().copied());
        if gradient.amax() <= f64::EPSILON * cost.sqrt() * 1e-3 {
            converged = true;
            break;
        }
        iterations += 1;

        let mut accepted = None;
        while lambda <= MAX_DAMPING {
            let mut damped = hessian;
            for i in 0..6 {
                damped[(i, i)] += lambda * hessian[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-gradient));
            let candidate = apply_increment(&pose, &step)?;
            let candidate_residual = residual_vector(cs, &candidate, k_t, weight)?;
            let candidate_cost = candidate_residual.norm_squared();
            if candidate_cost < cost {
                lambda = (lambda / 10.0).max(1e-15);
                accepted = Some((candidate, candidate_residual, candidate_cost));
                break;
            }
            lambda *= 10.0;
        }

        let Some((candidate, candidate_residual, candidate_cost)) = accepted else {
            // No damping level improves the cost: we are at a local minimum.
            converged = true;
            break;
        };
        let relative = (cost - candidate_cost) / cost;
        pose = candidate;
        residual = candidate_residual;
        cost = candidate_cost;
        history.push(cost);
        if relative < cfg.cost_tolerance {
            converged = true;
            break;
        }
    }

    let s = CgrParams::from_rotation(pose.rotation()).unwrap_or(initial.s);
    Ok(Refinement {
        solution: PoseSolution {
            extrinsics: pose,
            s,
            algebraic_residual: initial.algebraic_residual,
            refined_cost: Some(cost),
            all_candidates: initial.all_candidates.clone(),
        },
        initial_cost,
        iterations,
        converged,
        cost_history: history,
        point_weight: weight,
    })
}
