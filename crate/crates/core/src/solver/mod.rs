//! Initial pose from the merged quadratic system and its LM refinement.

mod quadrics;
mod refine;

pub use quadrics::solve_three_quadrics;
pub use refine::{
    analytic_jacobian, jacobian_check, point_weight_for, refine, refinement_cost, residual_vector,
    Refinement,
};

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{monomials, ConstraintError, Monomials, QuadraticSystem, MONOMIALS};
use crate::geometry::{CgrParams, Extrinsics, GeometryError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("translation is unobservable: rank(B) = {rank} < 3")]
    DegenerateTranslation { rank: usize },
    #[error("system has too few independent constraints (rank(G) = {rank})")]
    InsufficientConstraints { rank: usize },
    #[error("no real root of the quadratic system")]
    NoRealSolution,
    #[error("pose is degenerate for refinement: {0}")]
    DegeneratePose(String),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_lm_iterations: usize,
    pub lm_initial_damping: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    pub oracle_grid_halfwidth: f64,
    pub oracle_grid_step: f64,
    /// Weight on point-to-line residuals; `None` converts meters to pixels
    /// with `fx / z̄` from the data.
    pub point_weight: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_lm_iterations: 100,
            lm_initial_damping: 1e-3,
            cost_tolerance: 1e-10,
            oracle_grid_halfwidth: 2.0,
            oracle_grid_step: 0.05,
            point_weight: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSolution {
    pub extrinsics: Extrinsics,
    pub s: CgrParams,
    /// `‖A r(s) + B τ‖₂` of the algebraic root this pose came from.
    pub algebraic_residual: f64,
    /// Refinement cost; `None` until [`refine`] ran.
    pub refined_cost: Option<f64>,
    /// Distinct polished roots `(s, τ)`.
    pub all_candidates: Vec<(Vector3<f64>, Vector3<f64>)>,
}

/// `τ = tau_map · r` and `G = A + B · tau_map`.
#[derive(Debug, Clone, PartialEq)]
pub struct Elimination {
    pub g: DMatrix<f64>,
    pub tau_map: SMatrix<f64, 3, MONOMIALS>,
}

impl Elimination {
    pub fn tau(&self, s: &Vector3<f64>) -> Vector3<f64> {
        self.tau_map * monomials(s)
    }

    pub fn residual_norm(&self, s: &Vector3<f64>) -> f64 {
        (&self.g * monomials(s)).norm()
    }
}

const PINV_CUTOFF: f64 = 1e-10;

pub fn eliminate_translation(sys: &QuadraticSystem) -> Result<Elimination, SolverError> {
    let svd = sys.b.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let cutoff = PINV_CUTOFF * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&v| v > cutoff).count();
    if rank < 3 || sigma_max == 0.0 {
        return Err(SolverError::DegenerateTranslation { rank });
    }
    let b_pinv = svd
        .pseudo_inverse(cutoff)
        .map_err(|_| SolverError::DegenerateTranslation { rank })?;
    let tau = -(&b_pinv * &sys.a);
    let tau_map = SMatrix::<f64, 3, MONOMIALS>::from_iterator(tau.iter().copied());
    let g = &sys.a + &sys.b * &tau;
    Ok(Elimination { g, tau_map })
}

/// `∂r/∂s` as a 10×3 matrix.
pub fn monomial_jacobian(s: &Vector3<f64>) -> SMatrix<f64, MONOMIALS, 3> {
    let (a, b, c) = (s.x, s.y, s.z);
    SMatrix::<f64, MONOMIALS, 3>::from_row_slice(&[
        2.0 * a, 0.0, 0.0, //
        0.0, 2.0 * b, 0.0, //
        0.0, 0.0, 2.0 * c, //
        b, a, 0.0, //
        c, 0.0, a, //
        0.0, c, b, //
        1.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, //
        0.0, 0.0, 1.0, //
        0.0, 0.0, 0.0,
    ])
}

/// Levenberg-Marquardt on `‖G r(s)‖²` starting at `s`.
///
/// The cost is evaluated from the residual vector, not from `GᵀG`, so the
/// polish is not limited by the squared conditioning of the normal matrix.
fn polish(g: &DMatrix<f64>, start: Vector3<f64>) -> Vector3<f64> {
    let cost = |s: &Vector3<f64>| (g * monomials(s)).norm_squared();
    let mut s = start;
    let mut current = cost(&s);
    let mut lambda = 1e-6;
    for _ in 0..100 {
        let residual = g * monomials(&s);
        let j = g * monomial_jacobian(&s);
        let grad: Vector3<f64> = Vector3::from_iterator((j.transpose() * &residual).iter().copied());
        let h: Matrix3<f64> = Matrix3::from_iterator((j.transpose() * &j).iter().copied());
        if grad.amax() <= 1e-300 {
            break;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let damped = h
                + Matrix3::from_diagonal(&h.diagonal()) * lambda
                + Matrix3::identity() * (lambda * 1e-9 * h.trace()).max(f64::MIN_POSITIVE);
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-grad))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = s + step;
            let next = cost(&candidate);
            if next < current {
                let decrease = (current - next) / current.max(f64::MIN_POSITIVE);
                s = candidate;
                current = next;
                lambda = (lambda / 10.0).max(1e-12);
                improved = decrease > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || current == 0.0 {
            break;
        }
    }
    s
}

/// Orthonormal basis of `G`'s dominant right singular directions.
fn dominant_rows(g: &DMatrix<f64>) -> Result<Vec<Monomials>, SolverError> {
    let svd = g.clone().svd(false, true);
    let v_t = svd.v_t.ok_or(SolverError::NoRealSolution)?;
    let sigma_max = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&v| v > 1e-12 * sigma_max.max(f64::MIN_POSITIVE))
        .count();
    if rank < 3 {
        return Err(SolverError::InsufficientConstraints { rank });
    }
    Ok((0..rank.min(6))
        .map(|i| Monomials::from_iterator(v_t.row(i).iter().copied()))
        .collect())
}

/// Triples of quadrics fed to the 3-quadric solver: the three strongest
/// constraint directions, plus fixed pseudo-random mixes of the strongest six.
fn quadric_triples(rows: &[Monomials]) -> Vec<[Monomials; 3]> {
    let mut triples = vec![[rows[0], rows[1], rows[2]]];
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_9a55);
    for _ in 0..3 {
        let mix = [0, 1, 2].map(|_| {
            rows.iter()
                .fold(Monomials::zeros(), |acc, r| acc + r * rng.random_range(-1.0..1.0))
        });
        triples.push(mix);
    }
    triples
}

/// Solve `A r + B τ = 0` for the CGR parameters and translation.
///
/// The translation is eliminated first; the remaining rotation-only system
/// `G r(s) = 0` is reduced to triples of quadrics whose real roots are found
/// algebraically, polished on `‖G r(s)‖²` and ranked by algebraic residual.
pub fn solve_quadratic_system(sys: &QuadraticSystem, _cfg: &SolverConfig) -> Result<PoseSolution, SolverError> {
    let elim = eliminate_translation(sys)?;
    let rows = dominant_rows(&elim.g)?;

    let mut candidates: Vec<(Vector3<f64>, f64)> = Vec::new();
    for triple in quadric_triples(&rows) {
        for root in solve_three_quadrics(&triple) {
            let s = polish(&elim.g, root);
            if !s.iter().all(|v| v.is_finite()) {
                continue;
            }
            if candidates.iter().any(|(c, _)| (c - s).norm() < 1e-7 * (1.0 + s.norm())) {
                continue;
            }
            candidates.push((s, elim.residual_norm(&s)));
        }
    }
    if candidates.is_empty() {
        return Err(SolverError::NoRealSolution);
    }

    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.norm().total_cmp(&b.0.norm())));
    let best_residual = candidates[0].1;
    let (s, residual) = *candidates
        .iter()
        .filter(|c| c.1 - best_residual <= 1e-12)
        .min_by(|a, b| a.0.norm().total_cmp(&b.0.norm()))
        .expect("non-empty");

    let tau = elim.tau(&s);
    let params = CgrParams(s);
    let translation = tau / (1.0 + s.norm_squared());
    let extrinsics = Extrinsics::new(params.to_rotation(), translation)?;
    Ok(PoseSolution {
        extrinsics,
        s: params,
        algebraic_residual: residual,
        refined_cost: None,
        all_candidates: candidates.iter().map(|(s, _)| (*s, elim.tau(s))).collect(),
    })
}

/// `‖A r(s) + B τ‖₂` evaluated directly on the unreduced system.
pub fn algebraic_residual(sys: &QuadraticSystem, s: &Vector3<f64>, tau: &Vector3<f64>) -> f64 {
    let r: DVector<f64> = sys.residual(s, tau);
    r.norm()
}
