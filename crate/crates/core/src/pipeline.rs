//! Streaming calibration loop: fit depth samples to 3D lines, classify,
//! gate on the rotation estimate, vote on translation candidates, then solve
//! and refine on the voting inliers.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{
    assemble, classify, Classification, ConstraintError, Correspondence, TargetLine3D,
    DEFAULT_CLASSIFICATION_THRESHOLD,
};
use crate::geometry::{CameraIntrinsics, CgrParams, Extrinsics, Line2D, PluckerLine};
use crate::selection::{
    candidate, convergence_voting, rotation_rows, RotationGateState, VoteThreshold,
};
use crate::solver::{refine, solve_quadratic_system, SolverConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("need at least 2 samples to fit a line, got {0}")]
    TooFewSamples(usize),
    #[error("all samples coincide")]
    DegenerateSamples,
    #[error("observation {id}: {reason}")]
    InvalidObservation { id: u64, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty observation stream")]
    EmptyStream,
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

/// Raw input for one matched line pair, before classification.
#[derive(Debug, Clone, PartialEq)]
pub struct LineObservation {
    pub id: u64,
    pub target_2d: Line2D,
    pub source_2d: Line2D,
    /// Target depth samples along the segment; `None` when depth is missing.
    pub target_samples: Option<Vec<Vector3<f64>>>,
    pub source_samples: Vec<Vector3<f64>>,
}

impl LineObservation {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |reason: String| PipelineError::InvalidObservation { id: self.id, reason };
        if self.source_samples.len() < 2 {
            return Err(invalid(format!("{} source samples, need 2", self.source_samples.len())));
        }
        if let Some(t) = &self.target_samples {
            if t.len() < 2 {
                return Err(invalid(format!("{} target samples, need 2", t.len())));
            }
        }
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        if !self.source_samples.iter().all(finite)
            || !self.target_samples.iter().flatten().all(finite)
        {
            return Err(invalid("non-finite sample".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub distance_threshold_m: f64,
    pub iterations: usize,
    /// Fits with fewer inliers count as unreliable (inlier ratio 0).
    pub min_inlier_count: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { distance_threshold_m: 0.01, iterations: 200, min_inlier_count: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub inlier_ratio_threshold: f64,
    pub ransac: RansacConfig,
    pub epsilon_d_m: f64,
    pub vote_threshold: VoteThreshold,
    /// Mean refined cost per correspondence, in px² equivalents.
    pub cost_threshold: f64,
    /// Observations ingested before giving up.
    pub max_pairs: usize,
    pub rng_seed: u64,
    pub gate_distance_floor: f64,
    /// Evict a gated pair when dropping it shrinks the SO(3) distance below
    /// this fraction. `None` disables the audit.
    pub gate_audit_ratio: Option<f64>,
    /// Let a gate-rejected pair replace an accepted one when that lowers the distance.
    pub gate_swap: bool,
    /// Pairs gathered before the gate keeps only their most consistent
    /// subset. 0 accepts the first pairs as they come.
    pub gate_bootstrap_window: usize,
    pub min_pairs_for_finalize: usize,
    pub solver: SolverConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inlier_ratio_threshold: DEFAULT_CLASSIFICATION_THRESHOLD,
            ransac: RansacConfig::default(),
            epsilon_d_m: 0.02,
            vote_threshold: VoteThreshold::default(),
            cost_threshold: 2.0,
            max_pairs: 200,
            rng_seed: 0,
            gate_distance_floor: 1e-9,
            gate_audit_ratio: Some(0.5),
            gate_swap: true,
            gate_bootstrap_window: 10,
            min_pairs_for_finalize: 4,
            solver: SolverConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let positive = [
            ("inlier_ratio_threshold", self.inlier_ratio_threshold),
            ("ransac.distance_threshold_m", self.ransac.distance_threshold_m),
            ("epsilon_d_m", self.epsilon_d_m),
            ("cost_threshold", self.cost_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PipelineError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.inlier_ratio_threshold > 1.0 {
            return Err(PipelineError::InvalidConfig("inlier_ratio_threshold must not exceed 1".into()));
        }
        if self.ransac.iterations == 0 || self.max_pairs == 0 {
            return Err(PipelineError::InvalidConfig("ransac.iterations and max_pairs must be positive".into()));
        }
        if self.min_pairs_for_finalize < 2 {
            return Err(PipelineError::InvalidConfig("min_pairs_for_finalize must be at least 2".into()));
        }
        if let Some(r) = self.gate_audit_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(PipelineError::InvalidConfig(format!("gate_audit_ratio must be in (0, 1), got {r}")));
            }
        }
        if self.gate_distance_floor < 0.0 {
            return Err(PipelineError::InvalidConfig("gate_distance_floor must be non-negative".into()));
        }
        Ok(())
    }
}

/// RANSAC line fit of a point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub line: PluckerLine,
    pub endpoints: [Vector3<f64>; 2],
    pub inlier_count: usize,
    pub inlier_ratio: f64,
}

impl LineFit {
    /// Inlier ratio used for classification: zero for fits supported by
    /// fewer than `min_inlier_count` points.
    pub fn effective_ratio(&self, cfg: &RansacConfig) -> f64 {
        if self.inlier_count < cfg.min_inlier_count {
            0.0
        } else {
            self.inlier_ratio
        }
    }
}

fn point_line_distance(p: &Vector3<f64>, a: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
    (p - a).cross(dir).norm()
}

/// Fit a 3D line by RANSAC over 2-point models, then refit to the inliers
/// by the principal direction through their centroid.
///
/// When every pair of samples fits in the iteration budget all pairs are
/// tried, otherwise `cfg.iterations` random pairs drawn from `seed`.
pub fn ransac_fit_line(
    samples: &[Vector3<f64>],
    cfg: &RansacConfig,
    seed: u64,
) -> Result<LineFit, PipelineError> {
    let n = samples.len();
    if n < 2 {
        return Err(PipelineError::TooFewSamples(n));
    }
    let count_inliers = |a: &Vector3<f64>, b: &Vector3<f64>| -> Option<usize> {
        let dir = b - a;
        let len = dir.norm();
        if len < 1e-9 {
            return None;
        }
        let dir = dir / len;
        Some(samples.iter().filter(|p| point_line_distance(p, a, &dir) < cfg.distance_threshold_m).count())
    };

    let mut best: Option<(usize, usize, usize)> = None;
    let mut consider = |i: usize, j: usize| {
        if let Some(c) = count_inliers(&samples[i], &samples[j]) {
            if best.is_none_or(|b| c > b.0) {
                best = Some((c, i, j));
            }
        }
    };
    if n * (n - 1) / 2 <= cfg.iterations {
        for i in 0..n {
            for j in (i + 1)..n {
                consider(i, j);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..cfg.iterations {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n - 1);
            let j = if j >= i { j + 1 } else { j };
            consider(i, j);
        }
    }
    let (_, i, j) = best.ok_or(PipelineError::DegenerateSamples)?;
    let a = samples[i];
    let dir = (samples[j] - a).normalize();
    let inliers: Vec<Vector3<f64>> = samples
        .iter()
        .filter(|p| point_line_distance(p, &a, &dir) < cfg.distance_threshold_m)
        .copied()
        .collect();

    let centroid = inliers.iter().sum::<Vector3<f64>>() / inliers.len() as f64;
    let scatter = inliers.iter().fold(Matrix3::zeros(), |acc, p| {
        let q = p - centroid;
        acc + q * q.transpose()
    });
    let eig = SymmetricEigen::new(scatter);
    let k = eig.eigenvalues.imax();
    let mut direction = eig.eigenvectors.column(k).into_owned();
    // Orient along the sample order so endpoints follow the input.
    let span = inliers[inliers.len() - 1] - inliers[0];
    let reference = if span.norm() > 0.0 { span } else { dir };
    if direction.dot(&reference) < 0.0 {
        direction = -direction;
    }
    let line = PluckerLine::from_point_direction(&centroid, &direction)
        .map_err(|_| PipelineError::DegenerateSamples)?;
    let direction = *line.direction();
    let (lo, hi) = inliers.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let s = (p - centroid).dot(&direction);
        (lo.min(s), hi.max(s))
    });
    Ok(LineFit {
        line,
        endpoints: [centroid + direction * lo, centroid + direction * hi],
        inlier_count: inliers.len(),
        inlier_ratio: inliers.len() as f64 / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum RoundOutcome {
    Accepted { d_so3: f64, bootstrap: bool, evicted: Vec<u64> },
    GateRejected { candidate_d_so3: f64, current_d_so3: f64 },
    Rejected { reason: String },
}

/// One finalize attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Observations ingested when the attempt ran.
    pub round: usize,
    pub accepted_pairs: usize,
    /// `None` while the gate rotation is undefined.
    pub d_so3: Option<f64>,
    pub vote_size: usize,
    pub vote_converged: bool,
    pub cost: Option<f64>,
    pub point_weight: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxPairs,
    Aborted,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Converged => "Converged",
            Self::MaxPairs => "MaxPairs",
            Self::Aborted => "Aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    /// Best available estimate; identity for aborted runs with no rotation.
    pub extrinsics: Extrinsics,
    pub cgr: Option<CgrParams>,
    /// Mean refined cost per correspondence, if a pose was ever refined.
    pub final_cost: Option<f64>,
    pub accepted_pair_count: usize,
    pub voting_inlier_count: usize,
    /// Correspondence ids of the pairs the final pose was solved from.
    pub inlier_ids: Vec<u64>,
    pub termination: Termination,
    pub trace: Vec<TraceEntry>,
}

/// Mutable state of the loop.
#[derive(Debug, Clone, Default)]
pub struct PipelineState {
    pub gate: RotationGateState,
    pub accepted: Vec<Correspondence>,
    pub ingested: usize,
    pub trace: Vec<TraceEntry>,
    last_pose: Option<(Extrinsics, f64, Vec<u64>)>,
}

impl PipelineState {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            gate: RotationGateState::with_policy(
                cfg.gate_distance_floor,
                cfg.min_pairs_for_finalize,
                cfg.gate_bootstrap_window,
                cfg.gate_swap,
            ),
            ..Self::default()
        }
    }
}

fn mix_seed(seed: u64, index: u64, lane: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(lane.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fit and classify an observation into a correspondence.
pub fn build_correspondence(
    obs: &LineObservation,
    cfg: &PipelineConfig,
    round: usize,
) -> Result<Correspondence, String> {
    obs.validate().map_err(|e| e.to_string())?;
    let seed = mix_seed(cfg.rng_seed, round as u64, 0);
    let source = ransac_fit_line(&obs.source_samples, &cfg.ransac, seed).map_err(|e| format!("source fit: {e}"))?;
    let target = match &obs.target_samples {
        Some(samples) => Some(
            ransac_fit_line(samples, &cfg.ransac, mix_seed(cfg.rng_seed, round as u64, 1))
                .map_err(|e| format!("target fit: {e}"))?,
        ),
        None => None,
    };
    let source_ratio = source.effective_ratio(&cfg.ransac);
    let target_ratio = target.map_or(0.0, |t| t.effective_ratio(&cfg.ransac));
    let ratios = (source.inlier_ratio, target.map_or(0.0, |t| t.inlier_ratio));
    let built = match classify(source_ratio, target_ratio, cfg.inlier_ratio_threshold) {
        Classification::Reject => {
            return Err(format!(
                "classification: source ratio {source_ratio:.3} below {}",
                cfg.inlier_ratio_threshold
            ))
        }
        Classification::Full3D => {
            let t = target.expect("full3d needs a target fit");
            Correspondence::full3d(
                obs.id,
                source.line,
                source.endpoints,
                TargetLine3D { line: t.line, endpoints: t.endpoints },
                obs.target_2d,
                ratios,
            )
        }
        Classification::PnL => Correspondence::pnl(obs.id, source.line, source.endpoints, obs.target_2d, ratios),
    };
    built.map_err(|e| e.to_string())
}

/// Fit, classify and gate one observation.
pub fn ingest(
    obs: &LineObservation,
    state: &mut PipelineState,
    cfg: &PipelineConfig,
    k_t: &CameraIntrinsics,
) -> RoundOutcome {
    let round = state.ingested;
    state.ingested += 1;
    let c = match build_correspondence(obs, cfg, round) {
        Ok(c) => c,
        Err(reason) => return RoundOutcome::Rejected { reason },
    };
    let decision = state.gate.gate(c.id, &rotation_rows(&c, k_t));
    if !decision.accepted {
        return RoundOutcome::GateRejected {
            candidate_d_so3: decision.candidate_distance,
            current_d_so3: decision.previous_distance,
        };
    }
    state.accepted.push(c);
    let mut evicted = decision.evicted;
    if let Some(ratio) = cfg.gate_audit_ratio {
        evicted.extend(state.gate.audit(ratio));
    }
    if !evicted.is_empty() {
        state.accepted.retain(|c| !evicted.contains(&c.id));
    }
    RoundOutcome::Accepted { d_so3: state.gate.distance(), bootstrap: decision.bootstrap, evicted }
}

fn report(
    state: &PipelineState,
    termination: Termination,
    extrinsics: Extrinsics,
    final_cost: Option<f64>,
    inlier_ids: Vec<u64>,
) -> CalibrationReport {
    CalibrationReport {
        cgr: CgrParams::from_rotation(extrinsics.rotation()).ok(),
        extrinsics,
        final_cost,
        accepted_pair_count: state.accepted.len(),
        voting_inlier_count: inlier_ids.len(),
        inlier_ids,
        termination,
        trace: state.trace.clone(),
    }
}

/// Refined pose of a set of correspondences and its mean cost per pair.
pub fn solve_and_refine(
    cs: &[Correspondence],
    k_t: &CameraIntrinsics,
    cfg: &SolverConfig,
) -> Result<(Extrinsics, f64, f64), String> {
    let sys = assemble(cs, k_t).map_err(|e| e.to_string())?;
    let initial = solve_quadratic_system(&sys, cfg).map_err(|e| e.to_string())?;
    let refined = refine(&initial, cs, k_t, cfg).map_err(|e| e.to_string())?;
    let cost = refined.solution.refined_cost.unwrap_or(f64::INFINITY) / cs.len() as f64;
    Ok((refined.solution.extrinsics, cost, refined.point_weight))
}

/// Vote on translation candidates from the gate rotation; if the vote
/// converges, solve and refine on the voting inliers only.
///
/// Returns `None` (not ready) unless the refined mean cost is below
/// `cfg.cost_threshold`. Every attempt appends one trace entry.
pub fn try_finalize(
    state: &mut PipelineState,
    cfg: &PipelineConfig,
    k_t: &CameraIntrinsics,
) -> Option<CalibrationReport> {
    let mut entry = TraceEntry {
        round: state.ingested,
        accepted_pairs: state.accepted.len(),
        d_so3: Some(state.gate.distance()).filter(|d| d.is_finite()),
        vote_size: 0,
        vote_converged: false,
        cost: None,
        point_weight: None,
        error: None,
    };
    let outcome = finalize_attempt(state, cfg, k_t, &mut entry);
    state.trace.push(entry);
    outcome
}

fn finalize_attempt(
    state: &mut PipelineState,
    cfg: &PipelineConfig,
    k_t: &CameraIntrinsics,
    entry: &mut TraceEntry,
) -> Option<CalibrationReport> {
    if state.accepted.len() < 2 {
        entry.error = Some("fewer than 2 accepted pairs".into());
        return None;
    }
    let Some(r) = state.gate.rotation().copied() else {
        entry.error = Some("gate rotation undefined".into());
        return None;
    };
    let mut owners = Vec::new();
    let mut lines = Vec::new();
    for (i, c) in state.accepted.iter().enumerate() {
        if let Ok(l) = candidate(c, &r, k_t) {
            owners.push(i);
            lines.push(l);
        }
    }
    let vote = match convergence_voting(&lines, cfg.epsilon_d_m, cfg.vote_threshold) {
        Ok(v) => v,
        Err(e) => {
            entry.error = Some(e.to_string());
            return None;
        }
    };
    entry.vote_size = vote.inlier_set.len();
    entry.vote_converged = vote.converged;
    if !vote.converged {
        return None;
    }
    let inliers: Vec<Correspondence> = vote.inlier_set.iter().map(|&k| state.accepted[owners[k]].clone()).collect();
    let ids: Vec<u64> = inliers.iter().map(|c| c.id).collect();
    match solve_and_refine(&inliers, k_t, &cfg.solver) {
        Ok((pose, cost, weight)) => {
            entry.cost = Some(cost);
            entry.point_weight = Some(weight);
            state.last_pose = Some((pose, cost, ids.clone()));
            if cost < cfg.cost_threshold {
                let mut rep = report(state, Termination::Converged, pose, Some(cost), ids);
                rep.trace.push(entry.clone());
                return Some(rep);
            }
            None
        }
        Err(e) => {
            entry.error = Some(e);
            None
        }
    }
}

/// Run the loop over a stream until convergence, exhaustion or `max_pairs`.
pub fn run(
    stream: &[LineObservation],
    k_t: &CameraIntrinsics,
    cfg: &PipelineConfig,
) -> Result<CalibrationReport, PipelineError> {
    cfg.validate()?;
    k_t.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    if stream.is_empty() {
        return Err(PipelineError::EmptyStream);
    }
    let mut state = PipelineState::new(cfg);
    for obs in stream {
        if state.ingested >= cfg.max_pairs {
            break;
        }
        let outcome = ingest(obs, &mut state, cfg, k_t);
        if matches!(outcome, RoundOutcome::Accepted { .. })
            && state.accepted.len() >= cfg.min_pairs_for_finalize
        {
            if let Some(rep) = try_finalize(&mut state, cfg, k_t) {
                return Ok(rep);
            }
        }
    }
    Ok(match state.last_pose.clone() {
        Some((pose, cost, ids)) if !state.accepted.is_empty() => report(&state, Termination::MaxPairs, pose, Some(cost), ids),
        _ => {
            let pose = state
                .gate
                .rotation()
                .and_then(|r| Extrinsics::new(*r, Vector3::zeros()).ok())
                .unwrap_or_else(Extrinsics::identity);
            report(&state, Termination::Aborted, pose, None, Vec::new())
        }
    })
}
