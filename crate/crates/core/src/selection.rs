//! Scene selection: the SO(3) rotation gate, translation candidate lines
//! and convergence voting.

use nalgebra::{DMatrix, DVector, Matrix3, RowSVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{unit_preimage_normal, CaseKind, ConstraintError, Correspondence};
use crate::geometry::{project_so3, CameraIntrinsics, GeometryError};

const PARALLEL_TOLERANCE: f64 = 1e-9;
/// Rows needed before the least-squares rotation problem is overdetermined.
pub const GATE_BOOTSTRAP_ROWS: usize = 9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("candidate planes do not meet in a single point")]
    ParallelPlanes,
    #[error("lines are parallel")]
    ParallelLines,
    #[error("need at least two non-parallel candidate lines")]
    InsufficientLines,
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type RotationRow = (RowSVector<f64, 9>, f64);

/// Linear rotation constraints `C vec(R) = b` contributed by one pair.
///
/// Fully 3D pairs give the three rows of `d_t = R d_s`; PnL pairs give one
/// row stating that `R d_s` lies in the preimage plane of the target image line.
pub fn rotation_rows(c: &Correspondence, k_t: &CameraIntrinsics) -> Vec<RotationRow> {
    let d_s = c.source_line().direction();
    match c.kind() {
        CaseKind::Full3D => {
            let d_t = c.target_line_3d().expect("full3d carries a target line").line.direction();
            (0..3)
                .map(|i| {
                    let mut row = RowSVector::<f64, 9>::zeros();
                    for j in 0..3 {
                        row[3 * i + j] = d_s[j];
                    }
                    (row, d_t[i])
                })
                .collect()
        }
        CaseKind::PnL => {
            let n = unit_preimage_normal(c.target_line_2d(), k_t);
            let mut row = RowSVector::<f64, 9>::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    row[3 * i + j] = n[i] * d_s[j];
                }
            }
            vec![(row, 0.0)]
        }
    }
}

/// Accumulated rotation system and its current SO(3) distance.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationGateState {
    groups: Vec<(u64, Vec<RotationRow>)>,
    solution: Matrix3<f64>,
    rotation: Option<Matrix3<f64>>,
    distance: f64,
    /// Distances at or below this are treated as "on the manifold".
    pub distance_floor: f64,
    /// Pairs accepted unconditionally regardless of the row count.
    pub bootstrap_pairs: usize,
    /// Let a rejected pair replace an accepted one when that lowers the distance.
    pub swap: bool,
    /// Pairs collected unconditionally before the initial system is chosen
    /// as their most consistent subset. 0 disables the search.
    pub bootstrap_window: usize,
    resolved: bool,
}

impl Default for RotationGateState {
    fn default() -> Self {
        Self::new(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub accepted: bool,
    /// Distance the tentative system reached (infinite when the projection is undefined).
    pub candidate_distance: f64,
    pub previous_distance: f64,
    /// Accepted unconditionally because the system was still underdetermined.
    pub bootstrap: bool,
    /// Pairs dropped from the system by this decision.
    pub evicted: Vec<u64>,
}

/// Least-squares (minimum-norm) solve of `C vec(R) = b`, reshaped row-major.
fn solve_rows<'a>(rows: impl Iterator<Item = &'a RotationRow>) -> Matrix3<f64> {
    let rows: Vec<&RotationRow> = rows.collect();
    if rows.is_empty() {
        return Matrix3::zeros();
    }
    let c = DMatrix::from_fn(rows.len(), 9, |i, j| rows[i].0[j]);
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let svd = c.svd(true, true);
    let cutoff = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let x = svd.solve(&b, cutoff).unwrap_or_else(|_| DVector::zeros(9));
    Matrix3::from_row_slice(x.as_slice())
}

fn evaluate<'a>(rows: impl Iterator<Item = &'a RotationRow>) -> (Matrix3<f64>, Option<Matrix3<f64>>, f64) {
    let m = solve_rows(rows);
    match project_so3(&m) {
        Ok(p) => (m, Some(p.rotation), p.distance()),
        Err(_) => (m, None, f64::INFINITY),
    }
}

impl RotationGateState {
    pub fn new(distance_floor: f64) -> Self {
        Self {
            groups: Vec::new(),
            solution: Matrix3::zeros(),
            rotation: None,
            distance: f64::INFINITY,
            distance_floor,
            bootstrap_pairs: 0,
            swap: false,
            bootstrap_window: 0,
            resolved: false,
        }
    }

    pub fn with_policy(distance_floor: f64, bootstrap_pairs: usize, bootstrap_window: usize, swap: bool) -> Self {
        Self { bootstrap_pairs, bootstrap_window, swap, ..Self::new(distance_floor) }
    }

    fn rows_of<'a>(&'a self, keep: &'a [usize]) -> impl Iterator<Item = &'a RotationRow> + 'a {
        keep.iter().flat_map(|&i| self.groups[i].1.iter())
    }

    /// Replace the collected window by its most consistent part: the
    /// smallest-distance subset of `bootstrap_pairs` pairs spanning at least
    /// 9 rows, grown by the remaining pairs in arrival order under the
    /// regular acceptance rule. Returns the dropped ids.
    fn resolve_window(&mut self) -> Vec<u64> {
        self.resolved = true;
        let n = self.groups.len();
        let mut best: Option<(Vec<usize>, f64)> = None;
        for k in self.bootstrap_pairs.max(1)..=n {
            let mut idx: Vec<usize> = (0..k).collect();
            loop {
                let rows: usize = idx.iter().map(|&i| self.groups[i].1.len()).sum();
                if rows >= GATE_BOOTSTRAP_ROWS {
                    let d = evaluate(self.rows_of(&idx)).2;
                    if best.as_ref().is_none_or(|b| d < b.1) {
                        best = Some((idx.clone(), d));
                    }
                }
                // Next combination in lexicographic order.
                let Some(pos) = (0..k).rev().find(|&p| idx[p] < n - k + p) else { break };
                idx[pos] += 1;
                for q in pos + 1..k {
                    idx[q] = idx[q - 1] + 1;
                }
            }
            if best.is_some() {
                break;
            }
        }
        let Some((mut keep, mut d)) = best else { return Vec::new() };
        for i in 0..n {
            if keep.contains(&i) {
                continue;
            }
            let mut trial = keep.clone();
            trial.push(i);
            let dt = evaluate(self.rows_of(&trial)).2;
            if dt < d || dt <= self.distance_floor {
                keep = trial;
                d = dt;
            }
        }
        keep.sort_unstable();
        let groups = std::mem::take(&mut self.groups);
        let mut evicted = Vec::new();
        for (i, g) in groups.into_iter().enumerate() {
            if keep.contains(&i) {
                self.groups.push(g);
            } else {
                evicted.push(g.0);
            }
        }
        let (m, rot, d) = evaluate(self.groups.iter().flat_map(|g| g.1.iter()));
        self.solution = m;
        self.rotation = rot;
        self.distance = d;
        evicted
    }

    pub fn row_count(&self) -> usize {
        self.groups.iter().map(|g| g.1.len()).sum()
    }

    /// Ids of the pairs whose rows are in the system, in acceptance order.
    pub fn pair_ids(&self) -> Vec<u64> {
        self.groups.iter().map(|g| g.0).collect()
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    /// Least-squares solution `M` before projection.
    pub fn solution(&self) -> &Matrix3<f64> {
        &self.solution
    }

    /// Projection of `M` onto SO(3), once defined.
    pub fn rotation(&self) -> Option<&Matrix3<f64>> {
        self.rotation.as_ref()
    }

    /// Tentatively add the rows of pair `id`; keep them only if the SO(3)
    /// distance drops.
    ///
    /// While fewer than 9 rows or `bootstrap_pairs` pairs are stored, pairs
    /// are accepted unconditionally. With a `bootstrap_window`, unconditional
    /// acceptance lasts until the window is full, and the window is then cut
    /// down to its most consistent subset. Afterwards a pair is accepted iff the new
    /// distance is strictly smaller than the current one, or does not exceed
    /// `distance_floor`. With `swap`, a pair that fails this test may still
    /// replace the stored pair whose removal gives the smallest distance, if
    /// that distance is below the current one.
    pub fn gate(&mut self, id: u64, new_rows: &[RotationRow]) -> GateDecision {
        let (m, rotation, candidate_distance) =
            evaluate(self.groups.iter().flat_map(|g| g.1.iter()).chain(new_rows.iter()));
        let previous_distance = self.distance;
        let bootstrap = self.row_count() < GATE_BOOTSTRAP_ROWS
            || self.groups.len() < self.bootstrap_pairs
            || previous_distance.is_infinite()
            || (self.bootstrap_window > 0 && !self.resolved);
        let accepted = bootstrap
            || candidate_distance < previous_distance
            || candidate_distance <= self.distance_floor;
        let mut decision = GateDecision { accepted, candidate_distance, previous_distance, bootstrap, evicted: Vec::new() };
        if accepted {
            self.groups.push((id, new_rows.to_vec()));
            self.solution = m;
            self.rotation = rotation;
            self.distance = candidate_distance;
            if bootstrap
                && self.bootstrap_window > 0
                && !self.resolved
                && self.groups.len() >= self.bootstrap_window
                && self.row_count() >= GATE_BOOTSTRAP_ROWS
            {
                decision.evicted = self.resolve_window();
            }
            return decision;
        }
        if !self.swap {
            return decision;
        }
        let mut best: Option<(usize, Matrix3<f64>, Option<Matrix3<f64>>, f64)> = None;
        for skip in 0..self.groups.len() {
            let rows = self
                .groups
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .flat_map(|(_, g)| g.1.iter())
                .chain(new_rows.iter());
            let (m, rot, d) = evaluate(rows);
            if best.as_ref().is_none_or(|b| d < b.3) {
                best = Some((skip, m, rot, d));
            }
        }
        if let Some((skip, m, rot, d)) = best {
            if d < previous_distance {
                let removed = self.groups.remove(skip).0;
                self.groups.push((id, new_rows.to_vec()));
                self.solution = m;
                self.rotation = rot;
                self.distance = d;
                decision.accepted = true;
                decision.candidate_distance = d;
                decision.evicted = vec![removed];
            }
        }
        decision
    }

    /// Leave-one-out audit: while dropping a single pair would bring the
    /// distance below `ratio` times the current one (and above the floor),
    /// evict the pair with the largest improvement. Returns evicted ids.
    ///
    /// This undoes inconsistent pairs admitted unconditionally while the
    /// system was underdetermined.
    pub fn audit(&mut self, ratio: f64) -> Vec<u64> {
        let mut evicted = Vec::new();
        while self.groups.len() > 2 && self.distance.is_finite() && self.distance > self.distance_floor {
            let mut best: Option<(usize, Matrix3<f64>, Option<Matrix3<f64>>, f64)> = None;
            for skip in 0..self.groups.len() {
                let remaining: usize =
                    self.groups.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, g)| g.1.len()).sum();
                if remaining < GATE_BOOTSTRAP_ROWS || self.groups.len() - 1 < self.bootstrap_pairs {
                    continue;
                }
                let rows = self.groups.iter().enumerate().filter(|(i, _)| *i != skip).flat_map(|(_, g)| g.1.iter());
                let (m, rot, d) = evaluate(rows);
                if best.as_ref().is_none_or(|b| d < b.3) {
                    best = Some((skip, m, rot, d));
                }
            }
            match best {
                Some((skip, m, rot, d)) if d < ratio * self.distance => {
                    evicted.push(self.groups.remove(skip).0);
                    self.solution = m;
                    self.rotation = rot;
                    self.distance = d;
                }
                _ => break,
            }
        }
        evicted
    }
}

/// Free-function form of [`RotationGateState::gate`] returning the new state.
pub fn gate_rotation(
    state: &RotationGateState,
    id: u64,
    new_rows: &[RotationRow],
) -> (bool, RotationGateState) {
    let mut next = state.clone();
    let decision = next.gate(id, new_rows);
    if decision.accepted {
        (true, next)
    } else {
        (false, state.clone())
    }
}

/// A 3D line of translation candidates `t = p0 + k u`, from a fully 3D pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateLine {
    pub p0: Vector3<f64>,
    pub u: Vector3<f64>,
    pub correspondence_id: u64,
    pub kind: CaseKind,
}

impl CandidateLine {
    pub fn distance_to(&self, x: &Vector3<f64>) -> f64 {
        (x - self.p0).cross(&self.u).norm()
    }
}

/// A plane of translation candidates `normal · t = offset`, from a PnL pair.
///
/// Given the rotation, a 2D target line only fixes the plane through the
/// target center that must contain the transformed source line, so one PnL
/// pair constrains `t` to a plane: `n · (R X + t) = 0` for every source
/// point `X`, with `n` the unit preimage normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidatePlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub correspondence_id: u64,
}

impl CandidatePlane {
    pub fn distance_to(&self, x: &Vector3<f64>) -> f64 {
        (self.normal.dot(x) - self.offset).abs()
    }
}

/// Translation candidates of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Candidate {
    Line(CandidateLine),
    Plane(CandidatePlane),
}

impl Candidate {
    pub fn distance_to(&self, x: &Vector3<f64>) -> f64 {
        match self {
            Self::Line(l) => l.distance_to(x),
            Self::Plane(p) => p.distance_to(x),
        }
    }

    pub fn correspondence_id(&self) -> u64 {
        match self {
            Self::Line(l) => l.correspondence_id,
            Self::Plane(p) => p.correspondence_id,
        }
    }
}

/// Candidate translations from a fully 3D pair: `t = (R m_s − m_t) × R d_s + k R d_s`.
pub fn candidate_from_full3d(c: &Correspondence, r: &Matrix3<f64>) -> Result<CandidateLine, SelectionError> {
    let target = match (c.kind(), c.target_line_3d()) {
        (CaseKind::Full3D, Some(t)) => t,
        _ => return Err(ConstraintError::WrongKind { expected: CaseKind::Full3D, found: c.kind() }.into()),
    };
    let u = r * c.source_line().direction();
    let p0 = (r * c.source_line().moment() - target.line.moment()).cross(&u);
    Ok(CandidateLine { p0, u: u.normalize(), correspondence_id: c.id, kind: CaseKind::Full3D })
}

/// Candidate translations from a PnL pair: the plane `n · t = −n · R X̄`,
/// `X̄` being the midpoint of the source endpoints.
pub fn candidate_from_pnl(
    c: &Correspondence,
    r: &Matrix3<f64>,
    k_t: &CameraIntrinsics,
) -> Result<CandidatePlane, SelectionError> {
    if c.kind() != CaseKind::PnL {
        return Err(ConstraintError::WrongKind { expected: CaseKind::PnL, found: c.kind() }.into());
    }
    let n = unit_preimage_normal(c.target_line_2d(), k_t);
    let [x1, x2] = c.source_endpoints();
    let mid = (x1 + x2) / 2.0;
    Ok(CandidatePlane { normal: n, offset: -n.dot(&(r * mid)), correspondence_id: c.id })
}

/// Candidates for either kind of pair.
pub fn candidate(c: &Correspondence, r: &Matrix3<f64>, k_t: &CameraIntrinsics) -> Result<Candidate, SelectionError> {
    match c.kind() {
        CaseKind::Full3D => candidate_from_full3d(c, r).map(Candidate::Line),
        CaseKind::PnL => candidate_from_pnl(c, r, k_t).map(Candidate::Plane),
    }
}

/// Midpoint of the common perpendicular of two lines.
pub fn equidistant_point(l1: &CandidateLine, l2: &CandidateLine) -> Result<Vector3<f64>, SelectionError> {
    let cross = l1.u.cross(&l2.u);
    let denom = cross.norm_squared();
    if cross.norm() <= PARALLEL_TOLERANCE {
        return Err(SelectionError::ParallelLines);
    }
    let w = l2.p0 - l1.p0;
    let a = w.cross(&l2.u).dot(&cross) / denom;
    let b = w.cross(&l1.u).dot(&cross) / denom;
    Ok(((l1.p0 + l1.u * a) + (l2.p0 + l2.u * b)) / 2.0)
}

/// Point where a line crosses a plane.
pub fn line_plane_intersection(l: &CandidateLine, p: &CandidatePlane) -> Result<Vector3<f64>, SelectionError> {
    let slope = p.normal.dot(&l.u);
    if slope.abs() <= PARALLEL_TOLERANCE {
        return Err(SelectionError::ParallelLines);
    }
    Ok(l.p0 + l.u * ((p.offset - p.normal.dot(&l.p0)) / slope))
}

/// Common point of three planes.
pub fn three_plane_intersection(planes: [&CandidatePlane; 3]) -> Result<Vector3<f64>, SelectionError> {
    let n = Matrix3::from_rows(&planes.map(|p| p.normal.transpose()));
    if n.determinant().abs() <= PARALLEL_TOLERANCE {
        return Err(SelectionError::ParallelPlanes);
    }
    let b = Vector3::new(planes[0].offset, planes[1].offset, planes[2].offset);
    n.lu().solve(&b).ok_or(SelectionError::ParallelPlanes)
}

/// How many agreeing candidates make a vote converge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteThreshold {
    Fixed(usize),
    /// `max(min, ⌈fraction · N⌉)`.
    Fraction { min: usize, fraction: f64 },
}

impl Default for VoteThreshold {
    fn default() -> Self {
        Self::Fraction { min: 4, fraction: 0.6 }
    }
}

impl VoteThreshold {
    pub fn for_lines(&self, n: usize) -> usize {
        match *self {
            Self::Fixed(k) => k,
            Self::Fraction { min, fraction } => min.max((fraction * n as f64 - 1e-9).ceil() as usize),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VotingResult {
    /// Indices into the voted candidate list, ascending.
    pub inlier_set: Vec<usize>,
    pub convergence_point: Option<Vector3<f64>>,
    pub epsilon_d: f64,
    pub converged: bool,
    pub threshold: usize,
}

struct Ballot {
    point: Vector3<f64>,
    members: Vec<usize>,
    spread: f64,
}

impl Ballot {
    /// Larger set wins, then smaller summed distance, then the
    /// lexicographically smaller point.
    fn beats(&self, other: &Ballot) -> bool {
        use std::cmp::Ordering;
        match self.members.len().cmp(&other.members.len()) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => match self.spread.total_cmp(&other.spread) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => {
                    let key = |p: &Vector3<f64>| (p.x, p.y, p.z);
                    key(&self.point).partial_cmp(&key(&other.point)) == Some(Ordering::Less)
                }
            },
        }
    }
}

/// Points where candidates meet: common-perpendicular midpoints of line
/// pairs, line-plane crossings and plane-triple intersections.
fn meeting_points(cands: &[Candidate]) -> Vec<Vector3<f64>> {
    let mut points = Vec::new();
    for i in 0..cands.len() {
        for j in (i + 1)..cands.len() {
            let p = match (&cands[i], &cands[j]) {
                (Candidate::Line(a), Candidate::Line(b)) => equidistant_point(a, b),
                (Candidate::Line(l), Candidate::Plane(p)) | (Candidate::Plane(p), Candidate::Line(l)) => {
                    line_plane_intersection(l, p)
                }
                (Candidate::Plane(a), Candidate::Plane(b)) => {
                    for c in cands[(j + 1)..].iter() {
                        if let Candidate::Plane(c) = c {
                            if let Ok(x) = three_plane_intersection([a, b, c]) {
                                points.push(x);
                            }
                        }
                    }
                    continue;
                }
            };
            if let Ok(x) = p {
                points.push(x);
            }
        }
    }
    points.retain(|p| p.iter().all(|v| v.is_finite()));
    points
}

/// Vote over the meeting points of all candidates for a common translation.
/// Degenerate (parallel) combinations are skipped.
pub fn convergence_voting(
    cands: &[Candidate],
    epsilon_d: f64,
    threshold: VoteThreshold,
) -> Result<VotingResult, SelectionError> {
    if cands.len() < 2 {
        return Err(SelectionError::InsufficientLines);
    }
    let needed = threshold.for_lines(cands.len());
    let best = meeting_points(cands)
        .into_par_iter()
        .map(|point| {
            let mut members = Vec::new();
            let mut spread = 0.0;
            for (k, c) in cands.iter().enumerate() {
                let dist = c.distance_to(&point);
                if dist < epsilon_d {
                    members.push(k);
                    spread += dist;
                }
            }
            Ballot { point, members, spread }
        })
        .reduce_with(|a, b| if b.beats(&a) { b } else { a })
        .ok_or(SelectionError::InsufficientLines)?;
    let converged = best.members.len() >= needed;
    Ok(VotingResult {
        inlier_set: best.members,
        convergence_point: Some(best.point),
        epsilon_d,
        converged,
        threshold: needed,
    })
}
