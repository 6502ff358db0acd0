//! Synthetic two-camera rig: ground-truthed observation streams with
//! controllable noise, outliers and depth dropout, plus parameter sweeps.
//!
//! The source camera frame doubles as the world frame. Lines are sampled as
//! segments running from a point in the source frustum to a point in the
//! target frustum, so that they stay visible in both views even when the
//! frustums barely overlap.

use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{CaseKind, ConstraintError, Correspondence, TargetLine3D};
use crate::geometry::{rot_y, CameraIntrinsics, Extrinsics, GeometryError, Line2D, PluckerLine};
use crate::pipeline::{run, CalibrationReport, LineObservation, PipelineConfig, Termination};

/// Rejection-sampling cap per line.
pub const MAX_ATTEMPTS: usize = 10_000;
/// Minimum projected length in either image.
pub const MIN_PIXEL_LENGTH: f64 = 10.0;
/// Minimum 3D length of the part of a line seen by either camera.
pub const MIN_VISIBLE_LENGTH_M: f64 = 0.2;
const NEAR_PLANE_M: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulatorError {
    #[error("infeasible rig spec: {0}")]
    InfeasibleSpec(String),
    #[error("invalid rig spec: {0}")]
    InvalidSpec(String),
    #[error("point behind the target camera")]
    BehindCamera,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..self.max)
        } else {
            self.min
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub truth: Extrinsics,
    pub target_intrinsics: CameraIntrinsics,
    pub source_intrinsics: CameraIntrinsics,
    pub n_lines: usize,
    pub line_length_m: Range,
    pub scene_depth_m: Range,
    pub pixel_noise_sigma: f64,
    pub depth_noise_sigma: f64,
    /// Depth noise along the viewing ray growing with `z²` instead of isotropic.
    pub axial_depth_noise: bool,
    pub outlier_fraction: f64,
    pub samples_per_line: usize,
    /// Fraction of observations with the target depth withheld.
    pub pnl_fraction: f64,
    pub rng_seed: u64,
}

impl Default for RigSpec {
    fn default() -> Self {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).expect("valid intrinsics");
        Self {
            truth: Extrinsics::new(rot_y(20f64.to_radians()), Vector3::new(0.3, 0.0, 0.0)).expect("rotation"),
            target_intrinsics: k,
            source_intrinsics: k,
            n_lines: 20,
            line_length_m: Range::new(0.5, 3.0),
            scene_depth_m: Range::new(0.8, 4.0),
            pixel_noise_sigma: 0.0,
            depth_noise_sigma: 0.0,
            axial_depth_noise: false,
            outlier_fraction: 0.0,
            samples_per_line: 40,
            pnl_fraction: 0.3,
            rng_seed: 0,
        }
    }
}

impl RigSpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        let bad = |m: String| Err(SimulatorError::InvalidSpec(m));
        self.target_intrinsics.validate()?;
        self.source_intrinsics.validate()?;
        if self.n_lines == 0 {
            return bad("n_lines must be positive".into());
        }
        if self.samples_per_line < 2 {
            return bad("samples_per_line must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad(format!("outlier_fraction {} not in [0, 1)", self.outlier_fraction));
        }
        if !(0.0..=1.0).contains(&self.pnl_fraction) {
            return bad(format!("pnl_fraction {} not in [0, 1]", self.pnl_fraction));
        }
        if !(self.pixel_noise_sigma >= 0.0 && self.depth_noise_sigma >= 0.0) {
            return bad("noise sigmas must be non-negative".into());
        }
        for (name, r) in [("line_length_m", self.line_length_m), ("scene_depth_m", self.scene_depth_m)] {
            if !(r.min > 0.0 && r.max >= r.min && r.max.is_finite()) {
                return bad(format!("{name} must satisfy 0 < min <= max"));
            }
        }
        Ok(())
    }
}

/// Ground truth for one emitted observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub id: u64,
    /// The pair mixes two different true lines.
    pub outlier: bool,
    pub kind: CaseKind,
    /// Segment seen by the source camera, world (= source) frame.
    pub source_segment: [[f64; 3]; 2],
    /// Segment seen by the target camera, world frame. Same line as
    /// `source_segment` unless the pair is an outlier.
    pub target_segment: [[f64; 3]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub truth: Extrinsics,
    pub records: Vec<GroundTruthRecord>,
}

/// Noiseless correspondence for the segment `p1 p2` given in the source
/// frame, with inlier ratios `(1, 1)` for fully 3D pairs and `(1, 0)` for PnL.
pub fn exact_correspondence(
    id: u64,
    kind: CaseKind,
    truth: &Extrinsics,
    k_t: &CameraIntrinsics,
    p1: &Vector3<f64>,
    p2: &Vector3<f64>,
) -> Result<Correspondence, SimulatorError> {
    let source = PluckerLine::from_points(p1, p2)?;
    let q1 = truth.transform_point(p1);
    let q2 = truth.transform_point(p2);
    let x1 = k_t.project(&q1).ok_or(SimulatorError::BehindCamera)?;
    let x2 = k_t.project(&q2).ok_or(SimulatorError::BehindCamera)?;
    let image = Line2D::from_endpoints(x1, x2)?;
    Ok(match kind {
        CaseKind::Full3D => Correspondence::full3d(
            id,
            source,
            [*p1, *p2],
            TargetLine3D { line: PluckerLine::from_points(&q1, &q2)?, endpoints: [q1, q2] },
            image,
            (1.0, 1.0),
        )?,
        CaseKind::PnL => Correspondence::pnl(id, source, [*p1, *p2], image, (1.0, 0.0))?,
    })
}

/// Clip the segment `a b` (camera frame) to the camera's viewing frustum.
/// Returns the parameter interval on `a + λ (b − a)`.
fn clip_to_frustum(k: &CameraIntrinsics, a: &Vector3<f64>, b: &Vector3<f64>) -> Option<(f64, f64)> {
    let (w, h) = (f64::from(k.width), f64::from(k.height));
    // Half-spaces n·p + c ≥ 0.
    let planes = [
        (Vector3::new(0.0, 0.0, 1.0), -NEAR_PLANE_M),
        (Vector3::new(k.fx, 0.0, k.cx), 0.0),
        (Vector3::new(-k.fx, 0.0, w - k.cx), 0.0),
        (Vector3::new(0.0, k.fy, k.cy), 0.0),
        (Vector3::new(0.0, -k.fy, h - k.cy), 0.0),
    ];
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let d = b - a;
    for (n, c) in planes {
        let f0 = n.dot(a) + c;
        let slope = n.dot(&d);
        if slope.abs() < 1e-15 {
            if f0 < 0.0 {
                return None;
            }
            continue;
        }
        let root = -f0 / slope;
        if slope > 0.0 {
            lo = lo.max(root);
        } else {
            hi = hi.min(root);
        }
    }
    (hi > lo).then_some((lo, hi))
}

/// A sampled line with the parts each camera sees (source frame).
#[derive(Debug, Clone, Copy)]
struct VisibleLine {
    source_part: [Vector3<f64>; 2],
    target_part: [Vector3<f64>; 2],
}

fn pixel_length(k: &CameraIntrinsics, seg: &[Vector3<f64>; 2]) -> f64 {
    match (k.project(&seg[0]), k.project(&seg[1])) {
        (Some(a), Some(b)) => (a - b).norm(),
        _ => 0.0,
    }
}

fn sample_frustum_point(k: &CameraIntrinsics, depth: &Range, rng: &mut impl Rng) -> Vector3<f64> {
    let px = Vector2::new(rng.random_range(0.0..f64::from(k.width)), rng.random_range(0.0..f64::from(k.height)));
    k.back_project(&px) * depth.sample(rng)
}

fn sample_line(spec: &RigSpec, rng: &mut impl Rng) -> Result<VisibleLine, SimulatorError> {
    let inv = spec.truth.inverse();
    for _ in 0..MAX_ATTEMPTS {
        let a = sample_frustum_point(&spec.source_intrinsics, &spec.scene_depth_m, rng);
        let b = inv.transform_point(&sample_frustum_point(&spec.target_intrinsics, &spec.scene_depth_m, rng));
        let len = (b - a).norm();
        if len < spec.line_length_m.min || len > spec.line_length_m.max {
            continue;
        }
        let Some((s0, s1)) = clip_to_frustum(&spec.source_intrinsics, &a, &b) else { continue };
        let (ta, tb) = (spec.truth.transform_point(&a), spec.truth.transform_point(&b));
        let Some((t0, t1)) = clip_to_frustum(&spec.target_intrinsics, &ta, &tb) else { continue };
        let at = |l: f64| a + (b - a) * l;
        let source_part = [at(s0), at(s1)];
        let target_part = [at(t0), at(t1)];
        let target_cam = target_part.map(|p| spec.truth.transform_point(&p));
        if (source_part[1] - source_part[0]).norm() < MIN_VISIBLE_LENGTH_M
            || (target_part[1] - target_part[0]).norm() < MIN_VISIBLE_LENGTH_M
            || pixel_length(&spec.source_intrinsics, &source_part) < MIN_PIXEL_LENGTH
            || pixel_length(&spec.target_intrinsics, &target_cam) < MIN_PIXEL_LENGTH
        {
            continue;
        }
        return Ok(VisibleLine { source_part, target_part });
    }
    Err(SimulatorError::InfeasibleSpec(format!(
        "no line visible in both cameras after {MAX_ATTEMPTS} attempts (lengths {:?} m, depths {:?} m, each part ≥ {MIN_VISIBLE_LENGTH_M} m and ≥ {MIN_PIXEL_LENGTH} px)",
        (spec.line_length_m.min, spec.line_length_m.max),
        (spec.scene_depth_m.min, spec.scene_depth_m.max),
    )))
}

struct Noise {
    pixel: Option<Normal<f64>>,
    depth: Option<Normal<f64>>,
    axial: bool,
}

impl Noise {
    fn new(spec: &RigSpec) -> Self {
        let normal = |s: f64| (s > 0.0).then(|| Normal::new(0.0, s).expect("finite sigma"));
        Self { pixel: normal(spec.pixel_noise_sigma), depth: normal(spec.depth_noise_sigma), axial: spec.axial_depth_noise }
    }

    fn pixel(&self, x: Vector2<f64>, rng: &mut impl Rng) -> Vector2<f64> {
        match &self.pixel {
            Some(n) => x + Vector2::new(n.sample(rng), n.sample(rng)),
            None => x,
        }
    }

    /// `p` in the frame of the camera that measured it.
    fn point(&self, p: Vector3<f64>, rng: &mut impl Rng) -> Vector3<f64> {
        match &self.depth {
            Some(n) if self.axial => p + p.normalize() * (n.sample(rng) * p.z * p.z),
            Some(n) => p + Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng)),
            None => p,
        }
    }
}

fn samples_along(seg: &[Vector3<f64>; 2], count: usize, noise: &Noise, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    (0..count)
        .map(|i| {
            let l = i as f64 / (count - 1) as f64;
            noise.point(seg[0] + (seg[1] - seg[0]) * l, rng)
        })
        .collect()
}

fn image_line(
    k: &CameraIntrinsics,
    seg: &[Vector3<f64>; 2],
    noise: &Noise,
    rng: &mut impl Rng,
) -> Result<Line2D, SimulatorError> {
    let x1 = k.project(&seg[0]).ok_or(SimulatorError::BehindCamera)?;
    let x2 = k.project(&seg[1]).ok_or(SimulatorError::BehindCamera)?;
    Ok(Line2D::from_endpoints(noise.pixel(x1, rng), noise.pixel(x2, rng))?)
}

fn to_array(p: &Vector3<f64>) -> [f64; 3] {
    [p.x, p.y, p.z]
}

/// Generate an observation stream and its ground truth.
///
/// Exactly `⌊outlier_fraction · n_lines⌋` observations are outliers, built
/// from the source data of one true line and the target data of another.
/// `round(pnl_fraction · n_lines)` observations carry no target samples.
pub fn generate(spec: &RigSpec) -> Result<(Vec<LineObservation>, GroundTruth), SimulatorError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let noise = Noise::new(spec);
    let n = spec.n_lines;
    let n_outliers = (spec.outlier_fraction * n as f64 + 1e-9).floor() as usize;
    let n_pnl = (spec.pnl_fraction * n as f64).round() as usize;
    let mut outlier_flags: Vec<bool> = (0..n).map(|i| i < n_outliers).collect();
    let mut pnl_flags: Vec<bool> = (0..n).map(|i| i < n_pnl).collect();
    outlier_flags.shuffle(&mut rng);
    pnl_flags.shuffle(&mut rng);

    let mut stream = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for (i, (&outlier, &pnl)) in outlier_flags.iter().zip(&pnl_flags).enumerate() {
        let source_line = sample_line(spec, &mut rng)?;
        let target_line = if outlier { sample_line(spec, &mut rng)? } else { source_line };
        let src = source_line.source_part;
        let tgt_world = target_line.target_part;
        let tgt = tgt_world.map(|p| spec.truth.transform_point(&p));

        let source_samples = samples_along(&src, spec.samples_per_line, &noise, &mut rng);
        let source_2d = image_line(&spec.source_intrinsics, &src, &noise, &mut rng)?;
        let target_2d = image_line(&spec.target_intrinsics, &tgt, &noise, &mut rng)?;
        let target_samples = (!pnl).then(|| samples_along(&tgt, spec.samples_per_line, &noise, &mut rng));

        let id = i as u64;
        stream.push(LineObservation { id, target_2d, source_2d, target_samples, source_samples });
        records.push(GroundTruthRecord {
            id,
            outlier,
            kind: if pnl { CaseKind::PnL } else { CaseKind::Full3D },
            source_segment: src.map(|p| to_array(&p)),
            target_segment: tgt_world.map(|p| to_array(&p)),
        });
    }
    Ok((stream, GroundTruth { truth: spec.truth, records }))
}

/// Rotation (about the y axis) and baseline (along x) grid of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub rotations_deg: Vec<f64>,
    pub baselines_m: Vec<f64>,
    /// Seeds run per grid cell.
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub rotation_deg: f64,
    pub baseline_m: f64,
    pub seed: u64,
    pub rot_err_deg: Option<f64>,
    pub trans_err_mm: Option<f64>,
    pub converged: bool,
    pub report: Option<CalibrationReport>,
    pub error: Option<String>,
}

/// Seed of sweep run `index`: splitmix64 of `base ⊕ golden-ratio · (index + 1)`.
pub fn cell_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Truth of a sweep cell: rotation about y, baseline `(b, 0, 0)`.
pub fn sweep_truth(rotation_deg: f64, baseline_m: f64) -> Extrinsics {
    Extrinsics::new(rot_y(rotation_deg.to_radians()), Vector3::new(baseline_m, 0.0, 0.0)).expect("rotation about y")
}

/// Run the pipeline over every grid cell and repeat, in parallel.
///
/// Cells are ordered rotation-major, then baseline, then repeat; each run
/// uses [`cell_seed`] of its position for both the rig and the pipeline.
/// Failing cells are recorded and the sweep continues.
pub fn sweep(base: &RigSpec, grid: &SweepGrid, cfg: &PipelineConfig) -> Result<Vec<SweepCell>, SimulatorError> {
    if grid.rotations_deg.is_empty() || grid.baselines_m.is_empty() || grid.repeats == 0 {
        return Err(SimulatorError::InvalidSpec("sweep grid must be non-empty".into()));
    }
    base.validate()?;
    let jobs: Vec<(f64, f64)> = grid
        .rotations_deg
        .iter()
        .flat_map(|&r| grid.baselines_m.iter().flat_map(move |&b| std::iter::repeat_n((r, b), grid.repeats)))
        .collect();
    Ok(jobs
        .par_iter()
        .enumerate()
        .map(|(index, &(rotation_deg, baseline_m))| {
            let seed = cell_seed(base.rng_seed, index as u64);
            let spec = RigSpec { truth: sweep_truth(rotation_deg, baseline_m), rng_seed: seed, ..base.clone() };
            let cfg = PipelineConfig { rng_seed: seed, ..cfg.clone() };
            let mut cell = SweepCell {
                rotation_deg,
                baseline_m,
                seed,
                rot_err_deg: None,
                trans_err_mm: None,
                converged: false,
                report: None,
                error: None,
            };
            let outcome = generate(&spec)
                .map_err(|e| e.to_string())
                .and_then(|(stream, _)| run(&stream, &spec.target_intrinsics, &cfg).map_err(|e| e.to_string()));
            match outcome {
                Ok(rep) => {
                    if rep.termination != Termination::Aborted {
                        cell.rot_err_deg = Some(rep.extrinsics.rotation_error_deg(&spec.truth));
                        cell.trans_err_mm = Some(rep.extrinsics.translation_error(&spec.truth) * 1e3);
                    }
                    cell.converged = rep.termination == Termination::Converged;
                    cell.report = Some(rep);
                }
                Err(e) => cell.error = Some(e),
            }
            cell
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::line_reprojection_residual;

    #[test]
    fn frustum_clipping() {
        let k = RigSpec::default().source_intrinsics;
        let inside = clip_to_frustum(&k, &Vector3::new(0.0, 0.0, 1.0), &Vector3::new(0.0, 0.0, 3.0)).unwrap();
        assert_eq!(inside, (0.0, 1.0));
        // Crosses the right image border at x/z = 320/500.
        let (lo, hi) = clip_to_frustum(&k, &Vector3::new(0.0, 0.0, 2.0), &Vector3::new(2.56, 0.0, 2.0)).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 0.5).abs() < 1e-12);
        assert!(clip_to_frustum(&k, &Vector3::new(0.0, 0.0, -1.0), &Vector3::new(0.0, 0.0, -3.0)).is_none());
    }

    #[test]
    fn outlier_bookkeeping() {
        let spec = RigSpec { n_lines: 20, outlier_fraction: 0.3, rng_seed: 11, ..RigSpec::default() };
        let (stream, truth) = generate(&spec).unwrap();
        assert_eq!(stream.len(), 20);
        assert_eq!(truth.records.len(), 20);
        assert_eq!(truth.records.iter().filter(|r| r.outlier).count(), 6);
        let pnl = stream.iter().filter(|o| o.target_samples.is_none()).count();
        assert_eq!(pnl, 6);
    }

    #[test]
    fn noiseless_observations_are_exact_images() {
        let spec = RigSpec { n_lines: 15, rng_seed: 12, ..RigSpec::default() };
        let (stream, truth) = generate(&spec).unwrap();
        for (obs, rec) in stream.iter().zip(&truth.records) {
            let [a, b] = rec.source_segment.map(Vector3::from);
            let c = exact_correspondence(obs.id, CaseKind::PnL, &spec.truth, &spec.target_intrinsics, &a, &b).unwrap();
            let c = Correspondence::pnl(obs.id, *c.source_line(), *c.source_endpoints(), obs.target_2d, (1.0, 0.0)).unwrap();
            let r = line_reprojection_residual(&c, &spec.truth, &spec.target_intrinsics).unwrap();
            assert!(r.iter().all(|v| v.abs() < 1e-9), "{r:?}");
            let line = PluckerLine::from_points(&a, &b).unwrap();
            for p in &obs.source_samples {
                assert!(line.distance_to_point(p) < 1e-12);
            }
            let mid = spec.source_intrinsics.project(&((a + b) / 2.0)).unwrap();
            assert!(obs.source_2d.signed_distance(&mid).abs() < 1e-9);
        }
    }

    #[test]
    fn wide_rotation_rig_is_feasible() {
        let spec = RigSpec { truth: sweep_truth(80.0, 0.45), n_lines: 5, rng_seed: 13, ..RigSpec::default() };
        let (stream, _) = generate(&spec).unwrap();
        assert_eq!(stream.len(), 5);
    }

    #[test]
    fn impossible_rig_is_reported() {
        let spec = RigSpec {
            truth: Extrinsics::new(rot_y(std::f64::consts::PI), Vector3::new(0.0, 0.0, -20.0)).unwrap(),
            n_lines: 1,
            ..RigSpec::default()
        };
        assert!(matches!(generate(&spec), Err(SimulatorError::InfeasibleSpec(_))));
    }

    #[test]
    fn generation_is_seeded() {
        let spec = RigSpec { pixel_noise_sigma: 0.5, depth_noise_sigma: 0.003, rng_seed: 14, ..RigSpec::default() };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = RigSpec { rng_seed: 15, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn sweep_grid_shape_and_order() {
        let base = RigSpec { n_lines: 10, ..RigSpec::default() };
        let grid = SweepGrid { rotations_deg: vec![0.0, 40.0], baselines_m: vec![0.2, 0.3, 0.4], repeats: 1 };
        let cells = sweep(&base, &grid, &PipelineConfig::default()).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!((cells[4].rotation_deg, cells[4].baseline_m), (40.0, 0.3));
        for c in &cells {
            assert!(c.converged, "{c:?}");
            assert!(c.rot_err_deg.unwrap() < 1e-5 && c.trans_err_mm.unwrap() < 1e-3);
        }
    }
}
