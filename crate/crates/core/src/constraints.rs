//! Correspondence classification, the merged quadratic system and the
//! refinement residuals.
//!
//! The system is linear in the monomial vector
//! `r = [s1², s2², s3², s1s2, s1s3, s2s3, s1, s2, s3, 1]` of the CGR
//! parameters and in the scaled translation `τ = (1 + sᵀs) t`:
//! `A r + B τ = 0`, with 8 rows per fully 3D pair and 2 rows per PnL pair.

use nalgebra::{DMatrix, Matrix3, RowSVector, SMatrix, SVector, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{skew, CameraIntrinsics, Extrinsics, Line2D, PluckerLine};

/// Number of monomials in `r`.
pub const MONOMIALS: usize = 10;
pub type Monomials = SVector<f64, MONOMIALS>;
pub type SystemRow = (RowSVector<f64, MONOMIALS>, RowSVector<f64, 3>);

/// Default inlier ratio needed for a depth-fitted line to be trusted.
pub const DEFAULT_CLASSIFICATION_THRESHOLD: f64 = 0.8;
const ENDPOINT_ON_LINE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstraintError {
    #[error("expected a {expected:?} correspondence, got {found:?}")]
    WrongKind { expected: CaseKind, found: CaseKind },
    #[error("no correspondences to assemble")]
    EmptyInput,
    #[error("projected line degenerates to a point (l1² + l2² = {0:.3e})")]
    DegenerateProjection(f64),
    #[error("endpoint {index} is {distance:.3e} m off its line")]
    EndpointOffLine { index: usize, distance: f64 },
    #[error("invalid inlier ratio {0}")]
    InvalidRatio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum CaseKind {
    Full3D,
    PnL,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Full3D,
    PnL,
    Reject,
}

/// Decide which constraint family a matched pair can feed, from the RANSAC
/// inlier ratios of its source and target depth fits.
pub fn classify(source_ratio: f64, target_ratio: f64, threshold: f64) -> Classification {
    if source_ratio < threshold {
        Classification::Reject
    } else if target_ratio >= threshold {
        Classification::Full3D
    } else {
        Classification::PnL
    }
}

/// 3D target line fitted from target depth, with the segment endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetLine3D {
    pub line: PluckerLine,
    pub endpoints: [Vector3<f64>; 2],
}

/// One matched line pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub id: u64,
    kind: CaseKind,
    source_line: PluckerLine,
    source_endpoints: [Vector3<f64>; 2],
    target_line_3d: Option<TargetLine3D>,
    target_line_2d: Line2D,
    pub source_inlier_ratio: f64,
    pub target_inlier_ratio: f64,
}

fn check_endpoints(line: &PluckerLine, endpoints: &[Vector3<f64>; 2]) -> Result<(), ConstraintError> {
    for (index, p) in endpoints.iter().enumerate() {
        let distance = line.distance_to_point(p);
        if distance > ENDPOINT_ON_LINE_TOLERANCE {
            return Err(ConstraintError::EndpointOffLine { index, distance });
        }
    }
    Ok(())
}

fn check_ratio(r: f64) -> Result<(), ConstraintError> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(ConstraintError::InvalidRatio(r))
    }
}

impl Correspondence {
    pub fn full3d(
        id: u64,
        source_line: PluckerLine,
        source_endpoints: [Vector3<f64>; 2],
        target: TargetLine3D,
        target_line_2d: Line2D,
        ratios: (f64, f64),
    ) -> Result<Self, ConstraintError> {
        check_endpoints(&source_line, &source_endpoints)?;
        check_endpoints(&target.line, &target.endpoints)?;
        check_ratio(ratios.0)?;
        check_ratio(ratios.1)?;
        Ok(Self {
            id,
            kind: CaseKind::Full3D,
            source_line,
            source_endpoints,
            target_line_3d: Some(target),
            target_line_2d,
            source_inlier_ratio: ratios.0,
            target_inlier_ratio: ratios.1,
        })
    }

    pub fn pnl(
        id: u64,
        source_line: PluckerLine,
        source_endpoints: [Vector3<f64>; 2],
        target_line_2d: Line2D,
        ratios: (f64, f64),
    ) -> Result<Self, ConstraintError> {
        check_endpoints(&source_line, &source_endpoints)?;
        check_ratio(ratios.0)?;
        check_ratio(ratios.1)?;
        Ok(Self {
            id,
            kind: CaseKind::PnL,
            source_line,
            source_endpoints,
            target_line_3d: None,
            target_line_2d,
            source_inlier_ratio: ratios.0,
            target_inlier_ratio: ratios.1,
        })
    }

    pub fn kind(&self) -> CaseKind {
        self.kind
    }

    pub fn source_line(&self) -> &PluckerLine {
        &self.source_line
    }

    pub fn source_endpoints(&self) -> &[Vector3<f64>; 2] {
        &self.source_endpoints
    }

    pub fn target_line_3d(&self) -> Option<&TargetLine3D> {
        self.target_line_3d.as_ref()
    }

    pub fn target_line_2d(&self) -> &Line2D {
        &self.target_line_2d
    }

    /// Same correspondence re-labelled as PnL, dropping the target 3D line.
    pub fn as_pnl(&self) -> Self {
        Self { kind: CaseKind::PnL, target_line_3d: None, ..self.clone() }
    }

    fn require(&self, expected: CaseKind) -> Result<(), ConstraintError> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(ConstraintError::WrongKind { expected, found: self.kind })
        }
    }

    fn target_3d(&self) -> Result<&TargetLine3D, ConstraintError> {
        self.require(CaseKind::Full3D)?;
        self.target_line_3d
            .as_ref()
            .ok_or(ConstraintError::WrongKind { expected: CaseKind::Full3D, found: CaseKind::PnL })
    }
}

/// `r(s)` in the fixed monomial order.
pub fn monomials(s: &Vector3<f64>) -> Monomials {
    let (a, b, c) = (s.x, s.y, s.z);
    Monomials::from([a * a, b * b, c * c, a * b, a * c, b * c, a, b, c, 1.0])
}

/// Coefficients of `1 + sᵀs` over the monomials.
pub fn scale_coefficients() -> RowSVector<f64, MONOMIALS> {
    RowSVector::<f64, MONOMIALS>::from([1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])
}

/// `W(X)` with `R̄(s) X = W(X) r(s)`.
pub fn rbar_point_coefficients(x: &Vector3<f64>) -> SMatrix<f64, 3, MONOMIALS> {
    let (x1, x2, x3) = (x.x, x.y, x.z);
    let columns = [
        Vector3::new(x1, -x2, -x3),
        Vector3::new(-x1, x2, -x3),
        Vector3::new(-x1, -x2, x3),
        Vector3::new(2.0 * x2, 2.0 * x1, 0.0),
        Vector3::new(2.0 * x3, 0.0, 2.0 * x1),
        Vector3::new(0.0, 2.0 * x3, 2.0 * x2),
        Vector3::new(0.0, -2.0 * x3, 2.0 * x2),
        Vector3::new(2.0 * x3, 0.0, -2.0 * x1),
        Vector3::new(-2.0 * x2, 2.0 * x1, 0.0),
        Vector3::new(x1, x2, x3),
    ];
    SMatrix::<f64, 3, MONOMIALS>::from_columns(&columns)
}

/// The 8 rows a fully 3D pair contributes: for each source endpoint the
/// target line's dual Plücker matrix applied to the transformed point.
pub fn full3d_rows(c: &Correspondence) -> Result<Vec<SystemRow>, ConstraintError> {
    let target = c.target_3d()?;
    let d_hat = skew(target.line.direction());
    let m = target.line.moment();
    let scale = scale_coefficients();
    let mut rows = Vec::with_capacity(8);
    for x in &c.source_endpoints {
        let w = rbar_point_coefficients(x);
        let top = -d_hat * w - m * scale;
        let top_b: Matrix3<f64> = -d_hat;
        for i in 0..3 {
            rows.push((top.row(i).into_owned(), top_b.row(i).into_owned()));
        }
        rows.push((m.transpose() * w, m.transpose()));
    }
    Ok(rows)
}

/// Plane normal `K_tᵀ l_t` of the target image line's preimage.
pub fn preimage_normal(l: &Line2D, k: &CameraIntrinsics) -> Vector3<f64> {
    k.matrix().transpose() * l.coeffs()
}

/// [`preimage_normal`] scaled to unit length, so PnL rows measure
/// point-to-plane distance in meters like the fully 3D rows.
pub fn unit_preimage_normal(l: &Line2D, k: &CameraIntrinsics) -> Vector3<f64> {
    preimage_normal(l, k).normalize()
}

/// The 2 rows a PnL pair contributes: each transformed source endpoint lies
/// on the preimage plane of the target image line.
pub fn pnl_rows(c: &Correspondence, k_t: &CameraIntrinsics) -> Result<Vec<SystemRow>, ConstraintError> {
    c.require(CaseKind::PnL)?;
    let n = unit_preimage_normal(&c.target_line_2d, k_t);
    Ok(c.source_endpoints
        .iter()
        .map(|x| (n.transpose() * rbar_point_coefficients(x), n.transpose()))
        .collect())
}

/// Stacked `A r + B τ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub full3d_count: usize,
    pub pnl_count: usize,
}

impl QuadraticSystem {
    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    /// `A r(s) + B τ`.
    pub fn residual(&self, s: &Vector3<f64>, tau: &Vector3<f64>) -> nalgebra::DVector<f64> {
        &self.a * monomials(s) + &self.b * tau
    }
}

pub fn assemble(cs: &[Correspondence], k_t: &CameraIntrinsics) -> Result<QuadraticSystem, ConstraintError> {
    if cs.is_empty() {
        return Err(ConstraintError::EmptyInput);
    }
    let mut rows = Vec::new();
    let (mut full3d_count, mut pnl_count) = (0, 0);
    for c in cs {
        match c.kind {
            CaseKind::Full3D => {
                rows.extend(full3d_rows(c)?);
                full3d_count += 1;
            }
            CaseKind::PnL => {
                rows.extend(pnl_rows(c, k_t)?);
                pnl_count += 1;
            }
        }
    }
    debug_assert_eq!(rows.len(), 8 * full3d_count + 2 * pnl_count);
    let a = DMatrix::from_fn(rows.len(), MONOMIALS, |i, j| rows[i].0[j]);
    let b = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i].1[j]);
    Ok(QuadraticSystem { a, b, full3d_count, pnl_count })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResidualBlock {
    /// Signed pixel distances of the two target endpoints to the projected line.
    LineReprojection(Vector2<f64>),
    /// Perpendicular offsets (meters) of the two transformed source endpoints.
    PointToLine([Vector3<f64>; 2]),
}

/// Image of the transformed source line in the target camera (unnormalized).
pub fn projected_source_line(c: &Correspondence, t: &Extrinsics, k_t: &CameraIntrinsics) -> Vector3<f64> {
    k_t.line_projection_matrix() * c.source_line.transform(t).moment()
}

pub fn line_reprojection_residual(
    c: &Correspondence,
    t: &Extrinsics,
    k_t: &CameraIntrinsics,
) -> Result<Vector2<f64>, ConstraintError> {
    let l = projected_source_line(c, t, k_t);
    let norm_sq = l.x * l.x + l.y * l.y;
    if norm_sq < 1e-18 {
        return Err(ConstraintError::DegenerateProjection(norm_sq));
    }
    let n = norm_sq.sqrt();
    let [x1, x2] = c.target_line_2d.homogeneous_endpoints();
    Ok(Vector2::new(x1.dot(&l) / n, x2.dot(&l) / n))
}

pub fn point_to_line_residual(c: &Correspondence, t: &Extrinsics) -> Result<[Vector3<f64>; 2], ConstraintError> {
    let target = c.target_3d()?;
    let d = target.line.direction();
    let projector = Matrix3::identity() - d * d.transpose();
    Ok([0, 1].map(|j| {
        projector * (t.transform_point(&c.source_endpoints[j]) - target.endpoints[j])
    }))
}

/// The residual block Eq.-8 style refinement uses for this pair.
pub fn residual_block(
    c: &Correspondence,
    t: &Extrinsics,
    k_t: &CameraIntrinsics,
) -> Result<ResidualBlock, ConstraintError> {
    match c.kind {
        CaseKind::Full3D => point_to_line_residual(c, t).map(ResidualBlock::PointToLine),
        CaseKind::PnL => line_reprojection_residual(c, t, k_t).map(ResidualBlock::LineReprojection),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_z, CgrParams};
    use crate::simulator::exact_correspondence;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kt() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn random_truth(rng: &mut ChaCha8Rng) -> (CgrParams, Extrinsics) {
        let s = CgrParams(Vector3::new(
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
            rng.random_range(-0.6..0.6),
        ));
        let t = Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        (s, Extrinsics::new(s.to_rotation(), t).unwrap())
    }

    /// Random source segment whose transformed endpoints sit in front of the target.
    fn random_pair(rng: &mut ChaCha8Rng, truth: &Extrinsics, kind: CaseKind, id: u64) -> Correspondence {
        loop {
            let tgt = |rng: &mut ChaCha8Rng| {
                Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(1.0..4.0))
            };
            let (q1, q2) = (tgt(rng), tgt(rng));
            if (q2 - q1).norm() < 0.3 {
                continue;
            }
            let inv = truth.inverse();
            let (p1, p2) = (inv.transform_point(&q1), inv.transform_point(&q2));
            if let Ok(c) = exact_correspondence(id, kind, truth, &kt(), &p1, &p2) {
                return c;
            }
        }
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(0.9, 0.9, 0.8), Classification::Full3D);
        assert_eq!(classify(0.9, 0.3, 0.8), Classification::PnL);
        assert_eq!(classify(0.3, 0.9, 0.8), Classification::Reject);
        assert_eq!(classify(0.8, 0.8, 0.8), Classification::Full3D);
    }

    #[test]
    fn full3d_rows_identity_truth_vanish() {
        let truth = Extrinsics::identity();
        let c = exact_correspondence(0, CaseKind::Full3D, &truth, &kt(), &Vector3::new(-0.5, 0.1, 2.0), &Vector3::new(0.7, -0.2, 2.5)).unwrap();
        let rows = full3d_rows(&c).unwrap();
        assert_eq!(rows.len(), 8);
        let r = monomials(&Vector3::zeros());
        for (a, b) in rows {
            assert!(((a * r)[0] + (b * Vector3::zeros())[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_vanish_at_truth_and_not_when_perturbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (s, truth) = random_truth(&mut rng);
        let tau = *truth.translation() * (1.0 + s.0.norm_squared());
        let c = random_pair(&mut rng, &truth, CaseKind::Full3D, 0);
        let sys = assemble(std::slice::from_ref(&c), &kt()).unwrap();
        assert!(sys.residual(&s.0, &tau).amax() < 1e-9);

        let target = c.target_line_3d().unwrap();
        let bad_m = target.line.moment() + Vector3::new(0.01, 0.0, 0.0);
        // Keep d·m = 0 so the perturbed line is still a valid line.
        let d = *target.line.direction();
        let bad_m = bad_m - d * d.dot(&bad_m);
        let bad_line = PluckerLine::new(d, bad_m).unwrap();
        let bad_endpoints = target.endpoints.map(|p| {
            let foot = bad_line.closest_point_to_origin();
            foot + d * d.dot(&(p - foot))
        });
        let bad = Correspondence::full3d(
            1,
            *c.source_line(),
            *c.source_endpoints(),
            TargetLine3D { line: bad_line, endpoints: bad_endpoints },
            *c.target_line_2d(),
            (1.0, 1.0),
        )
        .unwrap();
        let sys = assemble(&[bad], &kt()).unwrap();
        assert!(sys.residual(&s.0, &tau).amax() > 1e-4);
    }

    #[test]
    fn pnl_rows_vanish_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (s, truth) = random_truth(&mut rng);
        let tau = *truth.translation() * (1.0 + s.0.norm_squared());
        let c = random_pair(&mut rng, &truth, CaseKind::PnL, 0);
        let rows = pnl_rows(&c, &kt()).unwrap();
        assert_eq!(rows.len(), 2);
        let r = monomials(&s.0);
        for (a, b) in &rows {
            assert!(((a * r)[0] + (b * tau)[0]).abs() < 1e-9);
        }
        // Rows are linear in the image line coefficients.
        let n = unit_preimage_normal(c.target_line_2d(), &kt());
        let x = c.source_endpoints()[0];
        let scaled = (n * 3.0).transpose() * rbar_point_coefficients(&x);
        assert!((scaled - rows[0].0 * 3.0).amax() < 1e-9);
    }

    #[test]
    fn pnl_row_valid_at_target_origin() {
        // The transformed endpoint may coincide with the target center; rows are polynomial.
        let c = exact_correspondence(0, CaseKind::PnL, &Extrinsics::identity(), &kt(), &Vector3::new(0.2, 0.1, 2.0), &Vector3::new(-0.3, 0.4, 3.0)).unwrap();
        let origin_pair = Correspondence::pnl(1, *c.source_line(), [c.source_line().closest_point_to_origin(), c.source_endpoints()[1]], *c.target_line_2d(), (1.0, 0.0)).unwrap();
        let rows = pnl_rows(&origin_pair, &kt()).unwrap();
        assert!(rows.iter().all(|(a, b)| a.iter().chain(b.iter()).all(|v| v.is_finite())));
    }

    #[test]
    fn wrong_kind_is_reported() {
        let c = exact_correspondence(0, CaseKind::PnL, &Extrinsics::identity(), &kt(), &Vector3::new(0.2, 0.1, 2.0), &Vector3::new(-0.3, 0.4, 3.0)).unwrap();
        assert!(matches!(full3d_rows(&c), Err(ConstraintError::WrongKind { .. })));
        assert!(matches!(point_to_line_residual(&c, &Extrinsics::identity()), Err(ConstraintError::WrongKind { .. })));
        let c = exact_correspondence(0, CaseKind::Full3D, &Extrinsics::identity(), &kt(), &Vector3::new(0.2, 0.1, 2.0), &Vector3::new(-0.3, 0.4, 3.0)).unwrap();
        assert!(matches!(pnl_rows(&c, &kt()), Err(ConstraintError::WrongKind { .. })));
    }

    #[test]
    fn assemble_row_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = Extrinsics::identity();
        let cs: Vec<_> = [CaseKind::Full3D, CaseKind::Full3D, CaseKind::PnL, CaseKind::PnL, CaseKind::PnL]
            .iter()
            .enumerate()
            .map(|(i, k)| random_pair(&mut rng, &truth, *k, i as u64))
            .collect();
        let sys = assemble(&cs, &kt()).unwrap();
        assert_eq!(sys.rows(), 22);
        assert_eq!((sys.full3d_count, sys.pnl_count), (2, 3));

        let sys = assemble(&cs[..1], &kt()).unwrap();
        assert_eq!(sys.a.shape(), (8, 10));
        assert_eq!(sys.b.shape(), (8, 3));

        assert_eq!(assemble(&[], &kt()), Err(ConstraintError::EmptyInput));
    }

    #[test]
    fn reprojection_residual_examples() {
        let k = kt();
        let truth = Extrinsics::new(rot_z(0.1), Vector3::new(0.3, 0.0, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_pair(&mut rng, &truth, CaseKind::PnL, 0);
        let e = line_reprojection_residual(&c, &truth, &k).unwrap();
        assert!(e.amax() < 1e-6);

        // Fronto-parallel horizontal line 1 m away; shifting t by 1 cm moves it 5 px.
        let truth = Extrinsics::identity();
        let c = exact_correspondence(0, CaseKind::PnL, &truth, &k, &Vector3::new(-0.3, 0.1, 1.0), &Vector3::new(0.3, 0.1, 1.0)).unwrap();
        let off = Extrinsics::new(Matrix3::identity(), Vector3::new(0.0, 0.01, 0.0)).unwrap();
        let e = line_reprojection_residual(&c, &off, &k).unwrap();
        assert!(e.x.abs() > 1.0 && (e.x - e.y).abs() < 1e-9, "{e}");
        assert!((e.x.abs() - 5.0).abs() < 1e-9);

        // Vertical image line at u = 400; a 1 px horizontal endpoint shift.
        let src = PluckerLine::from_points(&Vector3::new(0.16, -0.2, 1.0), &Vector3::new(0.16, 0.2, 1.0)).unwrap();
        let l2 = Line2D::from_endpoints(Vector2::new(401.0, 100.0), Vector2::new(401.0, 300.0)).unwrap();
        let c = Correspondence::pnl(0, src, [Vector3::new(0.16, -0.2, 1.0), Vector3::new(0.16, 0.2, 1.0)], l2, (1.0, 0.0)).unwrap();
        let e = line_reprojection_residual(&c, &Extrinsics::identity(), &k).unwrap();
        assert!((e.x.abs() - 1.0).abs() < 1e-9 && (e.y.abs() - 1.0).abs() < 1e-9);

        // A line through the optical center projects to a point.
        let src = PluckerLine::from_points(&Vector3::new(0.0, 0.0, 1.0), &Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let c = Correspondence::pnl(0, src, [Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 2.0)], l2, (1.0, 0.0)).unwrap();
        assert!(matches!(line_reprojection_residual(&c, &Extrinsics::identity(), &k), Err(ConstraintError::DegenerateProjection(_))));
    }

    #[test]
    fn point_to_line_residual_examples() {
        let truth = Extrinsics::identity();
        let c = exact_correspondence(0, CaseKind::Full3D, &truth, &kt(), &Vector3::new(0.1, 0.0, 1.0), &Vector3::new(0.1, 0.0, 2.0)).unwrap();
        let e = point_to_line_residual(&c, &truth).unwrap();
        assert!(e.iter().all(|v| v.norm() < 1e-12));

        // Gap along the target direction is annihilated, a lateral gap is kept.
        let along = Extrinsics::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.37)).unwrap();
        assert!(point_to_line_residual(&c, &along).unwrap().iter().all(|v| v.norm() < 1e-12));
        let lateral = Extrinsics::new(Matrix3::identity(), Vector3::new(0.01, 0.0, 0.0)).unwrap();
        for v in point_to_line_residual(&c, &lateral).unwrap() {
            assert!((v - Vector3::new(0.01, 0.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn point_to_line_invariant_to_sliding_target_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, truth) = random_truth(&mut rng);
        let c = random_pair(&mut rng, &truth, CaseKind::Full3D, 0);
        let target = *c.target_line_3d().unwrap();
        let d = *target.line.direction();
        let slid = Correspondence::full3d(
            0,
            *c.source_line(),
            *c.source_endpoints(),
            TargetLine3D { line: target.line, endpoints: [target.endpoints[0] + d * 0.8, target.endpoints[1] - d * 1.7] },
            *c.target_line_2d(),
            (1.0, 1.0),
        )
        .unwrap();
        let pert = Extrinsics::from_axis_angle(&Vector3::new(0.01, -0.02, 0.03), Vector3::new(0.1, 0.2, -0.1));
        let a = point_to_line_residual(&c, &pert).unwrap();
        let b = point_to_line_residual(&slid, &pert).unwrap();
        for j in 0..2 {
            assert!((a[j] - b[j]).norm() < 1e-12);
        }
    }

    #[test]
    fn full3d_rows_linear_in_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (_, truth) = random_truth(&mut rng);
        let c = random_pair(&mut rng, &truth, CaseKind::Full3D, 0);
        let target = *c.target_line_3d().unwrap();
        let m = target.line.moment();
        let x = c.source_endpoints()[0];
        let w1 = rbar_point_coefficients(&x);
        let w2 = rbar_point_coefficients(&(x * 2.0));
        assert!((w2 - w1 * 2.0).amax() < 1e-12);
        let row = m.transpose() * w1;
        assert!((m.transpose() * w2 - row * 2.0).amax() < 1e-12);
    }
}
