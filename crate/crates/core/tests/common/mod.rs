//! Shared generators, a brute-force solver oracle and the property suites
//! used by both the property tests and the acceptance run.
#![allow(dead_code)]

use linecal::constraints::QuadraticSystem;
use linecal::geometry::{orthonormality_residual, project_so3, transform_line};
use linecal::selection::candidate;
use linecal::simulator::exact_correspondence;
use linecal::solver::{jacobian_check, point_weight_for};
use linecal::{CameraIntrinsics, CaseKind, CgrParams, Correspondence, Extrinsics, PluckerLine, SolverConfig};
use nalgebra::{DMatrix, Matrix3, SMatrix, Vector2, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::Rng;

pub fn kt() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
}

pub fn unit_vector<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Rotation by at most `max_deg` about a random axis, translation of at most `max_t` meters.
pub fn random_truth<R: Rng>(rng: &mut R, max_deg: f64, max_t: f64) -> Extrinsics {
    let angle = rng.random_range(0.0..max_deg).to_radians();
    let t = unit_vector(rng) * rng.random_range(0.0..max_t);
    Extrinsics::from_axis_angle(&(unit_vector(rng) * angle), t)
}

/// A random point the target camera sees at depth 1 to 4 m.
fn target_point<R: Rng>(rng: &mut R, k: &CameraIntrinsics) -> Vector3<f64> {
    let px = Vector2::new(rng.random_range(20.0..620.0), rng.random_range(20.0..460.0));
    k.back_project(&px) * rng.random_range(1.0..4.0)
}

/// Noiseless correspondence for a random segment visible in the target camera.
pub fn random_correspondence<R: Rng>(rng: &mut R, truth: &Extrinsics, kind: CaseKind, id: u64) -> Correspondence {
    let k = kt();
    let inv = truth.inverse();
    loop {
        let (a, b) = (target_point(rng, &k), target_point(rng, &k));
        if (a - b).norm() < 0.3 {
            continue;
        }
        if let Ok(c) = exact_correspondence(id, kind, truth, &k, &inv.transform_point(&a), &inv.transform_point(&b)) {
            return c;
        }
    }
}

/// `n` correspondences, the first `n_full` fully 3D and the rest PnL.
pub fn random_correspondences<R: Rng>(rng: &mut R, truth: &Extrinsics, n: usize, n_full: usize) -> Vec<Correspondence> {
    (0..n)
        .map(|i| {
            let kind = if i < n_full { CaseKind::Full3D } else { CaseKind::PnL };
            random_correspondence(rng, truth, kind, i as u64)
        })
        .collect()
}

// ------------------------------------------------------------------ oracle

fn oracle_monomials(s: &Vector3<f64>) -> SMatrix<f64, 10, 1> {
    let (a, b, c) = (s.x, s.y, s.z);
    SMatrix::<f64, 10, 1>::from_column_slice(&[a * a, b * b, c * c, a * b, a * c, b * c, a, b, c, 1.0])
}

fn oracle_monomial_jacobian(s: &Vector3<f64>) -> SMatrix<f64, 10, 3> {
    let (a, b, c) = (s.x, s.y, s.z);
    SMatrix::<f64, 10, 3>::from_row_slice(&[
        2.0 * a, 0.0, 0.0, 0.0, 2.0 * b, 0.0, 0.0, 0.0, 2.0 * c, //
        b, a, 0.0, c, 0.0, a, 0.0, c, b, //
        1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
    ])
}

/// Brute-force root of `min_τ ‖A r(s) + B τ‖`: grid search over
/// `[-half, half]³` followed by Gauss-Newton from the best grid minima.
pub fn oracle_solve(sys: &QuadraticSystem, half: f64, step: f64) -> Vector3<f64> {
    // Translation is free, so only the part of A r orthogonal to col(B) counts.
    let q = sys.b.clone().qr().q();
    let m: DMatrix<f64> = &sys.a - &q * (q.transpose() * &sys.a);
    let h = SMatrix::<f64, 10, 10>::from_iterator((m.transpose() * &m).iter().copied());
    let cost = |s: &Vector3<f64>| {
        let r = oracle_monomials(s);
        (r.transpose() * h * r)[0]
    };

    let n = (2.0 * half / step).round() as usize + 1;
    let at = |i: usize| -half + step * i as f64;
    let idx = |i: usize, j: usize, k: usize| (i * n + j) * n + k;
    let mut grid = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                grid[idx(i, j, k)] = cost(&Vector3::new(at(i), at(j), at(k)));
            }
        }
    }
    let mut minima = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let v = grid[idx(i, j, k)];
                let neighbours = [(1i64, 0i64, 0i64), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                let local = neighbours.iter().all(|&(di, dj, dk)| {
                    let (a, b, c) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                    let inside = |x: i64| x >= 0 && x < n as i64;
                    !(inside(a) && inside(b) && inside(c)) || grid[idx(a as usize, b as usize, c as usize)] >= v
                });
                if local {
                    minima.push((v, Vector3::new(at(i), at(j), at(k))));
                }
            }
        }
    }
    minima.sort_by(|a, b| a.0.total_cmp(&b.0));

    let polish = |mut s: Vector3<f64>| {
        let mut lambda = 1e-3;
        let mut c = cost(&s);
        for _ in 0..200 {
            let j = &m * oracle_monomial_jacobian(&s);
            let e = &m * oracle_monomials(&s);
            let jtj = j.transpose() * &j;
            let g = j.transpose() * e;
            let mut moved = false;
            while lambda < 1e12 {
                let damped = Matrix3::from_iterator(jtj.iter().copied()) + Matrix3::identity() * lambda;
                let Some(chol) = damped.cholesky() else { break };
                let next = s - chol.solve(&Vector3::from_iterator(g.iter().copied()));
                let nc = cost(&next);
                if nc < c {
                    s = next;
                    c = nc;
                    lambda = (lambda * 0.1).max(1e-15);
                    moved = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !moved {
                break;
            }
        }
        (c, s)
    };
    minima
        .iter()
        .take(16)
        .map(|&(_, s)| polish(s))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("grid has a minimum")
        .1
}

// ------------------------------------------------------------ properties

pub const PROPERTY_CASES: u32 = 1000;

fn runner(seed: u8) -> TestRunner {
    let config = Config { cases: PROPERTY_CASES, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, proptest::test_runner::TestRng::from_seed(
        proptest::test_runner::RngAlgorithm::ChaCha,
        &[seed; 32],
    ))
}

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(a, b, c)| Vector3::new(a, b, c))
}

fn pose() -> impl Strategy<Value = Extrinsics> {
    (vec3(1.0), 0.0..3.1f64, vec3(2.0)).prop_filter_map("axis too short", |(axis, angle, t)| {
        (axis.norm() > 0.1).then(|| Extrinsics::from_axis_angle(&(axis.normalize() * angle), t))
    })
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if cond { Ok(()) } else { Err(TestCaseError::fail(msg())) }
}

fn line_close(a: &PluckerLine, b: &PluckerLine, tol: f64) -> bool {
    (a.direction() - b.direction()).norm() < tol && (a.moment() - b.moment()).norm() < tol
}

/// Plücker invariants, transform preservation and inverse round-trips.
pub fn plucker_suite() -> Result<(), String> {
    let strategy = (vec3(5.0), vec3(5.0), pose()).prop_filter("coincident points", |(a, b, _)| (a - b).norm() > 1e-3);
    runner(1)
        .run(&strategy, |(a, b, t)| {
            let l = PluckerLine::from_points(&a, &b).unwrap();
            check((l.direction().norm() - 1.0).abs() < 1e-12, || "direction not unit".into())?;
            check(l.direction().dot(l.moment()).abs() < 1e-9, || "d·m ≠ 0".into())?;
            let moved = transform_line(&l, &t);
            check((moved.direction().norm() - 1.0).abs() < 1e-9, || "transformed direction not unit".into())?;
            check(moved.direction().dot(moved.moment()).abs() < 1e-9, || "transformed d·m ≠ 0".into())?;
            let back = transform_line(&moved, &t.inverse());
            check(line_close(&back, &l, 1e-9), || format!("round trip {back:?} vs {l:?}"))?;
            // The transformed line passes through the transformed points.
            check(moved.distance_to_point(&t.transform_point(&a)) < 1e-9, || "point left the line".into())
        })
        .map_err(|e| e.to_string())
}

/// CGR rotations are orthonormal and invert back to their parameters.
pub fn cgr_suite() -> Result<(), String> {
    let strategy = vec3(10.0).prop_filter("|s| > 10", |s| s.norm() <= 10.0);
    runner(2)
        .run(&strategy, |s| {
            let r = CgrParams(s).to_rotation();
            check(orthonormality_residual(&r) < 1e-10, || format!("residual {}", orthonormality_residual(&r)))?;
            check(r.determinant() > 0.0, || "reflection".into())?;
            let back = CgrParams::from_rotation(&r).unwrap().0;
            check((back - s).norm() < 1e-8, || format!("{back} vs {s}"))
        })
        .map_err(|e| e.to_string())
}

/// `project_so3` fixes rotations and removes positive scale.
pub fn so3_projection_suite() -> Result<(), String> {
    let strategy = (pose(), 1e-3..1e3f64);
    runner(3)
        .run(&strategy, |(t, alpha)| {
            let r = *t.rotation();
            let p = project_so3(&r).unwrap();
            check((p.rotation - r).amax() < 1e-12, || "rotation moved".into())?;
            check(p.distance() < 1e-12, || format!("distance {}", p.distance()))?;
            let scaled = project_so3(&(r * alpha)).unwrap();
            check((scaled.rotation - r).amax() < 1e-12, || "scale not removed".into())
        })
        .map_err(|e| e.to_string())
}

/// With the true rotation every candidate (line or plane) holds the true translation.
pub fn candidate_containment_suite() -> Result<(), String> {
    let strategy = (any::<u64>(), any::<bool>());
    runner(4)
        .run(&strategy, |(seed, full)| {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let truth = random_truth(&mut rng, 80.0, 0.6);
            let kind = if full { CaseKind::Full3D } else { CaseKind::PnL };
            let c = random_correspondence(&mut rng, &truth, kind, 0);
            let cand = candidate(&c, truth.rotation(), &kt()).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let d = cand.distance_to(truth.translation());
            check(d < 1e-9, || format!("{kind:?} candidate misses t by {d}"))
        })
        .map_err(|e| e.to_string())
}

/// Analytic refinement Jacobian against central differences.
pub fn jacobian_suite() -> Result<(), String> {
    let strategy = (any::<u64>(), 0.0..0.2f64);
    runner(5).run(&strategy, |(seed, perturb)| {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let truth = random_truth(&mut rng, 80.0, 0.6);
        let cs = random_correspondences(&mut rng, &truth, 6, 3);
        let offset = Extrinsics::from_axis_angle(&(unit_vector(&mut rng) * perturb), unit_vector(&mut rng) * perturb);
        let at = offset.compose(&truth);
        let weight = point_weight_for(&cs, &kt(), &SolverConfig::default());
        let rel = jacobian_check(&cs, &kt(), &at, weight).map_err(|e| TestCaseError::fail(e.to_string()))?;
        check(rel < 1e-5, || format!("relative Jacobian error {rel}"))
    })
    .map_err(|e| e.to_string())
}

pub fn property_suites() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("Plücker invariants and transform round trips", plucker_suite),
        ("CGR round trip", cgr_suite),
        ("project_so3 fixed points and scale invariance", so3_projection_suite),
        ("candidate ground-truth containment, both kinds", candidate_containment_suite),
        ("Jacobian vs finite differences", jacobian_suite),
    ]
}
