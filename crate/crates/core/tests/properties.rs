mod common;

use std::time::Instant;

use common::*;
use linecal::constraints::{assemble, line_reprojection_residual, monomials};
use linecal::io::CalibrationFile;
use linecal::pipeline::{build_correspondence, ingest, run, solve_and_refine, PipelineState, RoundOutcome};
use linecal::selection::{candidate, convergence_voting, Candidate, VoteThreshold};
use linecal::simulator::generate;
use linecal::solver::{eliminate_translation, refine, solve_quadratic_system};
use linecal::{CaseKind, Correspondence, Extrinsics, Line2D, PipelineConfig, RigSpec, SolverConfig, Termination};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mixed(seed: u64, n: usize) -> (Extrinsics, Vec<Correspondence>) {
    let mut r = rng(seed);
    let truth = random_truth(&mut r, 80.0, 0.6);
    let n_full = r.random_range(1..n);
    (truth, random_correspondences(&mut r, &truth, n, n_full))
}

#[test]
fn plucker_properties() {
    plucker_suite().unwrap();
}

#[test]
fn cgr_properties() {
    cgr_suite().unwrap();
}

#[test]
fn so3_projection_properties() {
    so3_projection_suite().unwrap();
}

#[test]
fn candidate_containment_properties() {
    candidate_containment_suite().unwrap();
}

#[test]
fn jacobian_properties() {
    jacobian_suite().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn system_vanishes_at_truth(seed in any::<u64>(), full in any::<bool>()) {
        let mut r = rng(seed);
        let truth = random_truth(&mut r, 80.0, 0.6);
        let kind = if full { CaseKind::Full3D } else { CaseKind::PnL };
        let c = random_correspondence(&mut r, &truth, kind, 0);
        let sys = assemble(&[c], &kt()).unwrap();
        let s = linecal::CgrParams::from_rotation(truth.rotation()).unwrap().0;
        let tau = truth.translation() * (1.0 + s.norm_squared());
        prop_assert!(sys.residual(&s, &tau).amax() < 1e-8);
    }

    #[test]
    fn image_line_annihilates_projected_points(seed in any::<u64>(), lambda in -2.0..3.0f64) {
        let mut r = rng(seed);
        let truth = random_truth(&mut r, 80.0, 0.6);
        let c = random_correspondence(&mut r, &truth, CaseKind::PnL, 0);
        let k = kt();
        let [p, q] = c.source_endpoints();
        let x = truth.transform_point(&(p + (q - p) * lambda));
        prop_assume!(x.z > 0.05);
        let l = k.line_projection_matrix() * c.source_line().transform(&truth).moment();
        let px = k.project(&x).unwrap();
        let dist = (l.x * px.x + l.y * px.y + l.z) / (l.x * l.x + l.y * l.y).sqrt();
        prop_assert!(dist.abs() < 1e-6, "{}", dist);
    }

    #[test]
    fn reprojection_residual_ignores_line_scaling(seed in any::<u64>(), scale in 0.01..100.0f64) {
        let mut r = rng(seed);
        let truth = random_truth(&mut r, 80.0, 0.6);
        let c = random_correspondence(&mut r, &truth, CaseKind::PnL, 0);
        // Endpoints spread along the same image line give a rescaled line vector.
        let [a, b] = *c.target_line_2d().endpoints();
        let stretched = Line2D::from_endpoints(a, a + (b - a) * scale).unwrap();
        let moved = Correspondence::pnl(0, *c.source_line(), *c.source_endpoints(), stretched, (1.0, 0.0)).unwrap();
        let off = Extrinsics::from_axis_angle(&Vector3::new(0.01, -0.02, 0.005), Vector3::new(0.01, 0.0, -0.02)).compose(&truth);
        let e0 = line_reprojection_residual(&c, &off, &kt()).unwrap();
        let e1 = line_reprojection_residual(&moved, &off, &kt()).unwrap();
        // Residuals are point-to-line distances of the observed endpoints.
        prop_assert!((e0[0] - e1[0]).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn elimination_identity(seed in any::<u64>()) {
        let (_, cs) = mixed(seed, 6);
        let sys = assemble(&cs, &kt()).unwrap();
        let elim = eliminate_translation(&sys).unwrap();
        let mut r = rng(seed ^ 1);
        let s = Vector3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let m = monomials(&s);
        let lhs = (&sys.a + &sys.b * nalgebra::DMatrix::from_iterator(3, 10, elim.tau_map.iter().copied())) * m;
        prop_assert!((lhs - &elim.g * m).amax() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn noiseless_solve_and_refine_recovers_truth(seed in any::<u64>()) {
        let (truth, cs) = mixed(seed, 6);
        let (pose, _, _) = solve_and_refine(&cs, &kt(), &SolverConfig::default()).unwrap();
        prop_assert!(pose.rotation_error_deg(&truth) < 1e-5);
        prop_assert!(pose.translation_error(&truth) < 1e-6);
    }

    #[test]
    fn solution_is_order_free(seed in any::<u64>()) {
        let (_, mut cs) = mixed(seed, 7);
        let a = solve_quadratic_system(&assemble(&cs, &kt()).unwrap(), &SolverConfig::default()).unwrap();
        cs.shuffle(&mut rng(seed ^ 7));
        let b = solve_quadratic_system(&assemble(&cs, &kt()).unwrap(), &SolverConfig::default()).unwrap();
        prop_assert!((a.extrinsics.rotation() - b.extrinsics.rotation()).amax() < 1e-9);
        prop_assert!((a.extrinsics.translation() - b.extrinsics.translation()).amax() < 1e-9);
    }

    #[test]
    fn refinement_cost_never_increases(seed in any::<u64>(), perturb in 0.01..0.2f64) {
        let (truth, cs) = mixed(seed, 8);
        let start = Extrinsics::from_axis_angle(&Vector3::new(perturb, -perturb, 0.5 * perturb), Vector3::new(perturb, 0.0, -perturb)).compose(&truth);
        let mut init = solve_quadratic_system(&assemble(&cs, &kt()).unwrap(), &SolverConfig::default()).unwrap();
        init.extrinsics = start;
        let out = refine(&init, &cs, &kt(), &SolverConfig::default()).unwrap();
        prop_assert!(out.cost_history.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(*out.cost_history.last().unwrap() <= out.initial_cost);
    }

    #[test]
    fn exact_vote_recovers_translation(seed in any::<u64>()) {
        let (truth, cs) = mixed(seed, 8);
        let cands: Vec<Candidate> = cs.iter().map(|c| candidate(c, truth.rotation(), &kt()).unwrap()).collect();
        let vote = convergence_voting(&cands, 1e-6, VoteThreshold::default()).unwrap();
        prop_assert!(vote.converged);
        prop_assert_eq!(vote.inlier_set.len(), cands.len());
        prop_assert!((vote.convergence_point.unwrap() - truth.translation()).norm() < 1e-6);
    }

    #[test]
    fn vote_is_permutation_invariant(seed in any::<u64>()) {
        let (truth, cs) = mixed(seed, 10);
        // A slightly wrong rotation so that the vote has to discriminate.
        let r = Extrinsics::from_axis_angle(&Vector3::new(0.0, 0.01, 0.0), Vector3::zeros()).rotation() * truth.rotation();
        let cands: Vec<Candidate> = cs.iter().map(|c| candidate(c, &r, &kt()).unwrap()).collect();
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.shuffle(&mut rng(seed ^ 3));
        let shuffled: Vec<Candidate> = order.iter().map(|&i| cands[i].clone()).collect();
        let a = convergence_voting(&cands, 0.02, VoteThreshold::default()).unwrap();
        let b = convergence_voting(&shuffled, 0.02, VoteThreshold::default()).unwrap();
        prop_assert_eq!(a.converged, b.converged);
        let mut mapped: Vec<usize> = b.inlier_set.iter().map(|&i| order[i]).collect();
        mapped.sort_unstable();
        prop_assert_eq!(&a.inlier_set, &mapped);
        prop_assert_eq!(a.convergence_point, b.convergence_point);
    }
}

#[test]
fn voting_on_64_candidates_is_fast() {
    let (truth, cs) = mixed(99, 64);
    let cands: Vec<Candidate> = cs.iter().map(|c| candidate(c, truth.rotation(), &kt()).unwrap()).collect();
    let start = Instant::now();
    let vote = convergence_voting(&cands, 0.02, VoteThreshold::default()).unwrap();
    let elapsed = start.elapsed();
    assert!(vote.converged);
    assert!(elapsed.as_millis() < 50, "{elapsed:?}");
}

fn noisy_spec(seed: u64) -> RigSpec {
    RigSpec {
        pixel_noise_sigma: 0.5,
        depth_noise_sigma: 0.003,
        outlier_fraction: 0.2,
        rng_seed: seed,
        ..RigSpec::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn accepted_gate_distances_decrease(seed in any::<u64>()) {
        let spec = noisy_spec(seed);
        let (stream, _) = generate(&spec).unwrap();
        let cfg = PipelineConfig { rng_seed: seed, ..PipelineConfig::default() };
        let mut state = PipelineState::new(&cfg);
        let mut last = f64::INFINITY;
        for obs in &stream {
            if let RoundOutcome::Accepted { d_so3, bootstrap, .. } = ingest(obs, &mut state, &cfg, &spec.target_intrinsics) {
                if !bootstrap {
                    prop_assert!(d_so3 < last || d_so3 <= cfg.gate_distance_floor, "{} after {}", d_so3, last);
                }
                last = d_so3;
            }
        }
    }

    #[test]
    fn pipeline_is_deterministic_and_replayable(seed in any::<u64>()) {
        let spec = noisy_spec(seed);
        let (stream, truth) = generate(&spec).unwrap();
        let cfg = PipelineConfig { rng_seed: seed, ..PipelineConfig::default() };
        let a = run(&stream, &spec.target_intrinsics, &cfg).unwrap();
        let b = run(&stream, &spec.target_intrinsics, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(CalibrationFile::from_report(&a).to_json().unwrap(), CalibrationFile::from_report(&b).to_json().unwrap());
        if a.termination == Termination::Converged {
            // Only voting inliers reach the final system.
            let outliers: Vec<u64> = truth.records.iter().filter(|r| r.outlier).map(|r| r.id).collect();
            prop_assert!(a.inlier_ids.iter().all(|id| !outliers.contains(id)));
            let inliers: Vec<Correspondence> = a
                .inlier_ids
                .iter()
                .map(|id| {
                    let round = stream.iter().position(|o| o.id == *id).unwrap();
                    build_correspondence(&stream[round], &cfg, round).unwrap()
                })
                .collect();
            let (pose, _, _) = solve_and_refine(&inliers, &spec.target_intrinsics, &cfg.solver).unwrap();
            prop_assert!((pose.rotation() - a.extrinsics.rotation()).amax() < 1e-12);
            prop_assert!((pose.translation() - a.extrinsics.translation()).amax() < 1e-12);
        }
    }

    #[test]
    fn simulator_images_are_exact_and_seeded(seed in any::<u64>()) {
        let spec = RigSpec { rng_seed: seed, outlier_fraction: 0.2, ..RigSpec::default() };
        let (stream, truth) = generate(&spec).unwrap();
        prop_assert_eq!(generate(&spec).unwrap(), (stream.clone(), truth.clone()));
        for (obs, rec) in stream.iter().zip(&truth.records) {
            for p in rec.source_segment {
                let px = spec.source_intrinsics.project(&Vector3::from(p)).unwrap();
                prop_assert!(obs.source_2d.signed_distance(&px).abs() < 1e-9);
            }
            for p in rec.target_segment {
                let px = spec.target_intrinsics.project(&truth.truth.transform_point(&Vector3::from(p))).unwrap();
                prop_assert!(obs.target_2d.signed_distance(&px).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn calibration_file_round_trip_is_byte_identical(seed in any::<u64>()) {
        let spec = noisy_spec(seed);
        let (stream, _) = generate(&spec).unwrap();
        let rep = run(&stream, &spec.target_intrinsics, &PipelineConfig::default()).unwrap();
        let bytes = CalibrationFile::from_report(&rep).to_json().unwrap();
        let back = CalibrationFile::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap();
        prop_assert_eq!(back.to_json().unwrap(), bytes);
    }
}
