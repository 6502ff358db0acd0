//! Shared fixtures for the benchmarks in `benches/`.

use linecal::pipeline::build_correspondence;
use linecal::simulator::generate;
use linecal::{Correspondence, LineObservation, PipelineConfig, RigSpec};

/// Noisy default rig with `n_lines` observations.
pub fn rig(n_lines: usize, seed: u64) -> RigSpec {
    RigSpec { pixel_noise_sigma: 0.5, depth_noise_sigma: 0.003, n_lines, rng_seed: seed, ..RigSpec::default() }
}

pub fn stream(spec: &RigSpec) -> Vec<LineObservation> {
    generate(spec).expect("feasible rig").0
}

/// Correspondences fitted from a simulated stream, skipping rejected ones.
pub fn correspondences(spec: &RigSpec) -> Vec<Correspondence> {
    let cfg = PipelineConfig::default();
    stream(spec).iter().enumerate().filter_map(|(i, o)| build_correspondence(o, &cfg, i).ok()).collect()
}
