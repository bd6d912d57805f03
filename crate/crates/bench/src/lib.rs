//! Shared fixtures for the criterion benches.

use noarb_core::datasets::{penalty_mesh, synth_in_sample};
use noarb_core::{ActivationKind, GridSpec, MlpParams, QuoteGrid, SabrParams};

/// Baseline in-sample grid, penalty mesh and a 2×16 Softplus network.
pub fn baseline() -> (QuoteGrid, Vec<[f64; 2]>, MlpParams) {
    let data = synth_in_sample(&SabrParams::default(), &GridSpec::in_sample()).expect("baseline grid");
    let mesh = penalty_mesh(&GridSpec::penalty_mesh()).expect("baseline mesh");
    let net = MlpParams::init(&[2, 16, 16, 1], ActivationKind::Softplus, 7).expect("baseline network");
    (data, mesh, net)
}
