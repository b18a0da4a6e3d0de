//! Shared fixtures for the pipeline benchmarks.

use mm_core::expansion::ExpansionBundle;
use mm_core::model::{default_tanh_model, ModelSpec};
use mm_core::utility::UtilitySpec;

pub fn bench_spec() -> ModelSpec {
    default_tanh_model(0.04, 0.01)
}

pub fn bench_bundle() -> ExpansionBundle {
    let spec = bench_spec();
    let u = UtilitySpec::power(2.0).unwrap();
    ExpansionBundle::new(&spec, &u, &[0.0], &[0.0, 0.5, 1.0]).unwrap()
}
