use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mm_bench::{bench_bundle, bench_spec};
use mm_core::averaging::{invariant_density, theta_family};
use mm_core::expansion::StrategyField;
use mm_core::montecarlo::{simulate_paths, SimConfig};
use mm_core::oracle::{solve_distortion, OracleConfig};
use mm_core::subsuper::{Constants, Variant, Verifier, VerifyGrid};
use mm_core::utility::UtilitySpec;

fn theta_family_build(c: &mut Criterion) {
    let spec = bench_spec();
    let density = invariant_density(&spec).unwrap();
    c.bench_function("theta_family", |b| {
        b.iter(|| theta_family(&spec, &density, black_box(0.0)).unwrap())
    });
}

fn candidate_point_eval(c: &mut Criterion) {
    let bundle = bench_bundle();
    let grid = VerifyGrid::default_for(&bundle.spec, &bundle);
    let verifier = Verifier::new(&bundle, grid).unwrap();
    let consts = Constants::uniform(2.0);
    c.bench_function("q_pi0_point", |b| {
        b.iter(|| verifier.q_pi0(Variant::Sub, &consts, 0.01, 0.01, 0, 1, black_box(5), 3))
    });
}

fn monte_carlo_paths(c: &mut Criterion) {
    let bundle = bench_bundle();
    let strat = StrategyField::zeroth(&bundle);
    let cfg = SimConfig {
        n_paths: 1000,
        n_steps: 100,
        seed: 1,
        antithetic: true,
        x0: 1.0,
        y0: 0.0,
        z0: 0.0,
    };
    c.bench_function("mc_1000x100", |b| {
        b.iter(|| simulate_paths(&bundle, &strat, black_box(&cfg)).unwrap())
    });
}

fn distortion_solve(c: &mut Criterion) {
    let mut spec = bench_spec();
    spec.delta = 0.0;
    let u = UtilitySpec::power(2.0).unwrap();
    let cfg = OracleConfig { n_y: 801, dt: 1e-3, y_halfwidth_sds: 6.0 };
    c.bench_function("distortion_801", |b| {
        b.iter(|| solve_distortion(&u, &spec, &cfg, black_box(&[0.0])).unwrap())
    });
}

criterion_group!(benches, theta_family_build, candidate_point_eval, monte_carlo_paths, distortion_solve);
criterion_main!(benches);
