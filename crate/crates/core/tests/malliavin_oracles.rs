mod common;

use common::ou_malliavin;
use mvsde::sde::derive_seed;
use mvsde::{
    directional_derivative, finite_difference_oracle, malliavin_ips, malliavin_limit, malliavin_limit_all,
    sample_noise, simulate_frozen_flow, simulate_ips, simulate_non_ips, BuiltinModel, EmpiricalMeasure, InitSampler,
    MeasureFlow, OracleSystem, Scheme, TimeGrid,
};
use rand::Rng;

fn direction(steps: usize, seed: u64) -> Vec<f64> {
    // piecewise constant on ten blocks, values in [0.5, 1.5]
    let mut r = common::rng(derive_seed(seed, 6, 0));
    let blocks: Vec<f64> = (0..10).map(|_| r.random_range(0.5..1.5)).collect();
    (0..steps).map(|k| blocks[k * 10 / steps]).collect()
}

fn reference_flow(g: TimeGrid<f64>) -> MeasureFlow<f64> {
    let atoms: Vec<f64> = InitSampler::Gaussian { mean: 0.5, std: 0.5 }.sample(64, 1, 1);
    MeasureFlow::constant(g, EmpiricalMeasure::from_scalars(&atoms).unwrap())
}

#[test]
fn limit_field_matches_ou_closed_form() {
    let (a, sigma0) = (1.0, 0.3);
    let m = BuiltinModel::MeanFieldOU { a, kappa: 0.5, sigma0 };
    let g = TimeGrid::new(1.0, 1000).unwrap();
    let flow = reference_flow(g);
    let noise = sample_noise(&g, 1, 1, 3).unwrap();
    let z = simulate_frozen_flow(&m, &flow, &[1.0], &noise, Scheme::EulerMaruyama).unwrap();
    for s in g.sub_grid(8) {
        let f = malliavin_limit(&m, Scheme::EulerMaruyama, z.path(0), &flow, s, noise.stream(0)).unwrap();
        let worst = (0..g.nodes())
            .map(|k| (f.value(k)[0] - ou_malliavin(a, sigma0, g.time(s), g.time(k))).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-2, "s={s}: {worst}");
    }
}

/// Relative error at `T` between the propagated pairing and a central
/// difference of the re-simulated system, for each built-in model.
#[test]
fn propagation_agrees_with_wiener_shift_on_all_models() {
    let models = [
        (
            BuiltinModel::MeanFieldOU {
                a: 1.0,
                kappa: 0.5,
                sigma0: 0.3,
            },
            Scheme::EulerMaruyama,
        ),
        (
            BuiltinModel::DoubleWell {
                kappa: 0.5,
                sigma0: 0.3,
            },
            Scheme::TamedEuler,
        ),
        (
            BuiltinModel::ScalarStateDiffusion {
                a: 1.0,
                kappa: 0.5,
                sigma1: 0.2,
                sigma2: 0.1,
            },
            Scheme::EulerMaruyama,
        ),
    ];
    let g = TimeGrid::new(1.0, 200).unwrap();
    let flow = reference_flow(g);
    let paths = 100;
    let x0: Vec<f64> = InitSampler::Gaussian { mean: 0.5, std: 0.5 }.sample(paths, 1, 2);
    let noise = sample_noise(&g, paths, 1, 4).unwrap();
    let h = direction(200, 9);
    for (m, scheme) in models {
        let z = simulate_frozen_flow(&m, &flow, &x0, &noise, scheme).unwrap();
        for p in 0..paths {
            let fields = malliavin_limit_all(&m, scheme, z.path(p), &flow, noise.stream(p)).unwrap();
            let var = directional_derivative(&fields, &h, 0).unwrap()[200];
            let fd = finite_difference_oracle(&m, scheme, OracleSystem::FrozenFlow(&flow), &x0, &noise, p, 0, &h, 1e-4)
                .unwrap();
            let rel = (var - fd.path(p)[200]).abs() / fd.path(p)[200].abs();
            assert!(rel <= 1e-3, "{} path {p}: {rel}", m.name());
        }
    }
}

#[test]
fn central_difference_error_is_second_order_in_epsilon() {
    let m = BuiltinModel::DoubleWell {
        kappa: 0.5,
        sigma0: 0.3,
    };
    let g = TimeGrid::new(1.0, 200).unwrap();
    let flow = reference_flow(g);
    let x0 = [0.8];
    let noise = sample_noise(&g, 1, 1, 21).unwrap();
    let h = direction(200, 2);
    let z = simulate_frozen_flow(&m, &flow, &x0, &noise, Scheme::TamedEuler).unwrap();
    let fields = malliavin_limit_all(&m, Scheme::TamedEuler, z.path(0), &flow, noise.stream(0)).unwrap();
    let var = directional_derivative(&fields, &h, 0).unwrap()[200];
    let err = |eps: f64| {
        let fd = finite_difference_oracle(
            &m,
            Scheme::TamedEuler,
            OracleSystem::FrozenFlow(&flow),
            &x0,
            &noise,
            0,
            0,
            &h,
            eps,
        )
        .unwrap();
        (fd.path(0)[200] - var).abs()
    };
    let ratio = err(1e-2) / err(1e-3);
    // O(ε²) gives a factor 100 per decade, O(ε) only 10
    assert!(ratio > 50.0 && ratio < 200.0, "ratio {ratio}");
}

#[test]
fn interacting_fields_match_the_oracle_on_every_particle() {
    let m = BuiltinModel::DoubleWell {
        kappa: 0.8,
        sigma0: 0.3,
    };
    let g = TimeGrid::new(1.0, 100).unwrap();
    let n = 5;
    let x0: Vec<f64> = InitSampler::Gaussian { mean: 0.0, std: 1.0 }.sample(n, 1, 5);
    let noise = sample_noise(&g, n, 1, 6).unwrap();
    let x = simulate_ips(&m, &g, &noise, &x0, Scheme::TamedEuler).unwrap();
    let h = direction(100, 3);
    let j = 2;
    let fields: Vec<_> = (0..100)
        .map(|s| malliavin_ips(&m, Scheme::TamedEuler, &x, s, j, &noise).unwrap())
        .collect();
    let fd = finite_difference_oracle(
        &m,
        Scheme::TamedEuler,
        OracleSystem::Interacting,
        &x0,
        &noise,
        j,
        0,
        &h,
        1e-4,
    )
    .unwrap();
    for i in 0..n {
        let slices: Vec<_> = fields.iter().map(|f| f.particle_slice(i)).collect();
        let var = directional_derivative(&slices, &h, 0).unwrap();
        for k in 0..=100 {
            let scale = if i == j { var[k].abs() } else { var[100].abs().max(1e-6) };
            assert!(
                (var[k] - fd.path(i)[k]).abs() <= 1e-3 * scale.max(1e-12) + 1e-12,
                "i={i} k={k}"
            );
        }
    }
}

#[test]
fn fields_vanish_before_the_source_and_across_decoupled_particles() {
    let m = BuiltinModel::ScalarStateDiffusion {
        a: 1.0,
        kappa: 0.5,
        sigma1: 0.2,
        sigma2: 0.1,
    };
    let g = TimeGrid::new(1.0, 100).unwrap();
    let flow = reference_flow(g);
    let n = 6;
    let x0: Vec<f64> = InitSampler::Gaussian { mean: 0.5, std: 0.5 }.sample(n, 1, 8);
    let noise = sample_noise(&g, n, 1, 8).unwrap();
    let x = simulate_ips(&m, &g, &noise, &x0, Scheme::EulerMaruyama).unwrap();
    let z = simulate_non_ips(&m, &flow, &noise, &x0, Scheme::EulerMaruyama).unwrap();
    for s in g.sub_grid(8) {
        let lim = malliavin_limit(&m, Scheme::EulerMaruyama, z.path(3), &flow, s, noise.stream(3)).unwrap();
        let ips = malliavin_ips(&m, Scheme::EulerMaruyama, &x, s, 3, &noise).unwrap();
        for k in 0..s {
            assert!(lim.value(k).iter().all(|v| v.to_bits() == 0));
            assert!(ips.node(k).iter().all(|v| v.to_bits() == 0));
        }
    }
    let h = direction(100, 1);
    let fd = finite_difference_oracle(
        &m,
        Scheme::EulerMaruyama,
        OracleSystem::FrozenFlow(&flow),
        &x0,
        &noise,
        3,
        0,
        &h,
        1e-4,
    )
    .unwrap();
    for i in (0..n).filter(|&i| i != 3) {
        assert!(fd.path(i).iter().all(|v| v.to_bits() == 0));
    }
}
