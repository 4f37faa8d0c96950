use nlw_core::discretization::DiscreteSystem;
use nlw_core::flow::{solve, IntegratorConfig};
use nlw_core::functionals::DensityState;
use nlw_core::sampler::{compare_marginals, simulate, SamplerConfig};

#[test]
fn equilibrium_is_stationary() {
    let sys = DiscreteSystem::from_parts(
        vec![0.1, 0.2, 0.3, 0.4],
        vec![0.0, 1.0, 2.0, 0.5, 1.0, 0.0, 1.0, 1.0, 2.0, 1.0, 0.0, 3.0, 0.5, 1.0, 3.0, 0.0],
    )
    .unwrap();
    let u = DensityState::equilibrium(4);
    let cfg = IntegratorConfig {
        horizon: 2.0,
        output_step: 0.5,
        ..IntegratorConfig::default()
    };
    let traj = solve(&sys, &u, &cfg).unwrap();
    for t in [0.5, 2.0] {
        let hist = simulate(&sys, &SamplerConfig::new(50_000, t, 11, u.clone())).unwrap();
        let c = compare_marginals(&sys, &hist, &traj, t).unwrap();
        assert!(c.pass, "t = {t}: {c:?}");
    }
}

#[test]
fn seeds_change_the_sample_and_fix_it() {
    let sys = DiscreteSystem::two_point(0.4, 0.6, 2.0).unwrap();
    let u = DensityState::equilibrium(2);
    let a = simulate(&sys, &SamplerConfig::new(2000, 1.0, 1, u.clone())).unwrap();
    let b = simulate(&sys, &SamplerConfig::new(2000, 1.0, 1, u.clone())).unwrap();
    let c = simulate(&sys, &SamplerConfig::new(2000, 1.0, 2, u)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.counts, c.counts);
}
