//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nlw_core::discretization::{build_system, verify_moment_bound, DiscreteSystem};
use nlw_core::experiments::{lsi_certify, refinement_study, ExperimentConfig};
use nlw_core::flow::{edi_report, solve, tangent_flux, IntegratorConfig, Method};
use nlw_core::functionals::{action, fisher_information, log_mean, theta_connectedness_constant, DensityState};
use nlw_core::kernels::{extend_kernel, second_moment_sup, Kernel, KernelSpec, Measure, MeasureSpec, QuadratureConfig};
use nlw_core::metric::{check_metric_axioms, nlw_distance, two_point_distance_oracle, PathProblem, SolverSettings};
use nlw_core::sampler::{compare_marginals, simulate, RateConvention, SamplerConfig};
use nlw_core::torus::build_grid;

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn random_system(rng: &mut ChaCha8Rng, n: usize) -> DiscreteSystem {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let pi: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mut eta = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rng.random_range(0.1..3.0);
            eta[i * n + j] = v;
            eta[j * n + i] = v;
        }
    }
    DiscreteSystem::from_parts(pi, eta).unwrap()
}

fn random_state(rng: &mut ChaCha8Rng, pi: &[f64]) -> DensityState {
    let raw: Vec<f64> = pi.iter().map(|_| rng.random_range(0.05..3.0)).collect();
    let mass: f64 = raw.iter().zip(pi).map(|(u, p)| u * p).sum();
    DensityState::new(raw.iter().map(|u| u / mass).collect(), pi).unwrap()
}

fn criterion_1() -> Outcome {
    ensure(log_mean(1.0, 1.0).map_err(err)? == 1.0, || "theta(1,1) != 1".into())?;
    for r in [0.0, 0.3, 1.0, 7.5] {
        ensure(log_mean(r, 0.0).map_err(err)? == 0.0, || format!("theta({r},0) != 0"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = f64::NEG_INFINITY;
    for _ in 0..100_000 {
        let r = 10f64.powf(rng.random_range(-6.0..6.0));
        let s = 10f64.powf(rng.random_range(-6.0..6.0));
        let excess = log_mean(r, s).map_err(err)? - 0.5 * (r + s);
        worst = worst.max(excess / (r + s));
        ensure(excess <= 1e-15 * (r + s), || format!("theta({r},{s}) above the arithmetic mean"))?;
    }
    // sum over odd k of k^-2, with the integral tail beyond K
    let k_max = 2_000_000u64;
    let partial: f64 = (0..k_max).rev().map(|k| 1.0 / ((2 * k + 1) as f64).powi(2)).sum();
    let series = partial + 1.0 / (4.0 * k_max as f64);
    let c = theta_connectedness_constant();
    ensure((c - series).abs() <= 1e-6, || format!("C_theta = {c}, series {series}"))?;
    Ok(format!("C_theta = {c:.10}, series {series:.10}, worst relative excess {worst:e}"))
}

fn criterion_2() -> Outcome {
    let sys = DiscreteSystem::two_point(0.5, 0.5, 1.0).map_err(err)?;
    let u0 = DensityState::new(vec![1.5, 0.5], sys.pi()).map_err(err)?;
    let cfg = IntegratorConfig {
        method: Method::MatrixExponential,
        horizon: 1.0,
        output_step: 1e-3,
        ..IntegratorConfig::default()
    };
    let traj = solve(&sys, &u0, &cfg).map_err(err)?;
    let mut worst: f64 = 0.0;
    for (t, s) in traj.times.iter().zip(&traj.states) {
        worst = worst.max((s.values()[0] - s.values()[1] - (-t).exp()).abs());
    }
    ensure(worst <= 1e-8, || format!("closed-form error {worst:e}"))?;
    // brute-force double sum
    let u = [1.5f64, 0.5];
    let mut oracle = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            if i != j {
                oracle += 0.5 * (u[i] - u[j]) * (u[i].ln() - u[j].ln()) * 0.25;
            }
        }
    }
    let fisher = fisher_information(&sys, &u0).map_err(err)?.to_f64();
    let exact = 3f64.ln() / 4.0;
    ensure((fisher - oracle).abs() <= 1e-12 && (fisher - exact).abs() <= 1e-12, || {
        format!("I = {fisher}, oracle {oracle}, exact {exact}")
    })?;
    let edi = edi_report(&sys, &traj).map_err(err)?;
    let defect = edi.defect_production.ok_or("no EDI claim")?;
    let rel = defect / edi.delta_h.abs();
    ensure(rel <= 1e-6, || format!("EDI defect {rel:e} relative"))?;
    Ok(format!("max |u1-u2-e^-t| {worst:e}, I(rho0) = {fisher:.15}, EDI defect {rel:e} relative"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for n in [2, 8, 64] {
        let sys = random_system(&mut rng, n);
        for _ in 0..100 {
            let rho = random_state(&mut rng, sys.pi());
            let v = tangent_flux(&sys, &rho).map_err(err)?;
            let a = action(&sys, &rho, &v).map_err(err)?.to_f64();
            let i = fisher_information(&sys, &rho).map_err(err)?.to_f64();
            let rel = (a - i).abs() / i.abs().max(1e-300);
            worst = worst.max(rel);
            count += 1;
        }
    }
    ensure(worst <= 1e-12, || format!("A vs I relative error {worst:e}"))?;
    Ok(format!("{count} states, worst relative gap {worst:e}"))
}

fn criterion_4() -> Outcome {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(configs_dir())
        .map_err(err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    entries.sort();
    ensure(!entries.is_empty(), || "no shipped configs".into())?;
    let mut lines = Vec::new();
    for path in &entries {
        let start = Instant::now();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let cfg = ExperimentConfig::load(path).map_err(err)?;
        let Some(flow) = &cfg.flow else { continue };
        let sys = cfg.build_system().map_err(err)?;
        let u0 = cfg.project(&flow.initial, &sys, "flow.initial").map_err(err)?;
        let traj = solve(&sys, &u0, &flow.integrator).map_err(err)?;
        let d = &traj.diagnostics;
        let drift = d.iter().map(|x| (x.mass - 1.0).abs()).fold(0.0, f64::max);
        let h_rise = d.windows(2).map(|w| w[1].entropy - w[0].entropy).fold(f64::NEG_INFINITY, f64::max);
        let min_drop = d.windows(2).map(|w| w[0].min_u - w[1].min_u).fold(f64::NEG_INFINITY, f64::max);
        let secs = start.elapsed().as_secs_f64();
        ensure(drift <= 1e-10, || format!("{name}: mass drift {drift:e}"))?;
        ensure(h_rise <= 1e-10, || format!("{name}: entropy rises by {h_rise:e}"))?;
        ensure(min_drop <= 1e-12, || format!("{name}: min_u drops by {min_drop:e}"))?;
        ensure(secs < 30.0, || format!("{name}: {secs:.1}s"))?;
        lines.push(format!("{name} drift {drift:.1e} ({secs:.1}s)"));
    }
    Ok(lines.join("; "))
}

fn criterion_5() -> Outcome {
    let quad = QuadratureConfig::default();
    let measure_spec = MeasureSpec::Uniform;
    let measure = Measure::compile(&measure_spec, 1, &quad).map_err(err)?;
    let mut kernels = vec![KernelSpec::Constant { c: 1.0 }];
    for s in [0.5, 1.0, 1.5] {
        kernels.push(KernelSpec::Fractional { s, scale: 1.0 });
    }
    let mut worst: f64 = 0.0;
    for spec in &kernels {
        let kernel = Kernel::compile(spec, 1, &quad).map_err(err)?;
        for n in [8, 16, 32] {
            let (sup, _) = second_moment_sup(&kernel, &measure, &quad, quad.probe_level_for(n)).map_err(err)?;
            let grid = build_grid(1, n).map_err(err)?;
            let sys = build_system(spec, &measure_spec, &grid, &quad).map_err(err)?;
            let r = verify_moment_bound(&sys, sup, 0.01).map_err(|e| format!("{spec:?} n={n}: {e}"))?;
            worst = worst.max(r.discrete_moment / r.bound);
        }
    }
    Ok(format!("worst M_n / (4 sup) = {worst:.4}"))
}

fn criterion_6() -> Outcome {
    let quad = QuadratureConfig::default();
    let grid = build_grid(1, 16).map_err(err)?;
    let sys = build_system(&KernelSpec::Fractional { s: 1.0, scale: 1.0 }, &MeasureSpec::Uniform, &grid, &quad)
        .map_err(err)?;
    let h = grid.spacing();
    let bandwidth = 2.5 * h;
    let interp = extend_kernel(&sys, bandwidth, 3.0).map_err(err)?;
    let n = sys.len();
    let mut worst_repro: f64 = 0.0;
    for j in 0..n {
        for k in 0..n {
            if j != k {
                let v = interp.eval(&grid.point(j), &grid.point(k)).map_err(err)?.value;
                worst_repro = worst_repro.max((v - sys.eta(j, k)).abs() / sys.eta(j, k));
            }
        }
    }
    ensure(worst_repro <= 1e-12, || format!("grid values reproduced to {worst_repro:e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut outside = 0;
    for _ in 0..10_000 {
        let x: f64 = rng.random();
        let y: f64 = rng.random();
        let got = interp.eval_raw(&[x], &[y]).map_err(err)?.value;
        // envelope from all stored pairs within the bandwidth
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for j in 0..n {
            for k in 0..n {
                let xj = grid.point_coords(j)[0];
                let xk = grid.point_coords(k)[0];
                let per = |a: f64, b: f64| {
                    let d = (a - b).abs() % 1.0;
                    d.min(1.0 - d)
                };
                if j != k && per(x, xj) + per(y, xk) < bandwidth {
                    lo = lo.min(sys.eta(j, k));
                    hi = hi.max(sys.eta(j, k));
                }
            }
        }
        if !(got >= lo * (1.0 - 1e-14) && got <= hi * (1.0 + 1e-14)) {
            outside += 1;
        }
    }
    ensure(outside == 0, || format!("{outside} queries outside the local envelope"))?;
    Ok(format!("reproduction error {worst_repro:e}, 10000 queries inside the envelope"))
}

fn criterion_7() -> Outcome {
    let sys = DiscreteSystem::two_point(0.5, 0.5, 1.0).map_err(err)?;
    let a = DensityState::new(vec![1.5, 0.5], sys.pi()).map_err(err)?;
    let b = DensityState::equilibrium(2);
    let oracle = two_point_distance_oracle(0.5, 0.5, 1.0, 0.75, 0.5).map_err(err)?;
    let mut rels = Vec::new();
    for (m, tol) in [(32, 0.02), (128, 0.005)] {
        let r = nlw_distance(&sys, &PathProblem::new(a.clone(), b.clone(), m)).map_err(err)?;
        let rel = (r.distance - oracle).abs() / oracle;
        ensure(rel <= tol, || format!("M={m}: W = {}, oracle {oracle}", r.distance))?;
        ensure(r.constraint_residual <= 1e-8, || format!("M={m}: residual {:e}", r.constraint_residual))?;
        rels.push(rel);
    }
    let same = nlw_distance(&sys, &PathProblem::new(a.clone(), a.clone(), 32)).map_err(err)?;
    ensure(same.distance.abs() <= 1e-8, || format!("W(nu,nu) = {}", same.distance))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sys3 = random_system(&mut rng, 3);
    let settings = SolverSettings::default();
    let mut sym: f64 = 0.0;
    let mut tri: f64 = 0.0;
    let mut tol: f64 = 0.0;
    for _ in 0..20 {
        let samples: Vec<DensityState> = (0..3).map(|_| random_state(&mut rng, sys3.pi())).collect();
        let r = check_metric_axioms(&sys3, &samples, 16, &settings).map_err(err)?;
        sym = sym.max(r.max_symmetry_violation);
        tri = tri.max(r.max_triangle_violation);
        tol = tol.max(r.solver_tolerance);
        ensure(r.max_self_distance <= 1e-8, || "non-zero self distance".into())?;
    }
    ensure(sym <= 1e-6 + tol, || format!("symmetry violation {sym:e}"))?;
    ensure(tri <= 1e-6 + tol, || format!("triangle violation {tri:e}"))?;
    Ok(format!(
        "oracle {oracle:.6}, relative error {:.2e} (M=32), {:.2e} (M=128); symmetry {sym:.1e}, triangle {tri:.1e}",
        rels[0], rels[1]
    ))
}

fn criterion_8() -> Outcome {
    let quad = QuadratureConfig::default();
    let grid = build_grid(1, 16).map_err(err)?;
    let sys = build_system(&KernelSpec::Constant { c: 1.0 }, &MeasureSpec::Uniform, &grid, &quad).map_err(err)?;
    let u: Vec<f64> = (0..16)
        .map(|i| 1.0 + 0.8 * (2.0 * std::f64::consts::PI * i as f64 / 16.0).cos())
        .collect();
    let u0 = DensityState::new(u, sys.pi()).map_err(err)?;
    let cfg = IntegratorConfig {
        method: Method::MatrixExponential,
        horizon: 2.0,
        output_step: 0.01,
        ..IntegratorConfig::default()
    };
    let traj = solve(&sys, &u0, &cfg).map_err(err)?;
    let cert = lsi_certify(&sys, &traj, 1e-8).map_err(err)?;
    ensure(cert.constant == sys.min_offdiag_eta() && cert.constant > 0.0, || "bad constant".into())?;
    cert.require().map_err(err)?;
    Ok(format!(
        "C = {}, {} states, worst H/envelope {:.4}, min slack I/C - H {:e}",
        cert.constant, cert.states_checked, cert.worst_envelope_ratio, cert.worst_pointwise_slack
    ))
}

fn criterion_9() -> Outcome {
    let cfg = IntegratorConfig {
        method: Method::MatrixExponential,
        horizon: 1.0,
        output_step: 0.1,
        ..IntegratorConfig::default()
    };
    let mut lines = Vec::new();
    let two = DiscreteSystem::two_point(0.5, 0.5, 1.0).map_err(err)?;
    let u2 = DensityState::new(vec![1.5, 0.5], two.pi()).map_err(err)?;
    let grid = build_grid(1, 16).map_err(err)?;
    let frac = build_system(
        &KernelSpec::Fractional { s: 1.0, scale: 1.0 },
        &MeasureSpec::Uniform,
        &grid,
        &QuadratureConfig::default(),
    )
    .map_err(err)?;
    let mut u16 = vec![0.0; 16];
    u16[0] = 16.0;
    let u16 = DensityState::new(u16, frac.pi()).map_err(err)?;
    for (name, sys, u0) in [("two-state", &two, u2), ("fractional N=16", &frac, u16)] {
        let traj = solve(sys, &u0, &cfg).map_err(err)?;
        let hist = simulate(sys, &SamplerConfig::new(100_000, 1.0, 9, u0)).map_err(err)?;
        let c = compare_marginals(sys, &hist, &traj, 1.0).map_err(err)?;
        ensure(c.pass, || format!("{name}: max |z| {:.2} > {:.2}", c.max_abs_z, c.threshold))?;
        lines.push(format!("{name} max |z| {:.2} (<= {:.2})", c.max_abs_z, c.threshold));
    }
    let skew = DiscreteSystem::two_point(0.8, 0.2, 1.0).map_err(err)?;
    let u0 = DensityState::equilibrium(2);
    let traj = solve(&skew, &u0, &cfg).map_err(err)?;
    let mut sc = SamplerConfig::new(100_000, 1.0, 9, u0);
    sc.convention = RateConvention::Transposed;
    let hist = simulate(&skew, &sc).map_err(err)?;
    let c = compare_marginals(&skew, &hist, &traj, 1.0).map_err(err)?;
    ensure(!c.pass, || "transposed rates were not detected".into())?;
    lines.push(format!("transposed rates rejected with max |z| {:.1}", c.max_abs_z));
    Ok(lines.join("; "))
}

fn criterion_10() -> Outcome {
    let cfg = ExperimentConfig::load(&configs_dir().join("gibbs_refinement.toml")).map_err(err)?;
    let report = refinement_study(&cfg, &[8, 16, 32, 64]).map_err(err)?;
    let gaps: Vec<f64> = report.gaps.iter().map(|g| g.entropy_gap).collect();
    ensure(report.gaps_decreasing, || format!("gaps {gaps:?}"))?;
    ensure(gaps.windows(2).all(|w| w[1] < w[0]), || format!("gaps {gaps:?}"))?;
    let shown: Vec<String> = gaps.iter().map(|g| format!("{g:.3e}")).collect();
    Ok(format!("sup_t |H_n - H_2n| = [{}]", shown.join(", ")))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "functional conventions", criterion_1, Duration::from_secs(1)),
        (2, "two-state benchmark", criterion_2, Duration::from_secs(1)),
        (3, "gradient-flow identity", criterion_3, Duration::from_secs(10)),
        (4, "conservation and monotonicity", criterion_4, Duration::from_secs(30 * 8)),
        (5, "discretization moment bound", criterion_5, Duration::from_secs(60)),
        (6, "kernel interpolator", criterion_6, Duration::from_secs(5)),
        (7, "nonlocal Wasserstein metric", criterion_7, Duration::from_secs(300)),
        (8, "log-Sobolev certificate", criterion_8, Duration::from_secs(30)),
        (9, "stochastic cross-validation", criterion_9, Duration::from_secs(120)),
        (10, "refinement study", criterion_10, Duration::from_secs(600)),
    ];
    let mut failed = 0;
    for (id, name, run, limit) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if secs > limit => Err(format!("{detail}; runtime {:.2}s over {:?}", secs.as_secs_f64(), limit)),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS [{name}] ({:.2}s) {detail}", secs.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL [{name}] ({:.2}s) {detail}", secs.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
