//! Acceptance suite. Runs every criterion in sequence (timings are only
//! meaningful without competing test threads), prints one line per
//! criterion, and exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use elastovb::driver::{info_gain, kl_term, run, DriverConfig, RunTrace};
use elastovb::fem::{
    adjoint_jacobian, assemble_and_solve, observe, BoundarySpec, MaterialField, Mesh2D,
    PlaneStrainSolver,
};
use elastovb::forward::{ForwardModel, LinearOracleModel};
use elastovb::importance::{compare_vb_is, effective_sample_size, median, relative_difference, run_is};
use elastovb::io::{generate_data, Problem, RunConfig};
use elastovb::mean::{update_mu, MuOptions};
use elastovb::stiefel::{cayley_step, SkewFactors};
use elastovb::vb::{orthonormality_defect, posterior_psi_stats, NoisePrior, ReducedPosterior};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN_MIN_BASES: usize = 5;
const GOLDEN_MAX_BASES: usize = 12;
const GOLDEN_MAX_CALLS: usize = 40;
const GOLDEN_MAX_WALL: Duration = Duration::from_secs(60);
const FULL_VS_REDUCED_MEAN_TOL: f64 = 0.05;
const FULL_VS_REDUCED_STD_TOL: f64 = 0.10;
const REDUCED_BASES: usize = 9;
const TAU_FACTOR: f64 = 2.0;
const IS_SAMPLES: usize = 1000;
const IS_MIN_ESS: f64 = 0.1;
const IS_MEAN_TOL: f64 = 0.05;
const ORACLE_MAP_TOL: f64 = 1e-6;
const ORACLE_SAMPLES: usize = 500;
const ORACLE_MIN_ESS: f64 = 0.95;
const PROPERTY_BUDGET: Duration = Duration::from_secs(30);

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

struct Golden {
    cfg: RunConfig,
    problem: Problem,
    yhat: DVector<f64>,
    tau_true: f64,
    trace: RunTrace,
    wall: Duration,
}

fn golden() -> Golden {
    let cfg = RunConfig::example1();
    let start = Instant::now();
    let data = generate_data(&cfg).expect("golden data");
    let problem = Problem::new(&cfg).expect("golden problem");
    let yhat = data.observations.yhat();
    let trace = run(
        &problem.model,
        &yhat,
        problem.mu0.clone(),
        problem.prior.clone(),
        &cfg.solver.driver,
    )
    .map_err(|f| f.error)
    .expect("golden run");
    Golden {
        tau_true: data.observations.tau_true.expect("noisy data"),
        cfg,
        problem,
        yhat,
        trace,
        wall: start.elapsed(),
    }
}

fn criterion_golden_run(g: &Golden) -> Outcome {
    let d = g.trace.state.dim_theta();
    let calls = g.trace.forward_calls;
    Outcome::new(
        (GOLDEN_MIN_BASES..=GOLDEN_MAX_BASES).contains(&d)
            && calls <= GOLDEN_MAX_CALLS
            && g.wall <= GOLDEN_MAX_WALL,
        format!(
            "d_theta = {d} (want {GOLDEN_MIN_BASES}..={GOLDEN_MAX_BASES}), forward calls = {calls} \
             (want <= {GOLDEN_MAX_CALLS}), wall = {:.1} s (want <= {} s), stop = {:?}",
            g.wall.as_secs_f64(),
            GOLDEN_MAX_WALL.as_secs(),
            g.trace.termination
        ),
    )
}

fn forced_run(g: &Golden, bases: usize) -> RunTrace {
    let config = DriverConfig {
        min_bases: bases,
        max_bases: bases,
        ..g.cfg.solver.driver.clone()
    };
    run(&g.problem.model, &g.yhat, g.problem.mu0.clone(), g.problem.prior.clone(), &config)
        .map_err(|f| f.error)
        .expect("forced run")
}

fn criterion_full_vs_reduced(g: &Golden) -> Outcome {
    let full_dim = g.problem.model.dim_psi();
    let reduced = posterior_psi_stats(&forced_run(g, REDUCED_BASES).state);
    let full = posterior_psi_stats(&forced_run(g, full_dim).state);
    let field = g.problem.full_field(full.mean.as_slice()).expect("full field");
    let range = field.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - field.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_gap = (&full.mean - &reduced.mean).amax() / range;
    let std_rel: Vec<f64> = full
        .std
        .iter()
        .zip(reduced.std.iter())
        .map(|(a, b)| relative_difference(*a, *b))
        .collect();
    let std_gap = median(&std_rel);
    Outcome::new(
        mean_gap <= FULL_VS_REDUCED_MEAN_TOL && std_gap <= FULL_VS_REDUCED_STD_TOL,
        format!(
            "d_theta {full_dim} vs {REDUCED_BASES}: max |mean diff| / range = {mean_gap:.3e} \
             (want <= {FULL_VS_REDUCED_MEAN_TOL}), median relative std diff = {std_gap:.3e} \
             (want <= {FULL_VS_REDUCED_STD_TOL})"
        ),
    )
}

fn criterion_noise_precision(g: &Golden) -> Outcome {
    let tau = g.trace.state.mean_tau();
    let ratio = tau / g.tau_true;
    Outcome::new(
        (1.0 / TAU_FACTOR..=TAU_FACTOR).contains(&ratio),
        format!(
            "<tau> = {tau:.4e}, true tau = {:.4e}, ratio = {ratio:.3} (want within x{TAU_FACTOR})",
            g.tau_true
        ),
    )
}

fn criterion_importance_sampling(g: &Golden) -> Outcome {
    let report = run_is(
        &g.trace.state,
        &g.problem.model,
        &g.yhat,
        IS_SAMPLES,
        g.cfg.validation.seed,
    )
    .expect("importance sampling");
    let cmp = compare_vb_is(&g.trace.state, &report).expect("comparison");
    Outcome::new(
        report.ess >= IS_MIN_ESS && cmp.mean_rel_median <= IS_MEAN_TOL,
        format!(
            "M = {IS_SAMPLES}, d_theta = {}: ESS = {:.4} (want >= {IS_MIN_ESS}), median relative \
             mean diff = {:.3e} (want <= {IS_MEAN_TOL})",
            g.trace.state.dim_theta(),
            report.ess,
            cmp.mean_rel_median
        ),
    )
}

fn criterion_linear_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = DMatrix::from_fn(12, 6, |_, _| rng.random_range(-1.0..1.0));
    let truth = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
    let sigma = 0.05;
    let noise = DVector::from_fn(12, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sigma * z
    });
    let yhat = &a * &truth + noise;
    let tau = 1.0 / (sigma * sigma);
    let ata = a.transpose() * &a;
    let map = ata.cholesky().expect("full column rank").solve(&(a.transpose() * &yhat));

    let model = LinearOracleModel::new(a, None).expect("oracle model");
    let config = DriverConfig {
        noise: NoisePrior::Known { tau },
        max_bases: 6,
        ..Default::default()
    };
    let trace = run(&model, &yhat, DVector::zeros(6), None, &config)
        .map_err(|f| f.error)
        .expect("oracle run");
    let map_err = (&trace.state.mu - &map).norm() / map.norm();
    let report = run_is(&trace.state, &model, &yhat, ORACLE_SAMPLES, 3).expect("oracle sampling");
    Outcome::new(
        map_err <= ORACLE_MAP_TOL && report.ess >= ORACLE_MIN_ESS,
        format!(
            "12x6 map, known tau, d_theta = {}: |mu - MAP| / |MAP| = {map_err:.3e} (want <= \
             {ORACLE_MAP_TOL}), ESS at M = {ORACLE_SAMPLES} = {:.4} (want >= {ORACLE_MIN_ESS})",
            trace.state.dim_theta(),
            report.ess
        ),
    )
}

fn property_stiefel() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for (d, p) in [(20, 3), (12, 5), (8, 6), (90, 4)] {
        let m = DMatrix::from_fn(d, p, |_, _| rng.random_range(-1.0..1.0));
        let mut w = m.qr().q().columns(0, p).into_owned();
        for step in 0..100 {
            let grad = DMatrix::from_fn(d, p, |_, _| rng.random_range(-2.0..2.0));
            let alpha = rng.random_range(0.01..1.0);
            w = cayley_step(&w, &SkewFactors::new(&grad, &w), alpha)
                .map_err(|e| e.to_string())?
                .0;
            let defect = orthonormality_defect(&w);
            if defect > 1e-10 {
                return Err(format!("{d}x{p} step {step}: defect {defect:e}"));
            }
        }
    }
    Ok(())
}

fn property_adjoint() -> Result<(), String> {
    let h = 1e-6;
    for n in 2..=4 {
        let mesh = Mesh2D::new(n, n, n as f64, n as f64).map_err(|e| e.to_string())?;
        let bc = BoundarySpec::platen_compression(&mesh, -0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let psi: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sel = PlaneStrainSolver::new(mesh, bc.clone(), 0.0)
            .map_err(|e| e.to_string())?
            .free_dofs()
            .to_vec();
        let field = MaterialField::free(psi.clone()).map_err(|e| e.to_string())?;
        let g = adjoint_jacobian(&mesh, &bc, &field, 0.0, &sel).map_err(|e| e.to_string())?;
        let mut g_fd = DMatrix::zeros(sel.len(), psi.len());
        for k in 0..psi.len() {
            let mut ys = Vec::new();
            for s in [h, -h] {
                let mut p = psi.clone();
                p[k] += s;
                let u = assemble_and_solve(&mesh, &bc, &MaterialField::free(p).unwrap(), 0.0)
                    .map_err(|e| e.to_string())?;
                ys.push(observe(&u, &sel).map_err(|e| e.to_string())?);
            }
            for i in 0..sel.len() {
                g_fd[(i, k)] = (ys[0][i] - ys[1][i]) / (2.0 * h);
            }
        }
        let err = (&g - &g_fd).amax() / g_fd.amax();
        if err > 1e-5 {
            return Err(format!("{n}x{n}: relative error {err:e}"));
        }
    }
    Ok(())
}

fn property_mean_monotone() -> Result<(), String> {
    for seed in 0..20 {
        let cfg = common::small_config(seed, 1e3);
        let (problem, yhat) = common::problem_and_data(&cfg);
        let mut prior = problem.prior.clone();
        let mut state = ReducedPosterior::new(problem.mu0.clone(), cfg.solver.driver.noise);
        let phase = update_mu(&mut state, &problem.model, &yhat, prior.as_mut(), &MuOptions::default())
            .map_err(|e| e.to_string())?;
        for r in phase.reports.iter().filter(|r| r.accepted) {
            if !(r.objective_after > r.objective_before) {
                return Err(format!(
                    "seed {seed}: accepted step {} -> {}",
                    r.objective_before, r.objective_after
                ));
            }
        }
    }
    Ok(())
}

fn property_info_gain(g: &Golden) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let mut cases: Vec<(Vec<f64>, Vec<f64>)> = g
        .trace
        .stages
        .iter()
        .map(|s| (s.lambda0.clone(), s.lambda.clone()))
        .collect();
    for _ in 0..200 {
        let n = rng.random_range(1..15);
        let l0: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-10.0..6.0))).collect();
        let l: Vec<f64> = l0.iter().map(|v| v + 10f64.powf(rng.random_range(-12.0..6.0))).collect();
        cases.push((l0, l));
    }
    for (l0, l) in &cases {
        if let Some(bad) = l0.iter().zip(l).find(|(a, b)| kl_term(**a, **b) < 0.0) {
            return Err(format!("negative term for {bad:?}"));
        }
        for d in 1..=l.len() {
            let (gain, _) = info_gain(l0, l, d).map_err(|e| e.to_string())?;
            if !(0.0..=1.0).contains(&gain) {
                return Err(format!("I({d}) = {gain}"));
            }
        }
    }
    Ok(())
}

fn property_ess_scale() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(65);
    for _ in 0..200 {
        let m = rng.random_range(2..500);
        let logs: Vec<f64> = (0..m).map(|_| rng.random_range(-20.0..20.0)).collect();
        let c = rng.random_range(-700.0..700.0);
        let shifted: Vec<f64> = logs.iter().map(|l| l + c).collect();
        let (a, b) = (effective_sample_size(&logs), effective_sample_size(&shifted));
        if (a - b).abs() > 1e-12 {
            return Err(format!("ESS {a} vs {b} after shift {c}"));
        }
    }
    Ok(())
}

fn property_shift_invariance(g: &Golden) -> Result<(), String> {
    let mesh = g.problem.mesh;
    let bc = g.cfg.boundary(&mesh);
    let psi = g.problem.truth.psi.clone();
    let observed = g.problem.model.observed().to_vec();
    let solve = |p: Vec<f64>| -> Result<Vec<f64>, String> {
        let u = assemble_and_solve(&mesh, &bc, &MaterialField::free(p).map_err(|e| e.to_string())?, 0.0)
            .map_err(|e| e.to_string())?;
        observe(&u, &observed).map_err(|e| e.to_string())
    };
    let base = solve(psi.clone())?;
    let scale = base.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for c in [-1.0, 0.5, 2.0] {
        let y = solve(psi.iter().map(|p| p + c).collect())?;
        let gap = y.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        if gap > 1e-12 {
            return Err(format!("c = {c}: relative change {gap:e}"));
        }
    }
    Ok(())
}

fn criterion_properties(g: &Golden) -> Outcome {
    let start = Instant::now();
    let checks: [(&str, Result<(), String>); 6] = [
        ("a stiefel", property_stiefel()),
        ("b adjoint", property_adjoint()),
        ("c mean steps", property_mean_monotone()),
        ("d info gain", property_info_gain(g)),
        ("e ess scale", property_ess_scale()),
        ("f shift", property_shift_invariance(g)),
    ];
    let elapsed = start.elapsed();
    let failures: Vec<String> = checks
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    let summary = if failures.is_empty() {
        "(a)-(f) hold".to_string()
    } else {
        failures.join("; ")
    };
    Outcome::new(
        failures.is_empty() && elapsed <= PROPERTY_BUDGET,
        format!(
            "{summary}, {:.2} s (want <= {} s)",
            elapsed.as_secs_f64(),
            PROPERTY_BUDGET.as_secs()
        ),
    )
}

fn main() -> ExitCode {
    let g = golden();
    let report = |id: u32, o: Outcome| {
        println!("criterion {id}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        o.pass
    };
    let results = [
        report(1, criterion_golden_run(&g)),
        report(3, criterion_noise_precision(&g)),
        report(4, criterion_importance_sampling(&g)),
        report(5, criterion_linear_oracle()),
        report(6, criterion_properties(&g)),
        report(2, criterion_full_vs_reduced(&g)),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
