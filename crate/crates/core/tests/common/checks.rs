//! One function per acceptance property. Each returns a one-line detail on
//! success and a description of the first violation on failure, so the same
//! code backs both ordinary tests and the acceptance report.

use std::thread;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;
use serde::Deserialize;

use super::{fd_gradient, rel_err, rng, LqrInstance};
use recede_core::agent::{Runtime, RuntimeOptions};
use recede_core::dynamics::{Model, SimState};
use recede_core::episode::{median, EpisodeOptions, SyncEpisode};
use recede_core::objective::risk_transform;
use recede_core::planner::gradient::{chain_to_params, costate_sweep};
use recede_core::planner::ilqg::{plan_iteration, rollout_sequence, Regularization};
use recede_core::planner::sampling::evaluate_candidate;
use recede_core::planner::{make_planner, PlannerKind, PlannerSettings};
use recede_core::rollout::linearize;
use recede_core::spline::{Interpolation, SplinePlan};
use recede_core::task::{find_task, registry};

pub type Check = Result<String, String>;

pub const RISKS: [f64; 7] = [-2.0, -1.0, -0.1, 0.0, 0.1, 1.0, 2.0];
pub const SPLINE_KINDS: [Interpolation; 3] = [Interpolation::Zero, Interpolation::Linear, Interpolation::Cubic];

/// Panics with the violation message, for use inside `#[test]`s.
pub fn assert_pass(check: Check) {
    if let Err(msg) = check {
        panic!("{msg}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- risk transform ----

pub fn risk_axioms() -> Check {
    let grid: Vec<f64> = (0..=10_000).map(|i| i as f64 * 1e-3).collect();
    let eps = 1e-6;
    let mut worst_slope: f64 = 0.0;
    for r in RISKS {
        ensure(risk_transform(0.0, r) == 0.0, || format!("ρ(0; {r}) ≠ 0"))?;
        let values: Vec<f64> = grid.iter().map(|&l| risk_transform(l, r)).collect();
        for (w, l) in values.windows(2).zip(&grid) {
            ensure(w[1] > w[0], || format!("not strictly increasing at l={l}, R={r}"))?;
        }
        if r < 0.0 {
            let bound = -1.0 / r;
            if let Some((l, v)) = grid.iter().zip(&values).find(|(_, v)| **v >= bound) {
                return Err(format!("ρ({l}; {r}) = {v} reaches bound {bound}"));
            }
        }
        if r == 0.0 {
            if let Some(l) = grid.iter().zip(&values).find(|(l, v)| *l != *v).map(|(l, _)| l) {
                return Err(format!("R=0 is not the identity at l={l}"));
            }
        }
        let slope = (risk_transform(eps, r) - risk_transform(-eps, r)) / (2.0 * eps);
        ensure((slope - 1.0).abs() < 1e-6, || format!("slope at 0 is {slope} for R={r}"))?;
        worst_slope = worst_slope.max((slope - 1.0).abs());
    }
    Ok(format!("{} risks × {} points, max |slope−1| = {worst_slope:.1e}", RISKS.len(), grid.len()))
}

// ---- splines ----

#[derive(Deserialize)]
pub struct OracleCase {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub queries: Vec<f64>,
    pub expected: Vec<Vec<f64>>,
}

pub fn oracle_cases() -> Vec<OracleCase> {
    serde_json::from_str(include_str!("../fixtures/cubic_oracle.json")).expect("fixture parses")
}

pub fn random_plan(seed: u64, kind: Interpolation) -> SplinePlan {
    let mut r = rng(seed);
    let knots = r.random_range(2..9);
    let dim = r.random_range(1..4);
    let mut t = r.random_range(-1.0..1.0);
    let mut times = Vec::new();
    for _ in 0..knots {
        times.push(t);
        t += r.random_range(0.05..1.0);
    }
    let values = (0..knots * dim).map(|_| r.random_range(-2.0..2.0)).collect();
    SplinePlan::new(times, values, dim, kind).unwrap()
}

pub fn cubic_oracle() -> Check {
    let cases = oracle_cases();
    let mut worst: f64 = 0.0;
    for (n, case) in cases.iter().enumerate() {
        let dim = case.values[0].len();
        let plan = SplinePlan::new(case.times.clone(), case.values.concat(), dim, Interpolation::Cubic)
            .map_err(|e| format!("case {n}: {e}"))?;
        for (q, want) in case.queries.iter().zip(&case.expected) {
            for (g, w) in plan.evaluate(*q).iter().zip(want) {
                let err = (g - w).abs() / (1.0 + w.abs());
                worst = worst.max(err);
                ensure(err < 1e-12, || format!("case {n} t={q}: {g} vs oracle {w}"))?;
            }
        }
    }
    Ok(format!("{} plans, max rel err {worst:.1e}", cases.len()))
}

pub fn knot_interpolation() -> Check {
    for seed in 0..100 {
        for kind in SPLINE_KINDS {
            let plan = random_plan(seed, kind);
            for k in 0..plan.num_knots() {
                let got = plan.evaluate(plan.times()[k]);
                ensure(got == plan.knot(k), || format!("{kind:?} seed {seed} knot {k}: {got:?}"))?;
            }
        }
    }
    Ok("exact at every knot".into())
}

pub fn param_derivatives() -> Check {
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for seed in 0..30 {
        for kind in SPLINE_KINDS {
            let plan = random_plan(seed, kind);
            let dim = plan.dim();
            let (t0, t1) = (plan.start_time() - 0.5, plan.end_time() + 0.5);
            for s in 0..40 {
                let t = t0 + (t1 - t0) * s as f64 / 39.0;
                let analytic = plan.derivative_wrt_params(t).to_dense(plan.num_knots());
                for k in 0..plan.num_knots() {
                    for i in 0..dim {
                        let mut hi = plan.clone();
                        hi.values_mut()[k * dim + i] += eps;
                        let mut lo = plan.clone();
                        lo.values_mut()[k * dim + i] -= eps;
                        let (eh, el) = (hi.evaluate(t), lo.evaluate(t));
                        let fd = (eh[i] - el[i]) / (2.0 * eps);
                        let err = (fd - analytic[k]).abs() / analytic[k].abs().max(1.0);
                        worst = worst.max(err);
                        ensure(err < 1e-6, || format!("{kind:?} t={t} knot {k}: fd {fd} vs {}", analytic[k]))?;
                        let base = plan.evaluate(t);
                        for j in (0..dim).filter(|&j| j != i) {
                            ensure(eh[j] == base[j], || format!("{kind:?}: channel {j} moved with channel {i}"))?;
                        }
                    }
                }
            }
        }
    }
    Ok(format!("max rel err {worst:.1e}"))
}

pub fn zero_linear_bounded() -> Check {
    for seed in 0..100 {
        for kind in [Interpolation::Zero, Interpolation::Linear] {
            let plan = random_plan(seed, kind);
            for i in 0..plan.dim() {
                let channel: Vec<f64> = (0..plan.num_knots()).map(|k| plan.knot(k)[i]).collect();
                let lo = channel.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = channel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let (t0, t1) = (plan.start_time() - 1.0, plan.end_time() + 1.0);
                for s in 0..=1000 {
                    let v = plan.evaluate(t0 + (t1 - t0) * s as f64 / 1000.0)[i];
                    ensure(v >= lo && v <= hi, || format!("{kind:?} seed {seed}: {v} outside [{lo}, {hi}]"))?;
                }
            }
        }
    }
    Ok("within knot range on 1001-point grids".into())
}

// ---- derivatives ----

/// Analytic cost gradient against central differences of the cost, on every
/// built-in task at 50 random states, cycling the risk through 0 and ±0.3.
pub fn cost_gradients() -> Check {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for task in registry() {
        let model = task.build_model().map_err(|e| e.to_string())?;
        let spec = model.spec().clone();
        for n in 0..50 {
            let mut cost = task.cost.clone();
            cost.risk = [0.0, 0.3, -0.3][n % 3];
            let x: Vec<f64> = (0..spec.nx()).map(|_| r.random_range(-2.0..2.0)).collect();
            let u: Vec<f64> = (0..spec.nu)
                .map(|i| 0.9 * r.random_range(spec.control_lower[i]..spec.control_upper[i]))
                .collect();
            let state = SimState::from_flat(&x, spec.nq, 0.0);
            let jac = model.fd_jacobians(&state, &u, 1e-6).map_err(|e| e.to_string())?;
            let res = model.residual(&state, &u).map_err(|e| e.to_string())?;
            let (gx, gu) = cost.gradient(&res, &jac.c, &jac.d).map_err(|e| e.to_string())?;
            let fx = fd_gradient(&x, 1e-5, |y| {
                cost.cost(&model.residual(&SimState::from_flat(y, spec.nq, 0.0), &u).unwrap())
            });
            let fu = fd_gradient(&u, 1e-5, |v| cost.cost(&model.residual(&state, v).unwrap()));
            // The floor keeps FD rounding (~1e-11) from dominating tiny gradients.
            let err = rel_err(gx.as_slice(), &fx, 1e-4).max(rel_err(gu.as_slice(), &fu, 1e-4));
            worst = worst.max(err);
            ensure(err < 1e-5, || format!("{} state {n}: rel err {err:.2e}", task.name))?;
        }
    }
    Ok(format!("4 tasks × 50 states, max rel err {worst:.1e}"))
}

/// Pendulum problem with a random control sequence, one knot per step.
fn pendulum_sequence(seed: u64, horizon: usize) -> (Model, recede_core::objective::CostSpec, SimState, SplinePlan) {
    let task = find_task("pendulum-swingup").unwrap();
    let model = task.build_model().unwrap();
    let spec = model.spec();
    let mut r = rng(seed);
    let x0 = SimState::new(vec![r.random_range(-0.5..0.5)], vec![r.random_range(-1.0..1.0)], 0.0);
    let times: Vec<f64> = (0..=horizon).map(|t| t as f64 * model.timestep()).collect();
    let values = (0..=horizon)
        .map(|_| 0.5 * r.random_range(spec.control_lower[0]..spec.control_upper[0]))
        .collect();
    let plan = SplinePlan::new(times, values, 1, Interpolation::Zero).unwrap();
    (model, task.cost, x0, plan)
}

/// Co-state `∂J/∂u` against central differences of the rolled-out `J`.
pub fn costate_gradient() -> Check {
    let horizon = 50;
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let (model, cost, x0, plan) = pendulum_sequence(seed, horizon);
        let rollout = rollout_sequence(&plan, &x0, &model, &cost, horizon).map_err(|e| e.to_string())?;
        let steps = linearize(&model, &cost, &rollout, 1e-6).map_err(|e| e.to_string())?;
        let sweep = costate_sweep(&steps).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = sweep.dj_du.iter().map(|g| g[0]).collect();
        let fd = fd_gradient(plan.values(), 1e-5, |v| {
            let p = SplinePlan::new(plan.times().to_vec(), v.to_vec(), 1, Interpolation::Zero).unwrap();
            rollout_sequence(&p, &x0, &model, &cost, horizon).unwrap().total
        });
        let err = rel_err(&analytic, &fd, 1e-8);
        worst = worst.max(err);
        ensure(err < 1e-3, || format!("seed {seed}: rel err {err:.2e}"))?;
    }
    Ok(format!("pendulum T={horizon}, 5 sequences, max rel err {worst:.1e}"))
}

/// Chain rule through the spline basis against central differences in the
/// knot values of a cubic plan.
pub fn spline_parameter_gradient() -> Check {
    let task = find_task("pendulum-swingup").unwrap();
    let model = task.build_model().unwrap();
    let settings = PlannerSettings { horizon: 50, ..task.settings.clone() };
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let x0 = SimState::new(vec![r.random_range(-0.5..0.5)], vec![0.0], 0.0);
        let times = recede_core::spline::uniform_times(0.0, 50.0 * model.timestep(), 4);
        let values: Vec<f64> = times.iter().map(|_| r.random_range(-1.5..1.5)).collect();
        let plan = SplinePlan::new(times.clone(), values.clone(), 1, Interpolation::Cubic).unwrap();
        let rollout = evaluate_candidate(&plan, &x0, &model, &task.cost, 50).map_err(|e| e.to_string())?;
        let steps = linearize(&model, &task.cost, &rollout, settings.fd_eps).map_err(|e| e.to_string())?;
        let sweep = costate_sweep(&steps).map_err(|e| e.to_string())?;
        let analytic = chain_to_params(&sweep.dj_du, &plan, &rollout.times).map_err(|e| e.to_string())?;
        let fd = fd_gradient(&values, 1e-5, |v| {
            let p = SplinePlan::new(times.clone(), v.to_vec(), 1, Interpolation::Cubic).unwrap();
            evaluate_candidate(&p, &x0, &model, &task.cost, 50).unwrap().total
        });
        let err = rel_err(&analytic, &fd, 1e-8);
        worst = worst.max(err);
        ensure(err < 1e-3, || format!("seed {seed}: rel err {err:.2e}"))?;
    }
    Ok(format!("max rel err {worst:.1e}"))
}

pub fn particle_jacobians() -> Check {
    let model = Model::particle();
    let h = model.timestep();
    let mut a = DMatrix::<f64>::identity(4, 4);
    a[(0, 2)] = h;
    a[(1, 3)] = h;
    let mut b = DMatrix::<f64>::zeros(4, 2);
    b[(0, 0)] = h * h;
    b[(1, 1)] = h * h;
    b[(2, 0)] = h;
    b[(3, 1)] = h;
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    for n in 0..50 {
        let s = SimState::new(
            vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
            vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
            0.0,
        );
        let u = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let j = model.fd_jacobians(&s, &u, 1e-6).map_err(|e| e.to_string())?;
        let err = (&j.a - &a).amax().max((&j.b - &b).amax());
        worst = worst.max(err);
        ensure(err < 1e-5, || format!("state {n}: max abs err {err:.2e}"))?;
    }
    Ok(format!("max abs err {worst:.1e}"))
}

// ---- iLQG against Riccati ----

pub fn ilqg_matches_riccati() -> Check {
    let horizon = 30;
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    let mut most_iterations = 0;
    for n in 0..20 {
        let nx = r.random_range(1..=4);
        let nu = r.random_range(1..=2);
        let lqr = LqrInstance::random(&mut r, nx, nu);
        let model = lqr.model();
        let cost = lqr.cost();
        let oracle = lqr.riccati_controls(horizon);
        let settings = PlannerSettings { horizon, ..Default::default() };
        let times: Vec<f64> = (0..=horizon).map(|t| t as f64 * model.timestep()).collect();
        let mut plan = SplinePlan::constant(times, &vec![0.0; nu], Interpolation::Zero).unwrap();
        let x0 = SimState::from_flat(lqr.x0.as_slice(), model.spec().nq, 0.0);
        let mut reg = Regularization::default();
        let mut err = f64::INFINITY;
        let mut iterations = 0;
        while iterations < 5 && err >= 1e-6 {
            plan = plan_iteration(&plan, &x0, &model, &cost, &settings, &mut reg)
                .map_err(|e| format!("instance {n}: {e}"))?
                .plan;
            iterations += 1;
            err = (0..=horizon)
                .flat_map(|t| plan.knot(t).iter().zip(oracle[t].iter()).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
                .fold(0.0, f64::max);
        }
        ensure(err < 1e-6, || format!("instance {n} (nx={nx}, nu={nu}): max abs err {err:.2e} after 5 iterations"))?;
        worst = worst.max(err);
        most_iterations = most_iterations.max(iterations);
    }
    Ok(format!("20 instances, max abs err {worst:.1e}, at most {most_iterations} iteration(s)"))
}

// ---- monotonicity ----

pub fn monotone_under_frozen_state(kind: PlannerKind, iterations: usize) -> Check {
    let task = find_task("pendulum-swingup").unwrap();
    let model = task.build_model().unwrap();
    let state = task.seeded_initial_state(0);
    let mut planner = make_planner(kind, task.seeded_settings(0), &model).map_err(|e| e.to_string())?;
    let mut previous = f64::INFINITY;
    let mut first = None;
    for k in 0..iterations {
        let report = planner.iterate(&state, &model, &task.cost);
        if let Some(reason) = report.aborted {
            return Err(format!("{kind} aborted at iteration {k}: {reason}"));
        }
        ensure(report.best_cost <= report.nominal_cost, || {
            format!("{kind} iteration {k}: kept {} over nominal {}", report.best_cost, report.nominal_cost)
        })?;
        ensure(report.best_cost <= previous, || {
            format!("{kind} iteration {k}: J rose from {previous} to {}", report.best_cost)
        })?;
        first.get_or_insert(report.nominal_cost);
        previous = report.best_cost;
    }
    Ok(format!("{kind}: J {:.3} → {previous:.3}", first.unwrap_or(f64::NAN)))
}

// ---- behavior ----

pub struct SwingUp {
    pub successes: usize,
    pub seeds: usize,
    pub solved_at: Vec<Option<f64>>,
    pub planning_ms: Vec<f64>,
}

pub fn pendulum_swing_up(kind: PlannerKind, seeds: u64) -> SwingUp {
    let task = find_task("pendulum-swingup").unwrap();
    let mut solved_at = Vec::new();
    let mut planning_ms = Vec::new();
    for seed in 0..seeds {
        let mut episode = SyncEpisode::new(&task, EpisodeOptions::new(kind, seed)).unwrap();
        let summary = episode.run(10.0, |rec| planning_ms.push(rec.planning_ms));
        solved_at.push(summary.solved_at);
    }
    SwingUp {
        successes: solved_at.iter().filter(|s| s.is_some()).count(),
        seeds: seeds as usize,
        solved_at,
        planning_ms,
    }
}

/// Median per-iteration planning time of each built-in task under its
/// default planner over two simulated seconds.
pub fn planning_latency() -> Vec<(String, PlannerKind, f64)> {
    registry()
        .into_iter()
        .map(|task| {
            let mut episode = SyncEpisode::new(&task, EpisodeOptions::new(task.planner, 0)).unwrap();
            let mut ms = Vec::new();
            episode.run(2.0, |rec| ms.push(rec.planning_ms));
            (task.name.clone(), task.planner, median(&ms))
        })
        .collect()
}

// ---- asynchrony ----

/// Planner iterations per simulated second in the threaded runtime, measured
/// over `sim_seconds` after a short warm-up.
pub fn iterations_per_sim_second(slowdown: f64, sim_seconds: f64) -> Result<f64, String> {
    let task = find_task("pendulum-swingup").unwrap();
    let h = task.build_model().map_err(|e| e.to_string())?.timestep();
    let runtime = Runtime::start(
        task,
        PlannerKind::Sampling,
        RuntimeOptions {
            slowdown,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let wait_for_steps = |target: u64| {
        let deadline = Instant::now() + Duration::from_secs_f64(3.0 * slowdown * sim_seconds + 10.0);
        loop {
            let steps = runtime.agent().steps;
            if steps >= target || Instant::now() > deadline {
                return (steps, runtime.planner_iterations());
            }
            thread::sleep(Duration::from_millis(1));
        }
    };
    let warmup = (0.5 / h).round() as u64;
    let (s0, i0) = wait_for_steps(warmup);
    let (s1, i1) = wait_for_steps(s0 + (sim_seconds / h).round() as u64);
    runtime.stop();
    let elapsed = (s1 - s0) as f64 * h;
    if elapsed <= 0.0 {
        return Err("simulation did not advance".into());
    }
    Ok((i1 - i0) as f64 / elapsed)
}
