//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#![allow(clippy::needless_range_loop)]

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use parabolicity_core::capacity::{capacity, sublevel_scaling_check};
use parabolicity_core::convexity::{lemma_star_suite, modulus_suite};
use parabolicity_core::domain::build_radial_grid_unchecked;
use parabolicity_core::evans::{capacity_asymptotics, evans_iterate};
use parabolicity_core::khasminskii::{
    energy_chain_audit, forward_khasminskii_check, gradient_norm, khasminskii_on_grid, FiniteEnergyFunction,
    KhasminskiiError, ReverseConfig, ReverseKhasminskii,
};
use parabolicity_core::quadrature::{integrate, QuadOptions};
use parabolicity_core::solver::{
    check_supersolution, interior_nodes, p_energy, solve_dirichlet, solve_obstacle, ObstacleProblem,
};
use parabolicity_core::{
    BoundaryValues, DiscreteDomain, Exhaustion, Grading, ModelManifold, NodeSet, OuterRadius, RadialGrid,
    ScalarField, SolverOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// `f_{p,1}(r)` for `A(r) = r^{n-1}`.
fn euclid_f(n: usize, p: f64, r: f64) -> f64 {
    let a = (n as f64 - 1.0) / (p - 1.0);
    if (a - 1.0).abs() < 1e-15 {
        r.ln()
    } else {
        (r.powf(1.0 - a) - 1.0) / (1.0 - a)
    }
}

fn omega(n: usize) -> f64 {
    match n {
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => unreachable!(),
    }
}

fn radial_solver_oracle() -> Outcome {
    let mut worst_sup: f64 = 0.0;
    let mut worst_cap: f64 = 0.0;
    let mut slowest = Duration::ZERO;
    for n in [2, 3] {
        let m = ModelManifold::euclidean(n);
        for p in [1.5, 2.0, 3.0] {
            let start = Instant::now();
            let d = parabolicity_core::domain::build_radial_grid(&m, p, 2.0, 1024).map_err(|e| e.to_string())?;
            let opts = SolverOptions::default();
            let sol = solve_dirichlet(&d, &BoundaryValues::condenser(&d, 0.0, 1.0), p, &opts).map_err(|e| e.to_string())?;
            ensure(sol.report.converged(), || format!("n={n} p={p}: {:?}", sol.report))?;
            let top = euclid_f(n, p, 2.0);
            let sup = d
                .nodes()
                .iter()
                .enumerate()
                .map(|(i, node)| (sol.field.values[i] - euclid_f(n, p, node.r()) / top).abs())
                .fold(0.0, f64::max);
            let cap = capacity(&d, &d.inner_boundary(), p, &opts).map_err(|e| e.to_string())?;
            let exact = omega(n) * top.powf(1.0 - p);
            let rel = (cap.value - exact).abs() / exact;
            slowest = slowest.max(start.elapsed());
            ensure(sup <= 1e-3, || format!("n={n} p={p}: sup error {sup:e}"))?;
            ensure(rel <= 5e-3, || format!("n={n} p={p}: capacity {} vs {exact}", cap.value))?;
            worst_sup = worst_sup.max(sup);
            worst_cap = worst_cap.max(rel);
        }
    }
    ensure(slowest < Duration::from_secs(10), || format!("slowest case {slowest:?}"))?;
    Ok(format!(
        "6 cases, sup error ≤ {worst_sup:.1e}, capacity error ≤ {worst_cap:.1e}, slowest {slowest:.2?}"
    ))
}

fn sublevel_scaling() -> Outcome {
    let mut lo: f64 = 1.0;
    let mut hi: f64 = 1.0;
    for n in [2, 3] {
        let m = ModelManifold::euclidean(n);
        for p in [1.5, 2.0, 3.0] {
            let d = parabolicity_core::domain::build_radial_grid(&m, p, 2.0, 2048).map_err(|e| e.to_string())?;
            let opts = SolverOptions::default();
            let cap = capacity(&d, &d.inner_boundary(), p, &opts).map_err(|e| e.to_string())?;
            for (t, s) in [(0.0, 0.5), (0.25, 0.75), (0.5, 1.0)] {
                let r = sublevel_scaling_check(&d, &cap, t, s, p, &opts).map_err(|e| e.to_string())?;
                ensure((0.99..=1.01).contains(&r.ratio), || format!("n={n} p={p} ({t},{s}): ratio {}", r.ratio))?;
                lo = lo.min(r.ratio);
                hi = hi.max(r.ratio);
            }
        }
    }
    Ok(format!("18 ratios in [{lo:.5}, {hi:.5}]"))
}

/// Projected SOR on `Σ_c w_c (u_b − u_a)²` over a chain of nodes with both ends fixed.
fn psor_chain(weights: &[f64], obstacle: &[f64], ends: (f64, f64)) -> Vec<f64> {
    let n = obstacle.len();
    let mut u: Vec<f64> = obstacle.to_vec();
    u[0] = ends.0;
    u[n - 1] = ends.1;
    for x in &mut u[1..n - 1] {
        *x = x.max(0.0);
    }
    for _ in 0..2_000_000 {
        let mut change: f64 = 0.0;
        for i in 1..n - 1 {
            let (wl, wr) = (weights[i - 1], weights[i]);
            let gs = (wl * u[i - 1] + wr * u[i + 1]) / (wl + wr);
            let next = (u[i] + 1.8 * (gs - u[i])).max(obstacle[i]);
            change = change.max((next - u[i]).abs());
            u[i] = next;
        }
        if change < 1e-15 {
            break;
        }
    }
    u
}

fn obstacle_problem() -> Outcome {
    let opts = SolverOptions::default();
    let m = ModelManifold::euclidean(2);

    // Inactive obstacle: same as the Dirichlet solution.
    let mut inactive_gap: f64 = 0.0;
    for p in [1.5, 2.0, 3.0] {
        let d = parabolicity_core::domain::build_radial_grid(&m, p, 2.0, 256).map_err(|e| e.to_string())?;
        let bc = BoundaryValues::condenser(&d, 1.0, 0.0);
        let dir = solve_dirichlet(&d, &bc, p, &opts).map_err(|e| e.to_string())?;
        let obs = solve_obstacle(
            &d,
            &ObstacleProblem {
                p,
                obstacle: vec![-1.0; d.len()],
                boundary: bc,
            },
            &opts,
        )
        .map_err(|e| e.to_string())?;
        let gap = obs.field.sup_distance(&dir.field);
        ensure(gap <= 10.0 * opts.tol, || format!("p={p}: inactive obstacle differs by {gap:e}"))?;
        inactive_gap = inactive_gap.max(gap);
    }

    // Hat obstacle on a 64-node chain against projected SOR.
    let d = build_radial_grid_unchecked(&m, 2.0, OuterRadius::Radius(2.0), 63, Grading::Uniform)
        .map_err(|e| e.to_string())?;
    let psi: Vec<f64> = d.nodes().iter().map(|n| 0.3 - 1.2 * (n.r() - 1.5).abs()).collect();
    let w = d.cell_weights(2.0);
    let quad = |u: &[f64]| -> f64 { w.iter().enumerate().map(|(c, wc)| wc * (u[c + 1] - u[c]).powi(2)).sum() };
    let probe: Vec<f64> = (0..d.len()).map(|i| (i as f64 * 0.37).sin()).collect();
    let e_probe = p_energy(&d, &ScalarField { values: probe.clone() }, 2.0);
    ensure((e_probe - quad(&probe)).abs() <= 1e-12 * e_probe, || {
        format!("chain energy layout mismatch: {e_probe} vs {}", quad(&probe))
    })?;
    let oracle = psor_chain(&w, &psi, (0.0, 0.0));
    let mut hat_gap: f64 = 0.0;
    let mut solutions = Vec::new();
    for p in [2.0, 3.0] {
        let sol = solve_obstacle(
            &d,
            &ObstacleProblem {
                p,
                obstacle: psi.clone(),
                boundary: BoundaryValues::condenser(&d, 0.0, 0.0),
            },
            &opts,
        )
        .map_err(|e| e.to_string())?;
        ensure(sol.report.converged(), || format!("hat p={p}: {:?}", sol.report))?;
        if p == 2.0 {
            hat_gap = sol.field.values.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure(hat_gap <= 1e-6, || format!("hat obstacle differs from PSOR by {hat_gap:e}"))?;
            ensure(!sol.contact.is_empty(), || "hat obstacle never touched".into())?;
        }
        solutions.push((p, sol.field));
    }

    // Random feasible competitors never beat the solution.
    let mut rng = ChaCha8Rng::seed_from_u64(0x0b57);
    let mut trials = 0;
    for (p, u) in &solutions {
        let e0 = p_energy(&d, u, *p);
        for _ in 0..5000 {
            let scale = 10f64.powf(rng.gen_range(-7.0..-1.0));
            let density = rng.gen_range(0.05..1.0);
            let mut v = u.clone();
            for i in 1..d.len() - 1 {
                if rng.gen_bool(density) {
                    v.values[i] = (v.values[i] + scale * rng.gen_range(-1.0..1.0)).max(psi[i]);
                }
            }
            let e1 = p_energy(&d, &v, *p);
            ensure(e1 >= e0 - 1e-12 * e0, || format!("p={p}: competitor energy {e1} < {e0}"))?;
            trials += 1;
        }
    }
    Ok(format!(
        "inactive gap {inactive_gap:.1e}, hat vs PSOR {hat_gap:.1e}, {trials} feasible competitors all higher"
    ))
}

fn lemma_star() -> Outcome {
    let ps = [1.5, 2.0, 3.0, 4.5];
    let star = lemma_star_suite(&ps, 250_000, 2024).map_err(|e| e.to_string())?;
    let modulus = modulus_suite(&ps, 25_000, 2024).map_err(|e| e.to_string())?;
    ensure(star.violations == 0, || format!("{} growth-estimate violations", star.violations))?;
    ensure(modulus.violations == 0, || format!("{} modulus violations", modulus.violations))?;
    ensure(star.hypothesis_met > star.trials / 10, || "hypothesis rarely met".into())?;
    Ok(format!(
        "{} pairs ({} meeting the hypothesis), {} unit pairs, 0 violations",
        star.trials, star.hypothesis_met, modulus.trials
    ))
}

struct ReverseRun {
    p: f64,
    domain: DiscreteDomain,
    compact: NodeSet,
    f: FiniteEnergyFunction,
    rev: ReverseKhasminskii,
}

fn reverse_runs() -> Result<Vec<ReverseRun>, String> {
    let m = ModelManifold::euclidean(2);
    let grids = [
        (2.0, RadialGrid::new(OuterRadius::LogRadius(1e84), 4000).graded(Grading::LogGeometric(1.05))),
        (3.0, RadialGrid::new(OuterRadius::LogRadius(420.0), 4200).graded(Grading::Logarithmic)),
    ];
    let mut runs = Vec::new();
    for (p, grid) in grids {
        let d = grid.build(&m, p).map_err(|e| e.to_string())?;
        let k = d.inner_boundary();
        let config = ReverseConfig {
            steps: 5,
            ..ReverseConfig::default()
        };
        let (f, rev) = khasminskii_on_grid(&d, &k, p, &config, &SolverOptions::default(), 400)
            .map_err(|e| format!("p={p}: {e}"))?;
        runs.push(ReverseRun {
            p,
            domain: d,
            compact: k,
            f,
            rev,
        });
    }
    Ok(runs)
}

fn reverse_construction(runs: &[ReverseRun]) -> Outcome {
    let mut notes = Vec::new();
    for run in runs {
        let (p, d, rev) = (run.p, &run.domain, &run.rev);
        ensure(rev.steps.len() == 5, || format!("p={p}: {} steps", rev.steps.len()))?;
        for w in rev.stages.windows(2) {
            let dropped = w[0].values.iter().zip(&w[1].values).map(|(a, b)| a - b).fold(0.0, f64::max);
            ensure(dropped <= 1e-9, || format!("p={p}: stages drop by {dropped:e}"))?;
        }
        for s in &rev.steps {
            let target = 0.5f64.powi(s.n as i32 + 1);
            ensure(s.sup_gap < target, || format!("p={p} step {}: gap {} ≥ {target}", s.n, s.sup_gap))?;
        }
        let nodes = interior_nodes(d).difference(&run.compact);
        let check = check_supersolution(d, &rev.witness, p, &nodes, 1e-9);
        ensure(check.passed, || format!("p={p}: supersolution fails at {} nodes, worst {:e}", check.offending.len(), check.worst))?;
        let energy = p_energy(d, &rev.witness, p);
        let bound = (gradient_norm(d, &rev.stages[1], p) + (1..=5).map(|n| 0.5f64.powi(n)).sum::<f64>()).powf(p);
        ensure(energy <= bound, || format!("p={p}: energy {energy} > bound {bound}"))?;
        let top = d.outer_boundary().iter().map(|i| rev.witness.values[i]).fold(f64::INFINITY, f64::min);
        notes.push(format!("p={p}: energy {energy:.4} ≤ {bound:.4}, outer value {top}"));
    }

    let m3 = ModelManifold::euclidean(3);
    for r_max in [4.0, 8.0, 16.0] {
        let d = parabolicity_core::domain::build_radial_grid(&m3, 2.0, r_max, 1024).map_err(|e| e.to_string())?;
        let res = khasminskii_on_grid(
            &d,
            &d.inner_boundary(),
            2.0,
            &ReverseConfig::default(),
            &SolverOptions::default(),
            400,
        );
        ensure(matches!(res, Err(KhasminskiiError::GridTooSmall(_))), || {
            format!("n=3 r_max={r_max}: expected grid-too-small, got {:?}", res.as_ref().map(|_| ()))
        })?;
    }
    notes.push("n=3 grid-too-small at r_max 4, 8, 16".into());
    Ok(notes.join("; "))
}

fn energy_audit(runs: &[ReverseRun]) -> Outcome {
    let mut notes = Vec::new();
    for run in runs {
        let (p, d, rev) = (run.p, &run.domain, &run.rev);
        let mut previous = f64::INFINITY;
        for s in &rev.steps {
            let j = s.j_bar as f64;
            let f_j = run.f.field.map(|x| (x / j).min(1.0));
            let audit = energy_chain_audit(d, &rev.stages[s.n], &rev.stages[s.n + 1], &f_j, s.n as f64, p, 1e-9)
                .map_err(|e| e.to_string())?;
            ensure(audit.passed(), || format!("p={p} step {}: {audit:?}", s.n))?;
            ensure(s.audit.passed(), || format!("p={p} step {}: recorded audit failed", s.n))?;
            let delta = rev.stages[s.n + 1].zip(&rev.stages[s.n], |a, b| a - b);
            let norm = gradient_norm(d, &delta, p);
            ensure(norm < previous, || format!("p={p} step {}: ‖∇δ‖ {norm} not below {previous}", s.n))?;
            previous = norm;
        }
        notes.push(format!("p={p}: 5 steps, final ‖∇δ‖ {previous:.2e}"));
    }
    Ok(notes.join("; "))
}

fn evans_radial_identities() -> Outcome {
    let levels = [0.5, 1.0, 2.0, 5.0];
    let mut worst: f64 = 0.0;
    let models = [
        ("euclidean:n=2", 2.0),
        ("euclidean:n=2", 3.0),
        ("euclidean:n=3", 3.0),
        ("logpower:n=2,alpha=1,beta=1", 2.0),
    ];
    for (spec, p) in models {
        let m = ModelManifold::parse_spec(spec).map_err(|e| e.to_string())?;
        let ev = m.radial_evans(p, &levels, 64).map_err(|e| format!("{spec} p={p}: {e}"))?;
        let om = m.sphere_area();
        for lvl in &ev.levels {
            let t = lvl.t;
            let big_r = lvl.log_radius.exp();
            // Energy along r rather than ln r: ω ∫ A^{-1/(p-1)} dr.
            let area = |r: f64| m.area(r).unwrap_or(f64::NAN);
            let q = integrate(
                |r| area(r).powf(-1.0 / (p - 1.0)),
                m.base_radius(),
                big_r,
                QuadOptions::default(),
            )
            .map_err(|e| e.to_string())?;
            let energy_rel = (om * q.value - om * t).abs() / (om * t);
            let energy_rel_core = (lvl.energy - om * t).abs() / (om * t);
            let cap = m.annulus_capacity(p, m.base_radius(), big_r).map_err(|e| e.to_string())?;
            let cap_exact = om * t.powf(1.0 - p);
            let cap_rel = (cap - cap_exact).abs() / cap_exact;
            for (what, rel) in [("energy", energy_rel), ("core energy", energy_rel_core), ("capacity", cap_rel)] {
                ensure(rel <= 1e-8, || format!("{spec} p={p} t={t}: {what} relative error {rel:e}"))?;
                worst = worst.max(rel);
            }
            if spec.starts_with("euclidean") {
                let n = m.dimension();
                let rel = (euclid_f(n, p, big_r) - t).abs() / t;
                ensure(rel <= 1e-8, || format!("{spec} p={p} t={t}: level radius off by {rel:e}"))?;
            }
        }
    }
    Ok(format!("4 models × 4 levels, worst relative error {worst:.1e}"))
}

fn evans_iteration() -> Outcome {
    let start = Instant::now();
    let base = ModelManifold::euclidean(2);
    let d = RadialGrid::new(OuterRadius::LogRadius(10.24), 256)
        .graded(Grading::Logarithmic)
        .build_surface(&base, 2.0, 256)
        .map_err(|e| e.to_string())?;
    let reference = ModelManifold::euclidean(2).with_base_radius(0.24f64.exp());
    let k = NodeSet::from_fn(d.len(), |i| d.ring_of(i) == 0 && i % 256 <= 128);
    let opts = SolverOptions::default();
    let run = evans_iterate(&d, &k, &reference, 2.0, 10, &opts).map_err(|e| e.to_string())?;
    let table = capacity_asymptotics(&d, &k, &run, &reference, &[2.0, 4.0, 8.0], &opts).map_err(|e| e.to_string())?;

    // Independent comparison against ln(r/r̄) on the limit field.
    let slack = 1e-8;
    let mut below: f64 = 0.0;
    let mut above: f64 = 0.0;
    for (i, node) in d.nodes().iter().enumerate() {
        let e_rad = (node.log_r - 0.24).max(0.0);
        below = below.max(e_rad - run.field.values[i]);
        above = above.max(run.field.values[i] - run.big_m - e_rad);
    }
    ensure(below <= slack, || format!("e < E by {below:e}"))?;
    ensure(above <= slack, || format!("e > E + M by {above:e}"))?;
    ensure(run.levels.iter().all(|l| l.comparison_ok && l.sandwich_ok && l.monotone_ok), || {
        format!("level invariants: {:?}", run.levels)
    })?;
    ensure(table.band_ratio <= 1.3, || format!("band ratio {}", table.band_ratio))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    let normalized: Vec<String> = table.rows.iter().map(|r| format!("{:.4}", r.normalized)).collect();
    Ok(format!(
        "M = {:.4}, t·cap at t=2,4,8: [{}], band ratio {:.4}, {elapsed:.1?}",
        run.big_m,
        normalized.join(", "),
        table.band_ratio
    ))
}

fn forward_check(runs: &[ReverseRun]) -> Outcome {
    let mut notes = Vec::new();
    for run in runs {
        let d = &run.domain;
        let last = d.rings() - 1;
        let mut rings: Vec<usize> = (0..8).map(|k| last >> k).filter(|&r| r >= 4).collect();
        rings.reverse();
        let ex = Exhaustion::by_rings(d, &rings).map_err(|e| e.to_string())?;
        let report = forward_khasminskii_check(d, &run.compact, &run.rev.witness, run.p, &ex, &SolverOptions::default())
            .map_err(|e| e.to_string())?;
        ensure(report.inequality_holds, || format!("p={}: {:?}", run.p, report.levels))?;
        ensure(report.capacity_decrease >= 0.3, || {
            format!("p={}: capacity decrease {}", run.p, report.capacity_decrease)
        })?;
        notes.push(format!(
            "p={}: {} levels, capacity decrease {:.1}%",
            run.p,
            report.levels.len(),
            100.0 * report.capacity_decrease
        ));
    }
    Ok(notes.join("; "))
}

fn run_cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_parabolicity"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?
        .status;
    ensure(status.success(), || format!("{args:?} exited with {status}"))
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    let runs: [&[&str]; 5] = [
        &["lemma-star", "--trials", "20000", "--seed", "99"],
        &["capacity", "--grid", "512", "--p", "3"],
        &["scaling", "--grid", "512", "--p", "1.5"],
        &["evans", "--grid", "72x64", "--log-rmax", "4.5", "--grading", "logarithmic", "--reference-ring", "8", "--levels", "4", "--t-list", "1,2,3"],
        &["khasminskii", "--p", "2", "--log-rmax", "1e84", "--grid", "4000", "--grading", "loggeometric:1.05"],
    ];
    for dir in &dirs {
        for args in runs {
            run_cli(dir.path(), args)?;
        }
        run_cli(dir.path(), &["audit"])?;
    }
    let mut names: Vec<String> = std::fs::read_dir(dirs[0].path())
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    for name in &names {
        let a = std::fs::read(dirs[0].path().join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} artifacts byte-identical across two runs", names.len()))
}

fn report(index: usize, name: &str, outcome: std::thread::Result<Outcome>) -> bool {
    let (ok, detail) = match outcome {
        Ok(Ok(msg)) => (true, msg),
        Ok(Err(msg)) => (false, msg),
        Err(panic) => (
            false,
            panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()),
        ),
    };
    println!("criterion {index:>2} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() {
    let mut all = true;
    all &= report(1, "radial solver oracle", catch_unwind(radial_solver_oracle));
    all &= report(2, "sublevel scaling law", catch_unwind(sublevel_scaling));
    all &= report(3, "obstacle problem", catch_unwind(obstacle_problem));
    all &= report(4, "growth estimate suite", catch_unwind(lemma_star));
    let runs = catch_unwind(reverse_runs);
    let with_runs = |f: fn(&[ReverseRun]) -> Outcome| match &runs {
        Ok(Ok(r)) => catch_unwind(AssertUnwindSafe(|| f(r))),
        Ok(Err(e)) => Ok(Err(format!("reverse runs failed: {e}"))),
        Err(_) => Ok(Err("reverse runs panicked".into())),
    };
    all &= report(5, "reverse construction", with_runs(reverse_construction));
    all &= report(6, "energy-chain audit", with_runs(energy_audit));
    all &= report(7, "radial Evans identities", catch_unwind(evans_radial_identities));
    all &= report(8, "Evans iteration in 2D", catch_unwind(evans_iteration));
    all &= report(9, "forward check on the constructed witness", with_runs(forward_check));
    all &= report(10, "CLI determinism", catch_unwind(determinism));
    if !all {
        std::process::exit(1);
    }
}
