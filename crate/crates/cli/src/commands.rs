//! One function per subcommand. Each returns the JSON body of its report and
//! the names of any failed invariants; artifacts go to the output directory.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use parabolicity_core::capacity::{capacity, capacity_decay, sublevel_scaling_check};
use parabolicity_core::convexity::{lemma_star_suite, modulus_suite};
use parabolicity_core::evans::{capacity_asymptotics, evans_iterate, EvansError};
use parabolicity_core::khasminskii::{
    forward_khasminskii_check, khasminskii_on_grid, EnergyAudit, KhasminskiiError, ReverseConfig,
};
use parabolicity_core::{DiscreteDomain, DomainKind, Exhaustion, ModelManifold, NodeSet, RadialGrid, SolverOptions};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, Error)]
pub enum RunError {
    /// Bad configuration or input files: exit code 1.
    #[error("{0}")]
    Input(String),
    /// A computation stopped with a named failure: exit code 2.
    #[error("{name}: {message}")]
    Failed { name: String, message: String },
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Input(e.to_string())
    }
}

fn input(e: impl ToString) -> RunError {
    RunError::Input(e.to_string())
}

fn failed(name: &str, e: impl ToString) -> RunError {
    RunError::Failed {
        name: name.to_string(),
        message: e.to_string(),
    }
}

fn io(e: std::io::Error) -> RunError {
    RunError::Input(format!("cannot write artifact: {e}"))
}

pub struct Outcome {
    pub result: Value,
    pub failures: Vec<String>,
    /// One-line summary for stdout.
    pub summary: String,
}

fn options(cfg: &ExperimentConfig) -> SolverOptions {
    SolverOptions::with_tol(cfg.tol)
}

fn model(cfg: &ExperimentConfig) -> Result<ModelManifold, RunError> {
    let m = ModelManifold::parse_spec(&cfg.manifold).map_err(input)?;
    Ok(match cfg.quad_tol {
        Some(q) => m.with_quad_tol(q),
        None => m,
    })
}

fn grid(cfg: &ExperimentConfig, m: &ModelManifold) -> Result<DiscreteDomain, RunError> {
    let (cells, angular) = cfg.grid_cells()?;
    let builder = RadialGrid::new(cfg.outer(), cells).graded(cfg.grading()?);
    match angular {
        Some(a) => builder.build_surface(m, cfg.p, a),
        None => builder.build(m, cfg.p),
    }
    .map_err(input)
}

fn exhaustion(cfg: &ExperimentConfig, d: &DiscreteDomain) -> Result<Exhaustion, RunError> {
    let last = d.rings() - 1;
    let spec = cfg.exhaustion.trim();
    if spec == "every" {
        return Ok(Exhaustion::every_ring(d));
    }
    let rings: Vec<usize> = if spec == "dyadic" {
        let mut r: Vec<usize> = (0..6).map(|k| last >> k).filter(|&r| r >= 4).collect();
        r.reverse();
        r
    } else if let Some(list) = spec.strip_prefix("rings:") {
        list.split(',')
            .map(|x| x.trim().parse().map_err(|e| input(format!("exhaustion ring `{x}`: {e}"))))
            .collect::<Result<_, _>>()?
    } else {
        return Err(input(format!("unknown exhaustion `{spec}`; expected dyadic, every or rings:k1,k2")));
    };
    Exhaustion::by_rings(d, &rings).map_err(input)
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>, RunError> {
    Ok(BufWriter::new(File::create(out.join(name)).map_err(io)?))
}

fn to_value(x: &impl serde::Serialize) -> Value {
    serde_json::to_value(x).expect("report types serialize")
}

pub fn classify(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let m = model(cfg)?;
    let report = m.classify_parabolicity(cfg.p).map_err(input)?;
    Ok(Outcome {
        summary: report.verdict.to_string(),
        result: to_value(&report),
        failures: Vec::new(),
    })
}

pub fn capacity_cmd(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let m = model(cfg)?;
    let d = grid(cfg, &m)?;
    let ex = exhaustion(cfg, &d)?;
    let opts = options(cfg);
    let k = d.inner_boundary();
    let p = cfg.p;
    let cap = capacity(&d, &k, p, &opts).map_err(|e| failed("capacity", e))?;
    let log_base = m.base_radius().ln();
    let oracle = |l: f64| m.annulus_capacity_log(p, log_base, l).unwrap_or(f64::NAN);
    let decay = capacity_decay(&d, &k, &ex, p, &opts, Some(&oracle)).map_err(|e| failed("capacity", e))?;
    decay.write_csv(create(&cfg.out, "decay.csv")?).map_err(io)?;

    let exact = oracle(d.ring_log_radius(d.rings() - 1));
    let mut failures = Vec::new();
    if !cap.report.converged() {
        failures.push("solver-convergence".into());
    }
    if !cap.potential.values.iter().all(|&h| (-1e-9..=1.0 + 1e-9).contains(&h)) {
        failures.push("maximum-principle".into());
    }
    if !decay.is_nonincreasing(1e-12 * cap.value) {
        failures.push("decay-monotone".into());
    }
    Ok(Outcome {
        summary: format!("capacity {}", cap.value),
        result: json!({
            "capacity": cap.value,
            "model_capacity": exact,
            "relative_error": (cap.value - exact).abs() / exact,
            "solve": to_value(&cap.report),
            "decay": to_value(&decay),
        }),
        failures,
    })
}

pub fn scaling(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let m = model(cfg)?;
    let d = grid(cfg, &m)?;
    let opts = options(cfg);
    let cap = capacity(&d, &d.inner_boundary(), cfg.p, &opts).map_err(|e| failed("capacity", e))?;
    let mut rows = Vec::with_capacity(cfg.pairs.len());
    for &(t, s) in &cfg.pairs {
        rows.push(sublevel_scaling_check(&d, &cap, t, s, cfg.p, &opts).map_err(|e| match e {
            parabolicity_core::CapacityError::InvalidLevels { .. } => input(e),
            e => failed("scaling", e),
        })?);
    }
    let mut w = csv::Writer::from_writer(create(&cfg.out, "scaling.csv")?);
    w.write_record(["t", "s", "measured", "predicted", "ratio"]).map_err(|e| io(e.into()))?;
    for r in &rows {
        w.write_record([r.t, r.s, r.measured, r.predicted, r.ratio].map(|x| format!("{x:?}")))
            .map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)?;
    let failures = if rows.iter().all(|r| r.within_band) {
        Vec::new()
    } else {
        vec!["scaling-band".into()]
    };
    Ok(Outcome {
        summary: format!("{} level pairs, capacity {}", rows.len(), cap.value),
        result: json!({ "capacity": cap.value, "rows": to_value(&rows) }),
        failures,
    })
}

fn khasminskii_failure(e: KhasminskiiError) -> RunError {
    match e {
        KhasminskiiError::GridTooSmall(_) => failed("grid-too-small", e),
        KhasminskiiError::InvalidConfig(_) => input(e),
        KhasminskiiError::NoConvergence(_) => failed("solver-convergence", e),
        e => failed("khasminskii", e),
    }
}

pub fn khasminskii(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let m = model(cfg)?;
    let d = grid(cfg, &m)?;
    let ex = exhaustion(cfg, &d)?;
    let opts = options(cfg);
    let k = d.inner_boundary();
    let config = ReverseConfig {
        steps: cfg.steps,
        ..ReverseConfig::default()
    };
    let (f, rev) = khasminskii_on_grid(&d, &k, cfg.p, &config, &opts, cfg.terms).map_err(khasminskii_failure)?;
    let forward =
        forward_khasminskii_check(&d, &k, &rev.witness, cfg.p, &ex, &opts).map_err(khasminskii_failure)?;
    d.write_node_csv(&rev.witness, create(&cfg.out, "field.csv")?)
        .map_err(|e| input(format!("cannot write artifact: {e}")))?;

    let slack = 10.0 * cfg.tol;
    let mut failures = Vec::new();
    if !rev.supersolution.passed {
        failures.push("supersolution".to_string());
    }
    if rev
        .stages
        .windows(2)
        .any(|w| w[0].values.iter().zip(&w[1].values).any(|(a, b)| *b < a - slack))
    {
        failures.push("monotone".into());
    }
    if rev.steps.iter().any(|s| !(s.sup_gap < s.gap_target)) {
        failures.push("gap-rule".into());
    }
    if config.energy_rule && rev.energy > rev.energy_bound * (1.0 + 1e-9) {
        failures.push("energy-bound".into());
    }
    if rev.steps.iter().any(|s| !s.audit.passed()) {
        failures.push("energy-audit".into());
    }
    if !forward.inequality_holds {
        failures.push("forward-inequality".into());
    }
    let mut reverse = to_value(&rev);
    reverse.as_object_mut().expect("struct").remove("witness");
    Ok(Outcome {
        summary: format!("{} steps, energy {} (bound {})", rev.steps.len(), rev.energy, rev.energy_bound),
        result: json!({
            "finite_energy": {
                "terms": to_value(&f.terms),
                "energy": f.energy,
                "energy_budget": f.energy_budget,
                "outer_min": d.outer_boundary().iter().map(|i| f.field.values[i]).fold(f64::INFINITY, f64::min),
            },
            "reverse": reverse,
            "forward": to_value(&forward),
        }),
        failures,
    })
}

fn evans_failure(e: EvansError) -> RunError {
    match e {
        EvansError::Undefined(..) => failed("evans-undefined", e),
        EvansError::GridTooSmall { .. } => failed("grid-too-small", e),
        EvansError::NoConvergence(_) => failed("solver-convergence", e),
        EvansError::InvalidCompactum(_)
        | EvansError::NotSurface
        | EvansError::ReferenceRing(_)
        | EvansError::LevelOutOfRange { .. }
        | EvansError::Degenerate(_) => input(e),
        e => failed("evans", e),
    }
}

pub fn evans(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let m = model(cfg)?;
    let d = grid(cfg, &m)?;
    if d.kind() != DomainKind::Surface2d {
        return Err(input("evans needs a surface grid, e.g. grid = 256x256"));
    }
    let opts = options(cfg);
    let rho = cfg.reference_ring.unwrap_or(((d.rings() - 1) / 40).max(1));
    if rho == 0 || rho + 1 >= d.rings() {
        return Err(input(format!("reference ring {rho} must lie strictly inside the grid")));
    }
    let reference = m.clone().with_base_radius(d.ring_log_radius(rho).exp());
    let angular = d.angular();
    let upto = ((cfg.arc * angular as f64).round() as usize).min(angular);
    let k = NodeSet::from_fn(d.len(), |i| d.ring_of(i) == 0 && i % angular <= upto);
    let run = evans_iterate(&d, &k, &reference, cfg.p, cfg.levels, &opts).map_err(evans_failure)?;
    let table = capacity_asymptotics(&d, &k, &run, &reference, &cfg.t_list, &opts).map_err(evans_failure)?;
    table.write_csv(create(&cfg.out, "asymptotics.csv")?).map_err(io)?;
    d.write_node_csv(&run.field, create(&cfg.out, "field.csv")?)
        .map_err(|e| input(format!("cannot write artifact: {e}")))?;

    let mut failures = Vec::new();
    let levels = &run.levels;
    for (name, ok) in [
        ("comparison", levels.iter().all(|l| l.comparison_ok)),
        ("sandwich", levels.iter().all(|l| l.sandwich_ok)),
        ("monotone", levels.iter().all(|l| l.monotone_ok)),
        ("m-bound", levels.iter().all(|l| l.m_bound_ok)),
        ("boundary-continuity", run.boundary_ok),
        ("p-harmonic", run.supersolution.passed && run.subsolution.passed),
        ("asymptotic-band", table.band_ratio <= 1.3),
        ("envelope", table.rows.iter().all(|r| r.within_envelope)),
    ] {
        if !ok {
            failures.push(name.to_string());
        }
    }
    Ok(Outcome {
        summary: format!("M = {}, m = {}, band ratio {}", run.big_m, run.m, table.band_ratio),
        result: json!({
            "reference_ring": run.reference_ring,
            "reference_radius": reference.base_radius(),
            "compact_nodes": k.count(),
            "compact_capacity": run.compact_capacity,
            "m": run.m,
            "big_m": run.big_m,
            "radial_quadrature_gap": run.radial_quadrature_gap,
            "boundary_excess": run.boundary_excess,
            "levels": to_value(&run.levels),
            "supersolution": to_value(&run.supersolution),
            "subsolution": to_value(&run.subsolution),
            "asymptotics": to_value(&table),
        }),
        failures,
    })
}

pub fn lemma_star(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let star = lemma_star_suite(&cfg.p_list, cfg.trials, cfg.seed).map_err(input)?;
    let modulus = modulus_suite(&cfg.p_list, cfg.trials.div_ceil(10), cfg.seed).map_err(input)?;
    let mut failures = Vec::new();
    if star.violations > 0 {
        failures.push("lemma-star-violations".to_string());
    }
    if modulus.violations > 0 {
        failures.push("modulus-violations".to_string());
    }
    Ok(Outcome {
        summary: format!(
            "{} pairs ({} met the hypothesis), {} violations; {} modulus pairs, {} violations",
            star.trials, star.hypothesis_met, star.violations, modulus.trials, modulus.violations
        ),
        result: json!({ "lemma_star": to_value(&star), "modulus": to_value(&modulus) }),
        failures,
    })
}

/// Re-evaluates every audit link of a saved `khasminskii` report from its stored norms.
pub fn audit(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let path = cfg.run.clone().unwrap_or_else(|| cfg.out.join("khasminskii.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
    let saved: Value = serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let reverse = &saved["result"]["reverse"];
    let p = reverse["p"]
        .as_f64()
        .ok_or_else(|| input(format!("{} holds no khasminskii run", path.display())))?;
    let energy_rule = reverse["config"]["energy_rule"].as_bool().unwrap_or(false);
    let steps = reverse["steps"].as_array().cloned().unwrap_or_default();

    let mut failures = Vec::new();
    let mut rows = Vec::with_capacity(steps.len());
    let mut previous_delta = f64::INFINITY;
    for step in &steps {
        let n = step["n"].as_u64().unwrap_or(0);
        let stored: EnergyAudit =
            serde_json::from_value(step["audit"].clone()).map_err(|e| input(format!("step {n}: {e}")))?;
        let mut fresh = stored.clone();
        fresh.evaluate(p).map_err(input)?;
        for (name, ok) in [("link-a", fresh.link_a), ("link-b", fresh.link_b), ("link-c", fresh.link_c)] {
            if !ok {
                failures.push(format!("{name}@{n}"));
            }
        }
        if (fresh.link_a, fresh.link_b, fresh.link_c) != (stored.link_a, stored.link_b, stored.link_c) {
            failures.push(format!("stored-mismatch@{n}"));
        }
        let delta = step["delta_energy"].as_f64().unwrap_or(f64::NAN);
        if energy_rule && !(delta < previous_delta) {
            failures.push(format!("delta-energy-decrease@{n}"));
        }
        previous_delta = delta;
        rows.push(json!({ "n": n, "delta_energy": delta, "audit": to_value(&fresh) }));
    }
    if steps.is_empty() {
        return Err(input(format!("{} records no steps", path.display())));
    }
    Ok(Outcome {
        summary: format!("{} steps audited, {} failures", steps.len(), failures.len()),
        result: json!({ "p": p, "steps": rows }),
        failures,
    })
}
