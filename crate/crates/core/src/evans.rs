//! Evans potentials: p-harmonic off a compact set, zero on it, growing like
//! the radial potential at infinity.
//!
//! On a two-dimensional grid the potential of a general compact `K` is the
//! limit of Dirichlet solutions `e_n` on the sublevel sets `A_n = {E < n}` of
//! the radial potential `E` centred at a reference ring `r̄`.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::capacity::{capacity_in, condenser_capacity, CapacityError};
use crate::domain::{fmt_f64, DiscreteDomain, DomainError, DomainKind, NodeSet, ScalarField};
use crate::model::{ModelError, ModelManifold, Parabolicity};
use crate::solver::{
    check_subsolution, check_supersolution, solve_obstacle_from, BoundaryValues, ObstacleProblem, SolutionCheck,
    SolverError, SolverOptions,
};

#[derive(Debug, Error)]
pub enum EvansError {
    #[error("Evans potentials need a parabolic model; this one is {0} for p = {1}")]
    Undefined(Parabolicity, f64),
    #[error("invalid compact set: {0}")]
    InvalidCompactum(String),
    #[error("the Evans iteration needs a surface grid")]
    NotSurface,
    #[error("the reference radius {0} is not an inner grid ring")]
    ReferenceRing(f64),
    #[error("level {t} is outside the trusted range (0, {max}]")]
    LevelOutOfRange { t: f64, max: f64 },
    #[error("the grid reaches E = {reached} but level {needed} was requested")]
    GridTooSmall { needed: f64, reached: f64 },
    #[error("condenser at level {0} is degenerate")]
    Degenerate(f64),
    #[error("solver did not converge at level {0}")]
    NoConvergence(f64),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

pub type Result<T> = std::result::Result<T, EvansError>;

#[derive(Debug, Clone, Serialize)]
pub struct EvansLevel {
    pub n: usize,
    /// `min_{∂B_r̄} e_n`.
    pub m_n: f64,
    /// `max_{∂B_r̄} e_n`.
    pub big_m_n: f64,
    /// `(n^{p-1} cap(B_r̄, {E < n}) / cap(K, B_r̄))^{1/(p-1)}`, an upper bound for `m_n`.
    pub m_bound: f64,
    pub m_bound_ok: bool,
    /// `e_n ≥ E` on the closure of `A_n`.
    pub comparison_ok: bool,
    /// `e_n ≤ M_n + E` nodewise.
    pub sandwich_ok: bool,
    /// `e_n ≥ e_{n-1}` nodewise.
    pub monotone_ok: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvansRun {
    pub p: f64,
    pub reference_ring: usize,
    pub levels: Vec<EvansLevel>,
    /// `e = e_{n_max}`.
    pub field: ScalarField,
    /// Discrete radial potential `E_r̄`.
    pub radial: ScalarField,
    /// Largest gap between the discrete `E_r̄` and its quadrature value.
    pub radial_quadrature_gap: f64,
    /// `cap(K, B_r̄)`.
    pub compact_capacity: f64,
    /// `M = max_{∂B_r̄} e`.
    pub big_m: f64,
    /// `m = min_{∂B_r̄} e`.
    pub m: f64,
    /// `max (e − M (1 − h))` over the grid, `h` the potential of `(K, B_r̄)`.
    pub boundary_excess: f64,
    pub boundary_ok: bool,
    pub supersolution: SolutionCheck,
    pub subsolution: SolutionCheck,
    pub n_max: usize,
    pub tol: f64,
}

impl EvansRun {
    /// All nodewise invariants of every level and of the limit.
    pub fn invariants_hold(&self) -> bool {
        self.levels
            .iter()
            .all(|l| l.m_bound_ok && l.comparison_ok && l.sandwich_ok && l.monotone_ok)
            && self.boundary_ok
            && self.supersolution.passed
            && self.subsolution.passed
    }
}

fn reference_ring(domain: &DiscreteDomain, model: &ModelManifold) -> Result<usize> {
    let target = model.base_radius().ln();
    (1..domain.rings() - 1)
        .find(|&k| (domain.ring_log_radius(k) - target).abs() <= 1e-9 * target.abs().max(1.0))
        .ok_or(EvansError::ReferenceRing(model.base_radius()))
}

/// Runs `e_1, …, e_{n_max}` for `K` on the inner ring. `model` fixes `p`'s
/// parabolicity and the reference radius `r̄`, which must be a grid ring.
pub fn evans_iterate(
    domain: &DiscreteDomain,
    compact: &NodeSet,
    model: &ModelManifold,
    p: f64,
    n_max: usize,
    opts: &SolverOptions,
) -> Result<EvansRun> {
    if domain.kind() != DomainKind::Surface2d {
        return Err(EvansError::NotSurface);
    }
    let verdict = model.classify_parabolicity(p)?.verdict;
    if verdict != Parabolicity::Parabolic {
        return Err(EvansError::Undefined(verdict, p));
    }
    if compact.is_empty() || !compact.is_subset(&domain.inner_boundary()) {
        return Err(EvansError::InvalidCompactum("K must be a nonempty subset of the inner ring".into()));
    }
    if n_max == 0 {
        return Err(EvansError::LevelOutOfRange { t: 0.0, max: 0.0 });
    }
    let rho = reference_ring(domain, model)?;
    let ball = domain.rings_between(0, rho);
    let sphere = domain.rings_between(rho, rho);
    let omega = model.sphere_area();
    let tol = opts.tol;
    let slack = 10.0 * tol;

    // Discrete radial potential from ring ρ, and its quadrature counterpart.
    let from_base = domain.radial_potential(p, omega);
    let per_ring: Vec<f64> = from_base.iter().map(|&f| (f - from_base[rho]).max(0.0)).collect();
    let radial = domain.ring_field(&per_ring);
    let mut radial_quadrature_gap: f64 = 0.0;
    for k in rho..domain.rings() {
        let lo = model.base_radius().ln();
        let exact = model.radial_integral_log(p, lo, domain.ring_log_radius(k).max(lo))?;
        radial_quadrature_gap = radial_quadrature_gap.max((exact - per_ring[k]).abs());
    }
    let reached = per_ring[domain.rings() - 1];
    if reached < n_max as f64 * (1.0 - 1e-9) {
        return Err(EvansError::GridTooSmall {
            needed: n_max as f64,
            reached,
        });
    }

    let compact_cap = capacity_in(domain, compact, &ball, p, opts)?;
    if !(compact_cap.value > 0.0) {
        return Err(EvansError::InvalidCompactum("zero capacity in B_r̄".into()));
    }

    let n_nodes = domain.len();
    let mut levels = Vec::with_capacity(n_max);
    let mut previous: Option<ScalarField> = None;
    let mut free = NodeSet::empty(n_nodes);
    for n in 1..=n_max {
        let level = n as f64;
        let cut = level * (1.0 - 1e-9);
        free = NodeSet::from_fn(n_nodes, |i| radial.values[i] < cut && !compact.contains(i));
        let mut bc = BoundaryValues::new(n_nodes);
        bc.fix(&free.union(compact).complement(), level);
        bc.fix(compact, 0.0);
        let problem = ObstacleProblem {
            p,
            obstacle: vec![f64::NEG_INFINITY; n_nodes],
            boundary: bc,
        };
        let sol = solve_obstacle_from(domain, &problem, previous.as_ref(), opts)?;
        if !sol.report.converged() {
            return Err(EvansError::NoConvergence(level));
        }
        let e = sol.field;
        let (m_n, big_m_n) = sphere.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            (lo.min(e.values[i]), hi.max(e.values[i]))
        });
        // cap(B_r̄, {E < n}) in closed form: the radial potential is exact on the grid.
        let outer_level = (0..n_nodes)
            .filter(|&i| radial.values[i] >= cut)
            .map(|i| radial.values[i])
            .fold(f64::INFINITY, f64::min);
        let ball_cap = omega * outer_level.powf(1.0 - p);
        let m_bound = (level.powf(p - 1.0) * ball_cap / compact_cap.value).powf(1.0 / (p - 1.0));
        // Off A_n the solution is pinned at n while E keeps growing.
        let comparison_ok = (0..n_nodes)
            .filter(|&i| radial.values[i] <= outer_level)
            .all(|i| e.values[i] >= radial.values[i] - slack);
        let sandwich_ok = (0..n_nodes).all(|i| e.values[i] <= big_m_n + radial.values[i] + slack);
        let monotone_ok = previous
            .as_ref()
            .is_none_or(|prev| (0..n_nodes).all(|i| e.values[i] >= prev.values[i] - slack));
        levels.push(EvansLevel {
            n,
            m_n,
            big_m_n,
            m_bound,
            m_bound_ok: m_n <= m_bound * (1.0 + 1e-9) + slack,
            comparison_ok,
            sandwich_ok,
            monotone_ok,
            iterations: sol.report.iterations,
        });
        previous = Some(e);
    }

    let field = previous.expect("at least one level");
    let last = levels.last().expect("at least one level");
    let (m, big_m) = (last.m_n, last.big_m_n);
    let boundary_excess = ball
        .iter()
        .map(|i| field.values[i] - big_m * (1.0 - compact_cap.potential.values[i]))
        .fold(f64::NEG_INFINITY, f64::max);
    let harmonic_tol = tol.max(1e-9);
    let supersolution = check_supersolution(domain, &field, p, &free, harmonic_tol);
    let subsolution = check_subsolution(domain, &field, p, &free, harmonic_tol);
    Ok(EvansRun {
        p,
        reference_ring: rho,
        levels,
        field,
        radial,
        radial_quadrature_gap,
        compact_capacity: compact_cap.value,
        big_m,
        m,
        boundary_excess,
        boundary_ok: boundary_excess <= slack,
        supersolution,
        subsolution,
        n_max,
        tol,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticsRow {
    pub t: f64,
    /// `cap(K, {e < t})`.
    pub capacity: f64,
    /// `t^{p-1} cap(K, {e < t})`.
    pub normalized: f64,
    /// `m^{p-1} cap(K, B_r̄)`.
    pub lower: f64,
    /// `ω (1 − M/t)^{1-p}`, infinite for `t ≤ M`.
    pub upper: f64,
    pub within_envelope: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticsTable {
    pub rows: Vec<AsymptoticsRow>,
    /// `max / min` of the normalized column.
    pub band_ratio: f64,
    /// Relative slack allowed on the envelopes for mesh effects at the level set.
    pub envelope_slack: f64,
}

impl AsymptoticsTable {
    /// Writes `t,capacity,normalized,lower,upper`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "capacity", "normalized", "lower", "upper"])
            .map_err(std::io::Error::other)?;
        for r in &self.rows {
            w.write_record([
                fmt_f64(r.t),
                fmt_f64(r.capacity),
                fmt_f64(r.normalized),
                fmt_f64(r.lower),
                fmt_f64(r.upper),
            ])
            .map_err(std::io::Error::other)?;
        }
        w.flush()
    }
}

/// `cap(K, {e < t})` for each `t ≤ 0.8 n_max`, normalised by `t^{1-p}`.
pub fn capacity_asymptotics(
    domain: &DiscreteDomain,
    compact: &NodeSet,
    run: &EvansRun,
    model: &ModelManifold,
    t_list: &[f64],
    opts: &SolverOptions,
) -> Result<AsymptoticsTable> {
    let p = run.p;
    let max = 0.8 * run.n_max as f64;
    let omega = model.sphere_area();
    let envelope_slack = 5.0 * domain.mesh_size();
    let mut rows = Vec::with_capacity(t_list.len());
    for &t in t_list {
        if !(t > 0.0 && t <= max) {
            return Err(EvansError::LevelOutOfRange { t, max });
        }
        let zero = NodeSet::from_fn(domain.len(), |i| run.field.values[i] >= t);
        let free = zero.union(compact).complement();
        if free.is_empty() || zero.is_empty() {
            return Err(EvansError::Degenerate(t));
        }
        let cap = condenser_capacity(domain, compact, &zero, p, opts)?;
        if !cap.report.converged() {
            return Err(EvansError::NoConvergence(t));
        }
        let normalized = t.powf(p - 1.0) * cap.value;
        let lower = run.m.powf(p - 1.0) * run.compact_capacity;
        let upper = if t > run.big_m {
            omega * (1.0 - run.big_m / t).powf(1.0 - p)
        } else {
            f64::INFINITY
        };
        rows.push(AsymptoticsRow {
            t,
            capacity: cap.value,
            normalized,
            lower,
            upper,
            within_envelope: normalized >= lower * (1.0 - envelope_slack)
                && normalized <= upper * (1.0 + envelope_slack),
        });
    }
    let (lo, hi) = rows
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r.normalized), hi.max(r.normalized)));
    Ok(AsymptoticsTable {
        rows,
        band_ratio: hi / lo,
        envelope_slack,
    })
}
