//! Discrete p-capacities of condensers.
//!
//! A condenser is given by the node set where the potential is 1 and the node
//! set where it is 0. Regions `D` of an exhaustion are treated as closed node
//! sets: the potential vanishes off the interior of `D` (see
//! [`DiscreteDomain::interior_of`]).

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::domain::{fmt_f64, DiscreteDomain, Exhaustion, NodeSet, ScalarField};
use crate::solver::{p_energy, solve_dirichlet, BoundaryValues, SolveReport, SolverError, SolverOptions};

#[derive(Debug, Error)]
pub enum CapacityError {
    #[error("the compact set of a condenser must be nonempty")]
    EmptyCompact,
    #[error("invalid condenser: the compact set meets the zero set at {0} nodes")]
    InvalidCondenser(usize),
    #[error("invalid condenser: the potential has no zero set")]
    NoZeroSet,
    #[error("levels must satisfy 0 <= t < s <= 1, got t = {t}, s = {s}")]
    InvalidLevels { t: f64, s: f64 },
    #[error("degenerate levels t = {t}, s = {s}: no nodes between the level sets")]
    DegenerateLevels { t: f64, s: f64 },
    #[error("compact set is not contained in the first exhaustion region")]
    CompactOutsideExhaustion,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

pub type Result<T> = std::result::Result<T, CapacityError>;

#[derive(Debug, Clone)]
pub struct CapacityResult {
    pub value: f64,
    /// Extremal potential: 1 on the compact set, 0 on the zero set.
    pub potential: ScalarField,
    pub report: SolveReport,
}

/// Capacity of the condenser whose potential is 1 on `one` and 0 on `zero`.
pub fn condenser_capacity(
    domain: &DiscreteDomain,
    one: &NodeSet,
    zero: &NodeSet,
    p: f64,
    opts: &SolverOptions,
) -> Result<CapacityResult> {
    if one.is_empty() {
        return Err(CapacityError::EmptyCompact);
    }
    if zero.is_empty() {
        return Err(CapacityError::NoZeroSet);
    }
    let overlap = one.intersection(zero).count();
    if overlap > 0 {
        return Err(CapacityError::InvalidCondenser(overlap));
    }
    let mut bc = BoundaryValues::new(domain.len());
    bc.fix(zero, 0.0);
    bc.fix(one, 1.0);
    let sol = solve_dirichlet(domain, &bc, p, opts)?;
    let value = p_energy(domain, &sol.field, p);
    Ok(CapacityResult {
        value,
        potential: sol.field,
        report: sol.report,
    })
}

/// `cap_p(K, Ω)` with `Ω` the whole grid: the potential vanishes on the outer boundary.
pub fn capacity(domain: &DiscreteDomain, compact: &NodeSet, p: f64, opts: &SolverOptions) -> Result<CapacityResult> {
    condenser_capacity(domain, compact, &domain.outer_boundary(), p, opts)
}

/// `cap_p(K, D)` for a closed node region `D`.
pub fn capacity_in(
    domain: &DiscreteDomain,
    compact: &NodeSet,
    region: &NodeSet,
    p: f64,
    opts: &SolverOptions,
) -> Result<CapacityResult> {
    let zero = domain.interior_of(region).complement();
    condenser_capacity(domain, compact, &zero, p, opts)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub t: f64,
    pub s: f64,
    pub measured: f64,
    pub predicted: f64,
    pub ratio: f64,
    /// Relative mesh size used for the tolerance band.
    pub mesh_size: f64,
    /// `|ratio − 1| ≤ 5·mesh_size`.
    pub within_band: bool,
}

/// Recomputes the capacity of `({h ≥ s}, {h > t})` and compares it with
/// `cap(K, Ω) / (s − t)^{p−1}`.
pub fn sublevel_scaling_check(
    domain: &DiscreteDomain,
    result: &CapacityResult,
    t: f64,
    s: f64,
    p: f64,
    opts: &SolverOptions,
) -> Result<ScalingReport> {
    if !(0.0 <= t && t < s && s <= 1.0) {
        return Err(CapacityError::InvalidLevels { t, s });
    }
    let h = &result.potential;
    let one = NodeSet::from_fn(domain.len(), |i| h.values[i] >= s);
    let zero = NodeSet::from_fn(domain.len(), |i| h.values[i] <= t);
    let between = one.union(&zero).complement();
    if between.is_empty() || one.is_empty() || zero.is_empty() {
        return Err(CapacityError::DegenerateLevels { t, s });
    }
    let measured = condenser_capacity(domain, &one, &zero, p, opts)?.value;
    let predicted = result.value / (s - t).powf(p - 1.0);
    let ratio = measured / predicted;
    let mesh_size = domain.mesh_size();
    Ok(ScalingReport {
        t,
        s,
        measured,
        predicted,
        ratio,
        mesh_size,
        within_band: (ratio - 1.0).abs() <= 5.0 * mesh_size,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayRow {
    pub n: usize,
    /// Largest radius of the region `D_n`.
    pub r_max: f64,
    pub capacity: f64,
    pub predicted: Option<f64>,
    #[serde(skip)]
    pub report: Option<SolveReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecaySequence {
    pub rows: Vec<DecayRow>,
    /// First `cap_{n+1}` with `|cap_n − cap_{n+1}| < 1e−6·cap_0`, standing in for `cap_p(K)`.
    pub limit: Option<f64>,
}

/// `cap(K, D_n)` along an exhaustion. `predicted` maps `ln r_max(D_n)` to an oracle value.
pub fn capacity_decay(
    domain: &DiscreteDomain,
    compact: &NodeSet,
    exhaustion: &Exhaustion,
    p: f64,
    opts: &SolverOptions,
    predicted: Option<&(dyn Fn(f64) -> f64 + Sync)>,
) -> Result<DecaySequence> {
    if !compact.is_subset(&exhaustion.level(0)) {
        return Err(CapacityError::CompactOutsideExhaustion);
    }
    let rows = (0..exhaustion.len())
        .into_par_iter()
        .map(|n| {
            let region = exhaustion.level(n);
            let cap = capacity_in(domain, compact, &region, p, opts)?;
            let log_r_max = region
                .iter()
                .map(|i| domain.node(i).log_r)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(DecayRow {
                n,
                r_max: log_r_max.exp(),
                capacity: cap.value,
                predicted: predicted.map(|f| f(log_r_max)),
                report: Some(cap.report),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let limit = rows.first().and_then(|first| {
        rows.windows(2)
            .find(|w| (w[0].capacity - w[1].capacity).abs() < 1e-6 * first.capacity)
            .map(|w| w[1].capacity)
    });
    Ok(DecaySequence { rows, limit })
}

impl DecaySequence {
    pub fn is_nonincreasing(&self, slack: f64) -> bool {
        self.rows.windows(2).all(|w| w[1].capacity <= w[0].capacity + slack)
    }

    /// Writes `n,r_max,capacity,predicted`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "r_max", "capacity", "predicted"]).map_err(std::io::Error::other)?;
        for row in &self.rows {
            w.write_record([
                row.n.to_string(),
                fmt_f64(row.r_max),
                fmt_f64(row.capacity),
                row.predicted.map(fmt_f64).unwrap_or_default(),
            ])
            .map_err(std::io::Error::other)?;
        }
        w.flush()
    }
}
