//! Khas'minskii potentials: proper p-superharmonic functions vanishing on a compact set.
//!
//! The forward direction checks that a given witness forces `cap_p(K, D_n) → 0`.
//! The reverse direction builds a witness on a parabolic grid from a proper
//! finite-energy function by a sequence of obstacle problems.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capacity::CapacityError;
use crate::convexity::{sigma_function, star_outcome, LemmaStar};
use crate::domain::{BoundaryTag, DiscreteDomain, DomainError, Exhaustion, NodeSet, ScalarField};
use crate::model::Parabolicity;
use crate::solver::{
    check_supersolution, p_energy, solve_obstacle_from, BoundaryValues, ObstacleProblem, SolutionCheck, SolverError,
    SolverOptions,
};

#[derive(Debug, Error)]
pub enum KhasminskiiError {
    #[error("witness is negative at node {0}")]
    NegativeWitness(usize),
    #[error("witness does not vanish on the compact set (node {0})")]
    NonzeroOnCompact(usize),
    #[error("witness fails the supersolution test at {count} nodes (worst residual {worst:e})")]
    NotSupersolution { count: usize, worst: f64 },
    #[error("the first exhaustion region must contain the compact set")]
    CompactOutsideExhaustion,
    #[error("cannot construct: {0}")]
    CannotConstruct(String),
    #[error("grid too small: {0}")]
    GridTooSmall(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("solver did not converge: {0}")]
    NoConvergence(String),
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

pub type Result<T> = std::result::Result<T, KhasminskiiError>;

/// `h̃ = 1 − h` for the potential `h` of `(K, D)` and its energy `cap_p(K, D)`.
fn complementary_potential(
    domain: &DiscreteDomain,
    compact: &NodeSet,
    region: &NodeSet,
    p: f64,
    opts: &SolverOptions,
) -> Result<(ScalarField, f64)> {
    // Solved for `h̃` itself: near `K` it is tiny and keeps full relative precision.
    let outside = domain.interior_of(region).complement();
    if outside.is_empty() {
        return Err(CapacityError::NoZeroSet.into());
    }
    let overlap = outside.intersection(compact).count();
    if overlap > 0 {
        return Err(CapacityError::InvalidCondenser(overlap).into());
    }
    let mut bc = BoundaryValues::new(domain.len());
    bc.fix(&outside, 1.0);
    bc.fix(compact, 0.0);
    let problem = ObstacleProblem {
        p,
        obstacle: vec![f64::NEG_INFINITY; domain.len()],
        boundary: bc,
    };
    let zero = ScalarField {
        values: vec![0.0; domain.len()],
    };
    let sol = solve_obstacle_from(domain, &problem, Some(&zero), &opts.relative())?;
    if !sol.report.converged() {
        return Err(KhasminskiiError::NoConvergence(format!(
            "condenser potential: status {:?}, residual {:e}",
            sol.report.status, sol.report.residual
        )));
    }
    Ok((sol.field, sol.report.energy))
}

#[derive(Debug, Clone, Serialize)]
pub struct ForwardLevel {
    pub n: usize,
    /// `m_n = min_{∂D_n} κ`.
    pub boundary_min: f64,
    pub capacity: f64,
    /// `max_{D_n \ K} (1 − h_n − κ/m_n)`; nonpositive up to tolerance when the comparison holds.
    pub max_violation: f64,
    pub passed: bool,
    /// `1 − max_{D_first} κ / m_n`: the resulting lower bound for `h_n` on the first used region.
    pub potential_floor: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForwardReport {
    pub levels: Vec<ForwardLevel>,
    /// Levels where `m_n = 0` carry no information.
    pub skipped: Vec<usize>,
    pub inequality_holds: bool,
    /// `1 − cap_last / cap_first` over the used levels.
    pub capacity_decrease: f64,
    /// The comparison pushes `h_n ≥ 1/2` on the first used region by the last level.
    pub conclusive: bool,
    pub verdict: Parabolicity,
}

/// Validates a witness `κ` and tests `1 − h_n ≤ κ/m_n` on every `D_n \ K`.
///
/// `κ` must be nonnegative, zero on `K` and a supersolution at all nodes off
/// `K` and the outer ring. A bounded witness leaves the potential floor low and
/// the report inconclusive.
pub fn forward_khasminskii_check(
    domain: &DiscreteDomain,
    compact: &NodeSet,
    witness: &ScalarField,
    p: f64,
    exhaustion: &Exhaustion,
    opts: &SolverOptions,
) -> Result<ForwardReport> {
    domain.check_field(witness)?;
    if let Some(i) = (0..domain.len()).find(|&i| !(witness.values[i] >= 0.0)) {
        return Err(KhasminskiiError::NegativeWitness(i));
    }
    if let Some(i) = compact.iter().find(|&i| witness.values[i] != 0.0) {
        return Err(KhasminskiiError::NonzeroOnCompact(i));
    }
    if !compact.is_subset(&exhaustion.level(0)) {
        return Err(KhasminskiiError::CompactOutsideExhaustion);
    }
    let check = check_witness(domain, compact, witness, p, opts.tol.max(1e-9));
    if !check.passed {
        return Err(KhasminskiiError::NotSupersolution {
            count: check.offending.len(),
            worst: check.worst,
        });
    }

    let tol = 10.0 * opts.tol;
    let mut results = (0..exhaustion.len())
        .into_par_iter()
        .map(|n| {
            let region = exhaustion.level(n);
            let boundary = domain.boundary_of(&region);
            let m_n = boundary.iter().map(|i| witness.values[i]).fold(f64::INFINITY, f64::min);
            if !(m_n > 0.0 && m_n.is_finite()) {
                return Ok((n, None));
            }
            let (h_tilde, capacity) = complementary_potential(domain, compact, &region, p, opts)?;
            let max_violation = region
                .difference(compact)
                .iter()
                .map(|i| h_tilde.values[i] - witness.values[i] / m_n)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((
                n,
                Some(ForwardLevel {
                    n,
                    boundary_min: m_n,
                    capacity,
                    max_violation,
                    passed: max_violation <= tol,
                    potential_floor: f64::NAN,
                }),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by_key(|(n, _)| *n);

    let skipped = results.iter().filter(|(_, l)| l.is_none()).map(|(n, _)| *n).collect();
    let mut levels: Vec<ForwardLevel> = results.into_iter().filter_map(|(_, l)| l).collect();
    let first_max = levels.first().map_or(f64::NAN, |first| {
        exhaustion
            .level(first.n)
            .iter()
            .map(|i| witness.values[i])
            .fold(0.0, f64::max)
    });
    for level in &mut levels {
        level.potential_floor = 1.0 - first_max / level.boundary_min;
    }
    let inequality_holds = levels.iter().all(|l| l.passed);
    let capacity_decrease = match (levels.first(), levels.last()) {
        (Some(a), Some(b)) if a.capacity > 0.0 => 1.0 - b.capacity / a.capacity,
        _ => 0.0,
    };
    let conclusive = levels.last().is_some_and(|l| l.potential_floor >= 0.5);
    let verdict = if inequality_holds && conclusive {
        Parabolicity::Parabolic
    } else {
        Parabolicity::Inconclusive
    };
    Ok(ForwardReport {
        levels,
        skipped,
        inequality_holds,
        capacity_decrease,
        conclusive,
        verdict,
    })
}

/// One summand `h̃_{n(k)}` of a series construction.
#[derive(Debug, Clone, Serialize)]
pub struct SeriesTerm {
    pub k: usize,
    /// Selected exhaustion level `n(k)`.
    pub level: usize,
    /// `sup_{D_k} h̃_{n(k)}`.
    pub sup_on_region: f64,
    /// `cap_p(K, D_{n(k)})`, the p-energy of the summand.
    pub energy: f64,
}

/// Smallest level in `lo..=hi` accepted by a predicate that is monotone in the level.
/// Gallops upward from `lo`, since the next level is usually close to the previous one.
#[allow(clippy::too_many_arguments)]
fn select_level(
    domain: &DiscreteDomain,
    compact: &NodeSet,
    exhaustion: &Exhaustion,
    p: f64,
    opts: &SolverOptions,
    lo: usize,
    hi: usize,
    accept: impl Fn(&ScalarField, f64) -> bool,
) -> Result<Option<(usize, ScalarField, f64)>> {
    let eval = |m: usize| complementary_potential(domain, compact, &exhaustion.level(m), p, opts);
    let mut lo = lo;
    let mut step = 1;
    let mut best = loop {
        if lo > hi {
            return Ok(None);
        }
        let m = (lo + step - 1).min(hi);
        let (field, energy) = eval(m)?;
        if accept(&field, energy) {
            break (m, field, energy);
        }
        lo = m + 1;
        step *= 2;
    };
    while lo < best.0 {
        let mid = lo + (best.0 - lo) / 2;
        let (field, energy) = eval(mid)?;
        if accept(&field, energy) {
            best = (mid, field, energy);
        } else {
            lo = mid + 1;
        }
    }
    Ok(Some(best))
}

fn sup_on(field: &ScalarField, region: &NodeSet) -> f64 {
    region.iter().map(|i| field.values[i]).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct LinearSum {
    pub field: ScalarField,
    pub terms: Vec<SeriesTerm>,
    /// `2^{-k}` for the last term: bounds the omitted tail on `D_k`.
    pub tail_bound: f64,
}

/// For `p = 2`: `𝒦 = Σ_k h̃_{n(k)}` with `h̃_{n(k)} ≤ 2^{-k}` on `D_k`,
/// truncated once the tail bound drops below `tol`.
pub fn linear_sum_construction(
    domain: &DiscreteDomain,
    compact: &NodeSet,
    exhaustion: &Exhaustion,
    opts: &SolverOptions,
    tol: f64,
) -> Result<LinearSum> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(KhasminskiiError::InvalidConfig(format!("tail tolerance {tol} must lie in (0, 1)")));
    }
    if !compact.is_subset(&exhaustion.level(0)) {
        return Err(KhasminskiiError::CompactOutsideExhaustion);
    }
    let last = exhaustion.len() - 1;
    let mut field = ScalarField { values: vec![0.0; domain.len()] };
    let mut terms: Vec<SeriesTerm> = Vec::new();
    let mut k = 1;
    loop {
        let bound = 0.5f64.powi(k as i32);
        if k > last {
            return Err(KhasminskiiError::CannotConstruct(format!(
                "the exhaustion has no region D_{k} for term {k}"
            )));
        }
        let region = exhaustion.level(k);
        let lo = terms.last().map_or(k, |t| t.level + 1);
        let selected = select_level(domain, compact, exhaustion, 2.0, opts, lo, last, |h, _| {
            sup_on(h, &region) <= bound
        })?;
        let Some((level, h, energy)) = selected else {
            return Err(KhasminskiiError::CannotConstruct(format!(
                "no level keeps h̃ below 2^-{k} on D_{k}: the decay stalls or the grid is too small"
            )));
        };
        terms.push(SeriesTerm {
            k,
            level,
            sup_on_region: sup_on(&h, &region),
            energy,
        });
        field = field.zip(&h, |a, b| a + b);
        if bound < tol {
            return Ok(LinearSum {
                field,
                terms,
                tail_bound: bound,
            });
        }
        k += 1;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FiniteEnergyFunction {
    pub p: f64,
    pub field: ScalarField,
    pub terms: Vec<SeriesTerm>,
    /// `D_p(f)`.
    pub energy: f64,
    /// `(Σ_k 2^{-k/p})^p` over the selected terms; bounds `D_p(f)` by Minkowski.
    pub energy_budget: f64,
}

/// `f = Σ_k h̃_{n(k)}` with `h̃_{n(k)} ≤ 2^{-k}` on `D_k` and `cap_p(K, D_{n(k)}) < 2^{-k}`.
///
/// `D_0` must equal `K`, so `f = 0` there, and `f ≥ k` off `D_{n(k)}`. Terms are
/// added until `max_terms` or until no exhaustion level meets both bounds.
pub fn proper_finite_energy_function(
    domain: &DiscreteDomain,
    compact: &NodeSet,
    exhaustion: &Exhaustion,
    p: f64,
    opts: &SolverOptions,
    max_terms: usize,
) -> Result<FiniteEnergyFunction> {
    if exhaustion.level(0) != *compact {
        return Err(KhasminskiiError::InvalidConfig(
            "the first exhaustion region must equal the compact set".into(),
        ));
    }
    let last = exhaustion.len() - 1;
    let mut field = ScalarField { values: vec![0.0; domain.len()] };
    let mut terms: Vec<SeriesTerm> = Vec::new();
    for k in 1..=max_terms.min(last) {
        let bound = 0.5f64.powi(k as i32);
        let region = exhaustion.level(k);
        let lo = terms.last().map_or(k, |t| t.level + 1);
        let selected = select_level(domain, compact, exhaustion, p, opts, lo, last, |h, e| {
            e < bound && sup_on(h, &region) <= bound
        })?;
        let Some((level, h, energy)) = selected else {
            break;
        };
        terms.push(SeriesTerm {
            k,
            level,
            sup_on_region: sup_on(&h, &region),
            energy,
        });
        field = field.zip(&h, |a, b| a + b);
    }
    if terms.is_empty() {
        return Err(KhasminskiiError::CannotConstruct(
            "no exhaustion level has capacity below 1/2".into(),
        ));
    }
    let energy = p_energy(domain, &field, p);
    let energy_budget = terms.iter().map(|t| 0.5f64.powf(t.k as f64 / p)).sum::<f64>().powf(p);
    Ok(FiniteEnergyFunction {
        p,
        field,
        terms,
        energy,
        energy_budget,
    })
}

/// Nodes where a constructed witness must be a supersolution.
pub fn witness_test_nodes(domain: &DiscreteDomain, compact: &NodeSet) -> NodeSet {
    domain.tagged(BoundaryTag::Outer).union(compact).complement()
}

/// Supersolution test of a witness off `K` and the outer ring.
pub fn check_witness(domain: &DiscreteDomain, compact: &NodeSet, witness: &ScalarField, p: f64, tol: f64) -> SolutionCheck {
    check_supersolution(domain, witness, p, &witness_test_nodes(domain, compact), tol)
}

/// Per-cell scaled difference vectors, padded to the largest cell arity.
pub fn cell_gradients(domain: &DiscreteDomain, u: &ScalarField) -> (Vec<f64>, usize) {
    let dim = domain.cells().iter().map(|c| c.terms().len()).max().unwrap_or(1);
    let mut out = vec![0.0; dim * domain.cells().len()];
    for (c, cell) in domain.cells().iter().enumerate() {
        for (k, t) in cell.terms().iter().enumerate() {
            out[c * dim + k] = t.scale * (u.values[t.to] - u.values[t.from]);
        }
    }
    (out, dim)
}

/// `‖∇u‖_p = D_p(u)^{1/p}`.
pub fn gradient_norm(domain: &DiscreteDomain, u: &ScalarField, p: f64) -> f64 {
    p_energy(domain, u, p).powf(1.0 / p)
}

/// The chain of energy comparisons that drives `‖∇δ_j‖_p → 0`, evaluated for
/// `v = ∇s`, `w = ∇δ` with `δ = h − s`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyAudit {
    /// `‖∇s‖_p`.
    pub v_norm: f64,
    /// `‖∇δ‖_p`.
    pub w_norm: f64,
    /// `‖∇(s + δ/2)‖_p`.
    pub half_norm: f64,
    /// `‖∇ min(s + δ/2, n)‖_p`, an admissible competitor for the problem that produced `s`.
    pub truncated_norm: f64,
    /// `‖∇h‖_p = ‖∇(s + δ)‖_p`.
    pub sum_norm: f64,
    /// `‖∇(s + f_j)‖_p`, the obstacle itself as a competitor.
    pub obstacle_norm: f64,
    /// `‖∇f_j‖_p`.
    pub f_j_norm: f64,
    /// `‖∇s‖ ≤ ‖∇ min(s + δ/2, n)‖ ≤ ‖∇(s + δ/2)‖`.
    pub link_a: bool,
    /// `‖∇h‖ ≤ ‖∇(s + f_j)‖ ≤ ‖∇s‖ + ‖∇f_j‖`.
    pub link_b: bool,
    /// The growth estimate holds and `‖∇s‖ σ(x) ≤ ‖∇f_j‖` with `x = ‖∇δ‖/(‖∇s‖ + ‖∇δ‖)`.
    pub link_c: bool,
    pub lemma: LemmaStar,
    /// `‖∇s‖ σ(x)`.
    pub sigma_term: f64,
    pub slack: f64,
}

/// Audits one accepted step: `s` is the previous stage with top value `level`,
/// `h` the new stage and `f_j` the obstacle increment.
pub fn energy_chain_audit(
    domain: &DiscreteDomain,
    s: &ScalarField,
    h: &ScalarField,
    f_j: &ScalarField,
    level: f64,
    p: f64,
    slack: f64,
) -> Result<EnergyAudit> {
    domain.check_field(s)?;
    domain.check_field(h)?;
    domain.check_field(f_j)?;
    let norm = |u: &ScalarField| gradient_norm(domain, u, p);
    let delta = h.zip(s, |a, b| a - b);
    let half = s.zip(&delta, |a, b| a + 0.5 * b);
    let truncated = half.map(|x| x.min(level));
    let obstacle = s.zip(f_j, |a, b| a + b);
    let mut audit = EnergyAudit {
        v_norm: norm(s),
        w_norm: norm(&delta),
        half_norm: norm(&half),
        truncated_norm: norm(&truncated),
        sum_norm: norm(h),
        obstacle_norm: norm(&obstacle),
        f_j_norm: norm(f_j),
        link_a: false,
        link_b: false,
        link_c: false,
        lemma: LemmaStar::HypothesisNotMet,
        sigma_term: 0.0,
        slack,
    };
    audit.evaluate(p)?;
    Ok(audit)
}

impl EnergyAudit {
    pub fn passed(&self) -> bool {
        self.link_a && self.link_b && self.link_c
    }

    /// Recomputes the links, lemma outcome and `σ` term from the stored norms.
    pub fn evaluate(&mut self, p: f64) -> Result<()> {
        let (v, w, slack) = (self.v_norm, self.w_norm, self.slack);
        let up = 1.0 + slack;
        self.link_a = v <= self.truncated_norm * up && self.truncated_norm <= self.half_norm * up;
        self.link_b = self.sum_norm <= self.obstacle_norm * up && self.obstacle_norm <= (v + self.f_j_norm) * up;
        // Link (a) establishes the hypothesis `‖v + w/2‖ ≥ ‖v‖` up to the slack.
        let half = if self.link_a { self.half_norm.max(v) } else { self.half_norm };
        self.lemma = star_outcome(v, w, half, self.sum_norm, p);
        self.sigma_term = if v == 0.0 || w == 0.0 {
            0.0
        } else {
            v * sigma_function(p, w / (v + w)).map_err(|e| KhasminskiiError::InvalidConfig(e.to_string()))?
        };
        self.link_c =
            matches!(self.lemma, LemmaStar::Holds { .. }) && self.sigma_term <= self.f_j_norm + slack * (v + self.f_j_norm);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReverseConfig {
    /// Number of stages `N`; the witness equals `N` near infinity.
    pub steps: usize,
    /// Step `n` accepts once `sup_{D'_{n+1}} δ_j < gap_base^{n+1}`.
    pub gap_base: f64,
    /// Also require `‖∇δ_j‖_p < 2^{-n}`.
    pub energy_rule: bool,
    /// Largest `j` tried before giving up.
    pub max_j: usize,
    /// Relative slack of the energy audit.
    pub audit_slack: f64,
}

impl Default for ReverseConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            gap_base: 0.5,
            energy_rule: true,
            max_j: 1 << 20,
            audit_slack: 1e-9,
        }
    }
}

/// One candidate `j` of a step.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRecord {
    pub j: usize,
    /// `s = n` on `{f ≥ j}`, so the obstacle equals `n + 1` off `D'_{j+1}`.
    pub admissible: bool,
    pub sup_gap: Option<f64>,
    pub delta_norm: Option<f64>,
    pub f_j_norm: Option<f64>,
    /// `h̃_j ≤ h̃_{j/2}` against the previous admissible candidate.
    pub monotone: Option<bool>,
    /// `‖∇δ_j‖ ≤ 2‖∇s‖ + ‖∇f‖`: the energy bound behind the weak limit.
    pub bounded: Option<bool>,
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub n: usize,
    pub j_bar: usize,
    pub sup_gap: f64,
    pub gap_target: f64,
    /// `‖∇δ_{j̄}‖_p`.
    pub delta_energy: f64,
    /// `‖∇s^{(n+1)}‖_p`.
    pub cumulative_energy: f64,
    pub sweep: Vec<SweepRecord>,
    pub audit: EnergyAudit,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReverseKhasminskii {
    pub p: f64,
    pub config: ReverseConfig,
    /// `𝒦 = s^{(N)}`.
    pub witness: ScalarField,
    /// `s^{(0)}, …, s^{(N)}`.
    #[serde(skip)]
    pub stages: Vec<ScalarField>,
    pub steps: Vec<StepRecord>,
    /// `D_p(𝒦)`.
    pub energy: f64,
    /// `(‖∇s^{(1)}‖_p + Σ_{n=1}^{N} 2^{-n})^p`.
    pub energy_bound: f64,
    pub supersolution: SolutionCheck,
}

/// Builds `𝒦` from a proper finite-energy function `f` by `N` obstacle stages.
///
/// Stage `n` solves, for `j = 1, 2, 4, …`, the obstacle problem on
/// `D'_{j+1} \ K` with `D'_m = {f < m}`, obstacle and boundary data
/// `s^{(n)} + min(f/j, 1)`, zero on `K`. The first `j` meeting the gap (and
/// energy) rule gives `s^{(n+1)}`.
pub fn reverse_khasminskii(
    domain: &DiscreteDomain,
    compact: &NodeSet,
    f: &FiniteEnergyFunction,
    config: &ReverseConfig,
    opts: &SolverOptions,
) -> Result<ReverseKhasminskii> {
    let p = f.p;
    domain.check_field(&f.field)?;
    if config.steps == 0 || !(config.gap_base > 0.0 && config.gap_base < 1.0) {
        return Err(KhasminskiiError::InvalidConfig(format!(
            "need at least one step and gap base in (0, 1), got {} and {}",
            config.steps, config.gap_base
        )));
    }
    if let Some(i) = compact.iter().find(|&i| f.field.values[i] != 0.0) {
        return Err(KhasminskiiError::NonzeroOnCompact(i));
    }
    let outer = domain.tagged(BoundaryTag::Outer);
    let outer_min = outer.iter().map(|i| f.field.values[i]).fold(f64::INFINITY, f64::min);
    let f_norm = gradient_norm(domain, &f.field, p);
    let opts = opts.relative();
    let tol = 10.0 * opts.tol;

    let n_nodes = domain.len();
    let mut s = ScalarField {
        values: vec![0.0; n_nodes],
    };
    let mut stages = vec![s.clone()];
    let mut steps = Vec::with_capacity(config.steps);
    for n in 0..config.steps {
        let level = n as f64;
        let gap_target = config.gap_base.powi(n as i32 + 1);
        let energy_target = 0.5f64.powi(n as i32);
        let s_norm = gradient_norm(domain, &s, p);
        let inner_region = NodeSet::from_fn(n_nodes, |i| f.field.values[i] < level + 1.0);
        let mut sweep = Vec::new();
        let mut previous: Option<ScalarField> = None;
        let mut j = 1usize;
        let accepted = loop {
            if j > config.max_j {
                return Err(KhasminskiiError::CannotConstruct(format!(
                    "step {n}: no j up to {} meets the acceptance rule",
                    config.max_j
                )));
            }
            if ((j + 1) as f64) > outer_min {
                return Err(KhasminskiiError::GridTooSmall(format!(
                    "step {n} needs f ≥ {} on the outer ring, but min f there is {outer_min}",
                    j + 1
                )));
            }
            let admissible = (0..n_nodes).all(|i| f.field.values[i] < j as f64 || s.values[i] == level);
            if !admissible {
                sweep.push(SweepRecord {
                    j,
                    admissible,
                    sup_gap: None,
                    delta_norm: None,
                    f_j_norm: None,
                    monotone: None,
                    bounded: None,
                    iterations: None,
                });
                j *= 2;
                continue;
            }
            let f_j = f.field.map(|x| (x / j as f64).min(1.0));
            let psi = s.zip(&f_j, |a, b| a + b);
            let free = NodeSet::from_fn(n_nodes, |i| {
                f.field.values[i] < (j + 1) as f64 && !compact.contains(i) && !outer.contains(i)
            });
            let mut bc = BoundaryValues::new(n_nodes);
            bc.fix_from(&free.complement(), &psi);
            bc.fix(compact, 0.0);
            let problem = ObstacleProblem {
                p,
                obstacle: psi.values.clone(),
                boundary: bc,
            };
            let start = previous.as_ref().unwrap_or(&psi);
            let sol = solve_obstacle_from(domain, &problem, Some(start), &opts)?;
            if !sol.report.converged() {
                return Err(KhasminskiiError::NoConvergence(format!(
                    "step {n}, j = {j}: status {:?}, residual {:e}",
                    sol.report.status, sol.report.residual
                )));
            }
            let h = sol.field;
            let delta = h.zip(&s, |a, b| a - b);
            let sup_gap = inner_region.iter().map(|i| delta.values[i]).fold(0.0, f64::max);
            let delta_norm = gradient_norm(domain, &delta, p);
            let f_j_norm = gradient_norm(domain, &f_j, p);
            let monotone = previous
                .as_ref()
                .map(|prev| h.values.iter().zip(&prev.values).all(|(a, b)| *a <= b + tol));
            let bounded = delta_norm <= (2.0 * s_norm + f_norm) * (1.0 + config.audit_slack);
            sweep.push(SweepRecord {
                j,
                admissible,
                sup_gap: Some(sup_gap),
                delta_norm: Some(delta_norm),
                f_j_norm: Some(f_j_norm),
                monotone,
                bounded: Some(bounded),
                iterations: Some(sol.report.iterations),
            });
            if sup_gap < gap_target && (!config.energy_rule || delta_norm < energy_target) {
                break (j, h, f_j, sup_gap, delta_norm);
            }
            previous = Some(h);
            j *= 2;
        };
        let (j_bar, h, f_j, sup_gap, delta_energy) = accepted;
        let audit = energy_chain_audit(domain, &s, &h, &f_j, level, p, config.audit_slack)?;
        let cumulative_energy = gradient_norm(domain, &h, p);
        steps.push(StepRecord {
            n,
            j_bar,
            sup_gap,
            gap_target,
            delta_energy,
            cumulative_energy,
            sweep,
            audit,
        });
        s = h;
        stages.push(s.clone());
    }

    let energy = p_energy(domain, &s, p);
    let first = steps[0].cumulative_energy;
    let tail: f64 = (1..=config.steps).map(|n| 0.5f64.powi(n as i32)).sum();
    let energy_bound = (first + tail).powf(p);
    let supersolution = check_witness(domain, compact, &s, p, opts.tol.max(1e-9));
    Ok(ReverseKhasminskii {
        p,
        config: *config,
        witness: s,
        stages,
        steps,
        energy,
        energy_bound,
        supersolution,
    })
}

/// Finite-energy function over the ring exhaustion followed by the reverse construction.
///
/// A grid on which no ring keeps the condenser capacity below `1/2` (every
/// nonparabolic grid, and parabolic grids that stop too early) is reported
/// as too small.
pub fn khasminskii_on_grid(
    domain: &DiscreteDomain,
    compact: &NodeSet,
    p: f64,
    config: &ReverseConfig,
    opts: &SolverOptions,
    max_terms: usize,
) -> Result<(FiniteEnergyFunction, ReverseKhasminskii)> {
    let exhaustion = Exhaustion::every_ring(domain);
    let f = match proper_finite_energy_function(domain, compact, &exhaustion, p, opts, max_terms) {
        Err(KhasminskiiError::CannotConstruct(msg)) => return Err(KhasminskiiError::GridTooSmall(msg)),
        other => other?,
    };
    let run = reverse_khasminskii(domain, compact, &f, config, opts)?;
    Ok((f, run))
}
