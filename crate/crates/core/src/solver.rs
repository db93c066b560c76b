//! Minimisation of the discrete p-Dirichlet energy.
//!
//! Dirichlet problems and obstacle problems share one projected Newton
//! method: on the inactive set a Newton step is computed with PCG, on the
//! active set (nodes sitting on the obstacle with a positive energy gradient)
//! a diagonally scaled gradient step is taken, and the combined step is
//! projected back onto `u ≥ ψ` with Armijo backtracking along the arc.
//!
//! For `p ≠ 2` the energy is regularised as `w (|g|² + ε²)^{p/2}` with `ε`
//! measured in the same units as the scaled node differences `g`, and `ε` is
//! driven from `eps_start` down to `eps_final`. Convergence requires both a
//! small projected gradient and a small Newton step; the step test is what
//! makes the criterion independent of how the cell weights are scaled.

use serde::Serialize;
use thiserror::Error;

use crate::domain::{DiscreteDomain, DomainError, NodeSet, ScalarField};
use crate::sparse::{dot, norm, pcg, CsrMatrix, Ic0};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("exponent p must satisfy p > 1, got {0}")]
    InvalidExponent(f64),
    #[error("at least one node must carry a Dirichlet value")]
    NoFixedNodes,
    #[error("obstacle has {got} values but the domain has {expected} nodes")]
    ObstacleLength { expected: usize, got: usize },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub energy: f64,
    pub residual: f64,
    pub epsilon: f64,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Bound on the max-norm of the projected gradient.
    pub tol: f64,
    /// Bound on the max-norm of the final Newton step, relative to `max(1, ‖u‖∞)`.
    pub step_tol: f64,
    /// Newton iterations summed over all regularisation levels.
    pub max_iter: usize,
    pub eps_start: f64,
    pub eps_final: f64,
    pub eps_factor: f64,
    /// Run a quadratic solve before `p ≠ 2` solves, starting from the initial field if one is given.
    pub quadratic_warm_start: bool,
    /// Measure the residual of each node against its local flux and the step
    /// against its own value. Needed when the solution spans many orders of
    /// magnitude. For `p > 2` the regularisation is skipped, since any fixed
    /// `ε` swamps the smallest gradients.
    pub relative: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            step_tol: 1e-10,
            max_iter: 400,
            eps_start: 1e-2,
            eps_final: 1e-10,
            eps_factor: 1e-2,
            quadratic_warm_start: true,
            relative: false,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    pub fn relative(self) -> Self {
        Self { relative: true, ..self }
    }
}

/// Dirichlet values on a subset of the nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryValues {
    values: Vec<Option<f64>>,
}

impl BoundaryValues {
    pub fn new(n: usize) -> Self {
        Self { values: vec![None; n] }
    }

    /// Inner boundary at `inner`, outer boundary at `outer`.
    pub fn condenser(domain: &DiscreteDomain, inner: f64, outer: f64) -> Self {
        let mut bc = Self::new(domain.len());
        bc.fix(&domain.inner_boundary(), inner);
        bc.fix(&domain.outer_boundary(), outer);
        bc
    }

    pub fn fix(&mut self, set: &NodeSet, value: f64) {
        for i in set.iter() {
            self.values[i] = Some(value);
        }
    }

    pub fn fix_node(&mut self, node: usize, value: f64) {
        self.values[node] = Some(value);
    }

    /// Copies `field` onto the nodes of `set`.
    pub fn fix_from(&mut self, set: &NodeSet, field: &ScalarField) {
        for i in set.iter() {
            self.values[i] = Some(field.values[i]);
        }
    }

    pub fn release(&mut self, node: usize) {
        self.values[node] = None;
    }

    pub fn value(&self, node: usize) -> Option<f64> {
        self.values[node]
    }

    pub fn fixed_set(&self) -> NodeSet {
        NodeSet::from_fn(self.values.len(), |i| self.values[i].is_some())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Obstacle problem `min D_p(u)` over `u = θ` on fixed nodes and `u ≥ ψ` elsewhere.
#[derive(Debug, Clone)]
pub struct ObstacleProblem {
    pub p: f64,
    /// `-inf` disables the constraint at a node.
    pub obstacle: Vec<f64>,
    pub boundary: BoundaryValues,
}

impl ObstacleProblem {
    /// The one-argument form: boundary data equal to the obstacle on `boundary_set`.
    pub fn with_obstacle_boundary(p: f64, obstacle: Vec<f64>, boundary_set: &NodeSet) -> Self {
        let mut boundary = BoundaryValues::new(obstacle.len());
        for i in boundary_set.iter() {
            boundary.fix_node(i, obstacle[i]);
        }
        Self { p, obstacle, boundary }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub field: ScalarField,
    pub report: SolveReport,
}

#[derive(Debug, Clone)]
pub struct ObstacleSolution {
    pub field: ScalarField,
    pub report: SolveReport,
    /// Free nodes with `u − ψ ≤ 10·tol`.
    pub contact: NodeSet,
    /// Largest `|∂D_p/∂u_i| / p` over free nodes off the contact set.
    pub noncontact_residual: f64,
}

fn check_p(p: f64) -> Result<()> {
    if p > 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(SolverError::InvalidExponent(p))
    }
}

/// Scaled differences of one cell.
#[inline]
fn cell_differences(domain: &DiscreteDomain, cell: usize, u: &[f64]) -> ([f64; 2], usize) {
    let c = &domain.cells()[cell];
    let mut g = [0.0; 2];
    let terms = c.terms();
    for (k, t) in terms.iter().enumerate() {
        g[k] = t.scale * (u[t.to] - u[t.from]);
    }
    (g, terms.len())
}

/// `D_p(u) = Σ_c vol_c |∇u|_c^p`.
pub fn p_energy(domain: &DiscreteDomain, u: &ScalarField, p: f64) -> f64 {
    energy_with(domain, &domain.cell_weights(p), &u.values, p, 0.0)
}

fn energy_with(domain: &DiscreteDomain, weights: &[f64], u: &[f64], p: f64, eps: f64) -> f64 {
    energy_on(domain, weights, 0..weights.len(), u, p, eps)
}

fn energy_on(
    domain: &DiscreteDomain,
    weights: &[f64],
    cells: impl Iterator<Item = usize>,
    u: &[f64],
    p: f64,
    eps: f64,
) -> f64 {
    let mut total = 0.0;
    for c in cells {
        let w = weights[c];
        let (g, k) = cell_differences(domain, c, u);
        let a: f64 = g[..k].iter().map(|x| x * x).sum::<f64>() + eps * eps;
        if a > 0.0 {
            total += w * if p == 2.0 { a } else { a.powf(0.5 * p) };
        }
    }
    total
}

/// Gradient of `D_p` with respect to every nodal value (fixed nodes included).
pub fn p_energy_gradient(domain: &DiscreteDomain, u: &ScalarField, p: f64) -> Vec<f64> {
    let mut out = vec![0.0; domain.len()];
    gradient_with(domain, &domain.cell_weights(p), &u.values, p, 0.0, &mut out);
    out
}

fn gradient_with(domain: &DiscreteDomain, weights: &[f64], u: &[f64], p: f64, eps: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    gradient_on(domain, weights, 0..weights.len(), u, p, eps, out);
}

/// Adds the gradient contributions of `cells` to `out`.
fn gradient_on(
    domain: &DiscreteDomain,
    weights: &[f64],
    cells: impl Iterator<Item = usize>,
    u: &[f64],
    p: f64,
    eps: f64,
    out: &mut [f64],
) {
    for c in cells {
        let w = weights[c];
        let (g, k) = cell_differences(domain, c, u);
        let a: f64 = g[..k].iter().map(|x| x * x).sum::<f64>() + eps * eps;
        if a == 0.0 {
            continue;
        }
        let coef = w * p * if p == 2.0 { 1.0 } else { a.powf(0.5 * p - 1.0) };
        for (kk, t) in domain.cells()[c].terms().iter().enumerate() {
            let f = coef * g[kk] * t.scale;
            out[t.to] += f;
            out[t.from] -= f;
        }
    }
}

/// Sum of the absolute flux contributions at every node.
fn flux_scale_on(
    domain: &DiscreteDomain,
    weights: &[f64],
    cells: impl Iterator<Item = usize>,
    u: &[f64],
    p: f64,
    eps: f64,
    out: &mut [f64],
) {
    for c in cells {
        let (g, k) = cell_differences(domain, c, u);
        let a: f64 = g[..k].iter().map(|x| x * x).sum::<f64>() + eps * eps;
        if a == 0.0 {
            continue;
        }
        let coef = weights[c] * p * if p == 2.0 { 1.0 } else { a.powf(0.5 * p - 1.0) };
        for (kk, t) in domain.cells()[c].terms().iter().enumerate() {
            let f = (coef * g[kk] * t.scale).abs();
            out[t.to] += f;
            out[t.from] += f;
        }
    }
}

/// Outcome of a weak super- or subsolution test.
#[derive(Debug, Clone, Serialize)]
pub struct SolutionCheck {
    pub passed: bool,
    pub offending: Vec<usize>,
    /// Most negative weak residual (for the super test) over the tested nodes.
    pub worst: f64,
}

/// Tests `Σ vol |∇u|^{p-2} ⟨∇u, ∇φ_i⟩ ≥ −tol` for the hat function of every node in `nodes`.
pub fn check_supersolution(domain: &DiscreteDomain, u: &ScalarField, p: f64, nodes: &NodeSet, tol: f64) -> SolutionCheck {
    let grad = p_energy_gradient(domain, u, p);
    weak_sign_check(&grad, p, nodes, tol, 1.0)
}

/// Mirror test: `Σ vol |∇u|^{p-2} ⟨∇u, ∇φ_i⟩ ≤ tol`.
pub fn check_subsolution(domain: &DiscreteDomain, u: &ScalarField, p: f64, nodes: &NodeSet, tol: f64) -> SolutionCheck {
    let grad = p_energy_gradient(domain, u, p);
    weak_sign_check(&grad, p, nodes, tol, -1.0)
}

/// Nodes that are neither tagged nor outside the cells' reach.
pub fn interior_nodes(domain: &DiscreteDomain) -> NodeSet {
    NodeSet::from_fn(domain.len(), |i| domain.node(i).tag.is_none() && !domain.node_cells(i).is_empty())
}

fn weak_sign_check(grad: &[f64], p: f64, nodes: &NodeSet, tol: f64, sign: f64) -> SolutionCheck {
    let mut offending = Vec::new();
    let mut worst = f64::INFINITY;
    for i in nodes.iter() {
        let r = sign * grad[i] / p;
        worst = worst.min(r);
        if r < -tol {
            offending.push(i);
        }
    }
    SolutionCheck {
        passed: offending.is_empty(),
        offending,
        worst: if worst.is_finite() { worst } else { 0.0 },
    }
}

/// Minimiser of `D_p` with the given Dirichlet values.
pub fn solve_dirichlet(domain: &DiscreteDomain, boundary: &BoundaryValues, p: f64, opts: &SolverOptions) -> Result<Solution> {
    let problem = ObstacleProblem {
        p,
        obstacle: vec![f64::NEG_INFINITY; domain.len()],
        boundary: boundary.clone(),
    };
    let s = solve_obstacle_from(domain, &problem, None, opts)?;
    Ok(Solution {
        field: s.field,
        report: s.report,
    })
}

pub fn solve_obstacle(domain: &DiscreteDomain, problem: &ObstacleProblem, opts: &SolverOptions) -> Result<ObstacleSolution> {
    solve_obstacle_from(domain, problem, None, opts)
}

/// As [`solve_obstacle`], starting from `initial` (projected onto the constraints).
pub fn solve_obstacle_from(
    domain: &DiscreteDomain,
    problem: &ObstacleProblem,
    initial: Option<&ScalarField>,
    opts: &SolverOptions,
) -> Result<ObstacleSolution> {
    let p = problem.p;
    check_p(p)?;
    let n = domain.len();
    if problem.obstacle.len() != n {
        return Err(SolverError::ObstacleLength {
            expected: n,
            got: problem.obstacle.len(),
        });
    }
    if problem.boundary.len() != n {
        return Err(SolverError::Domain(DomainError::FieldLength {
            expected: n,
            got: problem.boundary.len(),
        }));
    }
    if let Some(u0) = initial {
        domain.check_field(u0)?;
    }
    let fixed = problem.boundary.fixed_set();
    if fixed.is_empty() {
        return Err(SolverError::NoFixedNodes);
    }

    // Starting point: boundary data, then the initial field or the mean boundary value.
    let mean = fixed.iter().map(|i| problem.boundary.value(i).unwrap()).sum::<f64>() / fixed.count() as f64;
    let mut u: Vec<f64> = (0..n)
        .map(|i| match problem.boundary.value(i) {
            Some(v) => v,
            None => initial.map_or(mean, |f| f.values[i]).max(problem.obstacle[i]),
        })
        .collect();

    let infeasible = fixed
        .iter()
        .any(|i| problem.boundary.value(i).unwrap() < problem.obstacle[i]);
    if infeasible {
        let field = ScalarField { values: u };
        let energy = p_energy(domain, &field, p);
        return Ok(ObstacleSolution {
            contact: NodeSet::empty(n),
            noncontact_residual: f64::NAN,
            report: SolveReport {
                status: SolveStatus::Infeasible,
                iterations: 0,
                energy,
                residual: f64::NAN,
                epsilon: 0.0,
            },
            field,
        });
    }

    let mut newton = Newton::new(domain, &fixed, &problem.obstacle);
    let mut iterations = 0;

    let weights = domain.cell_weights(p);
    if p != 2.0 && opts.quadratic_warm_start {
        // With weights `w^{1/(p-1)}` the quadratic minimiser is exact on radial grids.
        let w2: Vec<f64> = weights.iter().map(|w| w.powf(1.0 / (p - 1.0))).collect();
        if w2.iter().all(|w| w.is_finite() && *w > 0.0) {
            let quad_opts = SolverOptions {
                max_iter: 50,
                ..*opts
            };
            let (_, _, its) = newton.run(&w2, 2.0, &mut u, &[0.0], &quad_opts);
            iterations += its;
        }
    }

    let schedule = if p == 2.0 || (opts.relative && p > 2.0) {
        vec![0.0]
    } else {
        let mut s = Vec::new();
        let mut e = opts.eps_start;
        while e > opts.eps_final * (1.0 + 1e-9) {
            s.push(e);
            e *= opts.eps_factor;
        }
        s.push(opts.eps_final);
        s
    };
    let remaining = SolverOptions {
        max_iter: opts.max_iter.saturating_sub(iterations),
        ..*opts
    };
    let (converged, residual, its) = newton.run(&weights, p, &mut u, &schedule, &remaining);
    iterations += its;

    let field = ScalarField { values: u };
    let energy = energy_with(domain, &weights, &field.values, p, 0.0);
    let grad = p_energy_gradient(domain, &field, p);
    let contact_tol = 10.0 * opts.tol;
    let contact = NodeSet::from_fn(n, |i| {
        !fixed.contains(i) && field.values[i] - problem.obstacle[i] <= contact_tol
    });
    let noncontact_residual = (0..n)
        .filter(|&i| !fixed.contains(i) && !contact.contains(i))
        .map(|i| (grad[i] / p).abs())
        .fold(0.0, f64::max);
    Ok(ObstacleSolution {
        report: SolveReport {
            status: if converged {
                SolveStatus::Converged
            } else {
                SolveStatus::MaxIter
            },
            iterations,
            energy,
            residual,
            epsilon: *schedule.last().unwrap(),
        },
        field,
        contact,
        noncontact_residual,
    })
}

const NONE: usize = usize::MAX;

/// Free-node bookkeeping and Hessian pattern, built once per solve.
struct Newton<'a> {
    domain: &'a DiscreteDomain,
    obstacle: &'a [f64],
    free_nodes: Vec<usize>,
    /// Cells touching at least one free node; the others contribute constants.
    active_cells: Vec<usize>,
    /// Local node list of each cell.
    cell_nodes: Vec<[usize; 3]>,
    cell_len: Vec<u8>,
    /// Local difference operator: `g_k = Σ_a G[k][a] u[cell_nodes[a]]`.
    cell_g: Vec<[[f64; 3]; 2]>,
    /// Hessian slot of every local pair, `NONE` if either node is fixed.
    cell_slots: Vec<[usize; 9]>,
    hess: CsrMatrix,
}

impl<'a> Newton<'a> {
    fn new(domain: &'a DiscreteDomain, fixed: &NodeSet, obstacle: &'a [f64]) -> Self {
        let n = domain.len();
        let mut free_of = vec![NONE; n];
        let mut free_nodes = Vec::new();
        for i in 0..n {
            if !fixed.contains(i) {
                free_of[i] = free_nodes.len();
                free_nodes.push(i);
            }
        }
        let nc = domain.cells().len();
        let mut cell_nodes = Vec::with_capacity(nc);
        let mut cell_len = Vec::with_capacity(nc);
        let mut cell_g = Vec::with_capacity(nc);
        let mut entries = Vec::new();
        for cell in domain.cells() {
            let mut nodes = [NONE; 3];
            let mut len = 0usize;
            let mut g = [[0.0; 3]; 2];
            let local = |node: usize, nodes: &mut [usize; 3], len: &mut usize| -> usize {
                if let Some(a) = nodes[..*len].iter().position(|&x| x == node) {
                    a
                } else {
                    nodes[*len] = node;
                    *len += 1;
                    *len - 1
                }
            };
            for (k, t) in cell.terms().iter().enumerate() {
                let a = local(t.from, &mut nodes, &mut len);
                let b = local(t.to, &mut nodes, &mut len);
                g[k][a] -= t.scale;
                g[k][b] += t.scale;
            }
            for a in 0..len {
                for b in 0..len {
                    let (fa, fb) = (free_of[nodes[a]], free_of[nodes[b]]);
                    if fa != NONE && fb != NONE && fa < fb {
                        entries.push((fa, fb));
                    }
                }
            }
            cell_nodes.push(nodes);
            cell_len.push(len as u8);
            cell_g.push(g);
        }
        let active_cells = (0..nc)
            .filter(|&c| cell_nodes[c][..cell_len[c] as usize].iter().any(|&i| free_of[i] != NONE))
            .collect();
        let hess = CsrMatrix::from_pattern(free_nodes.len(), entries);
        let cell_slots = cell_nodes
            .iter()
            .zip(&cell_len)
            .map(|(nodes, &len)| {
                let mut slots = [NONE; 9];
                for a in 0..len as usize {
                    for b in 0..len as usize {
                        let (fa, fb) = (free_of[nodes[a]], free_of[nodes[b]]);
                        if fa != NONE && fb != NONE {
                            slots[3 * a + b] = hess.slot(fa, fb);
                        }
                    }
                }
                slots
            })
            .collect();
        Self {
            domain,
            obstacle,
            free_nodes,
            active_cells,
            cell_nodes,
            cell_len,
            cell_g,
            cell_slots,
            hess,
        }
    }

    fn free_gradient(&self, weights: &[f64], p: f64, u: &[f64], eps: f64, full: &mut [f64], out: &mut [f64]) {
        for &i in &self.free_nodes {
            full[i] = 0.0;
        }
        gradient_on(self.domain, weights, self.active_cells.iter().copied(), u, p, eps, full);
        for (k, &i) in self.free_nodes.iter().enumerate() {
            out[k] = full[i];
        }
    }

    fn energy(&self, weights: &[f64], u: &[f64], p: f64, eps: f64) -> f64 {
        energy_on(self.domain, weights, self.active_cells.iter().copied(), u, p, eps)
    }

    /// Max-norm of `u − P(u − g)` over the free nodes.
    fn natural_residual(&self, u: &[f64], g: &[f64]) -> f64 {
        self.free_nodes
            .iter()
            .zip(g)
            .map(|(&i, &gi)| (u[i] - (u[i] - gi).max(self.obstacle[i])).abs())
            .fold(0.0, f64::max)
    }

    /// Natural residual, divided nodewise by the local flux scale in relative mode.
    fn residual(&self, weights: &[f64], p: f64, u: &[f64], eps: f64, g: &[f64], relative: bool, scratch: &mut [f64]) -> f64 {
        if !relative {
            return self.natural_residual(u, g);
        }
        for &i in &self.free_nodes {
            scratch[i] = 0.0;
        }
        flux_scale_on(self.domain, weights, self.active_cells.iter().copied(), u, p, eps, scratch);
        self.free_nodes
            .iter()
            .zip(g)
            .map(|(&i, &gi)| {
                let r = (u[i] - (u[i] - gi).max(self.obstacle[i])).abs();
                if r == 0.0 {
                    0.0
                } else {
                    r / scratch[i].max(f64::MIN_POSITIVE)
                }
            })
            .fold(0.0, f64::max)
    }

    fn assemble_hessian(&mut self, weights: &[f64], p: f64, u: &[f64], eps: f64) {
        self.hess.clear();
        for &c in &self.active_cells {
            let w = weights[c];
            let nodes = &self.cell_nodes[c];
            let len = self.cell_len[c] as usize;
            let gm = &self.cell_g[c];
            let k = self.domain.cells()[c].terms().len();
            let mut g = [0.0; 2];
            for kk in 0..k {
                g[kk] = (0..len).map(|a| gm[kk][a] * u[nodes[a]]).sum();
            }
            let a: f64 = g[..k].iter().map(|x| x * x).sum::<f64>() + eps * eps;
            if a == 0.0 && p != 2.0 {
                continue;
            }
            let (base, rank1) = if p == 2.0 {
                (2.0 * w, 0.0)
            } else {
                let b = w * p * a.powf(0.5 * p - 1.0);
                (b, b * (p - 2.0) / a)
            };
            // Local Hessian in g-space: base·I + rank1·g gᵀ.
            let mut hg = [[0.0; 2]; 2];
            for r in 0..k {
                for s in 0..k {
                    hg[r][s] = rank1 * g[r] * g[s] + if r == s { base } else { 0.0 };
                }
            }
            let slots = &self.cell_slots[c];
            for aa in 0..len {
                for bb in 0..len {
                    let slot = slots[3 * aa + bb];
                    if slot == NONE {
                        continue;
                    }
                    let mut v = 0.0;
                    for r in 0..k {
                        for s in 0..k {
                            v += gm[r][aa] * hg[r][s] * gm[s][bb];
                        }
                    }
                    self.hess.values[slot] += v;
                }
            }
        }
    }

    /// Runs projected Newton through the regularisation schedule.
    /// Returns (converged at the final level, final residual, iterations).
    fn run(&mut self, weights: &[f64], p: f64, u: &mut [f64], schedule: &[f64], opts: &SolverOptions) -> (bool, f64, usize) {
        let nf = self.free_nodes.len();
        let n = u.len();
        let mut full = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        let mut g = vec![0.0; nf];
        let mut d = vec![0.0; nf];
        let mut trial = u.to_vec();
        let mut iterations = 0;
        let mut residual = f64::INFINITY;
        let mut converged = false;
        if nf == 0 {
            return (true, 0.0, 0);
        }

        for (level, &eps) in schedule.iter().enumerate() {
            let last = level + 1 == schedule.len();
            let level_tol = if last { opts.tol } else { (1e3 * opts.tol).max(1e-6) };
            let mut level_iters = 0;
            converged = false;
            loop {
                self.free_gradient(weights, p, u, eps, &mut full, &mut g);
                residual = self.residual(weights, p, u, eps, &g, opts.relative, &mut scratch);
                if !last && (residual <= level_tol || level_iters >= 50) {
                    break;
                }
                if iterations >= opts.max_iter {
                    return (false, residual, iterations);
                }

                self.assemble_hessian(weights, p, u, eps);
                // Active set: on the obstacle and pushed into it.
                let gnorm = norm(&g);
                let active_margin = gnorm.min(1e-12_f64.max(10.0 * opts.tol * 1e-3));
                let active: Vec<bool> = self
                    .free_nodes
                    .iter()
                    .zip(&g)
                    .map(|(&i, &gi)| u[i] <= self.obstacle[i] + active_margin && gi > 0.0)
                    .collect();
                let diag = self.hess.diagonal();
                let mut reduced = self.hess.clone();
                for r in 0..nf {
                    for slot in reduced.row_range(r) {
                        let col = reduced.col(slot);
                        if col != r && (active[r] || active[col]) {
                            reduced.values[slot] = 0.0;
                        }
                    }
                    let s = reduced.slot(r, r);
                    if !(diag[r] > 0.0) {
                        reduced.values[s] = 1.0;
                    }
                }
                let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
                let precond = Ic0::new(&reduced);
                d.iter_mut().for_each(|x| *x = 0.0);
                let forcing = if p == 2.0 { 1e-13 } else { gnorm.sqrt().clamp(1e-13, 0.5) };
                pcg(&reduced, &rhs, &mut d, &precond, forcing * gnorm, 10 * nf + 100);

                // Fall back to a scaled gradient step if the Newton step is not a descent direction.
                if !(dot(&d, &g) < 0.0) {
                    for r in 0..nf {
                        let h = if diag[r] > 0.0 { diag[r] } else { 1.0 };
                        d[r] = -g[r] / h;
                    }
                }

                let u_scale = self.free_nodes.iter().map(|&i| u[i].abs()).fold(1.0, f64::max);
                let step = d
                    .iter()
                    .zip(&self.free_nodes)
                    .map(|(&di, &i)| {
                        // Steps blocked by the obstacle do not count.
                        let moved = (u[i] + di).max(self.obstacle[i]) - u[i];
                        if opts.relative {
                            let base = u[i].abs().max((u[i] + moved).abs());
                            if moved == 0.0 {
                                0.0
                            } else {
                                moved.abs() / base.max(f64::MIN_POSITIVE)
                            }
                        } else {
                            moved.abs() / u_scale
                        }
                    })
                    .fold(0.0, f64::max);
                if last && residual <= opts.tol && step <= opts.step_tol {
                    converged = true;
                    break;
                }

                iterations += 1;
                level_iters += 1;
                let e0 = self.energy(weights, u, p, eps);
                // Below this predicted decrease the energy cannot rank trial points and
                // the residual takes over as merit function.
                let roundoff = 1e-12 * e0.abs().max(f64::MIN_POSITIVE);
                // Rows on the active set are projected away and do not count.
                let predicted: f64 = d
                    .iter()
                    .zip(&g)
                    .zip(&active)
                    .filter(|(_, &a)| !a)
                    .map(|((di, gi), _)| -di * gi)
                    .sum();
                let by_residual = predicted < roundoff;
                let mut g1 = vec![0.0; nf];
                let mut alpha = 1.0;
                let mut accepted = false;
                while alpha > 1e-12 {
                    let mut decrease_model = 0.0;
                    trial.copy_from_slice(u);
                    for (k, &i) in self.free_nodes.iter().enumerate() {
                        trial[i] = (u[i] + alpha * d[k]).max(self.obstacle[i]);
                        decrease_model += g[k] * (trial[i] - u[i]);
                    }
                    let e1 = self.energy(weights, &trial, p, eps);
                    accepted = if by_residual {
                        self.free_gradient(weights, p, &trial, eps, &mut full, &mut g1);
                        let r1 = self.residual(weights, p, &trial, eps, &g1, opts.relative, &mut scratch);
                        e1 <= e0 + 1e-13 * e0.abs() && r1 < residual
                    } else {
                        e1 <= e0 + 1e-4 * decrease_model
                    };
                    if accepted {
                        break;
                    }
                    alpha *= 0.5;
                }
                if !accepted && !by_residual {
                    // Energy differences are at round-off level: accept the full step if it
                    // does not increase the energy beyond round-off and reduces the residual.
                    for (k, &i) in self.free_nodes.iter().enumerate() {
                        trial[i] = (u[i] + d[k]).max(self.obstacle[i]);
                    }
                    let e1 = self.energy(weights, &trial, p, eps);
                    self.free_gradient(weights, p, &trial, eps, &mut full, &mut g1);
                    let r1 = self.residual(weights, p, &trial, eps, &g1, opts.relative, &mut scratch);
                    if e1 <= e0 + 1e-13 * e0.abs() && r1 < residual {
                        accepted = true;
                    }
                }
                if !accepted {
                    // Stalled: nothing left to gain in floating point.
                    if last {
                        converged = residual <= opts.tol;
                        return (converged, residual, iterations);
                    }
                    break;
                }
                u.copy_from_slice(&trial);
            }
        }
        (converged, residual, iterations)
    }
}
