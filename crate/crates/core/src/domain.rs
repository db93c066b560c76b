//! Discrete computational domains.
//!
//! A domain is a set of nodes plus a list of cells. Each cell holds one or two
//! scaled node differences `g_k = scale_k (u[to_k] - u[from_k])` and the
//! discrete p-energy of a field is
//!
//! ```text
//!     Σ_c  weight_c(p) · |g_c|^p,    weight_c(p) = vol_c / len_c^p,
//! ```
//!
//! so that `|g_c| / len_c` is the gradient magnitude on the cell. Cells store
//! `ln weight_c(p_hint)` and `ln len_c` rather than the volume itself: grids in
//! the logarithmic radius can reach `ln r ~ 1e80`, where `vol` and `len` no
//! longer fit in a double but their ratio does.
//!
//! Radial grids graded in `r` use the midpoint rule in `r` for each cell;
//! grids graded in `ln r` use the midpoint rule in `ln r`. In both cases the
//! one-dimensional discrete minimiser is the matching midpoint-rule quadrature
//! of the radial p-harmonic function (see [`DiscreteDomain::radial_potential`]).

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::model::{ModelError, ModelManifold};

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("invalid radial range: outer radius must exceed the base radius {base}, got {outer}")]
    InvalidRange { base: f64, outer: f64 },
    #[error("at least {min} cells are required, got {got}")]
    TooFewCells { min: usize, got: usize },
    #[error("surface grids need an even angular resolution of at least 8, got {0}")]
    InvalidAngularResolution(usize),
    #[error("surface grids exist only for dimension 2, got {0}")]
    UnsupportedDimension(usize),
    #[error("grading ratio must be positive and finite, got {0}")]
    InvalidGrading(f64),
    #[error("field has {got} values but the domain has {expected} nodes")]
    FieldLength { expected: usize, got: usize },
    #[error("field value at node {node} is not finite")]
    NonFinite { node: usize },
    #[error("exhaustion is not strictly nested at level {0}")]
    NotNested(usize),
    #[error("exhaustion must end with the whole domain")]
    NotCovering,
    #[error("first exhaustion set must contain the inner boundary")]
    MissingInner,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write node table: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DomainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Radial1d,
    Surface2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryTag {
    Inner,
    Outer,
}

#[derive(Debug, Clone, Copy)]
pub struct Node {
    pub log_r: f64,
    pub theta: Option<f64>,
    pub tag: Option<BoundaryTag>,
}

impl Node {
    /// Radius; `inf` when `ln r` exceeds the double range.
    pub fn r(&self) -> f64 {
        self.log_r.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub from: usize,
    pub to: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Cell {
    terms: [Term; 2],
    n_terms: u8,
    /// `ln(vol / len^{p_hint})`.
    pub ln_weight: f64,
    pub ln_len: f64,
}

impl Cell {
    pub fn terms(&self) -> &[Term] {
        &self.terms[..self.n_terms as usize]
    }
}

/// Spacing of the radial nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Grading {
    /// Equal steps in `r`.
    Uniform,
    /// Steps in `r` growing by `ratio` outward (fine near the base radius for `ratio > 1`).
    Geometric(f64),
    /// Equal steps in `ln r`.
    Logarithmic,
    /// Steps in `ln r` growing by `ratio` outward.
    LogGeometric(f64),
}

impl Grading {
    fn is_logarithmic(self) -> bool {
        matches!(self, Grading::Logarithmic | Grading::LogGeometric(_))
    }

    fn ratio(self) -> Option<f64> {
        match self {
            Grading::Geometric(q) | Grading::LogGeometric(q) => Some(q),
            _ => None,
        }
    }
}

/// Outer end of a radial grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OuterRadius {
    Radius(f64),
    LogRadius(f64),
}

/// Cumulative fractions `0 = t_0 < … < t_M = 1` with steps growing by `ratio`.
fn graded_fractions(cells: usize, ratio: Option<f64>) -> Vec<f64> {
    let steps: Vec<f64> = match ratio {
        None => vec![1.0; cells],
        Some(q) => {
            // Normalise by the largest step so q^M cannot overflow.
            let ln_q = q.ln();
            let top = (ln_q * (cells - 1) as f64).max(0.0);
            (0..cells)
                .map(|i| (ln_q * i as f64 - top).max(-700.0).exp())
                .collect()
        }
    };
    let total: f64 = steps.iter().sum();
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(cells + 1);
    out.push(0.0);
    for s in &steps[..cells - 1] {
        acc += s;
        out.push(acc / total);
    }
    out.push(1.0);
    out
}

/// Per-ring radial cell geometry shared by the 1D and 2D builders.
struct RadialCells {
    log_r: Vec<f64>,
    /// `ln(A_mid Δ / Δ^{p})` without the angular measure, `Δ` the cell length.
    ln_weight: Vec<f64>,
    ln_len: Vec<f64>,
    /// `ln(len / A_mid)`: converts an angular difference quotient into a gradient component.
    ln_angular: Vec<f64>,
}

fn radial_cells(
    m: &ModelManifold,
    p_hint: f64,
    outer: OuterRadius,
    cells: usize,
    grading: Grading,
) -> Result<RadialCells> {
    if cells < 1 {
        return Err(DomainError::TooFewCells { min: 1, got: cells });
    }
    if let Some(q) = grading.ratio() {
        if !(q > 0.0 && q.is_finite()) {
            return Err(DomainError::InvalidGrading(q));
        }
    }
    let base = m.base_radius();
    let l0 = base.ln();
    let l_max = match outer {
        OuterRadius::Radius(r) => r.ln(),
        OuterRadius::LogRadius(l) => l,
    };
    if !(l_max > l0) || l_max.is_nan() {
        return Err(DomainError::InvalidRange {
            base,
            outer: l_max.exp(),
        });
    }
    let fractions = graded_fractions(cells, grading.ratio());
    let mut out = RadialCells {
        log_r: Vec::with_capacity(cells + 1),
        ln_weight: Vec::with_capacity(cells),
        ln_len: Vec::with_capacity(cells),
        ln_angular: Vec::with_capacity(cells),
    };
    if grading.is_logarithmic() {
        let span = l_max - l0;
        out.log_r.extend(fractions.iter().map(|t| l0 + span * t));
        *out.log_r.last_mut().expect("nonempty") = l_max;
        for i in 0..cells {
            let (a, b) = (out.log_r[i], out.log_r[i + 1]);
            let mid = 0.5 * (a + b);
            let ln_step = (b - a).ln();
            out.ln_weight
                .push(m.ln_radial_density(p_hint, mid)? + (1.0 - p_hint) * ln_step);
            out.ln_len.push(mid + ln_step);
            out.ln_angular.push(mid + ln_step - m.ln_area(mid)?);
        }
    } else {
        let r_max = l_max.exp();
        if !r_max.is_finite() {
            return Err(DomainError::InvalidRange { base, outer: r_max });
        }
        let radii: Vec<f64> = fractions.iter().map(|t| base + (r_max - base) * t).collect();
        out.log_r.extend(radii.iter().map(|r| r.ln()));
        out.log_r[0] = l0;
        out.log_r[cells] = l_max;
        for i in 0..cells {
            let (a, b) = (radii[i], radii[i + 1]);
            let ln_step = (b - a).ln();
            let ln_a = m.ln_area((0.5 * (a + b)).ln())?;
            out.ln_weight.push(ln_a + (1.0 - p_hint) * ln_step);
            out.ln_len.push(ln_step);
            out.ln_angular.push(ln_step - ln_a);
        }
    }
    if out.log_r.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(DomainError::InvalidRange {
            base,
            outer: l_max.exp(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DiscreteDomain {
    kind: DomainKind,
    nodes: Vec<Node>,
    cells: Vec<Cell>,
    p_hint: f64,
    rings: usize,
    angular: usize,
    /// CSR adjacency node -> incident cells.
    node_cell_offsets: Vec<usize>,
    node_cell_list: Vec<usize>,
}

impl DiscreteDomain {
    fn assemble(kind: DomainKind, nodes: Vec<Node>, cells: Vec<Cell>, p_hint: f64, rings: usize, angular: usize) -> Self {
        let mut counts = vec![0usize; nodes.len() + 1];
        for cell in &cells {
            for node in cell_nodes(cell) {
                counts[node + 1] += 1;
            }
        }
        for i in 0..nodes.len() {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut list = vec![0usize; counts[nodes.len()]];
        for (c, cell) in cells.iter().enumerate() {
            for node in cell_nodes(cell) {
                list[fill[node]] = c;
                fill[node] += 1;
            }
        }
        Self {
            kind,
            nodes,
            cells,
            p_hint,
            rings,
            angular,
            node_cell_offsets: counts,
            node_cell_list: list,
        }
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    /// Exponent the stored cell weights were computed for.
    pub fn p_hint(&self) -> f64 {
        self.p_hint
    }

    /// Number of radial node rings (`M + 1`).
    pub fn rings(&self) -> usize {
        self.rings
    }

    /// Angular resolution `M_θ` (1 for radial grids).
    pub fn angular(&self) -> usize {
        self.angular
    }

    pub fn theta_periodic(&self) -> bool {
        self.kind == DomainKind::Surface2d
    }

    /// Node index of ring `i`, angle index `k` (wrapping modulo `M_θ`).
    pub fn index(&self, ring: usize, k: usize) -> usize {
        ring * self.angular + k % self.angular
    }

    pub fn ring_of(&self, node: usize) -> usize {
        node / self.angular
    }

    pub fn ring_log_radius(&self, ring: usize) -> f64 {
        self.nodes[ring * self.angular].log_r
    }

    /// Cells touching `node`.
    pub fn node_cells(&self, node: usize) -> &[usize] {
        &self.node_cell_list[self.node_cell_offsets[node]..self.node_cell_offsets[node + 1]]
    }

    /// `vol_c / len_c^p` for every cell.
    pub fn cell_weights(&self, p: f64) -> Vec<f64> {
        let shift = self.p_hint - p;
        self.cells
            .iter()
            .map(|c| {
                if shift == 0.0 {
                    c.ln_weight.exp()
                } else {
                    (c.ln_weight + shift * c.ln_len).exp()
                }
            })
            .collect()
    }

    pub fn cell_volume(&self, cell: usize) -> f64 {
        let c = &self.cells[cell];
        (c.ln_weight + self.p_hint * c.ln_len).exp()
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.cells.len()).map(|c| self.cell_volume(c)).sum()
    }

    pub fn tagged(&self, tag: BoundaryTag) -> NodeSet {
        NodeSet::from_fn(self.len(), |i| self.nodes[i].tag == Some(tag))
    }

    pub fn inner_boundary(&self) -> NodeSet {
        self.tagged(BoundaryTag::Inner)
    }

    pub fn outer_boundary(&self) -> NodeSet {
        self.tagged(BoundaryTag::Outer)
    }

    /// Nodes on radial rings `first..=last`.
    pub fn rings_between(&self, first: usize, last: usize) -> NodeSet {
        NodeSet::from_fn(self.len(), |i| {
            let ring = self.ring_of(i);
            ring >= first && ring <= last
        })
    }

    /// Nodes of `region` whose every incident cell lies inside `region`,
    /// excluding the outer boundary ring.
    pub fn interior_of(&self, region: &NodeSet) -> NodeSet {
        NodeSet::from_fn(self.len(), |i| {
            region.contains(i)
                && self.nodes[i].tag != Some(BoundaryTag::Outer)
                && self
                    .node_cells(i)
                    .iter()
                    .all(|&c| cell_nodes(&self.cells[c]).all(|j| region.contains(j)))
        })
    }

    /// `region` minus its interior.
    pub fn boundary_of(&self, region: &NodeSet) -> NodeSet {
        region.difference(&self.interior_of(region))
    }

    /// Largest radial step as a fraction of the radial span, measured in `ln r`.
    pub fn mesh_size(&self) -> f64 {
        let span = self.ring_log_radius(self.rings - 1) - self.ring_log_radius(0);
        (0..self.rings - 1)
            .map(|i| self.ring_log_radius(i + 1) - self.ring_log_radius(i))
            .fold(0.0, f64::max)
            / span
    }

    pub fn field_from_fn(&self, f: impl Fn(&Node) -> f64) -> ScalarField {
        ScalarField {
            values: self.nodes.iter().map(f).collect(),
        }
    }

    pub fn constant_field(&self, c: f64) -> ScalarField {
        ScalarField {
            values: vec![c; self.len()],
        }
    }

    /// The exact discrete radial p-harmonic function anchored at ring 0.
    ///
    /// On a ring of cells with weight `w_i`, flux balance forces increments
    /// proportional to `w_i^{-1/(p-1)}`; normalising by the unit-sphere area
    /// gives the midpoint-rule quadrature of `f_{p,r̄}` on this grid. Values
    /// are per ring (length [`rings`](Self::rings)).
    pub fn radial_potential(&self, p: f64, sphere_area: f64) -> Vec<f64> {
        let weights = self.cell_weights(p);
        let mut out = Vec::with_capacity(self.rings);
        out.push(0.0);
        let mut acc = 0.0;
        for ring in 0..self.rings - 1 {
            // Radial weight summed around the ring.
            let w: f64 = (0..self.angular)
                .map(|k| weights[ring * self.angular + k])
                .sum();
            acc += (w / sphere_area).powf(-1.0 / (p - 1.0));
            out.push(acc);
        }
        out
    }

    /// Expands per-ring values to a node field.
    pub fn ring_field(&self, per_ring: &[f64]) -> ScalarField {
        assert_eq!(per_ring.len(), self.rings, "one value per ring");
        ScalarField {
            values: (0..self.len()).map(|i| per_ring[self.ring_of(i)]).collect(),
        }
    }

    /// Writes the node table `index,r,log_r,[theta,]tag,value`.
    pub fn write_node_csv<W: Write>(&self, field: &ScalarField, out: W) -> Result<()> {
        self.check_field(field)?;
        let mut w = csv::Writer::from_writer(out);
        let surface = self.kind == DomainKind::Surface2d;
        let mut header = vec!["index", "r", "log_r"];
        if surface {
            header.push("theta");
        }
        header.extend(["tag", "value"]);
        w.write_record(&header).map_err(csv_io)?;
        for (i, node) in self.nodes.iter().enumerate() {
            let mut row = vec![i.to_string(), fmt_f64(node.r()), fmt_f64(node.log_r)];
            if surface {
                row.push(fmt_f64(node.theta.unwrap_or(0.0)));
            }
            row.push(match node.tag {
                Some(BoundaryTag::Inner) => "inner".into(),
                Some(BoundaryTag::Outer) => "outer".into(),
                None => String::new(),
            });
            row.push(fmt_f64(field.values[i]));
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn check_field(&self, field: &ScalarField) -> Result<()> {
        if field.values.len() != self.len() {
            return Err(DomainError::FieldLength {
                expected: self.len(),
                got: field.values.len(),
            });
        }
        if let Some(node) = field.values.iter().position(|v| !v.is_finite()) {
            return Err(DomainError::NonFinite { node });
        }
        Ok(())
    }
}

fn cell_nodes(cell: &Cell) -> impl Iterator<Item = usize> + '_ {
    let mut seen = [usize::MAX; 4];
    let mut k = 0;
    for t in cell.terms() {
        for n in [t.from, t.to] {
            if !seen[..k].contains(&n) {
                seen[k] = n;
                k += 1;
            }
        }
    }
    seen.into_iter().take(k)
}

fn csv_io(e: csv::Error) -> DomainError {
    DomainError::Io(std::io::Error::other(e))
}

/// Shortest round-trip decimal representation; locale independent.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Radial grid on `[r̄, r_max]` with `cells` cells.
pub fn build_radial_grid(m: &ModelManifold, p_hint: f64, r_max: f64, cells: usize) -> Result<DiscreteDomain> {
    RadialGrid::new(OuterRadius::Radius(r_max), cells).build(m, p_hint)
}

/// Builder for radial and surface grids.
#[derive(Debug, Clone, Copy)]
pub struct RadialGrid {
    pub outer: OuterRadius,
    pub cells: usize,
    pub grading: Grading,
}

impl RadialGrid {
    pub const MIN_CELLS: usize = 8;

    pub fn new(outer: OuterRadius, cells: usize) -> Self {
        Self {
            outer,
            cells,
            grading: Grading::Uniform,
        }
    }

    pub fn graded(mut self, grading: Grading) -> Self {
        self.grading = grading;
        self
    }

    /// One-dimensional radial grid; node 0 is tagged inner and node `M` outer.
    pub fn build(&self, m: &ModelManifold, p_hint: f64) -> Result<DiscreteDomain> {
        if self.cells < Self::MIN_CELLS {
            return Err(DomainError::TooFewCells {
                min: Self::MIN_CELLS,
                got: self.cells,
            });
        }
        let rc = radial_cells(m, p_hint, self.outer, self.cells, self.grading)?;
        Ok(assemble_radial(&rc, m.sphere_area().ln(), p_hint))
    }

    /// Tensor grid in `(r, θ)` on a two-dimensional model, periodic in `θ`.
    pub fn build_surface(&self, m: &ModelManifold, p_hint: f64, angular: usize) -> Result<DiscreteDomain> {
        if m.dimension() != 2 {
            return Err(DomainError::UnsupportedDimension(m.dimension()));
        }
        if angular < 8 || !angular.is_multiple_of(2) {
            return Err(DomainError::InvalidAngularResolution(angular));
        }
        if self.cells < Self::MIN_CELLS {
            return Err(DomainError::TooFewCells {
                min: Self::MIN_CELLS,
                got: self.cells,
            });
        }
        let rc = radial_cells(m, p_hint, self.outer, self.cells, self.grading)?;
        Ok(assemble_surface(&rc, angular, p_hint))
    }
}

/// Same cell formulas as [`RadialGrid::build`] but without the minimum cell count.
pub fn build_radial_grid_unchecked(
    m: &ModelManifold,
    p_hint: f64,
    outer: OuterRadius,
    cells: usize,
    grading: Grading,
) -> Result<DiscreteDomain> {
    let rc = radial_cells(m, p_hint, outer, cells, grading)?;
    Ok(assemble_radial(&rc, m.sphere_area().ln(), p_hint))
}

fn assemble_radial(rc: &RadialCells, ln_omega: f64, p_hint: f64) -> DiscreteDomain {
    let m = rc.ln_weight.len();
    let nodes: Vec<Node> = rc
        .log_r
        .iter()
        .enumerate()
        .map(|(i, &log_r)| Node {
            log_r,
            theta: None,
            tag: if i == 0 {
                Some(BoundaryTag::Inner)
            } else if i == m {
                Some(BoundaryTag::Outer)
            } else {
                None
            },
        })
        .collect();
    let none = Term {
        from: 0,
        to: 0,
        scale: 0.0,
    };
    let cells: Vec<Cell> = (0..m)
        .map(|i| Cell {
            terms: [
                Term {
                    from: i,
                    to: i + 1,
                    scale: 1.0,
                },
                none,
            ],
            n_terms: 1,
            ln_weight: ln_omega + rc.ln_weight[i],
            ln_len: rc.ln_len[i],
        })
        .collect();
    DiscreteDomain::assemble(DomainKind::Radial1d, nodes, cells, p_hint, m + 1, 1)
}

fn assemble_surface(rc: &RadialCells, angular: usize, p_hint: f64) -> DiscreteDomain {
    let m = rc.ln_weight.len();
    let dtheta = 2.0 * std::f64::consts::PI / angular as f64;
    let ln_dtheta = dtheta.ln();
    let mut nodes = Vec::with_capacity((m + 1) * angular);
    for (i, &log_r) in rc.log_r.iter().enumerate() {
        for k in 0..angular {
            nodes.push(Node {
                log_r,
                theta: Some(k as f64 * dtheta),
                tag: if i == 0 {
                    Some(BoundaryTag::Inner)
                } else if i == m {
                    Some(BoundaryTag::Outer)
                } else {
                    None
                },
            });
        }
    }
    let idx = |ring: usize, k: usize| ring * angular + k % angular;
    let mut cells = Vec::with_capacity(m * angular);
    for i in 0..m {
        let angular_scale = (rc.ln_angular[i] - ln_dtheta).exp();
        for k in 0..angular {
            cells.push(Cell {
                terms: [
                    Term {
                        from: idx(i, k),
                        to: idx(i + 1, k),
                        scale: 1.0,
                    },
                    Term {
                        from: idx(i, k),
                        to: idx(i, k + 1),
                        scale: angular_scale,
                    },
                ],
                n_terms: 2,
                ln_weight: ln_dtheta + rc.ln_weight[i],
                ln_len: rc.ln_len[i],
            });
        }
    }
    DiscreteDomain::assemble(DomainKind::Surface2d, nodes, cells, p_hint, m + 1, angular)
}

/// Surface grid on `[r̄, r_max] × S¹` with `M_r` radial cells and `M_θ` angles.
pub fn build_surface_grid(
    m: &ModelManifold,
    p_hint: f64,
    r_max: f64,
    radial_cells: usize,
    angular: usize,
) -> Result<DiscreteDomain> {
    RadialGrid::new(OuterRadius::Radius(r_max), radial_cells).build_surface(m, p_hint, angular)
}

/// Node-indexed real values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarField {
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(domain: &DiscreteDomain, values: Vec<f64>) -> Result<Self> {
        let field = Self { values };
        domain.check_field(&field)?;
        Ok(field)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest value over the nodes of `set`.
    pub fn max_on(&self, set: &NodeSet) -> f64 {
        set.iter().map(|i| self.values[i]).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_on(&self, set: &NodeSet) -> f64 {
        set.iter().map(|i| self.values[i]).fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.len(), other.len(), "fields over different domains");
        Self {
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `{i : u_i ≤ t}`, or `{i : u_i < t}` when `strict`.
pub fn sublevel_region(u: &ScalarField, t: f64, strict: bool) -> NodeSet {
    NodeSet::from_fn(u.len(), |i| if strict { u.values[i] < t } else { u.values[i] <= t })
}

/// Subset of the nodes of a domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSet {
    mask: Vec<bool>,
}

impl NodeSet {
    pub fn empty(n: usize) -> Self {
        Self { mask: vec![false; n] }
    }

    pub fn full(n: usize) -> Self {
        Self { mask: vec![true; n] }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize) -> bool) -> Self {
        Self {
            mask: (0..n).map(f).collect(),
        }
    }

    pub fn from_indices(n: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(n);
        for i in indices {
            s.mask[i] = true;
        }
        s
    }

    pub fn universe_len(&self) -> usize {
        self.mask.len()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn insert(&mut self, i: usize) {
        self.mask[i] = true;
    }

    pub fn remove(&mut self, i: usize) {
        self.mask[i] = false;
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&b| b)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn as_mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn union(&self, other: &Self) -> Self {
        self.combine(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Self {
        self.combine(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &Self) -> Self {
        self.combine(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> Self {
        Self {
            mask: self.mask.iter().map(|&b| !b).collect(),
        }
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.mask.iter().zip(&other.mask).all(|(&a, &b)| !a || b)
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.mask.iter().zip(&other.mask).all(|(&a, &b)| !(a && b))
    }

    fn combine(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        assert_eq!(self.mask.len(), other.mask.len(), "node sets over different domains");
        Self {
            mask: self.mask.iter().zip(&other.mask).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// Strictly nested node sets `D_0 ⊂ D_1 ⊂ … ⊂ D_N` ending with the whole domain.
///
/// Stored as the index of the first region containing each node, so long
/// exhaustions (one region per ring) stay linear in the grid size.
#[derive(Debug, Clone)]
pub struct Exhaustion {
    rank: Vec<usize>,
    levels: usize,
}

impl Exhaustion {
    pub fn new(domain: &DiscreteDomain, sets: Vec<NodeSet>) -> Result<Self> {
        let Some(first) = sets.first() else {
            return Err(DomainError::NotCovering);
        };
        if !domain.inner_boundary().is_subset(first) {
            return Err(DomainError::MissingInner);
        }
        for (k, w) in sets.windows(2).enumerate() {
            if !(w[0].is_subset(&w[1]) && w[0] != w[1]) {
                return Err(DomainError::NotNested(k + 1));
            }
        }
        if sets.last().map(|s| s.count()) != Some(domain.len()) {
            return Err(DomainError::NotCovering);
        }
        let mut rank = vec![usize::MAX; domain.len()];
        for (k, set) in sets.iter().enumerate().rev() {
            for i in set.iter() {
                rank[i] = k;
            }
        }
        Ok(Self { rank, levels: sets.len() })
    }

    /// `D_k = {i : rank[i] ≤ k}`. Every rank in `0..levels` must occur.
    pub fn from_ranks(domain: &DiscreteDomain, rank: Vec<usize>) -> Result<Self> {
        if rank.len() != domain.len() {
            return Err(DomainError::FieldLength {
                expected: domain.len(),
                got: rank.len(),
            });
        }
        let levels = rank.iter().max().map_or(0, |&m| m + 1);
        let mut seen = vec![false; levels];
        for &k in &rank {
            seen[k] = true;
        }
        if let Some(k) = seen.iter().position(|&s| !s) {
            return Err(DomainError::NotNested(k));
        }
        if domain.inner_boundary().iter().any(|i| rank[i] != 0) {
            return Err(DomainError::MissingInner);
        }
        Ok(Self { rank, levels })
    }

    /// `D_k` = nodes on rings `0..=ring_k`; the final set is always the whole grid.
    pub fn by_rings(domain: &DiscreteDomain, last_rings: &[usize]) -> Result<Self> {
        let mut sets: Vec<NodeSet> = last_rings
            .iter()
            .map(|&r| domain.rings_between(0, r.min(domain.rings() - 1)))
            .collect();
        if sets.last().map(|s| s.count()) != Some(domain.len()) {
            sets.push(NodeSet::full(domain.len()));
        }
        Self::new(domain, sets)
    }

    /// One region per ring: `D_k` = rings `0..=k`.
    pub fn every_ring(domain: &DiscreteDomain) -> Self {
        let rank = (0..domain.len()).map(|i| domain.ring_of(i)).collect();
        Self {
            rank,
            levels: domain.rings(),
        }
    }

    /// `D_k = {u ≤ t_k}` for increasing levels, closed off by the whole grid.
    pub fn by_sublevels(domain: &DiscreteDomain, u: &ScalarField, levels: &[f64]) -> Result<Self> {
        let mut sets: Vec<NodeSet> = levels.iter().map(|&t| sublevel_region(u, t, false)).collect();
        if sets.last().map(|s| s.count()) != Some(domain.len()) {
            sets.push(NodeSet::full(domain.len()));
        }
        Self::new(domain, sets)
    }

    pub fn len(&self) -> usize {
        self.levels
    }

    pub fn is_empty(&self) -> bool {
        self.levels == 0
    }

    pub fn rank(&self, node: usize) -> usize {
        self.rank[node]
    }

    pub fn level(&self, k: usize) -> NodeSet {
        assert!(k < self.levels, "exhaustion level {k} out of range");
        NodeSet::from_fn(self.rank.len(), |i| self.rank[i] <= k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{LN_2, PI};

    #[test]
    fn single_cell_uses_midpoint_volume() {
        let m = ModelManifold::euclidean(2);
        let d = build_radial_grid_unchecked(&m, 2.0, OuterRadius::Radius(2.0), 1, Grading::Uniform).unwrap();
        assert!((d.cell_volume(0) - 2.0 * PI * 1.5).abs() < 1e-12);
        assert!(matches!(
            build_radial_grid(&m, 2.0, 2.0, 4),
            Err(DomainError::TooFewCells { .. })
        ));
        assert!(matches!(
            build_radial_grid(&m, 2.0, 1.0, 16),
            Err(DomainError::InvalidRange { .. })
        ));
    }

    #[test]
    fn total_volume_of_annulus() {
        let m = ModelManifold::euclidean(2);
        let d = build_radial_grid(&m, 2.0, 2.0, 4096).unwrap();
        assert!((d.total_volume() - 3.0 * PI).abs() / (3.0 * PI) < 1e-4);
        assert!(d.nodes().windows(2).all(|w| w[1].log_r > w[0].log_r));
        assert_eq!(d.node(0).tag, Some(BoundaryTag::Inner));
        assert_eq!(d.node(4096).tag, Some(BoundaryTag::Outer));
    }

    #[test]
    fn gradings_are_monotone_and_hit_the_ends() {
        let m = ModelManifold::euclidean(2);
        for g in [
            Grading::Uniform,
            Grading::Geometric(1.01),
            Grading::Logarithmic,
            Grading::LogGeometric(1.05),
            Grading::LogGeometric(0.97),
        ] {
            let d = RadialGrid::new(OuterRadius::Radius(5.0), 200).graded(g).build(&m, 2.0).unwrap();
            assert_eq!(d.node(0).log_r, 0.0);
            assert!((d.node(200).log_r - 5f64.ln()).abs() < 1e-15);
            assert!(d.nodes().windows(2).all(|w| w[1].log_r > w[0].log_r), "{g:?}");
            assert!((d.total_volume() - 24.0 * PI).abs() / (24.0 * PI) < 1e-3, "{g:?}");
        }
    }

    #[test]
    fn huge_logarithmic_range_keeps_finite_weights() {
        let m = ModelManifold::euclidean(2);
        let d = RadialGrid::new(OuterRadius::LogRadius(1e80), 2000)
            .graded(Grading::LogGeometric(1.1))
            .build(&m, 2.0)
            .unwrap();
        let w = d.cell_weights(2.0);
        assert!(w.iter().all(|x| x.is_finite() && *x > 0.0));
        // p = n makes the radial problem conformal: weights are 2π/Δℓ.
        for (i, wi) in w.iter().enumerate() {
            let dl = d.node(i + 1).log_r - d.node(i).log_r;
            assert!((wi * dl / (2.0 * PI) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn radial_potential_is_midpoint_quadrature() {
        let m = ModelManifold::euclidean(3);
        let d = build_radial_grid(&m, 2.0, 2.0, 64).unwrap();
        let f = d.radial_potential(2.0, m.sphere_area());
        let mut expect = 0.0;
        for i in 0..64 {
            let (a, b) = (d.node(i).r(), d.node(i + 1).r());
            let mid = 0.5 * (a + b);
            expect += (b - a) / (mid * mid);
            assert!((f[i + 1] - expect).abs() < 1e-13);
        }
        assert!((f[64] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn surface_grid_structure() {
        let m = ModelManifold::euclidean(2);
        let d = build_surface_grid(&m, 2.0, 2.0, 16, 8).unwrap();
        assert_eq!(d.len(), 17 * 8);
        assert_eq!(d.index(3, 8), d.index(3, 0));
        assert!((d.total_volume() - 3.0 * PI).abs() / (3.0 * PI) < 1e-2);
        assert!(matches!(
            build_surface_grid(&ModelManifold::euclidean(3), 2.0, 2.0, 16, 8),
            Err(DomainError::UnsupportedDimension(3))
        ));
        assert!(matches!(
            build_surface_grid(&m, 2.0, 2.0, 16, 7),
            Err(DomainError::InvalidAngularResolution(7))
        ));
        // An interior node touches its own cell, the one below and the one to its left.
        assert_eq!(d.node_cells(d.index(5, 3)).len(), 3);
    }

    #[test]
    fn surface_weights_sum_to_radial_weights() {
        let m = ModelManifold::power(2, 1.5);
        let radial = build_radial_grid(&m, 3.0, 3.0, 32).unwrap();
        let surface = build_surface_grid(&m, 3.0, 3.0, 32, 16).unwrap();
        let wr = radial.cell_weights(3.0);
        let ws = surface.cell_weights(3.0);
        for i in 0..32 {
            let ring: f64 = ws[i * 16..(i + 1) * 16].iter().sum();
            assert!((ring / wr[i] - 1.0).abs() < 1e-12);
        }
        let fr = radial.radial_potential(3.0, m.sphere_area());
        let fs = surface.radial_potential(3.0, m.sphere_area());
        for (a, b) in fr.iter().zip(&fs) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn sublevels_and_exhaustions() {
        let m = ModelManifold::euclidean(2);
        let d = build_radial_grid(&m, 2.0, 2.0, 16).unwrap();
        let zero = d.constant_field(0.0);
        assert_eq!(sublevel_region(&zero, 1.0, false).count(), 17);
        let u = d.field_from_fn(|n| n.log_r);
        let at = u.values[5];
        assert_eq!(sublevel_region(&u, at, false).count(), 6);
        assert_eq!(sublevel_region(&u, at, true).count(), 5);
        let ex = Exhaustion::by_sublevels(&d, &u, &[0.2, 0.4]).unwrap();
        assert_eq!(ex.len(), 3);
        assert!(Exhaustion::new(&d, vec![NodeSet::full(17), NodeSet::full(17)]).is_err());
        assert!(matches!(
            Exhaustion::new(&d, vec![d.rings_between(1, 3), NodeSet::full(17)]),
            Err(DomainError::MissingInner)
        ));
        assert!((u.max() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn node_table_layout() {
        let m = ModelManifold::euclidean(2);
        let d = build_surface_grid(&m, 2.0, 2.0, 8, 8).unwrap();
        let f = d.constant_field(0.5);
        let mut buf = Vec::new();
        d.write_node_csv(&f, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("index,r,log_r,theta,tag,value"));
        assert_eq!(lines.next(), Some("0,1.0,0.0,0.0,inner,0.5"));
        assert!(ScalarField::new(&d, vec![0.0; 3]).is_err());
        assert!(ScalarField::new(&d, vec![f64::NAN; d.len()]).is_err());
    }
}
