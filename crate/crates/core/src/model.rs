//! Rotationally symmetric model manifolds.
//!
//! A model is described by its radial area function `A(r)` (the area of the
//! geodesic sphere of radius `r` divided by the unit-sphere area `ω_{n-1}`).
//! Every radial quantity is integrated in the logarithmic variable `ℓ = ln r`,
//! which keeps integrands bounded on very long radial ranges.
//!
//! The radial p-harmonic function anchored at `a` is
//! `f_{p,a}(b) = ∫_a^b A(t)^{-1/(p-1)} dt`; the model is p-parabolic exactly
//! when `f_{p,a}(∞) = ∞`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::quadrature::{integrate, integrate_to_infinity, QuadError, QuadOptions};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("exponent p must satisfy p > 1, got {0}")]
    InvalidExponent(f64),
    #[error("radius {r} lies below the base radius {base}")]
    BelowBaseRadius { r: f64, base: f64 },
    #[error("radial integrand diverged: {0}")]
    DivergedIntegrand(#[from] QuadError),
    #[error("radius {r} lies outside the area table [{min}, {max}]")]
    OutsideTable { r: f64, min: f64, max: f64 },
    #[error("invalid annulus: inner radius {a} must be below outer radius {b}")]
    InvalidAnnulus { a: f64, b: f64 },
    #[error("no Evans potential: the model is not {0}-parabolic")]
    EvansUndefined(f64),
    #[error("parabolicity is inconclusive for this area function")]
    Inconclusive,
    #[error("radial identity violated at level {t}: {what} relative error {rel_error:e}")]
    IdentityViolated { t: f64, what: &'static str, rel_error: f64 },
    #[error("invalid model specification: {0}")]
    Parse(String),
    #[error("invalid area table: {0}")]
    Table(String),
    #[error("cannot read area table: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Area of the unit sphere `S^{n-1}` in `R^n`: `2 π^{n/2} / Γ(n/2)`.
pub fn unit_sphere_area(n: usize) -> f64 {
    assert!(n >= 1);
    let pi = std::f64::consts::PI;
    // Γ(n/2) through the integer and half-integer recurrences.
    let gamma_half_n = if n.is_multiple_of(2) {
        (1..n / 2).map(|k| k as f64).product::<f64>()
    } else {
        let mut g = pi.sqrt();
        let mut x = 0.5;
        while x < n as f64 / 2.0 - 0.25 {
            g *= x;
            x += 1.0;
        }
        g
    };
    2.0 * pi.powf(n as f64 / 2.0) / gamma_half_n
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Sampled area function, interpolated monotonically in `(ln r, ln A)`.
#[derive(Debug, Clone)]
pub struct AreaTable {
    log_r: Vec<f64>,
    log_a: Vec<f64>,
    slopes: Vec<f64>,
}

impl AreaTable {
    pub fn new(radii: &[f64], areas: &[f64]) -> Result<Self> {
        if radii.len() != areas.len() {
            return Err(ModelError::Table("column lengths differ".into()));
        }
        if radii.len() < 2 {
            return Err(ModelError::Table("at least two rows are required".into()));
        }
        if radii.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(ModelError::Table("radii must be positive and finite".into()));
        }
        if areas.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(ModelError::Table("areas must be positive and finite".into()));
        }
        if radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ModelError::Table("radii must be strictly increasing".into()));
        }
        let log_r: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
        let log_a: Vec<f64> = areas.iter().map(|a| a.ln()).collect();
        let slopes = pchip_slopes(&log_r, &log_a);
        Ok(Self { log_r, log_a, slopes })
    }

    /// Reads a two-column `r,A` CSV file with a header row.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path.as_ref())
            .map_err(|e| ModelError::Table(e.to_string()))?;
        let mut radii = Vec::new();
        let mut areas = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| ModelError::Table(e.to_string()))?;
            if record.len() != 2 {
                return Err(ModelError::Table(format!("row {} must have two columns", line + 2)));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| ModelError::Table(format!("row {}: cannot parse {s:?}", line + 2)))
            };
            radii.push(parse(&record[0])?);
            areas.push(parse(&record[1])?);
        }
        Self::new(&radii, &areas)
    }

    pub fn min_radius(&self) -> f64 {
        self.log_r[0].exp()
    }

    pub fn max_radius(&self) -> f64 {
        self.log_r[self.log_r.len() - 1].exp()
    }

    fn ln_area(&self, log_r: f64) -> Result<f64> {
        let n = self.log_r.len();
        let (lo, hi) = (self.log_r[0], self.log_r[n - 1]);
        // Allow the endpoints to be hit up to round-off from exp/ln round trips.
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        if !(log_r >= lo - slack && log_r <= hi + slack) {
            return Err(ModelError::OutsideTable {
                r: log_r.exp(),
                min: lo.exp(),
                max: hi.exp(),
            });
        }
        let x = log_r.clamp(lo, hi);
        let k = match self.log_r.partition_point(|&v| v <= x) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        };
        let h = self.log_r[k + 1] - self.log_r[k];
        let t = (x - self.log_r[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        Ok(h00 * self.log_a[k]
            + h10 * h * self.slopes[k]
            + h01 * self.log_a[k + 1]
            + h11 * h * self.slopes[k + 1])
    }
}

/// Fritsch–Carlson slopes for a shape-preserving cubic Hermite interpolant.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0], delta[0]];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    let edge = |h0: f64, h1: f64, m0: f64, m1: f64| {
        let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if d.signum() != m0.signum() {
            0.0
        } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
            3.0 * m0
        } else {
            d
        }
    };
    d[0] = edge(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = edge(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

/// Closed-form or tabulated area function.
#[derive(Debug, Clone)]
pub enum AreaForm {
    /// `A(r) = r^{n-1}`.
    Euclidean,
    /// `A(r) = sinh(r)^{n-1}`.
    Hyperbolic,
    /// `A(r) = r^α`.
    Power { alpha: f64 },
    /// `A(r) = r^α (ln(1 + r))^β`.
    LogPower { alpha: f64, beta: f64 },
    Table(AreaTable),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Parabolicity {
    Parabolic,
    Nonparabolic,
    Inconclusive,
}

impl fmt::Display for Parabolicity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parabolicity::Parabolic => "parabolic",
            Parabolicity::Nonparabolic => "nonparabolic",
            Parabolicity::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParabolicityReport {
    pub verdict: Parabolicity,
    pub p: f64,
    /// Cutoff radius `R_max` (as `ln R_max`) used for the numerical evidence.
    pub cutoff_log_radius: f64,
    /// `f_{p,r̄}(R_max)`.
    pub f_at_cutoff: f64,
    /// Extrapolated `f(∞) - f(R_max)`; `None` when the increments do not decay.
    pub tail_estimate: Option<f64>,
    /// Symbolic exponent test, when the area function has a closed form.
    pub exponent_test: Option<String>,
}

/// A radial function sampled on an increasing grid.
#[derive(Debug, Clone, Serialize)]
pub struct RadialProfile {
    pub p: f64,
    pub log_radii: Vec<f64>,
    pub values: Vec<f64>,
}

impl RadialProfile {
    pub fn radii(&self) -> impl Iterator<Item = f64> + '_ {
        self.log_radii.iter().map(|l| l.exp())
    }
}

/// Quadrature checks of the radial Evans identities at one level `t`.
#[derive(Debug, Clone, Serialize)]
pub struct EvansLevel {
    pub t: f64,
    /// `ln R(t)` where `E(R(t)) = t`.
    pub log_radius: f64,
    /// `∫_{E ≤ t} |∇E|^p dV`.
    pub energy: f64,
    /// `ω_{n-1} t`.
    pub expected_energy: f64,
    /// `cap_p(B_r̄, {E < t})`; undefined at `t = 0`.
    pub capacity: Option<f64>,
    /// `ω_{n-1} t^{1-p}`.
    pub expected_capacity: Option<f64>,
    pub energy_rel_error: f64,
    pub capacity_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RadialEvans {
    pub profile: RadialProfile,
    pub levels: Vec<EvansLevel>,
}

#[derive(Debug, Clone)]
pub struct ModelManifold {
    dimension: usize,
    form: AreaForm,
    base_radius: f64,
    quad_tol: f64,
}

impl ModelManifold {
    fn with_form(dimension: usize, form: AreaForm) -> Self {
        assert!(dimension >= 2, "model manifolds have dimension n >= 2");
        Self {
            dimension,
            form,
            base_radius: 1.0,
            quad_tol: 1e-10,
        }
    }

    pub fn euclidean(dimension: usize) -> Self {
        Self::with_form(dimension, AreaForm::Euclidean)
    }

    pub fn hyperbolic(dimension: usize) -> Self {
        Self::with_form(dimension, AreaForm::Hyperbolic)
    }

    pub fn power(dimension: usize, alpha: f64) -> Self {
        Self::with_form(dimension, AreaForm::Power { alpha })
    }

    pub fn log_power(dimension: usize, alpha: f64, beta: f64) -> Self {
        Self::with_form(dimension, AreaForm::LogPower { alpha, beta })
    }

    /// Tabulated model. The base radius defaults to the first table radius.
    pub fn from_table(dimension: usize, table: AreaTable) -> Self {
        let base = table.min_radius();
        let mut m = Self::with_form(dimension, AreaForm::Table(table));
        m.base_radius = base;
        m
    }

    pub fn with_base_radius(mut self, base_radius: f64) -> Self {
        assert!(base_radius > 0.0 && base_radius.is_finite(), "base radius must be positive");
        self.base_radius = base_radius;
        self
    }

    pub fn with_quad_tol(mut self, quad_tol: f64) -> Self {
        assert!(quad_tol > 0.0, "quadrature tolerance must be positive");
        self.quad_tol = quad_tol;
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn form(&self) -> &AreaForm {
        &self.form
    }

    pub fn base_radius(&self) -> f64 {
        self.base_radius
    }

    pub fn quad_tol(&self) -> f64 {
        self.quad_tol
    }

    /// `ω_{n-1}`, the factor carried by every volume integral.
    pub fn sphere_area(&self) -> f64 {
        unit_sphere_area(self.dimension)
    }

    /// `ln A(e^ℓ)`.
    pub fn ln_area(&self, log_r: f64) -> Result<f64> {
        let k = (self.dimension - 1) as f64;
        Ok(match &self.form {
            AreaForm::Euclidean => k * log_r,
            AreaForm::Hyperbolic => {
                let r = log_r.exp();
                let ln_sinh = if r > 1.0 {
                    r + (-(-2.0 * r).exp()).ln_1p() - std::f64::consts::LN_2
                } else {
                    r.sinh().ln()
                };
                k * ln_sinh
            }
            AreaForm::Power { alpha } => alpha * log_r,
            AreaForm::LogPower { alpha, beta } => alpha * log_r + beta * softplus(log_r).ln(),
            AreaForm::Table(table) => table.ln_area(log_r)?,
        })
    }

    /// `ln(A(r) r^{1-p})` at `r = e^ℓ`. Power-law forms combine the exponents
    /// before multiplying by `ℓ`, so the p = n Euclidean case stays exact at any radius.
    pub fn ln_radial_density(&self, p: f64, log_r: f64) -> Result<f64> {
        let k = (self.dimension - 1) as f64;
        Ok(match &self.form {
            AreaForm::Euclidean => (k + 1.0 - p) * log_r,
            AreaForm::Power { alpha } => (alpha + 1.0 - p) * log_r,
            AreaForm::LogPower { alpha, beta } => (alpha + 1.0 - p) * log_r + beta * softplus(log_r).ln(),
            _ => self.ln_area(log_r)? + (1.0 - p) * log_r,
        })
    }

    pub fn area(&self, r: f64) -> Result<f64> {
        Ok(self.ln_area(r.ln())?.exp())
    }

    fn check_p(p: f64) -> Result<()> {
        if p > 1.0 && p.is_finite() {
            Ok(())
        } else {
            Err(ModelError::InvalidExponent(p))
        }
    }

    fn quad_opts(&self) -> QuadOptions {
        QuadOptions::with_rel_tol(self.quad_tol)
    }

    /// Integrand of `f_{p,·}` in the logarithmic variable: `r A(r)^{-1/(p-1)}`.
    fn log_integrand(&self, p: f64, log_r: f64) -> f64 {
        match self.ln_area(log_r) {
            Ok(ln_a) => (log_r - ln_a / (p - 1.0)).exp(),
            Err(_) => f64::NAN,
        }
    }

    /// `f_{p,a}(b)` with `a = e^{log_a}`, `b = e^{log_b}`.
    pub fn radial_integral_log(&self, p: f64, log_a: f64, log_b: f64) -> Result<f64> {
        Self::check_p(p)?;
        if log_b < log_a {
            return Err(ModelError::InvalidAnnulus {
                a: log_a.exp(),
                b: log_b.exp(),
            });
        }
        // Surface table-range violations as such rather than as a quadrature failure.
        self.ln_area(log_a)?;
        self.ln_area(log_b)?;
        let q = integrate(|l| self.log_integrand(p, l), log_a, log_b, self.quad_opts())?;
        Ok(q.value)
    }

    /// `f_{p,r̄}(r)`.
    pub fn radial_p_harmonic(&self, p: f64, r: f64) -> Result<f64> {
        Self::check_p(p)?;
        if !(r >= self.base_radius) {
            return Err(ModelError::BelowBaseRadius {
                r,
                base: self.base_radius,
            });
        }
        self.radial_integral_log(p, self.base_radius.ln(), r.ln())
    }

    /// `f_{p,r̄}(∞)`, or `None` when it diverges.
    fn radial_integral_to_infinity(&self, p: f64, log_a: f64) -> Result<Option<f64>> {
        match self.classify_parabolicity(p)?.verdict {
            Parabolicity::Parabolic => Ok(None),
            Parabolicity::Inconclusive => Err(ModelError::Inconclusive),
            Parabolicity::Nonparabolic => {
                let q = integrate_to_infinity(
                    |l| self.log_integrand(p, l),
                    log_a,
                    // The mapped integrand can carry an endpoint singularity; loosen slightly.
                    QuadOptions {
                        max_intervals: 100_000,
                        ..self.quad_opts()
                    },
                )?;
                Ok(Some(q.value))
            }
        }
    }

    fn exponent_test(&self, p: f64) -> Option<(Parabolicity, String)> {
        let q = p - 1.0;
        let n = self.dimension as f64;
        let verdict = |diverges: bool| {
            if diverges {
                Parabolicity::Parabolic
            } else {
                Parabolicity::Nonparabolic
            }
        };
        match &self.form {
            AreaForm::Euclidean => {
                let a = (n - 1.0) / q;
                Some((verdict(a <= 1.0), format!("integrand ~ r^(-{a}); diverges iff (n-1)/(p-1) <= 1")))
            }
            AreaForm::Power { alpha } => {
                let a = alpha / q;
                Some((verdict(a <= 1.0), format!("integrand ~ r^(-{a}); diverges iff alpha/(p-1) <= 1")))
            }
            AreaForm::LogPower { alpha, beta } => {
                let a = alpha / q;
                let b = beta / q;
                let diverges = a < 1.0 || (a == 1.0 && b <= 1.0);
                Some((
                    verdict(diverges),
                    format!("integrand ~ r^(-{a}) (ln r)^(-{b}); diverges iff a < 1 or (a = 1 and b <= 1)"),
                ))
            }
            AreaForm::Hyperbolic => Some((
                Parabolicity::Nonparabolic,
                format!("integrand ~ exp(-{} r / (p-1)); always converges", n - 1.0),
            )),
            AreaForm::Table(_) => None,
        }
    }

    /// Decides whether `f_{p,r̄}(∞) = ∞`.
    pub fn classify_parabolicity(&self, p: f64) -> Result<ParabolicityReport> {
        Self::check_p(p)?;
        let log_base = self.base_radius.ln();
        let cutoff = match &self.form {
            AreaForm::Table(t) => t.max_radius().ln(),
            AreaForm::Hyperbolic => (self.base_radius + 40.0).ln(),
            _ => log_base + 6.0 * std::f64::consts::LN_10,
        };
        if cutoff <= log_base {
            return Err(ModelError::OutsideTable {
                r: self.base_radius,
                min: self.base_radius,
                max: cutoff.exp(),
            });
        }
        // Increments of f over three equal blocks in ln r ending at the cutoff.
        let block = (cutoff - log_base) / 3.0;
        let marks = [log_base, log_base + block, log_base + 2.0 * block, cutoff];
        let mut increments = [0.0; 3];
        for k in 0..3 {
            increments[k] = self.radial_integral_log(p, marks[k], marks[k + 1])?;
        }
        let f_at_cutoff: f64 = increments.iter().sum();
        let ratio = increments[2] / increments[1];
        let tail_estimate = if ratio.is_finite() && ratio < 1.0 {
            Some(increments[2] * ratio / (1.0 - ratio))
        } else {
            None
        };
        let (verdict, exponent_test) = match self.exponent_test(p) {
            Some((v, s)) => (v, Some(s)),
            None => (Parabolicity::Inconclusive, None),
        };
        Ok(ParabolicityReport {
            verdict,
            p,
            cutoff_log_radius: cutoff,
            f_at_cutoff,
            tail_estimate,
            exponent_test,
        })
    }

    /// `cap_p(B_a, B_b) = ω_{n-1} f_{p,a}(b)^{1-p}`.
    pub fn annulus_capacity(&self, p: f64, a: f64, b: f64) -> Result<f64> {
        if !(a < b) {
            return Err(ModelError::InvalidAnnulus { a, b });
        }
        if !(a >= self.base_radius) {
            return Err(ModelError::BelowBaseRadius {
                r: a,
                base: self.base_radius,
            });
        }
        self.annulus_capacity_log(p, a.ln(), b.ln())
    }

    /// Annulus capacity with radii given as logarithms.
    pub fn annulus_capacity_log(&self, p: f64, log_a: f64, log_b: f64) -> Result<f64> {
        if !(log_a < log_b) {
            return Err(ModelError::InvalidAnnulus {
                a: log_a.exp(),
                b: log_b.exp(),
            });
        }
        let f = self.radial_integral_log(p, log_a, log_b)?;
        Ok(self.sphere_area() * f.powf(1.0 - p))
    }

    /// `cap_p(B_a)` relative to the whole manifold; zero in the parabolic case.
    pub fn capacity_to_infinity(&self, p: f64, a: f64) -> Result<f64> {
        Self::check_p(p)?;
        if !(a >= self.base_radius) {
            return Err(ModelError::BelowBaseRadius {
                r: a,
                base: self.base_radius,
            });
        }
        Ok(match self.radial_integral_to_infinity(p, a.ln())? {
            None => 0.0,
            Some(f) => self.sphere_area() * f.powf(1.0 - p),
        })
    }

    /// Solves `f_{p,r̄}(R) = t` for `ln R` by safeguarded Newton iteration.
    fn evans_level_radius(&self, p: f64, t: f64) -> Result<f64> {
        let l0 = self.base_radius.ln();
        if t == 0.0 {
            return Ok(l0);
        }
        let f = |l: f64| self.radial_integral_log(p, l0, l);
        let mut lo = l0;
        let mut hi = l0 + 1.0;
        let mut f_hi = f(hi)?;
        while f_hi < t {
            lo = hi;
            hi = l0 + 2.0 * (hi - l0);
            f_hi = f(hi)?;
        }
        let mut l = 0.5 * (lo + hi);
        for _ in 0..200 {
            let value = f(l)? - t;
            if value.abs() <= 1e-14 * t {
                break;
            }
            if value > 0.0 {
                hi = l;
            } else {
                lo = l;
            }
            let slope = self.log_integrand(p, l);
            let newton = l - value / slope;
            l = if newton > lo && newton < hi && slope.is_finite() {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= 4.0 * f64::EPSILON * hi.abs().max(1.0) {
                break;
            }
        }
        Ok(l)
    }

    /// The radial Evans potential `E_{r̄} = f_{p,r̄}` with quadrature checks of
    /// `∫_{E≤t} |∇E|^p dV = ω t` and `cap_p(B_r̄, {E < t}) = ω t^{1-p}`.
    pub fn radial_evans(&self, p: f64, levels: &[f64], samples: usize) -> Result<RadialEvans> {
        Self::check_p(p)?;
        if self.classify_parabolicity(p)?.verdict != Parabolicity::Parabolic {
            return Err(ModelError::EvansUndefined(p));
        }
        let omega = self.sphere_area();
        let l0 = self.base_radius.ln();
        let mut out = Vec::with_capacity(levels.len());
        for &t in levels {
            assert!(t >= 0.0 && t.is_finite(), "Evans levels must be finite and nonnegative");
            let log_radius = self.evans_level_radius(p, t)?;
            // |∇E|^p A in the logarithmic variable, coded independently of f's integrand.
            let density = |l: f64| -> f64 {
                let Ok(ln_a) = self.ln_area(l) else {
                    return f64::NAN;
                };
                let grad = (-ln_a / (p - 1.0)).exp();
                (l + ln_a).exp() * grad.powf(p)
            };
            let energy = omega * integrate(density, l0, log_radius, self.quad_opts())?.value;
            let expected_energy = omega * t;
            let energy_rel_error = if t == 0.0 {
                energy.abs()
            } else {
                (energy - expected_energy).abs() / expected_energy
            };
            let (capacity, expected_capacity, capacity_rel_error) = if t > 0.0 {
                let cap = energy / t.powf(p);
                let expected = omega * t.powf(1.0 - p);
                (Some(cap), Some(expected), (cap - expected).abs() / expected)
            } else {
                (None, None, 0.0)
            };
            let bound = 100.0 * self.quad_tol;
            if energy_rel_error > bound {
                return Err(ModelError::IdentityViolated {
                    t,
                    what: "energy",
                    rel_error: energy_rel_error,
                });
            }
            if capacity_rel_error > bound {
                return Err(ModelError::IdentityViolated {
                    t,
                    what: "capacity",
                    rel_error: capacity_rel_error,
                });
            }
            out.push(EvansLevel {
                t,
                log_radius,
                energy,
                expected_energy,
                capacity,
                expected_capacity,
                energy_rel_error,
                capacity_rel_error,
            });
        }

        let l_max = out.iter().map(|lv| lv.log_radius).fold(l0, f64::max);
        let samples = samples.max(1);
        let log_radii: Vec<f64> = (0..=samples)
            .map(|i| l0 + (l_max - l0) * i as f64 / samples as f64)
            .collect();
        let mut values = Vec::with_capacity(log_radii.len());
        let mut acc = 0.0;
        values.push(0.0);
        for w in log_radii.windows(2) {
            acc += self.radial_integral_log(p, w[0], w[1])?;
            values.push(acc);
        }
        Ok(RadialEvans {
            profile: RadialProfile { p, log_radii, values },
            levels: out,
        })
    }
}

fn parse_params(body: &str) -> Result<Vec<(String, String)>> {
    body.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| ModelError::Parse(format!("expected key=value, got {kv:?}")))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

impl ModelManifold {
    /// Parses `euclidean:n=3`, `hyperbolic:n=2`, `power:n=2,alpha=1.5`,
    /// `logpower:n=2,alpha=1,beta=2` or `table:path.csv`. Every form also
    /// accepts `rbar=<radius>`; tables accept `table:path.csv,n=3`.
    pub fn parse_spec(spec: &str) -> Result<Self> {
        let (kind, body) = spec
            .split_once(':')
            .ok_or_else(|| ModelError::Parse(format!("missing ':' in {spec:?}")))?;
        let kind = kind.trim().to_ascii_lowercase();

        if kind == "table" {
            let mut parts = body.split(',');
            let path = parts.next().unwrap_or("").trim();
            if path.is_empty() {
                return Err(ModelError::Parse("table path is empty".into()));
            }
            let rest: Vec<&str> = parts.collect();
            let params = parse_params(&rest.join(","))?;
            let mut n = 2usize;
            let mut rbar = None;
            for (k, v) in params {
                match k.as_str() {
                    "n" => n = parse_num(&k, &v)?,
                    "rbar" => rbar = Some(parse_num(&k, &v)?),
                    _ => return Err(ModelError::Parse(format!("unknown table parameter {k:?}"))),
                }
            }
            if n < 2 {
                return Err(ModelError::Parse("dimension must be at least 2".into()));
            }
            let mut m = Self::from_table(n, AreaTable::from_csv(path)?);
            if let Some(r) = rbar {
                m = m.with_base_radius(r);
            }
            return Ok(m);
        }

        let params = parse_params(body)?;
        let mut n: Option<usize> = None;
        let mut alpha: Option<f64> = None;
        let mut beta: Option<f64> = None;
        let mut rbar: Option<f64> = None;
        for (k, v) in params {
            match k.as_str() {
                "n" => n = Some(parse_num(&k, &v)?),
                "alpha" => alpha = Some(parse_num(&k, &v)?),
                "beta" => beta = Some(parse_num(&k, &v)?),
                "rbar" => rbar = Some(parse_num(&k, &v)?),
                _ => return Err(ModelError::Parse(format!("unknown parameter {k:?}"))),
            }
        }
        let n = n.ok_or_else(|| ModelError::Parse("missing dimension n".into()))?;
        if n < 2 {
            return Err(ModelError::Parse("dimension must be at least 2".into()));
        }
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| ModelError::Parse(format!("missing {name}")));
        let m = match kind.as_str() {
            "euclidean" => Self::euclidean(n),
            "hyperbolic" => Self::hyperbolic(n),
            "power" => Self::power(n, need(alpha, "alpha")?),
            "logpower" => Self::log_power(n, need(alpha, "alpha")?, need(beta, "beta")?),
            other => return Err(ModelError::Parse(format!("unknown area form {other:?}"))),
        };
        match rbar {
            Some(r) if r > 0.0 && r.is_finite() => Ok(m.with_base_radius(r)),
            Some(r) => Err(ModelError::Parse(format!("rbar must be positive, got {r}"))),
            None => Ok(m),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| ModelError::Parse(format!("cannot parse {key}={value:?}")))
}

impl FromStr for ModelManifold {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_spec(s)
    }
}
