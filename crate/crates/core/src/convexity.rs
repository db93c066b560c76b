//! Uniform convexity of weighted L^p spaces of cell vectors.
//!
//! `clarkson_modulus` is a lower bound `δ(ε)` for the modulus of convexity,
//! valid for every L^p space regardless of the measure: Clarkson's inequality
//! for `p ≥ 2`, the quadratic bound `(p−1)ε²/8` for `1 < p < 2`. From it,
//! `σ(x) = (1 − δ(x))^{-1} − 1` gives the growth estimate
//!
//! ```text
//!     ‖v + w/2‖ ≥ ‖v‖   ⇒   ‖v + w‖ ≥ ‖v‖ (1 + σ(‖w‖ / (‖v‖ + ‖w‖))).
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvexityError {
    #[error("exponent p must satisfy p > 1, got {0}")]
    InvalidExponent(f64),
    #[error("ε must lie in [0, 2], got {0}")]
    EpsilonOutOfRange(f64),
    #[error("σ is defined on [0, 1), got {0}")]
    SigmaOutOfRange(f64),
    #[error("vector data of length {len} does not match {cells} weights of dimension {dim}")]
    LengthMismatch { len: usize, cells: usize, dim: usize },
    #[error("weights must be positive and finite")]
    InvalidWeight,
}

pub type Result<T> = std::result::Result<T, ConvexityError>;

fn check_p(p: f64) -> Result<()> {
    if p > 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(ConvexityError::InvalidExponent(p))
    }
}

fn modulus_unchecked(p: f64, eps: f64) -> f64 {
    let clarkson = |q: f64| -((-(0.5 * eps).powf(q)).ln_1p() / q).exp_m1();
    if p >= 2.0 {
        clarkson(p)
    } else {
        ((p - 1.0) * eps * eps / 8.0).min(clarkson(2.0))
    }
}

/// Lower bound for the modulus of convexity of L^p at `ε ∈ [0, 2]`.
pub fn clarkson_modulus(p: f64, eps: f64) -> Result<f64> {
    check_p(p)?;
    if !(0.0..=2.0).contains(&eps) {
        return Err(ConvexityError::EpsilonOutOfRange(eps));
    }
    Ok(modulus_unchecked(p, eps))
}

/// `σ(x) = (1 − δ(x))^{-1} − 1` on `[0, 1)`.
pub fn sigma_function(p: f64, x: f64) -> Result<f64> {
    check_p(p)?;
    if !(0.0..1.0).contains(&x) {
        return Err(ConvexityError::SigmaOutOfRange(x));
    }
    let d = modulus_unchecked(p, x);
    Ok(d / (1.0 - d))
}

/// The lower bound `δ` as a value object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModulusBound {
    pub p: f64,
}

impl ModulusBound {
    pub fn new(p: f64) -> Result<Self> {
        check_p(p)?;
        Ok(Self { p })
    }

    pub fn delta(&self, eps: f64) -> Result<f64> {
        clarkson_modulus(self.p, eps)
    }

    pub fn sigma(&self, x: f64) -> Result<f64> {
        sigma_function(self.p, x)
    }
}

/// `(Σ_c w_c |v_c|^p)^{1/p}` with `|v_c|` the Euclidean length of the `dim`-vector of cell `c`.
pub fn weighted_norm(v: &[f64], dim: usize, weights: &[f64], p: f64) -> Result<f64> {
    check_p(p)?;
    check_layout(v.len(), dim, weights)?;
    Ok(norm_unchecked(v, dim, weights, p))
}

fn check_layout(len: usize, dim: usize, weights: &[f64]) -> Result<()> {
    if dim == 0 || len != weights.len() * dim {
        return Err(ConvexityError::LengthMismatch {
            len,
            cells: weights.len(),
            dim,
        });
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(ConvexityError::InvalidWeight);
    }
    Ok(())
}

fn norm_unchecked(v: &[f64], dim: usize, weights: &[f64], p: f64) -> f64 {
    weights
        .iter()
        .zip(v.chunks_exact(dim))
        .map(|(w, c)| w * c.iter().map(|x| x * x).sum::<f64>().sqrt().powf(p))
        .sum::<f64>()
        .powf(1.0 / p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum LemmaStar {
    Holds { lhs: f64, rhs: f64 },
    HypothesisNotMet,
    Violated { lhs: f64, rhs: f64 },
}

impl LemmaStar {
    pub fn is_violation(&self) -> bool {
        matches!(self, LemmaStar::Violated { .. })
    }
}

/// Tests the growth estimate for one pair, with slack `1e-12` relative to `‖v‖`.
pub fn lemma_star_check(v: &[f64], w: &[f64], dim: usize, p: f64, weights: &[f64]) -> Result<LemmaStar> {
    check_p(p)?;
    check_layout(v.len(), dim, weights)?;
    check_layout(w.len(), dim, weights)?;
    let half: Vec<f64> = v.iter().zip(w).map(|(a, b)| a + 0.5 * b).collect();
    let sum: Vec<f64> = v.iter().zip(w).map(|(a, b)| a + b).collect();
    let nv = norm_unchecked(v, dim, weights, p);
    let nw = norm_unchecked(w, dim, weights, p);
    let nh = norm_unchecked(&half, dim, weights, p);
    let ns = norm_unchecked(&sum, dim, weights, p);
    Ok(star_outcome(nv, nw, nh, ns, p))
}

/// Same test from precomputed norms `‖v‖, ‖w‖, ‖v + w/2‖, ‖v + w‖`.
pub fn star_outcome(nv: f64, nw: f64, nhalf: f64, nsum: f64, p: f64) -> LemmaStar {
    if nhalf < nv {
        return LemmaStar::HypothesisNotMet;
    }
    let rhs = if nv == 0.0 {
        0.0
    } else {
        let x = nw / (nv + nw);
        nv * (1.0 + modulus_unchecked(p, x) / (1.0 - modulus_unchecked(p, x)))
    };
    let slack = 1e-12 * nv.max(f64::MIN_POSITIVE);
    if nsum >= rhs - slack {
        LemmaStar::Holds { lhs: nsum, rhs }
    } else {
        LemmaStar::Violated { lhs: nsum, rhs }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteCount {
    pub p: f64,
    pub trials: u64,
    pub hypothesis_met: u64,
    pub violations: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteSummary {
    pub seed: u64,
    pub trials: u64,
    pub hypothesis_met: u64,
    pub violations: u64,
    pub per_p: Vec<SuiteCount>,
}

const CHUNK: u64 = 4096;

fn chunk_rng(seed: u64, salt: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(chunk);
    rng
}

fn random_pair(rng: &mut ChaCha8Rng) -> (usize, Vec<f64>, Vec<f64>, Vec<f64>) {
    let cells = rng.gen_range(1..=8);
    let dim = rng.gen_range(1..=2);
    let weights: Vec<f64> = (0..cells).map(|_| 10f64.powf(rng.gen_range(-2.0..2.0))).collect();
    let v: Vec<f64> = (0..cells * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // Mix directions near v with independent ones so both branches of the hypothesis occur.
    let along = rng.gen_range(-0.5..2.0);
    let scale = 10f64.powf(rng.gen_range(-3.0..1.0));
    let w: Vec<f64> = v
        .iter()
        .map(|&x| along * x * scale + rng.gen_range(-1.0..1.0) * scale)
        .collect();
    (dim, weights, v, w)
}

/// Randomised check of the growth estimate: `trials` pairs for each `p`.
pub fn lemma_star_suite(ps: &[f64], trials: u64, seed: u64) -> Result<SuiteSummary> {
    for &p in ps {
        check_p(p)?;
    }
    let per_p: Vec<SuiteCount> = ps
        .iter()
        .enumerate()
        .map(|(pi, &p)| {
            let chunks = trials.div_ceil(CHUNK);
            let (met, bad) = (0..chunks)
                .into_par_iter()
                .map(|chunk| {
                    let mut rng = chunk_rng(seed, 0x5151 + pi as u64, chunk);
                    let count = CHUNK.min(trials - chunk * CHUNK);
                    let mut met = 0u64;
                    let mut bad = 0u64;
                    for _ in 0..count {
                        let (dim, weights, v, w) = random_pair(&mut rng);
                        match lemma_star_check(&v, &w, dim, p, &weights).expect("valid layout") {
                            LemmaStar::Holds { .. } => met += 1,
                            LemmaStar::Violated { .. } => {
                                met += 1;
                                bad += 1;
                            }
                            LemmaStar::HypothesisNotMet => {}
                        }
                    }
                    (met, bad)
                })
                .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            SuiteCount {
                p,
                trials,
                hypothesis_met: met,
                violations: bad,
            }
        })
        .collect();
    Ok(SuiteSummary {
        seed,
        trials: trials * ps.len() as u64,
        hypothesis_met: per_p.iter().map(|c| c.hypothesis_met).sum(),
        violations: per_p.iter().map(|c| c.violations).sum(),
        per_p,
    })
}

/// Randomised check of `1 − ‖(x+y)/2‖ ≥ δ(‖x − y‖) − 1e-12` over unit pairs.
pub fn modulus_suite(ps: &[f64], trials: u64, seed: u64) -> Result<SuiteSummary> {
    for &p in ps {
        check_p(p)?;
    }
    let per_p: Vec<SuiteCount> = ps
        .iter()
        .enumerate()
        .map(|(pi, &p)| {
            let chunks = trials.div_ceil(CHUNK);
            let bad = (0..chunks)
                .into_par_iter()
                .map(|chunk| {
                    let mut rng = chunk_rng(seed, 0xd3_17a + pi as u64, chunk);
                    let count = CHUNK.min(trials - chunk * CHUNK);
                    let mut bad = 0u64;
                    for _ in 0..count {
                        let (dim, weights, mut x, mut y) = random_pair(&mut rng);
                        let nx = norm_unchecked(&x, dim, &weights, p);
                        let ny = norm_unchecked(&y, dim, &weights, p);
                        if nx == 0.0 || ny == 0.0 {
                            continue;
                        }
                        x.iter_mut().for_each(|a| *a /= nx);
                        y.iter_mut().for_each(|a| *a /= ny);
                        let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
                        let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
                        let eps = norm_unchecked(&diff, dim, &weights, p).min(2.0);
                        let gap = 1.0 - norm_unchecked(&mid, dim, &weights, p);
                        if gap < modulus_unchecked(p, eps) - 1e-12 {
                            bad += 1;
                        }
                    }
                    bad
                })
                .sum::<u64>();
            SuiteCount {
                p,
                trials,
                hypothesis_met: trials,
                violations: bad,
            }
        })
        .collect();
    Ok(SuiteSummary {
        seed,
        trials: trials * ps.len() as u64,
        hypothesis_met: trials * ps.len() as u64,
        violations: per_p.iter().map(|c| c.violations).sum(),
        per_p,
    })
}
