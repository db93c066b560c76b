//! Experiment configuration: an INI file of flat `key = value` pairs, then
//! command-line flags of the same name on top.
//!
//! Keys outside any section apply to every subcommand; a section named after
//! the subcommand overrides them. Underscores and dashes in keys are
//! interchangeable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use parabolicity_core::{Grading, OuterRadius};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: ini::Error,
    },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Invalid {
        key: &'static str,
        value: String,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Every key the config file and the command line understand, with its help text.
pub const KEYS: &[(&str, &str)] = &[
    ("manifold", "model spec, e.g. euclidean:n=2 or power:n=2,alpha=1.5"),
    ("p", "exponent p > 1"),
    ("rmax", "outer radius of the grid"),
    ("log-rmax", "natural log of the outer radius; overrides rmax"),
    ("grid", "radial cells M, or MxMθ for a surface grid"),
    ("grading", "uniform, logarithmic, geometric:q or loggeometric:q"),
    ("tol", "solver residual tolerance"),
    ("quad-tol", "quadrature tolerance"),
    ("steps", "number of witness stages N"),
    ("terms", "maximum number of finite-energy series terms"),
    ("t-list", "comma-separated levels for the Evans asymptotics"),
    ("pairs", "comma-separated t:s level pairs for the scaling table"),
    ("p-list", "comma-separated exponents for lemma-star"),
    ("exhaustion", "dyadic, every or rings:k1,k2,..."),
    ("levels", "number of Evans levels"),
    ("reference-ring", "grid ring of the Evans reference radius"),
    ("arc", "fraction of the inner circle used as the compact set"),
    ("trials", "random pairs per exponent for lemma-star"),
    ("run", "saved khasminskii report to audit"),
    ("out", "output directory"),
    ("seed", "seed for randomized suites"),
];

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub manifold: String,
    pub p: f64,
    pub rmax: f64,
    /// Overrides `rmax` when set; needed for radii beyond `f64`.
    pub log_rmax: Option<f64>,
    /// `M` for a radial grid or `MxMθ` for a surface grid.
    pub grid: String,
    pub grading: String,
    pub tol: f64,
    pub quad_tol: Option<f64>,
    pub steps: usize,
    /// Cap on the number of terms of the finite-energy series.
    pub terms: usize,
    pub t_list: Vec<f64>,
    /// `(t, s)` level pairs for the scaling table.
    pub pairs: Vec<(f64, f64)>,
    pub p_list: Vec<f64>,
    /// `dyadic`, `every` or `rings:k1,k2,…`.
    pub exhaustion: String,
    /// Number of Evans levels `n_max`.
    pub levels: usize,
    /// Ring of the reference radius `r̄`; defaults to `M/40`.
    pub reference_ring: Option<usize>,
    /// Fraction of the inner circle taken as the compact set.
    pub arc: f64,
    pub trials: u64,
    /// Saved run for `audit`; defaults to `<out>/khasminskii.json`.
    #[serde(skip)]
    pub run: Option<PathBuf>,
    /// Left out of reports so they do not depend on where they are written.
    #[serde(skip)]
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifold: "euclidean:n=2".into(),
            p: 2.0,
            rmax: 2.0,
            log_rmax: None,
            grid: "1024".into(),
            grading: "uniform".into(),
            tol: 1e-9,
            quad_tol: None,
            steps: 5,
            terms: 400,
            t_list: vec![2.0, 4.0, 8.0],
            pairs: vec![(0.0, 0.5), (0.25, 0.75), (0.5, 1.0)],
            p_list: vec![1.5, 2.0, 3.0, 4.5],
            exhaustion: "dyadic".into(),
            levels: 10,
            reference_ring: None,
            arc: 0.5,
            trials: 10_000,
            run: None,
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

pub fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('_', "-")
}

/// Reads the pairs that apply to `command` from an INI file.
pub fn read_file(path: &Path, command: &str) -> Result<BTreeMap<String, String>> {
    let ini = ini::Ini::load_from_file(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = BTreeMap::new();
    for section in [None, Some(command)] {
        if let Some(props) = ini.section(section) {
            for (k, v) in props.iter() {
                out.insert(normalize_key(k), v.trim().to_string());
            }
        }
    }
    Ok(out)
}

fn invalid(key: &'static str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        key,
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn number<T: std::str::FromStr>(key: &'static str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| invalid(key, value, e))
}

fn list(key: &'static str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|x| number(key, x)).collect()
}

fn positive(key: &'static str, x: f64) -> Result<f64> {
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(invalid(key, &x.to_string(), "must be positive"))
    }
}

impl ExperimentConfig {
    /// Applies `key = value` pairs in order; later pairs win.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (key, value) in pairs {
            self.set(&normalize_key(key), value)?;
        }
        self.validate()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "manifold" => self.manifold = v.trim().to_string(),
            "p" => self.p = number("p", v)?,
            "rmax" => self.rmax = number("rmax", v)?,
            "log-rmax" => self.log_rmax = Some(number("log-rmax", v)?),
            "grid" => self.grid = v.trim().to_string(),
            "grading" => self.grading = v.trim().to_string(),
            "tol" => self.tol = number("tol", v)?,
            "quad-tol" => self.quad_tol = Some(number("quad-tol", v)?),
            "steps" => self.steps = number("steps", v)?,
            "terms" => self.terms = number("terms", v)?,
            "t-list" => self.t_list = list("t-list", v)?,
            "pairs" => {
                self.pairs = v
                    .split(',')
                    .map(|pair| {
                        let (t, s) = pair.split_once(':').ok_or_else(|| invalid("pairs", v, "expected t:s"))?;
                        Ok((number("pairs", t)?, number("pairs", s)?))
                    })
                    .collect::<Result<_>>()?
            }
            "p-list" => self.p_list = list("p-list", v)?,
            "exhaustion" => self.exhaustion = v.trim().to_string(),
            "levels" => self.levels = number("levels", v)?,
            "reference-ring" => self.reference_ring = Some(number("reference-ring", v)?),
            "arc" => self.arc = number("arc", v)?,
            "trials" => self.trials = number("trials", v)?,
            "run" => self.run = Some(PathBuf::from(v.trim())),
            "out" => self.out = PathBuf::from(v.trim()),
            "seed" => self.seed = number("seed", v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 1.0 && self.p.is_finite()) {
            return Err(invalid("p", &self.p.to_string(), "must exceed 1"));
        }
        positive("tol", self.tol)?;
        if let Some(q) = self.quad_tol {
            positive("quad-tol", q)?;
        }
        positive("rmax", self.rmax)?;
        for &p in &self.p_list {
            if !(p > 1.0 && p.is_finite()) {
                return Err(invalid("p-list", &p.to_string(), "every p must exceed 1"));
            }
        }
        if !(self.arc > 0.0 && self.arc <= 1.0) {
            return Err(invalid("arc", &self.arc.to_string(), "must lie in (0, 1]"));
        }
        self.grid_cells()?;
        self.grading()?;
        Ok(())
    }

    /// `(M, Some(Mθ))` for a surface grid.
    pub fn grid_cells(&self) -> Result<(usize, Option<usize>)> {
        let g = self.grid.trim();
        match g.split_once(['x', 'X']) {
            Some((m, a)) => Ok((number("grid", m)?, Some(number("grid", a)?))),
            None => Ok((number("grid", g)?, None)),
        }
    }

    pub fn grading(&self) -> Result<Grading> {
        let g = self.grading.trim().to_ascii_lowercase();
        let (name, arg) = match g.split_once(':') {
            Some((n, a)) => (n.to_string(), Some(a.to_string())),
            None => (g.clone(), None),
        };
        let ratio = |a: Option<String>| -> Result<f64> {
            let a = a.ok_or_else(|| invalid("grading", &self.grading, "missing ratio"))?;
            positive("grading", number("grading", &a)?)
        };
        match name.as_str() {
            "uniform" => Ok(Grading::Uniform),
            "logarithmic" | "log" => Ok(Grading::Logarithmic),
            "geometric" => Ok(Grading::Geometric(ratio(arg)?)),
            "loggeometric" => Ok(Grading::LogGeometric(ratio(arg)?)),
            _ => Err(invalid(
                "grading",
                &self.grading,
                "expected uniform, logarithmic, geometric:q or loggeometric:q",
            )),
        }
    }

    pub fn outer(&self) -> OuterRadius {
        match self.log_rmax {
            Some(l) => OuterRadius::LogRadius(l),
            None => OuterRadius::Radius(self.rmax),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ini");
        std::fs::write(&path, "p = 3\ngrid = 64\n[evans]\ngrid = 32x16\nt_list = 1,2\n").unwrap();
        let file = read_file(&path, "evans").unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.apply(file.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(cfg.grid_cells().unwrap(), (32, Some(16)));
        assert_eq!(cfg.t_list, vec![1.0, 2.0]);
        cfg.apply([("p", "2.5")]).unwrap();
        assert_eq!(cfg.p, 2.5);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(cfg.apply([("p", "1")]), Err(ConfigError::Invalid { key: "p", .. })));
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply([("tol", "0")]).is_err());
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(cfg.apply([("colour", "red")]), Err(ConfigError::UnknownKey(_))));
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply([("grading", "loggeometric")]).is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.apply([("grading", "loggeometric:1.05"), ("pairs", "0:0.5,0.5:1")]).unwrap();
        assert_eq!(cfg.grading().unwrap(), Grading::LogGeometric(1.05));
        assert_eq!(cfg.pairs, vec![(0.0, 0.5), (0.5, 1.0)]);
    }
}
