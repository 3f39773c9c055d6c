//! Flat TOML experiment configuration.

use std::path::PathBuf;

use gph_core::solver::DEFAULT_J_CAP;
use gph_core::{admissible_alpha_range, Quadrature};
use serde::{Deserialize, Deserializer, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("constraint violated: {0}")]
    Constraint(String),
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverChoice {
    Volterra,
    Oracle,
    Both,
}

fn number<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        I(i64),
        F(f64),
    }
    Ok(match Num::deserialize(d)? {
        Num::I(i) => i as f64,
        Num::F(f) => f,
    })
}

fn opt_number<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
    number(d).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub d: usize,
    pub p: u32,
    #[serde(deserialize_with = "number")]
    pub mu: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "L", deserialize_with = "number")]
    pub l: f64,
    #[serde(deserialize_with = "number")]
    pub alpha: f64,
    #[serde(deserialize_with = "number")]
    pub xi: f64,
    #[serde(deserialize_with = "number")]
    pub xi2: f64,
    #[serde(deserialize_with = "number")]
    pub xi_prime: f64,
    #[serde(deserialize_with = "number")]
    pub eta: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "N_list")]
    pub n_list: Option<Vec<usize>>,
    #[serde(rename = "T", deserialize_with = "number")]
    pub t: f64,
    #[serde(deserialize_with = "number")]
    pub dt: f64,
    pub quadrature: Quadrature,
    pub solver: SolverChoice,
    /// `smooth`, `zero`, `plane_wave[:q1,..]` or a snapshot path.
    pub phi0: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub ensemble_size: usize,
    pub ensemble_rank: usize,
    /// Defaults to `alpha + 1`.
    #[serde(deserialize_with = "opt_number")]
    pub spectral_decay: Option<f64>,
    pub j_max: usize,
    pub boardgame_n: usize,
    pub nls_substeps: usize,
    /// Write the final state of `evolve` as a snapshot.
    pub snapshot: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d: 1,
            p: 2,
            mu: 1.0,
            m: 8,
            l: 2.0 * std::f64::consts::PI,
            alpha: 1.0,
            xi: 0.02,
            xi2: 0.06,
            xi_prime: 0.2,
            eta: 0.3,
            n: 4,
            n_list: None,
            t: 0.1,
            dt: 1e-3,
            quadrature: Quadrature::Trapezoid,
            solver: SolverChoice::Both,
            phi0: "smooth".into(),
            seed: 42,
            out_dir: PathBuf::from("out"),
            ensemble_size: 20,
            ensemble_rank: 2,
            spectral_decay: None,
            j_max: 3,
            boardgame_n: 1,
            nls_substeps: 16,
            snapshot: true,
        }
    }
}

/// A validated config plus non-fatal findings.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub warnings: Vec<String>,
    /// `alpha` lies outside the admissible range of `(d, p)`.
    pub alpha_inadmissible: bool,
}

fn require(ok: bool, what: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Constraint(what.into()))
    }
}

impl ExperimentConfig {
    pub fn h(&self) -> usize {
        self.p as usize / 2
    }

    /// `N_list` if given, else `{N-1, N}` (or `{N}` when `N = 1`).
    pub fn truncations(&self) -> Vec<usize> {
        match &self.n_list {
            Some(l) => l.clone(),
            None if self.n > 1 => vec![self.n - 1, self.n],
            None => vec![self.n],
        }
    }

    pub fn decay(&self) -> f64 {
        self.spectral_decay.unwrap_or(self.alpha + 1.0)
    }

    pub fn validate(&self) -> Result<(Vec<String>, bool), ConfigError> {
        require(self.d >= 1, "d >= 1")?;
        require(self.p == 2 || self.p == 4, "p in {2, 4}")?;
        require(self.mu.is_finite(), "mu finite")?;
        require(self.m >= 4, "M >= 4")?;
        require(self.m % 2 == 0, "M even")?;
        require(self.l > 0.0 && self.l.is_finite(), "L > 0")?;
        require(self.alpha >= 0.0 && self.alpha.is_finite(), "alpha >= 0")?;
        require(self.xi > 0.0, "0 < xi")?;
        require(self.xi < self.xi_prime, "xi < xi_prime")?;
        require(self.xi < self.xi2, "xi < xi2")?;
        require(self.xi2 < self.xi_prime, "xi2 < xi_prime")?;
        require(self.xi_prime < 1.0, "xi_prime < 1")?;
        require(self.eta > 0.0 && self.eta < 1.0, "0 < eta < 1")?;
        require(self.n >= 1, "N >= 1")?;
        if let Some(l) = &self.n_list {
            require(!l.is_empty(), "N_list nonempty")?;
            require(l.iter().all(|&n| n >= 1), "N_list entries >= 1")?;
            require(l.windows(2).all(|w| w[0] < w[1]), "N_list strictly increasing")?;
        }
        require(self.t > 0.0 && self.t.is_finite(), "T > 0")?;
        require(self.dt > 0.0 && self.dt <= self.t, "0 < dt <= T")?;
        let steps = self.t / self.dt;
        require((steps - steps.round()).abs() <= 1e-9 * steps.max(1.0), "T / dt integer")?;
        require(self.ensemble_size >= 1, "ensemble_size >= 1")?;
        require(self.ensemble_rank >= 1, "ensemble_rank >= 1")?;
        require(self.decay() >= 0.0 && self.decay().is_finite(), "spectral_decay >= 0")?;
        require(self.j_max >= 1, "j_max >= 1")?;
        require(self.j_max <= DEFAULT_J_CAP, &format!("j_max <= {DEFAULT_J_CAP}"))?;
        require(self.boardgame_n >= 1, "boardgame_n >= 1")?;
        require(self.nls_substeps >= 1, "nls_substeps >= 1")?;
        let range = admissible_alpha_range(self.d, self.p).map_err(|e| ConfigError::Constraint(e.to_string()))?;
        let mut warnings = Vec::new();
        let inadmissible = !range.contains(self.alpha);
        if inadmissible {
            warnings.push(format!(
                "alpha = {} lies outside the admissible range {} for d = {}, p = {}; run permitted and flagged",
                self.alpha, range, self.d, self.p
            ));
        }
        let norms = gph_core::NormParams {
            alpha: self.alpha,
            xi: self.xi,
            xi2: self.xi2,
            xi_prime: self.xi_prime,
            eta: self.eta,
        };
        if !norms.nesting_holds() {
            warnings.push("nesting xi < eta xi2 < eta^2 xi_prime does not hold".into());
        }
        Ok((warnings, inadmissible))
    }

    pub fn norms(&self) -> gph_core::NormParams {
        gph_core::NormParams {
            alpha: self.alpha,
            xi: self.xi,
            xi2: self.xi2,
            xi_prime: self.xi_prime,
            eta: self.eta,
        }
    }
}

fn load_table(table: toml::Table) -> Result<Loaded, ConfigError> {
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let (warnings, alpha_inadmissible) = config.validate()?;
    Ok(Loaded {
        config,
        warnings,
        alpha_inadmissible,
    })
}

/// Parses and validates a config document with defaults filled in.
pub fn parse_config(text: &str) -> Result<Loaded, ConfigError> {
    parse_config_with(text, &[])
}

/// As [`parse_config`], then applies `key=value` overrides (values in TOML syntax).
pub fn parse_config_with(text: &str, overrides: &[String]) -> Result<Loaded, ConfigError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
        let k = k.trim();
        let v = v.trim();
        if k.is_empty() {
            return Err(ConfigError::Override(o.clone()));
        }
        let parsed: toml::Table = format!("v = {v}")
            .parse()
            .or_else(|_| format!("v = {}", toml::Value::String(v.into())).parse())
            .map_err(|_| ConfigError::Override(o.clone()))?;
        table.insert(k.into(), parsed["v"].clone());
    }
    load_table(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn string_overrides_do_not_need_quotes() {
        let c = parse_config_with("", &["phi0=plane_wave:2".into(), "M=12".into()]).unwrap();
        assert_eq!(c.config.phi0, "plane_wave:2");
        assert_eq!(c.config.m, 12);
    }

    #[test]
    fn truncation_list_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.truncations(), vec![3, 4]);
    }
}
