//! Truncated hierarchies `Gamma = (gamma^{(1)}, .., gamma^{(N)})` and their weighted norms.

use alloc::vec::Vec;

use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::factored::FactoredMarginal;
use crate::grid::TorusGrid;
use crate::marginal::{validate_marginal, Basis, Marginal, Tolerances, ValidationReport};
use crate::math;

/// One level of a hierarchy, dense or factored.
#[derive(Debug, Clone)]
pub enum Level {
    Dense(Marginal),
    Factored(FactoredMarginal),
}

impl From<Marginal> for Level {
    fn from(m: Marginal) -> Self {
        Level::Dense(m)
    }
}

impl From<FactoredMarginal> for Level {
    fn from(f: FactoredMarginal) -> Self {
        Level::Factored(f)
    }
}

impl Level {
    pub fn k(&self) -> usize {
        match self {
            Level::Dense(m) => m.k(),
            Level::Factored(f) => f.k(),
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        match self {
            Level::Dense(m) => m.grid(),
            Level::Factored(f) => f.grid(),
        }
    }

    pub fn zero(grid: &TorusGrid, k: usize) -> Result<Self> {
        Ok(Level::Factored(FactoredMarginal::zero(grid, k)?))
    }

    pub fn trace(&self) -> Complex64 {
        match self {
            Level::Dense(m) => m.trace(),
            Level::Factored(f) => f.trace(),
        }
    }

    pub fn h_alpha_norm(&self, alpha: f64) -> Result<f64> {
        match self {
            Level::Dense(m) => m.h_alpha_norm(alpha),
            Level::Factored(f) => f.h_alpha_norm(alpha),
        }
    }

    pub fn partial_trace(&self) -> Result<Level> {
        Ok(match self {
            Level::Dense(m) => Level::Dense(m.partial_trace()?),
            Level::Factored(f) => Level::Factored(f.partial_trace()?),
        })
    }

    /// Dense form in the requested basis (guarded).
    pub fn to_dense(&self, basis: Basis) -> Result<Marginal> {
        match self {
            Level::Dense(m) => Ok(m.to_basis(basis)),
            Level::Factored(f) => f.to_dense(basis),
        }
    }

    pub fn scaled(&self, a: Complex64) -> Level {
        match self {
            Level::Dense(m) => {
                let mut m = m.clone();
                m.scale(a);
                Level::Dense(m)
            }
            Level::Factored(f) => {
                let mut f = f.clone();
                f.scale(a);
                Level::Factored(f)
            }
        }
    }

    /// `self - other`; mixed operands are densified in the modal basis.
    pub fn sub(&self, other: &Level) -> Result<Level> {
        if self.grid() != other.grid() {
            return Err(Error::GridMismatch);
        }
        if self.k() != other.k() {
            return Err(Error::LevelOutOfRange {
                level: other.k(),
                reason: alloc::format!("expected level {}", self.k()),
            });
        }
        Ok(match (self, other) {
            (Level::Factored(a), Level::Factored(b)) => Level::Factored(a.sub(b)?),
            (Level::Dense(a), b) => {
                let mut out = a.to_modal();
                out.add_scaled(Complex64::new(-1.0, 0.0), &b.to_dense(Basis::Modal)?)?;
                Level::Dense(out)
            }
            (a, Level::Dense(b)) => {
                let mut out = a.to_dense(Basis::Modal)?;
                out.add_scaled(Complex64::new(-1.0, 0.0), b)?;
                Level::Dense(out)
            }
        })
    }

    pub fn add(&self, other: &Level) -> Result<Level> {
        self.sub(&other.scaled(Complex64::new(-1.0, 0.0)))
    }

    /// Dense levels report max-abs position defects; factored levels report HS-norm defects.
    pub fn validate(&self, tol: &Tolerances) -> Result<ValidationReport> {
        match self {
            Level::Dense(m) => Ok(validate_marginal(m, tol)),
            Level::Factored(f) => {
                if let Ok(m) = f.to_dense(Basis::Position) {
                    return Ok(validate_marginal(&m, tol));
                }
                let herm = f.hermiticity_defect()?;
                let sym = f.symmetry_defect()?;
                let tr = f.trace();
                Ok(ValidationReport {
                    hermiticity_defect: herm,
                    symmetry_defect: sym,
                    trace_re: tr.re,
                    trace_im: tr.im,
                    positivity_flag: None,
                    min_eigenvalue: None,
                    structural_ok: herm <= tol.structural && sym <= tol.structural,
                })
            }
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, Level::Dense(_))
    }
}

/// A truncated hierarchy. Levels above `N` are implicitly zero.
#[derive(Debug, Clone)]
pub struct HierarchyState {
    grid: TorusGrid,
    levels: Vec<Level>,
}

impl HierarchyState {
    pub fn new(grid: &TorusGrid, levels: Vec<Level>) -> Result<Self> {
        for (i, l) in levels.iter().enumerate() {
            if l.k() != i + 1 {
                return Err(Error::LevelOutOfRange {
                    level: l.k(),
                    reason: alloc::format!("found at position {}", i + 1),
                });
            }
            if l.grid() != grid {
                return Err(Error::GridMismatch);
            }
        }
        Ok(Self {
            grid: grid.clone(),
            levels,
        })
    }

    pub fn zeros(grid: &TorusGrid, n: usize) -> Result<Self> {
        let levels = (1..=n).map(|k| Level::zero(grid, k)).collect::<Result<Vec<_>>>()?;
        Self::new(grid, levels)
    }

    /// Factorized data `gamma^{(k)} = |phi><phi|^{tensor k}`, `k = 1..N`, stored factored.
    pub fn factorized(grid: &TorusGrid, phi: &[Complex64], n: usize) -> Result<Self> {
        let levels = (1..=n)
            .map(|k| FactoredMarginal::factorized(grid, phi, k).map(Level::Factored))
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid, levels)
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    /// Truncation level `N`.
    pub fn truncation(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Level] {
        &mut self.levels
    }

    /// Level `k`, or `None` for `k = 0` and `k > N` (implicit zero).
    pub fn level(&self, k: usize) -> Option<&Level> {
        if k == 0 {
            None
        } else {
            self.levels.get(k - 1)
        }
    }

    /// `P_{<=N} Gamma`.
    pub fn truncate(&self, n: usize) -> HierarchyState {
        Self {
            grid: self.grid.clone(),
            levels: self.levels.iter().take(n).cloned().collect(),
        }
    }

    /// `P_{>N_1} Gamma`: levels `<= N_1` replaced by zero.
    pub fn project_tail(&self, n1: usize) -> Result<HierarchyState> {
        let levels = self
            .levels
            .iter()
            .map(|l| if l.k() <= n1 { Level::zero(&self.grid, l.k()) } else { Ok(l.clone()) })
            .collect::<Result<Vec<_>>>()?;
        Self::new(&self.grid, levels)
    }

    /// Unweighted `||gamma^{(k)}||_{H^alpha}` for `k = 1..N`.
    pub fn level_norms(&self, alpha: f64) -> Result<Vec<f64>> {
        self.levels.iter().map(|l| l.h_alpha_norm(alpha)).collect()
    }

    /// Levelwise difference; the shorter state is padded with zeros.
    pub fn sub(&self, other: &HierarchyState) -> Result<HierarchyState> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        let n = self.truncation().max(other.truncation());
        let mut levels = Vec::with_capacity(n);
        for k in 1..=n {
            let l = match (self.level(k), other.level(k)) {
                (Some(a), Some(b)) => a.sub(b)?,
                (Some(a), None) => a.clone(),
                (None, Some(b)) => b.scaled(Complex64::new(-1.0, 0.0)),
                (None, None) => Level::zero(&self.grid, k)?,
            };
            levels.push(l);
        }
        Self::new(&self.grid, levels)
    }

    pub fn traces(&self) -> Vec<Complex64> {
        self.levels.iter().map(|l| l.trace()).collect()
    }
}

/// Parameters of the weighted norms and the nested-scale studies.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormParams {
    pub alpha: f64,
    pub xi: f64,
    pub xi2: f64,
    pub xi_prime: f64,
    pub eta: f64,
}

impl Default for NormParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            xi: 0.02,
            xi2: 0.06,
            xi_prime: 0.2,
            eta: 0.3,
        }
    }
}

impl NormParams {
    /// Checks `alpha >= 0`, `0 < xi < xi2 < xi_prime < 1` and `0 < eta < 1`.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(invalid("alpha", "must be finite and >= 0"));
        }
        if !(self.xi > 0.0) {
            return Err(Error::Constraint("0 < xi".into()));
        }
        if !(self.xi < self.xi2) {
            return Err(Error::Constraint("xi < xi2".into()));
        }
        if !(self.xi2 < self.xi_prime) {
            return Err(Error::Constraint("xi2 < xi_prime".into()));
        }
        if !(self.xi_prime < 1.0) {
            return Err(Error::Constraint("xi_prime < 1".into()));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Constraint("0 < eta < 1".into()));
        }
        Ok(())
    }

    /// Whether `xi < eta xi2 < eta^2 xi_prime` holds.
    pub fn nesting_holds(&self) -> bool {
        self.xi < self.eta * self.xi2 && self.xi2 < self.eta * self.xi_prime
    }
}

/// `sum_k xi^k n_k` for unweighted level norms `n_1, n_2, ..`.
pub fn weighted_sum(norms: &[f64], xi: f64) -> f64 {
    norms
        .iter()
        .enumerate()
        .map(|(i, n)| math::powi(xi, i as i32 + 1) * n)
        .sum()
}

fn check_xi(xi: f64) -> Result<()> {
    if !(xi > 0.0 && xi < 1.0) {
        return Err(invalid("xi", "must lie in (0, 1)"));
    }
    Ok(())
}

/// `||Gamma||_{H^alpha_xi} = sum_{k=1}^N xi^k ||gamma^{(k)}||_{H^alpha}`.
pub fn hxi_norm(state: &HierarchyState, xi: f64, alpha: f64) -> Result<f64> {
    check_xi(xi)?;
    Ok(weighted_sum(&state.level_norms(alpha)?, xi))
}

/// `||P_{>N_1} Gamma||_{H^alpha_{xi'}}`.
pub fn tail_norm(state: &HierarchyState, n1: usize, xi_prime: f64, alpha: f64) -> Result<f64> {
    check_xi(xi_prime)?;
    let mut acc = 0.0;
    for l in state.levels().iter().filter(|l| l.k() > n1) {
        acc += math::powi(xi_prime, l.k() as i32) * l.h_alpha_norm(alpha)?;
    }
    Ok(acc)
}

pub fn project_tail(state: &HierarchyState, n1: usize) -> Result<HierarchyState> {
    state.project_tail(n1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::grid::make_grid;
    use approx::assert_relative_eq;
    use core::f64::consts::PI;

    fn plane(grid: &TorusGrid) -> Vec<Complex64> {
        (0..grid.slot_len())
            .map(|n| math::cis(grid.slot_position(n)[0]) / math::sqrt(grid.period()))
            .collect()
    }

    #[test]
    fn geometric_norms_for_plane_waves() {
        let g = make_grid(1, 8, 2.0 * PI).unwrap();
        let s = HierarchyState::factorized(&g, &plane(&g), 5).unwrap();
        let r2 = 2.0;
        let xi = 0.1;
        let expected: f64 = (1..=5).map(|k| math::powi(xi * r2, k)).sum();
        assert_relative_eq!(hxi_norm(&s, xi, 1.0).unwrap(), expected, max_relative = 1e-12);
        let tail: f64 = (4..=5).map(|k| math::powi(xi * r2, k)).sum();
        assert_relative_eq!(tail_norm(&s, 3, xi, 1.0).unwrap(), tail, max_relative = 1e-12);
        assert_eq!(tail_norm(&s, 5, xi, 1.0).unwrap(), 0.0);
        assert_relative_eq!(tail_norm(&s, 0, xi, 1.0).unwrap(), hxi_norm(&s, xi, 1.0).unwrap());
    }

    #[test]
    fn tail_series_limit() {
        let g = make_grid(1, 8, 2.0 * PI).unwrap();
        let phi: Vec<Complex64> = vec![Complex64::new(1.0 / math::sqrt(g.period()), 0.0); 8];
        let s = HierarchyState::factorized(&g, &phi, 40).unwrap();
        assert_relative_eq!(tail_norm(&s, 4, 0.1, 1.0).unwrap(), 1e-5 / 0.9, max_relative = 1e-10);
    }

    #[test]
    fn single_level_and_zero() {
        let g = make_grid(1, 8, 2.0 * PI).unwrap();
        assert_eq!(hxi_norm(&HierarchyState::zeros(&g, 3).unwrap(), 0.5, 1.0).unwrap(), 0.0);
        assert_relative_eq!(weighted_sum(&[0.0, 3.0], 0.1), 0.03, epsilon = 1e-15);
    }

    #[test]
    fn norm_params_validation() {
        assert!(NormParams::default().validate().is_ok());
        let bad = NormParams { xi: 0.3, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Constraint(_))));
        assert!(!NormParams::default().nesting_holds());
    }
}
