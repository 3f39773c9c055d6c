//! Split-step reference solver for `i d_t phi = -Laplace phi + mu |phi|^p phi`.
//!
//! Factorized hierarchy data `gamma^{(k)} = prod phi(x_j) conj(phi(x'_j))` stay
//! factorized when `phi` solves this equation, which is what the comparison
//! routines check.

use alloc::vec::Vec;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::factored::FactoredMarginal;
use crate::grid::{phase_weights, sobolev_weights, Side, TorusGrid};
use crate::math;
use crate::operators::InteractionSpec;
use crate::solver::{TimeGrid, Trajectory};
use crate::state::{weighted_sum, HierarchyState, Level};

/// One-particle field sampled on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveFunction {
    grid: TorusGrid,
    values: Vec<Complex64>,
}

impl WaveFunction {
    pub fn new(grid: &TorusGrid, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.slot_len() {
            return Err(Error::ShapeMismatch {
                expected: grid.slot_len(),
                actual: values.len(),
            });
        }
        if values.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(crate::error::invalid("phi", "contains non-finite values"));
        }
        Ok(Self {
            grid: grid.clone(),
            values,
        })
    }

    /// `f(x)` sampled at grid points, rescaled to unit `L^2` norm.
    pub fn from_fn(grid: &TorusGrid, f: impl Fn(&[f64]) -> Complex64) -> Result<Self> {
        let values = (0..grid.slot_len()).map(|s| f(&grid.slot_position(s))).collect();
        Self::new(grid, values)?.normalized()
    }

    /// Default test field `c (1 + 0.5 cos(2 pi x_1 / L))` with unit `L^2` norm.
    pub fn default_test_field(grid: &TorusGrid) -> Result<Self> {
        let kx = 2.0 * core::f64::consts::PI / grid.period();
        Self::from_fn(grid, |x| Complex64::new(1.0 + 0.5 * math::cos(kx * x[0]), 0.0))
    }

    /// Normalized plane wave `e^{i q.x} / L^{d/2}`, `q` in units of `2 pi / L`.
    pub fn plane_wave(grid: &TorusGrid, mode: &[i64]) -> Result<Self> {
        if mode.len() != grid.dim() {
            return Err(Error::ShapeMismatch {
                expected: grid.dim(),
                actual: mode.len(),
            });
        }
        let kx = 2.0 * core::f64::consts::PI / grid.period();
        Self::from_fn(grid, |x| {
            let phase: f64 = x.iter().zip(mode).map(|(xi, &q)| kx * q as f64 * xi).sum();
            math::cis(phase)
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn l2_norm(&self) -> f64 {
        math::sqrt(self.values.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.grid.cell_volume())
    }

    pub fn h_alpha_norm(&self, alpha: f64) -> Result<f64> {
        let w = sobolev_weights(&self.grid, alpha)?;
        let c = self.grid.slot_to_modal(&self.values, Side::Unprimed);
        Ok(math::sqrt(c.iter().zip(&w).map(|(z, w)| z.norm_sqr() * w * w).sum()))
    }

    pub fn normalized(mut self) -> Result<Self> {
        let n = self.l2_norm();
        if !(n > 0.0) {
            return Err(Error::Degenerate("zero wave function cannot be normalized".into()));
        }
        self.values.iter_mut().for_each(|z| *z /= n);
        Ok(self)
    }

    pub fn conj(&self) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|z| z.conj()).collect(),
        }
    }

    /// Factorized hierarchy `P_{<=n} Gamma_phi`, stored as single product terms.
    pub fn hierarchy(&self, n: usize) -> Result<HierarchyState> {
        HierarchyState::factorized(&self.grid, &self.values, n)
    }

    pub fn max_abs_diff(&self, other: &WaveFunction) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
    }
}

fn nonlinear_half(values: &mut [Complex64], spec: &InteractionSpec, tau: f64) {
    let p = spec.p() as i32;
    for z in values.iter_mut() {
        let rho = math::powi(z.norm_sqr(), p / 2);
        *z *= math::cis(-tau * spec.mu() * rho);
    }
}

/// Strang splitting, sampled at every time of `tg`.
pub fn nls_solve(phi0: &WaveFunction, spec: &InteractionSpec, tg: &TimeGrid) -> Result<Vec<WaveFunction>> {
    nls_solve_substeps(phi0, spec, tg, 1)
}

/// As [`nls_solve`] with `substeps` Strang steps per grid interval.
pub fn nls_solve_substeps(
    phi0: &WaveFunction,
    spec: &InteractionSpec,
    tg: &TimeGrid,
    substeps: usize,
) -> Result<Vec<WaveFunction>> {
    if substeps == 0 {
        return Err(crate::error::invalid("nls_substeps", "must be at least 1"));
    }
    let grid = phi0.grid.clone();
    let tau = tg.dt() / substeps as f64;
    let lin = phase_weights(&grid, tau, Side::Unprimed)?;
    let mut out = Vec::with_capacity(tg.steps() + 1);
    out.push(phi0.clone());
    let mut v = phi0.values.clone();
    for _ in 0..tg.steps() {
        for _ in 0..substeps {
            nonlinear_half(&mut v, spec, 0.5 * tau);
            let mut c = grid.slot_to_modal(&v, Side::Unprimed);
            c.iter_mut().zip(&lin).for_each(|(z, w)| *z *= w);
            v = grid.slot_to_position(&c, Side::Unprimed);
            nonlinear_half(&mut v, spec, 0.5 * tau);
        }
        out.push(WaveFunction {
            grid: grid.clone(),
            values: v.clone(),
        });
    }
    Ok(out)
}

/// Per-time, per-level `H^alpha` errors between a hierarchy and a factorized NLS state.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NlsComparison {
    pub times: Vec<f64>,
    /// `errors[i][k-1]` at `times[i]`.
    pub errors: Vec<Vec<f64>>,
    /// `H^alpha_xi` aggregate per time.
    pub aggregate: Vec<f64>,
}

impl NlsComparison {
    /// Level-`k` error at the final time.
    pub fn final_error(&self, k: usize) -> Option<f64> {
        self.errors.last().and_then(|e| e.get(k.checked_sub(1)?).copied())
    }
}

/// Level errors of a single hierarchy state against `Gamma_phi`.
pub fn level_errors(state: &HierarchyState, phi: &WaveFunction, alpha: f64) -> Result<Vec<f64>> {
    if state.grid() != phi.grid() {
        return Err(Error::GridMismatch);
    }
    state
        .levels()
        .iter()
        .map(|l| {
            let f = Level::Factored(FactoredMarginal::factorized(phi.grid(), phi.values(), l.k())?);
            l.sub(&f)?.h_alpha_norm(alpha)
        })
        .collect()
}

pub fn compare_hierarchy_vs_nls(
    traj: &Trajectory,
    phis: &[WaveFunction],
    alpha: f64,
    xi: f64,
) -> Result<NlsComparison> {
    if traj.states.len() != phis.len() {
        return Err(Error::TimeGrid(alloc::format!(
            "{} hierarchy samples against {} NLS samples",
            traj.states.len(),
            phis.len()
        )));
    }
    let mut errors = Vec::with_capacity(phis.len());
    let mut aggregate = Vec::with_capacity(phis.len());
    for (s, phi) in traj.states.iter().zip(phis) {
        let e = level_errors(s, phi, alpha)?;
        aggregate.push(weighted_sum(&e, xi));
        errors.push(e);
    }
    Ok(NlsComparison {
        times: traj.times.clone(),
        errors,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::quadrature::Quadrature;
    use crate::solver::solve_truncated;
    use core::f64::consts::PI;

    fn grid() -> TorusGrid {
        make_grid(1, 8, 2.0 * PI).unwrap()
    }

    #[test]
    fn plane_wave_closed_form() {
        let g = grid();
        let tg = TimeGrid::new(0.1, 1e-3).unwrap();
        for (p, mu) in [(2u32, 1.0), (4, -1.0)] {
            let spec = InteractionSpec::new(p, mu).unwrap();
            let phi0 = WaveFunction::plane_wave(&g, &[2]).unwrap();
            let sol = nls_solve(&phi0, &spec, &tg).unwrap();
            let amp = math::powi(1.0 / g.period(), p as i32 / 2);
            let w = 4.0 + mu * amp;
            let want: Vec<Complex64> = phi0.values().iter().map(|z| z * math::cis(-0.1 * w)).collect();
            let want = WaveFunction::new(&g, want).unwrap();
            assert!(sol.last().unwrap().max_abs_diff(&want).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn conserves_mass_and_reverses_time() {
        let g = grid();
        let tg = TimeGrid::new(0.1, 1e-3).unwrap();
        let phi0 = WaveFunction::default_test_field(&g).unwrap();
        let spec = InteractionSpec::new(2, 1.0).unwrap();
        let a = nls_solve(&phi0, &spec, &tg).unwrap();
        for w in &a {
            assert!((w.l2_norm() - 1.0).abs() <= 1e-10);
        }
        // conj(phi(T)) evolved forward by T returns to conj(phi0).
        let c = nls_solve(&a.last().unwrap().conj(), &spec, &tg).unwrap();
        assert!(c.last().unwrap().max_abs_diff(&phi0.conj()).unwrap() <= 1e-9);
    }

    #[test]
    fn second_order_in_dt() {
        let g = grid();
        let spec = InteractionSpec::new(2, 1.0).unwrap();
        let phi0 = WaveFunction::default_test_field(&g).unwrap();
        let run = |dt: f64| nls_solve(&phi0, &spec, &TimeGrid::new(0.1, dt).unwrap()).unwrap().pop().unwrap();
        let fine = run(1.25e-4);
        let e1 = run(2e-3).max_abs_diff(&fine).unwrap();
        let e2 = run(1e-3).max_abs_diff(&fine).unwrap();
        let ratio = e1 / e2;
        assert!(ratio > 3.3 && ratio < 4.8, "ratio {ratio}");
    }

    #[test]
    fn hierarchy_comparison_shapes() {
        let g = grid();
        let spec = InteractionSpec::new(2, 1.0).unwrap();
        let tg = TimeGrid::new(0.01, 1e-3).unwrap();
        let pw = WaveFunction::plane_wave(&g, &[1]).unwrap();
        let traj = solve_truncated(&pw.hierarchy(3).unwrap(), &spec, &tg, Quadrature::Trapezoid).unwrap();
        let phis = nls_solve(&pw, &spec, &tg).unwrap();
        let cmp = compare_hierarchy_vs_nls(&traj, &phis, 1.0, 0.5).unwrap();
        assert!(cmp.errors[0].iter().all(|&e| e <= 1e-12), "{:?}", cmp.errors[0]);
        assert!(cmp.errors.iter().flatten().all(|&e| e <= 1e-9), "{:?}", cmp.errors.last());
    }
}
