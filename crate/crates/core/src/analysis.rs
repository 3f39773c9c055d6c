//! Empirical studies of the free Strichartz bound, the Cauchy property in `N`,
//! the boardgame bound on iterated Duhamel terms and the a posteriori
//! spacetime bound on `B-hat Gamma`.
//!
//! Fitted quantities are descriptive only: they summarize the sampled ratios and
//! are not estimates of any sharp constant.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;


use crate::ensemble::{draw_state, EnsembleParams};
use crate::error::{Error, Result};
use crate::grid::TorusGrid;
use crate::math;
use crate::operators::{b_hat, free_evolve_level, InteractionSpec};
pub use crate::operators::collapse_combination_norm;
use crate::quadrature::{integrate, Quadrature};
use crate::solver::{DuhamelStepper, ThetaResidual, TimeGrid, Trajectory, TruncatedStepper, DEFAULT_J_CAP};
use crate::state::{hxi_norm, tail_norm, weighted_sum, HierarchyState, Level, NormParams};

/// Run parameters echoed into every report.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StudyInputs {
    pub norms: NormParams,
    pub d: usize,
    pub m: usize,
    pub l: f64,
    pub p: u32,
    pub mu: f64,
    pub t_final: f64,
    pub dt: f64,
    pub quadrature: Quadrature,
    pub seeds: Vec<u64>,
}

impl StudyInputs {
    pub fn new(grid: &TorusGrid, spec: &InteractionSpec, norms: &NormParams, tg: &TimeGrid, rule: Quadrature) -> Self {
        Self {
            norms: *norms,
            d: grid.dim(),
            m: grid.points(),
            l: grid.period(),
            p: spec.p(),
            mu: spec.mu(),
            t_final: tg.t_final(),
            dt: tg.dt(),
            quadrature: rule,
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

/// A fitted or extracted constant with its residual and sample count.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Fit {
    pub name: String,
    pub value: f64,
    pub residual: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Flag {
    pub name: String,
    pub value: bool,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StudyReport {
    pub study: String,
    pub inputs: StudyInputs,
    pub tables: Vec<Table>,
    pub fits: Vec<Fit>,
    pub flags: Vec<Flag>,
}

impl StudyReport {
    pub fn new(study: &str, inputs: StudyInputs) -> Self {
        Self {
            study: study.into(),
            inputs,
            tables: Vec::new(),
            fits: Vec::new(),
            flags: Vec::new(),
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn fit(&self, name: &str) -> Option<&Fit> {
        self.fits.iter().find(|f| f.name == name)
    }

    pub fn flag(&self, name: &str) -> Option<bool> {
        self.flags.iter().find(|f| f.name == name).map(|f| f.value)
    }

    pub fn push_flag(&mut self, name: &str, value: bool, note: &str) {
        self.flags.push(Flag {
            name: name.into(),
            value,
            note: note.into(),
        });
    }

    pub fn push_fit(&mut self, name: &str, value: f64, residual: f64, samples: usize) {
        self.fits.push(Fit {
            name: name.into(),
            value,
            residual,
            samples,
        });
    }
}

/// Least-squares line `y = slope x + intercept`; returns `(slope, intercept, rms residual)`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Degenerate("line fit needs at least two paired samples".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("line fit with constant abscissa".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs.iter().zip(ys).map(|(x, y)| {
        let r = y - slope * x - intercept;
        r * r
    }).sum();
    Ok((slope, intercept, math::sqrt(ss / n)))
}

fn l2_time(samples: &[f64], dt: f64, rule: Quadrature) -> Result<f64> {
    if samples.len() < 2 {
        return Ok(0.0);
    }
    let sq: Vec<f64> = samples.iter().map(|g| g * g).collect();
    Ok(math::sqrt(integrate(&sq, dt, rule)?.max(0.0)))
}

/// `(int_0^T ||Theta(t)||^2_{H^alpha_xi} dt)^{1/2}` over uniformly spaced samples.
pub fn spacetime_norm(samples: &[HierarchyState], dt: f64, xi: f64, alpha: f64, rule: Quadrature) -> Result<f64> {
    let g = samples.iter().map(|s| hxi_norm(s, xi, alpha)).collect::<Result<Vec<_>>>()?;
    l2_time(&g, dt, rule)
}

fn level_difference_norm(a: Option<&Level>, b: Option<&Level>, alpha: f64) -> Result<f64> {
    match (a, b) {
        (Some(x), Some(y)) => x.sub(y)?.h_alpha_norm(alpha),
        (Some(x), None) | (None, Some(x)) => x.h_alpha_norm(alpha),
        (None, None) => Ok(0.0),
    }
}

/// Unweighted per-level norms of `B-hat (Gamma_a - Gamma_b)` at levels `1..=max(N_a, N_b) - p/2`.
fn bhat_difference_levels(a: &HierarchyState, b: &HierarchyState, spec: &InteractionSpec, alpha: f64) -> Result<Vec<f64>> {
    let h = spec.half();
    let top = a.truncation().max(b.truncation()).saturating_sub(h);
    (1..=top)
        .map(|k| {
            let mut parts = Vec::new();
            if let Some(l) = a.level(k + h) {
                parts.push((1.0, l));
            }
            if let Some(l) = b.level(k + h) {
                parts.push((-1.0, l));
            }
            collapse_combination_norm(a.grid(), spec, k, &parts, alpha)
        })
        .collect()
}

fn difference_levels(a: &HierarchyState, b: &HierarchyState, alpha: f64) -> Result<Vec<f64>> {
    let top = a.truncation().max(b.truncation());
    (1..=top)
        .map(|k| level_difference_norm(a.level(k), b.level(k), alpha))
        .collect()
}

/// Free Strichartz study over a seeded ensemble truncated at `n`.
///
/// Per draw: `||B-hat U(t) Gamma_0||_{L^2_t H^alpha_xi} / ||Gamma_0||_{H^alpha_xi'}` on
/// the window `[0, T]`, plus the per-level ratios
/// `||B U(t) gamma^{(k+p/2)}||_{L^2_t H^alpha} / ||gamma^{(k+p/2)}||_{H^alpha}`.
pub fn strichartz_study(
    ensemble: &EnsembleParams,
    norms: &NormParams,
    grid: &TorusGrid,
    spec: &InteractionSpec,
    n: usize,
    tg: &TimeGrid,
    rule: Quadrature,
) -> Result<StudyReport> {
    if ensemble.size == 0 {
        return Err(crate::error::invalid("ensemble_size", "empty ensemble"));
    }
    if !(norms.xi < norms.xi_prime) {
        return Err(Error::Constraint("xi < xi_prime".into()));
    }
    let mut inputs = StudyInputs::new(grid, spec, norms, tg, rule);
    inputs.seeds = vec![ensemble.seed];
    let mut report = StudyReport::new("strichartz", inputs);
    let mut draws = Table::new(
        "draws",
        &["draw", "lhs_L2Hxi_alpha", "rhs_Hxi_prime_alpha", "ratio", "bhat_ratio_t0"],
    );
    let mut levels = Table::new("levels", &["draw", "k", "lhs_L2H_alpha", "norm_H_alpha", "ratio"]);
    for i in 0..ensemble.size {
        let g0 = draw_state(grid, n, ensemble, i)?;
        let (lhs, per_level) = free_bhat_profile(&g0, spec, tg, rule, norms)?;
        let rhs = hxi_norm(&g0, norms.xi_prime, norms.alpha)?;
        let bh0 = hxi_norm(&b_hat(&g0, spec)?, norms.xi, norms.alpha)?;
        let g_norm = hxi_norm(&g0, norms.xi, norms.alpha)?;
        draws.push(vec![i as f64, lhs, rhs, lhs / rhs, bh0 / g_norm]);
        for (k, l2) in per_level.iter().enumerate() {
            let top = g0.level(k + 1 + spec.half()).expect("level").h_alpha_norm(norms.alpha)?;
            levels.push(vec![i as f64, (k + 1) as f64, *l2, top, l2 / top]);
        }
    }
    let ratios = draws.column("ratio").expect("column");
    let max = ratios.iter().cloned().fold(0.0, f64::max);
    let all_finite = ratios.iter().all(|r| r.is_finite() && *r >= 0.0);
    report.push_fit("max_ratio", max, 0.0, ratios.len());
    // Growth of per-level ratios in k: slope of log(ratio) against log(k).
    let lv_k = levels.column("k").expect("column");
    let lv_r = levels.column("ratio").expect("column");
    let (xs, ys): (Vec<f64>, Vec<f64>) = lv_k
        .iter()
        .zip(&lv_r)
        .filter(|(_, r)| **r > 0.0 && r.is_finite())
        .map(|(k, r)| (math::ln(*k), math::ln(*r)))
        .unzip();
    if let Ok((slope, _, res)) = fit_line(&xs, &ys) {
        report.push_fit("level_ratio_log_slope_in_k", slope, res, xs.len());
    }
    report.push_flag("ratios_finite", all_finite, "every draw gives a finite nonnegative ratio");
    report.push_flag(
        "finite_window",
        true,
        "ratios use the window [0, T]; they bound the full-line ratio from below",
    );
    report.tables.push(draws);
    report.tables.push(levels);
    Ok(report)
}

/// `||B-hat U(t) Gamma_0||_{L^2_t H^alpha_xi}` and the per-level `L^2_t H^alpha` norms.
pub fn free_bhat_profile(
    g0: &HierarchyState,
    spec: &InteractionSpec,
    tg: &TimeGrid,
    rule: Quadrature,
    norms: &NormParams,
) -> Result<(f64, Vec<f64>)> {
    let h = spec.half();
    let top = g0.truncation().saturating_sub(h);
    let mut per_time: Vec<Vec<f64>> = vec![Vec::with_capacity(tg.steps() + 1); top];
    let mut weighted = Vec::with_capacity(tg.steps() + 1);
    for m in 0..=tg.steps() {
        let t = tg.time(m);
        let mut row = Vec::with_capacity(top);
        for k in 1..=top {
            let u = free_evolve_level(g0.level(k + h).expect("level"), t)?;
            let v = collapse_combination_norm(g0.grid(), spec, k, &[(1.0, &u)], norms.alpha)?;
            per_time[k - 1].push(v);
            row.push(v);
        }
        weighted.push(weighted_sum(&row, norms.xi));
    }
    let lhs = l2_time(&weighted, tg.dt(), rule)?;
    let per_level = per_time
        .iter()
        .map(|s| l2_time(s, tg.dt(), rule))
        .collect::<Result<Vec<_>>>()?;
    Ok((lhs, per_level))
}

/// `sum_{k=n1+1}^{n_max} xi'^k ||phi||_{H^alpha}^{2k}`: the tail of factorized data.
pub fn factorized_tail(phi_h_alpha: f64, n1: usize, n_max: usize, xi_prime: f64) -> f64 {
    (n1 + 1..=n_max)
        .map(|k| math::powi(xi_prime * phi_h_alpha * phi_h_alpha, k as i32))
        .sum()
}

struct PairSamples {
    n1: usize,
    n2: usize,
    bhat: Vec<Vec<f64>>,
    traj: Vec<Vec<f64>>,
    tail: f64,
}

fn truncated_sup(rows: &[Vec<f64>], n: usize, xi: f64) -> f64 {
    rows.iter().map(|r| weighted_sum(&r[..n.min(r.len())], xi)).fold(0.0, f64::max)
}

impl PairSamples {
    fn bhat_l2(&self, xi: f64, dt: f64, rule: Quadrature) -> Result<f64> {
        let g: Vec<f64> = self.bhat.iter().map(|r| weighted_sum(r, xi)).collect();
        l2_time(&g, dt, rule)
    }

    fn traj_sup(&self, xi: f64) -> f64 {
        truncated_sup(&self.traj, usize::MAX, xi)
    }
}

/// Cauchy study in the truncation parameter.
///
/// All truncations in `n_list` are marched in lockstep from `P_{<=N} Gamma_0`;
/// `gamma0` must reach at least the largest `N`, and levels beyond it enter the tail.
pub fn cauchy_study(
    gamma0: &HierarchyState,
    n_list: &[usize],
    norms: &NormParams,
    spec: &InteractionSpec,
    tg: &TimeGrid,
    rule: Quadrature,
) -> Result<StudyReport> {
    if n_list.len() < 2 {
        return Err(crate::error::invalid("N_list", "needs at least two truncations"));
    }
    if n_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(crate::error::invalid("N_list", "must be ascending"));
    }
    let h = spec.half();
    if let Some(&bad) = n_list.iter().find(|&&n| n < 1 + h) {
        return Err(Error::Constraint(alloc::format!("N >= 1 + p/2 (got N = {bad})")));
    }
    let n_max = *n_list.last().expect("nonempty");
    if gamma0.truncation() < n_max {
        return Err(crate::error::invalid("gamma0", "must reach the largest truncation"));
    }
    let grid = gamma0.grid().clone();
    let mut report = StudyReport::new("cauchy", StudyInputs::new(&grid, spec, norms, tg, rule));
    report.push_flag(
        "nesting_xi_eta",
        norms.nesting_holds(),
        "xi < eta xi2 < eta^2 xi_prime",
    );

    let mut pairs = Vec::new();
    let mut shared_exact = true;
    for (a, &n1) in n_list.iter().enumerate() {
        for &n2 in &n_list[a + 1..] {
            let (p1, p2) = (gamma0.truncate(n1), gamma0.truncate(n2));
            for k in 1..=n1 {
                let d = level_difference_norm(p1.level(k), p2.level(k), norms.alpha)?;
                shared_exact &= d == 0.0;
            }
            pairs.push(PairSamples {
                n1,
                n2,
                bhat: Vec::new(),
                traj: Vec::new(),
                tail: tail_norm(gamma0, n1, norms.xi_prime, norms.alpha)?,
            });
        }
    }
    report.push_flag(
        "shared_levels_identical",
        shared_exact,
        "levels <= N1 of the truncated initial data agree exactly",
    );

    let mut steppers = n_list
        .iter()
        .map(|&n| TruncatedStepper::new(&gamma0.truncate(n), spec, tg, rule))
        .collect::<Result<Vec<_>>>()?;
    let idx = |n: usize| n_list.iter().position(|&x| x == n).expect("listed");
    loop {
        for pair in pairs.iter_mut() {
            let s1 = steppers[idx(pair.n1)].state();
            let s2 = steppers[idx(pair.n2)].state();
            pair.bhat.push(bhat_difference_levels(s1, s2, spec, norms.alpha)?);
            pair.traj.push(difference_levels(s1, s2, norms.alpha)?);
        }
        let mut more = false;
        for st in steppers.iter_mut() {
            more |= st.advance()?;
        }
        if !more {
            break;
        }
    }

    let mut table = Table::new(
        "pairs",
        &[
            "N1",
            "N2",
            "bhat_diff_L2Hxi_alpha",
            "traj_diff_LinfHxi_alpha",
            "traj_diff_shared_LinfHxi_alpha",
            "tail_xi_prime",
            "ratio_L2Hxi_over_tail",
            "ratio_LinfHxi_over_tail",
        ],
    );
    let mut ratios = Vec::new();
    for pair in &pairs {
        let b = pair.bhat_l2(norms.xi, tg.dt(), rule)?;
        let s = pair.traj_sup(norms.xi);
        let (rb, rs) = if pair.tail > 0.0 {
            (b / pair.tail, s / pair.tail)
        } else {
            (0.0, 0.0)
        };
        ratios.push(rb);
        let shared = truncated_sup(&pair.traj, pair.n1, norms.xi);
        table.push(vec![pair.n1 as f64, pair.n2 as f64, b, s, shared, pair.tail, rb, rs]);
    }
    let max = ratios.iter().cloned().fold(0.0, f64::max);
    report.push_fit("C_T_xi_xi_prime", max, 0.0, ratios.len());

    // eta-hat: largest xi/xi' before the worst ratio doubles relative to the configured xi.
    let worst = |x: f64| -> Result<f64> {
        let mut m = 0.0f64;
        for pair in &pairs {
            if pair.tail > 0.0 {
                m = m.max(pair.bhat_l2(x * norms.xi_prime, tg.dt(), rule)? / pair.tail);
            }
        }
        Ok(m)
    };
    let x0 = norms.xi / norms.xi_prime;
    let base = worst(x0)?;
    let (eta_hat, capped) = if base == 0.0 || worst(1.0)? < 2.0 * base {
        (1.0, true)
    } else {
        let (mut lo, mut hi) = (x0, 1.0);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if worst(mid)? < 2.0 * base {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo, false)
    };
    report.push_fit("eta_hat", eta_hat, 0.0, pairs.len());
    report.push_flag("eta_hat_capped", capped, "ratio did not double for xi/xi' up to 1");
    report.tables.push(table);
    Ok(report)
}

/// Boardgame probe: `||B Duh_j(Gamma)^{(n+p/2)}||_{L^2 H^alpha}` against
/// `||B U(t) gamma^{(n+j p/2)}||_{L^2 H^alpha}` for each `n` and `j`.
pub fn boardgame_probe(
    ns: &[usize],
    js: &[usize],
    data: &HierarchyState,
    spec: &InteractionSpec,
    tg: &TimeGrid,
    rule: Quadrature,
    alpha: f64,
) -> Result<StudyReport> {
    let h = spec.half();
    let j_max = js.iter().copied().max().unwrap_or(0);
    if js.is_empty() || ns.is_empty() || js.contains(&0) || ns.contains(&0) {
        return Err(crate::error::invalid("j/n", "ranges must be nonempty and start at 1"));
    }
    if j_max > DEFAULT_J_CAP {
        return Err(crate::error::invalid("j_max", alloc::format!("exceeds the cap {DEFAULT_J_CAP}")));
    }
    for &n in ns {
        if n + j_max * h > data.truncation() {
            return Err(Error::Constraint(alloc::format!(
                "n + j p/2 <= N (n = {n}, j = {j_max}, N = {})",
                data.truncation()
            )));
        }
    }
    let grid = data.grid().clone();
    let norms = NormParams {
        alpha,
        ..NormParams::default()
    };
    let mut report = StudyReport::new("boardgame", StudyInputs::new(&grid, spec, &norms, tg, rule));
    let mut table = Table::new("ratios", &["n", "j", "lhs_L2H_alpha", "rhs_L2H_alpha", "ratio", "degenerate"]);

    let mut stepper = DuhamelStepper::new(data, spec, tg, rule, j_max)?;
    // samples[(n, j)] = (lhs per time, rhs per time)
    let mut lhs: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); js.len()]; ns.len()];
    let mut rhs: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); js.len()]; ns.len()];
    loop {
        let t = stepper.time();
        for (a, &n) in ns.iter().enumerate() {
            for (b, &j) in js.iter().enumerate() {
                let term = stepper.term(j, n + h)?;
                let l = match term {
                    Some(term) => collapse_combination_norm(&grid, spec, n, &[(1.0, term)], alpha)?,
                    None => 0.0,
                };
                let m = n + j * h;
                let u = free_evolve_level(data.level(m).expect("level"), t)?;
                let r = collapse_combination_norm(&grid, spec, m - h, &[(1.0, &u)], alpha)?;
                lhs[a][b].push(l);
                rhs[a][b].push(r);
            }
        }
        if !stepper.advance()? {
            break;
        }
    }

    let mut intercepts = Vec::new();
    let mut decaying = true;
    for (a, &n) in ns.iter().enumerate() {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut prev = f64::INFINITY;
        for (b, &j) in js.iter().enumerate() {
            let l = l2_time(&lhs[a][b], tg.dt(), rule)?;
            let r = l2_time(&rhs[a][b], tg.dt(), rule)?;
            // Collapses that vanish up to roundoff relative to the data are 0/0.
            let scale = data.level(n + j * h).expect("level").h_alpha_norm(alpha)? * math::sqrt(tg.t_final());
            let floor = 1e-10 * scale;
            let degenerate = !(r > floor) || !(l > floor * 1e-3);
            let ratio = if degenerate { 0.0 } else { l / r };
            table.push(vec![n as f64, j as f64, l, r, ratio, if degenerate { 1.0 } else { 0.0 }]);
            if !degenerate {
                decaying &= ratio <= prev;
                prev = ratio;
                xs.push(j as f64);
                ys.push(math::ln(ratio));
            }
        }
        if let Ok((slope, intercept, res)) = fit_line(&xs, &ys) {
            report.push_fit(&alloc::format!("log_ratio_slope_n{n}"), slope, res, xs.len());
            // ratio ~ n C0^n (c0 T)^{j/2}
            report.push_fit(
                &alloc::format!("c0_hat_n{n}"),
                math::exp(2.0 * slope) / tg.t_final(),
                res,
                xs.len(),
            );
            intercepts.push((n as f64, intercept - math::ln(n as f64)));
        }
    }
    if intercepts.len() >= 2 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = intercepts.iter().cloned().unzip();
        let (slope, _, res) = fit_line(&xs, &ys)?;
        report.push_fit("C0_hat", math::exp(slope), res, xs.len());
    } else if let Some(&(n, c)) = intercepts.first() {
        report.push_fit("C0_hat", math::exp(c / n), 0.0, 1);
    }
    report.push_flag("geometric_decay_in_j", decaying, "ratios non-increasing in j");
    report.tables.push(table);
    Ok(report)
}

/// Summary numbers of [`km_report`] for one truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KmSummary {
    pub n: usize,
    pub linf_hxi: f64,
    pub spacetime_bhat: f64,
    pub theta_residual: f64,
}

fn km_time_row(state: &HierarchyState, spec: &InteractionSpec, norms: &NormParams) -> Result<(f64, f64)> {
    let g = hxi_norm(state, norms.xi, norms.alpha)?;
    let zero = HierarchyState::zeros(state.grid(), state.truncation())?;
    let b = weighted_sum(&bhat_difference_levels(state, &zero, spec, norms.alpha)?, norms.xi);
    Ok((g, b))
}

/// A posteriori report on a recorded trajectory.
pub fn km_report(traj: &Trajectory, norms: &NormParams, rule: Quadrature) -> Result<StudyReport> {
    let init = traj.states.first().ok_or_else(|| Error::TimeGrid("empty trajectory".into()))?;
    let tg = TimeGrid::from_steps(traj.dt().max(f64::MIN_POSITIVE), traj.states.len() - 1)?;
    let mut report = StudyReport::new("km", StudyInputs::new(init.grid(), &traj.spec, norms, &tg, rule));
    let mut table = Table::new("times", &["t", "norm_Hxi_alpha", "bhat_Hxi_alpha"]);
    let mut theta = ThetaResidual::new(&traj.spec, init.truncation(), init, norms.alpha, norms.xi, rule, traj.dt())?;
    let mut linf = 0.0f64;
    let mut bs = Vec::new();
    for (t, s) in traj.times.iter().zip(&traj.states) {
        let (g, b) = km_time_row(s, &traj.spec, norms)?;
        linf = linf.max(g);
        bs.push(b);
        table.push(vec![*t, g, b]);
        theta.push(s)?;
    }
    let summary = KmSummary {
        n: init.truncation(),
        linf_hxi: linf,
        spacetime_bhat: l2_time(&bs, traj.dt(), rule)?,
        theta_residual: theta.value()?,
    };
    push_km_summary(&mut report, &[summary]);
    report.tables.push(table);
    Ok(report)
}

/// Streams the truncated solver and evaluates [`KmSummary`] without storing the trajectory.
pub fn km_summary_streaming(
    init: &HierarchyState,
    spec: &InteractionSpec,
    tg: &TimeGrid,
    solver_rule: Quadrature,
    residual_rule: Quadrature,
    norms: &NormParams,
    reference: Option<&HierarchyState>,
) -> Result<KmSummary> {
    let reference = reference.unwrap_or(init);
    let mut st = TruncatedStepper::new(init, spec, tg, solver_rule)?;
    let mut theta = ThetaResidual::new(spec, init.truncation(), reference, norms.alpha, norms.xi, residual_rule, tg.dt())?;
    let mut linf = 0.0f64;
    let mut bs = Vec::new();
    loop {
        let (g, b) = km_time_row(st.state(), spec, norms)?;
        linf = linf.max(g);
        bs.push(b);
        theta.push(st.state())?;
        if !st.advance()? {
            break;
        }
    }
    Ok(KmSummary {
        n: init.truncation(),
        linf_hxi: linf,
        spacetime_bhat: l2_time(&bs, tg.dt(), residual_rule)?,
        theta_residual: theta.value()?,
    })
}

fn push_km_summary(report: &mut StudyReport, rows: &[KmSummary]) {
    let mut t = Table::new(
        "summary",
        &["N", "norm_LinfHxi_alpha", "bhat_L2Hxi_alpha", "theta_residual", "bhat_step_change"],
    );
    let mut prev: Option<f64> = None;
    for r in rows {
        let change = prev.map(|p| (r.spacetime_bhat - p).abs()).unwrap_or(f64::NAN);
        t.push(vec![r.n as f64, r.linf_hxi, r.spacetime_bhat, r.theta_residual, change]);
        prev = Some(r.spacetime_bhat);
    }
    report.tables.push(t);
}

/// [`km_summary_streaming`] over several truncations of the same data.
pub fn km_sweep(
    gamma0: &HierarchyState,
    n_list: &[usize],
    spec: &InteractionSpec,
    tg: &TimeGrid,
    rule: Quadrature,
    norms: &NormParams,
) -> Result<StudyReport> {
    let mut report = StudyReport::new("km", StudyInputs::new(gamma0.grid(), spec, norms, tg, rule));
    let rows = n_list
        .iter()
        .map(|&n| {
            let init = gamma0.truncate(n);
            km_summary_streaming(&init, spec, tg, rule, rule, norms, Some(gamma0))
        })
        .collect::<Result<Vec<_>>>()?;
    let changes: Vec<f64> = rows.windows(2).map(|w| (w[1].spacetime_bhat - w[0].spacetime_bhat).abs()).collect();
    let shrinking = changes.windows(2).all(|w| w[1] <= w[0]);
    report.push_flag("bhat_changes_shrink", shrinking, "successive spacetime-norm changes decrease in N");
    push_km_summary(&mut report, &rows);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::nls::WaveFunction;
    use crate::solver::solve_truncated;
    use approx::assert_relative_eq;
    use core::f64::consts::PI;

    fn grid() -> TorusGrid {
        make_grid(1, 8, 2.0 * PI).unwrap()
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let (s, c, r) = fit_line(&xs, &ys).unwrap();
        assert_relative_eq!(s, 2.0, epsilon = 1e-14);
        assert_relative_eq!(c, -1.0, epsilon = 1e-14);
        assert!(r < 1e-14);
        assert!(fit_line(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn spacetime_norm_of_constant_and_zero() {
        let g = grid();
        let spec = InteractionSpec::new(2, 1.0).unwrap();
        let phi = WaveFunction::default_test_field(&g).unwrap();
        let s = phi.hierarchy(2).unwrap();
        let c = hxi_norm(&s, 0.5, 1.0).unwrap();
        let samples = vec![s.clone(); 11];
        let v = spacetime_norm(&samples, 0.01, 0.5, 1.0, Quadrature::Simpson).unwrap();
        assert_relative_eq!(v, c * math::sqrt(0.1), max_relative = 1e-12);
        let z = vec![HierarchyState::zeros(&g, 2).unwrap(); 5];
        assert_eq!(spacetime_norm(&z, 0.01, 0.5, 1.0, Quadrature::Trapezoid).unwrap(), 0.0);
        let _ = spec;
    }

    #[test]
    fn plane_wave_studies_are_degenerate_or_zero() {
        let g = grid();
        let spec = InteractionSpec::new(2, 1.0).unwrap();
        let pw = WaveFunction::plane_wave(&g, &[1]).unwrap().hierarchy(4).unwrap();
        let tg = TimeGrid::new(0.01, 1e-3).unwrap();
        let norms = NormParams::default();
        let (lhs, _) = free_bhat_profile(&pw, &spec, &tg, Quadrature::Trapezoid, &norms).unwrap();
        assert!(lhs < 1e-12);
        let c = cauchy_study(&pw, &[2, 3, 4], &norms, &spec, &tg, Quadrature::Trapezoid).unwrap();
        for r in &c.table("pairs").unwrap().rows {
            // Levels above N1 differ by the free tail; shared levels agree.
            assert!(r[2] < 1e-10 && r[4] < 1e-10, "{r:?}");
        }
        assert_eq!(c.flag("shared_levels_identical"), Some(true));
        let b = boardgame_probe(&[1], &[1, 2], &pw, &spec, &tg, Quadrature::Trapezoid, 1.0).unwrap();
        assert!(b.table("ratios").unwrap().column("degenerate").unwrap().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn km_report_on_zero_and_plane_wave() {
        let g = grid();
        let spec = InteractionSpec::new(2, 1.0).unwrap();
        let tg = TimeGrid::new(0.01, 1e-3).unwrap();
        let norms = NormParams::default();
        let zero = HierarchyState::zeros(&g, 3).unwrap();
        let traj = solve_truncated(&zero, &spec, &tg, Quadrature::Trapezoid).unwrap();
        let rep = km_report(&traj, &norms, Quadrature::Trapezoid).unwrap();
        let row = &rep.table("summary").unwrap().rows[0];
        assert_eq!(&row[1..4], &[0.0, 0.0, 0.0]);

        let pw = WaveFunction::plane_wave(&g, &[2]).unwrap().hierarchy(3).unwrap();
        let traj = solve_truncated(&pw, &spec, &tg, Quadrature::Trapezoid).unwrap();
        let rep = km_report(&traj, &norms, Quadrature::Trapezoid).unwrap();
        let norms_t = rep.table("times").unwrap().column("norm_Hxi_alpha").unwrap();
        assert!(norms_t.iter().all(|v| (v - norms_t[0]).abs() < 1e-12));
        assert!(rep.table("summary").unwrap().rows[0][2] < 1e-10);
    }

    #[test]
    fn factorized_tail_matches_direct_norms() {
        let g = grid();
        let phi = WaveFunction::default_test_field(&g).unwrap();
        let s = phi.hierarchy(6).unwrap();
        let direct = tail_norm(&s, 3, 0.2, 1.0).unwrap();
        let closed = factorized_tail(phi.h_alpha_norm(1.0).unwrap(), 3, 6, 0.2);
        assert_relative_eq!(direct, closed, max_relative = 1e-12);
    }
}
