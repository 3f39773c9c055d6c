//! Truncated hierarchy solvers and the iterated Duhamel expansion.
//!
//! Levels `n > N - p/2` evolve freely. Coupled levels are marched top-down in
//! the interaction picture:
//! `c^{(n)}(t_m) = P(t_m) [c^{(n)}(0) - i mu Q_m(f)]`, `f_i = P(-t_i) B c^{(n+p/2)}(t_i)`,
//! where `P` is the exact free phase and `Q_m` the running quadrature. The same
//! march computes the Duhamel terms `Duh_j`, whose channels differ only in
//! their initial data and source.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::TorusGrid;
use crate::marginal::{element_count, half_len, Basis, Marginal};
use crate::math;
use crate::operators::{
    apply_phases, collapse_combination_norm, collapse_into_modal, collapse_pairs, free_evolve_level, half_phases,
    pairs_set_phased, InteractionSpec,
};
use crate::quadrature::{integrate, Quadrature, RunningIntegral};
use crate::state::{weighted_sum, HierarchyState, Level};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Total dense entries a recorded [`Trajectory`] may hold.
pub const TRAJECTORY_GUARD: u128 = 1 << 26;

/// Uniform time grid `t_m = m dt`, `m = 0..S`, with `S dt = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TimeGrid {
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::TimeGrid(alloc::format!("dt = {dt} must be positive")));
        }
        if !(t_final >= 0.0) || !t_final.is_finite() {
            return Err(Error::TimeGrid(alloc::format!("T = {t_final} must be finite and >= 0")));
        }
        let s = math::round(t_final / dt);
        if (s * dt - t_final).abs() > 1e-9 * t_final.max(dt) {
            return Err(Error::TimeGrid(alloc::format!("dt = {dt} does not divide T = {t_final}")));
        }
        Ok(Self { dt, steps: s as usize })
    }

    pub fn from_steps(dt: f64, steps: usize) -> Result<Self> {
        Self::new(dt * steps as f64, dt)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn t_final(&self) -> f64 {
        self.dt * self.steps as f64
    }

    pub fn time(&self, m: usize) -> f64 {
        self.dt * m as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|m| self.time(m)).collect()
    }

    /// Same horizon with half the step.
    pub fn halved(&self) -> Self {
        Self {
            dt: 0.5 * self.dt,
            steps: 2 * self.steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SolverKind {
    Volterra,
    Oracle,
}

/// Time-sampled hierarchy states on a uniform grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<HierarchyState>,
    pub spec: InteractionSpec,
    pub solver: SolverKind,
    pub quadrature: Option<Quadrature>,
}

impl Trajectory {
    pub fn dt(&self) -> f64 {
        if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }

    pub fn last(&self) -> &HierarchyState {
        self.states.last().expect("trajectory holds at least the initial state")
    }
}

enum Kind {
    Free {
        init: Level,
    },
    Driven {
        c0: Option<Vec<Complex64>>,
        source: usize,
        integral: RunningIntegral<Vec<Complex64>>,
        spare: Option<Vec<Complex64>>,
    },
}

/// A set of channels, each either freely evolving or driven by `B` of another channel.
struct Network {
    grid: TorusGrid,
    spec: InteractionSpec,
    kinds: Vec<Kind>,
    levels: Vec<usize>,
    order: Vec<usize>,
}

fn pair_mut(values: &mut [Level], i: usize, s: usize) -> (&mut Level, &Level) {
    assert_ne!(i, s);
    if i < s {
        let (a, b) = values.split_at_mut(s);
        (&mut a[i], &b[0])
    } else {
        let (a, b) = values.split_at_mut(i);
        (&mut b[0], &a[s])
    }
}

impl Network {
    /// Evaluates every channel at time `t`, which must be the next grid time.
    fn evaluate(&mut self, t: f64, values: &mut [Level]) -> Result<()> {
        let coef = Complex64::new(0.0, -self.spec.mu());
        for &i in &self.order {
            match &mut self.kinds[i] {
                Kind::Free { init } => {
                    values[i] = free_evolve_level(init, t)?;
                }
                Kind::Driven {
                    c0,
                    source,
                    integral,
                    spare,
                } => {
                    let k = self.levels[i];
                    let nu = half_len(&self.grid, k);
                    let (out, src) = pair_mut(values, i, *source);
                    let mut f = spare.take().unwrap_or_else(|| vec![ZERO; nu * nu]);
                    match src {
                        Level::Factored(g) => pairs_set_phased(&collapse_pairs(g, &self.spec)?, &self.grid, k, -t, &mut f)?,
                        Level::Dense(_) => {
                            f.iter_mut().for_each(|z| *z = ZERO);
                            collapse_into_modal(src, &self.spec, ONE, &mut f)?;
                            apply_phases(&self.grid, k, -t, &mut f)?;
                        }
                    }
                    *spare = integral.push(f);
                    let Level::Dense(m) = out else {
                        return Err(Error::Degenerate("driven channel lost its dense value".into()));
                    };
                    let terms: Vec<(Complex64, &Vec<Complex64>)> =
                        integral.terms().into_iter().map(|(w, v)| (coef * w, v)).collect();
                    let (pu, pv) = half_phases(&self.grid, k, t)?;
                    let data = m.data_mut();
                    // c = P(t) [c0 - i mu Q], one pass per row.
                    for (r, (row, a)) in data.chunks_exact_mut(nu).zip(&pu).enumerate() {
                        let span = r * nu..(r + 1) * nu;
                        match c0 {
                            Some(c) => row.copy_from_slice(&c[span.clone()]),
                            None => row.iter_mut().for_each(|z| *z = ZERO),
                        }
                        for (w, v) in &terms {
                            for (x, y) in row.iter_mut().zip(&v[span.clone()]) {
                                *x += w * y;
                            }
                        }
                        for (x, b) in row.iter_mut().zip(&pv) {
                            *x *= a * b;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn initial_values(&self) -> Result<Vec<Level>> {
        self.kinds
            .iter()
            .zip(&self.levels)
            .map(|(kind, &k)| match kind {
                Kind::Free { init } => Ok(init.clone()),
                Kind::Driven { .. } => Ok(Level::Dense(Marginal::zeros_in(&self.grid, k, Basis::Modal)?)),
            })
            .collect()
    }
}

fn check_init(init: &HierarchyState) -> Result<()> {
    if init.truncation() < 1 {
        return Err(Error::LevelOutOfRange {
            level: 0,
            reason: "truncation N must be at least 1".into(),
        });
    }
    Ok(())
}

/// Streaming Volterra solver for the truncated hierarchy.
pub struct TruncatedStepper {
    net: Network,
    state: HierarchyState,
    tg: TimeGrid,
    step: usize,
    rule: Quadrature,
}

impl TruncatedStepper {
    pub fn new(init: &HierarchyState, spec: &InteractionSpec, tg: &TimeGrid, rule: Quadrature) -> Result<Self> {
        check_init(init)?;
        let grid = init.grid().clone();
        let n = init.truncation();
        let h = spec.half();
        let mut kinds = Vec::with_capacity(n);
        for k in 1..=n {
            let level = init.level(k).expect("level in range");
            if k + h > n {
                kinds.push(Kind::Free { init: level.clone() });
            } else {
                let c0 = level.to_dense(Basis::Modal)?.into_data();
                kinds.push(Kind::Driven {
                    c0: Some(c0),
                    source: k + h - 1,
                    integral: RunningIntegral::new(rule, tg.dt()),
                    spare: None,
                });
            }
        }
        let mut net = Network {
            grid: grid.clone(),
            spec: *spec,
            kinds,
            levels: (1..=n).collect(),
            order: (0..n).rev().collect(),
        };
        let mut values = net.initial_values()?;
        net.evaluate(0.0, &mut values)?;
        Ok(Self {
            net,
            state: HierarchyState::new(&grid, values)?,
            tg: *tg,
            step: 0,
            rule,
        })
    }

    pub fn state(&self) -> &HierarchyState {
        &self.state
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.tg.time(self.step)
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.tg
    }

    pub fn rule(&self) -> Quadrature {
        self.rule
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.tg.steps()
    }

    /// Advances one step; returns `false` once the final time has been reached.
    pub fn advance(&mut self) -> Result<bool> {
        if self.is_done() {
            return Ok(false);
        }
        self.step += 1;
        let t = self.tg.time(self.step);
        self.net.evaluate(t, self.state.levels_mut())?;
        Ok(true)
    }
}

fn dense_entries(state: &HierarchyState) -> u128 {
    state
        .levels()
        .iter()
        .filter(|l| l.is_dense())
        .map(|l| element_count(state.grid(), l.k()))
        .sum()
}

fn check_trajectory_size(state: &HierarchyState, samples: usize) -> Result<()> {
    let total = dense_entries(state) * samples as u128;
    if total > TRAJECTORY_GUARD {
        return Err(Error::TooLarge { elements: total });
    }
    Ok(())
}

/// Solves the truncated hierarchy with the Volterra march, recording every step.
pub fn solve_truncated(
    init: &HierarchyState,
    spec: &InteractionSpec,
    tg: &TimeGrid,
    rule: Quadrature,
) -> Result<Trajectory> {
    solve_truncated_every(init, spec, tg, rule, 1)
}

/// As [`solve_truncated`], recording every `stride`-th step (which must divide `S`).
pub fn solve_truncated_every(
    init: &HierarchyState,
    spec: &InteractionSpec,
    tg: &TimeGrid,
    rule: Quadrature,
    stride: usize,
) -> Result<Trajectory> {
    if stride == 0 || tg.steps() % stride != 0 {
        return Err(Error::TimeGrid(alloc::format!("stride {stride} does not divide {} steps", tg.steps())));
    }
    let mut st = TruncatedStepper::new(init, spec, tg, rule)?;
    check_trajectory_size(st.state(), tg.steps() / stride + 1)?;
    let mut times = vec![0.0];
    let mut states = vec![st.state().clone()];
    while st.advance()? {
        if st.step_index() % stride == 0 {
            times.push(st.time());
            states.push(st.state().clone());
        }
    }
    Ok(Trajectory {
        times,
        states,
        spec: *spec,
        solver: SolverKind::Volterra,
        quadrature: Some(rule),
    })
}

/// Integrating-factor RK4 on the full truncated system, as an independent check.
pub struct OracleStepper {
    grid: TorusGrid,
    spec: InteractionSpec,
    init: HierarchyState,
    /// Interaction-picture coefficients of coupled levels `1..=N - p/2`.
    y: Vec<Vec<Complex64>>,
    state: HierarchyState,
    tg: TimeGrid,
    step: usize,
}

impl OracleStepper {
    pub fn new(init: &HierarchyState, spec: &InteractionSpec, tg: &TimeGrid) -> Result<Self> {
        check_init(init)?;
        let n = init.truncation();
        let coupled = n.saturating_sub(spec.half());
        let y = (1..=coupled)
            .map(|k| Ok(init.level(k).expect("level").to_dense(Basis::Modal)?.into_data()))
            .collect::<Result<Vec<_>>>()?;
        let mut s = Self {
            grid: init.grid().clone(),
            spec: *spec,
            init: init.clone(),
            y,
            state: init.clone(),
            tg: *tg,
            step: 0,
        };
        s.state = s.physical(0.0)?;
        Ok(s)
    }

    /// Level `k` at time `t` from interaction-picture data `ys`.
    fn level_at(&self, k: usize, t: f64, ys: &[Vec<Complex64>]) -> Result<Level> {
        if k <= ys.len() {
            let mut data = ys[k - 1].clone();
            apply_phases(&self.grid, k, t, &mut data)?;
            Ok(Level::Dense(Marginal::from_data(&self.grid, k, Basis::Modal, data)?))
        } else {
            free_evolve_level(self.init.level(k).expect("level"), t)
        }
    }

    fn physical(&self, t: f64) -> Result<HierarchyState> {
        let levels = (1..=self.init.truncation())
            .map(|k| self.level_at(k, t, &self.y))
            .collect::<Result<Vec<_>>>()?;
        HierarchyState::new(&self.grid, levels)
    }

    /// `dy^{(k)}/dt = -i mu P(-t) B P(t) y^{(k+p/2)}`.
    fn rate(&self, t: f64, ys: &[Vec<Complex64>]) -> Result<Vec<Vec<Complex64>>> {
        let h = self.spec.half();
        let coef = Complex64::new(0.0, -self.spec.mu());
        (1..=ys.len())
            .map(|k| {
                let src = self.level_at(k + h, t, ys)?;
                let nu = half_len(&self.grid, k);
                let mut out = vec![ZERO; nu * nu];
                collapse_into_modal(&src, &self.spec, coef, &mut out)?;
                apply_phases(&self.grid, k, -t, &mut out)?;
                Ok(out)
            })
            .collect()
    }

    pub fn state(&self) -> &HierarchyState {
        &self.state
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.tg.time(self.step)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.tg.steps()
    }

    pub fn advance(&mut self) -> Result<bool> {
        if self.is_done() {
            return Ok(false);
        }
        let dt = self.tg.dt();
        let t = self.time();
        let shifted = |base: &[Vec<Complex64>], k: &[Vec<Complex64>], a: f64| -> Vec<Vec<Complex64>> {
            base.iter()
                .zip(k)
                .map(|(y, d)| y.iter().zip(d).map(|(a0, b)| a0 + b * a).collect())
                .collect()
        };
        let k1 = self.rate(t, &self.y)?;
        let k2 = self.rate(t + 0.5 * dt, &shifted(&self.y, &k1, 0.5 * dt))?;
        let k3 = self.rate(t + 0.5 * dt, &shifted(&self.y, &k2, 0.5 * dt))?;
        let k4 = self.rate(t + dt, &shifted(&self.y, &k3, dt))?;
        for (lvl, y) in self.y.iter_mut().enumerate() {
            for (i, z) in y.iter_mut().enumerate() {
                *z += (k1[lvl][i] + (k2[lvl][i] + k3[lvl][i]) * 2.0 + k4[lvl][i]) * (dt / 6.0);
            }
        }
        self.step += 1;
        self.state = self.physical(self.time())?;
        Ok(true)
    }
}

/// Solves the truncated hierarchy with integrating-factor RK4, recording every step.
pub fn solve_oracle(init: &HierarchyState, spec: &InteractionSpec, tg: &TimeGrid) -> Result<Trajectory> {
    let mut st = OracleStepper::new(init, spec, tg)?;
    check_trajectory_size(st.state(), tg.steps() + 1)?;
    let mut times = vec![0.0];
    let mut states = vec![st.state().clone()];
    while st.advance()? {
        times.push(st.time());
        states.push(st.state().clone());
    }
    Ok(Trajectory {
        times,
        states,
        spec: *spec,
        solver: SolverKind::Oracle,
        quadrature: None,
    })
}

/// Default cap on the Duhamel order `j`.
pub const DEFAULT_J_CAP: usize = 4;

/// Marches all iterated Duhamel terms `Duh_j(Gamma_0)^{(m)}` on the time grid.
///
/// `Duh_1^{(m)}(t) = U(t) gamma_0^{(m)}` and
/// `Duh_j^{(m)}(t) = -i mu int_0^t U(t-s) B Duh_{j-1}^{(m+p/2)}(s) ds`, which is
/// the `(j-1)`-fold nested integral with overall prefactor `(-i mu)^{j-1}`.
pub struct DuhamelStepper {
    net: Network,
    values: Vec<Level>,
    index: BTreeMap<(usize, usize), usize>,
    spec: InteractionSpec,
    grid: TorusGrid,
    n: usize,
    j_cap: usize,
    tg: TimeGrid,
    step: usize,
}

impl DuhamelStepper {
    pub fn new(
        init: &HierarchyState,
        spec: &InteractionSpec,
        tg: &TimeGrid,
        rule: Quadrature,
        j_cap: usize,
    ) -> Result<Self> {
        check_init(init)?;
        if j_cap == 0 {
            return Err(crate::error::invalid("j_max", "must be at least 1"));
        }
        let n = init.truncation();
        let h = spec.half();
        let grid = init.grid().clone();
        // Channels (j, m) with m >= 1 + h and m + (j-1) h <= N, created by decreasing m.
        let mut index = BTreeMap::new();
        let mut kinds = Vec::new();
        let mut levels = Vec::new();
        for m in (1 + h..=n).rev() {
            for j in 1..=j_cap {
                if m + (j - 1) * h > n {
                    break;
                }
                let kind = if j == 1 {
                    Kind::Free {
                        init: init.level(m).expect("level").clone(),
                    }
                } else {
                    Kind::Driven {
                        c0: None,
                        source: index[&(j - 1, m + h)],
                        integral: RunningIntegral::new(rule, tg.dt()),
                        spare: None,
                    }
                };
                index.insert((j, m), kinds.len());
                kinds.push(kind);
                levels.push(m);
            }
        }
        let order = (0..kinds.len()).collect();
        let mut net = Network {
            grid: grid.clone(),
            spec: *spec,
            kinds,
            levels,
            order,
        };
        let mut values = net.initial_values()?;
        net.evaluate(0.0, &mut values)?;
        Ok(Self {
            net,
            values,
            index,
            spec: *spec,
            grid,
            n,
            j_cap,
            tg: *tg,
            step: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.tg.time(self.step)
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.tg.steps()
    }

    pub fn advance(&mut self) -> Result<bool> {
        if self.is_done() {
            return Ok(false);
        }
        self.step += 1;
        let t = self.tg.time(self.step);
        self.net.evaluate(t, &mut self.values)?;
        Ok(true)
    }

    /// `Duh_j^{(m)}` at the current time; `None` when the term vanishes by truncation.
    pub fn term(&self, j: usize, m: usize) -> Result<Option<&Level>> {
        if j == 0 {
            return Err(crate::error::invalid("j", "must be at least 1"));
        }
        let h = self.spec.half();
        if m < 1 + h || m + (j - 1) * h > self.n {
            return Ok(None);
        }
        if j > self.j_cap {
            return Err(crate::error::invalid("j", alloc::format!("exceeds the cap {}", self.j_cap)));
        }
        Ok(self.index.get(&(j, m)).map(|&i| &self.values[i]))
    }

    /// Number of Duhamel terms contributing to level `n`, `floor((N - n) / (p/2))`.
    pub fn term_count(&self, n: usize) -> usize {
        (self.n.saturating_sub(n)) / self.spec.half()
    }

    /// `(B-hat Gamma_N)^{(n)}(t) = sum_j B Duh_j^{(n+p/2)}(t)`, as modal coefficients.
    pub fn reconstruct_bhat(&self, n: usize) -> Result<Marginal> {
        let h = self.spec.half();
        if n == 0 || n + h > self.n {
            return Err(Error::LevelOutOfRange {
                level: n,
                reason: alloc::format!("reconstruction needs 1 <= n <= N - p/2 = {}", self.n.saturating_sub(h)),
            });
        }
        let count = self.term_count(n);
        if count > self.j_cap {
            return Err(crate::error::invalid(
                "j_max",
                alloc::format!("level {n} needs {count} Duhamel terms, cap is {}", self.j_cap),
            ));
        }
        let mut out = Marginal::zeros_in(&self.grid, n, Basis::Modal)?;
        for j in 1..=count {
            if let Some(term) = self.term(j, n + h)? {
                collapse_into_modal(term, &self.spec, ONE, out.data_mut())?;
            }
        }
        Ok(out)
    }
}

/// `Duh_j(Gamma_0)^{(n+p/2)}` at the final time of `tg`.
pub fn duhamel_term(
    j: usize,
    n: usize,
    init: &HierarchyState,
    spec: &InteractionSpec,
    tg: &TimeGrid,
    rule: Quadrature,
) -> Result<Level> {
    if j == 0 {
        return Err(crate::error::invalid("j", "must be at least 1"));
    }
    let m = n + spec.half();
    if n == 0 || m + (j - 1) * spec.half() > init.truncation() {
        return Level::zero(init.grid(), m);
    }
    let mut st = DuhamelStepper::new(init, spec, tg, rule, j)?;
    while st.advance()? {}
    Ok(st.term(j, m)?.cloned().expect("term in range"))
}

/// `(B-hat Gamma_N)^{(n)}` at the final time of `tg`, from initial data only.
pub fn reconstruct_bhat(
    n: usize,
    init: &HierarchyState,
    spec: &InteractionSpec,
    tg: &TimeGrid,
    rule: Quadrature,
) -> Result<Marginal> {
    let count = init.truncation().saturating_sub(n) / spec.half();
    let mut st = DuhamelStepper::new(init, spec, tg, rule, count.max(1))?;
    while st.advance()? {}
    st.reconstruct_bhat(n)
}

/// Streaming evaluation of the `Theta` fixed-point residual.
///
/// With `Theta_N = B-hat Gamma_N`, the residual at level `k` is
/// `Theta_N^{(k)}(t) - B U(t) gamma_ref^{(k+p/2)} + i mu B P(t) int_0^t P(-s) Theta_N^{(k+p/2)}(s) ds`,
/// measured in `L^2_t H^alpha_xi`. The reference data default to `Gamma_N(0)`;
/// deeper reference data expose the truncation tail.
pub struct ThetaResidual {
    spec: InteractionSpec,
    grid: TorusGrid,
    reference: HierarchyState,
    n_solver: usize,
    alpha: f64,
    xi: f64,
    rule: Quadrature,
    dt: f64,
    k_max: usize,
    /// `A^{(m)}` for `m = 1..=N - p/2` (index `m - 1`).
    integrals: Vec<Option<RunningIntegral<Vec<Complex64>>>>,
    samples: Vec<f64>,
    level_samples: Vec<Vec<f64>>,
}

impl ThetaResidual {
    pub fn new(
        spec: &InteractionSpec,
        n_solver: usize,
        reference: &HierarchyState,
        alpha: f64,
        xi: f64,
        rule: Quadrature,
        dt: f64,
    ) -> Result<Self> {
        let h = spec.half();
        if reference.truncation() < n_solver {
            return Err(crate::error::invalid("reference", "must reach at least the solver truncation"));
        }
        let k_max = reference.truncation().saturating_sub(h);
        let coupled = n_solver.saturating_sub(h);
        let integrals = (1..=coupled)
            .map(|m| if m + h <= coupled + h && m > h { Some(RunningIntegral::new(rule, dt)) } else { None })
            .collect();
        Ok(Self {
            spec: *spec,
            grid: reference.grid().clone(),
            reference: reference.clone(),
            n_solver,
            alpha,
            xi,
            rule,
            dt,
            k_max,
            integrals,
            samples: Vec::new(),
            level_samples: Vec::new(),
        })
    }

    /// Feeds `Gamma_N(t_m)` for the next grid time `t_m = m dt`.
    pub fn push(&mut self, state: &HierarchyState) -> Result<()> {
        if state.truncation() != self.n_solver {
            return Err(crate::error::invalid("state", "truncation differs from the solver's"));
        }
        let t = self.dt * self.samples.len() as f64;
        let h = self.spec.half();
        let coupled = self.n_solver.saturating_sub(h);
        for m in 1..=coupled {
            if let Some(integral) = &mut self.integrals[m - 1] {
                let nu = half_len(&self.grid, m);
                let mut f = vec![ZERO; nu * nu];
                collapse_into_modal(state.level(m + h).expect("level"), &self.spec, ONE, &mut f)?;
                apply_phases(&self.grid, m, -t, &mut f)?;
                integral.push(f);
            }
        }
        let mut norms = Vec::with_capacity(self.k_max);
        for k in 1..=self.k_max {
            norms.push(self.level_residual(k, t, state)?);
        }
        self.samples.push(weighted_sum(&norms, self.xi));
        self.level_samples.push(norms);
        Ok(())
    }

    fn level_residual(&self, k: usize, t: f64, state: &HierarchyState) -> Result<f64> {
        let h = self.spec.half();
        let theta_src = if k + h <= self.n_solver { state.level(k + h) } else { None };
        let ref_src = match self.reference.level(k + h) {
            Some(l) => Some(free_evolve_level(l, t)?),
            None => None,
        };
        let integral = if k + h <= self.n_solver.saturating_sub(h) {
            self.integrals[k + h - 1].as_ref()
        } else {
            None
        };
        let mut parts: Vec<(f64, &Level)> = Vec::new();
        if let Some(l) = theta_src {
            parts.push((1.0, l));
        }
        if let Some(l) = &ref_src {
            parts.push((-1.0, l));
        }
        let Some(q) = integral else {
            return collapse_combination_norm(&self.grid, &self.spec, k, &parts, self.alpha);
        };
        if element_count(&self.grid, k + h) > crate::marginal::DENSE_GUARD {
            return Err(Error::TooLarge {
                elements: element_count(&self.grid, k + h),
            });
        }
        let nu = half_len(&self.grid, k);
        let mut r = vec![ZERO; nu * nu];
        for (c, l) in parts {
            collapse_into_modal(l, &self.spec, Complex64::new(c, 0.0), &mut r)?;
        }
        {
            let m = k + h;
            let nm = half_len(&self.grid, m);
            let terms = q.terms();
            let (pu, pv) = half_phases(&self.grid, m, t)?;
            let imu = Complex64::new(0.0, self.spec.mu());
            // i mu P(t) A, formed row by row, then collapsed once.
            let mut a = vec![ZERO; nm * nm];
            for (r_i, (row, x)) in a.chunks_exact_mut(nm).zip(&pu).enumerate() {
                let span = r_i * nm..(r_i + 1) * nm;
                for (w, v) in &terms {
                    for (z, y) in row.iter_mut().zip(&v[span.clone()]) {
                        *z += y * *w;
                    }
                }
                let ax = imu * x;
                for (z, b) in row.iter_mut().zip(&pv) {
                    *z *= ax * b;
                }
            }
            let pa = Level::Dense(Marginal::from_data(&self.grid, m, Basis::Modal, a)?);
            collapse_into_modal(&pa, &self.spec, ONE, &mut r)?;
        }
        Marginal::from_data(&self.grid, k, Basis::Modal, r)?.h_alpha_norm(self.alpha)
    }

    /// Per-time `H^alpha_xi` norms of the residual.
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Per-time, per-level unweighted norms.
    pub fn level_samples(&self) -> &[Vec<f64>] {
        &self.level_samples
    }

    /// `L^2_t H^alpha_xi` norm over the samples pushed so far.
    pub fn value(&self) -> Result<f64> {
        let sq: Vec<f64> = self.samples.iter().map(|g| g * g).collect();
        if sq.len() < 2 {
            return Ok(0.0);
        }
        Ok(math::sqrt(integrate(&sq, self.dt, self.rule)?.max(0.0)))
    }
}

/// `Theta` residual of a recorded trajectory; see [`ThetaResidual`].
pub fn theta_residual(
    traj: &Trajectory,
    xi: f64,
    alpha: f64,
    rule: Quadrature,
    reference: Option<&HierarchyState>,
) -> Result<f64> {
    let init = traj.states.first().ok_or_else(|| Error::TimeGrid("empty trajectory".into()))?;
    let reference = reference.unwrap_or(init);
    let mut acc = ThetaResidual::new(&traj.spec, init.truncation(), reference, alpha, xi, rule, traj.dt())?;
    for s in &traj.states {
        acc.push(s)?;
    }
    acc.value()
}
