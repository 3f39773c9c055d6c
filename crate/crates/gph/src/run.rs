//! Command orchestration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use gph_core::analysis::{self, StudyInputs, StudyReport, Table};
use gph_core::ensemble::EnsembleParams;
use gph_core::nls::{level_errors, nls_solve_substeps};
use gph_core::operators::b_hat;
use gph_core::solver::{OracleStepper, TruncatedStepper};
use gph_core::state::{hxi_norm, weighted_sum};
use gph_core::{HierarchyState, InteractionSpec, TimeGrid, Tolerances, TorusGrid, WaveFunction};
use serde::Serialize;

use crate::config::{ExperimentConfig, Loaded, SolverChoice};
use crate::output::{write_manifest, write_report, Manifest, Versions};
use crate::snapshot::{snapshot_read, snapshot_write, Snapshot, FORMAT_VERSION};

/// Trace drift allowed on levels coupled to the one above.
pub const TRACE_DRIFT_COUPLED: f64 = 1e-8;
/// Trace drift allowed on freely evolving levels.
pub const TRACE_DRIFT_FREE: f64 = 1e-12;
/// Hermiticity and symmetry defects allowed on evolved states.
pub const STRUCTURAL_DEFECT: f64 = 1e-9;

/// At most this many sampled rows per time table (plus the final time).
const MAX_ROWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Evolve,
    NlsCompare,
    Cauchy,
    Strichartz,
    Boardgame,
    KmReport,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Evolve,
        Command::NlsCompare,
        Command::Cauchy,
        Command::Strichartz,
        Command::Boardgame,
        Command::KmReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Evolve => "evolve",
            Command::NlsCompare => "nls-compare",
            Command::Cauchy => "cauchy",
            Command::Strichartz => "strichartz",
            Command::Boardgame => "boardgame",
            Command::KmReport => "km-report",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> anyhow::Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| anyhow!("unknown command `{s}`"))
    }
}

/// One named check of the invariant suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Invariant {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Invariant {
    fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }

    fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            tolerance: 1.0,
            passed: ok,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: StudyReport,
    pub invariants: Vec<Invariant>,
    pub warnings: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

impl RunOutcome {
    pub fn failures(&self) -> Vec<&Invariant> {
        self.invariants.iter().filter(|i| !i.passed).collect()
    }
}

struct Setup {
    grid: TorusGrid,
    spec: InteractionSpec,
    tg: TimeGrid,
}

impl Setup {
    fn new(c: &ExperimentConfig) -> anyhow::Result<Self> {
        Ok(Self {
            grid: TorusGrid::new(c.d, c.m, c.l)?,
            spec: InteractionSpec::new(c.p, c.mu)?,
            tg: TimeGrid::new(c.t, c.dt)?,
        })
    }

    fn inputs(&self, c: &ExperimentConfig) -> StudyInputs {
        let mut i = StudyInputs::new(&self.grid, &self.spec, &c.norms(), &self.tg, c.quadrature);
        i.seeds = vec![c.seed];
        i
    }
}

enum Initial {
    Wave(WaveFunction),
    Zero,
    State(HierarchyState),
}

fn parse_mode(text: &str, d: usize) -> anyhow::Result<Vec<i64>> {
    let mode = text
        .split(',')
        .map(|s| s.trim().parse::<i64>().with_context(|| format!("bad plane-wave mode `{text}`")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if mode.len() == 1 && d > 1 {
        let mut m = vec![0; d];
        m[0] = mode[0];
        return Ok(m);
    }
    Ok(mode)
}

fn initial(c: &ExperimentConfig, grid: &TorusGrid) -> anyhow::Result<Initial> {
    let s = c.phi0.as_str();
    Ok(match s {
        "smooth" => Initial::Wave(WaveFunction::default_test_field(grid)?),
        "zero" => Initial::Zero,
        "plane_wave" => {
            let mut m = vec![0; grid.dim()];
            m[0] = 1;
            Initial::Wave(WaveFunction::plane_wave(grid, &m)?)
        }
        _ if s.starts_with("plane_wave:") => {
            Initial::Wave(WaveFunction::plane_wave(grid, &parse_mode(&s["plane_wave:".len()..], grid.dim())?)?)
        }
        _ => match snapshot_read(Path::new(s)).with_context(|| format!("reading phi0 snapshot `{s}`"))? {
            Snapshot::State(st) => {
                if st.grid() != grid {
                    bail!("phi0 snapshot grid does not match d, M, L of the config");
                }
                Initial::State(st)
            }
            Snapshot::Marginal(_) => bail!("phi0 snapshot must hold a hierarchy state, not a single marginal"),
        },
    })
}

impl Initial {
    /// `P_{<=n}` of the data, or as many levels as a snapshot provides when `allow_short`.
    fn hierarchy(&self, grid: &TorusGrid, n: usize, allow_short: bool) -> anyhow::Result<HierarchyState> {
        Ok(match self {
            Initial::Wave(w) => w.hierarchy(n)?,
            Initial::Zero => HierarchyState::zeros(grid, n)?,
            Initial::State(s) if s.truncation() >= n => s.truncate(n),
            Initial::State(s) if allow_short => s.clone(),
            Initial::State(s) => bail!("phi0 snapshot has {} levels, {n} needed", s.truncation()),
        })
    }

    fn wave(&self) -> anyhow::Result<&WaveFunction> {
        match self {
            Initial::Wave(w) => Ok(w),
            _ => bail!("this command needs a one-particle field: use phi0 = smooth or plane_wave[:q]"),
        }
    }
}

fn stride(steps: usize) -> usize {
    steps.div_ceil(MAX_ROWS).max(1)
}

fn sampled(m: usize, steps: usize) -> bool {
    m % stride(steps) == 0 || m == steps
}

/// Tracks trace drift of every level across steps.
struct TraceDrift {
    initial: Vec<gph_core::Complex64>,
    worst: Vec<f64>,
}

impl TraceDrift {
    fn new(s: &HierarchyState) -> Self {
        Self {
            initial: s.traces(),
            worst: vec![0.0; s.truncation()],
        }
    }

    fn push(&mut self, s: &HierarchyState) {
        for ((w, a), b) in self.worst.iter_mut().zip(&self.initial).zip(s.traces()) {
            *w = w.max((b - a).norm());
        }
    }

    fn invariants(&self, label: &str, h: usize) -> Vec<Invariant> {
        let n = self.worst.len();
        self.worst
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let k = i + 1;
                let (kind, tol) = if k + h <= n {
                    ("coupled", TRACE_DRIFT_COUPLED)
                } else {
                    ("free", TRACE_DRIFT_FREE)
                };
                Invariant::at_most(format!("{label}trace_drift_{kind}_k{k}"), v, tol)
            })
            .collect()
    }
}

fn structural(label: &str, s: &HierarchyState) -> anyhow::Result<Vec<Invariant>> {
    let tol = Tolerances {
        structural: STRUCTURAL_DEFECT,
        ..Tolerances::default()
    };
    let mut out = Vec::new();
    for l in s.levels() {
        let r = l.validate(&tol)?;
        let k = l.k();
        out.push(Invariant::at_most(format!("{label}hermiticity_k{k}"), r.hermiticity_defect, STRUCTURAL_DEFECT));
        out.push(Invariant::at_most(format!("{label}symmetry_k{k}"), r.symmetry_defect, STRUCTURAL_DEFECT));
    }
    Ok(out)
}

fn finite(report: &StudyReport) -> Invariant {
    let ok = report.tables.iter().flat_map(|t| &t.rows).flatten().all(|v| !v.is_infinite())
        && report.fits.iter().all(|f| !f.value.is_infinite());
    Invariant::holds("outputs_not_infinite", ok)
}

fn norm_columns(n: usize) -> Vec<String> {
    let mut c = vec!["t".to_string(), "norm_Hxi_alpha".into(), "bhat_Hxi_alpha".into()];
    c.extend((1..=n).map(|k| format!("norm_H_alpha_k{k}")));
    c.extend((1..=n).map(|k| format!("trace_re_k{k}")));
    c
}

fn norm_row(t: f64, s: &HierarchyState, c: &ExperimentConfig, spec: &InteractionSpec) -> anyhow::Result<Vec<f64>> {
    let norms = s.level_norms(c.alpha)?;
    let bh = if s.truncation() > spec.half() {
        hxi_norm(&b_hat(s, spec)?, c.xi, c.alpha)?
    } else {
        0.0
    };
    let mut row = vec![t, weighted_sum(&norms, c.xi), bh];
    row.extend(&norms);
    row.extend(s.traces().iter().map(|z| z.re));
    Ok(row)
}

fn table(name: &str, cols: &[String]) -> Table {
    let refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    Table::new(name, &refs)
}

enum Stepper {
    Volterra(TruncatedStepper),
    Oracle(OracleStepper),
}

impl Stepper {
    fn state(&self) -> &HierarchyState {
        match self {
            Stepper::Volterra(s) => s.state(),
            Stepper::Oracle(s) => s.state(),
        }
    }

    fn advance(&mut self) -> gph_core::Result<bool> {
        match self {
            Stepper::Volterra(s) => s.advance(),
            Stepper::Oracle(s) => s.advance(),
        }
    }
}

fn evolve(c: &ExperimentConfig, su: &Setup, init: &Initial, out_dir: &Path) -> anyhow::Result<(StudyReport, Vec<Invariant>, Vec<String>)> {
    let g0 = init.hierarchy(&su.grid, c.n, false)?;
    let mut report = StudyReport::new("evolve", su.inputs(c));
    let mut steppers: Vec<(&str, Stepper)> = Vec::new();
    if matches!(c.solver, SolverChoice::Volterra | SolverChoice::Both) {
        steppers.push(("volterra", Stepper::Volterra(TruncatedStepper::new(&g0, &su.spec, &su.tg, c.quadrature)?)));
    }
    if matches!(c.solver, SolverChoice::Oracle | SolverChoice::Both) {
        steppers.push(("oracle", Stepper::Oracle(OracleStepper::new(&g0, &su.spec, &su.tg)?)));
    }
    let cols = norm_columns(c.n);
    let mut tables: Vec<Table> = steppers.iter().map(|(n, _)| table(&format!("norms_{n}"), &cols)).collect();
    let mut drift: Vec<TraceDrift> = steppers.iter().map(|_| TraceDrift::new(&g0)).collect();
    let mut diff = Table::new("solver_diff", &["t", "diff_Hxi_alpha"]);
    let steps = su.tg.steps();
    for m in 0..=steps {
        let t = su.tg.time(m);
        for ((_, st), d) in steppers.iter().zip(&mut drift) {
            d.push(st.state());
        }
        if sampled(m, steps) {
            for ((_, st), tab) in steppers.iter().zip(&mut tables) {
                tab.push(norm_row(t, st.state(), c, &su.spec)?);
            }
            if steppers.len() == 2 {
                let dv = hxi_norm(&steppers[0].1.state().sub(steppers[1].1.state())?, c.xi, c.alpha)?;
                diff.push(vec![t, dv]);
            }
        }
        if m < steps {
            for (_, st) in steppers.iter_mut() {
                st.advance()?;
            }
        }
    }
    let mut inv = Vec::new();
    for ((name, st), d) in steppers.iter().zip(&drift) {
        let label = format!("{name}_");
        inv.extend(d.invariants(&label, su.spec.half()));
        inv.extend(structural(&label, st.state())?);
    }
    if let Some(last) = diff.rows.last() {
        report.push_fit("terminal_solver_diff_Hxi_alpha", last[1], 0.0, diff.rows.len());
    }
    report.tables.extend(tables);
    if steppers.len() == 2 {
        report.tables.push(diff);
    }
    let mut files = Vec::new();
    if c.snapshot {
        let path = out_dir.join("final_state.gph");
        snapshot_write(&Snapshot::State(steppers[0].1.state().clone()), &path)
            .context("writing final_state.gph")?;
        files.push("final_state.gph".into());
    }
    Ok((report, inv, files))
}

fn nls_compare(c: &ExperimentConfig, su: &Setup, init: &Initial) -> anyhow::Result<(StudyReport, Vec<Invariant>)> {
    let phi = init.wave()?;
    let ns = c.n_list.clone().unwrap_or_else(|| vec![c.n]);
    let phis = nls_solve_substeps(phi, &su.spec, &su.tg, c.nls_substeps)?;
    let mut report = StudyReport::new("nls_compare", su.inputs(c));
    let mut inv = Vec::new();
    let mass = phis.iter().map(|w| (w.l2_norm() - 1.0).abs()).fold(0.0, f64::max);
    inv.push(Invariant::at_most("nls_mass_drift", mass, 1e-10));
    let mut fin = Table::new("final", &["N", "err_H_alpha_k1", "err_Hxi_alpha"]);
    let steps = su.tg.steps();
    let n_top = *ns.last().expect("nonempty");
    for &n in &ns {
        let g0 = phi.hierarchy(n)?;
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=n).map(|k| format!("err_H_alpha_k{k}")));
        cols.push("err_Hxi_alpha".into());
        let mut tab = table("errors", &cols);
        let mut st = TruncatedStepper::new(&g0, &su.spec, &su.tg, c.quadrature)?;
        let mut drift = TraceDrift::new(&g0);
        let mut last = Vec::new();
        for m in 0..=steps {
            drift.push(st.state());
            if sampled(m, steps) && (n == n_top || m == steps) {
                let e = level_errors(st.state(), &phis[m], c.alpha)?;
                let agg = weighted_sum(&e, c.xi);
                let mut row = vec![su.tg.time(m)];
                row.extend(&e);
                row.push(agg);
                if m == steps {
                    last = vec![n as f64, e[0], agg];
                }
                tab.push(row);
            }
            if m < steps {
                st.advance()?;
            }
        }
        inv.extend(drift.invariants(&format!("N{n}_"), su.spec.half()));
        fin.push(last);
        if n == n_top {
            report.tables.push(tab);
        }
    }
    let e1 = fin.column("err_H_alpha_k1").expect("column");
    let decreasing = e1.windows(2).all(|w| w[1] < w[0]);
    report.push_flag("level1_error_decreases_in_N", decreasing, "level-1 error at T along N_list");
    report.tables.push(fin);
    Ok((report, inv))
}

fn execute(c: &ExperimentConfig, command: Command, out_dir: &Path) -> anyhow::Result<(StudyReport, Vec<Invariant>, Vec<String>)> {
    let su = Setup::new(c)?;
    let init = initial(c, &su.grid)?;
    let norms = c.norms();
    let h = su.spec.half();
    let (report, mut inv, files) = match command {
        Command::Evolve => evolve(c, &su, &init, out_dir)?,
        Command::NlsCompare => {
            let (r, i) = nls_compare(c, &su, &init)?;
            (r, i, Vec::new())
        }
        Command::Cauchy => {
            let ns = c.truncations();
            let g0 = init.hierarchy(&su.grid, *ns.last().expect("nonempty"), false)?;
            let r = analysis::cauchy_study(&g0, &ns, &norms, &su.spec, &su.tg, c.quadrature)?;
            let shared = r.flag("shared_levels_identical").unwrap_or(false);
            (r, vec![Invariant::holds("shared_levels_identical", shared)], Vec::new())
        }
        Command::Strichartz => {
            let ens = EnsembleParams {
                size: c.ensemble_size,
                rank: c.ensemble_rank,
                decay: c.decay(),
                seed: c.seed,
            };
            let r = analysis::strichartz_study(&ens, &norms, &su.grid, &su.spec, c.n, &su.tg, c.quadrature)?;
            let ok = r.flag("ratios_finite").unwrap_or(false);
            (r, vec![Invariant::holds("ratios_finite", ok)], Vec::new())
        }
        Command::Boardgame => {
            let need = c.boardgame_n + c.j_max * h;
            let data = init.hierarchy(&su.grid, need, false)?;
            let js: Vec<usize> = (1..=c.j_max).collect();
            let r = analysis::boardgame_probe(&[c.boardgame_n], &js, &data, &su.spec, &su.tg, c.quadrature, c.alpha)?;
            (r, Vec::new(), Vec::new())
        }
        Command::KmReport => {
            let ns = c.truncations();
            let top = *ns.last().expect("nonempty");
            let g0 = init.hierarchy(&su.grid, top + h, true)?;
            if g0.truncation() < top {
                bail!("phi0 snapshot has {} levels, {top} needed", g0.truncation());
            }
            let r = analysis::km_sweep(&g0, &ns, &su.spec, &su.tg, c.quadrature, &norms)?;
            (r, Vec::new(), Vec::new())
        }
    };
    inv.push(finite(&report));
    Ok((report, inv, files))
}

/// Runs `command`, writing the report tables, `report.json` and `manifest.json` to
/// `out_dir` (the config's `out_dir` unless overridden).
pub fn run_experiment(loaded: &Loaded, command: Command, out_dir: Option<&Path>) -> anyhow::Result<RunOutcome> {
    let c = &loaded.config;
    let dir = out_dir.unwrap_or(&c.out_dir);
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let start = Instant::now();
    let (mut report, invariants, mut outputs) = execute(c, command, dir)?;
    let range = gph_core::admissible_alpha_range(c.d, c.p)?;
    report.push_flag(
        "alpha_admissible",
        !loaded.alpha_inadmissible,
        &format!("alpha = {} against the admissible range {}", c.alpha, range),
    );
    outputs.extend(write_report(&report, dir)?);
    let wall_time_s = start.elapsed().as_secs_f64();
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        command: command.name(),
        config: c,
        versions: Versions {
            gph: env!("CARGO_PKG_VERSION"),
            snapshot_format: FORMAT_VERSION,
        },
        wall_time_s,
        warnings: &loaded.warnings,
        invariants: &invariants,
        outputs: &outputs,
    };
    write_manifest(&manifest, dir)?;
    Ok(RunOutcome {
        report,
        invariants,
        warnings: loaded.warnings.clone(),
        outputs,
        wall_time_s,
    })
}
