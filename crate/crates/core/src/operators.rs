//! Contraction operators `B^{+/-}`, the collapse `B`, the sequence map `B-hat`,
//! the free propagator and the hierarchy right-hand side.
//!
//! Sign convention: `d/dt gamma^{(k)} = -i [-Delta_pm, gamma^{(k)}] - i mu B gamma^{(k+p/2)}`,
//! so the Duhamel integral carries the prefactor `-i mu`.
//!
//! In position samples `B^+_j` is a pure restriction of the `p/2` extra slot
//! pairs to `x_j`. In mode coefficients the same operator is a convolution:
//! `out(..Q at j..; V) = L^{-dp/2} sum_{a,b} in(..Q - sum a + sum b.., a; V, b)`.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::factored::{add_outer, outer, FactoredMarginal, ProductTerm};
use crate::grid::{phase_weights, sobolev_weights, Side, TorusGrid};
use crate::marginal::{element_count, half_len, tensor_weights, Basis, Marginal, DENSE_GUARD};
use crate::math;
use crate::state::{HierarchyState, Level};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Interaction order `p` and coupling sign `mu`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InteractionSpec {
    p: u32,
    mu: f64,
}

impl InteractionSpec {
    pub fn new(p: u32, mu: f64) -> Result<Self> {
        if p != 2 && p != 4 {
            return Err(Error::UnsupportedOrder(p));
        }
        if mu != 1.0 && mu != -1.0 {
            return Err(crate::error::invalid("mu", "must be +1 (defocusing) or -1 (focusing)"));
        }
        Ok(Self { p, mu })
    }

    pub fn p(&self) -> u32 {
        self.p
    }

    /// Number of extra particle pairs contracted by `B`, `p/2`.
    pub fn half(&self) -> usize {
        (self.p / 2) as usize
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

/// Admissible regularity range: open `(lower, inf)` or closed `[lower, inf)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlphaRange {
    pub lower: f64,
    pub closed: bool,
}

impl AlphaRange {
    pub fn contains(&self, alpha: f64) -> bool {
        if self.closed {
            alpha >= self.lower
        } else {
            alpha > self.lower
        }
    }
}

impl core::fmt::Display for AlphaRange {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let open = if self.closed { "[" } else { "(" };
        write!(f, "{open}{}, inf)", self.lower)
    }
}

pub fn admissible_alpha_range(d: usize, p: u32) -> Result<AlphaRange> {
    if p != 2 && p != 4 {
        return Err(Error::UnsupportedOrder(p));
    }
    if d == 0 {
        return Err(crate::error::invalid("d", "must be at least 1"));
    }
    Ok(match (d, p) {
        (1, _) => AlphaRange { lower: 0.5, closed: false },
        (3, 2) => AlphaRange { lower: 1.0, closed: true },
        _ => AlphaRange {
            lower: d as f64 / 2.0 - 1.0 / (2.0 * (p as f64 - 1.0)),
            closed: false,
        },
    })
}

fn check_level(input_k: usize, j: Option<usize>, spec: &InteractionSpec) -> Result<usize> {
    let h = spec.half();
    if input_k < 1 + h {
        return Err(Error::LevelOutOfRange {
            level: input_k,
            reason: alloc::format!("B needs input level >= {}", 1 + h),
        });
    }
    let k = input_k - h;
    if let Some(j) = j {
        if j == 0 || j > k {
            return Err(Error::LevelOutOfRange {
                level: j,
                reason: alloc::format!("slot index must satisfy 1 <= j <= {k}"),
            });
        }
    }
    Ok(k)
}

/// Index of the diagonal extra-slot tuple `(x, .., x)` over `h` slots.
fn diag_index(x: usize, ns: usize, h: usize) -> usize {
    (0..h).fold(0, |acc, _| acc * ns + x)
}

/// `out += coef * sum_j (sign_j B^{+/-}_j) gamma` with `gamma` dense.
///
/// `plus` and `minus` list zero-based slot indices `j`.
fn contract_dense(
    input: &Marginal,
    h: usize,
    plus: &[usize],
    minus: &[usize],
    coef: Complex64,
    out: &mut [Complex64],
) {
    let grid = input.grid();
    let ns = grid.slot_len();
    let k = input.k() - h;
    let nu = half_len(grid, k);
    let na = ns.pow(h as u32);
    let data = input.data();
    let stride = |j: usize| ns.pow((k - 1 - j) as u32);
    match input.basis() {
        Basis::Position => {
            for u in 0..nu {
                for v in 0..nu {
                    let mut acc = ZERO;
                    for &j in plus {
                        let x = (u / stride(j)) % ns;
                        let a = diag_index(x, ns, h);
                        acc += data[((u * na + a) * nu + v) * na + a];
                    }
                    for &j in minus {
                        let x = (v / stride(j)) % ns;
                        let a = diag_index(x, ns, h);
                        acc -= data[((u * na + a) * nu + v) * na + a];
                    }
                    out[u * nu + v] += coef * acc;
                }
            }
        }
        Basis::Modal => {
            let c = coef * math::powi(grid.volume(), -(h as i32));
            // Net mode shift sum(a) - sum(b) for each pair of extra-slot tuples.
            let sum_modes = |mut idx: usize| {
                let mut s = 0;
                for _ in 0..h {
                    s = grid.mode_add(s, idx % ns);
                    idx /= ns;
                }
                s
            };
            let sums: Vec<usize> = (0..na).map(sum_modes).collect();
            let shift: Vec<usize> = (0..na * na)
                .map(|ab| grid.mode_add(sums[ab / na], grid.mode_neg(sums[ab % na])))
                .collect();
            // perm[s][w]: half-index w with digit j moved by +s (or -s for B^-).
            let perm = |j: usize, neg: bool| -> Vec<u32> {
                let st = stride(j);
                let mut t = vec![0u32; ns * nu];
                for s in 0..ns {
                    let step = if neg { grid.mode_neg(s) } else { s };
                    for w in 0..nu {
                        let d = (w / st) % ns;
                        let nd = grid.mode_add(d, step);
                        t[s * nu + w] = (w + nd * st - d * st) as u32;
                    }
                }
                t
            };
            let plus_perm: Vec<Vec<u32>> = plus.iter().map(|&j| perm(j, false)).collect();
            let minus_perm: Vec<Vec<u32>> = minus.iter().map(|&j| perm(j, true)).collect();
            // Rows sharing a net shift s land in the same place, so sum them first.
            let mut rows = vec![ZERO; ns * nu];
            for u in 0..nu {
                rows.iter_mut().for_each(|r| *r = ZERO);
                for a in 0..na {
                    let block = &data[(u * na + a) * nu * na..(u * na + a + 1) * nu * na];
                    let sh = &shift[a * na..(a + 1) * na];
                    for (v, chunk) in block.chunks_exact(na).enumerate() {
                        for (&s, x) in sh.iter().zip(chunk) {
                            rows[s * nu + v] += x;
                        }
                    }
                }
                for s in 0..ns {
                    let row = &rows[s * nu..(s + 1) * nu];
                    if row.iter().all(|r| *r == ZERO) {
                        continue;
                    }
                    for p in &plus_perm {
                        let dst = p[s * nu + u] as usize;
                        let o = &mut out[dst * nu..(dst + 1) * nu];
                        for (x, r) in o.iter_mut().zip(row) {
                            *x += c * r;
                        }
                    }
                    let o = &mut out[u * nu..(u + 1) * nu];
                    for p in &minus_perm {
                        let pv = &p[s * nu..(s + 1) * nu];
                        for (r, &dst) in row.iter().zip(pv) {
                            o[dst as usize] -= c * r;
                        }
                    }
                }
            }
        }
    }
}

fn dense_op(gamma: &Marginal, spec: &InteractionSpec, plus: &[usize], minus: &[usize]) -> Result<Marginal> {
    let k = check_level(gamma.k(), None, spec)?;
    let mut out = Marginal::zeros_in(gamma.grid(), k, gamma.basis())?;
    contract_dense(gamma, spec.half(), plus, minus, ONE, out.data_mut());
    Ok(out)
}

/// `B^+_{j; k+1..k+p/2} gamma^{(k+p/2)}` with `j` one-based.
pub fn b_plus(j: usize, gamma: &Marginal, spec: &InteractionSpec) -> Result<Marginal> {
    check_level(gamma.k(), Some(j), spec)?;
    dense_op(gamma, spec, &[j - 1], &[])
}

/// `B^-_{j; k+1..k+p/2} gamma^{(k+p/2)}` with `j` one-based.
pub fn b_minus(j: usize, gamma: &Marginal, spec: &InteractionSpec) -> Result<Marginal> {
    check_level(gamma.k(), Some(j), spec)?;
    let mut out = dense_op(gamma, spec, &[], &[j - 1])?;
    out.scale(Complex64::new(-1.0, 0.0));
    Ok(out)
}

/// `B_{k+p/2} gamma = sum_j (B^+_j - B^-_j) gamma`.
pub fn b_collapse(gamma: &Marginal, spec: &InteractionSpec) -> Result<Marginal> {
    let k = check_level(gamma.k(), None, spec)?;
    let js: Vec<usize> = (0..k).collect();
    dense_op(gamma, spec, &js, &js)
}

/// Pointwise product of the extra slot pairs of a factored term.
fn extra_product(term: &ProductTerm, k_in: usize, h: usize, ns: usize) -> Vec<Complex64> {
    let k = k_in - h;
    let mut e = vec![ONE; ns];
    for l in 0..h {
        let u = term.slot(k + l, ns);
        let v = term.slot(k_in + k + l, ns);
        for ((x, a), b) in e.iter_mut().zip(u).zip(v) {
            *x *= a * b;
        }
    }
    e
}

fn factored_op(
    gamma: &FactoredMarginal,
    spec: &InteractionSpec,
    plus: &[usize],
    minus: &[usize],
) -> Result<FactoredMarginal> {
    let h = spec.half();
    let k_in = gamma.k();
    let k = check_level(k_in, None, spec)?;
    let ns = gamma.grid().slot_len();
    let mut out = FactoredMarginal::zero(gamma.grid(), k)?;
    for term in gamma.terms() {
        let e = extra_product(term, k_in, h, ns);
        let base: Vec<Complex64> = term.factors[..k * ns]
            .iter()
            .chain(&term.factors[k_in * ns..(k_in + k) * ns])
            .copied()
            .collect();
        for (sign, slot) in plus
            .iter()
            .map(|j| (1.0, *j))
            .chain(minus.iter().map(|j| (-1.0, k + *j)))
        {
            let mut factors = base.clone();
            for (x, ev) in factors[slot * ns..(slot + 1) * ns].iter_mut().zip(&e) {
                *x *= ev;
            }
            out.push_term(ProductTerm {
                weight: term.weight * sign,
                factors,
            })?;
        }
    }
    Ok(out)
}

pub fn b_plus_factored(j: usize, gamma: &FactoredMarginal, spec: &InteractionSpec) -> Result<FactoredMarginal> {
    check_level(gamma.k(), Some(j), spec)?;
    factored_op(gamma, spec, &[j - 1], &[])
}

pub fn b_minus_factored(j: usize, gamma: &FactoredMarginal, spec: &InteractionSpec) -> Result<FactoredMarginal> {
    check_level(gamma.k(), Some(j), spec)?;
    let mut out = factored_op(gamma, spec, &[], &[j - 1])?;
    out.scale(Complex64::new(-1.0, 0.0));
    Ok(out)
}

pub fn b_collapse_factored(gamma: &FactoredMarginal, spec: &InteractionSpec) -> Result<FactoredMarginal> {
    let k = check_level(gamma.k(), None, spec)?;
    let js: Vec<usize> = (0..k).collect();
    factored_op(gamma, spec, &js, &js)
}

/// `B` on a level; dense stays dense (same basis), factored stays factored.
pub fn b_collapse_level(level: &Level, spec: &InteractionSpec) -> Result<Level> {
    Ok(match level {
        Level::Dense(m) => Level::Dense(b_collapse(m, spec)?),
        Level::Factored(f) => Level::Factored(b_collapse_factored(f, spec)?),
    })
}

/// `out += coef * B gamma` in modal coefficients of level `k - p/2`.
pub(crate) fn collapse_into_modal(
    level: &Level,
    spec: &InteractionSpec,
    coef: Complex64,
    out: &mut [Complex64],
) -> Result<()> {
    let h = spec.half();
    let k = check_level(level.k(), None, spec)?;
    let grid = level.grid();
    let nu = half_len(grid, k);
    if out.len() != nu * nu {
        return Err(Error::ShapeMismatch {
            expected: nu * nu,
            actual: out.len(),
        });
    }
    match level {
        Level::Dense(m) => {
            let js: Vec<usize> = (0..k).collect();
            if m.basis() == Basis::Modal {
                contract_dense(m, h, &js, &js, coef, out);
            } else {
                contract_dense(&m.to_modal(), h, &js, &js, coef, out);
            }
        }
        Level::Factored(f) => {
            for (c, x, y) in collapse_pairs(f, spec)? {
                add_outer(out, coef * c, &x, &y, nu);
            }
        }
    }
    Ok(())
}

/// Half-space outer products `c_i x_i (x) y_i` whose sum is `B gamma` in modal coefficients.
pub(crate) type Pairs = Vec<(Complex64, Vec<Complex64>, Vec<Complex64>)>;

/// `B gamma` of a factored level as [`Pairs`]: per term, `U_sum (x) V - U (x) V_sum`.
pub(crate) fn collapse_pairs(f: &FactoredMarginal, spec: &InteractionSpec) -> Result<Pairs> {
    let h = spec.half();
    let k_in = f.k();
    let k = check_level(k_in, None, spec)?;
    let grid = f.grid();
    let ns = grid.slot_len();
    let nu = half_len(grid, k);
    let mut pairs = Vec::with_capacity(2 * f.terms().len());
    for term in f.terms() {
        let e = extra_product(term, k_in, h, ns);
        let a: Vec<Vec<Complex64>> = (0..k)
            .map(|j| grid.slot_to_modal(term.slot(j, ns), Side::Unprimed))
            .collect();
        let b: Vec<Vec<Complex64>> = (0..k)
            .map(|j| grid.slot_to_modal(term.slot(k_in + j, ns), Side::Primed))
            .collect();
        let mut usum = vec![ZERO; nu];
        let mut vsum = vec![ZERO; nu];
        for j in 0..k {
            let ue: Vec<Complex64> = term.slot(j, ns).iter().zip(&e).map(|(x, y)| x * y).collect();
            let mut aj = a.clone();
            aj[j] = grid.slot_to_modal(&ue, Side::Unprimed);
            usum.iter_mut().zip(outer(&aj)).for_each(|(s, x)| *s += x);
            let ve: Vec<Complex64> = term.slot(k_in + j, ns).iter().zip(&e).map(|(x, y)| x * y).collect();
            let mut bj = b.clone();
            bj[j] = grid.slot_to_modal(&ve, Side::Primed);
            vsum.iter_mut().zip(outer(&bj)).for_each(|(s, x)| *s += x);
        }
        pairs.push((term.weight, usum, outer(&b)));
        pairs.push((-term.weight, outer(&a), vsum));
    }
    Ok(pairs)
}

/// `out = P(t) sum_i c_i x_i (x) y_i`, overwriting `out`.
pub(crate) fn pairs_set_phased(pairs: &Pairs, grid: &TorusGrid, k: usize, t: f64, out: &mut [Complex64]) -> Result<()> {
    let (pu, pv) = half_phases(grid, k, t)?;
    let nu = pu.len();
    let ys: Vec<Vec<Complex64>> = pairs.iter().map(|(_, _, y)| y.iter().zip(&pv).map(|(a, b)| a * b).collect()).collect();
    for (u, row) in out.chunks_exact_mut(nu).enumerate() {
        row.iter_mut().for_each(|z| *z = ZERO);
        for ((c, x, _), y) in pairs.iter().zip(&ys) {
            let s = c * x[u] * pu[u];
            if s == ZERO {
                continue;
            }
            for (o, yv) in row.iter_mut().zip(y) {
                *o += s * yv;
            }
        }
    }
    Ok(())
}

/// `||sum_i c_i x_i (x) y_i||_{H^alpha}`, streamed row by row.
pub(crate) fn pairs_norm(pairs: &Pairs, grid: &TorusGrid, k: usize, alpha: f64) -> Result<f64> {
    let w = sobolev_weights(grid, alpha)?;
    let w2: Vec<f64> = w.iter().map(|x| x * x).collect();
    let wk = tensor_weights(&w2, k, 1.0);
    let nu = wk.len();
    let mut row = vec![ZERO; nu];
    let mut acc = 0.0;
    for u in 0..nu {
        row.iter_mut().for_each(|z| *z = ZERO);
        let mut any = false;
        for (c, x, y) in pairs {
            let s = c * x[u];
            if s == ZERO {
                continue;
            }
            any = true;
            for (o, yv) in row.iter_mut().zip(y) {
                *o += s * yv;
            }
        }
        if any {
            let r: f64 = row.iter().zip(&wk).map(|(z, wv)| z.norm_sqr() * wv).sum();
            acc += r * wk[u];
        }
    }
    Ok(math::sqrt(acc))
}

/// `||B sum_i c_i lambda_i||_{H^alpha}` at level `k`, for levels `lambda_i` at `k + p/2`.
///
/// Factored inputs are combined exactly first, so identical free levels cancel
/// to zero; otherwise the collapse is accumulated in one dense modal buffer.
pub fn collapse_combination_norm(
    grid: &TorusGrid,
    spec: &InteractionSpec,
    k: usize,
    parts: &[(f64, &Level)],
    alpha: f64,
) -> Result<f64> {
    let mut fac: Option<FactoredMarginal> = None;
    let mut dense: Vec<(f64, &Level)> = Vec::new();
    for &(c, l) in parts {
        match l {
            Level::Factored(f) => {
                let mut g = f.clone();
                g.scale(Complex64::new(c, 0.0));
                fac = Some(match fac {
                    None => g,
                    Some(acc) => acc.add(&g)?,
                });
            }
            Level::Dense(_) => dense.push((c, l)),
        }
    }
    let fac = fac.filter(|f| !f.is_empty());
    if dense.is_empty() {
        return match fac {
            None => Ok(0.0),
            // Beyond the dense guard only the Gram form is affordable.
            Some(f) if element_count(grid, k) > DENSE_GUARD => b_collapse_factored(&f, spec)?.h_alpha_norm(alpha),
            Some(f) => pairs_norm(&collapse_pairs(&f, spec)?, grid, k, alpha),
        };
    }
    let mut out = Marginal::zeros_in(grid, k, Basis::Modal)?;
    if let Some(f) = fac {
        collapse_into_modal(&Level::Factored(f), spec, Complex64::new(1.0, 0.0), out.data_mut())?;
    }
    for (c, l) in dense {
        collapse_into_modal(l, spec, Complex64::new(c, 0.0), out.data_mut())?;
    }
    out.h_alpha_norm(alpha)
}

/// `B-hat Gamma`, levels `1..N - p/2`.
pub fn b_hat(state: &HierarchyState, spec: &InteractionSpec) -> Result<HierarchyState> {
    let h = spec.half();
    let n = state.truncation();
    if n < 1 + h {
        return Err(Error::LevelOutOfRange {
            level: n,
            reason: alloc::format!("B-hat needs N >= {}", 1 + h),
        });
    }
    let levels = (1..=n - h)
        .map(|k| b_collapse_level(state.level(k + h).expect("level in range"), spec))
        .collect::<Result<Vec<_>>>()?;
    HierarchyState::new(state.grid(), levels)
}

/// Free phases `P(t)` over the unprimed and primed halves of a level-`k` tensor.
pub(crate) fn half_phases(grid: &TorusGrid, k: usize, t: f64) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    let pu = phase_weights(grid, t, Side::Unprimed)?;
    let pp = phase_weights(grid, t, Side::Primed)?;
    Ok((tensor_weights(&pu, k, ONE), tensor_weights(&pp, k, ONE)))
}

/// Multiplies modal coefficients by `U(t)` in place.
pub(crate) fn apply_phases(grid: &TorusGrid, k: usize, t: f64, data: &mut [Complex64]) -> Result<()> {
    let (pu, pv) = half_phases(grid, k, t)?;
    let nu = pu.len();
    for (row, a) in data.chunks_exact_mut(nu).zip(&pu) {
        for (z, b) in row.iter_mut().zip(&pv) {
            *z *= a * b;
        }
    }
    Ok(())
}

/// `U(t) gamma = e^{it Delta_pm} gamma`.
pub fn free_evolve(gamma: &Marginal, t: f64) -> Result<Marginal> {
    let basis = gamma.basis();
    let mut m = gamma.to_modal();
    apply_phases(gamma.grid(), gamma.k(), t, m.data_mut())?;
    Ok(m.into_basis(basis))
}

pub fn free_evolve_level(level: &Level, t: f64) -> Result<Level> {
    Ok(match level {
        Level::Dense(m) => Level::Dense(free_evolve(m, t)?),
        Level::Factored(f) => Level::Factored(f.free_evolve(t)?),
    })
}

pub fn free_evolve_state(state: &HierarchyState, t: f64) -> Result<HierarchyState> {
    let levels = state
        .levels()
        .iter()
        .map(|l| free_evolve_level(l, t))
        .collect::<Result<Vec<_>>>()?;
    HierarchyState::new(state.grid(), levels)
}

/// `d/dt Gamma` for the truncated hierarchy, as dense modal levels.
pub fn rhs(state: &HierarchyState, spec: &InteractionSpec) -> Result<HierarchyState> {
    let grid = state.grid();
    let h = spec.half();
    let p2 = grid.slot_wavenumber_sq();
    let mut levels = Vec::with_capacity(state.truncation());
    for (i, level) in state.levels().iter().enumerate() {
        let k = i + 1;
        let mut out = level.to_dense(Basis::Modal)?;
        let eu = tensor_weights(p2, k, 0.0f64).len();
        let mut energy_u = vec![0.0; eu];
        let nu = eu;
        for (w, e) in energy_u.iter_mut().enumerate() {
            let mut rest = w;
            for _ in 0..k {
                *e += p2[rest % p2.len()];
                rest /= p2.len();
            }
        }
        for (u, row) in out.data_mut().chunks_exact_mut(nu).enumerate() {
            for (v, z) in row.iter_mut().enumerate() {
                *z *= Complex64::new(0.0, -(energy_u[u] - energy_u[v]));
            }
        }
        if let Some(src) = state.level(k + h) {
            collapse_into_modal(src, spec, Complex64::new(0.0, -spec.mu()), out.data_mut())?;
        }
        levels.push(Level::Dense(out));
    }
    HierarchyState::new(grid, levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::marginal::factorized_marginal;
    use core::f64::consts::PI;

    fn field(grid: &TorusGrid) -> Vec<Complex64> {
        let raw: Vec<Complex64> = (0..grid.slot_len())
            .map(|n| {
                let x = grid.slot_position(n)[0];
                Complex64::new(1.0 + 0.5 * math::cos(x), 0.3 * math::cos(2.0 * x + 0.4))
            })
            .collect();
        let norm = math::sqrt(raw.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.cell_volume());
        raw.iter().map(|z| z / norm).collect()
    }

    fn plane(grid: &TorusGrid) -> Vec<Complex64> {
        (0..grid.slot_len())
            .map(|n| math::cis(grid.slot_position(n)[0]) / math::sqrt(grid.period()))
            .collect()
    }

    #[test]
    fn closed_forms_for_product_states() {
        let g = make_grid(1, 8, 2.0 * PI).unwrap();
        let phi = field(&g);
        for p in [2u32, 4] {
            let spec = InteractionSpec::new(p, 1.0).unwrap();
            let gamma = factorized_marginal(&g, &phi, 1 + spec.half()).unwrap();
            let bp = b_plus(1, &gamma, &spec).unwrap();
            let bm = b_minus(1, &gamma, &spec).unwrap();
            let bp_modal = b_plus(1, &gamma.to_modal(), &spec).unwrap();
            for x in 0..8 {
                for y in 0..8 {
                    let base = phi[x] * phi[y].conj();
                    let ex = bp.data()[x * 8 + y] - math::powi(phi[x].norm(), p as i32) * base;
                    let ey = bm.data()[x * 8 + y] - math::powi(phi[y].norm(), p as i32) * base;
                    assert!(ex.norm() < 1e-14 && ey.norm() < 1e-14);
                }
            }
            assert!(bp.max_abs_diff(&bp_modal).unwrap() < 1e-13);
        }
    }

    #[test]
    fn plane_wave_collapse_vanishes() {
        let g = make_grid(1, 8, 2.0 * PI).unwrap();
        let spec = InteractionSpec::new(2, 1.0).unwrap();
        let gamma = factorized_marginal(&g, &plane(&g), 2).unwrap();
        let b = b_collapse(&gamma, &spec).unwrap();
        assert!(b.data().iter().all(|z| z.norm() < 1e-15));
    }

    #[test]
    fn factored_and_dense_agree() {
        let g = make_grid(1, 8, 2.0 * PI).unwrap();
        let spec = InteractionSpec::new(2, -1.0).unwrap();
        let f = FactoredMarginal::factorized(&g, &field(&g), 3).unwrap().free_evolve(0.3).unwrap();
        let dense = f.to_dense(Basis::Modal).unwrap();
        let via_dense = b_collapse(&dense, &spec).unwrap();
        let via_factored = b_collapse_factored(&f, &spec).unwrap().to_dense(Basis::Modal).unwrap();
        assert!(via_dense.max_abs_diff(&via_factored).unwrap() < 1e-13);
        let mut grouped = Marginal::zeros_in(&g, 2, Basis::Modal).unwrap();
        collapse_into_modal(&Level::Factored(f), &spec, ONE, grouped.data_mut()).unwrap();
        assert!(via_dense.max_abs_diff(&grouped).unwrap() < 1e-13);
        let pos = b_collapse(&dense.to_position(), &spec).unwrap();
        assert!(via_dense.max_abs_diff(&pos).unwrap() < 1e-12);
    }

    #[test]
    fn alpha_ranges() {
        assert_eq!(admissible_alpha_range(1, 2).unwrap(), AlphaRange { lower: 0.5, closed: false });
        assert_eq!(admissible_alpha_range(3, 2).unwrap(), AlphaRange { lower: 1.0, closed: true });
        let r = admissible_alpha_range(2, 4).unwrap();
        assert!((r.lower - 5.0 / 6.0).abs() < 1e-15 && !r.closed);
        assert!(matches!(admissible_alpha_range(1, 3), Err(Error::UnsupportedOrder(3))));
        assert!(!admissible_alpha_range(1, 2).unwrap().contains(0.4));
    }

    #[test]
    fn b_hat_shapes() {
        let g = make_grid(1, 8, 2.0 * PI).unwrap();
        let spec = InteractionSpec::new(2, 1.0).unwrap();
        let s = HierarchyState::factorized(&g, &plane(&g), 3).unwrap();
        let b = b_hat(&s, &spec).unwrap();
        assert_eq!(b.truncation(), 2);
        assert!(b.level_norms(1.0).unwrap().iter().all(|n| *n < 1e-14));
        let short = HierarchyState::factorized(&g, &plane(&g), 1).unwrap();
        assert!(b_hat(&short, &spec).is_err());
    }
}
