//! Dense `k`-particle kernels `gamma(x_1..x_k; x'_1..x'_k)` and their structure checks.
//!
//! Storage is row-major over `2k` slots ordered `(x_1..x_k, x'_1..x'_k)`. A
//! marginal is tagged with its [`Basis`]: position samples, or coefficients
//! `c(q; q')` in the orthonormal basis `e_q(x) = e^{ipx} / L^{d/2}` with
//! `gamma = sum c(q;q') prod e_{q_j}(x_j) prod conj(e_{q'_j}(x'_j))`.
//! Position to modal multiplies by `h^{dk}` after the per-slot unitary DFTs.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{sobolev_weights, Direction, TorusGrid};
use crate::math;

/// Dense marginals above this many entries need an explicit override.
pub const DENSE_GUARD: u128 = 1 << 28;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Basis {
    Position,
    Modal,
}

#[derive(Debug, Clone)]
pub struct Marginal {
    k: usize,
    grid: TorusGrid,
    basis: Basis,
    data: Vec<Complex64>,
}

/// Number of entries of a dense level-`k` marginal.
pub fn element_count(grid: &TorusGrid, k: usize) -> u128 {
    (grid.slot_len() as u128).saturating_pow(2 * k as u32)
}

fn checked_len(grid: &TorusGrid, k: usize, allow_large: bool) -> Result<usize> {
    let n = element_count(grid, k);
    if !allow_large && n > DENSE_GUARD {
        return Err(Error::TooLarge { elements: n });
    }
    usize::try_from(n).map_err(|_| Error::TooLarge { elements: n })
}

pub(crate) fn half_len(grid: &TorusGrid, k: usize) -> usize {
    grid.slot_len().pow(k as u32)
}

/// Products of per-slot weights over `k` slots, in row-major slot order.
pub(crate) fn tensor_weights<T>(per_slot: &[T], k: usize, one: T) -> Vec<T>
where
    T: Copy + core::ops::Mul<Output = T>,
{
    let mut out = vec![one];
    for _ in 0..k {
        let mut next = Vec::with_capacity(out.len() * per_slot.len());
        for &a in &out {
            for &b in per_slot {
                next.push(a * b);
            }
        }
        out = next;
    }
    out
}

impl Marginal {
    /// Zero marginal in position basis; subject to the dense memory guard.
    pub fn zeros(grid: &TorusGrid, k: usize) -> Result<Self> {
        Self::zeros_in(grid, k, Basis::Position)
    }

    pub fn zeros_in(grid: &TorusGrid, k: usize, basis: Basis) -> Result<Self> {
        if k == 0 {
            return Err(Error::LevelOutOfRange {
                level: 0,
                reason: "marginals start at k = 1".into(),
            });
        }
        let len = checked_len(grid, k, false)?;
        Ok(Self {
            k,
            grid: grid.clone(),
            basis,
            data: vec![ZERO; len],
        })
    }

    /// Zero marginal that bypasses the memory guard. The caller owns the allocation risk.
    pub fn zeros_oversized(grid: &TorusGrid, k: usize, basis: Basis) -> Result<Self> {
        if k == 0 {
            return Err(Error::LevelOutOfRange {
                level: 0,
                reason: "marginals start at k = 1".into(),
            });
        }
        let len = checked_len(grid, k, true)?;
        Ok(Self {
            k,
            grid: grid.clone(),
            basis,
            data: vec![ZERO; len],
        })
    }

    pub fn from_data(grid: &TorusGrid, k: usize, basis: Basis, data: Vec<Complex64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::LevelOutOfRange {
                level: 0,
                reason: "marginals start at k = 1".into(),
            });
        }
        let expected = checked_len(grid, k, true)?;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            k,
            grid: grid.clone(),
            basis,
            data,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn basis(&self) -> Basis {
        self.basis
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    /// Length of the unprimed (or primed) half, `(M^d)^k`.
    pub fn half_len(&self) -> usize {
        half_len(&self.grid, self.k)
    }

    pub fn into_basis(mut self, basis: Basis) -> Self {
        if self.basis == basis {
            return self;
        }
        let slots = 2 * self.k;
        for s in 0..slots {
            let unprimed = s < self.k;
            let dir = match (basis, unprimed) {
                (Basis::Modal, true) | (Basis::Position, false) => Direction::Forward,
                _ => Direction::Inverse,
            };
            self.grid.transform_slot(&mut self.data, slots, s, dir);
        }
        let hk = math::powi(self.grid.cell_volume(), self.k as i32);
        let scale = if basis == Basis::Modal { hk } else { 1.0 / hk };
        self.data.iter_mut().for_each(|z| *z *= scale);
        self.basis = basis;
        self
    }

    pub fn to_basis(&self, basis: Basis) -> Self {
        self.clone().into_basis(basis)
    }

    pub fn to_modal(&self) -> Self {
        self.to_basis(Basis::Modal)
    }

    pub fn to_position(&self) -> Self {
        self.to_basis(Basis::Position)
    }

    pub fn scale(&mut self, a: Complex64) {
        self.data.iter_mut().for_each(|z| *z *= a);
    }

    pub(crate) fn check_compatible(&self, other: &Marginal) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        if self.k != other.k {
            return Err(Error::LevelOutOfRange {
                level: other.k,
                reason: alloc::format!("expected level {}", self.k),
            });
        }
        Ok(())
    }

    /// `self += a * other`, converting `other` to this basis if needed.
    pub fn add_scaled(&mut self, a: Complex64, other: &Marginal) -> Result<()> {
        self.check_compatible(other)?;
        if other.basis == self.basis {
            for (x, y) in self.data.iter_mut().zip(&other.data) {
                *x += a * y;
            }
        } else {
            let o = other.to_basis(self.basis);
            for (x, y) in self.data.iter_mut().zip(&o.data) {
                *x += a * y;
            }
        }
        Ok(())
    }

    pub fn sub(&self, other: &Marginal) -> Result<Marginal> {
        let mut out = self.clone();
        out.add_scaled(Complex64::new(-1.0, 0.0), other)?;
        Ok(out)
    }

    /// `Tr gamma`; `h^{dk} sum_x gamma(x;x)` in position basis.
    pub fn trace(&self) -> Complex64 {
        let nu = self.half_len();
        let mut acc = ZERO;
        for u in 0..nu {
            acc += self.data[u * nu + u];
        }
        match self.basis {
            Basis::Modal => acc,
            Basis::Position => acc * math::powi(self.grid.cell_volume(), self.k as i32),
        }
    }

    /// `Tr_{k} gamma^{(k)}`, contracting the last particle pair.
    pub fn partial_trace(&self) -> Result<Marginal> {
        if self.k < 2 {
            return Err(Error::LevelOutOfRange {
                level: self.k,
                reason: "partial trace needs k >= 2".into(),
            });
        }
        let ns = self.grid.slot_len();
        let k = self.k - 1;
        let nu = half_len(&self.grid, k);
        let mut out = vec![ZERO; nu * nu];
        let w = match self.basis {
            Basis::Modal => 1.0,
            Basis::Position => self.grid.cell_volume(),
        };
        for u in 0..nu {
            for y in 0..ns {
                let row = (u * ns + y) * nu * ns;
                for v in 0..nu {
                    out[u * nu + v] += self.data[row + v * ns + y];
                }
            }
        }
        out.iter_mut().for_each(|z| *z *= w);
        Marginal::from_data(&self.grid, k, self.basis, out)
    }

    /// Hilbert–Schmidt norm of `S^{(k,alpha)} gamma`.
    pub fn h_alpha_norm(&self, alpha: f64) -> Result<f64> {
        let w = sobolev_weights(&self.grid, alpha)?;
        let w2: Vec<f64> = w.iter().map(|x| x * x).collect();
        let wk = tensor_weights(&w2, self.k, 1.0);
        let modal;
        let data = match self.basis {
            Basis::Modal => &self.data,
            Basis::Position => {
                modal = self.to_modal();
                &modal.data
            }
        };
        let nu = wk.len();
        let mut acc = 0.0;
        for u in 0..nu {
            let row = &data[u * nu..(u + 1) * nu];
            let mut r = 0.0;
            for (z, wv) in row.iter().zip(&wk) {
                r += z.norm_sqr() * wv;
            }
            acc += r * wk[u];
        }
        Ok(math::sqrt(acc))
    }

    /// `max |gamma(x;x') - conj gamma(x';x)|` on position samples.
    pub fn hermiticity_defect(&self) -> f64 {
        let pos;
        let data = match self.basis {
            Basis::Position => &self.data,
            Basis::Modal => {
                pos = self.to_position();
                &pos.data
            }
        };
        let nu = self.half_len();
        let mut worst: f64 = 0.0;
        for u in 0..nu {
            for v in u..nu {
                let d = (data[u * nu + v] - data[v * nu + u].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    /// Largest deviation under adjacent transpositions of unprimed or primed slots.
    pub fn symmetry_defect(&self) -> f64 {
        if self.k < 2 {
            return 0.0;
        }
        let pos;
        let data = match self.basis {
            Basis::Position => &self.data,
            Basis::Modal => {
                pos = self.to_position();
                &pos.data
            }
        };
        let ns = self.grid.slot_len();
        let slots = 2 * self.k;
        let strides: Vec<usize> = (0..slots).map(|s| ns.pow((slots - 1 - s) as u32)).collect();
        let mut worst: f64 = 0.0;
        for half in 0..2 {
            for i in 0..self.k - 1 {
                let a = half * self.k + i;
                let (sa, sb) = (strides[a], strides[a + 1]);
                for (idx, z) in data.iter().enumerate() {
                    let da = (idx / sa) % ns;
                    let db = (idx / sb) % ns;
                    if da >= db {
                        continue;
                    }
                    let j = idx + db * sa + da * sb - da * sa - db * sb;
                    worst = worst.max((z - data[j]).norm());
                }
            }
        }
        worst
    }

    /// Replaces `gamma` by `(gamma + gamma^*) / 2`.
    pub fn hermitize(&mut self) {
        let nu = self.half_len();
        for u in 0..nu {
            for v in u..nu {
                let a = self.data[u * nu + v];
                let b = self.data[v * nu + u];
                let m = (a + b.conj()) * 0.5;
                self.data[u * nu + v] = m;
                self.data[v * nu + u] = m.conj();
            }
        }
    }

    /// Averages over all permutations of unprimed slots and, separately, of primed slots.
    pub fn symmetrize(&mut self) {
        if self.k < 2 {
            return;
        }
        let perms = permutations(self.k);
        let ns = self.grid.slot_len();
        let slots = 2 * self.k;
        for half in 0..2 {
            let mut acc = vec![ZERO; self.data.len()];
            let mut digits = vec![0usize; slots];
            for perm in &perms {
                for (idx, out) in acc.iter_mut().enumerate() {
                    let mut rest = idx;
                    for s in (0..slots).rev() {
                        digits[s] = rest % ns;
                        rest /= ns;
                    }
                    let mut j = 0usize;
                    for s in 0..slots {
                        let src = if (half == 0 && s < self.k) || (half == 1 && s >= self.k) {
                            let base = half * self.k;
                            digits[base + perm[s - base]]
                        } else {
                            digits[s]
                        };
                        j = j * ns + src;
                    }
                    *out += self.data[j];
                }
            }
            let inv = 1.0 / perms.len() as f64;
            acc.iter_mut().for_each(|z| *z *= inv);
            self.data = acc;
        }
    }

    /// Smallest eigenvalue of the hermitian part viewed as an operator (needs `(M^d)^k <= 1024`).
    pub fn min_eigenvalue(&self) -> Result<f64> {
        let nu = self.half_len();
        if nu > 1024 {
            return Err(Error::TooLarge {
                elements: (nu * nu) as u128,
            });
        }
        let modal;
        let c = match self.basis {
            Basis::Modal => &self.data,
            Basis::Position => {
                modal = self.to_modal();
                &modal.data
            }
        };
        let m = DMatrix::<Complex64>::from_fn(nu, nu, |i, j| {
            (c[i * nu + j] + c[j * nu + i].conj()) * 0.5
        });
        let eig = m.symmetric_eigenvalues();
        Ok(eig.iter().cloned().fold(f64::INFINITY, f64::min))
    }

    pub fn max_abs_diff(&self, other: &Marginal) -> Result<f64> {
        self.check_compatible(other)?;
        let o;
        let od = if other.basis == self.basis {
            &other.data
        } else {
            o = other.to_basis(self.basis);
            &o.data
        };
        Ok(self
            .data
            .iter()
            .zip(od)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// `prod_j phi(x_j) conj(phi(x'_j))` on the grid.
pub fn factorized_marginal(grid: &TorusGrid, phi: &[Complex64], k: usize) -> Result<Marginal> {
    if phi.len() != grid.slot_len() {
        return Err(Error::ShapeMismatch {
            expected: grid.slot_len(),
            actual: phi.len(),
        });
    }
    let len = checked_len(grid, k, false)?;
    if k == 0 {
        return Err(Error::LevelOutOfRange {
            level: 0,
            reason: "marginals start at k = 1".into(),
        });
    }
    let conj: Vec<Complex64> = phi.iter().map(|z| z.conj()).collect();
    let u = tensor_weights(phi, k, Complex64::new(1.0, 0.0));
    let v = tensor_weights(&conj, k, Complex64::new(1.0, 0.0));
    let mut data = Vec::with_capacity(len);
    for a in &u {
        for b in &v {
            data.push(a * b);
        }
    }
    Marginal::from_data(grid, k, Basis::Position, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tolerances {
    /// Structural defects above this are reported as failures.
    pub structural: f64,
    /// Eigenvalues above `-positivity` count as nonnegative.
    pub positivity: f64,
    /// Also run the eigenvalue check at `k = 2` when `(M^d)^2 <= 1024`.
    pub positivity_k2: bool,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            structural: 1e-10,
            positivity: 1e-10,
            positivity_k2: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ValidationReport {
    pub hermiticity_defect: f64,
    pub symmetry_defect: f64,
    pub trace_re: f64,
    pub trace_im: f64,
    /// `None` when positivity was not checked at this level.
    pub positivity_flag: Option<bool>,
    pub min_eigenvalue: Option<f64>,
    pub structural_ok: bool,
}

impl ValidationReport {
    pub fn trace(&self) -> Complex64 {
        Complex64::new(self.trace_re, self.trace_im)
    }
}

pub fn validate_marginal(gamma: &Marginal, tol: &Tolerances) -> ValidationReport {
    let herm = gamma.hermiticity_defect();
    let sym = gamma.symmetry_defect();
    let tr = gamma.trace();
    let check = gamma.k == 1 || (gamma.k == 2 && tol.positivity_k2 && gamma.half_len() <= 1024);
    let min_eig = if check { gamma.min_eigenvalue().ok() } else { None };
    ValidationReport {
        hermiticity_defect: herm,
        symmetry_defect: sym,
        trace_re: tr.re,
        trace_im: tr.im,
        positivity_flag: min_eig.map(|e| e >= -tol.positivity),
        min_eigenvalue: min_eig,
        structural_ok: herm <= tol.structural && sym <= tol.structural,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use approx::assert_relative_eq;
    use core::f64::consts::PI;

    fn grid8() -> TorusGrid {
        make_grid(1, 8, 2.0 * PI).unwrap()
    }

    fn smooth(grid: &TorusGrid) -> Vec<Complex64> {
        let l = grid.period();
        let raw: Vec<Complex64> = (0..grid.slot_len())
            .map(|n| {
                let x = grid.slot_position(n)[0];
                Complex64::new(1.0 + 0.5 * math::cos(2.0 * PI * x / l), 0.3 * math::cos(4.0 * PI * x / l))
            })
            .collect();
        let norm = math::sqrt(raw.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.cell_volume());
        raw.iter().map(|z| z / norm).collect()
    }

    #[test]
    fn constant_product_state() {
        let g = grid8();
        let c = Complex64::new(1.0 / math::sqrt(g.period()), 0.0);
        let m = factorized_marginal(&g, &[c; 8], 2).unwrap();
        for z in m.data() {
            assert_relative_eq!(z.re, 1.0 / (g.period() * g.period()), epsilon = 1e-15);
        }
        assert_relative_eq!(m.trace().re, 1.0, epsilon = 1e-12);
        for alpha in [0.0, 1.0, 2.5] {
            assert_relative_eq!(m.h_alpha_norm(alpha).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn plane_wave_norms() {
        let g = grid8();
        let phi: Vec<Complex64> = (0..8)
            .map(|n| math::cis(n as f64 * g.spacing()) / math::sqrt(g.period()))
            .collect();
        let m1 = factorized_marginal(&g, &phi, 1).unwrap();
        assert_relative_eq!(m1.trace().re, 1.0, epsilon = 1e-12);
        assert_relative_eq!(m1.h_alpha_norm(1.0).unwrap(), 2.0, epsilon = 1e-12);
        let m2 = factorized_marginal(&g, &phi, 2).unwrap();
        assert_relative_eq!(m2.h_alpha_norm(1.0).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn factorized_is_structurally_exact() {
        let g = grid8();
        let phi = smooth(&g);
        let m = factorized_marginal(&g, &phi, 3).unwrap();
        let r = validate_marginal(&m, &Tolerances::default());
        assert!(r.hermiticity_defect <= 1e-14);
        assert!(r.symmetry_defect <= 1e-14);
        assert_relative_eq!(r.trace_re, 1.0, epsilon = 1e-12);
        let m1 = factorized_marginal(&g, &phi, 1).unwrap();
        let r1 = validate_marginal(&m1, &Tolerances::default());
        assert_eq!(r1.positivity_flag, Some(true));
    }

    #[test]
    fn perturbation_shows_in_hermiticity_defect() {
        let g = grid8();
        let mut m = factorized_marginal(&g, &smooth(&g), 1).unwrap();
        m.data_mut()[3] += Complex64::new(1e-3, 0.0);
        assert_relative_eq!(m.hermiticity_defect(), 1e-3, epsilon = 1e-12);
    }

    #[test]
    fn zero_marginal() {
        let g = grid8();
        let m = Marginal::zeros(&g, 2).unwrap();
        let r = validate_marginal(&m, &Tolerances::default());
        assert_eq!(r.trace(), ZERO);
        assert_eq!(r.hermiticity_defect, 0.0);
        assert_eq!(r.symmetry_defect, 0.0);
        let pt = m.partial_trace().unwrap();
        assert!(pt.data().iter().all(|z| *z == ZERO));
    }

    #[test]
    fn trace_is_linear() {
        let g = grid8();
        let mut m = factorized_marginal(&g, &smooth(&g), 2).unwrap();
        let t = m.trace();
        m.scale(Complex64::new(2.0, 0.0));
        assert_relative_eq!(m.trace().re, 2.0 * t.re, epsilon = 1e-14);
    }

    #[test]
    fn partial_trace_of_product_state() {
        let g = grid8();
        let phi = smooth(&g);
        let m3 = factorized_marginal(&g, &phi, 3).unwrap();
        let m2 = factorized_marginal(&g, &phi, 2).unwrap();
        assert!(m3.partial_trace().unwrap().max_abs_diff(&m2).unwrap() < 1e-14);
        let modal = m3.to_modal().partial_trace().unwrap();
        assert!(modal.max_abs_diff(&m2).unwrap() < 1e-13);
    }

    #[test]
    fn basis_round_trip_and_parseval() {
        let g = make_grid(1, 4, 1.3).unwrap();
        let data: Vec<Complex64> = (0..256)
            .map(|i| Complex64::new(math::cos(i as f64 * 0.7), math::cos(i as f64 * 1.9 + 0.2)))
            .collect();
        let m = Marginal::from_data(&g, 2, Basis::Position, data).unwrap();
        let back = m.to_modal().to_position();
        assert!(m.max_abs_diff(&back).unwrap() < 1e-12);
        let l2 = math::sqrt(
            m.data().iter().map(|z| z.norm_sqr()).sum::<f64>() * math::powi(g.cell_volume(), 4),
        );
        assert_relative_eq!(m.h_alpha_norm(0.0).unwrap(), l2, max_relative = 1e-12);
    }

    #[test]
    fn guard_blocks_large_allocations() {
        let g = make_grid(1, 16, 1.0).unwrap();
        assert!(matches!(Marginal::zeros(&g, 4), Err(Error::TooLarge { .. })));
        assert!(Marginal::zeros(&g, 3).is_ok());
    }

    #[test]
    fn symmetrize_and_hermitize_fix_defects() {
        let g = make_grid(1, 4, 1.0).unwrap();
        let data: Vec<Complex64> = (0..256)
            .map(|i| Complex64::new(math::cos(i as f64 * 0.37), math::cos(i as f64 * 0.91)))
            .collect();
        let mut m = Marginal::from_data(&g, 2, Basis::Position, data).unwrap();
        assert!(m.symmetry_defect() > 1e-3);
        m.symmetrize();
        m.hermitize();
        assert!(m.symmetry_defect() < 1e-14);
        assert!(m.hermiticity_defect() < 1e-14);
    }
}
