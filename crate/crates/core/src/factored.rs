//! Marginals stored as finite sums of product kernels.
//!
//! `gamma(x;x') = sum_r w_r prod_j u_{r,j}(x_j) prod_j v_{r,j}(x'_j)`, with the
//! slot functions kept as position samples. Product and mixture data (and their
//! free evolutions) stay exact in this form at levels where a dense tensor
//! would not fit in memory.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{phase_weights, sobolev_weights, Side, TorusGrid};
use crate::marginal::{element_count, half_len, tensor_weights, Basis, Marginal, DENSE_GUARD};
use crate::math;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const ROW_NORM_LIMIT: u128 = 1 << 24;

/// One product kernel. `factors` holds `2k` slot functions, unprimed first.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductTerm {
    pub weight: Complex64,
    pub factors: Vec<Complex64>,
}

impl ProductTerm {
    pub fn slot(&self, s: usize, ns: usize) -> &[Complex64] {
        &self.factors[s * ns..(s + 1) * ns]
    }

    fn same_factors(&self, other: &ProductTerm) -> bool {
        self.factors.len() == other.factors.len()
            && self
                .factors
                .iter()
                .zip(&other.factors)
                .all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits())
    }
}

#[derive(Debug, Clone)]
pub struct FactoredMarginal {
    k: usize,
    grid: TorusGrid,
    terms: Vec<ProductTerm>,
}

impl FactoredMarginal {
    pub fn zero(grid: &TorusGrid, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::LevelOutOfRange {
                level: 0,
                reason: "marginals start at k = 1".into(),
            });
        }
        Ok(Self {
            k,
            grid: grid.clone(),
            terms: Vec::new(),
        })
    }

    /// `prod_j phi(x_j) conj(phi(x'_j))`.
    pub fn factorized(grid: &TorusGrid, phi: &[Complex64], k: usize) -> Result<Self> {
        let conj: Vec<Complex64> = phi.iter().map(|z| z.conj()).collect();
        let mut out = Self::zero(grid, k)?;
        let u: Vec<&[Complex64]> = vec![phi; k];
        let v: Vec<&[Complex64]> = vec![&conj; k];
        out.push_product(ONE, &u, &v)?;
        Ok(out)
    }

    /// `sum_r w_r (phi_r conj(phi_r))^{tensor k}`.
    pub fn mixture(grid: &TorusGrid, weights: &[f64], phis: &[Vec<Complex64>], k: usize) -> Result<Self> {
        if weights.len() != phis.len() {
            return Err(Error::ShapeMismatch {
                expected: weights.len(),
                actual: phis.len(),
            });
        }
        let mut out = Self::zero(grid, k)?;
        for (w, phi) in weights.iter().zip(phis) {
            let conj: Vec<Complex64> = phi.iter().map(|z| z.conj()).collect();
            let u: Vec<&[Complex64]> = vec![phi; k];
            let v: Vec<&[Complex64]> = vec![&conj; k];
            out.push_product(Complex64::new(*w, 0.0), &u, &v)?;
        }
        Ok(out)
    }

    pub fn push_product(&mut self, weight: Complex64, unprimed: &[&[Complex64]], primed: &[&[Complex64]]) -> Result<()> {
        let ns = self.grid.slot_len();
        if unprimed.len() != self.k || primed.len() != self.k {
            return Err(Error::ShapeMismatch {
                expected: self.k,
                actual: unprimed.len().min(primed.len()),
            });
        }
        let mut factors = Vec::with_capacity(2 * self.k * ns);
        for f in unprimed.iter().chain(primed) {
            if f.len() != ns {
                return Err(Error::ShapeMismatch {
                    expected: ns,
                    actual: f.len(),
                });
            }
            factors.extend_from_slice(f);
        }
        self.terms.push(ProductTerm { weight, factors });
        Ok(())
    }

    pub fn push_term(&mut self, term: ProductTerm) -> Result<()> {
        let expected = 2 * self.k * self.grid.slot_len();
        if term.factors.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: term.factors.len(),
            });
        }
        self.terms.push(term);
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn terms(&self) -> &[ProductTerm] {
        &self.terms
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn scale(&mut self, a: Complex64) {
        self.terms.iter_mut().for_each(|t| t.weight *= a);
    }

    /// `self - other`. Terms with bitwise identical factors are merged, so equal
    /// free evolutions cancel exactly.
    pub fn sub(&self, other: &FactoredMarginal) -> Result<FactoredMarginal> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        if self.k != other.k {
            return Err(Error::LevelOutOfRange {
                level: other.k,
                reason: alloc::format!("expected level {}", self.k),
            });
        }
        let mut out = self.clone();
        for t in &other.terms {
            match out.terms.iter_mut().find(|s| s.same_factors(t)) {
                Some(s) => s.weight -= t.weight,
                None => out.terms.push(ProductTerm {
                    weight: -t.weight,
                    factors: t.factors.clone(),
                }),
            }
        }
        out.terms.retain(|t| t.weight != ZERO);
        Ok(out)
    }

    pub fn add(&self, other: &FactoredMarginal) -> Result<FactoredMarginal> {
        let mut neg = other.clone();
        neg.scale(Complex64::new(-1.0, 0.0));
        self.sub(&neg)
    }

    /// `h^d sum_x u(x) v(x)` for one unprimed/primed slot pair.
    fn pair_trace(&self, t: &ProductTerm, j: usize) -> Complex64 {
        let ns = self.grid.slot_len();
        let u = t.slot(j, ns);
        let v = t.slot(self.k + j, ns);
        u.iter().zip(v).map(|(a, b)| a * b).sum::<Complex64>() * self.grid.cell_volume()
    }

    pub fn trace(&self) -> Complex64 {
        self.terms
            .iter()
            .map(|t| (0..self.k).fold(t.weight, |acc, j| acc * self.pair_trace(t, j)))
            .sum()
    }

    pub fn partial_trace(&self) -> Result<FactoredMarginal> {
        if self.k < 2 {
            return Err(Error::LevelOutOfRange {
                level: self.k,
                reason: "partial trace needs k >= 2".into(),
            });
        }
        let ns = self.grid.slot_len();
        let k = self.k - 1;
        let mut out = Self::zero(&self.grid, k)?;
        for t in &self.terms {
            let w = t.weight * self.pair_trace(t, self.k - 1);
            let mut factors = Vec::with_capacity(2 * k * ns);
            factors.extend_from_slice(&t.factors[..k * ns]);
            factors.extend_from_slice(&t.factors[self.k * ns..(self.k + k) * ns]);
            out.terms.push(ProductTerm { weight: w, factors });
        }
        Ok(out)
    }

    /// Modal coefficients of every slot of every term.
    pub(crate) fn modal_factors(&self) -> Vec<Vec<Vec<Complex64>>> {
        let ns = self.grid.slot_len();
        self.terms
            .iter()
            .map(|t| {
                (0..2 * self.k)
                    .map(|s| {
                        let side = if s < self.k { Side::Unprimed } else { Side::Primed };
                        self.grid.slot_to_modal(t.slot(s, ns), side)
                    })
                    .collect()
            })
            .collect()
    }

    /// Weighted Hilbert–Schmidt inner products `<gamma_r, gamma_s>` over terms.
    fn gram_norm_sqr(&self, alpha: f64) -> Result<f64> {
        let w = sobolev_weights(&self.grid, alpha)?;
        let w2: Vec<f64> = w.iter().map(|x| x * x).collect();
        let modal = self.modal_factors();
        let mut acc = ZERO;
        for (r, a) in modal.iter().enumerate() {
            for (s, b) in modal.iter().enumerate() {
                let mut g = self.terms[r].weight * self.terms[s].weight.conj();
                for slot in 0..2 * self.k {
                    let ip: Complex64 = a[slot]
                        .iter()
                        .zip(&b[slot])
                        .zip(&w2)
                        .map(|((x, y), wt)| x * y.conj() * wt)
                        .sum();
                    g *= ip;
                }
                acc += g;
            }
        }
        Ok(acc.re.max(0.0))
    }

    /// Up to `2^24` entries the norm is summed row by row over the dense kernel,
    /// which keeps cancelling sums accurate; larger levels use the term Gram matrix.
    pub fn h_alpha_norm(&self, alpha: f64) -> Result<f64> {
        if element_count(&self.grid, self.k) > ROW_NORM_LIMIT {
            return Ok(math::sqrt(self.gram_norm_sqr(alpha)?));
        }
        let w = sobolev_weights(&self.grid, alpha)?;
        let w2: Vec<f64> = w.iter().map(|x| x * x).collect();
        let wk = tensor_weights(&w2, self.k, 1.0);
        let halves: Vec<(Vec<Complex64>, Vec<Complex64>)> = self
            .terms
            .iter()
            .zip(self.modal_factors())
            .map(|(t, f)| {
                let mut u = outer(&f[..self.k]);
                u.iter_mut().for_each(|z| *z *= t.weight);
                (u, outer(&f[self.k..]))
            })
            .collect();
        let nu = wk.len();
        let mut row = vec![ZERO; nu];
        let mut acc = 0.0;
        for u in 0..nu {
            row.iter_mut().for_each(|z| *z = ZERO);
            for (x, y) in &halves {
                let a = x[u];
                if a == ZERO {
                    continue;
                }
                for (r, b) in row.iter_mut().zip(y) {
                    *r += a * b;
                }
            }
            let r: f64 = row.iter().zip(&wk).map(|(z, w)| z.norm_sqr() * w).sum();
            acc += r * wk[u];
        }
        Ok(math::sqrt(acc))
    }

    /// `U(t) gamma`: unprimed slots evolve by `e^{-it|p|^2}`, primed by the conjugate multiplier.
    pub fn free_evolve(&self, t: f64) -> Result<FactoredMarginal> {
        let ns = self.grid.slot_len();
        let pu = phase_weights(&self.grid, t, Side::Unprimed)?;
        let pp = phase_weights(&self.grid, t, Side::Primed)?;
        let mut out = self.clone();
        for term in &mut out.terms {
            for s in 0..2 * self.k {
                let (side, ph) = if s < self.k { (Side::Unprimed, &pu) } else { (Side::Primed, &pp) };
                let slot = &mut term.factors[s * ns..(s + 1) * ns];
                let mut c = self.grid.slot_to_modal(slot, side);
                c.iter_mut().zip(ph.iter()).for_each(|(z, p)| *z *= p);
                slot.copy_from_slice(&self.grid.slot_to_position(&c, side));
            }
        }
        Ok(out)
    }

    /// Hermitian adjoint `conj gamma(x';x)`.
    pub fn adjoint(&self) -> FactoredMarginal {
        let ns = self.grid.slot_len();
        let k = self.k;
        let mut out = self.clone();
        for (t, src) in out.terms.iter_mut().zip(&self.terms) {
            t.weight = src.weight.conj();
            for j in 0..k {
                for i in 0..ns {
                    t.factors[j * ns + i] = src.factors[(k + j) * ns + i].conj();
                    t.factors[(k + j) * ns + i] = src.factors[j * ns + i].conj();
                }
            }
        }
        out
    }

    /// Swaps slots `a` and `b` (both unprimed or both primed).
    pub fn swap_slots(&self, a: usize, b: usize) -> FactoredMarginal {
        let ns = self.grid.slot_len();
        let mut out = self.clone();
        for t in &mut out.terms {
            for i in 0..ns {
                t.factors.swap(a * ns + i, b * ns + i);
            }
        }
        out
    }

    /// HS norm of `gamma - gamma^*`.
    pub fn hermiticity_defect(&self) -> Result<f64> {
        self.sub(&self.adjoint())?.h_alpha_norm(0.0)
    }

    /// Largest HS norm of `gamma - tau gamma` over adjacent transpositions `tau`.
    pub fn symmetry_defect(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for half in 0..2 {
            for i in 0..self.k.saturating_sub(1) {
                let a = half * self.k + i;
                let d = self.sub(&self.swap_slots(a, a + 1))?.h_alpha_norm(0.0)?;
                worst = worst.max(d);
            }
        }
        Ok(worst)
    }

    /// Dense modal form, subject to the memory guard.
    pub fn to_dense(&self, basis: Basis) -> Result<Marginal> {
        if element_count(&self.grid, self.k) > DENSE_GUARD {
            return Err(Error::TooLarge {
                elements: element_count(&self.grid, self.k),
            });
        }
        let mut out = Marginal::zeros_in(&self.grid, self.k, Basis::Modal)?;
        self.accumulate_modal(ONE, out.data_mut());
        Ok(out.into_basis(basis))
    }

    /// `out += a * gamma` in modal coefficients.
    pub(crate) fn accumulate_modal(&self, a: Complex64, out: &mut [Complex64]) {
        let nu = half_len(&self.grid, self.k);
        for (term, f) in self.terms.iter().zip(self.modal_factors()) {
            let u = outer(&f[..self.k]);
            let v = outer(&f[self.k..]);
            add_outer(out, a * term.weight, &u, &v, nu);
        }
    }
}

/// Row-major tensor product of slot vectors.
pub(crate) fn outer(vs: &[Vec<Complex64>]) -> Vec<Complex64> {
    let mut out = vec![ONE];
    for v in vs {
        let mut next = Vec::with_capacity(out.len() * v.len());
        for a in &out {
            for b in v {
                next.push(a * b);
            }
        }
        out = next;
    }
    out
}

/// `out[u, v] += a * x[u] * y[v]`.
pub(crate) fn add_outer(out: &mut [Complex64], a: Complex64, x: &[Complex64], y: &[Complex64], nv: usize) {
    for (row, xu) in out.chunks_exact_mut(nv).zip(x) {
        let s = a * xu;
        if s == ZERO {
            continue;
        }
        for (o, yv) in row.iter_mut().zip(y) {
            *o += s * yv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::marginal::factorized_marginal;
    use approx::assert_relative_eq;
    use core::f64::consts::PI;

    fn field(grid: &TorusGrid, shift: f64) -> Vec<Complex64> {
        let raw: Vec<Complex64> = (0..grid.slot_len())
            .map(|n| {
                let x = grid.slot_position(n)[0];
                Complex64::new(1.0 + 0.5 * math::cos(x + shift), 0.2 * math::cos(2.0 * x))
            })
            .collect();
        let norm = math::sqrt(raw.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.cell_volume());
        raw.iter().map(|z| z / norm).collect()
    }

    #[test]
    fn dense_agrees_with_factorized_marginal() {
        let g = make_grid(1, 8, 2.0 * PI).unwrap();
        let phi = field(&g, 0.0);
        let f = FactoredMarginal::factorized(&g, &phi, 2).unwrap();
        let d = factorized_marginal(&g, &phi, 2).unwrap();
        assert!(f.to_dense(Basis::Position).unwrap().max_abs_diff(&d).unwrap() < 1e-14);
        assert_relative_eq!(f.trace().re, 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.h_alpha_norm(1.0).unwrap(), d.h_alpha_norm(1.0).unwrap(), max_relative = 1e-12);
        let pt = f.partial_trace().unwrap().to_dense(Basis::Position).unwrap();
        assert!(pt.max_abs_diff(&d.partial_trace().unwrap()).unwrap() < 1e-14);
    }

    #[test]
    fn mixture_norm_matches_dense() {
        let g = make_grid(1, 8, 2.0 * PI).unwrap();
        let phis = vec![field(&g, 0.0), field(&g, 1.3)];
        let f = FactoredMarginal::mixture(&g, &[0.3, 0.7], &phis, 2).unwrap();
        let d = f.to_dense(Basis::Modal).unwrap();
        assert_relative_eq!(f.h_alpha_norm(1.5).unwrap(), d.h_alpha_norm(1.5).unwrap(), max_relative = 1e-12);
        assert_relative_eq!(f.trace().re, 1.0, epsilon = 1e-12);
        assert_eq!(f.hermiticity_defect().unwrap(), 0.0);
        assert_eq!(f.symmetry_defect().unwrap(), 0.0);
    }

    #[test]
    fn free_evolution_matches_dense_phases() {
        let g = make_grid(1, 8, 2.0 * PI).unwrap();
        let f = FactoredMarginal::factorized(&g, &field(&g, 0.4), 2).unwrap();
        let t = 0.37;
        let evolved = f.free_evolve(t).unwrap().to_dense(Basis::Modal).unwrap();
        let base = f.to_dense(Basis::Modal).unwrap();
        let pu = phase_weights(&g, t, Side::Unprimed).unwrap();
        let pp = phase_weights(&g, t, Side::Primed).unwrap();
        let wu = tensor_weights(&pu, 2, ONE);
        let wv = tensor_weights(&pp, 2, ONE);
        let nu = wu.len();
        for u in 0..nu {
            for v in 0..nu {
                let expect = base.data()[u * nu + v] * wu[u] * wv[v];
                assert!((expect - evolved.data()[u * nu + v]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_terms_cancel_exactly() {
        let g = make_grid(1, 8, 2.0 * PI).unwrap();
        let f = FactoredMarginal::factorized(&g, &field(&g, 0.0), 3).unwrap().free_evolve(0.2).unwrap();
        let d = f.sub(&f.clone()).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.h_alpha_norm(1.0).unwrap(), 0.0);
    }
}
