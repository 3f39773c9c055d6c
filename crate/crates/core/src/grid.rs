//! Periodic torus discretization and the diagonal Fourier multipliers built on it.
//!
//! A grid has `M` points per axis on `[0, L)^d`. One particle coordinate is a
//! *slot* made of `d` consecutive tensor axes, flattened row-major into a slot
//! index in `0..M^d`. Wavenumbers use standard DFT order with the symmetric
//! alias `m~ in (-M/2, M/2]`; the Nyquist mode gets `+pi M / L`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug)]
struct GridInner {
    dim: usize,
    points: usize,
    period: f64,
    wavenumbers: Vec<f64>,
    slot_len: usize,
    slot_p2: Vec<f64>,
    add: Vec<u32>,
    neg: Vec<u32>,
    dft: Dft,
}

/// Uniform periodic grid `[0, L)^d` with `M` points per axis.
#[derive(Debug, Clone)]
pub struct TorusGrid {
    inner: Arc<GridInner>,
}

impl PartialEq for TorusGrid {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
            || (self.inner.dim == other.inner.dim
                && self.inner.points == other.inner.points
                && self.inner.period.to_bits() == other.inner.period.to_bits())
    }
}

/// Which half of a kernel's arguments an axis belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Unprimed,
    Primed,
}

/// Direction of the unitary DFT. `Forward` maps point samples to mode coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    pub fn reversed(self) -> Self {
        match self {
            Direction::Forward => Direction::Inverse,
            Direction::Inverse => Direction::Forward,
        }
    }
}

/// Symmetric alias of DFT index `m` on `points` samples.
pub fn aliased_index(m: usize, points: usize) -> i64 {
    if 2 * m <= points {
        m as i64
    } else {
        m as i64 - points as i64
    }
}

/// Builds a grid; `M` must be even and at least 4, `L` positive and finite.
pub fn make_grid(dim: usize, points: usize, period: f64) -> Result<TorusGrid> {
    TorusGrid::new(dim, points, period)
}

impl TorusGrid {
    pub fn new(dim: usize, points: usize, period: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidGrid("dimension must be at least 1".into()));
        }
        if points < 4 {
            return Err(Error::InvalidGrid(alloc::format!(
                "M = {points} is below the minimum of 4"
            )));
        }
        if points % 2 != 0 {
            return Err(Error::InvalidGrid(alloc::format!("M = {points} is odd")));
        }
        if !(period > 0.0) || !period.is_finite() {
            return Err(Error::InvalidGrid(alloc::format!(
                "period L = {period} must be positive and finite"
            )));
        }
        let slot_len = points
            .checked_pow(dim as u32)
            .filter(|&n| n <= 1 << 16)
            .ok_or_else(|| Error::InvalidGrid("M^d exceeds 65536 points per slot".into()))?;

        let wavenumbers: Vec<f64> = (0..points)
            .map(|m| 2.0 * PI * aliased_index(m, points) as f64 / period)
            .collect();

        let digits = |s: usize| -> Vec<usize> {
            let mut out = vec![0; dim];
            let mut rest = s;
            for c in (0..dim).rev() {
                out[c] = rest % points;
                rest /= points;
            }
            out
        };
        let compose = |ds: &[usize]| ds.iter().fold(0usize, |acc, &m| acc * points + m);

        let slot_p2 = (0..slot_len)
            .map(|s| digits(s).iter().map(|&m| wavenumbers[m] * wavenumbers[m]).sum())
            .collect();
        let neg = (0..slot_len)
            .map(|s| {
                let ds: Vec<usize> = digits(s).iter().map(|&m| (points - m) % points).collect();
                compose(&ds) as u32
            })
            .collect();
        let mut add = vec![0u32; slot_len * slot_len];
        for a in 0..slot_len {
            let da = digits(a);
            for b in 0..slot_len {
                let db = digits(b);
                let ds: Vec<usize> = da.iter().zip(&db).map(|(x, y)| (x + y) % points).collect();
                add[a * slot_len + b] = compose(&ds) as u32;
            }
        }

        Ok(Self {
            inner: Arc::new(GridInner {
                dim,
                points,
                period,
                wavenumbers,
                slot_len,
                slot_p2,
                add,
                neg,
                dft: Dft::new(points),
            }),
        })
    }

    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    /// Points per axis, `M`.
    pub fn points(&self) -> usize {
        self.inner.points
    }

    /// Period length, `L`.
    pub fn period(&self) -> f64 {
        self.inner.period
    }

    /// Grid spacing `h = L / M`.
    pub fn spacing(&self) -> f64 {
        self.inner.period / self.inner.points as f64
    }

    /// Quadrature weight of one slot, `h^d`.
    pub fn cell_volume(&self) -> f64 {
        math::powi(self.spacing(), self.inner.dim as i32)
    }

    /// Torus volume `L^d`.
    pub fn volume(&self) -> f64 {
        math::powi(self.inner.period, self.inner.dim as i32)
    }

    /// Wavenumbers of one axis in storage order.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.inner.wavenumbers
    }

    pub fn max_wavenumber(&self) -> f64 {
        PI * self.inner.points as f64 / self.inner.period
    }

    /// Number of grid points (or modes) in one slot, `M^d`.
    pub fn slot_len(&self) -> usize {
        self.inner.slot_len
    }

    /// `|p|^2` for every slot mode.
    pub fn slot_wavenumber_sq(&self) -> &[f64] {
        &self.inner.slot_p2
    }

    /// Slot index of the mode sum `a + b` (componentwise mod `M`).
    #[inline]
    pub fn mode_add(&self, a: usize, b: usize) -> usize {
        self.inner.add[a * self.inner.slot_len + b] as usize
    }

    /// Slot index of `-a`.
    #[inline]
    pub fn mode_neg(&self, a: usize) -> usize {
        self.inner.neg[a] as usize
    }

    /// Row-major digits of a slot index.
    pub fn slot_digits(&self, s: usize) -> Vec<usize> {
        let mut out = vec![0; self.inner.dim];
        let mut rest = s;
        for c in (0..self.inner.dim).rev() {
            out[c] = rest % self.inner.points;
            rest /= self.inner.points;
        }
        out
    }

    /// Slot index of an integer mode vector (aliased mod `M`).
    pub fn slot_of_mode(&self, mode: &[i64]) -> usize {
        let m = self.inner.points as i64;
        mode.iter()
            .fold(0usize, |acc, &c| acc * self.inner.points + c.rem_euclid(m) as usize)
    }

    /// Physical coordinates of a slot's grid point.
    pub fn slot_position(&self, s: usize) -> Vec<f64> {
        let h = self.spacing();
        self.slot_digits(s).iter().map(|&n| n as f64 * h).collect()
    }

    /// Coefficients of one slot function in the orthonormal mode basis.
    ///
    /// Unprimed slots expand in `e_q`, primed slots in `conj(e_q)`, matching the
    /// convention of dense marginals.
    pub fn slot_to_modal(&self, values: &[Complex64], side: Side) -> Vec<Complex64> {
        let mut out = values.to_vec();
        let dir = match side {
            Side::Unprimed => Direction::Forward,
            Side::Primed => Direction::Inverse,
        };
        for c in 0..self.inner.dim {
            self.inner.dft.apply_axis(&mut out, self.inner.dim, c, dir);
        }
        let s = math::sqrt(self.cell_volume());
        out.iter_mut().for_each(|z| *z *= s);
        out
    }

    /// Inverse of [`TorusGrid::slot_to_modal`].
    pub fn slot_to_position(&self, coeffs: &[Complex64], side: Side) -> Vec<Complex64> {
        let mut out = coeffs.to_vec();
        let dir = match side {
            Side::Unprimed => Direction::Inverse,
            Side::Primed => Direction::Forward,
        };
        for c in 0..self.inner.dim {
            self.inner.dft.apply_axis(&mut out, self.inner.dim, c, dir);
        }
        let s = 1.0 / math::sqrt(self.cell_volume());
        out.iter_mut().for_each(|z| *z *= s);
        out
    }

    /// Unitary DFT over whole slots of a rank-`slots` slot tensor.
    pub(crate) fn transform_slot(&self, data: &mut [Complex64], slots: usize, slot: usize, dir: Direction) {
        let d = self.inner.dim;
        for c in 0..d {
            self.inner.dft.apply_axis(data, slots * d, slot * d + c, dir);
        }
    }
}

/// Sobolev multiplier `(1 + |p|^2)^{alpha/2}` for every slot mode.
pub fn sobolev_weights(grid: &TorusGrid, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(crate::error::invalid("alpha", "must be finite and >= 0"));
    }
    Ok(grid
        .slot_wavenumber_sq()
        .iter()
        .map(|&p2| math::powf(1.0 + p2, 0.5 * alpha))
        .collect())
}

/// Free-propagator phases for one slot: `e^{-it|p|^2}` unprimed, `e^{+it|p|^2}` primed.
pub fn phase_weights(grid: &TorusGrid, t: f64, side: Side) -> Result<Vec<Complex64>> {
    if !t.is_finite() {
        return Err(crate::error::invalid("t", "must be finite"));
    }
    let sign = match side {
        Side::Unprimed => -1.0,
        Side::Primed => 1.0,
    };
    Ok(grid
        .slot_wavenumber_sq()
        .iter()
        .map(|&p2| math::cis(sign * t * p2))
        .collect())
}

/// Dense unitary DFT of length `M`, applied one axis at a time.
#[derive(Debug, Clone)]
pub struct Dft {
    m: usize,
    forward: Vec<Complex64>,
}

impl Dft {
    pub fn new(m: usize) -> Self {
        let scale = 1.0 / math::sqrt(m as f64);
        let mut forward = Vec::with_capacity(m * m);
        for q in 0..m {
            for n in 0..m {
                let r = (q * n) % m;
                forward.push(math::cis(-2.0 * PI * r as f64 / m as f64) * scale);
            }
        }
        Self { m, forward }
    }

    pub fn len(&self) -> usize {
        self.m
    }

    /// Applies the transform along `axis` of a rank-`rank` tensor with all axes of length `M`.
    pub fn apply_axis(&self, data: &mut [Complex64], rank: usize, axis: usize, dir: Direction) {
        let m = self.m;
        let inner = m.pow((rank - 1 - axis) as u32);
        let block = m * inner;
        debug_assert_eq!(data.len() % block, 0);
        let mut tmp = vec![Complex64::new(0.0, 0.0); block];
        for chunk in data.chunks_exact_mut(block) {
            tmp.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for q in 0..m {
                let out = &mut tmp[q * inner..(q + 1) * inner];
                for n in 0..m {
                    let w = match dir {
                        Direction::Forward => self.forward[q * m + n],
                        Direction::Inverse => self.forward[q * m + n].conj(),
                    };
                    let src = &chunk[n * inner..(n + 1) * inner];
                    for (o, s) in out.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
            chunk.copy_from_slice(&tmp);
        }
    }
}

/// Unitary DFT of a rank-`rank` tensor over the listed axes (each of length `M`).
pub fn transform(
    data: &mut [Complex64],
    points: usize,
    rank: usize,
    axes: &[usize],
    dir: Direction,
) -> Result<()> {
    let expected = points
        .checked_pow(rank as u32)
        .ok_or_else(|| Error::InvalidGrid("tensor too large".into()))?;
    if data.len() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            actual: data.len(),
        });
    }
    if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
        return Err(Error::InvalidParameter {
            name: "axes",
            reason: alloc::format!("axis {bad} out of range for rank {rank}"),
        });
    }
    let dft = Dft::new(points);
    for &a in axes {
        dft.apply_axis(data, rank, a, dir);
    }
    Ok(())
}
