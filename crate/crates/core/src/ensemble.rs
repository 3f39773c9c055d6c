//! Seeded random admissible hierarchies.
//!
//! A draw is a finite de Finetti mixture `sum_r w_r (phi_r conj(phi_r))^{tensor k}`
//! with `w_r > 0`, `sum w_r = 1` and `||phi_r||_{L^2} = 1`, so every level is
//! hermitean, symmetric, positive, of trace one, and consecutive levels are
//! related by the partial trace. The one-particle fields carry independent complex
//! Gaussian Fourier modes with standard deviation `(1 + |p|^2)^{-s}`.
//!
//! Each mode reads its normals from a fixed word offset of the ChaCha stream of
//! its draw, keyed by the mode itself, so refining the grid keeps the values of
//! the modes both grids share.

use alloc::vec::Vec;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::factored::FactoredMarginal;
use crate::grid::{aliased_index, Side, TorusGrid};
use crate::math;
use crate::nls::WaveFunction;
use crate::state::{HierarchyState, Level};

/// Words reserved per mode.
const MODE_WORDS: u128 = 64;
/// Start of the region used for mixture weights.
const WEIGHT_BASE: u128 = 1 << 100;
/// Rank slots per draw in the stream numbering.
const RANK_SLOTS: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnsembleParams {
    pub size: usize,
    /// Number of mixture components per draw.
    pub rank: usize,
    /// Spectral decay exponent `s`.
    pub decay: f64,
    pub seed: u64,
}

impl EnsembleParams {
    /// Defaults tied to a Sobolev index: `s = alpha + 1`, rank 2.
    pub fn for_alpha(size: usize, alpha: f64, seed: u64) -> Self {
        Self {
            size,
            rank: 2,
            decay: alpha + 1.0,
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        if self.size == 0 {
            return Err(crate::error::invalid("ensemble_size", "empty ensemble"));
        }
        if self.rank == 0 || self.rank as u64 >= RANK_SLOTS {
            return Err(crate::error::invalid("ensemble_rank", "must be in 1..65536"));
        }
        if !(self.decay >= 0.0) || !self.decay.is_finite() {
            return Err(crate::error::invalid("spectral_decay", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// `0, 1, -1, 2, -2, ..` mapped to `0, 1, 2, 3, 4, ..`.
fn interleave(q: i64) -> u128 {
    if q > 0 {
        (2 * q - 1) as u128
    } else {
        (-2 * q) as u128
    }
}

/// Grid-independent ordinal of a multi-index (iterated Cantor pairing).
fn mode_ordinal(mode: &[i64]) -> u128 {
    let mut acc = interleave(mode[0]);
    for &q in &mode[1..] {
        let b = interleave(q);
        acc = (acc + b) * (acc + b + 1) / 2 + b;
    }
    acc
}

fn stream(seed: u64, draw: usize, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw as u64 * RANK_SLOTS + r as u64);
    rng
}

/// Component `r` of draw `draw`, normalized in `L^2`.
pub fn draw_wave(grid: &TorusGrid, seed: u64, draw: usize, r: usize, decay: f64) -> Result<WaveFunction> {
    let mut rng = stream(seed, draw, r);
    let m = grid.points();
    let coeffs: Vec<Complex64> = (0..grid.slot_len())
        .map(|s| {
            let mode: Vec<i64> = grid.slot_digits(s).iter().map(|&i| aliased_index(i, m)).collect();
            rng.set_word_pos(mode_ordinal(&mode) * MODE_WORDS);
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let sd = math::powf(1.0 + grid.slot_wavenumber_sq()[s], -decay);
            Complex64::new(re, im) * (sd * core::f64::consts::FRAC_1_SQRT_2)
        })
        .collect();
    WaveFunction::new(grid, grid.slot_to_position(&coeffs, Side::Unprimed))?.normalized()
}

/// Mixture weights of draw `draw`, positive and summing to one.
pub fn draw_weights(seed: u64, draw: usize, rank: usize) -> Vec<f64> {
    let mut rng = stream(seed, draw, 0);
    rng.set_word_pos(WEIGHT_BASE);
    // Exponential spacings give a flat Dirichlet draw.
    let raw: Vec<f64> = (0..rank).map(|_| -math::ln(1.0 - rng.random::<f64>())).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Draw number `draw` as a hierarchy truncated at `n`, all levels factored.
pub fn draw_state(grid: &TorusGrid, n: usize, params: &EnsembleParams, draw: usize) -> Result<HierarchyState> {
    params.check()?;
    let weights = draw_weights(params.seed, draw, params.rank);
    let phis = (0..params.rank)
        .map(|r| Ok(draw_wave(grid, params.seed, draw, r, params.decay)?.into_values()))
        .collect::<Result<Vec<_>>>()?;
    let levels = (1..=n)
        .map(|k| Ok(Level::Factored(FactoredMarginal::mixture(grid, &weights, &phis, k)?)))
        .collect::<Result<Vec<_>>>()?;
    HierarchyState::new(grid, levels)
}

pub fn draw_ensemble(grid: &TorusGrid, n: usize, params: &EnsembleParams) -> Result<Vec<HierarchyState>> {
    params.check()?;
    if n == 0 {
        return Err(Error::LevelOutOfRange {
            level: 0,
            reason: "truncation N must be at least 1".into(),
        });
    }
    (0..params.size).map(|i| draw_state(grid, n, params, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::marginal::{Basis, Tolerances};
    use alloc::vec;
    use core::f64::consts::PI;

    #[test]
    fn ordinals_are_distinct() {
        let mut seen = alloc::collections::BTreeSet::new();
        for a in -6..6 {
            for b in -6..6 {
                assert!(seen.insert(mode_ordinal(&[a, b])));
            }
        }
        assert_eq!(mode_ordinal(&[0]), 0);
        assert_eq!(mode_ordinal(&[-1]), 2);
    }

    #[test]
    fn draws_are_admissible_and_reproducible() {
        let g = make_grid(1, 8, 2.0 * PI).unwrap();
        let params = EnsembleParams::for_alpha(3, 1.0, 7);
        let a = draw_ensemble(&g, 3, &params).unwrap();
        let b = draw_ensemble(&g, 3, &params).unwrap();
        for (s, t) in a.iter().zip(&b) {
            assert_eq!(s.sub(t).unwrap().level_norms(0.0).unwrap(), vec![0.0; 3]);
            for k in 1..=3 {
                let l = s.level(k).unwrap();
                assert!((l.trace().re - 1.0).abs() < 1e-12);
                let rep = l.validate(&Tolerances::default()).unwrap();
                assert!(rep.structural_ok, "{rep:?}");
            }
            let pt = s.level(3).unwrap().partial_trace().unwrap();
            let d = pt.sub(s.level(2).unwrap()).unwrap().h_alpha_norm(0.0).unwrap();
            assert!(d < 1e-12);
            let m1 = s.level(1).unwrap().to_dense(Basis::Position).unwrap();
            assert!(m1.min_eigenvalue().unwrap() > -1e-12);
        }
        assert!(draw_ensemble(&g, 3, &EnsembleParams { size: 0, ..params }).is_err());
    }

    #[test]
    fn refinement_keeps_shared_modes() {
        let g8 = make_grid(1, 8, 2.0 * PI).unwrap();
        let g12 = make_grid(1, 12, 2.0 * PI).unwrap();
        // Unnormalized modal coefficients agree on the modes both grids hold.
        let raw = |g: &TorusGrid| {
            let w = draw_wave(g, 3, 5, 1, 2.0).unwrap();
            let c = g.slot_to_modal(w.values(), Side::Unprimed);
            let q0 = c[0];
            c.iter().map(|z| z / q0).collect::<Vec<_>>()
        };
        let (a, b) = (raw(&g8), raw(&g12));
        for q in -3i64..=3 {
            let i8 = q.rem_euclid(8) as usize;
            let i12 = q.rem_euclid(12) as usize;
            assert!((a[i8] - b[i12]).norm() < 1e-12, "mode {q}");
        }
    }
}
