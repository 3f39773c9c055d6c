//! Time quadrature on a uniform grid, streamed one sample at a time.
//!
//! `RunningIntegral` returns `int_0^{t_m} f` after each pushed sample `f_m`.
//! Simpson uses the plain composite rule for even `m`; for odd `m >= 3` it puts
//! the 3/8 rule on `[t_0, t_3]` and composite Simpson on the rest. The first
//! interval (`m = 1`) falls back to the trapezoid rule.

use alloc::vec::Vec;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Quadrature {
    Trapezoid,
    Simpson,
}

impl Quadrature {
    /// Nominal convergence order.
    pub fn order(&self) -> u32 {
        match self {
            Quadrature::Trapezoid => 2,
            Quadrature::Simpson => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Quadrature::Trapezoid => "trapezoid",
            Quadrature::Simpson => "simpson",
        }
    }
}

/// A vector space the running quadrature can accumulate in.
pub trait LinearSpace: Clone {
    /// `self += a * x`.
    fn axpy(&mut self, a: f64, x: &Self);
    /// `self *= a`.
    fn scale(&mut self, a: f64);
}

impl LinearSpace for f64 {
    fn axpy(&mut self, a: f64, x: &Self) {
        *self += a * x;
    }
    fn scale(&mut self, a: f64) {
        *self *= a;
    }
}

impl LinearSpace for Complex64 {
    fn axpy(&mut self, a: f64, x: &Self) {
        *self += x * a;
    }
    fn scale(&mut self, a: f64) {
        *self *= a;
    }
}

impl LinearSpace for Vec<Complex64> {
    fn axpy(&mut self, a: f64, x: &Self) {
        for (y, v) in self.iter_mut().zip(x) {
            *y += v * a;
        }
    }
    fn scale(&mut self, a: f64) {
        self.iter_mut().for_each(|y| *y *= a);
    }
}

#[derive(Debug, Clone)]
enum State<V> {
    Empty,
    Trapezoid {
        /// `dt (f_0/2 + f_1 + .. + f_{m-1})`, absent while `m = 0`.
        acc: Option<V>,
        last: V,
    },
    Simpson {
        f0: V,
        f1: Option<V>,
        f2: Option<V>,
        /// From `m = 4` on: the constant part of the odd-`m` formula.
        c: Option<V>,
        /// Sums of `f_i` over odd `i` and over even `i >= 2`, for `i < m`.
        odd: Option<V>,
        even: Option<V>,
        /// `f_m` for `m >= 1`.
        last: Option<V>,
    },
}

#[derive(Debug, Clone)]
pub struct RunningIntegral<V> {
    rule: Quadrature,
    dt: f64,
    m: usize,
    state: State<V>,
}

impl<V: LinearSpace> RunningIntegral<V> {
    pub fn new(rule: Quadrature, dt: f64) -> Self {
        Self {
            rule,
            dt,
            m: 0,
            state: State::Empty,
        }
    }

    pub fn rule(&self) -> Quadrature {
        self.rule
    }

    /// Index `m` of the most recent sample, or `None` before the first push.
    pub fn last_index(&self) -> Option<usize> {
        match self.state {
            State::Empty => None,
            _ => Some(self.m),
        }
    }

    /// Pushes `f_m`. May hand back a buffer that is no longer needed, for reuse.
    pub fn push(&mut self, f: V) -> Option<V> {
        let dt = self.dt;
        let m = self.m;
        let state = core::mem::replace(&mut self.state, State::Empty);
        let (next, spare) = match state {
            State::Empty => {
                let s = match self.rule {
                    Quadrature::Trapezoid => State::Trapezoid { acc: None, last: f },
                    Quadrature::Simpson => State::Simpson {
                        f0: f,
                        f1: None,
                        f2: None,
                        c: None,
                        odd: None,
                        even: None,
                        last: None,
                    },
                };
                self.state = s;
                self.m = 0;
                return None;
            }
            State::Trapezoid { acc: None, mut last } => {
                last.scale(0.5 * dt);
                (State::Trapezoid { acc: Some(last), last: f }, None)
            }
            State::Trapezoid { acc: Some(mut acc), last } => {
                acc.axpy(dt, &last);
                (State::Trapezoid { acc: Some(acc), last: f }, Some(last))
            }
            State::Simpson { f0, f1, f2, c, odd, even, last } => match m {
                0 => (State::Simpson { f0, f1, f2, c, odd, even, last: Some(f) }, None),
                1 => (State::Simpson { f0, f1: last, f2, c, odd, even, last: Some(f) }, None),
                2 => (State::Simpson { f0, f1, f2: last, c, odd, even, last: Some(f) }, None),
                3 => {
                    let f1 = f1.expect("f1 stored");
                    let f2 = f2.expect("f2 stored");
                    let mut o = last.expect("f3 stored");
                    o.axpy(1.0, &f1);
                    let a0 = 3.0 * dt / 8.0;
                    let a1 = 9.0 * dt / 8.0 - 2.0 * dt / 3.0;
                    let a2 = 9.0 * dt / 8.0 - 4.0 * dt / 3.0;
                    let a3 = 3.0 * dt / 8.0 - dt / 3.0;
                    // C = a0 f0 + a1 f1 + a2 f2 + a3 f3, with f3 = o - f1.
                    let mut cc = f1;
                    cc.scale(a1 - a3);
                    cc.axpy(a0, &f0);
                    cc.axpy(a2, &f2);
                    cc.axpy(a3, &o);
                    (
                        State::Simpson {
                            f0,
                            f1: None,
                            f2: None,
                            c: Some(cc),
                            odd: Some(o),
                            even: Some(f2),
                            last: Some(f),
                        },
                        None,
                    )
                }
                _ => {
                    let last = last.expect("f_m stored");
                    let (mut o, mut e) = (odd.expect("odd sum"), even.expect("even sum"));
                    if m % 2 == 0 {
                        e.axpy(1.0, &last);
                    } else {
                        o.axpy(1.0, &last);
                    }
                    (
                        State::Simpson { f0, f1, f2, c, odd: Some(o), even: Some(e), last: Some(f) },
                        Some(last),
                    )
                }
            },
        };
        self.state = next;
        self.m = m + 1;
        spare
    }

    /// Calls `g(w, v)` for every term of `int_0^{t_m} f = sum w v`.
    pub fn for_each_term(&self, mut g: impl FnMut(f64, &V)) {
        for (w, v) in self.terms() {
            g(w, v);
        }
    }

    /// The terms `(w, v)` of `int_0^{t_m} f = sum w v`.
    pub fn terms(&self) -> Vec<(f64, &V)> {
        let mut out = Vec::with_capacity(4);
        self.collect_terms(&mut |w, v| out.push((w, v)));
        out
    }

    fn collect_terms<'a>(&'a self, g: &mut impl FnMut(f64, &'a V)) {
        let dt = self.dt;
        match &self.state {
            State::Empty => {}
            State::Trapezoid { acc, last } => {
                if let Some(a) = acc {
                    g(1.0, a);
                    g(0.5 * dt, last);
                }
            }
            State::Simpson { f0, f1, f2, c, odd, even, last } => {
                let Some(last) = last else { return };
                match self.m {
                    1 => {
                        g(0.5 * dt, f0);
                        g(0.5 * dt, last);
                    }
                    2 => {
                        g(dt / 3.0, f0);
                        g(4.0 * dt / 3.0, f1.as_ref().expect("f1"));
                        g(dt / 3.0, last);
                    }
                    3 => {
                        let a = 3.0 * dt / 8.0;
                        g(a, f0);
                        g(3.0 * a, f1.as_ref().expect("f1"));
                        g(3.0 * a, f2.as_ref().expect("f2"));
                        g(a, last);
                    }
                    m if m % 2 == 0 => {
                        g(dt / 3.0, f0);
                        g(4.0 * dt / 3.0, odd.as_ref().expect("odd"));
                        g(2.0 * dt / 3.0, even.as_ref().expect("even"));
                        g(dt / 3.0, last);
                    }
                    _ => {
                        g(1.0, c.as_ref().expect("c"));
                        g(4.0 * dt / 3.0, even.as_ref().expect("even"));
                        g(2.0 * dt / 3.0, odd.as_ref().expect("odd"));
                        g(dt / 3.0, last);
                    }
                }
            }
        }
    }

    /// Current value written into `out` (which fixes the shape of zero).
    pub fn value_into(&self, out: &mut V) {
        out.scale(0.0);
        self.for_each_term(|w, v| out.axpy(w, v));
    }
}

/// `int_0^{t_S} f` from uniformly spaced samples, using the streamed rule.
pub fn integrate<V: LinearSpace>(samples: &[V], dt: f64, rule: Quadrature) -> Result<V> {
    let first = samples
        .first()
        .ok_or_else(|| Error::TimeGrid("no samples to integrate".into()))?;
    let mut q = RunningIntegral::new(rule, dt);
    for s in samples {
        q.push(s.clone());
    }
    let mut out = first.clone();
    q.value_into(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn samples(n: usize, dt: f64, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..=n).map(|i| f(i as f64 * dt)).collect()
    }

    #[test]
    fn exact_on_low_degree_polynomials() {
        for n in 1..12 {
            let dt = 0.1;
            let t = n as f64 * dt;
            let lin = integrate(&samples(n, dt, |x| 3.0 * x + 1.0), dt, Quadrature::Trapezoid).unwrap();
            assert_relative_eq!(lin, 1.5 * t * t + t, max_relative = 1e-13);
            if n >= 2 {
                let cubic = integrate(&samples(n, dt, |x| x * x * x - x), dt, Quadrature::Simpson).unwrap();
                assert_relative_eq!(cubic, t * t * t * t / 4.0 - t * t / 2.0, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn running_values_match_whole_interval() {
        let dt = 0.05;
        let f = |x: f64| math::exp(x) * math::cos(3.0 * x);
        for rule in [Quadrature::Trapezoid, Quadrature::Simpson] {
            let mut q = RunningIntegral::new(rule, dt);
            for m in 0..15 {
                q.push(f(m as f64 * dt));
                let mut v = 0.0;
                q.value_into(&mut v);
                let whole = integrate(&samples(m, dt, f), dt, rule).unwrap();
                assert_relative_eq!(v, whole, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn convergence_orders() {
        let f = |x: f64| math::exp(-x) * math::cos(5.0 * x);
        let exact = {
            // int_0^1 e^{-x} cos 5x dx
            let e = math::exp(-1.0);
            let (s, c) = math::sin_cos(5.0);
            (1.0 + e * (5.0 * s - c)) / 26.0
        };
        for (rule, order) in [(Quadrature::Trapezoid, 2.0), (Quadrature::Simpson, 4.0)] {
            for (n1, n2) in [(32usize, 64usize), (33, 65)] {
                let err = |n: usize| {
                    let dt = 1.0 / n as f64;
                    (integrate(&samples(n, dt, f), dt, rule).unwrap() - exact).abs()
                };
                let slope = math::ln(err(n1) / err(n2)) / math::ln(n2 as f64 / n1 as f64);
                assert!((slope - order).abs() < 0.3, "{rule:?} n={n1} slope {slope}");
            }
        }
    }

    #[test]
    fn vector_space_and_recycling() {
        let dt = 0.1;
        let mut q = RunningIntegral::new(Quadrature::Trapezoid, dt);
        let mut spares = 0;
        for m in 0..6 {
            if q.push(vec![Complex64::new(m as f64, 1.0); 3]).is_some() {
                spares += 1;
            }
        }
        assert_eq!(spares, 4);
        let mut out = vec![Complex64::new(0.0, 0.0); 3];
        q.value_into(&mut out);
        assert_relative_eq!(out[0].re, 1.25, max_relative = 1e-12);
        assert_relative_eq!(out[0].im, 0.5, max_relative = 1e-12);
    }
}
