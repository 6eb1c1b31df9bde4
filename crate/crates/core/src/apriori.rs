//! Worst-case growth envelopes for gradient norms
//!
//! Integrates the comparison system
//!
//! ```text
//! dalpha/ds = -alpha^2 - C_qm alpha beta,
//! dbeta/ds  = -alpha beta - C1_qm alpha beta,
//! ```
//!
//! backward in `s` from terminal data `alpha(t) = K01` (the sup norm of the
//! initial velocity gradient) and `beta(t) = beta0` (a pair of Lebesgue
//! norms of the same gradient). Both right-hand sides are nonpositive, so
//! the envelopes grow as `s` decreases and may blow up in finite span; the
//! span from the terminal time back to the blow-up point is the guaranteed
//! existence horizon `T1`. Solutions staying below `alpha(s)` on the
//! corresponding span inherit the bound, so a Monte Carlo run whose measured
//! gradient norms crest above the envelope is flagged as suspect.
//!
//! The constants `C_qm`, `C1_qm` come from potential-theoretic estimates and
//! are not computable here; they are configuration inputs (default 1) and
//! every horizon is conditional on the supplied values.

use crate::math::lerp_lookup;

/// Blow-up is declared once an envelope exceeds this magnitude.
const BLOWUP_MAGNITUDE: f64 = 1e12;
/// Step-doubling acceptance: relative gap between one full step and two
/// half steps. Loose on purpose — near a pole the gap jumps by orders of
/// magnitude within a step or two, and a tight tolerance would call blow-up
/// several steps early.
const DOUBLING_TOL: f64 = 1e-2;
/// Horizon search gives up and reports an unbounded horizon past this time.
const HORIZON_CAP: f64 = 1e6;
/// Bisection width at which the horizon search stops.
const HORIZON_TOL: f64 = 1e-3;

/// Terminal data and constants of the comparison system. All fields must be
/// finite and nonnegative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AprioriParams {
    /// Terminal value of the sup-norm envelope `alpha`.
    pub k01: f64,
    /// Terminal value of the integral-norm envelope `beta`.
    pub beta0: f64,
    /// Coupling of `beta` into the `alpha` equation.
    pub c_qm: f64,
    /// Extra self-coupling in the `beta` equation.
    pub c1_qm: f64,
}

impl Default for AprioriParams {
    /// Unit terminal data and unit constants.
    fn default() -> Self {
        AprioriParams { k01: 1.0, beta0: 1.0, c_qm: 1.0, c1_qm: 1.0 }
    }
}

impl AprioriParams {
    fn check(&self) {
        for (name, v) in [
            ("k01", self.k01),
            ("beta0", self.beta0),
            ("c_qm", self.c_qm),
            ("c1_qm", self.c1_qm),
        ] {
            assert!(v.is_finite() && v >= 0.0, "{name} must be finite and >= 0, got {v}");
        }
    }
}

/// Envelope trajectories on an `s` grid ascending toward the terminal time.
/// When a blow-up was detected the grid is truncated to the resolved span
/// and `t1` holds the span length; otherwise `t1` is infinite, meaning the
/// envelopes stayed bounded over the whole requested interval.
#[derive(Clone, Debug)]
pub struct BoundSolution {
    pub s_grid: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Span from the terminal time back to the blow-up point, or infinity
    /// when no blow-up occurred in the run.
    pub t1: f64,
}

impl BoundSolution {
    pub fn blew_up(&self) -> bool {
        self.t1.is_finite()
    }

    /// Linear interpolation of the sup-norm envelope at `s`; `None` outside
    /// the resolved grid.
    pub fn alpha_at(&self, s: f64) -> Option<f64> {
        lerp_lookup(&self.s_grid, &self.alpha, s)
    }
}

#[inline]
fn rhs(p: &AprioriParams, a: f64, b: f64) -> (f64, f64) {
    let ab = a * b;
    (-a * a - p.c_qm * ab, -(1.0 + p.c1_qm) * ab)
}

/// One classical fourth-order step of signed size `h`.
#[inline]
fn rk4(p: &AprioriParams, a: f64, b: f64, h: f64) -> (f64, f64) {
    let (k1a, k1b) = rhs(p, a, b);
    let (k2a, k2b) = rhs(p, a + 0.5 * h * k1a, b + 0.5 * h * k1b);
    let (k3a, k3b) = rhs(p, a + 0.5 * h * k2a, b + 0.5 * h * k2b);
    let (k4a, k4b) = rhs(p, a + h * k3a, b + h * k3b);
    (
        a + h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a),
        b + h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b),
    )
}

/// Integrate the comparison system backward from `s = t` to `s = 0` with
/// steps of size at most `ds` (the actual step divides `t` evenly). Each
/// step is checked by step-doubling; a failed check, a non-finite value, or
/// a magnitude above 1e12 marks blow-up, which truncates the output rather
/// than erroring. The system is autonomous, so the reported span `t1` does
/// not depend on `t` (as long as `t` exceeds it).
///
/// # Panics
/// If `ds <= 0`, `t` is negative or non-finite, or a parameter is invalid.
pub fn solve_bound_odes(params: &AprioriParams, t: f64, ds: f64) -> BoundSolution {
    params.check();
    assert!(ds > 0.0 && ds.is_finite(), "step size must be positive, got {ds}");
    assert!(t >= 0.0 && t.is_finite(), "terminal time must be finite and >= 0, got {t}");

    if t == 0.0 {
        return BoundSolution {
            s_grid: vec![0.0],
            alpha: vec![params.k01],
            beta: vec![params.beta0],
            t1: f64::INFINITY,
        };
    }

    let n = ((t / ds - 1e-9).ceil().max(1.0)) as usize;
    let h = t / n as f64;

    // Walk downward, recording (s, alpha, beta) from the terminal anchor.
    let mut s_rev = Vec::with_capacity(n + 1);
    let mut a_rev = Vec::with_capacity(n + 1);
    let mut b_rev = Vec::with_capacity(n + 1);
    let mut a = params.k01;
    let mut b = params.beta0;
    s_rev.push(t);
    a_rev.push(a);
    b_rev.push(b);
    let mut t1 = f64::INFINITY;
    for k in 1..=n {
        let (fa, fb) = rk4(params, a, b, -h);
        let (ha, hb) = rk4(params, a, b, -0.5 * h);
        let (a2, b2) = rk4(params, ha, hb, -0.5 * h);
        let finite = fa.is_finite() && fb.is_finite() && a2.is_finite() && b2.is_finite();
        let gap = ((fa - a2).abs() / a2.abs().max(1.0)).max((fb - b2).abs() / b2.abs().max(1.0));
        if !finite || gap > DOUBLING_TOL || a2 > BLOWUP_MAGNITUDE || b2 > BLOWUP_MAGNITUDE {
            // Last trustworthy point is the previous grid node.
            t1 = t - s_rev[s_rev.len() - 1];
            break;
        }
        a = a2;
        b = b2;
        let s = if k == n { 0.0 } else { t - k as f64 * h };
        s_rev.push(s);
        a_rev.push(a);
        b_rev.push(b);
    }

    s_rev.reverse();
    a_rev.reverse();
    b_rev.reverse();
    for i in 0..a_rev.len() {
        let (av, bv) = (a_rev[i], b_rev[i]);
        assert!(av >= -1e-12 && bv >= -1e-12, "envelopes must stay nonnegative");
        if i + 1 < a_rev.len() {
            let slack = 1e-12 * a_rev[i].abs().max(1.0);
            assert!(a_rev[i] + slack >= a_rev[i + 1], "alpha must not increase in s");
            let slack = 1e-12 * b_rev[i].abs().max(1.0);
            assert!(b_rev[i] + slack >= b_rev[i + 1], "beta must not increase in s");
        }
    }

    BoundSolution { s_grid: s_rev, alpha: a_rev, beta: b_rev, t1 }
}

/// Largest `t` for which the comparison system stays bounded on the whole
/// backward span, found by bracketing and bisection to width 1e-3. Returns
/// infinity when no blow-up is found below a large cap (in particular for
/// zero terminal gradient data, where the system is constant).
///
/// # Panics
/// Same preconditions as [`solve_bound_odes`].
pub fn existence_horizon(params: &AprioriParams, ds: f64) -> f64 {
    params.check();
    assert!(ds > 0.0 && ds.is_finite(), "step size must be positive, got {ds}");
    if params.k01 == 0.0 {
        // alpha stays 0, so both right-hand sides vanish identically.
        return f64::INFINITY;
    }
    let bounded = |t: f64| !solve_bound_odes(params, t, ds).blew_up();

    // The pure quadratic term alone forces blow-up within 1/k01, so a
    // bracket slightly beyond that always exists; the doubling loop guards
    // the detection slack.
    let mut lo = 0.0;
    let mut hi = (1.0 / params.k01 + 4.0 * ds).min(HORIZON_CAP);
    while bounded(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > HORIZON_CAP {
            return f64::INFINITY;
        }
    }
    while hi - lo > HORIZON_TOL {
        let mid = 0.5 * (lo + hi);
        if bounded(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn riccati(k: f64) -> AprioriParams {
        AprioriParams { k01: k, beta0: 0.0, c_qm: 0.0, c1_qm: 0.0 }
    }

    #[test]
    fn zero_terminal_data_stays_constant() {
        let p = AprioriParams { k01: 0.0, beta0: 3.0, c_qm: 1.0, c1_qm: 1.0 };
        let sol = solve_bound_odes(&p, 2.0, 1e-2);
        assert!(!sol.blew_up());
        assert!(sol.alpha.iter().all(|&a| a == 0.0));
        assert!(sol.beta.iter().all(|&b| b == 3.0));
        assert_eq!(sol.s_grid.len(), 201);
        assert_eq!(sol.s_grid[0], 0.0);
        assert_eq!(*sol.s_grid.last().unwrap(), 2.0);
    }

    #[test]
    fn quadratic_growth_matches_the_closed_form() {
        // With the couplings off the system is the scalar quadratic ODE,
        // whose backward solution from alpha(t) = K is 1/(s - t + 1/K).
        let (k, t) = (2.0, 0.3);
        let sol = solve_bound_odes(&riccati(k), t, 1e-3);
        assert!(!sol.blew_up());
        let mut worst = 0.0f64;
        for (s, a) in sol.s_grid.iter().zip(&sol.alpha) {
            let exact = 1.0 / (s - t + 1.0 / k);
            worst = worst.max((a - exact).abs() / exact);
        }
        assert!(worst < 1e-8, "max relative error {worst}");
        assert!(sol.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn quadratic_blow_up_is_located_to_two_steps() {
        for (k, ds) in [(2.0, 1e-3), (2.0, 5e-4), (1.0, 1e-3), (4.0, 2e-3)] {
            let sol = solve_bound_odes(&riccati(k), 1.5, ds);
            assert!(sol.blew_up(), "k = {k} must blow up within 1.5");
            assert!(
                (sol.t1 - 1.0 / k).abs() <= 2.0 * ds,
                "k = {k}, ds = {ds}: t1 = {} vs {}",
                sol.t1,
                1.0 / k
            );
        }
    }

    #[test]
    fn blow_up_span_ignores_the_terminal_time() {
        // The system is autonomous: pushing the terminal time out must not
        // move the detected span.
        let p = AprioriParams::default();
        let a = solve_bound_odes(&p, 1.0, 1e-3).t1;
        let b = solve_bound_odes(&p, 3.0, 1e-3).t1;
        assert!(a.is_finite() && b.is_finite());
        assert!((a - b).abs() <= 2e-3, "{a} vs {b}");
    }

    #[test]
    fn step_halving_moves_the_span_by_at_most_four_steps() {
        let p = AprioriParams::default();
        let ds = 1e-3;
        let coarse = solve_bound_odes(&p, 2.0, ds).t1;
        let fine = solve_bound_odes(&p, 2.0, ds / 2.0).t1;
        assert!(coarse.is_finite() && fine.is_finite());
        assert!((coarse - fine).abs() <= 4.0 * ds, "{coarse} vs {fine}");
    }

    #[test]
    fn grid_is_anchored_at_the_terminal_data() {
        let p = AprioriParams { k01: 0.7, beta0: 0.4, c_qm: 1.3, c1_qm: 0.2 };
        let sol = solve_bound_odes(&p, 0.25, 1e-3);
        assert_eq!(*sol.s_grid.last().unwrap(), 0.25);
        assert_eq!(*sol.alpha.last().unwrap(), 0.7);
        assert_eq!(*sol.beta.last().unwrap(), 0.4);
        assert_eq!(sol.s_grid.len(), sol.alpha.len());
        assert_eq!(sol.s_grid.len(), sol.beta.len());
        assert!(sol.s_grid.windows(2).all(|w| w[0] < w[1]));
        // Interpolation stays within the envelope's range and hits nodes.
        let mid = sol.alpha_at(0.1).unwrap();
        assert!(mid >= 0.7 && mid <= sol.alpha[0]);
        assert_eq!(sol.alpha_at(0.25).unwrap(), 0.7);
        assert!(sol.alpha_at(0.26).is_none());
    }

    #[test]
    fn zero_time_returns_the_anchor_alone() {
        let sol = solve_bound_odes(&AprioriParams::default(), 0.0, 1e-3);
        assert_eq!(sol.s_grid, vec![0.0]);
        assert_eq!(sol.alpha, vec![1.0]);
        assert!(!sol.blew_up());
    }

    #[test]
    fn horizon_matches_the_quadratic_closed_form() {
        let h = existence_horizon(&riccati(2.0), 1e-3);
        assert!((h - 0.5).abs() <= 1e-2, "horizon {h}");
        assert!(existence_horizon(&riccati(0.0), 1e-3).is_infinite());
    }

    #[test]
    fn horizon_agrees_with_the_detected_span() {
        // Bisection and direct span detection are two routes to the same
        // number.
        let p = AprioriParams::default();
        let h = existence_horizon(&p, 1e-3);
        let t1 = solve_bound_odes(&p, 2.0, 1e-3).t1;
        assert!((h - t1).abs() <= 5e-3, "horizon {h} vs span {t1}");
        assert!(!solve_bound_odes(&p, 0.8 * h, 1e-3).blew_up());
        assert!(solve_bound_odes(&p, 1.2 * h, 1e-3).blew_up());
    }

    #[test]
    fn horizon_is_monotone_in_every_parameter() {
        let vals = [0.5, 1.0, 2.0];
        let ds = 1e-3;
        let mut horizons = vec![0.0; 81];
        let idx = |i: usize, j: usize, k: usize, l: usize| ((i * 3 + j) * 3 + k) * 3 + l;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let p = AprioriParams {
                            k01: vals[i],
                            beta0: vals[j],
                            c_qm: vals[k],
                            c1_qm: vals[l],
                        };
                        horizons[idx(i, j, k, l)] = existence_horizon(&p, ds);
                    }
                }
            }
        }
        let slack = 5.0 * ds;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let h = horizons[idx(i, j, k, l)];
                        for (axis, bumped) in [
                            (0, (i + 1, j, k, l)),
                            (1, (i, j + 1, k, l)),
                            (2, (i, j, k + 1, l)),
                            (3, (i, j, k, l + 1)),
                        ] {
                            let (bi, bj, bk, bl) = bumped;
                            if bi > 2 || bj > 2 || bk > 2 || bl > 2 {
                                continue;
                            }
                            let hb = horizons[idx(bi, bj, bk, bl)];
                            assert!(
                                hb <= h + slack,
                                "axis {axis} at ({i},{j},{k},{l}): {hb} > {h}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn doubling_terminal_data_never_extends_the_horizon() {
        for k in [0.5, 1.0, 3.0] {
            let base = existence_horizon(&riccati(k), 1e-3);
            let doubled = existence_horizon(&riccati(2.0 * k), 1e-3);
            assert!(doubled <= base + 5e-3, "k = {k}: {doubled} > {base}");
        }
    }
}
