//! Newton potential and walk-based pressure representations.
//!
//! Convention fixed throughout: -lap p = gamma with p = N gamma, where N is
//! the Newton potential. Since the generator of standard Brownian motion is
//! (1/2) lap, the probabilistic form is
//!
//!   p(x)      = 1/2 int_0^inf E gamma(x + B(tau)) dtau,
//!   grad p(x) = 1/2 int_0^inf (1/tau) E[gamma(x + B(tau)) B(tau)] dtau,
//!
//! truncated at `t_max` and discretized by a left-endpoint Riemann sum on the
//! walk's own step grid. The (1/tau) cell at tau = 0 is replaced by its
//! analytic limit grad gamma(x) * dt, which removes the variance blow-up at
//! O(dt) bias. Deterministic counterparts (spectral inversion on the periodic
//! cube, product Gauss-Legendre quadrature on whole space) serve as oracles.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{sample_scalar, spectral, Domain, ScalarField};
use crate::math::Vec3;
use crate::rng::path_rng;

/// Stream-id tag for the auxiliary Brownian walks of this module.
const TAG_WALK: u64 = 0x706f_6973;

#[derive(Clone, Debug)]
pub struct PoissonConfig {
    /// Total trajectory budget. With antithetic variates on, paths are drawn
    /// as mirrored pairs and `n_paths/2` pairs are simulated.
    pub n_paths: usize,
    /// Brownian time step for the walk and the time quadrature.
    pub dt_bm: f64,
    /// Truncation horizon for the time integral.
    pub t_max: f64,
    pub seed: u64,
    pub antithetic: bool,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        PoissonConfig { n_paths: 8192, dt_bm: 1e-3, t_max: 20.0, seed: 0, antithetic: true }
    }
}

impl PoissonConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 1 {
            return Err(Error::InvalidConfig("n_paths must be >= 1".into()));
        }
        if !(self.dt_bm > 0.0) || !(self.t_max > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "dt_bm and t_max must be positive, got {} and {}",
                self.dt_bm, self.t_max
            )));
        }
        Ok(())
    }

    fn pairs(&self) -> usize {
        if self.antithetic {
            self.n_paths.div_ceil(2)
        } else {
            self.n_paths
        }
    }

    fn steps(&self) -> usize {
        (self.t_max / self.dt_bm).ceil() as usize
    }
}

/// Monte Carlo scalar estimate with truncation diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct McScalar {
    pub value: f64,
    pub std_err: f64,
    /// Estimated magnitude of the dropped time-integral tail (plus, on whole
    /// space, a bound on what killed paths could still have contributed).
    pub tail_est: f64,
    /// Set when the tail estimate exceeds 10x the standard error, i.e. the
    /// truncation error is not hidden below the Monte Carlo noise.
    pub tail_warning: bool,
    /// Fraction of path-point trajectories killed at the far boundary
    /// (whole space only; 0 on the periodic cube).
    pub killed_frac: f64,
}

/// Monte Carlo vector estimate, componentwise standard errors.
#[derive(Clone, Copy, Debug)]
pub struct McVector {
    pub value: Vec3,
    pub std_err: Vec3,
    pub tail_est: f64,
    pub tail_warning: bool,
    pub killed_frac: f64,
}

// ---------------------------------------------------------------------------
// Deterministic Newton potential
// ---------------------------------------------------------------------------

/// Gauss-Legendre nodes and weights on [-1, 1].
///
/// Newton iteration on the Legendre recurrence from Chebyshev-like initial
/// guesses; exact for polynomials of degree 2n - 1.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre P_n(x) and derivative by upward recurrence.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Reject periodic sources whose grid mean is not (numerically) zero; the
/// inverse Laplacian is undefined on the constant mode.
fn require_zero_mean(g: &crate::fields::ScalarGrid) -> Result<()> {
    let mean = g.mean();
    let scale = g.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    if mean.abs() > 1e-8 * scale {
        return Err(Error::NonzeroMean { mean });
    }
    Ok(())
}

/// Newton potential N gamma(x) = (1/4 pi) int gamma(y)/|x - y| dy.
///
/// Periodic: spectral (-lap)^{-1} on the domain grid, evaluated off-node by
/// the trigonometric interpolant (exact for band-limited sources). Whole
/// space: product Gauss-Legendre quadrature in spherical coordinates centered
/// at x, where the volume element cancels the kernel singularity.
pub fn newton_potential_quadrature(gamma: &ScalarField, dom: &Domain, x: Vec3) -> Result<f64> {
    newton_quadrature_orders(gamma, dom, x, 96, 48, 96)
}

/// Same as [`newton_potential_quadrature`] with explicit quadrature orders
/// (radial, polar, azimuthal); periodic mode ignores the orders. Exposed so
/// self-convergence can be checked by comparing two resolutions.
pub fn newton_quadrature_orders(
    gamma: &ScalarField,
    dom: &Domain,
    x: Vec3,
    n_r: usize,
    n_th: usize,
    n_ph: usize,
) -> Result<f64> {
    dom.validate()?;
    match *dom {
        Domain::PeriodicCube { .. } => {
            let g = sample_scalar(gamma, 0.0, dom)?;
            require_zero_mean(&g)?;
            let (p, _, _) = spectral::poisson_with_gradient(&g, false);
            Ok(spectral::spectral_eval(&p, x))
        }
        Domain::WholeSpace { support_radius } => {
            // int gamma(y)/(4 pi |x-y|) dy = (1/4pi) int_0^rmax int_S2
            // gamma(x + r w) r dOmega dr; gamma vanishes outside the support
            // ball, so rmax = |x| + R reaches all of it.
            let r_max = x.norm() + support_radius;
            let (rn, rw) = gauss_legendre(n_r);
            let (cn, cw) = gauss_legendre(n_th);
            let mut total = 0.0;
            for (ri, rwi) in rn.iter().zip(&rw) {
                let r = 0.5 * r_max * (ri + 1.0);
                let wr = 0.5 * r_max * rwi;
                let mut shell = 0.0;
                for (ci, cwi) in cn.iter().zip(&cw) {
                    let sin_th = (1.0 - ci * ci).sqrt();
                    let mut ring = 0.0;
                    for m in 0..n_ph {
                        let phi = 2.0 * std::f64::consts::PI * m as f64 / n_ph as f64;
                        let w = Vec3::new(sin_th * phi.cos(), sin_th * phi.sin(), *ci);
                        ring += gamma.eval(0.0, x + w * r)?;
                    }
                    shell += cwi * ring * (2.0 * std::f64::consts::PI / n_ph as f64);
                }
                total += wr * shell * r;
            }
            Ok(total / (4.0 * std::f64::consts::PI))
        }
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo walks
// ---------------------------------------------------------------------------

/// Far-kill radius multiple for whole-space walks.
const KILL_FACTOR: f64 = 3.0;

/// Whole-space walk policy data: kill radius and the residual bound charged
/// per killed trajectory.
///
/// A standard Brownian path at distance d from the origin returns to the
/// support ball (radius R) with probability R/d, and the expected occupation
/// time of the ball after returning is at most 2 R^2 / 3 (Green's function of
/// (1/2) lap integrated over the ball from its boundary). Killing at 3R thus
/// forfeits at most (1/2) * (1/3) * sup|gamma| * (2 R^2/3) of the integral per
/// killed path, which is reported inside `tail_est`, not silently dropped.
struct KillPolicy {
    radius_sq: f64,
    residual_bound: f64,
}

fn kill_policy(gamma: &ScalarField, t: f64, dom: &Domain) -> Result<Option<KillPolicy>> {
    match *dom {
        Domain::PeriodicCube { .. } => Ok(None),
        Domain::WholeSpace { support_radius } => {
            // Coarse lattice sup of |gamma| over the support ball.
            let mut sup: f64 = 0.0;
            let m = 13;
            for ix in 0..m {
                for iy in 0..m {
                    for iz in 0..m {
                        let f = |k: usize| (2.0 * k as f64 / (m - 1) as f64 - 1.0) * support_radius;
                        sup = sup.max(gamma.eval(t, Vec3::new(f(ix), f(iy), f(iz)))?.abs());
                    }
                }
            }
            let kill_r = KILL_FACTOR * support_radius;
            let occupation = 2.0 * support_radius * support_radius / 3.0;
            Ok(Some(KillPolicy {
                radius_sq: kill_r * kill_r,
                residual_bound: 0.5 * (1.0 / KILL_FACTOR) * sup * occupation,
            }))
        }
    }
}

/// Mean-zero gate for periodic walks (shared by value and gradient paths).
fn periodic_precheck(gamma: &ScalarField, t: f64, dom: &Domain) -> Result<()> {
    if dom.is_periodic() {
        require_zero_mean(&sample_scalar(gamma, t, dom)?)?;
    }
    Ok(())
}

struct WalkStats {
    /// Per-sample values, `samples[q * n_samples + s]` for point q.
    samples: Vec<f64>,
    /// Per-point mean of the integrand over the trailing window.
    window_mean: Vec<f64>,
    killed_frac: f64,
    kill_residual: f64,
    n_samples: usize,
}

/// Mean and standard error over the sample axis for point q.
fn mean_se(samples: &[f64], q: usize, n: usize) -> (f64, f64) {
    let s = &samples[q * n..(q + 1) * n];
    let mean = s.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Characteristic remaining-time factor for extrapolating the trailing
/// integrand window into a tail estimate. Periodic zero-mean sources decay
/// at least like e^{-tau/2} (lowest wavenumber on a 2 pi cube), so the
/// remaining integral is ~2x the integrand level; whole-space sources decay
/// like tau^{-3/2}, leaving ~2 t_max.
fn tail_factor(dom: &Domain, t_max: f64) -> f64 {
    match dom {
        Domain::PeriodicCube { .. } => 2.0,
        Domain::WholeSpace { .. } => 2.0 * t_max,
    }
}

/// Core scalar walk shared by `pressure_mc` and its batch/linear variants.
///
/// Each sample is `1/2 [gamma(t,x) dt + sum_{j>=1} gamma(t, x + B_j) dt]`
/// (left-endpoint cells, first cell exact at its left end); antithetic pairs
/// average the +B and -B trajectories of one increment stream.
fn scalar_walk(
    gamma: &ScalarField,
    t: f64,
    points: &[Vec3],
    dom: &Domain,
    cfg: &PoissonConfig,
) -> Result<WalkStats> {
    cfg.validate()?;
    dom.validate()?;
    periodic_precheck(gamma, t, dom)?;
    let kill = kill_policy(gamma, t, dom)?;
    let frozen = gamma.freeze(t)?;
    let n_pairs = cfg.pairs();
    let steps = cfg.steps();
    let dt = cfg.dt_bm;
    let sqrt_dt = dt.sqrt();
    let nq = points.len();
    let window_start = (steps as f64 * 0.9) as usize;
    let window_cells = (steps - window_start).max(1);

    // Base values at the start points (first quadrature cell, deterministic).
    let mut base = vec![0.0; nq];
    for (q, &x) in points.iter().enumerate() {
        base[q] = gamma.eval(t, x)?;
    }

    struct PairOut {
        vals: Vec<f64>,
        window: Vec<f64>,
        killed: u32,
    }

    let run_pair = |p: usize| -> PairOut {
        let mut rng = path_rng(cfg.seed, &[TAG_WALK, p as u64]);
        let mut acc_p = vec![0.0f64; nq];
        let mut acc_m = vec![0.0f64; nq];
        let mut win = vec![0.0f64; nq];
        let mut b = Vec3::ZERO;
        let mut killed = 0u32;
        if kill.is_none() {
            // Periodic fast path: no escape tracking, shifted-set evaluator.
            let shifted = frozen.shifted(points);
            let mut vp = vec![0.0f64; nq];
            let mut vm = vec![0.0f64; nq];
            for j in 1..steps {
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                let dz: f64 = rng.sample(StandardNormal);
                b += Vec3::new(dx, dy, dz) * sqrt_dt;
                let in_window = j >= window_start;
                if cfg.antithetic {
                    shifted.eval_pm(b, &mut vp, Some(&mut vm));
                    for q in 0..nq {
                        acc_p[q] += vp[q];
                        acc_m[q] += vm[q];
                    }
                    if in_window {
                        for q in 0..nq {
                            win[q] += vp[q] + vm[q];
                        }
                    }
                } else {
                    shifted.eval_pm(b, &mut vp, None);
                    for q in 0..nq {
                        acc_p[q] += vp[q];
                    }
                    if in_window {
                        for q in 0..nq {
                            win[q] += vp[q];
                        }
                    }
                }
            }
        } else {
            let k = kill.as_ref().unwrap();
            let mut alive_p = vec![true; nq];
            let mut alive_m = vec![true; nq];
            for j in 1..steps {
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                let dz: f64 = rng.sample(StandardNormal);
                b += Vec3::new(dx, dy, dz) * sqrt_dt;
                let in_window = j >= window_start;
                for q in 0..nq {
                    if alive_p[q] {
                        let pos = points[q] + b;
                        if pos.norm_sq() > k.radius_sq {
                            alive_p[q] = false;
                            killed += 1;
                        } else {
                            let v = frozen.eval(pos);
                            acc_p[q] += v;
                            if in_window {
                                win[q] += v;
                            }
                        }
                    }
                    if cfg.antithetic && alive_m[q] {
                        let pos = points[q] - b;
                        if pos.norm_sq() > k.radius_sq {
                            alive_m[q] = false;
                            killed += 1;
                        } else {
                            let v = frozen.eval(pos);
                            acc_m[q] += v;
                            if in_window {
                                win[q] += v;
                            }
                        }
                    }
                }
            }
        }
        let branches = if cfg.antithetic { 2.0 } else { 1.0 };
        let mut vals = vec![0.0; nq];
        for q in 0..nq {
            let path_sum = if cfg.antithetic { 0.5 * (acc_p[q] + acc_m[q]) } else { acc_p[q] };
            vals[q] = 0.5 * dt * (base[q] + path_sum);
            win[q] /= branches * window_cells as f64;
        }
        PairOut { vals, window: win, killed }
    };

    let outs: Vec<PairOut> = (0..n_pairs).into_par_iter().map(run_pair).collect();

    // Ordered reduction: identical totals for any worker count.
    let mut samples = vec![0.0; nq * n_pairs];
    let mut window_mean = vec![0.0; nq];
    let mut killed_total = 0u64;
    for (p, out) in outs.into_iter().enumerate() {
        for q in 0..nq {
            samples[q * n_pairs + p] = out.vals[q];
            window_mean[q] += out.window[q];
        }
        killed_total += out.killed as u64;
    }
    for w in window_mean.iter_mut() {
        *w /= n_pairs as f64;
    }
    let branches = if cfg.antithetic { 2.0 } else { 1.0 };
    let denom = (n_pairs as f64) * branches * nq as f64;
    let killed_frac = killed_total as f64 / denom;
    let kill_residual = kill.map(|k| k.residual_bound).unwrap_or(0.0) * killed_frac;
    Ok(WalkStats { samples, window_mean, killed_frac, kill_residual, n_samples: n_pairs })
}

fn stats_to_scalar(stats: &WalkStats, q: usize, dom: &Domain, cfg: &PoissonConfig) -> McScalar {
    let (value, std_err) = mean_se(&stats.samples, q, stats.n_samples);
    let tail_est =
        0.5 * stats.window_mean[q].abs() * tail_factor(dom, cfg.t_max) + stats.kill_residual;
    McScalar {
        value,
        std_err,
        tail_est,
        tail_warning: tail_est > 10.0 * std_err,
        killed_frac: stats.killed_frac,
    }
}

/// Pressure p(x) = N gamma(x) by the truncated Brownian-time integral.
pub fn pressure_mc(
    gamma: &ScalarField,
    t: f64,
    x: Vec3,
    dom: &Domain,
    cfg: &PoissonConfig,
) -> Result<McScalar> {
    Ok(pressure_mc_batch(gamma, t, &[x], dom, cfg)?.remove(0))
}

/// Batched [`pressure_mc`]: all points ride the same Brownian increment
/// streams, amortizing path generation. Estimates are correlated across
/// points but individually identical in law to the single-point call.
pub fn pressure_mc_batch(
    gamma: &ScalarField,
    t: f64,
    points: &[Vec3],
    dom: &Domain,
    cfg: &PoissonConfig,
) -> Result<Vec<McScalar>> {
    let stats = scalar_walk(gamma, t, points, dom, cfg)?;
    Ok((0..points.len()).map(|q| stats_to_scalar(&stats, q, dom, cfg)).collect())
}

/// Monte Carlo estimate of `sum_q w_q p(x_q)` with the linear combination
/// applied per sample, so the reported standard error reflects the true
/// (common-path, correlated) variance of the combination. This is what makes
/// finite-difference cross-checks of the walk estimators meaningful: the
/// naive difference of two independent estimates would drown in noise.
pub fn pressure_mc_linear(
    gamma: &ScalarField,
    t: f64,
    points: &[(Vec3, f64)],
    dom: &Domain,
    cfg: &PoissonConfig,
) -> Result<McScalar> {
    let xs: Vec<Vec3> = points.iter().map(|p| p.0).collect();
    let stats = scalar_walk(gamma, t, &xs, dom, cfg)?;
    let n = stats.n_samples;
    let mut combo = vec![0.0; n];
    let mut window = 0.0;
    for (q, &(_, w)) in points.iter().enumerate() {
        for s in 0..n {
            combo[s] += w * stats.samples[q * n + s];
        }
        window += w * stats.window_mean[q];
    }
    let mean = combo.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        combo.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        0.0
    };
    let std_err = (var / n as f64).sqrt();
    let tail_est = 0.5 * window.abs() * tail_factor(dom, cfg.t_max) + stats.kill_residual;
    Ok(McScalar {
        value: mean,
        std_err,
        tail_est,
        tail_warning: tail_est > 10.0 * std_err,
        killed_frac: stats.killed_frac,
    })
}

/// Path-averaged integrand profile tau |-> E gamma(t, x + B(tau)), binned
/// into `bins` equal chunks of the walk grid. Diagnostic used to check decay
/// rates and to justify the truncation horizon.
pub fn integrand_profile(
    gamma: &ScalarField,
    t: f64,
    x: Vec3,
    dom: &Domain,
    cfg: &PoissonConfig,
    bins: usize,
) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    dom.validate()?;
    periodic_precheck(gamma, t, dom)?;
    if bins == 0 {
        return Err(Error::InvalidConfig("bins must be >= 1".into()));
    }
    let n_pairs = cfg.pairs();
    let steps = cfg.steps();
    let sqrt_dt = cfg.dt_bm.sqrt();
    let per_pair = |p: usize| -> Result<Vec<f64>> {
        let mut rng = path_rng(cfg.seed, &[TAG_WALK, p as u64]);
        let mut sums = vec![0.0; bins];
        let mut counts = vec![0u32; bins];
        let mut b = Vec3::ZERO;
        for j in 1..steps {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            let dz: f64 = rng.sample(StandardNormal);
            b += Vec3::new(dx, dy, dz) * sqrt_dt;
            let bin = (j * bins) / steps;
            let v = if cfg.antithetic {
                0.5 * (gamma.eval(t, x + b)? + gamma.eval(t, x - b)?)
            } else {
                gamma.eval(t, x + b)?
            };
            sums[bin] += v;
            counts[bin] += 1;
        }
        for (s, c) in sums.iter_mut().zip(&counts) {
            if *c > 0 {
                *s /= *c as f64;
            }
        }
        Ok(sums)
    };
    let outs: Vec<Result<Vec<f64>>> = (0..n_pairs).into_par_iter().map(per_pair).collect();
    let mut profile = vec![0.0; bins];
    for out in outs {
        let o = out?;
        for (acc, v) in profile.iter_mut().zip(&o) {
            *acc += v;
        }
    }
    let bin_width = cfg.t_max / bins as f64;
    Ok(profile
        .into_iter()
        .enumerate()
        .map(|(i, s)| ((i as f64 + 0.5) * bin_width, s / n_pairs as f64))
        .collect())
}

/// Gradient walk core for [`grad_pressure_mc`]. Per sample:
/// `1/2 [grad gamma(t,x) dt + sum_{j>=1} (1/tau_j) gamma(t, x+B_j) B_j dt]`,
/// with the singular first cell replaced by its analytic limit.
fn grad_walk(
    gamma: &ScalarField,
    t: f64,
    points: &[Vec3],
    dom: &Domain,
    cfg: &PoissonConfig,
) -> Result<(Vec<Vec3>, WalkStats)> {
    cfg.validate()?;
    dom.validate()?;
    periodic_precheck(gamma, t, dom)?;
    let kill = kill_policy(gamma, t, dom)?;
    let frozen = gamma.freeze(t)?;
    let n_pairs = cfg.pairs();
    let steps = cfg.steps();
    let dt = cfg.dt_bm;
    let sqrt_dt = dt.sqrt();
    let nq = points.len();
    let window_start = (steps as f64 * 0.9) as usize;
    let window_cells = (steps - window_start).max(1);

    let mut base = vec![Vec3::ZERO; nq];
    for (q, &x) in points.iter().enumerate() {
        base[q] = gamma.gradient(t, x)?;
    }

    struct PairOut {
        vals: Vec<Vec3>,
        window: Vec<f64>,
        killed: u32,
    }

    let run_pair = |p: usize| -> PairOut {
        let mut rng = path_rng(cfg.seed, &[TAG_WALK, p as u64]);
        let mut acc_p = vec![Vec3::ZERO; nq];
        let mut acc_m = vec![Vec3::ZERO; nq];
        let mut win = vec![0.0f64; nq];
        let mut b = Vec3::ZERO;
        let mut killed = 0u32;
        if kill.is_none() {
            let shifted = frozen.shifted(points);
            let mut vp = vec![0.0f64; nq];
            let mut vm = vec![0.0f64; nq];
            for j in 1..steps {
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                let dz: f64 = rng.sample(StandardNormal);
                b += Vec3::new(dx, dy, dz) * sqrt_dt;
                let inv_tau = 1.0 / (j as f64 * dt);
                let in_window = j >= window_start;
                if cfg.antithetic {
                    shifted.eval_pm(b, &mut vp, Some(&mut vm));
                    for q in 0..nq {
                        acc_p[q] = acc_p[q].mul_add(vp[q] * inv_tau, b);
                        acc_m[q] = acc_m[q].mul_add(-(vm[q] * inv_tau), b);
                    }
                    if in_window {
                        for q in 0..nq {
                            win[q] += vp[q] + vm[q];
                        }
                    }
                } else {
                    shifted.eval_pm(b, &mut vp, None);
                    for q in 0..nq {
                        acc_p[q] = acc_p[q].mul_add(vp[q] * inv_tau, b);
                    }
                    if in_window {
                        for q in 0..nq {
                            win[q] += vp[q];
                        }
                    }
                }
            }
        } else {
            let k = kill.as_ref().unwrap();
            let mut alive_p = vec![true; nq];
            let mut alive_m = vec![true; nq];
            for j in 1..steps {
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                let dz: f64 = rng.sample(StandardNormal);
                b += Vec3::new(dx, dy, dz) * sqrt_dt;
                let inv_tau = 1.0 / (j as f64 * dt);
                let in_window = j >= window_start;
                for q in 0..nq {
                    if alive_p[q] {
                        let pos = points[q] + b;
                        if pos.norm_sq() > k.radius_sq {
                            alive_p[q] = false;
                            killed += 1;
                        } else {
                            let v = frozen.eval(pos);
                            acc_p[q] = acc_p[q].mul_add(v * inv_tau, b);
                            if in_window {
                                win[q] += v;
                            }
                        }
                    }
                    if cfg.antithetic && alive_m[q] {
                        let pos = points[q] - b;
                        if pos.norm_sq() > k.radius_sq {
                            alive_m[q] = false;
                            killed += 1;
                        } else {
                            let v = frozen.eval(pos);
                            acc_m[q] = acc_m[q].mul_add(-(v * inv_tau), b);
                            if in_window {
                                win[q] += v;
                            }
                        }
                    }
                }
            }
        }
        let branches = if cfg.antithetic { 2.0 } else { 1.0 };
        let mut vals = vec![Vec3::ZERO; nq];
        for q in 0..nq {
            let path_sum = if cfg.antithetic { (acc_p[q] + acc_m[q]) * 0.5 } else { acc_p[q] };
            vals[q] = (base[q] + path_sum) * (0.5 * dt);
            win[q] /= branches * window_cells as f64;
        }
        PairOut { vals, window: win, killed }
    };

    let outs: Vec<PairOut> = (0..n_pairs).into_par_iter().map(run_pair).collect();

    let mut samples = vec![Vec3::ZERO; nq * n_pairs];
    let mut window_mean = vec![0.0; nq];
    let mut killed_total = 0u64;
    for (p, out) in outs.into_iter().enumerate() {
        for q in 0..nq {
            samples[q * n_pairs + p] = out.vals[q];
            window_mean[q] += out.window[q];
        }
        killed_total += out.killed as u64;
    }
    for w in window_mean.iter_mut() {
        *w /= n_pairs as f64;
    }
    let branches = if cfg.antithetic { 2.0 } else { 1.0 };
    let killed_frac = killed_total as f64 / ((n_pairs as f64) * branches * nq as f64);
    let kill_residual = kill.map(|k| k.residual_bound).unwrap_or(0.0) * killed_frac;
    let stats = WalkStats {
        samples: Vec::new(),
        window_mean,
        killed_frac,
        kill_residual,
        n_samples: n_pairs,
    };
    Ok((samples, stats))
}

/// grad p(x) by the weighted Brownian-time integral; singular first cell
/// replaced by its analytic limit (1/2) grad gamma(x) dt_bm.
pub fn grad_pressure_mc(
    gamma: &ScalarField,
    t: f64,
    x: Vec3,
    dom: &Domain,
    cfg: &PoissonConfig,
) -> Result<McVector> {
    Ok(grad_pressure_mc_batch(gamma, t, &[x], dom, cfg)?.remove(0))
}

/// Batched [`grad_pressure_mc`] over shared Brownian streams.
pub fn grad_pressure_mc_batch(
    gamma: &ScalarField,
    t: f64,
    points: &[Vec3],
    dom: &Domain,
    cfg: &PoissonConfig,
) -> Result<Vec<McVector>> {
    let (samples, stats) = grad_walk(gamma, t, points, dom, cfg)?;
    let n = stats.n_samples;
    let mut out = Vec::with_capacity(points.len());
    for q in 0..points.len() {
        let s = &samples[q * n..(q + 1) * n];
        let mean = s.iter().fold(Vec3::ZERO, |a, v| a + *v) / n as f64;
        let mut var = Vec3::ZERO;
        if n > 1 {
            for v in s {
                let d = *v - mean;
                var += Vec3::new(d.x * d.x, d.y * d.y, d.z * d.z);
            }
            var = var / (n as f64 - 1.0);
        }
        let std_err = Vec3::new(
            (var.x / n as f64).sqrt(),
            (var.y / n as f64).sqrt(),
            (var.z / n as f64).sqrt(),
        );
        // The tail integrand carries an extra B/tau ~ tau^{-1/2} factor
        // relative to the value walk; the window level is a usable proxy.
        let tail_est = 0.5 * stats.window_mean[q].abs() * tail_factor(dom, cfg.t_max)
            / cfg.t_max.sqrt()
            + stats.kill_residual;
        let max_se = std_err.max_abs();
        out.push(McVector {
            value: mean,
            std_err,
            tail_est,
            tail_warning: tail_est > 10.0 * max_se,
            killed_frac: stats.killed_frac,
        });
    }
    Ok(out)
}

pub use crate::fields::spectral::{calderon_zygmund_check, CzReport};
