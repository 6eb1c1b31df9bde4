//! Successive-approximation solver for the incompressible momentum system on
//! a periodic cube. Each outer iteration freezes the previous velocity
//! iterate as drift, resimulates backward stochastic characteristics, and
//! rebuilds velocity, velocity gradient, and pressure together:
//!
//! * backward paths `d psi = -u^k dt + sigma dW`, anchored at `(t, x)`;
//! * velocity: endpoint data minus the path integral of the pressure gradient;
//! * pressure: `-lap p = Tr[grad u^k grad u^{k+1}]`, solved per time node;
//! * gradient: pathwise endpoint term `grad u0 * eta` minus an estimator that
//!   differentiates the pressure integral through the driving noise.
//!
//! The pressure coupling is implicit (`gamma` needs `grad u^{k+1}`), so every
//! step resolves it with a small inner fixed point over `gamma`. Crucially,
//! paths depend only on the frozen drift, not on `gamma`; with per-iteration
//! noise streams the inner map is exactly deterministic, so `inner_tol` may
//! sit far below the outer statistical error.
//!
//! With `sigma = 0` the same driver degenerates to deterministic
//! characteristics (one path per point, spectral gradients) and solves the
//! inviscid system.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::grid::stencil;
use crate::fields::{
    gamma, spectral, Domain, GridSeries, ScalarField, ScalarGrid, TensorGrid, Vec3Grid,
    VectorField,
};
use crate::flows::steps_for;
use crate::math::{Mat3, Vec3};
use crate::poisson::{grad_pressure_mc_batch, pressure_mc_batch, PoissonConfig};
use crate::rng::path_rng;

/// Stream tags: one namespace per estimator so ops never share noise.
const TAG_STEP: u64 = 0x7069_6361;
const TAG_GRAD_OP: u64 = 0x6265_6c77;
const TAG_TRANSPORT_OP: u64 = 0x6a74_7270;

/// Inner fixed-point passes run on `n_paths / INNER_PATH_DIV` paths (at least
/// INNER_PATH_MIN); the converged gamma is then re-estimated at full strength.
const INNER_PATH_DIV: usize = 8;
const INNER_PATH_MIN: usize = 64;

/// Velocity-update route used by the outer iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    /// Backward-path endpoint data plus the time integral of the pressure
    /// gradient, with the noise-space integration-by-parts gradient
    /// estimator. The primary route.
    PressureCoupled,
    /// Transport of the initial velocity by the transposed path Jacobian,
    /// projected onto divergence-free fields. No pressure enters the update;
    /// kept as an independent cross-check of the primary route.
    JacobianTransport,
}

/// How the pressure equation `-lap p = gamma` is solved on each time node.
#[derive(Clone, Debug)]
pub enum PressureSolver {
    /// FFT inverse Laplacian on the periodic grid; exact for band-limited
    /// gamma. The default.
    Spectral,
    /// Killed-walk Monte Carlo route with the given sampling parameters.
    /// Orders of magnitude slower; kept as an independent equivalence check.
    MonteCarlo { poisson: PoissonConfig },
}

/// Cauchy problem for the incompressible momentum system.
#[derive(Clone)]
pub struct NSProblem {
    /// Divergence-free initial velocity (checked on the sampled grid).
    pub u0: VectorField,
    /// Noise amplitude; the effective viscosity is sigma^2 / 2.
    pub sigma: f64,
    pub t_final: f64,
    pub domain: Domain,
}

/// Numerical parameters of the outer iteration.
#[derive(Clone, Debug)]
pub struct PicardConfig {
    /// Node count of the uniform field time grid, including 0 and t_final.
    pub time_grid_n: usize,
    /// Spatial grid resolution per axis.
    pub grid_n: usize,
    /// Paths per (time node, grid point) in the full field pass.
    pub n_paths: usize,
    /// SDE step; must evenly divide the time-grid spacing.
    pub dt: f64,
    /// Outer stopping tolerance on the combined iterate distance kappa.
    pub tol: f64,
    pub k_max: usize,
    /// Sup-norm tolerance of the inner gamma fixed point.
    pub inner_tol: f64,
    pub inner_max: usize,
    pub seed: u64,
    pub backend: Backend,
    pub pressure: PressureSolver,
    /// Lower exponent of the blended integral norms; 1 < q < 3/2.
    pub q_exponent: f64,
    /// Upper exponent of the blended integral norms; m > 3.
    pub m_exponent: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            time_grid_n: 8,
            grid_n: 16,
            n_paths: 4096,
            dt: 1e-3,
            tol: 5e-2,
            k_max: 8,
            inner_tol: 1e-3,
            inner_max: 12,
            seed: 0,
            backend: Backend::PressureCoupled,
            pressure: PressureSolver::Spectral,
            q_exponent: 1.2,
            m_exponent: 4.0,
        }
    }
}

impl PicardConfig {
    /// Time-grid spacing and SDE steps per interval; errors if dt does not
    /// evenly subdivide the spacing or any knob is out of range.
    pub(crate) fn layout(&self, t_final: f64) -> Result<(f64, usize)> {
        if self.time_grid_n < 2 {
            return Err(Error::InvalidConfig(format!(
                "time_grid_n must be >= 2, got {}",
                self.time_grid_n
            )));
        }
        if self.grid_n < 4 {
            return Err(Error::InvalidConfig(format!("grid_n must be >= 4, got {}", self.grid_n)));
        }
        if self.n_paths == 0 {
            return Err(Error::InvalidConfig("n_paths must be >= 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.inner_tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "inner_tol must be positive, got {}",
                self.inner_tol
            )));
        }
        if self.k_max < 1 || self.inner_max < 1 {
            return Err(Error::InvalidConfig("k_max and inner_max must be >= 1".into()));
        }
        if !(self.q_exponent > 1.0 && self.q_exponent < 1.5) {
            return Err(Error::InvalidConfig(format!(
                "q_exponent must lie in (1, 3/2), got {}",
                self.q_exponent
            )));
        }
        if !(self.m_exponent > 3.0 && self.m_exponent.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "m_exponent must be > 3, got {}",
                self.m_exponent
            )));
        }
        let delta = t_final / (self.time_grid_n - 1) as f64;
        let spi = steps_for(delta, self.dt)?;
        if spi == 0 {
            return Err(Error::InvalidConfig(format!(
                "dt = {} exceeds the time-grid spacing {delta}",
                self.dt
            )));
        }
        Ok((delta, spi))
    }

    pub fn validate(&self, t_final: f64) -> Result<()> {
        self.layout(t_final).map(|_| ())
    }
}

/// Distances between successive iterates. Magnitude norms are taken against
/// the volume-normalized measure, so every entry shares the field's units.
#[derive(Clone, Copy, Debug)]
pub struct IterationDeltas {
    /// Outer index of the newer iterate.
    pub k: usize,
    /// Sup over time nodes and grid points of the velocity distance.
    pub sup_u: f64,
    /// Max over time nodes of the blended L^q + L^m velocity distance.
    pub lq_u: f64,
    /// Sup of the Frobenius gradient distance.
    pub sup_grad: f64,
    /// Blended L^q + L^m gradient distance.
    pub lq_grad: f64,
}

impl IterationDeltas {
    /// Combined contraction measure driving the outer stopping rule.
    pub fn kappa(&self) -> f64 {
        self.sup_grad + self.lq_grad + self.lq_u
    }
}

/// Fields of one outer iterate, stored per time node on a shared grid.
#[derive(Clone, Debug)]
pub struct PicardState {
    /// Outer index; 1 is the initial iterate (initial data copied in time).
    pub k: usize,
    pub times: Vec<f64>,
    pub u: Vec<Vec3Grid>,
    /// Velocity gradient; entry (i, j) = d u_i / d x_j.
    pub grad_u: Vec<TensorGrid>,
    pub p: Vec<ScalarGrid>,
    pub grad_p: Vec<Vec3Grid>,
    /// Distance history up to this iterate.
    pub deltas: Vec<IterationDeltas>,
    /// Sup of |grad u| per time node.
    pub k1_traj: Vec<f64>,
    /// Blended L^q + L^m norm of |grad u| per time node.
    pub beta_traj: Vec<f64>,
    /// Largest per-node mean velocity standard error of the last field pass.
    pub velocity_se: f64,
    pub gradient_se: f64,
}

/// Outcome of the outer iteration.
#[derive(Clone, Debug)]
pub struct PicardRun {
    /// Converged state, or the lowest-kappa state seen when not converged.
    pub state: PicardState,
    pub converged: bool,
    /// Full delta sequence of the run, including any post-best steps.
    pub history: Vec<IterationDeltas>,
}

/// Weak-form residuals of a state against divergence-free test fields.
#[derive(Clone, Debug)]
pub struct WeakReport {
    pub residuals: Vec<f64>,
    /// Per-field allowance: propagated statistical error plus an
    /// O(dt + h^2) discretization term.
    pub budgets: Vec<f64>,
    pub max_residual: f64,
}

// ---------------------------------------------------------------------------
// field plumbing

fn node_points(n: usize, side: f64) -> Vec<Vec3> {
    let h = side / n as f64;
    let mut pts = Vec::with_capacity(n * n * n);
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                pts.push(Vec3::new(ix as f64 * h, iy as f64 * h, iz as f64 * h));
            }
        }
    }
    pts
}

fn sample_vec_grid(f: &VectorField, t: f64, n: usize, side: f64) -> Result<Vec3Grid> {
    let h = side / n as f64;
    let mut g = Vec3Grid::zeros(n, side);
    let mut i = 0;
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                g.data[i] =
                    f.eval(t, Vec3::new(ix as f64 * h, iy as f64 * h, iz as f64 * h))?;
                i += 1;
            }
        }
    }
    Ok(g)
}

fn vec_grid_from(n: usize, side: f64, vals: &[Vec3]) -> Vec3Grid {
    let mut g = Vec3Grid::zeros(n, side);
    g.data.copy_from_slice(vals);
    g
}

fn tensor_grid_from(n: usize, side: f64, vals: &[Mat3]) -> TensorGrid {
    let mut g = TensorGrid::zeros(n, side);
    g.data.copy_from_slice(vals);
    g
}

/// gamma(x) = Tr[a(x) b(x)] on matching grids.
fn trace_grid(a: &TensorGrid, b: &TensorGrid) -> ScalarGrid {
    let mut g = ScalarGrid::zeros(a.n, a.side);
    for (o, (ma, mb)) in g.data.iter_mut().zip(a.data.iter().zip(&b.data)) {
        *o = gamma(ma, mb);
    }
    g
}

fn sup_abs(vals: &[f64]) -> f64 {
    vals.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Sup and blended (mean |v|^q)^(1/q) + (mean |v|^m)^(1/m) of a magnitude
/// stream.
fn sup_and_blend(mags: impl Iterator<Item = f64>, q: f64, m: f64) -> (f64, f64) {
    let mut sup = 0.0f64;
    let mut sq = 0.0f64;
    let mut sm = 0.0f64;
    let mut count = 0usize;
    for v in mags {
        sup = sup.max(v);
        sq += v.powf(q);
        sm += v.powf(m);
        count += 1;
    }
    let n = count.max(1) as f64;
    (sup, (sq / n).powf(1.0 / q) + (sm / n).powf(1.0 / m))
}

fn comp_sq(v: Vec3) -> Vec3 {
    Vec3::new(v.x * v.x, v.y * v.y, v.z * v.z)
}

fn mat_sq(m: &Mat3) -> Mat3 {
    let mut out = Mat3::ZERO;
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = m[r][c] * m[r][c];
        }
    }
    out
}

fn se_vec(sum: Vec3, sq: Vec3, n: usize) -> Vec3 {
    if n < 2 {
        return Vec3::ZERO;
    }
    let nf = n as f64;
    let mut out = Vec3::ZERO;
    for c in 0..3 {
        let var = ((sq.comp(c) - sum.comp(c) * sum.comp(c) / nf) / (nf - 1.0)).max(0.0);
        out.set_comp(c, (var / nf).sqrt());
    }
    out
}

fn se_mat(sum: &Mat3, sq: &Mat3, n: usize) -> Mat3 {
    if n < 2 {
        return Mat3::ZERO;
    }
    let nf = n as f64;
    let mut out = Mat3::ZERO;
    for r in 0..3 {
        for c in 0..3 {
            let var = ((sq[r][c] - sum[r][c] * sum[r][c] / nf) / (nf - 1.0)).max(0.0);
            out[r][c] = (var / nf).sqrt();
        }
    }
    out
}

// ---------------------------------------------------------------------------
// time-interpolated drift frames

/// Node-grid views with linear interpolation onto the fine step lattice.
/// Step s sits at time s * dt; node j covers steps [j * spi, (j+1) * spi].
struct Frames<'a> {
    spi: usize,
    u: &'a [Vec3Grid],
    gu: &'a [TensorGrid],
    gp: Option<&'a [Vec3Grid]>,
}

impl Frames<'_> {
    #[inline]
    fn blend(&self, step: usize) -> (usize, usize, f64) {
        let a = step / self.spi;
        let r = step % self.spi;
        if r == 0 {
            (a, a, 0.0)
        } else {
            (a, a + 1, r as f64 / self.spi as f64)
        }
    }

    /// Drift and drift gradient at fine step `step`, trilinear in space.
    #[inline]
    fn drift_jac(&self, step: usize, x: Vec3) -> (Vec3, Mat3) {
        let (a, b, w) = self.blend(step);
        let (ua, ga) = gather_uv(&self.u[a], &self.gu[a], x);
        if w == 0.0 {
            return (ua, ga);
        }
        let (ub, gb) = gather_uv(&self.u[b], &self.gu[b], x);
        (ua * (1.0 - w) + ub * w, ga * (1.0 - w) + gb * w)
    }

    #[inline]
    fn pressure_grad(&self, step: usize, x: Vec3) -> Vec3 {
        let gp = self.gp.expect("pressure-gradient frames not loaded");
        let (a, b, w) = self.blend(step);
        let va = gp[a].trilinear(x);
        if w == 0.0 {
            va
        } else {
            va * (1.0 - w) + gp[b].trilinear(x) * w
        }
    }
}

/// One-stencil gather of a vector grid and a tensor grid at the same point.
#[inline]
fn gather_uv(u: &Vec3Grid, g: &TensorGrid, x: Vec3) -> (Vec3, Mat3) {
    let (idx, w) = stencil(x, u.n, u.side);
    let mut vu = Vec3::ZERO;
    let mut vg = Mat3::ZERO;
    for s in 0..8 {
        vu += u.data[idx[s]] * w[s];
        vg += g.data[idx[s]] * w[s];
    }
    (vu, vg)
}

// ---------------------------------------------------------------------------
// pressure solves

/// Solve -lap p = gamma on every time node; gamma's mean mode is dropped
/// (it is analytically zero for divergence-free drift, and a constant shift
/// of p never enters the dynamics).
fn pressure_fields(
    gammas: &[ScalarGrid],
    times: &[f64],
    prob: &NSProblem,
    cfg: &PicardConfig,
) -> Result<(Vec<ScalarGrid>, Vec<Vec3Grid>)> {
    let mut ps = Vec::with_capacity(gammas.len());
    let mut gps = Vec::with_capacity(gammas.len());
    match &cfg.pressure {
        PressureSolver::Spectral => {
            for g in gammas {
                let (p, gp, _mean) = spectral::poisson_with_gradient(g, true);
                ps.push(p);
                gps.push(gp);
            }
        }
        PressureSolver::MonteCarlo { poisson } => {
            for (g, &tj) in gammas.iter().zip(times) {
                let mean = g.mean();
                let mut zm = g.clone();
                for v in zm.data.iter_mut() {
                    *v -= mean;
                }
                let points = node_points(g.n, g.side);
                let field = ScalarField::from_series(GridSeries::single(tj, zm));
                let vals = pressure_mc_batch(&field, tj, &points, &prob.domain, poisson)?;
                let gvals = grad_pressure_mc_batch(&field, tj, &points, &prob.domain, poisson)?;
                let mut p = ScalarGrid::zeros(g.n, g.side);
                let mut gp = Vec3Grid::zeros(g.n, g.side);
                for (i, (v, gv)) in vals.iter().zip(&gvals).enumerate() {
                    p.data[i] = v.value;
                    gp.data[i] = gv.value;
                }
                ps.push(p);
                gps.push(gp);
            }
        }
    }
    Ok((ps, gps))
}

// ---------------------------------------------------------------------------
// path kernels

struct FieldPass {
    vel: Vec<Vec3>,
    vel_se: Vec<Vec3>,
    grad: Vec<Mat3>,
    grad_se: Vec<Mat3>,
}

/// Backward-path estimator of velocity and velocity gradient at time
/// `anchor * dt` for a batch of points.
///
/// Per path, walking steps j = anchor-1 .. 0 downward:
///   pos_j = pos_{j+1} - u(t_{j+1}, pos_{j+1}) dt + sigma inc_j,
///   eta_j = eta_{j+1} - grad_u(t_{j+1}, pos_{j+1}) eta_{j+1} dt,
/// accumulating w_j = sum_{i >= j} eta_i^T inc_i. Exact Gaussian integration
/// by parts on this chain gives, for data f read at step j,
///   grad_x E[f(pos_j)] = E[f(pos_j) w_j^T] / (sigma (t - t_j)),
/// which is applied slice-wise to the pressure-gradient integral with the
/// anchor-point value as control variate (the raw weight's variance grows
/// like 1/(t - t_j) near the anchor). The slice j = anchor-1 is replaced by
/// its analytic limit, a one-sided finite-difference derivative of grad_p at
/// the anchor times dt — bias O(dt).
#[allow(clippy::too_many_arguments)]
fn backward_field_pass(
    prob: &NSProblem,
    frames: &Frames,
    dt: f64,
    anchor: usize,
    points: &[Vec3],
    n_paths: usize,
    seed: u64,
    sid: [u64; 3],
    fd_h: f64,
) -> Result<FieldPass> {
    let sigma = prob.sigma;
    let sdt = dt.sqrt();
    let t_anchor = anchor as f64 * dt;
    let with_p = frames.gp.is_some();
    let recs: Vec<(Vec3, Vec3, Mat3, Mat3)> = points
        .par_iter()
        .enumerate()
        .map(|(q, &x0)| -> Result<(Vec3, Vec3, Mat3, Mat3)> {
            // Deterministic per-point pieces: control-variate series and the
            // finite-difference band term at the anchor.
            let cv: Vec<Vec3> = if with_p {
                (0..anchor.saturating_sub(1)).map(|j| frames.pressure_grad(j, x0)).collect()
            } else {
                Vec::new()
            };
            let band = if with_p && anchor > 0 {
                let base = frames.pressure_grad(anchor, x0);
                let mut hmat = Mat3::ZERO;
                for axis in 0..3 {
                    let mut xs = x0;
                    xs.set_comp(axis, x0.comp(axis) + fd_h);
                    let d = (frames.pressure_grad(anchor, xs) - base) * (1.0 / fd_h);
                    for i in 0..3 {
                        hmat[i][axis] = d.comp(i);
                    }
                }
                hmat
            } else {
                Mat3::ZERO
            };

            let mut vsum = Vec3::ZERO;
            let mut vsq = Vec3::ZERO;
            let mut gsum = Mat3::ZERO;
            let mut gsq = Mat3::ZERO;
            for path in 0..n_paths {
                let mut rng = path_rng(seed, &[sid[0], sid[1], sid[2], q as u64, path as u64]);
                let mut pos = x0;
                let mut eta = Mat3::IDENTITY;
                let mut wsum = Vec3::ZERO;
                let mut p_int = Vec3::ZERO;
                let mut gacc = Mat3::ZERO;
                for j in (0..anchor).rev() {
                    let (u1, g1) = frames.drift_jac(j + 1, pos);
                    let inc = Vec3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    ) * sdt;
                    pos = pos - u1 * dt + inc * sigma;
                    eta = eta - g1.matmul(&eta) * dt;
                    wsum += eta.tr_mul_vec(inc);
                    if with_p {
                        let gpj = frames.pressure_grad(j, pos);
                        p_int += gpj;
                        if j + 1 < anchor {
                            let gap = t_anchor - j as f64 * dt;
                            gacc += Mat3::outer(gpj - cv[j], wsum) * (1.0 / (sigma * gap));
                        }
                    }
                }
                if !(pos.is_finite() && eta.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("backward field pass, point {q}"),
                    });
                }
                let vel = prob.u0.eval(0.0, pos)? - p_int * dt;
                let grad = prob.u0.gradient(0.0, pos)?.matmul(&eta) - gacc * dt - band * dt;
                vsum += vel;
                vsq += comp_sq(vel);
                gsum += grad;
                gsq += mat_sq(&grad);
            }
            let inv = 1.0 / n_paths as f64;
            Ok((
                vsum * inv,
                se_vec(vsum, vsq, n_paths),
                gsum * inv,
                se_mat(&gsum, &gsq, n_paths),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = FieldPass {
        vel: Vec::with_capacity(recs.len()),
        vel_se: Vec::with_capacity(recs.len()),
        grad: Vec::with_capacity(recs.len()),
        grad_se: Vec::with_capacity(recs.len()),
    };
    for (v, vse, g, gse) in recs {
        out.vel.push(v);
        out.vel_se.push(vse);
        out.grad.push(g);
        out.grad_se.push(gse);
    }
    Ok(out)
}

/// Deterministic characteristics for sigma = 0: one path, no noise; the
/// velocity is the transported endpoint data minus the pressure integral.
fn euler_velocity(
    prob: &NSProblem,
    frames: &Frames,
    dt: f64,
    anchor: usize,
    points: &[Vec3],
) -> Result<Vec<Vec3>> {
    points
        .par_iter()
        .enumerate()
        .map(|(q, &x0)| {
            let mut pos = x0;
            let mut p_int = Vec3::ZERO;
            for j in (0..anchor).rev() {
                let (u1, _) = frames.drift_jac(j + 1, pos);
                pos = pos - u1 * dt;
                if frames.gp.is_some() {
                    p_int += frames.pressure_grad(j, pos);
                }
            }
            if !pos.is_finite() {
                return Err(Error::NonFinite { context: format!("characteristic at point {q}") });
            }
            Ok(prob.u0.eval(0.0, pos)? - p_int * dt)
        })
        .collect()
}

/// Transport estimator: transposed path Jacobian applied to the endpoint
/// data, averaged per point. Returns means and standard errors.
#[allow(clippy::too_many_arguments)]
fn transport_pass(
    prob: &NSProblem,
    frames: &Frames,
    dt: f64,
    anchor: usize,
    points: &[Vec3],
    n_paths: usize,
    seed: u64,
    sid: [u64; 3],
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let sigma = prob.sigma;
    let sdt = dt.sqrt();
    let recs: Vec<(Vec3, Vec3)> = points
        .par_iter()
        .enumerate()
        .map(|(q, &x0)| -> Result<(Vec3, Vec3)> {
            let mut vsum = Vec3::ZERO;
            let mut vsq = Vec3::ZERO;
            for path in 0..n_paths {
                let mut rng = path_rng(seed, &[sid[0], sid[1], sid[2], q as u64, path as u64]);
                let mut pos = x0;
                let mut eta = Mat3::IDENTITY;
                for j in (0..anchor).rev() {
                    let (u1, g1) = frames.drift_jac(j + 1, pos);
                    let inc = Vec3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    ) * sdt;
                    pos = pos - u1 * dt + inc * sigma;
                    eta = eta - g1.matmul(&eta) * dt;
                }
                if !(pos.is_finite() && eta.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("transport pass, point {q}"),
                    });
                }
                let vel = eta.tr_mul_vec(prob.u0.eval(0.0, pos)?);
                vsum += vel;
                vsq += comp_sq(vel);
            }
            let inv = 1.0 / n_paths as f64;
            Ok((vsum * inv, se_vec(vsum, vsq, n_paths)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(recs.into_iter().unzip())
}

// ---------------------------------------------------------------------------
// operations

/// First iterate: the initial velocity copied to every time node, zero
/// pressure, gradient from the spectral derivative of the sampled data.
/// The config fixes the shared grids, so it is part of the signature.
pub fn picard_init(prob: &NSProblem, cfg: &PicardConfig) -> Result<PicardState> {
    let (side, _) = prob.domain.periodic_dims("picard solver")?;
    if !(prob.sigma >= 0.0 && prob.sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "sigma must be finite and >= 0, got {}",
            prob.sigma
        )));
    }
    if !(prob.t_final > 0.0 && prob.t_final.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "t_final must be positive and finite, got {}",
            prob.t_final
        )));
    }
    let (delta, _) = cfg.layout(prob.t_final)?;
    let u0_grid = sample_vec_grid(&prob.u0, 0.0, cfg.grid_n, side)?;
    let div = spectral::divergence(&u0_grid);
    let sup_div = sup_abs(&div.data);
    if sup_div > 1e-6 {
        return Err(Error::InvalidConfig(format!(
            "initial velocity is not divergence-free: sup |div u0| = {sup_div:.3e} > 1e-6"
        )));
    }
    let gu0 = spectral::vector_gradient(&u0_grid);
    let nn = cfg.time_grid_n;
    let mut times: Vec<f64> = (0..nn).map(|j| j as f64 * delta).collect();
    times[nn - 1] = prob.t_final;
    let (k1_0, beta_0) = sup_and_blend(
        gu0.data.iter().map(|m| m.frobenius()),
        cfg.q_exponent,
        cfg.m_exponent,
    );
    Ok(PicardState {
        k: 1,
        times,
        u: vec![u0_grid; nn],
        grad_u: vec![gu0; nn],
        p: vec![ScalarGrid::zeros(cfg.grid_n, side); nn],
        grad_p: vec![Vec3Grid::zeros(cfg.grid_n, side); nn],
        deltas: Vec::new(),
        k1_traj: vec![k1_0; nn],
        beta_traj: vec![beta_0; nn],
        velocity_se: 0.0,
        gradient_se: 0.0,
    })
}

/// One outer iteration: freeze the state's fields as drift, resolve the
/// inner gamma coupling, then rebuild all fields at full path count.
pub fn picard_step(state: &PicardState, prob: &NSProblem, cfg: &PicardConfig) -> Result<PicardState> {
    let (side, _) = prob.domain.periodic_dims("picard solver")?;
    let (_, spi) = cfg.layout(prob.t_final)?;
    if state.times.len() != cfg.time_grid_n
        || state.u.len() != cfg.time_grid_n
        || state.u[0].n != cfg.grid_n
    {
        return Err(Error::InvalidConfig(
            "state and config disagree on the grid layout".into(),
        ));
    }
    match cfg.backend {
        Backend::PressureCoupled => step_pressure_coupled(state, prob, cfg, spi, side),
        Backend::JacobianTransport => step_jacobian_transport(state, prob, cfg, spi, side),
    }
}

/// Gradient nodes for one inner pass: node 0 is exact, later nodes come from
/// the path kernel (or, with sigma = 0, from the spectral derivative of the
/// transported velocity).
#[allow(clippy::too_many_arguments)]
fn gradient_nodes(
    state: &PicardState,
    prob: &NSProblem,
    cfg: &PicardConfig,
    spi: usize,
    side: f64,
    gp: &[Vec3Grid],
    n_paths: usize,
    points: &[Vec3],
    euler: bool,
) -> Result<Vec<TensorGrid>> {
    let nn = state.times.len();
    let fd_h = side / cfg.grid_n as f64;
    let mut out = Vec::with_capacity(nn);
    out.push(state.grad_u[0].clone());
    let frames = Frames { spi, u: &state.u, gu: &state.grad_u, gp: Some(gp) };
    for j in 1..nn {
        let anchor = j * spi;
        if euler {
            let vel = euler_velocity(prob, &frames, cfg.dt, anchor, points)?;
            let ugrid = vec_grid_from(cfg.grid_n, side, &vel);
            out.push(spectral::vector_gradient(&ugrid));
        } else {
            let pass = backward_field_pass(
                prob,
                &frames,
                cfg.dt,
                anchor,
                points,
                n_paths,
                cfg.seed,
                [TAG_STEP, state.k as u64, j as u64],
                fd_h,
            )?;
            out.push(tensor_grid_from(cfg.grid_n, side, &pass.grad));
        }
    }
    Ok(out)
}

fn step_pressure_coupled(
    state: &PicardState,
    prob: &NSProblem,
    cfg: &PicardConfig,
    spi: usize,
    side: f64,
) -> Result<PicardState> {
    let nn = cfg.time_grid_n;
    let points = node_points(cfg.grid_n, side);
    let euler = prob.sigma == 0.0;
    let n_inner = if euler {
        1
    } else {
        (cfg.n_paths / INNER_PATH_DIV).max(INNER_PATH_MIN).min(cfg.n_paths)
    };

    // Inner fixed point over gamma. Paths depend only on the frozen drift,
    // so with per-iteration streams this map is deterministic in gamma.
    let mut gam: Vec<ScalarGrid> =
        (0..nn).map(|j| trace_grid(&state.grad_u[j], &state.grad_u[j])).collect();
    let mut last_diff = f64::INFINITY;
    let mut converged_inner = false;
    let mut iters = 0;
    while iters < cfg.inner_max {
        iters += 1;
        let (_, gp) = pressure_fields(&gam, &state.times, prob, cfg)?;
        let gnew = gradient_nodes(state, prob, cfg, spi, side, &gp, n_inner, &points, euler)?;
        let gam_new: Vec<ScalarGrid> =
            (0..nn).map(|j| trace_grid(&state.grad_u[j], &gnew[j])).collect();
        last_diff = 0.0;
        for j in 0..nn {
            for (a, b) in gam[j].data.iter().zip(&gam_new[j].data) {
                last_diff = last_diff.max((a - b).abs());
            }
        }
        gam = gam_new;
        if last_diff < cfg.inner_tol {
            converged_inner = true;
            break;
        }
    }
    if !converged_inner {
        return Err(Error::InnerNoConvergence { iters, tol: cfg.inner_tol, last: last_diff });
    }

    // Full-strength pass under the converged pressure gradient.
    let (_, gp_conv) = pressure_fields(&gam, &state.times, prob, cfg)?;
    let frames = Frames { spi, u: &state.u, gu: &state.grad_u, gp: Some(&gp_conv) };
    let fd_h = side / cfg.grid_n as f64;
    let mut u_new = Vec::with_capacity(nn);
    let mut gu_new = Vec::with_capacity(nn);
    u_new.push(state.u[0].clone());
    gu_new.push(state.grad_u[0].clone());
    let mut velocity_se = 0.0f64;
    let mut gradient_se = 0.0f64;
    for j in 1..nn {
        let anchor = j * spi;
        if euler {
            let vel = euler_velocity(prob, &frames, cfg.dt, anchor, &points)?;
            let ugrid = vec_grid_from(cfg.grid_n, side, &vel);
            gu_new.push(spectral::vector_gradient(&ugrid));
            u_new.push(ugrid);
        } else {
            let pass = backward_field_pass(
                prob,
                &frames,
                cfg.dt,
                anchor,
                &points,
                cfg.n_paths,
                cfg.seed,
                [TAG_STEP, state.k as u64, j as u64],
                fd_h,
            )?;
            let np = points.len() as f64;
            velocity_se =
                velocity_se.max(pass.vel_se.iter().map(|v| v.norm()).sum::<f64>() / np);
            gradient_se =
                gradient_se.max(pass.grad_se.iter().map(|m| m.frobenius()).sum::<f64>() / np);
            u_new.push(vec_grid_from(cfg.grid_n, side, &pass.vel));
            gu_new.push(tensor_grid_from(cfg.grid_n, side, &pass.grad));
        }
    }

    // Final pressure consistent with the delivered fields. Its gamma differs
    // from the inner fixed point by at most inner_tol plus the extra-path
    // statistical shift of the full pass.
    let gam_fin: Vec<ScalarGrid> =
        (0..nn).map(|j| trace_grid(&state.grad_u[j], &gu_new[j])).collect();
    let (p_fin, gp_fin) = pressure_fields(&gam_fin, &state.times, prob, cfg)?;

    Ok(assemble_state(state, cfg, u_new, gu_new, p_fin, gp_fin, velocity_se, gradient_se))
}

fn step_jacobian_transport(
    state: &PicardState,
    prob: &NSProblem,
    cfg: &PicardConfig,
    spi: usize,
    side: f64,
) -> Result<PicardState> {
    let nn = cfg.time_grid_n;
    let points = node_points(cfg.grid_n, side);
    let n_eff = if prob.sigma == 0.0 { 1 } else { cfg.n_paths };
    let frames = Frames { spi, u: &state.u, gu: &state.grad_u, gp: None };
    let mut u_new = Vec::with_capacity(nn);
    let mut gu_new = Vec::with_capacity(nn);
    u_new.push(state.u[0].clone());
    gu_new.push(state.grad_u[0].clone());
    let mut velocity_se = 0.0f64;
    for j in 1..nn {
        let anchor = j * spi;
        let (vals, ses) = transport_pass(
            prob,
            &frames,
            cfg.dt,
            anchor,
            &points,
            n_eff,
            cfg.seed,
            [TAG_STEP, state.k as u64, j as u64],
        )?;
        // Standard errors are measured before the projection; the projection
        // is an L^2 contraction, so this is conservative.
        let np = points.len() as f64;
        velocity_se = velocity_se.max(ses.iter().map(|v| v.norm()).sum::<f64>() / np);
        let proj = spectral::leray(&vec_grid_from(cfg.grid_n, side, &vals));
        gu_new.push(spectral::vector_gradient(&proj));
        u_new.push(proj);
    }
    // No pressure enters this update; solve it anyway so diagnostics and
    // downstream consumers see a consistent (p, grad p) pair.
    let gam_fin: Vec<ScalarGrid> =
        (0..nn).map(|j| trace_grid(&state.grad_u[j], &gu_new[j])).collect();
    let (p_fin, gp_fin) = pressure_fields(&gam_fin, &state.times, prob, cfg)?;
    let gradient_se = velocity_se; // gradient noise tracks the velocity pass
    Ok(assemble_state(state, cfg, u_new, gu_new, p_fin, gp_fin, velocity_se, gradient_se))
}

#[allow(clippy::too_many_arguments)]
fn assemble_state(
    state: &PicardState,
    cfg: &PicardConfig,
    u_new: Vec<Vec3Grid>,
    gu_new: Vec<TensorGrid>,
    p: Vec<ScalarGrid>,
    gp: Vec<Vec3Grid>,
    velocity_se: f64,
    gradient_se: f64,
) -> PicardState {
    let (q, m) = (cfg.q_exponent, cfg.m_exponent);
    let mut sup_u = 0.0f64;
    let mut lq_u = 0.0f64;
    let mut sup_g = 0.0f64;
    let mut lq_g = 0.0f64;
    let mut k1_traj = Vec::with_capacity(u_new.len());
    let mut beta_traj = Vec::with_capacity(u_new.len());
    for j in 0..u_new.len() {
        let (s, b) = sup_and_blend(
            state.u[j].data.iter().zip(&u_new[j].data).map(|(a, b)| (*b - *a).norm()),
            q,
            m,
        );
        sup_u = sup_u.max(s);
        lq_u = lq_u.max(b);
        let (s, b) = sup_and_blend(
            state.grad_u[j]
                .data
                .iter()
                .zip(&gu_new[j].data)
                .map(|(a, b)| (*b - *a).frobenius()),
            q,
            m,
        );
        sup_g = sup_g.max(s);
        lq_g = lq_g.max(b);
        let (k1, beta) = sup_and_blend(gu_new[j].data.iter().map(|mm| mm.frobenius()), q, m);
        k1_traj.push(k1);
        beta_traj.push(beta);
    }
    let mut deltas = state.deltas.clone();
    deltas.push(IterationDeltas {
        k: state.k + 1,
        sup_u,
        lq_u,
        sup_grad: sup_g,
        lq_grad: lq_g,
    });
    PicardState {
        k: state.k + 1,
        times: state.times.clone(),
        u: u_new,
        grad_u: gu_new,
        p,
        grad_p: gp,
        deltas,
        k1_traj,
        beta_traj,
        velocity_se,
        gradient_se,
    }
}

/// Velocity-gradient estimate at (t, x_batch) from a state's fields, by
/// differentiating the path expectation through the driving noise. Needs
/// sigma > 0; t must sit on the fine step lattice inside [0, t_final].
/// Returns per-point estimates and standard errors.
pub fn compute_grad_velocity_bel(
    state: &PicardState,
    prob: &NSProblem,
    cfg: &PicardConfig,
    t: f64,
    x_batch: &[Vec3],
) -> Result<(Vec<Mat3>, Vec<Mat3>)> {
    if prob.sigma == 0.0 {
        return Err(Error::ZeroNoiseGradient { sigma: prob.sigma });
    }
    let (side, _) = prob.domain.periodic_dims("picard solver")?;
    let (_, spi) = cfg.layout(prob.t_final)?;
    let t_hi = *state.times.last().expect("state has time nodes");
    if !(t >= 0.0 && t <= t_hi + 1e-9 * t_hi.max(1.0)) {
        return Err(Error::OutOfTimeRange { t, lo: 0.0, hi: t_hi });
    }
    let anchor = steps_for(t, cfg.dt)?;
    let fd_h = side / state.u[0].n as f64;
    let frames = Frames { spi, u: &state.u, gu: &state.grad_u, gp: Some(&state.grad_p) };
    let pass = backward_field_pass(
        prob,
        &frames,
        cfg.dt,
        anchor,
        x_batch,
        cfg.n_paths,
        cfg.seed,
        [TAG_GRAD_OP, state.k as u64, anchor as u64],
        fd_h,
    )?;
    Ok((pass.grad, pass.grad_se))
}

/// Iterate picard_step until kappa = sup_grad + lq_grad + lq_u drops below
/// tol, or k_max steps have run. Non-convergence is a result (best state,
/// converged = false), not an error. The tolerance is checked against the
/// measured statistical noise floor after the first step.
pub fn picard_run(prob: &NSProblem, cfg: &PicardConfig) -> Result<PicardRun> {
    let mut state = picard_init(prob, cfg)?;
    let mut best: Option<PicardState> = None;
    let mut best_kappa = f64::INFINITY;
    let mut converged = false;
    for _ in 0..cfg.k_max {
        let next = picard_step(&state, prob, cfg)?;
        let deltas = *next.deltas.last().expect("step records deltas");
        let floor = 3.0 * next.velocity_se.max(next.gradient_se);
        if cfg.tol <= floor {
            return Err(Error::InvalidConfig(format!(
                "tol = {:.3e} is at or below the measured statistical noise floor 3 * std_err = {floor:.3e}; \
                 raise tol or n_paths",
                cfg.tol
            )));
        }
        state = next;
        let kap = deltas.kappa();
        if kap < best_kappa {
            best_kappa = kap;
            best = Some(state.clone());
        }
        if kap < cfg.tol {
            converged = true;
            break;
        }
    }
    let history = state.deltas.clone();
    let final_state = if converged {
        state
    } else {
        match best {
            Some(b) => b,
            None => state,
        }
    };
    Ok(PicardRun { state: final_state, converged, history })
}

/// Quadrature over the uniform time nodes: composite Simpson, with a 3/8
/// tail when the interval count is odd, trapezoid for a single interval.
fn time_quadrature(times: &[f64], f: &[f64]) -> f64 {
    let n_int = times.len() - 1;
    if n_int == 0 {
        return 0.0;
    }
    let h = (times[n_int] - times[0]) / n_int as f64;
    if n_int == 1 {
        return 0.5 * h * (f[0] + f[1]);
    }
    let simpson_upto = if n_int % 2 == 0 { n_int } else { n_int - 3 };
    let mut acc = 0.0;
    let mut i = 0;
    while i + 2 <= simpson_upto {
        acc += h / 3.0 * (f[i] + 4.0 * f[i + 1] + f[i + 2]);
        i += 2;
    }
    if simpson_upto < n_int {
        let b = n_int - 3;
        acc += 3.0 * h / 8.0 * (f[b] + 3.0 * f[b + 1] + 3.0 * f[b + 2] + f[b + 3]);
    }
    acc
}

/// Test a state's fields against the time-integrated weak form of the
/// momentum equation: for static divergence-free h,
///   <u(T), h> = <u0, h> + int_0^T ( nu <u, lap h> + <u (x) u, grad h> ) dt
/// with nu = sigma^2 / 2; the pressure term vanishes against h. Inner
/// products are grid means (volume-normalized). Budgets combine 3x the
/// propagated velocity standard error with an O(dt + h^2) discretization
/// allowance at unit constant.
pub fn verify_weak_solution(
    state: &PicardState,
    prob: &NSProblem,
    test_fields: &[VectorField],
    cfg: &PicardConfig,
) -> Result<WeakReport> {
    let (side, _) = prob.domain.periodic_dims("picard solver")?;
    let nu = 0.5 * prob.sigma * prob.sigma;
    let nn = state.times.len();
    let t_span = state.times[nn - 1] - state.times[0];
    let np = state.u[0].data.len() as f64;
    let h_g = side / cfg.grid_n as f64;
    let sup_u = state
        .u
        .iter()
        .flat_map(|g| g.data.iter())
        .fold(0.0f64, |a, v| a.max(v.norm()));

    let mut residuals = Vec::with_capacity(test_fields.len());
    let mut budgets = Vec::with_capacity(test_fields.len());
    for h_field in test_fields {
        let h = sample_vec_grid(h_field, 0.0, cfg.grid_n, side)?;
        let h_sup = h.data.iter().fold(0.0f64, |a, v| a.max(v.norm()));
        let div = spectral::divergence(&h);
        let sup_div = sup_abs(&div.data);
        if sup_div > 1e-6 * h_sup.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "weak-form test field is not divergence-free: sup |div h| = {sup_div:.3e}"
            )));
        }
        let lap = spectral::vector_laplacian(&h);
        let gh = spectral::vector_gradient(&h);

        let integrand: Vec<f64> = (0..nn)
            .map(|j| {
                let mut acc = 0.0;
                for (i, u) in state.u[j].data.iter().enumerate() {
                    acc += nu * u.dot(lap.data[i]);
                    let g = &gh.data[i];
                    for r in 0..3 {
                        for c in 0..3 {
                            acc += u.comp(r) * u.comp(c) * g[r][c];
                        }
                    }
                }
                acc / np
            })
            .collect();
        let integral = time_quadrature(&state.times, &integrand);
        let pair = |ug: &Vec3Grid| {
            ug.data.iter().zip(&h.data).map(|(a, b)| a.dot(*b)).sum::<f64>() / np
        };
        let residual = (pair(&state.u[nn - 1]) - pair(&state.u[0]) - integral).abs();

        let m1_h = h.data.iter().map(|v| v.norm()).sum::<f64>() / np;
        let m1_lap = lap.data.iter().map(|v| v.norm()).sum::<f64>() / np;
        let m1_gh = gh.data.iter().map(|m| m.frobenius()).sum::<f64>() / np;
        let stat = 3.0
            * state.velocity_se
            * (m1_h + t_span * (nu * m1_lap + 2.0 * sup_u * m1_gh));
        let disc = (cfg.dt + h_g * h_g)
            * (1.0 + sup_u)
            * (m1_h + nu * m1_lap + (1.0 + sup_u) * m1_gh);
        residuals.push(residual);
        budgets.push(stat + disc);
    }
    let max_residual = residuals.iter().fold(0.0f64, |a, v| a.max(*v));
    Ok(WeakReport { residuals, budgets, max_residual })
}

/// Velocity at (t, x_batch) through the Jacobian-transport route: run the
/// outer iteration with that backend, then average a dedicated transport
/// pass at exactly t on the grid, project it divergence-free, and read the
/// batch trilinearly. t = 0 returns the initial data exactly. Standard
/// errors are measured before the projection.
pub fn ci_velocity(
    prob: &NSProblem,
    cfg: &PicardConfig,
    t: f64,
    x_batch: &[Vec3],
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let (side, _) = prob.domain.periodic_dims("picard solver")?;
    if t == 0.0 {
        let vals =
            x_batch.iter().map(|&x| prob.u0.eval(0.0, x)).collect::<Result<Vec<_>>>()?;
        let ses = vec![Vec3::ZERO; vals.len()];
        return Ok((vals, ses));
    }
    if !(t > 0.0 && t <= prob.t_final + 1e-9 * prob.t_final.max(1.0)) {
        return Err(Error::OutOfTimeRange { t, lo: 0.0, hi: prob.t_final });
    }
    let mut c = cfg.clone();
    c.backend = Backend::JacobianTransport;
    let run = picard_run(prob, &c)?;
    let state = run.state;
    let (_, spi) = c.layout(prob.t_final)?;
    let anchor = steps_for(t, c.dt)?;
    let frames = Frames { spi, u: &state.u, gu: &state.grad_u, gp: None };
    let points = node_points(c.grid_n, side);
    let n_eff = if prob.sigma == 0.0 { 1 } else { c.n_paths };
    let (vals, ses) = transport_pass(
        prob,
        &frames,
        c.dt,
        anchor,
        &points,
        n_eff,
        c.seed,
        [TAG_TRANSPORT_OP, state.k as u64, anchor as u64],
    )?;
    let proj = spectral::leray(&vec_grid_from(c.grid_n, side, &vals));
    let se_grid = vec_grid_from(c.grid_n, side, &ses);
    let out_v = x_batch.iter().map(|&x| proj.trilinear(x)).collect();
    let out_se = x_batch.iter().map(|&x| se_grid.trilinear(x)).collect();
    Ok((out_v, out_se))
}
