//! Feynman-Kac solver for the linear drift-diffusion Cauchy problem
//!
//! ```text
//! df/dt = (sigma^2/2) lap f - (g . grad) f - gamma(t),    f(0, .) = f0,
//! ```
//!
//! whose solution is the path average
//!
//! ```text
//! f(t, x) = E[ f0(psi_{t,0}(x)) - integral_0^t gamma(tau, psi_{t,tau}(x)) dtau ],
//! ```
//!
//! estimated by streaming backward walks (positions are never stored): each
//! path steps the downward recursion of the flows module, accumulates the
//! source at left endpoints, and finishes by evaluating the initial data at
//! its endpoint. Works for scalar or vector data. Also provides the weak
//! (duality) pairing that checks the transport estimator against its formal
//! adjoint: `<E[f0 . psi], h> = <f0, E[h . phi]>` for divergence-free drift,
//! estimated through two independent Monte Carlo routes.
//!
//! On whole-space domains, paths leaving a box three support radii wide are
//! excluded from the average and counted; a run aborts when more than
//! [`ESCAPE_LIMIT`](crate::flows::ESCAPE_LIMIT) of its paths escape.

use crate::error::{Error, Result};
use crate::fields::{Domain, ScalarField, VectorField};
use crate::flows::{steps_for, ESCAPE_LIMIT};
use crate::math::Vec3;
use crate::rng::path_rng;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::flows::FlowConfig;

/// How far outside the support box a whole-space walk may wander before it
/// is written off, in units of the support radius.
const ESCAPE_FACTOR: f64 = 3.0;

const TAG_PARABOLIC: u64 = 0x7061_7261;
const TAG_TRANSPORT: u64 = 0x7472_616e;

/// Initial data and source of a parabolic problem; scalar and vector
/// problems run the same walks componentwise.
#[derive(Clone, Debug)]
pub enum ParabolicData {
    Scalar { f0: ScalarField, source: Option<ScalarField> },
    Vector { f0: VectorField, source: Option<VectorField> },
}

/// The linear problem: drift `g`, noise amplitude `sigma` (diffusivity
/// `sigma^2/2`), data, final time, and the spatial setting (periodic cube or
/// whole space with a known support radius).
#[derive(Clone, Debug)]
pub struct ParabolicProblem {
    pub drift: VectorField,
    pub sigma: f64,
    pub data: ParabolicData,
    pub t_final: f64,
    pub domain: Domain,
}

impl ParabolicProblem {
    fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise amplitude must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "final time must be finite and >= 0, got {}",
                self.t_final
            )));
        }
        Ok(())
    }

    fn escape_radius(&self) -> Option<f64> {
        match self.domain {
            Domain::PeriodicCube { .. } => None,
            Domain::WholeSpace { support_radius } => Some(ESCAPE_FACTOR * support_radius),
        }
    }
}

/// Point estimates with per-point statistical errors; `escaped_frac` is the
/// fraction of walks excluded by the whole-space escape box (always 0 on
/// periodic domains).
#[derive(Clone, Debug)]
pub enum ParabolicValues {
    Scalar { values: Vec<f64>, std_errs: Vec<f64>, escaped_frac: f64 },
    Vector { values: Vec<Vec3>, std_errs: Vec<Vec3>, escaped_frac: f64 },
}

impl ParabolicValues {
    /// Scalar payload; errors if the problem carried vector data.
    pub fn scalar(self) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            ParabolicValues::Scalar { values, std_errs, .. } => Ok((values, std_errs)),
            ParabolicValues::Vector { .. } => {
                Err(Error::Unsupported("expected scalar parabolic values".into()))
            }
        }
    }

    /// Vector payload; errors if the problem carried scalar data.
    pub fn vector(self) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
        match self {
            ParabolicValues::Vector { values, std_errs, .. } => Ok((values, std_errs)),
            ParabolicValues::Scalar { .. } => {
                Err(Error::Unsupported("expected vector parabolic values".into()))
            }
        }
    }

    pub fn escaped_frac(&self) -> f64 {
        match self {
            ParabolicValues::Scalar { escaped_frac, .. }
            | ParabolicValues::Vector { escaped_frac, .. } => *escaped_frac,
        }
    }
}

/// Componentwise accumulation shared by the scalar and vector kernels.
trait Sample: Copy + Send + Sync {
    fn zero() -> Self;
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn scale(self, s: f64) -> Self;
    fn sq(self) -> Self;
    fn sqrt_comp(self) -> Self;
}

impl Sample for f64 {
    fn zero() -> Self {
        0.0
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn sub(self, o: Self) -> Self {
        self - o
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
    fn sq(self) -> Self {
        self * self
    }
    fn sqrt_comp(self) -> Self {
        self.max(0.0).sqrt()
    }
}

impl Sample for Vec3 {
    fn zero() -> Self {
        Vec3::ZERO
    }
    fn add(self, o: Self) -> Self {
        self + o
    }
    fn sub(self, o: Self) -> Self {
        self - o
    }
    fn scale(self, s: f64) -> Self {
        self * s
    }
    fn sq(self) -> Self {
        Vec3::new(self.x * self.x, self.y * self.y, self.z * self.z)
    }
    fn sqrt_comp(self) -> Self {
        Vec3::new(self.x.max(0.0).sqrt(), self.y.max(0.0).sqrt(), self.z.max(0.0).sqrt())
    }
}

/// One walk per (point, path) stream id; returns per-point means, standard
/// errors, and the escaped-path count.
#[allow(clippy::too_many_arguments)]
fn run_points<T: Sample>(
    drift: &VectorField,
    sigma: f64,
    t: f64,
    escape: Option<f64>,
    points: &[Vec3],
    cfg: &FlowConfig,
    stream_tag: u64,
    terminal: &(dyn Fn(Vec3) -> Result<T> + Sync),
    source: Option<&(dyn Fn(f64, Vec3) -> Result<T> + Sync)>,
) -> Result<(Vec<T>, Vec<T>, usize)> {
    cfg.validate()?;
    let steps = steps_for(t, cfg.dt)?;
    let dt = cfg.dt;
    let sqrt_dt = dt.sqrt();
    let n_paths = cfg.n_paths;
    let n_total = points.len() * n_paths;

    let samples: Vec<Option<T>> = (0..n_total)
        .into_par_iter()
        .map(|gid| -> Result<Option<T>> {
            let q = gid / n_paths;
            let path = gid % n_paths;
            let mut rng = path_rng(cfg.seed, &[stream_tag, q as u64, path as u64]);
            let mut pos = points[q];
            let mut src_acc = T::zero();
            for j in (0..steps).rev() {
                let drift_here = drift.eval((j + 1) as f64 * dt, pos)?;
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                let c: f64 = rng.sample(StandardNormal);
                let inc = Vec3::new(a, b, c) * sqrt_dt;
                pos = pos + -drift_here * dt + inc * sigma;
                if !pos.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("walk position (point {q}, path {path}, stage {j})"),
                    });
                }
                if let Some(r) = escape {
                    if pos.max_abs() > r {
                        return Ok(None);
                    }
                }
                if let Some(src) = source {
                    src_acc = src_acc.add(src(j as f64 * dt, pos)?);
                }
            }
            Ok(Some(terminal(pos)?.sub(src_acc.scale(dt))))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut values = Vec::with_capacity(points.len());
    let mut std_errs = Vec::with_capacity(points.len());
    let mut escaped = 0usize;
    for q in 0..points.len() {
        let mut sum = T::zero();
        let mut kept = 0usize;
        for s in samples[q * n_paths..(q + 1) * n_paths].iter() {
            match s {
                Some(v) => {
                    sum = sum.add(*v);
                    kept += 1;
                }
                None => escaped += 1,
            }
        }
        if kept < 2 {
            return Err(Error::EscapedPaths { frac: 100.0, limit: 100.0 * ESCAPE_LIMIT });
        }
        let mean = sum.scale(1.0 / kept as f64);
        let mut var = T::zero();
        for s in samples[q * n_paths..(q + 1) * n_paths].iter().flatten() {
            var = var.add(s.sub(mean).sq());
        }
        let se = var.scale(1.0 / (kept as f64 * kept as f64)).sqrt_comp();
        values.push(mean);
        std_errs.push(se);
    }
    let frac = escaped as f64 / n_total as f64;
    if frac > ESCAPE_LIMIT {
        return Err(Error::EscapedPaths { frac: 100.0 * frac, limit: 100.0 * ESCAPE_LIMIT });
    }
    Ok((values, std_errs, escaped))
}

/// Estimate the solution at `eval_points` and time `prob.t_final` by
/// streaming backward walks under the problem's drift. `cfg.n_paths` walks
/// per point; `cfg.dt` must divide the final time. Sources are accumulated
/// at interval left endpoints, so a time-independent source `gamma = c`
/// integrates to `-c t` without quadrature error.
pub fn solve_parabolic(
    prob: &ParabolicProblem,
    eval_points: &[Vec3],
    cfg: &FlowConfig,
) -> Result<ParabolicValues> {
    prob.validate()?;
    if eval_points.is_empty() {
        return Err(Error::InvalidConfig("no evaluation points supplied".into()));
    }
    let escape = prob.escape_radius();
    let n_total = eval_points.len() * cfg.n_paths;
    match &prob.data {
        ParabolicData::Scalar { f0, source } => {
            let terminal = |x: Vec3| f0.eval(0.0, x);
            let src = source.as_ref().map(|s| {
                move |tau: f64, x: Vec3| s.eval(tau, x)
            });
            let (values, std_errs, escaped) = run_points(
                &prob.drift,
                prob.sigma,
                prob.t_final,
                escape,
                eval_points,
                cfg,
                TAG_PARABOLIC,
                &terminal,
                src.as_ref().map(|f| f as &(dyn Fn(f64, Vec3) -> Result<f64> + Sync)),
            )?;
            Ok(ParabolicValues::Scalar {
                values,
                std_errs,
                escaped_frac: escaped as f64 / n_total as f64,
            })
        }
        ParabolicData::Vector { f0, source } => {
            let terminal = |x: Vec3| f0.eval(0.0, x);
            let src = source.as_ref().map(|s| {
                move |tau: f64, x: Vec3| s.eval(tau, x)
            });
            let (values, std_errs, escaped) = run_points(
                &prob.drift,
                prob.sigma,
                prob.t_final,
                escape,
                eval_points,
                cfg,
                TAG_PARABOLIC,
                &terminal,
                src.as_ref().map(|f| f as &(dyn Fn(f64, Vec3) -> Result<Vec3> + Sync)),
            )?;
            Ok(ParabolicValues::Vector {
                values,
                std_errs,
                escaped_frac: escaped as f64 / n_total as f64,
            })
        }
    }
}

/// Both Monte Carlo routes to the weak pairing `<f(t, .), h>` on the
/// periodic grid, with their standard errors.
#[derive(Clone, Copy, Debug)]
pub struct WeakPairing {
    /// Route (a): estimate `f(t, x_i) = E[f0(psi(x_i))]` pointwise, then
    /// quadrature against h.
    pub pointwise_route: f64,
    pub pointwise_se: f64,
    /// Route (b): transport h forward (`E[h(phi(x_i))]`), then quadrature
    /// against f0 — the adjoint estimator, exact for volume-preserving flow.
    pub transport_route: f64,
    pub transport_se: f64,
}

/// Compute `<E[f0 . psi_{t,0}], h>` two independent ways (see
/// [`WeakPairing`]) for equality testing. Needs a periodic domain, scalar
/// data without a source, and a drift that is divergence-free on the grid —
/// the adjoint route silently drops a Jacobian factor otherwise, so a
/// non-solenoidal drift is rejected rather than mis-paired.
pub fn weak_pairing(
    prob: &ParabolicProblem,
    h: &ScalarField,
    cfg: &FlowConfig,
) -> Result<WeakPairing> {
    prob.validate()?;
    let (side, n) = prob.domain.periodic_dims("weak_pairing")?;
    let f0 = match &prob.data {
        ParabolicData::Scalar { f0, source: None } => f0,
        ParabolicData::Scalar { source: Some(_), .. } => {
            return Err(Error::Unsupported(
                "weak pairing tests pure transport; drop the source term".into(),
            ));
        }
        ParabolicData::Vector { .. } => {
            return Err(Error::Unsupported("weak pairing is defined for scalar data".into()));
        }
    };

    // Divergence check at the initial time: the duality needs det = 1 flow.
    let div = crate::fields::divergence(&prob.drift, 0.0, &prob.domain)?;
    let div_sup = div.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if div_sup > 1e-6 {
        return Err(Error::InvalidConfig(format!(
            "weak pairing needs divergence-free drift; measured sup |div g| = {div_sup:.3e}"
        )));
    }

    let cell = (side / n as f64).powi(3);
    let mut nodes = Vec::with_capacity(n * n * n);
    {
        let probe = crate::fields::ScalarGrid::zeros(n, side);
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    nodes.push(probe.node(ix, iy, iz));
                }
            }
        }
    }

    // Route (a): pointwise transport of f0, paired with h.
    let terminal_f0 = |x: Vec3| f0.eval(0.0, x);
    let (fa, sa, _) = run_points(
        &prob.drift,
        prob.sigma,
        prob.t_final,
        None,
        &nodes,
        cfg,
        TAG_PARABOLIC,
        &terminal_f0,
        None,
    )?;
    let mut pointwise = 0.0;
    let mut var_a = 0.0;
    for (i, node) in nodes.iter().enumerate() {
        let w = h.eval(prob.t_final, *node)? * cell;
        pointwise += w * fa[i];
        var_a += (w * sa[i]).powi(2);
    }

    // Route (b): the same pairing through the adjoint — forward transport of
    // h under the same drift (the one-point motions of the two flows share a
    // law; paths are drawn independently here).
    let terminal_h = |x: Vec3| h.eval(prob.t_final, x);
    let (fb, sb, _) = run_forward_points(
        &prob.drift,
        prob.sigma,
        prob.t_final,
        &nodes,
        cfg,
        TAG_TRANSPORT,
        &terminal_h,
    )?;
    let mut transport = 0.0;
    let mut var_b = 0.0;
    for (i, node) in nodes.iter().enumerate() {
        let w = f0.eval(0.0, *node)? * cell;
        transport += w * fb[i];
        var_b += (w * sb[i]).powi(2);
    }

    Ok(WeakPairing {
        pointwise_route: pointwise,
        pointwise_se: var_a.sqrt(),
        transport_route: transport,
        transport_se: var_b.sqrt(),
    })
}

/// Forward-walk analogue of [`run_points`] for the adjoint route: steps
/// `phi(t_{j+1}) = phi(t_j) + u dt - sigma inc` up from 0 and evaluates the
/// test function at the endpoint.
fn run_forward_points(
    drift: &VectorField,
    sigma: f64,
    t: f64,
    points: &[Vec3],
    cfg: &FlowConfig,
    stream_tag: u64,
    terminal: &(dyn Fn(Vec3) -> Result<f64> + Sync),
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    cfg.validate()?;
    let steps = steps_for(t, cfg.dt)?;
    let dt = cfg.dt;
    let sqrt_dt = dt.sqrt();
    let n_paths = cfg.n_paths;

    let samples: Vec<f64> = (0..points.len() * n_paths)
        .into_par_iter()
        .map(|gid| -> Result<f64> {
            let q = gid / n_paths;
            let path = gid % n_paths;
            let mut rng = path_rng(cfg.seed, &[stream_tag, q as u64, path as u64]);
            let mut pos = points[q];
            for j in 0..steps {
                let drift_here = drift.eval(j as f64 * dt, pos)?;
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                let c: f64 = rng.sample(StandardNormal);
                let inc = Vec3::new(a, b, c) * sqrt_dt;
                pos = pos + drift_here * dt - inc * sigma;
                if !pos.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("transport position (point {q}, path {path}, stage {j})"),
                    });
                }
            }
            terminal(pos)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut values = Vec::with_capacity(points.len());
    let mut std_errs = Vec::with_capacity(points.len());
    for q in 0..points.len() {
        let chunk = &samples[q * n_paths..(q + 1) * n_paths];
        let mean = chunk.iter().sum::<f64>() / n_paths as f64;
        let var = chunk.iter().map(|s| (s - mean).powi(2)).sum::<f64>();
        values.push(mean);
        std_errs.push((var / (n_paths as f64 * n_paths as f64)).sqrt());
    }
    Ok((values, std_errs, 0))
}
