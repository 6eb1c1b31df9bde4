//! Backward and forward stochastic flows of a velocity field, their Jacobian
//! (first-variation) processes, and the time-reversal pairing between them.
//!
//! The backward flow anchors at the evaluation time t and steps down to 0:
//!
//! ```text
//! psi(theta_j) = psi(theta_{j+1}) - u(theta_{j+1}, psi(theta_{j+1})) dt + sigma delta_j,
//! ```
//!
//! with `psi(t) = x` and independent `delta_j ~ N(0, dt I)`. Its endpoint
//! `psi_{t,0}(x)` is where the fluid trajectory arriving at x at time t
//! started (for constant drift c it is exactly `x - c t`). The forward flow
//! integrates `dphi = u dt ± sigma dw` up from 0; the noise sign is a backend
//! convention and both conventions pair with the same backward flow under
//! time reversal. Ensembles keep every position on the uniform theta grid
//! and, optionally, the Gaussian increments that drove them — that is what
//! makes reversal pairing, replay oracles, and common-noise refinement
//! studies possible. Expect memory `n_paths * (steps + 1) * 24` bytes; the
//! iterative solvers stream their paths instead of storing them.

use crate::error::{Error, Result};
use crate::fields::VectorField;
use crate::math::{Mat3, Vec3};
use crate::rng::path_rng;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// Abort threshold for the fraction of paths leaving the truncation box.
pub const ESCAPE_LIMIT: f64 = 0.01;

const TAG_BACKWARD: u64 = 0x666c_6f77; // ensemble noise streams, one per direction
const TAG_FORWARD: u64 = 0x666c_6f78;
const TAG_NOISE: u64 = 0x6e6f_6973; // gaussian_increments streams

/// Time orientation of an ensemble: `BackwardPsi` anchors at the final time
/// and integrates down; `ForwardPhi` starts at the initial time and
/// integrates up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowDirection {
    BackwardPsi,
    ForwardPhi,
}

/// Sign with which `sigma * increment` enters each step of the recursion.
/// Backward runs always use `Plus` (the downward stepping form above);
/// forward runs pick the convention of the backend they feed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseSign {
    Minus,
    Plus,
}

impl NoiseSign {
    pub fn factor(self) -> f64 {
        match self {
            NoiseSign::Minus => -1.0,
            NoiseSign::Plus => 1.0,
        }
    }
}

/// Parameters for flow simulation. `sigma` is the noise amplitude (the
/// viscosity is `sigma^2 / 2`); `sigma = 0` degenerates to the deterministic
/// Euler characteristics. `n_paths` paths are run per start point. When
/// `escape_radius` is set, paths leaving the box `|x_i| <= escape_radius`
/// are frozen where they exit and flagged; a run aborts if more than
/// [`ESCAPE_LIMIT`] of its paths are flagged.
#[derive(Clone, Debug)]
pub struct FlowConfig {
    pub sigma: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub store_increments: bool,
    pub escape_radius: Option<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            sigma: 1.0,
            dt: 1e-2,
            n_paths: 1024,
            seed: 0,
            store_increments: true,
            escape_radius: None,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "flow noise amplitude must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("flow dt must be positive, got {}", self.dt)));
        }
        if self.n_paths == 0 {
            return Err(Error::InvalidConfig("flow needs n_paths >= 1".into()));
        }
        if let Some(r) = self.escape_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "escape radius must be positive, got {r}"
                )));
            }
        }
        Ok(())
    }
}

/// A batch of simulated flow paths on the uniform grid `theta_j = t_start +
/// j dt`. Positions are stored per path at every stage; increments (if kept)
/// are indexed by the interval `[theta_j, theta_{j+1}]` they drove,
/// independent of stepping direction, so forward and backward ensembles can
/// share noise interval-by-interval.
#[derive(Clone, Debug)]
pub struct FlowEnsemble {
    t_start: f64,
    t_end: f64,
    dt: f64,
    sigma: f64,
    steps: usize,
    direction: FlowDirection,
    noise_sign: NoiseSign,
    paths_per_start: usize,
    starts: Vec<Vec3>,
    positions: Vec<Vec3>,          // path-major, steps+1 stages per path
    increments: Option<Vec<Vec3>>, // path-major, steps intervals per path
    escaped: Vec<bool>,
}

impl FlowEnsemble {
    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Number of Euler intervals per path (stages are `steps + 1`).
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn direction(&self) -> FlowDirection {
        self.direction
    }

    pub fn noise_sign(&self) -> NoiseSign {
        self.noise_sign
    }

    pub fn n_starts(&self) -> usize {
        self.starts.len()
    }

    pub fn paths_per_start(&self) -> usize {
        self.paths_per_start
    }

    pub fn n_total_paths(&self) -> usize {
        self.starts.len() * self.paths_per_start
    }

    /// Grid time of stage j.
    pub fn theta(&self, j: usize) -> f64 {
        if j == self.steps {
            self.t_end
        } else {
            self.t_start + j as f64 * self.dt
        }
    }

    /// All stages of one path, index j <-> theta_j.
    pub fn path_positions(&self, p: usize) -> &[Vec3] {
        &self.positions[p * (self.steps + 1)..(p + 1) * (self.steps + 1)]
    }

    pub fn position(&self, p: usize, stage: usize) -> Vec3 {
        self.path_positions(p)[stage]
    }

    /// The start point this path was launched from.
    pub fn start_of(&self, p: usize) -> Vec3 {
        self.starts[p / self.paths_per_start]
    }

    /// The far end of the integration: stage 0 for backward paths, the last
    /// stage for forward paths.
    pub fn endpoint(&self, p: usize) -> Vec3 {
        match self.direction {
            FlowDirection::BackwardPsi => self.position(p, 0),
            FlowDirection::ForwardPhi => self.position(p, self.steps),
        }
    }

    /// Stored increments of one path, interval-indexed.
    pub fn path_increments(&self, p: usize) -> Result<&[Vec3]> {
        let incs = self.increments.as_ref().ok_or(Error::MissingIncrements)?;
        Ok(&incs[p * self.steps..(p + 1) * self.steps])
    }

    pub fn escaped(&self, p: usize) -> bool {
        self.escaped[p]
    }

    pub fn escaped_count(&self) -> usize {
        self.escaped.iter().filter(|&&e| e).count()
    }

    pub fn escaped_frac(&self) -> f64 {
        self.escaped_count() as f64 / self.n_total_paths() as f64
    }

    /// Dump every stage of every path as CSV rows `path_id,step,theta,x,y,z`.
    pub fn write_paths_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "path_id,step,theta,x,y,z")?;
        for p in 0..self.n_total_paths() {
            for j in 0..=self.steps {
                let v = self.position(p, j);
                writeln!(out, "{p},{j},{},{},{},{}", self.theta(j), v.x, v.y, v.z)?;
            }
        }
        Ok(())
    }
}

/// Per-path derivative of the flow map with respect to its start point,
/// stage-aligned with the ensemble that produced it.
#[derive(Clone, Debug)]
pub struct JacobianPath {
    /// Index of the ensemble path this was integrated along.
    pub path: usize,
    /// Stage j holds eta(theta_j); identity at the flow's anchor stage.
    pub etas: Vec<Mat3>,
}

pub(crate) fn steps_for(span: f64, dt: f64) -> Result<usize> {
    if !(span >= 0.0 && span.is_finite()) {
        return Err(Error::InvalidConfig(format!("flow horizon must be >= 0, got {span}")));
    }
    let s = (span / dt).round();
    if (s * dt - span).abs() > 1e-9 * span.abs().max(1.0) {
        return Err(Error::InvalidConfig(format!(
            "dt = {dt} must evenly divide the flow horizon {span}"
        )));
    }
    Ok(s as usize)
}

struct PathRun {
    positions: Vec<Vec3>,
    incs: Option<Vec<Vec3>>,
    escaped: bool,
}

fn simulate(
    u: &VectorField,
    t: f64,
    starts: &[Vec3],
    cfg: &FlowConfig,
    direction: FlowDirection,
    noise_sign: NoiseSign,
    given: Option<&[Vec3]>,
) -> Result<FlowEnsemble> {
    cfg.validate()?;
    if starts.is_empty() {
        return Err(Error::InvalidConfig("flow needs at least one start point".into()));
    }
    let steps = steps_for(t, cfg.dt)?;
    let n_total = starts.len() * cfg.n_paths;
    if let Some(g) = given {
        if g.len() != n_total * steps {
            return Err(Error::InvalidConfig(format!(
                "noise table has {} increments, expected {} paths x {} steps",
                g.len(),
                n_total,
                steps
            )));
        }
    }
    let dt = cfg.dt;
    let sqrt_dt = dt.sqrt();
    let noise_scale = match direction {
        FlowDirection::BackwardPsi => cfg.sigma,
        FlowDirection::ForwardPhi => noise_sign.factor() * cfg.sigma,
    };
    let tag = match direction {
        FlowDirection::BackwardPsi => TAG_BACKWARD,
        FlowDirection::ForwardPhi => TAG_FORWARD,
    };

    let runs: Vec<PathRun> = (0..n_total)
        .into_par_iter()
        .map(|p| -> Result<PathRun> {
            let incs: Vec<Vec3> = match given {
                Some(g) => g[p * steps..(p + 1) * steps].to_vec(),
                None => {
                    let mut rng = path_rng(cfg.seed, &[tag, p as u64]);
                    (0..steps)
                        .map(|_| {
                            let a: f64 = rng.sample(StandardNormal);
                            let b: f64 = rng.sample(StandardNormal);
                            let c: f64 = rng.sample(StandardNormal);
                            Vec3::new(a, b, c) * sqrt_dt
                        })
                        .collect()
                }
            };
            let start = starts[p / cfg.n_paths];
            let mut positions = vec![Vec3::ZERO; steps + 1];
            let mut escaped = false;
            match direction {
                FlowDirection::BackwardPsi => {
                    positions[steps] = start;
                    for j in (0..steps).rev() {
                        let here = positions[j + 1];
                        if escaped {
                            positions[j] = here;
                            continue;
                        }
                        let drift = -u.eval(j as f64 * dt + dt, here)?;
                        let next = here + drift * dt + incs[j] * noise_scale;
                        if !next.is_finite() {
                            return Err(Error::NonFinite {
                                context: format!("flow position (path {p}, stage {j})"),
                            });
                        }
                        if let Some(r) = cfg.escape_radius {
                            if next.max_abs() > r {
                                escaped = true;
                            }
                        }
                        positions[j] = next;
                    }
                }
                FlowDirection::ForwardPhi => {
                    positions[0] = start;
                    for j in 0..steps {
                        let here = positions[j];
                        if escaped {
                            positions[j + 1] = here;
                            continue;
                        }
                        let drift = u.eval(j as f64 * dt, here)?;
                        let next = here + drift * dt + incs[j] * noise_scale;
                        if !next.is_finite() {
                            return Err(Error::NonFinite {
                                context: format!("flow position (path {p}, stage {})", j + 1),
                            });
                        }
                        if let Some(r) = cfg.escape_radius {
                            if next.max_abs() > r {
                                escaped = true;
                            }
                        }
                        positions[j + 1] = next;
                    }
                }
            }
            Ok(PathRun {
                positions,
                incs: cfg.store_increments.then_some(incs),
                escaped,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut positions = Vec::with_capacity(n_total * (steps + 1));
    let mut increments = cfg.store_increments.then(|| Vec::with_capacity(n_total * steps));
    let mut escaped = Vec::with_capacity(n_total);
    for run in runs {
        positions.extend_from_slice(&run.positions);
        if let (Some(buf), Some(incs)) = (increments.as_mut(), run.incs) {
            buf.extend_from_slice(&incs);
        }
        escaped.push(run.escaped);
    }
    let frac = escaped.iter().filter(|&&e| e).count() as f64 / n_total as f64;
    if frac > ESCAPE_LIMIT {
        return Err(Error::EscapedPaths { frac: 100.0 * frac, limit: 100.0 * ESCAPE_LIMIT });
    }
    Ok(FlowEnsemble {
        t_start: 0.0,
        t_end: t,
        dt,
        sigma: cfg.sigma,
        steps,
        direction,
        noise_sign: match direction {
            FlowDirection::BackwardPsi => NoiseSign::Plus,
            FlowDirection::ForwardPhi => noise_sign,
        },
        paths_per_start: cfg.n_paths,
        starts: starts.to_vec(),
        positions,
        increments,
        escaped,
    })
}

/// Run `cfg.n_paths` backward paths from each anchor `psi(t) = x` down to
/// time 0, drawing fresh noise from `cfg.seed`.
pub fn simulate_backward_flow(
    u: &VectorField,
    t: f64,
    x_batch: &[Vec3],
    cfg: &FlowConfig,
) -> Result<FlowEnsemble> {
    simulate(u, t, x_batch, cfg, FlowDirection::BackwardPsi, NoiseSign::Plus, None)
}

/// Backward flow driven by a caller-supplied increment table (layout as in
/// [`gaussian_increments`]): the common-noise entry point for stability and
/// refinement studies.
pub fn simulate_backward_flow_with_noise(
    u: &VectorField,
    t: f64,
    x_batch: &[Vec3],
    cfg: &FlowConfig,
    increments: &[Vec3],
) -> Result<FlowEnsemble> {
    simulate(u, t, x_batch, cfg, FlowDirection::BackwardPsi, NoiseSign::Plus, Some(increments))
}

/// Run `cfg.n_paths` forward paths `phi(0) = y` up to time t. The noise sign
/// selects the convention `dphi = u dt - sigma dw` (`Minus`) or `+ sigma dw`
/// (`Plus`); both are accepted by the reversal pairing.
pub fn simulate_forward_flow(
    u: &VectorField,
    t: f64,
    y_batch: &[Vec3],
    cfg: &FlowConfig,
    noise_sign: NoiseSign,
) -> Result<FlowEnsemble> {
    simulate(u, t, y_batch, cfg, FlowDirection::ForwardPhi, noise_sign, None)
}

/// Forward flow driven by a caller-supplied increment table.
pub fn simulate_forward_flow_with_noise(
    u: &VectorField,
    t: f64,
    y_batch: &[Vec3],
    cfg: &FlowConfig,
    noise_sign: NoiseSign,
    increments: &[Vec3],
) -> Result<FlowEnsemble> {
    simulate(u, t, y_batch, cfg, FlowDirection::ForwardPhi, noise_sign, Some(increments))
}

/// Re-simulate an ensemble in the opposite time direction from its endpoints,
/// driven by the reversed noise, so that each returned path retraces its
/// source path up to the drift-evaluation mismatch of one Euler step.
///
/// A forward step `x_{j+1} = x_j + u(t_j, x_j) dt + s sigma delta_j` and the
/// downward step over the same interval cancel exactly when the latter is
/// driven by `-s delta_j`; what remains is `[u(t_{j+1}, .) - u(t_j, .)] dt`
/// per interval, which vanishes at first order in dt. Inverting a backward
/// ensemble returns a forward one in the `- sigma dw` convention driven by
/// the same increments. The drift must be the one the source ensemble used.
pub fn invert_by_time_reversal(u: &VectorField, ens: &FlowEnsemble) -> Result<FlowEnsemble> {
    let incs = ens.increments.as_ref().ok_or(Error::MissingIncrements)?;
    if ens.escaped_count() > 0 {
        return Err(Error::Unsupported(
            "cannot time-reverse an ensemble with escaped (frozen) paths".into(),
        ));
    }
    let starts: Vec<Vec3> = (0..ens.n_total_paths()).map(|p| ens.endpoint(p)).collect();
    let cfg = FlowConfig {
        sigma: ens.sigma,
        dt: ens.dt,
        n_paths: 1,
        seed: 0,
        store_increments: true,
        escape_radius: None,
    };
    let span = ens.t_end - ens.t_start;
    match ens.direction {
        FlowDirection::ForwardPhi => {
            let f = -ens.noise_sign.factor();
            let rev: Vec<Vec3> = incs.iter().map(|&d| d * f).collect();
            simulate(u, span, &starts, &cfg, FlowDirection::BackwardPsi, NoiseSign::Plus, Some(&rev))
        }
        FlowDirection::BackwardPsi => {
            simulate(u, span, &starts, &cfg, FlowDirection::ForwardPhi, NoiseSign::Minus, Some(incs))
        }
    }
}

/// Integrate the derivative of the flow map with respect to its start point
/// along every stored path, by the explicit Euler recursion that linearizes
/// the position update: down from identity at the anchor for backward
/// ensembles (`eta_j = eta_{j+1} - grad u(theta_{j+1}, psi_{j+1}) eta_{j+1} dt`),
/// up from identity for forward ones. For linear drift u = A x this yields
/// `eta(theta) = e^{-A (t - theta)}` backward and `e^{A theta}` forward. No
/// renormalization is applied, so the unit-determinant property of
/// divergence-free drifts stays a measurable diagnostic.
pub fn simulate_jacobian(u: &VectorField, ens: &FlowEnsemble) -> Result<Vec<JacobianPath>> {
    let steps = ens.steps;
    let dt = ens.dt;
    (0..ens.n_total_paths())
        .into_par_iter()
        .map(|p| -> Result<JacobianPath> {
            let pos = ens.path_positions(p);
            let mut etas = vec![Mat3::IDENTITY; steps + 1];
            match ens.direction {
                FlowDirection::BackwardPsi => {
                    for j in (0..steps).rev() {
                        let g = u.gradient(ens.t_start + (j + 1) as f64 * dt, pos[j + 1])?;
                        let e = etas[j + 1];
                        let next = e - g.matmul(&e) * dt;
                        if !next.is_finite() {
                            return Err(Error::NonFinite {
                                context: format!("jacobian (path {p}, stage {j})"),
                            });
                        }
                        etas[j] = next;
                    }
                }
                FlowDirection::ForwardPhi => {
                    for j in 0..steps {
                        let g = u.gradient(ens.t_start + j as f64 * dt, pos[j])?;
                        let e = etas[j];
                        let next = e + g.matmul(&e) * dt;
                        if !next.is_finite() {
                            return Err(Error::NonFinite {
                                context: format!("jacobian (path {p}, stage {})", j + 1),
                            });
                        }
                        etas[j + 1] = next;
                    }
                }
            }
            Ok(JacobianPath { path: p, etas })
        })
        .collect()
}

/// Ito sum of the Jacobian against the driving increments over `[tau, t]`:
/// `sum_j eta(theta_j) delta_j` over the intervals contained in the range.
/// Each `eta(theta_j)` is computable before `delta_j` is applied in the
/// downward run, so the sum is centred: its ensemble mean vanishes. This is
/// the raw weight of derivative estimators and therefore requires noise
/// (`sigma > 0`) and stored increments, along a backward ensemble.
pub fn stochastic_integral_eta(
    ens: &FlowEnsemble,
    jac: &JacobianPath,
    tau: f64,
) -> Result<Vec3> {
    if ens.direction != FlowDirection::BackwardPsi {
        return Err(Error::Unsupported(
            "the Ito weight integral runs along backward ensembles".into(),
        ));
    }
    if ens.sigma <= 0.0 {
        return Err(Error::ZeroNoiseGradient { sigma: ens.sigma });
    }
    let incs = ens.path_increments(jac.path)?;
    if jac.etas.len() != ens.steps + 1 {
        return Err(Error::InvalidConfig(format!(
            "jacobian path has {} stages, ensemble paths have {}",
            jac.etas.len(),
            ens.steps + 1
        )));
    }
    let span = ens.t_end - ens.t_start;
    let slack = 1e-9 * span.abs().max(1.0);
    if tau < ens.t_start - slack || tau > ens.t_end + slack {
        return Err(Error::OutOfTimeRange { t: tau, lo: ens.t_start, hi: ens.t_end });
    }
    let j_lo = (((tau - ens.t_start) / ens.dt) - 1e-9).ceil().max(0.0) as usize;
    let mut acc = Vec3::ZERO;
    for j in j_lo..ens.steps {
        acc += jac.etas[j].mul_vec(incs[j]);
    }
    Ok(acc)
}

/// Draw a standard increment table `delta ~ N(0, dt I)`, path-major with
/// `steps` intervals per path: entry `[p * steps + j]` drives the interval
/// `[theta_j, theta_{j+1}]`. Feed it to the `_with_noise` constructors to run
/// several ensembles (different drifts, starts, or directions) against the
/// same Brownian motion.
pub fn gaussian_increments(dt: f64, steps: usize, n_paths: usize, seed: u64) -> Vec<Vec3> {
    let sqrt_dt = dt.sqrt();
    let mut out = Vec::with_capacity(n_paths * steps);
    for p in 0..n_paths {
        let mut rng = path_rng(seed, &[TAG_NOISE, p as u64]);
        for _ in 0..steps {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let c: f64 = rng.sample(StandardNormal);
            out.push(Vec3::new(a, b, c) * sqrt_dt);
        }
    }
    out
}

/// Aggregate fine increments into coarse ones by summing groups of `factor`,
/// so every level of a dt-refinement study sees the same Brownian path.
/// Layouts are path-major as in [`gaussian_increments`]; `steps_fine` must be
/// divisible by `factor`.
pub fn coarsen_increments(fine: &[Vec3], steps_fine: usize, factor: usize) -> Vec<Vec3> {
    assert!(factor >= 1 && steps_fine % factor == 0, "factor must divide steps_fine");
    assert!(fine.len() % steps_fine == 0, "table length must be a multiple of steps_fine");
    let n_paths = fine.len() / steps_fine;
    let steps_coarse = steps_fine / factor;
    let mut out = Vec::with_capacity(n_paths * steps_coarse);
    for p in 0..n_paths {
        for k in 0..steps_coarse {
            let mut s = Vec3::ZERO;
            for i in 0..factor {
                s += fine[p * steps_fine + k * factor + i];
            }
            out.push(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::AnalyticVector;
    use crate::math::expm;

    fn cfg(sigma: f64, dt: f64, n_paths: usize) -> FlowConfig {
        FlowConfig { sigma, dt, n_paths, seed: 7, store_increments: true, escape_radius: None }
    }

    #[test]
    fn still_flow_keeps_paths_at_start() {
        let u = VectorField::Analytic(AnalyticVector::Zero);
        let xs = [Vec3::new(0.3, -1.2, 2.0), Vec3::new(5.0, 0.0, -0.1)];
        let ens = simulate_backward_flow(&u, 1.0, &xs, &cfg(0.0, 0.1, 3)).unwrap();
        for p in 0..ens.n_total_paths() {
            for j in 0..=ens.steps() {
                assert_eq!(ens.position(p, j), ens.start_of(p));
            }
        }
    }

    #[test]
    fn constant_drift_transports_back_linearly() {
        let c = Vec3::new(0.4, -1.1, 0.25);
        let u = VectorField::Analytic(AnalyticVector::Constant(c));
        let x = Vec3::new(1.0, 2.0, -0.5);
        let t = 1.25;
        let ens = simulate_backward_flow(&u, t, &[x], &cfg(0.0, t / 100.0, 1)).unwrap();
        let want = x - c * t;
        assert!((ens.endpoint(0) - want).norm() < 1e-13);
        // Forward mirror: phi(t) = y + c t.
        let fwd = simulate_forward_flow(&u, t, &[x], &cfg(0.0, t / 100.0, 1), NoiseSign::Minus)
            .unwrap();
        assert!((fwd.endpoint(0) - (x + c * t)).norm() < 1e-13);
    }

    #[test]
    fn stored_increments_replay_the_path_bitwise() {
        let c = Vec3::new(-0.3, 0.8, 0.1);
        let u = VectorField::Analytic(AnalyticVector::Constant(c));
        let x = Vec3::new(0.2, 0.4, -1.0);
        let (t, dt, sigma) = (1.0, 1.0 / 64.0, 0.8);
        let ens = simulate_backward_flow(&u, t, &[x], &cfg(sigma, dt, 2)).unwrap();
        for p in 0..2 {
            let incs = ens.path_increments(p).unwrap();
            let mut y = x;
            for j in (0..ens.steps()).rev() {
                y = y + -c * dt + incs[j] * sigma;
                assert_eq!(y, ens.position(p, j), "replay diverged at stage {j}");
            }
            // Closed form: the drift telescopes and the noise sums.
            let total: Vec3 = incs.iter().fold(Vec3::ZERO, |a, &d| a + d);
            assert!((y - (x - c * t + total * sigma)).norm() < 1e-12);
        }
    }

    #[test]
    fn forward_replay_respects_the_noise_sign() {
        let c = Vec3::new(0.5, 0.0, -0.2);
        let u = VectorField::Analytic(AnalyticVector::Constant(c));
        let y0 = Vec3::new(-0.6, 1.1, 0.0);
        let (t, dt, sigma) = (0.5, 1.0 / 32.0, 1.3);
        for sign in [NoiseSign::Minus, NoiseSign::Plus] {
            let ens = simulate_forward_flow(&u, t, &[y0], &cfg(sigma, dt, 1), sign).unwrap();
            let incs = ens.path_increments(0).unwrap();
            let scale = sign.factor() * sigma;
            let mut y = y0;
            for (j, &d) in incs.iter().enumerate() {
                y = y + c * dt + d * scale;
                assert_eq!(y, ens.position(0, j + 1));
            }
        }
    }

    #[test]
    fn reversal_returns_starts_to_roundoff_for_exact_drifts() {
        // Noise cancels increment-by-increment; constant drift steps are
        // position-independent. What is left is pure addition roundoff.
        for u in [
            VectorField::Analytic(AnalyticVector::Zero),
            VectorField::Analytic(AnalyticVector::Constant(Vec3::new(0.7, -0.4, 0.2))),
        ] {
            let ys = [Vec3::new(0.1, 0.2, 0.3), Vec3::new(-1.0, 0.5, 2.0)];
            for sign in [NoiseSign::Minus, NoiseSign::Plus] {
                let fwd = simulate_forward_flow(&u, 1.0, &ys, &cfg(0.9, 1.0 / 64.0, 4), sign)
                    .unwrap();
                let back = invert_by_time_reversal(&u, &fwd).unwrap();
                assert_eq!(back.direction(), FlowDirection::BackwardPsi);
                for p in 0..fwd.n_total_paths() {
                    let err = (back.endpoint(p) - fwd.start_of(p)).norm();
                    assert!(err < 1e-12, "path {p} roundtrip error {err}");
                }
            }
        }
    }

    #[test]
    fn reversal_roundtrip_error_shrinks_linearly_in_dt() {
        // sigma = 0 keeps the study deterministic: the error is purely the
        // drift-evaluation mismatch between the two stepping directions.
        let u = VectorField::Analytic(AnalyticVector::beltrami_unit(0.0));
        let starts = [Vec3::new(0.5, 1.0, 2.0), Vec3::new(2.2, 0.1, 4.0), Vec3::new(3.0, 3.0, 1.0)];
        let t = 1.0;
        let err_at = |dt: f64| -> f64 {
            let fwd = simulate_forward_flow(&u, t, &starts, &cfg(0.0, dt, 1), NoiseSign::Minus)
                .unwrap();
            let back = invert_by_time_reversal(&u, &fwd).unwrap();
            (0..starts.len())
                .map(|p| (back.endpoint(p) - fwd.start_of(p)).norm())
                .fold(0.0, f64::max)
        };
        let (e16, e64) = (err_at(t / 16.0), err_at(t / 64.0));
        let slope = (e16 / e64).ln() / 4.0f64.ln();
        assert!(
            (slope - 1.0).abs() < 0.35,
            "roundtrip error slope {slope} (errors {e16:.3e} -> {e64:.3e})"
        );
    }

    #[test]
    fn backward_then_forward_roundtrip_is_first_order_with_noise() {
        // Paired reversed noise cancels the diffusion; the remaining drift
        // mismatch telescopes, so the strong error is O(dt) even with noise.
        let u = VectorField::Analytic(AnalyticVector::beltrami_unit(0.0));
        let x = Vec3::new(1.3, 2.0, 0.7);
        let (t, n_paths) = (0.5, 48);
        let fine_steps = 128;
        let fine = gaussian_increments(t / fine_steps as f64, fine_steps, n_paths, 11);
        let err_at = |factor: usize| -> f64 {
            let steps = fine_steps / factor;
            let dt = t / steps as f64;
            let noise = coarsen_increments(&fine, fine_steps, factor);
            let back = simulate_backward_flow_with_noise(
                &u,
                t,
                &[x],
                &cfg(0.5, dt, n_paths),
                &noise,
            )
            .unwrap();
            let fwd = invert_by_time_reversal(&u, &back).unwrap();
            (0..n_paths).map(|p| (fwd.endpoint(p) - x).norm()).sum::<f64>() / n_paths as f64
        };
        let (coarse, fine_err) = (err_at(8), err_at(1));
        let slope = (coarse / fine_err).ln() / 8.0f64.ln();
        assert!(
            (slope - 1.0).abs() < 0.4,
            "paired roundtrip slope {slope} (errors {coarse:.3e} -> {fine_err:.3e})"
        );
    }

    #[test]
    fn jacobian_is_identity_for_uniform_drift() {
        let u = VectorField::Analytic(AnalyticVector::Constant(Vec3::new(1.0, -2.0, 0.5)));
        let ens = simulate_backward_flow(&u, 1.0, &[Vec3::ZERO], &cfg(0.7, 0.05, 3)).unwrap();
        for jac in simulate_jacobian(&u, &ens).unwrap() {
            for e in &jac.etas {
                assert_eq!(*e, Mat3::IDENTITY);
            }
        }
    }

    #[test]
    fn jacobian_matches_matrix_exponential_for_linear_drift() {
        // For u = A x the variation recursion is deterministic and its exact
        // limits are e^{-A(t-theta)} (backward) and e^{A theta} (forward).
        let a = Mat3::from_rows(
            Vec3::new(0.2, 1.0, 0.0),
            Vec3::new(-0.8, -0.1, 0.3),
            Vec3::new(0.0, 0.5, -0.1),
        );
        let u = VectorField::Analytic(AnalyticVector::Affine { a, b: Vec3::new(0.1, 0.0, -0.2) });
        let t = 1.0;
        let max_err = |dt: f64| -> f64 {
            let ens = simulate_backward_flow(&u, t, &[Vec3::new(0.4, 0.0, 1.0)], &cfg(0.4, dt, 1))
                .unwrap();
            let jac = &simulate_jacobian(&u, &ens).unwrap()[0];
            (0..=ens.steps())
                .map(|j| {
                    let want = expm(&(a * -(t - ens.theta(j))));
                    (jac.etas[j] - want).max_abs()
                })
                .fold(0.0, f64::max)
        };
        let (e200, e400) = (max_err(t / 200.0), max_err(t / 400.0));
        assert!(e200 < 0.02, "jacobian error {e200} at dt = 1/200");
        let ratio = e200 / e400;
        assert!((1.6..=2.5).contains(&ratio), "halving dt gave error ratio {ratio}");

        let fwd = simulate_forward_flow(
            &u,
            t,
            &[Vec3::new(0.4, 0.0, 1.0)],
            &cfg(0.4, t / 200.0, 1),
            NoiseSign::Minus,
        )
        .unwrap();
        let jf = &simulate_jacobian(&u, &fwd).unwrap()[0];
        let ef = (0..=fwd.steps())
            .map(|j| (jf.etas[j] - expm(&(a * fwd.theta(j)))).max_abs())
            .fold(0.0, f64::max);
        assert!(ef < 0.02, "forward jacobian error {ef}");
    }

    #[test]
    fn jacobian_determinant_stays_near_one_for_divergence_free_drift() {
        let u = VectorField::Analytic(AnalyticVector::beltrami_unit(0.0));
        let x = Vec3::new(2.0, 1.0, 0.5);
        let (t, n_paths, fine_steps) = (0.5, 24, 100);
        let fine = gaussian_increments(t / fine_steps as f64, fine_steps, n_paths, 3);
        let max_dev = |factor: usize| -> f64 {
            let steps = fine_steps / factor;
            let noise = coarsen_increments(&fine, fine_steps, factor);
            let ens = simulate_backward_flow_with_noise(
                &u,
                t,
                &[x],
                &cfg(0.6, t / steps as f64, n_paths),
                &noise,
            )
            .unwrap();
            simulate_jacobian(&u, &ens)
                .unwrap()
                .iter()
                .flat_map(|j| j.etas.iter())
                .map(|e| (e.det() - 1.0).abs())
                .fold(0.0, f64::max)
        };
        let (coarse, fine_dev) = (max_dev(2), max_dev(1));
        assert!(fine_dev < 0.05, "det eta deviated by {fine_dev} at dt = 1/200");
        let ratio = coarse / fine_dev;
        assert!((1.3..=3.0).contains(&ratio), "halving dt gave det drift ratio {ratio}");
    }

    #[test]
    fn ito_sum_with_identity_jacobian_telescopes() {
        let u = VectorField::Analytic(AnalyticVector::Zero);
        let t = 1.0;
        let ens = simulate_backward_flow(&u, t, &[Vec3::ZERO], &cfg(0.7, t / 32.0, 2)).unwrap();
        let jacs = simulate_jacobian(&u, &ens).unwrap();
        for jac in &jacs {
            let incs = ens.path_increments(jac.path).unwrap();
            let full = stochastic_integral_eta(&ens, jac, 0.0).unwrap();
            let manual: Vec3 = incs.iter().fold(Vec3::ZERO, |a, &d| a + d);
            assert_eq!(full, manual);
            // Half interval: only the upper 16 increments contribute.
            let half = stochastic_integral_eta(&ens, jac, t / 2.0).unwrap();
            let manual_half: Vec3 = incs[16..].iter().fold(Vec3::ZERO, |a, &d| a + d);
            assert_eq!(half, manual_half);
            assert_eq!(stochastic_integral_eta(&ens, jac, t).unwrap(), Vec3::ZERO);
        }
    }

    #[test]
    fn ito_sum_is_centred_over_the_ensemble() {
        let u = VectorField::Analytic(AnalyticVector::beltrami_unit(0.0));
        let n = 4096;
        let ens = simulate_backward_flow(
            &u,
            0.5,
            &[Vec3::new(1.0, 2.0, 3.0)],
            &cfg(0.8, 1.0 / 64.0, n),
        )
        .unwrap();
        let jacs = simulate_jacobian(&u, &ens).unwrap();
        let vals: Vec<Vec3> =
            jacs.iter().map(|j| stochastic_integral_eta(&ens, j, 0.0).unwrap()).collect();
        for k in 0..3 {
            let mean = vals.iter().map(|v| v.comp(k)).sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v.comp(k) - mean).powi(2)).sum::<f64>() / n as f64;
            let se = (var / n as f64).sqrt();
            assert!(
                mean.abs() <= 3.5 * se + 1e-12,
                "component {k}: mean {mean:.3e} vs std err {se:.3e}"
            );
        }
    }

    #[test]
    fn noise_free_ensembles_reject_the_ito_weight() {
        let u = VectorField::Analytic(AnalyticVector::Zero);
        let ens = simulate_backward_flow(&u, 1.0, &[Vec3::ZERO], &cfg(0.0, 0.1, 1)).unwrap();
        let jac = &simulate_jacobian(&u, &ens).unwrap()[0];
        assert!(matches!(
            stochastic_integral_eta(&ens, jac, 0.0),
            Err(Error::ZeroNoiseGradient { .. })
        ));
    }

    #[test]
    fn missing_increments_are_reported() {
        let u = VectorField::Analytic(AnalyticVector::Zero);
        let mut c = cfg(0.5, 0.1, 1);
        c.store_increments = false;
        let ens = simulate_backward_flow(&u, 1.0, &[Vec3::ZERO], &c).unwrap();
        assert!(matches!(invert_by_time_reversal(&u, &ens), Err(Error::MissingIncrements)));
        let jac = &simulate_jacobian(&u, &ens).unwrap()[0];
        assert!(matches!(
            stochastic_integral_eta(&ens, jac, 0.0),
            Err(Error::MissingIncrements)
        ));
    }

    #[test]
    fn common_noise_paths_separate_at_most_exponentially() {
        // Two starts under the same Brownian motion: the gap obeys the
        // Gronwall bound |x-y| e^{Lt} with L the measured gradient sup norm.
        let src = AnalyticVector::beltrami_unit(0.0);
        let u = VectorField::Analytic(src.clone());
        let (t, dt, n_paths) = (0.8, 1.0 / 80.0, 128);
        let steps = 64;
        let noise = gaussian_increments(dt, steps, n_paths, 5);
        let x = Vec3::new(1.0, 2.5, 0.3);
        let y = x + Vec3::new(0.05, 0.0, 0.0);
        let run = |start: Vec3| {
            simulate_backward_flow_with_noise(&u, t, &[start], &cfg(0.5, dt, n_paths), &noise)
                .unwrap()
        };
        let (ex, ey) = (run(x), run(y));
        let mean_gap = (0..n_paths)
            .map(|p| (ex.endpoint(p) - ey.endpoint(p)).norm())
            .sum::<f64>()
            / n_paths as f64;
        let mut lip = 0.0f64;
        let h = 2.0 * std::f64::consts::PI / 16.0;
        for ix in 0..16 {
            for iy in 0..16 {
                for iz in 0..16 {
                    let p = Vec3::new(ix as f64, iy as f64, iz as f64) * h;
                    lip = lip.max(src.gradient(0.0, p).frobenius());
                }
            }
        }
        let bound = (y - x).norm() * (lip * t).exp();
        assert!(mean_gap <= bound, "mean gap {mean_gap} exceeds Gronwall bound {bound}");
    }

    #[test]
    fn drift_perturbation_grows_at_most_linearly_with_the_gap() {
        // Same noise, drifts g and g1: E|psi^g - psi^g1| <= t sup|g-g1| e^{Lt}.
        let (t, dt, n_paths) = (0.6, 1.0 / 60.0, 96);
        let noise = gaussian_increments(dt, 36, n_paths, 9);
        let x = Vec3::new(0.7, 1.2, 2.0);
        let run = |f: &VectorField| {
            simulate_backward_flow_with_noise(f, t, &[x], &cfg(0.4, dt, n_paths), &noise).unwrap()
        };

        // Zero vs constant drift: the gap is exactly t |c| (L = 0).
        let c = Vec3::new(0.3, -0.2, 0.1);
        let e0 = run(&VectorField::Analytic(AnalyticVector::Zero));
        let ec = run(&VectorField::Analytic(AnalyticVector::Constant(c)));
        let gap0 = (0..n_paths)
            .map(|p| (e0.endpoint(p) - ec.endpoint(p)).norm())
            .sum::<f64>()
            / n_paths as f64;
        assert!((gap0 - t * c.norm()).abs() < 1e-12 * (1.0 + t * c.norm()));

        // Unit vs slightly reweighted first Beltrami coefficient:
        // the drifts differ by 0.02 (sin z, cos z, 0), sup gap 0.02.
        let g = AnalyticVector::beltrami_unit(0.0);
        let g1 = AnalyticVector::Beltrami { a: 1.02, b: 1.0, c: 1.0, nu: 0.0 };
        let eg = run(&VectorField::Analytic(g));
        let eg1 = run(&VectorField::Analytic(g1.clone()));
        let gap = (0..n_paths)
            .map(|p| (eg.endpoint(p) - eg1.endpoint(p)).norm())
            .sum::<f64>()
            / n_paths as f64;
        let mut lip = 0.0f64;
        let h = 2.0 * std::f64::consts::PI / 16.0;
        for ix in 0..16 {
            for iy in 0..16 {
                for iz in 0..16 {
                    let p = Vec3::new(ix as f64, iy as f64, iz as f64) * h;
                    lip = lip.max(g1.gradient(0.0, p).frobenius());
                }
            }
        }
        let bound = t * 0.02 * (lip * t).exp();
        assert!(gap <= bound, "drift gap {gap} exceeds bound {bound}");
    }

    #[test]
    fn same_seed_reproduces_ensembles_bitwise() {
        let u = VectorField::Analytic(AnalyticVector::beltrami_unit(0.1));
        let xs = [Vec3::new(0.4, 0.5, 0.6)];
        let a = simulate_backward_flow(&u, 0.5, &xs, &cfg(0.7, 0.05, 8)).unwrap();
        let b = simulate_backward_flow(&u, 0.5, &xs, &cfg(0.7, 0.05, 8)).unwrap();
        assert_eq!(a.path_positions(3), b.path_positions(3));
        let mut other = cfg(0.7, 0.05, 8);
        other.seed = 8;
        let c = simulate_backward_flow(&u, 0.5, &xs, &other).unwrap();
        assert_ne!(a.path_positions(3), c.path_positions(3));
    }

    #[test]
    fn escaped_paths_are_flagged_frozen_and_bounded() {
        // u = (x, 0, 0) pushes only starts away from the x = 0 plane, so the
        // single boundary start escapes and the bulk stays put.
        let a = Mat3::from_rows(Vec3::new(1.0, 0.0, 0.0), Vec3::ZERO, Vec3::ZERO);
        let u = VectorField::Analytic(AnalyticVector::Affine { a, b: Vec3::ZERO });
        let mut starts = vec![Vec3::new(1.9, 0.0, 0.0)];
        starts.extend((0..127).map(|_| Vec3::ZERO));
        let mut c = cfg(0.0, 0.05, 1);
        c.escape_radius = Some(2.0);
        let ens = simulate_forward_flow(&u, 1.0, &starts, &c, NoiseSign::Minus).unwrap();
        assert_eq!(ens.escaped_count(), 1);
        assert!(ens.escaped(0) && !ens.escaped(1));
        let s = ens.steps();
        assert_eq!(ens.position(0, s), ens.position(0, s - 1), "escaped path not frozen");
        assert!(ens.position(0, s).x > 2.0);

        // All paths escaping trips the abort threshold.
        let err = simulate_forward_flow(&u, 1.0, &[Vec3::new(1.9, 0.0, 0.0)], &c, NoiseSign::Minus);
        assert!(matches!(err, Err(Error::EscapedPaths { .. })));
    }

    #[test]
    fn dt_must_divide_the_horizon() {
        let u = VectorField::Analytic(AnalyticVector::Zero);
        let err = simulate_backward_flow(&u, 1.0, &[Vec3::ZERO], &cfg(0.1, 0.3, 1));
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn coarsened_increments_sum_groupwise() {
        let fine: Vec<Vec3> = (0..8).map(|i| Vec3::splat(i as f64)).collect();
        let coarse = coarsen_increments(&fine, 4, 2);
        assert_eq!(coarse.len(), 4);
        assert_eq!(coarse[0], fine[0] + fine[1]);
        assert_eq!(coarse[3], fine[6] + fine[7]);
    }

    #[test]
    fn csv_dump_lists_every_stage() {
        let u = VectorField::Analytic(AnalyticVector::Zero);
        let ens = simulate_backward_flow(&u, 0.2, &[Vec3::new(1.0, 2.0, 3.0)], &cfg(0.3, 0.1, 2))
            .unwrap();
        let mut buf = Vec::new();
        ens.write_paths_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_id,step,theta,x,y,z");
        assert_eq!(lines.len(), 1 + 2 * 3);
        let fields: Vec<&str> = lines[4].split(',').collect();
        assert_eq!(fields[0], "1");
        assert_eq!(fields[2].parse::<f64>().unwrap(), 0.0);
    }
}
