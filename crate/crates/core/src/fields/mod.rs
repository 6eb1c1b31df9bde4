//! Field abstractions: closed-form and gridded scalar/vector fields on a
//! periodic cube or on whole space with compactly supported data, plus the
//! spectral toolbox (divergence, Leray projection, Poisson inversion) and
//! norm/seminorm evaluation used by the a-priori bounds.

pub mod analytic;
pub mod grid;
pub mod io;
pub mod norms;
pub mod spectral;

pub use analytic::{AnalyticScalar, AnalyticVector};
pub use grid::{GridSeries, ScalarGrid, TensorGrid, Vec3Grid};
pub use norms::{norms, FieldNorms};
pub use spectral::{calderon_zygmund_check, random_band_limited, CzReport};

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};

/// Spatial setting for a problem. The periodic cube is `[0, side)^3` sampled
/// on `grid_n` nodes per axis; whole space carries the radius of a box known
/// to contain the support of the data (used to size quadratures and to kill
/// far-escaped trajectories).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Domain {
    PeriodicCube { side: f64, grid_n: usize },
    WholeSpace { support_radius: f64 },
}

impl Domain {
    pub fn is_periodic(&self) -> bool {
        matches!(self, Domain::PeriodicCube { .. })
    }

    /// Side and resolution, or an error for whole-space settings.
    pub fn periodic_dims(&self, op: &'static str) -> Result<(f64, usize)> {
        match *self {
            Domain::PeriodicCube { side, grid_n } => Ok((side, grid_n)),
            Domain::WholeSpace { .. } => Err(Error::NeedsPeriodicDomain { op }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Domain::PeriodicCube { side, grid_n } => {
                if !(side > 0.0 && side.is_finite()) || grid_n < 4 {
                    return Err(Error::InvalidConfig(format!(
                        "periodic cube needs side > 0 and grid_n >= 4, got side={side}, grid_n={grid_n}"
                    )));
                }
            }
            Domain::WholeSpace { support_radius } => {
                if !(support_radius > 0.0 && support_radius.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "whole space needs a positive support radius, got {support_radius}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Time-dependent scalar field: either closed-form or a grid series with a
/// precomputed gradient series (finite differences, built once at wrap time).
#[derive(Clone, Debug)]
pub enum ScalarField {
    Analytic(AnalyticScalar),
    Grid { vals: GridSeries<ScalarGrid>, grads: GridSeries<Vec3Grid> },
}

impl ScalarField {
    /// Wrap a sampled series, differentiating each frame once up front.
    pub fn from_series(vals: GridSeries<ScalarGrid>) -> Self {
        let grads = GridSeries {
            times: vals.times.clone(),
            frames: vals.frames.iter().map(|f| f.fd_gradient()).collect(),
        };
        ScalarField::Grid { vals, grads }
    }

    pub fn eval(&self, t: f64, x: Vec3) -> Result<f64> {
        match self {
            ScalarField::Analytic(f) => Ok(f.eval(t, x)),
            ScalarField::Grid { vals, .. } => vals.eval(t, x),
        }
    }

    pub fn gradient(&self, t: f64, x: Vec3) -> Result<Vec3> {
        match self {
            ScalarField::Analytic(f) => Ok(f.gradient(t, x)),
            ScalarField::Grid { grads, .. } => grads.eval(t, x),
        }
    }
}

/// Time-dependent vector field, same shape as [`ScalarField`].
#[derive(Clone, Debug)]
pub enum VectorField {
    Analytic(AnalyticVector),
    Grid { vals: GridSeries<Vec3Grid>, grads: GridSeries<TensorGrid> },
}

impl VectorField {
    pub fn from_series(vals: GridSeries<Vec3Grid>) -> Self {
        let grads = GridSeries {
            times: vals.times.clone(),
            frames: vals.frames.iter().map(|f| f.fd_gradient()).collect(),
        };
        VectorField::Grid { vals, grads }
    }

    pub fn eval(&self, t: f64, x: Vec3) -> Result<Vec3> {
        match self {
            VectorField::Analytic(f) => Ok(f.eval(t, x)),
            VectorField::Grid { vals, .. } => vals.eval(t, x),
        }
    }

    pub fn gradient(&self, t: f64, x: Vec3) -> Result<Mat3> {
        match self {
            VectorField::Analytic(f) => Ok(f.gradient(t, x)),
            VectorField::Grid { grads, .. } => grads.eval(t, x),
        }
    }
}

/// Scalar field with the time argument resolved once up front: analytic
/// families keep `t`, grid series pre-locate their bracketing frames. The
/// resulting evaluator is infallible and cheap enough for SDE inner loops
/// (no enum-of-series dispatch, no time search, no Result).
#[derive(Clone, Copy)]
pub(crate) enum FrozenScalar<'a> {
    Analytic { f: &'a AnalyticScalar, t: f64 },
    Single { g: &'a ScalarGrid },
    Pair { a: &'a ScalarGrid, b: &'a ScalarGrid, w: f64 },
}

impl ScalarField {
    pub(crate) fn freeze(&self, t: f64) -> Result<FrozenScalar<'_>> {
        match self {
            ScalarField::Analytic(f) => Ok(FrozenScalar::Analytic { f, t }),
            ScalarField::Grid { vals, .. } => {
                let (j0, j1, w) = vals.locate_time(t)?;
                if j0 == j1 || w == 0.0 {
                    Ok(FrozenScalar::Single { g: &vals.frames[j0] })
                } else {
                    Ok(FrozenScalar::Pair { a: &vals.frames[j0], b: &vals.frames[j1], w })
                }
            }
        }
    }
}

impl FrozenScalar<'_> {
    #[inline]
    pub(crate) fn eval(&self, x: Vec3) -> f64 {
        match *self {
            FrozenScalar::Analytic { f, t } => f.eval(t, x),
            FrozenScalar::Single { g } => g.trilinear(x),
            FrozenScalar::Pair { a, b, w } => {
                a.trilinear(x) * (1.0 - w) + b.trilinear(x) * w
            }
        }
    }

    /// Evaluator for the pattern "fixed point set + common moving offset",
    /// the shape of every walk inner loop (all paths of a batch share one
    /// Brownian offset per step). Families with an addition law collapse to
    /// per-point fused multiplies around one transcendental per step; other
    /// fields fall back to pointwise evaluation.
    pub(crate) fn shifted<'p>(&self, points: &'p [Vec3]) -> ShiftedScalar<'p>
    where
        Self: 'p,
    {
        match *self {
            FrozenScalar::Analytic { f: AnalyticScalar::Zero, .. } => {
                ShiftedScalar::Constant { v: 0.0 }
            }
            FrozenScalar::Analytic { f: AnalyticScalar::Constant(v), .. } => {
                ShiftedScalar::Constant { v: *v }
            }
            FrozenScalar::Analytic { f: AnalyticScalar::CosCoord { axis, amplitude }, .. } => {
                // a cos(x + b) = (a cos x) cos b - (a sin x) sin b
                ShiftedScalar::CosTable {
                    axis: *axis,
                    c: points.iter().map(|p| amplitude * p.comp(*axis).cos()).collect(),
                    s: points.iter().map(|p| amplitude * p.comp(*axis).sin()).collect(),
                }
            }
            FrozenScalar::Analytic { f: AnalyticScalar::Affine { a, b }, t } => {
                let f = AnalyticScalar::Affine { a: *a, b: *b };
                ShiftedScalar::AffineTable {
                    base: points.iter().map(|p| f.eval(t, *p)).collect(),
                    a: *a,
                }
            }
            _ => ShiftedScalar::Generic { f: *self, points },
        }
    }
}

/// See [`FrozenScalar::shifted`].
pub(crate) enum ShiftedScalar<'p> {
    Constant { v: f64 },
    CosTable { axis: usize, c: Vec<f64>, s: Vec<f64> },
    AffineTable { base: Vec<f64>, a: Vec3 },
    Generic { f: FrozenScalar<'p>, points: &'p [Vec3] },
}

impl ShiftedScalar<'_> {
    /// Fill `plus[q] = gamma(x_q + b)` and, when given, `minus[q] =
    /// gamma(x_q - b)`.
    #[inline]
    pub(crate) fn eval_pm(&self, b: Vec3, plus: &mut [f64], minus: Option<&mut [f64]>) {
        match self {
            ShiftedScalar::Constant { v } => {
                plus.fill(*v);
                if let Some(m) = minus {
                    m.fill(*v);
                }
            }
            ShiftedScalar::CosTable { axis, c, s } => {
                let (sb, cb) = b.comp(*axis).sin_cos();
                match minus {
                    Some(m) => {
                        for q in 0..c.len() {
                            plus[q] = c[q] * cb - s[q] * sb;
                            m[q] = c[q] * cb + s[q] * sb;
                        }
                    }
                    None => {
                        for q in 0..c.len() {
                            plus[q] = c[q] * cb - s[q] * sb;
                        }
                    }
                }
            }
            ShiftedScalar::AffineTable { base, a } => {
                let shift = a.dot(b);
                match minus {
                    Some(m) => {
                        for q in 0..base.len() {
                            plus[q] = base[q] + shift;
                            m[q] = base[q] - shift;
                        }
                    }
                    None => {
                        for q in 0..base.len() {
                            plus[q] = base[q] + shift;
                        }
                    }
                }
            }
            ShiftedScalar::Generic { f, points } => match minus {
                Some(m) => {
                    for (q, &x) in points.iter().enumerate() {
                        plus[q] = f.eval(x + b);
                        m[q] = f.eval(x - b);
                    }
                }
                None => {
                    for (q, &x) in points.iter().enumerate() {
                        plus[q] = f.eval(x + b);
                    }
                }
            },
        }
    }
}

/// Nonlinear pressure source gamma = Tr[A B] = sum_{j,k} A_{jk} B_{kj}.
///
/// With A = B = grad u this is sum_{j,k} (d_j u_k)(d_k u_j), the divergence of
/// (u . grad) u for div-free u, i.e. the right-hand side of -lap p = gamma.
pub fn gamma(a: &Mat3, b: &Mat3) -> f64 {
    let mut s = 0.0;
    for j in 0..3 {
        for k in 0..3 {
            s += a.m[j][k] * b.m[k][j];
        }
    }
    s
}

/// Sample a vector field at one time onto the domain's periodic grid.
pub fn sample_vector(f: &VectorField, t: f64, dom: &Domain) -> Result<Vec3Grid> {
    let (side, n) = dom.periodic_dims("sample_vector")?;
    let mut g = Vec3Grid::zeros(n, side);
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                *g.at_mut(ix, iy, iz) = f.eval(t, g.node(ix, iy, iz))?;
            }
        }
    }
    Ok(g)
}

/// Sample a scalar field at one time onto the domain's periodic grid.
pub fn sample_scalar(f: &ScalarField, t: f64, dom: &Domain) -> Result<ScalarGrid> {
    let (side, n) = dom.periodic_dims("sample_scalar")?;
    let mut g = ScalarGrid::zeros(n, side);
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                *g.at_mut(ix, iy, iz) = f.eval(t, g.node(ix, iy, iz))?;
            }
        }
    }
    Ok(g)
}

/// Spectral divergence of a vector field at time t on a periodic domain.
pub fn divergence(f: &VectorField, t: f64, dom: &Domain) -> Result<ScalarGrid> {
    dom.periodic_dims("divergence")?;
    Ok(spectral::divergence(&sample_vector(f, t, dom)?))
}

/// Leray projection (remove the gradient part) of a vector field at time t on
/// a periodic domain. The mean (k = 0) component passes through unchanged.
pub fn leray_project(f: &VectorField, t: f64, dom: &Domain) -> Result<Vec3Grid> {
    dom.periodic_dims("leray_project")?;
    Ok(spectral::leray(&sample_vector(f, t, dom)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_is_trace_of_product() {
        let a = Mat3::from_rows(
            Vec3::new(1.0, 2.0, 3.0),
            Vec3::new(0.5, -1.0, 4.0),
            Vec3::new(2.0, 0.0, 1.5),
        );
        let b = Mat3::from_rows(
            Vec3::new(0.0, 1.0, -2.0),
            Vec3::new(3.0, 2.0, 0.5),
            Vec3::new(1.0, 1.0, 1.0),
        );
        assert_eq!(gamma(&a, &b), a.matmul(&b).trace());
    }

    #[test]
    fn gamma_of_rigid_rotation_gradient() {
        // grad u antisymmetric with entries from omega: gamma(A, A) = -2|omega|^2.
        let u = AnalyticVector::RigidRotation { omega: Vec3::new(0.0, 0.0, 1.0) };
        let a = u.gradient(0.0, Vec3::new(0.3, -0.7, 0.2));
        assert_eq!(gamma(&a, &a), -2.0);
    }

    #[test]
    fn gamma_symmetric_in_transposes() {
        // gamma(A, B) = gamma(B^T, A^T) exactly (same products, same order per term).
        let a = Mat3::from_rows(
            Vec3::new(0.1, 2.2, -3.0),
            Vec3::new(1.5, -0.4, 0.0),
            Vec3::new(0.9, 7.0, 2.0),
        );
        let b = Mat3::from_rows(
            Vec3::new(-1.0, 0.3, 0.7),
            Vec3::new(2.0, 1.1, -0.2),
            Vec3::new(0.4, 0.0, 5.0),
        );
        assert_eq!(gamma(&a, &b), gamma(&b.transpose(), &a.transpose()));
    }

    #[test]
    fn divergence_of_beltrami_is_zero() {
        let dom = Domain::PeriodicCube { side: 2.0 * std::f64::consts::PI, grid_n: 16 };
        let f = VectorField::Analytic(AnalyticVector::beltrami_unit(0.1));
        let d = divergence(&f, 0.3, &dom).unwrap();
        let max = d.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-10, "max divergence {max}");
    }

    #[test]
    fn leray_fixes_divergence_free_fields() {
        let dom = Domain::PeriodicCube { side: 2.0 * std::f64::consts::PI, grid_n: 16 };
        let f = VectorField::Analytic(AnalyticVector::beltrami_unit(0.0));
        let p = leray_project(&f, 0.0, &dom).unwrap();
        let orig = sample_vector(&f, 0.0, &dom).unwrap();
        let mut max = 0.0f64;
        for (a, b) in p.data.iter().zip(orig.data.iter()) {
            max = max.max((*a - *b).max_abs());
        }
        assert!(max < 1e-10, "projection moved a div-free field by {max}");
    }

    #[test]
    fn periodic_ops_reject_whole_space() {
        let dom = Domain::WholeSpace { support_radius: 2.0 };
        let f = VectorField::Analytic(AnalyticVector::Zero);
        assert!(matches!(
            divergence(&f, 0.0, &dom),
            Err(Error::NeedsPeriodicDomain { .. })
        ));
    }

    #[test]
    fn grid_wrapped_field_matches_source_between_nodes() {
        let side = 2.0 * std::f64::consts::PI;
        let src = AnalyticVector::beltrami_unit(0.2);
        let times = vec![0.0, 0.5, 1.0];
        let frames = times
            .iter()
            .map(|&t| Vec3Grid::from_fn(32, side, |x| src.eval(t, x)))
            .collect();
        let f = VectorField::from_series(GridSeries::new(times, frames));
        let x = Vec3::new(1.234, 4.321, 2.5);
        let got = f.eval(0.25, x).unwrap();
        let want = (src.eval(0.0, x) + src.eval(0.5, x)) * 0.5;
        assert!((got - want).max_abs() < 5e-3);
        // FD + trilinear bias on 32^3 is ~1% of the unit gradient.
        let gg = f.gradient(0.25, x).unwrap();
        let gw = (src.gradient(0.0, x) + src.gradient(0.5, x)) * 0.5;
        assert!((gg - gw).max_abs() < 2e-2);
    }
}
