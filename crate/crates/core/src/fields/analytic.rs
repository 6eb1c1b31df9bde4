//! Closed-form field families with exact gradients.
//!
//! The Beltrami family is an exact Navier-Stokes solution (eigenfield of curl
//! at unit wavenumber, decaying like e^{-nu t}); Taylor-Green is the classic
//! 2D vortex sheet embedded in 3D. Both serve as validation oracles.

use crate::math::{Mat3, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub enum AnalyticVector {
    Zero,
    Constant(Vec3),
    /// u(x) = A x + b.
    Affine { a: Mat3, b: Vec3 },
    /// u(x) = omega cross x.
    RigidRotation { omega: Vec3 },
    /// ABC flow times e^{-nu t}:
    /// u = (a sin z + c cos y, b sin x + a cos z, c sin y + b cos x).
    Beltrami { a: f64, b: f64, c: f64, nu: f64 },
    /// u = e^{-2 nu t} (sin x cos y, -cos x sin y, 0).
    TaylorGreen { nu: f64 },
    /// u = amplitude * exp(-|x-center|^2 / (2 width^2)).
    GaussianBump { center: Vec3, width: f64, amplitude: Vec3 },
}

impl AnalyticVector {
    pub fn beltrami_unit(nu: f64) -> Self {
        AnalyticVector::Beltrami { a: 1.0, b: 1.0, c: 1.0, nu }
    }

    pub fn eval(&self, t: f64, x: Vec3) -> Vec3 {
        match *self {
            AnalyticVector::Zero => Vec3::ZERO,
            AnalyticVector::Constant(v) => v,
            AnalyticVector::Affine { a, b } => a.mul_vec(x) + b,
            AnalyticVector::RigidRotation { omega } => omega.cross(x),
            AnalyticVector::Beltrami { a, b, c, nu } => {
                let d = (-nu * t).exp();
                Vec3::new(
                    a * x.z.sin() + c * x.y.cos(),
                    b * x.x.sin() + a * x.z.cos(),
                    c * x.y.sin() + b * x.x.cos(),
                ) * d
            }
            AnalyticVector::TaylorGreen { nu } => {
                let d = (-2.0 * nu * t).exp();
                Vec3::new(x.x.sin() * x.y.cos(), -(x.x.cos() * x.y.sin()), 0.0) * d
            }
            AnalyticVector::GaussianBump { center, width, amplitude } => {
                let r = x - center;
                amplitude * (-r.norm_sq() / (2.0 * width * width)).exp()
            }
        }
    }

    pub fn gradient(&self, t: f64, x: Vec3) -> Mat3 {
        match *self {
            AnalyticVector::Zero | AnalyticVector::Constant(_) => Mat3::ZERO,
            AnalyticVector::Affine { a, .. } => a,
            AnalyticVector::RigidRotation { omega } => Mat3::from_rows(
                Vec3::new(0.0, -omega.z, omega.y),
                Vec3::new(omega.z, 0.0, -omega.x),
                Vec3::new(-omega.y, omega.x, 0.0),
            ),
            AnalyticVector::Beltrami { a, b, c, nu } => {
                let d = (-nu * t).exp();
                Mat3::from_rows(
                    Vec3::new(0.0, -c * x.y.sin(), a * x.z.cos()),
                    Vec3::new(b * x.x.cos(), 0.0, -a * x.z.sin()),
                    Vec3::new(-b * x.x.sin(), c * x.y.cos(), 0.0),
                ) * d
            }
            AnalyticVector::TaylorGreen { nu } => {
                let d = (-2.0 * nu * t).exp();
                let (sx, cx) = x.x.sin_cos();
                let (sy, cy) = x.y.sin_cos();
                Mat3::from_rows(
                    Vec3::new(cx * cy, -sx * sy, 0.0),
                    Vec3::new(sx * sy, -cx * cy, 0.0),
                    Vec3::ZERO,
                ) * d
            }
            AnalyticVector::GaussianBump { center, width, amplitude } => {
                let r = x - center;
                let g = (-r.norm_sq() / (2.0 * width * width)).exp();
                Mat3::outer(amplitude, r * (-g / (width * width)))
            }
        }
    }

    /// Exact pressure for families that solve Navier-Stokes; None otherwise.
    /// Beltrami: p = -|u|^2/2 (so (u.grad)u + grad p = 0).
    pub fn exact_pressure(&self, t: f64, x: Vec3) -> Option<f64> {
        match *self {
            AnalyticVector::Beltrami { .. } => Some(-0.5 * self.eval(t, x).norm_sq()),
            AnalyticVector::TaylorGreen { nu } => {
                // (u.grad)u = (e^{-4 nu t}/2)(sin 2x, sin 2y, 0) for this sign
                // convention, so the balancing pressure is +1/4 (cos 2x + cos 2y).
                let d = (-4.0 * nu * t).exp();
                Some(0.25 * d * ((2.0 * x.x).cos() + (2.0 * x.y).cos()))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnalyticScalar {
    Zero,
    Constant(f64),
    /// amplitude * cos(x_axis), unit wavenumber on a 2 pi cube.
    CosCoord { axis: usize, amplitude: f64 },
    /// amplitude * exp(-|x-center|^2 / (2 width^2)).
    GaussianBump { center: Vec3, width: f64, amplitude: f64 },
    /// Uniform density on the ball |x| <= radius, zero outside.
    BallIndicator { radius: f64, value: f64 },
    /// a.x + b.
    Affine { a: Vec3, b: f64 },
}

impl AnalyticScalar {
    pub fn eval(&self, _t: f64, x: Vec3) -> f64 {
        match *self {
            AnalyticScalar::Zero => 0.0,
            AnalyticScalar::Constant(v) => v,
            AnalyticScalar::CosCoord { axis, amplitude } => amplitude * x.comp(axis).cos(),
            AnalyticScalar::GaussianBump { center, width, amplitude } => {
                let r = x - center;
                amplitude * (-r.norm_sq() / (2.0 * width * width)).exp()
            }
            AnalyticScalar::BallIndicator { radius, value } => {
                if x.norm_sq() <= radius * radius {
                    value
                } else {
                    0.0
                }
            }
            AnalyticScalar::Affine { a, b } => a.dot(x) + b,
        }
    }

    /// Spatial gradient; the ball indicator returns its a.e. value (zero).
    pub fn gradient(&self, _t: f64, x: Vec3) -> Vec3 {
        match *self {
            AnalyticScalar::Zero | AnalyticScalar::Constant(_) => Vec3::ZERO,
            AnalyticScalar::CosCoord { axis, amplitude } => {
                let mut g = Vec3::ZERO;
                g.set_comp(axis, -amplitude * x.comp(axis).sin());
                g
            }
            AnalyticScalar::GaussianBump { center, width, amplitude } => {
                let r = x - center;
                let g = amplitude * (-r.norm_sq() / (2.0 * width * width)).exp();
                r * (-g / (width * width))
            }
            AnalyticScalar::BallIndicator { .. } => Vec3::ZERO,
            AnalyticScalar::Affine { a, .. } => a,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of order h^4 for first and second derivatives.
    fn fd_partial(f: &impl Fn(Vec3) -> f64, x: Vec3, axis: usize, h: f64) -> f64 {
        let mut e = Vec3::ZERO;
        e.set_comp(axis, 1.0);
        (8.0 * (f(x + e * h) - f(x - e * h)) - (f(x + e * (2.0 * h)) - f(x - e * (2.0 * h))))
            / (12.0 * h)
    }

    fn fd_second(f: &impl Fn(Vec3) -> f64, x: Vec3, axis: usize, h: f64) -> f64 {
        let mut e = Vec3::ZERO;
        e.set_comp(axis, 1.0);
        (-f(x + e * (2.0 * h)) + 16.0 * f(x + e * h) - 30.0 * f(x)
            + 16.0 * f(x - e * h)
            - f(x - e * (2.0 * h)))
            / (12.0 * h * h)
    }

    #[test]
    fn beltrami_satisfies_navier_stokes_residual() {
        // Substitute the family into du/dt + (u.grad)u - nu lap u + grad p = 0
        // and check the residual by finite differences before using it as an
        // oracle anywhere else.
        let nu = 0.5;
        let fam = AnalyticVector::Beltrami { a: 1.0, b: 1.0, c: 1.0, nu };
        let h = 3e-3;
        let pts = [
            Vec3::new(0.3, 1.1, 2.0),
            Vec3::new(4.0, 0.2, 5.5),
            Vec3::new(2.2, 3.3, 1.7),
        ];
        for &x in &pts {
            let t = 0.37;
            let u = fam.eval(t, x);
            let grad = fam.gradient(t, x);
            // time derivative: closed form factor -nu u(t,x)
            let dudt = u * -nu;
            for i in 0..3 {
                let ui = |y: Vec3| fam.eval(t, y).comp(i);
                let lap: f64 = (0..3).map(|ax| fd_second(&ui, x, ax, h)).sum();
                let conv = grad.row(i).dot(u);
                let pfun = |y: Vec3| fam.exact_pressure(t, y).unwrap();
                let gp = fd_partial(&pfun, x, i, h);
                let res = dudt.comp(i) - nu * lap + conv + gp;
                assert!(res.abs() < 1e-10, "residual {res:.3e} in component {i}");
            }
        }
    }

    #[test]
    fn taylor_green_satisfies_navier_stokes_residual() {
        let nu = 0.7;
        let fam = AnalyticVector::TaylorGreen { nu };
        let h = 3e-3;
        let x = Vec3::new(0.9, 2.4, 0.0);
        let t = 0.21;
        let u = fam.eval(t, x);
        let grad = fam.gradient(t, x);
        let dudt = u * (-2.0 * nu);
        for i in 0..3 {
            let ui = |y: Vec3| fam.eval(t, y).comp(i);
            let lap: f64 = (0..3).map(|ax| fd_second(&ui, x, ax, h)).sum();
            let conv = grad.row(i).dot(u);
            let pfun = |y: Vec3| fam.exact_pressure(t, y).unwrap();
            let gp = fd_partial(&pfun, x, i, h);
            let res = dudt.comp(i) - nu * lap + conv + gp;
            assert!(res.abs() < 1e-10, "residual {res:.3e} in component {i}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let fams = [
            AnalyticVector::beltrami_unit(0.3),
            AnalyticVector::TaylorGreen { nu: 0.2 },
            AnalyticVector::RigidRotation { omega: Vec3::new(0.1, -0.7, 1.3) },
            AnalyticVector::GaussianBump {
                center: Vec3::new(0.5, -0.2, 0.1),
                width: 0.8,
                amplitude: Vec3::new(1.0, -2.0, 0.5),
            },
        ];
        let x = Vec3::new(0.4, -0.3, 0.9);
        let t = 0.11;
        for fam in &fams {
            let g = fam.gradient(t, x);
            for i in 0..3 {
                for k in 0..3 {
                    let ui = |y: Vec3| fam.eval(t, y).comp(i);
                    let fd = fd_partial(&ui, x, k, 2e-3);
                    assert!(
                        (g[i][k] - fd).abs() < 1e-9,
                        "{fam:?} entry ({i},{k}): {} vs {}",
                        g[i][k],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn beltrami_unit_values() {
        let fam = AnalyticVector::beltrami_unit(0.25);
        let x = Vec3::new(0.2, 0.7, 1.1);
        let u0 = fam.eval(0.0, x);
        let expect = Vec3::new(
            x.z.sin() + x.y.cos(),
            x.x.sin() + x.z.cos(),
            x.y.sin() + x.x.cos(),
        );
        assert!((u0 - expect).norm() < 1e-15);
        let u1 = fam.eval(2.0, x);
        assert!((u1 - expect * (-0.5f64).exp()).norm() < 1e-15);
    }

    #[test]
    fn scalar_gradients_match_finite_differences() {
        let fams = [
            AnalyticScalar::CosCoord { axis: 0, amplitude: 2.0 },
            AnalyticScalar::GaussianBump {
                center: Vec3::new(0.1, 0.2, -0.4),
                width: 0.6,
                amplitude: 1.5,
            },
            AnalyticScalar::Affine { a: Vec3::new(1.0, -2.0, 0.3), b: 4.0 },
        ];
        let x = Vec3::new(0.3, -0.1, 0.5);
        for fam in &fams {
            let g = fam.gradient(0.0, x);
            for k in 0..3 {
                let f = |y: Vec3| fam.eval(0.0, y);
                let fd = fd_partial(&f, x, k, 2e-3);
                assert!((g.comp(k) - fd).abs() < 1e-9, "{fam:?} axis {k}");
            }
        }
    }
}
