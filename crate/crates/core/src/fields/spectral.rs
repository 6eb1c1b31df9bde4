//! FFT-based operators on periodic grids: divergence, Leray projection,
//! inverse Laplacian, heat smoothing, trigonometric point evaluation.
//!
//! Conventions: samples f(x_j) = sum_k c_k exp(i k.x_j) with k = 2 pi m / side,
//! m in [-n/2, n/2). `forward` returns DFT sums; divide by n^3 for the
//! coefficients c_k. For band-limited data the grid Riemann sum of a product
//! equals the integral, which the Calderon-Zygmund check exploits.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::rng::stream_rng;

use super::grid::{ScalarGrid, TensorGrid, Vec3Grid};

pub struct Fft3 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft3 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft3 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn axis_pass(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        // z axis: contiguous runs.
        for chunk in data.chunks_exact_mut(n) {
            plan.process(chunk);
        }
        // y axis: stride n.
        let mut scratch = vec![Complex64::default(); n];
        for ix in 0..n {
            for iz in 0..n {
                let base = ix * n * n + iz;
                for iy in 0..n {
                    scratch[iy] = data[base + iy * n];
                }
                plan.process(&mut scratch);
                for iy in 0..n {
                    data[base + iy * n] = scratch[iy];
                }
            }
        }
        // x axis: stride n^2.
        for iy in 0..n {
            for iz in 0..n {
                let base = iy * n + iz;
                for ix in 0..n {
                    scratch[ix] = data[base + ix * n * n];
                }
                plan.process(&mut scratch);
                for ix in 0..n {
                    data[base + ix * n * n] = scratch[ix];
                }
            }
        }
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        let plan = Arc::clone(&self.fwd);
        self.axis_pass(data, &plan);
    }

    /// Inverse transform including the 1/n^3 normalization.
    pub fn inverse(&self, data: &mut [Complex64]) {
        let plan = Arc::clone(&self.inv);
        self.axis_pass(data, &plan);
        let scale = 1.0 / (self.n * self.n * self.n) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
}

/// Signed wavenumber for DFT bin m on an n-point axis of length `side`.
#[inline]
pub fn freq(m: usize, n: usize, side: f64) -> f64 {
    let m_signed = if m < n / 2 { m as isize } else { m as isize - n as isize };
    2.0 * std::f64::consts::PI * m_signed as f64 / side
}

fn to_complex(g: &ScalarGrid) -> Vec<Complex64> {
    g.data.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

fn from_complex(n: usize, side: f64, data: &[Complex64]) -> ScalarGrid {
    ScalarGrid { n, side, data: data.iter().map(|c| c.re).collect() }
}

/// Spectral divergence of a vector grid.
pub fn divergence(v: &Vec3Grid) -> ScalarGrid {
    let n = v.n;
    let fft = Fft3::new(n);
    let comps: Vec<Vec<Complex64>> = (0..3)
        .map(|c| {
            let mut data: Vec<Complex64> =
                v.data.iter().map(|u| Complex64::new(u.comp(c), 0.0)).collect();
            fft.forward(&mut data);
            data
        })
        .collect();
    let mut out = vec![Complex64::default(); n * n * n];
    for mx in 0..n {
        let kx = freq(mx, n, v.side);
        for my in 0..n {
            let ky = freq(my, n, v.side);
            for mz in 0..n {
                let kz = freq(mz, n, v.side);
                let j = (mx * n + my) * n + mz;
                let s = Complex64::new(0.0, 1.0)
                    * (comps[0][j] * kx + comps[1][j] * ky + comps[2][j] * kz);
                out[j] = s;
            }
        }
    }
    fft.inverse(&mut out);
    from_complex(n, v.side, &out)
}

/// Spectral Jacobian of a vector grid; entry (i, j) = d v_i / d x_j. Exact
/// for band-limited fields, unlike the centered-difference fallback.
pub fn vector_gradient(v: &Vec3Grid) -> TensorGrid {
    let n = v.n;
    let fft = Fft3::new(n);
    let mut out = TensorGrid::zeros(n, v.side);
    for c in 0..3 {
        let mut hat: Vec<Complex64> =
            v.data.iter().map(|u| Complex64::new(u.comp(c), 0.0)).collect();
        fft.forward(&mut hat);
        for axis in 0..3 {
            let mut dhat = vec![Complex64::default(); n * n * n];
            for mx in 0..n {
                let kx = freq(mx, n, v.side);
                for my in 0..n {
                    let ky = freq(my, n, v.side);
                    for mz in 0..n {
                        let kz = freq(mz, n, v.side);
                        let k = [kx, ky, kz][axis];
                        let j = (mx * n + my) * n + mz;
                        dhat[j] = Complex64::new(0.0, k) * hat[j];
                    }
                }
            }
            fft.inverse(&mut dhat);
            for (o, s) in out.data.iter_mut().zip(&dhat) {
                o[c][axis] = s.re;
            }
        }
    }
    out
}

/// Spectral componentwise Laplacian of a vector grid.
pub fn vector_laplacian(v: &Vec3Grid) -> Vec3Grid {
    let n = v.n;
    let fft = Fft3::new(n);
    let mut out = Vec3Grid::zeros(n, v.side);
    for c in 0..3 {
        let mut hat: Vec<Complex64> =
            v.data.iter().map(|u| Complex64::new(u.comp(c), 0.0)).collect();
        fft.forward(&mut hat);
        for mx in 0..n {
            let kx = freq(mx, n, v.side);
            for my in 0..n {
                let ky = freq(my, n, v.side);
                for mz in 0..n {
                    let kz = freq(mz, n, v.side);
                    let j = (mx * n + my) * n + mz;
                    hat[j] *= -(kx * kx + ky * ky + kz * kz);
                }
            }
        }
        fft.inverse(&mut hat);
        for (o, s) in out.data.iter_mut().zip(&hat) {
            o.set_comp(c, s.re);
        }
    }
    out
}

/// Leray projection: remove the gradient part, keep k=0 (mean flow) intact.
pub fn leray(v: &Vec3Grid) -> Vec3Grid {
    let n = v.n;
    let fft = Fft3::new(n);
    let mut comps: Vec<Vec<Complex64>> = (0..3)
        .map(|c| {
            let mut data: Vec<Complex64> =
                v.data.iter().map(|u| Complex64::new(u.comp(c), 0.0)).collect();
            fft.forward(&mut data);
            data
        })
        .collect();
    for mx in 0..n {
        let kx = freq(mx, n, v.side);
        for my in 0..n {
            let ky = freq(my, n, v.side);
            for mz in 0..n {
                let kz = freq(mz, n, v.side);
                let k2 = kx * kx + ky * ky + kz * kz;
                if k2 == 0.0 {
                    continue;
                }
                let j = (mx * n + my) * n + mz;
                let kdotu = comps[0][j] * kx + comps[1][j] * ky + comps[2][j] * kz;
                let f = kdotu / k2;
                comps[0][j] -= f * kx;
                comps[1][j] -= f * ky;
                comps[2][j] -= f * kz;
            }
        }
    }
    let mut out = Vec3Grid::zeros(n, v.side);
    for c in 0..3 {
        fft.inverse(&mut comps[c]);
        for (o, s) in out.data.iter_mut().zip(&comps[c]) {
            o.set_comp(c, s.re);
        }
    }
    out
}

/// Solve -lap p = g spectrally. The k=0 mode (mean of g) is dropped; its size
/// is returned so callers can decide whether that matters. The result has zero
/// mean.
pub fn inv_neg_laplacian(g: &ScalarGrid) -> (ScalarGrid, f64) {
    let (p, _grad, mean) = poisson_with_gradient(g, false);
    (p, mean)
}

/// Solve -lap p = g and also return grad p, both spectrally.
pub fn poisson_with_gradient(g: &ScalarGrid, with_grad: bool) -> (ScalarGrid, Vec3Grid, f64) {
    let n = g.n;
    let vol_cells = (n * n * n) as f64;
    let fft = Fft3::new(n);
    let mut hat = to_complex(g);
    fft.forward(&mut hat);
    let mean = hat[0].re / vol_cells;
    hat[0] = Complex64::default();
    let mut grad_hat: Vec<Vec<Complex64>> = if with_grad {
        (0..3).map(|_| vec![Complex64::default(); n * n * n]).collect()
    } else {
        Vec::new()
    };
    for mx in 0..n {
        let kx = freq(mx, n, g.side);
        for my in 0..n {
            let ky = freq(my, n, g.side);
            for mz in 0..n {
                let kz = freq(mz, n, g.side);
                let k2 = kx * kx + ky * ky + kz * kz;
                if k2 == 0.0 {
                    continue;
                }
                let j = (mx * n + my) * n + mz;
                hat[j] /= k2;
                if with_grad {
                    let i = Complex64::new(0.0, 1.0);
                    grad_hat[0][j] = i * kx * hat[j];
                    grad_hat[1][j] = i * ky * hat[j];
                    grad_hat[2][j] = i * kz * hat[j];
                }
            }
        }
    }
    fft.inverse(&mut hat);
    let p = from_complex(n, g.side, &hat);
    let mut grad = Vec3Grid::zeros(n, g.side);
    if with_grad {
        for c in 0..3 {
            fft.inverse(&mut grad_hat[c]);
            for (o, s) in grad.data.iter_mut().zip(&grad_hat[c]) {
                o.set_comp(c, s.re);
            }
        }
    }
    (p, grad, mean)
}

/// Apply the heat multiplier exp(-|k|^2 c), i.e. smooth by a Gaussian of
/// variance 2c per axis.
pub fn heat_smooth(g: &ScalarGrid, c: f64) -> ScalarGrid {
    let n = g.n;
    let fft = Fft3::new(n);
    let mut hat = to_complex(g);
    fft.forward(&mut hat);
    for mx in 0..n {
        let kx = freq(mx, n, g.side);
        for my in 0..n {
            let ky = freq(my, n, g.side);
            for mz in 0..n {
                let kz = freq(mz, n, g.side);
                let k2 = kx * kx + ky * ky + kz * kz;
                let j = (mx * n + my) * n + mz;
                hat[j] *= (-k2 * c).exp();
            }
        }
    }
    fft.inverse(&mut hat);
    from_complex(n, g.side, &hat)
}

/// Evaluate the trigonometric interpolant of a grid at an arbitrary point.
/// Exact for band-limited data; O(n^3) per point.
pub fn spectral_eval(g: &ScalarGrid, x: Vec3) -> f64 {
    let n = g.n;
    let fft = Fft3::new(n);
    let mut hat = to_complex(g);
    fft.forward(&mut hat);
    spectral_eval_hat(&hat, n, g.side, x)
}

/// Same as `spectral_eval` but with a precomputed forward transform.
pub fn spectral_eval_hat(hat: &[Complex64], n: usize, side: f64, x: Vec3) -> f64 {
    let norm = 1.0 / (n * n * n) as f64;
    // Separable phase tables per axis.
    let phase = |coord: f64| -> Vec<Complex64> {
        (0..n)
            .map(|m| {
                let k = freq(m, n, side);
                Complex64::new(0.0, k * coord).exp()
            })
            .collect()
    };
    let px = phase(x.x);
    let py = phase(x.y);
    let pz = phase(x.z);
    let mut acc = Complex64::default();
    for mx in 0..n {
        for my in 0..n {
            let pxy = px[mx] * py[my];
            let base = (mx * n + my) * n;
            let mut inner = Complex64::default();
            for mz in 0..n {
                inner += hat[base + mz] * pz[mz];
            }
            acc += pxy * inner;
        }
    }
    acc.re * norm
}

/// Forward transform of a scalar grid (DFT sums, unnormalized).
pub fn forward_hat(g: &ScalarGrid) -> Vec<Complex64> {
    let fft = Fft3::new(g.n);
    let mut hat = to_complex(g);
    fft.forward(&mut hat);
    hat
}

/// Zero-mean random real field with modes only in 0 < |k|_inf <= kmax,
/// normalized to the requested root-mean-square. Deterministic in `seed`.
pub fn random_band_limited(n: usize, side: f64, kmax: usize, rms: f64, seed: u64) -> ScalarGrid {
    use rand::Rng;
    let mut rng = stream_rng(seed, &[0x62616e64]); // "band"
    let mut g = ScalarGrid::zeros(n, side);
    for v in g.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let fft = Fft3::new(n);
    let mut hat = to_complex(&g);
    fft.forward(&mut hat);
    let half = n / 2;
    for mx in 0..n {
        let ax = if mx < half { mx } else { n - mx };
        for my in 0..n {
            let ay = if my < half { my } else { n - my };
            for mz in 0..n {
                let az = if mz < half { mz } else { n - mz };
                let j = (mx * n + my) * n + mz;
                let keep = ax.max(ay).max(az) <= kmax && (ax | ay | az) != 0;
                if !keep {
                    hat[j] = Complex64::default();
                }
            }
        }
    }
    fft.inverse(&mut hat);
    let mut out = from_complex(n, side, &hat);
    let ms = out.data.iter().map(|v| v * v).sum::<f64>() / out.data.len() as f64;
    let scale = rms / ms.sqrt();
    for v in out.data.iter_mut() {
        *v *= scale;
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct CzReport {
    /// integral of |Hessian of the Newton potential|^2, from the spectral side
    pub lhs: f64,
    /// integral of g^2, from the grid sum
    pub rhs: f64,
    pub rel_err: f64,
}

/// Calderon-Zygmund identity: || D^2 N g ||_{L^2}^2 = || g ||_{L^2}^2 for
/// zero-mean periodic g. Left side via Fourier multipliers k_i k_j / |k|^2,
/// right side via the direct grid sum, so the two routes stay independent.
pub fn calderon_zygmund_check(g: &ScalarGrid) -> Result<CzReport> {
    let n = g.n;
    let mean = g.mean();
    let scale = g.data.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-300);
    if mean.abs() > 1e-8 * scale {
        return Err(Error::NonzeroMean { mean });
    }
    let vol = g.side.powi(3);
    let cells = (n * n * n) as f64;
    let hat = forward_hat(g);
    let mut lhs = 0.0;
    for mx in 0..n {
        let kx = freq(mx, n, g.side);
        for my in 0..n {
            let ky = freq(my, n, g.side);
            for mz in 0..n {
                let kz = freq(mz, n, g.side);
                let k2 = kx * kx + ky * ky + kz * kz;
                if k2 == 0.0 {
                    continue;
                }
                let j = (mx * n + my) * n + mz;
                let c2 = (hat[j] / cells).norm_sqr();
                let k = [kx, ky, kz];
                for ki in k {
                    for kj in k {
                        let mult = ki * kj / k2;
                        lhs += mult * mult * c2;
                    }
                }
            }
        }
    }
    lhs *= vol;
    let h3 = (g.side / n as f64).powi(3);
    let rhs = g.data.iter().map(|v| v * v).sum::<f64>() * h3;
    let rel = (lhs - rhs).abs() / rhs.max(1e-300);
    Ok(CzReport { lhs, rhs, rel_err: rel })
}
