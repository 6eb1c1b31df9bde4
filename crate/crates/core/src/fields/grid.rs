//! Periodic grid storage and trilinear interpolation.
//!
//! Grids store node samples on the uniform periodic lattice x_i = i*h,
//! h = side/n, flattened node-major: index (ix, iy, iz) -> ((ix*n)+iy)*n+iz.
//! Interpolation wraps periodically, so evaluation is defined for every x.
//! Fractional offsets within 1e-9 of a node snap to it, making evaluation at
//! node coordinates bit-exact equal to the stored sample.

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};

const NODE_SNAP: f64 = 1e-9;

/// Locate `coord` on the periodic axis: returns (left node, right node,
/// fractional offset in [0,1)).
#[inline]
fn locate(coord: f64, n: usize, h: f64) -> (usize, usize, f64) {
    let nf = n as f64;
    let mut u = (coord / h).rem_euclid(nf);
    // rem_euclid of a tiny negative can round up to exactly n.
    if u >= nf {
        u = 0.0;
    }
    let mut i0 = u as usize;
    if i0 >= n {
        i0 = n - 1;
    }
    let mut f = u - i0 as f64;
    if f < NODE_SNAP {
        f = 0.0;
    } else if f > 1.0 - NODE_SNAP {
        f = 0.0;
        i0 += 1;
        if i0 == n {
            i0 = 0;
        }
    }
    let i1 = if i0 + 1 == n { 0 } else { i0 + 1 };
    (i0, i1, f)
}

/// Trilinear stencil: 8 flattened indices and weights for a point.
#[inline]
pub(crate) fn stencil(x: Vec3, n: usize, side: f64) -> ([usize; 8], [f64; 8]) {
    let h = side / n as f64;
    let (ix0, ix1, fx) = locate(x.x, n, h);
    let (iy0, iy1, fy) = locate(x.y, n, h);
    let (iz0, iz1, fz) = locate(x.z, n, h);
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    let row = |ix: usize, iy: usize| (ix * n + iy) * n;
    let idx = [
        row(ix0, iy0) + iz0,
        row(ix0, iy0) + iz1,
        row(ix0, iy1) + iz0,
        row(ix0, iy1) + iz1,
        row(ix1, iy0) + iz0,
        row(ix1, iy0) + iz1,
        row(ix1, iy1) + iz0,
        row(ix1, iy1) + iz1,
    ];
    let w = [
        gx * gy * gz,
        gx * gy * fz,
        gx * fy * gz,
        gx * fy * fz,
        fx * gy * gz,
        fx * gy * fz,
        fx * fy * gz,
        fx * fy * fz,
    ];
    (idx, w)
}

macro_rules! grid_common {
    ($name:ident, $elem:ty, $zero:expr) => {
        impl $name {
            pub fn zeros(n: usize, side: f64) -> Self {
                $name { n, side, data: vec![$zero; n * n * n] }
            }

            pub fn from_fn(n: usize, side: f64, mut f: impl FnMut(Vec3) -> $elem) -> Self {
                let h = side / n as f64;
                let mut data = Vec::with_capacity(n * n * n);
                for ix in 0..n {
                    for iy in 0..n {
                        for iz in 0..n {
                            data.push(f(Vec3::new(
                                ix as f64 * h,
                                iy as f64 * h,
                                iz as f64 * h,
                            )));
                        }
                    }
                }
                $name { n, side, data }
            }

            #[inline]
            pub fn idx(&self, ix: usize, iy: usize, iz: usize) -> usize {
                (ix * self.n + iy) * self.n + iz
            }

            #[inline]
            pub fn at(&self, ix: usize, iy: usize, iz: usize) -> $elem {
                self.data[self.idx(ix, iy, iz)]
            }

            #[inline]
            pub fn at_mut(&mut self, ix: usize, iy: usize, iz: usize) -> &mut $elem {
                let i = self.idx(ix, iy, iz);
                &mut self.data[i]
            }

            pub fn h(&self) -> f64 {
                self.side / self.n as f64
            }

            pub fn node(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
                let h = self.h();
                Vec3::new(ix as f64 * h, iy as f64 * h, iz as f64 * h)
            }

            /// Linear blend (1-w)*self + w*other, used for time interpolation.
            pub fn lerp(&self, other: &Self, w: f64) -> Self {
                assert_eq!(self.n, other.n);
                let g = 1.0 - w;
                let data = self
                    .data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| blend(a, b, g, w))
                    .collect();
                $name { n: self.n, side: self.side, data }
            }
        }
    };
}

#[inline]
fn blend<T>(a: T, b: T, g: f64, w: f64) -> T
where
    T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    a * g + b * w
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    pub n: usize,
    pub side: f64,
    pub data: Vec<f64>,
}
grid_common!(ScalarGrid, f64, 0.0);

#[derive(Clone, Debug, PartialEq)]
pub struct Vec3Grid {
    pub n: usize,
    pub side: f64,
    pub data: Vec<Vec3>,
}
grid_common!(Vec3Grid, Vec3, Vec3::ZERO);

#[derive(Clone, Debug, PartialEq)]
pub struct TensorGrid {
    pub n: usize,
    pub side: f64,
    pub data: Vec<Mat3>,
}
grid_common!(TensorGrid, Mat3, Mat3::ZERO);

impl ScalarGrid {
    #[inline]
    pub fn trilinear(&self, x: Vec3) -> f64 {
        let (idx, w) = stencil(x, self.n, self.side);
        let mut s = 0.0;
        for q in 0..8 {
            s += w[q] * self.data[idx[q]];
        }
        s
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Centered finite-difference gradient at every node; O(h^2).
    pub fn fd_gradient(&self) -> Vec3Grid {
        let n = self.n;
        let inv2h = 1.0 / (2.0 * self.h());
        let mut out = Vec3Grid::zeros(n, self.side);
        for ix in 0..n {
            let ixp = (ix + 1) % n;
            let ixm = (ix + n - 1) % n;
            for iy in 0..n {
                let iyp = (iy + 1) % n;
                let iym = (iy + n - 1) % n;
                for iz in 0..n {
                    let izp = (iz + 1) % n;
                    let izm = (iz + n - 1) % n;
                    let g = Vec3::new(
                        (self.at(ixp, iy, iz) - self.at(ixm, iy, iz)) * inv2h,
                        (self.at(ix, iyp, iz) - self.at(ix, iym, iz)) * inv2h,
                        (self.at(ix, iy, izp) - self.at(ix, iy, izm)) * inv2h,
                    );
                    *out.at_mut(ix, iy, iz) = g;
                }
            }
        }
        out
    }
}

impl Vec3Grid {
    #[inline]
    pub fn trilinear(&self, x: Vec3) -> Vec3 {
        let (idx, w) = stencil(x, self.n, self.side);
        let mut s = Vec3::ZERO;
        for q in 0..8 {
            s = s.mul_add(w[q], self.data[idx[q]]);
        }
        s
    }

    /// Centered finite-difference Jacobian at every node; entry (i,k) = d v_i / d x_k.
    pub fn fd_gradient(&self) -> TensorGrid {
        let n = self.n;
        let inv2h = 1.0 / (2.0 * self.h());
        let mut out = TensorGrid::zeros(n, self.side);
        for ix in 0..n {
            let ixp = (ix + 1) % n;
            let ixm = (ix + n - 1) % n;
            for iy in 0..n {
                let iyp = (iy + 1) % n;
                let iym = (iy + n - 1) % n;
                for iz in 0..n {
                    let izp = (iz + 1) % n;
                    let izm = (iz + n - 1) % n;
                    let dx = (self.at(ixp, iy, iz) - self.at(ixm, iy, iz)) * inv2h;
                    let dy = (self.at(ix, iyp, iz) - self.at(ix, iym, iz)) * inv2h;
                    let dz = (self.at(ix, iy, izp) - self.at(ix, iy, izm)) * inv2h;
                    let mut m = Mat3::ZERO;
                    for i in 0..3 {
                        m[i][0] = dx.comp(i);
                        m[i][1] = dy.comp(i);
                        m[i][2] = dz.comp(i);
                    }
                    *out.at_mut(ix, iy, iz) = m;
                }
            }
        }
        out
    }
}

impl TensorGrid {
    #[inline]
    pub fn trilinear(&self, x: Vec3) -> Mat3 {
        let (idx, w) = stencil(x, self.n, self.side);
        let mut s = Mat3::ZERO;
        for q in 0..8 {
            s += self.data[idx[q]] * w[q];
        }
        s
    }
}

/// A field sampled on a sequence of time nodes. A single frame is treated as
/// time-constant; otherwise evaluation interpolates linearly between the two
/// bracketing frames and errors outside the stored range.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSeries<G> {
    pub times: Vec<f64>,
    pub frames: Vec<G>,
}

impl<G> GridSeries<G> {
    pub fn new(times: Vec<f64>, frames: Vec<G>) -> Self {
        assert_eq!(times.len(), frames.len());
        assert!(!times.is_empty());
        assert!(times.windows(2).all(|w| w[1] > w[0]), "times must increase");
        GridSeries { times, frames }
    }

    pub fn single(t: f64, frame: G) -> Self {
        GridSeries { times: vec![t], frames: vec![frame] }
    }

    /// Bracketing frames and interpolation weight for time t.
    pub fn locate_time(&self, t: f64) -> Result<(usize, usize, f64)> {
        if self.times.len() == 1 {
            return Ok((0, 0, 0.0));
        }
        let lo = self.times[0];
        let hi = *self.times.last().unwrap();
        let span = hi - lo;
        let eps = 1e-9 * span.max(1.0);
        if t < lo - eps || t > hi + eps {
            return Err(Error::OutOfTimeRange { t, lo, hi });
        }
        let t = t.clamp(lo, hi);
        // Uniform spacing is the common case; fall back to search otherwise.
        let j = match self.times.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(j) => return Ok((j, j, 0.0)),
            Err(j) => j,
        };
        let j1 = j.min(self.times.len() - 1).max(1);
        let j0 = j1 - 1;
        let w = (t - self.times[j0]) / (self.times[j1] - self.times[j0]);
        Ok((j0, j1, w))
    }
}

macro_rules! series_eval {
    ($grid:ty, $out:ty, $evalfn:ident) => {
        impl GridSeries<$grid> {
            pub fn $evalfn(&self, t: f64, x: Vec3) -> Result<$out> {
                let (j0, j1, w) = self.locate_time(t)?;
                let a = self.frames[j0].trilinear(x);
                if j0 == j1 || w == 0.0 {
                    return Ok(a);
                }
                let b = self.frames[j1].trilinear(x);
                Ok(a * (1.0 - w) + b * w)
            }
        }
    };
}

series_eval!(ScalarGrid, f64, eval);
series_eval!(Vec3Grid, Vec3, eval);
series_eval!(TensorGrid, Mat3, eval);
