//! Discrete field norms on a sampling lattice.
//!
//! L^q norms are Riemann sums over the lattice (unnormalized, i.e. genuine
//! integrals over the cube); sup norms are lattice maxima; the Lipschitz and
//! Hoelder estimates use nearest-neighbour differences. On a periodic cube the
//! lattice is the domain grid; on whole space it is a cube covering the
//! support radius.

use crate::error::Result;
use crate::math::Vec3;

use super::{Domain, VectorField};

#[derive(Clone, Debug)]
pub struct FieldNorms {
    pub sup_norm: f64,
    pub grad_sup_norm: f64,
    /// (q, ||u||_{L^q}) pairs.
    pub lq_norms: Vec<(f64, f64)>,
    /// (q, ||grad u||_{L^q}) pairs, Frobenius pointwise.
    pub grad_lq_norms: Vec<(f64, f64)>,
    pub lipschitz_est: f64,
    pub holder_alpha: f64,
    pub holder_seminorm: f64,
}

/// Sampling lattice for norm estimation.
struct Lattice {
    points: Vec<Vec3>,
    weight: f64,
    /// neighbour pairs (index, index, distance)
    pairs: Vec<(usize, usize, f64)>,
}

fn lattice_for(dom: &Domain) -> Lattice {
    match *dom {
        Domain::PeriodicCube { side, grid_n } => {
            let n = grid_n;
            let h = side / n as f64;
            let mut points = Vec::with_capacity(n * n * n);
            for ix in 0..n {
                for iy in 0..n {
                    for iz in 0..n {
                        points.push(Vec3::new(ix as f64 * h, iy as f64 * h, iz as f64 * h));
                    }
                }
            }
            let idx = |ix: usize, iy: usize, iz: usize| (ix * n + iy) * n + iz;
            let mut pairs = Vec::new();
            for ix in 0..n {
                for iy in 0..n {
                    for iz in 0..n {
                        let i = idx(ix, iy, iz);
                        pairs.push((i, idx((ix + 1) % n, iy, iz), h));
                        pairs.push((i, idx(ix, (iy + 1) % n, iz), h));
                        pairs.push((i, idx(ix, iy, (iz + 1) % n), h));
                    }
                }
            }
            Lattice { points, weight: h * h * h, pairs }
        }
        Domain::WholeSpace { support_radius } => {
            // Cover [-R, R]^3 with an odd lattice so the origin is a node.
            let n = 33usize;
            let r = support_radius;
            let h = 2.0 * r / (n - 1) as f64;
            let mut points = Vec::with_capacity(n * n * n);
            for ix in 0..n {
                for iy in 0..n {
                    for iz in 0..n {
                        points.push(Vec3::new(
                            -r + ix as f64 * h,
                            -r + iy as f64 * h,
                            -r + iz as f64 * h,
                        ));
                    }
                }
            }
            let idx = |ix: usize, iy: usize, iz: usize| (ix * n + iy) * n + iz;
            let mut pairs = Vec::new();
            for ix in 0..n {
                for iy in 0..n {
                    for iz in 0..n {
                        let i = idx(ix, iy, iz);
                        if ix + 1 < n {
                            pairs.push((i, idx(ix + 1, iy, iz), h));
                        }
                        if iy + 1 < n {
                            pairs.push((i, idx(ix, iy + 1, iz), h));
                        }
                        if iz + 1 < n {
                            pairs.push((i, idx(ix, iy, iz + 1), h));
                        }
                    }
                }
            }
            Lattice { points, weight: h * h * h, pairs }
        }
    }
}

/// Compute lattice norms of a vector field at time t. `qs` selects the L^q
/// exponents, `holder_alpha` the Hoelder seminorm exponent.
pub fn norms(
    f: &VectorField,
    t: f64,
    dom: &Domain,
    qs: &[f64],
    holder_alpha: f64,
) -> Result<FieldNorms> {
    let lat = lattice_for(dom);
    let mut vals = Vec::with_capacity(lat.points.len());
    let mut grads = Vec::with_capacity(lat.points.len());
    for &p in &lat.points {
        vals.push(f.eval(t, p)?);
        grads.push(f.gradient(t, p)?);
    }
    let sup = vals.iter().fold(0.0f64, |a, v| a.max(v.norm()));
    let gsup = grads.iter().fold(0.0f64, |a, g| a.max(g.frobenius()));
    let lq = |q: f64, mags: &dyn Fn(usize) -> f64| -> f64 {
        let s: f64 = (0..lat.points.len()).map(|i| mags(i).powf(q)).sum();
        (s * lat.weight).powf(1.0 / q)
    };
    let lq_norms = qs.iter().map(|&q| (q, lq(q, &|i| vals[i].norm()))).collect();
    let grad_lq_norms = qs.iter().map(|&q| (q, lq(q, &|i| grads[i].frobenius()))).collect();
    let mut lip: f64 = 0.0;
    let mut hold: f64 = 0.0;
    for &(i, j, d) in &lat.pairs {
        let diff = (vals[i] - vals[j]).norm();
        lip = lip.max(diff / d);
        hold = hold.max(diff / d.powf(holder_alpha));
    }
    Ok(FieldNorms {
        sup_norm: sup,
        grad_sup_norm: gsup,
        lq_norms,
        grad_lq_norms,
        lipschitz_est: lip,
        holder_alpha,
        holder_seminorm: hold,
    })
}
