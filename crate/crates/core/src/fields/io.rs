//! Grid field serialization.
//!
//! Binary layout (little endian):
//!   u64 grid_n | f64 side | u64 time_count | time_count * f64 times |
//!   frames in time order, each n^3 nodes in index order (ix outer, iz inner),
//!   components (x, y, z) per node for vector fields, one f64 for scalars.
//!
//! CSV layout for vector series: header `t,ix,iy,iz,ux,uy,uz`, one row per
//! (time, node); floats printed with Rust's shortest round-trip formatting so
//! identical data gives identical bytes.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::math::Vec3;

use super::grid::{GridSeries, ScalarGrid, Vec3Grid};

fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_header(w: &mut impl Write, n: usize, side: f64, nt: usize) -> std::io::Result<()> {
    write_u64(w, n as u64)?;
    write_f64(w, side)?;
    write_u64(w, nt as u64)
}

fn read_header(r: &mut impl Read) -> Result<(usize, f64, usize)> {
    let n = read_u64(r)? as usize;
    let side = read_f64(r)?;
    let nt = read_u64(r)? as usize;
    if n == 0 || n > 4096 || nt == 0 || nt > 1_000_000 || !side.is_finite() || side <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "implausible field header: n={n}, side={side}, times={nt}"
        )));
    }
    Ok((n, side, nt))
}

pub fn write_vector_series(w: &mut impl Write, s: &GridSeries<Vec3Grid>) -> std::io::Result<()> {
    let n = s.frames[0].n;
    write_header(w, n, s.frames[0].side, s.times.len())?;
    for &t in &s.times {
        write_f64(w, t)?;
    }
    for frame in &s.frames {
        for v in &frame.data {
            write_f64(w, v.x)?;
            write_f64(w, v.y)?;
            write_f64(w, v.z)?;
        }
    }
    Ok(())
}

pub fn read_vector_series(r: &mut impl Read) -> Result<GridSeries<Vec3Grid>> {
    let (n, side, nt) = read_header(r)?;
    let mut times = Vec::with_capacity(nt);
    for _ in 0..nt {
        times.push(read_f64(r)?);
    }
    let mut frames = Vec::with_capacity(nt);
    for _ in 0..nt {
        let mut g = Vec3Grid::zeros(n, side);
        for v in g.data.iter_mut() {
            *v = Vec3::new(read_f64(r)?, read_f64(r)?, read_f64(r)?);
            if !v.is_finite() {
                return Err(Error::NonFinite { context: "vector field file".into() });
            }
        }
        frames.push(g);
    }
    Ok(GridSeries::new(times, frames))
}

pub fn write_scalar_series(w: &mut impl Write, s: &GridSeries<ScalarGrid>) -> std::io::Result<()> {
    let n = s.frames[0].n;
    write_header(w, n, s.frames[0].side, s.times.len())?;
    for &t in &s.times {
        write_f64(w, t)?;
    }
    for frame in &s.frames {
        for &v in &frame.data {
            write_f64(w, v)?;
        }
    }
    Ok(())
}

pub fn read_scalar_series(r: &mut impl Read) -> Result<GridSeries<ScalarGrid>> {
    let (n, side, nt) = read_header(r)?;
    let mut times = Vec::with_capacity(nt);
    for _ in 0..nt {
        times.push(read_f64(r)?);
    }
    let mut frames = Vec::with_capacity(nt);
    for _ in 0..nt {
        let mut g = ScalarGrid::zeros(n, side);
        for v in g.data.iter_mut() {
            *v = read_f64(r)?;
            if !v.is_finite() {
                return Err(Error::NonFinite { context: "scalar field file".into() });
            }
        }
        frames.push(g);
    }
    Ok(GridSeries::new(times, frames))
}

pub fn vector_series_csv(s: &GridSeries<Vec3Grid>) -> String {
    let mut out = String::from("t,ix,iy,iz,ux,uy,uz\n");
    for (ti, frame) in s.frames.iter().enumerate() {
        let t = s.times[ti];
        let n = frame.n;
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    let v = frame.at(ix, iy, iz);
                    out.push_str(&format!("{t},{ix},{iy},{iz},{},{},{}\n", v.x, v.y, v.z));
                }
            }
        }
    }
    out
}

pub fn scalar_series_csv(s: &GridSeries<ScalarGrid>) -> String {
    let mut out = String::from("t,ix,iy,iz,v\n");
    for (ti, frame) in s.frames.iter().enumerate() {
        let t = s.times[ti];
        let n = frame.n;
        for ix in 0..n {
            for iy in 0..n {
                for iz in 0..n {
                    out.push_str(&format!("{t},{ix},{iy},{iz},{}\n", frame.at(ix, iy, iz)));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::analytic::AnalyticVector;

    #[test]
    fn binary_roundtrip_is_bit_exact() {
        let fam = AnalyticVector::beltrami_unit(0.4);
        let frames: Vec<Vec3Grid> = [0.0, 0.05, 0.1]
            .iter()
            .map(|&t| Vec3Grid::from_fn(6, 2.0 * std::f64::consts::PI, |x| fam.eval(t, x)))
            .collect();
        let s = GridSeries::new(vec![0.0, 0.05, 0.1], frames);
        let mut buf = Vec::new();
        write_vector_series(&mut buf, &s).unwrap();
        let back = read_vector_series(&mut buf.as_slice()).unwrap();
        assert_eq!(s.times, back.times);
        for (a, b) in s.frames.iter().zip(&back.frames) {
            for (u, v) in a.data.iter().zip(&b.data) {
                assert_eq!(u.x.to_bits(), v.x.to_bits());
                assert_eq!(u.y.to_bits(), v.y.to_bits());
                assert_eq!(u.z.to_bits(), v.z.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let s = GridSeries::single(0.0, ScalarGrid::from_fn(4, 1.0, |x| x.x));
        let mut buf = Vec::new();
        write_scalar_series(&mut buf, &s).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(read_scalar_series(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn nonfinite_payload_is_rejected() {
        let mut g = ScalarGrid::zeros(2, 1.0);
        g.data[3] = f64::NAN;
        let s = GridSeries::single(0.0, g);
        let mut buf = Vec::new();
        write_scalar_series(&mut buf, &s).unwrap();
        let err = read_scalar_series(&mut buf.as_slice());
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn csv_has_expected_shape() {
        let s = GridSeries::single(0.25, Vec3Grid::from_fn(2, 1.0, |x| x));
        let csv = vector_series_csv(&s);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,ix,iy,iz,ux,uy,uz");
        assert_eq!(lines.len(), 1 + 8);
        assert!(lines[1].starts_with("0.25,0,0,0,"));
    }
}
