//! Fourier (x1, x2 on the unit torus) times Chebyshev-Lobatto (x3 in [0,1])
//! collocation, with a Neumann Poisson solver per Fourier mode.

use crate::error::{Error, Result};
use crate::quadrature::{cheb_diff01, cheb_lobatto01, clenshaw_curtis01};
use nalgebra::{DMatrix, DVector, LU};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

/// A scalar field, index `(i1 * n2 + i2) * m3 + i3`.
pub type Field = Vec<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolution {
    pub n1: usize,
    pub n2: usize,
    pub m3: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Resolution { n1: 16, n2: 16, m3: 33 }
    }
}

pub struct SpatialGrid {
    pub res: Resolution,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x3: Vec<f64>,
    pub d3: DMatrix<f64>,
    pub d33: DMatrix<f64>,
    pub w3: Vec<f64>,
    fft1: Arc<dyn Fft<f64>>,
    ifft1: Arc<dyn Fft<f64>>,
    fft2: Arc<dyn Fft<f64>>,
    ifft2: Arc<dyn Fft<f64>>,
    // Neumann Helmholtz factorizations keyed by mode (k1, k2) with k != 0
    modes: Vec<Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>>,
    zero_mode: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl std::fmt::Debug for SpatialGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpatialGrid").field("res", &self.res).finish()
    }
}

/// Signed wavenumber of FFT bin `i` out of `n`; the Nyquist bin maps to 0 for
/// odd derivatives (see `deriv_factor`).
fn wavenumber(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

impl SpatialGrid {
    pub fn new(res: Resolution) -> Result<Self> {
        if res.n1 < 2 || res.n2 < 2 || res.m3 < 5 {
            return Err(Error::Config("spatial grid too small".into()));
        }
        let x1 = (0..res.n1).map(|i| i as f64 / res.n1 as f64).collect();
        let x2 = (0..res.n2).map(|i| i as f64 / res.n2 as f64).collect();
        let x3 = cheb_lobatto01(res.m3);
        let d3 = cheb_diff01(res.m3);
        let d33 = &d3 * &d3;
        let w3 = clenshaw_curtis01(res.m3);
        let mut planner = FftPlanner::new();
        let fft1 = planner.plan_fft_forward(res.n1);
        let ifft1 = planner.plan_fft_inverse(res.n1);
        let fft2 = planner.plan_fft_forward(res.n2);
        let ifft2 = planner.plan_fft_inverse(res.n2);
        let m = res.m3;
        let mut modes = Vec::with_capacity(res.n1 * res.n2);
        for i1 in 0..res.n1 {
            for i2 in 0..res.n2 {
                if i1 == 0 && i2 == 0 {
                    modes.push(None);
                    continue;
                }
                let k1 = 2.0 * PI * wavenumber(i1, res.n1) as f64;
                let k2 = 2.0 * PI * wavenumber(i2, res.n2) as f64;
                let mut a = &d33 - DMatrix::<f64>::identity(m, m) * (k1 * k1 + k2 * k2);
                for j in 0..m {
                    a[(0, j)] = d3[(0, j)];
                    a[(m - 1, j)] = d3[(m - 1, j)];
                }
                modes.push(Some(a.lu()));
            }
        }
        // bordered zero-mode system: [A c; w^T 0]
        let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
        for i in 0..m {
            for j in 0..m {
                a[(i, j)] = if i == 0 || i == m - 1 { d3[(i, j)] } else { d33[(i, j)] };
            }
            if i != 0 && i != m - 1 {
                a[(i, m)] = 1.0;
            }
            a[(m, i)] = w3[i];
        }
        let zero_mode = a.lu();
        Ok(SpatialGrid { res, x1, x2, x3, d3, d33, w3, fft1, ifft1, fft2, ifft2, modes, zero_mode })
    }

    pub fn len(&self) -> usize {
        self.res.n1 * self.res.n2 * self.res.m3
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn idx(&self, i1: usize, i2: usize, i3: usize) -> usize {
        (i1 * self.res.n2 + i2) * self.res.m3 + i3
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let m = self.res.m3;
        let i3 = i % m;
        let i2 = (i / m) % self.res.n2;
        let i1 = i / (m * self.res.n2);
        [self.x1[i1], self.x2[i2], self.x3[i3]]
    }

    pub fn sample(&self, f: impl Fn([f64; 3]) -> f64) -> Field {
        (0..self.len()).map(|i| f(self.point(i))).collect()
    }

    pub fn zeros(&self) -> Field {
        vec![0.0; self.len()]
    }

    /// Forward transform in x1, x2 (unnormalised), per x3 node.
    pub fn to_spectral(&self, f: &[f64]) -> Vec<Complex64> {
        let Resolution { n1, n2, m3 } = self.res;
        let mut s: Vec<Complex64> = f.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.transform(&mut s, &self.fft1, &self.fft2);
        debug_assert_eq!(s.len(), n1 * n2 * m3);
        s
    }

    pub fn from_spectral(&self, mut s: Vec<Complex64>) -> Field {
        let Resolution { n1, n2, .. } = self.res;
        self.transform(&mut s, &self.ifft1, &self.ifft2);
        let scale = 1.0 / (n1 * n2) as f64;
        s.iter().map(|c| c.re * scale).collect()
    }

    fn transform(&self, s: &mut [Complex64], f1: &Arc<dyn Fft<f64>>, f2: &Arc<dyn Fft<f64>>) {
        let Resolution { n1, n2, m3 } = self.res;
        let mut buf1 = vec![Complex64::new(0.0, 0.0); n1];
        let mut buf2 = vec![Complex64::new(0.0, 0.0); n2];
        for i3 in 0..m3 {
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    buf2[i2] = s[(i1 * n2 + i2) * m3 + i3];
                }
                f2.process(&mut buf2);
                for i2 in 0..n2 {
                    s[(i1 * n2 + i2) * m3 + i3] = buf2[i2];
                }
            }
            for i2 in 0..n2 {
                for i1 in 0..n1 {
                    buf1[i1] = s[(i1 * n2 + i2) * m3 + i3];
                }
                f1.process(&mut buf1);
                for i1 in 0..n1 {
                    s[(i1 * n2 + i2) * m3 + i3] = buf1[i1];
                }
            }
        }
    }

    fn deriv_factor(&self, i: usize, n: usize) -> f64 {
        if n.is_multiple_of(2) && i == n / 2 {
            0.0
        } else {
            2.0 * PI * wavenumber(i, n) as f64
        }
    }

    fn spectral_deriv(&self, f: &[f64], axis: usize) -> Field {
        let Resolution { n1, n2, m3 } = self.res;
        let mut s = self.to_spectral(f);
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let k = if axis == 0 { self.deriv_factor(i1, n1) } else { self.deriv_factor(i2, n2) };
                let ik = Complex64::new(0.0, k);
                for i3 in 0..m3 {
                    s[(i1 * n2 + i2) * m3 + i3] *= ik;
                }
            }
        }
        self.from_spectral(s)
    }

    pub fn d1(&self, f: &[f64]) -> Field {
        self.spectral_deriv(f, 0)
    }

    pub fn d2(&self, f: &[f64]) -> Field {
        self.spectral_deriv(f, 1)
    }

    pub fn d3(&self, f: &[f64]) -> Field {
        let m = self.res.m3;
        let mut out = vec![0.0; f.len()];
        for (col, o) in f.chunks(m).zip(out.chunks_mut(m)) {
            for i in 0..m {
                o[i] = (0..m).map(|j| self.d3[(i, j)] * col[j]).sum();
            }
        }
        out
    }

    pub fn grad(&self, f: &[f64]) -> [Field; 3] {
        [self.d1(f), self.d2(f), self.d3(f)]
    }

    pub fn div(&self, u: &[Field; 3]) -> Field {
        let a = self.d1(&u[0]);
        let b = self.d2(&u[1]);
        let c = self.d3(&u[2]);
        a.iter().zip(&b).zip(&c).map(|((x, y), z)| x + y + z).collect()
    }

    /// `(a . grad) f`
    pub fn advect(&self, a: &[Field; 3], f: &[f64]) -> Field {
        let g = self.grad(f);
        (0..f.len()).map(|i| a[0][i] * g[0][i] + a[1][i] * g[1][i] + a[2][i] * g[2][i]).collect()
    }

    /// Integral over the unit cell `T^2 x [0,1]`.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        let m = self.res.m3;
        let per: f64 = f.chunks(m).map(|c| c.iter().zip(&self.w3).map(|(a, b)| a * b).sum::<f64>()).sum();
        per / (self.res.n1 * self.res.n2) as f64
    }

    /// Integral over `T^2` of a wall field (length n1*n2).
    pub fn integrate_wall(&self, f: &[f64]) -> f64 {
        f.iter().sum::<f64>() / (self.res.n1 * self.res.n2) as f64
    }

    /// Trace at x3 = 0 (`top == false`) or x3 = 1.
    pub fn trace(&self, f: &[f64], top: bool) -> Vec<f64> {
        let m = self.res.m3;
        let i3 = if top { m - 1 } else { 0 };
        f.chunks(m).map(|c| c[i3]).collect()
    }

    /// Solve `Lap p = s` with `d3 p = g0` at x3 = 0 and `d3 p = g1` at x3 = 1,
    /// zero mean. Returns `(p, defect)` where the defect is the spatial
    /// constant subtracted from `s` to make the problem compatible.
    pub fn poisson_neumann(&self, s: &[f64], g0: &[f64], g1: &[f64]) -> (Field, f64) {
        let Resolution { n1, n2, m3 } = self.res;
        let mut ss = self.to_spectral(s);
        let gs0 = self.wall_spectral(g0);
        let gs1 = self.wall_spectral(g1);
        let mut defect = 0.0;
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let mode = i1 * n2 + i2;
                let base = mode * m3;
                let mut re = DVector::<f64>::zeros(m3);
                let mut im = DVector::<f64>::zeros(m3);
                for i3 in 0..m3 {
                    re[i3] = ss[base + i3].re;
                    im[i3] = ss[base + i3].im;
                }
                re[0] = gs0[mode].re;
                im[0] = gs0[mode].im;
                re[m3 - 1] = gs1[mode].re;
                im[m3 - 1] = gs1[mode].im;
                let (xr, xi) = match &self.modes[mode] {
                    Some(lu) => (lu.solve(&re).unwrap(), lu.solve(&im).unwrap()),
                    None => {
                        let mut b = DVector::<f64>::zeros(m3 + 1);
                        b.rows_mut(0, m3).copy_from(&re);
                        let x = self.zero_mode.solve(&b).unwrap();
                        // unnormalised transform: the mode carries a factor n1*n2
                        defect = x[m3] / (n1 * n2) as f64;
                        (x.rows(0, m3).into_owned(), DVector::<f64>::zeros(m3))
                    }
                };
                for i3 in 0..m3 {
                    ss[base + i3] = Complex64::new(xr[i3], xi[i3]);
                }
            }
        }
        (self.from_spectral(ss), defect)
    }

    fn wall_spectral(&self, g: &[f64]) -> Vec<Complex64> {
        let Resolution { n1, n2, .. } = self.res;
        let mut s: Vec<Complex64> = g.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let mut buf = vec![Complex64::new(0.0, 0.0); n2];
        for i1 in 0..n1 {
            buf.copy_from_slice(&s[i1 * n2..(i1 + 1) * n2]);
            self.fft2.process(&mut buf);
            s[i1 * n2..(i1 + 1) * n2].copy_from_slice(&buf);
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); n1];
        for i2 in 0..n2 {
            for i1 in 0..n1 {
                buf[i1] = s[i1 * n2 + i2];
            }
            self.fft1.process(&mut buf);
            for i1 in 0..n1 {
                s[i1 * n2 + i2] = buf[i1];
            }
        }
        s
    }

    /// Tangential derivatives of a wall field.
    pub fn wall_grad(&self, g: &[f64]) -> [Vec<f64>; 2] {
        // embed as a one-node-thick field
        let Resolution { n1, n2, .. } = self.res;
        let mut out = [vec![0.0; n1 * n2], vec![0.0; n1 * n2]];
        let s = self.wall_spectral(g);
        for (axis, o) in out.iter_mut().enumerate() {
            let mut t = s.clone();
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    let k = if axis == 0 { self.deriv_factor(i1, n1) } else { self.deriv_factor(i2, n2) };
                    t[i1 * n2 + i2] *= Complex64::new(0.0, k);
                }
            }
            // inverse
            let mut buf = vec![Complex64::new(0.0, 0.0); n2];
            for i1 in 0..n1 {
                buf.copy_from_slice(&t[i1 * n2..(i1 + 1) * n2]);
                self.ifft2.process(&mut buf);
                t[i1 * n2..(i1 + 1) * n2].copy_from_slice(&buf);
            }
            let mut buf = vec![Complex64::new(0.0, 0.0); n1];
            for i2 in 0..n2 {
                for i1 in 0..n1 {
                    buf[i1] = t[i1 * n2 + i2];
                }
                self.ifft1.process(&mut buf);
                for i1 in 0..n1 {
                    t[i1 * n2 + i2] = buf[i1];
                }
            }
            for (x, c) in o.iter_mut().zip(&t) {
                *x = c.re / (n1 * n2) as f64;
            }
        }
        out
    }

    /// Barycentric weights for evaluating a column at arbitrary x3 in [0,1].
    pub fn interp_weights(&self, x: f64) -> Vec<f64> {
        let m = self.res.m3;
        let mut w = vec![0.0; m];
        for j in 0..m {
            if (x - self.x3[j]).abs() < 1e-15 {
                w[j] = 1.0;
                return w;
            }
        }
        let mut s = 0.0;
        for j in 0..m {
            let mut bj = if j % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 || j == m - 1 {
                bj *= 0.5;
            }
            w[j] = bj / (x - self.x3[j]);
            s += w[j];
        }
        for v in w.iter_mut() {
            *v /= s;
        }
        w
    }

    /// Column `(i1, i2)` of a field.
    pub fn column<'a>(&self, f: &'a [f64], i1: usize, i2: usize) -> &'a [f64] {
        let m = self.res.m3;
        let b = (i1 * self.res.n2 + i2) * m;
        &f[b..b + m]
    }
}

pub fn axpy(a: f64, x: &[f64], y: &[f64]) -> Field {
    x.iter().zip(y).map(|(p, q)| a * p + q).collect()
}

pub fn l2(g: &SpatialGrid, f: &[f64]) -> f64 {
    let sq: Field = f.iter().map(|x| x * x).collect();
    g.integrate(&sq).max(0.0).sqrt()
}

pub fn max_abs(f: &[f64]) -> f64 {
    f.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> SpatialGrid {
        SpatialGrid::new(Resolution { n1: 8, n2: 6, m3: 17 }).unwrap()
    }

    #[test]
    fn roundtrip_and_derivatives() {
        let g = grid();
        let f = g.sample(|x| (2.0 * PI * x[0]).sin() * (4.0 * PI * x[1]).cos() * x[2].powi(3));
        let back = g.from_spectral(g.to_spectral(&f));
        assert!(f.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-13));
        let d1 = g.d1(&f);
        let d2 = g.d2(&f);
        let d3 = g.d3(&f);
        for i in 0..g.len() {
            let x = g.point(i);
            let e1 = 2.0 * PI * (2.0 * PI * x[0]).cos() * (4.0 * PI * x[1]).cos() * x[2].powi(3);
            let e2 = -4.0 * PI * (2.0 * PI * x[0]).sin() * (4.0 * PI * x[1]).sin() * x[2].powi(3);
            let e3 = 3.0 * (2.0 * PI * x[0]).sin() * (4.0 * PI * x[1]).cos() * x[2].powi(2);
            assert!((d1[i] - e1).abs() < 1e-11 && (d2[i] - e2).abs() < 1e-11 && (d3[i] - e3).abs() < 1e-11);
        }
        let h = g.sample(|x| 1.0 + x[2] * x[2]);
        assert!((g.integrate(&h) - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn neumann_poisson_manufactured() {
        let g = grid();
        // p = cos(2 pi x1) cos(pi x3) + x3^2 (x3 - 1)^2 - mean
        let p = |x: [f64; 3]| (2.0 * PI * x[0]).cos() * (PI * x[2]).cos() + (x[2] * (x[2] - 1.0)).powi(2);
        let lap = |x: [f64; 3]| {
            -5.0 * PI * PI * (2.0 * PI * x[0]).cos() * (PI * x[2]).cos() + 12.0 * x[2] * x[2] - 12.0 * x[2] + 2.0
        };
        let s = g.sample(lap);
        let z = vec![0.0; g.res.n1 * g.res.n2];
        let (sol, defect) = g.poisson_neumann(&s, &z, &z);
        let mean = 1.0 / 30.0;
        assert!(defect.abs() < 1e-10);
        let mut err: f64 = 0.0;
        for i in 0..g.len() {
            err = err.max((sol[i] - (p(g.point(i)) - mean)).abs());
        }
        assert!(err < 1e-9, "{err}");
        // incompatible data: the defect picks up the mismatch
        let s2: Field = s.iter().map(|v| v + 0.25).collect();
        let (_, d2) = g.poisson_neumann(&s2, &z, &z);
        assert!((d2 - 0.25).abs() < 1e-10, "{d2}");
    }

    #[test]
    fn interpolation() {
        let g = grid();
        let col: Vec<f64> = g.x3.iter().map(|x| (3.0 * x).sin()).collect();
        for &x in &[0.0, 0.013, 0.5, 0.77, 1.0] {
            let w = g.interp_weights(x);
            let v: f64 = w.iter().zip(&col).map(|(a, b)| a * b).sum();
            assert!((v - (3.0 * x).sin()).abs() < 1e-12);
        }
    }
}
