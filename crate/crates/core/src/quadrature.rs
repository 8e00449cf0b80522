//! Gauss rules from three-term recurrences, Chebyshev-Lobatto utilities and a
//! product rule on the unit sphere.
//!
//! Gauss rules are computed by Golub-Welsch (symmetric tridiagonal eigenproblem),
//! then every node is polished by Newton on the orthonormal recurrence and the
//! weights are taken from the Christoffel function, which keeps the small
//! tail weights accurate to full relative precision.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of a one-dimensional rule.
#[derive(Clone, Debug)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

// orthonormal recurrence  x p_k = b_{k+1} p_{k+1} + a_k p_k + b_k p_{k-1},
// with p_0 = 1/sqrt(mass)
fn gauss_from_recurrence(a: &[f64], b: &[f64], mass: f64) -> Rule {
    let n = a.len();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jac[(i, i)] = a[i];
        if i + 1 < n {
            jac[(i, i + 1)] = b[i + 1];
            jac[(i + 1, i)] = b[i + 1];
        }
    }
    let eig = SymmetricEigen::new(jac);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|x, y| x.partial_cmp(y).unwrap());

    // p_0..p_n at x, plus derivative of p_n
    let eval = |x: f64| -> (Vec<f64>, f64) {
        let mut p = vec![0.0; n + 1];
        let mut dp = vec![0.0; n + 1];
        p[0] = 1.0 / mass.sqrt();
        for k in 0..n {
            let prev = if k > 0 { p[k - 1] } else { 0.0 };
            let dprev = if k > 0 { dp[k - 1] } else { 0.0 };
            let bk = if k > 0 { b[k] } else { 0.0 };
            let bk1 = if k + 1 < n { b[k + 1] } else { b_next(a, b, n) };
            p[k + 1] = ((x - a[k]) * p[k] - bk * prev) / bk1;
            dp[k + 1] = (p[k] + (x - a[k]) * dp[k] - bk * dprev) / bk1;
        }
        (p, dp[n])
    };

    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (p, dpn) = eval(*x);
            if dpn != 0.0 {
                *x -= p[n] / dpn;
            }
        }
        let (p, _) = eval(*x);
        let s: f64 = p[..n].iter().map(|v| v * v).sum();
        weights.push(1.0 / s);
    }
    Rule { nodes, weights }
}

// only the zeros of p_n matter, so any positive scale works for the last step
fn b_next(_a: &[f64], b: &[f64], n: usize) -> f64 {
    if n > 1 {
        b[n - 1].max(1.0)
    } else {
        1.0
    }
}

/// Gauss-Hermite rule for the standard normal density (weights sum to 1).
pub fn gauss_hermite(n: usize) -> Rule {
    let a = vec![0.0; n];
    let b: Vec<f64> = (0..n).map(|k| (k as f64).sqrt()).collect();
    gauss_from_recurrence(&a, &b, 1.0)
}

/// Generalized Gauss-Laguerre rule for t^alpha e^{-t} / Gamma(alpha+1) on (0, inf).
pub fn gauss_laguerre(n: usize, alpha: f64) -> Rule {
    let a: Vec<f64> = (0..n).map(|k| 2.0 * k as f64 + 1.0 + alpha).collect();
    let b: Vec<f64> = (0..n).map(|k| (k as f64 * (k as f64 + alpha)).sqrt()).collect();
    gauss_from_recurrence(&a, &b, 1.0)
}

/// Gauss-Legendre on [-1, 1] (weights sum to 2).
pub fn gauss_legendre(n: usize) -> Rule {
    let a = vec![0.0; n];
    let b: Vec<f64> = (0..n)
        .map(|k| {
            let k = k as f64;
            if k == 0.0 {
                0.0
            } else {
                k / (4.0 * k * k - 1.0).sqrt()
            }
        })
        .collect();
    gauss_from_recurrence(&a, &b, 2.0)
}

/// Product rule on S^2 normalised to mean value: Gauss-Legendre in cos(theta) and
/// an equispaced azimuth. Exact for spherical polynomials up to degree
/// `min(2*n_theta - 1, n_phi - 1)`.
#[derive(Clone, Debug)]
pub struct SphereRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl SphereRule {
    pub fn new(n_theta: usize, n_phi: usize) -> Self {
        let gl = gauss_legendre(n_theta);
        let mut points = Vec::with_capacity(n_theta * n_phi);
        let mut weights = Vec::with_capacity(n_theta * n_phi);
        for (z, wz) in gl.nodes.iter().zip(&gl.weights) {
            let s = (1.0 - z * z).max(0.0).sqrt();
            for j in 0..n_phi {
                let phi = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / n_phi as f64;
                points.push([s * phi.cos(), s * phi.sin(), *z]);
                weights.push(wz / (2.0 * n_phi as f64));
            }
        }
        SphereRule { points, weights }
    }

    /// Smallest rule exact for degree `deg`.
    pub fn for_degree(deg: usize) -> Self {
        SphereRule::new(deg / 2 + 1, deg + 1 + (deg + 1) % 2)
    }
}

/// Chebyshev-Gauss-Lobatto points mapped to [0, 1], ascending.
pub fn cheb_lobatto01(m: usize) -> Vec<f64> {
    let n = (m - 1) as f64;
    (0..m)
        .map(|j| 0.5 * (1.0 - (std::f64::consts::PI * j as f64 / n).cos()))
        .collect()
}

/// Differentiation matrix on `cheb_lobatto01(m)` (row-major m x m).
pub fn cheb_diff01(m: usize) -> DMatrix<f64> {
    let n = m - 1;
    // standard matrix on x_j = cos(pi j / n), descending; we use ascending t = (1-x)/2
    let x: Vec<f64> = (0..m)
        .map(|j| (std::f64::consts::PI * j as f64 / n as f64).cos())
        .collect();
    let c = |j: usize| -> f64 {
        let base = if j == 0 || j == n { 2.0 } else { 1.0 };
        if j.is_multiple_of(2) {
            base
        } else {
            -base
        }
    };
    let mut d = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                d[(i, j)] = c(i) / c(j) / (x[i] - x[j]);
            }
        }
    }
    // negative-sum trick for the diagonal
    for i in 0..m {
        let s: f64 = (0..m).filter(|&j| j != i).map(|j| d[(i, j)]).sum();
        d[(i, i)] = -s;
    }
    // d/dt = -2 d/dx
    d * -2.0
}

/// Clenshaw-Curtis weights on `cheb_lobatto01(m)` for integrals over [0, 1].
pub fn clenshaw_curtis01(m: usize) -> Vec<f64> {
    let n = m - 1;
    let mut w = vec![0.0; m];
    let pi = std::f64::consts::PI;
    for (j, wj) in w.iter_mut().enumerate() {
        let theta = pi * j as f64 / n as f64;
        let mut s = 0.0;
        for k in 0..=n / 2 {
            let bk = if k == 0 || (n.is_multiple_of(2) && k == n / 2) { 1.0 } else { 2.0 };
            s += bk / (1.0 - 4.0 * (k * k) as f64) * (2.0 * k as f64 * theta).cos();
        }
        let cj = if j == 0 || j == n { 1.0 } else { 2.0 };
        *wj = cj / n as f64 * s;
    }
    // weights above are for [-1,1]; halve for [0,1]
    w.iter().map(|v| 0.5 * v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments() {
        let r = gauss_hermite(24);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let m2 = r.integrate(|x| x * x);
        let m4 = r.integrate(|x| x.powi(4));
        let m10 = r.integrate(|x| x.powi(10));
        assert!((m2 - 1.0).abs() < 1e-13);
        assert!((m4 - 3.0).abs() < 1e-12);
        assert!((m10 - 945.0).abs() < 1e-9);
        // symmetric nodes
        for (a, b) in r.nodes.iter().zip(r.nodes.iter().rev()) {
            assert!((a + b).abs() < 1e-13);
        }
    }

    #[test]
    fn laguerre_moments() {
        // E[t^k] under t^a e^-t / Gamma(a+1) is (a+1)(a+2)...(a+k)
        for &alpha in &[0.0, 0.5, 1.0] {
            let r = gauss_laguerre(8, alpha);
            for k in 0..10 {
                let exact: f64 = (1..=k).map(|j| alpha + j as f64).product();
                let got = r.integrate(|t| t.powi(k));
                assert!((got - exact).abs() < 1e-11 * exact.max(1.0), "{alpha} {k}");
            }
        }
    }

    #[test]
    fn legendre_and_sphere() {
        let r = gauss_legendre(6);
        assert!((r.integrate(|x| x.powi(10)) - 2.0 / 11.0).abs() < 1e-14);
        let s = SphereRule::for_degree(8);
        let mean = |f: &dyn Fn([f64; 3]) -> f64| -> f64 {
            s.points.iter().zip(&s.weights).map(|(p, w)| w * f(*p)).sum()
        };
        assert!((mean(&|_| 1.0) - 1.0).abs() < 1e-14);
        assert!((mean(&|p| p[0] * p[0]) - 1.0 / 3.0).abs() < 1e-14);
        assert!((mean(&|p| p[0].powi(4)) - 0.2).abs() < 1e-14);
        assert!((mean(&|p| p[0] * p[0] * p[1] * p[1] * p[2].powi(4)) - 1.0 / 315.0).abs() < 1e-14);
    }

    #[test]
    fn chebyshev_tools() {
        let m = 17;
        let t = cheb_lobatto01(m);
        let d = cheb_diff01(m);
        let f: Vec<f64> = t.iter().map(|x| x.powi(5)).collect();
        for i in 0..m {
            let df: f64 = (0..m).map(|j| d[(i, j)] * f[j]).sum();
            assert!((df - 5.0 * t[i].powi(4)).abs() < 1e-11);
        }
        let w = clenshaw_curtis01(m);
        let int: f64 = w.iter().zip(&t).map(|(w, x)| w * x.powi(6)).sum();
        assert!((int - 1.0 / 7.0).abs() < 1e-14);
        let int: f64 = w.iter().zip(&t).map(|(w, x)| w * (3.0 * x).sin()).sum();
        assert!((int - (1.0 - 3f64.cos()) / 3.0).abs() < 1e-13);
    }
}
