//! Orthonormal probabilists' Hermite functions and the combinatorial
//! coefficients used by the Galerkin collision tables.
//!
//! `h_k` is normalised against the standard normal density, so that
//! `E[h_j h_k] = delta_jk`. In three dimensions `h_a(v) = h_a1(v1) h_a2(v2) h_a3(v3)`.

/// Values `h_0(x) .. h_n(x)`.
pub fn hermite_values(x: f64, n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n + 1];
    fill_hermite(x, &mut h);
    h
}

pub fn fill_hermite(x: f64, h: &mut [f64]) {
    if h.is_empty() {
        return;
    }
    h[0] = 1.0;
    if h.len() > 1 {
        h[1] = x;
    }
    for k in 1..h.len() - 1 {
        let kf = k as f64;
        h[k + 1] = (x * h[k] - kf.sqrt() * h[k - 1]) / (kf + 1.0).sqrt();
    }
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

pub fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// `E[h_a h_b h_c]` for one dimension; also the coefficient of `h_c` in `h_a h_b`.
pub fn triple(a: usize, b: usize, c: usize) -> f64 {
    let s2 = a + b + c;
    if s2 % 2 == 1 {
        return 0.0;
    }
    let s = s2 / 2;
    if s < a || s < b || s < c {
        return 0.0;
    }
    (factorial(a) * factorial(b) * factorial(c)).sqrt()
        / (factorial(s - a) * factorial(s - b) * factorial(s - c))
}

/// Coefficient of `h_g(X) h_d(Y)` in `h_{g+d}((X+Y)/sqrt2)`.
pub fn split(g: usize, d: usize) -> f64 {
    let a = g + d;
    2f64.powf(-(a as f64) / 2.0) * (factorial(a) / (factorial(g) * factorial(d))).sqrt()
}

pub type MultiIndex = [usize; 3];

pub fn degree(a: &MultiIndex) -> usize {
    a[0] + a[1] + a[2]
}

/// All multi-indices of total degree `<= d`, graded then lexicographic.
#[derive(Clone, Debug)]
pub struct MultiIndexSet {
    pub max_degree: usize,
    pub list: Vec<MultiIndex>,
    lookup: Vec<usize>,
}

impl MultiIndexSet {
    pub fn new(max_degree: usize) -> Self {
        let mut list = Vec::new();
        for n in 0..=max_degree {
            for a in (0..=n).rev() {
                for b in (0..=n - a).rev() {
                    list.push([a, b, n - a - b]);
                }
            }
        }
        let s = max_degree + 1;
        let mut lookup = vec![usize::MAX; s * s * s];
        for (i, m) in list.iter().enumerate() {
            lookup[(m[0] * s + m[1]) * s + m[2]] = i;
        }
        MultiIndexSet { max_degree, list, lookup }
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn index(&self, m: &MultiIndex) -> Option<usize> {
        if degree(m) > self.max_degree {
            return None;
        }
        let s = self.max_degree + 1;
        let i = self.lookup[(m[0] * s + m[1]) * s + m[2]];
        (i != usize::MAX).then_some(i)
    }

    /// Number of indices with degree `<= d`.
    pub fn count_upto(d: usize) -> usize {
        (d + 1) * (d + 2) * (d + 3) / 6
    }

    /// Evaluate every basis polynomial at `v`.
    pub fn eval(&self, v: [f64; 3], out: &mut [f64]) {
        let d = self.max_degree;
        let hx = hermite_values(v[0], d);
        let hy = hermite_values(v[1], d);
        let hz = hermite_values(v[2], d);
        for (o, m) in out.iter_mut().zip(&self.list) {
            *o = hx[m[0]] * hy[m[1]] * hz[m[2]];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::gauss_hermite;

    #[test]
    fn orthonormal() {
        let r = gauss_hermite(20);
        for j in 0..12 {
            for k in 0..12 {
                let v = r.integrate(|x| {
                    let h = hermite_values(x, 12);
                    h[j] * h[k]
                });
                let e = if j == k { 1.0 } else { 0.0 };
                assert!((v - e).abs() < 1e-12, "{j} {k} {v}");
            }
        }
    }

    #[test]
    fn triple_matches_quadrature() {
        let r = gauss_hermite(20);
        for a in 0..7 {
            for b in 0..7 {
                for c in 0..7 {
                    let q = r.integrate(|x| {
                        let h = hermite_values(x, 7);
                        h[a] * h[b] * h[c]
                    });
                    assert!((q - triple(a, b, c)).abs() < 1e-11, "{a}{b}{c}");
                }
            }
        }
    }

    #[test]
    fn split_identity() {
        // h_a((X+Y)/sqrt2) = sum_{g+d=a} split(g,d) h_g(X) h_d(Y)
        for a in 0..8 {
            for &(x, y) in &[(0.3, -1.2), (1.7, 0.4), (-0.8, -0.9)] {
                let lhs = hermite_values((x + y) / 2f64.sqrt(), a)[a];
                let hx = hermite_values(x, a);
                let hy = hermite_values(y, a);
                let rhs: f64 = (0..=a).map(|g| split(g, a - g) * hx[g] * hy[a - g]).sum();
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn index_roundtrip() {
        let s = MultiIndexSet::new(8);
        assert_eq!(s.len(), 165);
        assert_eq!(MultiIndexSet::count_upto(4), 35);
        for (i, m) in s.list.iter().enumerate() {
            assert_eq!(s.index(m), Some(i));
        }
        assert_eq!(s.index(&[0, 0, 0]), Some(0));
        assert_eq!(s.index(&[5, 4, 0]), None);
    }
}
