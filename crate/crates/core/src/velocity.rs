//! Velocity space: the tensor Gauss-Hermite grid, macro-micro split, Burnett
//! functions and the closed-form quadratic micro terms.
//!
//! A kinetic function `f` (the paper-level `F/sqrt(mu)`) is held in two
//! equivalent forms:
//! * nodal: `KineticFunction::values[q] = f(v_q)/sqrt(mu(v_q))`, so the L2 pairing
//!   is `sum_q w_q a_q b_q` with the Gauss-Hermite weights;
//! * modal: coefficients against the orthonormal functions `h_a sqrt(mu)`,
//!   `|a| <= degree`, graded order of [`MultiIndexSet`].
//!
//! Every formula below that mentions `sqrt(mu)` refers to the function itself;
//! the stored numbers never carry that factor.

use crate::error::{Error, Result};
use crate::hermite::{MultiIndex, MultiIndexSet};
use crate::quadrature::gauss_hermite;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type Coeffs = Vec<f64>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroState {
    pub rho: f64,
    pub u: [f64; 3],
    pub theta: f64,
}

impl MacroState {
    pub fn new(rho: f64, u: [f64; 3], theta: f64) -> Self {
        MacroState { rho, u, theta }
    }

    pub fn is_finite(&self) -> bool {
        self.rho.is_finite() && self.theta.is_finite() && self.u.iter().all(|x| x.is_finite())
    }

    pub fn reflect(&self) -> Self {
        MacroState { rho: self.rho, u: [self.u[0], self.u[1], -self.u[2]], theta: self.theta }
    }

    pub fn scale(&self, s: f64) -> Self {
        MacroState {
            rho: s * self.rho,
            u: [s * self.u[0], s * self.u[1], s * self.u[2]],
            theta: s * self.theta,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        MacroState {
            rho: self.rho + o.rho,
            u: [self.u[0] + o.u[0], self.u[1] + o.u[1], self.u[2] + o.u[2]],
            theta: self.theta + o.theta,
        }
    }
}

/// Nodal values `f/sqrt(mu)` on a [`VelocityGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct KineticFunction {
    pub values: Vec<f64>,
}

/// Tensor Gauss-Hermite grid plus the modal basis it resolves exactly.
#[derive(Clone, Debug)]
pub struct VelocityGrid {
    pub per_axis: usize,
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub basis: MultiIndexSet,
    // phi[q * K + k] = h_k(v_q)
    phi: Vec<f64>,
    mirror: Vec<usize>,
    hash: String,
}

impl VelocityGrid {
    /// `per_axis` nodes per axis, modal degree `degree`. Products of two
    /// degree-`degree` functions are integrated exactly when `2*degree < 2*per_axis`.
    pub fn new(per_axis: usize, degree: usize) -> Result<Self> {
        if per_axis < 2 || degree == 0 {
            return Err(Error::Config("velocity grid needs per_axis >= 2 and degree >= 1".into()));
        }
        if degree + 1 > per_axis {
            return Err(Error::Config(format!(
                "velocity grid too coarse: {per_axis} nodes per axis cannot resolve degree {degree}"
            )));
        }
        let r = gauss_hermite(per_axis);
        let m = per_axis;
        let mut nodes = Vec::with_capacity(m * m * m);
        let mut weights = Vec::with_capacity(m * m * m);
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    nodes.push([r.nodes[i], r.nodes[j], r.nodes[k]]);
                    weights.push(r.weights[i] * r.weights[j] * r.weights[k]);
                }
            }
        }
        let mirror = (0..m * m * m)
            .map(|q| {
                let (ij, k) = (q / m, q % m);
                ij * m + (m - 1 - k)
            })
            .collect();
        let basis = MultiIndexSet::new(degree);
        let kk = basis.len();
        let mut phi = vec![0.0; nodes.len() * kk];
        for (q, v) in nodes.iter().enumerate() {
            basis.eval(*v, &mut phi[q * kk..(q + 1) * kk]);
        }
        let mut h = Sha256::new();
        h.update(format!("gauss-hermite-tensor;per_axis={per_axis};degree={degree}"));
        let hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(VelocityGrid { per_axis, nodes, weights, basis, phi, mirror, hash })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.basis.max_degree
    }

    pub fn n_modes(&self) -> usize {
        self.basis.len()
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Node index of `R_x v_q`, i.e. `(v1, v2, -v3)`.
    pub fn mirror(&self, q: usize) -> usize {
        self.mirror[q]
    }

    pub fn phi_row(&self, q: usize) -> &[f64] {
        let k = self.n_modes();
        &self.phi[q * k..(q + 1) * k]
    }

    pub fn sample(&self, f: impl Fn([f64; 3]) -> f64) -> KineticFunction {
        KineticFunction { values: self.nodes.iter().map(|v| f(*v)).collect() }
    }

    pub fn inner(&self, a: &KineticFunction, b: &KineticFunction) -> f64 {
        self.weights
            .iter()
            .zip(a.values.iter().zip(&b.values))
            .map(|(w, (x, y))| w * x * y)
            .sum()
    }

    pub fn norm(&self, a: &KineticFunction) -> f64 {
        self.inner(a, a).sqrt()
    }

    pub fn to_coeffs(&self, g: &KineticFunction) -> Coeffs {
        let k = self.n_modes();
        let mut c = vec![0.0; k];
        for (q, (&w, &x)) in self.weights.iter().zip(&g.values).enumerate() {
            let s = w * x;
            if s != 0.0 {
                for (ci, p) in c.iter_mut().zip(self.phi_row(q)) {
                    *ci += s * p;
                }
            }
        }
        c
    }

    pub fn from_coeffs(&self, c: &[f64]) -> KineticFunction {
        let values = (0..self.len())
            .map(|q| self.phi_row(q).iter().zip(c).map(|(p, x)| p * x).sum())
            .collect();
        KineticFunction { values }
    }

    pub fn reflect(&self, g: &KineticFunction) -> KineticFunction {
        KineticFunction { values: (0..self.len()).map(|q| g.values[self.mirror[q]]).collect() }
    }

    fn check(&self, g: &KineticFunction) -> Result<()> {
        if g.values.len() != self.len() {
            return Err(Error::Config(format!(
                "kinetic function has {} values, grid has {} nodes",
                g.values.len(),
                self.len()
            )));
        }
        if g.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invariant("kinetic function has non-finite values".into()));
        }
        Ok(())
    }

    /// Quadrature-side estimate of how much of `g` the modal basis misses,
    /// relative to `|g|`.
    pub fn unresolved_fraction(&self, g: &KineticFunction) -> f64 {
        let n2 = self.inner(g, g);
        if n2 == 0.0 {
            return 0.0;
        }
        let c = self.to_coeffs(g);
        let c2: f64 = c.iter().map(|x| x * x).sum();
        ((n2 - c2).max(0.0) / n2).sqrt()
    }

    /// Macroscopic state and microscopic remainder, by quadrature against the
    /// collision invariants.
    pub fn project_p(&self, g: &KineticFunction) -> Result<(MacroState, KineticFunction)> {
        self.check(g)?;
        let mut m = [0.0; 5];
        for (q, (&w, &x)) in self.weights.iter().zip(&g.values).enumerate() {
            let v = self.nodes[q];
            let s = w * x;
            m[0] += s;
            m[1] += s * v[0];
            m[2] += s * v[1];
            m[3] += s * v[2];
            m[4] += s * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] - 3.0);
        }
        let st = MacroState::new(m[0], [m[1], m[2], m[3]], m[4] / 3.0);
        let pg = self.maxwellian(&st);
        let micro = KineticFunction {
            values: g.values.iter().zip(&pg.values).map(|(a, b)| a - b).collect(),
        };
        Ok((st, micro))
    }

    /// `{rho + u.v + theta/2 (|v|^2-3)} sqrt(mu)` on the nodes.
    pub fn maxwellian(&self, s: &MacroState) -> KineticFunction {
        self.sample(|v| {
            s.rho
                + s.u[0] * v[0]
                + s.u[1] * v[1]
                + s.u[2] * v[2]
                + 0.5 * s.theta * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] - 3.0)
        })
    }

    pub fn burnett(&self, b: Burnett) -> KineticFunction {
        self.sample(|v| b.eval(v))
    }

    /// The moment table for `F = sqrt(mu) f`.
    pub fn moments(&self, g: &KineticFunction) -> Moments {
        let mut m = Moments::default();
        for (q, (&w, &x)) in self.weights.iter().zip(&g.values).enumerate() {
            let v = self.nodes[q];
            let s = w * x;
            let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            m.mass += s;
            m.energy += s * v2;
            for i in 0..3 {
                m.momentum[i] += s * v[i];
                m.heat[i] += s * v[i] * v2;
                for j in 0..3 {
                    m.stress[i][j] += s * v[i] * v[j];
                }
            }
        }
        m
    }
}

/// Velocity moments `int F`, `int v F`, `int |v|^2 F`, `int v v F`, `int v |v|^2 F`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mass: f64,
    pub momentum: [f64; 3],
    pub energy: f64,
    pub stress: [[f64; 3]; 3],
    pub heat: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Burnett {
    A(usize, usize),
    B(usize),
}

impl Burnett {
    /// Value of the Burnett function divided by `sqrt(mu)`; indices are 0-based.
    pub fn eval(&self, v: [f64; 3]) -> f64 {
        let v2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        match *self {
            Burnett::A(i, j) => v[i] * v[j] - if i == j { v2 / 3.0 } else { 0.0 },
            Burnett::B(i) => 0.5 * v[i] * (v2 - 5.0),
        }
    }

    pub fn coeffs(&self, basis: &MultiIndexSet) -> Coeffs {
        let mut c = vec![0.0; basis.len()];
        let s2 = std::f64::consts::SQRT_2;
        match *self {
            Burnett::A(i, j) if i != j => {
                put(&mut c, basis, unit(i, 1, j, 1), 1.0);
            }
            Burnett::A(i, _) => {
                for k in 0..3 {
                    let w = if k == i { s2 - s2 / 3.0 } else { -s2 / 3.0 };
                    put(&mut c, basis, unit(k, 2, k, 0), w);
                }
            }
            Burnett::B(i) => {
                put(&mut c, basis, unit(i, 3, i, 0), 0.5 * 6f64.sqrt());
                for k in (0..3).filter(|&k| k != i) {
                    put(&mut c, basis, unit(i, 1, k, 2), 0.5 * s2);
                }
            }
        }
        c
    }
}

// multi-index with `a` in slot i and `b` in slot j (added when i == j)
fn unit(i: usize, a: usize, j: usize, b: usize) -> MultiIndex {
    let mut m = [0; 3];
    m[i] += a;
    m[j] += b;
    m
}

fn put(c: &mut [f64], basis: &MultiIndexSet, m: MultiIndex, val: f64) {
    if let Some(k) = basis.index(&m) {
        c[k] += val;
    }
}

fn get(c: &[f64], basis: &MultiIndexSet, m: MultiIndex) -> f64 {
    basis.index(&m).map_or(0.0, |k| c[k])
}

/// Modal counterparts of the nodal operations.
pub mod modal {
    use super::*;

    pub fn macro_state(basis: &MultiIndexSet, c: &[f64]) -> MacroState {
        let s2 = std::f64::consts::SQRT_2;
        let tr: f64 = (0..3).map(|k| get(c, basis, unit(k, 2, k, 0))).sum();
        MacroState::new(
            get(c, basis, [0, 0, 0]),
            [get(c, basis, [1, 0, 0]), get(c, basis, [0, 1, 0]), get(c, basis, [0, 0, 1])],
            s2 * tr / 3.0,
        )
    }

    pub fn maxwellian(basis: &MultiIndexSet, s: &MacroState) -> Coeffs {
        let mut c = vec![0.0; basis.len()];
        put(&mut c, basis, [0, 0, 0], s.rho);
        for i in 0..3 {
            put(&mut c, basis, unit(i, 1, i, 0), s.u[i]);
            put(&mut c, basis, unit(i, 2, i, 0), s.theta / std::f64::consts::SQRT_2);
        }
        c
    }

    pub fn project_p(basis: &MultiIndexSet, c: &[f64]) -> Coeffs {
        maxwellian(basis, &macro_state(basis, c))
    }

    pub fn micro(basis: &MultiIndexSet, c: &[f64]) -> Coeffs {
        let p = project_p(basis, c);
        c.iter().zip(&p).map(|(a, b)| a - b).collect()
    }

    /// `(v1, v2, v3) -> (v1, v2, -v3)`.
    pub fn reflect(basis: &MultiIndexSet, c: &[f64]) -> Coeffs {
        c.iter()
            .zip(&basis.list)
            .map(|(x, m)| if m[2] % 2 == 1 { -x } else { *x })
            .collect()
    }

    /// `(I-P)(f_a f_b / sqrt(mu))` for `f_a = P f_a`, `f_b = P f_b`, written
    /// through the Burnett functions.
    pub fn micro_quadratic(basis: &MultiIndexSet, a: &MacroState, b: &MacroState) -> Coeffs {
        let mut c = vec![0.0; basis.len()];
        let mut add = |src: &Coeffs, s: f64| {
            for (x, y) in c.iter_mut().zip(src) {
                *x += s * y;
            }
        };
        for l in 0..3 {
            for s in 0..3 {
                let w = a.u[l] * b.u[s];
                if w != 0.0 {
                    add(&Burnett::A(l, s).coeffs(basis), w);
                }
            }
            let w = a.theta * b.u[l] + b.theta * a.u[l];
            if w != 0.0 {
                add(&Burnett::B(l).coeffs(basis), w);
            }
        }
        let w = 0.25 * a.theta * b.theta;
        if w != 0.0 {
            add(&quartic_micro(basis), w);
        }
        c
    }

    /// `(I-P){(|v|^2-5)^2 sqrt(mu)}`.
    pub fn quartic_micro(basis: &MultiIndexSet) -> Coeffs {
        let mut c = vec![0.0; basis.len()];
        for k in 0..3 {
            put(&mut c, basis, unit(k, 4, k, 0), 2.0 * 6f64.sqrt());
            for l in (k + 1)..3 {
                put(&mut c, basis, unit(k, 2, l, 2), 4.0);
            }
        }
        c
    }

    pub fn moments(basis: &MultiIndexSet, c: &[f64]) -> Moments {
        let s2 = std::f64::consts::SQRT_2;
        let s6 = 6f64.sqrt();
        let c0 = get(c, basis, [0, 0, 0]);
        let mut m = Moments { mass: c0, ..Default::default() };
        for i in 0..3 {
            m.momentum[i] = get(c, basis, unit(i, 1, i, 0));
            for j in 0..3 {
                m.stress[i][j] = if i == j {
                    s2 * get(c, basis, unit(i, 2, i, 0)) + c0
                } else {
                    get(c, basis, unit(i, 1, j, 1))
                };
            }
            let mut h = s6 * get(c, basis, unit(i, 3, i, 0)) + 5.0 * m.momentum[i];
            for k in (0..3).filter(|&k| k != i) {
                h += s2 * get(c, basis, unit(i, 1, k, 2));
            }
            m.heat[i] = h;
        }
        m.energy = m.stress[0][0] + m.stress[1][1] + m.stress[2][2];
        m
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// `v_j g`, using `v psi_n = sqrt(n+1) psi_{n+1} + sqrt(n) psi_{n-1}`.
    /// Modes raised past the top degree are dropped.
    pub fn times_v(basis: &MultiIndexSet, c: &[f64], j: usize) -> Coeffs {
        let mut out = vec![0.0; basis.len()];
        for (k, m) in basis.list.iter().enumerate() {
            if c[k] == 0.0 {
                continue;
            }
            let n = m[j];
            let mut up = *m;
            up[j] += 1;
            put(&mut out, basis, up, c[k] * ((n + 1) as f64).sqrt());
            if n > 0 {
                let mut dn = *m;
                dn[j] -= 1;
                put(&mut out, basis, dn, c[k] * (n as f64).sqrt());
            }
        }
        out
    }
}
