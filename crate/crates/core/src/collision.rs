//! Hard-sphere linearized collision operator in the Hermite basis.
//!
//! Matrix elements are computed analytically up to one three-dimensional
//! quadrature: with `X = (v+u)/sqrt2`, `Y = (v-u)/sqrt2` and the sigma
//! parametrisation of the post-collisional velocities,
//!
//! ```text
//! int |w.omega| Phi(v', u') d omega = (|w|/2) int_{S^2} Phi d sigma,
//! ```
//!
//! the X-dependence factors out as Hermite triple products and every element
//! reduces to the two tables `E1(d,d') = E[|Y| h_d h_d']` and
//! `E2(d,d') = E[|Y| S[h_d] S[h_d']]` (`S` = spherical mean). Both are
//! integrated exactly with a Gauss-Laguerre rule in `t = |Y|^2/2` times a
//! product rule on the sphere.

use crate::error::{Error, Result};
use crate::hermite::{split, triple, MultiIndex, MultiIndexSet};
use crate::quadrature::{gauss_laguerre, SphereRule};
use crate::velocity::{modal, Burnett, Coeffs};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};

/// Collision frequency `2 pi int |v-u| mu(u) du`.
pub fn nu(v: [f64; 3]) -> f64 {
    let a = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    nu_radial(a)
}

pub fn nu_radial(a: f64) -> f64 {
    let gauss = (2.0 / PI).sqrt() * (-0.5 * a * a).exp();
    let tail = if a < 1e-3 {
        // (a + 1/a) erf(a/sqrt2) for small a
        let x2 = a * a;
        (2.0 / PI).sqrt() * (1.0 + x2 - x2 / 6.0 - x2 * x2 / 6.0 + x2 * x2 / 40.0)
    } else {
        (a + 1.0 / a) * statrs::function::erf::erf(a / SQRT_2)
    };
    2.0 * PI * (gauss + tail)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionMode {
    HardSphere,
    Bgk,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollisionConfig {
    /// Hermite degree of the Galerkin space.
    pub degree: usize,
    /// Highest input degree accepted by the quadratic operator.
    pub gamma_degree: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for CollisionConfig {
    fn default() -> Self {
        CollisionConfig { degree: 8, gamma_degree: 4, cg_tol: 1e-10, cg_max_iter: 2000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportCoefficients {
    pub lambda: f64,
    pub kappa: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
}

/// Assembled operator. Immutable after construction.
#[derive(Clone, Debug)]
pub struct CollisionOperator {
    pub basis: MultiIndexSet,
    pub in_basis: MultiIndexSet,
    pub mode: CollisionMode,
    cfg: CollisionConfig,
    l: DMatrix<f64>,
    nu_gal: DMatrix<f64>,
    nu_chol: Cholesky<f64, nalgebra::Dyn>,
    // gamma[(a * kin + b) * kin + c] = <psi_a, Gamma(psi_b, psi_c)>
    gamma: Vec<f64>,
}

/// `E1`, `E2` over all multi-indices of degree `<= d`.
pub struct RelativeTables {
    pub set: MultiIndexSet,
    pub e1: DMatrix<f64>,
    pub e2: DMatrix<f64>,
}

impl RelativeTables {
    pub fn new(d: usize) -> Self {
        let set = MultiIndexSet::new(d);
        let k = set.len();
        let radial = gauss_laguerre(d / 2 + 2, 1.0);
        let sphere = SphereRule::for_degree(2 * d);
        // E[|Y| F(Y)] = 2 sqrt(2/pi) E_{t ~ t e^-t}[ mean_sigma F(sqrt(2t) sigma) ]
        let pref = 2.0 * (2.0 / PI).sqrt();
        let mut e1 = DMatrix::<f64>::zeros(k, k);
        let mut e2 = DMatrix::<f64>::zeros(k, k);
        let mut h = vec![0.0; k];
        for (&t, &wt) in radial.nodes.iter().zip(&radial.weights) {
            let r = (2.0 * t).sqrt();
            let mut mean = vec![0.0; k];
            let mut acc = DMatrix::<f64>::zeros(k, k);
            for (p, &ws) in sphere.points.iter().zip(&sphere.weights) {
                set.eval([r * p[0], r * p[1], r * p[2]], &mut h);
                let hv = DVector::from_column_slice(&h);
                acc.ger(ws, &hv, &hv, 1.0);
                for (m, x) in mean.iter_mut().zip(&h) {
                    *m += ws * x;
                }
            }
            e1 += acc * (pref * wt);
            let mv = DVector::from_column_slice(&mean);
            e2.ger(pref * wt, &mv, &mv, 1.0);
        }
        RelativeTables { set, e1, e2 }
    }
}

fn sub(a: &MultiIndex, b: &MultiIndex) -> MultiIndex {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn leq(a: &MultiIndex, b: &MultiIndex) -> bool {
    a[0] <= b[0] && a[1] <= b[1] && a[2] <= b[2]
}

fn split3(g: &MultiIndex, d: &MultiIndex) -> f64 {
    split(g[0], d[0]) * split(g[1], d[1]) * split(g[2], d[2])
}

fn triple3(a: &MultiIndex, b: &MultiIndex, c: &MultiIndex) -> f64 {
    triple(a[0], b[0], c[0]) * triple(a[1], b[1], c[1]) * triple(a[2], b[2], c[2])
}

fn below(a: &MultiIndex) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    for i in 0..=a[0] {
        for j in 0..=a[1] {
            for k in 0..=a[2] {
                out.push([i, j, k]);
            }
        }
    }
    out
}

impl CollisionOperator {
    pub fn assemble(cfg: &CollisionConfig) -> Result<Self> {
        if cfg.degree < 3 {
            return Err(Error::Config("collision degree must be at least 3".into()));
        }
        if cfg.gamma_degree > cfg.degree {
            return Err(Error::Config("gamma_degree cannot exceed degree".into()));
        }
        let basis = MultiIndexSet::new(cfg.degree);
        let in_basis = MultiIndexSet::new(cfg.gamma_degree);
        let d_rel = cfg.degree.max(2 * cfg.gamma_degree);
        let tab = RelativeTables::new(d_rel);
        let mm = (&tab.e1 - &tab.e2) * (4.0 * SQRT_2 * PI);
        let k = basis.len();
        let idx = |m: &MultiIndex| tab.set.index(m).expect("relative index in range");

        let mut l = DMatrix::<f64>::zeros(k, k);
        let mut nu_gal = DMatrix::<f64>::zeros(k, k);
        let c_nu = 4.0 * PI / SQRT_2;
        for (ia, a) in basis.list.iter().enumerate() {
            for (ib, b) in basis.list.iter().enumerate().skip(ia) {
                let mut sl = 0.0;
                let mut sn = 0.0;
                for g in below(a) {
                    if !leq(&g, b) {
                        continue;
                    }
                    let da = sub(a, &g);
                    let db = sub(b, &g);
                    let cc = split3(&g, &da) * split3(&g, &db);
                    let (ja, jb) = (idx(&da), idx(&db));
                    sn += cc * tab.e1[(ja, jb)];
                    let (pa, pb) = (da.iter().sum::<usize>(), db.iter().sum::<usize>());
                    if pa % 2 == 0 && pb % 2 == 0 {
                        sl += cc * mm[(ja, jb)];
                    }
                }
                l[(ia, ib)] = sl;
                l[(ib, ia)] = sl;
                nu_gal[(ia, ib)] = c_nu * sn;
                nu_gal[(ib, ia)] = c_nu * sn;
            }
        }

        // gamma_degree = 0 skips the quadratic tensor (linear studies only)
        let gamma = if cfg.gamma_degree == 0 {
            Vec::new()
        } else {
            assemble_gamma(&basis, &in_basis, &tab.set, &mm)
        };
        let nu_chol = Cholesky::new(nu_gal.clone())
            .ok_or_else(|| Error::Solver("collision-frequency Gram matrix not positive".into()))?;
        Ok(CollisionOperator {
            basis,
            in_basis,
            mode: CollisionMode::HardSphere,
            cfg: cfg.clone(),
            l,
            nu_gal,
            nu_chol,
            gamma,
        })
    }

    /// BGK surrogate `nu0 (I-P)` with `nu0 = 1/lambda` of this operator, so that
    /// the viscosity is reproduced. The quadratic operator is kept.
    pub fn bgk_surrogate(&self) -> Result<Self> {
        let lam = self.transport()?.lambda;
        Ok(self.bgk_with(1.0 / lam))
    }

    pub fn bgk_with(&self, nu0: f64) -> Self {
        let k = self.basis.len();
        let mut l = DMatrix::<f64>::zeros(k, k);
        for j in 0..k {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            let m = modal::micro(&self.basis, &e);
            for i in 0..k {
                l[(i, j)] = nu0 * m[i];
            }
        }
        let nu_gal = DMatrix::<f64>::identity(k, k) * nu0;
        let nu_chol = Cholesky::new(nu_gal.clone()).expect("positive multiple of identity");
        CollisionOperator {
            mode: CollisionMode::Bgk,
            l,
            nu_gal,
            nu_chol,
            ..self.clone()
        }
    }

    /// Multiplicative part `nu(v)` of `L = nu - K` for this mode.
    pub fn frequency(&self, v: [f64; 3]) -> f64 {
        match self.mode {
            CollisionMode::HardSphere => nu(v),
            CollisionMode::Bgk => self.nu_gal[(0, 0)],
        }
    }

    pub fn config(&self) -> &CollisionConfig {
        &self.cfg
    }

    pub fn n_modes(&self) -> usize {
        self.basis.len()
    }

    pub fn l_matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn nu_matrix(&self) -> &DMatrix<f64> {
        &self.nu_gal
    }

    pub fn apply_l(&self, c: &[f64]) -> Coeffs {
        (&self.l * DVector::from_column_slice(c)).as_slice().to_vec()
    }

    pub fn nu_inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let bv = &self.nu_gal * DVector::from_column_slice(b);
        modal::dot(a, bv.as_slice())
    }

    pub fn nu_norm(&self, c: &[f64]) -> f64 {
        self.nu_inner(c, c).max(0.0).sqrt()
    }

    fn in_slice<'a>(&self, c: &'a [f64]) -> Result<&'a [f64]> {
        let kin = self.in_basis.len();
        let head: f64 = c[..kin].iter().map(|x| x * x).sum();
        let tail: f64 = c[kin..].iter().map(|x| x * x).sum();
        if tail > 1e-24 * (1.0 + head) {
            return Err(Error::Unsupported(format!(
                "quadratic collision input above degree {}",
                self.in_basis.max_degree
            )));
        }
        Ok(&c[..kin])
    }

    /// `Gamma(g1, g2) = mu^{-1/2} Q(sqrt(mu) g1, sqrt(mu) g2)`, `g1` sitting at the
    /// collision partner. Inputs must lie in the span of degree `<= gamma_degree`.
    pub fn apply_gamma(&self, g1: &[f64], g2: &[f64]) -> Result<Coeffs> {
        if self.gamma.is_empty() {
            return Err(Error::Unsupported("operator assembled without the quadratic tensor".into()));
        }
        let a = self.in_slice(g1)?;
        let b = self.in_slice(g2)?;
        let kin = a.len();
        let mut ab = vec![0.0; kin * kin];
        for i in 0..kin {
            for j in 0..kin {
                ab[i * kin + j] = a[i] * b[j];
            }
        }
        Ok((0..self.basis.len())
            .map(|o| modal::dot(&self.gamma[o * kin * kin..(o + 1) * kin * kin], &ab))
            .collect())
    }

    /// Matrix `M[b][c] = <t, Gamma(psi_b, psi_c)>` over the input basis, so that
    /// `<t, Gamma(g1, g2)> = g1^T M g2`.
    pub fn gamma_form(&self, t: &[f64]) -> Result<DMatrix<f64>> {
        if self.gamma.is_empty() {
            return Err(Error::Unsupported("operator assembled without the quadratic tensor".into()));
        }
        let kin = self.in_basis.len();
        let mut m = DMatrix::<f64>::zeros(kin, kin);
        for (o, &to) in t.iter().enumerate().take(self.basis.len()) {
            if to == 0.0 {
                continue;
            }
            let blk = &self.gamma[o * kin * kin..(o + 1) * kin * kin];
            for b in 0..kin {
                for c in 0..kin {
                    m[(b, c)] += to * blk[b * kin + c];
                }
            }
        }
        Ok(m)
    }

    pub fn apply_gamma_sym(&self, g1: &[f64], g2: &[f64]) -> Result<Coeffs> {
        let x = self.apply_gamma(g1, g2)?;
        let y = self.apply_gamma(g2, g1)?;
        Ok(x.iter().zip(&y).map(|(p, q)| p + q).collect())
    }

    /// Microscopic `g` with `L g = h`, by preconditioned conjugate gradients on
    /// the microscopic subspace (preconditioner: the `nu` Gram matrix).
    pub fn solve_linverse(&self, h: &[f64]) -> Result<(Coeffs, SolveReport)> {
        let basis = &self.basis;
        let hn = self.nu_norm(h);
        let ph = modal::project_p(basis, h);
        let pn = ph.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        if pn > 1e-9 * scale.max(1e-300) {
            return Err(Error::Invariant(format!(
                "right-hand side is not microscopic (|Ph| = {pn:.3e})"
            )));
        }
        let k = basis.len();
        let mut x = vec![0.0; k];
        if hn == 0.0 {
            return Ok((x, SolveReport { iterations: 0, residual: 0.0 }));
        }
        let mut r = modal::micro(basis, h);
        let precond = |r: &[f64]| -> Coeffs {
            let z = self.nu_chol.solve(&DVector::from_column_slice(r));
            modal::micro(basis, z.as_slice())
        };
        let mut z = precond(&r);
        let mut p = z.clone();
        let mut rz = modal::dot(&r, &z);
        let tol = self.cfg.cg_tol * hn;
        for it in 1..=self.cfg.cg_max_iter {
            let ap = modal::micro(basis, &self.apply_l(&p));
            let alpha = rz / modal::dot(&p, &ap);
            for i in 0..k {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            // re-project to stay on the microscopic subspace
            x = modal::micro(basis, &x);
            r = modal::micro(basis, &r);
            let res = self.nu_norm(&r);
            if res <= tol {
                // true residual
                let lx = self.apply_l(&x);
                let tr: Coeffs = lx.iter().zip(h).map(|(a, b)| a - b).collect();
                return Ok((x, SolveReport { iterations: it, residual: self.nu_norm(&tr) / hn }));
            }
            z = precond(&r);
            let rz_new = modal::dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..k {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(Error::Solver(format!(
            "L^-1 conjugate gradients did not converge in {} iterations (residual {:.3e})",
            self.cfg.cg_max_iter,
            self.nu_norm(&r) / hn
        )))
    }

    pub fn linverse(&self, h: &[f64]) -> Result<Coeffs> {
        Ok(self.solve_linverse(h)?.0)
    }

    /// `<A_ij, L^-1 A_ij>` for a pair and `<B_i, L^-1 B_i>` for an index.
    pub fn burnett_pairing(&self, b: Burnett) -> Result<f64> {
        let c = b.coeffs(&self.basis);
        let g = self.linverse(&c)?;
        Ok(modal::dot(&c, &g))
    }

    pub fn transport(&self) -> Result<TransportCoefficients> {
        Ok(TransportCoefficients {
            lambda: self.burnett_pairing(Burnett::A(0, 1))?,
            kappa: self.burnett_pairing(Burnett::B(0))?,
        })
    }

    /// Orthonormal basis (columns) of the microscopic coefficient subspace.
    pub fn micro_basis(&self) -> DMatrix<f64> {
        let k = self.basis.len();
        let mut cols: Vec<DVector<f64>> = Vec::new();
        for j in 0..k {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            let mut v = DVector::from_vec(modal::micro(&self.basis, &e));
            for c in &cols {
                let d = c.dot(&v);
                v -= c * d;
            }
            let n = v.norm();
            if n > 1e-8 {
                cols.push(v / n);
            }
        }
        DMatrix::from_columns(&cols)
    }

    /// Largest `c0` with `<L g, g> >= c0 |g|_nu^2` on the microscopic subspace.
    pub fn coercivity(&self) -> Result<f64> {
        let z = self.micro_basis();
        let lz = z.transpose() * &self.l * &z;
        let nz = z.transpose() * &self.nu_gal * &z;
        let ch = Cholesky::new(nz).ok_or_else(|| Error::Solver("nu Gram not positive".into()))?;
        let linv = ch.l().try_inverse().ok_or_else(|| Error::Solver("singular factor".into()))?;
        let a = &linv * lz * linv.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let e = SymmetricEigen::new(a);
        Ok(e.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
    }
}

fn assemble_gamma(
    basis: &MultiIndexSet,
    in_basis: &MultiIndexSet,
    rel: &MultiIndexSet,
    mm: &DMatrix<f64>,
) -> Vec<f64> {
    let kin = in_basis.len();
    let krel = rel.len();
    // mlin[(d1 * kin + d2) * kin + d3] = sum_e tau(d2,d3,e) M(d1,e)
    let mut lin: Vec<Vec<(usize, f64)>> = Vec::with_capacity(kin * kin);
    for d2 in &in_basis.list {
        for d3 in &in_basis.list {
            let mut terms = Vec::new();
            for e0 in (d2[0].abs_diff(d3[0])..=d2[0] + d3[0]).step_by(2) {
                for e1 in (d2[1].abs_diff(d3[1])..=d2[1] + d3[1]).step_by(2) {
                    for e2 in (d2[2].abs_diff(d3[2])..=d2[2] + d3[2]).step_by(2) {
                        let e = [e0, e1, e2];
                        let t = triple3(d2, d3, &e);
                        if t != 0.0 {
                            terms.push((rel.index(&e).expect("product degree in range"), t));
                        }
                    }
                }
            }
            lin.push(terms);
        }
    }
    let mut mlin = vec![0.0; krel * kin * kin];
    for d1 in 0..krel {
        for (p, terms) in lin.iter().enumerate() {
            mlin[d1 * kin * kin + p] = terms.iter().map(|&(e, t)| t * mm[(d1, e)]).sum();
        }
    }

    // splits of the input indices: (g, d, split coefficient * (-1)^{|d|} for the partner)
    let splits: Vec<Vec<(MultiIndex, usize, f64)>> = in_basis
        .list
        .iter()
        .map(|b| {
            below(b)
                .into_iter()
                .map(|g| {
                    let d = sub(b, &g);
                    (g, in_basis.index(&d).unwrap(), split3(&g, &d))
                })
                .collect()
        })
        .collect();

    let mut gamma = vec![0.0; basis.len() * kin * kin];
    for (ia, a) in basis.list.iter().enumerate() {
        let out = &mut gamma[ia * kin * kin..(ia + 1) * kin * kin];
        for d1 in below(a) {
            let g1 = sub(a, &d1);
            let c1 = split3(&g1, &d1);
            let jd1 = rel.index(&d1).unwrap();
            let ml = &mlin[jd1 * kin * kin..(jd1 + 1) * kin * kin];
            for ib in 0..kin {
                for &(g2, d2, c2) in &splits[ib] {
                    let sgn = if in_basis.list[d2].iter().sum::<usize>() % 2 == 1 { -1.0 } else { 1.0 };
                    for ic in 0..kin {
                        let mut s = 0.0;
                        for &(g3, d3, c3) in &splits[ic] {
                            let t = triple3(&g1, &g2, &g3);
                            if t != 0.0 {
                                s += c3 * t * ml[d2 * kin + d3];
                            }
                        }
                        out[ib * kin + ic] += -0.5 * c1 * c2 * sgn * s;
                    }
                }
            }
        }
    }
    gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::{MacroState, VelocityGrid};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn op() -> &'static CollisionOperator {
        static OP: OnceLock<CollisionOperator> = OnceLock::new();
        OP.get_or_init(|| {
            CollisionOperator::assemble(&CollisionConfig { degree: 6, gamma_degree: 3, ..Default::default() })
                .unwrap()
        })
    }

    fn null_vectors(basis: &MultiIndexSet) -> Vec<Coeffs> {
        let mut out = Vec::new();
        for s in [
            MacroState::new(1.0, [0.0; 3], 0.0),
            MacroState::new(0.0, [1.0, 0.0, 0.0], 0.0),
            MacroState::new(0.0, [0.0, 1.0, 0.0], 0.0),
            MacroState::new(0.0, [0.0, 0.0, 1.0], 0.0),
            MacroState::new(0.0, [0.0; 3], 1.0),
        ] {
            out.push(modal::maxwellian(basis, &s));
        }
        out
    }

    #[test]
    fn nu_closed_form() {
        assert!((nu([0.0; 3]) - 4.0 * (2.0 * PI).sqrt()).abs() < 1e-12);
        assert!((nu_radial(0.999e-3) - nu_radial(1.001e-3)).abs() < 1e-7);
        assert!(nu_radial(1.0) < nu_radial(2.0));
        assert!((nu_radial(1e4) / 1e4 - 2.0 * PI).abs() < 1e-3);
        // radial reduction: shell average of |v-u| over |u| = s is
        // ((a+s)^3 - |a-s|^3) / (6 a s); integrate s against its chi density
        // piecewise so the kink at s = a sits on a panel boundary
        let gl = crate::quadrature::gauss_legendre(40);
        let a: f64 = 1.3;
        let mut oracle = 0.0;
        for (lo, hi) in [(0.0, a), (a, 14.0)] {
            oracle += gl.integrate(|x| {
                let s = lo + (hi - lo) * 0.5 * (x + 1.0);
                let dens = (2.0 / PI).sqrt() * s * s * (-0.5 * s * s).exp();
                0.5 * (hi - lo) * dens * ((a + s).powi(3) - (a - s).abs().powi(3)) / (6.0 * a * s)
            });
        }
        assert!((2.0 * PI * oracle - nu_radial(a)).abs() < 1e-9, "{}", 2.0 * PI * oracle - nu_radial(a));
    }

    #[test]
    fn nu_gram_matches_nodal_quadrature() {
        let o = op();
        let g = VelocityGrid::new(24, 6).unwrap();
        let k = o.n_modes();
        let nodal_nu: Vec<f64> = g.nodes.iter().map(|v| nu(*v)).collect();
        for &(i, j) in &[(0usize, 0usize), (1, 1), (4, 7), (10, 10), (20, 44), (83, 83)] {
            let mut s = 0.0;
            for q in 0..g.len() {
                let row = g.phi_row(q);
                s += g.weights[q] * nodal_nu[q] * row[i] * row[j];
            }
            assert!((s - o.nu_matrix()[(i, j)]).abs() < 1e-7, "{i} {j}: {s} vs {}", o.nu_matrix()[(i, j)]);
        }
        assert!((o.nu_matrix()[(0, 0)] - 8.0 * PI.sqrt()).abs() < 1e-11);
        assert_eq!(k, 84);
    }

    #[test]
    fn null_space_and_symmetry() {
        let o = op();
        for c in null_vectors(&o.basis) {
            let lc = o.apply_l(&c);
            assert!(lc.iter().map(|x| x.abs()).fold(0.0, f64::max) < 1e-10);
        }
        let l = o.l_matrix();
        assert!((l - l.transpose()).amax() < 1e-12);
    }

    #[test]
    fn first_sonine_values() {
        let o = op();
        let a = Burnett::A(0, 1).coeffs(&o.basis);
        let b = Burnett::B(0).coeffs(&o.basis);
        let la = modal::dot(&a, &o.apply_l(&a));
        let lb = modal::dot(&b, &o.apply_l(&b));
        assert!((la - 32.0 * PI.sqrt() / 5.0).abs() < 1e-10, "{la}");
        assert!((lb - 32.0 * PI.sqrt() / 3.0).abs() < 1e-10, "{lb}");
    }

    #[test]
    fn gamma_contains_linear_operator() {
        let o = op();
        let kin = o.in_basis.len();
        let mut one = vec![0.0; o.n_modes()];
        one[0] = 1.0;
        for j in 0..kin {
            let mut e = vec![0.0; o.n_modes()];
            e[j] = 1.0;
            let g = o.apply_gamma_sym(&one, &e).unwrap();
            let l = o.apply_l(&e);
            for i in 0..o.n_modes() {
                assert!((g[i] + l[i]).abs() < 1e-10, "{i} {j} {} {}", g[i], l[i]);
            }
        }
    }

    #[test]
    fn gamma_matches_product_identity() {
        // L (I-P)(f_a f_b / sqrt mu) = Gamma(f_a, f_b) + Gamma(f_b, f_a)
        let o = op();
        let a = MacroState::new(0.2, [0.3, -0.1, 0.5], 0.4);
        let b = MacroState::new(-0.5, [0.1, 0.7, -0.2], -0.3);
        let ca = modal::maxwellian(&o.basis, &a);
        let cb = modal::maxwellian(&o.basis, &b);
        let g = o.apply_gamma_sym(&ca, &cb).unwrap();
        let q = modal::micro_quadratic(&o.basis, &a, &b);
        let lq = o.apply_l(&q);
        for i in 0..o.n_modes() {
            assert!((g[i] - lq[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn linverse_roundtrip_and_coercivity() {
        let o = op();
        let a = Burnett::A(0, 1).coeffs(&o.basis);
        let (x, rep) = o.solve_linverse(&o.apply_l(&a)).unwrap();
        assert!(rep.residual < 1e-9);
        for (p, q) in x.iter().zip(&a) {
            assert!((p - q).abs() < 1e-8);
        }
        let c0 = o.coercivity().unwrap();
        assert!(c0 > 0.0 && c0 < 1.0, "{c0}");
        assert!(o.solve_linverse(&null_vectors(&o.basis)[0]).is_err());
    }

    #[test]
    fn bgk_calibration() {
        let o = op();
        let hs = o.transport().unwrap();
        let b = o.bgk_surrogate().unwrap();
        assert_eq!(b.mode, CollisionMode::Bgk);
        let t = b.transport().unwrap();
        assert!((t.lambda - hs.lambda).abs() < 1e-12 * hs.lambda);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(30))]

        #[test]
        fn gamma_conserves(c in proptest::collection::vec(-1.0f64..1.0, 20)) {
            let o = op();
            let mut g = vec![0.0; o.n_modes()];
            g[..20].copy_from_slice(&c);
            let q = o.apply_gamma(&g, &g).unwrap();
            let p = modal::macro_state(&o.basis, &q);
            prop_assert!(p.rho.abs() < 1e-10 && p.theta.abs() < 1e-10);
            prop_assert!(p.u.iter().all(|x| x.abs() < 1e-10));
        }

        #[test]
        fn l_is_positive_and_reflection_equivariant(c in proptest::collection::vec(-1.0f64..1.0, 84)) {
            let o = op();
            let m = modal::micro(&o.basis, &c);
            let lm = o.apply_l(&m);
            prop_assert!(modal::dot(&lm, &m) > 0.0);
            let r = modal::reflect(&o.basis, &c);
            let a = modal::reflect(&o.basis, &o.apply_l(&c));
            let b = o.apply_l(&r);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn linverse_preserves_parity(c in proptest::collection::vec(-1.0f64..1.0, 84)) {
            let o = op();
            let h = modal::micro(&o.basis, &c);
            let r = modal::reflect(&o.basis, &h);
            let even: Coeffs = h.iter().zip(&r).map(|(a, b)| 0.5 * (a + b)).collect();
            let odd: Coeffs = h.iter().zip(&r).map(|(a, b)| 0.5 * (a - b)).collect();
            let ge = o.linverse(&even).unwrap();
            let go = o.linverse(&odd).unwrap();
            let gre = modal::reflect(&o.basis, &ge);
            let gro = modal::reflect(&o.basis, &go);
            for i in 0..ge.len() {
                prop_assert!((ge[i] - gre[i]).abs() < 1e-9);
                prop_assert!((go[i] + gro[i]).abs() < 1e-9);
            }
        }
    }
}
