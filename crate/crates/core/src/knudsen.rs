//! Knudsen layers: sources, the macroscopic corrector, the boundary mismatch,
//! its solvability moments and a discrete-ordinates solver for the linear
//! half-space problem `v3 d_eta f + L f = S` with specular reflection.
//!
//! Kinetic functions are stored as `f / sqrt(mu)`, either as Hermite
//! coefficients or as values on a [`VelocityGrid`].

use crate::collision::CollisionOperator;
use crate::error::{Error, Result};
use crate::velocity::{modal, Coeffs, KineticFunction, MacroState, VelocityGrid};
use crate::viscous::WallSide;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Layer order `n` of the Knudsen number `eps^n` in the built expansion.
pub const N_SCALE: usize = 3;

/// Geometric `eta` grid on `[0, eta_max]`, `eta_max = 30 / zeta`.
#[derive(Clone, Debug)]
pub struct HalfSpaceGrid {
    pub eta: Vec<f64>,
    /// Target decay rate.
    pub zeta: f64,
    pub eta_max: f64,
}

impl HalfSpaceGrid {
    pub fn new(zeta: f64, h0: f64, growth: f64, h_max: f64) -> Result<Self> {
        if !(zeta > 0.0 && h0 > 0.0 && growth >= 1.0 && h_max >= h0) {
            return Err(Error::Config("half-space grid needs zeta, h0 > 0, growth >= 1, h_max >= h0".into()));
        }
        let eta_max = 30.0 / zeta;
        if (-zeta * eta_max).exp() >= 1e-8 {
            return Err(Error::Config("eta_max too short for the target decay".into()));
        }
        let mut eta = vec![0.0];
        let mut h = h0;
        while *eta.last().unwrap() < eta_max {
            let next = (eta.last().unwrap() + h).min(eta_max);
            if eta_max - next < 0.3 * h {
                eta.push(eta_max);
                break;
            }
            eta.push(next);
            h = (h * growth).min(h_max);
        }
        Ok(HalfSpaceGrid { eta, zeta, eta_max })
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    /// Trapezoid weights on the nodes.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.eta.len();
        let mut w = vec![0.0; n];
        for j in 0..n - 1 {
            let h = 0.5 * (self.eta[j + 1] - self.eta[j]);
            w[j] += h;
            w[j + 1] += h;
        }
        w
    }

    /// `int_eta^inf f` by reverse trapezoid sums; the profile must have decayed
    /// below `1e-8` of its peak at `eta_max`.
    pub fn tail_integral(&self, f: &[f64]) -> Result<Vec<f64>> {
        let n = f.len();
        let peak = f.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if f[n - 1].abs() > 1e-8 * peak {
            return Err(Error::Invariant(format!(
                "Knudsen profile has not decayed at eta_max ({:.2e} of its peak)",
                f[n - 1].abs() / peak
            )));
        }
        let d = self.deriv(f);
        let mut out = vec![0.0; n];
        for j in (0..n - 1).rev() {
            let h = self.eta[j + 1] - self.eta[j];
            out[j] = out[j + 1] + 0.5 * h * (f[j] + f[j + 1]) - h * h / 12.0 * (d[j + 1] - d[j]);
        }
        Ok(out)
    }

    /// Three-point derivative on the nonuniform nodes.
    pub fn deriv(&self, f: &[f64]) -> Vec<f64> {
        let e = &self.eta;
        let n = f.len();
        let three = |x0: f64, x1: f64, x2: f64, at: f64| {
            // derivative weights of the quadratic through x0, x1, x2
            [
                (2.0 * at - x1 - x2) / ((x0 - x1) * (x0 - x2)),
                (2.0 * at - x0 - x2) / ((x1 - x0) * (x1 - x2)),
                (2.0 * at - x0 - x1) / ((x2 - x0) * (x2 - x1)),
            ]
        };
        (0..n)
            .map(|j| {
                let c = j.clamp(1, n - 2);
                let w = three(e[c - 1], e[c], e[c + 1], e[j]);
                w[0] * f[c - 1] + w[1] * f[c] + w[2] * f[c + 1]
            })
            .collect()
    }
}

/// `(A, B_1, B_2, B_3, C)` on the `eta` grid at one wall point.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectorABC {
    pub a: Vec<f64>,
    pub b: [Vec<f64>; 3],
    pub c: Vec<f64>,
    /// Integrands, i.e. `d_eta` of the fields above, for the `-` wall.
    da: Vec<f64>,
    db: [Vec<f64>; 3],
    dc: Vec<f64>,
    pub side: WallSide,
}

/// Macroscopic source profile `{a + b.v + c |v|^2} sqrt(mu)` on the `eta` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroProfile {
    pub a: Vec<f64>,
    pub b: [Vec<f64>; 3],
    pub c: Vec<f64>,
}

impl MacroProfile {
    pub fn zeros(n: usize) -> Self {
        MacroProfile { a: vec![0.0; n], b: [vec![0.0; n], vec![0.0; n], vec![0.0; n]], c: vec![0.0; n] }
    }

    pub fn coeffs(&self, basis: &crate::hermite::MultiIndexSet, j: usize) -> Coeffs {
        let s2 = std::f64::consts::SQRT_2;
        let mut out = vec![0.0; basis.len()];
        out[0] = self.a[j] + 3.0 * self.c[j];
        for i in 0..3 {
            let mut m = [0; 3];
            m[i] = 1;
            out[basis.index(&m).unwrap()] = self.b[i][j];
            m[i] = 2;
            out[basis.index(&m).unwrap()] = s2 * self.c[j];
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().chain(&self.c).chain(self.b.iter().flatten()).all(|x| *x == 0.0)
    }
}

/// Corrector `f_hat_{k,1}` of the macroscopic source. The integrals are signed
/// so that `-+ v3 d_eta f_hat_1 - S_1` is microscopic at either wall.
pub fn corrector(grid: &HalfSpaceGrid, s1: &MacroProfile, side: WallSide) -> Result<CorrectorABC> {
    let n = grid.len();
    // the `-` wall carries `+v3 d_eta`; the `+` wall flips every integrand
    let sg = -side.sign();
    let da: Vec<f64> = (0..n).map(|j| sg * (2.0 * s1.a[j] + 3.0 * s1.c[j])).collect();
    let db: [Vec<f64>; 3] = std::array::from_fn(|i| s1.b[i].iter().map(|x| sg * x).collect());
    let dc: Vec<f64> = s1.a.iter().map(|x| -sg * x / 5.0).collect();
    let neg = |v: Vec<f64>| v.into_iter().map(|x| -x).collect::<Vec<f64>>();
    let a = neg(grid.tail_integral(&da)?);
    let b = [neg(grid.tail_integral(&db[0])?), neg(grid.tail_integral(&db[1])?), neg(grid.tail_integral(&db[2])?)];
    let c = neg(grid.tail_integral(&dc)?);
    Ok(CorrectorABC { a, b, c, da, db, dc, side })
}

impl CorrectorABC {
    fn assemble(basis: &crate::hermite::MultiIndexSet, a: f64, b: [f64; 3], c: f64) -> Coeffs {
        // A v3 + B1 v3 v1 + B2 v3 v2 + B3 + C v3 |v|^2
        let mut out = vec![0.0; basis.len()];
        let mut one = vec![0.0; basis.len()];
        one[0] = 1.0;
        let v3 = modal::times_v(basis, &one, 2);
        let v3v1 = modal::times_v(basis, &v3, 0);
        let v3v2 = modal::times_v(basis, &v3, 1);
        let mut v2 = vec![0.0; basis.len()];
        for i in 0..3 {
            let vi = modal::times_v(basis, &one, i);
            for (x, y) in v2.iter_mut().zip(modal::times_v(basis, &vi, i)) {
                *x += y;
            }
        }
        let v3v2s = modal::times_v(basis, &v2, 2);
        for k in 0..basis.len() {
            out[k] = a * v3[k] + b[0] * v3v1[k] + b[1] * v3v2[k] + c * v3v2s[k];
        }
        out[0] += b[2];
        out
    }

    /// `f_hat_{k,1}` at node `j`.
    pub fn f_hat(&self, basis: &crate::hermite::MultiIndexSet, j: usize) -> Coeffs {
        Self::assemble(basis, self.a[j], [self.b[0][j], self.b[1][j], self.b[2][j]], self.c[j])
    }

    /// `d_eta f_hat_{k,1}` at node `j`, from the integrands.
    pub fn d_eta(&self, basis: &crate::hermite::MultiIndexSet, j: usize) -> Coeffs {
        Self::assemble(basis, self.da[j], [self.db[0][j], self.db[1][j], self.db[2][j]], self.dc[j])
    }

    /// `P{-+ v3 d_eta f_hat_1 - S_1}` at node `j`; zero by construction.
    pub fn identity_defect(&self, basis: &crate::hermite::MultiIndexSet, s1: &MacroProfile, j: usize) -> f64 {
        let stream = modal::times_v(basis, &self.d_eta(basis, j), 2);
        let s = s1.coeffs(basis, j);
        let sg = -self.side.sign();
        let r: Coeffs = stream.iter().zip(&s).map(|(x, y)| sg * x - y).collect();
        modal::project_p(basis, &r).iter().fold(0.0, |a, x| a.max(x.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().chain(&self.c).chain(self.b.iter().flatten()).all(|x| *x == 0.0)
    }
}

/// Sources of Knudsen order `k` at one wall point and one `eta` node, `n = 3`.
/// `f_hat_1` enters the quadratic term only through its part of degree
/// `<= gamma_degree`; the discarded remainder norm is returned alongside.
pub struct KnudsenSources {
    pub s1: MacroProfile,
    pub s2: Vec<Coeffs>,
    pub truncated: f64,
}

pub fn assemble_knudsen_sources(
    k: usize,
    op: &CollisionOperator,
    n_eta: usize,
    f0: &MacroState,
    f_hat1: Option<&[Coeffs]>,
) -> Result<KnudsenSources> {
    let kk = op.basis.len();
    let zero = || KnudsenSources { s1: MacroProfile::zeros(n_eta), s2: vec![vec![0.0; kk]; n_eta], truncated: 0.0 };
    match k {
        0 => Err(Error::Config("Knudsen orders start at 1".into())),
        k if k <= N_SCALE - 2 => Ok(zero()),
        k if k == N_SCALE - 1 => {
            let fh = f_hat1.ok_or_else(|| Error::Config("order n-1 Knudsen sources need f_hat_1".into()))?;
            let mut out = zero();
            let m0 = modal::maxwellian(&op.basis, f0);
            let kin = op.in_basis.len();
            for (j, c) in fh.iter().enumerate() {
                let head: Coeffs = (0..kk).map(|i| if i < kin { c[i] } else { 0.0 }).collect();
                let tail: f64 = c[kin.min(c.len())..].iter().map(|x| x * x).sum::<f64>().sqrt();
                out.truncated = out.truncated.max(tail);
                if head.iter().any(|x| *x != 0.0) {
                    out.s2[j] = op.apply_gamma_sym(&m0, &head)?;
                }
            }
            Ok(out)
        }
        _ => Err(Error::Unsupported(format!("Knudsen sources of order {k} (built orders stop at {})", N_SCALE - 1))),
    }
}

/// Wall traces entering the mismatch of order `k`, as coefficient vectors.
pub struct MismatchInputs<'a> {
    pub interior: &'a [f64],
    pub viscous: &'a [f64],
    pub corrector: &'a [f64],
}

/// `g_hat_k` on the velocity nodes: `F(v) - F(R v)` for `-+ v3 < 0`, zero
/// elsewhere, with `F` the sum of the three traces.
pub fn boundary_mismatch(vg: &VelocityGrid, side: WallSide, t: &MismatchInputs<'_>) -> KineticFunction {
    let sum: Coeffs = (0..vg.n_modes())
        .map(|k| t.interior.get(k).copied().unwrap_or(0.0) + t.viscous.get(k).copied().unwrap_or(0.0) + t.corrector.get(k).copied().unwrap_or(0.0))
        .collect();
    let f = vg.from_coeffs(&sum);
    let r = vg.reflect(&f);
    let active = |v3: f64| if side.is_top() { v3 > 0.0 } else { v3 < 0.0 };
    KineticFunction {
        values: (0..vg.len()).map(|q| if active(vg.nodes[q][2]) { f.values[q] - r.values[q] } else { 0.0 }).collect(),
    }
}

/// `[int v3 g sqrt(mu), int v1 v3 g sqrt(mu), int v2 v3 g sqrt(mu), int |v|^2 v3 g sqrt(mu)]`.
pub fn solvability_check(vg: &VelocityGrid, g: &KineticFunction) -> [f64; 4] {
    let mut m = [0.0; 4];
    for (q, v) in vg.nodes.iter().enumerate() {
        let s = vg.weights[q] * g.values[q] * v[2];
        m[0] += s;
        m[1] += s * v[0];
        m[2] += s * v[1];
        m[3] += s * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HalfSpaceConfig {
    pub tol: f64,
    pub restart: usize,
    pub max_iter: usize,
    /// Spacing in `eta` of the hat functions carrying the low-order
    /// macroscopic correction; `0` switches the correction off.
    pub coarse_spacing: f64,
}

impl Default for HalfSpaceConfig {
    fn default() -> Self {
        HalfSpaceConfig { tol: 1e-11, restart: 60, max_iter: 2000, coarse_spacing: 1.0 }
    }
}

/// Low-order correction: the five collision invariants times piecewise linear
/// hats in `eta`, with the Galerkin matrix of the scattering iteration on them.
struct Coarse {
    hats: Vec<Vec<(usize, f64)>>,
    modes: Vec<(Vec<f64>, Vec<f64>)>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

/// Solution of the canonical half-space problem at one wall point.
#[derive(Clone, Debug)]
pub struct HalfSpaceSolution {
    pub eta: Vec<f64>,
    /// Nodal values per `eta` node.
    pub values: Vec<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
    /// The five fluxes `int v3 chi_i f sqrt(mu)` per node.
    pub fluxes: Vec<[f64; 5]>,
}

impl HalfSpaceSolution {
    pub fn trace(&self) -> &[f64] {
        &self.values[0]
    }

    /// `(int f^2 mu)^{1/2}` per node.
    pub fn norms(&self, vg: &VelocityGrid) -> Vec<f64> {
        self.values.iter().map(|f| vg.weights.iter().zip(f).map(|(w, x)| w * x * x).sum::<f64>().sqrt()).collect()
    }

    /// Largest change of any flux along `eta`.
    pub fn flux_defect(&self) -> f64 {
        let f0 = self.fluxes[0];
        self.fluxes.iter().flat_map(|f| f.iter().zip(&f0).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max)
    }

    /// Least-squares fit of `ln |f|(eta) = c - rate * eta` on `[lo, hi]`:
    /// returns `(rate, r_squared)`. Nodes below `1e-9` of the peak norm sit at
    /// the solver tolerance and are left out.
    pub fn decay_fit(&self, vg: &VelocityGrid, lo: f64, hi: f64) -> Result<(f64, f64)> {
        let n = self.norms(vg);
        let floor = 1e-9 * n.iter().fold(0.0f64, |a, x| a.max(*x));
        let pts: Vec<(f64, f64)> = self
            .eta
            .iter()
            .zip(&n)
            .filter(|(e, v)| **e >= lo && **e <= hi && **v > floor)
            .map(|(e, v)| (*e, v.ln()))
            .collect();
        if pts.len() < 3 {
            return Err(Error::Invariant("too few nonzero nodes for a decay fit".into()));
        }
        let m = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        let (mx, my) = (sx / m, sy / m);
        let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
        let syy: f64 = pts.iter().map(|(_, y)| (y - my).powi(2)).sum();
        let slope = sxy / sxx;
        let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
        Ok((-slope, r2))
    }

    /// `sup_eta e^{zeta eta} |f|(eta)`.
    pub fn weighted_sup(&self, vg: &VelocityGrid, zeta: f64) -> f64 {
        self.norms(vg).iter().zip(&self.eta).map(|(v, e)| v * (zeta * e).exp()).fold(0.0, f64::max)
    }
}

/// Discrete-ordinates solver on the nodes of a [`VelocityGrid`]. The nodal
/// collision operator is the Galerkin `L` on the resolved modes plus `nu` on
/// their nodal complement, which keeps the null space equal to the five
/// collision invariants. Transport is Crank-Nicolson along each ordinate;
/// the scattering iteration is accelerated by restarted GMRES on the modal
/// moments `(P_h f, P_h nu f)`.
pub struct HalfSpaceSolver<'a> {
    pub vg: &'a VelocityGrid,
    pub grid: &'a HalfSpaceGrid,
    pub cfg: HalfSpaceConfig,
    nu: Vec<f64>,
    phi: DMatrix<f64>,
    phi_w: DMatrix<f64>,
    phi_wnu: DMatrix<f64>,
    nl: DMatrix<f64>,
    ngram: DMatrix<f64>,
    coarse: Option<Coarse>,
}

impl<'a> HalfSpaceSolver<'a> {
    pub fn new(op: &CollisionOperator, vg: &'a VelocityGrid, grid: &'a HalfSpaceGrid, cfg: HalfSpaceConfig) -> Result<Self> {
        if vg.basis.max_degree != op.basis.max_degree {
            return Err(Error::Config(format!(
                "velocity grid degree {} differs from collision degree {}",
                vg.basis.max_degree, op.basis.max_degree
            )));
        }
        if vg.nodes.iter().any(|v| v[2] == 0.0) {
            return Err(Error::Config("ordinates with v3 = 0 are not allowed".into()));
        }
        let (q, k) = (vg.len(), vg.n_modes());
        let nu: Vec<f64> = vg.nodes.iter().map(|v| op.frequency(*v)).collect();
        let phi = DMatrix::from_fn(q, k, |i, j| vg.phi_row(i)[j]);
        let phi_w = DMatrix::from_fn(k, q, |j, i| vg.phi_row(i)[j] * vg.weights[i]);
        let phi_wnu = DMatrix::from_fn(k, q, |j, i| vg.phi_row(i)[j] * vg.weights[i] * nu[i]);
        let ngram = &phi_wnu * &phi;
        let nl = &ngram + op.l_matrix();
        let mut s = HalfSpaceSolver { vg, grid, cfg, nu, phi, phi_w, phi_wnu, nl, ngram, coarse: None };
        if cfg.coarse_spacing > 0.0 {
            s.coarse = Some(s.build_coarse()?);
        }
        Ok(s)
    }

    fn build_coarse(&self) -> Result<Coarse> {
        let eta = &self.grid.eta;
        let n = eta.len();
        let mut knots = vec![0];
        for j in 1..n {
            if eta[j] - eta[*knots.last().unwrap()] >= self.cfg.coarse_spacing - 1e-12 || j == n - 1 {
                knots.push(j);
            }
        }
        // the far end carries the hard zero, so its hat is dropped
        let hats: Vec<Vec<(usize, f64)>> = (0..knots.len() - 1)
            .map(|m| {
                let mut h = Vec::new();
                if m > 0 {
                    let (a, b) = (knots[m - 1], knots[m]);
                    for j in a + 1..b {
                        h.push((j, (eta[j] - eta[a]) / (eta[b] - eta[a])));
                    }
                }
                h.push((knots[m], 1.0));
                let (a, b) = (knots[m], knots[m + 1]);
                for j in a + 1..b {
                    h.push((j, (eta[b] - eta[j]) / (eta[b] - eta[a])));
                }
                h
            })
            .collect();
        let b = &self.vg.basis;
        let k = b.len();
        let s3 = 3f64.sqrt();
        let mut modes = Vec::new();
        for m in [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]] {
            let mut c = vec![0.0; k];
            c[b.index(&m).unwrap()] = 1.0;
            modes.push(c);
        }
        let mut c = vec![0.0; k];
        for m in [[2, 0, 0], [0, 2, 0], [0, 0, 2]] {
            c[b.index(&m).unwrap()] = 1.0 / s3;
        }
        modes.push(c);
        let modes: Vec<(Vec<f64>, Vec<f64>)> = modes
            .into_iter()
            .map(|c| {
                let d = (&self.ngram * DVector::from_column_slice(&c)).as_slice().to_vec();
                (c, d)
            })
            .collect();
        let nc = hats.len() * modes.len();
        let mut e = DMatrix::<f64>::zeros(nc, nc);
        let zero_fb = vec![0.0; self.vg.len()];
        for col in 0..nc {
            let z = self.coarse_vector(&hats, &modes, col);
            let az = self.residual_map(&z, &zero_fb);
            for row in 0..nc {
                e[(row, col)] = self.coarse_dot(&hats, &modes, row, &az);
            }
        }
        let lu = e.lu();
        if lu.u().diagonal().iter().any(|x| x.abs() < 1e-14) {
            return Err(Error::Solver("singular low-order correction matrix".into()));
        }
        Ok(Coarse { hats, modes, lu })
    }

    fn coarse_vector(&self, hats: &[Vec<(usize, f64)>], modes: &[(Vec<f64>, Vec<f64>)], col: usize) -> Vec<f64> {
        let (k, n) = (self.vg.n_modes(), self.grid.len());
        let (h, m) = (&hats[col / modes.len()], &modes[col % modes.len()]);
        let mut z = vec![0.0; 2 * k * n];
        for &(j, w) in h {
            for i in 0..k {
                z[j * k + i] = w * m.0[i];
                z[k * n + j * k + i] = w * m.1[i];
            }
        }
        z
    }

    fn coarse_dot(&self, hats: &[Vec<(usize, f64)>], modes: &[(Vec<f64>, Vec<f64>)], row: usize, r: &[f64]) -> f64 {
        let (k, n) = (self.vg.n_modes(), self.grid.len());
        let (h, m) = (&hats[row / modes.len()], &modes[row % modes.len()]);
        let mut s = 0.0;
        for &(j, w) in h {
            for i in 0..k {
                s += w * (m.0[i] * r[j * k + i] + m.1[i] * r[k * n + j * k + i]);
            }
        }
        s
    }

    /// `(I - A) x`, `A` being one scattering-plus-sweep step on the moments.
    fn residual_map(&self, x: &[f64], zero_fb: &[f64]) -> Vec<f64> {
        let (c, d) = self.unpack(x);
        let f = self.sweep(&self.scatter(&c, &d), zero_fb);
        let (c1, d1) = self.moments(&f);
        let ax = self.pack(&c1, &d1);
        x.iter().zip(&ax).map(|(a, b)| a - b).collect()
    }

    /// Two-level preconditioner: coarse solve, then one scattering step.
    fn precondition(&self, r: &[f64], zero_fb: &[f64]) -> Vec<f64> {
        let Some(co) = &self.coarse else { return r.to_vec() };
        let nc = co.lu.u().nrows();
        let rc = DVector::from_fn(nc, |row, _| self.coarse_dot(&co.hats, &co.modes, row, r));
        let y = co.lu.solve(&rc).expect("factorization checked at construction");
        let mut x1 = vec![0.0; r.len()];
        for (col, yc) in y.iter().enumerate() {
            if *yc != 0.0 {
                let z = self.coarse_vector(&co.hats, &co.modes, col);
                for (a, b) in x1.iter_mut().zip(&z) {
                    *a += yc * b;
                }
            }
        }
        let ax1 = self.residual_map(&x1, zero_fb);
        x1.iter().zip(r).zip(&ax1).map(|((a, b), c)| a + b - c).collect()
    }

    /// `K_h f` on the nodes for moments `(c, d)`, one column per node.
    fn scatter(&self, c: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
        let g = d - &self.nl * c;
        let mut out = &self.phi * c;
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= self.nu[i];
        }
        out += &self.phi * g;
        out
    }

    /// Transport sweep for total source `sigma` (Q x N) and incoming data `fb`.
    fn sweep(&self, sigma: &DMatrix<f64>, fb: &[f64]) -> DMatrix<f64> {
        let eta = &self.grid.eta;
        let n = eta.len();
        let q = self.vg.len();
        let mut f = DMatrix::<f64>::zeros(q, n);
        for i in 0..q {
            let v3 = self.vg.nodes[i][2];
            if v3 > 0.0 {
                continue;
            }
            let nu = self.nu[i];
            // march from eta_max, hard zero there
            for j in (0..n - 1).rev() {
                let h = eta[j + 1] - eta[j];
                let rhs = 0.5 * (sigma[(i, j)] + sigma[(i, j + 1)]) - f[(i, j + 1)] * (v3 / h + 0.5 * nu);
                f[(i, j)] = rhs / (-v3 / h + 0.5 * nu);
            }
        }
        for i in 0..q {
            let v3 = self.vg.nodes[i][2];
            if v3 < 0.0 {
                continue;
            }
            let r = self.vg.mirror(i);
            let nu = self.nu[i];
            f[(i, 0)] = f[(r, 0)] + fb[r];
            for j in 0..n - 1 {
                let h = eta[j + 1] - eta[j];
                let rhs = 0.5 * (sigma[(i, j)] + sigma[(i, j + 1)]) + f[(i, j)] * (v3 / h - 0.5 * nu);
                f[(i, j + 1)] = rhs / (v3 / h + 0.5 * nu);
            }
        }
        f
    }

    fn moments(&self, f: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (&self.phi_w * f, &self.phi_wnu * f)
    }

    fn pack(&self, c: &DMatrix<f64>, d: &DMatrix<f64>) -> Vec<f64> {
        c.as_slice().iter().chain(d.as_slice()).copied().collect()
    }

    fn unpack(&self, x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let (k, n) = (self.vg.n_modes(), self.grid.len());
        (DMatrix::from_column_slice(k, n, &x[..k * n]), DMatrix::from_column_slice(k, n, &x[k * n..]))
    }

    /// Solve `v3 d_eta f + L f = S` with `f(0, v) = f(0, R v) + f_b(R v)` for
    /// `v3 > 0`. `fb` is supported on `v3 < 0`; `source[j]` holds the nodal
    /// values of `S` at node `j`.
    pub fn solve(&self, fb: &KineticFunction, source: &[KineticFunction]) -> Result<HalfSpaceSolution> {
        let (q, n) = (self.vg.len(), self.grid.len());
        if source.len() != n || fb.values.len() != q {
            return Err(Error::Config("half-space data do not match the grids".into()));
        }
        if self.vg.nodes.iter().zip(&fb.values).any(|(v, x)| v[2] > 0.0 && *x != 0.0) {
            return Err(Error::Invariant("boundary data must vanish for v3 > 0".into()));
        }
        let fscale = fb.values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let sol = solvability_check(self.vg, fb);
        if sol.iter().any(|m| m.abs() > 1e-8 * fscale.max(1.0)) {
            return Err(Error::Invariant(format!("boundary data violate the solvability conditions: {sol:?}")));
        }
        let mut sig0 = DMatrix::<f64>::zeros(q, n);
        let mut sscale: f64 = 0.0;
        for (j, s) in source.iter().enumerate() {
            let (st, _) = self.vg.project_p(s)?;
            let p = [st.rho, st.u[0], st.u[1], st.u[2], st.theta].iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let m = s.values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            sscale = sscale.max(m);
            if p > 1e-8 * m.max(1e-300) {
                return Err(Error::Invariant(format!("half-space source is not microscopic at eta = {}", self.grid.eta[j])));
            }
            for i in 0..q {
                sig0[(i, j)] = s.values[i];
            }
        }
        let kn = self.vg.n_modes() * n;
        if fscale == 0.0 && sscale == 0.0 {
            let values = vec![vec![0.0; q]; n];
            return Ok(HalfSpaceSolution { eta: self.grid.eta.clone(), values, iterations: 0, residual: 0.0, fluxes: vec![[0.0; 5]; n] });
        }
        let f_b = self.sweep(&sig0, &fb.values);
        let (c0, d0) = self.moments(&f_b);
        let b = self.pack(&c0, &d0);
        let zero_fb = vec![0.0; q];
        let apply = |x: &[f64]| self.residual_map(x, &zero_fb);
        let prec = |x: &[f64]| self.precondition(x, &zero_fb);
        let (x, iterations, residual) = gmres(apply, prec, &b, 2 * kn, &self.cfg)?;
        let (c, d) = self.unpack(&x);
        let sigma = self.scatter(&c, &d) + sig0;
        let f = self.sweep(&sigma, &fb.values);
        if f.iter().any(|x| !x.is_finite()) {
            return Err(Error::Solver("half-space sweep produced non-finite values".into()));
        }
        let values: Vec<Vec<f64>> = (0..n).map(|j| f.column(j).iter().copied().collect()).collect();
        let fluxes = values
            .iter()
            .map(|col| {
                let mut m = [0.0; 5];
                for (i, v) in self.vg.nodes.iter().enumerate() {
                    let s = self.vg.weights[i] * col[i] * v[2];
                    m[0] += s;
                    m[1] += s * v[0];
                    m[2] += s * v[1];
                    m[3] += s * v[2];
                    m[4] += s * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
                }
                m
            })
            .collect();
        Ok(HalfSpaceSolution { eta: self.grid.eta.clone(), values, iterations, residual, fluxes })
    }

    /// Solve the layer problem of one wall: the `+` wall is mapped onto the
    /// canonical problem by `v3 -> -v3`. `g_hat` is the mismatch as returned by
    /// [`boundary_mismatch`] and `source` the microscopic right-hand side.
    pub fn solve_wall(&self, side: WallSide, g_hat: &KineticFunction, source: &[KineticFunction]) -> Result<HalfSpaceSolution> {
        let vg = self.vg;
        // f_b(v) = g_hat(v) on the incoming half of the canonical problem
        let (fb, src): (KineticFunction, Vec<KineticFunction>) = if side.is_top() {
            (vg.reflect(g_hat), source.iter().map(|s| vg.reflect(s)).collect())
        } else {
            (g_hat.clone(), source.to_vec())
        };
        let mut sol = self.solve(&fb, &src)?;
        if side.is_top() {
            for col in sol.values.iter_mut() {
                *col = (0..vg.len()).map(|i| col[vg.mirror(i)]).collect();
            }
            for m in sol.fluxes.iter_mut() {
                for x in m.iter_mut() {
                    *x = -*x;
                }
                m[3] = -m[3];
            }
        }
        Ok(sol)
    }

    pub fn to_coeffs(&self, f: &[f64]) -> Coeffs {
        (&self.phi_w * DVector::from_column_slice(f)).as_slice().to_vec()
    }
}

/// Right-preconditioned restarted GMRES with modified Gram-Schmidt and Givens
/// rotations, zero start.
fn gmres(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    prec: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    n: usize,
    cfg: &HalfSpaceConfig,
) -> Result<(Vec<f64>, usize, f64)> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let bn = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bn == 0.0 {
        return Ok((x, 0, 0.0));
    }
    let m = cfg.restart.max(1);
    let mut total = 0;
    loop {
        let ax = apply(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
        let beta = dot(&r, &r).sqrt();
        if beta <= cfg.tol * bn {
            return Ok((x, total, beta / bn));
        }
        if total >= cfg.max_iter {
            return Err(Error::Solver(format!("half-space GMRES stalled at relative residual {:.3e}", beta / bn)));
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|p| p / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut gvec = vec![0.0; m + 1];
        gvec[0] = beta;
        let mut used = 0;
        for k in 0..m {
            let mut w = apply(&prec(&v[k]));
            for (i, vi) in v.iter().enumerate() {
                let hik = dot(&w, vi);
                h[i][k] = hik;
                for (a, c) in w.iter_mut().zip(vi) {
                    *a -= hik * c;
                }
            }
            let wn = dot(&w, &w).sqrt();
            h[k + 1][k] = wn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let den = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            cs[k] = h[k][k] / den;
            sn[k] = h[k + 1][k] / den;
            h[k][k] = den;
            h[k + 1][k] = 0.0;
            gvec[k + 1] = -sn[k] * gvec[k];
            gvec[k] *= cs[k];
            used = k + 1;
            total += 1;
            if gvec[k + 1].abs() <= cfg.tol * bn || wn == 0.0 || total >= cfg.max_iter {
                break;
            }
            v.push(w.iter().map(|p| p / wn).collect());
        }
        let mut y = vec![0.0; used];
        for i in (0..used).rev() {
            let s: f64 = (i + 1..used).map(|j| h[i][j] * y[j]).sum();
            y[i] = (gvec[i] - s) / h[i][i];
        }
        let mut dy = vec![0.0; n];
        for (j, yj) in y.iter().enumerate() {
            for (a, c) in dy.iter_mut().zip(&v[j]) {
                *a += yj * c;
            }
        }
        for (a, c) in x.iter_mut().zip(prec(&dy)) {
            *a += c;
        }
    }
}
