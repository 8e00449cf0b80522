//! Viscous boundary layers: half-line grids, the order-1 parabolic systems
//! at the two walls, their Neumann data and the closure relations.
//!
//! Wall conventions: the bottom wall `x3 = 0` carries sign `-` and the layer
//! variable `y = x3 / eps`; the top wall carries `+` and `y = (1 - x3) / eps`.

use crate::collision::CollisionOperator;
use crate::error::{Error, Result};
use crate::euler::{Background, EulerState, Wall};
use crate::spectral::SpatialGrid;
use crate::velocity::{modal, Burnett, Coeffs, MacroState};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WallSide {
    Bottom,
    Top,
}

impl WallSide {
    pub const BOTH: [WallSide; 2] = [WallSide::Bottom, WallSide::Top];

    /// `-1` at the bottom, `+1` at the top.
    pub fn sign(self) -> f64 {
        match self {
            WallSide::Bottom => -1.0,
            WallSide::Top => 1.0,
        }
    }

    pub fn is_top(self) -> bool {
        self == WallSide::Top
    }

    pub fn label(self) -> &'static str {
        match self {
            WallSide::Bottom => "minus",
            WallSide::Top => "plus",
        }
    }
}

/// Nodes `y_j = y_max s_j^p`, `s_j = j/(n-1)`.
#[derive(Clone, Debug)]
pub struct HalfLineGrid {
    pub y: Vec<f64>,
    pub y_max: f64,
    pub power: f64,
    /// Exponent of the `(1+y)^l` weight.
    pub ell: f64,
    /// Quadrature weights on `[0, y_max]`.
    pub w: Vec<f64>,
}

impl HalfLineGrid {
    pub fn new(n: usize, y_max: f64, power: f64, ell: f64) -> Result<Self> {
        if n < 8 || y_max <= 0.0 || power < 1.0 {
            return Err(Error::Config(format!("half-line grid needs n >= 8, y_max > 0, power >= 1 (got {n}, {y_max}, {power})")));
        }
        let ds = 1.0 / (n - 1) as f64;
        let y: Vec<f64> = (0..n).map(|j| y_max * (j as f64 * ds).powf(power)).collect();
        // composite Simpson in s on the Jacobian dy/ds, trapezoid on an odd panel
        let jac = |j: usize| y_max * power * (j as f64 * ds).powf(power - 1.0);
        let mut w = vec![0.0; n];
        let pairs = (n - 1) / 2;
        for p in 0..pairs {
            let j = 2 * p;
            w[j] += ds / 3.0 * jac(j);
            w[j + 1] += 4.0 * ds / 3.0 * jac(j + 1);
            w[j + 2] += ds / 3.0 * jac(j + 2);
        }
        if (n - 1) % 2 == 1 {
            w[n - 2] += 0.5 * ds * jac(n - 2);
            w[n - 1] += 0.5 * ds * jac(n - 1);
        }
        Ok(HalfLineGrid { y, y_max, power, ell, w })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn integrate(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.w).map(|(a, b)| a * b).sum()
    }

    /// `(int (1+y)^l f^2 dy)^{1/2}`.
    pub fn weighted_norm(&self, f: &[f64]) -> f64 {
        let g: Vec<f64> = f.iter().zip(&self.y).map(|(x, y)| (1.0 + y).powf(self.ell) * x * x).collect();
        self.integrate(&g).max(0.0).sqrt()
    }

    /// `max_y |f| (1+y)^{l/2}`.
    pub fn decay_constant(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.y).map(|(x, y)| x.abs() * (1.0 + y).powf(0.5 * self.ell)).fold(0.0, f64::max)
    }

    /// `int_y^inf f ds` by reverse end-corrected trapezoid sums, plus an algebraic tail past
    /// `y_max` fitted to the last two nodes when they decay like a power
    /// steeper than `1/y`.
    pub fn tail_integral(&self, f: &[f64]) -> Vec<f64> {
        let n = f.len();
        let mut out = vec![0.0; n];
        out[n - 1] = self.algebraic_tail(f);
        let d = self.deriv(f);
        for j in (0..n - 1).rev() {
            let h = self.y[j + 1] - self.y[j];
            out[j] = out[j + 1] + 0.5 * h * (f[j] + f[j + 1]) - h * h / 12.0 * (d[j + 1] - d[j]);
        }
        out
    }

    fn algebraic_tail(&self, f: &[f64]) -> f64 {
        let n = f.len();
        let (a, b) = (f[n - 2], f[n - 1]);
        if a == 0.0 || b == 0.0 || a.signum() != b.signum() || b.abs() >= a.abs() {
            return 0.0;
        }
        let (ya, yb) = (1.0 + self.y[n - 2], 1.0 + self.y[n - 1]);
        let rate = (a.abs() / b.abs()).ln() / (yb / ya).ln();
        if rate <= 1.0 {
            return 0.0;
        }
        b * yb / (rate - 1.0)
    }

    /// First derivative by three-point differences (one-sided at the ends).
    pub fn deriv(&self, f: &[f64]) -> Vec<f64> {
        let n = f.len();
        let y = &self.y;
        let mut d = vec![0.0; n];
        for j in 1..n - 1 {
            let (hm, hp) = (y[j] - y[j - 1], y[j + 1] - y[j]);
            d[j] = (hm * hm * f[j + 1] - hp * hp * f[j - 1] + (hp * hp - hm * hm) * f[j]) / (hm * hp * (hm + hp));
        }
        // second-order one-sided rule through nodes j0, j0+-1, j0+-2
        let one_sided = |j0: usize, j1: usize, j2: usize| {
            let (a, b) = (y[j1] - y[j0], y[j2] - y[j0]);
            let c1 = b / (a * (b - a));
            let c2 = -a / (b * (b - a));
            -(c1 + c2) * f[j0] + c1 * f[j1] + c2 * f[j2]
        };
        d[0] = one_sided(0, 1, 2);
        d[n - 1] = one_sided(n - 1, n - 2, n - 3);
        d
    }

    /// Four-point Lagrange interpolation; zero past `y_max`.
    pub fn interpolate(&self, f: &[f64], y: f64) -> f64 {
        let n = self.y.len();
        if y >= self.y_max {
            return 0.0;
        }
        let y = y.max(0.0);
        let j = match self.y.binary_search_by(|p| p.partial_cmp(&y).unwrap()) {
            Ok(j) => return f[j],
            Err(j) => j - 1,
        };
        let lo = j.saturating_sub(1).min(n - 4);
        let mut s = 0.0;
        for a in lo..lo + 4 {
            let mut l = 1.0;
            for b in lo..lo + 4 {
                if a != b {
                    l *= (y - self.y[b]) / (self.y[a] - self.y[b]);
                }
            }
            s += l * f[a];
        }
        s
    }
}

/// Wall traces of the Euler background at one instant.
#[derive(Clone, Debug)]
pub struct WallTraces {
    pub side: WallSide,
    pub u: [Wall; 3],
    pub theta: Wall,
    /// `d_{x3} u_0` and `d_{x3} theta_0` at the wall.
    pub du3: [Wall; 3],
    pub dtheta3: Wall,
    /// Tangential gradients `[component][direction]`.
    pub grad_u: [[Wall; 2]; 3],
    pub grad_theta: [Wall; 2],
    pub p0: f64,
}

impl WallTraces {
    pub fn new(g: &SpatialGrid, s: &EulerState, p0: f64, side: WallSide) -> Self {
        let top = side.is_top();
        let u: [Wall; 3] = std::array::from_fn(|c| g.trace(&s.u[c], top));
        let theta = g.trace(&s.theta, top);
        let du3 = std::array::from_fn(|c| g.trace(&g.d3(&s.u[c]), top));
        let dtheta3 = g.trace(&g.d3(&s.theta), top);
        let grad_u = std::array::from_fn(|c| g.wall_grad(&u[c]));
        let grad_theta = g.wall_grad(&theta);
        WallTraces { side, u, theta, du3, dtheta3, grad_u, grad_theta, p0 }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// `f_0` at wall point `i`.
    pub fn state(&self, i: usize) -> MacroState {
        MacroState::new(self.p0 - self.theta[i], [self.u[0][i], self.u[1][i], self.u[2][i]], self.theta[i])
    }

    /// Drift coefficient `d_{x3} u_{0,3}` of the layer equations.
    pub fn drift(&self) -> Wall {
        self.du3[2].clone()
    }

    /// Order-1 Neumann data in closed form: `+-d_{x3} u_{0,i}`, `+-d_{x3} theta_0`.
    pub fn neumann_closed_form(&self) -> NeumannData {
        let s = self.side.sign();
        NeumannData {
            u: [self.du3[0].iter().map(|x| s * x).collect(), self.du3[1].iter().map(|x| s * x).collect()],
            theta: self.dtheta3.iter().map(|x| s * x).collect(),
        }
    }
}

/// `d_y u_bar_{k,i}(0)` for `i = 1, 2` and `d_y theta_bar_k(0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeumannData {
    pub u: [Wall; 2],
    pub theta: Wall,
}

impl NeumannData {
    pub fn zeros(n: usize) -> Self {
        NeumannData { u: [vec![0.0; n], vec![0.0; n]], theta: vec![0.0; n] }
    }

    pub fn as_array(&self) -> [&Wall; 3] {
        [&self.u[0], &self.u[1], &self.theta]
    }

    pub fn max_diff(&self, o: &NeumannData) -> f64 {
        self.as_array()
            .iter()
            .zip(o.as_array())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Wall moments `<A_3i, G_1>`, `<B_3, G_1>` computed from the kinetic side:
/// `G_1 = L^-1 { -(I-P)(v . grad f_0) + Gamma(P f_1, P f_1) }`, the remaining
/// quadratic terms being even in `v_3` at the wall. Uses self-adjointness of
/// `L`, so only `L^-1 A_31`, `L^-1 A_32`, `L^-1 B_3` are solved for.
pub struct KineticNeumann {
    basis: crate::hermite::MultiIndexSet,
    targets: [Coeffs; 3],
    forms: Option<[DMatrix<f64>; 3]>,
    in_len: usize,
    pub lambda: f64,
    pub kappa: f64,
}

impl KineticNeumann {
    pub fn new(op: &CollisionOperator) -> Result<Self> {
        let tr = op.transport()?;
        let bs = [Burnett::A(2, 0), Burnett::A(2, 1), Burnett::B(2)];
        let mut targets: [Coeffs; 3] = Default::default();
        for (t, b) in targets.iter_mut().zip(bs) {
            *t = op.linverse(&b.coeffs(&op.basis))?;
        }
        let forms = match op.gamma_form(&targets[0]) {
            Ok(f0) => Some([f0, op.gamma_form(&targets[1])?, op.gamma_form(&targets[2])?]),
            Err(Error::Unsupported(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(KineticNeumann {
            basis: op.basis.clone(),
            targets,
            forms,
            in_len: op.in_basis.len(),
            lambda: tr.lambda,
            kappa: tr.kappa,
        })
    }

    /// `[<A_31, G_1>, <A_32, G_1>, <B_3, G_1>]` at one wall point.
    pub fn g1_moments(&self, tr: &WallTraces, i: usize, pf1: Option<&MacroState>) -> Result<[f64; 3]> {
        let mut h = vec![0.0; self.basis.len()];
        for j in 0..3 {
            let (du, dth) = if j < 2 {
                ([tr.grad_u[0][j][i], tr.grad_u[1][j][i], tr.grad_u[2][j][i]], tr.grad_theta[j][i])
            } else {
                ([tr.du3[0][i], tr.du3[1][i], tr.du3[2][i]], tr.dtheta3[i])
            };
            // rho_0 + theta_0 is constant
            let grad = MacroState::new(-dth, du, dth);
            let vf = modal::times_v(&self.basis, &modal::maxwellian(&self.basis, &grad), j);
            for (x, y) in h.iter_mut().zip(&vf) {
                *x += y;
            }
        }
        let h: Coeffs = modal::micro(&self.basis, &h).iter().map(|x| -x).collect();
        let mut out = [0.0; 3];
        for (o, t) in out.iter_mut().zip(&self.targets) {
            *o = modal::dot(t, &h);
        }
        if let Some(s) = pf1 {
            let forms = self.forms.as_ref().ok_or_else(|| {
                Error::Unsupported("quadratic wall terms need the collision tensor".into())
            })?;
            let c = modal::maxwellian(&self.basis, s);
            let c = nalgebra::DVector::from_column_slice(&c[..self.in_len]);
            for (o, m) in out.iter_mut().zip(forms) {
                *o += c.dot(&(m * &c));
            }
        }
        Ok(out)
    }

    /// Neumann data of order `k` from the wall moments: `d_y u_bar = -+ <A_3i, G>/lambda`.
    /// `pf1` holds the wall traces of `P f_1` when available.
    pub fn neumann_data(&self, k: usize, tr: &WallTraces, pf1: Option<&[MacroState]>) -> Result<NeumannData> {
        if k != 1 {
            return Err(Error::Unsupported(format!("Neumann data of layer order {k} (built orders stop at 1)")));
        }
        let n = tr.len();
        let s = tr.side.sign();
        let mut nd = NeumannData::zeros(n);
        for i in 0..n {
            let m = self.g1_moments(tr, i, pf1.map(|p| &p[i]))?;
            nd.u[0][i] = -s * m[0] / self.lambda;
            nd.u[1][i] = -s * m[1] / self.lambda;
            nd.theta[i] = -s * m[2] / self.kappa;
        }
        Ok(nd)
    }
}

/// Per-wall layer problem `f_t + y c f_y + T(f) = D f_yy` on the half line with
/// `f_y(0) = b`, `f(y_max) = 0`, for the three unknowns `(u_1, u_2, theta)`.
pub trait LayerProblem {
    fn n_wall(&self) -> usize;
    fn drift(&self, t: f64) -> Result<Wall>;
    fn neumann(&self, t: f64) -> Result<NeumannData>;
    /// Tangential terms `T`, moved to the right-hand side with a minus sign.
    fn tangential(&self, t: f64, f: &[Vec<f64>; 3], grid: &HalfLineGrid) -> Result<[Vec<f64>; 3]>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerInit {
    Zero,
    /// `-b e^{-y}`, matching the Neumann data at `t = 0`.
    CompatibleExponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerConfig {
    pub ny: usize,
    pub y_max: f64,
    pub power: f64,
    pub ell: f64,
    pub init: LayerInit,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig { ny: 161, y_max: 40.0, power: 2.0, ell: 2.0, init: LayerInit::CompatibleExponential }
    }
}

impl LayerConfig {
    pub fn grid(&self) -> Result<HalfLineGrid> {
        HalfLineGrid::new(self.ny, self.y_max, self.power, self.ell)
    }
}

/// Solved layer of one order at one wall; fields indexed `w * ny + j`.
#[derive(Clone, Debug)]
pub struct LayerField {
    pub side: WallSide,
    pub order: usize,
    pub ny: usize,
    pub n_wall: usize,
    pub times: Vec<f64>,
    pub u: Vec<[Vec<f64>; 2]>,
    pub theta: Vec<Vec<f64>>,
    /// `d_t (u_1, u_2, theta)` at each snapshot, from the semi-discrete operator.
    pub rates: Vec<[Vec<f64>; 3]>,
    pub weighted_norms: Vec<f64>,
    pub decay_constants: Vec<f64>,
}

impl LayerField {
    pub fn at(&self, w: usize, j: usize) -> usize {
        w * self.ny + j
    }

    /// `rho_bar_1 = -theta_bar_1`.
    pub fn rho(&self, k: usize) -> Vec<f64> {
        self.theta[k].iter().map(|x| -x).collect()
    }

    /// `u_bar_{1,3} = 0`.
    pub fn u3(&self, _k: usize) -> Vec<f64> {
        vec![0.0; self.theta[0].len()]
    }

    pub fn column<'a>(&self, f: &'a [f64], w: usize) -> &'a [f64] {
        &f[w * self.ny..(w + 1) * self.ny]
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for k in 0..self.times.len() {
            for f in [&self.u[k][0], &self.u[k][1], &self.theta[k]] {
                m = f.iter().fold(m, |a, x| a.max(x.abs()));
            }
        }
        m
    }
}

fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &mut [f64]) {
    let n = d.len();
    let mut cp = vec![0.0; n];
    let mut beta = b[0];
    d[0] /= beta;
    for j in 1..n {
        cp[j - 1] = c[j - 1] / beta;
        beta = b[j] - a[j] * cp[j - 1];
        d[j] = (d[j] - a[j] * d[j - 1]) / beta;
    }
    for j in (0..n - 1).rev() {
        d[j] -= cp[j] * d[j + 1];
    }
}

/// Spatial operator rows for one column: `D f_yy - a(y) f_y` at interior nodes,
/// centred where the cell Peclet number allows and upwind otherwise; at `y = 0`
/// a mirrored ghost node carries the Neumann datum.
struct Stencil {
    lo: Vec<f64>,
    di: Vec<f64>,
    up: Vec<f64>,
    /// coefficient of the Neumann datum in row 0
    bc: f64,
}

fn stencil(grid: &HalfLineGrid, diff: f64, c: f64) -> Stencil {
    let y = &grid.y;
    let n = y.len() - 1; // unknowns 0..n-1, node n pinned to zero
    let (mut lo, mut di, mut up) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let h0 = y[1] - y[0];
    di[0] = -2.0 * diff / (h0 * h0);
    up[0] = 2.0 * diff / (h0 * h0);
    for j in 1..n {
        let (hm, hp) = (y[j] - y[j - 1], y[j + 1] - y[j]);
        let a = y[j] * c;
        let mut l = 2.0 * diff / (hm * (hm + hp));
        let mut u = 2.0 * diff / (hp * (hm + hp));
        let mut d = -2.0 * diff / (hm * hp);
        let pe = a.abs() * hm.max(hp) / (2.0 * diff);
        if pe <= 1.0 {
            l += a * hp / (hm * (hm + hp));
            u -= a * hm / (hp * (hm + hp));
            d -= a * (hp - hm) / (hm * hp);
        } else if a > 0.0 {
            l += a / hm;
            d -= a / hm;
        } else {
            u += a / hp;
            d -= a / hp;
        }
        lo[j] = l;
        di[j] = d;
        up[j] = u;
    }
    Stencil { lo, di, up, bc: -2.0 * diff / h0 }
}

fn apply_stencil(s: &Stencil, f: &[f64], b: f64) -> Vec<f64> {
    let n = s.di.len();
    let mut out = vec![0.0; n + 1];
    for j in 0..n {
        let mut v = s.di[j] * f[j] + s.up[j] * f[j + 1];
        if j > 0 {
            v += s.lo[j] * f[j - 1];
        }
        out[j] = v;
    }
    out[0] += s.bc * b;
    out
}

/// Integrate a layer problem with IMEX SBDF2 (SBDF1 on the first step):
/// diffusion and drift implicit, tangential terms extrapolated.
pub fn solve_layer<P: LayerProblem>(
    problem: &P,
    grid: &HalfLineGrid,
    diffusivity: [f64; 3],
    init: LayerInit,
    side: WallSide,
    order: usize,
    dt: f64,
    steps: usize,
) -> Result<LayerField> {
    let nw = problem.n_wall();
    let ny = grid.len();
    if steps == 0 || dt <= 0.0 {
        return Err(Error::Config("layer march needs a positive step and at least one step".into()));
    }
    let b0 = problem.neumann(0.0)?;
    let mut f: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; nw * ny]);
    if init == LayerInit::CompatibleExponential {
        for (c, fc) in f.iter_mut().enumerate() {
            for w in 0..nw {
                let b = b0.as_array()[c][w];
                for j in 0..ny - 1 {
                    fc[w * ny + j] = -b * (-grid.y[j]).exp();
                }
            }
        }
    }
    let rates_at = |t: f64, f: &[Vec<f64>; 3]| -> Result<[Vec<f64>; 3]> {
        let c = problem.drift(t)?;
        let b = problem.neumann(t)?;
        let tang = problem.tangential(t, f, grid)?;
        let mut out: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; nw * ny]);
        for k in 0..3 {
            for w in 0..nw {
                let st = stencil(grid, diffusivity[k], c[w]);
                let col = &f[k][w * ny..(w + 1) * ny];
                let r = apply_stencil(&st, col, b.as_array()[k][w]);
                for j in 0..ny - 1 {
                    out[k][w * ny + j] = r[j] - tang[k][w * ny + j];
                }
            }
        }
        Ok(out)
    };

    let mut field = LayerField {
        side,
        order,
        ny,
        n_wall: nw,
        times: vec![0.0],
        u: vec![[f[0].clone(), f[1].clone()]],
        theta: vec![f[2].clone()],
        rates: vec![rates_at(0.0, &f)?],
        weighted_norms: Vec::new(),
        decay_constants: Vec::new(),
    };
    let mut prev: Option<([Vec<f64>; 3], [Vec<f64>; 3])> = None;
    let mut tang_now = problem.tangential(0.0, &f, grid)?;
    for n in 0..steps {
        let t1 = (n + 1) as f64 * dt;
        let c = problem.drift(t1)?;
        let b = problem.neumann(t1)?;
        let mut next: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; nw * ny]);
        for k in 0..3 {
            for w in 0..nw {
                let st = stencil(grid, diffusivity[k], c[w]);
                let m = ny - 1;
                let (a0, a1) = if prev.is_some() { (1.5, dt) } else { (1.0, dt) };
                let lo: Vec<f64> = st.lo.iter().map(|x| -a1 * x).collect();
                let di: Vec<f64> = st.di.iter().map(|x| a0 - a1 * x).collect();
                let up: Vec<f64> = st.up.iter().map(|x| -a1 * x).collect();
                let mut rhs = vec![0.0; m];
                let cur = &f[k][w * ny..(w + 1) * ny];
                for j in 0..m {
                    let tn = tang_now[k][w * ny + j];
                    rhs[j] = match &prev {
                        Some((fp, tp)) => {
                            2.0 * cur[j] - 0.5 * fp[k][w * ny + j] - dt * (2.0 * tn - tp[k][w * ny + j])
                        }
                        None => cur[j] - dt * tn,
                    };
                }
                rhs[0] += a1 * st.bc * b.as_array()[k][w];
                thomas(&lo, &di, &up, &mut rhs);
                next[k][w * ny..w * ny + m].copy_from_slice(&rhs);
            }
        }
        if next.iter().any(|c| c.iter().any(|x| !x.is_finite())) {
            return Err(Error::Solver(format!("layer march produced non-finite values at t = {t1}")));
        }
        let tang_next = problem.tangential(t1, &next, grid)?;
        prev = Some((std::mem::replace(&mut f, next), std::mem::replace(&mut tang_now, tang_next)));
        field.times.push(t1);
        field.u.push([f[0].clone(), f[1].clone()]);
        field.theta.push(f[2].clone());
        field.rates.push(rates_at(t1, &f)?);
    }
    for k in 0..field.times.len() {
        let (mut sq, mut dc) = (0.0, 0.0f64);
        for fc in [&field.u[k][0], &field.u[k][1], &field.theta[k]] {
            for w in 0..nw {
                let col = &fc[w * ny..(w + 1) * ny];
                sq += grid.weighted_norm(col).powi(2);
                dc = dc.max(grid.decay_constant(col));
            }
        }
        let norm = (sq / nw as f64).sqrt();
        if !norm.is_finite() {
            return Err(Error::Solver("weighted layer norm is not finite".into()));
        }
        field.weighted_norms.push(norm);
        field.decay_constants.push(dc);
    }
    Ok(field)
}

/// Order-1 layer system at one wall, driven by the Euler background.
pub struct OrderOneLayer<'a, B: Background> {
    pub grid: &'a SpatialGrid,
    pub background: &'a B,
    pub p0: f64,
    pub side: WallSide,
    pub neumann: NeumannRoute<'a>,
}

/// How the Neumann data are produced.
pub enum NeumannRoute<'a> {
    ClosedForm,
    Kinetic(&'a KineticNeumann),
}

impl<B: Background> OrderOneLayer<'_, B> {
    pub fn traces(&self, t: f64) -> Result<WallTraces> {
        Ok(WallTraces::new(self.grid, &self.background.state(t)?, self.p0, self.side))
    }
}

impl<B: Background> LayerProblem for OrderOneLayer<'_, B> {
    fn n_wall(&self) -> usize {
        self.grid.res.n1 * self.grid.res.n2
    }

    fn drift(&self, t: f64) -> Result<Wall> {
        Ok(self.traces(t)?.drift())
    }

    fn neumann(&self, t: f64) -> Result<NeumannData> {
        let tr = self.traces(t)?;
        match self.neumann {
            NeumannRoute::ClosedForm => Ok(tr.neumann_closed_form()),
            NeumannRoute::Kinetic(k) => k.neumann_data(1, &tr, None),
        }
    }

    fn tangential(&self, t: f64, f: &[Vec<f64>; 3], grid: &HalfLineGrid) -> Result<[Vec<f64>; 3]> {
        let tr = self.traces(t)?;
        let nw = self.n_wall();
        let ny = grid.len();
        let mut out: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; nw * ny]);
        let mut slice = vec![0.0; nw];
        for j in 0..ny {
            let mut grads: [[Wall; 2]; 3] = Default::default();
            for c in 0..3 {
                for w in 0..nw {
                    slice[w] = f[c][w * ny + j];
                }
                grads[c] = self.grid.wall_grad(&slice);
            }
            for w in 0..nw {
                let i = w * ny + j;
                let (a1, a2) = (tr.u[0][w], tr.u[1][w]);
                let (b1, b2) = (f[0][i], f[1][i]);
                for c in 0..2 {
                    out[c][i] = a1 * grads[c][0][w] + a2 * grads[c][1][w] + b1 * tr.grad_u[c][0][w] + b2 * tr.grad_u[c][1][w];
                }
                out[2][i] = a1 * grads[2][0][w] + a2 * grads[2][1][w] + b1 * tr.grad_theta[0][w] + b2 * tr.grad_theta[1][w];
            }
        }
        Ok(out)
    }
}

/// Sources of the layer system of order `k`. At order 1 every source vanishes
/// and the system is homogeneous; higher orders are not built.
pub fn assemble_layer_sources(k: usize, n_wall: usize, ny: usize) -> Result<[Vec<f64>; 4]> {
    if k != 1 {
        return Err(Error::Unsupported(format!("layer sources of order {k} (built orders stop at 1)")));
    }
    Ok(std::array::from_fn(|_| vec![0.0; n_wall * ny]))
}

/// Quantities fixed by the order-1 layer at one snapshot.
#[derive(Clone, Debug)]
pub struct OrderOneClosure {
    /// `u_bar_{2,3} = -+ int_y^inf div u_bar_1`.
    pub u2_3: Vec<f64>,
    /// `rho_bar_2 + theta_bar_2 = (2/3) u_0^+- . u_bar_1`.
    pub p2: Vec<f64>,
    /// Pointwise residual of `d_y u_bar_{2,3} -+ div u_bar_1` away from the
    /// two end nodes.
    pub divergence_defect: f64,
}

/// Closure relations for `k = 1`, `n = 3`.
pub fn closure_relations(
    k: usize,
    layer: &LayerField,
    snapshot: usize,
    g: &SpatialGrid,
    grid: &HalfLineGrid,
    tr: &WallTraces,
) -> Result<OrderOneClosure> {
    if k != 1 {
        return Err(Error::Unsupported(format!("closure relations of order {k} (built orders stop at 1)")));
    }
    let (nw, ny) = (layer.n_wall, layer.ny);
    let s = layer.side.sign();
    let u = &layer.u[snapshot];
    let mut div = vec![0.0; nw * ny];
    let mut slice = vec![0.0; nw];
    for j in 0..ny {
        for c in 0..2 {
            for w in 0..nw {
                slice[w] = u[c][w * ny + j];
            }
            let gr = g.wall_grad(&slice);
            for w in 0..nw {
                div[w * ny + j] += gr[c][w];
            }
        }
    }
    let mut u2_3 = vec![0.0; nw * ny];
    let mut defect: f64 = 0.0;
    let tail_scale = div.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    for w in 0..nw {
        let col = &div[w * ny..(w + 1) * ny];
        let tail = grid.tail_integral(col);
        if tail[ny - 1].abs() > 1e-6 * (1.0 + tail_scale) {
            return Err(Error::Solver("layer divergence does not decay fast enough for the far-field integral".into()));
        }
        for j in 0..ny {
            u2_3[w * ny + j] = -s * tail[j];
        }
        let d = grid.deriv(&u2_3[w * ny..(w + 1) * ny]);
        for j in 1..ny - 1 {
            // the trapezoid primitive differentiated by the centred rule is exact
            // to second order in the mesh
            defect = defect.max((d[j] - s * col[j]).abs());
        }
    }
    let p2 = (0..nw * ny)
        .map(|i| {
            let w = i / ny;
            2.0 / 3.0 * (tr.u[0][w] * u[0][i] + tr.u[1][w] * u[1][i])
        })
        .collect();
    Ok(OrderOneClosure { u2_3, p2, divergence_defect: defect })
}

/// `(I-P) f_bar_2 = (I-P)(f_0^+- P f_bar_1 / sqrt(mu))` at one point.
pub fn layer_micro_part(basis: &crate::hermite::MultiIndexSet, wall: &MacroState, layer: &MacroState) -> Coeffs {
    modal::micro_quadratic(basis, wall, layer)
}

/// `P f_bar_1` at one point: `(rho, u, theta) = (-theta_bar, (u_bar_1, u_bar_2, 0), theta_bar)`.
pub fn layer_state(layer: &LayerField, snapshot: usize, i: usize) -> MacroState {
    let th = layer.theta[snapshot][i];
    MacroState::new(-th, [layer.u[snapshot][0][i], layer.u[snapshot][1][i], 0.0], th)
}

/// Solve the order-1 layers at both walls over the background's horizon.
#[allow(clippy::too_many_arguments)]
pub fn solve_order_one<B: Background>(
    g: &SpatialGrid,
    background: &B,
    p0: f64,
    cfg: &LayerConfig,
    transport: crate::collision::TransportCoefficients,
    route: &NeumannRoute<'_>,
    dt: f64,
    steps: usize,
) -> Result<[LayerField; 2]> {
    let grid = cfg.grid()?;
    let diff = [transport.lambda, transport.lambda, 0.4 * transport.kappa];
    let solve = |side: WallSide| {
        let neumann = match route {
            NeumannRoute::ClosedForm => NeumannRoute::ClosedForm,
            NeumannRoute::Kinetic(k) => NeumannRoute::Kinetic(k),
        };
        let prob = OrderOneLayer { grid: g, background, p0, side, neumann };
        solve_layer(&prob, &grid, diff, cfg.init, side, 1, dt, steps)
    };
    Ok([solve(WallSide::Bottom)?, solve(WallSide::Top)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::{CollisionConfig, TransportCoefficients};
    use crate::euler::EulerPreset;
    use crate::spectral::Resolution;
    use std::f64::consts::PI;
    use std::sync::OnceLock;

    fn op() -> &'static CollisionOperator {
        static OP: OnceLock<CollisionOperator> = OnceLock::new();
        OP.get_or_init(|| {
            CollisionOperator::assemble(&CollisionConfig { degree: 6, gamma_degree: 2, ..Default::default() }).unwrap()
        })
    }

    fn sgrid(n: usize, m: usize) -> SpatialGrid {
        SpatialGrid::new(Resolution { n1: n, n2: n, m3: m }).unwrap()
    }

    struct Frozen(EulerState);

    impl Background for Frozen {
        fn state(&self, _t: f64) -> Result<EulerState> {
            Ok(self.0.clone())
        }
    }

    /// Smooth state, even in `x3 -> 1 - x3` for the tangential parts and odd for `u_3`.
    fn symmetric_state(g: &SpatialGrid) -> EulerState {
        EulerState {
            u: [
                g.sample(|x| (0.5 + (PI * x[2]).sin()) * (0.3 + 0.2 * (2.0 * PI * x[1]).cos())),
                g.sample(|x| 0.1 * (PI * x[2]).cos().powi(2) * (2.0 * PI * x[0]).sin()),
                g.sample(|x| 0.05 * (2.0 * PI * x[2]).sin() * (2.0 * PI * x[0]).cos()),
            ],
            theta: g.sample(|x| 0.2 * (2.0 * PI * x[2]).cos() + 0.1 * (2.0 * PI * x[0]).sin()),
        }
    }

    #[test]
    fn quadrature_of_algebraic_weight() {
        let g = HalfLineGrid::new(161, 40.0, 2.0, 2.0).unwrap();
        let f: Vec<f64> = g.y.iter().map(|y| (1.0 + y).powf(-g.ell - 2.0)).collect();
        let exact = (1.0 - 41f64.powf(-3.0)) / 3.0;
        assert!((g.integrate(&f) - exact).abs() < 0.01 * exact);
        let e: Vec<f64> = g.y.iter().map(|y| (-y).exp()).collect();
        let tail = g.tail_integral(&e);
        for (t, y) in tail.iter().zip(&g.y) {
            assert!((t - (-y).exp()).abs() < 1e-4);
        }
        let d = g.deriv(&e);
        assert!((d[0] + 1.0).abs() < 1e-3 && (d[10] + (-g.y[10]).exp()).abs() < 1e-3, "{} {}", d[0], d[10] + (-g.y[10]).exp());
        assert!((g.interpolate(&e, 1.234) - (-1.234f64).exp()).abs() < 1e-5);
    }

    #[test]
    fn heat_benchmark_matches_similarity_solution() {
        let kappa = op().transport().unwrap().kappa;
        let diff = 0.4 * kappa;
        let grid = HalfLineGrid::new(321, 40.0, 2.0, 2.0).unwrap();
        let (dt, steps) = (1e-3, 1000);
        let (err, still) = crate::benchmarks::heat_benchmark(diff, &grid, dt, steps).unwrap();
        assert!(err < 1e-4, "{err}");
        assert!(still);
    }

    #[test]
    fn zero_data_stay_zero() {
        let g = sgrid(8, 13);
        let bg = Frozen(EulerPreset::Zero { theta: 0.0 }.initial(&g));
        let tr = TransportCoefficients { lambda: 0.09, kappa: 0.34 };
        let cfg = LayerConfig { ny: 41, ..Default::default() };
        let [lo, hi] = solve_order_one(&g, &bg, 1.0, &cfg, tr, &NeumannRoute::ClosedForm, 0.05, 4).unwrap();
        assert_eq!(lo.max_abs(), 0.0);
        assert_eq!(hi.max_abs(), 0.0);
        assert!(assemble_layer_sources(1, 4, 5).unwrap().iter().all(|s| s.iter().all(|x| *x == 0.0)));
        assert!(assemble_layer_sources(2, 4, 5).is_err());
    }

    #[test]
    fn kinetic_neumann_matches_trace() {
        let g = sgrid(8, 21);
        let st = symmetric_state(&g);
        let kn = KineticNeumann::new(op()).unwrap();
        for side in WallSide::BOTH {
            let tr = WallTraces::new(&g, &st, 1.0, side);
            let pf1: Vec<MacroState> =
                (0..tr.len()).map(|i| MacroState::new(0.1 * i as f64 / 64.0, [0.2, -0.1, 0.0], 0.05)).collect();
            let a = kn.neumann_data(1, &tr, Some(&pf1)).unwrap();
            let b = tr.neumann_closed_form();
            assert!(a.max_diff(&b) < 1e-6, "{}", a.max_diff(&b));
            let m = kn.g1_moments(&tr, 3, None).unwrap();
            assert!((m[0] + kn.lambda * tr.du3[0][3]).abs() < 1e-8);
            assert!((m[2] + kn.kappa * tr.dtheta3[3]).abs() < 1e-8);
        }
        let tr = WallTraces::new(&g, &EulerPreset::Zero { theta: 0.3 }.initial(&g), 1.0, WallSide::Top);
        assert_eq!(kn.neumann_data(1, &tr, None).unwrap().max_diff(&NeumannData::zeros(tr.len())), 0.0);
        assert!(kn.neumann_data(2, &tr, None).is_err());
    }

    #[test]
    fn order_one_layers_mirror_and_close() {
        let g = sgrid(8, 21);
        let st = symmetric_state(&g);
        let bg = Frozen(st.clone());
        let tr = op().transport().unwrap();
        let cfg = LayerConfig::default();
        let [lo, hi] = solve_order_one(&g, &bg, 1.0, &cfg, tr, &NeumannRoute::ClosedForm, 0.02, 10).unwrap();
        assert!(lo.max_abs() > 1e-3);
        for k in [0, 5, 10] {
            let d = lo.theta[k].iter().zip(&hi.theta[k]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let du = lo.u[k][0].iter().zip(&hi.u[k][0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-12 && du < 1e-12, "{k}: {d} {du}");
            // Boussinesq closure by construction
            assert!(lo.rho(k).iter().zip(&lo.theta[k]).all(|(r, t)| r + t == 0.0));
            assert!(lo.u3(k).iter().all(|x| *x == 0.0));
        }
        let grid = cfg.grid().unwrap();
        // Neumann data at the wall are carried by the discrete solution
        let trb = WallTraces::new(&g, &st, 1.0, WallSide::Bottom);
        let nb = trb.neumann_closed_form();
        let last = lo.times.len() - 1;
        for w in [0, 17, 40] {
            let d = grid.deriv(lo.column(&lo.theta[last], w));
            assert!((d[0] - nb.theta[w]).abs() < 2e-2 * (1.0 + nb.theta[w].abs()));
        }
        for side_layer in [&lo, &hi] {
            let trs = WallTraces::new(&g, &st, 1.0, side_layer.side);
            let cl = closure_relations(1, side_layer, last, &g, &grid, &trs).unwrap();
            let scale = cl.u2_3.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            assert!(scale > 0.0);
            assert!(cl.divergence_defect < 1e-2 * scale + 1e-12, "{} vs {scale}", cl.divergence_defect);
            assert!(cl.u2_3[lo.ny - 1].abs() < 1e-10);
        }
        assert!(lo.weighted_norms.iter().all(|x| x.is_finite()));
        assert!(lo.decay_constants.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn layer_micro_part_matches_collision_route() {
        let o = op();
        let wall = MacroState::new(0.9, [0.3, -0.2, 0.0], 0.1);
        let lay = MacroState::new(-0.05, [0.1, 0.2, 0.0], 0.05);
        let closed = layer_micro_part(&o.basis, &wall, &lay);
        let a = modal::maxwellian(&o.basis, &wall);
        let b = modal::maxwellian(&o.basis, &lay);
        let via = o.linverse(&o.apply_gamma_sym(&a, &b).unwrap()).unwrap();
        let diff: Vec<f64> = closed.iter().zip(&via).map(|(x, y)| x - y).collect();
        assert!(o.nu_norm(&diff) < 1e-6 * (1.0 + o.nu_norm(&closed)));
    }
}
