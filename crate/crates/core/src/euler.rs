//! Interior fluid orders: the incompressible Euler background, the linearized
//! systems with prescribed divergence, their sources and the pressure gauges.

use crate::collision::CollisionOperator;
use crate::error::{Error, Result};
use crate::spectral::{max_abs, Field, SpatialGrid};
use crate::velocity::{modal, Burnett, MacroState};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Wall field over `T^2`, index `i1 * n2 + i2`.
pub type Wall = Vec<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct EulerState {
    pub u: [Field; 3],
    pub theta: Field,
}

impl EulerState {
    pub fn zeros(g: &SpatialGrid) -> Self {
        EulerState { u: [g.zeros(), g.zeros(), g.zeros()], theta: g.zeros() }
    }

    fn axpy(&self, a: f64, d: &EulerState) -> EulerState {
        let f = |x: &Field, y: &Field| x.iter().zip(y).map(|(p, q)| p + a * q).collect::<Field>();
        EulerState {
            u: [f(&self.u[0], &d.u[0]), f(&self.u[1], &d.u[1]), f(&self.u[2], &d.u[2])],
            theta: f(&self.theta, &d.theta),
        }
    }

    pub fn macro_at(&self, p0: f64, i: usize) -> MacroState {
        MacroState::new(p0 - self.theta[i], [self.u[0][i], self.u[1][i], self.u[2][i]], self.theta[i])
    }
}

fn rk4_combine(s: &EulerState, k: [&EulerState; 4], dt: f64) -> EulerState {
    s.axpy(dt / 6.0, k[0])
        .axpy(dt / 3.0, k[1])
        .axpy(dt / 3.0, k[2])
        .axpy(dt / 6.0, k[3])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EulerPreset {
    /// `u = 0`, constant temperature.
    Zero { theta: f64 },
    /// `u = (U(x3), 0, 0)` with `U = A (1/2 + sin(pi x3))`; the temperature
    /// `B (cos(pi x3) + cos(2 pi x1) (1 + x3)/2)` is carried along by `U`.
    Shear { amplitude: f64, theta_amplitude: f64 },
    /// Shear plus a recirculating cell in the (x1, x3) plane.
    Cells { amplitude: f64, theta_amplitude: f64 },
}

impl Default for EulerPreset {
    fn default() -> Self {
        EulerPreset::Shear { amplitude: 0.5, theta_amplitude: 0.2 }
    }
}

impl EulerPreset {
    pub fn initial(&self, g: &SpatialGrid) -> EulerState {
        match *self {
            EulerPreset::Zero { theta } => {
                let mut s = EulerState::zeros(g);
                s.theta = vec![theta; g.len()];
                s
            }
            EulerPreset::Shear { amplitude, theta_amplitude } => shear_exact(g, amplitude, theta_amplitude, 0.0),
            EulerPreset::Cells { amplitude, theta_amplitude } => {
                let a = amplitude;
                let u1 = g.sample(|x| {
                    a * (0.5 + (PI * x[2]).sin()) + 0.5 * a * (2.0 * PI * x[0]).sin() * (PI * x[2]).cos()
                });
                let u2 = g.sample(|x| 0.3 * a * (2.0 * PI * x[0]).cos());
                let u3 = g.sample(|x| -a * (2.0 * PI * x[0]).cos() * (PI * x[2]).sin());
                let theta = g.sample(|x| {
                    theta_amplitude * ((PI * x[2]).cos() + (2.0 * PI * x[1]).cos() * (1.0 + x[2]) / 2.0)
                });
                EulerState { u: [u1, u2, u3], theta }
            }
        }
    }

    /// Closed-form solution where one is known.
    pub fn exact(&self, g: &SpatialGrid, t: f64) -> Option<EulerState> {
        match *self {
            EulerPreset::Zero { .. } => Some(self.initial(g)),
            EulerPreset::Shear { amplitude, theta_amplitude } => Some(shear_exact(g, amplitude, theta_amplitude, t)),
            EulerPreset::Cells { .. } => None,
        }
    }
}

fn shear_exact(g: &SpatialGrid, a: f64, b: f64, t: f64) -> EulerState {
    let uu = move |x3: f64| a * (0.5 + (PI * x3).sin());
    let u1 = g.sample(|x| uu(x[2]));
    let theta = g.sample(|x| {
        b * ((PI * x[2]).cos() + (2.0 * PI * (x[0] - uu(x[2]) * t)).cos() * (1.0 + x[2]) / 2.0)
    });
    EulerState { u: [u1, g.zeros(), g.zeros()], theta }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub horizon: f64,
    pub cfl: f64,
    /// Upper bound for the step of the linearized systems.
    pub dt_max: f64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig { horizon: 0.5, cfl: 0.5, dt_max: 0.025 }
    }
}

/// Euler background sampled every `h` (half the step of the linearized systems).
#[derive(Clone, Debug)]
pub struct EulerSolution {
    pub h: f64,
    pub times: Vec<f64>,
    pub states: Vec<EulerState>,
    /// `p_1` including the gauge constant.
    pub p1: Vec<Field>,
    pub gauge_c1: Vec<f64>,
    /// `p_0 = rho_0 + theta_0`, constant.
    pub p0: f64,
    pub energy: Vec<f64>,
    pub div_max: Vec<f64>,
    pub poisson_defect: Vec<f64>,
}

pub struct EulerRates {
    pub du: [Field; 3],
    pub dtheta: Field,
    /// Zero-mean pressure.
    pub p: Field,
    pub defect: f64,
}

pub fn euler_rhs(g: &SpatialGrid, s: &EulerState) -> EulerRates {
    let nl: [Field; 3] = std::array::from_fn(|i| g.advect(&s.u, &s.u[i]).iter().map(|x| -x).collect());
    let (p, defect) = pressure_projection(g, &nl);
    let gp = g.grad(&p);
    let du = std::array::from_fn(|i| nl[i].iter().zip(&gp[i]).map(|(a, b)| a - b).collect());
    let dtheta = g.advect(&s.u, &s.theta).iter().map(|x| -x).collect();
    EulerRates { du, dtheta, p, defect }
}

/// Pressure making `w - grad p` divergence free with zero normal component at
/// the walls.
fn pressure_projection(g: &SpatialGrid, w: &[Field; 3]) -> (Field, f64) {
    let d = g.div(w);
    g.poisson_neumann(&d, &g.trace(&w[2], false), &g.trace(&w[2], true))
}

fn cfl_number(g: &SpatialGrid, s: &EulerState, dt: f64) -> f64 {
    let m = g.res.m3;
    let dx3: Vec<f64> = (0..m)
        .map(|i| {
            let lo = if i > 0 { g.x3[i] - g.x3[i - 1] } else { f64::INFINITY };
            let hi = if i + 1 < m { g.x3[i + 1] - g.x3[i] } else { f64::INFINITY };
            lo.min(hi)
        })
        .collect();
    let mut c: f64 = 0.0;
    for i in 0..g.len() {
        let r = s.u[0][i].abs() * g.res.n1 as f64
            + s.u[1][i].abs() * g.res.n2 as f64
            + s.u[2][i].abs() / dx3[i % m];
        c = c.max(r * dt);
    }
    c
}

/// Number of linearized steps over the horizon for a given background state.
pub fn plan_steps(g: &SpatialGrid, init: &EulerState, tc: &TimeConfig) -> Result<usize> {
    if !(tc.horizon > 0.0 && tc.cfl > 0.0 && tc.dt_max > 0.0) {
        return Err(Error::Config("horizon, cfl and dt_max must be positive".into()));
    }
    // the background runs at dt/2
    let c1 = cfl_number(g, init, 1.0);
    let dt = if c1 > 0.0 { (2.0 * tc.cfl / c1).min(tc.dt_max) } else { tc.dt_max };
    Ok((tc.horizon / dt).ceil().max(1.0) as usize)
}

pub fn divergence_free_defect(g: &SpatialGrid, u: &[Field; 3]) -> f64 {
    let d = max_abs(&g.div(u));
    let w = max_abs(&g.trace(&u[2], false)).max(max_abs(&g.trace(&u[2], true)));
    d.max(w)
}

/// Incompressible Euler with slip walls, RK4 with a pressure projection per
/// stage. `steps` linearized steps give `2 steps` background steps.
pub fn solve_euler0(
    g: &SpatialGrid,
    init: &EulerState,
    p0: f64,
    mean_rho1_theta1: f64,
    horizon: f64,
    steps: usize,
    cfl: f64,
) -> Result<EulerSolution> {
    let scale = 1.0 + init.u.iter().map(|c| max_abs(c)).fold(0.0, f64::max);
    let d0 = divergence_free_defect(g, &init.u);
    if d0 > 1e-8 * scale {
        return Err(Error::Invariant(format!(
            "initial velocity is not divergence free with slip traces (defect {d0:.3e})"
        )));
    }
    let n = 2 * steps;
    let h = horizon / n as f64;
    let mut states = Vec::with_capacity(n + 1);
    let mut p1 = Vec::with_capacity(n + 1);
    let mut gauge_c1 = Vec::with_capacity(n + 1);
    let mut energy = Vec::with_capacity(n + 1);
    let mut div_max = Vec::with_capacity(n + 1);
    let mut poisson_defect = Vec::with_capacity(n + 1);
    let mut s = init.clone();
    for k in 0..=n {
        let c = cfl_number(g, &s, h);
        if c > 2.0 * cfl {
            return Err(Error::Solver(format!("CFL number {c:.3} exceeds the limit at step {k}")));
        }
        let k1 = euler_rhs(g, &s);
        let e = energy_of(g, &s.u);
        // gauge of the first-order pressure: mean of (rho_1 + theta_1)(0) - |u_0(t)|^2 / 3
        let c1 = mean_rho1_theta1 - e / 3.0;
        energy.push(e);
        div_max.push(divergence_free_defect(g, &s.u));
        poisson_defect.push(k1.defect.abs());
        p1.push(k1.p.iter().map(|x| x + c1).collect());
        gauge_c1.push(c1);
        if !s.theta.iter().all(|x| x.is_finite()) {
            return Err(Error::Solver(format!("non-finite Euler state at step {k}")));
        }
        states.push(s.clone());
        if k == n {
            break;
        }
        let r1 = EulerState { u: k1.du, theta: k1.dtheta };
        let s2 = s.axpy(0.5 * h, &r1);
        let k2 = euler_rhs(g, &s2);
        let r2 = EulerState { u: k2.du, theta: k2.dtheta };
        let s3 = s.axpy(0.5 * h, &r2);
        let k3 = euler_rhs(g, &s3);
        let r3 = EulerState { u: k3.du, theta: k3.dtheta };
        let s4 = s.axpy(h, &r3);
        let k4 = euler_rhs(g, &s4);
        let r4 = EulerState { u: k4.du, theta: k4.dtheta };
        s = rk4_combine(&s, [&r1, &r2, &r3, &r4], h);
        let d = divergence_free_defect(g, &s.u);
        if d > 1e-6 * scale {
            return Err(Error::Solver(format!("projection lost the divergence constraint ({d:.3e})")));
        }
    }
    let times = (0..=n).map(|k| k as f64 * h).collect();
    Ok(EulerSolution { h, times, states, p1, gauge_c1, p0, energy, div_max, poisson_defect })
}

pub fn energy_of(g: &SpatialGrid, u: &[Field; 3]) -> f64 {
    let sq: Field = (0..u[0].len()).map(|i| u[0][i].powi(2) + u[1][i].powi(2) + u[2][i].powi(2)).collect();
    g.integrate(&sq)
}

impl EulerSolution {
    pub fn sample_index(&self, t: f64) -> Result<usize> {
        let k = (t / self.h).round();
        if (t - k * self.h).abs() > 1e-9 * self.h.max(1.0) || k < 0.0 || k as usize >= self.states.len() {
            return Err(Error::Invariant(format!("time {t} is not a stored background sample")));
        }
        Ok(k as usize)
    }

    pub fn steps(&self) -> usize {
        (self.states.len() - 1) / 2
    }

    /// Time derivatives at sample `k`: `(du0, dtheta0, dp1)`.
    pub fn rates(&self, g: &SpatialGrid, k: usize) -> ([Field; 3], Field, Field) {
        let s = &self.states[k];
        let r = euler_rhs(g, s);
        // d/dt of -(u.grad)u
        let dn: [Field; 3] = std::array::from_fn(|i| {
            let a = g.advect(&r.du, &s.u[i]);
            let b = g.advect(&s.u, &r.du[i]);
            a.iter().zip(&b).map(|(x, y)| -x - y).collect()
        });
        let (dp, _) = pressure_projection(g, &dn);
        let dc1 = -2.0 / 3.0 * {
            let d: Field = (0..g.len()).map(|i| (0..3).map(|c| s.u[c][i] * r.du[c][i]).sum()).collect();
            g.integrate(&d)
        };
        let dp: Field = dp.iter().map(|x| x + dc1).collect();
        (r.du, r.dtheta, dp)
    }
}

/// Analytic or sampled background `(u_0, theta_0)(t)`.
pub trait Background {
    fn state(&self, t: f64) -> Result<EulerState>;
}

impl Background for EulerSolution {
    fn state(&self, t: f64) -> Result<EulerState> {
        Ok(self.states[self.sample_index(t)?].clone())
    }
}

/// Data of a linearized system with prescribed divergence.
pub trait LinearSources {
    fn r(&self, t: f64) -> Result<Field>;
    fn dt_r(&self, t: f64) -> Result<Field>;
    fn h(&self, t: f64) -> Result<[Field; 3]>;
    fn q(&self, t: f64) -> Result<Field>;
    fn p(&self, t: f64) -> Result<Field>;
    /// `u_3(0) = -d0`.
    fn d0(&self, t: f64) -> Result<Wall>;
    /// `u_3(1) = d1`.
    fn d1(&self, t: f64) -> Result<Wall>;
    fn dt_d0(&self, t: f64) -> Result<Wall>;
    fn dt_d1(&self, t: f64) -> Result<Wall>;
    /// Prescribed mean of the pressure.
    fn gauge(&self, t: f64) -> Result<f64>;
}

#[derive(Clone, Debug)]
pub struct LinearSolution {
    pub dt: f64,
    pub times: Vec<f64>,
    pub u: Vec<[Field; 3]>,
    pub dt_u: Vec<[Field; 3]>,
    pub theta: Vec<Field>,
    pub rho: Vec<Field>,
    pub p: Vec<Field>,
    pub div_defect: Vec<f64>,
    pub gauge_defect: Vec<f64>,
    pub flux_defect: Vec<f64>,
    pub poisson_defect: Vec<f64>,
}

impl LinearSolution {
    pub fn max_div_defect(&self) -> f64 {
        self.div_defect.iter().cloned().fold(0.0, f64::max)
    }
    pub fn max_gauge_defect(&self) -> f64 {
        self.gauge_defect.iter().cloned().fold(0.0, f64::max)
    }
    pub fn max_flux_defect(&self) -> f64 {
        self.flux_defect.iter().cloned().fold(0.0, f64::max)
    }
}

struct Lift {
    u: [Field; 3],
    dt_u: [Field; 3],
}

// gradient lift u_hat = grad q with div u_hat = r and the prescribed wall traces
fn lift(g: &SpatialGrid, src: &dyn LinearSources, t: f64) -> Result<Lift> {
    let r = src.r(t)?;
    let d0 = src.d0(t)?;
    let d1 = src.d1(t)?;
    let compat = g.integrate_wall(&d0) + g.integrate_wall(&d1) - g.integrate(&r);
    let scale = 1.0 + max_abs(&r) + max_abs(&d0) + max_abs(&d1);
    if compat.abs() > 1e-8 * scale {
        return Err(Error::Invariant(format!(
            "solvability violated at t = {t}: int(d0 + d1) - int(r) = {compat:.3e}"
        )));
    }
    let neg0: Wall = d0.iter().map(|x| -x).collect();
    let (q, _) = g.poisson_neumann(&r, &neg0, &d1);
    let dr = src.dt_r(t)?;
    let dd0: Wall = src.dt_d0(t)?.iter().map(|x| -x).collect();
    let (dq, _) = g.poisson_neumann(&dr, &dd0, &src.dt_d1(t)?);
    Ok(Lift { u: g.grad(&q), dt_u: g.grad(&dq) })
}

/// Initial velocity made of the gradient lift at `t = 0` plus a divergence-free
/// remainder with vanishing normal wall traces (`None` for a zero remainder).
pub fn compatible_initial_velocity(
    g: &SpatialGrid,
    src: &dyn LinearSources,
    remainder: Option<&[Field; 3]>,
) -> Result<[Field; 3]> {
    let l = lift(g, src, 0.0)?;
    Ok(match remainder {
        None => l.u,
        Some(r) => std::array::from_fn(|i| l.u[i].iter().zip(&r[i]).map(|(a, b)| a + b).collect()),
    })
}

struct LinRate {
    dv: [Field; 3],
    dtheta: Field,
    p: Field,
    defect: f64,
    lift: Lift,
}

fn linear_rhs(
    g: &SpatialGrid,
    bg: &EulerState,
    src: &dyn LinearSources,
    t: f64,
    v: &[Field; 3],
    theta: &Field,
) -> Result<LinRate> {
    let lf = lift(g, src, t)?;
    let h = src.h(t)?;
    let n = g.len();
    let ut: [Field; 3] = std::array::from_fn(|i| (0..n).map(|k| v[i][k] + lf.u[i][k]).collect());
    // W = h - d_t u_hat - (u0.grad) u~ - (u~.grad) u0
    let gu0: [[Field; 3]; 3] = std::array::from_fn(|i| g.grad(&bg.u[i]));
    let w: [Field; 3] = std::array::from_fn(|i| {
        let adv = g.advect(&bg.u, &ut[i]);
        (0..n)
            .map(|k| {
                let stretch = ut[0][k] * gu0[i][0][k] + ut[1][k] * gu0[i][1][k] + ut[2][k] * gu0[i][2][k];
                h[i][k] - lf.dt_u[i][k] - adv[k] - stretch
            })
            .collect()
    });
    let (p, defect) = pressure_projection(g, &w);
    let gp = g.grad(&p);
    let dv = std::array::from_fn(|i| (0..n).map(|k| w[i][k] - gp[i][k]).collect());
    let q = src.q(t)?;
    let adv = g.advect(&bg.u, theta);
    let gth = g.grad(&bg.theta);
    let dtheta = (0..n)
        .map(|k| q[k] - adv[k] - (ut[0][k] * gth[0][k] + ut[1][k] * gth[1][k] + ut[2][k] * gth[2][k]))
        .collect();
    Ok(LinRate { dv, dtheta, p, defect, lift: lf })
}

/// Lift, projected transport of the divergence-free remainder, temperature
/// transport and density recovery, advanced by RK4 with step `dt`.
pub fn solve_linearized_euler(
    g: &SpatialGrid,
    bg: &dyn Background,
    src: &dyn LinearSources,
    u_init: &[Field; 3],
    theta_init: &Field,
    dt: f64,
    steps: usize,
) -> Result<LinearSolution> {
    let n = g.len();
    let l0 = lift(g, src, 0.0)?;
    let mut v: [Field; 3] = std::array::from_fn(|i| (0..n).map(|k| u_init[i][k] - l0.u[i][k]).collect());
    let dv0 = divergence_free_defect(g, &v);
    let scale = 1.0 + u_init.iter().map(|c| max_abs(c)).fold(0.0, f64::max);
    if dv0 > 1e-8 * scale {
        return Err(Error::Invariant(format!(
            "initial data incompatible with the divergence and wall constraints ({dv0:.3e})"
        )));
    }
    let mut theta = theta_init.clone();
    let mut out = LinearSolution {
        dt,
        times: Vec::new(),
        u: Vec::new(),
        dt_u: Vec::new(),
        theta: Vec::new(),
        rho: Vec::new(),
        p: Vec::new(),
        div_defect: Vec::new(),
        gauge_defect: Vec::new(),
        flux_defect: Vec::new(),
        poisson_defect: Vec::new(),
    };
    for k in 0..=steps {
        let t = k as f64 * dt;
        let b0 = bg.state(t)?;
        let r1 = linear_rhs(g, &b0, src, t, &v, &theta)?;
        // record
        let ut: [Field; 3] = std::array::from_fn(|i| (0..n).map(|j| v[i][j] + r1.lift.u[i][j]).collect());
        let dut: [Field; 3] = std::array::from_fn(|i| (0..n).map(|j| r1.dv[i][j] + r1.lift.dt_u[i][j]).collect());
        let r = src.r(t)?;
        let div = g.div(&ut);
        out.div_defect.push(div.iter().zip(&r).fold(0.0, |m, (a, b)| m.max((a - b).abs())));
        let c = src.gauge(t)?;
        let pt: Field = r1.p.iter().map(|x| x + c).collect();
        out.gauge_defect.push((g.integrate(&pt) - c).abs());
        let flux = g.integrate_wall(&g.trace(&ut[2], true)) - g.integrate_wall(&g.trace(&ut[2], false));
        out.flux_defect.push((flux - g.integrate(&r)).abs());
        out.poisson_defect.push(r1.defect.abs());
        let pp = src.p(t)?;
        out.rho.push(pp.iter().zip(&theta).map(|(a, b)| a - b).collect());
        out.theta.push(theta.clone());
        out.u.push(ut);
        out.dt_u.push(dut);
        out.p.push(pt);
        out.times.push(t);
        if !theta.iter().all(|x| x.is_finite()) {
            return Err(Error::Solver(format!("non-finite linearized state at t = {t}")));
        }
        if k == steps {
            break;
        }
        let bh = bg.state(t + 0.5 * dt)?;
        let b1 = bg.state(t + dt)?;
        let stage = |a: f64, r: &LinRate| -> ([Field; 3], Field) {
            (
                std::array::from_fn(|i| (0..n).map(|j| v[i][j] + a * r.dv[i][j]).collect()),
                (0..n).map(|j| theta[j] + a * r.dtheta[j]).collect(),
            )
        };
        let (v2, th2) = stage(0.5 * dt, &r1);
        let r2 = linear_rhs(g, &bh, src, t + 0.5 * dt, &v2, &th2)?;
        let (v3, th3) = stage(0.5 * dt, &r2);
        let r3 = linear_rhs(g, &bh, src, t + 0.5 * dt, &v3, &th3)?;
        let (v4, th4) = stage(dt, &r3);
        let r4 = linear_rhs(g, &b1, src, t + dt, &v4, &th4)?;
        for i in 0..3 {
            for j in 0..n {
                v[i][j] += dt / 6.0 * (r1.dv[i][j] + 2.0 * r2.dv[i][j] + 2.0 * r3.dv[i][j] + r4.dv[i][j]);
            }
        }
        for j in 0..n {
            theta[j] += dt / 6.0 * (r1.dtheta[j] + 2.0 * r2.dtheta[j] + 2.0 * r3.dtheta[j] + r4.dtheta[j]);
        }
    }
    Ok(out)
}

/// Pairings `<L^-1 X, Gamma(a, b) + Gamma(b, a)>` for the nine Burnett targets
/// `X = A_11, A_12, A_13, A_22, A_23, A_33, B_1, B_2, B_3`.
pub struct QuadPairings {
    pub forms: Vec<DMatrix<f64>>,
    in_len: usize,
    basis: crate::hermite::MultiIndexSet,
}

pub const A_PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

pub fn a_slot(i: usize, j: usize) -> usize {
    let (a, b) = if i <= j { (i, j) } else { (j, i) };
    A_PAIRS.iter().position(|&p| p == (a, b)).unwrap()
}

impl QuadPairings {
    pub fn new(op: &CollisionOperator) -> Result<Self> {
        let mut forms = Vec::with_capacity(9);
        let targets: Vec<Burnett> = A_PAIRS
            .iter()
            .map(|&(i, j)| Burnett::A(i, j))
            .chain((0..3).map(Burnett::B))
            .collect();
        for b in targets {
            let t = op.linverse(&b.coeffs(&op.basis))?;
            let m = op.gamma_form(&t)?;
            forms.push(&m + m.transpose());
        }
        Ok(QuadPairings { forms, in_len: op.in_basis.len(), basis: op.in_basis.clone() })
    }

    pub fn input_basis(&self) -> &crate::hermite::MultiIndexSet {
        &self.basis
    }

    /// `a^T S b` for target `slot` (inputs truncated to the input basis).
    pub fn pair(&self, slot: usize, a: &[f64], b: &[f64]) -> f64 {
        let s = &self.forms[slot];
        let k = self.in_len;
        let mut acc = 0.0;
        for i in 0..k {
            if a[i] == 0.0 {
                continue;
            }
            let mut r = 0.0;
            for j in 0..k {
                r += s[(i, j)] * b[j];
            }
            acc += a[i] * r;
        }
        acc
    }

    /// Moments `<A_ij, G0>` (six slots) and `<B_i, G0>` for
    /// `G0 = L^-1 Gamma_sym(f0, (I-P) f1)` with `(I-P) f1 = mq(f0, f0) / 2`.
    pub fn g0_moments(&self, s: &MacroState) -> [f64; 9] {
        let f0 = modal::maxwellian(&self.basis, s);
        let q: Vec<f64> = modal::micro_quadratic(&self.basis, s, s).iter().map(|x| 0.5 * x).collect();
        std::array::from_fn(|slot| self.pair(slot, &f0, &q))
    }
}

/// How the order-one source treats `G_0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum G0Closure {
    /// `G_0 = L^-1 Gamma_sym(f_0, (I-P) f_1)` as defined.
    Defined,
    /// `G_0 = 0`, giving `h_0 = d_t rho_0 u_0`.
    Vanishing,
}

/// Sources of the first-order linearized system (`n = 3`, `k = 1`), sampled on
/// the background time grid.
pub struct OrderOneSources {
    pub h_step: f64,
    pub r: Vec<Field>,
    pub dt_r: Vec<Field>,
    pub h: Vec<[Field; 3]>,
    pub q: Vec<Field>,
    pub p: Vec<Field>,
    /// `<A_ij, G0>` and `<B_i, G0>` fields per sample (zero for `Vanishing`).
    pub g0: Vec<[Field; 9]>,
    walls: usize,
}

impl OrderOneSources {
    pub fn assemble(
        g: &SpatialGrid,
        sol: &EulerSolution,
        pairings: Option<&QuadPairings>,
        closure: G0Closure,
    ) -> Result<Self> {
        let n = g.len();
        let mut out = OrderOneSources {
            h_step: sol.h,
            r: Vec::new(),
            dt_r: Vec::new(),
            h: Vec::new(),
            q: Vec::new(),
            p: Vec::new(),
            g0: Vec::new(),
            walls: g.res.n1 * g.res.n2,
        };
        for k in 0..sol.states.len() {
            let s = &sol.states[k];
            let (du, dth, dp) = sol.rates(g, k);
            // d_t rho_0 = -d_t theta_0
            let drho: Field = dth.iter().map(|x| -x).collect();
            let gth = g.grad(&s.theta);
            let gdth = g.grad(&dth);
            // d_t^2 rho_0 = -d_t^2 theta_0 = d_t(u.grad theta)
            let ddrho: Field = (0..n)
                .map(|i| (0..3).map(|c| du[c][i] * gth[c][i] - s.u[c][i] * gdth[c][i]).sum())
                .collect();
            let g0: [Field; 9] = match closure {
                G0Closure::Vanishing => std::array::from_fn(|_| g.zeros()),
                G0Closure::Defined => {
                    let pr = pairings.ok_or_else(|| {
                        Error::Config("G0 closure requires the quadratic collision tensor".into())
                    })?;
                    let mut f: [Field; 9] = std::array::from_fn(|_| g.zeros());
                    for i in 0..n {
                        let m = pr.g0_moments(&s.macro_at(sol.p0, i));
                        for (slot, v) in m.iter().enumerate() {
                            f[slot][i] = *v;
                        }
                    }
                    f
                }
            };
            let dtrho_u: [Field; 3] = std::array::from_fn(|c| (0..n).map(|i| drho[i] * s.u[c][i]).collect());
            let h: [Field; 3] = std::array::from_fn(|i| {
                let mut hi = dtrho_u[i].clone();
                for j in 0..3 {
                    let dj = match j {
                        0 => g.d1(&g0[a_slot(i, j)]),
                        1 => g.d2(&g0[a_slot(i, j)]),
                        _ => g.d3(&g0[a_slot(i, j)]),
                    };
                    for (x, d) in hi.iter_mut().zip(&dj) {
                        *x -= d;
                    }
                }
                hi
            });
            let divb = g.div(&[g0[6].clone(), g0[7].clone(), g0[8].clone()]);
            let q: Field = (0..n)
                .map(|i| {
                    let udu: f64 = (0..3).map(|c| s.u[c][i] * du[c][i]).sum();
                    0.4 * dp[i] + 2.0 / 15.0 * 2.0 * udu + drho[i] * s.theta[i] - 0.4 * divb[i]
                })
                .collect();
            let p: Field = (0..n)
                .map(|i| sol.p1[k][i] + (0..3).map(|c| s.u[c][i].powi(2)).sum::<f64>() / 3.0)
                .collect();
            out.r.push(drho.iter().map(|x| -x).collect());
            out.dt_r.push(ddrho.iter().map(|x| -x).collect());
            out.h.push(h);
            out.q.push(q);
            out.p.push(p);
            out.g0.push(g0);
        }
        Ok(out)
    }

    fn idx(&self, t: f64) -> Result<usize> {
        let k = (t / self.h_step).round();
        if (t - k * self.h_step).abs() > 1e-9 * self.h_step.max(1.0) || k < 0.0 || k as usize >= self.r.len() {
            return Err(Error::Invariant(format!("time {t} is not a stored source sample")));
        }
        Ok(k as usize)
    }
}

impl LinearSources for OrderOneSources {
    fn r(&self, t: f64) -> Result<Field> {
        Ok(self.r[self.idx(t)?].clone())
    }
    fn dt_r(&self, t: f64) -> Result<Field> {
        Ok(self.dt_r[self.idx(t)?].clone())
    }
    fn h(&self, t: f64) -> Result<[Field; 3]> {
        Ok(self.h[self.idx(t)?].clone())
    }
    fn q(&self, t: f64) -> Result<Field> {
        Ok(self.q[self.idx(t)?].clone())
    }
    fn p(&self, t: f64) -> Result<Field> {
        Ok(self.p[self.idx(t)?].clone())
    }
    // u_{1,3} vanishes at both walls
    fn d0(&self, _t: f64) -> Result<Wall> {
        Ok(vec![0.0; self.walls])
    }
    fn d1(&self, _t: f64) -> Result<Wall> {
        Ok(vec![0.0; self.walls])
    }
    fn dt_d0(&self, _t: f64) -> Result<Wall> {
        Ok(vec![0.0; self.walls])
    }
    fn dt_d1(&self, _t: f64) -> Result<Wall> {
        Ok(vec![0.0; self.walls])
    }
    // the second-order gauge is fixed after the layers are known
    fn gauge(&self, _t: f64) -> Result<f64> {
        Ok(0.0)
    }
}

/// Inputs of the gauge formulas that come from the boundary layers.
#[derive(Clone, Debug, Default)]
pub struct GaugeLayerTerms {
    /// `int_0^t int_T2 (<B3, G^+> - <B3, G^->)`.
    pub b3_flux: f64,
    /// `int_T2 int_0^inf (rho_bar^+ + rho_bar^-)(t) - (same)(0)`.
    pub layer_density_change: f64,
    /// `int_0^t int_T2 int_0^inf (div u_bar^+ theta0^+ + div u_bar^- theta0^-)`.
    pub layer_divergence: f64,
    /// `int_0^t int_T2 int_0^inf (d_t rho_bar^+ theta0^+ + d_t rho_bar^- theta0^-)`.
    pub layer_density_rate: f64,
    /// Knudsen trace terms `(A + 5C)` entering with a plus sign.
    pub knudsen: f64,
}

/// Mean pressure `c_k(t)` for `n = 3`.
/// `k = 0`: the constant `(rho_0 + theta_0)(0)`; `k = 1`: `c_1`; `k = 2`: `c_2`.
/// `initial_mean` is `int (rho_k + theta_k)(0)` and `coupling` is
/// `int |u_0(t)|^2` for `k = 1` and `int u_0 . u_1 (t)` for `k = 2`.
pub fn pressure_gauge(k: usize, initial_mean: f64, coupling: f64, layers: &GaugeLayerTerms) -> Result<f64> {
    let lay = -2.0 / 3.0 * layers.b3_flux - 5.0 / 3.0 * layers.layer_density_change - 5.0 / 3.0 * layers.layer_divergence;
    match k {
        0 => Ok(initial_mean),
        1 => Ok(initial_mean - coupling / 3.0 + lay),
        2 => Ok(initial_mean - 2.0 / 3.0 * coupling + lay - 5.0 / 3.0 * layers.layer_density_rate
            + 5.0 / 3.0 * layers.knudsen),
        _ => Err(Error::Unsupported(format!("pressure gauge for order {k} (built orders stop at 2)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::ManufacturedLinear;
    use crate::spectral::Resolution;

    fn grid(n: usize, m: usize) -> SpatialGrid {
        SpatialGrid::new(Resolution { n1: n, n2: n, m3: m }).unwrap()
    }

    #[test]
    fn zero_state_is_stationary() {
        let g = grid(8, 13);
        let init = EulerPreset::Zero { theta: 0.1 }.initial(&g);
        let sol = solve_euler0(&g, &init, 0.0, 0.0, 0.2, 4, 0.5).unwrap();
        let last = sol.states.last().unwrap();
        assert!(last.u.iter().all(|c| max_abs(c) == 0.0));
        assert!(sol.p1.iter().all(|p| max_abs(p) < 1e-14));
    }

    #[test]
    fn shear_is_exact_and_temperature_is_carried() {
        let g = grid(16, 25);
        let preset = EulerPreset::Shear { amplitude: 0.5, theta_amplitude: 0.2 };
        let init = preset.initial(&g);
        let sol = solve_euler0(&g, &init, 0.0, 0.0, 0.4, 20, 0.5).unwrap();
        let ex = preset.exact(&g, 0.4).unwrap();
        let last = sol.states.last().unwrap();
        let du = max_abs(&last.u[0].iter().zip(&ex.u[0]).map(|(a, b)| a - b).collect::<Vec<_>>());
        let dth = max_abs(&last.theta.iter().zip(&ex.theta).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert!(du < 1e-12, "{du}");
        assert!(dth < 1e-6, "{dth}");
        // the shear carries no pressure gradient
        let gp = g.grad(&sol.p1[10]);
        assert!(gp.iter().all(|c| max_abs(c) < 1e-10));
    }

    #[test]
    fn cells_conserve_energy() {
        let g = grid(16, 25);
        let preset = EulerPreset::Cells { amplitude: 0.3, theta_amplitude: 0.1 };
        let init = preset.initial(&g);
        let sol = solve_euler0(&g, &init, 0.0, 0.0, 0.3, 12, 0.5).unwrap();
        let e0 = sol.energy[0];
        let drift = sol.energy.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max) / e0;
        assert!(drift < 1e-5, "{drift}");
        assert!(sol.div_max.iter().all(|d| *d < 1e-9), "{:?}", sol.div_max);
        // the first-order gauge stays constant with the energy
        let c = &sol.gauge_c1;
        assert!((c[0] - c[c.len() - 1]).abs() < 1e-5 * e0);
    }

    #[test]
    fn gauge_cases() {
        let z = GaugeLayerTerms::default();
        assert_eq!(pressure_gauge(0, 0.7, 123.0, &z).unwrap(), 0.7);
        assert!((pressure_gauge(1, 0.2, 0.3, &z).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(pressure_gauge(2, 0.0, 0.0, &z).unwrap(), 0.0);
        assert!(pressure_gauge(3, 0.0, 0.0, &z).is_err());
    }


    #[test]
    fn manufactured_linearized_solution() {
        let m = ManufacturedLinear { a: 0.4, b: 0.3, g_res: Resolution { n1: 8, n2: 8, m3: 21 } };
        let (e1, sol) = m.run(0.4, 8).unwrap();
        let (e2, _) = m.run(0.4, 16).unwrap();
        assert!(e2 < 1e-5, "{e2}");
        assert!(e1 / e2 > 8.0, "temporal order: {e1} {e2}");
        assert!(sol.max_div_defect() < 1e-8, "{}", sol.max_div_defect());
        assert!(sol.max_gauge_defect() < 1e-12);
        assert!(sol.max_flux_defect() < 1e-10);
    }

    #[test]
    fn incompatible_wall_flux_is_rejected() {
        struct Bad(ManufacturedLinear);
        impl LinearSources for Bad {
            fn r(&self, t: f64) -> Result<Field> {
                self.0.r(t)
            }
            fn dt_r(&self, t: f64) -> Result<Field> {
                self.0.dt_r(t)
            }
            fn h(&self, t: f64) -> Result<[Field; 3]> {
                self.0.h(t)
            }
            fn q(&self, t: f64) -> Result<Field> {
                self.0.q(t)
            }
            fn p(&self, t: f64) -> Result<Field> {
                self.0.p(t)
            }
            fn d0(&self, t: f64) -> Result<Wall> {
                Ok(self.0.d0(t)?.iter().map(|x| x + 0.1).collect())
            }
            fn d1(&self, t: f64) -> Result<Wall> {
                self.0.d1(t)
            }
            fn dt_d0(&self, t: f64) -> Result<Wall> {
                self.0.dt_d0(t)
            }
            fn dt_d1(&self, t: f64) -> Result<Wall> {
                self.0.dt_d1(t)
            }
            fn gauge(&self, t: f64) -> Result<f64> {
                self.0.gauge(t)
            }
        }
        let m = ManufacturedLinear { a: 0.4, b: 0.3, g_res: Resolution { n1: 4, n2: 4, m3: 9 } };
        let g = m.grid();
        let u0 = m.exact_u(&g, 0.0);
        let th = m.exact_theta(&g, 0.0);
        let bad = Bad(m);
        let err = solve_linearized_euler(&g, &bad.0, &bad, &u0, &th, 0.1, 1).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let g = grid(4, 9);
        let init = EulerPreset::Zero { theta: 0.0 }.initial(&g);
        let sol = solve_euler0(&g, &init, 0.0, 0.0, 0.1, 2, 0.5).unwrap();
        let src = OrderOneSources::assemble(&g, &sol, None, G0Closure::Vanishing).unwrap();
        let z = EulerState::zeros(&g);
        let lin = solve_linearized_euler(&g, &sol, &src, &z.u, &z.theta, sol.h * 2.0, 2).unwrap();
        assert!(lin.u.iter().all(|u| u.iter().all(|c| max_abs(c) == 0.0)));
        assert!(lin.theta.iter().all(|t| max_abs(t) == 0.0));
    }

    #[test]
    fn g0_pairings_match_direct_route() {
        use crate::collision::CollisionConfig;
        let op = CollisionOperator::assemble(&CollisionConfig { degree: 6, gamma_degree: 4, ..Default::default() })
            .unwrap();
        let pr = QuadPairings::new(&op).unwrap();
        let s = MacroState::new(0.1, [0.3, -0.2, 0.15], 0.25);
        let fast = pr.g0_moments(&s);
        // direct: G0 = L^-1 Gamma_sym(f0, mq/2), then pair with the Burnett functions
        let f0 = modal::maxwellian(&op.basis, &s);
        let q: Vec<f64> = modal::micro_quadratic(&op.basis, &s, &s).iter().map(|x| 0.5 * x).collect();
        let gs = op.apply_gamma_sym(&f0, &q).unwrap();
        let g0 = op.linverse(&modal::micro(&op.basis, &gs)).unwrap();
        for (slot, &(i, j)) in A_PAIRS.iter().enumerate() {
            let d = modal::dot(&Burnett::A(i, j).coeffs(&op.basis), &g0);
            assert!((d - fast[slot]).abs() < 1e-8 * (1.0 + d.abs()), "{slot} {d} {}", fast[slot]);
        }
        for i in 0..3 {
            let d = modal::dot(&Burnett::B(i).coeffs(&op.basis), &g0);
            assert!((d - fast[6 + i]).abs() < 1e-8 * (1.0 + d.abs()));
        }
        // G0 is cubic in the amplitude and carries no density dependence beyond the product
        let half = pr.g0_moments(&MacroState::new(0.0, [0.15, -0.1, 0.075], 0.125));
        let zero_rho = pr.g0_moments(&MacroState::new(0.0, s.u, s.theta));
        assert!(zero_rho.iter().zip(&half).all(|(a, b)| (a / 8.0 - b).abs() < 1e-10));
        // v3-parity: at a wall state (u3 = 0) the odd moments vanish
        let w = pr.g0_moments(&MacroState::new(0.1, [0.3, -0.2, 0.0], 0.25));
        assert!(w[a_slot(0, 2)].abs() < 1e-13 && w[a_slot(1, 2)].abs() < 1e-13 && w[8].abs() < 1e-13);
    }

    #[test]
    fn order_one_momentum_source_without_g0() {
        // with the vanishing closure h_0 = d_t rho_0 u_0 exactly
        let g = grid(8, 21);
        let init = EulerPreset::Cells { amplitude: 0.3, theta_amplitude: 0.1 }.initial(&g);
        let sol = solve_euler0(&g, &init, 0.0, 0.0, 0.1, 2, 0.5).unwrap();
        let src = OrderOneSources::assemble(&g, &sol, None, G0Closure::Vanishing).unwrap();
        let s = &sol.states[1];
        let drho = g.advect(&s.u, &s.theta);
        for c in 0..3 {
            for i in 0..g.len() {
                assert!((src.h[1][c][i] - drho[i] * s.u[c][i]).abs() < 1e-14);
            }
        }
        // r = -d_t rho_0 integrates to zero, matching the vanishing wall fluxes
        assert!(g.integrate(&src.r[1]).abs() < 1e-12);
    }
}
