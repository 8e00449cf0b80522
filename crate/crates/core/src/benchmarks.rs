//! Problems with known solutions, shared by the unit tests, the check suite
//! and the acceptance target.

use crate::collision::CollisionOperator;
use crate::error::Result;
use crate::knudsen::{HalfSpaceConfig, HalfSpaceGrid, HalfSpaceSolution, HalfSpaceSolver};
use crate::velocity::{Burnett, KineticFunction, VelocityGrid};
use crate::euler::{solve_linearized_euler, Background, EulerState, LinearSolution, LinearSources, Wall};
use crate::spectral::{max_abs, Field, Resolution, SpatialGrid};
use crate::viscous::{solve_layer, HalfLineGrid, LayerInit, LayerProblem, NeumannData, WallSide};
use statrs::function::erf::erfc;
use std::f64::consts::PI;

/// Manufactured linearized data on the exact steady shear background
///   u0 = (U(x3), 0, 0), U = A (1/2 + sin pi x3), theta0 = B cos(pi x3)
/// with every unknown proportional to e(t) = cos t + t^2 / 2.
pub struct ManufacturedLinear {
    pub a: f64,
    pub b: f64,
    pub g_res: Resolution,
}

fn e(t: f64) -> f64 {
    t.cos() + 0.5 * t * t
}
fn de(t: f64) -> f64 {
    -t.sin() + t
}
const TP: f64 = 2.0 * PI;

impl ManufacturedLinear {
    fn uu(&self, x3: f64) -> f64 {
        self.a * (0.5 + (PI * x3).sin())
    }
    fn duu(&self, x3: f64) -> f64 {
        self.a * PI * (PI * x3).cos()
    }
    fn dth0(&self, x3: f64) -> f64 {
        -self.b * PI * (PI * x3).sin()
    }
    // spatial shapes and their derivatives
    pub fn shape_u(x: [f64; 3]) -> [f64; 3] {
        [
            (TP * x[1]).sin() + x[2] * x[2] * (TP * x[0]).cos(),
            (TP * (x[0] + x[1])).cos() * x[2],
            (TP * x[0]).sin() * (1.0 + x[2] - x[2] * x[2]) + x[2],
        ]
    }
    fn shape_u_d1(x: [f64; 3]) -> [f64; 3] {
        [
            -TP * x[2] * x[2] * (TP * x[0]).sin(),
            -TP * (TP * (x[0] + x[1])).sin() * x[2],
            TP * (TP * x[0]).cos() * (1.0 + x[2] - x[2] * x[2]),
        ]
    }
    fn div_shape(x: [f64; 3]) -> f64 {
        -TP * x[2] * x[2] * (TP * x[0]).sin() - TP * (TP * (x[0] + x[1])).sin() * x[2]
            + (TP * x[0]).sin() * (1.0 - 2.0 * x[2])
            + 1.0
    }
    fn shape_p(x: [f64; 3]) -> f64 {
        (TP * x[1]).cos() * (PI * x[2]).cos()
    }
    fn shape_p_grad(x: [f64; 3]) -> [f64; 3] {
        [0.0, -TP * (TP * x[1]).sin() * (PI * x[2]).cos(), -PI * (TP * x[1]).cos() * (PI * x[2]).sin()]
    }
    pub fn shape_theta(x: [f64; 3]) -> f64 {
        (TP * x[0]).cos() * x[2]
    }
    fn shape_rho(x: [f64; 3]) -> f64 {
        0.1 * (TP * x[0]).sin()
    }
    pub fn gauge_fn(t: f64) -> f64 {
        0.3 * t
    }
    pub fn exact_u(&self, g: &SpatialGrid, t: f64) -> [Field; 3] {
        std::array::from_fn(|i| g.sample(|x| e(t) * Self::shape_u(x)[i]))
    }
    pub fn exact_theta(&self, g: &SpatialGrid, t: f64) -> Field {
        g.sample(|x| e(t) * Self::shape_theta(x))
    }
    pub fn exact_p(&self, g: &SpatialGrid, t: f64) -> Field {
        g.sample(|x| e(t) * Self::shape_p(x) + Self::gauge_fn(t))
    }
    pub fn grid(&self) -> SpatialGrid {
        SpatialGrid::new(self.g_res).expect("valid resolution")
    }

    /// Solve on `[0, horizon]` and return the largest nodal error at the end.
    pub fn run(&self, horizon: f64, steps: usize) -> Result<(f64, LinearSolution)> {
        let g = self.grid();
        let dt = horizon / steps as f64;
        let sol = solve_linearized_euler(&g, self, self, &self.exact_u(&g, 0.0), &self.exact_theta(&g, 0.0), dt, steps)?;
        let ue = self.exact_u(&g, horizon);
        let te = self.exact_theta(&g, horizon);
        let pe = self.exact_p(&g, horizon);
        let k = sol.u.len() - 1;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            err = err.max(max_abs(&sol.u[k][i].iter().zip(&ue[i]).map(|(a, b)| a - b).collect::<Vec<_>>()));
        }
        err = err.max(max_abs(&sol.theta[k].iter().zip(&te).map(|(a, b)| a - b).collect::<Vec<_>>()));
        err = err.max(max_abs(&sol.p[k].iter().zip(&pe).map(|(a, b)| a - b).collect::<Vec<_>>()));
        Ok((err, sol))
    }
}

impl Background for ManufacturedLinear {
    fn state(&self, _t: f64) -> Result<EulerState> {
        let g = self.grid();
        Ok(EulerState {
            u: [g.sample(|x| self.uu(x[2])), g.zeros(), g.zeros()],
            theta: g.sample(|x| self.b * (PI * x[2]).cos()),
        })
    }
}

impl LinearSources for ManufacturedLinear {
    fn r(&self, t: f64) -> Result<Field> {
        Ok(self.grid().sample(|x| e(t) * Self::div_shape(x)))
    }
    fn dt_r(&self, t: f64) -> Result<Field> {
        Ok(self.grid().sample(|x| de(t) * Self::div_shape(x)))
    }
    fn h(&self, t: f64) -> Result<[Field; 3]> {
        let g = self.grid();
        Ok(std::array::from_fn(|i| {
            g.sample(|x| {
                let s = Self::shape_u(x);
                let s1 = Self::shape_u_d1(x);
                let stretch = if i == 0 { s[2] * self.duu(x[2]) } else { 0.0 };
                de(t) * s[i] + e(t) * (self.uu(x[2]) * s1[i] + stretch + Self::shape_p_grad(x)[i])
            })
        }))
    }
    fn q(&self, t: f64) -> Result<Field> {
        Ok(self.grid().sample(|x| {
            let d1 = -TP * (TP * x[0]).sin() * x[2];
            de(t) * Self::shape_theta(x) + e(t) * (self.uu(x[2]) * d1 + Self::shape_u(x)[2] * self.dth0(x[2]))
        }))
    }
    fn p(&self, t: f64) -> Result<Field> {
        Ok(self.grid().sample(|x| e(t) * (Self::shape_rho(x) + Self::shape_theta(x))))
    }
    fn d0(&self, t: f64) -> Result<Wall> {
        let g = self.grid();
        Ok(g.trace(&g.sample(|x| -e(t) * Self::shape_u(x)[2]), false))
    }
    fn d1(&self, t: f64) -> Result<Wall> {
        let g = self.grid();
        Ok(g.trace(&g.sample(|x| e(t) * Self::shape_u(x)[2]), true))
    }
    fn dt_d0(&self, t: f64) -> Result<Wall> {
        let g = self.grid();
        Ok(g.trace(&g.sample(|x| -de(t) * Self::shape_u(x)[2]), false))
    }
    fn dt_d1(&self, t: f64) -> Result<Wall> {
        let g = self.grid();
        Ok(g.trace(&g.sample(|x| de(t) * Self::shape_u(x)[2]), true))
    }
    fn gauge(&self, t: f64) -> Result<f64> {
        Ok(Self::gauge_fn(t))
    }
}

/// Heat equation on the half line with constant Neumann data `a` and no drift.
pub struct Heat {
    pub a: f64,
}

impl LayerProblem for Heat {
    fn n_wall(&self) -> usize {
        1
    }
    fn drift(&self, _t: f64) -> Result<Wall> {
        Ok(vec![0.0])
    }
    fn neumann(&self, _t: f64) -> Result<NeumannData> {
        Ok(NeumannData { u: [vec![0.0], vec![0.0]], theta: vec![self.a] })
    }
    fn tangential(&self, _t: f64, f: &[Vec<f64>; 3], _g: &HalfLineGrid) -> Result<[Vec<f64>; 3]> {
        Ok(std::array::from_fn(|c| vec![0.0; f[c].len()]))
    }
}

pub fn ierfc(z: f64) -> f64 {
    (-z * z).exp() / PI.sqrt() - z * erfc(z)
}

/// Temperature from zero data with unit flux into the wall, against the
/// similarity solution `-2 sqrt(D t) ierfc(y / 2 sqrt(D t))`. Returns the
/// largest nodal error and whether the velocity stayed zero.
pub fn heat_benchmark(diffusivity: f64, grid: &HalfLineGrid, dt: f64, steps: usize) -> Result<(f64, bool)> {
    let sol = solve_layer(&Heat { a: 1.0 }, grid, [1.0, 1.0, diffusivity], LayerInit::Zero, WallSide::Bottom, 1, dt, steps)?;
    let t = dt * steps as f64;
    let s = 2.0 * (diffusivity * t).sqrt();
    let err = grid
        .y
        .iter()
        .zip(sol.theta.last().expect("at least one snapshot"))
        .map(|(y, th)| (th + s * ierfc(y / s)).abs())
        .fold(0.0, f64::max);
    let still = sol.u.iter().all(|u| u[0].iter().chain(&u[1]).all(|x| *x == 0.0));
    Ok((err, still))
}

/// Half-space problem with zero boundary data and the microscopic source
/// `e^{-zeta0 eta} (A_13 + B_3 + A_33 / 2)`, on a grid built for `zeta`.
pub fn halfspace_manufactured(
    op: &CollisionOperator,
    vg: &VelocityGrid,
    zeta: f64,
    zeta0: f64,
    cfg: HalfSpaceConfig,
) -> Result<(HalfSpaceGrid, HalfSpaceSolution)> {
    let g = HalfSpaceGrid::new(zeta, 0.02, 1.12, 0.25)?;
    let s = HalfSpaceSolver::new(op, vg, &g, cfg)?;
    let prof = vg.sample(|v| Burnett::A(0, 2).eval(v) + Burnett::B(2).eval(v) + 0.5 * Burnett::A(2, 2).eval(v));
    let src: Vec<KineticFunction> = g
        .eta
        .iter()
        .map(|e| KineticFunction { values: prof.values.iter().map(|x| x * (-zeta0 * e).exp()).collect() })
        .collect();
    let z = KineticFunction { values: vec![0.0; vg.len()] };
    let sol = s.solve(&z, &src)?;
    Ok((g, sol))
}
