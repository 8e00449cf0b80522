//! Desk-scale construction of the multi-scale expansion (`n = 3`, `N = 1`):
//! parameter checks, the order-by-order build, the composite field with its
//! cutoffs, the residual sources and the order scan.

use crate::collision::{CollisionConfig, CollisionMode, CollisionOperator, TransportCoefficients};
use crate::error::{Error, Result};
use crate::euler::{
    compatible_initial_velocity, plan_steps, pressure_gauge, solve_euler0, solve_linearized_euler, EulerPreset,
    EulerSolution, G0Closure, GaugeLayerTerms, LinearSolution, OrderOneSources, QuadPairings, TimeConfig,
};
use crate::knudsen::{
    assemble_knudsen_sources, boundary_mismatch, corrector, solvability_check, HalfSpaceConfig, HalfSpaceGrid,
    HalfSpaceSolver, MismatchInputs,
};
use crate::spectral::{max_abs, Field, Resolution, SpatialGrid};
use crate::velocity::{modal, Coeffs, MacroState, VelocityGrid};
use crate::viscous::{
    closure_relations, layer_state, solve_order_one, HalfLineGrid, KineticNeumann, LayerConfig, LayerField,
    NeumannRoute, WallSide, WallTraces,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Highest order the build constructs.
pub const BUILT_ORDER: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpansionParameters {
    /// Scaling exponent `n`.
    pub n: usize,
    /// Truncation order `N`.
    pub order: usize,
    /// Taylor order `b`.
    pub taylor: usize,
    /// Remainder exponent `k0`; when given, the full convergence
    /// hypotheses are enforced as well.
    pub k0: Option<f64>,
    pub s0: usize,
    pub s: Vec<usize>,
    pub s_bar: Vec<usize>,
    pub s_hat: Vec<usize>,
    /// Base weights `l_bar_i` of the ladder `l_j^i = l_bar_i + 2 (s_bar_i - j)`.
    pub l_bar: Vec<f64>,
    /// Knudsen decay rates `zeta_i`.
    pub zeta: Vec<f64>,
    /// Velocity weight exponents `(kappa_i, kappa_bar_i, kappa_hat_i)`.
    pub kappa: Vec<[f64; 3]>,
}

impl Default for ExpansionParameters {
    fn default() -> Self {
        ExpansionParameters {
            n: 3,
            order: 1,
            taylor: 2,
            k0: None,
            s0: 12,
            s: vec![10],
            s_bar: vec![8],
            s_hat: vec![5],
            l_bar: vec![10.0],
            zeta: vec![1.0],
            kappa: vec![[4.0, 3.0, 2.0]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    /// The full convergence hypotheses hold (such builds are expensive).
    pub theorem_scale: bool,
    pub notes: Vec<String>,
}

fn violated(what: &str) -> Error {
    Error::Config(format!("parameter inequality violated: {what}"))
}

impl ExpansionParameters {
    pub fn validate(&self) -> Result<ParameterReport> {
        let nn = self.order;
        let b = self.taylor as f64;
        if self.n < 3 {
            return Err(violated("n >= 3"));
        }
        if nn == 0 {
            return Err(violated("N >= 1"));
        }
        for (name, len) in [
            ("s", self.s.len()),
            ("s_bar", self.s_bar.len()),
            ("s_hat", self.s_hat.len()),
            ("l_bar", self.l_bar.len()),
            ("zeta", self.zeta.len()),
            ("kappa", self.kappa.len()),
        ] {
            if len != nn {
                return Err(Error::Config(format!("{name} must list one entry per order 1..N (got {len}, N = {nn})")));
            }
        }
        if self.s0 <= self.s[0] || self.s[0] + 2 > self.s0 {
            return Err(violated("s_1 <= s_0 - 2"));
        }
        if (self.zeta[0] - 1.0).abs() > 0.0 {
            return Err(violated("zeta_1 = 1"));
        }
        for i in 0..nn {
            if !(self.s[i] > self.s_bar[i] && self.s_bar[i] > self.s_hat[i]) {
                return Err(violated(&format!("s_{0} > s_bar_{0} > s_hat_{0}", i + 1)));
            }
            if self.s_hat[i] < 3 {
                return Err(violated(&format!("s_hat_{} >= 3", i + 1)));
            }
            if self.zeta[i] <= 0.0 {
                return Err(violated(&format!("zeta_{} > 0", i + 1)));
            }
            let k = self.kappa[i];
            if !(k[0] > k[1] && k[1] > k[2] && k[2] > 1.0) {
                return Err(violated(&format!("kappa_{0} > kappa_bar_{0} > kappa_hat_{0} > 1", i + 1)));
            }
        }
        for i in 0..nn.saturating_sub(1) {
            let j = i + 1;
            let (si, sj) = (self.s[i], self.s[j]);
            let (bi, bj) = (self.s_bar[i], self.s_bar[j]);
            let (hi, hj) = (self.s_hat[i], self.s_hat[j]);
            let name = |s: &str| format!("{s} (i = {})", i + 1);
            if hi <= sj {
                return Err(violated(&name("s_hat_i > s_{i+1}")));
            }
            if 2.0 * self.zeta[j] > self.zeta[i] {
                return Err(violated(&name("2 zeta_{i+1} <= zeta_i")));
            }
            if sj + 2 > si {
                return Err(violated(&name("s_{i+1} <= s_i - 2")));
            }
            if bj + 6 > bi {
                return Err(violated(&name("s_bar_{i+1} <= s_bar_i - 6")));
            }
            if hj + 2 > hi {
                return Err(violated(&name("s_hat_{i+1} <= s_hat_i - 2")));
            }
            if (sj + 2) as f64 > (bi as f64 / 2.0).min(hi as f64) {
                return Err(violated(&name("s_{i+1} + 2 <= min(s_bar_i / 2, s_hat_i)")));
            }
            if bj as f64 > si as f64 - 8.0 - b {
                return Err(violated(&name("s_bar_{i+1} <= s_i - 8 - b")));
            }
            if 2.0 * hj as f64 > bi as f64 - 4.0 - 2.0 * b {
                return Err(violated(&name("2 s_hat_{i+1} <= s_bar_i - 4 - 2b")));
            }
            if (bi as f64) < 2.0 * (hj as f64 + b + 2.0) {
                return Err(violated(&name("s_bar_i >= 2 (s_hat_{i+1} + b + 2)")));
            }
            for jj in 0..=bj {
                let lhs = self.l_bar[i] + 2.0 * (bi as f64 - jj as f64);
                let rhs = self.l_bar[j] + 2.0 * (bj as f64 - jj as f64);
                if lhs < 2.0 * rhs + 18.0 + 2.0 * b {
                    return Err(violated(&format!("l_j^i >= 2 l_j^(i+1) + 18 + 2b (i = {}, j = {jj})", i + 1)));
                }
            }
            let (ki, kj) = (self.kappa[i], self.kappa[j]);
            if ki[2] <= kj[0] {
                return Err(violated(&name("kappa_hat_i > kappa_{i+1}")));
            }
        }
        if self.l_bar[nn - 1] < 2.0 * b + 6.0 {
            return Err(violated("l_j^N >= 2b + 6"));
        }
        let mut notes = Vec::new();
        let n = self.n as f64;
        let theorem_scale = match self.k0 {
            None => {
                notes.push("k0 not given: desk-scale build below the convergence hypotheses".into());
                false
            }
            Some(k0) => {
                if k0 <= 3.0 * n - 2.0 {
                    return Err(violated("k0 > 3n - 2"));
                }
                if (nn as f64) < 2.0 * n + k0 - 3.0 {
                    return Err(violated("N >= 2n + k0 - 3"));
                }
                if b < n + k0 - 2.5 {
                    return Err(violated("b >= n + k0 - 5/2"));
                }
                notes.push("parameters meet the convergence hypotheses: accepted, expensive".into());
                true
            }
        };
        Ok(ParameterReport { theorem_scale, notes })
    }

    /// Exponents bounding the interior, viscous and Knudsen residual norms.
    pub fn predicted_exponents(&self) -> [f64; 3] {
        let (nn, n, b) = (self.order as f64, self.n as f64, self.taylor as f64);
        [
            nn - 1.0,
            (nn - 0.5).min(b + n - 1.5),
            (nn - 1.0 + n / 2.0).min((n - 1.0) * (b + 1.0) + n - 2.0 + n / 2.0),
        ]
    }
}

fn bump(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (-1.0 / x).exp()
    }
}

/// Smooth cutoff: `1` on `[0, 1/4]`, `0` from `1/2` on, monotone between.
pub fn cutoff_phi(z: f64) -> f64 {
    if z <= 0.25 {
        return 1.0;
    }
    if z >= 0.5 {
        return 0.0;
    }
    let s = 4.0 * z - 1.0;
    let (a, b) = (bump(1.0 - s), bump(s));
    a / (a + b)
}

pub fn cutoff_dphi(z: f64) -> f64 {
    if z <= 0.25 || z >= 0.5 {
        return 0.0;
    }
    let s = 4.0 * z - 1.0;
    let (a, b) = (bump(1.0 - s), bump(s));
    let da = -a / (1.0 - s).powi(2);
    let db = b / (s * s);
    4.0 * (da * b - a * db) / (a + b).powi(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeumannChoice {
    Kinetic,
    ClosedForm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HalfSpaceSettings {
    pub h0: f64,
    pub growth: f64,
    pub h_max: f64,
    pub solver: HalfSpaceConfig,
    /// Solve the half-space problem at the largest mismatch of each wall.
    pub probe: bool,
}

impl Default for HalfSpaceSettings {
    fn default() -> Self {
        HalfSpaceSettings { h0: 0.02, growth: 1.1, h_max: 0.5, solver: HalfSpaceConfig::default(), probe: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Trace identities and constraint defects.
    pub compatibility: f64,
    /// Pointwise `div u_1 - r`, relative; limited by the projection's collocation.
    pub divergence: f64,
    pub solvability: f64,
    /// Largest Knudsen mismatch treated as zero.
    pub mismatch: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { compatibility: 1e-8, divergence: 1e-6, solvability: 1e-6, mismatch: 1e-8 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildSettings {
    pub collision: CollisionConfig,
    pub mode: CollisionMode,
    /// Gauss-Hermite nodes per axis of the velocity grid.
    pub velocity_nodes: usize,
    pub spatial: Resolution,
    pub preset: EulerPreset,
    /// `rho_0 + theta_0`.
    pub p0: f64,
    pub time: TimeConfig,
    pub layer: LayerConfig,
    pub neumann: NeumannChoice,
    pub g0_closure: G0Closure,
    pub halfspace: HalfSpaceSettings,
    pub tolerances: Tolerances,
}

impl Default for BuildSettings {
    fn default() -> Self {
        BuildSettings {
            collision: CollisionConfig::default(),
            mode: CollisionMode::HardSphere,
            velocity_nodes: 12,
            spatial: Resolution::default(),
            preset: EulerPreset::default(),
            p0: 0.0,
            time: TimeConfig::default(),
            layer: LayerConfig::default(),
            neumann: NeumannChoice::Kinetic,
            g0_closure: G0Closure::Vanishing,
            halfspace: HalfSpaceSettings::default(),
            tolerances: Tolerances::default(),
        }
    }
}

pub fn collision_operator(cfg: &CollisionConfig, mode: CollisionMode) -> Result<CollisionOperator> {
    let op = CollisionOperator::assemble(cfg)?;
    match mode {
        CollisionMode::HardSphere => Ok(op),
        CollisionMode::Bgk => op.bgk_surrogate(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

impl CheckRecord {
    pub fn le(name: impl Into<String>, value: f64, tol: f64) -> Self {
        CheckRecord { name: name.into(), value, tol, pass: value.is_finite() && value <= tol }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HalfSpaceProbe {
    pub wall_point: usize,
    pub time: f64,
    pub mismatch: f64,
    pub iterations: usize,
    pub residual: f64,
    /// `sup |f_hat|` of the solution.
    pub sup: f64,
    pub flux_defect: f64,
}

/// Knudsen layer field `f_hat_k` at one wall.
#[derive(Clone, Debug)]
pub enum KnudsenData {
    /// Identically zero.
    Zero,
    /// Modal coefficients indexed `[time][wall point][eta node]`.
    Sampled { times: Vec<f64>, values: Vec<Vec<Vec<Coeffs>>> },
}

#[derive(Clone, Debug)]
pub struct KnudsenLayer {
    pub side: WallSide,
    pub order: usize,
    pub grid: HalfSpaceGrid,
    pub mismatch_max: f64,
    pub solvability_max: f64,
    /// `sup |f_hat_{k,1}|` of the macroscopic corrector.
    pub corrector_max: f64,
    pub probe: Option<HalfSpaceProbe>,
    pub field: KnudsenData,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PressureRecord {
    pub p0: f64,
    /// Gauge `c_1(t)` on the linearized time grid.
    pub c1: Vec<f64>,
    /// Gauge `c_2(t)` from the layer terms.
    pub c2: Vec<f64>,
    pub layer_terms: Vec<[f64; 5]>,
}

/// One node of the build's dependency record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DependencyNode {
    pub name: String,
    pub order: usize,
    pub reads: Vec<String>,
}

/// Fields read while building order `k`. Reading something not yet produced,
/// or a higher order, is an error.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DependencyLog {
    pub nodes: Vec<DependencyNode>,
}

impl DependencyLog {
    pub fn produce(&mut self, name: &str, order: usize, reads: &[&str]) -> Result<()> {
        for r in reads {
            let Some(src) = self.nodes.iter().find(|n| n.name == *r) else {
                return Err(Error::Invariant(format!("{name} reads {r}, which is not built yet")));
            };
            if src.order > order {
                return Err(Error::Invariant(format!("{name} (order {order}) reads {r} of order {}", src.order)));
            }
        }
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::Invariant(format!("{name} built twice")));
        }
        self.nodes.push(DependencyNode { name: name.into(), order, reads: reads.iter().map(|s| s.to_string()).collect() });
        Ok(())
    }
}

pub struct ExpansionSet {
    pub params: ExpansionParameters,
    pub settings: BuildSettings,
    pub parameter_report: ParameterReport,
    pub op: CollisionOperator,
    pub transport: TransportCoefficients,
    pub grid: SpatialGrid,
    pub vgrid: VelocityGrid,
    pub dt: f64,
    pub euler: EulerSolution,
    /// Interior orders `1..=N`.
    pub interior: Vec<LinearSolution>,
    pub layer_grid: HalfLineGrid,
    /// Viscous layers per order, `[bottom, top]`.
    pub layers: Vec<[LayerField; 2]>,
    pub knudsen: Vec<[KnudsenLayer; 2]>,
    pub pressures: PressureRecord,
    pub checks: Vec<CheckRecord>,
    pub dependencies: DependencyLog,
}

fn at_order(k: usize, module: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(m) => Error::Config(format!("order {k} {module}: {m}")),
        Error::Solver(m) => Error::Solver(format!("order {k} {module}: {m}")),
        Error::Invariant(m) => Error::Invariant(format!("order {k} {module}: {m}")),
        Error::Unsupported(m) => Error::Unsupported(format!("order {k} {module}: {m}")),
        other => other,
    }
}

fn side_index(side: WallSide) -> usize {
    usize::from(side.is_top())
}

impl ExpansionSet {
    pub fn times(&self) -> &[f64] {
        &self.interior[0].times
    }

    pub fn time_index(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if (t - k * self.dt).abs() > 1e-9 * self.dt.max(1.0) || k < 0.0 || k as usize >= self.times().len() {
            return Err(Error::Config(format!("time {t} is not a stored time of the build")));
        }
        Ok(k as usize)
    }

    /// Middle stored time, where central differences are available.
    pub fn mid_time(&self) -> f64 {
        let n = self.times().len();
        self.times()[n / 2]
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// `f_0` state at grid point `i`, time index `k`.
    pub fn state0(&self, k: usize, i: usize) -> MacroState {
        self.euler.states[2 * k].macro_at(self.euler.p0, i)
    }

    /// `P f_1` state at grid point `i`, time index `k`.
    pub fn state1(&self, k: usize, i: usize) -> MacroState {
        let l = &self.interior[0];
        MacroState::new(l.rho[k][i], [l.u[k][0][i], l.u[k][1][i], l.u[k][2][i]], l.theta[k][i])
    }
}

/// Run the construction for `n = 3`, `N = 1`.
pub fn build_expansion(params: &ExpansionParameters, settings: &BuildSettings) -> Result<ExpansionSet> {
    let parameter_report = params.validate()?;
    if params.n != 3 || params.order > BUILT_ORDER {
        return Err(Error::Unsupported(format!(
            "build for n = {}, N = {} (the build covers n = 3, N = {BUILT_ORDER})",
            params.n, params.order
        )));
    }
    let tol = settings.tolerances;
    let mut deps = DependencyLog::default();
    let mut checks = Vec::new();
    let op = collision_operator(&settings.collision, settings.mode)?;
    let transport = op.transport()?;
    let grid = SpatialGrid::new(settings.spatial)?;
    let vgrid = VelocityGrid::new(settings.velocity_nodes, op.basis.max_degree)?;

    // order 0
    let init = settings.preset.initial(&grid);
    let steps = plan_steps(&grid, &init, &settings.time)?;
    let euler = solve_euler0(&grid, &init, settings.p0, 0.0, settings.time.horizon, steps, settings.time.cfl)
        .map_err(at_order(0, "interior"))?;
    deps.produce("f0", 0, &[])?;
    let dt = 2.0 * euler.h;
    let c1_defect = euler
        .p1
        .iter()
        .zip(&euler.gauge_c1)
        .map(|(p, c)| (grid.integrate(p) - c).abs())
        .fold(0.0, f64::max);
    checks.push(CheckRecord::le("order-0 divergence", euler.div_max.iter().cloned().fold(0.0, f64::max), 1e-6));
    checks.push(CheckRecord::le("order-1 pressure gauge c1", c1_defect, tol.compatibility));

    // order 1 interior
    let pairings = match settings.g0_closure {
        G0Closure::Defined => Some(QuadPairings::new(&op)?),
        G0Closure::Vanishing => None,
    };
    let src = OrderOneSources::assemble(&grid, &euler, pairings.as_ref(), settings.g0_closure)
        .map_err(at_order(1, "interior"))?;
    let u_init = compatible_initial_velocity(&grid, &src, None).map_err(at_order(1, "interior"))?;
    let lin = solve_linearized_euler(&grid, &euler, &src, &u_init, &grid.zeros(), dt, steps)
        .map_err(at_order(1, "interior"))?;
    deps.produce("f1", 1, &["f0"])?;
    let uscale = 1.0 + lin.u.iter().flat_map(|u| u.iter().map(|c| max_abs(c))).fold(0.0, f64::max);
    checks.push(CheckRecord::le("order-1 divergence identity", lin.max_div_defect() / uscale, tol.divergence));
    checks.push(CheckRecord::le("order-1 wall-flux balance", lin.max_flux_defect() / uscale, tol.compatibility));

    // order 1 viscous layers
    let kinetic = match settings.neumann {
        NeumannChoice::Kinetic => Some(KineticNeumann::new(&op)?),
        NeumannChoice::ClosedForm => None,
    };
    let route = match &kinetic {
        Some(k) => NeumannRoute::Kinetic(k),
        None => NeumannRoute::ClosedForm,
    };
    let layers = solve_order_one(&grid, &euler, euler.p0, &settings.layer, transport, &route, dt, steps)
        .map_err(at_order(1, "viscous layer"))?;
    deps.produce("fbar1", 1, &["f0"])?;
    let layer_grid = settings.layer.grid()?;
    if let Some(k) = &kinetic {
        let mut d: f64 = 0.0;
        for kk in [0, steps] {
            for side in WallSide::BOTH {
                let tr = WallTraces::new(&grid, &euler.states[2 * kk], euler.p0, side);
                d = d.max(k.neumann_data(1, &tr, None)?.max_diff(&tr.neumann_closed_form()));
            }
        }
        checks.push(CheckRecord::le("order-1 Neumann data, kinetic vs trace", d, 1e-6));
    }
    let mut closure_defect: f64 = 0.0;
    for (s, side) in WallSide::BOTH.into_iter().enumerate() {
        let tr = WallTraces::new(&grid, &euler.states[2 * steps], euler.p0, side);
        let c = closure_relations(1, &layers[s], steps, &grid, &layer_grid, &tr)?;
        let scale = max_abs(&c.u2_3);
        if scale > 0.0 {
            closure_defect = closure_defect.max(c.divergence_defect / scale);
        }
    }
    checks.push(CheckRecord::le("order-2 normal layer velocity closure (relative)", closure_defect, 1e-2));

    // order 1 Knudsen layers
    let knudsen = knudsen_order_one(&op, &vgrid, &grid, &euler, &lin, &layers, params, settings, &mut checks)?;
    deps.produce("fhat1", 1, &["f0", "f1", "fbar1"])?;

    // trace compatibility u_{1,3} + u_bar_{1,3}(0) + (A_1 + 5 C_1)(0) = 0
    let mut trace_defect: f64 = 0.0;
    for k in 0..=steps {
        for side in WallSide::BOTH {
            let u3 = grid.trace(&lin.u[k][2], side.is_top());
            // u_bar_{1,3} = 0 and the corrector of a zero source vanishes
            let kl = &knudsen[side_index(side)];
            trace_defect = trace_defect.max(max_abs(&u3) + kl.corrector_max);
        }
    }
    checks.push(CheckRecord::le("order-1 normal velocity trace identity", trace_defect, tol.compatibility));
    if trace_defect > tol.compatibility {
        return Err(Error::Invariant(format!("order 1 compatibility: normal velocity traces {trace_defect:.3e}")));
    }

    // gauges
    let pressures = pressure_record(&grid, &euler, &lin, &layers, &layer_grid, kinetic.as_ref(), dt)?;
    deps.produce("p2-gauge", 2, &["f0", "f1", "fbar1", "fhat1"])?;

    Ok(ExpansionSet {
        params: params.clone(),
        settings: settings.clone(),
        parameter_report,
        op,
        transport,
        grid,
        vgrid,
        dt,
        euler,
        interior: vec![lin],
        layer_grid,
        layers: vec![layers],
        knudsen: vec![knudsen],
        pressures,
        checks,
        dependencies: deps,
    })
}

#[allow(clippy::too_many_arguments)]
fn knudsen_order_one(
    op: &CollisionOperator,
    vg: &VelocityGrid,
    grid: &SpatialGrid,
    euler: &EulerSolution,
    lin: &LinearSolution,
    layers: &[LayerField; 2],
    params: &ExpansionParameters,
    settings: &BuildSettings,
    checks: &mut Vec<CheckRecord>,
) -> Result<[KnudsenLayer; 2]> {
    let hs = settings.halfspace;
    let zeta = params.zeta[0];
    let hgrid = HalfSpaceGrid::new(zeta, hs.h0, hs.growth, hs.h_max)?;
    let nw = grid.res.n1 * grid.res.n2;
    let basis = &op.basis;
    let steps = lin.times.len() - 1;
    let f0_any = MacroState::new(0.0, [0.0; 3], 0.0);
    // k = 1 <= n - 2: both sources vanish
    let src = assemble_knudsen_sources(1, op, hgrid.len(), &f0_any, None)?;
    let mut out = Vec::new();
    let solver = if hs.probe { Some(HalfSpaceSolver::new(op, vg, &hgrid, hs.solver)?) } else { None };
    for side in WallSide::BOTH {
        let top = side.is_top();
        let layer = &layers[side_index(side)];
        let corr = corrector(&hgrid, &src.s1, side)?;
        let f_hat1 = corr.f_hat(basis, 0);
        let corrector_max = (0..hgrid.len())
            .map(|j| corr.f_hat(basis, j).iter().fold(0.0f64, |a, x| a.max(x.abs())))
            .fold(0.0, f64::max);
        let (mut gmax, mut smax, mut arg) = (0.0f64, 0.0f64, (0usize, 0usize));
        for k in 0..=steps {
            let st = &euler.states[2 * k];
            let th0 = grid.trace(&st.theta, top);
            let u0: [Vec<f64>; 3] = std::array::from_fn(|c| grid.trace(&st.u[c], top));
            let rho1 = grid.trace(&lin.rho[k], top);
            let th1 = grid.trace(&lin.theta[k], top);
            let u1: [Vec<f64>; 3] = std::array::from_fn(|c| grid.trace(&lin.u[k][c], top));
            for w in 0..nw {
                let s0 = MacroState::new(euler.p0 - th0[w], [u0[0][w], u0[1][w], u0[2][w]], th0[w]);
                let s1 = MacroState::new(rho1[w], [u1[0][w], u1[1][w], u1[2][w]], th1[w]);
                let mut interior = modal::maxwellian(basis, &s1);
                for (x, y) in interior.iter_mut().zip(modal::micro_quadratic(basis, &s0, &s0)) {
                    *x += 0.5 * y;
                }
                let viscous = modal::maxwellian(basis, &layer_state(layer, k, layer.at(w, 0)));
                let g = boundary_mismatch(
                    vg,
                    side,
                    &MismatchInputs { interior: &interior, viscous: &viscous, corrector: &f_hat1 },
                );
                let gm = g.values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                if gm > gmax {
                    gmax = gm;
                    arg = (k, w);
                }
                smax = solvability_check(vg, &g).iter().fold(smax, |a, x| a.max(x.abs()));
            }
        }
        checks.push(CheckRecord::le(format!("order-1 Knudsen solvability ({})", side.label()), smax, settings.tolerances.solvability));
        checks.push(CheckRecord::le(format!("order-1 Knudsen mismatch ({})", side.label()), gmax, settings.tolerances.mismatch));
        if smax > settings.tolerances.solvability {
            return Err(Error::Invariant(format!(
                "order 1 Knudsen layer ({}): solvability moments {smax:.3e}",
                side.label()
            )));
        }
        if gmax > settings.tolerances.mismatch {
            return Err(Error::Invariant(format!(
                "order 1 Knudsen layer ({}): boundary mismatch {gmax:.3e} does not vanish",
                side.label()
            )));
        }
        let probe = match &solver {
            None => None,
            Some(s) => {
                let (k, w) = arg;
                let st = &euler.states[2 * k];
                let i = w * grid.res.m3 + if top { grid.res.m3 - 1 } else { 0 };
                let s0 = st.macro_at(euler.p0, i);
                let s1 = MacroState::new(lin.rho[k][i], [lin.u[k][0][i], lin.u[k][1][i], lin.u[k][2][i]], lin.theta[k][i]);
                let mut interior = modal::maxwellian(basis, &s1);
                for (x, y) in interior.iter_mut().zip(modal::micro_quadratic(basis, &s0, &s0)) {
                    *x += 0.5 * y;
                }
                let viscous = modal::maxwellian(basis, &layer_state(layer, k, layer.at(w, 0)));
                let g = boundary_mismatch(vg, side, &MismatchInputs { interior: &interior, viscous: &viscous, corrector: &f_hat1 });
                let zero = crate::velocity::KineticFunction { values: vec![0.0; vg.len()] };
                let sol = s.solve_wall(side, &g, &vec![zero; hgrid.len()]).map_err(at_order(1, "Knudsen layer"))?;
                let sup = sol.values.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
                Some(HalfSpaceProbe {
                    wall_point: w,
                    time: lin.times[k],
                    mismatch: gmax,
                    iterations: sol.iterations,
                    residual: sol.residual,
                    sup,
                    flux_defect: sol.flux_defect(),
                })
            }
        };
        if let Some(p) = &probe {
            checks.push(CheckRecord::le(format!("order-1 Knudsen layer vanishes ({})", side.label()), p.sup, 1e3 * settings.tolerances.mismatch));
        }
        out.push(KnudsenLayer {
            side,
            order: 1,
            grid: hgrid.clone(),
            mismatch_max: gmax,
            solvability_max: smax,
            corrector_max,
            probe,
            field: KnudsenData::Zero,
        });
    }
    let top = out.pop().unwrap();
    let bottom = out.pop().unwrap();
    Ok([bottom, top])
}

fn pressure_record(
    grid: &SpatialGrid,
    euler: &EulerSolution,
    lin: &LinearSolution,
    layers: &[LayerField; 2],
    hl: &HalfLineGrid,
    kinetic: Option<&KineticNeumann>,
    dt: f64,
) -> Result<PressureRecord> {
    let nw = grid.res.n1 * grid.res.n2;
    let ny = hl.len();
    let steps = lin.times.len() - 1;
    let col_int = |f: &[f64], w: usize| hl.integrate(&f[w * ny..(w + 1) * ny]);
    // per-time integrands
    let mut b3 = vec![0.0; steps + 1];
    let mut dens = vec![0.0; steps + 1];
    let mut div = vec![0.0; steps + 1];
    let mut rate = vec![0.0; steps + 1];
    for k in 0..=steps {
        for side in WallSide::BOTH {
            let layer = &layers[side_index(side)];
            let st = &euler.states[2 * k];
            let th0 = grid.trace(&st.theta, side.is_top());
            if let Some(kn) = kinetic {
                let tr = WallTraces::new(grid, st, euler.p0, side);
                let m: Vec<f64> = (0..nw).map(|w| kn.g1_moments(&tr, w, None).map(|x| x[2])).collect::<Result<_>>()?;
                b3[k] += side.sign() * grid.integrate_wall(&m);
            }
            let rho = layer.rho(k);
            dens[k] += grid.integrate_wall(&(0..nw).map(|w| col_int(&rho, w)).collect::<Vec<_>>());
            let mut d = vec![0.0; nw * ny];
            let mut slice = vec![0.0; nw];
            for j in 0..ny {
                for c in 0..2 {
                    for w in 0..nw {
                        slice[w] = layer.u[k][c][w * ny + j];
                    }
                    let gr = grid.wall_grad(&slice);
                    for w in 0..nw {
                        d[w * ny + j] += gr[c][w];
                    }
                }
            }
            div[k] += grid.integrate_wall(&(0..nw).map(|w| th0[w] * col_int(&d, w)).collect::<Vec<_>>());
            let drho: Vec<f64> = layer.rates[k][2].iter().map(|x| -x).collect();
            rate[k] += grid.integrate_wall(&(0..nw).map(|w| th0[w] * col_int(&drho, w)).collect::<Vec<_>>());
        }
    }
    let cumulative = |f: &[f64]| {
        let mut acc = vec![0.0; f.len()];
        for k in 1..f.len() {
            acc[k] = acc[k - 1] + 0.5 * dt * (f[k - 1] + f[k]);
        }
        acc
    };
    let (b3c, divc, ratec) = (cumulative(&b3), cumulative(&div), cumulative(&rate));
    let mut c2 = Vec::new();
    let mut layer_terms = Vec::new();
    for k in 0..=steps {
        let terms = GaugeLayerTerms {
            b3_flux: b3c[k],
            layer_density_change: dens[k] - dens[0],
            layer_divergence: divc[k],
            layer_density_rate: ratec[k],
            knudsen: 0.0,
        };
        let st = &euler.states[2 * k];
        let dot: Field = (0..grid.len()).map(|i| (0..3).map(|c| st.u[c][i] * lin.u[k][c][i]).sum()).collect();
        c2.push(pressure_gauge(2, 0.0, grid.integrate(&dot), &terms)?);
        layer_terms.push([terms.b3_flux, terms.layer_density_change, terms.layer_divergence, terms.layer_density_rate, terms.knudsen]);
    }
    let c1 = (0..=steps).map(|k| euler.gauge_c1[2 * k]).collect();
    Ok(PressureRecord { p0: euler.p0, c1, c2, layer_terms })
}

/// `Gamma(a, b) + Gamma(b, a)` for macroscopic `b`, as `sum_m b_m M_m a`.
struct GammaMacro {
    m: Vec<DMatrix<f64>>,
    kin: usize,
}

impl GammaMacro {
    fn new(op: &CollisionOperator) -> Result<Self> {
        let (k, kin) = (op.basis.len(), op.in_basis.len());
        let units = [
            MacroState::new(1.0, [0.0; 3], 0.0),
            MacroState::new(0.0, [1.0, 0.0, 0.0], 0.0),
            MacroState::new(0.0, [0.0, 1.0, 0.0], 0.0),
            MacroState::new(0.0, [0.0, 0.0, 1.0], 0.0),
            MacroState::new(0.0, [0.0; 3], 1.0),
        ];
        let mut m = Vec::new();
        for u in units {
            let b = modal::maxwellian(&op.basis, &u);
            let mut mat = DMatrix::<f64>::zeros(k, kin);
            for c in 0..kin {
                let mut e = vec![0.0; k];
                e[c] = 1.0;
                let col = op.apply_gamma_sym(&e, &b)?;
                for (r, x) in col.iter().enumerate() {
                    mat[(r, c)] = *x;
                }
            }
            m.push(mat);
        }
        Ok(GammaMacro { m, kin })
    }

    fn apply(&self, a: &[f64], s: &MacroState) -> Coeffs {
        let av = DVector::from_column_slice(&a[..self.kin]);
        let w = [s.rho, s.u[0], s.u[1], s.u[2], s.theta];
        let mut out = DVector::<f64>::zeros(self.m[0].nrows());
        for (mi, wi) in self.m.iter().zip(w) {
            if wi != 0.0 {
                out += mi * &av * wi;
            }
        }
        out.as_slice().to_vec()
    }
}

/// Split off the part above the quadratic operator's input degree.
fn truncate(a: &[f64], kin: usize) -> (Coeffs, f64) {
    let tail = a[kin..].iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut h = a.to_vec();
    for x in h[kin..].iter_mut() {
        *x = 0.0;
    }
    (h, tail)
}

fn add_scaled(acc: &mut [f64], s: f64, x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += s * b;
    }
}

fn sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn v_dot_grad(basis: &crate::hermite::MultiIndexSet, d: &[Coeffs], dirs: &[usize]) -> Coeffs {
    let mut out = vec![0.0; basis.len()];
    for (dj, &j) in d.iter().zip(dirs) {
        add_scaled(&mut out, 1.0, &modal::times_v(basis, dj, j));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualNorms {
    pub eps: f64,
    pub time: f64,
    pub interior: f64,
    /// `[bottom, top]`.
    pub viscous: [f64; 2],
    pub knudsen: [f64; 2],
    /// Largest norm of a layer function's part above the quadratic input degree.
    pub truncated: f64,
}

struct InteriorColumns {
    theta0: Field,
    u0: [Field; 3],
    rho1: Field,
    u1: [Field; 3],
    theta1: Field,
}

impl InteriorColumns {
    fn at(exp: &ExpansionSet, k: usize) -> Self {
        let st = &exp.euler.states[2 * k];
        let l = &exp.interior[0];
        InteriorColumns {
            theta0: st.theta.clone(),
            u0: st.u.clone(),
            rho1: l.rho[k].clone(),
            u1: l.u[k].clone(),
            theta1: l.theta[k].clone(),
        }
    }

    /// `(f_0, P f_1)` states along column `w` at the interpolation weights.
    fn interp(&self, m3: usize, w: usize, wts: &[f64], p0: f64) -> (MacroState, MacroState) {
        let e = |f: &Field| f[w * m3..(w + 1) * m3].iter().zip(wts).map(|(a, b)| a * b).sum::<f64>();
        let th0 = e(&self.theta0);
        (
            MacroState::new(p0 - th0, [e(&self.u0[0]), e(&self.u0[1]), e(&self.u0[2])], th0),
            MacroState::new(e(&self.rho1), [e(&self.u1[0]), e(&self.u1[1]), e(&self.u1[2])], e(&self.theta1)),
        )
    }
}

fn full_f1(basis: &crate::hermite::MultiIndexSet, s0: &MacroState, s1: &MacroState) -> Coeffs {
    let mut f = modal::maxwellian(basis, s1);
    add_scaled(&mut f, 0.5, &modal::micro_quadratic(basis, s0, s0));
    f
}

/// Interior residual terms `R = sum_p eps^p R_p` at every grid point.
fn interior_terms(exp: &ExpansionSet, k: usize, gm: &GammaMacro) -> Result<Vec<[Coeffs; 4]>> {
    let g = &exp.grid;
    let b = &exp.op.basis;
    let p0 = exp.euler.p0;
    let lin = &exp.interior[0];
    let nk = lin.times.len();
    let st = &exp.euler.states[2 * k];
    let (du0, dth0, _) = exp.euler.rates(g, 2 * k);
    // d_t of theta_1 and rho_1 by differences on the stored samples
    let diff = |f: &Vec<Field>| -> Field {
        let (a, c, h) = if k == 0 {
            (0, 1, exp.dt)
        } else if k + 1 == nk {
            (k - 1, k, exp.dt)
        } else {
            (k - 1, k + 1, 2.0 * exp.dt)
        };
        f[c].iter().zip(&f[a]).map(|(x, y)| (x - y) / h).collect()
    };
    let dth1 = diff(&lin.theta);
    let drho1 = diff(&lin.rho);
    let gth0 = g.grad(&st.theta);
    let gu0: [[Field; 3]; 3] = std::array::from_fn(|c| g.grad(&st.u[c]));
    let grho1 = g.grad(&lin.rho[k]);
    let gth1 = g.grad(&lin.theta[k]);
    let gu1: [[Field; 3]; 3] = std::array::from_fn(|c| g.grad(&lin.u[k][c]));
    let kin = exp.op.in_basis.len();
    let mut out = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let s0 = st.macro_at(p0, i);
        let s1 = exp.state1(k, i);
        let f0 = modal::maxwellian(b, &s0);
        let f1 = full_f1(b, &s0, &s1);
        let (f1h, _) = truncate(&f1, kin);
        let r0 = gm.apply(&f1h, &s0);
        let d0: Vec<MacroState> = (0..3)
            .map(|j| MacroState::new(-gth0[j][i], [gu0[0][j][i], gu0[1][j][i], gu0[2][j][i]], gth0[j][i]))
            .collect();
        let d1: Vec<Coeffs> = (0..3)
            .map(|j| {
                let ds1 = MacroState::new(grho1[j][i], [gu1[0][j][i], gu1[1][j][i], gu1[2][j][i]], gth1[j][i]);
                let mut f = modal::maxwellian(b, &ds1);
                add_scaled(&mut f, 1.0, &modal::micro_quadratic(b, &d0[j], &s0));
                f
            })
            .collect();
        let df0: Vec<Coeffs> = d0.iter().map(|d| modal::maxwellian(b, d)).collect();
        let mut r1: Coeffs = v_dot_grad(b, &df0, &[0, 1, 2]).iter().map(|x| -x).collect();
        add_scaled(&mut r1, 1.0, &exp.op.apply_gamma(&f1h, &f1h)?);
        let dt0 = MacroState::new(-dth0[i], [du0[0][i], du0[1][i], du0[2][i]], dth0[i]);
        let mut r2: Coeffs = modal::maxwellian(b, &dt0).iter().map(|x| -x).collect();
        add_scaled(&mut r2, -1.0, &v_dot_grad(b, &d1, &[0, 1, 2]));
        let dt1 = MacroState::new(drho1[i], [lin.dt_u[k][0][i], lin.dt_u[k][1][i], lin.dt_u[k][2][i]], dth1[i]);
        let mut r3: Coeffs = modal::maxwellian(b, &dt1).iter().map(|x| -x).collect();
        add_scaled(&mut r3, -1.0, &modal::micro_quadratic(b, &dt0, &s0));
        let _ = &f0;
        out.push([r0, r1, r2, r3]);
    }
    Ok(out)
}

fn level_grads(grid: &SpatialGrid, f: &[f64], ny: usize, j: usize) -> [Vec<f64>; 2] {
    let nw = grid.res.n1 * grid.res.n2;
    let slice: Vec<f64> = (0..nw).map(|w| f[w * ny + j]).collect();
    grid.wall_grad(&slice)
}

fn viscous_norm(exp: &ExpansionSet, side: WallSide, eps: f64, k: usize, cols: &InteriorColumns, gm: &GammaMacro) -> Result<f64> {
    let g = &exp.grid;
    let b = &exp.op.basis;
    let hl = &exp.layer_grid;
    let layer = &exp.layers[0][side_index(side)];
    let (nw, ny, m3) = (layer.n_wall, layer.ny, g.res.m3);
    let sg = side.sign();
    let kin = exp.op.in_basis.len();
    let mut total = 0.0;
    for j in 0..ny {
        let y = hl.y[j];
        let z = eps * y;
        if z >= 0.5 {
            break;
        }
        let (phi, dphi) = (cutoff_phi(z), cutoff_dphi(z));
        let x3 = if side.is_top() { 1.0 - z } else { z };
        let wts = g.interp_weights(x3);
        let gu = [level_grads(g, &layer.u[k][0], ny, j), level_grads(g, &layer.u[k][1], ny, j)];
        let gth = level_grads(g, &layer.theta[k], ny, j);
        let mut acc = 0.0;
        for w in 0..nw {
            let (s0, s1) = cols.interp(m3, w, &wts, exp.euler.p0);
            let idx = layer.at(w, j);
            let sb = layer_state(layer, k, idx);
            let fb = modal::maxwellian(b, &sb);
            let r = &layer.rates[k];
            let dsb = MacroState::new(-r[2][idx], [r[0][idx], r[1][idx], 0.0], r[2][idx]);
            let grads: Vec<Coeffs> = (0..2)
                .map(|d| modal::maxwellian(b, &MacroState::new(-gth[d][w], [gu[0][d][w], gu[1][d][w], 0.0], gth[d][w])))
                .collect();
            let mut res = vec![0.0; b.len()];
            add_scaled(&mut res, eps * eps * sg * dphi, &modal::times_v(b, &fb, 2));
            add_scaled(&mut res, -eps * eps * phi, &v_dot_grad(b, &grads, &[0, 1]));
            add_scaled(&mut res, -eps.powi(3) * phi, &modal::maxwellian(b, &dsb));
            let f0 = modal::maxwellian(b, &s0);
            let (f1, _) = truncate(&full_f1(b, &s0, &s1), kin);
            add_scaled(&mut res, phi, &gm.apply(&f0, &sb));
            add_scaled(&mut res, eps * phi, &gm.apply(&f1, &sb));
            acc += sq(&res);
        }
        total += eps * hl.w[j] * acc / nw as f64;
    }
    Ok(total.sqrt())
}

#[allow(clippy::too_many_arguments)]
fn knudsen_norm(
    exp: &ExpansionSet,
    side: WallSide,
    eps: f64,
    k: usize,
    cols: &InteriorColumns,
    gm: &GammaMacro,
    truncated: &mut f64,
) -> Result<f64> {
    let kl = &exp.knudsen[0][side_index(side)];
    let KnudsenData::Sampled { times, values } = &kl.field else {
        return Ok(0.0);
    };
    let t = exp.times()[k];
    let kk = times
        .iter()
        .position(|s| (s - t).abs() <= 1e-9 * exp.dt)
        .ok_or_else(|| Error::Config(format!("Knudsen samples do not contain t = {t}")))?;
    let g = &exp.grid;
    let b = &exp.op.basis;
    let kin = exp.op.in_basis.len();
    let n = exp.params.n as i32;
    let hg = &kl.grid;
    let wq = hg.weights();
    let layer = &exp.layers[0][side_index(side)];
    let hl = &exp.layer_grid;
    let (nw, m3, ny) = (g.res.n1 * g.res.n2, g.res.m3, layer.ny);
    let sg = side.sign();
    let nk = times.len();
    let (ka, kc, h) = if nk == 1 {
        (kk, kk, 0.0)
    } else if kk == 0 {
        (0, 1, times[1] - times[0])
    } else if kk + 1 == nk {
        (kk - 1, kk, times[kk] - times[kk - 1])
    } else {
        (kk - 1, kk + 1, times[kk + 1] - times[kk - 1])
    };
    let mut total = 0.0;
    for (j, &eta) in hg.eta.iter().enumerate() {
        let z = eps.powi(n) * eta;
        if z >= 0.5 {
            break;
        }
        let (phi, dphi) = (cutoff_phi(z), cutoff_dphi(z));
        let x3 = if side.is_top() { 1.0 - z } else { z };
        let y = eps.powi(n - 1) * eta;
        let wts = g.interp_weights(x3);
        // tangential gradients of every mode at this eta level
        let kmodes = b.len();
        let mut grads = vec![vec![[0.0; 2]; kmodes]; nw];
        for m in 0..kmodes {
            let slice: Vec<f64> = (0..nw).map(|w| values[kk][w][j][m]).collect();
            let gr = g.wall_grad(&slice);
            for w in 0..nw {
                grads[w][m] = [gr[0][w], gr[1][w]];
            }
        }
        let mut acc = 0.0;
        for w in 0..nw {
            let fh = &values[kk][w][j];
            let (fht, tail) = truncate(fh, kin);
            *truncated = truncated.max(tail);
            let (s0, s1) = cols.interp(m3, w, &wts, exp.euler.p0);
            let col = |f: &[f64]| hl.interpolate(&f[w * ny..(w + 1) * ny], y);
            let th = col(&layer.theta[k]);
            let sb = MacroState::new(-th, [col(&layer.u[k][0]), col(&layer.u[k][1]), 0.0], th);
            let g1: Coeffs = (0..kmodes).map(|m| grads[w][m][0]).collect();
            let g2: Coeffs = (0..kmodes).map(|m| grads[w][m][1]).collect();
            let mut res = vec![0.0; b.len()];
            add_scaled(&mut res, eps * eps * sg * dphi, &modal::times_v(b, fh, 2));
            add_scaled(&mut res, -eps * eps * phi, &v_dot_grad(b, &[g1, g2], &[0, 1]));
            if h > 0.0 {
                let dfh: Coeffs = values[kc][w][j].iter().zip(&values[ka][w][j]).map(|(a, c)| (a - c) / h).collect();
                add_scaled(&mut res, -eps.powi(3) * phi, &dfh);
            }
            add_scaled(&mut res, phi, &gm.apply(&fht, &s0));
            let (f1, _) = truncate(&full_f1(b, &s0, &s1), kin);
            add_scaled(&mut res, eps * phi, &exp.op.apply_gamma_sym(&f1, &fht)?);
            add_scaled(&mut res, eps * phi * phi, &gm.apply(&fht, &sb));
            acc += sq(&res);
        }
        total += eps.powi(n) * wq[j] * acc / nw as f64;
    }
    Ok(total.sqrt())
}

/// Residual norms `||R / sqrt(mu)||` of the three families for each `eps`.
pub fn residual_norms(exp: &ExpansionSet, eps: &[f64], t: f64) -> Result<Vec<ResidualNorms>> {
    if exp.params.order != 1 || exp.params.n != 3 {
        return Err(Error::Unsupported("residual sources are assembled for n = 3, N = 1".into()));
    }
    if eps.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
        return Err(Error::Config("eps must lie in (0, 1]".into()));
    }
    let k = exp.time_index(t)?;
    let gm = GammaMacro::new(&exp.op)?;
    let terms = interior_terms(exp, k, &gm)?;
    let cols = InteriorColumns::at(exp, k);
    let g = &exp.grid;
    let mut out = Vec::new();
    for &e in eps {
        let dens: Field = terms
            .iter()
            .map(|r| {
                let mut v = r[0].clone();
                for (p, rp) in r.iter().enumerate().skip(1) {
                    add_scaled(&mut v, e.powi(p as i32), rp);
                }
                sq(&v)
            })
            .collect();
        let interior = g.integrate(&dens).max(0.0).sqrt();
        let mut truncated: f64 = 0.0;
        let mut viscous = [0.0; 2];
        let mut knudsen = [0.0; 2];
        for side in WallSide::BOTH {
            let s = side_index(side);
            viscous[s] = viscous_norm(exp, side, e, k, &cols, &gm)?;
            knudsen[s] = knudsen_norm(exp, side, e, k, &cols, &gm, &mut truncated)?;
        }
        out.push(ResidualNorms { eps: e, time: t, interior, viscous, knudsen, truncated });
    }
    Ok(out)
}

pub fn residual_sources(exp: &ExpansionSet, eps: f64, t: f64) -> Result<ResidualNorms> {
    Ok(residual_norms(exp, &[eps], t)?.remove(0))
}

/// `(F^eps - mu) / sqrt(mu)` in Hermite coefficients at sample points whose
/// tangential coordinates are grid nodes.
pub fn compose(exp: &ExpansionSet, eps: f64, t: f64, samples: &[[f64; 3]]) -> Result<Vec<Coeffs>> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Config("eps must lie in (0, 1]".into()));
    }
    let k = exp.time_index(t)?;
    let g = &exp.grid;
    let b = &exp.op.basis;
    let n = exp.params.n as i32;
    let cols = InteriorColumns::at(exp, k);
    let node = |x: f64, nodes: &[f64]| -> Result<usize> {
        let xr = x.rem_euclid(1.0);
        nodes
            .iter()
            .position(|p| (p - xr).abs() < 1e-12 || (p - xr).abs() > 1.0 - 1e-12)
            .ok_or_else(|| Error::Config(format!("tangential coordinate {x} is not a grid node")))
    };
    let mut out = Vec::with_capacity(samples.len());
    for x in samples {
        if !(0.0..=1.0).contains(&x[2]) {
            return Err(Error::Config(format!("sample x3 = {} outside [0, 1]", x[2])));
        }
        let w = node(x[0], &g.x1)? * g.res.n2 + node(x[1], &g.x2)?;
        let (s0, s1) = cols.interp(g.res.m3, w, &g.interp_weights(x[2]), exp.euler.p0);
        let mut f = modal::maxwellian(b, &s0);
        add_scaled(&mut f, eps, &full_f1(b, &s0, &s1));
        for side in WallSide::BOTH {
            let dist = if side.is_top() { 1.0 - x[2] } else { x[2] };
            let layer = &exp.layers[0][side_index(side)];
            let ny = layer.ny;
            let y = dist / eps;
            let phi = cutoff_phi(eps * y);
            if phi > 0.0 {
                let c = |f: &[f64]| exp.layer_grid.interpolate(&f[w * ny..(w + 1) * ny], y);
                let th = c(&layer.theta[k]);
                let sb = MacroState::new(-th, [c(&layer.u[k][0]), c(&layer.u[k][1]), 0.0], th);
                add_scaled(&mut f, eps * phi, &modal::maxwellian(b, &sb));
            }
            let kl = &exp.knudsen[0][side_index(side)];
            if let KnudsenData::Sampled { times, values } = &kl.field {
                let eta = dist / eps.powi(n);
                let phi = cutoff_phi(eps.powi(n) * eta);
                let kk = times.iter().position(|s| (s - t).abs() <= 1e-9 * exp.dt);
                if let (true, Some(kk)) = (phi > 0.0 && eta < kl.grid.eta_max, kk) {
                    let e = &kl.grid.eta;
                    let j = e.partition_point(|p| *p <= eta).clamp(1, e.len() - 1);
                    let a = (eta - e[j - 1]) / (e[j] - e[j - 1]);
                    add_scaled(&mut f, eps * phi * (1.0 - a), &values[kk][w][j - 1]);
                    add_scaled(&mut f, eps * phi * a, &values[kk][w][j]);
                }
            }
        }
        let scale = eps.powi(n - 2);
        out.push(f.iter().map(|v| scale * v).collect());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyScan {
    pub name: String,
    pub norms: Vec<f64>,
    pub slope: Option<f64>,
    pub predicted: f64,
    pub exact_zero: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub eps: Vec<f64>,
    pub time: f64,
    pub tolerance: f64,
    pub families: Vec<FamilyScan>,
    pub truncated: f64,
}

impl ScanReport {
    pub fn pass(&self) -> bool {
        self.families.iter().all(|f| f.pass)
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(_, b)| **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    if pts.len() < 2 || pts.len() != x.len() {
        return None;
    }
    let m = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), (p, q)| (a + p / m, b + q / m));
    let sxy: f64 = pts.iter().map(|(p, q)| (p - mx) * (q - my)).sum();
    let sxx: f64 = pts.iter().map(|(p, _)| (p - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Slopes of the residual families over `eps`, against the predicted exponents.
pub fn order_scan(exp: &ExpansionSet, eps: &[f64], t: f64) -> Result<ScanReport> {
    if eps.len() < 4 {
        return Err(Error::Config("the order scan needs at least four eps values".into()));
    }
    let (lo, hi) = eps.iter().fold((f64::MAX, 0.0f64), |(a, b), e| (a.min(*e), b.max(*e)));
    if (hi / lo).log10() < 0.9 - 1e-12 {
        return Err(Error::Config("the eps values must span about a decade (ratio >= 10^0.9)".into()));
    }
    let norms = residual_norms(exp, eps, t)?;
    let pred = exp.params.predicted_exponents();
    let tol = 0.3;
    let fam = |name: &str, p: f64, f: &dyn Fn(&ResidualNorms) -> f64| {
        let v: Vec<f64> = norms.iter().map(f).collect();
        let exact_zero = v.iter().all(|x| *x == 0.0);
        let slope = if exact_zero { None } else { loglog_slope(eps, &v) };
        let pass = exact_zero || slope.is_some_and(|s| s >= p - tol);
        FamilyScan { name: name.into(), norms: v, slope, predicted: p, exact_zero, pass }
    };
    let families = vec![
        fam("interior", pred[0], &|r| r.interior),
        fam("viscous-bottom", pred[1], &|r| r.viscous[0]),
        fam("viscous-top", pred[1], &|r| r.viscous[1]),
        fam("knudsen-bottom", pred[2], &|r| r.knudsen[0]),
        fam("knudsen-top", pred[2], &|r| r.knudsen[1]),
    ];
    let truncated = norms.iter().map(|r| r.truncated).fold(0.0, f64::max);
    Ok(ScanReport { eps: eps.to_vec(), time: t, tolerance: tol, families, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_values() {
        assert_eq!(cutoff_phi(0.1), 1.0);
        assert_eq!(cutoff_phi(0.75), 0.0);
        let m = cutoff_phi(0.375);
        assert!(m > 0.0 && m < 1.0);
        assert!(cutoff_dphi(0.375) < 0.0);
        // derivative against differences, monotone
        let mut prev = 1.0;
        for i in 1..200 {
            let z = 0.25 + 0.25 * i as f64 / 200.0;
            let h = 1e-6;
            let fd = (cutoff_phi(z + h) - cutoff_phi(z - h)) / (2.0 * h);
            assert!((fd - cutoff_dphi(z)).abs() < 1e-5 * (1.0 + fd.abs()));
            assert!(cutoff_phi(z) <= prev);
            prev = cutoff_phi(z);
        }
    }

    #[test]
    fn default_parameters_are_admissible() {
        let r = ExpansionParameters::default().validate().unwrap();
        assert!(!r.theorem_scale);
        assert_eq!(ExpansionParameters::default().predicted_exponents(), [0.0, 0.5, 1.5]);
    }

    #[test]
    fn violated_inequalities_are_named() {
        let mut p = ExpansionParameters { k0: Some(8.0), ..Default::default() };
        let e = p.validate().unwrap_err().to_string();
        assert!(e.contains("N >= 2n + k0 - 3"), "{e}");
        p.k0 = Some(6.0);
        assert!(p.validate().unwrap_err().to_string().contains("k0 > 3n - 2"));
        let p = ExpansionParameters { l_bar: vec![5.0], ..Default::default() };
        assert!(p.validate().unwrap_err().to_string().contains("l_j^N >= 2b + 6"));
        let p = ExpansionParameters { s: vec![11], ..Default::default() };
        assert!(p.validate().unwrap_err().to_string().contains("s_1 <= s_0 - 2"));
        let two = ExpansionParameters {
            order: 2,
            s0: 40,
            s: vec![38, 12],
            s_bar: vec![30, 10],
            s_hat: vec![20, 5],
            l_bar: vec![60.0, 10.0],
            zeta: vec![1.0, 0.5],
            kappa: vec![[9.0, 8.0, 7.0], [4.0, 3.0, 2.0]],
            ..Default::default()
        };
        two.validate().unwrap();
        let bad = ExpansionParameters { zeta: vec![1.0, 0.6], ..two.clone() };
        assert!(bad.validate().unwrap_err().to_string().contains("2 zeta_{i+1} <= zeta_i"));
        let bad = ExpansionParameters { l_bar: vec![1.0, 10.0], ..two };
        assert!(bad.validate().unwrap_err().to_string().contains("l_j^i >= 2 l_j^(i+1)"));
    }

    #[test]
    fn theorem_scale_is_flagged() {
        // n = 3: k0 = 8 needs N >= 11 and b >= 8.5
        let (nn, b) = (11usize, 9usize);
        // levels built from the last one upwards
        let mut lv = vec![(40usize, 30usize, 20usize, 24.0f64)];
        for _ in 1..nn {
            let &(s1, sb1, sh1, l1) = lv.last().unwrap();
            let sh = (s1 + 2).max(sh1 + 2) + 1;
            let sb = (2 * (s1 + 2)).max(2 * (sh1 + b + 2)).max(sb1 + 6).max(sh + 1);
            let s = (sb1 + 8 + b).max(s1 + 2).max(sb + 1);
            let l = 2.0 * (l1 + 2.0 * sb1 as f64) + 18.0 + 2.0 * b as f64;
            lv.push((s, sb, sh, l));
        }
        lv.reverse();
        let p = ExpansionParameters {
            order: nn,
            taylor: b,
            k0: Some(8.0),
            s0: lv[0].0 + 2,
            s: lv.iter().map(|l| l.0).collect(),
            s_bar: lv.iter().map(|l| l.1).collect(),
            s_hat: lv.iter().map(|l| l.2).collect(),
            l_bar: lv.iter().map(|l| l.3).collect(),
            zeta: (0..nn).map(|i| 0.5f64.powi(i as i32)).collect(),
            kappa: (0..nn)
                .map(|i| {
                    let b = 2.0 + 3.0 * (nn - 1 - i) as f64;
                    [b + 2.0, b + 1.0, b]
                })
                .collect(),
            ..Default::default()
        };
        let r = p.validate().unwrap();
        assert!(r.theorem_scale);
        let e = build_expansion(&p, &BuildSettings::default()).err().unwrap();
        assert!(matches!(e, Error::Unsupported(_)));
    }

    #[test]
    fn dependency_log_rejects_forward_reads() {
        let mut d = DependencyLog::default();
        d.produce("f0", 0, &[]).unwrap();
        assert!(d.produce("f1", 1, &["fbar1"]).is_err());
        d.produce("fbar1", 1, &["f0"]).unwrap();
        d.produce("f1", 1, &["f0", "fbar1"]).unwrap();
        d.produce("g", 2, &[]).unwrap();
        assert!(d.produce("h", 1, &["g"]).is_err());
        assert!(d.produce("f0", 0, &[]).is_err());
    }

    #[test]
    fn loglog_slope_recovers_power() {
        let x = [0.2, 0.1, 0.05, 0.025];
        let y: Vec<f64> = x.iter().map(|e: &f64| 3.0 * e.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y).unwrap() - 1.5).abs() < 1e-12);
        assert!(loglog_slope(&x, &[1.0, 0.0, 1.0, 1.0]).is_none());
    }

    use crate::euler::EulerPreset;
    use crate::velocity::Burnett;
    use std::sync::OnceLock;

    const EPS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

    fn small(preset: EulerPreset) -> BuildSettings {
        let mut s = BuildSettings {
            spatial: Resolution { n1: 8, n2: 4, m3: 17 },
            preset,
            ..Default::default()
        };
        s.time.horizon = 0.1;
        s.layer.ny = 81;
        s
    }

    fn shear() -> &'static ExpansionSet {
        static SET: OnceLock<ExpansionSet> = OnceLock::new();
        SET.get_or_init(|| build_expansion(&ExpansionParameters::default(), &small(EulerPreset::default())).unwrap())
    }

    #[test]
    fn small_build_passes_its_checks() {
        let e = shear();
        for c in &e.checks {
            assert!(c.pass, "{c:?}");
        }
        let names: Vec<&str> = e.dependencies.nodes.iter().map(|n| n.name.as_str()).collect();
        assert_eq!(names, ["f0", "f1", "fbar1", "fhat1", "p2-gauge"]);
        for k in &e.knudsen[0] {
            assert!(matches!(k.field, KnudsenData::Zero));
            let p = k.probe.as_ref().unwrap();
            assert!(p.sup < 1e-10 && p.flux_defect < 1e-12, "{p:?}");
        }
        assert!(e.pressures.c2[0].abs() < 1e-15);
        let r = order_scan(e, &EPS, e.mid_time()).unwrap();
        assert!(r.pass(), "{r:?}");
        assert!(r.families[3].exact_zero && r.families[4].exact_zero);
    }

    #[test]
    fn zero_data_gives_zero_residuals() {
        let e = build_expansion(&ExpansionParameters::default(), &small(EulerPreset::Zero { theta: 0.0 })).unwrap();
        for r in residual_norms(&e, &EPS, e.mid_time()).unwrap() {
            assert_eq!(r.interior, 0.0);
            assert_eq!(r.viscous, [0.0; 2]);
            assert_eq!(r.knudsen, [0.0; 2]);
        }
        let f = compose(&e, 0.1, 0.0, &[[0.0, 0.0, 0.01], [0.125, 0.25, 0.5]]).unwrap();
        assert!(f.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn composite_field_reduces_to_interior_away_from_walls() {
        let e = shear();
        let t = e.mid_time();
        let k = e.time_index(t).unwrap();
        let b = &e.op.basis;
        let g = &e.grid;
        let eps = 0.1;
        // x3 on a grid node of the middle column
        let (i1, i2, i3) = (3, 1, g.res.m3 / 2);
        let x = [g.x1[i1], g.x2[i2], g.x3[i3]];
        let f = compose(e, eps, t, &[x]).unwrap().remove(0);
        let i = (i1 * g.res.n2 + i2) * g.res.m3 + i3;
        let (s0, s1) = (e.state0(k, i), e.state1(k, i));
        let mut want = modal::maxwellian(b, &s0);
        add_scaled(&mut want, eps, &full_f1(b, &s0, &s1));
        let d = f.iter().zip(&want).map(|(a, c)| (a - eps * c).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12, "{d}");
        // at the wall the layer enters with full weight
        let w0 = compose(e, eps, t, &[[x[0], x[1], 0.0]]).unwrap().remove(0);
        let l = &e.layers[0][0];
        let sb = layer_state(l, k, l.at(i1 * g.res.n2 + i2, 0));
        let j = i1 * g.res.n2 + i2;
        let (a0, a1) = (e.state0(k, j * g.res.m3), e.state1(k, j * g.res.m3));
        let mut want = modal::maxwellian(b, &a0);
        add_scaled(&mut want, eps, &full_f1(b, &a0, &a1));
        add_scaled(&mut want, eps, &modal::maxwellian(b, &sb));
        let d = w0.iter().zip(&want).map(|(a, c)| (a - eps * c).abs()).fold(0.0, f64::max);
        assert!(d < 1e-10, "{d}");
        assert!(matches!(compose(e, eps, t, &[[0.01, 0.0, 0.5]]), Err(Error::Config(_))));
        assert!(matches!(compose(e, eps, t + 0.3 * e.dt, &[x]), Err(Error::Config(_))));
    }

    #[test]
    fn knudsen_family_scales_with_three_halves() {
        let base = shear();
        let b = &base.op.basis;
        let kl = &base.knudsen[0][0];
        let g = Burnett::A(0, 2).coeffs(b);
        let nw = base.grid.res.n1 * base.grid.res.n2;
        let slab: Vec<Vec<Coeffs>> = vec![kl.grid.eta.iter().map(|eta| g.iter().map(|x| x * (-eta).exp()).collect()).collect(); nw];
        let field = KnudsenData::Sampled { times: base.times().to_vec(), values: vec![slab; base.times().len()] };
        // rebuild cheaply: clone the parts the residual reads
        let e = ExpansionSet {
            params: base.params.clone(),
            settings: base.settings.clone(),
            parameter_report: base.parameter_report.clone(),
            op: base.op.clone(),
            transport: base.transport,
            grid: SpatialGrid::new(base.grid.res).unwrap(),
            vgrid: base.vgrid.clone(),
            dt: base.dt,
            euler: base.euler.clone(),
            interior: base.interior.clone(),
            layer_grid: base.layer_grid.clone(),
            layers: base.layers.clone(),
            knudsen: vec![[
                KnudsenLayer { field: field.clone(), ..base.knudsen[0][0].clone() },
                KnudsenLayer { field, ..base.knudsen[0][1].clone() },
            ]],
            pressures: base.pressures.clone(),
            checks: Vec::new(),
            dependencies: DependencyLog::default(),
        };
        let r = order_scan(&e, &EPS, e.mid_time()).unwrap();
        for f in &r.families[3..] {
            // the eps Gamma(f_1, f_hat) terms bend the global fit; the local
            // slopes s_i converge linearly, so extrapolate the last two
            let n = &f.norms;
            let local: Vec<f64> = (1..4).map(|i| (n[i - 1] / n[i]).log2()).collect();
            let limit = 2.0 * local[2] - local[1];
            assert!((limit - 1.5).abs() < 0.05, "{}: {local:?}", f.name);
            assert!(local.windows(2).all(|w| w[1] < w[0]));
            assert!(f.pass && f.slope.unwrap() >= 1.5);
        }
        assert_eq!(r.truncated, 0.0);
    }

    #[test]
    fn taylor_order_leaves_residuals_unchanged() {
        let mut s = small(EulerPreset::default());
        s.time.horizon = 0.05;
        let p2 = ExpansionParameters { l_bar: vec![14.0], ..Default::default() };
        let p4 = ExpansionParameters { taylor: 4, ..p2.clone() };
        let a = build_expansion(&p2, &s).unwrap();
        let b = build_expansion(&p4, &s).unwrap();
        let t = a.mid_time();
        assert_eq!(residual_norms(&a, &EPS, t).unwrap(), residual_norms(&b, &EPS, t).unwrap());
        let sa = order_scan(&a, &EPS, t).unwrap();
        let sb = order_scan(&b, &EPS, t).unwrap();
        assert_eq!(sa.families[0].slope, sb.families[0].slope);
        assert_eq!(p4.predicted_exponents()[1], 0.5);
    }
}
