//! Transport-coefficient report and the executable invariant suite.

use crate::benchmarks::{halfspace_manufactured, heat_benchmark, ManufacturedLinear};
use crate::collision::{CollisionConfig, CollisionMode, CollisionOperator};
use crate::config::{CheckTolerances, RunConfig};
use crate::error::Result;
use crate::knudsen::HalfSpaceConfig;
use crate::orchestrator::{collision_operator, CheckRecord};
use crate::spectral::Resolution;
use crate::velocity::{modal, Burnett, Coeffs, MacroState, VelocityGrid};
use crate::viscous::HalfLineGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub pair: String,
    pub value: f64,
    pub exact: f64,
}

impl TableEntry {
    pub fn defect(&self) -> f64 {
        (self.value - self.exact).abs()
    }
}

/// `<A_12, A_12>`, `<A_11, A_11>`, `<B_1, B_1>`, `<A_11, A_22>` and the
/// vanishing `<A_ij, B_k>`.
pub fn burnett_table(basis: &crate::hermite::MultiIndexSet) -> Vec<TableEntry> {
    let ip = |a: Burnett, b: Burnett| modal::dot(&a.coeffs(basis), &b.coeffs(basis));
    let mut t = vec![
        TableEntry { pair: "A12.A12".into(), value: ip(Burnett::A(0, 1), Burnett::A(0, 1)), exact: 1.0 },
        TableEntry { pair: "A11.A11".into(), value: ip(Burnett::A(0, 0), Burnett::A(0, 0)), exact: 4.0 / 3.0 },
        TableEntry { pair: "B1.B1".into(), value: ip(Burnett::B(0), Burnett::B(0)), exact: 2.5 },
        TableEntry { pair: "A11.A22".into(), value: ip(Burnett::A(0, 0), Burnett::A(1, 1)), exact: -2.0 / 3.0 },
    ];
    for i in 0..3 {
        for j in i..3 {
            for k in 0..3 {
                t.push(TableEntry {
                    pair: format!("A{}{}.B{}", i + 1, j + 1, k + 1),
                    value: ip(Burnett::A(i, j), Burnett::B(k)),
                    exact: 0.0,
                });
            }
        }
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub degree: usize,
    pub lambda: f64,
    pub kappa: f64,
    pub rel_delta_lambda: f64,
    pub rel_delta_kappa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub mode: CollisionMode,
    pub degree: usize,
    pub lambda: f64,
    pub kappa: f64,
    /// Hard-sphere `lambda` the relaxation surrogate is tuned to.
    pub calibration_target: Option<f64>,
    /// `<A_11, L^-1 A_11>`, which equals `4 lambda / 3`.
    pub a11_pairing: f64,
    pub coercivity: f64,
    pub burnett: Vec<TableEntry>,
    pub refined: Option<Refinement>,
}

pub fn coefficients(cfg: &CollisionConfig, mode: CollisionMode, refine: bool) -> Result<CoefficientReport> {
    let hs = CollisionOperator::assemble(cfg)?;
    let target = hs.transport()?.lambda;
    let op = match mode {
        CollisionMode::HardSphere => hs,
        CollisionMode::Bgk => hs.bgk_surrogate()?,
    };
    let tr = op.transport()?;
    let refined = if refine {
        // lambda and kappa only need L, so the quadratic part stays small
        let fine = CollisionConfig { degree: 2 * cfg.degree, gamma_degree: 2.min(cfg.gamma_degree), ..cfg.clone() };
        let f = collision_operator(&fine, mode)?.transport()?;
        Some(Refinement {
            degree: fine.degree,
            lambda: f.lambda,
            kappa: f.kappa,
            rel_delta_lambda: (f.lambda - tr.lambda).abs() / f.lambda.abs(),
            rel_delta_kappa: (f.kappa - tr.kappa).abs() / f.kappa.abs(),
        })
    } else {
        None
    };
    Ok(CoefficientReport {
        mode,
        degree: cfg.degree,
        lambda: tr.lambda,
        kappa: tr.kappa,
        calibration_target: (mode == CollisionMode::Bgk).then_some(target),
        a11_pairing: op.burnett_pairing(Burnett::A(0, 0))?,
        coercivity: op.coercivity()?,
        burnett: burnett_table(&op.basis),
        refined,
    })
}

fn unit_states() -> [MacroState; 5] {
    [
        MacroState::new(1.0, [0.0; 3], 0.0),
        MacroState::new(0.0, [1.0, 0.0, 0.0], 0.0),
        MacroState::new(0.0, [0.0, 1.0, 0.0], 0.0),
        MacroState::new(0.0, [0.0, 0.0, 1.0], 0.0),
        MacroState::new(0.0, [0.0; 3], 1.0),
    ]
}

fn norm(c: &[f64]) -> f64 {
    c.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_state(rng: &mut ChaCha8Rng) -> MacroState {
    MacroState::new(
        rng.random_range(-1.0..1.0),
        [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        rng.random_range(-1.0..1.0),
    )
}

/// Velocity-space and collision invariants on the configured operator.
pub fn kinetic_checks(op: &CollisionOperator, vg: &VelocityGrid, tol: &CheckTolerances, seed: u64) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = &op.basis;
    let k = b.len();
    let rand_coeffs = |rng: &mut ChaCha8Rng| -> Coeffs { (0..k).map(|_| rng.random_range(-1.0..1.0)).collect() };

    let table = burnett_table(b);
    let worst = table.iter().map(|e| e.defect()).fold(0.0, f64::max);
    out.push(CheckRecord::le("velocity: Burnett inner products", worst, tol.burnett));

    // nodal and modal routes of P, idempotence, orthogonality
    let (mut proj, mut idem, mut orth, mut round): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..20 {
        let c = rand_coeffs(&mut rng);
        let f = vg.from_coeffs(&c);
        round = round.max(vg.to_coeffs(&f).iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        let (s, micro) = vg.project_p(&f)?;
        let pc = modal::project_p(b, &c);
        let ps = modal::maxwellian(b, &s);
        proj = proj.max(pc.iter().zip(&ps).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        idem = idem.max(norm(&modal::micro(b, &pc)));
        let (s3, _) = vg.project_p(&micro)?;
        orth = orth.max(s3.rho.abs().max(s3.theta.abs()).max(s3.u.iter().fold(0.0f64, |a, x| a.max(x.abs()))));
    }
    out.push(CheckRecord::le("velocity: nodal/modal round trip", round, tol.projection));
    out.push(CheckRecord::le("velocity: nodal and modal P agree", proj, tol.projection));
    out.push(CheckRecord::le("velocity: P idempotent", idem, tol.projection));
    out.push(CheckRecord::le("velocity: (I-P) orthogonal to invariants", orth, tol.projection));

    let null = unit_states()
        .iter()
        .map(|s| {
            let c = modal::maxwellian(b, s);
            norm(&op.apply_l(&c)) / norm(&c)
        })
        .fold(0.0, f64::max);
    out.push(CheckRecord::le("collision: L annihilates the invariants", null, tol.null_space));
    let l = op.l_matrix();
    let sym = (l - l.transpose()).amax();
    out.push(CheckRecord::le("collision: L symmetric", sym, tol.symmetry));
    let mut min_ratio = f64::INFINITY;
    for _ in 0..100 {
        let g = modal::micro(b, &rand_coeffs(&mut rng));
        let q = modal::dot(&op.apply_l(&g), &g);
        min_ratio = min_ratio.min(q / modal::dot(&g, &g));
    }
    out.push(CheckRecord {
        name: "collision: <Lg, g> > 0 on random microscopic g".into(),
        value: min_ratio,
        tol: 0.0,
        pass: min_ratio > 0.0,
    });
    let mut refl: f64 = 0.0;
    for _ in 0..10 {
        let c = rand_coeffs(&mut rng);
        let a = modal::reflect(b, &op.apply_l(&c));
        let bb = op.apply_l(&modal::reflect(b, &c));
        refl = refl.max(a.iter().zip(&bb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    out.push(CheckRecord::le("collision: L commutes with v3 -> -v3", refl, tol.symmetry));
    let tr = op.transport()?;
    let a11 = op.burnett_pairing(Burnett::A(0, 0))?;
    out.push(CheckRecord::le(
        "collision: <A11, L^-1 A11> = 4 lambda / 3 (relative)",
        (a11 - 4.0 * tr.lambda / 3.0).abs() / tr.lambda,
        tol.viscosity_pairing,
    ));
    let mut micro: f64 = 0.0;
    for _ in 0..20 {
        let (sa, sb) = (random_state(&mut rng), random_state(&mut rng));
        let g = op.apply_gamma_sym(&modal::maxwellian(b, &sa), &modal::maxwellian(b, &sb))?;
        let x = op.linverse(&g)?;
        let want = modal::micro_quadratic(b, &sa, &sb);
        let d: Coeffs = x.iter().zip(&want).map(|(p, q)| p - q).collect();
        micro = micro.max(op.nu_norm(&d));
    }
    out.push(CheckRecord::le("collision: L^-1 Gamma of macroscopic pairs (nu norm)", micro, tol.micro_algebra));
    Ok(out)
}

/// Solver benchmarks with known answers, on small grids.
pub fn solver_checks(op: &CollisionOperator) -> Result<Vec<CheckRecord>> {
    let mut out = Vec::new();
    let m = ManufacturedLinear { a: 0.4, b: 0.3, g_res: Resolution { n1: 8, n2: 8, m3: 21 } };
    let (e1, sol) = m.run(0.4, 8)?;
    let (e2, _) = m.run(0.4, 16)?;
    out.push(CheckRecord::le("interior: manufactured error", e2, 1e-5));
    out.push(CheckRecord { name: "interior: temporal order >= 3".into(), value: (e1 / e2).log2(), tol: 3.0, pass: e1 / e2 >= 8.0 });
    out.push(CheckRecord::le("interior: divergence identity", sol.max_div_defect(), 1e-8));
    out.push(CheckRecord::le("interior: pressure gauge", sol.max_gauge_defect(), 1e-8));
    out.push(CheckRecord::le("interior: wall-flux balance", sol.max_flux_defect(), 1e-8));

    let diff = 0.4 * op.transport()?.kappa;
    let (err, still) = heat_benchmark(diff, &HalfLineGrid::new(321, 40.0, 2.0, 2.0)?, 1e-3, 1000)?;
    out.push(CheckRecord::le("viscous: frozen-coefficient heat benchmark", err, 1e-4));
    out.push(CheckRecord { name: "viscous: heat benchmark leaves u at zero".into(), value: f64::from(u8::from(!still)), tol: 0.0, pass: still });

    let vg = VelocityGrid::new(op.basis.max_degree + 2 + op.basis.max_degree % 2, op.basis.max_degree)?;
    let (zeta, zeta0) = (0.5, 1.0);
    let (_, hs) = halfspace_manufactured(op, &vg, zeta, zeta0, HalfSpaceConfig::default())?;
    let (rate, r2) = hs.decay_fit(&vg, 4.0, 16.0)?;
    out.push(CheckRecord { name: "knudsen: manufactured decay rate above zeta".into(), value: rate, tol: zeta, pass: rate > zeta });
    out.push(CheckRecord { name: "knudsen: decay fit R^2".into(), value: r2, tol: 0.99, pass: r2 > 0.99 });
    out.push(CheckRecord::le("knudsen: v3-moment fluxes constant", hs.flux_defect(), 1e-6));
    Ok(out)
}

/// The whole suite for a configuration. Failures are results, not errors;
/// only a configuration that cannot be assembled returns `Err`.
pub fn invariant_suite(cfg: &RunConfig, with_solvers: bool) -> Result<Vec<CheckRecord>> {
    cfg.validate()?;
    let b = &cfg.build;
    let op = collision_operator(&b.collision, b.mode)?;
    let vg = VelocityGrid::new(b.velocity_nodes, b.collision.degree)?;
    let mut out = kinetic_checks(&op, &vg, &cfg.checks, cfg.seed)?;
    if with_solvers {
        out.extend(solver_checks(&op)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.build.collision = CollisionConfig { degree: 6, gamma_degree: 2, ..Default::default() };
        c.build.velocity_nodes = 8;
        c
    }

    #[test]
    fn kinetic_suite_passes_and_negative_control_fails() {
        let c = small();
        let r = invariant_suite(&c, false).unwrap();
        for x in &r {
            assert!(x.pass, "{x:?}");
        }
        let mut broken = c.clone();
        broken.checks.null_space = 1e-30;
        let r = invariant_suite(&broken, false).unwrap();
        let failed: Vec<_> = r.iter().filter(|x| !x.pass).map(|x| x.name.as_str()).collect();
        assert_eq!(failed, ["collision: L annihilates the invariants"]);
    }

    #[test]
    fn bgk_report_hits_its_target() {
        let cfg = CollisionConfig { degree: 6, gamma_degree: 2, ..Default::default() };
        let r = coefficients(&cfg, CollisionMode::Bgk, false).unwrap();
        assert_eq!(r.mode, CollisionMode::Bgk);
        let t = r.calibration_target.unwrap();
        assert!((r.lambda - t).abs() <= 1e-12 * t);
        let h = coefficients(&cfg, CollisionMode::HardSphere, true).unwrap();
        assert!(h.calibration_target.is_none());
        let f = h.refined.unwrap();
        assert_eq!(f.degree, 12);
        assert!(f.rel_delta_lambda < 1e-2 && f.rel_delta_kappa < 1e-2);
        assert!(h.burnett.iter().all(|e| e.defect() < 1e-12));
    }
}
