//! Fixtures shared by the benchmarks.

use hilbert_core::collision::CollisionConfig;
use hilbert_core::spectral::{Resolution, SpatialGrid};
use hilbert_core::{Coeffs, CollisionOperator, MacroState, VelocityGrid};

pub fn operator(degree: usize, gamma_degree: usize) -> CollisionOperator {
    CollisionOperator::assemble(&CollisionConfig { degree, gamma_degree, ..Default::default() }).expect("assembles")
}

pub fn velocity_grid(op: &CollisionOperator) -> VelocityGrid {
    let d = op.basis.max_degree;
    VelocityGrid::new(d + 2 + d % 2, d).expect("valid grid")
}

pub fn grid(n: usize, m3: usize) -> SpatialGrid {
    SpatialGrid::new(Resolution { n1: n, n2: n, m3 }).expect("valid resolution")
}

/// A microscopic right-hand side: `(I - P)` of a smooth non-Maxwellian.
pub fn micro_rhs(op: &CollisionOperator) -> Coeffs {
    let a = hilbert_core::velocity::modal::maxwellian(&op.basis, &MacroState::new(0.3, [0.2, -0.1, 0.4], 0.5));
    op.apply_gamma_sym(&a, &a).expect("quadratic term")
}
