//! Multi-scale Hilbert expansion for the Boltzmann equation in a channel
//! `T^2 x [0,1]` with specular walls: interior fluid orders, viscous layers,
//! Knudsen layers and the residual-order harness.

pub mod benchmarks;
pub mod collision;
pub mod config;
pub mod error;
pub mod euler;
pub mod hermite;
pub mod knudsen;
pub mod manifest;
pub mod orchestrator;
pub mod quadrature;
pub mod spectral;
pub mod store;
pub mod suite;
pub mod velocity;
pub mod viscous;

pub use error::{Error, Result};
pub use velocity::{Burnett, Coeffs, KineticFunction, MacroState, Moments, VelocityGrid};
pub use collision::{CollisionConfig, CollisionMode, CollisionOperator, TransportCoefficients};
pub use config::RunConfig;
pub use orchestrator::{build_expansion, order_scan, BuildSettings, ExpansionParameters, ExpansionSet, ScanReport};
pub use store::ArtifactStore;
