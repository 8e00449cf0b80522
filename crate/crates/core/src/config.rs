//! Run configuration (TOML, schema-versioned, unknown keys rejected).

use crate::error::{Error, Result};
use crate::orchestrator::{BuildSettings, ExpansionParameters, ParameterReport};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub eps: Vec<f64>,
    /// Scan time; the middle stored time when absent.
    pub time: Option<f64>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig { eps: vec![0.2, 0.1, 0.05, 0.025], time: None }
    }
}

/// Tolerances of the invariant suite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckTolerances {
    pub burnett: f64,
    pub null_space: f64,
    pub symmetry: f64,
    pub projection: f64,
    pub micro_algebra: f64,
    pub viscosity_pairing: f64,
    pub refinement: f64,
}

impl Default for CheckTolerances {
    fn default() -> Self {
        CheckTolerances {
            burnett: 1e-8,
            null_space: 1e-6,
            symmetry: 1e-8,
            projection: 1e-10,
            micro_algebra: 1e-6,
            viscosity_pairing: 1e-4,
            refinement: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub expansion: ExpansionParameters,
    #[serde(default)]
    pub build: BuildSettings,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub checks: CheckTolerances,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Seed of the random samples drawn by the check suite.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    20240917
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            expansion: ExpansionParameters::default(),
            build: BuildSettings::default(),
            scan: ScanConfig::default(),
            checks: CheckTolerances::default(),
            output: None,
            seed: default_seed(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Structural checks that need no solve, including the parameter inequalities.
    pub fn validate(&self) -> Result<ParameterReport> {
        let report = self.expansion.validate()?;
        let eps = &self.scan.eps;
        if eps.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(Error::Config("scan.eps values must lie in (0, 1]".into()));
        }
        let b = &self.build;
        if b.velocity_nodes <= b.collision.degree || b.velocity_nodes % 2 == 1 {
            return Err(Error::Config(format!(
                "build.velocity_nodes = {} must be even and exceed the degree {}",
                b.velocity_nodes, b.collision.degree
            )));
        }
        if b.collision.gamma_degree > b.collision.degree {
            return Err(Error::Config("build.collision.gamma_degree exceeds degree".into()));
        }
        for (name, t) in [
            ("compatibility", b.tolerances.compatibility),
            ("divergence", b.tolerances.divergence),
            ("solvability", b.tolerances.solvability),
            ("mismatch", b.tolerances.mismatch),
        ] {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::Config(format!("build.tolerances.{name} must be a nonnegative number")));
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::CollisionMode;

    #[test]
    fn default_roundtrips() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.to_toml().unwrap(), text);
        back.validate().unwrap();
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = RunConfig::from_toml(
            "schema_version = 1\n[build]\nmode = \"bgk\"\n[build.collision]\ndegree = 6\n[build.preset]\nkind = \"zero\"\ntheta = 0.0\n",
        )
        .unwrap();
        assert_eq!(c.build.mode, CollisionMode::Bgk);
        assert_eq!(c.build.collision.degree, 6);
        assert_eq!(c.build.collision.gamma_degree, 4);
        assert_eq!(c.scan.eps.len(), 4);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(matches!(RunConfig::from_toml("schema_version = 1\nbogus = 2\n"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("schema_version = 1\n[build.layer]\nny = 10\nwidth = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_toml("schema_version = 2\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[build]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_inequalities_are_checked() {
        let c = RunConfig::from_toml("schema_version = 1\n[expansion]\nk0 = 8.0\n").unwrap();
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("N >= 2n + k0 - 3"), "{e}");
    }
}
