//! Persisting a build: field arrays in the store plus a deterministic manifest.

use crate::collision::TransportCoefficients;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::orchestrator::{
    CheckRecord, DependencyLog, ExpansionSet, HalfSpaceProbe, KnudsenData, ParameterReport, PressureRecord, ScanReport,
};
use crate::store::{sha256_hex, ArtifactKey, ArtifactStore};
use crate::velocity::modal;
use crate::viscous::WallSide;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const VOLATILE: &str = "manifest.volatile.json";
pub const SCAN_REPORT: &str = "scan.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldEntry {
    pub key: ArtifactKey,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KnudsenSummary {
    pub wall: String,
    pub order: usize,
    /// `zero` when the layer vanishes identically.
    pub marker: String,
    pub mismatch_max: f64,
    pub solvability_max: f64,
    pub corrector_max: f64,
    pub probe: Option<HalfSpaceProbe>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: RunConfig,
    pub parameter_report: ParameterReport,
    pub transport: TransportCoefficients,
    pub grid_hash: String,
    pub operator_id: String,
    pub times: Vec<f64>,
    pub fields: Vec<FieldEntry>,
    pub knudsen: Vec<KnudsenSummary>,
    pub pressures: PressureRecord,
    pub checks: Vec<CheckRecord>,
    pub dependencies: DependencyLog,
    pub pass: bool,
}

/// Timestamps and durations, kept out of the manifest so that it is
/// reproducible byte for byte.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolatileRecord {
    pub started_unix: u64,
    pub build_seconds: f64,
    pub program: String,
}

pub struct FieldArray {
    pub key: ArtifactKey,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub op: &'static str,
}

fn short(s: &str) -> String {
    sha256_hex(s.as_bytes())[..16].to_string()
}

pub fn grid_hash(exp: &ExpansionSet) -> String {
    short(&format!(
        "spatial {:?}; layer {:?}; velocity {}; halfspace {:?}",
        exp.grid.res,
        exp.settings.layer,
        exp.vgrid.hash(),
        exp.knudsen[0][0].grid.eta.len()
    ))
}

pub fn operator_id(exp: &ExpansionSet) -> String {
    short(&format!("{:?} {:?}", exp.op.mode, exp.op.config()))
}

fn wall_label(s: WallSide) -> &'static str {
    s.label()
}

/// Every array a build stores, in a fixed order.
pub fn field_arrays(exp: &ExpansionSet) -> Vec<FieldArray> {
    let g = &exp.grid;
    let (n1, n2, m3) = (g.res.n1, g.res.n2, g.res.m3);
    let vol = vec![n1, n2, m3];
    let mut out = Vec::new();
    let mut push = |key: ArtifactKey, shape: Vec<usize>, data: Vec<f64>, op: &'static str| {
        out.push(FieldArray { key, shape, data, op });
    };
    push(ArtifactKey::new("grid", "x3", 0), vec![m3], g.x3.clone(), "grid");
    push(ArtifactKey::new("grid", "y", 0), vec![exp.layer_grid.len()], exp.layer_grid.y.clone(), "grid");
    push(ArtifactKey::new("grid", "eta", 0), vec![exp.knudsen[0][0].grid.len()], exp.knudsen[0][0].grid.eta.clone(), "grid");
    push(ArtifactKey::new("grid", "t", 0), vec![exp.times().len()], exp.times().to_vec(), "grid");
    let lin = &exp.interior[0];
    for k in 0..exp.times().len() {
        let s = &exp.euler.states[2 * k];
        push(ArtifactKey::new("interior", "theta", 0).at(k), vol.clone(), s.theta.clone(), "euler0");
        for (c, name) in ["u1", "u2", "u3"].iter().enumerate() {
            push(ArtifactKey::new("interior", name, 0).at(k), vol.clone(), s.u[c].clone(), "euler0");
        }
        push(ArtifactKey::new("interior", "p1", 0).at(k), vol.clone(), exp.euler.p1[2 * k].clone(), "euler0");
        push(ArtifactKey::new("interior", "rho", 1).at(k), vol.clone(), lin.rho[k].clone(), "linearized-euler");
        for (c, name) in ["u1", "u2", "u3"].iter().enumerate() {
            push(ArtifactKey::new("interior", name, 1).at(k), vol.clone(), lin.u[k][c].clone(), "linearized-euler");
        }
        push(ArtifactKey::new("interior", "theta", 1).at(k), vol.clone(), lin.theta[k].clone(), "linearized-euler");
        push(ArtifactKey::new("interior", "p", 1).at(k), vol.clone(), lin.p[k].clone(), "linearized-euler");
    }
    // microscopic part of f_1 at the final time, in Hermite coefficients
    let last = exp.times().len() - 1;
    let b = &exp.op.basis;
    let mut micro = Vec::with_capacity(g.len() * b.len());
    for i in 0..g.len() {
        let s0 = exp.state0(last, i);
        micro.extend(modal::micro_quadratic(b, &s0, &s0).iter().map(|x| 0.5 * x));
    }
    push(
        ArtifactKey::new("interior", "micro", 1).at(last),
        vec![n1, n2, m3, b.len()],
        micro,
        "micro-quadratic",
    );
    for (order, pair) in exp.layers.iter().enumerate() {
        for layer in pair {
            let w = wall_label(layer.side);
            let shape = vec![n1, n2, layer.ny];
            for k in 0..layer.times.len() {
                for (c, name) in ["u1", "u2"].iter().enumerate() {
                    push(ArtifactKey::new("viscous", name, order + 1).wall(w).at(k), shape.clone(), layer.u[k][c].clone(), "viscous-layer");
                }
                push(ArtifactKey::new("viscous", "theta", order + 1).wall(w).at(k), shape.clone(), layer.theta[k].clone(), "viscous-layer");
            }
        }
    }
    let p = &exp.pressures;
    push(ArtifactKey::new("pressure", "c1", 1), vec![p.c1.len()], p.c1.clone(), "pressure-gauge");
    push(ArtifactKey::new("pressure", "c2", 2), vec![p.c2.len()], p.c2.clone(), "pressure-gauge");
    for (order, pair) in exp.knudsen.iter().enumerate() {
        for kl in pair {
            if let KnudsenData::Sampled { values, .. } = &kl.field {
                let w = wall_label(kl.side);
                for (k, slab) in values.iter().enumerate() {
                    let nm = slab.first().and_then(|c| c.first()).map_or(0, |c| c.len());
                    let data: Vec<f64> = slab.iter().flatten().flatten().copied().collect();
                    push(
                        ArtifactKey::new("knudsen", "f", order + 1).wall(w).at(k),
                        vec![n1, n2, kl.grid.len(), nm],
                        data,
                        "half-space",
                    );
                }
            }
        }
    }
    out
}

fn encode_hash(data: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(8 * data.len());
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    sha256_hex(&bytes)
}

pub fn manifest_of(exp: &ExpansionSet, cfg: &RunConfig) -> Manifest {
    let fields = field_arrays(exp)
        .into_iter()
        .map(|f| FieldEntry { sha256: encode_hash(&f.data), key: f.key, shape: f.shape })
        .collect();
    let knudsen = exp
        .knudsen
        .iter()
        .flatten()
        .map(|kl| KnudsenSummary {
            wall: wall_label(kl.side).into(),
            order: kl.order,
            marker: match kl.field {
                KnudsenData::Zero => "zero".into(),
                KnudsenData::Sampled { .. } => "sampled".into(),
            },
            mismatch_max: kl.mismatch_max,
            solvability_max: kl.solvability_max,
            corrector_max: kl.corrector_max,
            probe: kl.probe.clone(),
        })
        .collect();
    // where the build was written is not part of what was built
    let mut config = cfg.clone();
    config.output = None;
    Manifest {
        schema_version: cfg.schema_version,
        config,
        parameter_report: exp.parameter_report.clone(),
        transport: exp.transport,
        grid_hash: grid_hash(exp),
        operator_id: operator_id(exp),
        times: exp.times().to_vec(),
        fields,
        knudsen,
        pressures: exp.pressures.clone(),
        checks: exp.checks.clone(),
        dependencies: exp.dependencies.clone(),
        pass: exp.all_checks_pass(),
    }
}

/// Store every field array and write the manifest.
pub fn persist_build(exp: &ExpansionSet, cfg: &RunConfig, store: &mut ArtifactStore) -> Result<Manifest> {
    if store.root().join(MANIFEST).exists() || !store.is_empty() {
        return Err(Error::Store(format!("{} already holds a build", store.root().display())));
    }
    let gh = grid_hash(exp);
    let op = operator_id(exp);
    for f in field_arrays(exp) {
        store.put(f.key, &f.shape, &f.data, &gh, &format!("{}@{op}", f.op))?;
    }
    let m = manifest_of(exp, cfg);
    store.write_json(MANIFEST, &m)?;
    Ok(m)
}

/// Check that a rebuilt expansion reproduces the stored arrays exactly.
pub fn matches_stored(exp: &ExpansionSet, manifest: &Manifest) -> Result<()> {
    let fresh = manifest_of(exp, &manifest.config);
    if fresh.fields.len() != manifest.fields.len() {
        return Err(Error::Invariant("rebuilt expansion has a different set of fields".into()));
    }
    for (a, b) in fresh.fields.iter().zip(&manifest.fields) {
        if a.key != b.key || a.sha256 != b.sha256 || a.shape != b.shape {
            return Err(Error::Invariant(format!("rebuilt field {} differs from the stored one", b.key.stem())));
        }
    }
    Ok(())
}

pub fn load_manifest(store: &ArtifactStore) -> Result<Manifest> {
    if !store.root().join(MANIFEST).exists() {
        return Err(Error::Store(format!("no build found in {} (run `build` first)", store.root().display())));
    }
    store.read_json(MANIFEST)
}

pub fn load_scan(store: &ArtifactStore) -> Result<ScanReport> {
    store.read_json(SCAN_REPORT)
}
