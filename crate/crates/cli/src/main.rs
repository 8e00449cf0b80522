use clap::{Parser, Subcommand, ValueEnum};
use hilbert_core::manifest::{
    load_manifest, matches_stored, persist_build, Manifest, VolatileRecord, SCAN_REPORT, VOLATILE,
};
use hilbert_core::orchestrator::CheckRecord;
use hilbert_core::suite::{coefficients, invariant_suite};
use hilbert_core::{build_expansion, order_scan, ArtifactStore, CollisionMode, Error, RunConfig, ScanReport};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

const EXIT_INVARIANT: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_SOLVER: u8 = 4;

#[derive(Parser)]
#[command(name = "hilbert", version, about = "Multi-scale Hilbert expansion in a specular channel")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output` in the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Collision model.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    HardSphere,
    Bgk,
}

#[derive(Subcommand)]
enum Command {
    /// Transport coefficients, Burnett table and coercivity of the operator.
    Coefficients {
        /// Repeat at twice the Hermite degree and report the relative change.
        #[arg(long)]
        refine: bool,
    },
    /// Build the expansion and store its fields.
    Build,
    /// Residual order scan on the stored build.
    Scan {
        /// Comma-separated eps values.
        #[arg(long, value_delimiter = ',')]
        epsilon_list: Option<Vec<f64>>,
    },
    /// Run the invariant suite (plus the stored build's checks, if any).
    Check,
    /// Summarize the stored build and scan; writes plot-ready CSV.
    Report,
}

enum Failure {
    Invariant(String),
    Config(String),
    Solver(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Invariant(_) => Failure::Invariant(e.to_string()),
            Error::Solver(_) => Failure::Solver(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = cli.mode {
        cfg.build.mode = match m {
            Mode::HardSphere => CollisionMode::HardSphere,
            Mode::Bgk => CollisionMode::Bgk,
        };
    }
    if let Some(o) = &cli.out {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| PathBuf::from("hilbert-out"))
}

fn print_checks(checks: &[CheckRecord]) {
    for c in checks {
        println!("{:<4} {:<62} {:>12.4e}  tol {:.1e}", if c.pass { "ok" } else { "FAIL" }, c.name, c.value, c.tol);
    }
}

fn failed(checks: &[CheckRecord]) -> Vec<String> {
    checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect()
}

fn cmd_coefficients(cfg: &RunConfig, refine: bool) -> Outcome {
    cfg.validate()?;
    let r = coefficients(&cfg.build.collision, cfg.build.mode, refine)?;
    println!("mode {:?}, degree {}", r.mode, r.degree);
    println!("lambda = {:.10}", r.lambda);
    println!("kappa  = {:.10}", r.kappa);
    if let Some(t) = r.calibration_target {
        println!("calibration target lambda = {t:.10} (delta {:.2e})", (r.lambda - t).abs());
    }
    println!("<A11, L^-1 A11> = {:.10} (4 lambda / 3 = {:.10})", r.a11_pairing, 4.0 * r.lambda / 3.0);
    println!("coercivity c0 = {:.6}", r.coercivity);
    println!("{:<10} {:>16} {:>10} {:>10}", "pair", "value", "exact", "defect");
    for e in &r.burnett {
        println!("{:<10} {:>16.12} {:>10.6} {:>10.2e}", e.pair, e.value, e.exact, e.defect());
    }
    if let Some(f) = &r.refined {
        println!(
            "refined degree {}: lambda {:.10} (rel delta {:.2e}), kappa {:.10} (rel delta {:.2e})",
            f.degree, f.lambda, f.rel_delta_lambda, f.kappa, f.rel_delta_kappa
        );
    }
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    let store = ArtifactStore::open(&dir)?;
    store.write_json("coefficients.json", &r)?;
    Ok(())
}

fn cmd_build(cfg: &RunConfig) -> Outcome {
    cfg.validate()?;
    let dir = out_dir(cfg);
    let mut store = ArtifactStore::open(&dir)?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let t0 = Instant::now();
    let exp = build_expansion(&cfg.expansion, &cfg.build)?;
    let m = persist_build(&exp, cfg, &mut store)?;
    store.write_json(
        VOLATILE,
        &VolatileRecord {
            started_unix: started,
            build_seconds: t0.elapsed().as_secs_f64(),
            program: format!("hilbert {}", env!("CARGO_PKG_VERSION")),
        },
    )?;
    for k in &m.knudsen {
        println!("fhat{} ({}): {}", k.order, k.wall, k.marker);
    }
    print_checks(&m.checks);
    println!("{} arrays stored in {}", m.fields.len(), dir.display());
    let bad = failed(&m.checks);
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(format!("failed checks: {}", bad.join("; "))))
    }
}

fn print_scan(r: &ScanReport) {
    println!("t = {}, eps = {:?}", r.time, r.eps);
    println!("{:<16} {:>10} {:>10} {:>6}  norms", "family", "slope", "predicted", "pass");
    for f in &r.families {
        let slope = match (f.exact_zero, f.slope) {
            (true, _) => "zero".to_string(),
            (false, Some(s)) => format!("{s:.4}"),
            (false, None) => "n/a".to_string(),
        };
        let norms: Vec<String> = f.norms.iter().map(|x| format!("{x:.3e}")).collect();
        println!("{:<16} {:>10} {:>10.2} {:>6}  {}", f.name, slope, f.predicted, f.pass, norms.join(" "));
    }
    if r.truncated > 0.0 {
        println!("layer content above the quadratic input degree: {:.3e}", r.truncated);
    }
}

fn open_build(cfg: &RunConfig) -> Result<(ArtifactStore, Manifest), Failure> {
    let dir = out_dir(cfg);
    if !dir.exists() {
        return Err(Failure::Config(format!("no build found in {} (run `build` first)", dir.display())));
    }
    let store = ArtifactStore::open(&dir)?;
    let m = load_manifest(&store)?;
    Ok((store, m))
}

fn cmd_scan(cfg: &RunConfig, eps: Option<Vec<f64>>) -> Outcome {
    let (store, m) = open_build(cfg)?;
    // the stored build's configuration decides what is rebuilt
    let bcfg = &m.config;
    let exp = build_expansion(&bcfg.expansion, &bcfg.build)?;
    matches_stored(&exp, &m)?;
    let eps = eps.unwrap_or_else(|| bcfg.scan.eps.clone());
    let t = bcfg.scan.time.unwrap_or_else(|| exp.mid_time());
    let r = order_scan(&exp, &eps, t)?;
    store.write_json(SCAN_REPORT, &r)?;
    print_scan(&r);
    if r.pass() {
        Ok(())
    } else {
        let bad: Vec<&str> = r.families.iter().filter(|f| !f.pass).map(|f| f.name.as_str()).collect();
        Err(Failure::Invariant(format!("slope below prediction - {}: {}", r.tolerance, bad.join(", "))))
    }
}

fn cmd_check(cfg: &RunConfig) -> Outcome {
    let mut checks = invariant_suite(cfg, true)?;
    let dir = out_dir(cfg);
    if dir.join(hilbert_core::manifest::MANIFEST).exists() {
        let store = ArtifactStore::open(&dir)?;
        let m = load_manifest(&store)?;
        checks.extend(m.checks.iter().map(|c| CheckRecord { name: format!("build: {}", c.name), ..c.clone() }));
        let verified = store.verify_all();
        checks.push(CheckRecord {
            name: "store: arrays re-verify against their sidecars".into(),
            value: f64::from(u8::from(verified.is_err())),
            tol: 0.0,
            pass: verified.is_ok(),
        });
    }
    print_checks(&checks);
    if dir.exists() {
        ArtifactStore::open(&dir)?.write_json("check.json", &checks)?;
    }
    let bad = failed(&checks);
    if bad.is_empty() {
        println!("all {} checks pass", checks.len());
        Ok(())
    } else {
        Err(Failure::Invariant(format!("{} of {} checks failed: {}", bad.len(), checks.len(), bad.join("; "))))
    }
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn cmd_report(cfg: &RunConfig) -> Outcome {
    let (store, m) = open_build(cfg)?;
    let n = store.verify_all()?;
    println!("build: {} arrays verified, grid {}, operator {}", n, m.grid_hash, m.operator_id);
    println!("lambda {:.10}, kappa {:.10}", m.transport.lambda, m.transport.kappa);
    println!(
        "parameters: n = {}, N = {}, b = {}, full convergence hypotheses: {}",
        m.config.expansion.n, m.config.expansion.order, m.config.expansion.taylor, m.parameter_report.theorem_scale
    );
    for k in &m.knudsen {
        println!("fhat{} ({}): {}, mismatch {:.2e}", k.order, k.wall, k.marker, k.mismatch_max);
    }
    print_checks(&m.checks);
    let mut csv = String::from("t,c1,c2\n");
    for (i, t) in m.times.iter().enumerate() {
        csv.push_str(&format!("{t},{},{}\n", m.pressures.c1[i], m.pressures.c2[i]));
    }
    write_text(&store.root().join("pressures.csv"), &csv)?;
    let mut pass = m.pass;
    if store.root().join(SCAN_REPORT).exists() {
        let r: ScanReport = store.read_json(SCAN_REPORT)?;
        print_scan(&r);
        let mut csv = String::from("family,eps,norm,slope,predicted,pass\n");
        for f in &r.families {
            for (e, x) in r.eps.iter().zip(&f.norms) {
                let s = f.slope.map_or(String::new(), |s| s.to_string());
                csv.push_str(&format!("{},{e},{x},{s},{},{}\n", f.name, f.predicted, f.pass));
            }
        }
        write_text(&store.root().join("scan.csv"), &csv)?;
        pass &= r.pass();
    } else {
        println!("no scan report yet");
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::Invariant("the stored build or scan has failures".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = load_config(&cli).and_then(|cfg| match &cli.cmd {
        Command::Coefficients { refine } => cmd_coefficients(&cfg, *refine),
        Command::Build => cmd_build(&cfg),
        Command::Scan { epsilon_list } => cmd_scan(&cfg, epsilon_list.clone()),
        Command::Check => cmd_check(&cfg),
        Command::Report => cmd_report(&cfg),
    });
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_INVARIANT)
        }
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Solver(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_SOLVER)
        }
    }
}
