use hilbert_core::manifest::{Manifest, MANIFEST};
use hilbert_core::ScanReport;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "schema_version = 1
[build]
velocity_nodes = 12
[build.spatial]
n1 = 8
n2 = 4
m3 = 17
[build.time]
horizon = 0.1
[build.layer]
ny = 81
";

fn hilbert(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hilbert"))
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("run hilbert")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn unknown_keys_exit_with_config_code() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), "c.toml", "schema_version = 1\n[build]\nspeed = 3\n");
    let o = hilbert(&cfg, &d.path().join("out"), &["build"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn violated_inequality_is_named() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), "c.toml", "schema_version = 1\n[expansion]\nk0 = 8.0\n");
    let o = hilbert(&cfg, &d.path().join("out"), &["build"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("N >= 2n + k0 - 3"), "{}", stderr(&o));
    assert!(!d.path().join("out").join(MANIFEST).exists());
}

#[test]
fn scan_needs_a_build() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), "c.toml", SMALL);
    let o = hilbert(&cfg, &d.path().join("out"), &["scan"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("run `build` first"), "{}", stderr(&o));
}

#[test]
fn short_epsilon_lists_are_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), "c.toml", &format!("{SMALL}[build.preset]\nkind = \"zero\"\ntheta = 0.0\n"));
    let out = d.path().join("out");
    assert!(hilbert(&cfg, &out, &["build"]).status.success());
    let o = hilbert(&cfg, &out, &["scan", "--epsilon-list", "0.2,0.1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn zero_data_scan_is_exact_zero() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), "c.toml", &format!("{SMALL}[build.preset]\nkind = \"zero\"\ntheta = 0.0\n"));
    let out = d.path().join("out");
    let b = hilbert(&cfg, &out, &["build"]);
    assert!(b.status.success(), "{}", stderr(&b));
    let s = hilbert(&cfg, &out, &["scan"]);
    assert!(s.status.success(), "{}", stderr(&s));
    let r: ScanReport = serde_json::from_str(&fs::read_to_string(out.join("scan.json")).unwrap()).unwrap();
    assert!(r.families.iter().all(|f| f.exact_zero && f.norms.iter().all(|x| *x == 0.0)));
}

#[test]
fn build_scan_report_and_determinism() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_cfg(d.path(), "c.toml", SMALL);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for out in [&a, &b] {
        let o = hilbert(&cfg, out, &["build"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    // a second build into the same directory is refused
    assert_eq!(hilbert(&cfg, &a, &["build"]).status.code(), Some(3));

    let ma = fs::read(a.join(MANIFEST)).unwrap();
    assert_eq!(ma, fs::read(b.join(MANIFEST)).unwrap());
    let m: Manifest = serde_json::from_slice(&ma).unwrap();
    assert!(m.pass);
    for f in &m.fields {
        let stem = f.key.stem();
        let x = fs::read(a.join("arrays").join(format!("{stem}.f64"))).unwrap();
        let y = fs::read(b.join("arrays").join(format!("{stem}.f64"))).unwrap();
        assert_eq!(x, y, "{stem}");
    }

    let s = hilbert(&cfg, &a, &["scan"]);
    assert!(s.status.success(), "{}", stderr(&s));
    let text = fs::read_to_string(a.join("scan.json")).unwrap();
    let r: ScanReport = serde_json::from_str(&text).unwrap();
    assert!(r.pass());
    assert_eq!(serde_json::to_string_pretty(&r).unwrap() + "\n", text);
    let names: Vec<&str> = r.families.iter().map(|f| f.name.as_str()).collect();
    assert_eq!(names, ["interior", "viscous-bottom", "viscous-top", "knudsen-bottom", "knudsen-top"]);

    let rep = hilbert(&cfg, &a, &["report"]);
    assert!(rep.status.success(), "{}", stderr(&rep));
    let csv = fs::read_to_string(a.join("scan.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * r.eps.len());

    // a corrupted array is caught by report
    let first = m.fields[0].key.stem();
    let p = a.join("arrays").join(format!("{first}.f64"));
    let mut bytes = fs::read(&p).unwrap();
    bytes[0] ^= 0x40;
    fs::write(&p, bytes).unwrap();
    assert_eq!(hilbert(&cfg, &a, &["report"]).status.code(), Some(3));
}
