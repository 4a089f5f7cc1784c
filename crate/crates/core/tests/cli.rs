use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stabxform"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg("run")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

const HALFSPEED: &str = r#"
pipeline = "ugas2uges"
[system]
catalog = "halfspeed_1d"
[overrides]
gamma = "identity"
"#;

#[test]
fn halfspeed_run_passes_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "halfspeed.toml", HALFSPEED);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = run(&cfg, &a, &["--signals", "12", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(a.join("report.txt")).unwrap();
    assert!(report.contains("UGES: PASS"));
    assert!(a.join("change_table.csv").exists());
    let trajs: Vec<_> = fs::read_dir(a.join("trajectories")).unwrap().collect();
    assert_eq!(trajs.len(), 12);

    assert_eq!(run(&cfg, &b, &["--signals", "12", "--seed", "7"]).status.code(), Some(0));
    for rel in ["report.txt", "change_table.csv", "trajectories/traj_000.csv", "trajectories/traj_011.csv"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }

    // change table reproduces T(x) = sign(x) x^2
    let table = fs::read_to_string(a.join("change_table.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("x1,y1"));
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        assert!((v[1] - v[0].signum() * v[0] * v[0]).abs() <= 1e-6 * (1.0 + v[0] * v[0]), "{line}");
    }
}

#[test]
fn rerun_with_fewer_signals_drops_stale_trajectories() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "h.toml", HALFSPEED);
    let out = tmp.path().join("o");
    assert_eq!(run(&cfg, &out, &["--signals", "6"]).status.code(), Some(0));
    assert_eq!(run(&cfg, &out, &["--signals", "3"]).status.code(), Some(0));
    assert_eq!(fs::read_dir(out.join("trajectories")).unwrap().count(), 3);
}

#[test]
fn wrong_rate_fails_the_check() {
    // y' = -y checked against e^{-2t}
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "fast.toml", &format!("{HALFSPEED}lambda = 2.0\n"));
    let out = run(&cfg, &tmp.path().join("o"), &["--signals", "4"]);
    assert_eq!(out.status.code(), Some(2));
    let report = fs::read_to_string(tmp.path().join("o/report.txt")).unwrap();
    assert!(report.contains("UGES: FAIL"));
    assert!(report.contains("# OVERALL: FAIL"));
}

#[test]
fn integral_reparametrization_restores_unit_rate() {
    // x' = -x/4, V = x^2 decays at rate 1/2; W = rho(V) brings it back to 1
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "slow.toml",
        r#"
pipeline = "ugas2uges"
[system]
rhs = ["-x1/4"]
[certificate]
v = "x1^2"
decay = "s^2/2"
lower = "s^2"
upper = "s^2"
[overrides]
gamma = "s"
alpha4 = "integral"
"#,
    );
    let out = run(&cfg, &tmp.path().join("o"), &["--signals", "6"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn iss2ises_without_gain_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "nogain.toml",
        r#"
pipeline = "iss2ises"
[system]
rhs = ["-x1 + d1"]
inputs = 1
disturbance_radius = 1.0
[certificate]
v = "x1^2/2"
decay = "s^2/2"
"#,
    );
    let out = run(&cfg, &tmp.path().join("o"), &[]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iss_gain"));
}

#[test]
fn cubic_flow_normal_form_is_a_construction_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "cubic.toml",
        "pipeline = \"flownorm\"\n[system]\ncatalog = \"cubic_1d\"\n",
    );
    let out = run(&cfg, &tmp.path().join("o"), &["--signals", "2"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_problems_exit_4() {
    let tmp = TempDir::new().unwrap();
    let missing = run(&tmp.path().join("absent.toml"), &tmp.path().join("o"), &[]);
    assert_eq!(missing.status.code(), Some(4));
    let cfg = write_config(tmp.path(), "bad.toml", "pipeline = \"ugas2uges\"\n[system]\nrhs = [\"-x1 +\"]\n");
    assert_eq!(run(&cfg, &tmp.path().join("o"), &[]).status.code(), Some(4));
    let unknown = bin().arg("frobnicate").output().unwrap();
    assert_eq!(unknown.status.code(), Some(4));
}

#[test]
fn list_outputs() {
    let human = bin().arg("list").output().unwrap();
    assert_eq!(human.status.code(), Some(0));
    let text = String::from_utf8(human.stdout).unwrap();
    for name in ["halfspeed_1d", "cubic_1d", "iss_scalar"] {
        assert!(text.contains(name), "{name}");
    }
    let machine = bin().args(["list", "--machine"]).output().unwrap();
    let text = String::from_utf8(machine.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0][0], "name");
    assert!(rows.iter().all(|r| r.len() == rows[0].len()));
    assert!(rows.iter().any(|r| r[0] == "iss_scalar" && r[4] == "yes"));
}
