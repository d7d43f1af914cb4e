use std::path::Path;
use std::process::{Command, Output};

const EXACT: &str = r#"
schema_version = 1
scenario = "cli-exact"
seed = 3
reps = 2

[model]
family = "gaussian-linear"
n = 60
p = 2

[truth]
design = "fixed"

[posterior]
mode = "exact"

[audit]
mc_budget = 1000
"#;

// p^3 / n = 1: conditions fail and the run is flagged
const FLAGGED: &str = r#"
schema_version = 1
scenario = "cli-flagged"
seed = 3
reps = 2

[model]
family = "logistic"
n = 27
p = 3

[truth]
design = "gaussian"
coef_norm = 1.0

[posterior]
mode = "sampler"

[posterior.chain]
draws = 2000
burn_in = 5000

[audit]
mc_budget = 1000
"#;

fn bvmlab(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bvmlab"));
    cmd.args(args).env_remove("BVMLAB_THREADS");
    if let Some(t) = threads {
        cmd.env("BVMLAB_THREADS", t);
    }
    cmd.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn run_succeeds_and_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "exact.toml", EXACT);
    let out = tmp.path().join("out");
    let o = bvmlab(&["run", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "summary.txt", "tables/replications.csv", "tables/profile.csv", "tables/checks.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["scenario"], "cli-exact");
    assert!(json.get("budget").is_some() && json.get("bvm").is_some());
}

#[test]
fn seed_override_and_thread_env_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "exact.toml", EXACT);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    assert_eq!(bvmlab(&["run", &cfg, "--seed", "8", "--out", a.to_str().unwrap()], Some("1")).status.code(), Some(0));
    assert_eq!(bvmlab(&["run", &cfg, "--seed", "8", "--out", b.to_str().unwrap()], Some("3")).status.code(), Some(0));
    assert_eq!(bvmlab(&["run", &cfg, "--out", c.to_str().unwrap(), "--threads", "2"], None).status.code(), Some(0));
    let ra = std::fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("report.json")).unwrap());
    assert_ne!(ra, std::fs::read(c.join("report.json")).unwrap());
}

#[test]
fn flagged_run_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "flagged.toml", FLAGGED);
    let out = tmp.path().join("out");
    let o = bvmlab(&["run", &cfg, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("report.json").is_file());
    let o = bvmlab(&["audit", &cfg, "--out", tmp.path().join("audit").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_exits_one_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", &EXACT.replace("n = 60", "n = 60\nbogus = 1"));
    let o = bvmlab(&["run", &cfg, "--out", tmp.path().join("o").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line ") && err.contains("bogus"), "{err}");

    let cfg = write(tmp.path(), "schema.toml", &EXACT.replace("reps = 2", "reps = 0"));
    let o = bvmlab(&["run", &cfg], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("reps"));

    let o = bvmlab(&["run", tmp.path().join("missing.toml").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweeps_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "exact.toml", &EXACT.replace("mode = \"exact\"", "mode = \"exact\"\n[bracketing]\nrd_source = \"fixed\"\nrd = 0.1"));
    let out = tmp.path().join("sweep");
    let o = bvmlab(&["sweep-critical", &cfg, "--ratios", "0.1,0.05", "--reps", "5", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("tables/sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);

    let out = tmp.path().join("prior");
    let o = bvmlab(&["sweep-prior", &cfg, "--g", "0.5,2", "--reps", "5", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("tables/prior_sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}
