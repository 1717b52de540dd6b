use std::path::{Path, PathBuf};
use std::process::Command;

fn stlasso(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_stlasso")).args(args).current_dir(cwd).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn schema_validator() -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/fit_result.schema.json");
    let schema: serde_json::Value = serde_json::from_slice(&read(path)).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(stlasso(&["fit", "--no-such-flag"], dir.path()).0, 2);
    assert_eq!(stlasso(&["frobnicate"], dir.path()).0, 2);
    assert_eq!(stlasso(&[], dir.path()).0, 2);
    let (code, err) = stlasso(&["fit", "--panel", "missing.csv"], dir.path());
    assert_eq!(code, 2, "{err}");
    std::fs::write(dir.path().join("bad.toml"), "lags = 0\n").unwrap();
    assert_eq!(stlasso(&["--config", "bad.toml", "simulate"], dir.path()).0, 2);
    assert_eq!(stlasso(&["--help"], dir.path()).0, 0);
}

#[test]
fn computational_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    // one time point leaves no observation after the first lag
    std::fs::write(dir.path().join("tiny.csv"), "t,location,y\n0,0,1\n0,1,2\n").unwrap();
    let (code, err) = stlasso(&["fit", "--panel", "tiny.csv", "--out", "o"], dir.path());
    assert_eq!(code, 1, "{err}");
    assert!(err.starts_with("error:"), "{err}");
}

#[test]
fn simulate_then_fit_validates_against_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        let (code, err) = stlasso(&["simulate", "--side", "2", "--T", "50", "--seed", "7", "--out", out], d);
        assert_eq!(code, 0, "{err}");
    }
    for f in ["panel.csv", "truth.json", "manifest.json"] {
        assert_eq!(read(d.join("a").join(f)), read(d.join("b").join(f)), "{f}");
    }
    let (code, err) = stlasso(&["fit", "--panel", "a/panel.csv", "--lambda", "0.1", "--out", "f"], d);
    assert_eq!(code, 0, "{err}");
    let fit: serde_json::Value = serde_json::from_slice(&read(d.join("f/fit.json"))).unwrap();
    let validator = schema_validator();
    let errors: Vec<String> = validator.iter_errors(&fit).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    // the schema is not vacuous
    let mut broken = fit.clone();
    broken["schema_version"] = 2.into();
    assert!(!validator.is_valid(&broken));
    let mut broken = fit.clone();
    broken["w"][1] = (-0.5).into();
    assert!(!validator.is_valid(&broken));

    let manifest: serde_json::Value = serde_json::from_slice(&read(d.join("f/manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "fit");
    assert_eq!(manifest["outputs"][0]["file"], "fit.json");
    assert_eq!(manifest["config"]["penalty"]["lambda2"], 0.1);

    let (code, err) = stlasso(&["check", "--params", "a/truth.json", "--out", "c"], d);
    assert_eq!(code, 0, "{err}");
    let check: serde_json::Value = serde_json::from_slice(&read(d.join("c/check.json"))).unwrap();
    assert_eq!(check["stationary"], true);
    assert_eq!(check["feasible"], true);
}

#[test]
fn config_file_drives_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("cfg")).unwrap();
    std::fs::write(d.join("cfg/run.toml"), "seed = 3\nout = \"../sim\"\n[dgp]\nside = 3\nT = 30\n").unwrap();
    let (code, err) = stlasso(&["--config", "cfg/run.toml", "simulate"], d);
    assert_eq!(code, 0, "{err}");
    let panel = stlasso::io::read_panel(read(d.join("sim/panel.csv")).as_slice()).unwrap();
    assert_eq!((panel.n(), panel.t()), (9, 30));
    // flags override the file
    let (code, _) = stlasso(&["--config", "cfg/run.toml", "--seed", "4", "--out", "s4", "simulate"], d);
    assert_eq!(code, 0);
    assert_ne!(read(d.join("sim/panel.csv")), read(d.join("s4/panel.csv")));
}
