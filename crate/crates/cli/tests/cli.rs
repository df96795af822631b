use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

/// Double integrator pushed toward `x₁ ≤ 0.3` by a linear cost.
fn config(w: f64) -> Value {
    json!({
        "system": { "a": [[1.0, 0.1], [0.0, 1.0]], "b": [[0.005], [0.1]], "d": [[1.0, 0.0], [0.0, 1.0]], "x0": [0.0, 0.0] },
        "disturbance": { "distribution": "uniform", "lower": [-w, -w], "upper": [w, w] },
        "constraints": { "h_x": [[1.0, 0.0]], "rhs_x": [0.3], "p": [0.6], "h_u": [[1.0], [-1.0]], "rhs_u": [1.0, 1.0] },
        "cost": { "q": [[1.0, 0.0], [0.0, 1.0]], "r": [[0.1]], "q_lin": [-2.0, 0.0] },
        "controllers": [
            { "name": "IF", "kind": "if", "N": 8 },
            { "name": "MS", "kind": "ms", "N": 8, "M": 2 },
            { "name": "RS", "kind": "rs", "N": 8 }
        ],
        "baselines": [ { "name": "LQR", "gain": { "lqr": {} } } ],
        "reference": "LQR",
        "sweep": { "M": [1, "inf"], "N": 8, "gain": { "lqr": {} } },
        "tightening": { "N_s": 2000, "delta": 0.001, "seed": 3 },
        "experiment": { "T": 40, "realizations": 3, "window": [0, 39], "seed": 1 },
        "output": { "dir": "out", "formats": ["json", "csv", "svg"] }
    })
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, cfg: &Value) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_smpc"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("SMPC_JOBS")
            .output()
            .unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn avg_cost(report: &Value, name: &str) -> f64 {
    report["controllers"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == name)
        .unwrap_or_else(|| panic!("no entry {name}"))["avg_cost"]
        .as_f64()
        .unwrap()
}

#[test]
fn design_without_disturbance_has_zero_tightening() {
    let ws = Workspace::new();
    let cfg = ws.write("zero.json", &config(0.0));
    let o = ws.run(&["design", "--config", cfg.to_str().unwrap(), "--out", "d"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let art = read_json(&ws.path("d/design.json"));
    for tube in art["tubes"].as_array().unwrap() {
        for key in ["gamma", "beta"] {
            let prof = &tube[key];
            let vals = prof["prefix"].as_array().unwrap().iter().chain(prof["saturation"].as_array().unwrap());
            assert!(vals.map(|v| v.as_f64().unwrap()).all(|v| v == 0.0), "{key}");
        }
    }
    assert!(art["controllers"].as_array().unwrap().iter().all(|c| c["feasible"] == true));
}

#[test]
fn infeasible_design_exits_with_2() {
    let ws = Workspace::new();
    let cfg = ws.write("wide.json", &config(0.03));
    let o = ws.run(&["design", "--config", cfg.to_str().unwrap(), "--out", "d"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("INFEASIBLE"));
    assert!(ws.path("d/design.json").exists());
    let o = ws.run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "s"]);
    assert_eq!(code(&o), 2);
    assert!(!ws.path("s/report.json").exists());
}

#[test]
fn configuration_errors_exit_with_4() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["design", "--config", "missing.json"])), 4);

    let mut bad = config(0.01);
    bad["system"]["extra"] = json!(1);
    let p = ws.write("bad.json", &bad);
    assert_eq!(code(&ws.run(&["design", "--config", p.to_str().unwrap()])), 4);

    let mut dims = config(0.01);
    dims["system"]["x0"] = json!([0.0, 0.0, 0.0]);
    let p = ws.write("dims.json", &dims);
    assert_eq!(code(&ws.run(&["design", "--config", p.to_str().unwrap()])), 4);

    assert_eq!(code(&ws.run(&["design", "--no-such-flag"])), 4);
    assert_eq!(code(&ws.run(&["--help"])), 0);
}

#[test]
fn artifact_from_another_configuration_is_refused() {
    let ws = Workspace::new();
    let cfg = ws.write("a.json", &config(0.01));
    assert_eq!(code(&ws.run(&["design", "--config", cfg.to_str().unwrap(), "--out", "d"])), 0);
    let mut other = config(0.01);
    other["constraints"]["p"] = json!([0.7]);
    let other = ws.write("b.json", &other);
    let o = ws.run(&["simulate", "--config", other.to_str().unwrap(), "--artifact", "d/design.json", "--out", "s"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("constraints"), "{}", stderr(&o));

    // Experiment settings are not part of the design.
    let mut rerun = config(0.01);
    rerun["experiment"]["seed"] = json!(17);
    let rerun = ws.write("c.json", &rerun);
    let o = ws.run(&["simulate", "--config", rerun.to_str().unwrap(), "--artifact", "d/design.json", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn simulation_outputs_are_reproducible() {
    let ws = Workspace::new();
    let cfg = ws.write("a.json", &config(0.01));
    let c = cfg.to_str().unwrap();
    for (out, jobs) in [("one", "1"), ("two", "1"), ("three", "3")] {
        let o = ws.run(&["--jobs", jobs, "simulate", "--config", c, "--out", out, "--realizations", "4"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for file in ["report.json", "summary.csv", "realizations.csv", "violation_curve.csv", "violation_curve.svg"] {
        let a = fs::read(ws.path("one").join(file)).unwrap();
        assert_eq!(a, fs::read(ws.path("two").join(file)).unwrap(), "{file}");
        assert_eq!(a, fs::read(ws.path("three").join(file)).unwrap(), "{file}");
    }
    let report = read_json(&ws.path("one/report.json"));
    assert_eq!(report["controllers"].as_array().unwrap().len(), 4);
    let realizations = fs::read_to_string(ws.path("one/realizations.csv")).unwrap();
    assert_eq!(realizations.lines().count(), 1 + 4 * 4);

    let o = ws.run(&["simulate", "--config", c, "--out", "seeded", "--realizations", "4", "--seed", "99"]);
    assert_eq!(code(&o), 0);
    assert_ne!(
        fs::read(ws.path("seeded/report.json")).unwrap(),
        fs::read(ws.path("one/report.json")).unwrap()
    );
}

#[test]
fn sweep_limits_match_rs_and_if() {
    let ws = Workspace::new();
    let cfg = ws.write("a.json", &config(0.01));
    let o = ws.run(&["sweep-m", "--config", cfg.to_str().unwrap(), "--out", "sw"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sweep = read_json(&ws.path("sw/sweep.json"));
    let base = &sweep["baselines"];
    let (rs, if_) = (avg_cost(base, "RS"), avg_cost(base, "IF"));
    assert!((rs - if_).abs() > 1e-3, "limits should differ on this system");
    let point = |m: Value| {
        sweep["points"].as_array().unwrap().iter().find(|p| p["m"] == m).unwrap()["report"]["avg_cost"]
            .as_f64()
            .unwrap()
    };
    assert!((point(json!(1)) - rs).abs() <= 1e-6 * rs.abs());
    assert!((point(json!("inf")) - if_).abs() <= 1e-6 * if_.abs());
    for f in ["sweep.csv", "sweep.svg"] {
        assert!(ws.path("sw").join(f).exists(), "{f}");
    }

    let mut none = config(0.01);
    none.as_object_mut().unwrap().remove("sweep");
    let none = ws.write("none.json", &none);
    assert_eq!(code(&ws.run(&["sweep-m", "--config", none.to_str().unwrap()])), 4);
}

#[test]
fn plot_tightening_writes_tables_and_charts() {
    let ws = Workspace::new();
    let cfg = ws.write("a.json", &config(0.01));
    let o = ws.run(&["plot-tightening", "--config", cfg.to_str().unwrap(), "--out", "p", "--max-index", "20"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(ws.path("p/tightening_tube0.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 21);
    for f in ["tightening_tube0_row0.svg", "gamma_max_tube0.svg"] {
        let svg = fs::read_to_string(ws.path("p").join(f)).unwrap();
        assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"), "{f}");
        assert!(svg.trim_end().ends_with("</svg>"), "{f}");
    }

    assert_eq!(code(&ws.run(&["design", "--config", cfg.to_str().unwrap(), "--out", "d"])), 0);
    let o = ws.run(&["plot-tightening", "--artifact", "d/design.json", "--out", "q", "--max-index", "20"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(ws.path("q/tightening_tube0.csv")).unwrap(), table.into_bytes());
}
