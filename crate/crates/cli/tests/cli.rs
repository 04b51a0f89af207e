use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mcoem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcoem"))
        .args(args)
        .output()
        .expect("spawn mcoem")
}

fn run_ok(args: &[&str]) {
    let o = mcoem(args);
    assert!(
        o.status.success(),
        "mcoem {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const MODEL: &str = r#"
mode = "curve"
[model]
classes = 2
[curve]
templates = 12
warp_kernels = 6
warp_bandwidth = 4.0
prior_mean = 0.0
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(count: usize) -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        let gen = ws.write("gen.toml", &format!("seed = 1\n{MODEL}\n[generate]\ncount = {count}\n"));
        run_ok(&["generate", "--config", s(&gen), "--out", s(&ws.path("data"))]);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn fit_config(&self, name: &str, iterations: u64) -> PathBuf {
        let curves = self.path("data").join("curves.csv");
        self.write(
            name,
            &format!(
                r#"seed = 2
{MODEL}
[data]
train = "{c}"
test = "{c}"
[engine.updates]
first = 3
second = 5
every_from = 6
[sampler]
schedule = {{ kind = "fixed", sweeps = 20 }}
burn_in = 5
[stream]
iterations = {iterations}
[classify.budget]
burn_in = 5
samples = 10
initial_scale = 0.5
target_acceptance = 0.4
"#,
                c = curves.display()
            ),
        )
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_fit_render_pipeline_writes_manifests() {
    let ws = Workspace::new(30);
    let data_manifest = json(&ws.path("data").join("manifest.json"));
    assert_eq!(data_manifest["command"], "generate");
    let files: Vec<&str> = data_manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["path"].as_str().unwrap())
        .collect();
    assert!(files.contains(&"curves.csv") && files.contains(&"truth.json"), "{files:?}");

    let cfg = ws.fit_config("fit.toml", 12);
    let fit = ws.path("fit");
    run_ok(&["fit", "--config", s(&cfg), "--out", s(&fit)]);
    let summary = json(&fit.join("summary.json"));
    assert_eq!(summary["iterations"], 12);
    let manifest = json(&fit.join("manifest.json"));
    for a in manifest["artifacts"].as_array().unwrap() {
        let hex = a["sha256"].as_str().unwrap();
        assert_eq!(hex.len(), 64);
        assert!(hex.chars().all(|c| c.is_ascii_hexdigit()));
    }
    let inputs: Vec<&str> = manifest["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["path"].as_str().unwrap())
        .collect();
    assert!(inputs.iter().any(|p| p.ends_with("curves.csv")), "{inputs:?}");

    let render = ws.path("render");
    run_ok(&[
        "render",
        "--config",
        s(&cfg),
        "--resume",
        s(&fit.join("checkpoint.json")),
        "--out",
        s(&render),
    ]);
    let csv = std::fs::read_to_string(render.join("templates.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "u,template_0,template_1");
    assert!(lines.count() > 10);
}

#[test]
fn resumed_fit_matches_uninterrupted_fit() {
    let ws = Workspace::new(24);
    let full_cfg = ws.fit_config("full.toml", 20);
    let half_cfg = ws.fit_config("half.toml", 9);
    let full = ws.path("full");
    let split = ws.path("split");
    run_ok(&["fit", "--config", s(&full_cfg), "--out", s(&full)]);
    run_ok(&["fit", "--config", s(&half_cfg), "--out", s(&split)]);
    let half_state = json(&split.join("checkpoint.json"))["state"]["n"].clone();
    assert_eq!(half_state, 9);
    run_ok(&[
        "fit",
        "--config",
        s(&full_cfg),
        "--resume",
        s(&split.join("checkpoint.json")),
        "--out",
        s(&split),
    ]);
    assert_eq!(
        std::fs::read(full.join("params.json")).unwrap(),
        std::fs::read(split.join("params.json")).unwrap()
    );
    assert_eq!(
        json(&full.join("checkpoint.json"))["state"],
        json(&split.join("checkpoint.json"))["state"]
    );
    let traj = |d: &Path| std::fs::read_to_string(d.join("trajectory.jsonl")).unwrap();
    let strip = |t: String| -> Vec<Value> {
        t.lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("elapsed_secs");
                v
            })
            .collect()
    };
    assert_eq!(strip(traj(&full)), strip(traj(&split)));
}

#[test]
fn classify_writes_error_table() {
    let ws = Workspace::new(20);
    let cfg = ws.fit_config("fit.toml", 8);
    let fit = ws.path("fit");
    run_ok(&["fit", "--config", s(&cfg), "--out", s(&fit)]);
    let cls = ws.path("cls");
    run_ok(&[
        "classify",
        "--config",
        s(&cfg),
        "--resume",
        s(&fit.join("trajectory.jsonl")),
        "--mc-budget",
        "8",
        "--out",
        s(&cls),
    ]);
    let table = std::fs::read_to_string(cls.join("error_rate.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "t,rho");
    let mut prev_t = -1.0;
    let mut rows = 0;
    for l in lines {
        let (t, rho) = l.split_once(',').unwrap();
        let t: f64 = t.parse().unwrap();
        let rho: f64 = rho.parse().unwrap();
        assert!(t >= prev_t);
        assert!((0.0..=1.0).contains(&rho));
        prev_t = t;
        rows += 1;
    }
    assert!(rows >= 2);
    let predictions = std::fs::read_to_string(cls.join("predictions.jsonl")).unwrap();
    assert_eq!(predictions.lines().count(), 20);
}

#[test]
fn config_errors_name_the_field_and_exit_two() {
    let ws = tempfile::tempdir().unwrap();
    let cfg = ws.path().join("bad.toml");
    std::fs::write(&cfg, "mode = \"curve\"\n[curve]\ntemplates = -3\n").unwrap();
    let out = ws.path().join("out");
    let o = mcoem(&["fit", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    let record: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(record["status"], "error");
    assert_eq!(record["kind"], "config");
    assert_eq!(record["field"], "curve.templates");
    assert_eq!(json(&out.join("error.json")), record);

    std::fs::write(&cfg, "mode = \"curve\"\n[stream]\norder = \"shuffled\"\n").unwrap();
    let o = mcoem(&["fit", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(json(&out.join("error.json"))["field"], "stream.order");
}

#[test]
fn runtime_failures_exit_nonzero_with_record() {
    let ws = tempfile::tempdir().unwrap();
    let cfg = ws.path().join("c.toml");
    std::fs::write(
        &cfg,
        format!("mode = \"curve\"\n[data]\ntrain = \"{}\"\n", ws.path().join("missing.csv").display()),
    )
    .unwrap();
    let out = ws.path().join("out");
    let o = mcoem(&["fit", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let record = json(&out.join("error.json"));
    assert_eq!(record["command"], "fit");
    assert!(record["message"].as_str().unwrap().contains("missing.csv"));
}

#[test]
fn usage_errors_are_machine_readable() {
    let o = mcoem(&["fit", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    let record: Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(record["kind"], "usage");
}

#[test]
fn zero_budget_stops_with_a_checkpoint() {
    let ws = Workspace::new(10);
    let cfg = ws.fit_config("fit.toml", 10);
    let fit = ws.path("fit");
    run_ok(&["fit", "--config", s(&cfg), "--budget-seconds", "0", "--out", s(&fit)]);
    let summary = json(&fit.join("summary.json"));
    assert_eq!(summary["stop"], "budget");
    assert!(summary["iterations"].as_u64().unwrap() < 10);
    assert!(fit.join("checkpoint.json").exists());
}
