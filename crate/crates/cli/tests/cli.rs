use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chartflow"))
}

fn workdir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn chartflow")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "chartflow {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn data_rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with('x'))
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const CIRCLE: &str = r#"
threads = 1

[data]
manifold = { kind = "circle", radius = 1.0 }
n = 100
seed = 7
n_val = 10
n_test = 10

[model]
charts = 2
g_layers = 1
h_layers = 1
hidden = 4

[train]
epochs = 2
pretrain_epochs = 1
batch_size = 32
validate_after = 0

[geometry.log]
iterations = 5
samples = 16
optimizer = "gauss_newton"

[eval]
subsamples = 2
subsample_size = 8
exp_points = 3
dist_points = 4
"#;

#[test]
fn gen_circle_writes_unit_norm_rows_and_manifest() {
    let dir = workdir("gen_circle");
    let cfg = write(&dir, "c.toml", CIRCLE);
    let out = dir.join("data.csv");
    let stdout = ok(&["gen", "-c", &cfg, "-o", out.to_str().unwrap()]);
    assert!(stdout.contains("points = 100"));
    let rows = data_rows(&out);
    assert_eq!(rows.len(), 100);
    for r in &rows {
        assert!(((r[0] * r[0] + r[1] * r[1]).sqrt() - 1.0).abs() < 1e-12);
    }
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# chartflow gen"));
    assert!(text.contains("# config_hash="));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("data.csv.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 1);
    let echoed = std::fs::read_to_string(dir.join("data.csv.config.toml")).unwrap();
    assert!(echoed.contains("n = 100"));
    // defaults are resolved in the echoed config
    assert!(echoed.contains("lambda_recon"));
}

#[test]
fn gen_is_byte_reproducible() {
    let dir = workdir("gen_repro");
    let cfg = write(&dir, "c.toml", CIRCLE);
    let (a, b) = (dir.join("a.csv"), dir.join("b.csv"));
    ok(&["gen", "-c", &cfg, "-o", a.to_str().unwrap()]);
    ok(&["gen", "-c", &cfg, "-o", b.to_str().unwrap()]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn gen_full_scale_sphere_and_torus() {
    let dir = workdir("gen_full");
    let a = 1.0 / 3f64.sqrt();
    let sphere = write(
        &dir,
        "s.toml",
        &format!(
            "[data]\nmanifold = {{ kind = \"sphere\", radius = 1.0 }}\n\
             distribution = {{ kind = \"vmf_mixture\", kappa = 5.0, means = \
             [[{a}, {a}, {a}], [{a}, -{a}, -{a}], [-{a}, {a}, -{a}], [-{a}, -{a}, {a}]] }}\n"
        ),
    );
    let out = dir.join("sphere.csv");
    ok(&["gen", "-c", &sphere, "-o", out.to_str().unwrap()]);
    assert_eq!(data_rows(&out).len(), 12000);

    let torus = write(
        &dir,
        "t.toml",
        "[data]\nmanifold = { kind = \"torus\", major = 2.0, minor = 1.0 }\n",
    );
    let out = dir.join("torus.csv");
    ok(&["gen", "-c", &torus, "-o", out.to_str().unwrap()]);
    let rows = data_rows(&out);
    assert_eq!(rows.len(), 12000);
    for r in &rows {
        let rho = (r[0] * r[0] + r[1] * r[1]).sqrt();
        assert!(((rho - 2.0).powi(2) + r[2] * r[2] - 1.0).abs() < 1e-9);
    }
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("machine-parsable error line")
}

#[test]
fn config_errors_exit_2() {
    let dir = workdir("bad_config");
    let cfg = write(&dir, "c.toml", "[data]\nbogus = 1\n");
    let out = run(&["gen", "-c", &cfg, "-o", dir.join("x.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_line(&out);
    assert_eq!(e["error"], "config");
    assert_eq!(e["exit"], 2);
    assert!(e["message"].as_str().unwrap().contains("bogus"));

    let cfg = write(
        &dir,
        "d.toml",
        "[data]\nmanifold = { kind = \"sphere\", radius = 0.0 }\n",
    );
    let out = run(&["gen", "-c", &cfg, "-o", dir.join("x.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn io_errors_exit_4() {
    let dir = workdir("io_errors");
    let missing = dir.join("missing.csv");
    let out = run(&[
        "persist",
        "--dist",
        missing.to_str().unwrap(),
        "-o",
        dir.join("d.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_line(&out)["error"], "io");

    let garbage = write(&dir, "g.csv", "2\n0,x\n1,0\n");
    let out = run(&[
        "persist",
        "--dist",
        &garbage,
        "-o",
        dir.join("d.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));

    let model = write(&dir, "m.txt", "chartflow-atlas\nversion 99\n");
    let out = run(&[
        "sample",
        "--model",
        &model,
        "-n",
        "3",
        "-o",
        dir.join("s.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(error_line(&out)["message"]
        .as_str()
        .unwrap()
        .contains("version"));
}

#[test]
fn persist_square_has_one_loop() {
    let dir = workdir("persist_square");
    let s = 2f64.sqrt();
    let dist = write(
        &dir,
        "square.csv",
        &format!("# unit square\n4\n0,1,{s},1\n1,0,1,{s}\n{s},1,0,1\n1,{s},1,0\n"),
    );
    let out = dir.join("diag.csv");
    let svg = dir.join("diag.svg");
    ok(&[
        "persist",
        "--dist",
        &dist,
        "-o",
        out.to_str().unwrap(),
        "--svg",
        svg.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let h1: Vec<(f64, f64)> = text
        .lines()
        .filter(|l| l.starts_with("1,"))
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[1].parse().unwrap(), c[2].parse().unwrap())
        })
        .collect();
    assert_eq!(h1.len(), 1);
    assert!((h1[0].0 - 1.0).abs() < 1e-12 && (h1[0].1 - s).abs() < 1e-12);
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));
}

/// Dataset and a tiny trained model shared by the pipeline checks.
fn trained(dir: &Path) -> (String, String, String) {
    let cfg = write(dir, "c.toml", CIRCLE);
    let data = dir.join("data.csv");
    ok(&["gen", "-c", &cfg, "-o", data.to_str().unwrap()]);
    let model = dir.join("model.txt");
    let stdout = ok(&[
        "train",
        "-c",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "-o",
        model.to_str().unwrap(),
    ]);
    assert!(stdout.contains("best_epoch"));
    (
        cfg,
        data.to_str().unwrap().into(),
        model.to_str().unwrap().into(),
    )
}

#[test]
fn train_is_reproducible_and_writes_history() {
    let dir = workdir("train_repro");
    let (cfg, data, model) = trained(&dir);
    let again = dir.join("again.txt");
    ok(&[
        "train",
        "-c",
        &cfg,
        "--data",
        &data,
        "-o",
        again.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(&model).unwrap(),
        std::fs::read(&again).unwrap()
    );
    let history = std::fs::read_to_string(format!("{model}.history.csv")).unwrap();
    assert!(history.contains("epoch,train_loss,val_recon"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{model}.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["inputs"][0]["path"], data.as_str());
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn pipeline_on_a_small_circle_model() {
    let dir = workdir("pipeline");
    let (cfg, data, model) = trained(&dir);
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();

    let table = p("table.csv");
    for label in ["a", "b"] {
        let stdout = ok(&[
            "eval",
            "-c",
            &cfg,
            "--data",
            &data,
            "--model",
            &model,
            "-o",
            &p("report.txt"),
            "--table",
            &table,
            "--label",
            label,
        ]);
        assert!(stdout.contains("recons = "));
    }
    let report = std::fs::read_to_string(p("report.txt")).unwrap();
    for key in [
        "recons",
        "wasserstein_mean",
        "wasserstein_std",
        "exps_mse",
        "dists_mse",
    ] {
        assert!(
            report.lines().any(|l| l.starts_with(&format!("{key} = "))),
            "{key} missing"
        );
    }
    let rows: Vec<String> = std::fs::read_to_string(&table)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("label,recons"));

    ok(&[
        "sample",
        "-c",
        &cfg,
        "--model",
        &model,
        "-n",
        "7",
        "-o",
        &p("samples.csv"),
    ]);
    assert_eq!(data_rows(&dir.join("samples.csv")).len(), 7);

    ok(&[
        "project",
        "-c",
        &cfg,
        "--model",
        &model,
        "--input",
        &p("samples.csv"),
        "-o",
        &p("proj.csv"),
    ]);
    assert_eq!(data_rows(&dir.join("proj.csv")).len(), 7);

    for scheme in ["euler", "hard-switch", "ambient"] {
        let out = p(&format!("traj_{scheme}.csv"));
        let r = run(&[
            "expmap", "-c", &cfg, "--model", &model, "--x0", "1,0", "--v0", "0,0.5", "--scheme",
            scheme, "-o", &out,
        ]);
        // an untrained model may legitimately fail numerically; the
        // partial trajectory is still written
        assert!(
            matches!(r.status.code(), Some(0) | Some(3)),
            "{scheme}: {r:?}"
        );
        assert!(std::fs::read_to_string(&out).unwrap().contains("t,x1,x2"));
    }

    let stdout = ok(&[
        "logmap",
        "-c",
        &cfg,
        "--model",
        &model,
        "--x0",
        "1,0",
        "--x1",
        "0,1",
        "-o",
        &p("log.csv"),
    ]);
    assert!(stdout.contains("length = "));
    assert_eq!(data_rows(&dir.join("log.csv")).len(), 17);

    ok(&[
        "distmat",
        "-c",
        &cfg,
        "--model",
        &model,
        "-n",
        "5",
        "-o",
        &p("dist.csv"),
        "--diagnostics",
        &p("diag.csv"),
    ]);
    let diag = std::fs::read_to_string(p("diag.csv")).unwrap();
    assert_eq!(diag.lines().filter(|l| !l.starts_with('#')).count(), 11);
    for solver in ["euler", "hard-switch"] {
        let out = p(&format!("ablation_{solver}.csv"));
        ok(&[
            "distmat", "-c", &cfg, "--model", &model, "-n", "5", "--solver", solver, "-o", &out,
        ]);
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.contains("i,j,velocity,sq_error,status"));
        assert!(text.contains("# mse="));
    }

    ok(&[
        "persist",
        "-c",
        &cfg,
        "--dist",
        &p("dist.csv"),
        "-o",
        &p("pd.csv"),
    ]);
    let pd = std::fs::read_to_string(p("pd.csv")).unwrap();
    assert_eq!(pd.lines().filter(|l| l.starts_with("0,")).count(), 5);
}

#[test]
fn wrong_dimension_is_a_config_error() {
    let dir = workdir("wrong_dim");
    let (cfg, _, model) = trained(&dir);
    let out = run(&[
        "expmap",
        "-c",
        &cfg,
        "--model",
        &model,
        "--x0",
        "1,0,0",
        "--v0",
        "0,1",
        "-o",
        dir.join("t.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diverging_ambient_integration_exits_3() {
    let dir = workdir("diverge");
    let (cfg, _, model) = trained(&dir);
    let out = dir.join("t.csv");
    let r = run(&[
        "expmap",
        "-c",
        &cfg,
        "--model",
        &model,
        "--x0",
        "1,0",
        "--v0",
        "0,1e6",
        "--scheme",
        "ambient",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        r.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
    assert_eq!(error_line(&r)["error"], "numerical");
    assert!(std::fs::read_to_string(out)
        .unwrap()
        .contains("# complete=false"));
}
