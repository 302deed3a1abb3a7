use std::fmt::Write as _;
use std::path::Path;

use chartflow::atlas::{train as fit, Atlas};
use chartflow::eval::{evaluate_model, MetricReport};
use chartflow::geo_multi::{
    distance_matrix, exp_map_multi, log_map_multi, project_to_manifold, tril_pairs, DistanceMatrix,
    ExpScheme,
};
use chartflow::io::{read_points_csv, write_points_csv};
use chartflow::manifolds::{
    evaluation_points, sample_dataset, split_dataset, true_log, ManifoldSpec,
};
use chartflow::tda::{diagram_summary, rips_persistence};
use chartflow::{Error, Points, Result};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::output::{sibling, Run};

fn parse_vector(s: &str, dim: usize, what: &'static str) -> Result<Vec<f64>> {
    let v = s
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Validation(format!("{what}: {e}")))?;
    if v.len() != dim {
        return Err(Error::Dimension {
            op: what,
            expected: dim,
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation(format!("{what} is not finite")));
    }
    Ok(v)
}

fn load_model(run: &mut Run, path: &Path) -> Result<Atlas> {
    let text = run.read_string(path)?;
    Atlas::from_text(&text)
}

fn load_points(run: &mut Run, path: &Path) -> Result<Points> {
    let bytes = run.read(path)?;
    read_points_csv(&bytes[..])
}

fn points_csv(points: &Points, meta: &[(&str, String)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_points_csv(&mut buf, points, meta)?;
    Ok(buf)
}

fn check_manifold_dim(cfg: &RunConfig, atlas: &Atlas) -> Result<()> {
    let m = &cfg.data.manifold;
    if m.ambient_dim() != atlas.ambient_dim() || m.latent_dim() != atlas.latent_dim() {
        return Err(Error::Config(format!(
            "model is {}-dimensional in R^{}, configured manifold is {}-dimensional in R^{}",
            atlas.latent_dim(),
            atlas.ambient_dim(),
            m.latent_dim(),
            m.ambient_dim()
        )));
    }
    Ok(())
}

pub fn gen(cfg: RunConfig, out: &Path) -> Result<()> {
    let d = &cfg.data;
    let data = sample_dataset(&d.manifold, &d.distribution, d.n, d.seed)?;
    let max_residual = data
        .rows()
        .map(|x| d.manifold.residual(x))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let mean_norm = data
        .rows()
        .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / data.len() as f64;
    let mut run = Run::new("gen", cfg.clone(), d.seed);
    run.write(out, &points_csv(&data, &[])?)?;
    println!("points = {}", data.len());
    println!("dim = {}", data.dim());
    println!("mean_norm = {mean_norm:.6e}");
    println!("max_residual = {max_residual:.3e}");
    run.finish(out)
}

fn splits(cfg: &RunConfig, data: &Points) -> Result<chartflow::manifolds::DataSplit> {
    split_dataset(data, cfg.data.n_val, cfg.data.n_test, cfg.data.seed)
}

pub fn train(cfg: RunConfig, data: &Path, out: &Path, history: Option<&Path>) -> Result<()> {
    let mut run = Run::new("train", cfg.clone(), cfg.train.seed);
    let points = load_points(&mut run, data)?;
    let split = splits(&cfg, &points)?;
    let atlas = Atlas::new(cfg.flow_config(), cfg.model.charts, cfg.model.seed)?;
    let history_path = history.map_or_else(|| sibling(out, "history.csv"), Path::to_path_buf);
    let (trained, err) = match fit(atlas, &split.train, &split.val, &cfg.train) {
        Ok(t) => (t, None),
        Err(e) => (*e.checkpoint, Some(e.error)),
    };
    run.write(&history_path, trained.history.to_csv().as_bytes())?;
    let model_path = if err.is_some() {
        sibling(out, "checkpoint")
    } else {
        out.to_path_buf()
    };
    run.write(&model_path, trained.atlas.to_text().as_bytes())?;
    if let Some(row) = trained.history.rows.last() {
        println!("epochs = {}", row.epoch);
        println!("final_val_recon = {:.6e}", row.val_recon);
    }
    println!("best_epoch = {}", trained.best_epoch);
    println!("stopped_early = {}", trained.stopped_early);
    run.finish(&model_path)?;
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn eval(
    cfg: RunConfig,
    data: &Path,
    model: &Path,
    out: &Path,
    table: Option<&Path>,
    label: &str,
) -> Result<()> {
    if label.contains([',', '\n']) {
        return Err(Error::Validation(
            "label must not contain commas or newlines".into(),
        ));
    }
    let mut run = Run::new("eval", cfg.clone(), cfg.eval.seed);
    let atlas = load_model(&mut run, model)?;
    check_manifold_dim(&cfg, &atlas)?;
    let points = load_points(&mut run, data)?;
    let split = splits(&cfg, &points)?;
    let report = evaluate_model(&atlas, &split.test, &cfg.data.manifold, &cfg.eval_config())?;
    let text = report.to_key_value();
    run.write(out, text.as_bytes())?;
    print!("{text}");
    if let Some(table) = table {
        let mut existing = match std::fs::read(table) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        if existing.is_empty() {
            existing.extend_from_slice(MetricReport::CSV_HEADER.as_bytes());
            existing.push(b'\n');
        }
        existing.extend_from_slice(report.csv_row(label).as_bytes());
        existing.push(b'\n');
        run.write_raw(table, &existing)?;
    }
    run.finish(out)
}

pub fn sample(cfg: RunConfig, model: &Path, n: usize, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = seed.unwrap_or(cfg.eval.seed);
    let mut run = Run::new("sample", cfg, seed);
    let atlas = load_model(&mut run, model)?;
    let samples = atlas.sample(n, seed)?;
    run.write(out, &points_csv(&samples, &[])?)?;
    println!("samples = {}", samples.len());
    run.finish(out)
}

pub fn project(cfg: RunConfig, model: &Path, input: &Path, out: &Path) -> Result<()> {
    let mut run = Run::new("project", cfg, 0);
    let atlas = load_model(&mut run, model)?;
    let points = load_points(&mut run, input)?;
    let projected = points
        .rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|x| project_to_manifold(&atlas, x).map(|p| p.x_proj))
        .collect::<Result<Vec<_>>>()?;
    let mut result = Points::with_capacity(atlas.ambient_dim(), projected.len());
    let mut max_move: f64 = 0.0;
    for (x, p) in points.rows().zip(&projected) {
        let d: f64 = x
            .iter()
            .zip(p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        max_move = max_move.max(d);
        result.push(p)?;
    }
    run.write(out, &points_csv(&result, &[])?)?;
    println!("points = {}", result.len());
    println!("max_displacement = {max_move:.6e}");
    run.finish(out)
}

pub fn expmap(
    cfg: RunConfig,
    model: &Path,
    x0: &str,
    v0: &str,
    scheme: Option<ExpScheme>,
    out: &Path,
) -> Result<()> {
    let scheme = scheme.unwrap_or(cfg.geometry.scheme);
    let exp = cfg.geometry.exp;
    let mut run = Run::new("expmap", cfg, 0);
    let atlas = load_model(&mut run, model)?;
    let x0 = parse_vector(x0, atlas.ambient_dim(), "--x0")?;
    let v0 = parse_vector(v0, atlas.ambient_dim(), "--v0")?;
    let (traj, err) = match exp_map_multi(&atlas, scheme, &x0, &v0, &exp) {
        Ok(t) => (t, None),
        Err(f) => (f.partial, Some(f.error)),
    };
    let mut body = format!("# scheme={scheme}\n# complete={}\n", err.is_none()).into_bytes();
    traj.write_csv(&mut body)?;
    run.write(out, &body)?;
    if let Some(end) = traj.endpoint() {
        println!("endpoint = {}", join(end));
    }
    println!("samples = {}", traj.len());
    if scheme == ExpScheme::HardSwitch {
        println!("switches = {}", traj.switches.len());
    }
    run.finish(out)?;
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:e}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn logmap(cfg: RunConfig, model: &Path, x0: &str, x1: &str, out: &Path) -> Result<()> {
    let log = cfg.geometry.log.clone();
    let mut run = Run::new("logmap", cfg, 0);
    let atlas = load_model(&mut run, model)?;
    let x0 = parse_vector(x0, atlas.ambient_dim(), "--x0")?;
    let x1 = parse_vector(x1, atlas.ambient_dim(), "--x1")?;
    let r = log_map_multi(&atlas, &x0, &x1, &log)?;
    let v0 =
        r.v0.iter()
            .map(|x| format!("{x:e}"))
            .collect::<Vec<_>>()
            .join(" ");
    let meta = [
        ("length", format!("{:e}", r.length)),
        ("energy", format!("{:e}", r.energy)),
        ("converged", r.converged.to_string()),
        ("iterations", r.iterations.to_string()),
        ("v0", v0),
    ];
    run.write(out, &points_csv(&r.projected, &meta)?)?;
    println!("length = {:.6e}", r.length);
    println!("v0 = {}", join(&r.v0));
    println!("converged = {}", r.converged);
    run.finish(out)
}

/// Endpoint error of one pair under an integrator.
struct PairError {
    i: usize,
    j: usize,
    velocity: &'static str,
    sq_error: Option<f64>,
    status: String,
}

/// Shoots from `x_i` toward `x_j` with the oracle log map when the manifold
/// has one (falling back to the learned log map) and records the squared
/// endpoint error against `x_j`.
fn pair_error(
    atlas: &Atlas,
    m: &ManifoldSpec,
    cfg: &RunConfig,
    scheme: ExpScheme,
    points: &Points,
    (i, j): (usize, usize),
) -> PairError {
    let (xi, xj) = (points.row(i), points.row(j));
    let oracle = match m {
        ManifoldSpec::Torus { .. } => None,
        _ => true_log(m, xi, xj).ok().filter(|o| o.unique).map(|o| o.v),
    };
    let (velocity, v) = match oracle {
        Some(v) => ("oracle", Ok(v)),
        None => (
            "learned",
            log_map_multi(atlas, xi, xj, &cfg.geometry.log).map(|r| r.v0),
        ),
    };
    let result = v
        .and_then(|v| exp_map_multi(atlas, scheme, xi, &v, &cfg.geometry.exp).map_err(Error::from));
    match result {
        Ok(traj) => {
            let end = traj.endpoint().expect("non-empty trajectory");
            let e = end.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            PairError {
                i,
                j,
                velocity,
                sq_error: Some(e),
                status: "ok".into(),
            }
        }
        Err(e) => PairError {
            i,
            j,
            velocity,
            sq_error: None,
            status: e.to_string().replace([',', '\n'], " "),
        },
    }
}

pub fn distmat(
    cfg: RunConfig,
    model: &Path,
    points: Option<&Path>,
    n: usize,
    solver: Option<ExpScheme>,
    diagnostics: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut run = Run::new("distmat", cfg.clone(), 0);
    let atlas = load_model(&mut run, model)?;
    let m = cfg.data.manifold;
    let points = match points {
        Some(p) => load_points(&mut run, p)?,
        None => {
            check_manifold_dim(&cfg, &atlas)?;
            evaluation_points(&m, n)?
        }
    };
    if points.dim() != atlas.ambient_dim() {
        return Err(Error::Dimension {
            op: "distmat",
            expected: atlas.ambient_dim(),
            got: points.dim(),
        });
    }
    match solver {
        None => {
            let dm = distance_matrix(&atlas, &points, &cfg.geometry.log)?;
            let fallback = dm.diagnostics.iter().filter(|d| d.fallback).count();
            let unconverged = dm.diagnostics.iter().filter(|d| !d.converged).count();
            let mut body =
                format!("# solver=log\n# fallback={fallback}\n# unconverged={unconverged}\n")
                    .into_bytes();
            dm.write_csv(&mut body)?;
            run.write(out, &body)?;
            if let Some(p) = diagnostics {
                let mut body = Vec::new();
                dm.write_diagnostics_csv(&mut body)?;
                run.write(p, &body)?;
            }
            println!("points = {}", dm.n);
            println!("fallback = {fallback}");
            println!("unconverged = {unconverged}");
        }
        Some(scheme) => {
            if diagnostics.is_some() {
                return Err(Error::Config(
                    "--diagnostics applies to the log solver only".into(),
                ));
            }
            let rows: Vec<PairError> = tril_pairs(points.len())
                .into_par_iter()
                .map(|p| pair_error(&atlas, &m, &cfg, scheme, &points, p))
                .collect();
            let ok: Vec<f64> = rows.iter().filter_map(|r| r.sq_error).collect();
            let mse = if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().sum::<f64>() / ok.len() as f64
            };
            let failures = rows.len() - ok.len();
            let mut s = String::new();
            let _ = writeln!(s, "# solver={scheme}");
            let _ = writeln!(s, "# mse={mse:e}");
            let _ = writeln!(s, "# failures={failures}");
            s.push_str("i,j,velocity,sq_error,status\n");
            for r in &rows {
                let e = r.sq_error.map_or(String::new(), |e| format!("{e:e}"));
                let _ = writeln!(s, "{},{},{},{},{}", r.i, r.j, r.velocity, e, r.status);
            }
            run.write(out, s.as_bytes())?;
            println!("pairs = {}", rows.len());
            println!("mse = {mse:.6e}");
            println!("failures = {failures}");
        }
    }
    run.finish(out)
}

pub fn persist(cfg: RunConfig, dist: &Path, out: &Path, svg: Option<&Path>) -> Result<()> {
    let tda = cfg.tda.clone();
    let mut run = Run::new("persist", cfg, 0);
    let bytes = run.read(dist)?;
    let dm = DistanceMatrix::read_csv(&bytes[..])?;
    let diag = rips_persistence(dm.as_slice(), dm.n, tda.max_dim, tda.max_radius)?;
    run.write(out, diag.to_csv().as_bytes())?;
    if let Some(p) = svg {
        let title = format!("Rips persistence ({} points)", dm.n);
        run.write_raw(p, diag.to_svg(&title).as_bytes())?;
    }
    for dim in 0..=tda.max_dim {
        let top: Vec<String> = diagram_summary(&diag, dim)
            .iter()
            .take(5)
            .map(|f| format!("{:.6}", f.persistence()))
            .collect();
        println!("h{dim}_top = {}", top.join(","));
    }
    run.finish(out)
}
