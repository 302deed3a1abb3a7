mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use chartflow::Error;
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "chartflow",
    version,
    about = "Multi-chart flow experiments on embedded manifolds"
)]
struct Cli {
    /// Run configuration (TOML). Every field is optional.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from the configured manifold and distribution.
    Gen {
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train an atlas on a dataset CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Per-epoch losses; defaults to `<out>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a model on the held-out split of a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Key-value metric report.
        #[arg(long, short)]
        out: PathBuf,
        /// Append a row to this cross-run table (header written if new).
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        label: String,
    },
    /// Draw samples from a model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, short)]
        n: usize,
        /// Defaults to `eval.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Project points onto the learned manifold.
    Project {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Integrate a multi-chart exponential map.
    Expmap {
        #[arg(long)]
        model: PathBuf,
        /// Start point, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
        /// Initial velocity, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        v0: String,
        /// Overrides `geometry.scheme`.
        #[arg(long)]
        scheme: Option<Scheme>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Solve for the geodesic between two points.
    Logmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
        #[arg(long, allow_hyphen_values = true)]
        x1: String,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Pairwise geodesic distances, or per-pair exp-map errors with an
    /// integrator as solver.
    Distmat {
        #[arg(long)]
        model: PathBuf,
        /// Point CSV; without it the configured manifold's evaluation points
        /// are used.
        #[arg(long)]
        points: Option<PathBuf>,
        /// Number of evaluation points when `--points` is absent.
        #[arg(long, short, default_value_t = 100)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Solver::Log)]
        solver: Solver,
        /// Per-pair diagnostics of the log-map solves.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Vietoris-Rips persistence of a distance matrix.
    Persist {
        #[arg(long)]
        dist: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scheme {
    Euler,
    HardSwitch,
    Ambient,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Solver {
    Log,
    Euler,
    HardSwitch,
    Ambient,
}

/// Exit status and category for an error.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Io(_) | Error::Parse { .. } => (4, "io"),
        e if e.is_numerical() => (3, "numerical"),
        _ => (2, "config"),
    }
}

fn run(cli: Cli) -> chartflow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    use commands as c;
    match cli.command {
        Command::Gen { out } => c::gen(cfg, &out),
        Command::Train { data, out, history } => c::train(cfg, &data, &out, history.as_deref()),
        Command::Eval {
            data,
            model,
            out,
            table,
            label,
        } => c::eval(cfg, &data, &model, &out, table.as_deref(), &label),
        Command::Sample {
            model,
            n,
            seed,
            out,
        } => c::sample(cfg, &model, n, seed, &out),
        Command::Project { model, input, out } => c::project(cfg, &model, &input, &out),
        Command::Expmap {
            model,
            x0,
            v0,
            scheme,
            out,
        } => c::expmap(cfg, &model, &x0, &v0, scheme.map(Scheme::into), &out),
        Command::Logmap { model, x0, x1, out } => c::logmap(cfg, &model, &x0, &x1, &out),
        Command::Distmat {
            model,
            points,
            n,
            solver,
            diagnostics,
            out,
        } => c::distmat(
            cfg,
            &model,
            points.as_deref(),
            n,
            solver.into(),
            diagnostics.as_deref(),
            &out,
        ),
        Command::Persist { dist, out, svg } => c::persist(cfg, &dist, &out, svg.as_deref()),
    }
}

impl From<Scheme> for chartflow::geo_multi::ExpScheme {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Euler => Self::Euler,
            Scheme::HardSwitch => Self::HardSwitch,
            Scheme::Ambient => Self::Ambient,
        }
    }
}

impl From<Solver> for Option<chartflow::geo_multi::ExpScheme> {
    fn from(s: Solver) -> Self {
        match s {
            Solver::Log => None,
            Solver::Euler => Some(Scheme::Euler.into()),
            Solver::HardSwitch => Some(Scheme::HardSwitch.into()),
            Solver::Ambient => Some(Scheme::Ambient.into()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            let line = serde_json::json!({ "error": kind, "exit": code, "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
