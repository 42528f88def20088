//! Command line front end. `run` returns the process exit code:
//! 0 success, 1 failed check, 2 usage or input error, 3 numerical failure.

pub mod checkpoint;
pub mod config;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cells::{CellKind, CellSpec};
use crate::data::{
    circle_embedding, cycle_tokens, gen_moving_shapes, load_dataset, load_points, make_batches, points_to_string,
    save_dataset, Dataset, ShapeKind, ShapesConfig,
};
use crate::error::{Error, Result};
use crate::gradcheck::gradcheck_model;
use crate::graph::{grid_graph, knn_graph, load_graph, save_graph, Graph};
use crate::sparse::SparseMatrix;
use crate::training::{
    check_dataset, parse_readout, perplexity, rollout_losses, train_loop, Model, ModelSpec, Readout, TrainState, METRICS_HEADER,
};

pub use checkpoint::{Checkpoint, CKPT_MAGIC};
pub use config::{GraphSource, RunConfig, Task};

#[derive(Debug, Parser)]
#[command(name = "gcrn", version, about = "Graph convolutional recurrent networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Feed predictions back as inputs for this many steps.
        #[arg(long, default_value_t = 1)]
        rollout: usize,
    },
    /// Compare analytic and finite difference gradients of a cell.
    Gradcheck {
        #[arg(long)]
        cell: CellKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Perturb the analytic gradient; the check must then fail.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Generate datasets.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Build or inspect graphs.
    #[command(subcommand)]
    Graph(GraphCommand),
}

#[derive(Debug, Subcommand)]
pub enum GenCommand {
    /// Moving shapes bouncing inside a square patch.
    Shapes(ShapesArgs),
    /// A token stream that cycles through the vocabulary.
    Cycle {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        offset: usize,
        /// Also write the vocabulary's circle embedding as a point file.
        #[arg(long)]
        points: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ShapesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    #[arg(long, default_value_t = 2)]
    pub shapes: usize,
    /// `square` or `cross`.
    #[arg(long, default_value = "square")]
    pub shape: String,
    #[arg(long, default_value_t = 4)]
    pub size: usize,
    #[arg(long, default_value_t = 2)]
    pub max_speed: i64,
    #[arg(long)]
    pub rotate: bool,
    #[arg(long, default_value_t = 0.3)]
    pub max_angular: f64,
    #[arg(long, default_value_t = 20)]
    pub len: usize,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum GraphCommand {
    /// k-nearest-neighbor graph over a point file.
    Build {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "euclidean")]
        metric: String,
        /// Gaussian kernel width, or `auto`.
        #[arg(long, default_value = "auto")]
        sigma: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lattice graph over a rows x cols grid.
    Grid {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = 8)]
        connectivity: usize,
        #[arg(long, default_value = "auto")]
        sigma: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print vertex and edge counts, λmax and degree statistics.
    Info {
        #[arg(long)]
        graph: PathBuf,
    },
}

enum Failure {
    /// A check ran and failed; not an input error.
    Check,
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } | Error::NoConvergence { .. } => 3,
        _ => 2,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Check) => 1,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Train { config, resume } => train(&config, resume.as_deref())?,
        Command::Eval { checkpoint, data, rollout } => eval(&checkpoint, &data, rollout)?,
        Command::Gradcheck {
            cell,
            seed,
            trials,
            corrupt_gradient,
        } => {
            if trials == 0 {
                return Err(Error::invalid("--trials must be at least 1").into());
            }
            let r = gradcheck_model(cell, seed, trials, corrupt_gradient)?;
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            println!(
                "{verdict} cell={} trials={} max_rel_error={:.3e} worst={}",
                r.kind, r.trials, r.max_rel_error, r.worst
            );
            if !r.passed() {
                return Err(Failure::Check);
            }
        }
        Command::Gen(GenCommand::Shapes(a)) => {
            let shape = match a.shape.as_str() {
                "square" => ShapeKind::Square,
                "cross" => ShapeKind::Cross,
                s => return Err(Error::invalid(format!("unknown shape `{s}` (square | cross)")).into()),
            };
            let cfg = ShapesConfig {
                patch: a.patch,
                n_shapes: a.shapes,
                shape,
                size: a.size,
                max_speed: a.max_speed,
                rotate: a.rotate,
                max_angular: a.max_angular,
                seq_len: a.len,
                count: a.count,
                seed: a.seed,
            };
            save_dataset(&a.out, &Dataset::Frames(gen_moving_shapes(&cfg)?))?;
        }
        Command::Gen(GenCommand::Cycle {
            out,
            vocab,
            len,
            offset,
            points,
        }) => {
            save_dataset(&out, &Dataset::Tokens(cycle_tokens(vocab, len, offset)?))?;
            if let Some(p) = points {
                std::fs::write(&p, points_to_string(&circle_embedding(vocab))).map_err(|e| Error::io(&p, e))?;
            }
        }
        Command::Graph(GraphCommand::Build {
            points,
            k,
            metric,
            sigma,
            out,
        }) => {
            let pts = load_points(&points)?;
            let g = knn_graph(&pts, k, config::parse_metric(&metric)?, config::parse_sigma(&sigma)?)?;
            save_graph(&out, &g)?;
        }
        Command::Graph(GraphCommand::Grid {
            rows,
            cols,
            connectivity,
            sigma,
            out,
        }) => {
            let g: Graph<f64> = grid_graph(rows, cols, connectivity, config::parse_sigma(&sigma)?)?;
            save_graph(&out, &g)?;
        }
        Command::Graph(GraphCommand::Info { graph }) => {
            let g: Graph<f64> = load_graph(&graph)?;
            let deg = g.degrees();
            let (min, max) = (deg.iter().min().copied().unwrap_or(0), deg.iter().max().copied().unwrap_or(0));
            let mean = deg.iter().sum::<usize>() as f64 / deg.len().max(1) as f64;
            println!("vertices {}", g.n());
            println!("edges {}", g.n_edges());
            println!("lambda_max {:.12}", g.lambda_max()?);
            println!("degree min {min} max {max} mean {mean:.6}");
        }
    }
    Ok(())
}

fn build_graph(cfg: &RunConfig, base: &Path) -> Result<Graph<f64>> {
    let g = match &cfg.graph {
        GraphSource::Grid { rows, cols, connectivity } => grid_graph(*rows, *cols, *connectivity, cfg.sigma)?,
        GraphSource::File(p) => load_graph(&RunConfig::resolve(base, p))?,
        GraphSource::Knn { points, k, metric } => {
            knn_graph(&load_points(&RunConfig::resolve(base, points))?, *k, *metric, cfg.sigma)?
        }
    };
    Ok(g.with_lambda_mode(cfg.lambda))
}

fn model_spec(cfg: &RunConfig, data: &Dataset) -> Result<ModelSpec> {
    let (n, d) = data.signal_shape();
    let vocab = match data {
        Dataset::Tokens(t) => t.vocab,
        Dataset::Frames(_) => 0,
    };
    match (cfg.task, data) {
        (Task::Shapes, Dataset::Frames(_)) | (Task::Tokens, Dataset::Tokens(_)) => {}
        _ => {
            return Err(Error::invalid(format!(
                "task {} does not match the training data format",
                cfg.task.as_str()
            )))
        }
    }
    let readout: Readout = parse_readout(&cfg.readout, vocab)?;
    let cell = CellSpec::new(cfg.cell, n, d, cfg.hidden, cfg.k).with_peepholes(cfg.peepholes);
    let spec = ModelSpec::new(cell, readout).with_layers(cfg.layers);
    spec.validate()?;
    Ok(spec)
}

/// Scaled Laplacian for graph cells; `None` for the dense baseline.
fn laplacian(kind: CellKind, g: &Graph<f64>, lambda_max: f64) -> Result<Option<SparseMatrix<f64>>> {
    if kind.is_graph() {
        Ok(Some(g.scaled_laplacian_with(lambda_max)?))
    } else {
        Ok(None)
    }
}

fn train(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let train_data = load_dataset(&RunConfig::resolve(base, &cfg.train_data))?;
    let valid_data = load_dataset(&RunConfig::resolve(base, &cfg.valid_data))?;
    let spec = model_spec(&cfg, &train_data)?;
    check_dataset(&spec, &train_data, "training data")?;
    check_dataset(&spec, &valid_data, "validation data")?;
    let graph = build_graph(&cfg, base)?;
    if graph.n() != spec.cell.n {
        return Err(Error::dim(format!(
            "graph has {} vertices, data has {}",
            graph.n(),
            spec.cell.n
        )));
    }

    let (state, lambda_max) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_spec(&spec)?;
            if ck.graph_n != graph.n() || ck.graph_edges != graph.edges() {
                return Err(Error::invalid(format!(
                    "{}: checkpoint was trained on a different graph",
                    p.display()
                )));
            }
            let mut state = ck.state;
            state.optimizer.config = cfg.optim;
            state.stopping.patience = cfg.train.patience;
            (state, ck.lambda_max)
        }
        None => {
            let lmax = if spec.cell.kind.is_graph() { graph.lambda_max()? } else { 2.0 };
            let model = Model::<f64>::init(spec, cfg.train.seed)?;
            (TrainState::new(model, cfg.optim, cfg.train.patience), lmax)
        }
    };
    let lap = laplacian(spec.cell.kind, &graph, lambda_max)?;

    let out = RunConfig::resolve(base, &cfg.output_dir);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let metrics_path = out.join("metrics.csv");
    let fresh = resume.is_none() || !metrics_path.exists();
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    if fresh {
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    }
    let edges = graph.edges();
    let snapshot = |state: &TrainState<f64>| Checkpoint {
        task: cfg.task,
        state: state.clone(),
        graph_n: graph.n(),
        graph_edges: edges.clone(),
        lambda_max,
        unroll: cfg.train.unroll,
        batch_size: cfg.train.batch_size,
    };
    if resume.is_none() {
        // The untrained model is checkpointed so that a zero-step run still yields one.
        snapshot(&state).save(&out.join("last.ckpt"))?;
    }
    let outcome = train_loop(state, lap.as_ref(), &train_data, &valid_data, &cfg.train, |state, rows, improved| {
        for r in rows {
            writeln!(metrics, "{}", r.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
            println!("{}", r.csv_row());
        }
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let ck = snapshot(state);
        ck.save(&out.join("last.ckpt"))?;
        if improved {
            ck.save(&out.join("best.ckpt"))?;
        }
        Ok(())
    })?;
    if outcome.stopped_early {
        eprintln!("early stopping after epoch {}", outcome.state.epoch);
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, rollout: usize) -> Result<()> {
    if rollout == 0 {
        return Err(Error::invalid("--rollout must be at least 1"));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let dataset = load_dataset(data)?;
    let spec = *ck.model().spec();
    check_dataset(&spec, &dataset, "evaluation data")?;
    let lap = laplacian(spec.cell.kind, &ck.graph()?, ck.lambda_max)?;
    let batches = make_batches::<f64>(&dataset, ck.batch_size, ck.unroll, None)?;
    let losses = rollout_losses(ck.model(), lap.as_ref(), &batches, rollout)?;
    println!("step,loss,perplexity");
    for (s, l) in losses.iter().enumerate() {
        let ppl = if spec.readout.is_token() {
            format!("{:.16e}", perplexity(*l))
        } else {
            String::new()
        };
        println!("{},{l:.16e},{ppl}", s + 1);
    }
    Ok(())
}

/// Builds the global thread pool from `GCRN_THREADS` when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("GCRN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::invalid(format!("GCRN_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))
}

#[cfg(test)]
mod tests;
