//! `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cells::{CellKind, Peepholes};
use crate::error::{Error, Result};
use crate::graph::{KernelWidth, LambdaMaxMode, Metric};
use crate::training::{OptimizerConfig, OptimizerKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Shapes,
    Tokens,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Shapes => "shapes",
            Task::Tokens => "tokens",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    Grid { rows: usize, cols: usize, connectivity: usize },
    File(PathBuf),
    Knn { points: PathBuf, k: usize, metric: Metric },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub cell: CellKind,
    pub hidden: usize,
    pub k: usize,
    pub peepholes: Peepholes,
    pub layers: usize,
    /// `sigmoid`, `pooled` or `vertex`; defaults by task.
    pub readout: String,
    pub graph: GraphSource,
    pub sigma: KernelWidth,
    pub lambda: LambdaMaxMode,
    pub train_data: PathBuf,
    pub valid_data: PathBuf,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

fn metric_str(m: Metric) -> &'static str {
    match m {
        Metric::Euclidean => "euclidean",
        Metric::Cosine => "cosine",
    }
}

pub fn parse_metric(s: &str) -> Result<Metric> {
    match s {
        "euclidean" => Ok(Metric::Euclidean),
        "cosine" => Ok(Metric::Cosine),
        _ => Err(Error::invalid(format!("unknown metric `{s}` (euclidean | cosine)"))),
    }
}

pub fn parse_sigma(s: &str) -> Result<KernelWidth> {
    if s == "auto" {
        return Ok(KernelWidth::Auto);
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(KernelWidth::Fixed(v)),
        _ => Err(Error::invalid(format!("sigma must be `auto` or a positive number, got `{s}`"))),
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

const KEYS: &[&str] = &[
    "task",
    "cell.kind",
    "cell.hidden",
    "cell.k",
    "cell.peepholes",
    "cell.layers",
    "model.readout",
    "graph.source",
    "graph.rows",
    "graph.cols",
    "graph.connectivity",
    "graph.file",
    "graph.points",
    "graph.k",
    "graph.metric",
    "graph.sigma",
    "graph.lambda",
    "graph.lambda_tol",
    "graph.lambda_max_iter",
    "data.train",
    "data.valid",
    "optim.kind",
    "optim.lr",
    "optim.decay",
    "optim.epsilon",
    "optim.max_grad_norm",
    "optim.lr_decay",
    "optim.lr_decay_start",
    "train.unroll",
    "train.batch",
    "train.epochs",
    "train.dropout_keep",
    "train.patience",
    "train.seed",
    "train.deterministic",
    "train.max_steps",
    "output.dir",
];

impl RunConfig {
    /// Parses a config; unknown keys, repeated keys and malformed values are
    /// errors carrying the line number and key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(no, format!("expected `key = value`, found `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::parse(no, format!("empty key or value in `{line}`")));
            }
            if entries.iter().any(|(_, e, _)| e == k) {
                return Err(Error::parse(no, format!("key `{k}` given twice")));
            }
            entries.push((no, k.to_string(), v.to_string()));
        }
        if let Some((no, k, _)) = entries.iter().find(|(_, k, _)| !KEYS.contains(&k.as_str())) {
            return Err(Error::parse(*no, format!("unknown key `{k}`")));
        }
        let mut cfg = Reader { entries, used: Vec::new() };
        let out = cfg.build()?;
        // Known keys that the chosen options never read, e.g. `graph.k` for a grid.
        if let Some((no, k, _)) = cfg.entries.iter().find(|(_, k, _)| !cfg.used.contains(k)) {
            return Err(Error::parse(*no, format!("key `{k}` does not apply to this configuration")));
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("task", self.task.as_str().into());
        kv("cell.kind", self.cell.as_str().into());
        kv("cell.hidden", self.hidden.to_string());
        kv("cell.k", self.k.to_string());
        kv("cell.peepholes", self.peepholes.as_str().into());
        kv("cell.layers", self.layers.to_string());
        kv("model.readout", self.readout.clone());
        match &self.graph {
            GraphSource::Grid { rows, cols, connectivity } => {
                kv("graph.source", "grid".into());
                kv("graph.rows", rows.to_string());
                kv("graph.cols", cols.to_string());
                kv("graph.connectivity", connectivity.to_string());
            }
            GraphSource::File(p) => {
                kv("graph.source", "file".into());
                kv("graph.file", p.display().to_string());
            }
            GraphSource::Knn { points, k, metric } => {
                kv("graph.source", "knn".into());
                kv("graph.points", points.display().to_string());
                kv("graph.k", k.to_string());
                kv("graph.metric", metric_str(*metric).into());
            }
        }
        kv(
            "graph.sigma",
            match self.sigma {
                KernelWidth::Auto => "auto".into(),
                KernelWidth::Fixed(v) => fmt_f64(v),
            },
        );
        match self.lambda {
            LambdaMaxMode::UpperBound => kv("graph.lambda", "bound".into()),
            LambdaMaxMode::PowerIteration { tol, max_iter } => {
                kv("graph.lambda", "power".into());
                kv("graph.lambda_tol", fmt_f64(tol));
                kv("graph.lambda_max_iter", max_iter.to_string());
            }
        }
        kv("data.train", self.train_data.display().to_string());
        kv("data.valid", self.valid_data.display().to_string());
        let o = &self.optim;
        kv("optim.kind", o.kind.as_str().into());
        kv("optim.lr", fmt_f64(o.learning_rate));
        kv("optim.decay", fmt_f64(o.decay_rate));
        kv("optim.epsilon", fmt_f64(o.epsilon));
        kv("optim.max_grad_norm", fmt_f64(o.max_grad_norm));
        kv("optim.lr_decay", fmt_f64(o.lr_decay));
        kv("optim.lr_decay_start", o.lr_decay_start.to_string());
        let t = &self.train;
        kv("train.unroll", t.unroll.to_string());
        kv("train.batch", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.dropout_keep", fmt_f64(t.dropout_keep));
        kv("train.patience", t.patience.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.deterministic", t.deterministic.to_string());
        if let Some(m) = t.max_steps {
            kv("train.max_steps", m.to_string());
        }
        kv("output.dir", self.output_dir.display().to_string());
        s
    }

    /// Resolves a configured path against the directory holding the config file.
    pub fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

struct Reader {
    entries: Vec<(usize, String, String)>,
    used: Vec<String>,
}

impl Reader {
    fn raw(&mut self, key: &str) -> Option<(usize, String)> {
        let (no, _, v) = self.entries.iter().find(|(_, k, _)| k == key)?;
        self.used.push(key.to_string());
        Some((*no, v.clone()))
    }

    fn get<V>(&mut self, key: &str, default: Option<V>, f: impl Fn(&str) -> Result<V>) -> Result<V> {
        match self.raw(key) {
            Some((no, v)) => f(&v).map_err(|e| {
                let msg = match e {
                    Error::InvalidArgument(m) => m,
                    e => e.to_string(),
                };
                Error::parse(no, format!("key `{key}`: {msg}"))
            }),
            None => default.ok_or_else(|| Error::invalid(format!("missing required key `{key}`"))),
        }
    }

    fn num<V: std::str::FromStr>(&mut self, key: &str, default: Option<V>) -> Result<V> {
        self.get(key, default, |s| {
            s.parse()
                .map_err(|_| Error::invalid(format!("invalid number `{s}`")))
        })
    }

    fn path(&mut self, key: &str) -> Result<PathBuf> {
        self.get(key, None, |s| Ok(PathBuf::from(s)))
    }

    fn build(&mut self) -> Result<RunConfig> {
        let task = self.get("task", None, |s| match s {
            "shapes" => Ok(Task::Shapes),
            "tokens" => Ok(Task::Tokens),
            _ => Err(Error::invalid(format!("unknown task `{s}` (shapes | tokens)"))),
        })?;
        let cell = self.get("cell.kind", None, |s| s.parse::<CellKind>())?;
        let hidden = self.num("cell.hidden", None)?;
        let k = self.num("cell.k", Some(1))?;
        let peepholes = self.get("cell.peepholes", Some(Peepholes::PerVertex), |s| s.parse())?;
        let layers = self.num("cell.layers", Some(1))?;
        let default_readout = match task {
            Task::Shapes => "sigmoid",
            Task::Tokens => "pooled",
        };
        let readout = self.get("model.readout", Some(default_readout.to_string()), |s| match (task, s) {
            (Task::Shapes, "sigmoid") | (Task::Tokens, "pooled" | "vertex") => Ok(s.to_string()),
            _ => Err(Error::invalid(format!("readout `{s}` does not fit task {}", task.as_str()))),
        })?;
        let source = self.get("graph.source", None, |s| match s {
            "grid" | "file" | "knn" => Ok(s.to_string()),
            _ => Err(Error::invalid(format!("unknown graph source `{s}` (grid | file | knn)"))),
        })?;
        let graph = match source.as_str() {
            "grid" => GraphSource::Grid {
                rows: self.num("graph.rows", None)?,
                cols: self.num("graph.cols", None)?,
                connectivity: self.get("graph.connectivity", Some(8), |s| match s {
                    "4" => Ok(4),
                    "8" => Ok(8),
                    _ => Err(Error::invalid(format!("connectivity must be 4 or 8, got `{s}`"))),
                })?,
            },
            "file" => GraphSource::File(self.path("graph.file")?),
            _ => GraphSource::Knn {
                points: self.path("graph.points")?,
                k: self.num("graph.k", None)?,
                metric: self.get("graph.metric", Some(Metric::Euclidean), parse_metric)?,
            },
        };
        let sigma = self.get("graph.sigma", Some(KernelWidth::Auto), parse_sigma)?;
        let lambda_kind = self.get("graph.lambda", Some("power".to_string()), |s| match s {
            "power" | "bound" => Ok(s.to_string()),
            _ => Err(Error::invalid(format!("unknown lambda mode `{s}` (power | bound)"))),
        })?;
        let lambda = if lambda_kind == "bound" {
            LambdaMaxMode::UpperBound
        } else {
            let LambdaMaxMode::PowerIteration { tol, max_iter } = LambdaMaxMode::default() else {
                unreachable!()
            };
            LambdaMaxMode::PowerIteration {
                tol: self.num("graph.lambda_tol", Some(tol))?,
                max_iter: self.num("graph.lambda_max_iter", Some(max_iter))?,
            }
        };
        let train_data = self.path("data.train")?;
        let valid_data = self.path("data.valid")?;

        let kind = self.get("optim.kind", Some(OptimizerKind::RmsProp), |s| s.parse())?;
        let d = OptimizerConfig::for_kind(kind);
        let optim = OptimizerConfig {
            kind,
            learning_rate: self.num("optim.lr", Some(d.learning_rate))?,
            decay_rate: self.num("optim.decay", Some(d.decay_rate))?,
            epsilon: self.num("optim.epsilon", Some(d.epsilon))?,
            max_grad_norm: self.num("optim.max_grad_norm", Some(d.max_grad_norm))?,
            lr_decay: self.num("optim.lr_decay", Some(d.lr_decay))?,
            lr_decay_start: self.num("optim.lr_decay_start", Some(d.lr_decay_start))?,
        };
        let t = TrainConfig::default();
        let train = TrainConfig {
            unroll: self.num("train.unroll", Some(t.unroll))?,
            batch_size: self.num("train.batch", Some(t.batch_size))?,
            epochs: self.num("train.epochs", Some(t.epochs))?,
            dropout_keep: self.num("train.dropout_keep", Some(t.dropout_keep))?,
            patience: self.num("train.patience", Some(t.patience))?,
            seed: self.num("train.seed", Some(t.seed))?,
            deterministic: self.num("train.deterministic", Some(t.deterministic))?,
            max_steps: match self.raw("train.max_steps") {
                None => None,
                Some((no, v)) => Some(
                    v.parse()
                        .map_err(|_| Error::parse(no, format!("key `train.max_steps`: invalid number `{v}`")))?,
                ),
            },
        };
        let output_dir = self.path("output.dir")?;
        let cfg = RunConfig {
            task,
            cell,
            hidden,
            k,
            peepholes,
            layers,
            readout,
            graph,
            sigma,
            lambda,
            train_data,
            valid_data,
            optim,
            train,
            output_dir,
        };
        cfg.optim.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}
