//! Versioned text checkpoints: named tensors followed by a metadata block.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::cells::CellSpec;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::training::{
    parse_readout, EarlyStopping, Model, ModelSpec, OptimizerConfig, OptimizerState, Readout, TrainState,
};

use super::config::Task;

pub const CKPT_MAGIC: &str = "GCRNCKPT v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task: Task,
    pub state: TrainState<f64>,
    /// Graph the model was trained on, so evaluation rebuilds the same Laplacian.
    pub graph_n: usize,
    pub graph_edges: Vec<(usize, usize, f64)>,
    pub lambda_max: f64,
    pub unroll: usize,
    pub batch_size: usize,
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_tensor(s: &mut String, name: &str, shape: &[usize], values: &[f64]) {
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    let _ = writeln!(s, "{name} {} {}", shape.len(), dims.join(" "));
    let vals: Vec<String> = values.iter().map(|&v| fmt(v)).collect();
    let _ = writeln!(s, "{}", vals.join(" "));
}

impl Checkpoint {
    pub fn graph(&self) -> Result<Graph<f64>> {
        Graph::from_edges(self.graph_n, &self.graph_edges)
    }

    pub fn model(&self) -> &Model<f64> {
        &self.state.model
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{CKPT_MAGIC}\n");
        let model = &self.state.model;
        let layout = model.layout();
        for ((name, shape), vals) in layout.iter().zip(model.slices()) {
            write_tensor(&mut s, name, shape, vals);
        }
        for ((name, _), acc) in layout.iter().zip(&self.state.optimizer.accumulators) {
            write_tensor(&mut s, &format!("opt.{name}"), &[acc.len()], acc);
        }
        let edges: Vec<f64> = self
            .graph_edges
            .iter()
            .flat_map(|&(i, j, w)| [i as f64, j as f64, w])
            .collect();
        write_tensor(&mut s, "graph.edges", &[self.graph_edges.len(), 3], &edges);

        s.push_str("meta\n");
        let spec = model.spec();
        let c = &spec.cell;
        let o = &self.state.optimizer.config;
        let st = &self.state.stopping;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("task", self.task.as_str().into());
        kv("cell.kind", c.kind.as_str().into());
        kv("cell.n", c.n.to_string());
        kv("cell.d_x", c.d_x.to_string());
        kv("cell.hidden", c.d_h.to_string());
        kv("cell.k", c.k.to_string());
        kv("cell.peepholes", c.peepholes.as_str().into());
        kv("cell.layers", spec.layers.to_string());
        kv("model.readout", spec.readout.as_str().into());
        if let Readout::Pooled { vocab } = spec.readout {
            kv("model.vocab", vocab.to_string());
        }
        kv("graph.n", self.graph_n.to_string());
        kv("graph.lambda_max", fmt(self.lambda_max));
        kv("optim.kind", o.kind.as_str().into());
        kv("optim.lr", fmt(o.learning_rate));
        kv("optim.decay", fmt(o.decay_rate));
        kv("optim.epsilon", fmt(o.epsilon));
        kv("optim.max_grad_norm", fmt(o.max_grad_norm));
        kv("optim.lr_decay", fmt(o.lr_decay));
        kv("optim.lr_decay_start", o.lr_decay_start.to_string());
        kv("train.unroll", self.unroll.to_string());
        kv("train.batch", self.batch_size.to_string());
        kv("state.epoch", self.state.epoch.to_string());
        kv("state.step", self.state.step.to_string());
        kv("state.best_valid", fmt(st.best));
        kv(
            "state.best_epoch",
            st.best_epoch.map_or_else(|| "none".into(), |e| e.to_string()),
        );
        kv("state.since_best", st.since_best.to_string());
        kv("state.patience", st.patience.to_string());
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.first().map(|l| l.trim()) != Some(CKPT_MAGIC) {
            return Err(Error::parse(
                1,
                format!("expected header `{CKPT_MAGIC}`, found `{}`", lines.first().unwrap_or(&"")),
            ));
        }
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let mut i = 1;
        while i < lines.len() && lines[i].trim() != "meta" {
            let no = i + 1;
            let f: Vec<&str> = lines[i].split_whitespace().collect();
            if f.len() < 2 {
                return Err(Error::parse(no, "expected tensor header `name ndim dims…`"));
            }
            let ndim: usize = f[1]
                .parse()
                .map_err(|_| Error::parse(no, format!("invalid ndim `{}`", f[1])))?;
            if f.len() != 2 + ndim {
                return Err(Error::parse(no, format!("tensor `{}` declares {ndim} dims", f[0])));
            }
            let shape = f[2..]
                .iter()
                .map(|d| d.parse().map_err(|_| Error::parse(no, format!("invalid dimension `{d}`"))))
                .collect::<Result<Vec<usize>>>()?;
            let vals_line = lines
                .get(i + 1)
                .ok_or_else(|| Error::parse(no + 1, format!("missing values of tensor `{}`", f[0])))?;
            let vals = vals_line
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::parse(no + 1, format!("invalid value `{v}`"))))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != shape.iter().product::<usize>() {
                return Err(Error::parse(
                    no + 1,
                    format!("tensor `{}` holds {} values, shape {shape:?} needs {}", f[0], vals.len(), shape.iter().product::<usize>()),
                ));
            }
            tensors.push((f[0].to_string(), shape, vals));
            i += 2;
        }
        if i >= lines.len() {
            return Err(Error::parse(lines.len(), "missing `meta` block"));
        }
        let mut meta = BTreeMap::new();
        for (j, line) in lines.iter().enumerate().skip(i + 1) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(j + 1, format!("expected `key = value`, found `{line}`")))?;
            meta.insert(k.trim().to_string(), (j + 1, v.trim().to_string()));
        }
        let get = |k: &str| -> Result<&(usize, String)> {
            meta.get(k).ok_or_else(|| Error::invalid(format!("checkpoint metadata lacks `{k}`")))
        };
        fn num<V: std::str::FromStr>(e: &(usize, String), k: &str) -> Result<V> {
            e.1.parse().map_err(|_| Error::parse(e.0, format!("invalid value for `{k}`: `{}`", e.1)))
        }
        macro_rules! m {
            ($k:literal) => {
                num(get($k)?, $k)?
            };
        }
        let task = match get("task")?.1.as_str() {
            "shapes" => Task::Shapes,
            "tokens" => Task::Tokens,
            t => return Err(Error::parse(get("task")?.0, format!("unknown task `{t}`"))),
        };
        let kind = get("cell.kind")?.1.parse()?;
        let cell = CellSpec::new(kind, m!("cell.n"), m!("cell.d_x"), m!("cell.hidden"), m!("cell.k"))
            .with_peepholes(get("cell.peepholes")?.1.parse()?);
        let vocab = match meta.get("model.vocab") {
            Some(e) => num(e, "model.vocab")?,
            None => 0,
        };
        let readout = parse_readout(&get("model.readout")?.1, vocab)?;
        let spec = ModelSpec::new(cell, readout).with_layers(m!("cell.layers"));
        let mut model = Model::<f64>::zeros(spec)?;
        let layout = model.layout();

        let mut by_name: BTreeMap<&str, (&Vec<usize>, &Vec<f64>)> = BTreeMap::new();
        for (n, s, v) in &tensors {
            if by_name.insert(n, (s, v)).is_some() {
                return Err(Error::invalid(format!("tensor `{n}` appears twice")));
            }
        }
        let take = |name: &str, shape: &[usize]| -> Result<&Vec<f64>> {
            let (s, v) = by_name
                .get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor `{name}`")))?;
            if s.as_slice() != shape {
                return Err(Error::dim(format!("tensor `{name}` has shape {s:?}, expected {shape:?}")));
            }
            Ok(v)
        };
        for ((name, shape), dst) in layout.iter().zip(model.slices_mut()) {
            dst.copy_from_slice(take(name, shape)?);
        }
        let optim = OptimizerConfig {
            kind: get("optim.kind")?.1.parse()?,
            learning_rate: m!("optim.lr"),
            decay_rate: m!("optim.decay"),
            epsilon: m!("optim.epsilon"),
            max_grad_norm: m!("optim.max_grad_norm"),
            lr_decay: m!("optim.lr_decay"),
            lr_decay_start: m!("optim.lr_decay_start"),
        };
        let shapes: Vec<usize> = model.slices().iter().map(|s| s.len()).collect();
        let mut opt = OptimizerState::new(optim, &shapes);
        let mut expected: Vec<String> = layout.iter().map(|(n, _)| n.clone()).collect();
        for ((name, _), acc) in layout.iter().zip(opt.accumulators.iter_mut()) {
            let key = format!("opt.{name}");
            let len = acc.len();
            acc.copy_from_slice(take(&key, &[len])?);
            expected.push(key);
        }
        let graph_n: usize = m!("graph.n");
        let (es, ev) = by_name
            .get("graph.edges")
            .ok_or_else(|| Error::invalid("checkpoint lacks tensor `graph.edges`"))?;
        if es.len() != 2 || es[1] != 3 {
            return Err(Error::dim(format!("tensor `graph.edges` has shape {es:?}, expected [m, 3]")));
        }
        expected.push("graph.edges".into());
        if let Some((n, _, _)) = tensors.iter().find(|(n, _, _)| !expected.contains(n)) {
            return Err(Error::invalid(format!("unexpected tensor `{n}` for this model")));
        }
        let graph_edges = ev
            .chunks(3)
            .map(|e| (e[0] as usize, e[1] as usize, e[2]))
            .collect();
        let best_epoch = match get("state.best_epoch")?.1.as_str() {
            "none" => None,
            _ => Some(m!("state.best_epoch")),
        };
        let state = TrainState {
            model,
            optimizer: opt,
            epoch: m!("state.epoch"),
            step: m!("state.step"),
            stopping: EarlyStopping {
                patience: m!("state.patience"),
                best: m!("state.best_valid"),
                best_epoch,
                since_best: m!("state.since_best"),
            },
        };
        Ok(Self {
            task,
            state,
            graph_n,
            graph_edges,
            lambda_max: m!("graph.lambda_max"),
            unroll: m!("train.unroll"),
            batch_size: m!("train.batch"),
        })
    }

    /// Checks that the stored parameters fit `expected`, naming the first tensor that does not.
    pub fn check_spec(&self, expected: &ModelSpec) -> Result<()> {
        let want = Model::<f64>::zeros(*expected)?.layout();
        let have = self.state.model.layout();
        for (w, h) in want.iter().zip(&have) {
            if w != h {
                return Err(Error::dim(format!(
                    "tensor `{}` has shape {:?}, expected `{}` with shape {:?}",
                    h.0, h.1, w.0, w.1
                )));
            }
        }
        if want.len() != have.len() {
            let extra = want.get(have.len()).or_else(|| have.get(want.len())).expect("lengths differ");
            return Err(Error::dim(format!("tensor `{}` present in only one of the two models", extra.0)));
        }
        if self.state.model.spec() != expected {
            return Err(Error::dim(format!(
                "checkpoint holds a {} model, expected {}",
                self.state.model.spec().cell.kind,
                expected.cell.kind
            )));
        }
        Ok(())
    }
}
