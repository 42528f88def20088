use super::*;
use crate::cells::Peepholes;
use crate::training::{OptimizerConfig, OptimizerState};

fn sample(kind: CellKind, readout: Readout, optim: OptimizerConfig) -> Checkpoint {
    let g: Graph<f64> = grid_graph(3, 3, 8, crate::graph::KernelWidth::Auto).unwrap();
    let (n, d) = if readout.is_token() { (9, 1) } else { (9, 2) };
    let spec = ModelSpec::new(CellSpec::new(kind, n, d, 3, 2).with_peepholes(Peepholes::PerVertex), readout)
        .with_layers(2);
    let model = Model::<f64>::init(spec, 7).unwrap();
    let mut state = TrainState::new(model, optim, 3);
    let shapes: Vec<usize> = state.model.slices().iter().map(|s| s.len()).collect();
    state.optimizer = OptimizerState::new(optim, &shapes);
    for (i, acc) in state.optimizer.accumulators.iter_mut().enumerate() {
        for (j, a) in acc.iter_mut().enumerate() {
            *a = 0.1 / (1 + i + j) as f64;
        }
    }
    state.epoch = 4;
    state.step = 17;
    state.stopping.observe(2, 0.3);
    Checkpoint {
        task: if readout.is_token() { Task::Tokens } else { Task::Shapes },
        state,
        graph_n: g.n(),
        graph_edges: g.edges(),
        lambda_max: g.lambda_max().unwrap(),
        unroll: 5,
        batch_size: 4,
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    for (kind, readout, optim) in [
        (CellKind::GcLstmM2, Readout::Sigmoid, OptimizerConfig::rmsprop()),
        (CellKind::GcGru, Readout::Pooled { vocab: 9 }, OptimizerConfig::clipped_sgd()),
        (CellKind::FcLstm, Readout::Vertex, OptimizerConfig::rmsprop()),
    ] {
        let ck = sample(kind, readout, optim);
        let text = ck.to_text();
        let back = Checkpoint::parse(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_text(), text);
    }
}

#[test]
fn mismatched_spec_names_the_tensor() {
    let ck = sample(CellKind::GcLstmM2, Readout::Sigmoid, OptimizerConfig::rmsprop());
    let mut other = *ck.model().spec();
    other.cell.d_h = 4;
    let msg = ck.check_spec(&other).unwrap_err().to_string();
    assert!(msg.contains("l0."), "{msg}");
    ck.check_spec(ck.model().spec()).unwrap();
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let text = sample(CellKind::GcRnn, Readout::Sigmoid, OptimizerConfig::rmsprop()).to_text();
    assert!(Checkpoint::parse(&text.replacen(CKPT_MAGIC, "GCRNCKPT v0", 1)).is_err());
    let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
    assert!(Checkpoint::parse(&truncated).is_err());
    let renamed = text.replacen("cell.hidden = 3", "cell.hidden = 5", 1);
    let msg = Checkpoint::parse(&renamed).unwrap_err().to_string();
    assert!(msg.contains("tensor `"), "{msg}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(["gcrn", "gradcheck", "--cell", "gcrnn", "--trials", "0"]), 2);
    assert_eq!(run(["gcrn", "gradcheck", "--cell", "nope"]), 2);
    assert_eq!(run(["gcrn", "train", "--config", "/nonexistent/run.cfg"]), 2);
    assert_eq!(run(["gcrn", "frobnicate"]), 2);
}

#[test]
fn gradcheck_exit_codes() {
    assert_eq!(run(["gcrn", "gradcheck", "--cell", "gcrnn", "--trials", "2"]), 0);
    assert_eq!(
        run(["gcrn", "gradcheck", "--cell", "gcrnn", "--trials", "2", "--corrupt-gradient"]),
        1
    );
}
