//! End-to-end checks of the `gcrn` binary.

use std::path::Path;
use std::process::{Command, Output};

use gcrn::data::{save_dataset, Dataset, TokenDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gcrn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcrn"))
        .args(args)
        .current_dir(dir)
        .env("GCRN_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = gcrn(args, dir);
    assert!(out.status.success(), "gcrn {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], dir: &Path) -> (i32, String) {
    let out = gcrn(args, dir);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn shapes_data(dir: &Path) {
    ok(&["gen", "shapes", "--out", "train.seq", "--patch", "8", "--size", "3", "--len", "9", "--count", "20", "--seed", "1"], dir);
    ok(&["gen", "shapes", "--out", "valid.seq", "--patch", "8", "--size", "3", "--len", "9", "--count", "6", "--seed", "2"], dir);
}

fn shapes_config(epochs: usize, out: &str) -> String {
    format!(
        "task = shapes\ncell.kind = gclstm_m2\ncell.hidden = 3\ncell.k = 2\n\
         graph.source = grid\ngraph.rows = 8\ngraph.cols = 8\n\
         data.train = train.seq\ndata.valid = valid.seq\n\
         train.unroll = 4\ntrain.batch = 8\ntrain.epochs = {epochs}\ntrain.seed = 5\noutput.dir = {out}\n"
    )
}

/// `(split, loss)` of every metrics row.
fn metric_rows(path: &Path) -> Vec<(String, String)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,split,loss,perplexity,wall_ms"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 5, "{l}");
            (f[1].to_string(), f[2].to_string())
        })
        .collect()
}

fn eval_losses(stdout: &str) -> Vec<(f64, Option<f64>)> {
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("step,loss,perplexity"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].parse().ok())
        })
        .collect()
}

#[test]
fn tiny_run_writes_metrics_and_eval_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    shapes_data(d);
    std::fs::write(d.join("run.cfg"), shapes_config(2, "out")).unwrap();
    ok(&["train", "--config", "run.cfg"], d);
    let rows = metric_rows(&d.join("out/metrics.csv"));
    assert_eq!(rows.len(), 4);
    assert!(d.join("out/best.ckpt").exists());

    // Teacher-forced evaluation of the final parameters repeats the last train-split measurement.
    let last_train: f64 = rows.iter().rev().find(|r| r.0 == "train").unwrap().1.parse().unwrap();
    let eval = eval_losses(&ok(&["eval", "--checkpoint", "out/last.ckpt", "--data", "train.seq"], d));
    assert_eq!(eval.len(), 1);
    assert!(eval[0].0 <= last_train + 1e-9, "{} vs {last_train}", eval[0].0);
    assert!(eval[0].1.is_none());

    let roll = eval_losses(&ok(&["eval", "--checkpoint", "out/last.ckpt", "--data", "valid.seq", "--rollout", "3"], d));
    let single = eval_losses(&ok(&["eval", "--checkpoint", "out/last.ckpt", "--data", "valid.seq"], d));
    assert_eq!(roll.len(), 3);
    assert_eq!(roll[0].0, single[0].0);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    shapes_data(d);
    std::fs::write(d.join("full.cfg"), shapes_config(4, "full")).unwrap();
    std::fs::write(d.join("half.cfg"), shapes_config(2, "split")).unwrap();
    std::fs::write(d.join("rest.cfg"), shapes_config(4, "split")).unwrap();
    ok(&["train", "--config", "full.cfg"], d);
    ok(&["train", "--config", "half.cfg"], d);
    ok(&["train", "--config", "rest.cfg", "--resume", "split/last.ckpt"], d);
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("full/metrics.csv"), read("split/metrics.csv"));
    assert_eq!(read("full/last.ckpt"), read("split/last.ckpt"));
    assert_eq!(read("full/best.ckpt"), read("split/best.ckpt"));
    assert!(String::from_utf8(read("split/last.ckpt")).unwrap().contains("state.epoch = 4\n"));
}

#[test]
fn untrained_token_model_is_near_uniform() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let vocab = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ids: Vec<usize> = (0..2000).map(|_| rng.gen_range(0..vocab)).collect();
    save_dataset(&d.join("random.tok"), &Dataset::Tokens(TokenDataset::new(vocab, ids).unwrap())).unwrap();
    ok(&["gen", "cycle", "--out", "cycle.tok", "--vocab", "100", "--len", "300", "--points", "points.txt"], d);
    let cfg = "task = tokens\ncell.kind = gcrn_m1\ncell.hidden = 16\ncell.k = 3\n\
               graph.source = knn\ngraph.points = points.txt\ngraph.k = 4\ngraph.metric = cosine\n\
               data.train = cycle.tok\ndata.valid = cycle.tok\ntrain.max_steps = 0\noutput.dir = out\n";
    std::fs::write(d.join("run.cfg"), cfg).unwrap();
    ok(&["train", "--config", "run.cfg"], d);
    let eval = eval_losses(&ok(&["eval", "--checkpoint", "out/last.ckpt", "--data", "random.tok"], d));
    let ppl = eval[0].1.unwrap();
    assert!((80.0..=125.0).contains(&ppl), "perplexity {ppl}");
    assert!((ppl - eval[0].0.exp()).abs() < 1e-9 * ppl);
}

#[test]
fn graph_build_and_info() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("path.graph"), "GCRNGRAPH v1\n2 1\n0 1 1.0\n").unwrap();
    let info = ok(&["graph", "info", "--graph", "path.graph"], d);
    let lmax: f64 = info
        .lines()
        .find_map(|l| l.strip_prefix("lambda_max "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((lmax - 2.0).abs() <= 1e-5, "{info}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: String = (0..30)
        .map(|_| format!("{} {} {}\n", rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()))
        .collect();
    std::fs::write(d.join("pts.txt"), points).unwrap();
    ok(&["graph", "build", "--points", "pts.txt", "--k", "5", "--out", "knn.graph"], d);
    let info = ok(&["graph", "info", "--graph", "knn.graph"], d);
    let field = |name: &str| -> usize {
        info.lines().find_map(|l| l.strip_prefix(name)).unwrap().trim().parse().unwrap()
    };
    assert_eq!(field("vertices "), 30);
    let m = field("edges ");
    assert!((30 * 5 / 2..=30 * 5).contains(&m), "{info}");

    assert_eq!(code(&["graph", "build", "--points", "pts.txt", "--k", "30", "--out", "x.graph"], d).0, 2);
    assert_eq!(code(&["graph", "build", "--points", "pts.txt", "--k", "3", "--metric", "manhattan", "--out", "x.graph"], d).0, 2);
}

#[test]
fn exit_code_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (c, err) = code(&["train", "--config", "nowhere.cfg"], d);
    assert_eq!(c, 2);
    assert!(err.contains("nowhere.cfg"), "{err}");

    std::fs::write(d.join("bad.cfg"), "task = shapes\ncell.kind = gclstm_m2\ncell.hiden = 3\n").unwrap();
    let (c, err) = code(&["train", "--config", "bad.cfg"], d);
    assert_eq!(c, 2);
    assert!(err.contains("line 3") && err.contains("cell.hiden"), "{err}");

    assert_eq!(code(&["gradcheck", "--cell", "gcgru", "--trials", "0"], d).0, 2);
    assert_eq!(code(&["gradcheck", "--cell", "gcgru", "--trials", "3", "--corrupt-gradient"], d).0, 1);
    assert_eq!(code(&["eval"], d).0, 2);

    shapes_data(d);
    std::fs::write(d.join("run.cfg"), shapes_config(1, "out")).unwrap();
    ok(&["train", "--config", "run.cfg"], d);
    ok(&["gen", "cycle", "--out", "t.tok", "--vocab", "64", "--len", "50"], d);
    assert_eq!(code(&["eval", "--checkpoint", "out/last.ckpt", "--data", "t.tok"], d).0, 2);

    // Divergent training reports a numerical failure.
    std::fs::write(d.join("hot.cfg"), shapes_config(3, "hot") + "optim.lr = 1e308\n").unwrap();
    let (c, err) = code(&["train", "--config", "hot.cfg"], d);
    assert_eq!(c, 3, "{err}");
}

#[test]
fn every_cell_passes_gradcheck_with_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    for kind in ["fclstm", "gcrn_m1", "gclstm_m2", "gcrnn", "gcgru"] {
        let out = ok(&["gradcheck", "--cell", kind], tmp.path());
        assert!(out.starts_with("PASS"), "{out}");
    }
}
