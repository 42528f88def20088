//! Synthetic moving-shape sequences, token streams, batching and dataset files.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const SEQ_MAGIC: &str = "GCRNSEQ v1";
pub const TOK_MAGIC: &str = "GCRNTOK v1";

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeKind {
    Square,
    Cross,
    /// Arbitrary bitmap with values in `[0, 1]`; `size` is ignored.
    Glyph(Mat<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesConfig {
    pub patch: usize,
    pub n_shapes: usize,
    pub shape: ShapeKind,
    /// Side length of square and cross sprites.
    pub size: usize,
    /// Each velocity component is drawn from `-max_speed..=max_speed`.
    pub max_speed: i64,
    pub rotate: bool,
    /// Angular speeds are drawn from `[-max_angular, max_angular]` radians per frame.
    pub max_angular: f64,
    pub seq_len: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            n_shapes: 2,
            shape: ShapeKind::Square,
            size: 4,
            max_speed: 2,
            rotate: false,
            max_angular: 0.3,
            seq_len: 20,
            count: 100,
            seed: 0,
        }
    }
}

/// Sprite bitmap for a shape kind.
pub fn sprite(kind: &ShapeKind, size: usize) -> Mat<f64> {
    match kind {
        ShapeKind::Square => Mat::from_fn(size, size, |_, _| 1.0),
        ShapeKind::Cross => {
            let t = (size / 3).max(1);
            let lo = (size - t) / 2;
            let band = |i: usize| (lo..lo + t).contains(&i);
            Mat::from_fn(size, size, |r, c| if band(r) || band(c) { 1.0 } else { 0.0 })
        }
        ShapeKind::Glyph(m) => m.clone(),
    }
}

/// One moving sprite. `pos` is the top-left corner of its bounding box in
/// `(row, col)` pixels, `vel` its displacement per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SpriteState {
    pub bitmap: Mat<f64>,
    pub pos: (i64, i64),
    pub vel: (i64, i64),
    pub angle: f64,
    pub omega: f64,
    /// Resample through the rotation path even at angle zero.
    pub rotate: bool,
}

impl SpriteState {
    /// Side lengths of the box the sprite may occupy: the bitmap itself, or a
    /// square canvas holding every rotation of it.
    pub fn extent(&self) -> (usize, usize) {
        let (h, w) = self.bitmap.shape();
        if !self.rotate {
            return (h, w);
        }
        let diag = ((h * h + w * w) as f64).sqrt().ceil() as usize;
        let side = |s: usize| s + 2 * (diag.max(s) - s).div_ceil(2);
        let c = side(h).max(side(w));
        // Keep both margins integral so angle zero is an exact copy.
        let c = if (c - h) % 2 != 0 || (c - w) % 2 != 0 { c + 1 } else { c };
        (c, c)
    }

    /// The sprite as drawn in its current orientation, `extent()` sized.
    pub fn raster(&self) -> Mat<f64> {
        if !self.rotate {
            return self.bitmap.clone();
        }
        let (ch, cw) = self.extent();
        let (h, w) = self.bitmap.shape();
        let (oy, ox) = (((ch - h) / 2) as f64, ((cw - w) / 2) as f64);
        let (cy, cx) = (ch as f64 / 2.0, cw as f64 / 2.0);
        let (s, c) = (-self.angle).sin_cos();
        Mat::from_fn(ch, cw, |r, q| {
            let (py, px) = (r as f64 + 0.5 - cy, q as f64 + 0.5 - cx);
            let sy = c * py + s * px + cy - oy - 0.5;
            let sx = -s * py + c * px + cx - ox - 0.5;
            bilinear(&self.bitmap, sy, sx).clamp(0.0, 1.0)
        })
    }
}

fn bilinear(m: &Mat<f64>, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |r: f64, c: f64| {
        if r < 0.0 || c < 0.0 || r >= m.rows() as f64 || c >= m.cols() as f64 {
            0.0
        } else {
            m[(r as usize, c as usize)]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    if fy == 0.0 {
        top
    } else {
        top * (1.0 - fy) + bottom * fy
    }
}

/// Advances one axis; the velocity flips whenever the box touches a wall.
fn bounce(pos: i64, vel: i64, max: i64) -> (i64, i64) {
    if max == 0 {
        return (0, vel);
    }
    let (mut p, mut v) = (pos + vel, vel);
    while p < 0 || p > max {
        if p < 0 {
            p = -p;
        } else {
            p = 2 * max - p;
        }
        v = -v;
    }
    if (p == 0 && v < 0) || (p == max && v > 0) {
        v = -v;
    }
    (p, v)
}

/// Renders `seq_len` frames of a `patch x patch` canvas as `n x 1` signals with
/// vertex index `row * patch + col`. Overlaps combine by elementwise max.
pub fn render_sequence(patch: usize, sprites: &[SpriteState], seq_len: usize) -> Result<Vec<Mat<f64>>> {
    let mut sprites = sprites.to_vec();
    for s in &sprites {
        let (h, w) = s.extent();
        if h > patch || w > patch {
            return Err(Error::invalid(format!("sprite of {h}x{w} does not fit a {patch}x{patch} patch")));
        }
        let (mr, mc) = ((patch - h) as i64, (patch - w) as i64);
        if !(0..=mr).contains(&s.pos.0) || !(0..=mc).contains(&s.pos.1) {
            return Err(Error::invalid("sprite starts outside the patch"));
        }
    }
    let mut frames = Vec::with_capacity(seq_len);
    for _ in 0..seq_len {
        let mut frame = Mat::zeros(patch * patch, 1);
        for s in &sprites {
            let img = s.raster();
            for r in 0..img.rows() {
                for c in 0..img.cols() {
                    let v = (s.pos.0 as usize + r) * patch + s.pos.1 as usize + c;
                    frame[(v, 0)] = f64::max(frame[(v, 0)], img[(r, c)]);
                }
            }
        }
        frames.push(frame);
        for s in &mut sprites {
            let (h, w) = s.extent();
            let (r, vr) = bounce(s.pos.0, s.vel.0, (patch - h) as i64);
            let (c, vc) = bounce(s.pos.1, s.vel.1, (patch - w) as i64);
            s.pos = (r, c);
            s.vel = (vr, vc);
            s.angle += s.omega;
        }
    }
    Ok(frames)
}

/// A set of equally shaped signal sequences, each frame `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub n: usize,
    pub d: usize,
    pub seq_len: usize,
    pub sequences: Vec<Vec<Mat<f64>>>,
}

impl SequenceDataset {
    pub fn new(n: usize, d: usize, seq_len: usize, sequences: Vec<Vec<Mat<f64>>>) -> Result<Self> {
        for (s, seq) in sequences.iter().enumerate() {
            if seq.len() != seq_len {
                return Err(Error::dim(format!("sequence {s} has {} frames, expected {seq_len}", seq.len())));
            }
            if let Some(f) = seq.iter().find(|f| f.shape() != (n, d) || !f.is_finite()) {
                return Err(Error::dim(format!(
                    "sequence {s} holds a {}x{} or non-finite frame, expected finite {n}x{d}",
                    f.rows(),
                    f.cols()
                )));
            }
        }
        Ok(Self { n, d, seq_len, sequences })
    }
}

/// Moving (and optionally rotating) sprites bouncing inside a square patch.
pub fn gen_moving_shapes(config: &ShapesConfig) -> Result<SequenceDataset> {
    let c = config;
    if c.patch == 0 || c.seq_len == 0 {
        return Err(Error::invalid("patch and seq_len must be positive"));
    }
    if c.max_speed < 0 || !(c.max_angular >= 0.0) {
        return Err(Error::invalid("speed ranges must be non-negative"));
    }
    let bitmap = sprite(&c.shape, c.size);
    if bitmap.rows() == 0 || bitmap.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("sprite must be non-empty with values in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut sequences = Vec::with_capacity(c.count);
    for _ in 0..c.count {
        let mut sprites = Vec::with_capacity(c.n_shapes);
        for _ in 0..c.n_shapes {
            let mut s = SpriteState {
                bitmap: bitmap.clone(),
                pos: (0, 0),
                vel: (0, 0),
                angle: 0.0,
                omega: 0.0,
                rotate: c.rotate,
            };
            let (h, w) = s.extent();
            if h > c.patch || w > c.patch {
                return Err(Error::invalid(format!("sprite of {h}x{w} does not fit a {0}x{0} patch", c.patch)));
            }
            s.pos = (
                rng.gen_range(0..=(c.patch - h) as i64),
                rng.gen_range(0..=(c.patch - w) as i64),
            );
            if c.max_speed > 0 {
                while s.vel == (0, 0) {
                    s.vel = (
                        rng.gen_range(-c.max_speed..=c.max_speed),
                        rng.gen_range(-c.max_speed..=c.max_speed),
                    );
                }
            }
            if c.rotate && c.max_angular > 0.0 {
                s.angle = rng.gen_range(0.0..std::f64::consts::TAU);
                s.omega = rng.gen_range(-c.max_angular..=c.max_angular);
            }
            sprites.push(s);
        }
        sequences.push(render_sequence(c.patch, &sprites, c.seq_len)?);
    }
    SequenceDataset::new(c.patch * c.patch, 1, c.seq_len, sequences)
}

/// A token stream over a vocabulary of `vocab` ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenDataset {
    pub vocab: usize,
    pub ids: Vec<usize>,
}

impl TokenDataset {
    pub fn new(vocab: usize, ids: Vec<usize>) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::invalid(format!("token id {id} out of range for vocabulary {vocab}")));
        }
        Ok(Self { vocab, ids })
    }
}

/// `0, 1, …, V-1, 0, 1, …` starting at `offset`.
pub fn cycle_tokens(vocab: usize, len: usize, offset: usize) -> Result<TokenDataset> {
    if vocab == 0 {
        return Err(Error::invalid("vocabulary must be non-empty"));
    }
    TokenDataset::new(vocab, (0..len).map(|t| (offset + t) % vocab).collect())
}

/// `V` points evenly spaced on the unit circle, token `i` at angle `2πi/V`.
pub fn circle_embedding(vocab: usize) -> Mat<f64> {
    Mat::from_fn(vocab, 2, |i, c| {
        let a = std::f64::consts::TAU * i as f64 / vocab as f64;
        if c == 0 {
            a.cos()
        } else {
            a.sin()
        }
    })
}

/// One-hot frames: frame `t` is `n = V` by 1 with a single 1 at vertex `ids[t]`.
pub fn tokens_to_signals<T: Scalar>(ids: &[usize], vocab: usize) -> Result<Vec<Mat<T>>> {
    ids.iter()
        .map(|&id| {
            if id >= vocab {
                return Err(Error::invalid(format!("token id {id} out of range for vocabulary {vocab}")));
            }
            let mut m = Mat::zeros(vocab, 1);
            m[(id, 0)] = T::one();
            Ok(m)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Frames(SequenceDataset),
    Tokens(TokenDataset),
}

impl Dataset {
    /// Vertex count and channels of the input signals.
    pub fn signal_shape(&self) -> (usize, usize) {
        match self {
            Dataset::Frames(s) => (s.n, s.d),
            Dataset::Tokens(t) => (t.vocab, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets<T> {
    /// Next frames, `[t][b]`, each `n x d`.
    Frames(Vec<Vec<Mat<T>>>),
    /// Next token ids, `[t][b]`.
    Tokens(Vec<Vec<usize>>),
}

/// Teacher-forced windows: `inputs[t][b]` is frame `t` of element `b`, targets are
/// the same windows shifted one step ahead.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch<T> {
    pub inputs: Vec<Vec<Mat<T>>>,
    pub targets: Targets<T>,
}

impl<T: Scalar> SequenceBatch<T> {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// Number of scalar targets, the denominator of the mean loss.
    pub fn target_count(&self) -> usize {
        match &self.targets {
            Targets::Frames(f) => f.iter().flatten().map(|m| m.as_slice().len()).sum(),
            Targets::Tokens(t) => t.iter().map(Vec::len).sum(),
        }
    }

    /// The single-element batch holding element `b`.
    pub fn element(&self, b: usize) -> SequenceBatch<T> {
        SequenceBatch {
            inputs: self.inputs.iter().map(|s| vec![s[b].clone()]).collect(),
            targets: match &self.targets {
                Targets::Frames(f) => Targets::Frames(f.iter().map(|s| vec![s[b].clone()]).collect()),
                Targets::Tokens(t) => Targets::Tokens(t.iter().map(|s| vec![s[b]]).collect()),
            },
        }
    }
}

/// Start offsets of the windows of `unroll + 1` frames cut from a sequence of `len`.
fn window_starts(len: usize, unroll: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(1) / unroll).map(move |w| w * unroll)
}

/// Cuts every sequence into contiguous non-overlapping windows of `unroll` inputs
/// plus one look-ahead frame, optionally shuffles the windows, then groups them into
/// batches of `batch_size`; the last batch may be smaller.
pub fn make_batches<T: Scalar>(
    dataset: &Dataset,
    batch_size: usize,
    unroll: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<SequenceBatch<T>>> {
    if batch_size == 0 || unroll == 0 {
        return Err(Error::invalid("batch_size and unroll must be at least 1"));
    }
    // (sequence, start) pairs; token streams are a single sequence.
    let mut windows: Vec<(usize, usize)> = Vec::new();
    match dataset {
        Dataset::Frames(d) => {
            if d.seq_len < unroll + 1 && !d.sequences.is_empty() {
                return Err(Error::invalid(format!(
                    "sequences of {} frames are too short for unroll {unroll}",
                    d.seq_len
                )));
            }
            for s in 0..d.sequences.len() {
                windows.extend(window_starts(d.seq_len, unroll).map(|w| (s, w)));
            }
        }
        Dataset::Tokens(t) => {
            if t.ids.len() < unroll + 1 {
                return Err(Error::invalid(format!(
                    "token stream of {} ids is too short for unroll {unroll}",
                    t.ids.len()
                )));
            }
            windows.extend(window_starts(t.ids.len(), unroll).map(|w| (0, w)));
        }
    }
    if let Some(seed) = shuffle_seed {
        windows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let cast = |m: &Mat<f64>| m.cast::<T>();
    windows
        .chunks(batch_size)
        .map(|chunk| {
            let batch = match dataset {
                Dataset::Frames(d) => {
                    let frame = |t: usize| chunk.iter().map(|&(s, w)| cast(&d.sequences[s][w + t])).collect();
                    SequenceBatch {
                        inputs: (0..unroll).map(frame).collect(),
                        targets: Targets::Frames((1..=unroll).map(frame).collect()),
                    }
                }
                Dataset::Tokens(tk) => {
                    let mut inputs = Vec::with_capacity(unroll);
                    let mut targets = Vec::with_capacity(unroll);
                    for t in 0..unroll {
                        let ids: Vec<usize> = chunk.iter().map(|&(_, w)| tk.ids[w + t]).collect();
                        inputs.push(tokens_to_signals(&ids, tk.vocab)?);
                        targets.push(chunk.iter().map(|&(_, w)| tk.ids[w + t + 1]).collect());
                    }
                    SequenceBatch {
                        inputs,
                        targets: Targets::Tokens(targets),
                    }
                }
            };
            Ok(batch)
        })
        .collect()
}

/// Non-empty lines with 1-based numbers.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_field<F: std::str::FromStr>(line: usize, name: &str, s: &str) -> Result<F> {
    s.parse().map_err(|_| Error::parse(line, format!("invalid {name} `{s}`")))
}

fn expect_header<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, magic: &str) -> Result<()> {
    match lines.next() {
        Some((_, l)) if l == magic => Ok(()),
        Some((no, l)) => Err(Error::parse(no, format!("expected header `{magic}`, found `{l}`"))),
        None => Err(Error::parse(1, format!("empty file, expected header `{magic}`"))),
    }
}

fn read_counts<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    names: &[&str],
) -> Result<(usize, Vec<usize>)> {
    let (no, line) = lines
        .next()
        .ok_or_else(|| Error::parse(2, format!("missing `{}` line", names.join(" "))))?;
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != names.len() {
        return Err(Error::parse(no, format!("expected `{}`", names.join(" "))));
    }
    let vals = f
        .iter()
        .zip(names)
        .map(|(s, name)| parse_field(no, &format!("count field {name}"), s))
        .collect::<Result<_>>()?;
    Ok((no, vals))
}

/// `GCRNSEQ v1`, `S T n d`, then `S·T` frames of `n` lines with `d` values each.
pub fn sequences_to_string(d: &SequenceDataset) -> String {
    let mut s = format!("{SEQ_MAGIC}\n{} {} {} {}\n", d.sequences.len(), d.seq_len, d.n, d.d);
    for frame in d.sequences.iter().flatten() {
        for v in 0..d.n {
            let row: Vec<String> = frame.row(v).iter().map(|x| format!("{x:?}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
    }
    s
}

pub fn parse_sequences(text: &str) -> Result<SequenceDataset> {
    let mut lines = numbered_lines(text);
    expect_header(&mut lines, SEQ_MAGIC)?;
    let (mut last, c) = read_counts(&mut lines, &["S", "T", "n", "d"])?;
    let (s_count, t_len, n, d) = (c[0], c[1], c[2], c[3]);
    let mut sequences = Vec::with_capacity(s_count.min(1 << 16));
    for _ in 0..s_count {
        let mut seq = Vec::with_capacity(t_len.min(1 << 16));
        for _ in 0..t_len {
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                let (no, line) = lines
                    .next()
                    .ok_or_else(|| Error::parse(last + 1, "file truncated before all frames were read"))?;
                last = no;
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != d {
                    return Err(Error::parse(no, format!("expected {d} values, found {}", f.len())));
                }
                for x in f {
                    let v: f64 = parse_field(no, "value", x)?;
                    if !v.is_finite() {
                        return Err(Error::parse(no, format!("non-finite value `{x}`")));
                    }
                    data.push(v);
                }
            }
            seq.push(Mat::from_vec(n, d, data)?);
        }
        sequences.push(seq);
    }
    if let Some((no, _)) = lines.next() {
        return Err(Error::parse(no, "trailing content after the declared frames"));
    }
    SequenceDataset::new(n, d, t_len, sequences)
}

/// `GCRNTOK v1`, `V count`, then the ids.
pub fn tokens_to_string(t: &TokenDataset) -> String {
    let mut s = format!("{TOK_MAGIC}\n{} {}\n", t.vocab, t.ids.len());
    for chunk in t.ids.chunks(20) {
        let line: Vec<String> = chunk.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn parse_tokens(text: &str) -> Result<TokenDataset> {
    let mut lines = numbered_lines(text);
    expect_header(&mut lines, TOK_MAGIC)?;
    let (head, c) = read_counts(&mut lines, &["V", "count"])?;
    let (vocab, count) = (c[0], c[1]);
    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for (no, line) in lines {
        for s in line.split_whitespace() {
            let id: usize = parse_field(no, "token id", s)?;
            if id >= vocab {
                return Err(Error::parse(no, format!("token id {id} out of range for V = {vocab}")));
            }
            ids.push(id);
        }
    }
    if ids.len() != count {
        return Err(Error::parse(head, format!("count field says {count} ids, file holds {}", ids.len())));
    }
    TokenDataset::new(vocab, ids)
}

pub fn dataset_to_string(d: &Dataset) -> String {
    match d {
        Dataset::Frames(s) => sequences_to_string(s),
        Dataset::Tokens(t) => tokens_to_string(t),
    }
}

/// Parses either format, dispatching on the header line.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    match numbered_lines(text).next() {
        Some((_, TOK_MAGIC)) => parse_tokens(text).map(Dataset::Tokens),
        Some((_, SEQ_MAGIC)) => parse_sequences(text).map(Dataset::Frames),
        Some((no, l)) => Err(Error::parse(
            no,
            format!("expected `{SEQ_MAGIC}` or `{TOK_MAGIC}`, found `{l}`"),
        )),
        None => Err(Error::parse(1, "empty dataset file")),
    }
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    std::fs::write(path, dataset_to_string(d)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Point sets for graph construction: one point per line, `#` starts a comment.
pub fn parse_points(text: &str) -> Result<Mat<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|s| parse_field::<f64>(no + 1, "coordinate", s))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(no + 1, format!("expected {} coordinates, found {}", first.len(), row.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(1, "no points"));
    }
    Mat::from_rows(&rows)
}

pub fn points_to_string(points: &Mat<f64>) -> String {
    let mut s = String::new();
    for r in 0..points.rows() {
        let row: Vec<String> = points.row(r).iter().map(|x| format!("{x:?}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

pub fn load_points(path: &Path) -> Result<Mat<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_points(&text)
}
