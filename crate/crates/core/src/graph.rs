//! Weighted undirected graphs, their normalized and scaled Laplacians, and the
//! `GCRNGRAPH v1` text format.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse::{csr_from_coo, power_iteration_lmax, SparseMatrix};
use crate::tensor::Mat;

/// Header line of the graph file format.
pub const GRAPH_MAGIC: &str = "GCRNGRAPH v1";

/// Seed of the power iteration start vector used for cached `λmax` estimates.
pub const LAMBDA_SEED: u64 = 0x6c61_6d62_6461;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// `1 - cos(x, y)`.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelWidth {
    /// Mean of all retained neighbor distances.
    Auto,
    Fixed(f64),
}

/// How `λmax` of the normalized Laplacian is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMaxMode {
    PowerIteration { tol: f64, max_iter: usize },
    /// The constant 2, an upper bound for every normalized Laplacian.
    UpperBound,
}

impl Default for LambdaMaxMode {
    fn default() -> Self {
        LambdaMaxMode::PowerIteration {
            tol: 1e-6,
            max_iter: 10_000,
        }
    }
}

/// Undirected weighted graph with lazily computed Laplacians.
#[derive(Debug)]
pub struct Graph<T> {
    adjacency: SparseMatrix<T>,
    lambda_mode: LambdaMaxMode,
    laplacian: OnceLock<SparseMatrix<T>>,
    lambda_max: OnceLock<T>,
    scaled_laplacian: OnceLock<SparseMatrix<T>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Self {
            adjacency: self.adjacency.clone(),
            lambda_mode: self.lambda_mode,
            laplacian: self.laplacian.clone(),
            lambda_max: self.lambda_max.clone(),
            scaled_laplacian: self.scaled_laplacian.clone(),
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Wraps an adjacency matrix after checking symmetry, non-negativity and an empty diagonal.
    pub fn from_adjacency(adjacency: SparseMatrix<T>) -> Result<Self> {
        if adjacency.n_rows() != adjacency.n_cols() {
            return Err(Error::dim("adjacency must be square"));
        }
        for (i, j, w) in adjacency.triples() {
            if i == j {
                return Err(Error::invalid(format!("self-loop at vertex {i}")));
            }
            if w < T::zero() {
                return Err(Error::invalid(format!("negative weight on edge ({i}, {j})")));
            }
            if adjacency.get(j, i) != w {
                return Err(Error::NotSymmetric((w - adjacency.get(j, i)).abs().to_f64_lossy()));
            }
        }
        Ok(Self {
            adjacency,
            lambda_mode: LambdaMaxMode::default(),
            laplacian: OnceLock::new(),
            lambda_max: OnceLock::new(),
            scaled_laplacian: OnceLock::new(),
        })
    }

    /// Builds a graph from undirected edges `(i, j, w)`; each pair must appear once.
    pub fn from_edges(n: usize, edges: &[(usize, usize, T)]) -> Result<Self> {
        let mut triples = Vec::with_capacity(2 * edges.len());
        for &(i, j, w) in edges {
            triples.push((i, j, w));
            triples.push((j, i, w));
        }
        Self::from_adjacency(csr_from_coo(n, n, &triples)?)
    }

    pub fn with_lambda_mode(mut self, mode: LambdaMaxMode) -> Self {
        self.lambda_mode = mode;
        self.lambda_max = OnceLock::new();
        self.scaled_laplacian = OnceLock::new();
        self
    }

    pub fn n(&self) -> usize {
        self.adjacency.n_rows()
    }

    pub fn adjacency(&self) -> &SparseMatrix<T> {
        &self.adjacency
    }

    /// Undirected edges `(i, j, w)` with `i < j`, ordered by `(i, j)`.
    pub fn edges(&self) -> Vec<(usize, usize, T)> {
        self.adjacency
            .triples()
            .into_iter()
            .filter(|&(i, j, _)| i < j)
            .collect()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    /// Number of neighbors of each vertex.
    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n())
            .map(|i| self.adjacency.row(i).0.len())
            .collect()
    }

    pub fn laplacian(&self) -> &SparseMatrix<T> {
        self.laplacian
            .get_or_init(|| normalized_laplacian(&self.adjacency))
    }

    pub fn lambda_max(&self) -> Result<T> {
        if let Some(&l) = self.lambda_max.get() {
            return Ok(l);
        }
        let l = match self.lambda_mode {
            LambdaMaxMode::UpperBound => T::two(),
            LambdaMaxMode::PowerIteration { tol, max_iter } => {
                power_iteration_lmax(self.laplacian(), tol, max_iter, LAMBDA_SEED)?
            }
        };
        Ok(*self.lambda_max.get_or_init(|| l))
    }

    /// `L̃ = 2 L / λmax - I` using the cached `λmax`.
    pub fn scaled_laplacian(&self) -> Result<&SparseMatrix<T>> {
        if let Some(s) = self.scaled_laplacian.get() {
            return Ok(s);
        }
        let s = scale_laplacian(self.laplacian(), self.lambda_max()?)?;
        Ok(self.scaled_laplacian.get_or_init(|| s))
    }

    /// Scaled Laplacian for an externally supplied `λmax` (e.g. one restored from a checkpoint).
    pub fn scaled_laplacian_with(&self, lambda_max: T) -> Result<SparseMatrix<T>> {
        scale_laplacian(self.laplacian(), lambda_max)
    }
}

/// `L = I - D^{-1/2} A D^{-1/2}`; isolated vertices get an identity row.
pub fn normalized_laplacian<T: Scalar>(adjacency: &SparseMatrix<T>) -> SparseMatrix<T> {
    let n = adjacency.n_rows();
    let inv_sqrt_deg: Vec<T> = (0..n)
        .map(|i| {
            let d = adjacency.row(i).1.iter().fold(T::zero(), |acc, &w| acc + w);
            if d > T::zero() {
                T::one() / d.sqrt()
            } else {
                T::zero()
            }
        })
        .collect();
    let mut triples = Vec::with_capacity(adjacency.nnz() + n);
    for i in 0..n {
        triples.push((i, i, T::one()));
        let (cols, vals) = adjacency.row(i);
        for (&j, &w) in cols.iter().zip(vals) {
            if i != j {
                triples.push((i, j, -(inv_sqrt_deg[i] * w * inv_sqrt_deg[j])));
            }
        }
    }
    csr_from_coo(n, n, &triples).expect("laplacian entries are finite and in range")
}

/// `L̃ = (2 / λmax) L - I`.
pub fn scale_laplacian<T: Scalar>(laplacian: &SparseMatrix<T>, lambda_max: T) -> Result<SparseMatrix<T>> {
    if !(lambda_max > T::zero()) || !lambda_max.is_finite() {
        return Err(Error::invalid(format!(
            "lambda_max must be positive, got {lambda_max}"
        )));
    }
    laplacian.scaled_plus_identity(T::two() / lambda_max, -T::one())
}

/// Breadth-first hop counts from `source` over the support of the adjacency; `None` if unreachable.
pub fn hop_distances<T: Scalar>(g: &Graph<T>, source: usize) -> Vec<Option<usize>> {
    let n = g.n();
    let mut dist = vec![None; n];
    if source >= n {
        return dist;
    }
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].expect("queued vertices have a distance");
        for &v in g.adjacency().row(u).0 {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

fn distance<T: Scalar>(a: &[T], b: &[T], metric: Metric, norms: Option<(T, T)>) -> T {
    match metric {
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
            .sqrt(),
        Metric::Cosine => {
            let (na, nb) = norms.expect("cosine needs norms");
            let dot = a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            // Clamp rounding excursions outside [0, 2].
            (T::one() - dot / (na * nb)).max(T::zero()).min(T::two())
        }
    }
}

fn gaussian_graph<T: Scalar>(
    n: usize,
    directed: &[(usize, usize, T)],
    kernel_width: KernelWidth,
) -> Result<Graph<T>> {
    let sigma = match kernel_width {
        KernelWidth::Fixed(s) => {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::invalid(format!("kernel width must be positive, got {s}")));
            }
            T::of(s)
        }
        KernelWidth::Auto => {
            if directed.is_empty() {
                T::one()
            } else {
                let sum = directed.iter().fold(T::zero(), |acc, e| acc + e.2);
                let mean = sum / T::of(directed.len() as f64);
                // All distances zero: every weight is exp(0) whatever the width.
                if mean > T::zero() {
                    mean
                } else {
                    T::one()
                }
            }
        }
    };
    let mut weights: BTreeMap<(usize, usize), T> = BTreeMap::new();
    for &(i, j, d) in directed {
        let w = (-(d * d) / (sigma * sigma)).exp();
        for key in [(i, j), (j, i)] {
            let e = weights.entry(key).or_insert(T::zero());
            *e = e.max(w);
        }
    }
    let triples: Vec<_> = weights.into_iter().map(|((i, j), w)| (i, j, w)).collect();
    Graph::from_adjacency(csr_from_coo(n, n, &triples)?)
}

/// k-nearest-neighbor graph with Gaussian weights `exp(-d^2 / σ^2)`, symmetrized by
/// elementwise max. Ties in distance are broken by the smaller vertex index.
pub fn knn_graph<T: Scalar>(
    points: &Mat<T>,
    k: usize,
    metric: Metric,
    kernel_width: KernelWidth,
) -> Result<Graph<T>> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::invalid("knn graph needs at least two points"));
    }
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k must lie in [1, {}], got {k}", n - 1)));
    }
    if !points.is_finite() {
        return Err(Error::invalid("points must be finite"));
    }
    let norms: Vec<T> = (0..n)
        .map(|i| points.row(i).iter().fold(T::zero(), |a, &x| a + x * x).sqrt())
        .collect();
    if metric == Metric::Cosine {
        if let Some(i) = norms.iter().position(|&v| v == T::zero()) {
            return Err(Error::invalid(format!(
                "point {i} has zero norm; cosine distance is undefined"
            )));
        }
    }
    let mut directed = Vec::with_capacity(n * k);
    let mut cand: Vec<(T, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        for j in (0..n).filter(|&j| j != i) {
            let d = distance(points.row(i), points.row(j), metric, Some((norms[i], norms[j])));
            cand.push((d, j));
        }
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        directed.extend(cand.iter().take(k).map(|&(d, j)| (i, j, d)));
    }
    gaussian_graph(n, &directed, kernel_width)
}

/// Lattice graph over a `rows x cols` pixel grid: 4-connectivity links axis neighbors,
/// 8-connectivity adds diagonals. Weights follow the same Gaussian kernel as [`knn_graph`].
pub fn grid_graph<T: Scalar>(
    rows: usize,
    cols: usize,
    connectivity: usize,
    kernel_width: KernelWidth,
) -> Result<Graph<T>> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("grid needs at least one row and one column"));
    }
    let offsets: &[(i64, i64)] = match connectivity {
        4 => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
        8 => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
        c => return Err(Error::invalid(format!("connectivity must be 4 or 8, got {c}"))),
    };
    let mut directed = Vec::new();
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            for &(dr, dc) in offsets {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                    continue;
                }
                let d = T::of(((dr * dr + dc * dc) as f64).sqrt());
                directed.push(((r * cols as i64 + c) as usize, (nr * cols as i64 + nc) as usize, d));
            }
        }
    }
    gaussian_graph(rows * cols, &directed, kernel_width)
}

/// Serializes a graph in the `GCRNGRAPH v1` format (weights with 17 significant digits).
pub fn graph_to_string<T: Scalar>(g: &Graph<T>) -> String {
    let edges = g.edges();
    let mut s = format!("{GRAPH_MAGIC}\n{} {}\n", g.n(), edges.len());
    for (i, j, w) in edges {
        let _ = writeln!(s, "{i} {j} {:.16e}", w.to_f64_lossy());
    }
    s
}

pub fn save_graph<T: Scalar>(path: &Path, g: &Graph<T>) -> Result<()> {
    std::fs::write(path, graph_to_string(g)).map_err(|e| Error::io(path, e))
}

/// Parses the `GCRNGRAPH v1` format. Self-loops, repeated pairs and non-positive
/// weights are rejected.
pub fn parse_graph<T: Scalar>(text: &str) -> Result<Graph<T>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, l)) if l == GRAPH_MAGIC => {}
        Some((no, l)) => return Err(Error::parse(no, format!("expected header `{GRAPH_MAGIC}`, found `{l}`"))),
        None => return Err(Error::parse(1, "empty graph file")),
    }
    let (no, counts) = lines.next().ok_or_else(|| Error::parse(2, "missing `n m` line"))?;
    let fields: Vec<&str> = counts.split_whitespace().collect();
    if fields.len() != 2 {
        return Err(Error::parse(no, "expected `n m`"));
    }
    let n: usize = fields[0]
        .parse()
        .map_err(|_| Error::parse(no, format!("invalid vertex count n `{}`", fields[0])))?;
    let m: usize = fields[1]
        .parse()
        .map_err(|_| Error::parse(no, format!("invalid edge count m `{}`", fields[1])))?;
    let mut seen = std::collections::BTreeSet::new();
    let mut edges = Vec::with_capacity(m);
    for e in 0..m {
        let (no, line) = lines
            .next()
            .ok_or_else(|| Error::parse(no + e + 1, format!("expected {m} edges, found {e}")))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::parse(no, "expected `i j w`"));
        }
        let i: usize = f[0].parse().map_err(|_| Error::parse(no, format!("invalid vertex `{}`", f[0])))?;
        let j: usize = f[1].parse().map_err(|_| Error::parse(no, format!("invalid vertex `{}`", f[1])))?;
        let w: f64 = f[2].parse().map_err(|_| Error::parse(no, format!("invalid weight `{}`", f[2])))?;
        if i >= n || j >= n {
            return Err(Error::parse(no, format!("vertex out of range for n = {n}")));
        }
        if i == j {
            return Err(Error::parse(no, format!("self-loop at vertex {i}")));
        }
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::parse(no, format!("weight must be positive, got {w}")));
        }
        if !seen.insert((i.min(j), i.max(j))) {
            return Err(Error::parse(no, format!("duplicate edge ({i}, {j})")));
        }
        edges.push((i, j, T::of(w)));
    }
    if let Some((no, _)) = lines.next() {
        return Err(Error::parse(no, format!("trailing content after {m} edges")));
    }
    Graph::from_edges(n, &edges)
}

pub fn load_graph<T: Scalar>(path: &Path) -> Result<Graph<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path2() -> Graph<f64> {
        Graph::from_edges(2, &[(0, 1, 1.0)]).unwrap()
    }

    #[test]
    fn knn_zero_distance_pair() {
        let pts = Mat::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let g = knn_graph(&pts, 1, Metric::Euclidean, KernelWidth::Auto).unwrap();
        assert_eq!(g.edges(), vec![(0, 1, 1.0)]);
    }

    #[test]
    fn knn_collinear_points() {
        let pts = Mat::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let g = knn_graph(&pts, 1, Metric::Euclidean, KernelWidth::Fixed(1.0)).unwrap();
        let e = g.edges();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].0, e[0].1), (0, 1));
        assert!((e[0].2 - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!((e[1].0, e[1].1), (1, 2));
        assert!((e[1].2 - (-4.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn knn_full_connectivity() {
        let pts = Mat::from_fn(5, 2, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 + i as f64);
        let g = knn_graph(&pts, 4, Metric::Euclidean, KernelWidth::Auto).unwrap();
        assert_eq!(g.n_edges(), 10);
        for i in 0..5 {
            assert_eq!(g.adjacency().get(i, i), 0.0);
        }
    }

    #[test]
    fn knn_errors() {
        let pts = Mat::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(knn_graph(&pts, 1, Metric::Cosine, KernelWidth::Auto).is_err());
        assert!(knn_graph(&pts, 3, Metric::Euclidean, KernelWidth::Auto).is_err());
        assert!(knn_graph(&pts, 0, Metric::Euclidean, KernelWidth::Auto).is_err());
    }

    #[test]
    fn knn_cosine_on_circle() {
        let pts = Mat::from_fn(12, 2, |i, j| {
            let a = std::f64::consts::TAU * i as f64 / 12.0;
            if j == 0 { a.cos() } else { a.sin() }
        });
        let g = knn_graph(&pts, 4, Metric::Cosine, KernelWidth::Auto).unwrap();
        assert!(g.degrees().iter().all(|&d| d == 4));
        assert!(g.adjacency().get(0, 1) > g.adjacency().get(0, 2));
        assert!(g.adjacency().get(0, 11) > 0.0);
    }

    #[test]
    fn grid_degrees() {
        let g = grid_graph::<f64>(1, 2, 4, KernelWidth::Auto).unwrap();
        assert_eq!(g.n_edges(), 1);
        let g4 = grid_graph::<f64>(3, 3, 4, KernelWidth::Auto).unwrap();
        assert_eq!(g4.degrees()[4], 4);
        let g8 = grid_graph::<f64>(3, 3, 8, KernelWidth::Auto).unwrap();
        assert_eq!(g8.degrees()[4], 8);
        assert!(grid_graph::<f64>(3, 3, 6, KernelWidth::Auto).is_err());
    }

    #[test]
    fn laplacian_examples() {
        let l = path2().laplacian().to_dense();
        assert_eq!(l.as_slice(), &[1.0, -1.0, -1.0, 1.0]);

        let k3 = Graph::from_edges(3, &[(0, 1, 1.0), (0, 2, 1.0), (1, 2, 1.0)]).unwrap();
        let l = k3.laplacian().to_dense();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0f64 } else { -0.5 };
                assert!((l[(i, j)] - want).abs() < 1e-15);
            }
        }

        let iso = Graph::from_edges(3, &[(0, 1, 2.0)]).unwrap();
        let l = iso.laplacian();
        assert_eq!(l.row(2), (&[2usize][..], &[1.0][..]));
        assert_eq!(l.get(0, 2), 0.0);
    }

    #[test]
    fn scale_examples() {
        let i2 = SparseMatrix::<f64>::identity(2);
        assert_eq!(scale_laplacian(&i2, 1.0).unwrap(), i2);

        let g = path2();
        let s = scale_laplacian(g.laplacian(), 2.0).unwrap().to_dense();
        assert_eq!(s.as_slice(), &[0.0, -1.0, -1.0, 0.0]);

        let k3 = Graph::from_edges(3, &[(0, 1, 1.0), (1, 2, 3.0)]).unwrap();
        let l = k3.laplacian();
        let s = scale_laplacian(l, 2.0).unwrap();
        let lmi = l.scaled_plus_identity(1.0, -1.0).unwrap();
        assert!(s.to_dense().max_abs_diff(&lmi.to_dense()) == 0.0);

        assert!(scale_laplacian(&i2, 0.0).is_err());
        assert!(scale_laplacian(&i2, -1.0).is_err());
    }

    #[test]
    fn cached_lambda_of_path() {
        let g = path2();
        assert!((g.lambda_max().unwrap() - 2.0).abs() < 1e-6);
        let bound = path2().with_lambda_mode(LambdaMaxMode::UpperBound);
        assert_eq!(bound.lambda_max().unwrap(), 2.0);
        assert_eq!(bound.scaled_laplacian().unwrap().to_dense().as_slice(), &[0.0, -1.0, -1.0, 0.0]);
    }

    #[test]
    fn hops() {
        let iso = Graph::<f64>::from_edges(3, &[]).unwrap();
        assert_eq!(hop_distances(&iso, 1), vec![None, Some(0), None]);

        let p3 = Graph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        assert_eq!(hop_distances(&p3, 0), vec![Some(0), Some(1), Some(2)]);

        let grid = grid_graph::<f64>(3, 3, 4, KernelWidth::Auto).unwrap();
        assert_eq!(hop_distances(&grid, 0)[8], Some(4));
    }

    #[test]
    fn file_round_trip() {
        let g = grid_graph::<f64>(3, 4, 8, KernelWidth::Auto).unwrap();
        let text = graph_to_string(&g);
        let back: Graph<f64> = parse_graph(&text).unwrap();
        assert_eq!(back.adjacency(), g.adjacency());
        assert_eq!(graph_to_string(&back), text);
    }

    #[test]
    fn file_rejections() {
        let bad = |body: &str| parse_graph::<f64>(&format!("{GRAPH_MAGIC}\n{body}")).unwrap_err();
        assert!(bad("2 1\n0 0 1.0\n").to_string().contains("self-loop"));
        assert!(bad("3 2\n0 1 1.0\n1 0 2.0\n").to_string().contains("duplicate"));
        assert!(bad("2 1\n0 1 0\n").to_string().contains("positive"));
        assert!(bad("2 1\n0 1 -1\n").to_string().contains("positive"));
        assert!(bad("2 2\n0 1 1\n").to_string().contains("expected 2 edges"));
        assert!(parse_graph::<f64>("GCRNGRAPH v2\n1 0\n").is_err());
    }
}
