//! Undirected graphs, graph shift operators and random edge sampling.
//!
//! A [`Graph`] stores each undirected edge once as an ordered pair `(i, j)`
//! with `i < j`. Shift operators are always assembled from a graph, writing
//! `(i, j)` and `(j, i)` in the same statement, so they are exactly
//! symmetric without any after-the-fact symmetrization.
//!
//! Random edge sampling keeps each edge of a nominal graph with probability
//! `p`, one Bernoulli draw per unordered pair. Draws use `u < p` with `u`
//! uniform on `[0, 1)`, so draws for different `p` that share a seed are
//! nested: an edge kept at `p` is kept at every `p' > p`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{mismatch, Error, Result};
use crate::seed;

/// Simple undirected graph with optional edge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    node_count: usize,
    edges: BTreeMap<(usize, usize), f64>,
}

impl Graph {
    /// Graph with `node_count` nodes and no edges.
    pub fn new(node_count: usize) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::InvalidGraph("node count must be positive".into()));
        }
        Ok(Self {
            node_count,
            edges: BTreeMap::new(),
        })
    }

    /// Builds a graph from unit-weight edges.
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::new(node_count)?;
        for &(i, j) in edges {
            g.add_edge(i, j, 1.0)?;
        }
        Ok(g)
    }

    /// Adds the undirected edge `{i, j}`. Self-loops, out-of-range
    /// endpoints, duplicate pairs and zero or non-finite weights are
    /// rejected.
    pub fn add_edge(&mut self, i: usize, j: usize, weight: f64) -> Result<()> {
        if i == j {
            return Err(Error::InvalidGraph(format!("self-loop at node {i}")));
        }
        if i >= self.node_count || j >= self.node_count {
            return Err(Error::InvalidGraph(format!(
                "edge ({i}, {j}) out of range for {} nodes",
                self.node_count
            )));
        }
        if !weight.is_finite() || weight == 0.0 {
            return Err(Error::InvalidGraph(format!(
                "edge ({i}, {j}) has invalid weight {weight}"
            )));
        }
        let key = (i.min(j), i.max(j));
        if self.edges.insert(key, weight).is_some() {
            return Err(Error::InvalidGraph(format!("duplicate edge ({i}, {j})")));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `((i, j), w)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.edges.iter().map(|(&k, &w)| (k, w))
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains_key(&(i.min(j), i.max(j)))
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.edges.get(&(i.min(j), i.max(j))).copied()
    }

    /// Number of incident edges per node, ignoring weights.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(i, j) in self.edges.keys() {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn max_degree(&self) -> usize {
        self.degrees().into_iter().max().unwrap_or(0)
    }

    /// Line-oriented text form: `N <count>` then one `i j w` line per edge.
    pub fn to_text(&self) -> String {
        let mut out = format!("N {}\n", self.node_count);
        for ((i, j), w) in self.edges() {
            // Display for f64 is the shortest representation that round-trips.
            let _ = writeln!(out, "{i} {j} {w}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(n, l)| (n + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (line_no, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing `N <count>` header".into(),
        })?;
        let count = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["N", n] => n.parse::<usize>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad node count: {e}"),
            })?,
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected `N <count>`, found `{header}`"),
                })
            }
        };
        let mut g = Self::new(count).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        for (line_no, line) in lines {
            let parse_err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [i, j, w] = fields.as_slice() else {
                return Err(parse_err(format!("expected `i j w`, found `{line}`")));
            };
            let i = i.parse::<usize>().map_err(|e| parse_err(e.to_string()))?;
            let j = j.parse::<usize>().map_err(|e| parse_err(e.to_string()))?;
            let w = w.parse::<f64>().map_err(|e| parse_err(e.to_string()))?;
            g.add_edge(i, j, w).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Which matrix a shift operator represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GsoKind {
    Adjacency,
    Laplacian,
}

/// Anything that can act as the N×N matrix of a space shift.
pub trait AsOperator {
    fn operator(&self) -> &DMatrix<f64>;
}

impl AsOperator for DMatrix<f64> {
    fn operator(&self) -> &DMatrix<f64> {
        self
    }
}

impl<T: AsOperator + ?Sized> AsOperator for &T {
    fn operator(&self) -> &DMatrix<f64> {
        (**self).operator()
    }
}

/// Graph shift operator built from a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftOperator {
    kind: GsoKind,
    matrix: DMatrix<f64>,
    source: Graph,
}

impl AsOperator for ShiftOperator {
    fn operator(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl ShiftOperator {
    /// Adjacency `A` or Laplacian `D - A` of `graph`, weighted.
    pub fn from_graph(graph: &Graph, kind: GsoKind) -> Self {
        let n = graph.node_count();
        let mut matrix = DMatrix::zeros(n, n);
        match kind {
            GsoKind::Adjacency => {
                for ((i, j), w) in graph.edges() {
                    matrix[(i, j)] = w;
                    matrix[(j, i)] = w;
                }
            }
            GsoKind::Laplacian => {
                let mut degree = vec![0.0; n];
                for ((i, j), w) in graph.edges() {
                    matrix[(i, j)] = -w;
                    matrix[(j, i)] = -w;
                    degree[i] += w;
                    degree[j] += w;
                }
                for (i, d) in degree.into_iter().enumerate() {
                    matrix[(i, i)] = d;
                }
            }
        }
        Self {
            kind,
            matrix,
            source: graph.clone(),
        }
    }

    pub fn kind(&self) -> GsoKind {
        self.kind
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn source(&self) -> &Graph {
        &self.source
    }

    pub fn node_count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn eigendecompose(&self) -> Result<SpectralDecomposition> {
        eigendecompose(&self.matrix)
    }

    /// `(λ_min, λ_max)` of the operator.
    pub fn spectral_range(&self) -> Result<(f64, f64)> {
        let d = self.eigendecompose()?;
        let n = d.eigenvalues.len();
        Ok((d.eigenvalues[0], d.eigenvalues[n - 1]))
    }
}

/// Builds the shift operator of the requested kind.
pub fn build_gso(graph: &Graph, kind: GsoKind) -> ShiftOperator {
    ShiftOperator::from_graph(graph, kind)
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralDecomposition {
    /// `V diag(λ) Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        let scaled = v * DMatrix::from_diagonal(&self.eigenvalues);
        scaled * v.transpose()
    }
}

const EIGEN_MAX_ITER: usize = 100_000;

/// Dense symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn eigendecompose(matrix: &DMatrix<f64>) -> Result<SpectralDecomposition> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(mismatch(
            "eigendecompose",
            "square matrix",
            format!("{}x{}", n, matrix.ncols()),
        ));
    }
    let asymmetry = (matrix - matrix.transpose()).amax();
    let Some(eig) = SymmetricEigen::try_new(matrix.clone(), f64::EPSILON, EIGEN_MAX_ITER) else {
        return Err(Error::EigenConvergence {
            n,
            frobenius: matrix.norm(),
            asymmetry,
        });
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Parameters of one random-edge-sampling draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResConfig {
    probability: f64,
    pub seed: u64,
}

impl ResConfig {
    pub fn new(probability: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::InvalidParameter(format!(
                "sampling probability {probability} outside [0, 1]"
            )));
        }
        Ok(Self { probability, seed })
    }

    pub fn probability(&self) -> f64 {
        self.probability
    }
}

/// Keeps each edge of `nominal` independently with probability `p`,
/// preserving weights. Deterministic in `cfg.seed`.
pub fn res_sample(nominal: &Graph, cfg: &ResConfig) -> Graph {
    let mut rng = seed::rng(cfg.seed, &[seed::stream::RES]);
    let p = cfg.probability;
    let edges = nominal
        .edges
        .iter()
        .filter(|_| rng.random::<f64>() < p)
        .map(|(&k, &w)| (k, w))
        .collect();
    Graph {
        node_count: nominal.node_count,
        edges,
    }
}

/// One realization `S_k` of a randomly sampled shift operator together with
/// its deviation `E_k = S_k - S` from the nominal operator.
#[derive(Debug, Clone)]
pub struct PerturbationSample {
    pub sampled_gso: ShiftOperator,
    pub deviation: DMatrix<f64>,
}

/// Draws `length` independent realizations of the sampled operator.
///
/// Draw `k` (1-based) uses seed `derive(cfg.seed, [k])`. Edges are sampled
/// on the source graph and the operator is rebuilt from the kept edges, so
/// a sampled Laplacian is still a Laplacian. The identity slot `S_0` is not
/// part of the returned sequence.
pub fn sample_gso_sequence(
    nominal: &ShiftOperator,
    cfg: &ResConfig,
    length: usize,
) -> Result<Vec<PerturbationSample>> {
    if length == 0 {
        return Err(Error::InvalidParameter(
            "sequence length must be at least 1".into(),
        ));
    }
    Ok((1..=length as u64)
        .map(|k| {
            let draw = ResConfig {
                probability: cfg.probability,
                seed: seed::derive(cfg.seed, &[k]),
            };
            let graph = res_sample(nominal.source(), &draw);
            let sampled_gso = ShiftOperator::from_graph(&graph, nominal.kind());
            let deviation = sampled_gso.matrix() - nominal.matrix();
            PerturbationSample {
                sampled_gso,
                deviation,
            }
        })
        .collect())
}

/// The graph constant of the stability bound: the largest unweighted node
/// degree for an adjacency operator, 2 for a Laplacian.
pub fn alpha_constant(s: &ShiftOperator) -> f64 {
    match s.kind() {
        GsoKind::Adjacency => s.source().max_degree() as f64,
        GsoKind::Laplacian => 2.0,
    }
}

/// Entrywise mean of a sequence of operators of one kind and size.
///
/// The source graph of the result holds every pair with a nonzero mean
/// off-diagonal entry, weighted by that mean, so it can be edge-sampled
/// like any other operator.
pub fn average_gso(sequence: &[ShiftOperator]) -> Result<ShiftOperator> {
    let first = sequence.first().ok_or_else(|| {
        Error::InvalidParameter("cannot average an empty sequence of operators".into())
    })?;
    let n = first.node_count();
    let kind = first.kind();
    for s in sequence {
        if s.node_count() != n {
            return Err(mismatch("average_gso", n, s.node_count()));
        }
        if s.kind() != kind {
            return Err(Error::InvalidParameter(
                "cannot average operators of different kinds".into(),
            ));
        }
    }
    let count = sequence.len() as f64;
    let mut matrix = DMatrix::zeros(n, n);
    for s in sequence {
        matrix += s.matrix();
    }
    matrix /= count;

    let mut source = Graph::new(n)?;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = matrix[(i, j)];
            if v != 0.0 {
                let w = match kind {
                    GsoKind::Adjacency => v,
                    GsoKind::Laplacian => -v,
                };
                source.add_edge(i, j, w)?;
            }
        }
    }
    // Rebuilding from the source keeps a Laplacian's diagonal equal to its
    // row sums bit for bit, so sampling at p = 1 reproduces this operator.
    let rebuilt = ShiftOperator::from_graph(&source, kind);
    debug_assert!((rebuilt.matrix() - &matrix).amax() <= 1e-12 * (1.0 + matrix.amax()));
    Ok(rebuilt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn path3() -> Graph {
        Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn two_node_operators() {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let a = build_gso(&g, GsoKind::Adjacency);
        assert_eq!(
            a.matrix(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
        );
        let l = build_gso(&g, GsoKind::Laplacian);
        assert_eq!(
            l.matrix(),
            &DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])
        );
    }

    #[test]
    fn empty_edge_set_gives_zero_operators() {
        let g = Graph::new(4).unwrap();
        for kind in [GsoKind::Adjacency, GsoKind::Laplacian] {
            assert_eq!(build_gso(&g, kind).matrix(), &DMatrix::zeros(4, 4));
        }
    }

    #[test]
    fn path_spectra() {
        // characteristic polynomials: L: -x(x-1)(x-3); A: -x(x^2-2)
        let l = build_gso(&path3(), GsoKind::Laplacian)
            .eigendecompose()
            .unwrap();
        for (got, want) in l.eigenvalues.iter().zip([0.0, 1.0, 3.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        let a = build_gso(&path3(), GsoKind::Adjacency)
            .eigendecompose()
            .unwrap();
        let r2 = 2f64.sqrt();
        for (got, want) in a.eigenvalues.iter().zip([-r2, 0.0, r2]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_and_zero_spectra() {
        let d = eigendecompose(&DMatrix::identity(5, 5)).unwrap();
        assert!(d.eigenvalues.iter().all(|&l| l == 1.0));
        assert_abs_diff_eq!(
            (d.eigenvectors.transpose() * &d.eigenvectors - DMatrix::identity(5, 5)).amax(),
            0.0,
            epsilon = 1e-14
        );
        let z = eigendecompose(&DMatrix::zeros(4, 4)).unwrap();
        assert!(z.eigenvalues.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn rejects_non_square() {
        assert!(eigendecompose(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn laplacian_rows_sum_to_zero_and_adjacency_diagonal_is_zero() {
        let mut g = Graph::new(5).unwrap();
        g.add_edge(0, 1, 0.5).unwrap();
        g.add_edge(1, 2, 2.0).unwrap();
        g.add_edge(3, 1, 1.25).unwrap();
        let l = build_gso(&g, GsoKind::Laplacian);
        for i in 0..5 {
            assert_eq!(l.matrix().row(i).sum(), 0.0);
        }
        let a = build_gso(&g, GsoKind::Adjacency);
        assert!(a.matrix().diagonal().iter().all(|&d| d == 0.0));
        assert_eq!(a.matrix(), &a.matrix().transpose());
    }

    #[test]
    fn graph_rejects_bad_edges() {
        let mut g = Graph::new(3).unwrap();
        assert!(g.add_edge(1, 1, 1.0).is_err());
        assert!(g.add_edge(0, 3, 1.0).is_err());
        assert!(g.add_edge(0, 1, 0.0).is_err());
        g.add_edge(0, 1, 1.0).unwrap();
        assert!(g.add_edge(1, 0, 1.0).is_err());
        assert!(Graph::new(0).is_err());
    }

    #[test]
    fn text_format_round_trip_and_rejections() {
        let mut g = Graph::new(4).unwrap();
        g.add_edge(0, 3, 0.1).unwrap();
        g.add_edge(1, 2, 1.0 / 3.0).unwrap();
        let back = Graph::from_text(&g.to_text()).unwrap();
        assert_eq!(back, g);
        assert!(Graph::from_text("N 3\n1 1 1\n").is_err());
        assert!(Graph::from_text("N 3\n0 1 1\n1 0 1\n").is_err());
        assert!(Graph::from_text("3\n0 1 1\n").is_err());
        assert!(Graph::from_text("N 3\n0 1\n").is_err());
    }

    #[test]
    fn res_extremes() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        for seed in 0..20 {
            assert_eq!(res_sample(&g, &ResConfig::new(1.0, seed).unwrap()), g);
            assert_eq!(
                res_sample(&g, &ResConfig::new(0.0, seed).unwrap()).edge_count(),
                0
            );
        }
        assert!(ResConfig::new(1.5, 0).is_err());
        assert!(ResConfig::new(-0.1, 0).is_err());
    }

    #[test]
    fn sampled_sequences_at_extremes() {
        let s = build_gso(&path3(), GsoKind::Adjacency);
        for sample in sample_gso_sequence(&s, &ResConfig::new(1.0, 3).unwrap(), 4).unwrap() {
            assert_eq!(sample.deviation, DMatrix::zeros(3, 3));
        }
        for sample in sample_gso_sequence(&s, &ResConfig::new(0.0, 3).unwrap(), 4).unwrap() {
            assert_eq!(sample.deviation, -s.matrix());
        }
        assert!(sample_gso_sequence(&s, &ResConfig::new(0.5, 3).unwrap(), 0).is_err());
    }

    #[test]
    fn alpha_values() {
        let star = Graph::from_edges(6, &[(0, 1), (0, 2), (0, 3), (0, 4), (0, 5)]).unwrap();
        assert_eq!(alpha_constant(&build_gso(&star, GsoKind::Adjacency)), 5.0);
        assert_eq!(alpha_constant(&build_gso(&star, GsoKind::Laplacian)), 2.0);
        let empty = Graph::new(3).unwrap();
        assert_eq!(alpha_constant(&build_gso(&empty, GsoKind::Adjacency)), 0.0);
    }

    #[test]
    fn averages() {
        let s = build_gso(&path3(), GsoKind::Adjacency);
        assert_eq!(average_gso(std::slice::from_ref(&s)).unwrap(), s);

        let a = build_gso(
            &Graph::from_edges(3, &[(0, 1)]).unwrap(),
            GsoKind::Adjacency,
        );
        let b = build_gso(
            &Graph::from_edges(3, &[(1, 2)]).unwrap(),
            GsoKind::Adjacency,
        );
        let avg = average_gso(&[a, b]).unwrap();
        assert_eq!(avg.matrix()[(0, 1)], 0.5);
        assert_eq!(avg.matrix()[(2, 1)], 0.5);
        assert_eq!(avg.matrix()[(0, 2)], 0.0);
        assert_eq!(avg.source().weight(1, 2), Some(0.5));

        let small = build_gso(&Graph::new(2).unwrap(), GsoKind::Adjacency);
        assert!(average_gso(&[s.clone(), small]).is_err());
        let lap = build_gso(&path3(), GsoKind::Laplacian);
        assert!(average_gso(&[s, lap]).is_err());
        assert!(average_gso(&[]).is_err());
    }

    #[test]
    fn averaged_operator_rebuilds_from_its_source() {
        let a = build_gso(
            &Graph::from_edges(4, &[(0, 1), (2, 3)]).unwrap(),
            GsoKind::Adjacency,
        );
        let b = build_gso(
            &Graph::from_edges(4, &[(0, 1), (1, 2)]).unwrap(),
            GsoKind::Adjacency,
        );
        let c = build_gso(
            &Graph::from_edges(4, &[(1, 3)]).unwrap(),
            GsoKind::Adjacency,
        );
        let avg = average_gso(&[a, b, c]).unwrap();
        let rebuilt = build_gso(avg.source(), GsoKind::Adjacency);
        assert_eq!(rebuilt.matrix(), avg.matrix());
        // p = 1 sampling returns the averaged operator exactly
        let same = sample_gso_sequence(&avg, &ResConfig::new(1.0, 9).unwrap(), 3).unwrap();
        assert!(same.iter().all(|s| s.sampled_gso.matrix() == avg.matrix()));

        let laps: Vec<ShiftOperator> = [(0, 1), (1, 2), (0, 3)]
            .iter()
            .map(|&(i, j)| {
                build_gso(
                    &Graph::from_edges(4, &[(i, j), (2, 3)]).unwrap(),
                    GsoKind::Laplacian,
                )
            })
            .collect();
        let avg = average_gso(&laps).unwrap();
        let mean = (laps[0].matrix() + laps[1].matrix() + laps[2].matrix()) / 3.0;
        assert!((avg.matrix() - mean).amax() < 1e-15);
        let same = sample_gso_sequence(&avg, &ResConfig::new(1.0, 4).unwrap(), 2).unwrap();
        assert!(same.iter().all(|s| s.sampled_gso.matrix() == avg.matrix()));
    }
}
