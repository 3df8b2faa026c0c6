//! Formation interaction graphs.
//!
//! Edges are stored 0-based as `(head, tail)`; the incidence matrix carries
//! `+1` at the head and `−1` at the tail, so `z_k = p_head − p_tail`.
//! JSON uses 1-based indices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matcore::{sym_eig, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("a formation needs at least two agents, got {0}")]
    TooFewAgents(usize),
    #[error("edge {0:?} references an agent outside 1..={1}")]
    OutOfRange((usize, usize), usize),
    #[error("self-loop at agent {0}")]
    SelfLoop(usize),
    #[error("duplicate edge between agents {0} and {1}")]
    Duplicate(usize, usize),
    #[error("interaction graph is not connected")]
    Disconnected,
    #[error("leader bias must be nonnegative, got {0}")]
    NegativeBias(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphJson", into = "GraphJson")]
pub struct FormationGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    n_agents: usize,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<GraphJson> for FormationGraph {
    type Error = GraphError;

    fn try_from(j: GraphJson) -> Result<Self, GraphError> {
        let n = j.n_agents;
        let mut edges = Vec::with_capacity(j.edges.len());
        for [h, t] in j.edges {
            if h == 0 || t == 0 || h > n || t > n {
                return Err(GraphError::OutOfRange((h, t), n));
            }
            edges.push((h - 1, t - 1));
        }
        Self::new(n, edges)
    }
}

impl From<FormationGraph> for GraphJson {
    fn from(g: FormationGraph) -> Self {
        Self {
            n_agents: g.n,
            edges: g.edges.iter().map(|&(h, t)| [h + 1, t + 1]).collect(),
        }
    }
}

impl FormationGraph {
    /// Validates a graph given 0-based `(head, tail)` pairs.
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        if n < 2 {
            return Err(GraphError::TooFewAgents(n));
        }
        let mut seen = std::collections::HashSet::new();
        for &(h, t) in &edges {
            if h >= n || t >= n {
                return Err(GraphError::OutOfRange((h + 1, t + 1), n));
            }
            if h == t {
                return Err(GraphError::SelfLoop(h + 1));
            }
            if !seen.insert((h.min(t), h.max(t))) {
                return Err(GraphError::Duplicate(h + 1, t + 1));
            }
        }
        let g = Self { n, edges };
        if !g.is_connected() {
            return Err(GraphError::Disconnected);
        }
        Ok(g)
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Agents sharing an edge with `i`, ascending.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(h, t)| match () {
                _ if h == i => Some(t),
                _ if t == i => Some(h),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out
    }

    fn is_connected(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(h, t) in &self.edges {
            let (a, b) = (find(&mut parent, h), find(&mut parent, t));
            parent[a] = b;
        }
        let root = find(&mut parent, 0);
        (0..self.n).all(|i| find(&mut parent, i) == root)
    }
}

/// Leader–first-follower graph: agent 2 follows the leader, agent `i ≥ 3`
/// follows `i−2` and `i−1`. Edges run neighbor → follower, sorted.
pub fn lff(n: usize) -> Result<FormationGraph, GraphError> {
    if n < 2 {
        return Err(GraphError::TooFewAgents(n));
    }
    let mut edges = vec![(0, 1)];
    for i in 2..n {
        edges.push((i - 2, i));
        edges.push((i - 1, i));
    }
    edges.sort_unstable();
    FormationGraph::new(n, edges)
}

/// `M×N` incidence matrix.
pub fn incidence(g: &FormationGraph) -> Matrix {
    let mut h = Matrix::zeros(g.n_edges(), g.n_agents());
    for (k, &(head, tail)) in g.edges().iter().enumerate() {
        h[(k, head)] = 1.0;
        h[(k, tail)] = -1.0;
    }
    h
}

/// `L = HᵀH`.
pub fn laplacian(g: &FormationGraph) -> Matrix {
    let h = incidence(g);
    h.transpose() * h
}

/// `L + α·e₁e₁ᵀ`; `α = 0` returns `L` unchanged.
pub fn modified_laplacian(l: &Matrix, alpha: f64) -> Result<Matrix, GraphError> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(GraphError::NegativeBias(alpha));
    }
    let mut out = l.clone();
    out[(0, 0)] += alpha;
    Ok(out)
}

/// Numeric rank of a symmetric matrix with eigenvalue threshold `1e-10`.
pub fn symmetric_rank(a: &Matrix) -> usize {
    sym_eig(a)
        .map(|s| s.values.iter().filter(|v| v.abs() > 1e-10).count())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{from_rows, Vector};
    use proptest::prelude::*;

    fn random_connected(n: usize, extra: &[(usize, usize)], tree: &[usize]) -> FormationGraph {
        // tree[i] picks the parent of agent i+1 among 0..=i.
        let mut set = std::collections::BTreeSet::new();
        let mut edges = Vec::new();
        for i in 1..n {
            let p = tree[i - 1] % i;
            set.insert((p, i));
            edges.push((i, p));
        }
        for &(a, b) in extra {
            let (a, b) = (a % n, b % n);
            if a != b && set.insert((a.min(b), a.max(b))) {
                edges.push((a, b));
            }
        }
        FormationGraph::new(n, edges).unwrap()
    }

    #[test]
    fn lff_four_agents_incidence_and_laplacian() {
        let g = lff(4).unwrap();
        assert_eq!(g.n_edges(), 5);
        let h = from_rows(&[
            vec![1.0, -1.0, 0.0, 0.0],
            vec![1.0, 0.0, -1.0, 0.0],
            vec![0.0, 1.0, -1.0, 0.0],
            vec![0.0, 1.0, 0.0, -1.0],
            vec![0.0, 0.0, 1.0, -1.0],
        ]);
        assert_eq!(incidence(&g), h);
        let l = from_rows(&[
            vec![2.0, -1.0, -1.0, 0.0],
            vec![-1.0, 3.0, -1.0, -1.0],
            vec![-1.0, -1.0, 3.0, -1.0],
            vec![0.0, -1.0, -1.0, 2.0],
        ]);
        assert_eq!(laplacian(&g), l);
        let eig = sym_eig(&l).unwrap().values;
        for (got, want) in eig.iter().zip([0.0, 2.0, 4.0, 4.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(g.neighbors(0), vec![1, 2]);
        assert_eq!(g.neighbors(3), vec![1, 2]);
    }

    #[test]
    fn lff_sizes() {
        let g = lff(2).unwrap();
        assert_eq!(incidence(&g), from_rows(&[vec![1.0, -1.0]]));
        let g = lff(6).unwrap();
        assert_eq!(g.n_edges(), 9);
        assert_eq!(symmetric_rank(&laplacian(&g)), 5);
        assert_eq!(lff(1), Err(GraphError::TooFewAgents(1)));
    }

    #[test]
    fn modified_laplacian_cases() {
        let l = laplacian(&lff(4).unwrap());
        let m = modified_laplacian(&l, 1.0).unwrap();
        assert_eq!(m[(0, 0)], 3.0);
        assert!(sym_eig(&m).unwrap().values[0] > 0.0);
        assert_eq!(modified_laplacian(&l, 0.0).unwrap(), l);
        assert_eq!(symmetric_rank(&l), 3);
        assert!(matches!(modified_laplacian(&l, -1.0), Err(GraphError::NegativeBias(_))));
    }

    #[test]
    fn validation() {
        assert_eq!(FormationGraph::new(3, vec![(0, 0), (1, 2)]), Err(GraphError::SelfLoop(1)));
        assert_eq!(
            FormationGraph::new(3, vec![(0, 1), (1, 0), (1, 2)]),
            Err(GraphError::Duplicate(2, 1))
        );
        assert_eq!(FormationGraph::new(4, vec![(0, 1), (2, 3)]), Err(GraphError::Disconnected));
        assert!(matches!(FormationGraph::new(2, vec![(0, 2)]), Err(GraphError::OutOfRange(..))));
    }

    #[test]
    fn json_is_one_based() {
        let g = lff(4).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(s, r#"{"n_agents":4,"edges":[[1,2],[1,3],[2,3],[2,4],[3,4]]}"#);
        let back: FormationGraph = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        assert!(serde_json::from_str::<FormationGraph>(r#"{"n_agents":2,"edges":[[0,1]]}"#).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn laplacian_structure(
            n in 2usize..9,
            tree in proptest::collection::vec(0usize..100, 8),
            extra in proptest::collection::vec((0usize..9, 0usize..9), 0..10),
            alpha in 1e-3f64..10.0,
        ) {
            let g = random_connected(n, &extra, &tree);
            let h = incidence(&g);
            let l = laplacian(&g);
            let ones = Vector::from_element(n, 1.0);
            prop_assert!((&h * &ones).amax() == 0.0);
            prop_assert!((&l * &ones).amax() == 0.0);
            prop_assert_eq!(&l, &(h.transpose() * &h));
            prop_assert_eq!(symmetric_rank(&l), n - 1);
            let base = sym_eig(&l).unwrap().values;
            let m = sym_eig(&modified_laplacian(&l, alpha).unwrap()).unwrap().values;
            prop_assert!(m[0] > 0.0);
            for i in 0..n {
                prop_assert!(m[i] >= base[i] - 1e-10);
            }
        }
    }
}
