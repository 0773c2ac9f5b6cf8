//! Directed trust topologies.
//!
//! A [`DirectedGraph`] stores, for every node, the sorted list of nodes it
//! sends to. Generated topologies always carry a self-loop on every node and
//! a Hamiltonian cycle `i -> i+1 (mod n)`, so they are strongly connected by
//! construction; graphs loaded from text or derived with [`mutual_subgraph`]
//! make no such promise and must be checked with [`is_strongly_connected`].

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    out_neighbors: Vec<Vec<NodeId>>,
}

/// Parameters of a random strongly connected topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub n: usize,
    /// Upper bound `B` on extra out-edges; each node draws `k` uniformly from `0..B`.
    pub max_extra_out_degree: usize,
    pub seed: u64,
}

impl DirectedGraph {
    /// Builds a graph from out-neighbor lists. Lists are sorted; duplicate or
    /// out-of-range entries are rejected.
    pub fn from_adjacency(mut out_neighbors: Vec<Vec<NodeId>>) -> Result<Self> {
        let n = out_neighbors.len();
        if n == 0 {
            return Err(Error::InvalidGraph("graph has no nodes".into()));
        }
        for (i, list) in out_neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            if let Some(&bad) = list.iter().find(|&&j| j >= n) {
                return Err(Error::InvalidGraph(format!(
                    "node {i} lists out-neighbor {bad} outside 0..{n}"
                )));
            }
            if list.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidGraph(format!(
                    "node {i} lists a duplicate out-neighbor"
                )));
            }
        }
        Ok(Self { out_neighbors })
    }

    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (NodeId, NodeId)>) -> Result<Self> {
        let mut lists = vec![Vec::new(); n];
        for (i, j) in edges {
            if i >= n {
                return Err(Error::InvalidGraph(format!("edge source {i} outside 0..{n}")));
            }
            lists[i].push(j);
        }
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
        }
        Self::from_adjacency(lists)
    }

    pub fn node_count(&self) -> usize {
        self.out_neighbors.len()
    }

    pub fn out_neighbors(&self, node: NodeId) -> &[NodeId] {
        &self.out_neighbors[node]
    }

    pub fn adjacency(&self) -> &[Vec<NodeId>] {
        &self.out_neighbors
    }

    pub fn has_edge(&self, from: NodeId, to: NodeId) -> bool {
        self.out_neighbors[from].binary_search(&to).is_ok()
    }

    /// Out-degree not counting a self-loop.
    pub fn degree_without_self(&self, node: NodeId) -> usize {
        let list = &self.out_neighbors[node];
        list.len() - usize::from(list.binary_search(&node).is_ok())
    }

    pub fn has_self_loops(&self) -> bool {
        (0..self.node_count()).all(|i| self.has_edge(i, i))
    }

    pub fn edge_count(&self) -> usize {
        self.out_neighbors.iter().map(Vec::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.out_neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().map(move |&j| (i, j)))
    }

    pub fn is_symmetric(&self) -> bool {
        self.edges().all(|(i, j)| self.has_edge(j, i))
    }

    /// Adds edges, ignoring ones already present. Returns how many were new.
    pub fn add_edges(&mut self, edges: impl IntoIterator<Item = (NodeId, NodeId)>) -> usize {
        let mut added = 0;
        for (i, j) in edges {
            let list = &mut self.out_neighbors[i];
            if let Err(pos) = list.binary_search(&j) {
                list.insert(pos, j);
                added += 1;
            }
        }
        added
    }

    /// Adjacency-list text: one line per node, `<node_id>: <out-neighbors>`.
    pub fn to_adjacency_text(&self) -> String {
        let mut out = String::new();
        for (i, list) in self.out_neighbors.iter().enumerate() {
            write!(out, "{i}:").unwrap();
            for j in list {
                write!(out, " {j}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_adjacency_text(text: &str) -> Result<Self> {
        let mut lists: Vec<Vec<NodeId>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, rest) = line.split_once(':').ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected `<node_id>: <out-neighbors>`".into(),
            })?;
            let id: usize = id.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad node id `{}`", id.trim()),
            })?;
            if id != lists.len() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected node {} but found {id}", lists.len()),
                });
            }
            let neighbors = rest
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| Error::Parse {
                        line: line_no,
                        message: format!("bad neighbor `{tok}`"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            lists.push(neighbors);
        }
        Self::from_adjacency(lists)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_adjacency_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_adjacency_text())?;
        Ok(())
    }
}

/// Random strongly connected digraph: self-loops, the cycle `i -> i+1`, and
/// `k_i ~ U{0..B-1}` extra distinct targets per node.
///
/// Panics if `spec.n == 0`.
pub fn generate_topology(spec: &TopologySpec) -> DirectedGraph {
    assert!(spec.n >= 1, "topology needs at least one node");
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut lists = Vec::with_capacity(n);
    for i in 0..n {
        let mut list = vec![i, (i + 1) % n];
        let k = if spec.max_extra_out_degree == 0 {
            0
        } else {
            rng.random_range(0..spec.max_extra_out_degree)
        };
        let k = k.min(n - 1);
        if k > 0 {
            // Sample among the n-1 other nodes, then shift past i.
            for other in index::sample(&mut rng, n - 1, k) {
                list.push(if other >= i { other + 1 } else { other });
            }
        }
        list.sort_unstable();
        list.dedup();
        lists.push(list);
    }
    DirectedGraph { out_neighbors: lists }
}

/// True iff every node reaches every other node (single Tarjan SCC).
pub fn is_strongly_connected(g: &DirectedGraph) -> bool {
    strongly_connected_components(g).len() == 1
}

/// Tarjan's algorithm, iterative so deep graphs do not overflow the stack.
/// Components come out in reverse topological order.
pub fn strongly_connected_components(g: &DirectedGraph) -> Vec<Vec<NodeId>> {
    const UNVISITED: usize = usize::MAX;
    let n = g.node_count();
    let mut index = vec![UNVISITED; n];
    let mut lowlink = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut components = Vec::new();
    let mut next_index = 0;
    // (node, position in its neighbor list)
    let mut call_stack: Vec<(NodeId, usize)> = Vec::new();

    for root in 0..n {
        if index[root] != UNVISITED {
            continue;
        }
        call_stack.push((root, 0));
        index[root] = next_index;
        lowlink[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut pos)) = call_stack.last_mut() {
            let neighbors = g.out_neighbors(v);
            if *pos < neighbors.len() {
                let w = neighbors[*pos];
                *pos += 1;
                if index[w] == UNVISITED {
                    index[w] = next_index;
                    lowlink[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call_stack.push((w, 0));
                } else if on_stack[w] {
                    lowlink[v] = lowlink[v].min(index[w]);
                }
                continue;
            }
            call_stack.pop();
            if let Some(&(parent, _)) = call_stack.last() {
                lowlink[parent] = lowlink[parent].min(lowlink[v]);
            }
            if lowlink[v] == index[v] {
                let mut component = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    component.push(w);
                    if w == v {
                        break;
                    }
                }
                component.sort_unstable();
                components.push(component);
            }
        }
    }
    components
}

/// Keeps `(i, j)` iff `(j, i)` is also present. Self-loops survive.
pub fn mutual_subgraph(g: &DirectedGraph) -> DirectedGraph {
    let out_neighbors = g
        .out_neighbors
        .iter()
        .enumerate()
        .map(|(i, list)| list.iter().copied().filter(|&j| g.has_edge(j, i)).collect())
        .collect();
    DirectedGraph { out_neighbors }
}
