//! Independent brute-force references: the exact optimal Steiner tree and the
//! online greedy baseline that attaches each member by a shortest path.
//!
//! These are used only by checkers and tests; the protocol never sees them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Edge, Graph, NodeId};
use crate::weight::Weight;

/// A tree spanning the member set, with its total weight.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct SteinerSolution {
    pub edges: BTreeSet<Edge>,
    pub weight: Weight,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("graph too large for exact search ({nodes} nodes > {budget})")]
    Refused { nodes: usize, budget: usize },
    #[error("order must be a permutation of the member set starting at the root")]
    BadOrder,
}

/// Exact search budget: relay subsets are enumerated, so node count is capped.
pub const EXACT_BUDGET: usize = 20;

/// Smallest `k` with `2^k >= z`; zero for `z <= 1`.
pub fn ceil_log2(z: u64) -> u32 {
    if z <= 1 {
        0
    } else {
        64 - (z - 1).leading_zeros()
    }
}

/// Minimum-weight tree spanning the members, by enumerating relay subsets and
/// taking the best spanning tree (Kruskal) of each induced subgraph. The
/// weight is unique; the returned edge set is the first tree attaining it in
/// subset order.
pub fn optimal_steiner(g: &Graph) -> Result<SteinerSolution, OracleError> {
    let n = g.node_count();
    if n > EXACT_BUDGET {
        return Err(OracleError::Refused { nodes: n, budget: EXACT_BUDGET });
    }
    let members: Vec<NodeId> = g.members().iter().copied().collect();
    if members.len() <= 1 {
        return Ok(SteinerSolution { edges: BTreeSet::new(), weight: Weight::zero() });
    }
    let relays: Vec<NodeId> = g.nodes().filter(|v| !g.is_member(*v)).collect();
    let mut sorted_edges: Vec<(Edge, Weight)> =
        g.edges().map(|(e, w)| (e, w.clone())).collect();
    sorted_edges.sort_by(|(ea, wa), (eb, wb)| wa.cmp(wb).then(ea.cmp(eb)));

    let mut best: Option<SteinerSolution> = None;
    for mask in 0u32..(1u32 << relays.len()) {
        let mut keep: BTreeSet<NodeId> = members.iter().copied().collect();
        for (i, r) in relays.iter().enumerate() {
            if mask & (1 << i) != 0 {
                keep.insert(*r);
            }
        }
        if let Some(tree) = spanning_tree(&sorted_edges, &keep) {
            if best.as_ref().is_none_or(|b| tree.weight < b.weight) {
                best = Some(tree);
            }
        }
    }
    // A connected graph always has at least the all-relays spanning tree.
    Ok(best.expect("connected graph has a spanning tree"))
}

/// Minimum spanning tree of the subgraph induced by `keep`, or `None` when it
/// does not connect all of `keep`.
fn spanning_tree(
    sorted_edges: &[(Edge, Weight)],
    keep: &BTreeSet<NodeId>,
) -> Option<SteinerSolution> {
    let mut uf = UnionFind::new(keep);
    let mut edges = BTreeSet::new();
    let mut weight = Weight::zero();
    for (e, w) in sorted_edges {
        let (u, v) = e.endpoints();
        if !keep.contains(&u) || !keep.contains(&v) {
            continue;
        }
        if uf.union(u, v) {
            edges.insert(*e);
            weight = &weight + w;
            if edges.len() + 1 == keep.len() {
                return Some(SteinerSolution { edges, weight });
            }
        }
    }
    if keep.len() <= 1 {
        Some(SteinerSolution { edges, weight })
    } else {
        None
    }
}

struct UnionFind {
    parent: BTreeMap<NodeId, NodeId>,
}

impl UnionFind {
    fn new(nodes: &BTreeSet<NodeId>) -> Self {
        UnionFind { parent: nodes.iter().map(|n| (*n, *n)).collect() }
    }

    fn find(&mut self, v: NodeId) -> NodeId {
        let p = self.parent[&v];
        if p == v {
            return v;
        }
        let root = self.find(p);
        self.parent.insert(v, root);
        root
    }

    fn union(&mut self, a: NodeId, b: NodeId) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            false
        } else {
            self.parent.insert(ra, rb);
            true
        }
    }
}

/// Online greedy baseline: members join in the given order, each attached to
/// the tree built so far by a shortest path. Ties in attach target and path
/// predecessor break toward smaller node ids.
pub fn imase_waxman_greedy(g: &Graph, order: &[NodeId]) -> Result<SteinerSolution, OracleError> {
    let members = g.members();
    if order.len() != members.len()
        || order.first() != Some(&g.root())
        || !order.iter().collect::<BTreeSet<_>>().eq(&members.iter().collect())
    {
        return Err(OracleError::BadOrder);
    }
    let mut tree_nodes: BTreeSet<NodeId> = BTreeSet::from([g.root()]);
    let mut edges: BTreeSet<Edge> = BTreeSet::new();
    let mut weight = Weight::zero();
    for m in &order[1..] {
        if tree_nodes.contains(m) {
            continue;
        }
        let dist = g
            .shortest_paths_from(*m)
            .expect("member is in the graph");
        let target = tree_nodes
            .iter()
            .map(|t| (dist[t].clone(), *t))
            .min()
            .expect("tree is never empty")
            .1;
        // Walk back from the target to the new member, always stepping to the
        // smallest-id neighbor that lies on a shortest path.
        let mut at = target;
        while at != *m {
            let d_at = dist[&at].clone();
            let next = g
                .neighbors(at)
                .filter(|(u, w)| {
                    dist.get(u).is_some_and(|du| &(du + *w) == &d_at)
                })
                .map(|(u, _)| u)
                .min()
                .expect("shortest path step exists");
            let w = g.edge_weight(at, next).unwrap().clone();
            if edges.insert(Edge::new(at, next)) {
                weight = &weight + &w;
            }
            tree_nodes.insert(at);
            tree_nodes.insert(next);
            at = next;
        }
        tree_nodes.insert(*m);
    }
    Ok(SteinerSolution { edges, weight })
}
