//! Weighted undirected dynamic graph, topology change events, and exact
//! shortest-path queries.
//!
//! The graph is an immutable value: [`Graph::apply_event`] returns a new graph
//! and rejects any event that would violate an invariant (disconnection,
//! duplicate elements, nonpositive weights, root leaving the member set).

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::weight::{Dist, Weight};

/// Network identifier of a node.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

// Node ids appear as JSON map keys (stringified) and are also routed through
// serde's internal buffering, so deserialization accepts both forms.
impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = NodeId;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a node id")
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<NodeId, E> {
                u32::try_from(v)
                    .map(NodeId)
                    .map_err(|_| E::custom("node id out of range"))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<NodeId, E> {
                u32::try_from(v)
                    .map(NodeId)
                    .map_err(|_| E::custom("node id out of range"))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<NodeId, E> {
                v.parse::<u32>()
                    .map(NodeId)
                    .map_err(|_| E::custom(format!("invalid node id `{v}`")))
            }
        }
        deserializer.deserialize_any(V)
    }
}

/// An undirected edge, stored with endpoints in ascending order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct Edge(NodeId, NodeId);

impl Edge {
    pub fn new(a: NodeId, b: NodeId) -> Self {
        if a <= b {
            Edge(a, b)
        } else {
            Edge(b, a)
        }
    }

    pub fn endpoints(&self) -> (NodeId, NodeId) {
        (self.0, self.1)
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.0, self.1)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("graph is not connected")]
    Disconnected,
    #[error("nonpositive weight on edge {0}")]
    NonpositiveWeight(Edge),
    #[error("root {0} is not a member")]
    RootNotMember(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("self-loop at node {0}")]
    SelfLoop(NodeId),
    #[error("duplicate edge {0}")]
    DuplicateEdge(Edge),
    #[error("no such edge {0}")]
    NoSuchEdge(Edge),
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
    #[error("node {0} is already a member")]
    DuplicateMember(NodeId),
    #[error("node {0} is not a member")]
    NotAMember(NodeId),
    #[error("event would disconnect the graph")]
    WouldDisconnect,
    #[error("event targets the root {0}")]
    TargetsRoot(NodeId),
}

/// Kinds of topology change events. Removal events (`del-member`,
/// `crash-edge`, `crash-node`) are the class for which the passage predicate
/// is asserted; add events only guarantee re-stabilization.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    AddMember { node: NodeId },
    DelMember { node: NodeId },
    AddEdge { u: NodeId, v: NodeId, w: Weight },
    CrashEdge { u: NodeId, v: NodeId },
    AddNode { node: NodeId, attach_to: NodeId, w: Weight },
    CrashNode { node: NodeId },
}

/// A topology change event stamped with the round at whose start it applies.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TopologyEvent {
    pub at_round: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl EventKind {
    /// True for the removal events (the superstabilization class).
    pub fn is_removal(&self) -> bool {
        matches!(
            self,
            EventKind::DelMember { .. } | EventKind::CrashEdge { .. } | EventKind::CrashNode { .. }
        )
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::AddMember { node } => write!(f, "add-member {node}"),
            EventKind::DelMember { node } => write!(f, "del-member {node}"),
            EventKind::AddEdge { u, v, w } => write!(f, "add-edge {u}-{v} w={w}"),
            EventKind::CrashEdge { u, v } => write!(f, "crash-edge {u}-{v}"),
            EventKind::AddNode { node, attach_to, w } => {
                write!(f, "add-node {node} at {attach_to} w={w}")
            }
            EventKind::CrashNode { node } => write!(f, "crash-node {node}"),
        }
    }
}

/// Weighted undirected connected graph with a member set and a fixed root.
///
/// The root stands in for the outcome of an external leader oracle and must
/// always be a member.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Graph {
    adj: BTreeMap<NodeId, BTreeMap<NodeId, Weight>>,
    members: BTreeSet<NodeId>,
    root: NodeId,
}

impl Graph {
    pub fn new(
        nodes: impl IntoIterator<Item = NodeId>,
        edges: impl IntoIterator<Item = (NodeId, NodeId, Weight)>,
        members: impl IntoIterator<Item = NodeId>,
        root: NodeId,
    ) -> Result<Self, GraphError> {
        let mut adj: BTreeMap<NodeId, BTreeMap<NodeId, Weight>> = BTreeMap::new();
        for n in nodes {
            adj.entry(n).or_default();
        }
        let mut g = Graph {
            adj,
            members: members.into_iter().collect(),
            root,
        };
        for (u, v, w) in edges {
            g.insert_edge(u, v, w)?;
        }
        g.validate()?;
        Ok(g)
    }

    fn insert_edge(&mut self, u: NodeId, v: NodeId, w: Weight) -> Result<(), GraphError> {
        if u == v {
            return Err(GraphError::SelfLoop(u));
        }
        if !self.adj.contains_key(&u) {
            return Err(GraphError::UnknownNode(u));
        }
        if !self.adj.contains_key(&v) {
            return Err(GraphError::UnknownNode(v));
        }
        if !w.is_positive() {
            return Err(GraphError::NonpositiveWeight(Edge::new(u, v)));
        }
        if self.adj[&u].contains_key(&v) {
            return Err(GraphError::DuplicateEdge(Edge::new(u, v)));
        }
        self.adj.get_mut(&u).unwrap().insert(v, w.clone());
        self.adj.get_mut(&v).unwrap().insert(u, w);
        Ok(())
    }

    fn validate(&self) -> Result<(), GraphError> {
        for m in &self.members {
            if !self.adj.contains_key(m) {
                return Err(GraphError::UnknownNode(*m));
            }
        }
        if !self.members.contains(&self.root) {
            return Err(GraphError::RootNotMember(self.root));
        }
        if !self.is_connected() {
            return Err(GraphError::Disconnected);
        }
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adj.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.values().map(|n| n.len()).sum::<usize>() / 2
    }

    pub fn contains_node(&self, v: NodeId) -> bool {
        self.adj.contains_key(&v)
    }

    pub fn neighbors(&self, v: NodeId) -> impl Iterator<Item = (NodeId, &Weight)> + '_ {
        self.adj
            .get(&v)
            .into_iter()
            .flat_map(|m| m.iter().map(|(u, w)| (*u, w)))
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adj.get(&v).map_or(0, |m| m.len())
    }

    pub fn edge_weight(&self, u: NodeId, v: NodeId) -> Option<&Weight> {
        self.adj.get(&u).and_then(|m| m.get(&v))
    }

    pub fn edges(&self) -> impl Iterator<Item = (Edge, &Weight)> + '_ {
        self.adj.iter().flat_map(|(u, nbrs)| {
            nbrs.iter()
                .filter(move |(v, _)| *u < **v)
                .map(move |(v, w)| (Edge::new(*u, *v), w))
        })
    }

    pub fn members(&self) -> &BTreeSet<NodeId> {
        &self.members
    }

    pub fn is_member(&self, v: NodeId) -> bool {
        self.members.contains(&v)
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn is_connected(&self) -> bool {
        let Some(&start) = self.adj.keys().next() else {
            return true;
        };
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for (u, _) in self.neighbors(v) {
                if seen.insert(u) {
                    queue.push_back(u);
                }
            }
        }
        seen.len() == self.adj.len()
    }

    /// Exact single-source shortest-path distances (Dijkstra).
    pub fn shortest_paths_from(&self, src: NodeId) -> Result<BTreeMap<NodeId, Weight>, GraphError> {
        if !self.adj.contains_key(&src) {
            return Err(GraphError::UnknownNode(src));
        }
        let mut dist: BTreeMap<NodeId, Weight> = BTreeMap::new();
        // Max-heap on Reverse((dist, node)); exact weights keep this stable.
        let mut heap: BinaryHeap<std::cmp::Reverse<(Weight, NodeId)>> = BinaryHeap::new();
        heap.push(std::cmp::Reverse((Weight::zero(), src)));
        while let Some(std::cmp::Reverse((d, v))) = heap.pop() {
            if dist.contains_key(&v) {
                continue;
            }
            dist.insert(v, d.clone());
            for (u, w) in self.neighbors(v) {
                if !dist.contains_key(&u) {
                    heap.push(std::cmp::Reverse((&d + w, u)));
                }
            }
        }
        Ok(dist)
    }

    /// Exact shortest-path weight between two nodes.
    pub fn shortest_path_distance(&self, u: NodeId, v: NodeId) -> Result<Weight, GraphError> {
        if !self.adj.contains_key(&v) {
            return Err(GraphError::UnknownNode(v));
        }
        let dist = self.shortest_paths_from(u)?;
        dist.get(&v).cloned().ok_or(GraphError::Disconnected)
    }

    /// Maximum over all pairs of the minimum hop count between them.
    pub fn hop_diameter(&self) -> u64 {
        let mut diameter = 0;
        for src in self.adj.keys() {
            let mut hops: BTreeMap<NodeId, u64> = BTreeMap::from([(*src, 0)]);
            let mut queue = VecDeque::from([*src]);
            while let Some(v) = queue.pop_front() {
                let h = hops[&v];
                for (u, _) in self.neighbors(v) {
                    if !hops.contains_key(&u) {
                        hops.insert(u, h + 1);
                        queue.push_back(u);
                    }
                }
            }
            diameter = diameter.max(hops.values().copied().max().unwrap_or(0));
        }
        diameter
    }

    /// Applies one topology change, re-validating all invariants.
    pub fn apply_event(&self, kind: &EventKind) -> Result<Graph, GraphError> {
        let mut g = self.clone();
        match kind {
            EventKind::AddMember { node } => {
                if !g.adj.contains_key(node) {
                    return Err(GraphError::UnknownNode(*node));
                }
                if !g.members.insert(*node) {
                    return Err(GraphError::DuplicateMember(*node));
                }
            }
            EventKind::DelMember { node } => {
                if *node == g.root {
                    return Err(GraphError::TargetsRoot(*node));
                }
                if !g.members.remove(node) {
                    return Err(GraphError::NotAMember(*node));
                }
            }
            EventKind::AddEdge { u, v, w } => {
                g.insert_edge(*u, *v, w.clone())?;
            }
            EventKind::CrashEdge { u, v } => {
                if g.edge_weight(*u, *v).is_none() {
                    return Err(GraphError::NoSuchEdge(Edge::new(*u, *v)));
                }
                g.adj.get_mut(u).unwrap().remove(v);
                g.adj.get_mut(v).unwrap().remove(u);
                if !g.is_connected() {
                    return Err(GraphError::WouldDisconnect);
                }
            }
            EventKind::AddNode { node, attach_to, w } => {
                if g.adj.contains_key(node) {
                    return Err(GraphError::DuplicateNode(*node));
                }
                g.adj.insert(*node, BTreeMap::new());
                g.insert_edge(*node, *attach_to, w.clone())?;
            }
            EventKind::CrashNode { node } => {
                if *node == g.root {
                    return Err(GraphError::TargetsRoot(*node));
                }
                if g.adj.remove(node).is_none() {
                    return Err(GraphError::UnknownNode(*node));
                }
                for nbrs in g.adj.values_mut() {
                    nbrs.remove(node);
                }
                g.members.remove(node);
                if !g.is_connected() {
                    return Err(GraphError::WouldDisconnect);
                }
            }
        }
        g.validate()?;
        Ok(g)
    }
}

/// Line-oriented graph file: `nodes N`, `root R`, `members id...`, then one
/// `u v w` edge per line. `#` starts a comment.
impl FromStr for Graph {
    type Err = GraphError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let err = |line: usize, msg: String| GraphError::Parse { line, msg };
        let mut nodes: Option<u32> = None;
        let mut root: Option<NodeId> = None;
        let mut members: Option<Vec<NodeId>> = None;
        let mut edges: Vec<(NodeId, NodeId, Weight)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap();
            match head {
                "nodes" => {
                    if nodes.is_some() {
                        return Err(err(lineno, "duplicate `nodes` line".into()));
                    }
                    let n: u32 = parts
                        .next()
                        .ok_or_else(|| err(lineno, "missing node count".into()))?
                        .parse()
                        .map_err(|_| err(lineno, "invalid node count".into()))?;
                    if n == 0 {
                        return Err(err(lineno, "node count must be positive".into()));
                    }
                    nodes = Some(n);
                }
                "root" => {
                    if root.is_some() {
                        return Err(err(lineno, "duplicate `root` line".into()));
                    }
                    let r: u32 = parts
                        .next()
                        .ok_or_else(|| err(lineno, "missing root id".into()))?
                        .parse()
                        .map_err(|_| err(lineno, "invalid root id".into()))?;
                    root = Some(NodeId(r));
                }
                "members" => {
                    if members.is_some() {
                        return Err(err(lineno, "duplicate `members` line".into()));
                    }
                    let mut ids = Vec::new();
                    for p in parts.by_ref() {
                        let id: u32 = p
                            .parse()
                            .map_err(|_| err(lineno, format!("invalid member id `{p}`")))?;
                        if ids.contains(&NodeId(id)) {
                            return Err(err(lineno, format!("duplicate member {id}")));
                        }
                        ids.push(NodeId(id));
                    }
                    if ids.is_empty() {
                        return Err(err(lineno, "empty member list".into()));
                    }
                    members = Some(ids);
                }
                u => {
                    let u: u32 = u
                        .parse()
                        .map_err(|_| err(lineno, format!("expected edge line, got `{line}`")))?;
                    let v: u32 = parts
                        .next()
                        .ok_or_else(|| err(lineno, "edge line missing second endpoint".into()))?
                        .parse()
                        .map_err(|_| err(lineno, "invalid edge endpoint".into()))?;
                    let w: Weight = parts
                        .next()
                        .ok_or_else(|| err(lineno, "edge line missing weight".into()))?
                        .parse()
                        .map_err(|e| err(lineno, format!("{e}")))?;
                    if !w.is_positive() {
                        return Err(err(lineno, "nonpositive weight".into()));
                    }
                    if parts.next().is_some() {
                        return Err(err(lineno, "trailing tokens on edge line".into()));
                    }
                    edges.push((NodeId(u), NodeId(v), w));
                }
            }
            if head != "nodes" && nodes.is_none() {
                return Err(err(lineno, "`nodes` line must come first".into()));
            }
        }
        let n = nodes.ok_or_else(|| err(0, "missing `nodes` line".into()))?;
        let root = root.ok_or_else(|| err(0, "missing `root` line".into()))?;
        let members = members.ok_or_else(|| err(0, "missing `members` line".into()))?;
        let ids: Vec<NodeId> = (1..=n).map(NodeId).collect();
        for m in &members {
            if m.0 == 0 || m.0 > n {
                return Err(GraphError::UnknownNode(*m));
            }
        }
        for (u, v, _) in &edges {
            for x in [u, v] {
                if x.0 == 0 || x.0 > n {
                    return Err(GraphError::UnknownNode(*x));
                }
            }
        }
        Graph::new(ids, edges, members, root)
    }
}

impl Serialize for Graph {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct EdgeRepr<'a> {
            u: NodeId,
            v: NodeId,
            w: &'a Weight,
        }
        #[derive(Serialize)]
        struct GraphRepr<'a> {
            nodes: Vec<NodeId>,
            root: NodeId,
            members: &'a BTreeSet<NodeId>,
            edges: Vec<EdgeRepr<'a>>,
        }
        let repr = GraphRepr {
            nodes: self.nodes().collect(),
            root: self.root,
            members: &self.members,
            edges: self
                .edges()
                .map(|(e, w)| {
                    let (u, v) = e.endpoints();
                    EdgeRepr { u, v, w }
                })
                .collect(),
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Graph {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct EdgeRepr {
            u: NodeId,
            v: NodeId,
            w: Weight,
        }
        #[derive(Deserialize)]
        struct GraphRepr {
            nodes: Vec<NodeId>,
            root: NodeId,
            members: Vec<NodeId>,
            edges: Vec<EdgeRepr>,
        }
        let repr = GraphRepr::deserialize(deserializer)?;
        Graph::new(
            repr.nodes,
            repr.edges.into_iter().map(|e| (e.u, e.v, e.w)),
            repr.members,
            repr.root,
        )
        .map_err(serde::de::Error::custom)
    }
}

/// Distance map including unreachable nodes, used by checkers on subgraphs.
pub fn dist_or_infinite(dists: &BTreeMap<NodeId, Weight>, v: NodeId) -> Dist {
    dists
        .get(&v)
        .cloned()
        .map(Dist::Finite)
        .unwrap_or(Dist::Infinite)
}
