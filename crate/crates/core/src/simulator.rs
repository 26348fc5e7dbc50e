//! Deterministic round engine over asynchronous FIFO channels.
//!
//! A round applies the topology events stamped for it, lets every node
//! broadcast its advertised state to all neighbors, delivers every in-flight
//! message in a seeded adversarial order (each receipt running the protocol
//! rules), then evaluates teardown-wait releases. Messages sent as a reaction
//! to a receipt stay in their channel for the next round, which preserves the
//! one-hop-per-round propagation the round bound is counted in.
//!
//! All randomness flows from the scenario seed through named substreams, so
//! adding a consumer to one stream never perturbs the others, and the whole
//! (scenario, seed) → trace mapping is a pure function.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkers;
use crate::graph::{Edge, EventKind, Graph, GraphError, NodeId, TopologyEvent};
use crate::protocol::{
    self, handle_info_msg, handle_interrupt, make_info_msg, release_wait, InfoMsg, NeighborCopy,
    NeighborView, NodeState, RuleFiring, RuleId,
};
use crate::weight::{Dist, Weight};

/// How the initial configuration is drawn.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionSpec {
    /// Start from a pre-verified stabilized configuration.
    Legitimate,
    /// Randomize every protocol variable and every neighbor copy.
    FullRandom,
    /// Start stabilized, then randomize the named variables on every node.
    Selective(BTreeSet<ProtocolVar>),
}

/// Writable protocol variables that a corruption spec may target.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolVar {
    Parent,
    Level,
    Dist,
    Need,
    Connected,
    ConnectPt,
    Waiting,
}

impl ProtocolVar {
    pub const ALL: [ProtocolVar; 7] = [
        ProtocolVar::Parent,
        ProtocolVar::Level,
        ProtocolVar::Dist,
        ProtocolVar::Need,
        ProtocolVar::Connected,
        ProtocolVar::ConnectPt,
        ProtocolVar::Waiting,
    ];
}

/// Message delivery order within a round.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adversary {
    /// Uniformly random over in-flight messages.
    #[default]
    Random,
    /// Always delivers the message advertising the largest distance first,
    /// delaying the minimum-distance frontier.
    Greedy,
}

/// How much correction runs per receipt.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Atomicity {
    /// Rules run to the local fixpoint on each receipt.
    #[default]
    Coarse,
    /// At most one rule fires per receipt.
    Fine,
}

fn default_max_rounds() -> u64 {
    1000
}

/// A complete, replayable run description.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub graph: Graph,
    pub corruption: CorruptionSpec,
    #[serde(default)]
    pub events: Vec<TopologyEvent>,
    pub seed: u64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u64,
    #[serde(default)]
    pub adversary: Adversary,
    #[serde(default)]
    pub atomicity: Atomicity,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("max_rounds must be positive")]
    ZeroMaxRounds,
    #[error("events must be sorted by at_round")]
    UnsortedEvents,
    #[error("event {index} has at_round 0; rounds are 1-based")]
    EventAtRoundZero { index: usize },
    #[error("event {index} is stamped past max_rounds")]
    EventBeyondMaxRounds { index: usize },
    #[error("event {index} ({kind}) is invalid: {source}")]
    BadEvent {
        index: usize,
        kind: String,
        source: GraphError,
    },
    #[error("scenario graph: {0}")]
    Graph(#[from] GraphError),
}

impl Scenario {
    /// Checks the event script against the evolving graph so the engine can
    /// apply events infallibly.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.max_rounds == 0 {
            return Err(ScenarioError::ZeroMaxRounds);
        }
        if self.events.windows(2).any(|w| w[0].at_round > w[1].at_round) {
            return Err(ScenarioError::UnsortedEvents);
        }
        let mut g = self.graph.clone();
        for (index, ev) in self.events.iter().enumerate() {
            if ev.at_round == 0 {
                return Err(ScenarioError::EventAtRoundZero { index });
            }
            if ev.at_round > self.max_rounds {
                return Err(ScenarioError::EventBeyondMaxRounds { index });
            }
            g = g.apply_event(&ev.kind).map_err(|source| ScenarioError::BadEvent {
                index,
                kind: ev.kind.to_string(),
                source,
            })?;
        }
        Ok(())
    }
}

/// Directed channel key `(from, to)`.
pub type ChannelId = (NodeId, NodeId);

/// FIFO channel with send sequence numbers for trace auditing.
#[derive(Clone, Debug, Default)]
pub struct Channel {
    pub queue: VecDeque<(u64, InfoMsg)>,
    next_seq: u64,
}

impl Channel {
    fn push(&mut self, msg: InfoMsg) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push_back((seq, msg));
        seq
    }
}

/// Global state the checkers judge: node states, the per-node neighbor
/// copies, in-flight channel contents, the current graph and the round count.
#[derive(Clone, Debug)]
pub struct Configuration {
    pub states: BTreeMap<NodeId, NodeState>,
    pub copies: BTreeMap<NodeId, BTreeMap<NodeId, NeighborCopy>>,
    pub channels: BTreeMap<ChannelId, Channel>,
    pub graph: Graph,
    pub round: u64,
}

impl Configuration {
    /// A node's world as the protocol sees it, from the stored (possibly
    /// stale) copies.
    pub fn view(&self, v: NodeId) -> NeighborView {
        let stored = &self.copies[&v];
        let neighbors = self
            .graph
            .neighbors(v)
            .map(|(u, w)| (u, (stored[&u].clone(), w.clone())))
            .collect();
        NeighborView {
            own: self.states[&v].clone(),
            neighbors,
            is_root: v == self.graph.root(),
        }
    }

    /// A node's world with every copy replaced by the neighbor's actual
    /// current state; the reference for quiescence and legitimacy checks.
    pub fn refreshed_view(&self, v: NodeId) -> NeighborView {
        let neighbors = self
            .graph
            .neighbors(v)
            .map(|(u, w)| {
                (u, (make_info_msg(&self.states[&u]).to_copy(), w.clone()))
            })
            .collect();
        NeighborView {
            own: self.states[&v].clone(),
            neighbors,
            is_root: v == self.graph.root(),
        }
    }

    pub fn any_waiting(&self) -> bool {
        self.states.values().any(|s| s.waiting)
    }

    /// No rule is enabled at any node under the stored copies.
    pub fn all_rules_disabled(&self) -> bool {
        self.graph
            .nodes()
            .all(|v| self.view(v).enabled_rules().is_empty())
    }

    /// Parent edges of connected nodes, with their total weight. Edges whose
    /// endpoints are incoherent (missing parent edge, parent of the root) are
    /// skipped; the checkers flag those separately.
    pub fn connected_tree(&self) -> (BTreeSet<Edge>, Weight) {
        let mut edges = BTreeSet::new();
        let mut weight = Weight::zero();
        for (v, s) in &self.states {
            if !s.connected || *v == self.graph.root() {
                continue;
            }
            if let Some(w) = self.graph.edge_weight(*v, s.parent) {
                if edges.insert(Edge::new(*v, s.parent)) {
                    weight = &weight + w;
                }
            }
        }
        (edges, weight)
    }

    fn empty_channels(graph: &Graph) -> BTreeMap<ChannelId, Channel> {
        let mut channels = BTreeMap::new();
        for (e, _) in graph.edges() {
            let (u, v) = e.endpoints();
            channels.insert((u, v), Channel::default());
            channels.insert((v, u), Channel::default());
        }
        channels
    }
}

/// Named RNG substreams derived from the scenario seed.
#[derive(Clone, Copy)]
enum Stream {
    Corruption = 1,
    Scheduling = 2,
    Stabilize = 3,
}

fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// One replayable log line.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "t", rename_all = "kebab-case")]
pub enum TraceRecord {
    Header(Header),
    Event { round: u64, event: TopologyEvent },
    /// A topology change reset this node and began its teardown wait.
    Interrupt { round: u64, node: NodeId },
    Deliver { round: u64, from: NodeId, to: NodeId, seq: u64, changed: bool },
    Rule {
        round: u64,
        node: NodeId,
        rule: RuleId,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        parent_change: Option<(NodeId, NodeId)>,
    },
    WaitRelease { round: u64, node: NodeId },
    Snapshot {
        round: u64,
        states: BTreeMap<NodeId, NodeState>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        graph: Option<Graph>,
    },
    Summary(Summary),
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Header {
    pub scenario: Scenario,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub converged: bool,
    pub rounds: u64,
    pub converged_round: Option<u64>,
    pub last_event_round: Option<u64>,
    pub tree_edges: Vec<Edge>,
    pub tree_weight: Weight,
    pub messages: u64,
    pub dropped: u64,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("trace does not start with a header record")]
    MissingHeader,
    #[error("trace does not end with a summary record")]
    MissingSummary,
}

/// The replayable output log: the resolved scenario, all records, and the
/// run summary.
#[derive(Clone, PartialEq, Debug)]
pub struct Trace {
    pub scenario: Scenario,
    pub records: Vec<TraceRecord>,
    pub summary: Summary,
}

impl Trace {
    /// Line-delimited JSON: header first, summary last.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = TraceRecord::Header(Header { scenario: self.scenario.clone() });
        out.push_str(&serde_json::to_string(&header).expect("serializable"));
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        let summary = TraceRecord::Summary(self.summary.clone());
        out.push_str(&serde_json::to_string(&summary).expect("serializable"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Trace, TraceError> {
        let mut scenario = None;
        let mut summary = None;
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(line)
                .map_err(|source| TraceError::Json { line: idx + 1, source })?;
            match rec {
                TraceRecord::Header(h) => scenario = Some(h.scenario),
                TraceRecord::Summary(s) => summary = Some(s),
                other => records.push(other),
            }
        }
        Ok(Trace {
            scenario: scenario.ok_or(TraceError::MissingHeader)?,
            records,
            summary: summary.ok_or(TraceError::MissingSummary)?,
        })
    }

    /// Rebuilds the configuration at a round boundary from the snapshot
    /// stream. Copies are synthesized fresh from the states and channels are
    /// empty, which is exactly what the checkers evaluate against.
    pub fn configuration_at(&self, round: u64) -> Option<Configuration> {
        let mut graph = self.scenario.graph.clone();
        for rec in &self.records {
            if let TraceRecord::Snapshot { round: r, states, graph: g } = rec {
                if let Some(g) = g {
                    graph = g.clone();
                }
                if *r == round {
                    let copies = synthesize_copies(&graph, states);
                    return Some(Configuration {
                        states: states.clone(),
                        copies,
                        channels: Configuration::empty_channels(&graph),
                        graph,
                        round,
                    });
                }
            }
        }
        None
    }

    /// Rounds at which snapshots exist, in order.
    pub fn snapshot_rounds(&self) -> Vec<u64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                TraceRecord::Snapshot { round, .. } => Some(*round),
                _ => None,
            })
            .collect()
    }
}

fn synthesize_copies(
    graph: &Graph,
    states: &BTreeMap<NodeId, NodeState>,
) -> BTreeMap<NodeId, BTreeMap<NodeId, NeighborCopy>> {
    graph
        .nodes()
        .map(|v| {
            let m = graph
                .neighbors(v)
                .map(|(u, _)| (u, make_info_msg(&states[&u]).to_copy()))
                .collect();
            (v, m)
        })
        .collect()
}

/// Record sink; counting always happens, record keeping can be switched off
/// (used by the nested stabilization run inside `init`).
#[derive(Debug)]
pub struct Recorder {
    keep: bool,
    pub records: Vec<TraceRecord>,
    pub messages: u64,
    pub dropped: u64,
}

impl Recorder {
    pub fn new(keep: bool) -> Self {
        Recorder { keep, records: Vec::new(), messages: 0, dropped: 0 }
    }

    fn push(&mut self, rec: TraceRecord) {
        if self.keep {
            self.records.push(rec);
        }
    }
}

/// The delivery-order RNG for a scenario seed, for callers stepping rounds
/// manually.
pub fn scheduling_rng(seed: u64) -> ChaCha8Rng {
    substream(seed, Stream::Scheduling)
}

/// Draws the initial configuration for a scenario: stabilized, fully random,
/// or stabilized with selected variables re-randomized. Channels start empty.
pub fn init(scenario: &Scenario) -> Configuration {
    match &scenario.corruption {
        CorruptionSpec::Legitimate => stabilized_configuration(scenario),
        CorruptionSpec::FullRandom => {
            let mut rng = substream(scenario.seed, Stream::Corruption);
            random_configuration(&scenario.graph, &mut rng)
        }
        CorruptionSpec::Selective(vars) => {
            let mut cfg = stabilized_configuration(scenario);
            let mut rng = substream(scenario.seed, Stream::Corruption);
            randomize_vars(&mut cfg, vars, &mut rng);
            cfg
        }
    }
}

/// Clean reset state: nobody has heard anything, channels empty.
fn clean_configuration(graph: &Graph) -> Configuration {
    let states: BTreeMap<NodeId, NodeState> = graph
        .nodes()
        .map(|v| (v, NodeState::fresh(v, graph.is_member(v))))
        .collect();
    let copies = graph
        .nodes()
        .map(|v| {
            let m = graph
                .neighbors(v)
                .map(|(u, _)| (u, NeighborCopy::unknown(u)))
                .collect();
            (v, m)
        })
        .collect();
    Configuration {
        states,
        copies,
        channels: Configuration::empty_channels(graph),
        graph: graph.clone(),
        round: 0,
    }
}

fn stabilized_configuration(scenario: &Scenario) -> Configuration {
    let graph = &scenario.graph;
    let mut cfg = clean_configuration(graph);
    let inner = Scenario {
        graph: graph.clone(),
        corruption: CorruptionSpec::Legitimate,
        events: Vec::new(),
        seed: scenario.seed,
        max_rounds: u64::MAX,
        adversary: scenario.adversary,
        atomicity: scenario.atomicity,
    };
    let z = graph.members().len() as u64;
    let cap = 200 + 50 * z * graph.hop_diameter().max(1);
    let mut rng = substream(scenario.seed, Stream::Stabilize);
    let mut rec = Recorder::new(false);
    for _ in 0..cap {
        let changed = run_round(&mut cfg, &inner, &mut rng, &mut rec);
        if !changed && !cfg.any_waiting() && cfg.all_rules_disabled() {
            cfg.round = 0;
            cfg.channels = Configuration::empty_channels(graph);
            let verdict = checkers::check_legitimate(&cfg);
            assert!(
                verdict.pass,
                "stabilization produced an illegitimate configuration: {:?}",
                verdict.violations
            );
            return cfg;
        }
    }
    panic!("stabilization did not converge within {cap} rounds");
}

fn random_configuration(graph: &Graph, rng: &mut ChaCha8Rng) -> Configuration {
    let mut cfg = clean_configuration(graph);
    let nodes: Vec<NodeId> = graph.nodes().collect();
    for v in &nodes {
        let mut s = cfg.states[v].clone();
        for var in ProtocolVar::ALL {
            draw_var(&mut s, var, graph, rng);
        }
        clamp_invariants(&mut s);
        cfg.states.insert(*v, s);
    }
    for v in &nodes {
        let nbrs: Vec<NodeId> = graph.neighbors(*v).map(|(u, _)| u).collect();
        for u in nbrs {
            let c = random_copy(u, graph, rng);
            cfg.copies.get_mut(v).unwrap().insert(u, c);
        }
    }
    cfg
}

fn draw_var(s: &mut NodeState, var: ProtocolVar, graph: &Graph, rng: &mut ChaCha8Rng) {
    match var {
        ProtocolVar::Parent => s.parent = random_parent(s.id, graph, rng),
        ProtocolVar::Level => s.level = rng.random_range(0..=2 * graph.node_count() as u32),
        ProtocolVar::Dist => s.dist = random_dist(graph, rng),
        ProtocolVar::Need => s.need = rng.random_bool(0.5),
        ProtocolVar::Connected => s.connected = rng.random_bool(0.5),
        ProtocolVar::ConnectPt => s.connect_pt = rng.random_bool(0.5),
        ProtocolVar::Waiting => s.waiting = rng.random_bool(0.5),
    }
}

fn clamp_invariants(s: &mut NodeState) {
    if s.waiting {
        s.connected = false;
        s.dist = Dist::Infinite;
    }
}

fn random_parent(v: NodeId, graph: &Graph, rng: &mut ChaCha8Rng) -> NodeId {
    let mut candidates: Vec<NodeId> = graph.neighbors(v).map(|(u, _)| u).collect();
    candidates.push(v);
    candidates[rng.random_range(0..candidates.len())]
}

/// Infinity with probability 1/4, otherwise a sum of up to `|V|` random edge
/// weights (zero terms give distance zero).
fn random_dist(graph: &Graph, rng: &mut ChaCha8Rng) -> Dist {
    if rng.random_range(0..4u32) == 0 {
        return Dist::Infinite;
    }
    let edges: Vec<Weight> = graph.edges().map(|(_, w)| w.clone()).collect();
    if edges.is_empty() {
        return Dist::zero();
    }
    let terms = rng.random_range(0..=graph.node_count());
    let mut acc = Weight::zero();
    for _ in 0..terms {
        acc = &acc + &edges[rng.random_range(0..edges.len())];
    }
    Dist::Finite(acc)
}

fn random_copy(u: NodeId, graph: &Graph, rng: &mut ChaCha8Rng) -> NeighborCopy {
    NeighborCopy {
        parent: random_parent(u, graph, rng),
        level: rng.random_range(0..=2 * graph.node_count() as u32),
        dist: random_dist(graph, rng),
        need: rng.random_bool(0.5),
        connected: rng.random_bool(0.5),
        connect_pt: rng.random_bool(0.5),
    }
}

fn randomize_vars(cfg: &mut Configuration, vars: &BTreeSet<ProtocolVar>, rng: &mut ChaCha8Rng) {
    let nodes: Vec<NodeId> = cfg.graph.nodes().collect();
    for v in nodes {
        let mut s = cfg.states[&v].clone();
        for var in ProtocolVar::ALL {
            if vars.contains(&var) {
                draw_var(&mut s, var, &cfg.graph, rng);
            }
        }
        clamp_invariants(&mut s);
        cfg.states.insert(v, s);
    }
}

/// Applies one validated event to the configuration: graph and channel
/// surgery, then the interrupt handler on every surviving node.
fn apply_event(cfg: &mut Configuration, event: &TopologyEvent, rec: &mut Recorder) {
    let round = cfg.round + 1;
    let new_graph = cfg
        .graph
        .apply_event(&event.kind)
        .expect("scenario events are validated before running");
    // Views are built against the old graph so the interrupt handler sees
    // the neighborhood as it was when the event struck.
    let survivors: Vec<NodeId> = new_graph.nodes().filter(|v| cfg.graph.contains_node(*v)).collect();
    let old_views: BTreeMap<NodeId, NeighborView> =
        survivors.iter().map(|v| (*v, cfg.view(*v))).collect();

    match &event.kind {
        EventKind::AddEdge { u, v, .. } => {
            cfg.channels.insert((*u, *v), Channel::default());
            cfg.channels.insert((*v, *u), Channel::default());
        }
        EventKind::CrashEdge { u, v } => {
            cfg.channels.remove(&(*u, *v));
            cfg.channels.remove(&(*v, *u));
        }
        EventKind::AddNode { node, attach_to, .. } => {
            cfg.channels.insert((*node, *attach_to), Channel::default());
            cfg.channels.insert((*attach_to, *node), Channel::default());
            cfg.states.insert(*node, NodeState::fresh(*node, false));
            cfg.copies.insert(
                *node,
                BTreeMap::from([(*attach_to, NeighborCopy::unknown(*attach_to))]),
            );
        }
        EventKind::CrashNode { node } => {
            cfg.channels.retain(|(a, b), _| a != node && b != node);
            cfg.states.remove(node);
            cfg.copies.remove(node);
        }
        EventKind::AddMember { .. } | EventKind::DelMember { .. } => {}
    }
    cfg.graph = new_graph;

    for (v, view) in old_views {
        let out = handle_interrupt(view, &event.kind);
        cfg.states.insert(v, out.view.own);
        let m = out.view.neighbors.into_iter().map(|(u, (c, _))| (u, c)).collect();
        cfg.copies.insert(v, m);
        if out.teardown {
            rec.push(TraceRecord::Interrupt { round, node: v });
        }
    }
    rec.push(TraceRecord::Event { round, event: event.clone() });
}

/// Executes one round; returns whether any node state changed.
pub fn run_round(
    cfg: &mut Configuration,
    scenario: &Scenario,
    sched: &mut ChaCha8Rng,
    rec: &mut Recorder,
) -> bool {
    let round = cfg.round + 1;
    let mut changed = false;

    // (1) Topology events stamped for this round.
    let mut graph_changed = false;
    for ev in scenario.events.iter().filter(|e| e.at_round == round) {
        apply_event(cfg, ev, rec);
        changed = true;
        graph_changed = true;
    }

    // (2) Periodic broadcast of everyone's advertised state.
    let nodes: Vec<NodeId> = cfg.graph.nodes().collect();
    for v in &nodes {
        let msg = make_info_msg(&cfg.states[v]);
        let nbrs: Vec<NodeId> = cfg.graph.neighbors(*v).map(|(u, _)| u).collect();
        for u in nbrs {
            cfg.channels.get_mut(&(*v, u)).unwrap().push(msg.clone());
            rec.messages += 1;
        }
    }

    // (3) Adversarially ordered delivery of everything sent, including the
    // reactive broadcasts triggered by receipts during this round. A safety
    // valve bounds deliveries per round; a reaction cascade still in flight
    // at the cap carries over to the next round in FIFO order.
    let mut live: BTreeMap<ChannelId, usize> = cfg
        .channels
        .iter()
        .filter(|(_, ch)| !ch.queue.is_empty())
        .map(|(k, ch)| (*k, ch.queue.len()))
        .collect();
    let mut total: usize = live.values().sum();
    let cap = 32 * (total + 2 * cfg.graph.edge_count() + 1);
    let mut delivered = 0usize;
    while total > 0 && delivered < cap {
        let key = pick_channel(cfg, &live, scenario.adversary, sched, total);
        let (seq, msg) = cfg.channels.get_mut(&key).unwrap().queue.pop_front().unwrap();
        match live.get_mut(&key) {
            Some(n) if *n > 1 => *n -= 1,
            _ => {
                live.remove(&key);
            }
        }
        total -= 1;
        delivered += 1;

        let (from, to) = key;
        let view = cfg.view(to);
        let step = match scenario.atomicity {
            Atomicity::Coarse => handle_info_msg(view, &msg),
            Atomicity::Fine => fine_step(view, &msg),
        };
        if !step.accepted {
            rec.dropped += 1;
            continue;
        }
        let state_changed = !step.fired.is_empty();
        rec.push(TraceRecord::Deliver { round, from, to, seq, changed: state_changed });
        for f in &step.fired {
            rec.push(TraceRecord::Rule {
                round,
                node: to,
                rule: f.rule,
                parent_change: f.parent_change,
            });
        }
        cfg.copies.get_mut(&to).unwrap().insert(from, msg.to_copy());
        if state_changed {
            changed = true;
            cfg.states.insert(to, step.view.own.clone());
            let reaction = make_info_msg(&step.view.own);
            let nbrs: Vec<NodeId> = cfg.graph.neighbors(to).map(|(u, _)| u).collect();
            for u in nbrs {
                cfg.channels.get_mut(&(to, u)).unwrap().push(reaction.clone());
                rec.messages += 1;
                *live.entry((to, u)).or_insert(0) += 1;
                total += 1;
            }
        }
    }

    // (4) Teardown-wait releases.
    let waiting: Vec<NodeId> = cfg
        .states
        .iter()
        .filter(|(_, s)| s.waiting)
        .map(|(v, _)| *v)
        .collect();
    for v in waiting {
        let mut view = cfg.view(v);
        if release_wait(&mut view) {
            cfg.states.insert(v, view.own);
            rec.push(TraceRecord::WaitRelease { round, node: v });
            changed = true;
        }
    }

    cfg.round = round;
    rec.push(TraceRecord::Snapshot {
        round,
        states: cfg.states.clone(),
        graph: graph_changed.then(|| cfg.graph.clone()),
    });
    changed
}

fn fine_step(mut view: NeighborView, msg: &InfoMsg) -> protocol::Step {
    if !protocol::absorb_info_msg(&mut view, msg) {
        return protocol::Step { view, fired: Vec::new(), accepted: false };
    }
    let fired: Vec<RuleFiring> = if view.own.waiting {
        Vec::new()
    } else {
        view.fire_next_rule().into_iter().collect()
    };
    protocol::Step { view, fired, accepted: true }
}

fn pick_channel(
    cfg: &Configuration,
    remaining: &BTreeMap<ChannelId, usize>,
    adversary: Adversary,
    sched: &mut ChaCha8Rng,
    total: usize,
) -> ChannelId {
    match adversary {
        Adversary::Random => {
            let mut idx = sched.random_range(0..total);
            for (k, n) in remaining {
                if idx < *n {
                    return *k;
                }
                idx -= n;
            }
            unreachable!("index within total message count")
        }
        Adversary::Greedy => *remaining
            .keys()
            .min_by(|a, b| {
                let da = &cfg.channels[*a].queue.front().unwrap().1.dist;
                let db = &cfg.channels[*b].queue.front().unwrap().1.dist;
                db.cmp(da).then_with(|| a.cmp(b))
            })
            .expect("some channel has messages"),
    }
}

/// Engine output: the replayable trace and the live final configuration.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trace: Trace,
    pub config: Configuration,
}

impl RunOutput {
    pub fn converged(&self) -> bool {
        self.trace.summary.converged
    }
}

/// Runs a scenario to quiescence or `max_rounds`.
///
/// Quiescence holds at the end of a round when nothing changed during it, no
/// node is waiting, no rule is enabled anywhere, and no event is still
/// scheduled. Because every node broadcasts every round, an unchanged round
/// leaves all neighbor copies equal to the live states, so the rule check is
/// against fully refreshed information.
pub fn run(scenario: &Scenario) -> Result<RunOutput, ScenarioError> {
    scenario.validate()?;
    let mut cfg = init(scenario);
    let mut rec = Recorder::new(true);
    rec.push(TraceRecord::Snapshot {
        round: 0,
        states: cfg.states.clone(),
        graph: Some(cfg.graph.clone()),
    });
    let mut sched = substream(scenario.seed, Stream::Scheduling);
    let last_event_round = scenario.events.last().map(|e| e.at_round);
    let mut converged_round = None;
    while cfg.round < scenario.max_rounds {
        let changed = run_round(&mut cfg, scenario, &mut sched, &mut rec);
        let pending = last_event_round.is_some_and(|r| r > cfg.round);
        if !changed && !pending && !cfg.any_waiting() && cfg.all_rules_disabled() {
            converged_round = Some(cfg.round);
            break;
        }
    }
    let (tree_edges, tree_weight) = cfg.connected_tree();
    let summary = Summary {
        converged: converged_round.is_some(),
        rounds: cfg.round,
        converged_round,
        last_event_round,
        tree_edges: tree_edges.into_iter().collect(),
        tree_weight,
        messages: rec.messages,
        dropped: rec.dropped,
    };
    Ok(RunOutput {
        trace: Trace { scenario: scenario.clone(), records: rec.records, summary },
        config: cfg,
    })
}
