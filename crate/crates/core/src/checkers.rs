//! Judges for configurations and traces: legitimacy, competitiveness against
//! the exact oracle, the passage predicate for removal events, round bounds,
//! and teardown-wait liveness.
//!
//! Checkers never mutate anything and never feed back into the protocol; a
//! failed property becomes a violation inside a [`Verdict`], not a panic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::graph::{EventKind, NodeId, TopologyEvent};
use crate::oracle::{self, OracleError};
use crate::simulator::{Configuration, Trace, TraceRecord};
use crate::weight::Weight;

/// Outcome of one check. `skipped` marks checks that could not run (oracle
/// budget, degenerate member count) as distinct from passing or failing.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    #[serde(default)]
    pub skipped: bool,
    pub violations: Vec<Violation>,
    pub metrics: Metrics,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Violation {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub round: Option<u64>,
    pub nodes: Vec<NodeId>,
    pub description: String,
}

#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rounds_to_converge: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tree_weight: Option<Weight>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub optimal_weight: Option<Weight>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ratio: Option<Weight>,
    #[serde(default)]
    pub messages: u64,
}

impl Verdict {
    fn from_violations(violations: Vec<Violation>, metrics: Metrics) -> Self {
        Verdict { pass: violations.is_empty(), skipped: false, violations, metrics }
    }

    fn skipped(reason: &str, metrics: Metrics) -> Self {
        Verdict {
            pass: true,
            skipped: true,
            violations: vec![Violation {
                round: None,
                nodes: Vec::new(),
                description: format!("skipped: {reason}"),
            }],
            metrics,
        }
    }
}

fn violation(round: Option<u64>, nodes: Vec<NodeId>, description: String) -> Violation {
    Violation { round, nodes, description }
}

/// Legitimacy of a configuration:
/// (a) the parent edges of connected nodes form one tree rooted at the root
///     and containing every member,
/// (b) every leaf of that tree is a member,
/// (c) quiescence: no waiting node and no rule enabled anywhere under
///     refreshed neighbor copies,
/// (d) no node sees a better path under refreshed copies.
pub fn check_legitimate(cfg: &Configuration) -> Verdict {
    let mut violations = Vec::new();
    let round = Some(cfg.round);
    let root = cfg.graph.root();
    let connected: BTreeSet<NodeId> = cfg
        .states
        .iter()
        .filter(|(_, s)| s.connected)
        .map(|(v, _)| *v)
        .collect();

    if !connected.contains(&root) {
        violations.push(violation(round, vec![root], "root is not connected".into()));
    }
    for m in cfg.graph.members() {
        if !connected.contains(m) {
            violations.push(violation(round, vec![*m], format!("member {m} is not connected")));
        }
    }

    // Parent edges of connected nodes must exist and stay inside the
    // connected set; following them must reach the root acyclically.
    for v in &connected {
        if *v == root {
            continue;
        }
        let parent = cfg.states[v].parent;
        if !connected.contains(&parent) {
            violations.push(violation(
                round,
                vec![*v, parent],
                format!("connected node {v} has a disconnected parent {parent}"),
            ));
        }
        if cfg.graph.edge_weight(*v, parent).is_none() {
            violations.push(violation(
                round,
                vec![*v, parent],
                format!("parent edge {v}-{parent} is not in the graph"),
            ));
        }
    }
    for v in &connected {
        let mut seen = BTreeSet::from([*v]);
        let mut at = *v;
        loop {
            if at == root {
                break;
            }
            let parent = cfg.states[&at].parent;
            if !connected.contains(&parent) || cfg.graph.edge_weight(at, parent).is_none() {
                break; // already reported above
            }
            if !seen.insert(parent) {
                violations.push(violation(
                    round,
                    seen.into_iter().collect(),
                    format!("parent cycle among connected nodes reachable from {v}"),
                ));
                break;
            }
            at = parent;
        }
    }

    // Every leaf of the connected tree is a member.
    let has_connected_child = |v: NodeId| {
        connected
            .iter()
            .any(|u| *u != v && cfg.states[u].parent == v && connected.contains(u))
    };
    for v in &connected {
        if !has_connected_child(*v) && !cfg.states[v].member {
            violations.push(violation(
                round,
                vec![*v],
                format!("non-member leaf {v} in the connected tree"),
            ));
        }
    }

    // Quiescence and shortest-path consistency under refreshed copies.
    for v in cfg.graph.nodes() {
        let s = &cfg.states[&v];
        if s.waiting {
            violations.push(violation(round, vec![v], format!("node {v} is still waiting")));
            continue;
        }
        let view = cfg.refreshed_view(v);
        let enabled = view.enabled_rules();
        if !enabled.is_empty() {
            violations.push(violation(
                round,
                vec![v],
                format!("rule {} enabled at node {v} under refreshed copies", enabled[0]),
            ));
        }
        // The root anchors all distances; its only guard is root coherence.
        if v != root && !view.neighbors.is_empty() && view.better_path() {
            violations.push(violation(
                round,
                vec![v],
                format!("node {v} still sees a better path"),
            ));
        }
    }

    let (_, tree_weight) = cfg.connected_tree();
    let metrics = Metrics { tree_weight: Some(tree_weight), ..Metrics::default() };
    Verdict::from_violations(violations, metrics)
}

/// Tree weight against the exact optimum: `W(T) <= ceil(log2 z) * W(T*)`,
/// compared exactly. Skipped below two members or past the oracle budget.
pub fn check_competitiveness(cfg: &Configuration) -> Verdict {
    let z = cfg.graph.members().len() as u64;
    let (_, tree_weight) = cfg.connected_tree();
    let mut metrics = Metrics { tree_weight: Some(tree_weight.clone()), ..Metrics::default() };
    if z < 2 {
        return Verdict::skipped("member count below 2 makes the bound vacuous", metrics);
    }
    let optimal = match oracle::optimal_steiner(&cfg.graph) {
        Ok(sol) => sol,
        Err(OracleError::Refused { nodes, budget }) => {
            return Verdict::skipped(
                &format!("oracle refused: {nodes} nodes exceed budget {budget}"),
                metrics,
            );
        }
        Err(e) => {
            return Verdict::from_violations(
                vec![violation(None, Vec::new(), format!("oracle error: {e}"))],
                metrics,
            );
        }
    };
    metrics.optimal_weight = Some(optimal.weight.clone());
    metrics.ratio = tree_weight.ratio_to(&optimal.weight);
    let bound = oracle::ceil_log2(z);
    let mut violations = Vec::new();
    if !tree_weight.within_factor(bound, &optimal.weight) {
        violations.push(violation(
            None,
            Vec::new(),
            format!(
                "tree weight {tree_weight} exceeds {bound} * optimal {}",
                optimal.weight
            ),
        ));
    }
    Verdict::from_violations(violations, metrics)
}

/// Nodes whose parent chain passes through `top` (including `top` itself),
/// over the full parent relation of a configuration.
fn subtree_of(cfg: &Configuration, top: NodeId) -> BTreeSet<NodeId> {
    let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for (v, s) in &cfg.states {
        if *v != s.parent {
            children.entry(s.parent).or_default().push(*v);
        }
    }
    let mut sub = BTreeSet::from([top]);
    let mut stack = vec![top];
    while let Some(v) = stack.pop() {
        for c in children.get(&v).into_iter().flatten() {
            if sub.insert(*c) {
                stack.push(*c);
            }
        }
    }
    sub
}

/// Passage predicate for a removal event in a trace that starts legitimate:
/// until re-legitimacy, parent relations may change only inside the subtree
/// detached by the removed member, edge or node.
pub fn check_passage(trace: &Trace, event: &TopologyEvent) -> Verdict {
    let metrics = Metrics::default();
    if !event.kind.is_removal() {
        return Verdict::from_violations(
            vec![violation(None, Vec::new(), format!("event {} is not a removal", event.kind))],
            metrics,
        );
    }
    let Some(start) = trace.configuration_at(0) else {
        return Verdict::from_violations(
            vec![violation(None, Vec::new(), "trace has no initial snapshot".into())],
            metrics,
        );
    };
    let initial = check_legitimate(&start);
    if !initial.pass {
        return Verdict::from_violations(
            vec![violation(
                Some(0),
                Vec::new(),
                "trace does not start legitimate (contract violation)".into(),
            )],
            metrics,
        );
    }
    let Some(pre) = trace.configuration_at(event.at_round - 1) else {
        return Verdict::from_violations(
            vec![violation(None, Vec::new(), "no snapshot before the event round".into())],
            metrics,
        );
    };

    let allowed: BTreeSet<NodeId> = match &event.kind {
        EventKind::DelMember { node } => subtree_of(&pre, *node),
        EventKind::CrashEdge { u, v } => {
            if pre.states.get(v).map(|s| s.parent) == Some(*u) {
                subtree_of(&pre, *v)
            } else if pre.states.get(u).map(|s| s.parent) == Some(*v) {
                subtree_of(&pre, *u)
            } else {
                BTreeSet::new()
            }
        }
        EventKind::CrashNode { node } => {
            let mut sub = subtree_of(&pre, *node);
            sub.remove(node);
            sub
        }
        _ => unreachable!("removal events only"),
    };

    // The restabilization window ends at the first legitimate round boundary
    // at or after the event.
    let relegit = trace
        .snapshot_rounds()
        .into_iter()
        .filter(|r| *r >= event.at_round)
        .find(|r| {
            trace
                .configuration_at(*r)
                .map(|c| check_legitimate(&c).pass)
                .unwrap_or(false)
        });
    let window_end = relegit.unwrap_or(u64::MAX);

    let mut violations = Vec::new();
    for rec in &trace.records {
        if let TraceRecord::Rule { round, node, rule, parent_change: Some((from, to)) } = rec {
            if *round >= event.at_round && *round <= window_end && !allowed.contains(node) {
                violations.push(violation(
                    Some(*round),
                    vec![*node],
                    format!(
                        "{rule} moved parent of {node} ({from} -> {to}) outside the detached subtree"
                    ),
                ));
            }
        }
    }
    Verdict::from_violations(violations, metrics)
}

/// Re-stabilization span against `factor * z * D` rounds, with `D` the hop
/// diameter of the final graph. The span runs from the last event (or the
/// start) to the converged round.
pub fn check_round_bound(trace: &Trace, factor: u64) -> Verdict {
    let mut metrics = Metrics { messages: trace.summary.messages, ..Metrics::default() };
    let Some(converged_round) = trace.summary.converged_round else {
        return Verdict::from_violations(
            vec![violation(
                None,
                Vec::new(),
                format!("run did not converge within {} rounds", trace.scenario.max_rounds),
            )],
            metrics,
        );
    };
    let Some(final_cfg) = trace.configuration_at(trace.summary.rounds) else {
        return Verdict::from_violations(
            vec![violation(None, Vec::new(), "missing final snapshot".into())],
            metrics,
        );
    };
    let span = converged_round - trace.summary.last_event_round.unwrap_or(0);
    metrics.rounds_to_converge = Some(span);
    let z = (final_cfg.graph.members().len() as u64).max(1);
    let d = final_cfg.graph.hop_diameter().max(1);
    let bound = factor * z * d;
    let mut violations = Vec::new();
    if span > bound {
        violations.push(violation(
            Some(converged_round),
            Vec::new(),
            format!("converged in {span} rounds, above the bound {factor}*{z}*{d} = {bound}"),
        ));
    }
    Verdict::from_violations(violations, metrics)
}

/// Every teardown wait (rule CR3 or interrupt) must be released before the
/// trace ends.
pub fn check_no_deadlock(trace: &Trace) -> Verdict {
    let mut outstanding: BTreeMap<NodeId, Vec<u64>> = BTreeMap::new();
    for rec in &trace.records {
        match rec {
            TraceRecord::Rule { round, node, rule, .. } if *rule == crate::protocol::RuleId::CR3 => {
                outstanding.entry(*node).or_default().push(*round);
            }
            TraceRecord::Interrupt { round, node } => {
                outstanding.entry(*node).or_default().push(*round);
            }
            TraceRecord::WaitRelease { node, .. } => {
                // A release without a begin comes from initial corruption.
                if let Some(stack) = outstanding.get_mut(node) {
                    stack.pop();
                }
            }
            _ => {}
        }
    }
    let violations: Vec<Violation> = outstanding
        .into_iter()
        .filter(|(_, begins)| !begins.is_empty())
        .map(|(node, begins)| {
            violation(
                Some(begins[0]),
                vec![node],
                format!("wait begun at round {} on node {node} never released", begins[0]),
            )
        })
        .collect();
    Verdict::from_violations(violations, Metrics::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, Graph};
    use crate::simulator::{run, Adversary, Atomicity, CorruptionSpec, Scenario, Summary};
    use crate::weight::Dist;

    fn g1() -> Graph {
        "nodes 4\nroot 1\nmembers 1 4\n1 2 1\n2 4 2\n1 3 4\n3 4 1\n"
            .parse()
            .unwrap()
    }

    fn scenario(graph: Graph, corruption: CorruptionSpec, seed: u64) -> Scenario {
        Scenario {
            graph,
            corruption,
            events: Vec::new(),
            seed,
            max_rounds: 300,
            adversary: Adversary::Random,
            atomicity: Atomicity::Coarse,
        }
    }

    fn legit_g1() -> Configuration {
        crate::simulator::init(&scenario(g1(), CorruptionSpec::Legitimate, 1))
    }

    #[test]
    fn stabilized_fixture_is_legitimate_with_the_expected_tree() {
        let cfg = legit_g1();
        let verdict = check_legitimate(&cfg);
        assert!(verdict.pass, "{:?}", verdict.violations);
        let (edges, _) = cfg.connected_tree();
        assert_eq!(
            edges,
            BTreeSet::from([
                Edge::new(NodeId(1), NodeId(2)),
                Edge::new(NodeId(2), NodeId(4))
            ])
        );
    }

    #[test]
    fn non_member_leaf_fails() {
        let mut cfg = legit_g1();
        // Forge node 3 as a connected leaf.
        let s = cfg.states.get_mut(&NodeId(3)).unwrap();
        s.connected = true;
        s.parent = NodeId(1);
        s.level = 1;
        s.need = true;
        let verdict = check_legitimate(&cfg);
        assert!(!verdict.pass);
        assert!(verdict
            .violations
            .iter()
            .any(|v| v.description.contains("non-member leaf")));
    }

    #[test]
    fn parent_cycle_fails() {
        let mut cfg = legit_g1();
        cfg.states.get_mut(&NodeId(2)).unwrap().parent = NodeId(4);
        cfg.states.get_mut(&NodeId(4)).unwrap().parent = NodeId(2);
        let verdict = check_legitimate(&cfg);
        assert!(!verdict.pass);
        assert!(verdict
            .violations
            .iter()
            .any(|v| v.description.contains("cycle")));
    }

    #[test]
    fn fixture_ratio_is_exactly_one() {
        let cfg = legit_g1();
        let verdict = check_competitiveness(&cfg);
        assert!(verdict.pass && !verdict.skipped, "{verdict:?}");
        assert_eq!(verdict.metrics.tree_weight, Some(Weight::from_int(3)));
        assert_eq!(verdict.metrics.optimal_weight, Some(Weight::from_int(3)));
        assert_eq!(verdict.metrics.ratio, Some(Weight::from_int(1)));
    }

    #[test]
    fn forced_bad_ratio_fails() {
        let mut cfg = legit_g1();
        // Forge the expensive route 1-3-4 while the optimum stays 3: the
        // z=2 bound demands equality.
        cfg.states.get_mut(&NodeId(2)).unwrap().connected = false;
        cfg.states.get_mut(&NodeId(2)).unwrap().need = false;
        let s3 = cfg.states.get_mut(&NodeId(3)).unwrap();
        s3.connected = true;
        s3.need = true;
        s3.parent = NodeId(1);
        s3.level = 1;
        s3.dist = Dist::Finite(Weight::from_int(4));
        let s4 = cfg.states.get_mut(&NodeId(4)).unwrap();
        s4.parent = NodeId(3);
        s4.level = 2;
        s4.dist = Dist::Finite(Weight::from_int(5));
        let verdict = check_competitiveness(&cfg);
        assert!(!verdict.pass);
    }

    #[test]
    fn single_member_competitiveness_is_skipped() {
        let g: Graph = "nodes 2\nroot 1\nmembers 1\n1 2 1\n".parse().unwrap();
        let cfg = crate::simulator::init(&scenario(g, CorruptionSpec::Legitimate, 1));
        let verdict = check_competitiveness(&cfg);
        assert!(verdict.skipped && verdict.pass);
    }

    #[test]
    fn oracle_budget_refusal_is_skipped() {
        let n = 21;
        let edges: Vec<String> = (1..n).map(|i| format!("{} {} 1", i, i + 1)).collect();
        let text = format!("nodes {n}\nroot 1\nmembers 1 {n}\n{}\n", edges.join("\n"));
        let g: Graph = text.parse().unwrap();
        let cfg = crate::simulator::init(&scenario(g, CorruptionSpec::Legitimate, 1));
        let verdict = check_competitiveness(&cfg);
        assert!(verdict.skipped && verdict.pass);
    }

    #[test]
    fn passage_holds_for_member_removal_on_fixture() {
        let mut scn = scenario(g1(), CorruptionSpec::Legitimate, 3);
        let event = TopologyEvent { at_round: 2, kind: EventKind::DelMember { node: NodeId(4) } };
        scn.events = vec![event.clone()];
        let out = run(&scn).unwrap();
        assert!(out.converged());
        let verdict = check_passage(&out.trace, &event);
        assert!(verdict.pass, "{:?}", verdict.violations);
        assert!(check_no_deadlock(&out.trace).pass);
    }

    #[test]
    fn passage_rejects_non_removal_and_illegitimate_start() {
        let scn = scenario(g1(), CorruptionSpec::FullRandom, 4);
        let out = run(&scn).unwrap();
        let add = TopologyEvent { at_round: 2, kind: EventKind::AddMember { node: NodeId(2) } };
        assert!(!check_passage(&out.trace, &add).pass);
        let del = TopologyEvent { at_round: 2, kind: EventKind::DelMember { node: NodeId(4) } };
        let verdict = check_passage(&out.trace, &del);
        assert!(!verdict.pass);
        assert!(verdict.violations[0].description.contains("contract violation"));
    }

    #[test]
    fn round_bound_passes_on_fixture_and_flags_non_convergence() {
        let out = run(&scenario(g1(), CorruptionSpec::FullRandom, 5)).unwrap();
        let verdict = check_round_bound(&out.trace, 5);
        assert!(verdict.pass, "{verdict:?}");
        assert!(verdict.metrics.rounds_to_converge.is_some());

        let mut scn = scenario(g1(), CorruptionSpec::FullRandom, 5);
        scn.max_rounds = 1;
        let out = run(&scn).unwrap();
        let verdict = check_round_bound(&out.trace, 5);
        assert!(!verdict.pass);
        assert!(verdict.violations[0].description.contains("did not converge"));
    }

    #[test]
    fn truncated_wait_is_reported() {
        let mut scn = scenario(g1(), CorruptionSpec::Legitimate, 6);
        scn.events = vec![TopologyEvent {
            at_round: 2,
            kind: EventKind::DelMember { node: NodeId(4) },
        }];
        let out = run(&scn).unwrap();
        // Drop every release record to simulate a truncated trace.
        let mut trace = out.trace.clone();
        trace.records.retain(|r| !matches!(r, TraceRecord::WaitRelease { .. }));
        let verdict = check_no_deadlock(&trace);
        assert!(!verdict.pass);
        assert_eq!(verdict.violations[0].nodes, vec![NodeId(4)]);

        // A run without any teardown passes vacuously.
        let calm = run(&scenario(g1(), CorruptionSpec::Legitimate, 6)).unwrap();
        assert!(check_no_deadlock(&calm.trace).pass);
    }

    #[test]
    fn summary_serde_round_trips() {
        let s = Summary {
            converged: true,
            rounds: 12,
            converged_round: Some(12),
            last_event_round: None,
            tree_edges: vec![Edge::new(NodeId(1), NodeId(2))],
            tree_weight: Weight::from_int(3),
            messages: 240,
            dropped: 0,
        };
        let json = serde_json::to_string(&s).unwrap();
        let back: Summary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
