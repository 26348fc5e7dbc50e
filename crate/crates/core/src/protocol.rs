//! Pure node-local protocol: state, guard predicates, correction rules, the
//! broadcast message, the receipt handler and the topology interrupt handler.
//!
//! Everything here is state-in/state-out. A node sees only its own variables
//! and the last-received copies of each neighbor's advertised variables; it
//! never reads a neighbor's live state. The simulator owns delivery, the
//! protocol owns what a delivery does.
//!
//! Rules are totally ordered. On each receipt the node fires the
//! lowest-priority enabled rule repeatedly until none is enabled (or it enters
//! the teardown wait), then re-advertises its state if anything changed.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::graph::{EventKind, NodeId};
use crate::weight::{Dist, Weight};

/// The per-node protocol variables.
///
/// `member` is environment-provided and never written by rules. `waiting` is
/// the teardown wait: a waiting node keeps absorbing messages and advertising
/// its frozen state but fires no rules until released.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct NodeState {
    pub id: NodeId,
    pub parent: NodeId,
    pub level: u32,
    pub dist: Dist,
    pub member: bool,
    pub need: bool,
    pub connected: bool,
    pub connect_pt: bool,
    pub waiting: bool,
}

impl NodeState {
    /// Reset state for a node that has not heard anything yet.
    pub fn fresh(id: NodeId, member: bool) -> Self {
        NodeState {
            id,
            parent: id,
            level: 0,
            dist: Dist::Infinite,
            member,
            need: false,
            connected: false,
            connect_pt: false,
            waiting: false,
        }
    }

    /// `waiting` implies disconnected with infinite distance.
    pub fn invariants_hold(&self) -> bool {
        !self.waiting || (!self.connected && self.dist.is_infinite())
    }
}

/// Last-received copy of a neighbor's six advertised variables.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct NeighborCopy {
    pub parent: NodeId,
    pub level: u32,
    pub dist: Dist,
    pub need: bool,
    pub connected: bool,
    pub connect_pt: bool,
}

impl NeighborCopy {
    /// Pessimistic placeholder for a neighbor nothing has been heard from.
    pub fn unknown(id: NodeId) -> Self {
        NeighborCopy {
            parent: id,
            level: 0,
            dist: Dist::Infinite,
            need: false,
            connected: false,
            connect_pt: false,
        }
    }
}

/// The periodic broadcast: exactly the six advertised variables, never
/// `member`.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct InfoMsg {
    pub sender: NodeId,
    pub parent: NodeId,
    pub level: u32,
    pub dist: Dist,
    pub need: bool,
    pub connected: bool,
    pub connect_pt: bool,
}

impl InfoMsg {
    pub fn to_copy(&self) -> NeighborCopy {
        NeighborCopy {
            parent: self.parent,
            level: self.level,
            dist: self.dist.clone(),
            need: self.need,
            connected: self.connected,
            connect_pt: self.connect_pt,
        }
    }
}

/// Projection of a node state onto the wire record.
pub fn make_info_msg(s: &NodeState) -> InfoMsg {
    InfoMsg {
        sender: s.id,
        parent: s.parent,
        level: s.level,
        dist: s.dist.clone(),
        need: s.need,
        connected: s.connected,
        connect_pt: s.connect_pt,
    }
}

/// Correction rules in firing priority order (lowest fires first).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum RuleId {
    /// Root reinitialization.
    RR,
    /// Distance stabilization for not connected nodes.
    DR1,
    /// Distance stabilization for connected nodes.
    DR2,
    /// Nodes which need to be connected.
    NR1,
    /// Nodes which need not to be connected.
    NR2,
    /// Nodes which must be connected.
    CR1,
    /// Nodes which must not be connected.
    CR2,
    /// Consequence of a deletion: disconnect and wait for the subtree.
    CR3,
    /// Connection point update.
    TR,
}

impl RuleId {
    pub const ALL: [RuleId; 9] = [
        RuleId::RR,
        RuleId::DR1,
        RuleId::DR2,
        RuleId::NR1,
        RuleId::NR2,
        RuleId::CR1,
        RuleId::CR2,
        RuleId::CR3,
        RuleId::TR,
    ];
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Hard cap on rule firings per receipt; exceeding it is a bug.
pub const RULE_FIXPOINT_CAP: usize = RuleId::ALL.len() * 4;

/// A node's local world: its own state, the copies of each current
/// neighbor's advertised state with the incident edge weight, and the leader
/// oracle's verdict.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct NeighborView {
    pub own: NodeState,
    pub neighbors: BTreeMap<NodeId, (NeighborCopy, Weight)>,
    pub is_root: bool,
}

/// One rule firing, with the parent move when the rule changed it.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RuleFiring {
    pub rule: RuleId,
    pub parent_change: Option<(NodeId, NodeId)>,
}

/// Result of absorbing one message.
#[derive(Clone, Debug)]
pub struct Step {
    pub view: NeighborView,
    pub fired: Vec<RuleFiring>,
    /// False when the sender is not a current neighbor and the message was
    /// dropped.
    pub accepted: bool,
}

/// Result of a topology interrupt.
#[derive(Clone, Debug)]
pub struct Interrupt {
    pub view: NeighborView,
    /// True when the node reset itself and entered the teardown wait.
    pub teardown: bool,
}

impl NeighborView {
    fn copy_of(&self, id: NodeId) -> Option<&NeighborCopy> {
        self.neighbors.get(&id).map(|(c, _)| c)
    }

    fn parent_copy(&self) -> Option<&NeighborCopy> {
        self.copy_of(self.own.parent)
    }

    /// Root coherence: zero distance and level, self parent, all flags set.
    pub fn croot(&self) -> bool {
        let s = &self.own;
        s.dist == Dist::zero()
            && s.parent == s.id
            && s.need
            && s.connected
            && s.connect_pt
            && s.level == 0
    }

    /// Parent coherence: the parent is a current neighbor, the own level is
    /// the parent's copied level plus one, and no neighbor claiming this node
    /// as parent carries an inconsistent level.
    pub fn cparent(&self) -> bool {
        let Some(parent) = self.parent_copy() else {
            return false;
        };
        if self.own.level != parent.level.saturating_add(1) {
            return false;
        }
        !self.neighbors.values().any(|(c, _)| {
            c.parent == self.own.id && c.level != self.own.level.saturating_add(1)
        })
    }

    /// Some neighbor asks this node for a connection.
    pub fn asked_connection(&self) -> bool {
        self.neighbors
            .values()
            .any(|(c, _)| c.parent == self.own.id && c.need)
    }

    /// Minimum route to the current tree for a not connected node: direct
    /// edges to connected neighbors against advertised distances of not
    /// connected ones. Ties break toward the smallest neighbor id. With no
    /// finite candidate the result is infinite with the smallest neighbor id.
    pub fn dist_not_connect(&self) -> (Dist, NodeId) {
        assert!(!self.neighbors.is_empty(), "node {} has no neighbors", self.own.id);
        self.neighbors
            .iter()
            .map(|(id, (c, w))| {
                let d = if c.connected {
                    Dist::Finite(w.clone())
                } else {
                    c.dist.plus(w)
                };
                (d, *id)
            })
            .min()
            .unwrap()
    }

    /// Minimum route to a connection point for a connected node: direct edges
    /// to connected connection points against advertised distances of the
    /// remaining neighbors. Only neighbors whose copied level lies strictly
    /// below the node's own level are candidates, which keeps re-parenting
    /// directed toward the root and cycle-free; ties break toward the
    /// smallest neighbor id. With no candidate the result is infinite with
    /// the smallest neighbor id.
    pub fn dist_connect(&self) -> (Dist, NodeId) {
        assert!(!self.neighbors.is_empty(), "node {} has no neighbors", self.own.id);
        self.neighbors
            .iter()
            .filter(|(_, (c, _))| c.level < self.own.level)
            .map(|(id, (c, w))| {
                let d = if c.connected && c.connect_pt {
                    Dist::Finite(w.clone())
                } else {
                    c.dist.plus(w)
                };
                (d, *id)
            })
            .min()
            .unwrap_or_else(|| (Dist::Infinite, *self.neighbors.keys().next().unwrap()))
    }

    /// A strictly different route to the tree (not connected) or to the
    /// connection point (connected) is available.
    pub fn better_path(&self) -> bool {
        if self.own.connected {
            self.own.dist != self.dist_connect().0
        } else {
            self.own.dist != self.dist_not_connect().0
        }
    }

    /// The connection request path is stable: the node needs the tree, its
    /// parent advertises connected, and the need is justified by membership
    /// or by a requesting child.
    pub fn connect_stab(&self) -> bool {
        let Some(parent) = self.parent_copy() else {
            return false;
        };
        self.own.need
            && parent.connected
            && (self.own.member || self.asked_connection())
    }

    /// `connect_pt` equals its target: member, or more than one connected
    /// child.
    pub fn connect_pt_stab(&self) -> bool {
        self.own.connect_pt == self.connect_pt_target()
    }

    fn connect_pt_target(&self) -> bool {
        self.own.member || self.connected_children() > 1
    }

    fn connected_children(&self) -> usize {
        self.neighbors
            .values()
            .filter(|(c, _)| c.parent == self.own.id && c.connected)
            .count()
    }

    /// Guard of a single rule against this view.
    pub fn rule_enabled(&self, rule: RuleId) -> bool {
        let s = &self.own;
        let root = self.is_root;
        match rule {
            RuleId::RR => root && !self.croot(),
            RuleId::DR1 => {
                !root && ((!s.connected && self.better_path()) || !self.cparent())
            }
            RuleId::DR2 => {
                !root
                    && s.connected
                    && self.connect_stab()
                    && self.better_path()
                    && self.cparent()
                    && self.connect_pt_stab()
            }
            RuleId::NR1 => {
                !root
                    && !s.need
                    && !s.connected
                    && !self.better_path()
                    && self.cparent()
                    && (s.member || self.asked_connection())
            }
            RuleId::NR2 => {
                !root
                    && !s.connected
                    && s.need
                    && !s.member
                    && !self.asked_connection()
                    && !self.better_path()
                    && self.cparent()
            }
            RuleId::CR1 => {
                !root
                    && !s.connected
                    && self.connect_stab()
                    && !self.better_path()
                    && self.cparent()
            }
            RuleId::CR2 => {
                !root
                    && s.connected
                    && !self.connect_stab()
                    && self.cparent()
                    && matches!(self.parent_copy(), Some(p) if !p.dist.is_infinite())
            }
            RuleId::CR3 => {
                !root
                    && s.connected
                    && !self.connect_stab()
                    && self.cparent()
                    && matches!(self.parent_copy(), Some(p) if p.dist.is_infinite())
            }
            RuleId::TR => {
                !root
                    && s.connected
                    && self.connect_stab()
                    && self.cparent()
                    && !self.connect_pt_stab()
            }
        }
    }

    /// All enabled rules in priority order. A waiting node reports none.
    pub fn enabled_rules(&self) -> Vec<RuleId> {
        if self.own.waiting {
            return Vec::new();
        }
        RuleId::ALL
            .into_iter()
            .filter(|r| self.rule_enabled(*r))
            .collect()
    }

    fn first_enabled(&self) -> Option<RuleId> {
        if self.own.waiting {
            return None;
        }
        RuleId::ALL.into_iter().find(|r| self.rule_enabled(*r))
    }

    /// Applies one rule body. The rule must be enabled.
    pub fn apply_rule(&self, rule: RuleId) -> NodeState {
        assert!(
            self.rule_enabled(rule),
            "rule {rule} not enabled at node {}",
            self.own.id
        );
        let mut s = self.own.clone();
        match rule {
            RuleId::RR => {
                s.dist = Dist::zero();
                s.parent = s.id;
                s.need = true;
                s.connected = true;
                s.connect_pt = true;
                s.level = 0;
            }
            RuleId::DR1 => {
                let (d, p) = self.dist_not_connect();
                s.dist = d;
                s.parent = p;
                s.connected = false;
                s.connect_pt = false;
                s.level = self.copy_of(p).unwrap().level.saturating_add(1);
            }
            RuleId::DR2 => {
                let (d, p) = self.dist_connect();
                s.dist = d;
                s.parent = p;
                s.level = self.copy_of(p).unwrap().level.saturating_add(1);
            }
            RuleId::NR1 => s.need = true,
            RuleId::NR2 => s.need = false,
            RuleId::CR1 => s.connected = true,
            RuleId::CR2 => s.connected = false,
            RuleId::CR3 => {
                s.connected = false;
                s.dist = Dist::Infinite;
                s.connect_pt = false;
                s.waiting = true;
            }
            RuleId::TR => s.connect_pt = self.connect_pt_target(),
        }
        s
    }

    /// Fires the lowest enabled rule once. Returns `None` when nothing is
    /// enabled or the enabled rule would not change the state (no further
    /// progress is possible under this view).
    pub fn fire_next_rule(&mut self) -> Option<RuleFiring> {
        let rule = self.first_enabled()?;
        let next = self.apply_rule(rule);
        if next == self.own {
            return None;
        }
        let parent_change =
            (next.parent != self.own.parent).then(|| (self.own.parent, next.parent));
        self.own = next;
        Some(RuleFiring { rule, parent_change })
    }

    /// Runs rules to the local fixpoint in priority order, stopping early
    /// when the node enters the teardown wait.
    ///
    /// Under a fixed view the ladder can revisit a state (re-parenting breaks
    /// the child-level clause of the parent check, the reset restores it, and
    /// reconnection closes the loop), so iteration also stops at the first
    /// recurrence: from there only fresh neighbor information makes progress.
    pub fn run_rules_to_fixpoint(&mut self) -> Vec<RuleFiring> {
        let mut fired = Vec::new();
        let mut seen: Vec<NodeState> = vec![self.own.clone()];
        for _ in 0..RULE_FIXPOINT_CAP {
            let Some(rule) = self.first_enabled() else {
                return fired;
            };
            let next = self.apply_rule(rule);
            if seen.contains(&next) {
                return fired;
            }
            let parent_change =
                (next.parent != self.own.parent).then(|| (self.own.parent, next.parent));
            seen.push(next.clone());
            self.own = next;
            fired.push(RuleFiring { rule, parent_change });
            if self.own.waiting {
                return fired;
            }
        }
        panic!(
            "rule fixpoint exceeded {RULE_FIXPOINT_CAP} firings at node {}",
            self.own.id
        );
    }
}

/// Refreshes the sender's copy from a received message. Returns false (and
/// leaves the view untouched) when the sender is not a current neighbor.
pub fn absorb_info_msg(view: &mut NeighborView, msg: &InfoMsg) -> bool {
    match view.neighbors.get_mut(&msg.sender) {
        Some(entry) => {
            entry.0 = msg.to_copy();
            true
        }
        None => false,
    }
}

/// Absorbs a received message: refreshes the sender's copy and corrects the
/// local state to a rule fixpoint. Messages from non-neighbors are dropped.
pub fn handle_info_msg(mut view: NeighborView, msg: &InfoMsg) -> Step {
    if !absorb_info_msg(&mut view, msg) {
        return Step { view, fired: Vec::new(), accepted: false };
    }
    let fired = view.run_rules_to_fixpoint();
    Step { view, fired, accepted: true }
}

/// Reacts to a topology change. Losing the membership or the parent link
/// resets the node and starts the teardown wait; all other events only adjust
/// the neighbor map.
pub fn handle_interrupt(mut view: NeighborView, event: &EventKind) -> Interrupt {
    let me = view.own.id;
    let mut teardown = false;
    match event {
        EventKind::DelMember { node } if *node == me => {
            view.own.member = false;
            teardown = true;
        }
        EventKind::AddMember { node } if *node == me => {
            view.own.member = true;
        }
        EventKind::CrashEdge { u, v } if *u == me || *v == me => {
            let other = if *u == me { *v } else { *u };
            view.neighbors.remove(&other);
            if view.own.parent == other {
                teardown = true;
            }
        }
        EventKind::CrashNode { node } => {
            if view.neighbors.remove(node).is_some() && view.own.parent == *node {
                teardown = true;
            }
        }
        EventKind::AddEdge { u, v, w } if *u == me || *v == me => {
            let other = if *u == me { *v } else { *u };
            view.neighbors
                .insert(other, (NeighborCopy::unknown(other), w.clone()));
        }
        EventKind::AddNode { node, attach_to, w } if *attach_to == me => {
            view.neighbors
                .insert(*node, (NeighborCopy::unknown(*node), w.clone()));
        }
        _ => {}
    }
    if teardown {
        view.own.connected = false;
        view.own.dist = Dist::Infinite;
        view.own.connect_pt = false;
        view.own.waiting = true;
    }
    Interrupt { view, teardown }
}

/// Ends the teardown wait exactly when no neighbor copy still claims this
/// node as a connected child. Returns whether the node was released.
pub fn release_wait(view: &mut NeighborView) -> bool {
    if !view.own.waiting {
        return false;
    }
    let held = view
        .neighbors
        .values()
        .any(|(c, _)| c.parent == view.own.id && c.connected);
    if held {
        false
    } else {
        view.own.waiting = false;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wi(n: i64) -> Weight {
        Weight::from_int(n)
    }

    fn di(n: i64) -> Dist {
        Dist::Finite(wi(n))
    }

    fn root_state() -> NodeState {
        NodeState {
            id: NodeId(1),
            parent: NodeId(1),
            level: 0,
            dist: Dist::zero(),
            member: true,
            need: true,
            connected: true,
            connect_pt: true,
            waiting: false,
        }
    }

    fn copy(parent: u32, level: u32, dist: Dist, need: bool, connected: bool, cp: bool) -> NeighborCopy {
        NeighborCopy {
            parent: NodeId(parent),
            level,
            dist,
            need,
            connected,
            connect_pt: cp,
        }
    }

    fn view(own: NodeState, is_root: bool, nbrs: Vec<(u32, NeighborCopy, Weight)>) -> NeighborView {
        NeighborView {
            own,
            neighbors: nbrs
                .into_iter()
                .map(|(id, c, w)| (NodeId(id), (c, w)))
                .collect(),
            is_root,
        }
    }

    #[test]
    fn croot_accepts_canonical_root_only() {
        let v = view(root_state(), true, vec![]);
        assert!(v.croot());

        let mut bad_level = root_state();
        bad_level.level = 3;
        assert!(!view(bad_level, true, vec![]).croot());

        let mut bad_cp = root_state();
        bad_cp.connect_pt = false;
        assert!(!view(bad_cp, true, vec![]).croot());
    }

    #[test]
    fn cparent_checks_levels_both_ways() {
        let mut own = NodeState::fresh(NodeId(5), false);
        own.parent = NodeId(2);
        own.level = 3;
        let ok = view(
            own.clone(),
            false,
            vec![(2, copy(1, 2, di(1), true, true, false), wi(1))],
        );
        assert!(ok.cparent());

        // Parent missing from the neighborhood.
        let gone = view(own.clone(), false, vec![(9, copy(9, 0, Dist::Infinite, false, false, false), wi(1))]);
        assert!(!gone.cparent());

        // A two-cycle: the child claims this node as parent at the same level.
        let cycle = view(
            own,
            false,
            vec![
                (2, copy(1, 2, di(1), true, true, false), wi(1)),
                (7, copy(5, 3, di(2), false, false, false), wi(1)),
            ],
        );
        assert!(!cycle.cparent());
    }

    #[test]
    fn both_cycle_endpoints_fail_cparent() {
        // Nodes 5 and 7 claim each other as parent with equal levels.
        let mut five = NodeState::fresh(NodeId(5), false);
        five.parent = NodeId(7);
        five.level = 3;
        let v5 = view(
            five,
            false,
            vec![(7, copy(5, 3, di(1), false, false, false), wi(1))],
        );
        assert!(!v5.cparent());

        let mut seven = NodeState::fresh(NodeId(7), false);
        seven.parent = NodeId(5);
        seven.level = 3;
        let v7 = view(
            seven,
            false,
            vec![(5, copy(7, 3, di(1), false, false, false), wi(1))],
        );
        assert!(!v7.cparent());
    }

    #[test]
    fn asked_connection_requires_requesting_child() {
        let own = NodeState::fresh(NodeId(2), false);
        let asking = view(
            own.clone(),
            false,
            vec![(4, copy(2, 1, Dist::Infinite, true, false, false), wi(2))],
        );
        assert!(asking.asked_connection());

        let child_quiet = view(
            own.clone(),
            false,
            vec![(4, copy(2, 1, Dist::Infinite, false, false, false), wi(2))],
        );
        assert!(!child_quiet.asked_connection());

        let not_child = view(
            own,
            false,
            vec![(4, copy(3, 1, Dist::Infinite, true, false, false), wi(2))],
        );
        assert!(!not_child.asked_connection());
    }

    /// Reference-fixture views: node 2 sees root 1 connected at weight 1 and
    /// node 4 not connected at weight 2.
    #[test]
    fn dist_not_connect_prefers_connected_edge() {
        let own = NodeState::fresh(NodeId(2), false);
        let v = view(
            own,
            false,
            vec![
                (1, copy(1, 0, Dist::zero(), true, true, true), wi(1)),
                (4, copy(2, 1, Dist::Infinite, false, false, false), wi(2)),
            ],
        );
        assert_eq!(v.dist_not_connect(), (di(1), NodeId(1)));
    }

    #[test]
    fn dist_not_connect_sums_through_not_connected() {
        // Node 4 sees node 2 (dist 1) at weight 2 and node 3 (dist 4) at weight 1.
        let own = NodeState::fresh(NodeId(4), true);
        let v = view(
            own,
            false,
            vec![
                (2, copy(1, 1, di(1), false, false, false), wi(2)),
                (3, copy(1, 1, di(4), false, false, false), wi(1)),
            ],
        );
        assert_eq!(v.dist_not_connect(), (di(3), NodeId(2)));
    }

    #[test]
    fn dist_not_connect_ties_break_to_smallest_id() {
        let own = NodeState::fresh(NodeId(2), false);
        let v = view(
            own,
            false,
            vec![
                (7, copy(7, 0, di(3), false, false, false), wi(1)),
                (5, copy(5, 0, di(3), false, false, false), wi(1)),
            ],
        );
        assert_eq!(v.dist_not_connect(), (di(4), NodeId(5)));
    }

    #[test]
    fn dist_not_connect_all_infinite() {
        let own = NodeState::fresh(NodeId(2), false);
        let v = view(
            own,
            false,
            vec![
                (9, copy(9, 0, Dist::Infinite, false, false, false), wi(1)),
                (4, copy(4, 0, Dist::Infinite, false, false, false), wi(2)),
            ],
        );
        assert_eq!(v.dist_not_connect(), (Dist::Infinite, NodeId(4)));
    }

    #[test]
    fn dist_connect_weighs_connection_points_against_routes() {
        // Connection point u=3 at weight 2 against connected non-point x=4
        // advertising dist 1 at weight 2: the direct edge wins.
        let mut own = NodeState::fresh(NodeId(2), false);
        own.level = 5;
        own.connected = true;
        let v = view(
            own,
            false,
            vec![
                (3, copy(1, 1, di(6), true, true, true), wi(2)),
                (4, copy(1, 1, di(1), true, true, false), wi(2)),
            ],
        );
        assert_eq!(v.dist_connect(), (di(2), NodeId(3)));
    }

    #[test]
    fn dist_connect_single_connection_point() {
        let mut own = NodeState::fresh(NodeId(2), false);
        own.level = 3;
        own.connected = true;
        let v = view(
            own,
            false,
            vec![(6, copy(1, 1, di(9), true, true, true), wi(5))],
        );
        assert_eq!(v.dist_connect(), (di(5), NodeId(6)));
    }

    #[test]
    fn dist_connect_all_unreachable() {
        let mut own = NodeState::fresh(NodeId(2), false);
        own.level = 4;
        own.connected = true;
        let v = view(
            own,
            false,
            vec![
                (5, copy(5, 0, Dist::Infinite, false, false, false), wi(1)),
                (3, copy(3, 0, Dist::Infinite, false, false, false), wi(1)),
            ],
        );
        assert_eq!(v.dist_connect(), (Dist::Infinite, NodeId(3)));
    }

    #[test]
    fn dist_connect_ignores_deeper_neighbors() {
        // A connected child advertising a tempting shortcut is not a route.
        let mut own = NodeState::fresh(NodeId(2), false);
        own.level = 1;
        own.connected = true;
        own.dist = di(5);
        let v = view(
            own,
            false,
            vec![
                (1, copy(1, 0, Dist::zero(), true, true, true), wi(5)),
                (4, copy(2, 2, di(1), true, true, true), wi(1)),
            ],
        );
        assert_eq!(v.dist_connect(), (di(5), NodeId(1)));
        assert!(!v.better_path());
    }

    #[test]
    fn better_path_cases() {
        let mut own = NodeState::fresh(NodeId(4), true);
        own.dist = di(7);
        let v = view(
            own,
            false,
            vec![(2, copy(1, 1, di(1), true, true, false), wi(2))],
        );
        assert!(v.better_path());

        // Stabilized fixture value: node 4 holding dist 3 sees no better path.
        let mut own = NodeState::fresh(NodeId(4), true);
        own.dist = di(3);
        let v = view(
            own,
            false,
            vec![
                (2, copy(1, 1, di(1), false, false, false), wi(2)),
                (3, copy(1, 1, di(4), false, false, false), wi(1)),
            ],
        );
        assert!(!v.better_path());

        let mut own = NodeState::fresh(NodeId(4), true);
        own.connected = true;
        own.level = 2;
        own.dist = di(2);
        let v = view(
            own,
            false,
            vec![(2, copy(1, 1, di(6), true, true, true), wi(2))],
        );
        assert!(!v.better_path());
    }

    #[test]
    fn connect_stab_cases() {
        let mut own = NodeState::fresh(NodeId(4), true);
        own.parent = NodeId(2);
        own.level = 2;
        own.need = true;
        let v = view(
            own,
            false,
            vec![(2, copy(1, 1, di(1), true, true, false), wi(2))],
        );
        assert!(v.connect_stab());

        // Non-member relay without a requesting child.
        let mut own = NodeState::fresh(NodeId(2), false);
        own.parent = NodeId(1);
        own.level = 1;
        own.need = true;
        let v = view(
            own.clone(),
            false,
            vec![(1, copy(1, 0, Dist::zero(), true, true, true), wi(1))],
        );
        assert!(!v.connect_stab());

        // The same relay with a requesting child on a three-node chain.
        let v = view(
            own,
            false,
            vec![
                (1, copy(1, 0, Dist::zero(), true, true, true), wi(1)),
                (4, copy(2, 2, di(3), true, false, false), wi(2)),
            ],
        );
        assert!(v.connect_stab());
    }

    #[test]
    fn connect_pt_stab_is_an_equality() {
        let mut member = NodeState::fresh(NodeId(4), true);
        member.connect_pt = true;
        assert!(view(member, false, vec![]).connect_pt_stab());

        let mut relay = NodeState::fresh(NodeId(2), false);
        relay.connect_pt = true;
        let two_children = view(
            relay.clone(),
            false,
            vec![
                (4, copy(2, 2, di(1), true, true, false), wi(2)),
                (5, copy(2, 2, di(2), true, true, false), wi(1)),
            ],
        );
        assert!(two_children.connect_pt_stab());

        let one_child = view(
            relay,
            false,
            vec![(4, copy(2, 2, di(1), true, true, false), wi(2))],
        );
        assert!(!one_child.connect_pt_stab());
    }

    #[test]
    fn corrupted_root_reports_rr_only() {
        let mut own = root_state();
        own.level = 9;
        let v = view(own, true, vec![]);
        assert_eq!(v.enabled_rules(), vec![RuleId::RR]);
        let fixed = v.apply_rule(RuleId::RR);
        let fixed_view = view(fixed, true, vec![]);
        assert!(fixed_view.croot());
        assert!(fixed_view.enabled_rules().is_empty());
    }

    #[test]
    fn better_path_triggers_dr1_first() {
        let mut own = NodeState::fresh(NodeId(4), true);
        own.parent = NodeId(2);
        own.level = 2;
        own.dist = di(9);
        let v = view(
            own,
            false,
            vec![(2, copy(1, 1, di(1), false, false, false), wi(2))],
        );
        let rules = v.enabled_rules();
        assert_eq!(rules.first(), Some(&RuleId::DR1));
        let next = v.apply_rule(RuleId::DR1);
        assert_eq!(next.dist, di(3));
        assert_eq!(next.parent, NodeId(2));
        assert!(!next.connected);
        assert!(!next.connect_pt);
        assert_eq!(next.level, 2);
    }

    #[test]
    fn stabilized_member_leaf_is_quiescent() {
        let mut own = NodeState::fresh(NodeId(4), true);
        own.parent = NodeId(2);
        own.level = 2;
        own.dist = di(3);
        own.need = true;
        own.connected = true;
        own.connect_pt = true;
        let v = view(
            own,
            false,
            vec![(2, copy(1, 1, di(1), true, true, false), wi(2))],
        );
        assert!(v.enabled_rules().is_empty());
    }

    #[test]
    fn cr3_enters_wait_and_tr_hits_target() {
        let mut own = NodeState::fresh(NodeId(4), true);
        own.parent = NodeId(2);
        own.level = 2;
        own.dist = di(3);
        own.need = true;
        own.connected = true;
        own.connect_pt = true;
        let v = view(
            own,
            false,
            vec![(2, copy(1, 1, Dist::Infinite, false, false, false), wi(2))],
        );
        assert_eq!(v.enabled_rules().first(), Some(&RuleId::CR3));
        let torn = v.apply_rule(RuleId::CR3);
        assert!(torn.waiting);
        assert!(!torn.connected);
        assert!(torn.dist.is_infinite());
        assert!(!torn.connect_pt);
        assert!(torn.invariants_hold());

        // TR on a non-member with two connected children raises connect_pt.
        let mut relay = NodeState::fresh(NodeId(2), false);
        relay.parent = NodeId(1);
        relay.level = 1;
        relay.dist = di(1);
        relay.need = true;
        relay.connected = true;
        let v = view(
            relay,
            false,
            vec![
                (1, copy(1, 0, Dist::zero(), true, true, true), wi(1)),
                (4, copy(2, 2, di(1), true, true, false), wi(2)),
                (5, copy(2, 2, di(2), true, true, false), wi(1)),
            ],
        );
        assert!(v.rule_enabled(RuleId::TR));
        let after = v.apply_rule(RuleId::TR);
        assert!(after.connect_pt);
        let after_view = NeighborView { own: after, ..v.clone() };
        assert!(after_view.connect_pt_stab());

        // TR on a non-member with one connected child clears a stray flag.
        let mut relay = NodeState::fresh(NodeId(2), false);
        relay.parent = NodeId(1);
        relay.level = 1;
        relay.dist = di(1);
        relay.need = true;
        relay.connected = true;
        relay.connect_pt = true;
        let v = view(
            relay,
            false,
            vec![
                (1, copy(1, 0, Dist::zero(), true, true, true), wi(1)),
                (4, copy(2, 2, di(1), true, true, false), wi(2)),
            ],
        );
        assert!(v.rule_enabled(RuleId::TR));
        assert!(!v.apply_rule(RuleId::TR).connect_pt);
    }

    #[test]
    fn handle_info_msg_is_idempotent_on_stable_states() {
        let mut own = NodeState::fresh(NodeId(4), true);
        own.parent = NodeId(2);
        own.level = 2;
        own.dist = di(3);
        own.need = true;
        own.connected = true;
        own.connect_pt = true;
        let parent_copy = copy(1, 1, di(1), true, true, false);
        let v = view(own, false, vec![(2, parent_copy.clone(), wi(2))]);
        let msg = InfoMsg {
            sender: NodeId(2),
            parent: parent_copy.parent,
            level: parent_copy.level,
            dist: parent_copy.dist.clone(),
            need: parent_copy.need,
            connected: parent_copy.connected,
            connect_pt: parent_copy.connect_pt,
        };
        let before = v.clone();
        let step = handle_info_msg(v, &msg);
        assert!(step.accepted);
        assert!(step.fired.is_empty());
        assert_eq!(step.view, before);
    }

    #[test]
    fn parent_connecting_triggers_cr1() {
        let mut own = NodeState::fresh(NodeId(4), true);
        own.parent = NodeId(2);
        own.level = 2;
        own.dist = di(2);
        own.need = true;
        let v = view(
            own,
            false,
            vec![(2, copy(1, 1, di(2), true, false, false), wi(2))],
        );
        // The parent flips to connected; distance updates then CR1 fires.
        let msg = InfoMsg {
            sender: NodeId(2),
            parent: NodeId(1),
            level: 1,
            dist: di(1),
            need: true,
            connected: true,
            connect_pt: false,
        };
        let step = handle_info_msg(v, &msg);
        assert!(step.fired.iter().any(|f| f.rule == RuleId::CR1));
        assert!(step.view.own.connected);
    }

    #[test]
    fn infinite_parent_distance_triggers_cr3() {
        let mut own = NodeState::fresh(NodeId(4), true);
        own.parent = NodeId(2);
        own.level = 2;
        own.dist = di(3);
        own.need = true;
        own.connected = true;
        own.connect_pt = true;
        let v = view(
            own,
            false,
            vec![(2, copy(1, 1, di(1), true, true, false), wi(2))],
        );
        let msg = InfoMsg {
            sender: NodeId(2),
            parent: NodeId(1),
            level: 1,
            dist: Dist::Infinite,
            need: false,
            connected: false,
            connect_pt: false,
        };
        let step = handle_info_msg(v, &msg);
        assert_eq!(step.fired.last().map(|f| f.rule), Some(RuleId::CR3));
        assert!(step.view.own.waiting);
    }

    #[test]
    fn message_from_stranger_is_dropped() {
        let own = NodeState::fresh(NodeId(4), true);
        let v = view(own, false, vec![(2, copy(1, 1, di(1), true, true, false), wi(2))]);
        let before = v.clone();
        let msg = InfoMsg {
            sender: NodeId(9),
            parent: NodeId(9),
            level: 0,
            dist: Dist::zero(),
            need: true,
            connected: true,
            connect_pt: true,
        };
        let step = handle_info_msg(v, &msg);
        assert!(!step.accepted);
        assert!(step.fired.is_empty());
        assert_eq!(step.view, before);
    }

    #[test]
    fn waiting_node_absorbs_but_fires_nothing() {
        let mut own = NodeState::fresh(NodeId(4), true);
        own.waiting = true;
        let v = view(own, false, vec![(2, copy(1, 1, di(1), true, true, false), wi(2))]);
        let msg = InfoMsg {
            sender: NodeId(2),
            parent: NodeId(1),
            level: 1,
            dist: di(1),
            need: true,
            connected: true,
            connect_pt: true,
        };
        let step = handle_info_msg(v, &msg);
        assert!(step.accepted);
        assert!(step.fired.is_empty());
        assert!(step.view.own.waiting);
        assert!(step.view.neighbors[&NodeId(2)].0.connect_pt);
        assert!(step.view.enabled_rules().is_empty());
    }

    #[test]
    fn del_member_interrupt_resets_and_waits() {
        let mut own = NodeState::fresh(NodeId(4), true);
        own.connected = true;
        own.dist = di(3);
        own.connect_pt = true;
        let v = view(own, false, vec![(2, copy(1, 1, di(1), true, true, false), wi(2))]);
        let out = handle_interrupt(v, &EventKind::DelMember { node: NodeId(4) });
        assert!(out.teardown);
        let s = &out.view.own;
        assert!(!s.member && !s.connected && !s.connect_pt && s.waiting);
        assert!(s.dist.is_infinite());
    }

    #[test]
    fn non_parent_edge_crash_only_shrinks_neighborhood() {
        let mut own = NodeState::fresh(NodeId(4), true);
        own.parent = NodeId(2);
        own.connected = true;
        own.dist = di(3);
        let v = view(
            own.clone(),
            false,
            vec![
                (2, copy(1, 1, di(1), true, true, false), wi(2)),
                (3, copy(1, 1, di(4), false, false, false), wi(1)),
            ],
        );
        let out = handle_interrupt(v, &EventKind::CrashEdge { u: NodeId(3), v: NodeId(4) });
        assert!(!out.teardown);
        assert_eq!(out.view.own, own);
        assert!(!out.view.neighbors.contains_key(&NodeId(3)));

        // The parent edge crashing does tear the node down.
        let v = view(
            own,
            false,
            vec![(2, copy(1, 1, di(1), true, true, false), wi(2))],
        );
        let out = handle_interrupt(v, &EventKind::CrashEdge { u: NodeId(2), v: NodeId(4) });
        assert!(out.teardown);
        assert!(out.view.own.waiting);
    }

    #[test]
    fn add_edge_interrupt_grows_neighborhood_only() {
        let own = NodeState::fresh(NodeId(4), true);
        let v = view(own.clone(), false, vec![(2, copy(1, 1, di(1), true, true, false), wi(2))]);
        let out = handle_interrupt(
            v,
            &EventKind::AddEdge { u: NodeId(4), v: NodeId(3), w: wi(1) },
        );
        assert!(!out.teardown);
        assert_eq!(out.view.own, own);
        let (c, w) = &out.view.neighbors[&NodeId(3)];
        assert_eq!(*c, NeighborCopy::unknown(NodeId(3)));
        assert_eq!(*w, wi(1));
    }

    #[test]
    fn release_wait_requires_children_to_let_go() {
        let mut own = NodeState::fresh(NodeId(2), false);
        own.waiting = true;
        let mut held = view(
            own.clone(),
            false,
            vec![(4, copy(2, 2, di(1), true, true, false), wi(2))],
        );
        assert!(!release_wait(&mut held));
        assert!(held.own.waiting);

        // A waiting leaf releases immediately.
        let mut leaf = view(
            own.clone(),
            false,
            vec![(1, copy(1, 0, Dist::zero(), true, true, true), wi(1))],
        );
        assert!(release_wait(&mut leaf));
        assert!(!leaf.own.waiting);

        // Released once all children disconnect.
        let mut freed = view(
            own,
            false,
            vec![(4, copy(2, 2, Dist::Infinite, true, false, false), wi(2))],
        );
        assert!(release_wait(&mut freed));
        assert!(!freed.own.waiting);
    }

    #[test]
    fn info_msg_projects_exactly_six_fields() {
        let mut s = NodeState::fresh(NodeId(3), true);
        s.parent = NodeId(1);
        s.level = 4;
        s.dist = di(7);
        s.need = true;
        let msg = make_info_msg(&s);
        assert_eq!(msg.sender, NodeId(3));
        assert_eq!(msg.parent, s.parent);
        assert_eq!(msg.level, s.level);
        assert_eq!(msg.dist, s.dist);
        assert_eq!(msg.need, s.need);
        assert_eq!(msg.connected, s.connected);
        assert_eq!(msg.connect_pt, s.connect_pt);
        let json = serde_json::to_value(&msg).unwrap();
        assert!(json.get("member").is_none());

        // Canonical root and waiting-node projections.
        let root = make_info_msg(&root_state());
        assert_eq!(root.dist, Dist::zero());
        assert_eq!(root.level, 0);
        let mut torn = NodeState::fresh(NodeId(5), false);
        torn.waiting = true;
        let m = make_info_msg(&torn);
        assert!(m.dist.is_infinite());
        assert!(!m.connected);
    }
}
