//! Node-side behavior of honest peers: marker relaying and the
//! monitor-driven reputation system that enforces consistency.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::network::NodeId;

/// `[target, monitor, value]`; `value` identifies one verification round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Marker {
    pub target: NodeId,
    pub monitor: NodeId,
    pub value: u64,
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "marker[target={},monitor={},value={:016x}]",
            self.target, self.monitor, self.value
        )
    }
}

/// Peers of the recipient (outbound and inbound) the sending monitor currently confirms.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerifiedMsg {
    pub verified_peers: BTreeSet<NodeId>,
}

impl fmt::Display for VerifiedMsg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "verified[")?;
        for (i, p) in self.verified_peers.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{p}")?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Marker(Marker),
    Verified(VerifiedMsg),
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Message::Marker(m) => m.fmt(f),
            Message::Verified(v) => v.fmt(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendAction {
    pub to: NodeId,
    pub marker: Marker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisconnectAction {
    pub peer: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Disconnect,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("verified message from {0}, which is not a known monitor")]
    UnknownMonitor(NodeId),
    #[error("{0} is not a peer")]
    UnknownPeer(NodeId),
}

/// `phi <= |monitors| / 2`, evaluated without division.
pub fn below_majority(phi: usize, monitors: usize) -> bool {
    2 * phi <= monitors
}

/// Per-peer verification statuses, one bit per monitor.
#[derive(Debug, Clone, Default)]
pub struct ReputationTable {
    monitors: BTreeSet<NodeId>,
    safe_rounds: u32,
    statuses: BTreeMap<(NodeId, NodeId), bool>,
    rounds_seen: BTreeMap<(NodeId, NodeId), u32>,
}

impl ReputationTable {
    pub fn new(monitors: BTreeSet<NodeId>, safe_rounds: u32) -> Self {
        ReputationTable {
            monitors,
            safe_rounds,
            ..Default::default()
        }
    }

    pub fn monitor_count(&self) -> usize {
        self.monitors.len()
    }

    pub fn safe_rounds(&self) -> u32 {
        self.safe_rounds
    }

    /// A new connection starts fully confirmed by every monitor.
    pub fn on_connect(&mut self, peer: NodeId) {
        for &m in &self.monitors {
            self.statuses.insert((peer, m), true);
            self.rounds_seen.insert((peer, m), 0);
        }
    }

    pub fn forget(&mut self, peer: NodeId) {
        for &m in &self.monitors {
            self.statuses.remove(&(peer, m));
            self.rounds_seen.remove(&(peer, m));
        }
    }

    pub fn record(&mut self, peer: NodeId, monitor: NodeId, verified: bool) {
        self.statuses.insert((peer, monitor), verified);
        *self.rounds_seen.entry((peer, monitor)).or_insert(0) += 1;
    }

    pub fn status(&self, peer: NodeId, monitor: NodeId) -> Option<bool> {
        self.statuses.get(&(peer, monitor)).copied()
    }

    pub fn rounds_seen(&self, peer: NodeId, monitor: NodeId) -> u32 {
        self.rounds_seen.get(&(peer, monitor)).copied().unwrap_or(0)
    }

    /// phi_P: number of monitors currently confirming `peer`.
    pub fn reputation(&self, peer: NodeId) -> usize {
        self.monitors
            .iter()
            .filter(|m| self.status(peer, **m).unwrap_or(false))
            .count()
    }

    /// Every monitor has reported on `peer` at least `safe_rounds` times.
    pub fn past_safe_period(&self, peer: NodeId) -> bool {
        self.monitors
            .iter()
            .all(|m| self.rounds_seen(peer, *m) >= self.safe_rounds)
    }
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: NodeId,
    pub outbound: BTreeSet<NodeId>,
    pub inbound: BTreeSet<NodeId>,
    pub monitors: BTreeSet<NodeId>,
    pub reputation: ReputationTable,
    pub banned: BTreeSet<NodeId>,
}

impl NodeState {
    pub fn new(id: NodeId, monitors: BTreeSet<NodeId>, safe_rounds: u32) -> Self {
        NodeState {
            id,
            outbound: BTreeSet::new(),
            inbound: BTreeSet::new(),
            reputation: ReputationTable::new(monitors.clone(), safe_rounds),
            monitors,
            banned: BTreeSet::new(),
        }
    }

    pub fn add_outbound(&mut self, peer: NodeId) {
        debug_assert!(!self.inbound.contains(&peer));
        if self.outbound.insert(peer) {
            self.reputation.on_connect(peer);
        }
    }

    pub fn add_inbound(&mut self, peer: NodeId) {
        debug_assert!(!self.outbound.contains(&peer));
        if self.inbound.insert(peer) {
            self.reputation.on_connect(peer);
        }
    }

    pub fn remove_peer(&mut self, peer: NodeId) -> bool {
        let was = self.outbound.remove(&peer) | self.inbound.remove(&peer);
        if was {
            self.reputation.forget(peer);
        }
        was
    }

    pub fn is_peer(&self, p: NodeId) -> bool {
        self.outbound.contains(&p) || self.inbound.contains(&p)
    }

    pub fn peers(&self) -> Vec<NodeId> {
        self.outbound.iter().chain(self.inbound.iter()).copied().collect()
    }
}

/// Relay rule for markers: forward a monitor's marker to every outbound
/// peer; forward a marker arriving from its own target (an inbound peer)
/// back to the monitor; drop anything else.
pub fn handle_marker(state: &NodeState, from: NodeId, m: &Marker) -> Vec<SendAction> {
    if from == m.monitor && state.monitors.contains(&m.monitor) {
        return state
            .outbound
            .iter()
            .map(|&p| SendAction { to: p, marker: *m })
            .collect();
    }
    if from == m.target && state.inbound.contains(&from) && state.monitors.contains(&m.monitor) {
        return vec![SendAction {
            to: m.monitor,
            marker: *m,
        }];
    }
    Vec::new()
}

/// Applies a monitor's verified list to every current peer, then enforces
/// the majority rule on each.
pub fn handle_verified(
    state: &mut NodeState,
    from_monitor: NodeId,
    v: &VerifiedMsg,
) -> Result<Vec<DisconnectAction>, ProtocolError> {
    if !state.monitors.contains(&from_monitor) {
        return Err(ProtocolError::UnknownMonitor(from_monitor));
    }
    let peers = state.peers();
    for &p in &peers {
        state
            .reputation
            .record(p, from_monitor, v.verified_peers.contains(&p));
    }
    let mut out = Vec::new();
    for p in peers {
        if check_reputation(state, p)? == Verdict::Disconnect {
            out.push(DisconnectAction { peer: p });
        }
    }
    Ok(out)
}

/// Disconnects and bans `peer` once it is past the safe period and no
/// longer confirmed by a strict majority of monitors.
pub fn check_reputation(state: &mut NodeState, peer: NodeId) -> Result<Verdict, ProtocolError> {
    if !state.is_peer(peer) {
        return Err(ProtocolError::UnknownPeer(peer));
    }
    let gamma = state.reputation.monitor_count();
    if gamma == 0 || !state.reputation.past_safe_period(peer) {
        return Ok(Verdict::Keep);
    }
    let phi = state.reputation.reputation(peer);
    if below_majority(phi, gamma) {
        state.remove_peer(peer);
        state.banned.insert(peer);
        Ok(Verdict::Disconnect)
    } else {
        Ok(Verdict::Keep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &[u64]) -> BTreeSet<NodeId> {
        v.iter().map(|&x| NodeId(x)).collect()
    }

    const M: NodeId = NodeId(100);

    fn node(id: u64, out: &[u64], inb: &[u64]) -> NodeState {
        let mut s = NodeState::new(NodeId(id), ids(&[100, 101, 102, 103]), 3);
        for &o in out {
            s.add_outbound(NodeId(o));
        }
        for &i in inb {
            s.add_inbound(NodeId(i));
        }
        s
    }

    fn mk(target: u64) -> Marker {
        Marker {
            target: NodeId(target),
            monitor: M,
            value: 0xfeed,
        }
    }

    #[test]
    fn target_forwards_monitor_marker_to_outbound() {
        let n = node(1, &[2, 3, 4], &[5]);
        let sends = handle_marker(&n, M, &mk(1));
        let tos: Vec<NodeId> = sends.iter().map(|s| s.to).collect();
        assert_eq!(tos, vec![NodeId(2), NodeId(3), NodeId(4)]);
        assert!(sends.iter().all(|s| s.marker == mk(1)));
    }

    #[test]
    fn peer_returns_marker_from_inbound_target() {
        let p = node(2, &[], &[1]);
        assert_eq!(
            handle_marker(&p, NodeId(1), &mk(1)),
            vec![SendAction { to: M, marker: mk(1) }]
        );
    }

    #[test]
    fn marker_from_outbound_peer_is_dropped() {
        let p = node(2, &[1], &[]);
        assert!(handle_marker(&p, NodeId(1), &mk(1)).is_empty());
    }

    #[test]
    fn marker_from_non_target_is_dropped() {
        let p = node(2, &[], &[1, 3]);
        assert!(handle_marker(&p, NodeId(3), &mk(1)).is_empty());
    }

    #[test]
    fn marker_from_unknown_monitor_is_dropped() {
        let n = node(1, &[2], &[]);
        let rogue = Marker {
            target: NodeId(1),
            monitor: NodeId(999),
            value: 1,
        };
        assert!(handle_marker(&n, NodeId(999), &rogue).is_empty());
        let p = node(2, &[], &[1]);
        assert!(handle_marker(&p, NodeId(1), &rogue).is_empty());
    }

    fn verified(peers: &[u64]) -> VerifiedMsg {
        VerifiedMsg {
            verified_peers: ids(peers),
        }
    }

    #[test]
    fn peer_absent_from_three_of_four_is_dropped_and_banned() {
        let mut n = node(1, &[7], &[]);
        for _ in 0..3 {
            handle_verified(&mut n, NodeId(100), &verified(&[7])).unwrap();
            for m in 101..104 {
                handle_verified(&mut n, NodeId(m), &verified(&[])).unwrap();
            }
        }
        // last report above triggered the check after the safe period
        assert!(!n.is_peer(NodeId(7)));
        assert!(n.banned.contains(&NodeId(7)));
    }

    #[test]
    fn disconnect_reported_on_the_verified_that_crosses_threshold() {
        let mut n = node(1, &[7], &[]);
        for round in 0..3 {
            for m in 100..104 {
                let v = if m == 100 { verified(&[7]) } else { verified(&[]) };
                let acts = handle_verified(&mut n, NodeId(m), &v).unwrap();
                if round == 2 && m == 103 {
                    assert_eq!(acts, vec![DisconnectAction { peer: NodeId(7) }]);
                } else {
                    assert!(acts.is_empty(), "round {round} monitor {m}");
                }
            }
        }
    }

    #[test]
    fn fully_confirmed_peer_is_kept() {
        let mut n = node(1, &[7], &[8]);
        for _ in 0..5 {
            for m in 100..104 {
                let acts = handle_verified(&mut n, NodeId(m), &verified(&[7, 8])).unwrap();
                assert!(acts.is_empty());
            }
        }
        assert_eq!(n.reputation.reputation(NodeId(7)), 4);
        assert!(n.is_peer(NodeId(8)));
    }

    #[test]
    fn safe_period_protects_fresh_peer() {
        let mut n = node(1, &[7], &[]);
        handle_verified(&mut n, NodeId(100), &verified(&[])).unwrap();
        handle_verified(&mut n, NodeId(101), &verified(&[])).unwrap();
        handle_verified(&mut n, NodeId(102), &verified(&[])).unwrap();
        assert!(n.is_peer(NodeId(7)));
        assert_eq!(n.reputation.reputation(NodeId(7)), 1);
    }

    #[test]
    fn verified_from_non_monitor_rejected() {
        let mut n = node(1, &[7], &[]);
        assert_eq!(
            handle_verified(&mut n, NodeId(7), &verified(&[])),
            Err(ProtocolError::UnknownMonitor(NodeId(7)))
        );
    }

    #[test]
    fn check_unknown_peer() {
        let mut n = node(1, &[7], &[]);
        assert_eq!(
            check_reputation(&mut n, NodeId(8)),
            Err(ProtocolError::UnknownPeer(NodeId(8)))
        );
    }

    fn primed(monitors: &[u64], confirming: usize) -> (NodeState, NodeId) {
        let mut n = NodeState::new(NodeId(1), ids(monitors), 3);
        let p = NodeId(7);
        n.add_outbound(p);
        for _ in 0..3 {
            for (i, &m) in monitors.iter().enumerate() {
                n.reputation.record(p, NodeId(m), i < confirming);
            }
        }
        (n, p)
    }

    #[test]
    fn threshold_four_monitors() {
        let (mut n, p) = primed(&[100, 101, 102, 103], 2);
        assert_eq!(check_reputation(&mut n, p), Ok(Verdict::Disconnect));
        let (mut n, p) = primed(&[100, 101, 102, 103], 3);
        assert_eq!(check_reputation(&mut n, p), Ok(Verdict::Keep));
    }

    #[test]
    fn threshold_three_monitors_all_values() {
        // tau = 1.5 evaluated in floating point as the oracle
        for phi in 0..=3usize {
            let (mut n, p) = primed(&[100, 101, 102], phi);
            let expect = if (phi as f64) <= 3.0 / 2.0 {
                Verdict::Disconnect
            } else {
                Verdict::Keep
            };
            assert_eq!(check_reputation(&mut n, p), Ok(expect), "phi={phi}");
        }
    }

    #[test]
    fn below_majority_matches_real_threshold() {
        for g in 1..=9usize {
            for phi in 0..=g {
                assert_eq!(below_majority(phi, g), phi as f64 <= g as f64 / 2.0);
            }
        }
    }

    proptest! {
        #[test]
        fn reputation_stays_in_bounds_and_safe_period_holds(
            gamma in 1usize..7,
            reports in proptest::collection::vec((0usize..7, any::<bool>()), 0..60),
        ) {
            let monitors: Vec<u64> = (100..100 + gamma as u64).collect();
            let mut n = NodeState::new(NodeId(1), ids(&monitors), 3);
            let p = NodeId(7);
            n.add_inbound(p);
            let mut per_monitor = vec![0u32; gamma];
            for (mi, ok) in reports {
                let mi = mi % gamma;
                if !n.is_peer(p) {
                    break;
                }
                per_monitor[mi] += 1;
                let v = if ok { verified(&[7]) } else { verified(&[]) };
                let acts = handle_verified(&mut n, NodeId(100 + mi as u64), &v).unwrap();
                if !acts.is_empty() {
                    prop_assert!(per_monitor.iter().all(|&c| c >= 3));
                } else {
                    let phi = n.reputation.reputation(p);
                    prop_assert!(phi <= gamma);
                }
            }
        }

        #[test]
        fn honest_node_never_relays_foreign_monitor_markers(
            out in proptest::collection::btree_set(10u64..30, 0..5),
            from in 0u64..40,
            target in 0u64..40,
            monitor in 40u64..60,
        ) {
            let mut n = NodeState::new(NodeId(1), ids(&[100, 101]), 3);
            for o in out { n.add_outbound(NodeId(o)); }
            n.add_inbound(NodeId(5));
            let m = Marker { target: NodeId(target), monitor: NodeId(monitor), value: 3 };
            prop_assert!(handle_marker(&n, NodeId(from), &m).is_empty());
            prop_assert!(handle_marker(&n, NodeId(monitor), &m).is_empty());
        }
    }
}
