//! Monitor side: verification rounds, the local snapshot with per-node
//! scan frequencies, verified-list emission and majority aggregation.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use thiserror::Error;

use crate::network::{Edge, NodeId};
use crate::protocol::{Marker, VerifiedMsg};
use crate::sim::{sample_poisson, SimTime};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MonitorError {
    #[error("a round for {0} is already open")]
    RoundAlreadyOpen(NodeId),
    #[error("no open round for {0}")]
    NoOpenRound(NodeId),
    #[error("{0} is not in the local snapshot")]
    UnknownTarget(NodeId),
    #[error("empty frequency list")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SchedulingMode {
    /// Delay drawn as Poisson(f_N) seconds, clamped to `[f_min, f_max]`.
    #[default]
    Poisson,
    /// Delay is exactly f_N seconds.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrequencyBounds {
    pub init: u32,
    pub min: u32,
    pub max: u32,
}

impl FrequencyBounds {
    pub fn pinned(f: u32) -> Self {
        FrequencyBounds {
            init: f,
            min: f,
            max: f,
        }
    }
}

impl Default for FrequencyBounds {
    fn default() -> Self {
        FrequencyBounds {
            init: 5,
            min: 1,
            max: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundState {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeevRound {
    pub id: u64,
    pub target: NodeId,
    pub monitor: NodeId,
    pub value: u64,
    pub started_at: SimTime,
    pub timeout_ms: u64,
    pub collected: BTreeSet<NodeId>,
    pub state: RoundState,
}

impl PeevRound {
    pub fn marker(&self) -> Marker {
        Marker {
            target: self.target,
            monitor: self.monitor,
            value: self.value,
        }
    }
}

/// One monitor's believed topology, plus the scan frequency it keeps per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalSnapshot {
    pub nodes: BTreeSet<NodeId>,
    pub edges: BTreeSet<Edge>,
    pub freq: BTreeMap<NodeId, u32>,
    pub f_min: u32,
    pub f_max: u32,
}

impl LocalSnapshot {
    pub fn new(f_min: u32, f_max: u32) -> Self {
        assert!(f_min >= 1 && f_min <= f_max, "invalid frequency bounds");
        LocalSnapshot {
            nodes: BTreeSet::new(),
            edges: BTreeSet::new(),
            freq: BTreeMap::new(),
            f_min,
            f_max,
        }
    }

    pub fn add_node(&mut self, n: NodeId, f_init: u32) {
        self.nodes.insert(n);
        self.freq.insert(n, f_init.clamp(self.f_min, self.f_max));
    }

    pub fn remove_node(&mut self, n: NodeId) -> usize {
        self.nodes.remove(&n);
        self.freq.remove(&n);
        let before = self.edges.len();
        self.edges.retain(|(a, b)| *a != n && *b != n);
        before - self.edges.len()
    }

    pub fn frequency(&self, n: NodeId) -> Option<u32> {
        self.freq.get(&n).copied()
    }

    pub fn outbound_of(&self, n: NodeId) -> BTreeSet<NodeId> {
        self.edges
            .range((n, NodeId(0))..=(n, NodeId(u64::MAX)))
            .map(|(_, b)| *b)
            .collect()
    }

    pub fn inbound_of(&self, n: NodeId) -> BTreeSet<NodeId> {
        self.edges
            .iter()
            .filter(|(_, b)| *b == n)
            .map(|(a, _)| *a)
            .collect()
    }

    /// Replaces `target`'s outbound edges with the verified set and returns
    /// the number of edges added plus removed.
    pub fn update_topology(&mut self, target: NodeId, verified: &BTreeSet<NodeId>) -> u32 {
        let mut changes = 0;
        let candidates: Vec<NodeId> = self.nodes.iter().copied().filter(|p| *p != target).collect();
        for p in candidates {
            let e = (target, p);
            if verified.contains(&p) {
                if self.edges.insert(e) {
                    changes += 1;
                }
            } else if self.edges.remove(&e) {
                changes += 1;
            }
        }
        changes
    }

    /// Slower scans for stable nodes, faster for changing ones.
    pub fn adjust_frequency(&mut self, target: NodeId, changes: u32) {
        let (lo, hi) = (self.f_min, self.f_max);
        if let Some(f) = self.freq.get_mut(&target) {
            if changes == 0 && *f < hi {
                *f += 1;
            } else if changes > 1 {
                *f = f.saturating_sub(changes).max(lo);
            }
        }
    }

    /// Delay in milliseconds before the next round for `target`.
    pub fn schedule_next_round<R: Rng + ?Sized>(
        &self,
        target: NodeId,
        rng: &mut R,
        mode: SchedulingMode,
    ) -> u64 {
        let f = self.freq.get(&target).copied().unwrap_or(self.f_min);
        let secs = match mode {
            SchedulingMode::Fixed => f as u64,
            SchedulingMode::Poisson => {
                sample_poisson(rng, f as f64).clamp(self.f_min as u64, self.f_max as u64)
            }
        };
        secs * 1000
    }

    /// Outbound verified peers plus every inbound edge currently believed.
    pub fn verified_peers(&self, target: NodeId) -> BTreeSet<NodeId> {
        let mut s = self.outbound_of(target);
        s.extend(self.inbound_of(target));
        s
    }
}

#[derive(Debug, Clone)]
pub struct MonitorState {
    pub id: NodeId,
    pub snapshot: LocalSnapshot,
    pub f_init: u32,
    pub timeout_ms: u64,
    pub mode: SchedulingMode,
    open: BTreeMap<NodeId, PeevRound>,
    last_value: BTreeMap<NodeId, u64>,
    next_round_id: u64,
}

impl MonitorState {
    pub fn new(id: NodeId, bounds: FrequencyBounds, timeout_ms: u64, mode: SchedulingMode) -> Self {
        MonitorState {
            id,
            snapshot: LocalSnapshot::new(bounds.min, bounds.max),
            f_init: bounds.init,
            timeout_ms,
            mode,
            open: BTreeMap::new(),
            last_value: BTreeMap::new(),
            next_round_id: 1,
        }
    }

    pub fn discover(&mut self, n: NodeId) {
        self.snapshot.add_node(n, self.f_init);
    }

    pub fn knows(&self, n: NodeId) -> bool {
        self.snapshot.nodes.contains(&n)
    }

    pub fn open_round(&self, target: NodeId) -> Option<&PeevRound> {
        self.open.get(&target)
    }

    /// Draws a fresh round value and opens a round for `target`. The caller
    /// delivers the returned marker to `target` and arms the timeout.
    pub fn start_peev_round<R: Rng + ?Sized>(
        &mut self,
        target: NodeId,
        rng: &mut R,
        now: SimTime,
    ) -> Result<(Marker, PeevRound), MonitorError> {
        if !self.knows(target) {
            return Err(MonitorError::UnknownTarget(target));
        }
        if self.open.contains_key(&target) {
            return Err(MonitorError::RoundAlreadyOpen(target));
        }
        let prev = self.last_value.get(&target).copied();
        let mut value: u64 = rng.random();
        while Some(value) == prev {
            value = rng.random();
        }
        self.last_value.insert(target, value);
        let round = PeevRound {
            id: self.next_round_id,
            target,
            monitor: self.id,
            value,
            started_at: now,
            timeout_ms: self.timeout_ms,
            collected: BTreeSet::new(),
            state: RoundState::Open,
        };
        self.next_round_id += 1;
        self.open.insert(target, round.clone());
        Ok((round.marker(), round))
    }

    /// Accepts `from` into the round's collected set only if the marker
    /// matches the open round exactly; stale, forged or late markers are ignored.
    pub fn receive_marker(&mut self, from: NodeId, m: &Marker) -> bool {
        match self.open.get_mut(&m.target) {
            Some(r) if r.monitor == m.monitor && r.value == m.value && r.state == RoundState::Open => {
                r.collected.insert(from)
            }
            _ => false,
        }
    }

    pub fn close_peev_round(&mut self, target: NodeId) -> Result<BTreeSet<NodeId>, MonitorError> {
        let mut r = self
            .open
            .remove(&target)
            .ok_or(MonitorError::NoOpenRound(target))?;
        r.state = RoundState::Closed;
        Ok(r.collected)
    }

    pub fn build_verified_message(&self, target: NodeId) -> VerifiedMsg {
        VerifiedMsg {
            verified_peers: self.snapshot.verified_peers(target),
        }
    }

    /// Drops `n` from the snapshot and cancels its round loop.
    pub fn handle_node_departure(&mut self, n: NodeId) -> usize {
        self.open.remove(&n);
        self.last_value.remove(&n);
        self.snapshot.remove_node(n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GlobalSnapshot {
    pub nodes: BTreeSet<NodeId>,
    pub edges: BTreeSet<Edge>,
    pub monitor_count: usize,
}

/// Indices of the local snapshots that contain `edge`.
pub fn verification_set(locals: &[LocalSnapshot], edge: Edge) -> BTreeSet<usize> {
    locals
        .iter()
        .enumerate()
        .filter(|(_, l)| l.edges.contains(&edge))
        .map(|(i, _)| i)
        .collect()
}

pub fn majority(confirmations: usize, monitors: usize) -> bool {
    2 * confirmations > monitors
}

/// Edges confirmed by a strict majority of the local snapshots.
pub fn compute_global_snapshot(locals: &[LocalSnapshot]) -> GlobalSnapshot {
    let gamma = locals.len();
    let mut counts: BTreeMap<Edge, usize> = BTreeMap::new();
    let mut nodes = BTreeSet::new();
    for l in locals {
        nodes.extend(l.nodes.iter().copied());
        for e in &l.edges {
            *counts.entry(*e).or_insert(0) += 1;
        }
    }
    let edges = counts
        .into_iter()
        .filter(|(_, c)| majority(*c, gamma))
        .map(|(e, _)| e)
        .collect();
    GlobalSnapshot {
        nodes,
        edges,
        monitor_count: gamma,
    }
}

/// Longest time an error can persist in the global snapshot: the
/// `(|monitors|/2 + 1)`-th smallest scan frequency.
pub fn max_error_window(freqs: &[u32]) -> Result<u32, MonitorError> {
    if freqs.is_empty() {
        return Err(MonitorError::EmptyInput);
    }
    let mut sorted = freqs.to_vec();
    sorted.sort_unstable();
    Ok(sorted[freqs.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{stream_rng, Stream};
    use proptest::prelude::*;

    fn ids(v: &[u64]) -> BTreeSet<NodeId> {
        v.iter().map(|&x| NodeId(x)).collect()
    }

    fn snap(nodes: &[u64], edges: &[(u64, u64)]) -> LocalSnapshot {
        let mut s = LocalSnapshot::new(1, 10);
        for &n in nodes {
            s.add_node(NodeId(n), 5);
        }
        for &(a, b) in edges {
            s.edges.insert((NodeId(a), NodeId(b)));
        }
        s
    }

    fn monitor() -> MonitorState {
        let mut m = MonitorState::new(NodeId(100), FrequencyBounds::default(), 1000, SchedulingMode::Poisson);
        for n in 1..=6 {
            m.discover(NodeId(n));
        }
        m
    }

    #[test]
    fn successive_rounds_use_distinct_values() {
        let mut m = monitor();
        let mut rng = stream_rng(1, Stream::Markers);
        let mut seen = BTreeSet::new();
        for i in 0..200 {
            let (mk, r) = m.start_peev_round(NodeId(1), &mut rng, SimTime(i)).unwrap();
            assert_eq!(mk.target, NodeId(1));
            assert_eq!(mk.monitor, NodeId(100));
            assert_eq!(r.timeout_ms, 1000);
            assert!(seen.insert(mk.value));
            m.close_peev_round(NodeId(1)).unwrap();
        }
    }

    #[test]
    fn second_open_round_rejected() {
        let mut m = monitor();
        let mut rng = stream_rng(1, Stream::Markers);
        m.start_peev_round(NodeId(1), &mut rng, SimTime(0)).unwrap();
        assert_eq!(
            m.start_peev_round(NodeId(1), &mut rng, SimTime(0)).unwrap_err(),
            MonitorError::RoundAlreadyOpen(NodeId(1))
        );
        assert_eq!(
            m.start_peev_round(NodeId(77), &mut rng, SimTime(0)).unwrap_err(),
            MonitorError::UnknownTarget(NodeId(77))
        );
    }

    #[test]
    fn matching_marker_collected_once() {
        let mut m = monitor();
        let mut rng = stream_rng(1, Stream::Markers);
        let (mk, _) = m.start_peev_round(NodeId(1), &mut rng, SimTime(0)).unwrap();
        assert!(m.receive_marker(NodeId(2), &mk));
        assert!(!m.receive_marker(NodeId(2), &mk));
        assert_eq!(m.close_peev_round(NodeId(1)).unwrap(), ids(&[2]));
    }

    #[test]
    fn stale_and_tampered_markers_ignored() {
        let mut m = monitor();
        let mut rng = stream_rng(1, Stream::Markers);
        let (old, _) = m.start_peev_round(NodeId(1), &mut rng, SimTime(0)).unwrap();
        m.close_peev_round(NodeId(1)).unwrap();
        let (cur, _) = m.start_peev_round(NodeId(1), &mut rng, SimTime(5000)).unwrap();
        assert!(!m.receive_marker(NodeId(3), &old));
        let wrong_monitor = Marker { monitor: NodeId(101), ..cur };
        let wrong_target = Marker { target: NodeId(2), ..cur };
        let wrong_value = Marker { value: cur.value ^ 1, ..cur };
        assert!(!m.receive_marker(NodeId(3), &wrong_monitor));
        assert!(!m.receive_marker(NodeId(3), &wrong_target));
        assert!(!m.receive_marker(NodeId(3), &wrong_value));
        assert!(m.close_peev_round(NodeId(1)).unwrap().is_empty());
        // after close, even the right marker is late
        assert!(!m.receive_marker(NodeId(3), &cur));
        assert_eq!(m.close_peev_round(NodeId(1)), Err(MonitorError::NoOpenRound(NodeId(1))));
    }

    fn sym_diff(a: &BTreeSet<NodeId>, b: &BTreeSet<NodeId>) -> u32 {
        a.symmetric_difference(b).count() as u32
    }

    #[test]
    fn update_topology_counts_changes() {
        let mut s = snap(&[1, 2, 3, 4], &[(1, 2), (1, 3)]);
        assert_eq!(s.update_topology(NodeId(1), &ids(&[2, 3])), 0);
        assert_eq!(s.edges.len(), 2);
        let prior = s.outbound_of(NodeId(1));
        let l = ids(&[2, 4]);
        assert_eq!(s.update_topology(NodeId(1), &l), sym_diff(&prior, &l));
        assert_eq!(s.outbound_of(NodeId(1)), l);
        let mut s = snap(&[1, 2, 3, 4], &[]);
        let l = ids(&[2, 3, 4]);
        assert_eq!(s.update_topology(NodeId(1), &l), sym_diff(&BTreeSet::new(), &l));
        assert_eq!(s.update_topology(NodeId(1), &l), 0);
    }

    #[test]
    fn update_topology_ignores_unknown_and_self() {
        let mut s = snap(&[1, 2], &[]);
        assert_eq!(s.update_topology(NodeId(1), &ids(&[1, 2, 99])), 1);
        assert_eq!(s.edges, [(NodeId(1), NodeId(2))].into_iter().collect());
    }

    fn f_after(f: u32, c: u32) -> u32 {
        let mut s = snap(&[1], &[]);
        s.freq.insert(NodeId(1), f);
        s.adjust_frequency(NodeId(1), c);
        s.frequency(NodeId(1)).unwrap()
    }

    #[test]
    fn adjust_frequency_rules() {
        assert_eq!(f_after(5, 0), 6);
        assert_eq!(f_after(10, 0), 10);
        assert_eq!(f_after(5, 3), 2);
        assert_eq!(f_after(2, 5), 1);
        assert_eq!(f_after(5, 1), 5);
        assert_eq!(f_after(1, 1), 1);
    }

    #[test]
    fn fixed_schedule_is_exact() {
        let mut s = snap(&[1], &[]);
        s.freq.insert(NodeId(1), 7);
        let mut rng = stream_rng(1, Stream::Scheduling);
        assert_eq!(s.schedule_next_round(NodeId(1), &mut rng, SchedulingMode::Fixed), 7000);
    }

    #[test]
    fn poisson_schedule_mean_after_clamp() {
        // oracle: exact expectation of clamp(Poisson(5), 1, 10) by summing the pmf
        let lambda: f64 = 5.0;
        let mut pmf = (-lambda).exp();
        let mut expect = 0.0;
        let mut tail = 1.0;
        for k in 0..10u32 {
            expect += pmf * (k.clamp(1, 10) as f64);
            tail -= pmf;
            pmf *= lambda / (k + 1) as f64;
        }
        expect += tail * 10.0;
        let s = snap(&[1], &[]);
        let mut rng = stream_rng(3, Stream::Scheduling);
        let n = 200_000;
        let mut sum = 0u64;
        for _ in 0..n {
            let d = s.schedule_next_round(NodeId(1), &mut rng, SchedulingMode::Poisson);
            assert!((1000..=10_000).contains(&d));
            sum += d;
        }
        let mean = sum as f64 / n as f64;
        assert!((mean - 5000.0).abs() / 5000.0 < 0.05, "mean {mean}");
        assert!((mean - expect * 1000.0).abs() / (expect * 1000.0) < 0.01, "mean {mean} vs {expect}");
    }

    #[test]
    fn verified_includes_both_directions() {
        let mut m = monitor();
        m.snapshot.edges.insert((NodeId(1), NodeId(2)));
        m.snapshot.edges.insert((NodeId(3), NodeId(1)));
        assert_eq!(m.build_verified_message(NodeId(1)).verified_peers, ids(&[2, 3]));
        assert!(m.build_verified_message(NodeId(4)).verified_peers.is_empty());
        m.snapshot.update_topology(NodeId(1), &BTreeSet::new());
        assert_eq!(m.build_verified_message(NodeId(1)).verified_peers, ids(&[3]));
    }

    #[test]
    fn departure_removes_incident_edges_and_round() {
        let mut m = monitor();
        m.snapshot.edges.extend([(NodeId(1), NodeId(2)), (NodeId(1), NodeId(3)), (NodeId(4), NodeId(1)), (NodeId(2), NodeId(3))]);
        let mut rng = stream_rng(1, Stream::Markers);
        let (mk, _) = m.start_peev_round(NodeId(1), &mut rng, SimTime(0)).unwrap();
        assert_eq!(m.handle_node_departure(NodeId(1)), 3);
        assert_eq!(m.snapshot.edges.len(), 1);
        assert!(!m.receive_marker(NodeId(2), &mk));
        assert!(m.open_round(NodeId(1)).is_none());
        m.discover(NodeId(9));
        assert_eq!(m.snapshot.frequency(NodeId(9)), Some(5));
    }

    #[test]
    fn verification_sets() {
        let e = (NodeId(1), NodeId(2));
        let with = snap(&[1, 2], &[(1, 2)]);
        let without = snap(&[1, 2], &[]);
        let all = vec![with.clone(), with.clone(), with.clone(), with.clone()];
        assert_eq!(verification_set(&all, e).len(), 4);
        let none = vec![without.clone(); 4];
        assert!(verification_set(&none, e).is_empty());
        let mixed = vec![without.clone(), with.clone(), without, with];
        assert_eq!(verification_set(&mixed, e), [1, 3].into_iter().collect());
    }

    #[test]
    fn global_snapshot_majority() {
        let with = snap(&[1, 2], &[(1, 2)]);
        let without = snap(&[1, 2], &[]);
        let g = |k: usize, total: usize| {
            let mut v = vec![with.clone(); k];
            v.extend(vec![without.clone(); total - k]);
            compute_global_snapshot(&v).edges.len()
        };
        assert_eq!(g(3, 4), 1);
        assert_eq!(g(2, 4), 0);
        assert_eq!(g(2, 3), 1);
        assert_eq!(g(1, 3), 0);
        let same = vec![snap(&[1, 2, 3], &[(1, 2), (3, 2)]); 4];
        assert_eq!(compute_global_snapshot(&same).edges, same[0].edges);
        assert_eq!(compute_global_snapshot(&same).monitor_count, 4);
    }

    #[test]
    fn error_window_examples() {
        assert_eq!(max_error_window(&[1, 5, 5, 10]), Ok(5));
        assert_eq!(max_error_window(&[10, 5, 1, 5]), Ok(5));
        assert_eq!(max_error_window(&[7, 7, 7, 7]), Ok(7));
        assert_eq!(max_error_window(&[2]), Ok(2));
        assert_eq!(max_error_window(&[]), Err(MonitorError::EmptyInput));
    }

    proptest! {
        #[test]
        fn frequency_stays_in_bounds(changes in proptest::collection::vec(0u32..12, 1..200)) {
            let mut s = snap(&[1], &[]);
            for c in changes {
                s.adjust_frequency(NodeId(1), c);
                let f = s.frequency(NodeId(1)).unwrap();
                prop_assert!((1..=10).contains(&f));
            }
        }

        #[test]
        fn adding_confirming_snapshot_never_removes_edges(
            edge_sets in proptest::collection::vec(proptest::collection::btree_set((0u64..6, 0u64..6), 0..10), 1..7),
            extra in proptest::collection::btree_set((0u64..6, 0u64..6), 0..10),
        ) {
            let locals: Vec<LocalSnapshot> = edge_sets.iter().map(|es| {
                let v: Vec<(u64, u64)> = es.iter().copied().collect();
                snap(&[0, 1, 2, 3, 4, 5], &v)
            }).collect();
            let before = compute_global_snapshot(&locals);
            let mut more = locals.clone();
            let mut confirming = snap(&[0, 1, 2, 3, 4, 5], &extra.iter().copied().collect::<Vec<_>>());
            confirming.edges.extend(before.edges.iter().copied());
            more.push(confirming);
            let after = compute_global_snapshot(&more);
            prop_assert!(before.edges.is_subset(&after.edges));
        }
    }
}
