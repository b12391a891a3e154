//! Ground-truth comparison and message-overhead accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::AddAssign;

use thiserror::Error;

use crate::monitor::GlobalSnapshot;
use crate::network::{Edge, NodeId, Topology};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MetricsError {
    #[error("ratio undefined: zero denominator")]
    Undefined,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

pub fn classify_edge_sets(inferred: &BTreeSet<Edge>, truth: &BTreeSet<Edge>) -> ConfusionCounts {
    let tp = inferred.intersection(truth).count() as u64;
    ConfusionCounts {
        tp,
        fp: inferred.len() as u64 - tp,
        fn_: truth.len() as u64 - tp,
    }
}

/// Compares the global snapshot against non-monitor ground-truth edges.
pub fn classify_edges(global: &GlobalSnapshot, truth: &Topology) -> ConfusionCounts {
    let inferred: BTreeSet<Edge> = global
        .edges
        .iter()
        .copied()
        .filter(|(a, b)| !truth.is_monitor(*a) && !truth.is_monitor(*b))
        .collect();
    classify_edge_sets(&inferred, &truth.peer_edges())
}

pub fn precision(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let d = c.tp + c.fp;
    if d == 0 {
        return Err(MetricsError::Undefined);
    }
    Ok(c.tp as f64 / d as f64)
}

pub fn recall(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    let d = c.tp + c.fn_;
    if d == 0 {
        return Err(MetricsError::Undefined);
    }
    Ok(c.tp as f64 / d as f64)
}

/// Messages a node handles in one complete verification round:
/// `(out + 2*in + 1) * monitors`.
pub fn expected_overhead(out_deg: u64, in_deg: u64, monitors: u64) -> u64 {
    (out_deg + 2 * in_deg + 1) * monitors
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeOverhead {
    /// Markers received straight from a monitor (triggers, not counted as overhead).
    pub marker_from_monitor: u64,
    /// Node-to-node markers, counted on both the sending and receiving side.
    pub marker_forwarded: u64,
    /// Markers returned to a monitor.
    pub marker_to_monitor: u64,
    pub verified: u64,
}

impl NodeOverhead {
    pub fn protocol_messages(&self) -> u64 {
        self.marker_forwarded + self.marker_to_monitor + self.verified
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    MarkerFromMonitor,
    MarkerForwarded,
    MarkerToMonitor,
    Verified,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OverheadLedger {
    per_node: BTreeMap<NodeId, NodeOverhead>,
}

impl OverheadLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one delivered message between `from` and `to`.
    pub fn record(&mut self, kind: MessageKind, from: NodeId, to: NodeId) {
        match kind {
            MessageKind::MarkerFromMonitor => self.per_node.entry(to).or_default().marker_from_monitor += 1,
            MessageKind::MarkerForwarded => {
                self.per_node.entry(from).or_default().marker_forwarded += 1;
                self.per_node.entry(to).or_default().marker_forwarded += 1;
            }
            MessageKind::MarkerToMonitor => self.per_node.entry(from).or_default().marker_to_monitor += 1,
            MessageKind::Verified => self.per_node.entry(to).or_default().verified += 1,
        }
    }

    pub fn get(&self, n: NodeId) -> NodeOverhead {
        self.per_node.get(&n).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &NodeOverhead)> {
        self.per_node.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Discrepancy {
    pub node: NodeId,
    pub expected: u64,
    pub measured: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub nodes_checked: usize,
    pub discrepancies: Vec<Discrepancy>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.discrepancies.is_empty()
    }
}

/// Compares measured per-node counts with the closed-form overhead, using
/// the node's current degrees in `topo`.
pub fn audit_overhead(ledger: &OverheadLedger, topo: &Topology, monitors: u64) -> AuditReport {
    let mut report = AuditReport::default();
    for n in topo.nodes() {
        report.nodes_checked += 1;
        let expected = expected_overhead(
            topo.outbound(n).len() as u64,
            topo.inbound_peers(n).len() as u64,
            monitors,
        );
        let measured = ledger.get(n).protocol_messages();
        if expected != measured {
            report.discrepancies.push(Discrepancy {
                node: n,
                expected,
                measured,
            });
        }
    }
    report
}
