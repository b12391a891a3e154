//! The full simulated overlay: ground-truth topology, node and monitor
//! state, the adversary, churn and periodic accuracy probes, all driven by
//! one event queue.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use thiserror::Error;

use crate::adversary::{malicious_handle_marker, malicious_handle_verified, AdversaryMode, AdversaryPolicy};
use crate::metrics::{classify_edges, ConfusionCounts, MessageKind, OverheadLedger};
use crate::monitor::{
    compute_global_snapshot, FrequencyBounds, GlobalSnapshot, LocalSnapshot, MonitorState, SchedulingMode,
};
use crate::network::{bootstrap, churn_tick, ChurnConfig, ChurnKind, Edge, NetworkError, NodeId, Role, Topology};
use crate::protocol::{handle_marker, handle_verified, Message, NodeState};
use crate::sim::{sample_exponential, stream_rng, EventQueue, SimRng, SimTime, Stream, TraceLog, TraceSummary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventPayload {
    MessageDelivery { from: NodeId, to: NodeId, message: Message },
    PeevRoundStart { monitor: NodeId, target: NodeId },
    PeevTimeout { monitor: NodeId, target: NodeId, round_id: u64 },
    ChurnTick,
    ProbeTick,
    SimEnd,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub nodes: usize,
    pub monitors: usize,
    pub outbound_per_node: usize,
    /// Mean time between churn events; `None` keeps the topology static.
    pub churn_mean_ms: Option<u64>,
    pub malicious_fraction: f64,
    pub adversary: AdversaryMode,
    pub duration_ms: u64,
    pub peev_timeout_ms: u64,
    pub freq: FrequencyBounds,
    /// Per-monitor frequency bounds, by monitor order; missing entries use `freq`.
    pub monitor_freq: Vec<FrequencyBounds>,
    pub safe_rounds: u32,
    pub scheduling: SchedulingMode,
    /// Inclusive per-link latency range.
    pub latency_ms: (u64, u64),
    pub probe_every_ms: Option<u64>,
    /// Stop each monitor's loop for a target after this many completed rounds.
    pub rounds_per_target: Option<u32>,
    /// Open a replacement edge after a reputation disconnect.
    pub rewire_after_disconnect: bool,
    pub seed: u64,
    pub trace: bool,
    pub record_snapshots: bool,
    /// Keep a [`RoundOutcome`] for every closed verification round.
    pub record_rounds: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            nodes: 50,
            monitors: 4,
            outbound_per_node: 3,
            churn_mean_ms: Some(10_000),
            malicious_fraction: 0.0,
            adversary: AdversaryMode::default(),
            duration_ms: 600_000,
            peev_timeout_ms: 1000,
            freq: FrequencyBounds::default(),
            monitor_freq: Vec::new(),
            safe_rounds: 3,
            scheduling: SchedulingMode::Poisson,
            latency_ms: (5, 50),
            probe_every_ms: Some(30_000),
            rounds_per_target: None,
            rewire_after_disconnect: false,
            seed: 0,
            trace: false,
            record_snapshots: false,
            record_rounds: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if self.nodes <= self.outbound_per_node {
            return bad("nodes must exceed outbound_per_node");
        }
        if !(0.0..=1.0).contains(&self.malicious_fraction) {
            return bad("malicious fraction must lie in [0, 1]");
        }
        for f in std::iter::once(&self.freq).chain(self.monitor_freq.iter()) {
            if f.min == 0 || f.min > f.init || f.init > f.max {
                return bad("frequencies need 1 <= f_min <= f_init <= f_max");
            }
        }
        if self.latency_ms.0 > self.latency_ms.1 {
            return bad("latency range is empty");
        }
        if self.peev_timeout_ms == 0 {
            return bad("timeout must be positive");
        }
        if self.churn_mean_ms == Some(0) {
            return bad("churn mean must be positive");
        }
        match self.probe_every_ms {
            Some(0) => return bad("probe interval must be positive"),
            Some(p) if p > self.duration_ms => return bad("probe interval exceeds duration"),
            _ => {}
        }
        Ok(())
    }

    fn bounds_for(&self, index: usize) -> FrequencyBounds {
        self.monitor_freq.get(index).copied().unwrap_or(self.freq)
    }
}

/// A closed round together with the target's real outbound peers when the
/// round opened and when it closed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundOutcome {
    pub monitor: NodeId,
    pub target: NodeId,
    pub closed_at: SimTime,
    pub collected: BTreeSet<NodeId>,
    pub outbound_at_start: BTreeSet<NodeId>,
    pub outbound_at_close: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeRecord {
    pub time_ms: u64,
    pub counts: ConfusionCounts,
}

struct Streams {
    topology: SimRng,
    churn: SimRng,
    scheduling: SimRng,
    latency: SimRng,
    markers: SimRng,
    adversary: SimRng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            topology: stream_rng(seed, Stream::Topology),
            churn: stream_rng(seed, Stream::Churn),
            scheduling: stream_rng(seed, Stream::Scheduling),
            latency: stream_rng(seed, Stream::Latency),
            markers: stream_rng(seed, Stream::Markers),
            adversary: stream_rng(seed, Stream::Adversary),
        }
    }
}

pub struct Simulation {
    cfg: SimConfig,
    churn_cfg: ChurnConfig,
    queue: EventQueue<EventPayload>,
    topo: Topology,
    nodes: BTreeMap<NodeId, NodeState>,
    monitors: BTreeMap<NodeId, MonitorState>,
    adversary: AdversaryPolicy,
    ledger: OverheadLedger,
    trace: Option<TraceLog>,
    summary: TraceSummary,
    latency: BTreeMap<(NodeId, NodeId), u64>,
    rounds_done: BTreeMap<(NodeId, NodeId), u32>,
    probes: Vec<ProbeRecord>,
    snapshot_lines: Vec<String>,
    round_start_truth: BTreeMap<(NodeId, NodeId), BTreeSet<NodeId>>,
    rounds: Vec<RoundOutcome>,
    rng: Streams,
}

impl Simulation {
    /// Bootstraps a fresh overlay per `cfg`.
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut topo = Topology::new(cfg.outbound_per_node);
        for _ in 0..cfg.monitors {
            topo.add_monitor();
        }
        let mut rng = Streams::new(cfg.seed);
        let churn_cfg = ChurnConfig {
            target_population: cfg.nodes,
            malicious_fraction: cfg.malicious_fraction,
        };
        bootstrap(&mut topo, cfg.nodes, &churn_cfg, &mut rng.topology);
        Ok(Self::build(cfg, topo, rng))
    }

    /// Runs the protocol over a caller-built topology. Roles come from the
    /// topology; `cfg.nodes` only sets the churn target.
    pub fn from_topology(cfg: SimConfig, topo: Topology) -> Result<Self, SimError> {
        let check = SimConfig {
            nodes: cfg.nodes.max(cfg.outbound_per_node + 1),
            ..cfg.clone()
        };
        check.validate()?;
        let rng = Streams::new(cfg.seed);
        Ok(Self::build(cfg, topo, rng))
    }

    fn build(cfg: SimConfig, topo: Topology, rng: Streams) -> Self {
        let monitor_ids: BTreeSet<NodeId> = topo.monitors().collect();
        let mut nodes = BTreeMap::new();
        for n in topo.nodes() {
            let mut s = NodeState::new(n, monitor_ids.clone(), cfg.safe_rounds);
            for &o in topo.outbound(n) {
                s.add_outbound(o);
            }
            for i in topo.inbound_peers(n) {
                s.add_inbound(i);
            }
            nodes.insert(n, s);
        }
        let mut monitors = BTreeMap::new();
        for (i, &m) in monitor_ids.iter().enumerate() {
            let mut st = MonitorState::new(m, cfg.bounds_for(i), cfg.peev_timeout_ms, cfg.scheduling);
            for n in topo.nodes() {
                st.discover(n);
            }
            monitors.insert(m, st);
        }
        let adversary = AdversaryPolicy::new(cfg.adversary.clone(), topo.nodes_with_role(Role::Malicious).collect());
        let mut sim = Simulation {
            churn_cfg: ChurnConfig {
                target_population: cfg.nodes,
                malicious_fraction: cfg.malicious_fraction,
            },
            queue: EventQueue::new(),
            topo,
            nodes,
            monitors,
            adversary,
            ledger: OverheadLedger::new(),
            trace: cfg.trace.then(TraceLog::new),
            summary: TraceSummary::default(),
            latency: BTreeMap::new(),
            rounds_done: BTreeMap::new(),
            probes: Vec::new(),
            snapshot_lines: Vec::new(),
            round_start_truth: BTreeMap::new(),
            rounds: Vec::new(),
            rng,
            cfg,
        };
        for &m in monitor_ids.iter() {
            for n in sim.topo.nodes().collect::<Vec<_>>() {
                sim.queue.schedule(0, EventPayload::PeevRoundStart { monitor: m, target: n });
            }
        }
        if let Some(mean) = sim.cfg.churn_mean_ms {
            let d = sample_exponential(&mut sim.rng.churn, mean as f64);
            sim.queue.schedule(d, EventPayload::ChurnTick);
        }
        if let Some(p) = sim.cfg.probe_every_ms {
            sim.queue.schedule(p, EventPayload::ProbeTick);
        }
        sim.queue.schedule(sim.cfg.duration_ms, EventPayload::SimEnd);
        sim
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn node(&self, n: NodeId) -> Option<&NodeState> {
        self.nodes.get(&n)
    }

    pub fn monitor(&self, m: NodeId) -> Option<&MonitorState> {
        self.monitors.get(&m)
    }

    pub fn monitor_ids(&self) -> Vec<NodeId> {
        self.monitors.keys().copied().collect()
    }

    pub fn adversary_mut(&mut self) -> &mut AdversaryPolicy {
        &mut self.adversary
    }

    pub fn ledger(&self) -> &OverheadLedger {
        &self.ledger
    }

    pub fn trace(&self) -> Option<&TraceLog> {
        self.trace.as_ref()
    }

    pub fn summary(&self) -> &TraceSummary {
        &self.summary
    }

    pub fn probes(&self) -> &[ProbeRecord] {
        &self.probes
    }

    pub fn rounds(&self) -> &[RoundOutcome] {
        &self.rounds
    }

    pub fn snapshot_lines(&self) -> &[String] {
        &self.snapshot_lines
    }

    pub fn local_snapshots(&self) -> Vec<LocalSnapshot> {
        self.monitors.values().map(|m| m.snapshot.clone()).collect()
    }

    pub fn global_snapshot(&self) -> GlobalSnapshot {
        compute_global_snapshot(&self.local_snapshots())
    }

    pub fn rounds_completed(&self, monitor: NodeId, target: NodeId) -> u32 {
        self.rounds_done.get(&(monitor, target)).copied().unwrap_or(0)
    }

    /// Delivers `message` from `from` to `to` after `delay_ms`, bypassing
    /// the sender's own logic.
    pub fn inject(&mut self, from: NodeId, to: NodeId, message: Message, delay_ms: u64) {
        self.queue
            .schedule(delay_ms, EventPayload::MessageDelivery { from, to, message });
    }

    /// Opens `from -> to` in the ground truth and in both nodes' state.
    pub fn open_connection(&mut self, from: NodeId, to: NodeId) -> Result<(), NetworkError> {
        self.topo.open_connection(from, to)?;
        self.link_states((from, to));
        self.debug_audit();
        Ok(())
    }

    pub fn close_connection(&mut self, a: NodeId, b: NodeId) -> Option<Edge> {
        let closed = self.topo.close_connection(a, b)?;
        self.unlink_states(closed);
        self.debug_audit();
        Some(closed)
    }

    /// Processes every event due at or before `end`, capped at the
    /// configured duration.
    pub fn run_until(&mut self, end: SimTime) -> TraceSummary {
        let end = end.min(SimTime(self.cfg.duration_ms));
        while let Some(ev) = self.queue.pop_due(end) {
            self.dispatch(ev.fire_at, ev.payload);
        }
        self.queue.advance_to(end);
        self.summary.final_time = self.queue.now();
        self.summary.clone()
    }

    pub fn run(&mut self) -> TraceSummary {
        self.run_until(SimTime(self.cfg.duration_ms))
    }

    fn log(&mut self, kind: &str, from: Option<NodeId>, to: Option<NodeId>, detail: impl FnOnce() -> String) {
        let now = self.queue.now();
        self.summary.record(now, kind, from.map(|n| n.0), to.map(|n| n.0));
        if let Some(t) = self.trace.as_mut() {
            t.push(now, kind, from.map(|n| n.0), to.map(|n| n.0), detail());
        }
    }

    fn link_latency(&mut self, a: NodeId, b: NodeId) -> u64 {
        let key = (a.min(b), a.max(b));
        let (lo, hi) = self.cfg.latency_ms;
        let rng = &mut self.rng.latency;
        *self.latency.entry(key).or_insert_with(|| rng.random_range(lo..=hi))
    }

    fn send(&mut self, from: NodeId, to: NodeId, message: Message) {
        let d = self.link_latency(from, to);
        self.queue
            .schedule(d, EventPayload::MessageDelivery { from, to, message });
    }

    fn link_states(&mut self, (a, b): Edge) {
        if let Some(s) = self.nodes.get_mut(&a) {
            s.add_outbound(b);
        }
        if let Some(s) = self.nodes.get_mut(&b) {
            s.add_inbound(a);
        }
    }

    fn unlink_states(&mut self, (a, b): Edge) {
        if let Some(s) = self.nodes.get_mut(&a) {
            s.remove_peer(b);
        }
        if let Some(s) = self.nodes.get_mut(&b) {
            s.remove_peer(a);
        }
    }

    fn debug_audit(&self) {
        #[cfg(debug_assertions)]
        {
            if let Err(e) = self.topo.audit() {
                panic!("topology invariant violated: {e}");
            }
            for (n, s) in &self.nodes {
                assert_eq!(&s.outbound, self.topo.outbound(*n), "outbound view of {n}");
                assert_eq!(s.inbound, self.topo.inbound_peers(*n), "inbound view of {n}");
            }
        }
    }

    fn dispatch(&mut self, at: SimTime, payload: EventPayload) {
        debug_assert_eq!(at, self.queue.now());
        match payload {
            EventPayload::MessageDelivery { from, to, message } => self.deliver(from, to, message),
            EventPayload::PeevRoundStart { monitor, target } => self.round_start(monitor, target),
            EventPayload::PeevTimeout {
                monitor,
                target,
                round_id,
            } => self.round_close(monitor, target, round_id),
            EventPayload::ChurnTick => self.churn(),
            EventPayload::ProbeTick => self.probe(),
            EventPayload::SimEnd => self.log("sim_end", None, None, String::new),
        }
    }

    fn deliver(&mut self, from: NodeId, to: NodeId, message: Message) {
        let from_mon = self.topo.is_monitor(from);
        let to_mon = self.topo.is_monitor(to);
        let present = self.topo.contains(from) && self.topo.contains(to);
        let linked = if from_mon || to_mon {
            from_mon != to_mon
        } else {
            self.topo.connected(from, to)
        };
        if !(present && linked) {
            self.log("drop", Some(from), Some(to), || message.to_string());
            return;
        }
        let kind = match (&message, from_mon, to_mon) {
            (Message::Verified(_), _, _) => MessageKind::Verified,
            (Message::Marker(_), true, _) => MessageKind::MarkerFromMonitor,
            (Message::Marker(_), _, true) => MessageKind::MarkerToMonitor,
            (Message::Marker(_), false, false) => MessageKind::MarkerForwarded,
        };
        self.ledger.record(kind, from, to);
        self.log("deliver", Some(from), Some(to), || message.to_string());

        if to_mon {
            if let (Message::Marker(m), Some(mon)) = (&message, self.monitors.get_mut(&to)) {
                mon.receive_marker(from, m);
            }
            return;
        }
        let malicious = self.topo.role(to) == Some(Role::Malicious);
        let Some(state) = self.nodes.get_mut(&to) else { return };
        match message {
            Message::Marker(m) => {
                let out = if malicious {
                    malicious_handle_marker(state, &mut self.adversary, from, &m, &mut self.rng.adversary)
                } else {
                    handle_marker(state, from, &m)
                };
                for s in out {
                    self.send(to, s.to, Message::Marker(s.marker));
                }
            }
            Message::Verified(v) => {
                let disconnects = if malicious {
                    malicious_handle_verified(state, &self.adversary, from, &v)
                } else {
                    match handle_verified(state, from, &v) {
                        Ok(d) => d,
                        Err(e) => {
                            self.log("reject", Some(from), Some(to), || e.to_string());
                            return;
                        }
                    }
                };
                if !disconnects.is_empty() {
                    for d in disconnects {
                        self.disconnect(to, d.peer);
                    }
                    self.debug_audit();
                }
            }
        }
    }

    /// Applies a reputation disconnect decided by `by`: the link closes,
    /// both sides ban each other and the outbound side opens a replacement.
    fn disconnect(&mut self, by: NodeId, peer: NodeId) {
        let closed = self.topo.close_connection(by, peer);
        self.topo.ban(by, peer);
        if let Some(s) = self.nodes.get_mut(&by) {
            s.remove_peer(peer);
            s.banned.insert(peer);
        }
        if let Some(s) = self.nodes.get_mut(&peer) {
            s.remove_peer(by);
            s.banned.insert(by);
        }
        self.log("disconnect", Some(by), Some(peer), String::new);
        if let (Some((origin, _)), true) = (closed, self.cfg.rewire_after_disconnect) {
            for e in self.topo.top_up(origin, &mut self.rng.topology) {
                self.link_states(e);
                self.log("rewire", Some(e.0), Some(e.1), String::new);
            }
        }
    }

    fn round_start(&mut self, monitor: NodeId, target: NodeId) {
        if !self.topo.contains(target) {
            return;
        }
        if let Some(limit) = self.cfg.rounds_per_target {
            if self.rounds_completed(monitor, target) >= limit {
                return;
            }
        }
        let now = self.queue.now();
        let Some(mon) = self.monitors.get_mut(&monitor) else { return };
        match mon.start_peev_round(target, &mut self.rng.markers, now) {
            Ok((marker, round)) => {
                let timeout = round.timeout_ms;
                if self.cfg.record_rounds {
                    self.round_start_truth
                        .insert((monitor, target), self.topo.outbound(target).clone());
                }
                self.log("round_start", Some(monitor), Some(target), || format!("round={}", round.id));
                self.send(monitor, target, Message::Marker(marker));
                self.queue.schedule(
                    timeout,
                    EventPayload::PeevTimeout {
                        monitor,
                        target,
                        round_id: round.id,
                    },
                );
            }
            Err(e) => self.log("reject", Some(monitor), Some(target), || e.to_string()),
        }
    }

    fn round_close(&mut self, monitor: NodeId, target: NodeId, round_id: u64) {
        let Some(mon) = self.monitors.get_mut(&monitor) else { return };
        if mon.open_round(target).map(|r| r.id) != Some(round_id) {
            return;
        }
        let Ok(collected) = mon.close_peev_round(target) else { return };
        let changes = mon.snapshot.update_topology(target, &collected);
        let verified = mon.build_verified_message(target);
        mon.snapshot.adjust_frequency(target, changes);
        let f = mon.snapshot.frequency(target).unwrap_or(0);
        let delay = mon
            .snapshot
            .schedule_next_round(target, &mut self.rng.scheduling, mon.mode);
        *self.rounds_done.entry((monitor, target)).or_insert(0) += 1;
        if self.cfg.record_rounds {
            self.rounds.push(RoundOutcome {
                monitor,
                target,
                closed_at: self.queue.now(),
                collected: collected.clone(),
                outbound_at_start: self.round_start_truth.remove(&(monitor, target)).unwrap_or_default(),
                outbound_at_close: self.topo.outbound(target).clone(),
            });
        }
        self.log("round_close", Some(monitor), Some(target), || {
            let l: Vec<String> = collected.iter().map(|p| p.to_string()).collect();
            format!("round={round_id} collected=[{}] changes={changes} f={f}", l.join(","))
        });
        self.send(monitor, target, Message::Verified(verified));
        self.queue
            .schedule(delay, EventPayload::PeevRoundStart { monitor, target });
    }

    fn churn(&mut self) {
        let ev = churn_tick(&mut self.topo, &mut self.rng.churn, &self.churn_cfg);
        match ev.kind {
            ChurnKind::NodeAdded => {
                let monitor_ids: BTreeSet<NodeId> = self.monitors.keys().copied().collect();
                self.nodes
                    .insert(ev.node, NodeState::new(ev.node, monitor_ids.clone(), self.cfg.safe_rounds));
                for &e in &ev.edges {
                    self.link_states(e);
                }
                if ev.role == Role::Malicious {
                    self.adversary.colluders.insert(ev.node);
                }
                for m in monitor_ids {
                    if let Some(mon) = self.monitors.get_mut(&m) {
                        mon.discover(ev.node);
                    }
                    self.queue.schedule(
                        0,
                        EventPayload::PeevRoundStart {
                            monitor: m,
                            target: ev.node,
                        },
                    );
                }
                self.log("churn_add", None, Some(ev.node), || format!("{:?}", ev.role));
            }
            ChurnKind::NodeRemoved => {
                for &(a, b) in &ev.edges {
                    let other = if a == ev.node { b } else { a };
                    if let Some(s) = self.nodes.get_mut(&other) {
                        s.remove_peer(ev.node);
                    }
                }
                self.nodes.remove(&ev.node);
                for mon in self.monitors.values_mut() {
                    mon.handle_node_departure(ev.node);
                }
                self.adversary.forget(ev.node);
                for &e in &ev.rewired {
                    self.link_states(e);
                }
                self.log("churn_remove", None, Some(ev.node), || format!("rewired={}", ev.rewired.len()));
            }
        }
        self.debug_audit();
        if let Some(mean) = self.cfg.churn_mean_ms {
            let d = sample_exponential(&mut self.rng.churn, mean as f64);
            self.queue.schedule(d, EventPayload::ChurnTick);
        }
    }

    fn probe(&mut self) {
        let global = self.global_snapshot();
        let counts = classify_edges(&global, &self.topo);
        let time_ms = self.queue.now().millis();
        self.probes.push(ProbeRecord { time_ms, counts });
        if self.cfg.record_snapshots {
            for mon in self.monitors.values() {
                self.snapshot_lines
                    .push(format!("{time_ms}\t{}\t{}", mon.id, render_edges(&mon.snapshot.edges)));
            }
            self.snapshot_lines
                .push(format!("{time_ms}\tglobal\t{}", render_edges(&global.edges)));
        }
        self.log("probe", None, None, || {
            format!("tp={} fp={} fn={}", counts.tp, counts.fp, counts.fn_)
        });
        if let Some(p) = self.cfg.probe_every_ms {
            self.queue.schedule(p, EventPayload::ProbeTick);
        }
    }
}

fn render_edges(edges: &BTreeSet<Edge>) -> String {
    edges
        .iter()
        .map(|(a, b)| format!("{a}->{b}"))
        .collect::<Vec<_>>()
        .join(",")
}
