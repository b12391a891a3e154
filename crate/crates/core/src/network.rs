//! Ground-truth overlay: reachable nodes, monitors, directed connections and churn.
//!
//! Edges are directed `from -> to`, meaning `from` opened an outbound
//! connection to `to`. At most one edge exists per unordered pair, nothing
//! connects *to* a monitor, and every monitor holds an edge to every node.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use rand::seq::IndexedRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Honest,
    Malicious,
    Monitor,
}

pub type Edge = (NodeId, NodeId);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetworkError {
    #[error("only {available} eligible peers, need {needed}")]
    InsufficientPeers { available: usize, needed: usize },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("edge {0} -> {1} already exists")]
    DuplicateEdge(NodeId, NodeId),
    #[error("reverse edge {1} -> {0} already exists")]
    MutualEdge(NodeId, NodeId),
    #[error("{0} and {1} have banned each other")]
    BannedPeer(NodeId, NodeId),
    #[error("invalid connection {0} -> {1}")]
    InvalidEdge(NodeId, NodeId),
    #[error("monitors cannot be removed by churn ({0})")]
    MonitorRemoval(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChurnKind {
    NodeAdded,
    NodeRemoved,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChurnEvent {
    pub kind: ChurnKind,
    pub node: NodeId,
    pub role: Role,
    /// Outbound edges of a new node, or every peer edge a removed node held.
    pub edges: Vec<Edge>,
    /// Replacement edges `(orphan, new_target)` opened after a removal.
    pub rewired: Vec<Edge>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChurnConfig {
    pub target_population: usize,
    pub malicious_fraction: f64,
}

impl ChurnConfig {
    pub fn desired_malicious(&self, population: usize) -> usize {
        (self.malicious_fraction * population as f64).round() as usize
    }
}

#[derive(Debug, Clone, Default)]
pub struct Topology {
    roles: BTreeMap<NodeId, Role>,
    out: BTreeMap<NodeId, BTreeSet<NodeId>>,
    inc: BTreeMap<NodeId, BTreeSet<NodeId>>,
    banned: BTreeMap<NodeId, BTreeSet<NodeId>>,
    target_outbound: usize,
    next_id: u64,
}

impl Topology {
    pub fn new(target_outbound: usize) -> Self {
        Topology {
            target_outbound,
            next_id: 1,
            ..Default::default()
        }
    }

    pub fn target_outbound(&self) -> usize {
        self.target_outbound
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.roles.contains_key(&n)
    }

    pub fn role(&self, n: NodeId) -> Option<Role> {
        self.roles.get(&n).copied()
    }

    pub fn is_monitor(&self, n: NodeId) -> bool {
        self.role(n) == Some(Role::Monitor)
    }

    pub fn monitors(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.roles
            .iter()
            .filter(|(_, r)| **r == Role::Monitor)
            .map(|(n, _)| *n)
    }

    /// Non-monitor nodes, ascending.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.roles
            .iter()
            .filter(|(_, r)| **r != Role::Monitor)
            .map(|(n, _)| *n)
    }

    pub fn nodes_with_role(&self, role: Role) -> impl Iterator<Item = NodeId> + '_ {
        self.roles
            .iter()
            .filter(move |(_, r)| **r == role)
            .map(|(n, _)| *n)
    }

    pub fn population(&self) -> usize {
        self.nodes().count()
    }

    pub fn malicious_count(&self) -> usize {
        self.nodes_with_role(Role::Malicious).count()
    }

    pub fn outbound(&self, n: NodeId) -> &BTreeSet<NodeId> {
        static EMPTY: BTreeSet<NodeId> = BTreeSet::new();
        self.out.get(&n).unwrap_or(&EMPTY)
    }

    /// Inbound peers of `n`, excluding monitors.
    pub fn inbound_peers(&self, n: NodeId) -> BTreeSet<NodeId> {
        self.inc
            .get(&n)
            .map(|s| s.iter().copied().filter(|p| !self.is_monitor(*p)).collect())
            .unwrap_or_default()
    }

    pub fn has_edge(&self, from: NodeId, to: NodeId) -> bool {
        self.out.get(&from).is_some_and(|s| s.contains(&to))
    }

    /// True when a connection exists in either direction.
    pub fn connected(&self, a: NodeId, b: NodeId) -> bool {
        self.has_edge(a, b) || self.has_edge(b, a)
    }

    pub fn is_banned(&self, a: NodeId, b: NodeId) -> bool {
        self.banned.get(&a).is_some_and(|s| s.contains(&b))
            || self.banned.get(&b).is_some_and(|s| s.contains(&a))
    }

    pub fn banned_by(&self, n: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.banned.get(&n).into_iter().flatten().copied()
    }

    /// Edges between two non-monitor nodes.
    pub fn peer_edges(&self) -> BTreeSet<Edge> {
        self.out
            .iter()
            .filter(|(from, _)| !self.is_monitor(**from))
            .flat_map(|(from, tos)| tos.iter().map(move |to| (*from, *to)))
            .collect()
    }

    pub fn all_edges(&self) -> BTreeSet<Edge> {
        self.out
            .iter()
            .flat_map(|(from, tos)| tos.iter().map(move |to| (*from, *to)))
            .collect()
    }

    fn fresh_id(&mut self) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        id
    }

    fn insert_role(&mut self, role: Role) -> NodeId {
        let id = self.fresh_id();
        self.roles.insert(id, role);
        self.out.insert(id, BTreeSet::new());
        self.inc.insert(id, BTreeSet::new());
        id
    }

    fn link(&mut self, from: NodeId, to: NodeId) {
        self.out.entry(from).or_default().insert(to);
        self.inc.entry(to).or_default().insert(from);
    }

    fn unlink(&mut self, from: NodeId, to: NodeId) -> bool {
        let removed = self.out.get_mut(&from).is_some_and(|s| s.remove(&to));
        if let Some(s) = self.inc.get_mut(&to) {
            s.remove(&from);
        }
        removed
    }

    /// Adds a monitor, which immediately connects to every existing node.
    pub fn add_monitor(&mut self) -> NodeId {
        let m = self.insert_role(Role::Monitor);
        let nodes: Vec<NodeId> = self.nodes().collect();
        for n in nodes {
            self.link(m, n);
        }
        m
    }

    /// Targets `from` may open a new outbound connection to.
    pub fn eligible_targets(&self, from: NodeId) -> Vec<NodeId> {
        self.nodes()
            .filter(|&to| to != from && !self.connected(from, to) && !self.is_banned(from, to))
            .collect()
    }

    pub fn open_connection(&mut self, from: NodeId, to: NodeId) -> Result<(), NetworkError> {
        let from_role = self.role(from).ok_or(NetworkError::UnknownNode(from))?;
        let to_role = self.role(to).ok_or(NetworkError::UnknownNode(to))?;
        if from == to || to_role == Role::Monitor {
            return Err(NetworkError::InvalidEdge(from, to));
        }
        if self.has_edge(from, to) {
            return Err(NetworkError::DuplicateEdge(from, to));
        }
        if self.has_edge(to, from) {
            return Err(NetworkError::MutualEdge(from, to));
        }
        if from_role != Role::Monitor && self.is_banned(from, to) {
            return Err(NetworkError::BannedPeer(from, to));
        }
        self.link(from, to);
        Ok(())
    }

    /// Closes the connection between `a` and `b` in whichever direction it
    /// exists, returning the directed edge that was removed.
    pub fn close_connection(&mut self, a: NodeId, b: NodeId) -> Option<Edge> {
        if self.unlink(a, b) {
            Some((a, b))
        } else if self.unlink(b, a) {
            Some((b, a))
        } else {
            None
        }
    }

    /// Symmetric, permanent ban.
    pub fn ban(&mut self, a: NodeId, b: NodeId) {
        self.banned.entry(a).or_default().insert(b);
        self.banned.entry(b).or_default().insert(a);
    }

    fn connect_monitors_to(&mut self, n: NodeId) {
        let ms: Vec<NodeId> = self.monitors().collect();
        for m in ms {
            self.link(m, n);
        }
    }

    fn pick_targets<R: Rng + ?Sized>(&self, from: NodeId, k: usize, rng: &mut R) -> Vec<NodeId> {
        let eligible = self.eligible_targets(from);
        eligible.choose_multiple(rng, k).copied().collect()
    }

    /// Adds a node with exactly `target_outbound` uniformly chosen outbound peers.
    pub fn add_node<R: Rng + ?Sized>(
        &mut self,
        role: Role,
        rng: &mut R,
    ) -> Result<(NodeId, Vec<Edge>), NetworkError> {
        let available = self.population();
        if available < self.target_outbound {
            return Err(NetworkError::InsufficientPeers {
                available,
                needed: self.target_outbound,
            });
        }
        Ok(self.add_node_bootstrap(role, rng))
    }

    /// Like [`Topology::add_node`] but connects to however many peers exist.
    pub fn add_node_bootstrap<R: Rng + ?Sized>(
        &mut self,
        role: Role,
        rng: &mut R,
    ) -> (NodeId, Vec<Edge>) {
        assert_ne!(role, Role::Monitor, "use add_monitor");
        let n = self.insert_role(role);
        let targets = self.pick_targets(n, self.target_outbound, rng);
        let mut edges = Vec::with_capacity(targets.len());
        for t in targets {
            self.link(n, t);
            edges.push((n, t));
        }
        self.connect_monitors_to(n);
        (n, edges)
    }

    /// Opens outbound connections from `n` until it holds `target_outbound`
    /// or no eligible target is left.
    pub fn top_up<R: Rng + ?Sized>(&mut self, n: NodeId, rng: &mut R) -> Vec<Edge> {
        let missing = self.target_outbound.saturating_sub(self.outbound(n).len());
        let targets = self.pick_targets(n, missing, rng);
        for &t in &targets {
            self.link(n, t);
        }
        targets.into_iter().map(|t| (n, t)).collect()
    }

    /// Removes `n`; each of its former inbound peers opens one replacement edge.
    pub fn remove_node<R: Rng + ?Sized>(
        &mut self,
        n: NodeId,
        rng: &mut R,
    ) -> Result<ChurnEvent, NetworkError> {
        let role = self.role(n).ok_or(NetworkError::UnknownNode(n))?;
        if role == Role::Monitor {
            return Err(NetworkError::MonitorRemoval(n));
        }
        let outs: Vec<NodeId> = self.outbound(n).iter().copied().collect();
        let ins: Vec<NodeId> = self.inc.get(&n).into_iter().flatten().copied().collect();
        let mut edges = Vec::new();
        for to in outs {
            self.unlink(n, to);
            edges.push((n, to));
        }
        let mut orphans = Vec::new();
        for from in ins {
            self.unlink(from, n);
            if !self.is_monitor(from) {
                edges.push((from, n));
                orphans.push(from);
            }
        }
        self.roles.remove(&n);
        self.out.remove(&n);
        self.inc.remove(&n);
        let mut rewired = Vec::new();
        for p in orphans {
            if let Some(&t) = self.eligible_targets(p).choose(rng) {
                self.link(p, t);
                rewired.push((p, t));
            }
        }
        Ok(ChurnEvent {
            kind: ChurnKind::NodeRemoved,
            node: n,
            role,
            edges,
            rewired,
        })
    }

    /// Checks every structural invariant; returns the first violation found.
    pub fn audit(&self) -> Result<(), String> {
        for (from, tos) in &self.out {
            if !self.contains(*from) {
                return Err(format!("edge from removed node {from}"));
            }
            for to in tos {
                if from == to {
                    return Err(format!("self edge {from}"));
                }
                if !self.contains(*to) {
                    return Err(format!("edge {from}->{to} to removed node"));
                }
                if self.is_monitor(*to) {
                    return Err(format!("edge {from}->{to} targets a monitor"));
                }
                if self.has_edge(*to, *from) {
                    return Err(format!("mutual edge {from}<->{to}"));
                }
                if !self.inc.get(to).is_some_and(|s| s.contains(from)) {
                    return Err(format!("inbound index missing {from}->{to}"));
                }
            }
        }
        let inc_total: usize = self.inc.values().map(BTreeSet::len).sum();
        let out_total: usize = self.out.values().map(BTreeSet::len).sum();
        if inc_total != out_total {
            return Err("inbound/outbound index mismatch".into());
        }
        let monitors: Vec<NodeId> = self.monitors().collect();
        for n in self.nodes() {
            for m in &monitors {
                if !self.has_edge(*m, n) {
                    return Err(format!("monitor {m} not connected to {n}"));
                }
            }
        }
        Ok(())
    }

    /// One `from_id to_id` line per peer edge.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for (a, b) in self.peer_edges() {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph overlay {\n");
        for (n, role) in &self.roles {
            let style = match role {
                Role::Honest => "shape=circle",
                Role::Malicious => "shape=circle,color=red",
                Role::Monitor => "shape=box,color=blue",
            };
            let _ = writeln!(s, "  {n} [{style}];");
        }
        for (a, b) in self.peer_edges() {
            let _ = writeln!(s, "  {a} -> {b};");
        }
        s.push_str("}\n");
        s
    }
}

/// Builds the initial population sequentially, then tops up the first
/// arrivals so every node ends with `target_outbound` outbound peers.
pub fn bootstrap<R: Rng + ?Sized>(
    topo: &mut Topology,
    count: usize,
    cfg: &ChurnConfig,
    rng: &mut R,
) -> Vec<NodeId> {
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let role = if topo.malicious_count() < cfg.desired_malicious(i + 1) {
            Role::Malicious
        } else {
            Role::Honest
        };
        let (id, _) = topo.add_node_bootstrap(role, rng);
        ids.push(id);
    }
    for &id in &ids {
        topo.top_up(id, rng);
    }
    ids
}

/// One churn step: add when below target, remove when above, fair coin at target.
pub fn churn_tick<R: Rng + ?Sized>(topo: &mut Topology, rng: &mut R, cfg: &ChurnConfig) -> ChurnEvent {
    let pop = topo.population();
    let add = match pop.cmp(&cfg.target_population) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => rng.random_bool(0.5),
    };
    if add || pop <= topo.target_outbound() {
        let role = if topo.malicious_count() < cfg.desired_malicious(pop + 1) {
            Role::Malicious
        } else {
            Role::Honest
        };
        let (node, edges) = topo.add_node_bootstrap(role, rng);
        ChurnEvent {
            kind: ChurnKind::NodeAdded,
            node,
            role,
            edges,
            rewired: Vec::new(),
        }
    } else {
        let malicious = topo.malicious_count();
        let want = cfg.desired_malicious(pop - 1);
        let preferred = if malicious > want {
            Role::Malicious
        } else {
            Role::Honest
        };
        let mut pool: Vec<NodeId> = topo.nodes_with_role(preferred).collect();
        if pool.is_empty() {
            pool = topo.nodes().collect();
        }
        let victim = *pool.choose(rng).expect("population above bootstrap size");
        topo.remove_node(victim, rng).expect("victim exists")
    }
}
