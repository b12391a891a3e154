//! Malicious node behavior.
//!
//! [`AdversaryMode::WorstCase`] is the colluding strategy used in the
//! accuracy experiments: hide every connection with an honest peer and
//! fabricate connections between colluders. [`AdversaryMode::Single`]
//! isolates one misbehavior at a time for targeted checks.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::network::NodeId;
use crate::protocol::{handle_marker, DisconnectAction, Marker, NodeState, SendAction, VerifiedMsg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Behavior {
    /// Forward a monitor's marker to inbound peers as well.
    ForwardToInbound = 1,
    /// Route a marker to a non-peer through a colluding node.
    RelayViaColluder = 2,
    /// Resend markers kept from earlier rounds.
    Replay = 3,
    /// Alter one field of every marker it forwards.
    Tamper = 4,
    /// Do not forward the monitor's marker to outbound peers.
    DropFromMonitor = 5,
    /// Do not return peers' markers to the monitor.
    DropFromPeer = 6,
}

impl Behavior {
    pub fn from_id(id: u8) -> Option<Behavior> {
        Some(match id {
            1 => Behavior::ForwardToInbound,
            2 => Behavior::RelayViaColluder,
            3 => Behavior::Replay,
            4 => Behavior::Tamper,
            5 => Behavior::DropFromMonitor,
            6 => Behavior::DropFromPeer,
            _ => return None,
        })
    }
}

/// Which connected colluders receive a monitor's marker in the worst case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColluderForwarding {
    /// Inbound colluders only: links towards outbound colluders stay hidden
    /// and every inbound colluder shows up as a reversed fake link.
    #[default]
    Inbound,
    /// Every connected colluder, whatever the link direction.
    Connected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdversaryMode {
    WorstCase {
        /// Also forward monitor markers to honest outbound peers, keeping
        /// those edges visible. Off means every honest-facing edge is hidden.
        forward_to_honest_outbound: bool,
        colluders: ColluderForwarding,
        /// Hand markers received from honest inbound peers to connected
        /// colluders, who return them as fake links of that peer.
        exchange_peer_markers: bool,
    },
    Single {
        behavior: Behavior,
        /// Misbehave only on markers of these monitors; `None` means all.
        monitors: Option<BTreeSet<NodeId>>,
    },
}

impl Default for AdversaryMode {
    fn default() -> Self {
        AdversaryMode::WorstCase {
            forward_to_honest_outbound: false,
            colluders: ColluderForwarding::default(),
            exchange_peer_markers: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdversaryPolicy {
    pub mode: AdversaryMode,
    pub colluders: BTreeSet<NodeId>,
    /// holder -> (source -> last marker received from that source)
    pub stored_markers: BTreeMap<NodeId, BTreeMap<NodeId, Marker>>,
}

impl AdversaryPolicy {
    pub fn new(mode: AdversaryMode, colluders: BTreeSet<NodeId>) -> Self {
        AdversaryPolicy {
            mode,
            colluders,
            stored_markers: BTreeMap::new(),
        }
    }

    pub fn is_colluder(&self, n: NodeId) -> bool {
        self.colluders.contains(&n)
    }

    pub fn forget(&mut self, n: NodeId) {
        self.colluders.remove(&n);
        self.stored_markers.remove(&n);
    }

    fn store(&mut self, holder: NodeId, from: NodeId, m: Marker) {
        self.stored_markers.entry(holder).or_default().insert(from, m);
    }
}

fn colluding_peers(state: &NodeState, policy: &AdversaryPolicy) -> Vec<NodeId> {
    state
        .outbound
        .iter()
        .chain(state.inbound.iter())
        .copied()
        .filter(|p| policy.is_colluder(*p))
        .collect()
}

fn inbound_colluders(state: &NodeState, policy: &AdversaryPolicy) -> Vec<NodeId> {
    state.inbound.iter().copied().filter(|p| policy.is_colluder(*p)).collect()
}

fn sends(to: impl IntoIterator<Item = NodeId>, marker: Marker) -> Vec<SendAction> {
    to.into_iter().map(|to| SendAction { to, marker }).collect()
}

fn tamper<R: Rng + ?Sized>(state: &NodeState, m: Marker, rng: &mut R) -> Marker {
    match rng.random_range(0..3) {
        0 => {
            let mut choices: Vec<NodeId> = state.peers();
            choices.push(state.id);
            choices.retain(|c| *c != m.target);
            let target = choices.choose(rng).copied().unwrap_or(NodeId(m.target.0 ^ 1));
            Marker { target, ..m }
        }
        1 => {
            let others: Vec<NodeId> = state.monitors.iter().copied().filter(|x| *x != m.monitor).collect();
            let monitor = others.choose(rng).copied().unwrap_or(NodeId(u64::MAX));
            Marker { monitor, ..m }
        }
        _ => {
            let flip = rng.random_range(1..=u64::MAX);
            Marker {
                value: m.value ^ flip,
                ..m
            }
        }
    }
}

/// Marker handling for a node in `policy.colluders`.
pub fn malicious_handle_marker<R: Rng + ?Sized>(
    state: &NodeState,
    policy: &mut AdversaryPolicy,
    from: NodeId,
    m: &Marker,
    rng: &mut R,
) -> Vec<SendAction> {
    let from_monitor = from == m.monitor && state.monitors.contains(&from);
    if !from_monitor {
        policy.store(state.id, from, *m);
    }
    match policy.mode.clone() {
        AdversaryMode::WorstCase {
            forward_to_honest_outbound,
            colluders,
            exchange_peer_markers,
        } => {
            if from_monitor {
                let mut to: BTreeSet<NodeId> = match colluders {
                    ColluderForwarding::Inbound => inbound_colluders(state, policy),
                    ColluderForwarding::Connected => colluding_peers(state, policy),
                }
                .into_iter()
                .collect();
                if forward_to_honest_outbound {
                    to.extend(state.outbound.iter().copied());
                }
                sends(to, *m)
            } else if policy.is_colluder(from) && state.monitors.contains(&m.monitor) {
                vec![SendAction {
                    to: m.monitor,
                    marker: *m,
                }]
            } else if exchange_peer_markers && from == m.target && state.inbound.contains(&from) {
                sends(colluding_peers(state, policy), *m)
            } else {
                Vec::new()
            }
        }
        AdversaryMode::Single { behavior, monitors } => {
            let honest = handle_marker(state, from, m);
            if monitors.as_ref().is_some_and(|ms| !ms.contains(&m.monitor)) {
                return honest;
            }
            match behavior {
                Behavior::ForwardToInbound => {
                    let mut out = honest;
                    if from_monitor {
                        out.extend(sends(state.inbound.iter().copied(), *m));
                    }
                    out
                }
                Behavior::RelayViaColluder => {
                    if from_monitor {
                        let mut out = honest;
                        out.extend(sends(colluding_peers(state, policy), *m));
                        out
                    } else if policy.is_colluder(from) {
                        let retargeted = Marker {
                            target: state.id,
                            ..*m
                        };
                        let mut out = sends(state.outbound.iter().copied(), *m);
                        out.extend(sends(state.outbound.iter().copied(), retargeted));
                        out
                    } else {
                        honest
                    }
                }
                Behavior::Replay => {
                    let mut out = honest;
                    if from_monitor {
                        if let Some(kept) = policy.stored_markers.get(&state.id) {
                            for old in kept.values() {
                                out.push(SendAction {
                                    to: old.monitor,
                                    marker: *old,
                                });
                            }
                        }
                    }
                    out
                }
                Behavior::Tamper => honest
                    .into_iter()
                    .map(|s| SendAction {
                        to: s.to,
                        marker: tamper(state, s.marker, rng),
                    })
                    .collect(),
                Behavior::DropFromMonitor => {
                    if from_monitor {
                        Vec::new()
                    } else {
                        honest
                    }
                }
                Behavior::DropFromPeer => {
                    if from_monitor {
                        honest
                    } else {
                        Vec::new()
                    }
                }
            }
        }
    }
}

/// Colluders never enforce reputation; verified lists are discarded.
pub fn malicious_handle_verified(
    _state: &NodeState,
    _policy: &AdversaryPolicy,
    _from: NodeId,
    _v: &VerifiedMsg,
) -> Vec<DisconnectAction> {
    Vec::new()
}
