//! Active topology monitoring for unstructured P2P overlays.
//!
//! Monitors probe every link with unforgeable markers, nodes enforce
//! consistency through a majority-based reputation system, and a
//! deterministic discrete-event simulator measures how well the inferred
//! graph tracks the real one under churn and colluding adversaries.

pub mod adversary;
pub mod experiment;
pub mod metrics;
pub mod monitor;
pub mod network;
pub mod protocol;
pub mod sim;
pub mod simulation;

pub use adversary::{AdversaryMode, AdversaryPolicy, Behavior};
pub use experiment::{run_experiment, run_sweep, Execution, ExperimentConfig, ExperimentError, ExperimentReport};
pub use metrics::{classify_edges, expected_overhead, precision, recall, ConfusionCounts};
pub use monitor::{compute_global_snapshot, max_error_window, FrequencyBounds, GlobalSnapshot, LocalSnapshot, MonitorState, SchedulingMode};
pub use network::{NodeId, Role, Topology};
pub use protocol::{Marker, Message, NodeState, VerifiedMsg};
pub use sim::{SimTime, TraceLog, TraceSummary};
pub use simulation::{SimConfig, Simulation};
