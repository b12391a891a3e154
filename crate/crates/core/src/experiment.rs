//! Experiment configuration, single runs, parameter sweeps and report
//! rendering (CSV and text tables).

use std::fmt::Write as _;

use thiserror::Error;

use crate::adversary::{AdversaryMode, ColluderForwarding};
use crate::metrics::{audit_overhead, expected_overhead, precision, recall, AuditReport, ConfusionCounts};
use crate::monitor::{FrequencyBounds, SchedulingMode};
use crate::network::NodeId;
use crate::simulation::{ProbeRecord, SimConfig, Simulation};

/// Variability levels (seconds) and malicious percentages of the standard sweep.
pub const SWEEP_VARIABILITY_S: [f64; 3] = [10.0, 5.0, 1.0];
pub const SWEEP_MALICIOUS_PCT: [f64; 7] = [0.0, 0.05, 0.10, 0.20, 0.30, 0.40, 0.50];

pub const PROBES_HEADER: &str = "var_s,malicious_pct,seed,probe_time_ms,tp,fp,fn,precision,recall";
pub const RUNS_HEADER: &str = "var_s,malicious_pct,seed,tp,fp,fn,precision,recall";
pub const SUMMARY_HEADER: &str = "var_s,malicious_pct,runs,tp,fp,fn,precision_pct,recall_pct";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("invalid config field `{field}`: {reason}")]
    ConfigInvalid { field: String, reason: String },
    #[error("sweep has no runs")]
    EmptySweep,
}

fn invalid(field: &str, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::ConfigInvalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub nodes: usize,
    pub monitors: usize,
    pub outbound_per_node: usize,
    /// Mean seconds between churn events; 0 disables churn.
    pub variability_s: f64,
    /// Fraction of malicious nodes in `[0, 1]`.
    pub malicious_pct: f64,
    pub duration_ms: u64,
    pub probe_every_ms: u64,
    pub peev_timeout_ms: u64,
    pub f_init: u32,
    pub f_min: u32,
    pub f_max: u32,
    pub safe_rounds: u32,
    pub scheduling_mode: SchedulingMode,
    pub seed: u64,
    pub latency_ms_range: (u64, u64),
    /// Colluders keep forwarding to honest outbound peers.
    pub soft_adversary: bool,
    pub colluder_forwarding: ColluderForwarding,
    /// Colluders trade markers of honest inbound peers.
    pub exchange_peer_markers: bool,
    /// Reopen an outbound slot freed by a reputation disconnect.
    pub rewire_after_disconnect: bool,
    pub trace: bool,
    pub record_snapshots: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            nodes: 50,
            monitors: 4,
            outbound_per_node: 3,
            variability_s: 10.0,
            malicious_pct: 0.0,
            duration_ms: 600_000,
            probe_every_ms: 30_000,
            peev_timeout_ms: 1000,
            f_init: 5,
            f_min: 1,
            f_max: 10,
            safe_rounds: 3,
            scheduling_mode: SchedulingMode::Poisson,
            seed: 1,
            latency_ms_range: (5, 50),
            soft_adversary: false,
            colluder_forwarding: ColluderForwarding::Inbound,
            exchange_peer_markers: true,
            rewire_after_disconnect: false,
            trace: false,
            record_snapshots: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ExperimentError> {
    v.parse().map_err(|_| invalid(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ExperimentError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(invalid(key, format!("expected a boolean, got `{v}`"))),
    }
}

pub fn parse_scheduling(v: &str) -> Result<SchedulingMode, ExperimentError> {
    match v.to_ascii_lowercase().as_str() {
        "poisson" => Ok(SchedulingMode::Poisson),
        "fixed" => Ok(SchedulingMode::Fixed),
        _ => Err(invalid("scheduling_mode", format!("expected poisson or fixed, got `{v}`"))),
    }
}

pub fn parse_latency(v: &str) -> Result<(u64, u64), ExperimentError> {
    let (lo, hi) = v
        .split_once([',', '-', ':'])
        .ok_or_else(|| invalid("latency_ms_range", format!("expected `lo,hi`, got `{v}`")))?;
    Ok((
        parse_num("latency_ms_range", lo.trim())?,
        parse_num("latency_ms_range", hi.trim())?,
    ))
}

pub fn parse_forwarding(v: &str) -> Result<ColluderForwarding, ExperimentError> {
    match v.to_ascii_lowercase().as_str() {
        "inbound" => Ok(ColluderForwarding::Inbound),
        "connected" => Ok(ColluderForwarding::Connected),
        _ => Err(invalid("colluder_forwarding", format!("expected inbound or connected, got `{v}`"))),
    }
}

fn forwarding_name(f: ColluderForwarding) -> &'static str {
    match f {
        ColluderForwarding::Inbound => "inbound",
        ColluderForwarding::Connected => "connected",
    }
}

fn scheduling_name(m: SchedulingMode) -> &'static str {
    match m {
        SchedulingMode::Poisson => "poisson",
        SchedulingMode::Fixed => "fixed",
    }
}

impl ExperimentConfig {
    /// Sets one field from its textual `key = value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
        let v = value.trim();
        match key.trim() {
            "nodes" => self.nodes = parse_num(key, v)?,
            "monitors" => self.monitors = parse_num(key, v)?,
            "outbound_per_node" => self.outbound_per_node = parse_num(key, v)?,
            "variability_s" => self.variability_s = parse_num(key, v)?,
            "malicious_pct" => self.malicious_pct = parse_num(key, v)?,
            "duration_ms" => self.duration_ms = parse_num(key, v)?,
            "probe_every_ms" => self.probe_every_ms = parse_num(key, v)?,
            "peev_timeout_ms" => self.peev_timeout_ms = parse_num(key, v)?,
            "f_init" => self.f_init = parse_num(key, v)?,
            "f_min" => self.f_min = parse_num(key, v)?,
            "f_max" => self.f_max = parse_num(key, v)?,
            "safe_rounds" => self.safe_rounds = parse_num(key, v)?,
            "scheduling_mode" => self.scheduling_mode = parse_scheduling(v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "latency_ms_range" => self.latency_ms_range = parse_latency(v)?,
            "soft_adversary" => self.soft_adversary = parse_bool(key, v)?,
            "colluder_forwarding" => self.colluder_forwarding = parse_forwarding(v)?,
            "exchange_peer_markers" => self.exchange_peer_markers = parse_bool(key, v)?,
            "rewire_after_disconnect" => self.rewire_after_disconnect = parse_bool(key, v)?,
            "trace" => self.trace = parse_bool(key, v)?,
            "record_snapshots" => self.record_snapshots = parse_bool(key, v)?,
            other => return Err(invalid(other, "unknown key")),
        }
        Ok(())
    }

    /// Reads a flat `key = value` file on top of the defaults. Blank lines
    /// and `#` comments are skipped.
    pub fn from_kv(text: &str) -> Result<Self, ExperimentError> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<(), ExperimentError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(&format!("line {}", i + 1), "expected key = value"))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "nodes = {}", self.nodes);
        let _ = writeln!(s, "monitors = {}", self.monitors);
        let _ = writeln!(s, "outbound_per_node = {}", self.outbound_per_node);
        let _ = writeln!(s, "variability_s = {}", self.variability_s);
        let _ = writeln!(s, "malicious_pct = {}", self.malicious_pct);
        let _ = writeln!(s, "duration_ms = {}", self.duration_ms);
        let _ = writeln!(s, "probe_every_ms = {}", self.probe_every_ms);
        let _ = writeln!(s, "peev_timeout_ms = {}", self.peev_timeout_ms);
        let _ = writeln!(s, "f_init = {}", self.f_init);
        let _ = writeln!(s, "f_min = {}", self.f_min);
        let _ = writeln!(s, "f_max = {}", self.f_max);
        let _ = writeln!(s, "safe_rounds = {}", self.safe_rounds);
        let _ = writeln!(s, "scheduling_mode = {}", scheduling_name(self.scheduling_mode));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "latency_ms_range = {},{}", self.latency_ms_range.0, self.latency_ms_range.1);
        let _ = writeln!(s, "soft_adversary = {}", self.soft_adversary);
        let _ = writeln!(s, "colluder_forwarding = {}", forwarding_name(self.colluder_forwarding));
        let _ = writeln!(s, "exchange_peer_markers = {}", self.exchange_peer_markers);
        let _ = writeln!(s, "rewire_after_disconnect = {}", self.rewire_after_disconnect);
        let _ = writeln!(s, "trace = {}", self.trace);
        let _ = writeln!(s, "record_snapshots = {}", self.record_snapshots);
        s
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.nodes <= self.outbound_per_node {
            return Err(invalid("nodes", "must exceed outbound_per_node"));
        }
        if self.outbound_per_node == 0 {
            return Err(invalid("outbound_per_node", "must be positive"));
        }
        if !self.variability_s.is_finite() || self.variability_s < 0.0 {
            return Err(invalid("variability_s", "must be a non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.malicious_pct) {
            return Err(invalid("malicious_pct", "must lie in [0, 1]"));
        }
        if self.f_min == 0 {
            return Err(invalid("f_min", "must be at least 1"));
        }
        if !(self.f_min <= self.f_init && self.f_init <= self.f_max) {
            return Err(invalid("f_init", "need f_min <= f_init <= f_max"));
        }
        if self.probe_every_ms == 0 || self.probe_every_ms > self.duration_ms {
            return Err(invalid("probe_every_ms", "must lie in [1, duration_ms]"));
        }
        if self.peev_timeout_ms == 0 {
            return Err(invalid("peev_timeout_ms", "must be positive"));
        }
        if self.latency_ms_range.0 > self.latency_ms_range.1 {
            return Err(invalid("latency_ms_range", "lo exceeds hi"));
        }
        Ok(())
    }

    pub fn to_sim_config(&self) -> SimConfig {
        let churn = (self.variability_s * 1000.0).round() as u64;
        SimConfig {
            nodes: self.nodes,
            monitors: self.monitors,
            outbound_per_node: self.outbound_per_node,
            churn_mean_ms: (churn > 0).then_some(churn),
            malicious_fraction: self.malicious_pct,
            adversary: AdversaryMode::WorstCase {
                forward_to_honest_outbound: self.soft_adversary,
                colluders: self.colluder_forwarding,
                exchange_peer_markers: self.exchange_peer_markers,
            },
            duration_ms: self.duration_ms,
            peev_timeout_ms: self.peev_timeout_ms,
            freq: FrequencyBounds {
                init: self.f_init,
                min: self.f_min,
                max: self.f_max,
            },
            monitor_freq: Vec::new(),
            safe_rounds: self.safe_rounds,
            scheduling: self.scheduling_mode,
            latency_ms: self.latency_ms_range,
            probe_every_ms: Some(self.probe_every_ms),
            rounds_per_target: None,
            rewire_after_disconnect: self.rewire_after_disconnect,
            seed: self.seed,
            trace: self.trace,
            record_snapshots: self.record_snapshots,
            record_rounds: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub probes: Vec<ProbeRecord>,
    /// Counts summed over every probe.
    pub totals: ConfusionCounts,
    pub events_processed: u64,
    pub trace_digest: u64,
    /// Rendered trace, when enabled in the config.
    pub trace: Option<String>,
    pub snapshot_lines: Vec<String>,
}

impl ExperimentReport {
    pub fn precision(&self) -> Option<f64> {
        precision(&self.totals).ok()
    }

    pub fn recall(&self) -> Option<f64> {
        recall(&self.totals).ok()
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    cfg.validate()?;
    let mut sim = Simulation::new(cfg.to_sim_config()).map_err(|e| invalid("config", e.to_string()))?;
    let summary = sim.run();
    let probes = sim.probes().to_vec();
    let mut totals = ConfusionCounts::default();
    for p in &probes {
        totals += p.counts;
    }
    Ok(ExperimentReport {
        config: cfg.clone(),
        probes,
        totals,
        events_processed: summary.events_processed,
        trace_digest: summary.digest,
        trace: sim.trace().map(|t| t.render()),
        snapshot_lines: sim.snapshot_lines().to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverheadRow {
    pub node: NodeId,
    pub outbound: u64,
    pub inbound: u64,
    pub expected: u64,
    pub measured: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverheadAudit {
    pub rows: Vec<OverheadRow>,
    pub report: AuditReport,
}

/// Static honest overlay, exactly one verification round per node per
/// monitor, then every node's message count is checked against the formula.
pub fn run_overhead_audit(cfg: &ExperimentConfig) -> Result<OverheadAudit, ExperimentError> {
    cfg.validate()?;
    let sim_cfg = SimConfig {
        churn_mean_ms: None,
        malicious_fraction: 0.0,
        probe_every_ms: None,
        rounds_per_target: Some(1),
        duration_ms: cfg.peev_timeout_ms + 3 * cfg.latency_ms_range.1 + 1,
        trace: false,
        record_snapshots: false,
        ..cfg.to_sim_config()
    };
    let mut sim = Simulation::new(sim_cfg).map_err(|e| invalid("config", e.to_string()))?;
    sim.run();
    let topo = sim.topology();
    let monitors = topo.monitors().count() as u64;
    let report = audit_overhead(sim.ledger(), topo, monitors);
    let rows = topo
        .nodes()
        .map(|n| {
            let outbound = topo.outbound(n).len() as u64;
            let inbound = topo.inbound_peers(n).len() as u64;
            OverheadRow {
                node: n,
                outbound,
                inbound,
                expected: expected_overhead(outbound, inbound, monitors),
                measured: sim.ledger().get(n).protocol_messages(),
            }
        })
        .collect();
    Ok(OverheadAudit { rows, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// Independent runs spread over a thread pool when the `parallel`
    /// feature is on; sequential otherwise.
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub config: ExperimentConfig,
    pub result: Result<ExperimentReport, ExperimentError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
}

/// The standard grid: every variability level crossed with every malicious share.
pub fn standard_grid(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut grid = Vec::new();
    for &v in &SWEEP_VARIABILITY_S {
        for &m in &SWEEP_MALICIOUS_PCT {
            grid.push(ExperimentConfig {
                variability_s: v,
                malicious_pct: m,
                ..base.clone()
            });
        }
    }
    grid
}

/// Runs every grid entry `repeats` times with seeds `seed + run_index`.
/// A failing run is kept in the result and does not stop the sweep.
pub fn run_sweep(
    grid: &[ExperimentConfig],
    repeats: u32,
    exec: Execution,
) -> Result<SweepResult, ExperimentError> {
    if grid.is_empty() || repeats == 0 {
        return Err(ExperimentError::EmptySweep);
    }
    let jobs: Vec<ExperimentConfig> = grid
        .iter()
        .flat_map(|c| {
            (0..repeats as u64).map(move |r| ExperimentConfig {
                seed: c.seed.wrapping_add(r),
                ..c.clone()
            })
        })
        .collect();
    let run = |c: &ExperimentConfig| SweepRun {
        config: c.clone(),
        result: run_experiment(c),
    };
    let runs = match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            jobs.par_iter().map(run).collect()
        }
        _ => jobs.iter().map(run).collect(),
    };
    Ok(SweepResult { runs })
}

impl SweepResult {
    pub fn failures(&self) -> impl Iterator<Item = (&ExperimentConfig, &ExperimentError)> {
        self.runs
            .iter()
            .filter_map(|r| r.result.as_ref().err().map(|e| (&r.config, e)))
    }

    pub fn reports(&self) -> impl Iterator<Item = &ExperimentReport> {
        self.runs.iter().filter_map(|r| r.result.as_ref().ok())
    }

    /// Per `(variability, malicious)` cell: run count and summed counts, in grid order.
    pub fn cells(&self) -> Vec<SummaryCell> {
        let mut cells: Vec<SummaryCell> = Vec::new();
        for r in self.reports() {
            let (v, m) = (r.config.variability_s, r.config.malicious_pct);
            match cells.iter_mut().find(|c| c.variability_s == v && c.malicious_pct == m) {
                Some(c) => {
                    c.runs += 1;
                    c.totals += r.totals;
                }
                None => cells.push(SummaryCell {
                    variability_s: v,
                    malicious_pct: m,
                    runs: 1,
                    totals: r.totals,
                }),
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryCell {
    pub variability_s: f64,
    pub malicious_pct: f64,
    pub runs: u32,
    pub totals: ConfusionCounts,
}

impl SummaryCell {
    pub fn precision_pct(&self) -> Option<f64> {
        precision(&self.totals).ok().map(|p| p * 100.0)
    }

    pub fn recall_pct(&self) -> Option<f64> {
        recall(&self.totals).ok().map(|r| r * 100.0)
    }
}

fn fmt_ratio(r: Option<f64>) -> String {
    r.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn fmt_pct1(r: Option<f64>) -> String {
    r.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".to_string())
}

fn fmt_share(m: f64) -> String {
    format!("{}", (m * 100.0).round() as i64)
}

pub fn probes_csv<'a>(reports: impl IntoIterator<Item = &'a ExperimentReport>) -> String {
    let mut s = String::from(PROBES_HEADER);
    s.push('\n');
    for r in reports {
        for p in &r.probes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.config.variability_s,
                fmt_share(r.config.malicious_pct),
                r.config.seed,
                p.time_ms,
                p.counts.tp,
                p.counts.fp,
                p.counts.fn_,
                fmt_ratio(precision(&p.counts).ok()),
                fmt_ratio(recall(&p.counts).ok()),
            );
        }
    }
    s
}

pub fn runs_csv<'a>(reports: impl IntoIterator<Item = &'a ExperimentReport>) -> String {
    let mut s = String::from(RUNS_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.config.variability_s,
            fmt_share(r.config.malicious_pct),
            r.config.seed,
            r.totals.tp,
            r.totals.fp,
            r.totals.fn_,
            fmt_ratio(r.precision()),
            fmt_ratio(r.recall()),
        );
    }
    s
}

pub fn summary_csv(cells: &[SummaryCell]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            c.variability_s,
            fmt_share(c.malicious_pct),
            c.runs,
            c.totals.tp,
            c.totals.fp,
            c.totals.fn_,
            fmt_pct1(c.precision_pct()),
            fmt_pct1(c.recall_pct()),
        );
    }
    s
}

/// Two text tables (precision, recall) with one row per variability level
/// and one column per malicious share.
pub fn summary_tables(cells: &[SummaryCell]) -> String {
    let mut vars: Vec<f64> = Vec::new();
    let mut shares: Vec<f64> = Vec::new();
    for c in cells {
        if !vars.contains(&c.variability_s) {
            vars.push(c.variability_s);
        }
        if !shares.contains(&c.malicious_pct) {
            shares.push(c.malicious_pct);
        }
    }
    let mut out = String::new();
    for (title, pick) in [
        ("Precision (%)", SummaryCell::precision_pct as fn(&SummaryCell) -> Option<f64>),
        ("Recall (%)", SummaryCell::recall_pct),
    ] {
        let _ = writeln!(out, "{title}");
        let _ = write!(out, "{:>8}", "var \\ mal");
        for m in &shares {
            let _ = write!(out, "{:>8}", format!("{}%", fmt_share(*m)));
        }
        out.push('\n');
        for v in &vars {
            let _ = write!(out, "{:>8}", format!("{v}s"));
            for m in &shares {
                let cell = cells
                    .iter()
                    .find(|c| c.variability_s == *v && c.malicious_pct == *m);
                let _ = write!(out, "{:>8}", fmt_pct1(cell.and_then(pick)));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            nodes: 12,
            duration_ms: 60_000,
            probe_every_ms: 30_000,
            variability_s: 5.0,
            seed,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn kv_round_trip() {
        let c = ExperimentConfig {
            seed: 42,
            variability_s: 1.0,
            malicious_pct: 0.2,
            scheduling_mode: SchedulingMode::Fixed,
            latency_ms_range: (1, 9),
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn kv_comments_and_errors() {
        let c = ExperimentConfig::from_kv("# comment\n\nseed = 7 # trailing\nvariability_s=1\n").unwrap();
        assert_eq!((c.seed, c.variability_s), (7, 1.0));
        assert!(matches!(
            ExperimentConfig::from_kv("bogus = 1"),
            Err(ExperimentError::ConfigInvalid { .. })
        ));
        assert!(ExperimentConfig::from_kv("seed 7").is_err());
        assert!(ExperimentConfig::from_kv("scheduling_mode = sometimes").is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let c = ExperimentConfig {
            f_init: 11,
            ..ExperimentConfig::default()
        };
        match run_experiment(&c) {
            Err(ExperimentError::ConfigInvalid { field, .. }) => assert_eq!(field, "f_init"),
            other => panic!("unexpected {other:?}"),
        }
        let c = ExperimentConfig {
            probe_every_ms: 700_000,
            ..ExperimentConfig::default()
        };
        assert!(run_experiment(&c).is_err());
    }

    #[test]
    fn empty_sweep_is_an_error() {
        assert_eq!(
            run_sweep(&[quick(1)], 0, Execution::Sequential),
            Err(ExperimentError::EmptySweep)
        );
        assert_eq!(run_sweep(&[], 3, Execution::Sequential), Err(ExperimentError::EmptySweep));
    }

    #[test]
    fn sweep_seeds_follow_run_index() {
        let res = run_sweep(&[quick(10)], 3, Execution::Sequential).unwrap();
        let seeds: Vec<u64> = res.runs.iter().map(|r| r.config.seed).collect();
        assert_eq!(seeds, vec![10, 11, 12]);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let grid = vec![quick(1), ExperimentConfig { malicious_pct: 0.2, ..quick(1) }];
        let a = run_sweep(&grid, 2, Execution::Sequential).unwrap();
        let b = run_sweep(&grid, 2, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let cells = a.cells();
        assert_eq!(cells.len(), 2);
        assert!(cells.iter().all(|c| c.runs == 2));
    }

    #[test]
    fn csv_shapes() {
        let res = run_sweep(&[quick(3)], 2, Execution::Sequential).unwrap();
        let probes = probes_csv(res.reports());
        assert_eq!(probes.lines().next(), Some(PROBES_HEADER));
        assert_eq!(probes.lines().count(), 1 + 2 * 2);
        let runs = runs_csv(res.reports());
        assert_eq!(runs.lines().count(), 3);
        let summary = summary_csv(&res.cells());
        assert_eq!(summary.lines().count(), 2);
        let tables = summary_tables(&res.cells());
        assert!(tables.starts_with("Precision (%)"));
        assert!(tables.contains("Recall (%)"));
    }

    #[test]
    fn overhead_audit_is_clean_on_static_net() {
        let cfg = ExperimentConfig {
            nodes: 10,
            ..ExperimentConfig::default()
        };
        let a = run_overhead_audit(&cfg).unwrap();
        assert_eq!(a.rows.len(), 10);
        assert!(a.report.is_clean(), "{:?}", a.report);
        let zero = run_overhead_audit(&ExperimentConfig { monitors: 0, ..cfg }).unwrap();
        assert!(zero.rows.iter().all(|r| r.measured == 0 && r.expected == 0));
    }

    #[test]
    fn standard_grid_has_21_cells() {
        let g = standard_grid(&ExperimentConfig::default());
        assert_eq!(g.len(), 21);
        assert_eq!(g[0].variability_s, 10.0);
        assert_eq!(g[20].malicious_pct, 0.5);
    }
}
