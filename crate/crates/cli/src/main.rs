use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use atom_core::experiment::{
    parse_forwarding, parse_latency, parse_scheduling, probes_csv, run_experiment, run_overhead_audit, run_sweep, runs_csv,
    standard_grid, summary_csv, summary_tables, Execution, ExperimentConfig, SWEEP_MALICIOUS_PCT,
    SWEEP_VARIABILITY_S,
};
use atom_core::network::{bootstrap, ChurnConfig, Topology};
use atom_core::sim::{stream_rng, Stream};

#[derive(Parser)]
#[command(name = "atom", version, about = "Active topology monitoring simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its probe and run CSVs.
    Run {
        #[command(flatten)]
        params: Params,
        #[command(flatten)]
        out: OutDir,
        /// Write the event trace to trace.tsv.
        #[arg(long)]
        trace: bool,
        /// Write monitor and global snapshots at each probe to snapshots.tsv.
        #[arg(long)]
        snapshots: bool,
    },
    /// Run a variability x malicious-share grid with repeated seeds.
    Sweep {
        #[command(flatten)]
        params: Params,
        #[command(flatten)]
        out: OutDir,
        #[arg(long, default_value_t = 5)]
        repeats: u32,
        /// Comma-separated variability levels in seconds.
        #[arg(long, value_delimiter = ',')]
        vars: Option<Vec<f64>>,
        /// Comma-separated malicious shares in [0, 1].
        #[arg(long = "malicious-list", value_delimiter = ',')]
        malicious_list: Option<Vec<f64>>,
        /// Run grid entries one after another instead of on a thread pool.
        #[arg(long)]
        sequential: bool,
    },
    /// Check per-node message counts after one round against the closed form.
    AuditOverhead {
        #[command(flatten)]
        params: Params,
    },
    /// Bootstrap an overlay and print it as DOT or an edge list.
    ExportTopology {
        #[command(flatten)]
        params: Params,
        #[arg(long, value_enum, default_value_t = Format::Dot)]
        format: Format,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Dot,
    Edges,
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "ATOM_OUT_DIR", default_value = "atom-out")]
    out: PathBuf,
}

/// Every parameter defaults to the config file value, then to the built-in default.
#[derive(Args, Default)]
struct Params {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    monitors: Option<usize>,
    #[arg(long)]
    outbound: Option<usize>,
    /// Mean seconds between churn events (0 = static).
    #[arg(long = "var")]
    variability: Option<f64>,
    /// Malicious share in [0, 1].
    #[arg(long)]
    malicious: Option<f64>,
    #[arg(long)]
    duration_ms: Option<u64>,
    #[arg(long)]
    probe_every_ms: Option<u64>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    f_init: Option<u32>,
    #[arg(long)]
    f_min: Option<u32>,
    #[arg(long)]
    f_max: Option<u32>,
    #[arg(long)]
    safe_rounds: Option<u32>,
    /// poisson or fixed
    #[arg(long)]
    scheduling: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-link latency range in ms, `lo,hi`.
    #[arg(long)]
    latency: Option<String>,
    /// Colluders keep forwarding markers to honest outbound peers.
    #[arg(long)]
    soft_adversary: bool,
    /// Colluders receiving a monitor's marker: inbound or connected.
    #[arg(long)]
    colluder_forwarding: Option<String>,
    /// Colluders trade markers received from honest inbound peers (true/false).
    #[arg(long)]
    exchange_peer_markers: Option<bool>,
    /// Reopen an outbound slot after a reputation disconnect (true/false).
    #[arg(long)]
    rewire_after_disconnect: Option<bool>,
}

impl Params {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::from_kv(&text)?
            }
            None => ExperimentConfig::default(),
        };
        macro_rules! take {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        take!(nodes => nodes, monitors => monitors, outbound => outbound_per_node,
              variability => variability_s, malicious => malicious_pct, duration_ms => duration_ms,
              probe_every_ms => probe_every_ms, timeout_ms => peev_timeout_ms, f_init => f_init,
              f_min => f_min, f_max => f_max, safe_rounds => safe_rounds, seed => seed);
        if let Some(s) = &self.scheduling {
            cfg.scheduling_mode = parse_scheduling(s)?;
        }
        if let Some(l) = &self.latency {
            cfg.latency_ms_range = parse_latency(l)?;
        }
        if self.soft_adversary {
            cfg.soft_adversary = true;
        }
        if let Some(f) = &self.colluder_forwarding {
            cfg.colluder_forwarding = parse_forwarding(f)?;
        }
        if let Some(x) = self.exchange_peer_markers {
            cfg.exchange_peer_markers = x;
        }
        if let Some(r) = self.rewire_after_disconnect {
            cfg.rewire_after_disconnect = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
}

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.1}", v * 100.0)).unwrap_or_else(|| "undefined".into())
}

fn cmd_run(params: &Params, out: &Path, trace: bool, snapshots: bool) -> Result<()> {
    let mut cfg = params.resolve()?;
    cfg.trace |= trace;
    cfg.record_snapshots |= snapshots;
    let report = run_experiment(&cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(out, "config.txt", &cfg.to_kv())?;
    write(out, "probes.csv", &probes_csv([&report]))?;
    write(out, "runs.csv", &runs_csv([&report]))?;
    if let Some(t) = &report.trace {
        write(out, "trace.tsv", t)?;
    }
    if cfg.record_snapshots {
        let mut body = report.snapshot_lines.join("\n");
        body.push('\n');
        write(out, "snapshots.tsv", &body)?;
    }
    println!(
        "seed={} var={}s malicious={} tp={} fp={} fn={} precision={} recall={}",
        cfg.seed,
        cfg.variability_s,
        cfg.malicious_pct,
        report.totals.tp,
        report.totals.fp,
        report.totals.fn_,
        pct(report.precision()),
        pct(report.recall()),
    );
    Ok(())
}

fn cmd_sweep(
    params: &Params,
    out: &Path,
    repeats: u32,
    vars: Option<&[f64]>,
    shares: Option<&[f64]>,
    sequential: bool,
) -> Result<bool> {
    let base = params.resolve()?;
    let grid: Vec<ExperimentConfig> = match (vars, shares) {
        (None, None) => standard_grid(&base),
        _ => {
            let vars = vars.unwrap_or(&SWEEP_VARIABILITY_S);
            let shares = shares.unwrap_or(&SWEEP_MALICIOUS_PCT);
            vars.iter()
                .flat_map(|&v| {
                    let base = &base;
                    shares.iter().map(move |&m| ExperimentConfig {
                        variability_s: v,
                        malicious_pct: m,
                        ..base.clone()
                    })
                })
                .collect()
        }
    };
    for c in &grid {
        c.validate()?;
    }
    let exec = if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let res = run_sweep(&grid, repeats, exec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(out, "config.txt", &base.to_kv())?;
    write(out, "probes.csv", &probes_csv(res.reports()))?;
    write(out, "runs.csv", &runs_csv(res.reports()))?;
    let cells = res.cells();
    write(out, "summary.csv", &summary_csv(&cells))?;
    let tables = summary_tables(&cells);
    write(out, "tables.txt", &tables)?;
    print!("{tables}");
    let mut ok = true;
    for (cfg, err) in res.failures() {
        ok = false;
        eprintln!(
            "run failed (var={} malicious={} seed={}): {err}",
            cfg.variability_s, cfg.malicious_pct, cfg.seed
        );
    }
    Ok(ok)
}

fn cmd_audit(params: &Params) -> Result<bool> {
    let cfg = params.resolve()?;
    let audit = run_overhead_audit(&cfg)?;
    println!("node\tout\tin\texpected\tmeasured");
    for r in &audit.rows {
        println!("{}\t{}\t{}\t{}\t{}", r.node, r.outbound, r.inbound, r.expected, r.measured);
    }
    for d in &audit.report.discrepancies {
        eprintln!("discrepancy at node {}: expected {} measured {}", d.node, d.expected, d.measured);
    }
    println!(
        "{} nodes checked, {} discrepancies",
        audit.report.nodes_checked,
        audit.report.discrepancies.len()
    );
    Ok(audit.report.is_clean())
}

fn cmd_export(params: &Params, format: Format, output: Option<&Path>) -> Result<()> {
    let cfg = params.resolve()?;
    let mut topo = Topology::new(cfg.outbound_per_node);
    for _ in 0..cfg.monitors {
        topo.add_monitor();
    }
    let churn = ChurnConfig {
        target_population: cfg.nodes,
        malicious_fraction: cfg.malicious_pct,
    };
    bootstrap(&mut topo, cfg.nodes, &churn, &mut stream_rng(cfg.seed, Stream::Topology));
    let body = match format {
        Format::Dot => topo.to_dot(),
        Format::Edges => topo.to_edge_list(),
    };
    match output {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{body}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.cmd {
        Command::Run {
            params,
            out,
            trace,
            snapshots,
        } => cmd_run(params, &out.out, *trace, *snapshots).map(|_| true),
        Command::Sweep {
            params,
            out,
            repeats,
            vars,
            malicious_list,
            sequential,
        } => cmd_sweep(
            params,
            &out.out,
            *repeats,
            vars.as_deref(),
            malicious_list.as_deref(),
            *sequential,
        ),
        Command::AuditOverhead { params } => cmd_audit(params),
        Command::ExportTopology {
            params,
            format,
            output,
        } => cmd_export(params, *format, output.as_deref()).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "seed = 9\nvariability_s = 1\n").unwrap();
        let params = Params {
            config: Some(p),
            seed: Some(3),
            ..Params::default()
        };
        let cfg = params.resolve().unwrap();
        assert_eq!((cfg.seed, cfg.variability_s), (3, 1.0));
    }

    #[test]
    fn invalid_flag_values_are_rejected() {
        let params = Params {
            malicious: Some(1.5),
            ..Params::default()
        };
        assert!(params.resolve().is_err());
        let params = Params {
            scheduling: Some("bursty".into()),
            ..Params::default()
        };
        assert!(params.resolve().is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
