use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn atom(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atom"))
        .args(args)
        .env_remove("ATOM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn run_writes_csvs_trace_and_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = atom(&[
        "run", "--duration-ms", "60000", "--var", "5", "--malicious", "0.2", "--seed", "7",
        "--trace", "--snapshots", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let probes = lines(&out.join("probes.csv"));
    assert_eq!(probes[0], "var_s,malicious_pct,seed,probe_time_ms,tp,fp,fn,precision,recall");
    assert_eq!(probes.len(), 1 + 2);
    assert_eq!(lines(&out.join("runs.csv")).len(), 2);
    assert!(lines(&out.join("trace.tsv")).iter().all(|l| l.split('\t').count() == 5));
    assert!(fs::read_to_string(out.join("snapshots.tsv")).unwrap().contains("\tglobal\t"));
    assert!(fs::read_to_string(out.join("config.txt")).unwrap().contains("seed = 7"));
}

#[test]
fn equal_seeds_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = atom(&[
            "run", "--duration-ms", "60000", "--malicious", "0.3", "--seed", "11", "--trace",
            "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
        outputs.push(["probes.csv", "runs.csv", "trace.tsv"].map(|f| fs::read(out.join(f)).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn sweep_writes_one_row_per_run_and_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = atom(&[
        "sweep", "--duration-ms", "30000", "--repeats", "2", "--vars", "10,1",
        "--malicious-list", "0,0.2,0.4", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&out.join("runs.csv")).len(), 1 + 2 * 3 * 2);
    assert_eq!(lines(&out.join("summary.csv")).len(), 1 + 2 * 3);
    assert!(out.join("tables.txt").exists());
}

#[test]
fn sequential_and_parallel_sweeps_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (name, extra) in [("par", None), ("seq", Some("--sequential"))] {
        let out = dir.path().join(name);
        let mut args = vec![
            "sweep", "--duration-ms", "30000", "--repeats", "2", "--vars", "5",
            "--malicious-list", "0.1,0.3", "--out", out.to_str().unwrap(),
        ];
        args.extend(extra);
        assert!(atom(&args).status.success());
        runs.push(fs::read(out.join("runs.csv")).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn audit_overhead_is_clean() {
    let o = atom(&["audit-overhead", "--nodes", "30", "--monitors", "3"]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("30 nodes checked, 0 discrepancies"), "{stdout}");
}

#[test]
fn export_topology_formats() {
    let dot = atom(&["export-topology", "--nodes", "12", "--monitors", "2"]);
    assert!(dot.status.success());
    let dot = String::from_utf8(dot.stdout).unwrap();
    assert!(dot.starts_with("digraph"));
    assert!(dot.contains("->"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("edges.txt");
    let o = atom(&[
        "export-topology", "--nodes", "12", "--outbound", "3", "--format", "edges",
        "--output", path.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let body = fs::read_to_string(&path).unwrap();
    assert!(body.lines().count() >= 12 * 3 - 6);
}

#[test]
fn config_file_and_out_dir_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    fs::write(&cfg, "# short honest run\nnodes = 20\nduration_ms = 30000\nseed = 3\n").unwrap();
    let out = dir.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_atom"))
        .args(["run", "--config", cfg.to_str().unwrap()])
        .env("ATOM_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("probes.csv").exists());
}

#[test]
fn bad_input_exits_nonzero() {
    let o = atom(&["run", "--malicious", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    let o = atom(&["run", "--config", "/nonexistent/atom.conf"]);
    assert_eq!(o.status.code(), Some(1));
}
