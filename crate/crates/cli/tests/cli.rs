use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

use splitfed::transport::{predict_cost, CostModel};
use splitfed::{Protocol, DEFAULT_CONFIG};

fn splitfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitfed"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The default configuration shortened to `epochs`, plus extra lines.
fn write_config(dir: &Path, name: &str, epochs: usize, extra: &str) -> String {
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let replaced: Vec<String> = extra
        .lines()
        .map(key)
        .chain(["epochs".into(), "divergence".into()])
        .collect();
    let text: String = DEFAULT_CONFIG
        .lines()
        .filter(|l| !replaced.contains(&key(l)))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.join(name);
    std::fs::write(
        &path,
        format!("{text}epochs = {epochs}\ndivergence = false\n{extra}"),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn run_to(dir: &Path, config: &str, out: &str, extra: &[&str]) -> String {
    let out_dir = dir.join(out);
    let mut args = vec![
        "run",
        "--config",
        config,
        "--out-dir",
        out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let o = splitfed(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap()
}

#[test]
fn run_writes_report_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", 2, "collector_log = true\n");
    let csv = run_to(dir.path(), &cfg, "out", &[]);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,protocol,scenario"));
    let report = std::fs::read_to_string(dir.path().join("out/report.json")).unwrap();
    let report = splitfed::RunReport::from_json(&report).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert_eq!(report.protocol, "sfpl");
    let log = std::fs::read_to_string(dir.path().join("out/collector.jsonl")).unwrap();
    assert!(log.lines().any(|l| l.contains("\"shuffle\"")));
}

#[test]
fn same_config_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", 2, "");
    let a = run_to(dir.path(), &cfg, "a", &[]);
    let b = run_to(dir.path(), &cfg, "b", &[]);
    let threaded = run_to(dir.path(), &cfg, "t", &["--threads", "4"]);
    let socket = run_to(dir.path(), &cfg, "s", &["--transport", "socket"]);
    assert_eq!(a, b);
    assert_eq!(a, threaded);
    assert_eq!(a, socket);
}

#[test]
fn remote_clients_reproduce_the_local_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", 2, "clients = 2\npartition = iid\n");
    let local = run_to(dir.path(), &cfg, "local", &[]);

    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let out_dir = dir.path().join("remote");
    let server = Command::new(env!("CARGO_BIN_EXE_splitfed"))
        .args([
            "run",
            "--config",
            &cfg,
            "--transport",
            "socket",
            "--listen",
            &addr,
        ])
        .args(["--out-dir", out_dir.to_str().unwrap()])
        .spawn()
        .unwrap();
    let clients: Vec<_> = (0..2)
        .map(|k| {
            let (cfg, addr) = (cfg.clone(), addr.clone());
            std::thread::spawn(move || {
                // the server may not be listening yet
                for _ in 0..100 {
                    let o = splitfed(&[
                        "run",
                        "--config",
                        &cfg,
                        "--connect",
                        &addr,
                        "--client-id",
                        &k.to_string(),
                    ]);
                    if o.status.success() {
                        return;
                    }
                    std::thread::sleep(std::time::Duration::from_millis(100));
                }
                panic!("client {k} never connected");
            })
        })
        .collect();
    for c in clients {
        c.join().unwrap();
    }
    assert!(server.wait_with_output().unwrap().status.success());
    let remote = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(local, remote);
}

#[test]
fn non_positive_alpha_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", 1, "alpha = 0\n");
    let o = splitfed(&[
        "run",
        "--config",
        &cfg,
        "--out-dir",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alpha"), "{}", stderr(&o));
    assert!(!dir.path().join("o/metrics.csv").exists());
}

#[test]
fn cost_point_matches_the_model() {
    let o = splitfed(&[
        "cost",
        "--clients",
        "10",
        "--model-bytes",
        "100",
        "--beta",
        "0.1",
        "--smashed-bytes",
        "16",
        "--dataset-size",
        "1000",
        "--rate",
        "1000",
        "--epoch-time",
        "2",
        "--fedavg-time",
        "0.5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "n_clients,protocol,comms_per_client,total_comms,training_time"
    );
    let cm = CostModel {
        n_clients: 10,
        model_bytes: 100.0,
        beta: 0.1,
        smashed_bytes: 16.0,
        dataset_size: 1000.0,
        rate: 1000.0,
        epoch_time: 2.0,
        fedavg_time: 0.5,
    };
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        let p: Protocol = f[1].parse().unwrap();
        let want = predict_cost(&cm, p).unwrap();
        assert_eq!(f[3].parse::<f64>().unwrap(), want.total_comms, "{row}");
        assert_eq!(f[4].parse::<f64>().unwrap(), want.training_time, "{row}");
    }
    assert!(text.contains("10,sfpl,3220,32200,"));
}

#[test]
fn cost_sweep_tabulates_each_count() {
    let o = splitfed(&[
        "cost",
        "--clients",
        "1",
        "--model-bytes",
        "1e6",
        "--beta",
        "0.01",
        "--smashed-bytes",
        "512",
        "--dataset-size",
        "50000",
        "--rate",
        "1e6",
        "--epoch-time",
        "10",
        "--fedavg-time",
        "0.1",
        "--sweep",
        "1..100",
        "--protocols",
        "fl,sfpl",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 201);
}

#[test]
fn cost_without_a_parameter_is_a_usage_error() {
    let o = splitfed(&["cost", "--clients", "10", "--model-bytes", "100"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--beta"), "{}", stderr(&o));
}

#[test]
fn compare_orders_columns_and_zeroes_identical_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let sfpl = write_config(dir.path(), "a.cfg", 2, "");
    let sflv2 = write_config(dir.path(), "b.cfg", 2, "protocol = sflv2\n");
    run_to(dir.path(), &sfpl, "a", &[]);
    run_to(dir.path(), &sflv2, "b", &[]);
    let a = dir.path().join("a/report.json");
    let b = dir.path().join("b/report.json");
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());

    let o = splitfed(&["compare", a, a]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let delta = table
        .lines()
        .find(|l| l.starts_with("accuracy_delta"))
        .unwrap();
    assert!(
        delta.split_whitespace().skip(1).all(|v| v == "0.0000"),
        "{delta}"
    );

    let curves = dir.path().join("curves.csv");
    let o = splitfed(&["compare", a, b, a, "--csv", curves.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .eq(["run1", "run2", "run3"]));
    let protocols = table.lines().find(|l| l.starts_with("protocol")).unwrap();
    assert!(protocols
        .split_whitespace()
        .eq(["protocol", "sfpl", "sflv2", "sfpl"]));
    let delta = table
        .lines()
        .find(|l| l.starts_with("accuracy_delta"))
        .unwrap();
    assert_eq!(delta.split_whitespace().count(), 4);
    let curves = std::fs::read_to_string(curves).unwrap();
    assert_eq!(curves.lines().count(), 3);
}

#[test]
fn compare_needs_two_reports() {
    let o = splitfed(&["compare", "one.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn partition_lists_every_sample() {
    let o = splitfed(&["partition"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let sizes: Vec<u64> = v["train_shard_sizes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_u64().unwrap())
        .collect();
    assert_eq!(sizes, vec![200; 10]);
}

#[test]
fn default_config_parses() {
    let o = splitfed(&["default-config"]);
    assert!(o.status.success());
    splitfed::RunConfig::parse(&stdout(&o)).unwrap();
}
