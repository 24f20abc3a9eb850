use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use splitfed::protocol::REPORT_VERSION;
use splitfed::transport::{cost_csv, cost_sweep, predict_cost, CostModel};
use splitfed::{prepare, run, Execution, Protocol, RunConfig, RunReport, DEFAULT_CONFIG};

#[derive(Parser)]
#[command(
    name = "splitfed",
    version,
    about = "Split and federated learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Transport {
    Inproc,
    Socket,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration; the bundled default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configured experiment.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// 1 runs every client on the main thread; more gives each client a thread.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Transport::Inproc)]
        transport: Transport,
        /// With socket transport: wait for remote clients on this address.
        #[arg(long, conflicts_with = "connect")]
        listen: Option<String>,
        /// Serve as one client of a server listening on this address.
        #[arg(long)]
        connect: Option<String>,
        /// Client id to ask for when connecting.
        #[arg(long, requires = "connect")]
        client_id: Option<u32>,
    },
    /// Per-round cost table from the analytical model.
    Cost(CostArgs),
    /// Side-by-side summary of run reports.
    Compare {
        /// At least two report.json files.
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Also write per-epoch accuracy and divergence curves.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the training and test partition of a configuration as JSON.
    Partition {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the bundled default configuration.
    DefaultConfig,
}

#[derive(Args)]
struct CostArgs {
    /// Take model, data and rate parameters from a run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    clients: Option<usize>,
    /// Full-model size in bytes.
    #[arg(long, required_unless_present = "config")]
    model_bytes: Option<f64>,
    /// Client share of the model.
    #[arg(long, required_unless_present = "config")]
    beta: Option<f64>,
    /// Smashed bytes per sample.
    #[arg(long, required_unless_present = "config")]
    smashed_bytes: Option<f64>,
    /// Training samples over all clients.
    #[arg(long, required_unless_present = "config")]
    dataset_size: Option<f64>,
    /// Bytes per second.
    #[arg(long, required_unless_present = "config")]
    rate: Option<f64>,
    /// Seconds per epoch of full-model compute.
    #[arg(long, required_unless_present = "config")]
    epoch_time: Option<f64>,
    /// Seconds per full-model aggregation.
    #[arg(long, required_unless_present = "config")]
    fedavg_time: Option<f64>,
    /// Client counts to tabulate, `a..b` inclusive or a comma list.
    #[arg(long)]
    sweep: Option<String>,
    /// Only these protocols.
    #[arg(long, value_delimiter = ',')]
    protocols: Vec<Protocol>,
}

type Res<T> = Result<T, String>;

fn load_config(a: &ConfigArgs) -> Res<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            RunConfig::parse(&text).map_err(|e| format!("{}:\n{e}", p.display()))?
        }
        None => RunConfig::parse(DEFAULT_CONFIG).map_err(|e| e.to_string())?,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Res<()> {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    cfg: &ConfigArgs,
    threads: usize,
    out_dir: Option<PathBuf>,
    transport: Transport,
    listen: Option<String>,
    connect: Option<String>,
    client_id: Option<u32>,
) -> Res<()> {
    let mut config = load_config(cfg)?;
    if let Some(addr) = connect {
        let id =
            splitfed::experiment::run_remote_client(&config, &addr, client_id.unwrap_or(u32::MAX))
                .map_err(|e| e.to_string())?;
        eprintln!("client {id} finished");
        return Ok(());
    }
    if threads == 0 {
        return Err("--threads must be at least 1".into());
    }
    if let Some(d) = out_dir {
        config.out_dir = d;
    }
    let exec = match (transport, listen) {
        (Transport::Socket, Some(addr)) => Execution::Listen(addr),
        (Transport::Socket, None) => Execution::Socket,
        (Transport::Inproc, Some(_)) => return Err("--listen needs --transport socket".into()),
        (Transport::Inproc, None) if threads > 1 => Execution::Threaded,
        (Transport::Inproc, None) => Execution::Local,
    };
    let outcome = run(&config, &exec).map_err(|e| e.to_string())?;
    let dir = &config.out_dir;
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let json = outcome.report.to_json().map_err(|e| e.to_string())?;
    write(&dir.join("report.json"), &json)?;
    write(&dir.join("metrics.csv"), &outcome.report.to_csv())?;
    if !outcome.output.collector_log.is_empty() {
        let mut log = outcome.output.collector_log.join("\n");
        log.push('\n');
        write(&dir.join("collector.jsonl"), &log)?;
    }
    if let Some(m) = &outcome.report.final_metrics {
        println!(
            "{} {}: accuracy {:.4}, f1 {:.4}, loss {:.4}",
            outcome.report.protocol, outcome.report.scenario, m.accuracy, m.f1, m.loss
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn parse_sweep(s: &str) -> Res<Vec<usize>> {
    let bad = || format!("bad sweep `{s}`; use `a..b` or `a,b,c`");
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a == 0 || a > b {
            return Err(bad());
        }
        Ok((a..=b).collect())
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect()
    }
}

fn cmd_cost(a: &CostArgs) -> Res<String> {
    let base = match &a.config {
        Some(p) => {
            let cfg = load_config(&ConfigArgs {
                config: Some(p.clone()),
                seed: None,
            })?;
            Some(
                prepare(&cfg)
                    .and_then(|prep| prep.cost_model(&cfg))
                    .map_err(|e| e.to_string())?,
            )
        }
        None => None,
    };
    let pick = |v: Option<f64>, from: fn(&CostModel) -> f64| {
        v.or(base.as_ref().map(from)).expect("clap checks")
    };
    let model = CostModel {
        n_clients: a
            .clients
            .or(base.map(|b| b.n_clients))
            .expect("clap checks"),
        model_bytes: pick(a.model_bytes, |b| b.model_bytes),
        beta: pick(a.beta, |b| b.beta),
        smashed_bytes: pick(a.smashed_bytes, |b| b.smashed_bytes),
        dataset_size: pick(a.dataset_size, |b| b.dataset_size),
        rate: pick(a.rate, |b| b.rate),
        epoch_time: pick(a.epoch_time, |b| b.epoch_time),
        fedavg_time: pick(a.fedavg_time, |b| b.fedavg_time),
    };
    let protocols = if a.protocols.is_empty() {
        vec![Protocol::Fl, Protocol::Sflv2, Protocol::Sfpl]
    } else {
        a.protocols.clone()
    };
    let ns = match &a.sweep {
        Some(s) => parse_sweep(s)?,
        None => vec![model.n_clients],
    };
    for &p in &protocols {
        predict_cost(&model, p).map_err(|e| e.to_string())?;
    }
    let rows = cost_sweep(&model, &ns, &protocols).map_err(|e| e.to_string())?;
    Ok(cost_csv(&rows))
}

fn load_report(p: &Path) -> Res<RunReport> {
    let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    let r = RunReport::from_json(&text).map_err(|e| format!("{}: {e}", p.display()))?;
    if r.format_version != REPORT_VERSION {
        return Err(format!(
            "{}: report version {} is not supported (expected {REPORT_VERSION})",
            p.display(),
            r.format_version
        ));
    }
    Ok(r)
}

fn compare_table(reports: &[RunReport]) -> String {
    let fmt = |v: f64| format!("{v:.4}");
    let mut rows: Vec<(&str, Vec<String>)> = vec![
        (
            "protocol",
            reports.iter().map(|r| r.protocol.clone()).collect(),
        ),
        (
            "scenario",
            reports.iter().map(|r| r.scenario.clone()).collect(),
        ),
        (
            "bn_mode",
            reports.iter().map(|r| r.bn_mode.clone()).collect(),
        ),
        ("seed", reports.iter().map(|r| r.seed.to_string()).collect()),
        (
            "epochs",
            reports.iter().map(|r| r.epochs.len().to_string()).collect(),
        ),
    ];
    let metric = |f: fn(&splitfed::protocol::Metrics) -> f64| -> Vec<String> {
        reports
            .iter()
            .map(|r| r.final_metrics.as_ref().map_or("-".into(), |m| fmt(f(m))))
            .collect()
    };
    rows.push(("precision", metric(|m| m.precision)));
    rows.push(("recall", metric(|m| m.recall)));
    rows.push(("f1", metric(|m| m.f1)));
    rows.push(("accuracy", metric(|m| m.accuracy)));
    rows.push(("loss", metric(|m| m.loss)));
    let first_acc = reports[0].final_metrics.map(|m| m.accuracy);
    rows.push((
        "accuracy_delta",
        reports
            .iter()
            .map(|r| match (r.final_metrics, first_acc) {
                (Some(m), Some(a)) => fmt(m.accuracy - a),
                _ => "-".into(),
            })
            .collect(),
    ));
    rows.push((
        "divergence",
        reports
            .iter()
            .map(|r| r.epochs.last().map_or("-".into(), |e| fmt(e.divergence)))
            .collect(),
    ));
    rows.push((
        "last_visited_max",
        reports
            .iter()
            .map(|r| {
                r.forgetting
                    .as_ref()
                    .map_or("-".into(), |f| fmt(f.last_visited_max_fraction))
            })
            .collect(),
    ));
    rows.push((
        "bytes",
        reports
            .iter()
            .map(|r| {
                r.epochs
                    .iter()
                    .map(|e| e.bytes_up + e.bytes_down)
                    .sum::<u64>()
                    .to_string()
            })
            .collect(),
    ));

    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let headers: Vec<String> = (1..=reports.len()).map(|i| format!("run{i}")).collect();
    let col_w: Vec<usize> = (0..reports.len())
        .map(|i| {
            rows.iter()
                .map(|r| r.1[i].len())
                .max()
                .unwrap_or(0)
                .max(headers[i].len())
        })
        .collect();
    let mut s = String::new();
    let _ = write!(s, "{:label_w$}", "");
    for (h, w) in headers.iter().zip(&col_w) {
        let _ = write!(s, "  {h:>w$}");
    }
    s.push('\n');
    for (label, vals) in &rows {
        let _ = write!(s, "{label:label_w$}");
        for (v, w) in vals.iter().zip(&col_w) {
            let _ = write!(s, "  {v:>w$}");
        }
        s.push('\n');
    }
    s
}

fn compare_curves(reports: &[RunReport]) -> String {
    let mut s = String::from("epoch");
    for i in 1..=reports.len() {
        let _ = write!(s, ",run{i}_accuracy,run{i}_divergence");
    }
    s.push('\n');
    let epochs = reports.iter().map(|r| r.epochs.len()).max().unwrap_or(0);
    for e in 0..epochs {
        let _ = write!(s, "{e}");
        for r in reports {
            match r.epochs.get(e) {
                Some(rec) => {
                    let _ = write!(s, ",{},{}", rec.metrics.accuracy, rec.divergence);
                }
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s
}

fn cmd_compare(paths: &[PathBuf], csv: Option<&Path>) -> Res<String> {
    let reports = paths
        .iter()
        .map(|p| load_report(p))
        .collect::<Res<Vec<_>>>()?;
    if let Some(c) = csv {
        write(c, &compare_curves(&reports))?;
    }
    Ok(compare_table(&reports))
}

fn cmd_partition(cfg: &ConfigArgs) -> Res<String> {
    let config = load_config(cfg)?;
    let prep = prepare(&config).map_err(|e| e.to_string())?;
    let value = serde_json::json!({
        "train": prep.plan,
        "test": prep.test_plan,
        "train_shard_sizes": prep.plan.shard_sizes(),
        "test_shard_sizes": prep.test_plan.shard_sizes(),
    });
    serde_json::to_string_pretty(&value).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            cfg,
            threads,
            out_dir,
            transport,
            listen,
            connect,
            client_id,
        } => cmd_run(
            &cfg, threads, out_dir, transport, listen, connect, client_id,
        ),
        Command::Cost(a) => cmd_cost(&a).map(|s| print!("{s}")),
        Command::Compare { reports, csv } => {
            cmd_compare(&reports, csv.as_deref()).map(|s| print!("{s}"))
        }
        Command::Partition { cfg } => cmd_partition(&cfg).map(|s| println!("{s}")),
        Command::DefaultConfig => {
            print!("{DEFAULT_CONFIG}");
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
