use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mapshare::expansion::NoopOptimizer;
use mapshare::map_store::{snapshot, GlobalMap};
use mapshare::runtime::{serve, Mode, Server};
use mapshare::sim::{freshness_traffic_report, run_remote, run_scenario, upload_reduction, Metrics, ScenarioConfig};

#[derive(Parser)]
#[command(name = "mapshare", version, about = "Overlap-aware collaborative map server, device client and simulator")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Settings that take precedence over the scenario file.
#[derive(Args, Clone, Copy)]
struct Overrides {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Oversharing factor for every user.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Shared link cap in bytes per second.
    #[arg(long, global = true, value_name = "BYTES_PER_SEC")]
    bandwidth_cap: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mapxx,
    Vanilla,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mapxx => Mode::Mapxx,
            ModeArg::Vanilla => Mode::Vanilla,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario in-process and write its metrics and traces.
    Simulate {
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Output directory (default: `out/<scenario name>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accept device sessions over TCP.
    Serve {
        addr: String,
        /// Start from a saved map instead of an empty one.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Write the map here when the server stops.
        #[arg(long)]
        save_snapshot: Option<PathBuf>,
        /// Stop after this many sessions.
        #[arg(long)]
        exit_after: Option<usize>,
        /// Print the bound address on stdout (useful with port 0).
        #[arg(long)]
        print_addr: bool,
    },
    /// Walk the users of a scenario file against a running server.
    Client {
        addr: String,
        trajectory: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Only run this user.
        #[arg(long)]
        user: Option<u32>,
        /// Directory for per-user trace files and metrics.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize metrics files; paired mapxx/vanilla runs also get the reduction.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, mode, out } => simulate(&config, mode, out, cli.overrides),
        Command::Serve { addr, snapshot, save_snapshot, exit_after, print_addr } => {
            serve_cmd(&addr, snapshot.as_deref(), save_snapshot.as_deref(), exit_after, print_addr, cli.overrides)
        }
        Command::Client { addr, trajectory, mode, user, out } => client(&addr, &trajectory, mode, user, out, cli.overrides),
        Command::Report { metrics } => report(&metrics),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path, mode: Option<ModeArg>, o: Overrides) -> Result<ScenarioConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
    let mut cfg = ScenarioConfig::from_toml(&text)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(a) = o.alpha {
        cfg.protocol.alpha = a;
        for u in &mut cfg.users {
            u.alpha = None;
        }
    }
    if let Some(c) = o.bandwidth_cap {
        cfg.bandwidth_cap = Some(c);
    }
    if let Some(m) = mode {
        cfg.mode = m.into();
        for u in &mut cfg.users {
            u.mode = None;
        }
    }
    if cfg.name.is_empty() {
        cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_traces(dir: &Path, reports: &[mapshare::runtime::ClientReport]) -> Result<(), Failure> {
    for r in reports {
        fs::write(dir.join(format!("trace-{}.jsonl", r.client_id.0)), r.trace_jsonl())?;
    }
    Ok(())
}

fn simulate(config: &Path, mode: Option<ModeArg>, out: Option<PathBuf>, o: Overrides) -> Result<(), Failure> {
    let cfg = load_config(config, mode, o)?;
    let outcome = run_scenario(&cfg)?;
    let dir = out.unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("metrics.tsv"), outcome.metrics.to_tsv())?;
    let mut lat = String::from("message\tcount\tp50_us\tp95_us\tp99_us\tmax_us\n");
    for (t, s) in &outcome.latency {
        lat.push_str(&format!("{t:?}\t{}\t{}\t{}\t{}\t{}\n", s.count, s.p50_us, s.p95_us, s.p99_us, s.max_us));
    }
    fs::write(dir.join("latency.tsv"), lat)?;
    let summary = outcome.metrics.summary();
    fs::write(dir.join("summary.txt"), &summary)?;
    write_traces(&dir, &outcome.reports)?;
    print!("{summary}");
    println!("wrote {}", dir.display());
    if let Some(r) = outcome.reports.iter().find(|r| r.aborted.is_some()) {
        return Err(Failure::Run(format!("user {} aborted: {}", r.client_id.0, r.aborted.as_deref().unwrap_or(""))));
    }
    Ok(())
}

fn resolve(addr: &str) -> Result<SocketAddr, Failure> {
    addr.to_socket_addrs()
        .map_err(|e| Failure::Usage(format!("bad address {addr:?}: {e}")))?
        .next()
        .ok_or_else(|| Failure::Usage(format!("address {addr:?} resolves to nothing")))
}

fn serve_cmd(
    addr: &str,
    snap: Option<&Path>,
    save_to: Option<&Path>,
    exit_after: Option<usize>,
    print_addr: bool,
    o: Overrides,
) -> Result<(), Failure> {
    let mut config = ScenarioConfig::from_toml(DEFAULT_SERVER_SCENARIO)?.server_config();
    if let Some(a) = o.alpha {
        config.alpha = a;
    }
    let map = match snap {
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| Failure::Run(format!("{}: {e}", p.display())))?;
            snapshot::load(&mut BufReader::new(f))?
        }
        None => GlobalMap::new(config.map),
    };
    let server = Server::with_map(config, map, Box::new(NoopOptimizer));
    let listener = TcpListener::bind(resolve(addr)?)?;
    let bound = listener.local_addr()?;
    if print_addr {
        println!("{bound}");
        std::io::stdout().flush()?;
    }
    eprintln!("serving on {bound}");
    serve(Arc::clone(&server), listener, exit_after)?;
    if let Some(p) = save_to {
        let mut w = BufWriter::new(fs::File::create(p)?);
        server.with_map_read(|m| snapshot::save(m, &mut w))?;
        w.flush()?;
    }
    let (frames, points, violations) =
        server.with_map_read(|m| (m.frame_count(), m.point_count(), m.audit().violations.len()));
    eprintln!("served: {frames} frames, {points} points, {violations} audit violations");
    Ok(())
}

/// Protocol constants for a standalone server; the scene and users are unused.
const DEFAULT_SERVER_SCENARIO: &str = r#"
seed = 0
[scene]
bounds = { min = [0.0, 0.0, 0.0], max = [1.0, 1.0, 1.0] }
landmarks = 1
[[users]]
id = 1
camera = "future-city"
path = { kind = "line", from = [0.0, 0.0, 0.0], to = [1.0, 0.0, 0.0] }
"#;

fn client(addr: &str, trajectory: &Path, mode: Option<ModeArg>, user: Option<u32>, out: Option<PathBuf>, o: Overrides) -> Result<(), Failure> {
    let mut cfg = load_config(trajectory, mode, o)?;
    if let Some(id) = user {
        if !cfg.users.iter().any(|u| u.id == id) {
            return Err(Failure::Usage(format!("no user {id} in {}", trajectory.display())));
        }
        cfg.users.retain(|u| u.id == id);
    }
    let (reports, users) = run_remote(&cfg, resolve(addr)?)?;
    for u in &users {
        println!(
            "user {}: {} keyframes, {} B up, {} B down, freshness {:.3}, {} map requests",
            u.client_id, u.keyframes, u.upload_total, u.download_total, u.freshness_ratio, u.map_requests
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        write_traces(&dir, &reports)?;
    }
    if let Some(r) = reports.iter().find(|r| r.aborted.is_some()) {
        return Err(Failure::Run(format!("user {} aborted: {}", r.client_id.0, r.aborted.as_deref().unwrap_or(""))));
    }
    Ok(())
}

fn report(paths: &[PathBuf]) -> Result<(), Failure> {
    let mut runs = Vec::with_capacity(paths.len());
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| Failure::Run(format!("{}: {e}", p.display())))?;
        runs.push(Metrics::from_tsv(&text).map_err(|e| Failure::Run(format!("{}: {e}", p.display())))?);
    }
    for m in &runs {
        println!("== {} ({:?})", m.name, m.mode);
        let fr = freshness_traffic_report(m);
        print!("{fr}");
        println!("total upload {} B, download {} B", m.total_upload(), m.total_download());
        println!();
    }
    // Pair every overlap-aware run with a vanilla run of the same scenario.
    for m in runs.iter().filter(|m| m.mode == Mode::Mapxx) {
        if let Some(v) = runs.iter().find(|v| v.mode == Mode::Vanilla && v.name == m.name) {
            println!("{}: upload reduction {:.1}% vs vanilla", m.name, 100.0 * upload_reduction(m, v));
        }
    }
    Ok(())
}
