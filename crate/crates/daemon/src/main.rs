use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use ejfat_core::sim::{run_scenario_to_dir, ScenarioConfig};
use ejfat_daemon::config::parse_level;
use ejfat_daemon::emulator::{CnSink, DaqEmulator};
use ejfat_daemon::{Daemon, DaemonConfig};

#[derive(Parser)]
#[command(name = "ejfat", version, about = "Event-aware UDP load balancer")]
struct Cli {
    /// trace, debug, info, warn or error. Overrides the config file.
    #[arg(long, global = true, env = "EJFAT_LOG_LEVEL")]
    log_level: Option<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the balancer daemon.
    Serve(ServeArgs),
    /// Offline scenario simulation.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Send synthetic bundles to a balancer.
    Daq(DaqArgs),
    /// Receive and reassemble bundles on a block of ports.
    Sink(SinkArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "EJFAT_CONFIG")]
    config: Option<PathBuf>,
    /// IP, IP:PORT or IP:PORT@INSTANCE. Repeat or comma-separate.
    #[arg(long, env = "EJFAT_LISTEN", value_delimiter = ',')]
    listen: Vec<String>,
    #[arg(long, env = "EJFAT_CONTROL_LISTEN")]
    control_listen: Option<SocketAddr>,
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Run a scenario and write report.json, traces and the timeline.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run the built-in three-epoch reference scenario.
        #[arg(long, conflicts_with = "config")]
        reference: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DaqArgs {
    /// Balancer address.
    #[arg(long)]
    lb: SocketAddr,
    #[arg(long, default_value = "0.0.0.0:0")]
    bind: SocketAddr,
    #[arg(long, default_value_t = 0)]
    source_id: u16,
    #[arg(long, default_value_t = 0)]
    first_event: u64,
    #[arg(long, default_value_t = 100)]
    events: u64,
    #[arg(long, default_value_t = 65536)]
    bundle_size: usize,
    #[arg(long, default_value_t = 8984)]
    mtu_payload: usize,
    /// Pause in microseconds after every 8 datagrams.
    #[arg(long, default_value_t = 200)]
    pace_us: u64,
}

#[derive(Args)]
struct SinkArgs {
    #[arg(long)]
    ip: IpAddr,
    #[arg(long)]
    base_port: u16,
    #[arg(long, default_value_t = 0)]
    entropy_bits: u8,
    /// Exit after this many bundles.
    #[arg(long)]
    count: Option<usize>,
}

fn init_logging(level: &str) -> Result<(), String> {
    let level = parse_level(level).ok_or_else(|| format!("unknown log level {level}"))?;
    tracing_subscriber::fmt().with_max_level(level).with_target(false).init();
    Ok(())
}

fn serve(args: ServeArgs, log_level: Option<String>) -> Result<(), String> {
    let mut cfg = match &args.config {
        Some(p) => DaemonConfig::load(p).map_err(|e| e.to_string())?,
        None => DaemonConfig::default(),
    };
    if !args.listen.is_empty() {
        cfg.apply_listen(&args.listen).map_err(|e| e.to_string())?;
    }
    if let Some(c) = args.control_listen {
        cfg.control_listen = c;
    }
    init_logging(log_level.as_deref().unwrap_or(&cfg.log_level))?;
    let daemon = Daemon::start(cfg).map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    rt.block_on(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    tracing::info!("shutting down");
    daemon.shutdown();
    Ok(())
}

fn scenario(cmd: ScenarioCmd) -> Result<(), String> {
    let ScenarioCmd::Run {
        config,
        reference,
        seed,
        out,
    } = cmd;
    let mut cfg = match (config, reference) {
        (Some(p), _) => ScenarioConfig::load(&p).map_err(|e| e.to_string())?,
        (None, true) => ScenarioConfig::three_epoch_reference(seed.unwrap_or(1)),
        (None, false) => return Err("either --config or --reference is required".into()),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = run_scenario_to_dir(&cfg, &out).map_err(|e| e.to_string())?;
    println!(
        "{}: packets in {} out {} discarded {} split events {} misdirected {} bundles {}/{} hitless {}",
        report.name,
        report.counters.packets_in,
        report.counters.packets_out,
        report.counters.total_discards(),
        report.split_events,
        report.misdirected_packets,
        report.bundles_completed,
        report.bundles,
        report.hitless()
    );
    if report.hitless() && report.split_events == 0 && report.misdirected_packets == 0 {
        Ok(())
    } else {
        Err("scenario was not hit-less".into())
    }
}

fn daq(a: DaqArgs) -> Result<(), String> {
    let d = DaqEmulator::bind(a.bind, a.lb, a.source_id)
        .map_err(|e| e.to_string())?
        .with_mtu(a.mtu_payload)
        .with_pacing(8, Duration::from_micros(a.pace_us));
    let mut sent = 0;
    for ev in a.first_event..a.first_event + a.events {
        let bundle: Vec<u8> = (0..a.bundle_size).map(|i| (ev as usize + i) as u8).collect();
        sent += d.send_bundle(ev, ev as u16, &bundle).map_err(|e| e.to_string())?;
    }
    println!("sent {} events in {sent} datagrams", a.events);
    Ok(())
}

fn sink(a: SinkArgs) -> Result<(), String> {
    let s = CnSink::start(a.ip, a.base_port, a.entropy_bits).map_err(|e| e.to_string())?;
    let mut printed = 0;
    loop {
        let bundles = s.bundles();
        for b in &bundles[printed..] {
            println!(
                "event {} source {} port {} bytes {}",
                b.event_number,
                b.source_id,
                b.port,
                b.data.len()
            );
        }
        printed = bundles.len();
        if a.count.is_some_and(|c| printed >= c) {
            return Ok(());
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Serve(args) => serve(args, cli.log_level),
        other => {
            if let Err(e) = init_logging(cli.log_level.as_deref().unwrap_or("warn")) {
                eprintln!("{e}");
                return ExitCode::from(2);
            }
            match other {
                Command::Scenario(c) => scenario(c),
                Command::Daq(a) => daq(a),
                Command::Sink(a) => sink(a),
                Command::Serve(_) => unreachable!(),
            }
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
