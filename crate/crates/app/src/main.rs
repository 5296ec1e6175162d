use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use routecoach::config::AppConfig;
use routecoach::service::{
    CreateRouteRequest, EditsRequest, ErwFinishRequest, ErwStartRequest, NegotiationStartRequest, Service,
    SimulateRequest, StepRequest,
};
use routecoach::store::Store;
use routecoach_core::design::RouteEdit;
use routecoach_core::engine::Supervision;
use routecoach_core::geo::read_trace_csv;
use routecoach_core::ids::{ErwId, PoiId, RouteId, SessionId, WayId};
use routecoach_core::indicators::indicator_report;
use routecoach_core::payload::Modality;
use routecoach_core::route::Way;
use routecoach_core::sim::{synth_route, SynthOptions, WalkerProfile};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "routecoach", version, about = "Landmark-based route training service and tools")]
struct Cli {
    /// Data directory of the file store.
    #[arg(long, global = true, default_value = "routecoach-data")]
    store: PathBuf,
    /// JSON config with thresholds and policy constants.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ways (origin to destination connections).
    #[command(subcommand)]
    Way(WayCmd),
    /// Exploratory route walks.
    #[command(subcommand)]
    Erw(ErwCmd),
    /// Route definitions.
    #[command(subcommand)]
    Route(RouteCmd),
    /// Negotiation with the trainee.
    #[command(subcommand)]
    Negotiate(NegotiateCmd),
    /// Training.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Progress indicators.
    #[command(subcommand)]
    Indicators(IndicatorsCmd),
    /// Run the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(Subcommand)]
enum WayCmd {
    /// Store a way from a JSON file.
    Add { file: PathBuf },
}

#[derive(Subcommand)]
enum ErwCmd {
    /// Record a walk from a trace CSV (`ts_ms,lat_deg,lon_deg,accuracy_m`).
    Ingest {
        trace: PathBuf,
        #[arg(long)]
        way: WayId,
    },
}

#[derive(Subcommand)]
enum RouteCmd {
    /// Create a draft route from a finished walk.
    Draft {
        erw: ErwId,
        #[arg(long)]
        id: Option<RouteId>,
    },
    /// Apply a JSON array of edits to the latest version.
    Curate {
        id: RouteId,
        #[arg(long)]
        edits: PathBuf,
    },
    /// Store a generated working route.
    Synth {
        #[arg(long)]
        seed: u64,
    },
    /// Print the latest version.
    Show { id: RouteId },
}

#[derive(Subcommand)]
enum NegotiateCmd {
    /// Play a transcript (one JSON line per step) and finalize.
    Run {
        route: RouteId,
        #[arg(long)]
        script: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    route: RouteId,
    /// Walker profile JSON; a clean walker when omitted.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SupervisionArg::AppOnly)]
    supervision: SupervisionArg,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SupervisionArg {
    InPerson,
    Remote,
    AppOnly,
}

impl From<SupervisionArg> for Supervision {
    fn from(s: SupervisionArg) -> Self {
        match s {
            SupervisionArg::InPerson => Supervision::InPerson,
            SupervisionArg::Remote => Supervision::Remote,
            SupervisionArg::AppOnly => Supervision::AppOnly,
        }
    }
}

#[derive(Subcommand)]
enum IndicatorsCmd {
    Report { session: SessionId },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn erw_ingest(svc: &Service, trace: &Path, way: &WayId) -> anyhow::Result<()> {
    let fixes = read_trace_csv(fs::File::open(trace).with_context(|| format!("opening {}", trace.display()))?)?;
    let Some(first) = fixes.first() else {
        bail!("{} holds no fixes", trace.display());
    };
    let erw = svc.erw_start(way, ErwStartRequest { ts_ms: first.ts_ms })?;
    for fix in &fixes {
        svc.erw_fix(erw.id().as_str(), *fix)?;
    }
    let done = svc.erw_finish(erw.id().as_str(), ErwFinishRequest::default())?;
    eprintln!(
        "walk {}: {} fixes, reconstructed path {} vertices, {:.0} m",
        done.erw.id(),
        done.erw.fixes().len(),
        done.path.vertices().len(),
        done.path.length()
    );
    println!("{}", done.erw.id());
    Ok(())
}

/// One step of a negotiation script. Transcript lines written by the
/// service parse as script lines too.
#[derive(serde::Deserialize)]
struct ScriptLine {
    #[serde(default)]
    ts_ms: i64,
    #[serde(default)]
    poi_id: Option<PoiId>,
    action: String,
    #[serde(default)]
    detail: Option<String>,
}

fn negotiate_run(svc: &Service, route: &RouteId, script: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(script).with_context(|| format!("reading {}", script.display()))?;
    svc.negotiation_start(route, NegotiationStartRequest::default())?;
    for (n, raw) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line: ScriptLine =
            serde_json::from_str(raw).with_context(|| format!("script line {}", n + 1))?;
        let step = if line.action == "edit" {
            let edit: RouteEdit = serde_json::from_str(line.detail.as_deref().unwrap_or(""))
                .with_context(|| format!("script line {}: edit detail", n + 1))?;
            StepRequest {
                ts_ms: line.ts_ms,
                edit: Some(edit),
                ..StepRequest::default()
            }
        } else {
            StepRequest {
                ts_ms: line.ts_ms,
                action: Some(line.action),
                detail: line.detail,
                poi_id: line.poi_id,
                edit: None,
            }
        };
        svc.negotiation_step(route, step)
            .with_context(|| format!("script line {}", n + 1))?;
    }
    print(&svc.negotiation_finalize(route)?)
}

fn simulate(svc: &Service, args: SimulateArgs) -> anyhow::Result<()> {
    let profile = match &args.profile {
        Some(p) => read_json(p)?,
        None => WalkerProfile::clean(),
    };
    let req = SimulateRequest {
        profile,
        seed: args.seed,
        supervision: args.supervision.into(),
        modalities: [Modality::Text, Modality::Symbol].into_iter().collect(),
    };
    let record = svc.simulate(&args.route, req)?;
    eprintln!("session {}: {} events", record.session_id(), record.events().len());
    print(&indicator_report(&record)?)
}

async fn serve(svc: Service, host: &str, port: u16) -> anyhow::Result<()> {
    let addr: SocketAddr = format!("{host}:{port}").parse().context("listen address")?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, routecoach::api::router(Arc::new(svc)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = AppConfig::load_or_default(cli.config.as_deref())?;
    let store = Store::open(&cli.store).with_context(|| format!("opening store {}", cli.store.display()))?;
    let svc = Service::open(store, config)?;

    match cli.command {
        Command::Way(WayCmd::Add { file }) => {
            let way: Way = read_json(&file)?;
            print(&svc.create_way(way)?)?;
        }
        Command::Erw(ErwCmd::Ingest { trace, way }) => erw_ingest(&svc, &trace, &way)?,
        Command::Route(RouteCmd::Draft { erw, id }) => {
            print(&svc.create_route(CreateRouteRequest { erw_id: erw, route_id: id })?)?;
        }
        Command::Route(RouteCmd::Curate { id, edits }) => {
            let edits: Vec<RouteEdit> = read_json(&edits)?;
            let base = svc.route(&id, None)?.version();
            let route = svc.route_edits(&id, EditsRequest { base_version: base, edits })?;
            eprintln!("route {id}: version {base} -> {}", route.version());
            print(&route)?;
        }
        Command::Route(RouteCmd::Synth { seed }) => {
            let route = synth_route(seed, &SynthOptions::default())?;
            svc.import_route(&route)?;
            println!("{}", route.id());
        }
        Command::Route(RouteCmd::Show { id }) => print(&svc.route(&id, None)?)?,
        Command::Negotiate(NegotiateCmd::Run { route, script }) => negotiate_run(&svc, &route, &script)?,
        Command::Train(TrainCmd::Simulate(args)) => simulate(&svc, args)?,
        Command::Indicators(IndicatorsCmd::Report { session }) => print(&svc.indicators(&session)?)?,
        Command::Serve { port, host } => serve(svc, &host, port).await?,
    }
    Ok(())
}
