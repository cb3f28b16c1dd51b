mod admin;
mod bench;

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use prioport_core::netemu::config::TopologyConfig;
use prioport_core::netemu::trace::write_trace_csv;
use prioport_core::{AdminClient, CarrierId, NameClient, NameServer, Port, PortConfig, PortName};

#[derive(Debug, Parser)]
#[command(
    name = "prioport",
    version,
    about = "Prioritized publish/subscribe ports"
)]
struct Cli {
    /// Name server address.
    #[arg(
        long,
        global = true,
        env = "PRIOPORT_NAMESERVER",
        default_value = "127.0.0.1:10000"
    )]
    nameserver: SocketAddr,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the name server.
    Nameserver {
        /// Address to listen on; defaults to the --nameserver address.
        #[arg(long)]
        listen: Option<SocketAddr>,
    },
    /// Open a named port and keep it alive, draining what it receives.
    Port(PortArgs),
    /// Connect SRC to DST through SRC's admin interface.
    Connect {
        src: PortName,
        dst: PortName,
        #[arg(long, default_value = "tcp")]
        carrier: CarrierId,
    },
    /// Remove the connection from SRC to DST.
    Disconnect { src: PortName, dst: PortName },
    /// Administrative session with a port.
    Admin(admin::AdminArgs),
    /// Round-trip latency benchmark; prints CSV on stdout.
    Bench(bench::BenchArgs),
    /// Run a topology file in the network emulator.
    Emu {
        topology: PathBuf,
        /// Write a per-packet trace CSV here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct PortArgs {
    name: PortName,
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: SocketAddr,
    /// Print each received message as a line.
    #[arg(long)]
    print: bool,
    /// Exit after this many seconds instead of running until killed.
    #[arg(long)]
    duration: Option<f64>,
}

fn admin_client_name() -> PortName {
    PortName::new(format!("/prioport-cli/{}", std::process::id())).expect("valid port name")
}

fn run_port(nameserver: SocketAddr, args: PortArgs) -> Result<()> {
    let port = Port::open(
        args.name.clone(),
        PortConfig::default()
            .with_nameserver(nameserver)
            .with_listen(args.listen),
    )?;
    let ep = port.endpoint();
    println!("{} ready at {}", args.name, ep.socket_addr());
    std::io::stdout().flush()?;
    let deadline = args
        .duration
        .map(|s| std::time::Instant::now() + Duration::from_secs_f64(s));
    let mut out = std::io::stdout().lock();
    loop {
        if deadline.is_some_and(|d| std::time::Instant::now() >= d) {
            break;
        }
        if let Some(m) = port.read(true, Some(Duration::from_millis(100)))? {
            if args.print {
                writeln!(
                    out,
                    "{} {}",
                    m.peer,
                    String::from_utf8_lossy(&m.message.payload)
                )?;
                out.flush()?;
            }
        }
    }
    port.close();
    Ok(())
}

fn run_connect(
    nameserver: SocketAddr,
    src: &PortName,
    dst: &PortName,
    carrier: CarrierId,
) -> Result<()> {
    let names = NameClient::new(nameserver);
    let src_ep = names.lookup(src).map_err(|e| anyhow!("{src}: {e}"))?;
    let dst_ep = names.lookup(dst).map_err(|e| anyhow!("{dst}: {e}"))?;
    let mut admin = AdminClient::connect(src_ep.socket_addr(), &admin_client_name())?;
    let reply = admin.request(&format!("connect {dst} {carrier}"))?;
    if !prioport_core::qos::admin::reply_is_ok(&reply) {
        return Err(anyhow!("{reply}"));
    }
    println!(
        "{src} {} -> {dst} {} ({carrier})",
        src_ep.socket_addr(),
        dst_ep.socket_addr()
    );
    Ok(())
}

fn run_disconnect(nameserver: SocketAddr, src: &PortName, dst: &PortName) -> Result<()> {
    let mut admin =
        AdminClient::connect_by_name(&NameClient::new(nameserver), src, &admin_client_name())?;
    let reply = admin.request(&format!("disconnect {dst}"))?;
    if !prioport_core::qos::admin::reply_is_ok(&reply) {
        return Err(anyhow!("{reply}"));
    }
    println!("{reply}");
    Ok(())
}

fn run_emu(topology: &PathBuf, trace: Option<&PathBuf>) -> Result<()> {
    let text = std::fs::read_to_string(topology)
        .with_context(|| format!("reading {}", topology.display()))?;
    let cfg = TopologyConfig::parse(&text)?;
    let (topo, flows) = cfg.run(trace.is_some())?;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.write_record([
        "flow",
        "sent",
        "delivered",
        "lost",
        "mean_latency_ns",
        "max_latency_ns",
    ])?;
    for f in &flows {
        w.write_record([
            f.name.clone(),
            f.sent.to_string(),
            f.delivered.to_string(),
            f.lost.to_string(),
            format!("{:.1}", f.mean_latency_ns),
            f.max_latency_ns.to_string(),
        ])?;
    }
    w.flush()?;
    if let Some(path) = trace {
        let file =
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_trace_csv(&topo, topo.trace(), file)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Nameserver { listen } => {
            let ns = NameServer::start(listen.unwrap_or(cli.nameserver))?;
            println!("name server listening on {}", ns.local_addr());
            std::io::stdout().flush()?;
            ns.wait();
        }
        Command::Port(args) => run_port(cli.nameserver, args)?,
        Command::Connect { src, dst, carrier } => run_connect(cli.nameserver, &src, &dst, carrier)?,
        Command::Disconnect { src, dst } => run_disconnect(cli.nameserver, &src, &dst)?,
        Command::Admin(args) => return admin::run(cli.nameserver, args),
        Command::Bench(args) => bench::run(args)?,
        Command::Emu { topology, trace } => run_emu(&topology, trace.as_ref())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("prioport: {e:#}");
            ExitCode::FAILURE
        }
    }
}
