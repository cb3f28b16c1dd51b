use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use prioport_core::bench::{
    run_scenario_emulated, run_scenario_emulated_in, run_scenario_live, BenchReport, BenchRow,
    LiveOptions, Scenario, ScenarioConfig, DEFAULT_LOAD_MESSAGE_BYTES, DEFAULT_PROBE_COUNT,
    DEFAULT_PROBE_RATE_HZ, DEFAULT_SEED, DEFAULT_WARMUP,
};
use prioport_core::netemu::config::TopologyConfig;
use prioport_core::CarrierId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QosSwitch {
    Off,
    On,
}

fn load_fraction(s: &str) -> Result<f64, String> {
    let f: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if !(0.0..=1.0).contains(&f) {
        return Err(format!("load fraction {f} outside [0, 1]"));
    }
    Ok(f)
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Scenarios to run (nic, switch).
    #[arg(long, value_delimiter = ',', default_value = "nic")]
    scenario: Vec<Scenario>,
    /// Background load as fractions of link bandwidth; 0 runs without load.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.7", value_parser = load_fraction)]
    load: Vec<f64>,
    /// QoS settings to compare.
    #[arg(long, value_delimiter = ',', default_value = "off,on")]
    qos: Vec<QosSwitch>,
    /// Carriers for the measurement channel.
    #[arg(long, value_delimiter = ',', default_value = "tcp")]
    probe_carrier: Vec<CarrierId>,
    /// Carriers for the load channel.
    #[arg(long, value_delimiter = ',', default_value = "tcp")]
    load_carrier: Vec<CarrierId>,
    /// Run in the deterministic network emulator instead of on real sockets.
    #[arg(long)]
    emulate: bool,
    /// Topology file for emulated runs; must define host1, host2 and host3.
    #[arg(long, requires = "emulate")]
    topology: Option<PathBuf>,
    /// Write an SVG bar chart of the results here.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Probe message size in bytes (default depends on the scenario).
    #[arg(long)]
    probe_size: Option<u32>,
    #[arg(long, default_value_t = DEFAULT_PROBE_RATE_HZ)]
    rate: f64,
    /// Counted probes per configuration.
    #[arg(long, default_value_t = DEFAULT_PROBE_COUNT)]
    count: usize,
    /// Probes sent and discarded before counting starts.
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = DEFAULT_LOAD_MESSAGE_BYTES)]
    load_size: u32,
    /// Seed for probe send-time jitter in emulated runs.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Omit the CSV header line.
    #[arg(long)]
    no_header: bool,
}

impl BenchArgs {
    /// Every configuration requested, in output order.
    pub fn configs(&self) -> Vec<ScenarioConfig> {
        let mut out = Vec::new();
        for &scenario in &self.scenario {
            for &load in &self.load {
                for &pc in &self.probe_carrier {
                    for &lc in &self.load_carrier {
                        for &q in &self.qos {
                            let mut cfg =
                                ScenarioConfig::new(scenario, q == QosSwitch::On, load, pc, lc);
                            cfg.probe.size_bytes = self.probe_size.unwrap_or(cfg.probe.size_bytes);
                            cfg.probe.rate_hz = self.rate;
                            cfg.probe.count = self.count;
                            cfg.probe.warmup = self.warmup;
                            cfg.load_message_bytes = self.load_size;
                            cfg.seed = self.seed;
                            out.push(cfg);
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn run(args: BenchArgs) -> Result<()> {
    let topology = match &args.topology {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            Some(TopologyConfig::parse(&text)?)
        }
        None => None,
    };
    if !args.emulate
        && args
            .probe_carrier
            .iter()
            .chain(&args.load_carrier)
            .any(|&c| c == CarrierId::Emu)
    {
        bail!("the emu carrier needs --emulate");
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(io::stdout());
    if !args.no_header {
        w.write_record(prioport_core::bench::report::CSV_HEADER)?;
        w.flush()?;
    }
    let mut report = BenchReport::new();
    for cfg in args.configs() {
        let result = if args.emulate {
            match &topology {
                Some(t) => run_scenario_emulated_in(&cfg, t.build()?.0),
                None => run_scenario_emulated(&cfg),
            }
        } else {
            run_scenario_live(&cfg, &LiveOptions::default())
        };
        let result = result.with_context(|| {
            format!(
                "{} qos={} load={} {}/{}",
                cfg.scenario, cfg.qos, cfg.load_fraction, cfg.probe_carrier, cfg.load_carrier
            )
        })?;
        if let Some(load) = result.load.as_ref().filter(|l| l.cannot_sustain()) {
            eprintln!(
                "prioport: warning: load reached {:.0}% of target ({})",
                load.achieved_fraction_of_target() * 100.0,
                cfg.scenario
            );
        }
        BenchReport::write_row(&BenchRow::from(&result), &mut w)?;
        report.push(&result);
    }
    io::stdout().flush()?;
    if let Some(path) = &args.plot {
        std::fs::write(path, report.to_svg())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
