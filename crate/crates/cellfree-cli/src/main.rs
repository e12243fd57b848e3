use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cellfree::geometry::{NetworkConfig, PRESET_NAMES};
use cellfree::harness::acceptance::{run_criterion, CRITERIA};
use cellfree::harness::{
    intro_snr_benchmark, run_comparison, ExperimentOutput, ExperimentSpec, Link, OutputFormat, PowerPolicy,
    ProcessingMode, DEFAULT_DRAWS, DEFAULT_SETUPS,
};
use cellfree::uplink::LsfdMode;
use cellfree::{CellFreeError, Result};

#[derive(Parser)]
#[command(name = "cellfree", version, about = "Cell-free massive MIMO Monte Carlo simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Centralized,
    Distributed,
    Cellular,
    SmallCell,
    /// Single-UE uplink SNR comparison (intro benchmark).
    Snr,
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkArg {
    Uplink,
    Downlink,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(clap::Args)]
struct Common {
    /// Preset name (see `cellfree presets`).
    #[arg(long, default_value = "running-example-100x4")]
    scenario: String,
    /// JSON network config; overrides --scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "centralized")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "uplink")]
    link: LinkArg,
    /// full | equal | max-min | sum-se | fractional[:υ[:κ]]
    #[arg(long)]
    power: Option<String>,
    /// LSFD for distributed uplink: opt | n-opt | none.
    #[arg(long, default_value = "n-opt")]
    lsfd: String,
    #[arg(long, default_value_t = DEFAULT_SETUPS)]
    setups: usize,
    #[arg(long, default_value_t = DEFAULT_DRAWS)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path (file for `run`, directory for `compare`). Prints to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and emit its SE CDF.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "p-mmse")]
        scheme: String,
    },
    /// Run several schemes on shared setups and draws. Each entry is
    /// `[mode/]scheme[+lsfd]`, e.g. `centralized/mmse distributed/lp-mmse+opt`.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true, value_delimiter = ',')]
        scheme: Vec<String>,
    },
    /// Run the acceptance suite.
    Check {
        /// Criterion ids to run; all when absent.
        #[arg(long, value_delimiter = ',')]
        only: Vec<usize>,
    },
    /// List scenario presets.
    Presets,
}

fn processing_mode(m: ModeArg) -> Result<ProcessingMode> {
    match m {
        ModeArg::Centralized => Ok(ProcessingMode::Centralized),
        ModeArg::Distributed => Ok(ProcessingMode::Distributed),
        ModeArg::Cellular => Ok(ProcessingMode::Cellular),
        ModeArg::SmallCell => Ok(ProcessingMode::SmallCell),
        ModeArg::Snr => Err(CellFreeError::Config("snr mode is only available with `run`".into())),
    }
}

fn network(common: &Common) -> Result<NetworkConfig> {
    match &common.config {
        Some(path) => NetworkConfig::from_json(&fs::read_to_string(path)?),
        None => NetworkConfig::preset(&common.scenario),
    }
}

fn base_spec(common: &Common, mode: ProcessingMode, scheme: &str, lsfd: LsfdMode) -> Result<ExperimentSpec> {
    let link = match common.link {
        LinkArg::Uplink => Link::Uplink,
        LinkArg::Downlink => Link::Downlink,
    };
    let power = match (&common.power, link) {
        (Some(p), _) => PowerPolicy::parse(p, link, mode)?,
        (None, Link::Uplink) => PowerPolicy::Full,
        (None, Link::Downlink) => PowerPolicy::parse("fractional", link, mode)?,
    };
    let (scenario, config) = match &common.config {
        Some(_) => (None, Some(network(common)?)),
        None => (Some(common.scenario.clone()), None),
    };
    Ok(ExperimentSpec {
        scenario,
        config,
        mode,
        link,
        scheme: scheme.to_string(),
        lsfd,
        power,
        num_setups: common.setups,
        draws_per_setup: common.draws,
        seed: common.seed,
    })
}

fn format(f: FormatArg) -> OutputFormat {
    match f {
        FormatArg::Csv => OutputFormat::Csv,
        FormatArg::Json => OutputFormat::Json,
    }
}

fn summary(out: &ExperimentOutput) -> String {
    let q: Vec<String> = out.table.quantiles.iter().map(|(q, v)| format!("q{:02.0}={v:.3}", 100.0 * q)).collect();
    format!("{:<36} n={:<6} mean={:.3} {}", out.spec.label(), out.table.count, out.table.mean(), q.join(" "))
}

fn parse_entry(entry: &str, default_mode: ProcessingMode, default_lsfd: LsfdMode) -> Result<(ProcessingMode, String, LsfdMode)> {
    let (mode, rest) = match entry.split_once('/') {
        Some((m, r)) => {
            let mode: ProcessingMode = serde_json::from_value(serde_json::Value::String(m.to_string()))
                .map_err(|_| CellFreeError::Config(format!("unknown mode `{m}`")))?;
            (mode, r)
        }
        None => (default_mode, entry),
    };
    let (scheme, lsfd) = match rest.split_once('+') {
        Some((s, l)) => (s, LsfdMode::parse(l)?),
        None => (rest, default_lsfd),
    };
    Ok((mode, scheme.to_string(), lsfd))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { common, scheme } => {
            if let ModeArg::Snr = common.mode {
                let cfg = network(&common)?;
                let drops = common.setups.max(1) * common.draws.max(1);
                let r = intro_snr_benchmark(&cfg, drops, common.seed)?;
                let text = serde_json::to_string_pretty(&r)?;
                match &common.out {
                    Some(p) => fs::write(p, text)?,
                    None => println!("{text}"),
                }
                return Ok(true);
            }
            let lsfd = LsfdMode::parse(&common.lsfd)?;
            let spec = base_spec(&common, processing_mode(common.mode)?, &scheme, lsfd)?;
            let out = run_comparison(std::slice::from_ref(&spec))?.remove(0);
            match &common.out {
                Some(p) => {
                    out.emit(format(common.format), p)?;
                    eprintln!("{}", summary(&out));
                }
                None => match common.format {
                    FormatArg::Csv => print!("{}", out.table.to_csv()?),
                    FormatArg::Json => println!("{}", out.to_json()?),
                },
            }
            Ok(true)
        }
        Command::Compare { common, scheme } => {
            let mode = processing_mode(common.mode)?;
            let lsfd = LsfdMode::parse(&common.lsfd)?;
            let specs = scheme
                .iter()
                .map(|e| {
                    let (m, s, l) = parse_entry(e, mode, lsfd)?;
                    base_spec(&common, m, &s, l)
                })
                .collect::<Result<Vec<_>>>()?;
            let outs = run_comparison(&specs)?;
            if let Some(dir) = &common.out {
                fs::create_dir_all(dir)?;
                let ext = match common.format {
                    FormatArg::Csv => "csv",
                    FormatArg::Json => "json",
                };
                for o in &outs {
                    let name = o.spec.label().replace(['/', '+'], "_");
                    o.emit(format(common.format), &dir.join(format!("{name}.{ext}")))?;
                }
            }
            for o in &outs {
                println!("{}", summary(o));
            }
            Ok(true)
        }
        Command::Check { only } => {
            let ids: Vec<usize> = if only.is_empty() { CRITERIA.iter().map(|c| c.0).collect() } else { only };
            let mut all = true;
            for id in ids {
                let r = run_criterion(id);
                all &= r.passed;
                println!("{r}");
            }
            Ok(all)
        }
        Command::Presets => {
            for p in PRESET_NAMES {
                println!("{p}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
