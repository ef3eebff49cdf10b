use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use hps_core::placement::{
    estimate_comm, plan_distributed, plan_hybrid, plan_localized, DeviceSpec, FrequencyTable,
    SlotFrequencies, SlotSpec,
};
use hps_core::Stack;
use hps_harness::config::HarnessConfig;
use hps_harness::load::bulk_load;
use hps_harness::replay::{replay_trace, Backend};
use hps_harness::{HarnessError, MetricsReport, Result, Trace};
use hps_service::{Client, Server, ServerConfig};

#[derive(Parser)]
#[command(name = "hps", version, about = "Parameter server experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides `data_dir`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Default)]
struct WorkloadOverrides {
    #[arg(long)]
    n_keys: Option<u64>,
    #[arg(long)]
    zipf_s: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_batches: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    update_rate: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a Zipf key trace.
    Gen {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        workload: WorkloadOverrides,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Bulk load the configured synthetic table into the PDB.
    Load {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Replay a trace and report metrics.
    Replay {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        workload: WorkloadOverrides,
        /// Trace file; generated from the workload section when absent.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Replay against a running server instead of an in-process stack.
        #[arg(long)]
        remote: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        warmup_batches: Option<usize>,
        #[arg(long)]
        await_migrations: bool,
        /// Where to save the JSON report.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Compute an embedding placement plan and its traffic estimate.
    Plan {
        /// JSON file with `slots` and `devices` arrays.
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        /// `SLOT_ID=PATH` frequency file, repeatable (hybrid only).
        #[arg(long = "freq")]
        freqs: Vec<String>,
        /// Replicated bytes allowed per device (hybrid only).
        #[arg(long, default_value_t = 0)]
        hot_budget: u64,
        #[arg(long, default_value_t = 1024)]
        batch_size: u64,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print a saved JSON report.
    Report { path: PathBuf },
    /// Serve the configured deployment over TCP.
    Serve {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Localized,
    Distributed,
    Hybrid,
}

#[derive(Deserialize, Serialize)]
struct PlanInput {
    slots: Vec<SlotSpec>,
    devices: Vec<DeviceSpec>,
}

fn load_config(arg: &ConfigArg, w: Option<&WorkloadOverrides>) -> Result<HarnessConfig> {
    let mut c = HarnessConfig::load(&arg.config)?;
    if let Some(d) = &arg.data_dir {
        c.data_dir = d.clone();
    }
    if let Some(w) = w {
        let s = &mut c.workload;
        s.n_keys = w.n_keys.unwrap_or(s.n_keys);
        s.zipf_s = w.zipf_s.unwrap_or(s.zipf_s);
        s.batch_size = w.batch_size.unwrap_or(s.batch_size);
        s.n_batches = w.n_batches.unwrap_or(s.n_batches);
        s.seed = w.seed.unwrap_or(s.seed);
        s.update_rate = w.update_rate.unwrap_or(s.update_rate);
    }
    Ok(c)
}

fn open_stack(c: &HarnessConfig) -> Result<Arc<Stack>> {
    let stack = Stack::open(&c.data_dir, c.stack)?;
    stack.register_table(c.table.meta()?, c.cache, c.vdb)?;
    let n = stack.orchestrator().pdb().key_count(&c.table.name)?;
    if n == 0 {
        log::warn!("table `{}` is empty; run `hps load` first", c.table.name);
    }
    Ok(Arc::new(stack))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            config,
            workload,
            out,
        } => {
            let c = load_config(&config, Some(&workload))?;
            let trace = Trace::generate(&c.workload)?;
            trace.write_to(&mut BufWriter::new(File::create(&out)?))?;
            println!("wrote {} keys to {}", trace.keys.len(), out.display());
        }
        Command::Load { config } => {
            let c = load_config(&config, None)?;
            let stack = Stack::open(&c.data_dir, c.stack)?;
            let n = bulk_load(&c.table, stack.orchestrator().pdb())?;
            println!("loaded {n} entries into `{}`", c.table.name);
        }
        Command::Replay {
            config,
            workload,
            trace,
            remote,
            workers,
            warmup_batches,
            await_migrations,
            out,
        } => {
            let c = load_config(&config, Some(&workload))?;
            let trace = match trace {
                Some(p) => Trace::read_from(&mut BufReader::new(File::open(p)?))?,
                None => Trace::generate(&c.workload)?,
            };
            let mut opts = c.replay_options();
            opts.workers = workers.unwrap_or(opts.workers);
            opts.warmup_batches = warmup_batches.unwrap_or(opts.warmup_batches);
            opts.await_migrations |= await_migrations;
            let backend: Arc<dyn Backend> = match remote {
                Some(addr) => Arc::new(Client::connect(addr)?),
                None => open_stack(&c)?,
            };
            let report = replay_trace(&trace, &c.workload, backend, &opts)?;
            print!("{}", report.render_text());
            if let Some(p) = out {
                report.save(&p)?;
            }
        }
        Command::Plan {
            input,
            strategy,
            freqs,
            hot_budget,
            batch_size,
            out,
        } => {
            let input: PlanInput = serde_json::from_reader(BufReader::new(File::open(input)?))?;
            let mut tables = SlotFrequencies::new();
            for f in &freqs {
                let (slot, path) = f.split_once('=').ok_or_else(|| {
                    HarnessError::Config(format!("--freq `{f}`: expected SLOT=PATH"))
                })?;
                let slot: u32 = slot
                    .parse()
                    .map_err(|_| HarnessError::Config(format!("--freq `{f}`: bad slot id")))?;
                let table = FrequencyTable::parse(BufReader::new(File::open(path)?))?;
                tables.insert(slot, table);
            }
            let plan = match strategy {
                StrategyArg::Localized => plan_localized(&input.slots, &input.devices)?,
                StrategyArg::Distributed => plan_distributed(&input.slots, &input.devices)?,
                StrategyArg::Hybrid => {
                    plan_hybrid(&input.slots, &input.devices, &tables, hot_budget)?
                }
            };
            let freq = (!tables.is_empty()).then_some(&tables);
            let comm = estimate_comm(&plan, batch_size, &input.slots, freq)?;
            print!("{}", plan.render_text());
            println!(
                "all-to-all bytes per iteration (B={batch_size}): fwd {:.1}, bwd {:.1}",
                comm.bytes_all_to_all_fwd, comm.bytes_all_to_all_bwd
            );
            if let Some(p) = out {
                std::fs::write(p, plan.to_json())?;
            }
        }
        Command::Report { path } => print!("{}", MetricsReport::load(&path)?.render_text()),
        Command::Serve { config, bind } => {
            let c = load_config(&config, None)?;
            let stack = open_stack(&c)?;
            let server = Server::start(
                stack,
                &ServerConfig {
                    bind: bind.unwrap_or(c.server.bind),
                    workers: c.server.workers,
                    ..ServerConfig::default()
                },
            )?;
            println!("listening on {}", server.local_addr());
            server.join();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
