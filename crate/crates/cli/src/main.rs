//! `collabmap`: collaborative RGB-D reconstruction server, simulated clients
//! and offline tools.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};

use collabmap_core::pipeline::ScheduleMode;
use collabmap_core::reloc::RelocaliserKind;
use collabmap_core::wire::OverflowPolicy;

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "collabmap",
    version,
    about = "Collaborative dense RGB-D reconstruction"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// More log output; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Accept TCP clients, fuse their sub-scenes and align them.
    Serve(ServeArgs),
    /// Stream synthetic or recorded sequences to a running server.
    Simulate(SimulateArgs),
    /// Run the server and simulated clients in one process.
    Batch(BatchArgs),
    /// Fuse spooled sub-scenes into one mesh using global poses.
    Fuse(FuseArgs),
    /// Summarise an attempt log: verifier counts and cluster safety margins.
    Evaluate(EvaluateArgs),
    /// Write synthetic sequences in the dataset directory layout.
    DatasetGen(DatasetGenArgs),
    /// Print the effective configuration as TOML.
    Config,
}

fn mode_parser() -> impl TypedValueParser<Value = ScheduleMode> {
    PossibleValuesParser::new(["batch", "interactive"]).map(|s| s.parse::<ScheduleMode>().unwrap())
}

fn reloc_parser() -> impl TypedValueParser<Value = RelocaliserKind> {
    PossibleValuesParser::new(["oracle", "baseline"]).map(|s| s.parse::<RelocaliserKind>().unwrap())
}

fn policy_parser() -> impl TypedValueParser<Value = OverflowPolicy> {
    PossibleValuesParser::new(["discard", "grow", "replace_random", "wait"])
        .map(|s| s.parse::<OverflowPolicy>().unwrap())
}

#[derive(Args, Debug, Default)]
struct RelocArgs {
    /// Relocaliser used for inter-agent attempts.
    #[arg(long, value_parser = reloc_parser())]
    reloc: Option<RelocaliserKind>,
    /// Maximum relocalisation attempts in batch mode.
    #[arg(long, value_name = "N")]
    budget: Option<usize>,
    /// Voxel edge length in metres.
    #[arg(long, value_name = "METRES")]
    voxel_size: Option<f64>,
    /// Fraction of oracle proposals replaced by gross outliers.
    #[arg(long, value_name = "RATE")]
    outlier_rate: Option<f64>,
    /// Directory for poses.txt, metrics.json and attempts.jsonl.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Spool received frames under DIR/scene-NNN.
    #[arg(long, value_name = "DIR")]
    scenes_dir: Option<PathBuf>,
}

impl RelocArgs {
    fn apply(&self, c: &mut RunConfig) -> anyhow::Result<()> {
        if let Some(r) = self.reloc {
            c.server.reloc = r;
        }
        if let Some(b) = self.budget {
            c.server.budget = b;
        }
        if let Some(v) = self.voxel_size {
            c.set_voxel_size(v)?;
        }
        if let Some(r) = self.outlier_rate {
            c.server.oracle.outlier_rate = r;
        }
        if let Some(d) = &self.out_dir {
            c.out_dir = d.clone();
        }
        if let Some(d) = &self.scenes_dir {
            c.scenes_dir = Some(d.clone());
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// Relocalisation schedule.
    #[arg(long, value_parser = mode_parser())]
    mode: Option<ScheduleMode>,
    /// Address to listen on.
    #[arg(long, value_name = "ADDR")]
    listen: Option<String>,
    /// Number of client connections to accept.
    #[arg(long, value_name = "N")]
    clients: Option<usize>,
    /// Global-pose file giving each client's true pose, for the oracle.
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
    /// Seed for the server and oracle random streams.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    reloc: RelocArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Server address.
    #[arg(long, value_name = "ADDR")]
    connect: Option<String>,
    /// Number of simulated agents.
    #[arg(long, value_name = "N")]
    agents: Option<usize>,
    /// Seed for the scene and trajectories.
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of each trajectory shared with the next agent.
    #[arg(long, value_name = "FRACTION")]
    overlap: Option<f64>,
    /// Replay scene-NNN sequences from DIR instead of simulating.
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// Pause between frames in milliseconds.
    #[arg(long, value_name = "MS")]
    frame_interval_ms: Option<u64>,
    /// Client queue capacity.
    #[arg(long, value_name = "N")]
    queue_capacity: Option<usize>,
    /// What a full client queue does with a new frame.
    #[arg(long, value_parser = policy_parser())]
    policy: Option<OverflowPolicy>,
    /// Write the agents' true global poses to FILE.
    #[arg(long, value_name = "FILE")]
    truth_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BatchArgs {
    /// Number of simulated agents.
    #[arg(long, value_name = "N")]
    agents: Option<usize>,
    /// Seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Relocalisation schedule.
    #[arg(long, value_parser = mode_parser())]
    mode: Option<ScheduleMode>,
    /// Fraction of each trajectory shared with the next agent.
    #[arg(long, value_name = "FRACTION")]
    overlap: Option<f64>,
    #[command(flatten)]
    reloc: RelocArgs,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Directory holding scene-NNN sequences.
    #[arg(long, value_name = "DIR")]
    scenes_dir: Option<PathBuf>,
    /// Global-pose file, one `id w x y z tx ty tz` line per scene.
    #[arg(long, value_name = "FILE")]
    poses: PathBuf,
    /// Output PLY mesh.
    #[arg(long, value_name = "FILE", default_value = "mesh.ply")]
    out: PathBuf,
    /// Voxel edge length in metres.
    #[arg(long, value_name = "METRES")]
    voxel_size: Option<f64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Attempt log in JSON lines.
    #[arg(long, value_name = "FILE")]
    records: PathBuf,
    /// Ground-truth global poses; without it each record's own label is used.
    #[arg(long, value_name = "FILE")]
    gt: Option<PathBuf>,
    /// Also write the evaluation as JSON to FILE, or to stdout with `-`.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DatasetGenArgs {
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of agents.
    #[arg(long, value_name = "N")]
    agents: Option<usize>,
    /// Seed for the scene and trajectories.
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of each trajectory shared with the next agent.
    #[arg(long, value_name = "FRACTION")]
    overlap: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Serve(a) => {
            if let Some(s) = a.seed {
                cfg.server.seed = s;
                cfg.server.oracle.rng_seed = s;
                cfg.server.baseline.seed = s;
            }
            set(&mut cfg.server.mode, a.mode);
            set(&mut cfg.listen, a.listen);
            set(&mut cfg.clients, a.clients);
            if a.truth.is_some() {
                cfg.truth = a.truth;
            }
            a.reloc.apply(&mut cfg)?;
            cfg.validate()?;
            commands::serve(&cfg)
        }
        Command::Simulate(a) => {
            if let Some(s) = a.seed {
                cfg.simulation.scene_seed = s;
                cfg.simulation.trajectory_seed = s;
            }
            set(&mut cfg.connect, a.connect);
            set(&mut cfg.simulation.agents, a.agents);
            set(&mut cfg.simulation.overlap, a.overlap);
            set(
                &mut cfg.simulation.client.frame_interval_ms,
                a.frame_interval_ms,
            );
            set(&mut cfg.simulation.client.queue_capacity, a.queue_capacity);
            set(&mut cfg.simulation.client.policy, a.policy);
            cfg.validate()?;
            commands::simulate(&cfg, a.dataset.as_deref(), a.truth_out.as_deref())
        }
        Command::Batch(a) => {
            if let Some(s) = a.seed {
                cfg.set_seed(s);
            }
            set(&mut cfg.simulation.agents, a.agents);
            set(&mut cfg.server.mode, a.mode);
            set(&mut cfg.simulation.overlap, a.overlap);
            a.reloc.apply(&mut cfg)?;
            cfg.validate()?;
            commands::batch(&cfg)
        }
        Command::Fuse(a) => {
            if a.scenes_dir.is_some() {
                cfg.scenes_dir = a.scenes_dir;
            }
            if let Some(v) = a.voxel_size {
                cfg.set_voxel_size(v)?;
            }
            cfg.validate()?;
            commands::fuse(&cfg, &a.poses, &a.out)
        }
        Command::Evaluate(a) => commands::evaluate(&a.records, a.gt.as_deref(), a.json.as_deref()),
        Command::DatasetGen(a) => {
            if let Some(s) = a.seed {
                cfg.simulation.scene_seed = s;
                cfg.simulation.trajectory_seed = s;
            }
            set(&mut cfg.simulation.agents, a.agents);
            set(&mut cfg.simulation.overlap, a.overlap);
            cfg.validate()?;
            commands::dataset_gen(&cfg, &a.out)
        }
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
