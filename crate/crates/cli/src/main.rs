use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use mmnmpc::config::{PipelineConfig, TimingMode};
use mmnmpc::drl::Checkpoint;
use mmnmpc::eval::{eval_grid, EpisodeRecord, Method, MetricsRow};
use mmnmpc::export::{
    read_trajectories, render_svg, write_action_table, write_metrics, write_training_log, write_trajectories,
};
use mmnmpc::pipeline::Pipeline;
use mmnmpc::train::{evaluation_reset, train};

#[derive(Parser)]
#[command(
    name = "mmnmpc",
    version,
    about = "RL-selected NMPC settings for a mobile manipulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding `seed` and `dqn.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Episode count for `train` and `rollout`.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Policy checkpoint for `eval` and `rollout`.
    #[arg(long, global = true)]
    policy: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    timing_mode: Option<Timing>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a DQN policy; writes training_log.csv and policy.json.
    Train,
    /// Evaluate a policy on the start/goal grid; writes metrics, trajectories and map.
    Eval,
    /// Evaluate the whole-body baseline on the start/goal grid.
    Baseline,
    /// Run seeded episodes with a policy, or the baseline when no policy is given.
    Rollout,
    /// Write the discrete action table.
    DumpActionTable,
}

#[derive(Clone, Copy, ValueEnum)]
enum Timing {
    Sync,
    Realtime,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.dqn.seed = s;
    }
    if let Some(t) = cli.timing_mode {
        cfg.timing_mode = match t {
            Timing::Sync => TimingMode::Sync,
            Timing::Realtime => TimingMode::Realtime,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_policy(cli: &Cli, pipeline: &Pipeline) -> Result<Option<Checkpoint>> {
    let Some(path) = &cli.policy else {
        return Ok(None);
    };
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (obs, acts) = (pipeline.layout().len(), pipeline.n_actions());
    if ck.network.input_dim() != obs || ck.network.output_dim() != acts {
        bail!(
            "policy {} maps {} inputs to {} actions, this configuration needs {obs} to {acts}",
            path.display(),
            ck.network.input_dim(),
            ck.network.output_dim()
        );
    }
    let hash = pipeline.config().hash();
    if ck.config_hash != hash {
        warn!(
            "policy was trained under config {} but this run uses {}",
            ck.config_hash, hash
        );
    }
    Ok(Some(ck))
}

fn write_grid_outputs(cli: &Cli, pipeline: &Pipeline, method: Method) -> Result<MetricsRow> {
    let start = Instant::now();
    let report = eval_grid(pipeline, &method, pipeline.config().seed)?;
    info!(
        "{} grid: {} episodes in {:.1}s",
        method.name(),
        report.episodes.len(),
        start.elapsed().as_secs_f64()
    );
    write_metrics(std::slice::from_ref(&report.metrics), &cli.out.join("metrics.csv"))?;
    write_episode_outputs(&cli.out, pipeline, &report.episodes)?;
    Ok(report.metrics)
}

fn write_episode_outputs(out: &Path, pipeline: &Pipeline, episodes: &[EpisodeRecord]) -> Result<()> {
    let traj = out.join("trajectories.csv");
    write_trajectories(episodes, &traj)?;
    let rows = read_trajectories(&traj)?;
    fs::write(out.join("map.svg"), render_svg(&rows, &pipeline.config().world))?;
    Ok(())
}

fn summary(m: &MetricsRow) -> String {
    use mmnmpc::env::Outcome;
    format!(
        "{}: {} episodes, success {:.1}%, rollover {:.1}%, collision {:.1}%, boundary {:.1}%, max_step {:.1}%",
        m.method,
        m.episodes,
        m.pct(Outcome::Success),
        m.pct(Outcome::Rollover),
        m.pct(Outcome::Collision),
        m.pct(Outcome::Boundary),
        m.pct(Outcome::MaxStep)
    )
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let pipeline = Pipeline::new(cfg)?;
    match cli.command {
        Command::Train => {
            let episodes = cli.episodes.unwrap_or(pipeline.config().train.episodes);
            let mut agent = pipeline.agent()?;
            let log = train(&pipeline, &mut agent, episodes, pipeline.config().seed, |r| {
                info!(
                    "episode {} reward {:.3} {} eps {:.3}",
                    r.episode, r.reward, r.outcome, r.epsilon
                );
            })?;
            write_training_log(&log, &cli.out.join("training_log.csv"))?;
            agent
                .policy(&pipeline.config().hash())
                .save(&cli.out.join("policy.json"))?;
            fs::write(cli.out.join("config.toml"), pipeline.config().to_toml_string()?)?;
            let wins = log.iter().filter(|r| r.outcome == "success").count();
            println!(
                "trained {episodes} episodes, {wins} successes, {} agent steps",
                agent.steps()
            );
        }
        Command::Eval => {
            let Some(ck) = load_policy(cli, &pipeline)? else {
                bail!("eval needs --policy");
            };
            println!("{}", summary(&write_grid_outputs(cli, &pipeline, Method::Policy(ck))?));
        }
        Command::Baseline => {
            println!("{}", summary(&write_grid_outputs(cli, &pipeline, Method::Baseline)?));
        }
        Command::Rollout => {
            let policy = load_policy(cli, &pipeline)?;
            let mut env = pipeline.env()?;
            let mut solver = pipeline.solver();
            let seed = pipeline.config().seed;
            let mut records = Vec::new();
            for i in 0..cli.episodes.unwrap_or(1) {
                let reset = evaluation_reset(seed, i);
                let result = match &policy {
                    Some(ck) => pipeline.run_episode(&mut env, &mut solver, &mut ck.clone(), reset)?,
                    None => pipeline.run_episode_baseline(&mut env, &mut solver, reset)?,
                };
                println!(
                    "episode {i}: {} after {} actions, reward {:.3}",
                    result.outcome.name(),
                    result.rl_steps,
                    result.reward
                );
                records.push(EpisodeRecord {
                    config_index: i,
                    run: 0,
                    seed,
                    result,
                });
            }
            write_episode_outputs(&cli.out, &pipeline, &records)?;
        }
        Command::DumpActionTable => {
            let path = cli.out.join("action_table.csv");
            write_action_table(pipeline.codec().table(), &path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
