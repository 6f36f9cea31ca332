use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mentalsim_core::harness::{
    improvement, run_experiment, run_plan, BasePoseSampler, ExperimentResult, FetchTask, NeemSink, Plan, RetryStats,
    World,
};
use mentalsim_core::learning::train_from_neems;
use mentalsim_core::neem::{Episode, EventFilter, EventKind};
use mentalsim_core::sdf::{parse_sdf, validate};
use mentalsim_core::wire::{self, Hub, Mode};
use serde_json::json;
use std::path::{Path, PathBuf};

const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "mentalsim", version, about = "Headless mental simulation for mobile manipulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a world description.
    Parse {
        world: PathBuf,
        /// Semantic tags; defaults to the `<stem>.semantics.json` sidecar if present.
        #[arg(long)]
        semantics: Option<PathBuf>,
    },
    /// Serve a world over websocket.
    Serve {
        world: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(long, value_enum, default_value_t = ModeArg::Sim)]
        mode: ModeArg,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long)]
        semantics: Option<PathBuf>,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        realtime_factor: f64,
    },
    /// Execute a plan and write its episode.
    Run {
        world: PathBuf,
        plan: PathBuf,
        #[arg(long, env = "MENTALSIM_SEED", default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value = "episodes")]
        out: PathBuf,
        #[arg(long, default_value = "episode")]
        episode_id: String,
        #[arg(long)]
        semantics: Option<PathBuf>,
    },
    /// Fit a Gaussian over the parameters of successful actions.
    Learn {
        episode_dir: PathBuf,
        #[arg(long)]
        action: String,
        #[arg(long)]
        param: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fetch the milk repeatedly and report retry statistics.
    Eval {
        world: PathBuf,
        #[arg(long)]
        episodes: usize,
        /// `uniform` or `model:<file>`.
        #[arg(long, default_value = "uniform")]
        sampler: String,
        /// Sampler the improvement is measured against; `none` skips the baseline run.
        #[arg(long, default_value = "uniform")]
        baseline: String,
        #[arg(long, env = "MENTALSIM_SEED", default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Write every episode here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        semantics: Option<PathBuf>,
    },
    /// Print matching events of a recorded episode.
    Query {
        episode: PathBuf,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        participant: Option<String>,
        #[arg(long)]
        success: Option<bool>,
        #[arg(long)]
        t_min: Option<f64>,
        #[arg(long)]
        t_max: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sim,
    Belief,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Format {
    Table,
    Records,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Parse { world, semantics } => parse(&world, semantics.as_deref()),
        Command::Serve {
            world,
            port,
            mode,
            bind,
            semantics,
            realtime_factor,
        } => serve(&world, semantics.as_deref(), &format!("{bind}:{port}"), mode, realtime_factor),
        Command::Run {
            world,
            plan,
            seed,
            out,
            episode_id,
            semantics,
        } => run(&world, semantics.as_deref(), &plan, seed, &out, &episode_id),
        Command::Learn {
            episode_dir,
            action,
            param,
            out,
        } => learn(&episode_dir, &action, &param, &out),
        Command::Eval {
            world,
            episodes,
            sampler,
            baseline,
            seed,
            format,
            out,
            semantics,
        } => eval(&world, semantics.as_deref(), episodes, &sampler, &baseline, seed, format, out.as_deref()),
        Command::Query {
            episode,
            kind,
            participant,
            success,
            t_min,
            t_max,
        } => query(&episode, kind, participant, success, t_min, t_max),
    }
}

fn load_world(path: &Path, semantics: Option<&Path>) -> Result<World> {
    World::load_with(path, semantics).with_context(|| format!("loading {}", path.display()))
}

fn parse(path: &Path, semantics: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = parse_sdf(&text)?;
    let world = load_world(path, semantics)?;
    let spec = &world.spec;
    println!("world {}", spec.name);
    for m in &spec.models {
        println!(
            "  model {:<14} links {:>2}  joints {:>2}{}",
            m.name,
            m.links.len(),
            m.joints.len(),
            if m.is_static { "  static" } else { "" }
        );
    }
    println!("links {}  joints {}  tags {}", spec.link_count(), spec.joint_count(), spec.semantics.len());
    for w in &parsed.warnings {
        println!("warning: {w}");
    }
    for p in validate(spec) {
        println!("warning: {p}");
    }
    Ok(())
}

fn serve(path: &Path, semantics: Option<&Path>, addr: &str, mode: ModeArg, realtime_factor: f64) -> Result<()> {
    let world = load_world(path, semantics)?;
    let sim = world.simulation(0, "serve", &NeemSink::Memory)?;
    let mode = match mode {
        ModeArg::Sim => Mode::Sim,
        ModeArg::Belief => Mode::Belief,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let handle = wire::serve(Hub::new(sim, mode), addr, realtime_factor).await?;
        eprintln!("listening on ws://{}", handle.local_addr);
        tokio::signal::ctrl_c().await?;
        handle.shutdown().await;
        Ok(())
    })
}

fn run(path: &Path, semantics: Option<&Path>, plan_path: &Path, seed: u64, out: &Path, episode_id: &str) -> Result<()> {
    let world = load_world(path, semantics)?;
    let plan = Plan::load(plan_path).with_context(|| format!("loading {}", plan_path.display()))?;
    let base_dir = plan_path.parent().unwrap_or(Path::new("."));
    let (result, _) = run_plan(&world, &plan, seed, episode_id, &NeemSink::Dir(out.to_path_buf()), base_dir)?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

fn learn(dir: &Path, action: &str, param: &str, out: &Path) -> Result<()> {
    let episodes = Episode::load_dir(dir).with_context(|| format!("loading episodes from {}", dir.display()))?;
    let model = train_from_neems(&episodes, action, param)?;
    model.save(out)?;
    println!(
        "fitted {} samples of {action}.{param} from {} episodes -> {}",
        model.n_samples,
        episodes.len(),
        out.display()
    );
    println!("mean {:?}", model.mean);
    println!("cov  {:?}", model.cov);
    if model.regularized {
        println!("covariance was regularized");
    }
    Ok(())
}

fn sampler_from(arg: &str) -> Result<BasePoseSampler> {
    if arg == "uniform" {
        return Ok(BasePoseSampler::uniform());
    }
    if let Some(file) = arg.strip_prefix("model:") {
        let model = mentalsim_core::learning::ModelFile::load(Path::new(file))
            .with_context(|| format!("loading model {file}"))?;
        let g = model.gaussian()?;
        if g.dim() != 2 {
            bail!("model {file} is {}-dimensional; base poses need 2", g.dim());
        }
        return Ok(BasePoseSampler::Gaussian(g));
    }
    bail!("unknown sampler '{arg}' (expected uniform or model:<file>)")
}

#[allow(clippy::too_many_arguments)]
fn eval(
    path: &Path,
    semantics: Option<&Path>,
    n: usize,
    sampler_arg: &str,
    baseline_arg: &str,
    seed: u64,
    format: Format,
    out: Option<&Path>,
) -> Result<()> {
    let world = load_world(path, semantics)?;
    let task = FetchTask::kitchen_milk();
    let sampler = sampler_from(sampler_arg)?;
    let arm = |s: &BasePoseSampler, label: &str| -> Result<ExperimentResult> {
        let dir = out.map(|d| d.join(label));
        Ok(run_experiment(&world, &task, s, n, seed, label, dir.as_deref())?)
    };
    let mut rows: Vec<(String, RetryStats, Option<f64>)> = Vec::new();
    let baseline = if baseline_arg == "none" || baseline_arg == sampler_arg {
        None
    } else {
        let b = arm(&sampler_from(baseline_arg)?, "baseline")?.stats;
        rows.push((baseline_arg.to_string(), b, None));
        Some(b)
    };
    let stats = arm(&sampler, "eval")?.stats;
    let imp = match baseline {
        Some(b) => Some(improvement(&b, &stats)?),
        None if baseline_arg == sampler_arg => Some(0.0),
        None => None,
    };
    rows.push((sampler_arg.to_string(), stats, imp));

    match format {
        Format::Records => {
            for (label, s, imp) in &rows {
                let rec = json!({
                    "sampler": label,
                    "n": s.n,
                    "mean_retries": s.mean,
                    "sd_retries": s.sd,
                    "sd_defined": s.sd_defined,
                    "baseline": if baseline_arg == "none" { None } else { Some(baseline_arg) },
                    "improvement_pct": imp,
                    "seed": seed,
                });
                println!("{}", wire::canonical(&rec));
            }
        }
        Format::Table => {
            let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(7).max(7);
            println!(
                "{:<width$}  {:>5}  {:>12}  {:>8}  {:>16}",
                "sampler", "n", "mean retries", "sd", format!("vs {baseline_arg}")
            );
            for (label, s, imp) in &rows {
                let sd = if s.sd_defined { format!("{:.2}", s.sd) } else { "n/a".into() };
                let imp = imp.map_or("-".into(), |v| format!("{v:.2}%"));
                println!("{label:<width$}  {:>5}  {:>12.2}  {sd:>8}  {imp:>16}", s.n, s.mean);
            }
        }
    }
    Ok(())
}

fn query(
    path: &Path,
    kind: Option<String>,
    participant: Option<String>,
    success: Option<bool>,
    t_min: Option<f64>,
    t_max: Option<f64>,
) -> Result<()> {
    let episode = Episode::load(path).with_context(|| format!("loading {}", path.display()))?;
    let kind = kind
        .map(|k| EventKind::parse(&k).with_context(|| format!("unknown event kind '{k}'")))
        .transpose()?;
    let time_range = match (t_min, t_max) {
        (None, None) => None,
        (lo, hi) => Some((lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY))),
    };
    let filter = EventFilter {
        kind,
        participant,
        success,
        time_range,
    };
    for e in episode.query_events(&filter) {
        println!("{}", serde_json::to_string(e)?);
    }
    Ok(())
}
