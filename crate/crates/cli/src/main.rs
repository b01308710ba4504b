//! `proxyme`: run the mediation service, simulate studies, and report
//! latencies.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use proxyme_core::adapters::mock::MockBackend;
use proxyme_core::config::{env_overrides, AdapterKind, Override, ServiceConfig};
use proxyme_core::coordinator::MediationSettings;
use proxyme_core::experiment::{
    default_questionnaire, load_questionnaire, load_scenarios, plan_for, QuestionnaireItem,
    ScenarioScript, CONDITION_COUNT,
};
use proxyme_core::gateway::{play, Gateway, Hub, HubConfig};
use proxyme_core::pipeline::Backend;
use proxyme_core::report::{load_entries, report};
use proxyme_core::sim::{simulate, LatencySummary, ReplayScript, SimConfig, SUMMARY_FILE};

#[derive(Debug, Parser)]
#[command(name = "proxyme", version, about = "Real-time speech mediation service and study tools")]
struct Cli {
    /// Service configuration (TOML). Built-in defaults apply when omitted.
    #[arg(long, global = true, env = "PROXYME_CONFIG")]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set pipeline.chunk_ms=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<Override>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the WebSocket gateway.
    Serve,
    /// Run a study with mock adapters on the virtual clock.
    Simulate(SimulateArgs),
    /// Play a recorded script against an in-process gateway in real time.
    Replay {
        script: PathBuf,
        /// Directory for session logs and ledgers.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a participant's replay script as JSON lines.
    Script {
        #[arg(long, default_value_t = 0)]
        participant: u32,
        #[arg(long, default_value_t = 6)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Minimum spacing between steps.
        #[arg(long, default_value_t = 0)]
        gap_ms: u64,
    },
    /// Summarize session logs as Markdown tables.
    Report {
        log_dir: PathBuf,
        /// Also write the Markdown here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the config, scenario file, and questionnaire.
    Validate {
        /// Scenario file to check instead of the configured one.
        #[arg(long)]
        scenarios: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Number of participants (6 trials each).
    #[arg(long)]
    participants: Option<u32>,
    /// Stop after this many completed trials.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (defaults to the configured data_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scenarios: Option<PathBuf>,
    /// Batch synthesis instead of the configured mode.
    #[arg(long, conflicts_with = "streaming")]
    batch: bool,
    /// Streaming synthesis instead of the configured mode.
    #[arg(long)]
    streaming: bool,
    /// Replace each fixed stage latency with Normal(mean, frac × mean).
    #[arg(long, value_name = "FRAC")]
    normal_stddev_frac: Option<f64>,
    /// Drive sessions through the gateway on the wall clock.
    #[arg(long)]
    realtime: bool,
}

fn load_config(cli: &Cli) -> Result<ServiceConfig> {
    let mut overrides = env_overrides(std::env::vars().filter(|(k, _)| k != "PROXYME_CONFIG"));
    overrides.extend(cli.overrides.iter().cloned());
    let config = match &cli.config {
        Some(path) => ServiceConfig::load(path, &overrides)?,
        None => ServiceConfig::from_toml(&ServiceConfig::default().to_toml(), "<defaults>", &overrides)?,
    };
    Ok(config)
}

fn questionnaire(config: &ServiceConfig) -> Result<Vec<QuestionnaireItem>> {
    Ok(match &config.questionnaire {
        Some(p) => load_questionnaire(p)?,
        None => default_questionnaire(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::FAILURE
        }
    }
}

/// Error chain joined with ": ", skipping causes their parent already prints.
fn render(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Serve => serve(config),
        Command::Simulate(args) => simulate_cmd(config, args),
        Command::Replay { script, out } => replay_cmd(config, &script, out),
        Command::Script {
            participant,
            trials,
            seed,
            gap_ms,
        } => {
            let q = questionnaire(&config)?;
            print!("{}", ReplayScript::participant(participant, trials, seed, &q, gap_ms).to_jsonl());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { log_dir, out } => {
            let md = report(&log_dir)?.to_markdown();
            print!("{md}");
            if let Some(path) = out {
                std::fs::write(&path, &md).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { scenarios } => validate(&config, scenarios),
    }
}

fn serve(config: ServiceConfig) -> Result<ExitCode> {
    let scenarios = load_scenarios(&config.scenarios)?;
    let hub = Hub::new(HubConfig {
        scenarios,
        settings: MediationSettings::from_config(&config),
        backend: config.backend(),
        data_dir: Some(config.data_dir.clone()),
        seed: config.seed,
    });
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")?;
    runtime.block_on(async {
        let gateway = Gateway::bind(hub, &config.host, config.port).await?;
        let addr = gateway.local_addr()?;
        eprintln!("{}", config.summary());
        println!("proxyme ready on ws://{addr}/ws (health: http://{addr}/health)");
        gateway
            .serve(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        eprintln!("proxyme stopped");
        Ok(ExitCode::SUCCESS)
    })
}

fn simulate_cmd(config: ServiceConfig, args: SimulateArgs) -> Result<ExitCode> {
    let scenarios = load_scenarios(args.scenarios.as_ref().unwrap_or(&config.scenarios))?;
    let q = questionnaire(&config)?;
    let mut settings = MediationSettings::from_config(&config);
    if args.batch {
        settings.streaming = false;
    }
    if args.streaming {
        settings.streaming = true;
    }
    let mut profile = config.adapters.latency;
    if let Some(frac) = args.normal_stddev_frac {
        if !(frac.is_finite() && frac >= 0.0) {
            bail!("--normal-stddev-frac must be a finite number >= 0");
        }
        profile = profile.to_normal(frac);
    }
    let participants = args.participants.unwrap_or_else(|| match args.runs {
        Some(r) => r.div_ceil(CONDITION_COUNT).max(1) as u32,
        None => 6,
    });
    let out = args.out.clone().unwrap_or_else(|| config.data_dir.clone());

    let summary = if args.realtime {
        let backend = match config.adapters.kind {
            AdapterKind::Mock => Backend::mock(MockBackend::new(&profile, settings.words_per_minute)),
            AdapterKind::Remote => config.backend(),
        };
        realtime(scenarios, &q, settings, backend, participants, args.runs, args.seed, &out)?
    } else {
        let outcome = simulate(
            &scenarios,
            &q,
            &SimConfig {
                participants,
                max_runs: args.runs,
                seed: args.seed,
                profile,
                settings,
                ..SimConfig::default()
            },
            Some(&out),
        )?;
        outcome.summary
    };
    print_summary(&summary, &out);
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn realtime(
    scenarios: Vec<ScenarioScript>,
    q: &[QuestionnaireItem],
    settings: MediationSettings,
    backend: Backend,
    participants: u32,
    runs: Option<usize>,
    seed: u64,
    out: &Path,
) -> Result<LatencySummary> {
    for p in 0..participants {
        plan_for(p, &scenarios)?;
    }
    let hub = Hub::new(HubConfig {
        scenarios,
        settings,
        backend,
        data_dir: Some(out.to_owned()),
        seed,
    });
    let mut left = runs.unwrap_or(usize::MAX);
    let mut scripts = Vec::new();
    for p in 0..participants {
        let trials = left.min(CONDITION_COUNT);
        if trials == 0 {
            break;
        }
        left -= trials;
        scripts.push(ReplayScript::participant(p, trials, seed, q, 0));
    }
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = scripts
            .iter()
            .map(|script| s.spawn(|| play(&hub, script, Duration::from_secs(300))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("player thread")).collect()
    });
    hub.shutdown();
    for r in results {
        r?;
    }
    let entries = load_entries(out)?;
    let entries: Vec<_> = entries
        .into_iter()
        .filter(|e| hub.session_ids().contains(&e.session_id))
        .collect();
    let summary = LatencySummary::of(&entries, &settings);
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(out.join(SUMMARY_FILE), text)?;
    Ok(summary)
}

fn print_summary(summary: &LatencySummary, out: &Path) {
    println!(
        "{} runs ({}, masking window {} ms); output in {}",
        summary.runs,
        if summary.streaming { "streaming" } else { "batch" },
        summary.masking_window_ms,
        out.display()
    );
    println!("{:<24} {:>10} {:>10} {:>8} {:>8}", "measure", "mean", "stddev", "p50", "p95");
    for (name, s) in &summary.stats {
        println!("{name:<24} {:>10.1} {:>10.1} {:>8} {:>8}", s.mean, s.stddev, s.p50, s.p95);
    }
}

fn replay_cmd(config: ServiceConfig, script: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let text = std::fs::read_to_string(script).with_context(|| format!("reading {}", script.display()))?;
    let script = ReplayScript::from_jsonl(&text)?;
    let out = out.unwrap_or_else(|| config.data_dir.clone());
    let hub = Hub::new(HubConfig {
        scenarios: load_scenarios(&config.scenarios)?,
        settings: MediationSettings::from_config(&config),
        backend: config.backend(),
        data_dir: Some(out.clone()),
        seed: config.seed,
    });
    let outcome = play(&hub, &script, Duration::from_secs(300));
    hub.shutdown();
    let outcome = outcome?;
    println!(
        "replayed {} steps; session {}; {} messages received; output in {}",
        script.steps.len(),
        outcome.session_id.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
        outcome.received.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn validate(config: &ServiceConfig, scenarios: Option<PathBuf>) -> Result<ExitCode> {
    let path = scenarios.unwrap_or_else(|| config.scenarios.clone());
    let mut failed = false;
    println!("config ok: {}", config.summary());
    match load_scenarios(&path) {
        Ok(pool) => match plan_for(0, &pool) {
            Ok(_) => println!("scenarios ok: {} scenarios in {}", pool.len(), path.display()),
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                failed = true;
            }
        },
        Err(e) => {
            eprintln!("{e}");
            failed = true;
        }
    }
    match questionnaire(config) {
        Ok(items) => println!("questionnaire ok: {} items", items.len()),
        Err(e) => {
            eprintln!("{}", render(&e));
            failed = true;
        }
    }
    Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}
