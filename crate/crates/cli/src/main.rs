use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use vergepipe_core::pipeline::{BackendMode, Pipeline, RunConfig, Stage, StageOutcome};
use vergepipe_core::synth::{SyntheticWorld, WorldSpec};

const EXIT_CONFIG: u8 = 1;
const EXIT_STAGE: u8 = 2;

/// Roadside verge dataset pipeline: survey KML to labelled street-view images
/// to evaluation reports.
#[derive(Parser)]
#[command(name = "vergepipe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct StageArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured backend.
    #[arg(long, value_parser = parse_backend)]
    backend: Option<BackendMode>,
}

fn parse_backend(s: &str) -> Result<BackendMode, String> {
    s.parse()
}

#[derive(Subcommand)]
enum Command {
    /// Parse survey KML into sections.
    Ingest(StageArgs),
    /// Look up panoramas and snap survey points to them.
    Snap(StageArgs),
    /// Plan image requests along each snapped section.
    Plan(StageArgs),
    /// Build the manifest, drop duplicates and purge listed images.
    Curate(StageArgs),
    /// Assign train/val/test splits and folds.
    Split(StageArgs),
    /// Download images for the Active samples.
    Fetch(StageArgs),
    /// Score predictions against the manifest labels.
    Evaluate(StageArgs),
    /// Every stage in order.
    All(StageArgs),
    /// Run a named stage (`ingest` .. `evaluate`, or `all`).
    Run {
        stage: String,
        #[command(flatten)]
        args: StageArgs,
    },
    /// Write a synthetic survey, panorama fixture, purge list and config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Target {
    One(Stage),
    All,
}

fn load(args: &StageArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config).with_context(|| format!("config {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(backend) = args.backend {
        cfg.backend = backend;
    }
    cfg.validate().with_context(|| format!("config {}", args.config.display()))?;
    Ok(cfg)
}

fn print_outcome(o: &StageOutcome) {
    let state = if o.reused { "unchanged" } else { "done" };
    println!("{:<9} {:<9} {}", o.stage.name(), state, o.summary);
}

fn run_stages(target: Target, args: &StageArgs) -> ExitCode {
    let cfg = match load(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let pipeline = Pipeline::new(cfg);
    let stages = match target {
        Target::One(s) => vec![s],
        Target::All => Stage::ALL.to_vec(),
    };
    for stage in stages {
        match pipeline.run(stage) {
            Ok(o) => print_outcome(&o),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_STAGE);
            }
        }
    }
    ExitCode::SUCCESS
}

fn synth(out: &PathBuf, seed: u64) -> anyhow::Result<()> {
    let world = SyntheticWorld::generate(WorldSpec {
        seed,
        ..WorldSpec::default()
    });
    world.write_to(out).with_context(|| format!("writing {}", out.display()))?;
    let config = out.join("vergepipe.toml");
    let text = RunConfig::synthetic_example().replace("seed = 0", &format!("seed = {seed}"));
    std::fs::write(&config, text).with_context(|| format!("writing {}", config.display()))?;
    let e = world.expected;
    println!("wrote {}", config.display());
    println!(
        "expected: sections={} planned={} filtered={} duplicates={} purged={} active={}",
        e.sections, e.planned, e.filtered, e.duplicates, e.purged, e.final_active
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Ingest(a) => run_stages(Target::One(Stage::Ingest), &a),
        Command::Snap(a) => run_stages(Target::One(Stage::Snap), &a),
        Command::Plan(a) => run_stages(Target::One(Stage::Plan), &a),
        Command::Curate(a) => run_stages(Target::One(Stage::Curate), &a),
        Command::Split(a) => run_stages(Target::One(Stage::Split), &a),
        Command::Fetch(a) => run_stages(Target::One(Stage::Fetch), &a),
        Command::Evaluate(a) => run_stages(Target::One(Stage::Evaluate), &a),
        Command::All(a) => run_stages(Target::All, &a),
        Command::Run { stage, args } => {
            let target = if stage == "all" {
                Target::All
            } else {
                match stage.parse() {
                    Ok(s) => Target::One(s),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(EXIT_CONFIG);
                    }
                }
            };
            run_stages(target, &args)
        }
        Command::Synth { out, seed } => match synth(&out, seed) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_STAGE)
            }
        },
    }
}
