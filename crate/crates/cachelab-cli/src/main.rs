//! Command-line front end for the cache laboratory.
//!
//! Loads a scenario (from a file or the bundled registry), runs it, and
//! writes artifact CSVs plus a key/value summary on stdout. Exit codes:
//! 0 clean run, 1 invariant violation or experiment failure, 2 config
//! error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use cachelab::scenario::{bundled_text, run_scenario, Scenario, ScenarioError, BUNDLED_SCENARIOS};

#[derive(Parser)]
#[command(
    name = "cachelab",
    version,
    about = "Deterministic page cache attack experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its artifacts.
    Run(RunArgs),
    /// Run an eviction-bench scenario and report precision/recall.
    BenchEviction(RunArgs),
    /// List the bundled scenarios.
    ListScenarios,
    /// Parse and validate a config without running it.
    Validate(SourceArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["config", "scenario"])))]
struct SourceArgs {
    /// Path to a scenario TOML file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Name of a bundled scenario (see list-scenarios).
    #[arg(long, value_name = "NAME")]
    scenario: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Override the config's RNG seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Directory to write artifact files into.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Artifact format.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

const EXIT_RUN_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::ListScenarios => {
            for (name, _) in BUNDLED_SCENARIOS {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
        Cmd::Validate(source) => match load(&source) {
            Ok(sc) => {
                println!("ok: {} ({})", sc.name, sc.experiment.kind());
                ExitCode::SUCCESS
            }
            Err(msg) => {
                eprintln!("{msg}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Cmd::Run(args) => run(args, None),
        Cmd::BenchEviction(args) => run(args, Some("eviction-bench")),
    }
}

fn load(source: &SourceArgs) -> Result<Scenario, String> {
    let text = match (&source.config, &source.scenario) {
        (Some(path), None) => std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?,
        (None, Some(name)) => bundled_text(name)
            .ok_or_else(|| format!("no bundled scenario named {name:?}; see list-scenarios"))?
            .to_string(),
        _ => unreachable!("clap enforces exactly one source"),
    };
    Scenario::from_toml(&text).map_err(|e| e.to_string())
}

fn run(args: RunArgs, required_kind: Option<&str>) -> ExitCode {
    let mut sc = match load(&args.source) {
        Ok(sc) => sc,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(kind) = required_kind {
        if sc.experiment.kind() != kind {
            eprintln!(
                "scenario {} is a {} experiment, expected {kind}",
                sc.name,
                sc.experiment.kind()
            );
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    if let Some(seed) = args.seed {
        sc.seed = seed;
    }
    let out = match run_scenario(&sc) {
        Ok(out) => out,
        Err(e @ ScenarioError::Run(_)) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_RUN_FAILED);
        }
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Err(e) = std::fs::create_dir_all(&args.out) {
        eprintln!("cannot create {}: {e}", args.out.display());
        return ExitCode::from(EXIT_RUN_FAILED);
    }
    let Format::Csv = args.format;
    for artifact in &out.artifacts {
        let path = args.out.join(format!("{}-{}", out.name, artifact.filename));
        if let Err(e) = std::fs::write(&path, &artifact.content) {
            eprintln!("cannot write {}: {e}", path.display());
            return ExitCode::from(EXIT_RUN_FAILED);
        }
        println!("artifact = {}", path.display());
    }
    print!("{}", out.summary_text());
    if out.ok {
        ExitCode::SUCCESS
    } else {
        eprintln!("run completed with violations; see summary");
        ExitCode::from(EXIT_RUN_FAILED)
    }
}
