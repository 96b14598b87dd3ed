use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use geotrace::auditor::{audit, parse_evidence, parse_itpa_records, AuditReport};
use geotrace::crypto::KeyRegistry;
use geotrace::scenario::{run_scenario, AdversaryMode, RunOptions, RunOutput};
use geotrace::simnet::replay_jsonl;
use geotrace::synthgen::{coverage_preset, ScenarioConfig, World};

const EXIT_CONFIG: u8 = 1;
const EXIT_INTEGRITY: u8 = 2;
const EXIT_VIOLATIONS: u8 = 3;

/// Simulates privacy-preserving, location-based contact tracing.
///
/// Exit codes: 0 success, 1 configuration or I/O error, 2 integrity error
/// (evidence or transcript fails verification), 3 audit violations found.
/// Set RUST_LOG (e.g. RUST_LOG=info) for progress output.
#[derive(Parser)]
#[command(name = "geotrace", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its report, transcript and exports.
    Run(RunArgs),
    /// Audit exported LP evidence against ITPA records.
    Audit {
        #[arg(long)]
        evidence: PathBuf,
        #[arg(long)]
        itpa: PathBuf,
        /// Public-key registry written by `run`.
        #[arg(long)]
        registry: PathBuf,
    },
    /// Re-verify every signature in a transcript.
    Replay {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        registry: PathBuf,
    },
    /// Generate a world and export its POIs and LP traces as CSV.
    World {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Scenario TOML file; built-in defaults when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    days: Option<u32>,
    /// A fraction in [0, 1], or a country name from the bundled penetration
    /// table (its Facebook share is used).
    #[arg(long)]
    lp_coverage: Option<String>,
    #[arg(long, default_value = "none", value_parser = ["none", "ha-targeted", "lp-reid", "both"])]
    adversary: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run this many consecutive seeds, each in its own subdirectory.
    #[arg(long, default_value_t = 1)]
    repeat: u32,
    /// Threads for metric computation.
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Config(anyhow::Error),
    Integrity(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => ScenarioConfig::from_toml(&read(p)?).with_context(|| format!("in {}", p.display())),
        None => Ok(ScenarioConfig::default()),
    }
}

fn parse_coverage(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .or_else(|| coverage_preset(s))
        .with_context(|| format!("--lp-coverage {s:?} is neither a number nor a known country"))
}

fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("run_report.json"), &out.report.to_json())?;
    write(&dir.join("transcript.jsonl"), &out.transcript_jsonl)?;
    write(&dir.join("evidence.jsonl"), &out.evidence_jsonl)?;
    write(&dir.join("itpa.jsonl"), &out.itpa_jsonl)?;
    write(&dir.join("registry.json"), &out.registry_json)?;
    Ok(())
}

fn run(args: RunArgs) -> Result<u8, Failure> {
    let mut cfg = load_config(args.scenario.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(days) = args.days {
        cfg.days = days;
    }
    if let Some(c) = &args.lp_coverage {
        cfg.lp_coverage = parse_coverage(c)?;
    }
    cfg.validate().context("invalid scenario")?;
    let opts = RunOptions {
        adversary: args.adversary.parse::<AdversaryMode>().map_err(anyhow::Error::msg)?,
        metric_threads: args.threads,
    };
    let mut violations = 0;
    for i in 0..args.repeat.max(1) {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(u64::from(i));
        let out = run_scenario(&c, &opts).context("invalid scenario")?;
        let dir = if args.repeat > 1 {
            args.out.join(format!("seed-{}", c.seed))
        } else {
            args.out.clone()
        };
        write_run(&dir, &out)?;
        let t = &out.report.totals;
        println!(
            "seed {}: {} rounds, {} completed, recall {}, precision {}, {} violation(s), digest {}",
            c.seed,
            t.rounds,
            t.completed_rounds,
            fmt_opt(t.recall_full),
            fmt_opt(t.precision),
            out.report.violations(),
            out.report.transcript_digest
        );
        violations += out.report.violations();
    }
    Ok(if violations > 0 { EXIT_VIOLATIONS } else { 0 })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.3}"))
}

fn registry(path: &Path) -> Result<KeyRegistry> {
    KeyRegistry::from_json(&read(path)?).with_context(|| format!("in {}", path.display()))
}

fn audit_cmd(evidence: &Path, itpa: &Path, registry_path: &Path) -> Result<u8, Failure> {
    let reg = registry(registry_path)?;
    let records = parse_itpa_records(&read(itpa)?).with_context(|| format!("in {}", itpa.display()))?;
    let evidence_text = read(evidence)?;
    let report = match parse_evidence(&evidence_text) {
        Ok(ev) => audit(&ev, &records, &reg),
        Err(e) => AuditReport {
            integrity_errors: vec![geotrace::auditor::IntegrityError {
                tx: None,
                reason: e.to_string(),
            }],
            ..AuditReport::default()
        },
    };
    println!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
    if !report.integrity_errors.is_empty() {
        return Err(Failure::Integrity(format!("{} evidence record(s) failed verification", report.integrity_errors.len())));
    }
    Ok(if report.violations.is_empty() { 0 } else { EXIT_VIOLATIONS })
}

fn replay_cmd(transcript: &Path, registry_path: &Path) -> Result<u8, Failure> {
    let reg = registry(registry_path)?;
    let report = replay_jsonl(&read(transcript)?, &reg);
    println!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
    if report.is_clean() {
        Ok(0)
    } else {
        Err(Failure::Integrity(format!("{} of {} entries failed", report.failures.len(), report.entries)))
    }
}

fn world_cmd(scenario: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<u8, Failure> {
    let mut cfg = load_config(scenario)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let world = World::generate(&cfg).context("invalid scenario")?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let create = |name: &str| {
        let p = out.join(name);
        fs::File::create(&p).with_context(|| format!("creating {}", p.display()))
    };
    world.write_pois(create("pois.csv")?).context("writing pois.csv")?;
    world
        .write_reported_traces(std::io::BufWriter::new(create("traces.csv")?))
        .context("writing traces.csv")?;
    println!("world {}", world.digest());
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Audit {
            evidence,
            itpa,
            registry,
        } => audit_cmd(&evidence, &itpa, &registry),
        Command::Replay { transcript, registry } => replay_cmd(&transcript, &registry),
        Command::World { scenario, seed, out } => world_cmd(scenario.as_deref(), seed, &out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Integrity(msg)) => {
            eprintln!("integrity error: {msg}");
            ExitCode::from(EXIT_INTEGRITY)
        }
    }
}
