use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use carm_sim::config::SimConfig;
use carm_sim::replay::{self, SessionRecorder};
use carm_sim::server;
use carm_sim::session::Session;
use carm_sim::study::{self, StudyFile};

#[derive(Parser)]
#[command(name = "carm-sim", version, about = "C-arm repositioning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the session engine behind a WebSocket endpoint at /ws.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Bind address.
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Append every received command to this session log.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Replay a session log and report on the study events it produced.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// CSV output; a JSON summary is written next to it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a study run log against a study file.
    Eval {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        /// CSV output; a JSON summary is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a study with the scripted operator.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// No UI or server is started. Simulation is always headless.
        #[arg(long)]
        headless: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for study_log.jsonl, report.csv and report.json.
        /// Without it the run log is written to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve {
            port,
            config,
            host,
            record,
        } => serve(SocketAddr::new(host, port), config.as_deref(), record.as_deref()),
        Command::Replay { log, report, config } => replay_cmd(&log, &report, config.as_deref()),
        Command::Eval { log, scenario, out } => eval(&log, &scenario, &out),
        Command::Simulate {
            scenario,
            headless: _,
            seed,
            config,
            out,
        } => simulate(&scenario, seed, config.as_deref(), out.as_deref()),
    }
}

fn serve(addr: SocketAddr, config: Option<&Path>, record: Option<&Path>) -> Result<()> {
    let cfg = SimConfig::resolve(config)?;
    let recorder = match record {
        Some(p) => {
            let file = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Some(SessionRecorder::new(BufWriter::new(file), Some(&cfg))?)
        }
        None => None,
    };
    let (handle, _engine) = server::spawn_engine(Session::new(cfg), recorder);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(server::serve(addr, handle))?;
    Ok(())
}

fn replay_cmd(log: &Path, report: &Path, config: Option<&Path>) -> Result<()> {
    let fallback = SimConfig::resolve(config)?;
    let session = replay::replay_log(log, &fallback)?;
    let run = session.study_report()?;
    let summary = study::StudySummary {
        excluded_runs: Vec::new(),
        arms: carm_core::evaluation::summarize(std::slice::from_ref(&run), &[])?,
        runs: vec![run],
        xray_rate_check: None,
        ground_truth_source: "simulator state".to_string(),
    };
    let json = study::write_outputs(&summary, report)?;
    log::info!(
        "replayed to seq {}; wrote {} and {}",
        session.state().seq,
        report.display(),
        json.display()
    );
    Ok(())
}

fn eval(log: &Path, scenario: &Path, out: &Path) -> Result<()> {
    let study_file = StudyFile::load(scenario)?;
    let run_log = study::read_run_log(log)?;
    let summary = study::evaluate(&study_file, &run_log)?;
    let json = study::write_outputs(&summary, out)?;
    log::info!("wrote {} and {}", out.display(), json.display());
    Ok(())
}

fn simulate(scenario: &Path, seed: u64, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let study_file = StudyFile::load(scenario)?;
    let cfg = SimConfig::resolve(config)?;
    let run_log = carm_sim::operator::simulate(&study_file, &cfg, seed)?;
    match out {
        None => {
            let stdout = std::io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            study::write_run_log(&mut w, &run_log)?;
            w.flush()?;
        }
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let log_path = dir.join("study_log.jsonl");
            let mut w = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
            study::write_run_log(&mut w, &run_log)?;
            w.flush()?;
            let summary = study::evaluate(&study_file, &run_log)?;
            study::write_outputs(&summary, &dir.join("report.csv"))?;
            log::info!("wrote {}", dir.display());
        }
    }
    Ok(())
}
