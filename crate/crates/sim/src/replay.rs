//! Session logs: one JSON object per line, an optional configuration header
//! followed by the commands in the order they were applied.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::session::{CommandMessage, Outcome, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    SessionConfig { config: Box<SimConfig> },
    Cmd(CommandMessage),
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

/// Appends commands to a log as they are applied.
pub struct SessionRecorder<W: Write> {
    out: W,
}

impl<W: Write> SessionRecorder<W> {
    pub fn new(mut out: W, config: Option<&SimConfig>) -> std::io::Result<Self> {
        if let Some(config) = config {
            write_entry(&mut out, &LogEntry::SessionConfig { config: Box::new(config.clone()) })?;
        }
        Ok(Self { out })
    }

    pub fn record(&mut self, cmd: &CommandMessage) -> std::io::Result<()> {
        write_entry(&mut self.out, &LogEntry::Cmd(cmd.clone()))
    }

    /// Applies `cmd` to `session` and records it.
    pub fn apply(&mut self, session: &mut Session, cmd: &CommandMessage) -> std::io::Result<Outcome> {
        self.record(cmd)?;
        Ok(session.handle_command(cmd))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn write_entry<W: Write>(out: &mut W, entry: &LogEntry) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, entry)?;
    out.write_all(b"\n")?;
    out.flush()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub config: Option<SimConfig>,
    pub commands: Vec<CommandMessage>,
}

pub fn parse_log<R: BufRead>(r: R) -> Result<SessionLog, ReplayError> {
    let mut config = None;
    let mut commands = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| ReplayError::Corrupt { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: LogEntry =
            serde_json::from_str(&line).map_err(|e| ReplayError::Corrupt { line: line_no, message: e.to_string() })?;
        match entry {
            LogEntry::SessionConfig { config: c } if config.is_none() && commands.is_empty() => {
                c.validate().map_err(|e| ReplayError::Corrupt { line: line_no, message: e.to_string() })?;
                config = Some(*c);
            }
            LogEntry::SessionConfig { .. } => {
                return Err(ReplayError::Corrupt {
                    line: line_no,
                    message: "configuration header must come first".into(),
                })
            }
            LogEntry::Cmd(cmd) => commands.push(cmd),
        }
    }
    Ok(SessionLog { config, commands })
}

pub fn read_log(path: &Path) -> Result<SessionLog, ReplayError> {
    let file = std::fs::File::open(path).map_err(|source| ReplayError::Io { path: path.into(), source })?;
    parse_log(std::io::BufReader::new(file))
}

/// Replays `log` into a fresh session; the log's own configuration header
/// wins over `fallback`.
pub fn replay(log: &SessionLog, fallback: &SimConfig) -> Session {
    let mut session = Session::new(log.config.clone().unwrap_or_else(|| fallback.clone()));
    for cmd in &log.commands {
        session.handle_command(cmd);
    }
    session
}

pub fn replay_log(path: &Path, fallback: &SimConfig) -> Result<Session, ReplayError> {
    Ok(replay(&read_log(path)?, fallback))
}
