//! Study files, run logs (JSON lines) and reports (CSV + JSON summary).

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use carm_core::evaluation::{run_study, summarize, ArmSummary, EvaluationError, MethodArm, RunEvent, RunLog, RunReport, StudyScenario};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("line {line}: {source}")]
    Line { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A study: the runs to evaluate, which to leave out and the published
/// per-view acquisition rate to check against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyFile {
    pub scenarios: Vec<StudyScenario>,
    /// Run ids left out of the aggregate statistics.
    #[serde(default)]
    pub exclude: Vec<String>,
    /// Reported X-rays per view for the conventional arm, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_xrays_per_view: Option<f64>,
    #[serde(default)]
    pub operator: crate::operator::OperatorModel,
}

impl StudyFile {
    pub fn load(path: &Path) -> Result<Self, StudyError> {
        let text = std::fs::read_to_string(path).map_err(|source| StudyError::Io { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|source| StudyError::Parse { path: path.into(), source })
    }
}

/// Parses a JSON-lines run log; blank lines are skipped.
pub fn parse_run_log<R: BufRead>(r: R) -> Result<RunLog, StudyError> {
    let mut events = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|source| StudyError::Io { path: PathBuf::from("<run log>"), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let e: RunEvent = serde_json::from_str(&line).map_err(|source| StudyError::Line { line: i + 1, source })?;
        events.push(e);
    }
    Ok(RunLog::new(events)?)
}

pub fn read_run_log(path: &Path) -> Result<RunLog, StudyError> {
    let file = std::fs::File::open(path).map_err(|source| StudyError::Io { path: path.into(), source })?;
    parse_run_log(std::io::BufReader::new(file))
}

pub fn write_run_log<W: Write>(mut w: W, log: &RunLog) -> std::io::Result<()> {
    for e in log.events() {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Published versus computed acquisitions per view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub reported: f64,
    pub total_xrays: usize,
    pub view_count: usize,
    pub computed: f64,
    /// `reported` differs from `total_xrays / view_count` at two decimals.
    pub discrepancy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub excluded_runs: Vec<String>,
    pub arms: Vec<ArmSummary>,
    pub runs: Vec<RunReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xray_rate_check: Option<RateCheck>,
    pub ground_truth_source: String,
}

pub fn evaluate(study: &StudyFile, log: &RunLog) -> Result<StudySummary, StudyError> {
    let runs = study
        .scenarios
        .iter()
        .map(|s| run_study(s, log))
        .collect::<Result<Vec<_>, _>>()?;
    let arms = summarize(&runs, &study.exclude)?;
    let xray_rate_check = study.expected_xrays_per_view.and_then(|reported| {
        let conv = arms.iter().find(|a| a.arm == MethodArm::Conventional)?;
        let round2 = |x: f64| (x * 100.0).round();
        Some(RateCheck {
            reported,
            total_xrays: conv.total_xrays,
            view_count: conv.view_count,
            computed: conv.xrays_per_view,
            discrepancy: round2(reported) != round2(conv.xrays_per_view),
        })
    });
    if let Some(c) = xray_rate_check.as_ref().filter(|c| c.discrepancy) {
        log::warn!(
            "reported {} X-rays per view, but {} over {} views is {:.4}",
            c.reported,
            c.total_xrays,
            c.view_count,
            c.computed
        );
    }
    Ok(StudySummary {
        excluded_runs: study.exclude.clone(),
        arms,
        runs,
        xray_rate_check,
        ground_truth_source: "simulator state".to_string(),
    })
}

pub const CSV_HEADER: [&str; 8] = ["run", "view", "arm", "dist_mm", "angle_deg", "first_try_px", "final_px", "xray_count"];

/// One row per view of every run not in `excluded`.
pub fn write_report_csv<W: Write>(w: W, runs: &[RunReport], excluded: &[String]) -> Result<(), StudyError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in runs.iter().filter(|r| !excluded.contains(&r.run)) {
        for v in &r.views {
            out.write_record([
                v.run.clone(),
                v.view.clone(),
                v.arm.to_string(),
                v.delta.distance.to_string(),
                v.delta.angle.to_string(),
                opt(v.first_try_px),
                opt(v.final_px),
                v.xray_count.to_string(),
            ])?;
        }
    }
    out.flush().map_err(|e| StudyError::Io { path: PathBuf::from("<csv>"), source: e })?;
    Ok(())
}

/// Writes the CSV to `csv_path` and the JSON summary next to it.
pub fn write_outputs(summary: &StudySummary, csv_path: &Path) -> Result<PathBuf, StudyError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| StudyError::Io { path: p, source }
    };
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut buf = Vec::new();
    write_report_csv(&mut buf, &summary.runs, &summary.excluded_runs)?;
    std::fs::write(csv_path, buf).map_err(io(csv_path))?;
    let json_path = csv_path.with_extension("json");
    let text = serde_json::to_string_pretty(summary).map_err(|source| StudyError::Parse { path: json_path.clone(), source })?;
    std::fs::write(&json_path, text + "\n").map_err(io(&json_path))?;
    Ok(json_path)
}
