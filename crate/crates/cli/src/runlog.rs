//! Run log I/O: one JSON value per line. Line 1 is the header (the full
//! config plus run fingerprints), followed by one record per iteration,
//! and a final summary line. An aborted run ends with an abort line
//! instead of a summary.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunHeader {
    pub config: RunConfig,
    pub param_count: usize,
    pub extractor_checksum: String,
    pub version: String,
}

/// Per-iteration record. `phi_*` are null for baseline reweighters;
/// `wallclock_ms` is present only when the config enables it (wall time
/// is nondeterministic and would break byte-identical replay).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleRecord {
    pub iter: u64,
    pub l1: f64,
    pub tv: f64,
    pub perc_terms: [f64; 3],
    pub styl_terms: [f64; 3],
    pub omega_p: [f64; 3],
    pub omega_s: [f64; 3],
    pub phi_p: Option<[f64; 3]>,
    pub phi_s: Option<[f64; 3]>,
    pub guidance: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub pdist: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wallclock_ms: Option<u64>,
}

/// Final line: means of the evaluation metrics over the last (up to) 100
/// iterations, plus the guidance trajectory endpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub iters: u64,
    pub window: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub pdist: f64,
    pub initial_guidance: Option<f64>,
    pub final_guidance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wallclock_ms: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbortRecord {
    pub iter: u64,
    pub context: String,
    pub state_file: Option<String>,
}

#[derive(Debug)]
pub enum LogLine {
    Header(Box<RunHeader>),
    Record(Box<CycleRecord>),
    Summary(RunSummary),
    Abort(AbortRecord),
}

#[derive(Debug)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "log parse error at line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Serialize, Deserialize)]
struct SummaryWrapper {
    summary: RunSummary,
}

#[derive(Serialize, Deserialize)]
struct AbortWrapper {
    abort: AbortRecord,
}

pub fn parse_line(text: &str, lineno: usize) -> Result<LogLine, ParseError> {
    let err = |m: String| ParseError {
        line: lineno,
        message: m,
    };
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| err(format!("invalid JSON: {}", e)))?;
    let obj = value.as_object().ok_or_else(|| err("expected a JSON object".into()))?;
    if obj.contains_key("config") {
        let h: RunHeader = serde_json::from_value(value.clone())
            .map_err(|e| err(format!("bad header: {}", e)))?;
        Ok(LogLine::Header(Box::new(h)))
    } else if obj.contains_key("summary") {
        let s: SummaryWrapper = serde_json::from_value(value.clone())
            .map_err(|e| err(format!("bad summary: {}", e)))?;
        Ok(LogLine::Summary(s.summary))
    } else if obj.contains_key("abort") {
        let a: AbortWrapper = serde_json::from_value(value.clone())
            .map_err(|e| err(format!("bad abort record: {}", e)))?;
        Ok(LogLine::Abort(a.abort))
    } else if obj.contains_key("iter") {
        let r: CycleRecord = serde_json::from_value(value.clone())
            .map_err(|e| err(format!("bad record: {}", e)))?;
        Ok(LogLine::Record(Box::new(r)))
    } else {
        Err(err("unrecognized log line".into()))
    }
}

pub struct ParsedLog {
    pub header: RunHeader,
    pub records: Vec<CycleRecord>,
    pub summary: Option<RunSummary>,
    pub abort: Option<AbortRecord>,
}

pub fn read_log(path: &Path) -> Result<ParsedLog, ParseError> {
    let file = std::fs::File::open(path).map_err(|e| ParseError {
        line: 0,
        message: format!("cannot open {}: {}", path.display(), e),
    })?;
    let reader = std::io::BufReader::new(file);
    let mut header = None;
    let mut records = Vec::new();
    let mut summary = None;
    let mut abort = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ParseError {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, i + 1)? {
            LogLine::Header(h) => header = Some(*h),
            LogLine::Record(r) => records.push(*r),
            LogLine::Summary(s) => summary = Some(s),
            LogLine::Abort(a) => abort = Some(a),
        }
    }
    Ok(ParsedLog {
        header: header.ok_or(ParseError {
            line: 1,
            message: "missing header line".into(),
        })?,
        records,
        summary,
        abort,
    })
}

/// Line-buffered log writer.
pub struct LogWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl LogWriter {
    pub fn create(path: &Path) -> std::io::Result<LogWriter> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        Ok(LogWriter {
            out: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn header(&mut self, h: &RunHeader) -> std::io::Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(h).unwrap())
    }

    pub fn record(&mut self, r: &CycleRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(r).unwrap())
    }

    pub fn summary(&mut self, s: &RunSummary) -> std::io::Result<()> {
        let w = SummaryWrapper { summary: s.clone() };
        writeln!(self.out, "{}", serde_json::to_string(&w).unwrap())
    }

    pub fn abort(&mut self, a: &AbortRecord) -> std::io::Result<()> {
        let w = AbortWrapper { abort: a.clone() };
        writeln!(self.out, "{}", serde_json::to_string(&w).unwrap())
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}
