//! Run artifacts.
//!
//! A record is a UTF-8 text file: a short header (format version, command and
//! the run configuration as canonical JSON) followed by named sections of CSV.
//!
//! ```text
//! fop-run-record
//! version,1.0
//! command,toy
//! config,{"init":[-4.0,-4.0],...}
//! [summary]
//! converged,true
//! ...
//! [series]
//! t,loss,grad_norm,p_norm,theta...
//! 0,1090.0,152.8,1.0,-4.0,-4.0
//! [snapshots]
//! t,layer,mode,rows,cols,values...
//! 0,0,full,2,2,1.0,0.0,0.0,1.0
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so reading a record back
//! gives bit-identical values. Empty fields mean "absent".

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{FopError, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::tensor::{spectral_norm_psd, Mat};

pub const FORMAT_VERSION: &str = "1.0";
pub const FORMAT_MAJOR: u32 = 1;
const MAGIC: &str = "fop-run-record";

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Summary {
    pub converged: bool,
    pub diverged: bool,
    /// Reason the run stopped early, if it did.
    pub failure: Option<String>,
    pub iterations: u64,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub final_accuracy: Option<f64>,
    /// The only field that differs between identical runs.
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesRow {
    pub t: u64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Largest spectral norm over the effective preconditioners, when cheap to compute.
    pub p_norm: Option<f64>,
    /// Parameters, recorded for problems of dimension at most 4.
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngleRow {
    pub t: u64,
    pub layer: usize,
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub t: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

/// Effective preconditioner of one layer at step `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub t: u64,
    pub layer: usize,
    pub mode: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Snapshot {
    pub fn matrix(&self) -> Result<Mat> {
        Mat::new(self.rows, self.cols, self.data.clone())
    }
}

/// Final `M` and hyper-optimizer buffers of one preconditioner.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateRow {
    pub layer: usize,
    /// `m`, `adam_m` or `adam_v`.
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub version: String,
    pub command: String,
    /// Canonical (key-sorted) echo of the configuration that produced the run.
    pub config: serde_json::Value,
    pub summary: Summary,
    pub series: Vec<SeriesRow>,
    pub angles: Vec<AngleRow>,
    pub evals: Vec<EvalRow>,
    pub snapshots: Vec<Snapshot>,
    pub precond_state: Vec<StateRow>,
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(f).unwrap_or_default()
}

fn push_values(line: &mut String, values: &[f64]) {
    for v in values {
        line.push(',');
        line.push_str(&f(*v));
    }
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| FopError::Record(format!("bad number {s:?} in {what}")))
}

fn parse_opt(s: &str, what: &str) -> Result<Option<f64>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(s, what).map(Some)
    }
}

fn parse_int<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| FopError::Record(format!("bad integer {s:?} in {what}")))
}

fn parse_values(fields: &[&str], what: &str) -> Result<Vec<f64>> {
    fields.iter().map(|s| parse_f64(s, what)).collect()
}

fn need<'a>(fields: &[&'a str], n: usize, what: &str) -> Result<()> {
    if fields.len() < n {
        return Err(FopError::Record(format!("{what} row has {} fields, need {n}", fields.len())));
    }
    Ok(())
}

/// Checks the major version of a format string.
pub fn check_version(version: &str) -> Result<()> {
    let major = version.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(FORMAT_MAJOR) {
        return Err(FopError::UnsupportedVersion { found: version.to_string(), supported: FORMAT_MAJOR });
    }
    Ok(())
}

impl RunRecord {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        // round-tripping through Value sorts object keys
        let config = serde_json::to_value(config)?;
        Ok(Self {
            version: FORMAT_VERSION.into(),
            command: command.into(),
            config,
            summary: Summary::default(),
            series: Vec::new(),
            angles: Vec::new(),
            evals: Vec::new(),
            snapshots: Vec::new(),
            precond_state: Vec::new(),
        })
    }

    /// The optimizer section of the config echo, if present.
    pub fn optimizer_config(&self) -> Option<OptimizerConfig> {
        serde_json::from_value(self.config.get("optimizer")?.clone()).ok()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.summary;
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "version,{}", self.version);
        let _ = writeln!(out, "command,{}", self.command);
        let _ = writeln!(out, "config,{}", self.config);
        out.push_str("[summary]\n");
        let failure = s.failure.as_deref().unwrap_or("").replace(['\n', '\r'], " ");
        let _ = writeln!(out, "converged,{}", s.converged);
        let _ = writeln!(out, "diverged,{}", s.diverged);
        let _ = writeln!(out, "failure,{failure}");
        let _ = writeln!(out, "iterations,{}", s.iterations);
        let _ = writeln!(out, "final_loss,{}", f(s.final_loss));
        let _ = writeln!(out, "final_grad_norm,{}", f(s.final_grad_norm));
        let _ = writeln!(out, "final_accuracy,{}", opt(s.final_accuracy));
        let _ = writeln!(out, "wall_clock_s,{}", f(s.wall_clock_s));

        out.push_str("[series]\nt,loss,grad_norm,p_norm,theta...\n");
        for r in &self.series {
            let mut line = format!("{},{},{},{}", r.t, f(r.loss), f(r.grad_norm), opt(r.p_norm));
            push_values(&mut line, &r.theta);
            out.push_str(&line);
            out.push('\n');
        }
        out.push_str("[angles]\nt,layer,angle\n");
        for r in &self.angles {
            let _ = writeln!(out, "{},{},{}", r.t, r.layer, f(r.angle));
        }
        out.push_str("[evals]\nt,epoch,train_loss,test_loss,test_accuracy\n");
        for r in &self.evals {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.t,
                r.epoch,
                f(r.train_loss),
                f(r.test_loss),
                f(r.test_accuracy)
            );
        }
        out.push_str("[snapshots]\nt,layer,mode,rows,cols,values...\n");
        for r in &self.snapshots {
            let mut line = format!("{},{},{},{},{}", r.t, r.layer, r.mode, r.rows, r.cols);
            push_values(&mut line, &r.data);
            out.push_str(&line);
            out.push('\n');
        }
        out.push_str("[precond_state]\nlayer,name,rows,cols,values...\n");
        for r in &self.precond_state {
            let mut line = format!("{},{},{},{}", r.layer, r.name, r.rows, r.cols);
            push_values(&mut line, &r.data);
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(FopError::Record("not a run record (missing header line)".into()));
        }
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().unwrap_or_default();
            match line.split_once(',') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                _ => Err(FopError::Record(format!("expected header field {key:?}, found {line:?}"))),
            }
        };
        let version = header("version")?;
        check_version(&version)?;
        let command = header("command")?;
        let config: serde_json::Value = serde_json::from_str(&header("config")?)?;
        let mut rec = RunRecord {
            version,
            command,
            config,
            summary: Summary::default(),
            series: Vec::new(),
            angles: Vec::new(),
            evals: Vec::new(),
            snapshots: Vec::new(),
            precond_state: Vec::new(),
        };

        let mut section = String::new();
        let mut skip_header = false;
        for line in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.to_string();
                skip_header = section != "summary";
                continue;
            }
            if skip_header {
                skip_header = false;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            match section.as_str() {
                "summary" => rec.parse_summary_line(line)?,
                "series" => {
                    need(&fields, 4, "series")?;
                    rec.series.push(SeriesRow {
                        t: parse_int(fields[0], "series")?,
                        loss: parse_f64(fields[1], "series")?,
                        grad_norm: parse_f64(fields[2], "series")?,
                        p_norm: parse_opt(fields[3], "series")?,
                        theta: parse_values(&fields[4..], "series")?,
                    });
                }
                "angles" => {
                    need(&fields, 3, "angles")?;
                    rec.angles.push(AngleRow {
                        t: parse_int(fields[0], "angles")?,
                        layer: parse_int(fields[1], "angles")?,
                        angle: parse_f64(fields[2], "angles")?,
                    });
                }
                "evals" => {
                    need(&fields, 5, "evals")?;
                    rec.evals.push(EvalRow {
                        t: parse_int(fields[0], "evals")?,
                        epoch: parse_int(fields[1], "evals")?,
                        train_loss: parse_f64(fields[2], "evals")?,
                        test_loss: parse_f64(fields[3], "evals")?,
                        test_accuracy: parse_f64(fields[4], "evals")?,
                    });
                }
                "snapshots" => {
                    need(&fields, 5, "snapshots")?;
                    let snap = Snapshot {
                        t: parse_int(fields[0], "snapshots")?,
                        layer: parse_int(fields[1], "snapshots")?,
                        mode: fields[2].to_string(),
                        rows: parse_int(fields[3], "snapshots")?,
                        cols: parse_int(fields[4], "snapshots")?,
                        data: parse_values(&fields[5..], "snapshots")?,
                    };
                    if snap.data.len() != snap.rows * snap.cols {
                        return Err(FopError::Record(format!(
                            "snapshot at t={} has {} values for a {}x{} matrix",
                            snap.t,
                            snap.data.len(),
                            snap.rows,
                            snap.cols
                        )));
                    }
                    rec.snapshots.push(snap);
                }
                "precond_state" => {
                    need(&fields, 4, "precond_state")?;
                    rec.precond_state.push(StateRow {
                        layer: parse_int(fields[0], "precond_state")?,
                        name: fields[1].to_string(),
                        rows: parse_int(fields[2], "precond_state")?,
                        cols: parse_int(fields[3], "precond_state")?,
                        data: parse_values(&fields[4..], "precond_state")?,
                    });
                }
                other => return Err(FopError::Record(format!("unknown section [{other}]"))),
            }
        }
        Ok(rec)
    }

    fn parse_summary_line(&mut self, line: &str) -> Result<()> {
        let (key, value) = line
            .split_once(',')
            .ok_or_else(|| FopError::Record(format!("bad summary line {line:?}")))?;
        let s = &mut self.summary;
        let flag = |v: &str| match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(FopError::Record(format!("bad boolean {v:?} for {key}"))),
        };
        match key {
            "converged" => s.converged = flag(value)?,
            "diverged" => s.diverged = flag(value)?,
            "failure" => s.failure = (!value.is_empty()).then(|| value.to_string()),
            "iterations" => s.iterations = parse_int(value, key)?,
            "final_loss" => s.final_loss = parse_f64(value, key)?,
            "final_grad_norm" => s.final_grad_norm = parse_f64(value, key)?,
            "final_accuracy" => s.final_accuracy = parse_opt(value, key)?,
            "wall_clock_s" => s.wall_clock_s = parse_f64(value, key)?,
            _ => return Err(FopError::Record(format!("unknown summary field {key:?}"))),
        }
        Ok(())
    }

    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Replaces `path` with `bytes` so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| FopError::Config(format!("output path {} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

/// Effective preconditioners of every FOP layer whose dimension is at most `max_dim`.
pub fn snapshot_preconditioners(opt: &Optimizer, t: u64, max_dim: usize) -> Result<Vec<Snapshot>> {
    let mut out = Vec::new();
    for (i, pre) in opt.preconditioners() {
        if pre.dim() > max_dim {
            continue;
        }
        let p = pre.effective_matrix()?;
        out.push(Snapshot {
            t,
            layer: opt.specs()[i].layer,
            mode: pre.config().mode.tag().to_string(),
            rows: p.rows(),
            cols: p.cols(),
            data: p.into_vec(),
        });
    }
    Ok(out)
}

/// Largest spectral norm among the effective preconditioners, or `None` when
/// there are none or any is larger than `max_dim` (too costly per step).
pub fn preconditioner_norm(opt: &Optimizer, max_dim: usize) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for (_, pre) in opt.preconditioners() {
        if pre.dim() > max_dim {
            return Ok(None);
        }
        let norm = spectral_norm_psd(&pre.effective_matrix()?)?;
        best = Some(best.map_or(norm, |b| b.max(norm)));
    }
    Ok(best)
}

/// `M` and its Adam moments for every FOP layer whose dimension is at most `max_dim`.
pub fn preconditioner_state(opt: &Optimizer, max_dim: usize) -> Vec<StateRow> {
    let mut out = Vec::new();
    for (i, pre) in opt.preconditioners() {
        if pre.dim() > max_dim {
            continue;
        }
        let layer = opt.specs()[i].layer;
        let (am, av) = pre.hyper_moments();
        for (name, m) in [("m", pre.m()), ("adam_m", am), ("adam_v", av)] {
            out.push(StateRow {
                layer,
                name: name.into(),
                rows: m.rows(),
                cols: m.cols(),
                data: m.data().to_vec(),
            });
        }
    }
    out
}
