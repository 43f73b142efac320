//! Runtime benchmarking of renderers and leaderboard reports.
//!
//! External runners are timed around the whole `sh -c` invocation, so process
//! launch overhead is part of every measurement.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::canonical::{format_sig, parse_sig, sig_f64, sig_f64_opt, to_canonical_json};
use crate::error::{Error, Result};
use crate::image::{load_image, save_image};
use crate::render::{render_bokeh, DepthMap, RenderConfig};

pub const CSV_HEADER: [&str; 6] = ["team", "framework", "avg_runtime_s", "psnr", "ssim", "mos"];
pub const REPORT_JSON: &str = "leaderboard.json";
pub const REPORT_CSV: &str = "leaderboard.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub team: String,
    #[serde(default)]
    pub framework: String,
    #[serde(default, with = "sig_f64_opt", skip_serializing_if = "Option::is_none")]
    pub avg_runtime_s: Option<f64>,
    #[serde(with = "sig_f64")]
    pub psnr: f64,
    #[serde(with = "sig_f64")]
    pub ssim: f64,
    #[serde(default, with = "sig_f64_opt", skip_serializing_if = "Option::is_none")]
    pub mos: Option<f64>,
}

impl BenchmarkEntry {
    pub fn validate(&self) -> Result<()> {
        if self.team.trim().is_empty() {
            return Err(Error::Validation("entry has an empty team name".into()));
        }
        if let Some(t) = self.avg_runtime_s {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Validation(format!("{}: runtime must be positive, got {t}", self.team)));
            }
        }
        if let Some(m) = self.mos {
            if !(1.0..=5.0).contains(&m) {
                return Err(Error::Validation(format!("{}: MOS must be in [1, 5], got {m}", self.team)));
            }
        }
        if self.psnr.is_nan() || self.ssim.is_nan() {
            return Err(Error::Validation(format!("{}: PSNR and SSIM must be numbers", self.team)));
        }
        Ok(())
    }
}

fn desc(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Rated entries by descending MOS, ties by PSNR, SSIM (both descending) and
/// team name; unrated entries follow in input order.
pub fn make_leaderboard(entries: &[BenchmarkEntry]) -> Vec<BenchmarkEntry> {
    let (mut rated, unrated): (Vec<_>, Vec<_>) = entries.iter().cloned().partition(|e| e.mos.is_some());
    rated.sort_by(|a, b| {
        desc(a.mos.unwrap_or(0.0), b.mos.unwrap_or(0.0))
            .then_with(|| desc(a.psnr, b.psnr))
            .then_with(|| desc(a.ssim, b.ssim))
            .then_with(|| a.team.cmp(&b.team))
    });
    rated.extend(unrated);
    rated
}

fn cell(v: Option<f64>) -> String {
    v.map(format_sig).unwrap_or_default()
}

/// Writes `leaderboard.json` and `leaderboard.csv` into `dir`, in leaderboard order.
pub fn write_report(entries: &[BenchmarkEntry], dir: &Path) -> Result<Vec<PathBuf>> {
    for e in entries {
        e.validate()?;
    }
    let board = make_leaderboard(entries);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(REPORT_JSON);
    std::fs::write(&json_path, to_canonical_json(&board)?).map_err(|e| Error::io(&json_path, e))?;

    let csv_path = dir.join(REPORT_CSV);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Parse(e.to_string()))?;
    w.write_record(CSV_HEADER).map_err(|e| Error::Parse(e.to_string()))?;
    for e in &board {
        w.write_record([
            e.team.clone(),
            e.framework.clone(),
            cell(e.avg_runtime_s),
            format_sig(e.psnr),
            format_sig(e.ssim),
            cell(e.mos),
        ])
        .map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(vec![json_path, csv_path])
}

pub fn read_report_json(path: &Path) -> Result<Vec<BenchmarkEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<BenchmarkEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    let header = r.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Parse(format!("{}: unexpected header", path.display())));
    }
    let num = |s: &str, what: &str, line: usize| {
        parse_sig(s).ok_or_else(|| Error::Parse(format!("{}:{line}: bad {what} {s:?}", path.display())))
    };
    let opt = |s: &str, what: &str, line: usize| if s.is_empty() { Ok(None) } else { num(s, what, line).map(Some) };
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let line = i + 2;
        out.push(BenchmarkEntry {
            team: rec[0].to_string(),
            framework: rec[1].to_string(),
            avg_runtime_s: opt(&rec[2], "runtime", line)?,
            psnr: num(&rec[3], "psnr", line)?,
            ssim: num(&rec[4], "ssim", line)?,
            mos: opt(&rec[5], "mos", line)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunnerKind {
    BuiltinRender,
    ExternalCommand,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerSpec {
    pub kind: RunnerKind,
    /// Shell command with `{input}`, `{depth}` and `{output}` placeholders.
    #[serde(default)]
    pub command: Option<String>,
    #[serde(default)]
    pub warmup_runs: usize,
    #[serde(default = "one")]
    pub timed_runs: usize,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub team: Option<String>,
    #[serde(default)]
    pub framework: Option<String>,
}

fn one() -> usize {
    1
}

impl RunnerSpec {
    pub fn builtin(render: RenderConfig) -> Self {
        Self {
            kind: RunnerKind::BuiltinRender,
            command: None,
            warmup_runs: 0,
            timed_runs: 1,
            render,
            team: None,
            framework: None,
        }
    }

    pub fn external(command: impl Into<String>) -> Self {
        Self {
            kind: RunnerKind::ExternalCommand,
            command: Some(command.into()),
            ..Self::builtin(RenderConfig::default())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timed_runs == 0 {
            return Err(Error::Validation("timed_runs must be at least 1".into()));
        }
        match (self.kind, &self.command) {
            (RunnerKind::ExternalCommand, None) => {
                Err(Error::Validation("external-command runner needs a command".into()))
            }
            (RunnerKind::ExternalCommand, Some(c)) if c.trim().is_empty() => {
                Err(Error::Validation("external-command runner needs a command".into()))
            }
            (RunnerKind::BuiltinRender, _) => self.render.validate(),
            _ => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self =
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One image to process: the input, an optional depth map and where the
/// runner must write its result.
#[derive(Clone, Debug, PartialEq)]
pub struct RunnerJob {
    pub input: PathBuf,
    pub depth: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTiming {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Median over the timed runs.
    #[serde(with = "sig_f64")]
    pub seconds: f64,
    pub runs: Vec<f64>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.to_string_lossy().replace('\'', r"'\''"))
}

fn expand(template: &str, job: &RunnerJob) -> String {
    let depth = job.depth.as_deref().map(shell_quote).unwrap_or_else(|| "''".into());
    template
        .replace("{input}", &shell_quote(&job.input))
        .replace("{depth}", &depth)
        .replace("{output}", &shell_quote(&job.output))
}

fn tail(bytes: &[u8], max: usize) -> String {
    let s = String::from_utf8_lossy(bytes);
    let s = s.trim();
    match s.char_indices().rev().nth(max) {
        Some((i, _)) => format!("...{}", &s[i..]),
        None => s.to_string(),
    }
}

fn run_once(spec: &RunnerSpec, job: &RunnerJob) -> Result<f64> {
    if job.output.exists() {
        std::fs::remove_file(&job.output).map_err(|e| Error::io(&job.output, e))?;
    }
    let start = Instant::now();
    match spec.kind {
        RunnerKind::BuiltinRender => {
            let img = load_image(&job.input)?;
            let depth = match &job.depth {
                Some(d) => DepthMap::load(d)?,
                None => DepthMap::constant(img.height(), img.width(), spec.render.focus_depth)?,
            };
            let out = render_bokeh(&img, &depth, &spec.render)?;
            save_image(&out, &job.output)?;
        }
        RunnerKind::ExternalCommand => {
            let cmd = expand(spec.command.as_deref().unwrap_or_default(), job);
            let out = Command::new("sh")
                .arg("-c")
                .arg(&cmd)
                .output()
                .map_err(|e| Error::Runner(format!("could not launch `{cmd}`: {e}")))?;
            if !out.status.success() {
                return Err(Error::Runner(format!(
                    "`{cmd}` exited with {}; stderr: {}",
                    out.status,
                    tail(&out.stderr, 2000)
                )));
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    if !job.output.is_file() {
        return Err(Error::Runner(format!(
            "runner did not produce {} for {}",
            job.output.display(),
            job.input.display()
        )));
    }
    Ok(elapsed)
}

/// Times the runner on each job strictly sequentially. Warmup runs are
/// executed and discarded; the per-image value is the median of the timed runs.
pub fn time_runner(spec: &RunnerSpec, jobs: &[RunnerJob]) -> Result<Vec<ImageTiming>> {
    spec.validate()?;
    for job in jobs {
        if !job.input.is_file() {
            return Err(Error::NotFound(format!("input {}", job.input.display())));
        }
        if let Some(d) = &job.depth {
            if !d.is_file() {
                return Err(Error::NotFound(format!("depth map {}", d.display())));
            }
        }
        if let Some(parent) = job.output.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut out = Vec::with_capacity(jobs.len());
    for job in jobs {
        for _ in 0..spec.warmup_runs {
            run_once(spec, job)?;
        }
        let runs = (0..spec.timed_runs).map(|_| run_once(spec, job)).collect::<Result<Vec<_>>>()?;
        out.push(ImageTiming {
            input: job.input.clone(),
            output: job.output.clone(),
            seconds: median(&runs),
            runs,
        });
    }
    Ok(out)
}

/// Mean of the per-image medians.
pub fn average_runtime(timings: &[ImageTiming]) -> Option<f64> {
    (!timings.is_empty()).then(|| timings.iter().map(|t| t.seconds).sum::<f64>() / timings.len() as f64)
}
