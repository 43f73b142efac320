use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use bokeh_core::align::{prepare_directory, AlignConfig, RansacParams};
use bokeh_core::bench::{average_runtime, time_runner, write_report, BenchmarkEntry, RunnerJob, RunnerSpec};
use bokeh_core::canonical::{sig_value, to_canonical_json};
use bokeh_core::eval::{evaluate_dirs, image_files};
use bokeh_core::image::{load_image, save_image};
use bokeh_core::render::{render_bokeh, DepthMap, RenderConfig, WorkScale};
use bokeh_core::study::{aggregate, read_ndjson, MosResult, Study, StudyConfig};
use bokeh_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "bokeh", version, about = "Synthetic bokeh rendering, evaluation and study tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align wide/shallow pairs under <root>/wide and <root>/shallow into <root>/aligned.
    Prepare(PrepareArgs),
    /// Render a shallow depth-of-field image from an image and its depth map.
    Render(RenderArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Time a renderer on a directory of inputs and score its outputs.
    Bench(BenchArgs),
    /// Serve the rating study over HTTP.
    StudyServe(StudyServeArgs),
    /// Compute MOS per method from a ratings log.
    StudyAggregate(StudyAggregateArgs),
    /// Build the leaderboard (JSON + CSV) from benchmark entries and MOS results.
    Report(ReportArgs),
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
    #[arg(long, default_value_t = bokeh_core::align::OUTPUT_HEIGHT)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
#[command(after_help = "Precedence: flags override the --config file, which overrides built-in defaults.")]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON render config; any field may be omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: RenderOverrides,
}

#[derive(Args, Default)]
struct RenderOverrides {
    /// Focus plane depth in (0, 1].
    #[arg(long)]
    focus: Option<f64>,
    #[arg(long)]
    max_radius: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    fg_threshold: Option<f64>,
    #[arg(long)]
    fg_softness: Option<f64>,
    /// Working resolution factor: 1, 0.5 or 0.25.
    #[arg(long)]
    work_scale: Option<f64>,
}

impl RenderOverrides {
    fn apply(&self, mut cfg: RenderConfig) -> Result<RenderConfig> {
        if let Some(v) = self.focus {
            cfg.focus_depth = v;
        }
        if let Some(v) = self.max_radius {
            cfg.max_radius = v;
        }
        if let Some(v) = self.layers {
            cfg.num_layers = v;
        }
        if let Some(v) = self.gamma {
            cfg.radiance_gamma = v;
        }
        if let Some(v) = self.fg_threshold {
            cfg.fg_threshold = v;
        }
        if let Some(v) = self.fg_softness {
            cfg.fg_softness = v;
        }
        if let Some(v) = self.work_scale {
            cfg.work_scale = WorkScale::from_factor(v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Aggregate metrics JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-image CSV; defaults to the --out path with a .csv extension.
    #[arg(long)]
    per_image: Option<PathBuf>,
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Runner spec JSON.
    #[arg(long)]
    runner: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    /// Depth maps named like the inputs.
    #[arg(long)]
    depth: Option<PathBuf>,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where runner outputs go; defaults to a folder next to --out.
    #[arg(long)]
    outputs: Option<PathBuf>,
    #[arg(long)]
    team: Option<String>,
}

#[derive(Args)]
struct StudyServeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Directory holding ratings.ndjson; defaults to the config's folder.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Built rating UI to serve at /.
    #[arg(long)]
    ui: Option<PathBuf>,
}

#[derive(Args)]
struct StudyAggregateArgs {
    #[arg(long)]
    ratings: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Benchmark entries: a JSON list of entries or a `bench` report. Repeatable.
    #[arg(long, required = true)]
    entries: Vec<PathBuf>,
    /// MOS results from study-aggregate; matched to entries by team name.
    #[arg(long)]
    mos: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let cfg = AlignConfig {
        output_height: a.height,
        ransac: RansacParams { seed: a.seed, ..RansacParams::default() },
        ..AlignConfig::default()
    };
    if a.height < 2 {
        return Err(Error::Validation("--height must be at least 2".into()));
    }
    let outcomes = prepare_directory(&a.root, &cfg, a.jobs)?;
    let mut failed = 0;
    for o in &outcomes {
        match &o.result {
            Ok(s) => log::info!("{}: {} inliers", o.id, s.inlier_count),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e}", o.id);
            }
        }
    }
    eprintln!("aligned {} of {} pairs", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        return Err(Error::Estimation(format!("{failed} pairs could not be aligned")));
    }
    Ok(())
}

fn render_config(path: Option<&Path>, overrides: &RenderOverrides) -> Result<RenderConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?
        }
        None => RenderConfig::default(),
    };
    overrides.apply(base)
}

fn render(a: RenderArgs) -> Result<()> {
    let cfg = render_config(a.config.as_deref(), &a.overrides)?;
    let img = load_image(&a.input)?;
    let depth = DepthMap::load(&a.depth)?;
    let out = render_bokeh(&img, &depth, &cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_image(&out, &a.out)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ev = evaluate_dirs(&a.pred, &a.gt, a.jobs)?;
    let csv_path = a.per_image.unwrap_or_else(|| a.out.with_extension("csv"));
    write_text(&a.out, &ev.summary_json()?)?;
    write_text(&csv_path, &ev.per_image_csv()?)?;
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let spec = RunnerSpec::load(&a.runner)?;
    let inputs = image_files(&a.inputs)?;
    if inputs.is_empty() {
        return Err(Error::Validation(format!("no images in {}", a.inputs.display())));
    }
    let out_dir = a.outputs.clone().unwrap_or_else(|| a.out.with_extension("outputs"));
    let mut jobs = Vec::new();
    for (id, input) in &inputs {
        let depth = match &a.depth {
            Some(d) => {
                let p = d.join(format!("{id}.png"));
                if !p.is_file() {
                    return Err(Error::Validation(format!("missing depth map for {id}")));
                }
                Some(p)
            }
            None => None,
        };
        jobs.push(RunnerJob { input: input.clone(), depth, output: out_dir.join(format!("{id}.png")) });
    }
    let timings = time_runner(&spec, &jobs)?;
    let ev = evaluate_dirs(&out_dir, &a.gt, default_jobs())?;
    let means = ev.means();
    let team = a.team.or(spec.team.clone()).unwrap_or_else(|| "unnamed".into());
    let entry = BenchmarkEntry {
        team,
        framework: spec.framework.clone().unwrap_or_default(),
        avg_runtime_s: average_runtime(&timings),
        psnr: means["psnr"],
        ssim: means["ssim"],
        mos: None,
    };
    let per_image: Vec<Value> = inputs
        .keys()
        .zip(&timings)
        .map(|(id, t)| json!({"id": id, "seconds": sig_value(t.seconds), "runs": t.runs}))
        .collect();
    let report = json!({
        "entry": entry,
        "timings": per_image,
        "metrics": means.iter().map(|(k, v)| (k.to_string(), sig_value(*v))).collect::<serde_json::Map<_, _>>(),
        "warmup_runs": spec.warmup_runs,
        "timed_runs": spec.timed_runs,
    });
    write_text(&a.out, &to_canonical_json(&report)?)
}

fn study_serve(a: StudyServeArgs) -> Result<()> {
    let cfg = StudyConfig::load(&a.config)?;
    let data_dir = a
        .data_dir
        .unwrap_or_else(|| a.config.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    let study = Study::open(cfg, &data_dir)?;
    let token = std::env::var(bokeh_study::TOKEN_ENV).ok();
    if token.as_deref().is_none_or(str::is_empty) {
        log::warn!("{} not set; results and export endpoints are disabled", bokeh_study::TOKEN_ENV);
    }
    let state = bokeh_study::AppState::new(Arc::new(study), token);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Runner(e.to_string()))?;
    rt.block_on(bokeh_study::serve(state, a.ui, a.listen, |addr| {
        println!("listening on http://{addr}");
    }))
    .map_err(|e| Error::Runner(format!("server on {}: {e}", a.listen)))
}

fn study_aggregate(a: StudyAggregateArgs) -> Result<()> {
    let file = std::fs::File::open(&a.ratings).map_err(|e| Error::io(&a.ratings, e))?;
    let records = read_ndjson(file)?;
    write_text(&a.out, &to_canonical_json(&aggregate(&records))?)
}

fn load_entries(path: &Path) -> Result<Vec<BenchmarkEntry>> {
    let v = read_json(path)?;
    let v = match v {
        Value::Object(mut m) if m.contains_key("entry") => Value::Array(vec![m.remove("entry").unwrap_or_default()]),
        other => other,
    };
    serde_json::from_value(v).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn report(a: ReportArgs) -> Result<()> {
    let mut entries = Vec::new();
    for p in &a.entries {
        entries.extend(load_entries(p)?);
    }
    if let Some(p) = &a.mos {
        let mos: Vec<MosResult> =
            serde_json::from_value(read_json(p)?).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?;
        for m in mos {
            match entries.iter_mut().find(|e| e.team == m.method) {
                Some(e) => e.mos = Some(m.mos),
                None => log::warn!("MOS for {} has no matching entry", m.method),
            }
        }
    }
    for f in write_report(&entries, &a.out_dir)? {
        println!("{}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Render(a) => render(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Bench(a) => bench(a),
        Command::StudyServe(a) => study_serve(a),
        Command::StudyAggregate(a) => study_aggregate(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
