//! Batch command-line front end. [`run`] is the whole program minus
//! process setup, so it can be driven from tests.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::RgbImage;
use rayon::prelude::*;

use crate::backend::Branch;
use crate::config::{EditConfig, GridPoint, JobFile, SweepGrid};
use crate::controller::{analyze, collect_pass, edit_pass, Analysis, CollectedPass, Prompts};
use crate::error::{Error, Result};
use crate::output;
use crate::record::AttnRecord;
use crate::tensor::{mask_below, MaskThreshold};

pub const OUT_ENV: &str = "ADAPEDIT_OUT";
pub const DEMO_PROMPT: &str = "a dog standing on the grass";
pub const DEMO_EDIT: &str = "a dog sitting on the grass";

pub const RECORD_FILE: &str = "record.bin";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Parser)]
#[command(
    name = "adapedit",
    version,
    about = "Spatio-temporal adaptive attention editing for diffusion models"
)]
pub struct Cli {
    /// Job file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `toy` or `remote:<host:port>`.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Defaults to the job's `out_dir`, then $ADAPEDIT_OUT, then `./out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Parallel sweep jobs; defaults to the number of logical cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one edit and write its run directory.
    Edit(EditArgs),
    /// Run a hyper-parameter grid.
    Sweep(SweepArgs),
    /// Dump per-word attention heatmaps from a run directory.
    InspectAttn(InspectArgs),
    /// Edit the built-in example prompts on the toy backend.
    ToyDemo,
}

#[derive(Debug, Args, Default)]
pub struct EditArgs {
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub edit: Option<String>,
    #[arg(long)]
    pub lambda_tau: Option<f32>,
    #[arg(long)]
    pub lambda_sv: Option<f32>,
    #[arg(long)]
    pub lambda_s: Option<f32>,
    #[arg(long)]
    pub alpha_m: Option<f32>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f32>,
    /// Recompute spatial scales at every step.
    #[arg(long)]
    pub per_step: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Grid file; falls back to --config.
    pub grid: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Run directory holding the attention record; falls back to --out, then the job's out_dir.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub step: usize,
    /// Only this word; all words when omitted.
    #[arg(long)]
    pub word: Option<String>,
    #[arg(long, value_enum, default_value_t = BranchArg::Edit)]
    pub branch: BranchArg,
    #[arg(long)]
    pub alpha_m: Option<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BranchArg {
    Original,
    Edit,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Original => Branch::Original,
            BranchArg::Edit => Branch::Edit,
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Edit(a) => cmd_edit(cli, a).map(|_| 0),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::InspectAttn(a) => cmd_inspect_attn(cli, a).map(|_| 0),
        Command::ToyDemo => cmd_toy_demo(cli).map(|_| 0),
    }
}

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn job_file(cli: &Cli, path: Option<&Path>) -> Result<JobFile> {
    let mut job = match path.or(cli.config.as_deref()) {
        Some(p) => JobFile::load(p)?,
        None => JobFile::default(),
    };
    if let Some(b) = &cli.backend {
        job.set("backend", b.clone());
    }
    if let Some(s) = cli.seed {
        job.set("seed", s.to_string());
    }
    if let Some(o) = &cli.out {
        job.set("out_dir", o.display().to_string());
    }
    Ok(job)
}

fn edit_config(cli: &Cli, a: &EditArgs) -> Result<EditConfig> {
    let mut job = job_file(cli, None)?;
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            job.set(k, v);
        }
    };
    put("prompt", a.prompt.clone());
    put("edit", a.edit.clone());
    put("lambda_tau", a.lambda_tau.map(|v| v.to_string()));
    put("lambda_sv", a.lambda_sv.map(|v| v.to_string()));
    put("lambda_s", a.lambda_s.map(|v| v.to_string()));
    put("alpha_m", a.alpha_m.map(|v| v.to_string()));
    put("steps", a.steps.map(|v| v.to_string()));
    put("guidance", a.guidance.map(|v| v.to_string()));
    if a.per_step {
        job.set("dps.per_step", "true");
    }
    job.resolve(&default_out_root())
}

/// Result of one completed edit, as written to its run directory.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub map_divergence: f64,
    pub image_l2: f64,
    pub preserve_steps: usize,
    pub noop: bool,
}

pub fn cmd_edit(cli: &Cli, a: &EditArgs) -> Result<RunReport> {
    run_job(&edit_config(cli, a)?, true)
}

pub fn cmd_toy_demo(cli: &Cli) -> Result<RunReport> {
    let mut job = JobFile::default();
    job.set("prompt", DEMO_PROMPT);
    job.set("edit", DEMO_EDIT);
    if let Some(s) = cli.seed {
        job.set("seed", s.to_string());
    }
    let out = cli.out.clone().unwrap_or_else(|| default_out_root().join("toy-demo"));
    job.set("out_dir", out.display().to_string());
    run_job(&job.resolve(&out)?, true)
}

/// Runs both passes for `cfg` and writes its run directory.
pub fn run_job(cfg: &EditConfig, keep_record: bool) -> Result<RunReport> {
    let mut backend = cfg.backend.connect();
    let prompts = Prompts::new(&cfg.prompt, &cfg.edit, backend.vocabulary())?;
    let pass = collect_pass(&prompts, &cfg.params, backend.as_mut())?;
    let report = finish_job(cfg, &prompts, &pass)?;
    if keep_record {
        pass.record.save(&cfg.out_dir.join(RECORD_FILE))?;
    }
    Ok(report)
}

/// Analysis, editing pass and artifacts for one configuration on top of a
/// shared collecting pass.
fn finish_job(cfg: &EditConfig, prompts: &Prompts, pass: &CollectedPass) -> Result<RunReport> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let (edited, analysis, divergence) = if prompts.alignment.is_noop() {
        log::warn!("edited prompt has no modified words; x_star equals x");
        (pass.original.clone(), None, 0.0)
    } else {
        let analysis = analyze(pass, prompts, &cfg.params)?;
        let mut backend = cfg.backend.connect();
        let out = edit_pass(pass, prompts, &analysis, &cfg.params, backend.as_mut(), &mut |_| {})?;
        (out.image, Some(analysis), out.map_divergence)
    };
    let report = RunReport {
        map_divergence: divergence,
        image_l2: output::image_l2(&pass.original, &edited)?,
        preserve_steps: analysis.as_ref().map_or(0, |a| a.schedule.total_preserve_steps()),
        noop: analysis.is_none(),
    };
    write_run(cfg, prompts, &pass.original, &edited, analysis.as_ref(), &report)?;
    Ok(report)
}

fn write_run(
    cfg: &EditConfig,
    prompts: &Prompts,
    original: &RgbImage,
    edited: &RgbImage,
    analysis: Option<&Analysis>,
    report: &RunReport,
) -> Result<()> {
    let dir = &cfg.out_dir;
    output::write_png(original, &dir.join("x.png"))?;
    output::write_png(edited, &dir.join("x_star.png"))?;
    output::write_scales_csv(&prompts.edit, analysis.map(|a| &a.fwt), &dir.join("scales.csv"))?;
    if let Some(a) = analysis {
        output::write_spatial(&a.spatial, &dir.join("spatial.png"))?;
        output::write_schedule_csv(&prompts.edit, &a.schedule, &dir.join("schedule.csv"))?;
    }
    let mut notes = vec![
        format!("map_divergence = {}", report.map_divergence),
        format!("image_l2 = {}", report.image_l2),
        format!("preserve_steps = {}", report.preserve_steps),
    ];
    if report.noop {
        notes.push("no modified words: x_star is x".into());
    }
    std::fs::write(dir.join(MANIFEST_FILE), cfg.manifest_with_notes(&notes))?;
    Ok(())
}

pub fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<i32> {
    let job = job_file(cli, a.grid.as_deref())?;
    let grid = SweepGrid::from_job(job, &default_out_root())?;
    let base = &grid.base;
    std::fs::create_dir_all(&base.out_dir)?;

    let mut backend = base.backend.connect();
    let prompts = Prompts::new(&base.prompt, &base.edit, backend.vocabulary())?;
    let pass = collect_pass(&prompts, &base.params, backend.as_mut())?;
    drop(backend);
    pass.record.save(&base.out_dir.join(RECORD_FILE))?;

    let points = grid.points();
    let run_all = || -> Vec<Result<RunReport>> {
        points
            .par_iter()
            .map(|&p| finish_job(&grid.config_at(p), &prompts, &pass))
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} jobs: {e}", cli.jobs.unwrap_or(0))))?;
    let results = pool.install(run_all);

    write_summary(&base.out_dir.join("summary.csv"), &points, &results)?;
    let failed = results.iter().filter(|r| r.is_err()).count();
    for (p, r) in points.iter().zip(&results) {
        if let Err(e) = r {
            log::error!("job {} failed: {e}", p.dir_name());
        }
    }
    Ok(if failed == results.len() { 1 } else { 0 })
}

fn write_summary(path: &Path, points: &[GridPoint], results: &[Result<RunReport>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "lambda_tau",
        "lambda_sv",
        "lambda_s",
        "map_divergence",
        "image_l2",
        "preserve_steps",
        "status",
    ])?;
    for (p, r) in points.iter().zip(results) {
        let mut row = vec![
            p.lambda_tau.to_string(),
            p.lambda_sv.to_string(),
            p.lambda_s.to_string(),
        ];
        match r {
            Ok(rep) => row.extend([
                rep.map_divergence.to_string(),
                rep.image_l2.to_string(),
                rep.preserve_steps.to_string(),
                "ok".into(),
            ]),
            Err(e) => row.extend([String::new(), String::new(), String::new(), format!("error: {e}")]),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// File stem for the `n`-th (0-based) occurrence of `word`.
pub fn heatmap_stem(word: &str, occurrence: usize, step: usize) -> String {
    let clean: String = word
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    if occurrence == 0 {
        format!("attn_{clean}_t{step}")
    } else {
        format!("attn_{clean}.{}_t{step}", occurrence + 1)
    }
}

pub fn cmd_inspect_attn(cli: &Cli, a: &InspectArgs) -> Result<Vec<PathBuf>> {
    let run_dir = match (&a.run, &cli.out, &cli.config) {
        (Some(r), _, _) => r.clone(),
        (None, Some(o), _) => o.clone(),
        (None, None, Some(c)) => JobFile::load(c)?
            .get("out_dir")
            .map(PathBuf::from)
            .unwrap_or_else(default_out_root),
        (None, None, None) => default_out_root(),
    };
    let record = AttnRecord::load(&run_dir.join(RECORD_FILE))?;
    if a.step == 0 || a.step > record.steps {
        return Err(Error::Config(format!(
            "--step must lie in 1..={}, got {}",
            record.steps, a.step
        )));
    }
    let alpha = match a.alpha_m {
        Some(v) => MaskThreshold::new(v)?,
        None => manifest_alpha(&run_dir)?.unwrap_or_default(),
    };
    let branch = Branch::from(a.branch);
    let prompt = record.prompt(branch);
    let selected: Vec<usize> = match &a.word {
        None => (0..prompt.words.len()).collect(),
        Some(w) => {
            let hits: Vec<usize> = (0..prompt.words.len())
                .filter(|&i| prompt.words[i].eq_ignore_ascii_case(w))
                .collect();
            if hits.is_empty() {
                return Err(Error::Config(format!(
                    "word `{w}` is not in the prompt `{}`",
                    prompt.text
                )));
            }
            hits
        }
    };
    let maps = record.word_maps(a.step, branch)?;
    let masked = mask_below(&maps, alpha);
    let grid = (crate::backend::FEATURE_GRID, crate::backend::FEATURE_GRID);
    let mut written = Vec::new();
    for i in selected {
        let word = &prompt.words[i];
        let occurrence = prompt.words[..i]
            .iter()
            .filter(|w| w.eq_ignore_ascii_case(word))
            .count();
        let stem = heatmap_stem(&word.to_lowercase(), occurrence, a.step);
        for (m, suffix) in [(&maps, ""), (&masked, "_masked")] {
            let path = run_dir.join(format!("{stem}{suffix}.png"));
            output::write_heatmap(m.row(i), grid, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn manifest_alpha(run_dir: &Path) -> Result<Option<MaskThreshold>> {
    let path = run_dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    match JobFile::load(&path)?.get("alpha_m") {
        Some(v) => {
            let v: f32 = v
                .parse()
                .map_err(|_| Error::Config(format!("bad alpha_m `{v}` in {}", path.display())))?;
            Ok(Some(MaskThreshold::new(v)?))
        }
        None => Ok(None),
    }
}
