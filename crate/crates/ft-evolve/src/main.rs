//! Command-line driver: explore / refine / loop / oneshot / eval / report.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use ft_evolve::eval::{cross_validated_score, EvaluationConfig};
use ft_evolve::explore::{run_exploration, ExplorerConfig};
use ft_evolve::expr::{parse_sequence, render_sequence, OperatorSet, RenderStyle};
use ft_evolve::library::{DatasetSignature, ExperienceLibrary, SelectionParams};
use ft_evolve::pipeline::{
    run_closed_loop, run_one_shot, LoopConfig, RunMode, RunReport,
};
use ft_evolve::policy::{
    GenerationPolicy, GenerationRules, HttpPolicy, HttpPolicyConfig, MockPolicy,
};
use ft_evolve::refine::{
    build_trajectory, check_sequence, enhance_trajectory, filter_outliers, CheckThresholds,
};
use ft_evolve::report::{emit_artifacts, read_jsonl, write_jsonl, write_summary};
use ft_evolve::table::{execute_sequence, load_csv, Dataset, ExecutionMode, TaskKind};

#[derive(Parser)]
#[command(name = "ft-evolve", version, about = "Closed-loop feature transformation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Classification,
    Regression,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => TaskKind::Classification,
            TaskArg::Regression => TaskKind::Regression,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    Mock,
    Http,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OneShotMode {
    Fixed,
    Resample,
}

#[derive(Args, Default)]
struct CommonOpts {
    /// CSV dataset (header row; target selected by --target or last column)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Target column name
    #[arg(long)]
    target: Option<String>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// JSON run-config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experience library JSON (created if absent)
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Loop iterations T
    #[arg(long)]
    iterations: Option<usize>,
    /// Generate calls per iteration B
    #[arg(long)]
    candidates: Option<usize>,
    /// Verified candidates written back per iteration
    #[arg(long = "keep-top")]
    keep_top: Option<usize>,
    /// Entropy weight in the context selection objective
    #[arg(long)]
    lambda: Option<f64>,
    /// Redundancy weight in the context selection objective
    #[arg(long)]
    mu: Option<f64>,
    /// Few-shot demonstrations per prompt
    #[arg(long = "context-size")]
    context_size: Option<usize>,
    /// Evaluation concurrency cap (evaluations currently run serially)
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for run artifacts
    #[arg(long)]
    out: Option<PathBuf>,
    /// Chat-completions endpoint base URL (http policy)
    #[arg(long = "base-url")]
    base_url: Option<String>,
    /// Model name sent to the endpoint (http policy)
    #[arg(long)]
    model: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage I: reward-driven exploration; writes/extends the library file
    Explore {
        #[command(flatten)]
        opts: CommonOpts,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Stage II: re-check library experiences, filter outliers, optionally enhance
    Refine {
        #[command(flatten)]
        opts: CommonOpts,
        /// Prompt the policy for gap-filling trajectory variants
        #[arg(long)]
        enhance: bool,
    },
    /// Stage III: the closed generate-verify-write-back loop
    Loop {
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// One-shot baseline with the same call budget, library left untouched
    Oneshot {
        #[command(flatten)]
        opts: CommonOpts,
        #[arg(long, value_enum, default_value = "fixed")]
        mode: OneShotMode,
    },
    /// Score a dataset, optionally after applying a sequence file
    Eval {
        #[command(flatten)]
        opts: CommonOpts,
        /// File containing one postfix sequence
        #[arg(long)]
        sequence: Option<PathBuf>,
    },
    /// Turn a run JSONL into CSV tables and SVG charts
    Report {
        /// Run trace (JSONL, one record per call)
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// JSON config file; every field optional, flags take precedence.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    data: Option<PathBuf>,
    target: Option<String>,
    task: Option<TaskKind>,
    library: Option<PathBuf>,
    policy: Option<String>,
    base_url: Option<String>,
    model: Option<String>,
    audit_log: Option<PathBuf>,
    seed: Option<u64>,
    iterations: Option<usize>,
    candidates: Option<usize>,
    keep_top: Option<usize>,
    dedup_threshold: Option<f64>,
    lambda: Option<f64>,
    mu: Option<f64>,
    context_size: Option<usize>,
    episodes: Option<usize>,
    out: Option<PathBuf>,
}

struct Settings {
    dataset: Dataset,
    library_path: PathBuf,
    policy: PolicyArg,
    base_url: Option<String>,
    model: Option<String>,
    audit_log: Option<PathBuf>,
    seed: u64,
    loop_cfg: LoopConfig,
    episodes: usize,
    out_dir: PathBuf,
}

type CmdResult<T> = Result<T, Box<dyn Error>>;

fn resolve(opts: &CommonOpts) -> CmdResult<(Settings, RunConfigFile)> {
    let file: RunConfigFile = match &opts.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => RunConfigFile::default(),
    };
    let data = opts
        .data
        .clone()
        .or_else(|| file.data.clone())
        .ok_or("missing --data (or `data` in the config file)")?;
    let task: TaskKind = opts
        .task
        .map(Into::into)
        .or(file.task)
        .unwrap_or(TaskKind::Regression);
    let target = opts.target.clone().or_else(|| file.target.clone());
    let dataset = load_csv(&data, target.as_deref(), task)?;

    let library_path = opts
        .library
        .clone()
        .or_else(|| file.library.clone())
        .unwrap_or_else(|| PathBuf::from("library.json"));
    let policy = opts.policy.unwrap_or(match file.policy.as_deref() {
        Some("http") => PolicyArg::Http,
        _ => PolicyArg::Mock,
    });
    let seed = opts.seed.or(file.seed).unwrap_or(0);

    let mut selection = SelectionParams::default();
    if let Some(k) = opts.context_size.or(file.context_size) {
        selection.context_size = k;
    }
    if let Some(l) = opts.lambda.or(file.lambda) {
        selection.lambda = l;
    }
    if let Some(m) = opts.mu.or(file.mu) {
        selection.mu = m;
    }

    let mut loop_cfg = LoopConfig {
        selection,
        seed,
        ..LoopConfig::default()
    };
    if let Some(t) = opts.iterations.or(file.iterations) {
        loop_cfg.iterations = t;
    }
    if let Some(b) = opts.candidates.or(file.candidates) {
        loop_cfg.candidates_per_iteration = b;
    }
    if let Some(k) = opts.keep_top.or(file.keep_top) {
        loop_cfg.keep_top_per_iteration = k;
    }
    if let Some(d) = file.dedup_threshold {
        loop_cfg.dedup_threshold = d;
    }

    let settings = Settings {
        dataset,
        library_path,
        policy,
        base_url: opts.base_url.clone().or_else(|| file.base_url.clone()),
        model: opts.model.clone().or_else(|| file.model.clone()),
        audit_log: file.audit_log.clone(),
        seed,
        loop_cfg,
        episodes: file.episodes.unwrap_or(50),
        out_dir: opts
            .out
            .clone()
            .or_else(|| file.out.clone())
            .unwrap_or_else(|| PathBuf::from("out")),
    };
    Ok((settings, file))
}

fn make_policy(s: &Settings) -> CmdResult<Box<dyn GenerationPolicy>> {
    match s.policy {
        PolicyArg::Mock => Ok(Box::new(MockPolicy::new(GenerationRules::for_dataset(
            &s.dataset,
        )))),
        PolicyArg::Http => {
            let base = s
                .base_url
                .clone()
                .ok_or("http policy needs --base-url (or `base_url` in the config file)")?;
            let model = s.model.clone().unwrap_or_else(|| "default".into());
            let mut cfg = HttpPolicyConfig::new(base, model);
            cfg.audit_log = s.audit_log.clone();
            Ok(Box::new(HttpPolicy::new(cfg)))
        }
    }
}

fn load_or_new_library(path: &Path) -> CmdResult<ExperienceLibrary> {
    if path.exists() {
        Ok(ExperienceLibrary::load(path)?)
    } else {
        Ok(ExperienceLibrary::new())
    }
}

/// The loop needs at least `context_size` experiences for the dataset; run a
/// short exploration pass to seed the library when the pool is smaller.
fn ensure_seeded(
    lib: &mut ExperienceLibrary,
    s: &Settings,
    eval_cfg: &EvaluationConfig,
) -> CmdResult<()> {
    let sig = DatasetSignature::of(&s.dataset);
    let need = s.loop_cfg.selection.context_size;
    if lib.for_dataset(&sig).len() >= need {
        return Ok(());
    }
    let cfg = ExplorerConfig {
        episodes: s.episodes,
        seed: s.seed,
        keep_top: need.max(10),
        ..ExplorerConfig::default()
    };
    let found = run_exploration(&s.dataset, eval_cfg, &cfg, &CheckThresholds::default())?;
    lib.write_back(found, s.loop_cfg.dedup_threshold);
    let have = lib.for_dataset(&sig).len();
    if have < need {
        return Err(format!(
            "exploration produced only {have} experiences, need {need}; \
             raise `episodes` or lower --context-size"
        )
        .into());
    }
    Ok(())
}

fn finish_run(report: &RunReport, s: &Settings) -> CmdResult<()> {
    fs::create_dir_all(&s.out_dir)?;
    write_jsonl(report, &s.out_dir.join("run.jsonl"))?;
    write_summary(report, &s.out_dir.join("summary.json"))?;
    println!(
        "{}",
        serde_json::json!({
            "mode": report.mode,
            "calls": report.records.len(),
            "baseline_best": report.baseline_best,
            "final_best_score": report.final_best_score,
            "final_best_sequence": report.final_best_sequence,
            "out": s.out_dir,
        })
    );
    Ok(())
}

fn cmd_explore(opts: &CommonOpts, episodes: Option<usize>) -> CmdResult<()> {
    let (s, _) = resolve(opts)?;
    let eval_cfg = EvaluationConfig::new(s.dataset.task, s.seed);
    let cfg = ExplorerConfig {
        episodes: episodes.unwrap_or(s.episodes),
        seed: s.seed,
        keep_top: opts.keep_top.unwrap_or(10),
        ..ExplorerConfig::default()
    };
    let found = run_exploration(&s.dataset, &eval_cfg, &cfg, &CheckThresholds::default())?;
    let mut lib = load_or_new_library(&s.library_path)?;
    let added = found.len();
    lib.write_back(found, s.loop_cfg.dedup_threshold);
    lib.save(&s.library_path)?;
    println!(
        "{}",
        serde_json::json!({
            "episodes": cfg.episodes,
            "kept": added,
            "library": s.library_path,
            "library_size": lib.len(),
        })
    );
    Ok(())
}

fn cmd_refine(opts: &CommonOpts, enhance: bool) -> CmdResult<()> {
    let (s, _) = resolve(opts)?;
    let eval_cfg = EvaluationConfig::new(s.dataset.task, s.seed);
    let ops = OperatorSet::default();
    let th = CheckThresholds::default();
    let sig = DatasetSignature::of(&s.dataset);
    let mut lib = ExperienceLibrary::load(&s.library_path)?;

    let (pool, rest): (Vec<_>, Vec<_>) = lib
        .experiences
        .drain(..)
        .partition(|e| e.dataset == sig);
    let before = pool.len();
    let mut checked = Vec::new();
    let mut rejected = 0usize;
    for e in pool {
        let verdict = check_sequence(&e.sequence, &s.dataset, &th, &ops, &eval_cfg)?;
        if verdict.passed() {
            checked.push(e);
        } else {
            rejected += 1;
        }
    }
    let kept = filter_outliers(checked);
    let outliers = before - rejected - kept.len();
    lib.experiences = rest;
    lib.write_back(kept, f64::INFINITY); // re-insert without similarity dedup
    let mut enhanced = 0usize;
    if enhance {
        let policy = make_policy(&s)?;
        let traj = build_trajectory(&lib, &sig, &s.loop_cfg.selection)?;
        let rules = GenerationRules::for_dataset(&s.dataset);
        let outcome =
            enhance_trajectory(&traj, policy.as_ref(), &s.dataset, &eval_cfg, &th, &rules, s.seed)?;
        enhanced = outcome.accepted.len();
        lib.write_back(outcome.accepted, s.loop_cfg.dedup_threshold);
    }
    lib.save(&s.library_path)?;
    println!(
        "{}",
        serde_json::json!({
            "checked": before,
            "rejected": rejected,
            "outliers_removed": outliers,
            "enhanced_added": enhanced,
            "library_size": lib.len(),
        })
    );
    Ok(())
}

fn cmd_loop(opts: &CommonOpts) -> CmdResult<()> {
    let (s, _) = resolve(opts)?;
    let eval_cfg = EvaluationConfig::new(s.dataset.task, s.seed);
    let mut lib = load_or_new_library(&s.library_path)?;
    ensure_seeded(&mut lib, &s, &eval_cfg)?;
    let policy = make_policy(&s)?;
    let report = run_closed_loop(&s.dataset, &mut lib, policy.as_ref(), &s.loop_cfg, &eval_cfg)?;
    lib.save(&s.library_path)?;
    finish_run(&report, &s)
}

fn cmd_oneshot(opts: &CommonOpts, mode: OneShotMode) -> CmdResult<()> {
    let (mut s, _) = resolve(opts)?;
    s.loop_cfg.mode = match mode {
        OneShotMode::Fixed => RunMode::OneShotFixed,
        OneShotMode::Resample => RunMode::OneShotResample,
    };
    let eval_cfg = EvaluationConfig::new(s.dataset.task, s.seed);
    let mut lib = load_or_new_library(&s.library_path)?;
    ensure_seeded(&mut lib, &s, &eval_cfg)?;
    lib.save(&s.library_path)?; // persist any seeding; the run itself never writes
    let policy = make_policy(&s)?;
    let report = run_one_shot(&s.dataset, &lib, policy.as_ref(), &s.loop_cfg, &eval_cfg)?;
    finish_run(&report, &s)
}

fn cmd_eval(opts: &CommonOpts, sequence: Option<&Path>) -> CmdResult<()> {
    let (s, _) = resolve(opts)?;
    let eval_cfg = EvaluationConfig::new(s.dataset.task, s.seed);
    let ops = OperatorSet::default();
    let (score, applied) = match sequence {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let seq = parse_sequence(text.trim(), &ops, s.dataset.feature_count())?;
            let transformed =
                execute_sequence(&seq, &s.dataset, ExecutionMode::Append, &ops)?;
            (
                cross_validated_score(&transformed, &eval_cfg)?,
                Some(render_sequence(&seq, RenderStyle::Postfix, &ops)),
            )
        }
        None => (cross_validated_score(&s.dataset, &eval_cfg)?, None),
    };
    println!(
        "{}",
        serde_json::json!({
            "metric": score.metric,
            "value": score.value,
            "sequence": applied,
        })
    );
    Ok(())
}

fn cmd_report(run: &Path, out: Option<&Path>) -> CmdResult<()> {
    let records = read_jsonl(run)?;
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| run.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    let written = emit_artifacts(&records, &out_dir)?;
    println!(
        "{}",
        serde_json::json!({
            "records": records.len(),
            "files": written,
        })
    );
    Ok(())
}

fn run(cli: Cli) -> CmdResult<()> {
    match &cli.command {
        Command::Explore { opts, episodes } => cmd_explore(opts, *episodes),
        Command::Refine { opts, enhance } => cmd_refine(opts, *enhance),
        Command::Loop { opts } => cmd_loop(opts),
        Command::Oneshot { opts, mode } => cmd_oneshot(opts, *mode),
        Command::Eval { opts, sequence } => cmd_eval(opts, sequence.as_deref()),
        Command::Report { run, out } => cmd_report(run, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
