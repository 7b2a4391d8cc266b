//! Command-line entry point tying the pipeline together: `asd` diversifies
//! a JSONL dataset, `synth` generates a task suite, `train` runs the
//! sequential trainer, `report` summarizes a run directory, and `eval`
//! scores a saved checkpoint.
//!
//! Flags override the `--config` file, which overrides built-in defaults.
//! Every mutating subcommand writes its fully resolved config next to its
//! outputs. Successful commands end with one machine-readable line,
//! `RESULT {...}`, holding the numbers a caller would otherwise scrape from
//! the tables.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid config or data, 3 strict-mode
//! rewriter failure, 4 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use forgetlab::asd::{transform_dataset, AsdError};
use forgetlab::checkpoint::{self, CheckpointError, Payload, TaskSuiteFile};
use forgetlab::config::{
    self, ConfigError, Overlay, RewriterBackend, RunManifest, RunRecord, CONFIG_FILE,
    CONTENT_CSV, ENV_REWRITER_URL, JOINT_CSV, MANIFEST_FILE, STYLE_CSV,
};
use forgetlab::metrics::{bwt, maa, mfn, mft, AccuracyMatrix};
use forgetlab::qa_format::{parse_dataset, serialize_dataset, DatasetError};
use forgetlab::toy_tasks::{generate_task_suite, SuiteConfig};
use forgetlab::trainer::{evaluate, run_sequence, BaselineMode, TrainConfig, TrainError};

#[derive(Parser)]
#[command(
    name = "forgetlab",
    version,
    about = "Desk-scale laboratory for answer-style diversification and regularized adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Diversify a JSONL instruction dataset across answer styles.
    Asd(AsdArgs),
    /// Generate a synthetic task suite.
    Synth(SynthArgs),
    /// Train the sequential model and emit matrices plus checkpoints.
    Train(TrainArgs),
    /// Summarize a training run's accuracy matrices.
    Report(ReportArgs),
    /// Evaluate a saved checkpoint against a task suite.
    Eval(EvalArgs),
}

#[derive(Args)]
struct AsdArgs {
    /// Input JSONL dataset.
    #[arg(long)]
    input: PathBuf,
    /// Output JSONL path; the resolved config lands next to it.
    #[arg(long)]
    output: PathBuf,
    /// Config file supplying defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Percentage of each source-format group to transform.
    #[arg(long)]
    x: Option<f64>,
    /// Root seed for plan and per-sample generators.
    #[arg(long)]
    seed: Option<u64>,
    /// Rewrite backend: template or http.
    #[arg(long)]
    rewriter: Option<RewriterBackend>,
    /// Abort on the first conversion failure instead of retaining.
    #[arg(long)]
    strict: bool,
    /// Rule-overrides file keyed by dataset name (entry "*" is the
    /// fallback).
    #[arg(long)]
    overrides: Option<PathBuf>,
    /// Rewrite-service URL for the http backend.
    #[arg(long)]
    endpoint: Option<String>,
    /// Per-request timeout for the http backend.
    #[arg(long)]
    timeout_ms: Option<u64>,
    /// Additional http attempts after the first (at most 5).
    #[arg(long)]
    retries: Option<u32>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output task-suite file.
    #[arg(long)]
    out: PathBuf,
    /// Config file supplying defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Percentage of samples given a non-dominant style.
    #[arg(long)]
    mix: Option<f64>,
    /// Tasks in the suite.
    #[arg(long)]
    n_tasks: Option<usize>,
    /// Samples per task.
    #[arg(long)]
    samples: Option<usize>,
    /// Suite generation seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Task-suite file from `synth`; omitted, each seed generates its own
    /// suite from the config.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Config file supplying defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss to optimize: plain or reglora.
    #[arg(long)]
    mode: Option<BaselineMode>,
    /// Key-element percentage for the regularizer.
    #[arg(long)]
    m: Option<f64>,
    /// Regularization strength.
    #[arg(long)]
    lambda: Option<f64>,
    /// Style-mix percentage for generated suites.
    #[arg(long)]
    mix: Option<f64>,
    /// Training epochs per task.
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated seed list; each seed is one full run.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory for matrices, checkpoints, and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Training output directory holding the run manifest.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint file from `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task-suite file to score the model on.
    #[arg(long)]
    tasks: PathBuf,
}

/// A command failure carrying its documented exit code: 2 for invalid
/// config or data, 3 for a strict-mode rewriter failure, 4 for training
/// divergence.
enum Failure {
    Validation(String),
    Rewriter(String),
    Diverged(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Rewriter(_) => 3,
            Failure::Diverged(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Rewriter(m) | Failure::Diverged(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure::Validation(e.to_string())
    }
}

type CmdResult = Result<serde_json::Value, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are requested output, not usage errors.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Asd(args) => cmd_asd(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Report(args) => cmd_report(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match outcome {
        Ok(summary) => {
            println!("RESULT {summary}");
            ExitCode::SUCCESS
        }
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn env_rewriter_url() -> Option<String> {
    std::env::var(ENV_REWRITER_URL).ok()
}

/// Where a file-producing subcommand writes its resolved config: next to
/// the output, as `<stem>.config.json`.
fn config_sibling(output: &Path) -> PathBuf {
    output.with_extension("config.json")
}

fn metrics_json(a: &AccuracyMatrix) -> serde_json::Value {
    json!({
        "mft": mft(a),
        "mfn": mfn(a),
        "maa": maa(a),
        "bwt": bwt(a),
    })
}

fn cmd_asd(args: AsdArgs) -> CmdResult {
    let overlay = Overlay {
        x: args.x,
        seed: args.seed,
        strict: args.strict.then_some(true),
        rewriter: args.rewriter,
        endpoint: args.endpoint,
        timeout_ms: args.timeout_ms,
        retries: args.retries,
        ..Overlay::default()
    };
    let mut config = config::resolve(args.config.as_deref(), &overlay)?;

    let name = args
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let dataset = parse_dataset(&name, &read_file(&args.input)?)?;
    if let Some(path) = &args.overrides {
        let map = config::load_overrides(path)?;
        config.overrides = config::select_overrides(&map, &dataset.name);
    }

    let rewriter = config.rewriter.build(env_rewriter_url().as_deref())?;
    let (transformed, log) = transform_dataset(
        &dataset,
        &config.asd,
        &config.overrides,
        rewriter.as_ref(),
    )
    .map_err(|e| match e {
        AsdError::Rewrite(inner) => Failure::Rewriter(format!(
            "strict mode: rewrite failed and nothing was written: {inner}"
        )),
        other => Failure::Validation(other.to_string()),
    })?;

    write_file(&args.output, &serialize_dataset(&transformed))?;
    let config_path = config_sibling(&args.output);
    config.save(&config_path)?;
    Ok(json!({
        "command": "asd",
        "input": args.input,
        "output": args.output,
        "config": config_path,
        "x": config.asd.percent,
        "total": log.total,
        "transformed": log.transformed,
        "retained": log.retained,
        "failed": log.failed,
        "by_pair": log.by_pair,
    }))
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let overlay = Overlay {
        mix: args.mix,
        n_tasks: args.n_tasks,
        samples: args.samples,
        seed: args.seed,
        ..Overlay::default()
    };
    let config = config::resolve(args.config.as_deref(), &overlay)?;
    let tasks =
        generate_task_suite(&config.suite).map_err(|e| Failure::Validation(e.to_string()))?;
    let total: usize = tasks.iter().map(|t| t.samples.len()).sum();
    checkpoint::save(
        &args.out,
        &Payload::TaskSuite(TaskSuiteFile {
            config: config.suite.clone(),
            tasks,
        }),
    )?;
    let config_path = config_sibling(&args.out);
    config.save(&config_path)?;
    Ok(json!({
        "command": "synth",
        "out": args.out,
        "config": config_path,
        "n_tasks": config.suite.n_tasks,
        "samples_per_task": config.suite.samples_per_task,
        "total_samples": total,
        "mix": config.suite.style_mix_percent,
        "seed": config.suite.seed,
    }))
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let overlay = Overlay {
        mode: args.mode,
        m_percent: args.m,
        lambda: args.lambda,
        mix: args.mix,
        epochs: args.epochs,
        seeds: args.seeds,
        out_dir: args.out,
        ..Overlay::default()
    };
    let config = config::resolve(args.config.as_deref(), &overlay)?;

    let fixed_suite = match &args.tasks {
        Some(path) => match checkpoint::load(path)? {
            Payload::TaskSuite(file) => Some(file),
            Payload::Checkpoint(_) => {
                return Err(Failure::Validation(format!(
                    "{}: expected a task-suite file, found a model checkpoint",
                    path.display()
                )))
            }
        },
        None => None,
    };

    fs::create_dir_all(&config.out_dir)
        .map_err(|e| Failure::Validation(format!("{}: {e}", config.out_dir.display())))?;
    config.save(&config.out_dir.join(CONFIG_FILE))?;
    let manifest_path = config.out_dir.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        RunManifest::load(&manifest_path)?
    } else {
        RunManifest::default()
    };

    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let (suite_config, tasks) = match &fixed_suite {
            Some(file) => (file.config.clone(), file.tasks.clone()),
            None => {
                let suite_config = SuiteConfig {
                    seed,
                    ..config.suite.clone()
                };
                let tasks = generate_task_suite(&suite_config)
                    .map_err(|e| Failure::Validation(e.to_string()))?;
                (suite_config, tasks)
            }
        };
        let train_config = TrainConfig {
            seed,
            ..config.train.clone()
        };
        let outcome = run_sequence(&tasks, &train_config).map_err(|e| match e {
            TrainError::Diverged { .. } => Failure::Diverged(e.to_string()),
            other => Failure::Validation(other.to_string()),
        })?;

        let rel = RunRecord::dir_for(train_config.mode, seed);
        let dir = config.out_dir.join(&rel);
        fs::create_dir_all(&dir)
            .map_err(|e| Failure::Validation(format!("{}: {e}", dir.display())))?;
        write_file(&dir.join(JOINT_CSV), &outcome.joint.to_csv())?;
        write_file(&dir.join(STYLE_CSV), &outcome.style.to_csv())?;
        write_file(&dir.join(CONTENT_CSV), &outcome.content.to_csv())?;
        for (j, cp) in outcome.checkpoints.iter().enumerate() {
            checkpoint::save(
                &dir.join(format!("task_{j}.flab")),
                &Payload::Checkpoint(cp.clone()),
            )?;
        }
        // Each run directory records exactly what produced it.
        let mut run_config = config.clone();
        run_config.train = train_config.clone();
        run_config.suite = suite_config;
        run_config.seeds = vec![seed];
        run_config.save(&dir.join(CONFIG_FILE))?;

        manifest.upsert(RunRecord {
            mode: train_config.mode,
            seed,
            dir: rel.clone(),
            tasks: tasks.len(),
        });
        runs.push(json!({
            "mode": train_config.mode.to_string(),
            "seed": seed,
            "dir": rel,
            "tasks": tasks.len(),
            "joint": metrics_json(&outcome.joint),
            "style": metrics_json(&outcome.style),
            "content": metrics_json(&outcome.content),
        }));
        println!(
            "trained mode={} seed={} tasks={} joint BWT {:+.2}",
            train_config.mode,
            seed,
            tasks.len(),
            bwt(&outcome.joint)
        );
    }
    manifest.save(&manifest_path)?;
    Ok(json!({
        "command": "train",
        "out_dir": config.out_dir,
        "manifest": manifest_path,
        "runs": runs,
    }))
}

/// The four metrics of one loaded matrix, plus the values needed for mean
/// rows.
struct ReportRow {
    seed: u64,
    values: [f64; 4],
}

fn report_view(
    run_dir: &Path,
    manifest: &RunManifest,
    csv_name: &str,
) -> Result<Vec<(BaselineMode, Vec<ReportRow>)>, Failure> {
    let mut groups: Vec<(BaselineMode, Vec<ReportRow>)> = Vec::new();
    for record in &manifest.runs {
        let path = run_dir.join(&record.dir).join(csv_name);
        let matrix = AccuracyMatrix::from_csv(&read_file(&path)?)
            .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
        let row = ReportRow {
            seed: record.seed,
            values: [mft(&matrix), mfn(&matrix), maa(&matrix), bwt(&matrix)],
        };
        match groups.iter_mut().find(|(mode, _)| *mode == record.mode) {
            Some((_, rows)) => rows.push(row),
            None => groups.push((record.mode, vec![row])),
        }
    }
    Ok(groups)
}

fn mean_values(rows: &[ReportRow]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for row in rows {
        for (acc, v) in out.iter_mut().zip(row.values) {
            *acc += v;
        }
    }
    out.map(|v| v / rows.len() as f64)
}

fn cmd_report(args: ReportArgs) -> CmdResult {
    let manifest = RunManifest::load(&args.run.join(MANIFEST_FILE))?;
    if manifest.runs.is_empty() {
        return Err(Failure::Validation(format!(
            "{}: manifest lists no runs",
            args.run.display()
        )));
    }

    let views = [
        ("joint", JOINT_CSV),
        ("style", STYLE_CSV),
        ("content", CONTENT_CSV),
    ];
    let mut summary = serde_json::Map::new();
    for (view, csv_name) in views {
        let groups = report_view(&args.run, &manifest, csv_name)?;
        println!("{view} accuracy");
        println!(
            "{:<10} {:>6} {:>9} {:>9} {:>9} {:>9}",
            "mode", "seed", "MFT", "MFN", "MAA", "BWT"
        );
        let mut view_json = serde_json::Map::new();
        for (mode, rows) in &groups {
            for row in rows {
                let [mft_v, mfn_v, maa_v, bwt_v] = row.values;
                println!(
                    "{:<10} {:>6} {:>9.2} {:>9.2} {:>9.2} {:>9.2}",
                    mode.to_string(),
                    row.seed,
                    mft_v,
                    mfn_v,
                    maa_v,
                    bwt_v
                );
            }
            let [mft_m, mfn_m, maa_m, bwt_m] = mean_values(rows);
            println!(
                "{:<10} {:>6} {:>9.2} {:>9.2} {:>9.2} {:>9.2}",
                mode.to_string(),
                "mean",
                mft_m,
                mfn_m,
                maa_m,
                bwt_m
            );
            view_json.insert(
                mode.to_string(),
                json!({
                    "seeds": rows.iter().map(|r| json!({
                        "seed": r.seed,
                        "mft": r.values[0],
                        "mfn": r.values[1],
                        "maa": r.values[2],
                        "bwt": r.values[3],
                    })).collect::<Vec<_>>(),
                    "mean": {
                        "mft": mft_m,
                        "mfn": mfn_m,
                        "maa": maa_m,
                        "bwt": bwt_m,
                    },
                }),
            );
        }
        println!();
        summary.insert(view.to_string(), serde_json::Value::Object(view_json));
    }
    Ok(json!({
        "command": "report",
        "run": args.run,
        "views": summary,
    }))
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let checkpoint = match checkpoint::load(&args.checkpoint)? {
        Payload::Checkpoint(cp) => cp,
        Payload::TaskSuite(_) => {
            return Err(Failure::Validation(format!(
                "{}: expected a model checkpoint, found a task suite",
                args.checkpoint.display()
            )))
        }
    };
    let suite = match checkpoint::load(&args.tasks)? {
        Payload::TaskSuite(file) => file,
        Payload::Checkpoint(_) => {
            return Err(Failure::Validation(format!(
                "{}: expected a task-suite file, found a model checkpoint",
                args.tasks.display()
            )))
        }
    };
    let model = checkpoint.to_model()?;
    if suite.config.d_in != model.d_in() {
        return Err(Failure::Validation(format!(
            "suite input width {} does not match the model's {}",
            suite.config.d_in,
            model.d_in()
        )));
    }
    if suite.config.n_content > model.n_content() {
        return Err(Failure::Validation(format!(
            "suite has {} content classes but the model scores only {}",
            suite.config.n_content,
            model.n_content()
        )));
    }

    println!(
        "checkpoint {} (after {} tasks)",
        args.checkpoint.display(),
        checkpoint.tasks_completed
    );
    println!(
        "{:<6} {:>9} {:>9} {:>9}",
        "task", "joint", "style", "content"
    );
    let mut per_task = Vec::new();
    let mut sums = [0.0; 3];
    for task in &suite.tasks {
        let acc = evaluate(&model, task.heldout())
            .map_err(|e| Failure::Validation(e.to_string()))?;
        println!(
            "{:<6} {:>9.2} {:>9.2} {:>9.2}",
            task.index, acc.joint, acc.style, acc.content
        );
        sums[0] += acc.joint;
        sums[1] += acc.style;
        sums[2] += acc.content;
        per_task.push(json!({
            "task": task.index,
            "joint": acc.joint,
            "style": acc.style,
            "content": acc.content,
        }));
    }
    let n = suite.tasks.len() as f64;
    let mean = [sums[0] / n, sums[1] / n, sums[2] / n];
    println!(
        "{:<6} {:>9.2} {:>9.2} {:>9.2}",
        "mean", mean[0], mean[1], mean[2]
    );
    Ok(json!({
        "command": "eval",
        "checkpoint": args.checkpoint,
        "tasks": args.tasks,
        "tasks_completed": checkpoint.tasks_completed,
        "per_task": per_task,
        "mean": {
            "joint": mean[0],
            "style": mean[1],
            "content": mean[2],
        },
    }))
}
