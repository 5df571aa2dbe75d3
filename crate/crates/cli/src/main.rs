//! `skorder` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure (including
//! failed invariant checks), 4 data error.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use skorder::checks::{run_suites, Suite};
use skorder::dist::directed_marginals;
use skorder::encoder::load_checkpoint;
use skorder::graph::is_acyclic;
use skorder::io::{
    beliefs_to_json, data_from_csv, graph_to_json, list_bundles, marginals_to_csv, read_bundle,
    standardize_columns, write_bundle,
};
use skorder::metrics::{evaluate, MetricReport, MetricSummary};
use skorder::par::Exec;
use skorder::taskgen::{sample_task, OodPreset, TaskConfig};
use skorder::trainer::{train_stream, write_atomic, RunDir, TrainConfig};
use skorder::{Error, Result};

use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "skorder",
    version,
    about = "Amortized causal discovery with skeleton-order DAG distributions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic task bundles (data.csv, graph.json, meta.json).
    Generate(GenerateArgs),
    /// Train an encoder on a stream of fresh tasks.
    Train(TrainArgs),
    /// Predict a DAG and edge beliefs for a CSV dataset.
    Predict(PredictArgs),
    /// Score a checkpoint on a directory of task bundles.
    Eval(EvalArgs),
    /// Run invariant suites and print one JSON line per invariant.
    Check(CheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Task configuration JSON; defaults to the full training distribution.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Distribution shift applied on top of the configuration.
    #[arg(long)]
    ood: Option<String>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training configuration JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Numeric CSV, one column per variable, optional header.
    #[arg(long)]
    data: PathBuf,
    /// Predicted graph JSON; beliefs and marginals are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory of task bundles.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct CheckArgs {
    /// factorization, likelihood, generator, encoder, metrics or all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Also write the results as a JSON array.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Json(_) => 2,
        Error::NonFinite(_)
        | Error::Domain(_)
        | Error::Cyclic
        | Error::EnumerationOverflow { .. }
        | Error::InvalidPermutation(_) => 3,
        Error::Data { .. }
        | Error::Format(_)
        | Error::Io(_)
        | Error::DimensionMismatch { .. }
        | Error::Shape { .. } => 4,
    }
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

/// Parses a JSON config, reporting the path of the offending field.
fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::config(
            if field == "." {
                "<root>".to_string()
            } else {
                field
            },
            e.inner().to_string(),
        )
    })
}

fn generate(args: GenerateArgs, mut manifest: RunManifest) -> Result<()> {
    let mut cfg: TaskConfig = match &args.config {
        Some(p) => load_config(p)?,
        None => TaskConfig::default(),
    };
    if let Some(name) = &args.ood {
        cfg = name.parse::<OodPreset>()?.apply(&cfg);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    fs::create_dir_all(&args.out)?;
    let width = args.count.saturating_sub(1).to_string().len().max(6);
    let tasks: Vec<Result<PathBuf>> =
        exec(args.sequential).map_range(0..args.count as usize, |i| {
            let task = sample_task(&cfg, i as u64)?;
            let dir = args.out.join(format!("task-{i:0width$}"));
            write_bundle(&dir, &task)?;
            Ok(dir)
        });
    for t in tasks {
        manifest.outputs.push(t?);
    }
    log::info!(
        "wrote {} task bundles to {}",
        args.count,
        args.out.display()
    );
    manifest.seed = Some(cfg.seed);
    manifest.config = serde_json::to_value(&cfg)?;
    manifest.finish(&args.out.join("manifest.json"))
}

fn train(args: TrainArgs, mut manifest: RunManifest) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.sequential {
        cfg.exec = Exec::Sequential;
    }
    cfg.validate()?;
    let dir = RunDir::new(&args.out)?;
    manifest.seed = Some(cfg.seed);
    manifest.config = serde_json::to_value(&cfg)?;
    // Written up front so checkpoints of an unfinished run can be traced.
    manifest.write(&args.out.join("manifest.json"))?;
    let out = train_stream(&cfg, Some(&dir), args.resume)?;
    let first = out.log.val.first();
    let last = out.log.val.last();
    if let (Some(a), Some(b)) = (first, last) {
        log::info!(
            "validation nll {:.4} -> {:.4} after {} updates",
            a.val_nll,
            b.val_nll,
            b.iteration
        );
    }
    manifest
        .outputs
        .extend([dir.final_checkpoint(), dir.train_csv(), dir.val_csv()]);
    manifest.finish(&args.out.join("manifest.json"))
}

/// Largest p the model was trained on, if its run manifest sits next to
/// the checkpoint (or one directory up, for files under `checkpoints/`).
fn trained_support(model: &Path) -> Option<usize> {
    let dir = model.parent()?;
    [
        dir.join("manifest.json"),
        dir.parent()?.join("manifest.json"),
    ]
    .iter()
    .filter_map(|p| fs::read_to_string(p).ok())
    .filter_map(|t| serde_json::from_str::<RunManifest>(&t).ok())
    .find(|m| m.command == "train")
    .and_then(|m| serde_json::from_value::<TrainConfig>(m.config).ok())
    .map(|c| c.task.p_range[1])
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = if stem == "graph" {
        name.to_string()
    } else {
        format!("{stem}.{name}")
    };
    path.with_file_name(file)
}

fn predict(args: PredictArgs, mut manifest: RunManifest) -> Result<()> {
    let params = load_checkpoint(&args.model)?;
    let mut table = data_from_csv(&fs::read_to_string(&args.data)?)?;
    let p = table.data.shape()[1];
    if let Some(max_p) = trained_support(&args.model) {
        if p > max_p {
            return Err(Error::Data {
                row: 0,
                col: p,
                msg: format!("{p} columns exceed the {max_p} variables the model was trained on"),
            });
        }
    }
    standardize_columns(&mut table.data)?;
    let (graph, beliefs, secs) = skorder::metrics::timed_predict(&params, &table.data)?;
    if !is_acyclic(&graph) {
        return Err(Error::Cyclic);
    }
    let beliefs_path = sibling(&args.out, "beliefs.json");
    let marginals_path = sibling(&args.out, "marginals.csv");
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(&args.out, graph_to_json(&graph).as_bytes())?;
    write_atomic(&beliefs_path, beliefs_to_json(&beliefs).as_bytes())?;
    write_atomic(
        &marginals_path,
        marginals_to_csv(&directed_marginals(&beliefs)).as_bytes(),
    )?;
    log::info!(
        "predicted {} edges over {p} variables in {:.3} ms",
        graph.edge_count(),
        secs * 1e3
    );
    manifest.config = serde_json::json!({
        "encoder": params.config(),
        "columns": table.columns,
    });
    manifest
        .inputs
        .extend([args.model.clone(), args.data.clone()]);
    manifest
        .outputs
        .extend([args.out.clone(), beliefs_path, marginals_path]);
    manifest.finish(&sibling(&args.out, "manifest.json"))
}

const REPORT_HEADER: &str =
    "task,n,p,edges,shd,nshd,nshd_se,f1,f1_se,ap,ap_se,runtime_seconds,runtime_seconds_se";

fn report_csv(
    names: &[String],
    tasks: &[(usize, usize, usize)],
    reports: &[MetricReport],
    summary: &MetricSummary,
) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for ((name, (n, p, e)), r) in names.iter().zip(tasks).zip(reports) {
        s.push_str(&format!(
            "{name},{n},{p},{e},{},{},,{},,{},,{},\n",
            r.shd, r.nshd, r.f1, r.ap, r.runtime_seconds
        ));
    }
    s.push_str(&format!(
        "summary,,,,,{},{},{},{},{},{},{},{}\n",
        summary.nshd.mean,
        summary.nshd.se,
        summary.f1.mean,
        summary.f1.se,
        summary.ap.mean,
        summary.ap.se,
        summary.runtime_seconds.mean,
        summary.runtime_seconds.se
    ));
    s
}

fn eval(args: EvalArgs, mut manifest: RunManifest) -> Result<()> {
    let params = load_checkpoint(&args.model)?;
    let dirs = list_bundles(&args.tasks)?;
    if dirs.is_empty() {
        return Err(Error::Data {
            row: 0,
            col: 0,
            msg: format!("no task bundles under {}", args.tasks.display()),
        });
    }
    let tasks = dirs
        .iter()
        .map(|d| read_bundle(d))
        .collect::<Result<Vec<_>>>()?;
    let (reports, summary) = evaluate(&params, &tasks, exec(args.sequential))?;
    let names: Vec<String> = dirs
        .iter()
        .map(|d| {
            d.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    let shapes: Vec<_> = tasks
        .iter()
        .map(|t| (t.n(), t.p(), t.gstar.edge_count()))
        .collect();
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(
        &args.out,
        report_csv(&names, &shapes, &reports, &summary).as_bytes(),
    )?;
    log::info!(
        "{} tasks: nSHD {:.3} ± {:.3}, F1 {:.3} ± {:.3}, AP {:.3} ± {:.3}",
        summary.tasks,
        summary.nshd.mean,
        summary.nshd.se,
        summary.f1.mean,
        summary.f1.se,
        summary.ap.mean,
        summary.ap.se
    );
    manifest.config = serde_json::json!({ "encoder": params.config() });
    manifest
        .inputs
        .extend([args.model.clone(), args.tasks.clone()]);
    manifest.outputs.push(args.out.clone());
    manifest.finish(&sibling(&args.out, "manifest.json"))
}

fn check(args: CheckArgs, mut manifest: RunManifest) -> Result<()> {
    let suites = Suite::parse_selection(&args.suite)?;
    let results = run_suites(&suites);
    for r in &results {
        println!("{}", serde_json::to_string(r)?);
    }
    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}/{}", r.suite, r.name))
        .collect();
    if let Some(out) = &args.out {
        write_atomic(out, serde_json::to_string_pretty(&results)?.as_bytes())?;
        manifest.config = serde_json::json!({ "suite": args.suite });
        manifest.outputs.push(out.clone());
        manifest.finish(&sibling(out, "manifest.json"))?;
    }
    if !failed.is_empty() {
        return Err(Error::NonFinite(format!(
            "{} invariant(s) failed: {}",
            failed.len(),
            failed.join(", ")
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let manifest = RunManifest::start(std::env::args().collect());
    let result = match cli.command {
        Command::Generate(a) => generate(a, manifest.named("generate")),
        Command::Train(a) => train(a, manifest.named("train")),
        Command::Predict(a) => predict(a, manifest.named("predict")),
        Command::Eval(a) => eval(a, manifest.named("eval")),
        Command::Check(a) => check(a, manifest.named("check")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
